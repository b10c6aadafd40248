//! Clip-level encode, decode, channel simulation and benchmarks.

pub mod bench;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod simulate;
pub mod video;

pub use codec::{decode_stream, decode_video, encode_video, load_model, reconstruct, strip_residuals, EncodeReport, Encoded};
pub use config::EncodeConfig;
pub use simulate::{simulate, MetricsRow, Verdict};
pub use video::VideoSequence;
