use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pmob::bitstream::{measured_bitrate, Stream, StreamHeader};
use pmob::denoiser::{read_weights, write_weights, Model};
use pmob::pipeline::bench::{self, Sweep};
use pmob::pipeline::config::preset;
use pmob::pipeline::simulate::{simulate, write_metrics_csv};
use pmob::pipeline::{decode_stream, encode_video, load_model, EncodeConfig, VideoSequence};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] pmob::Error),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "pmob", version, about = "Prompt-stream video codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit prompts to a clip and write a stream.
    Encode {
        /// Directory of PPM frames or a planar `.rgb` file with a `.txt` sidecar.
        #[arg(long)]
        input: PathBuf,
        /// key=value settings file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct frames from a stream.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Output directory, or a path ending in `.rgb` for raw output.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a stream against a bandwidth cap and report per-frame metrics.
    Simulate {
        #[arg(long = "in")]
        input: PathBuf,
        /// Reference clip for the quality columns.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Bits per second.
        #[arg(long, default_value_t = 280_000.0)]
        bandwidth: f64,
        #[arg(long)]
        report: PathBuf,
        /// Weight file; without it the seed-0 presets are matched by hash.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Run a cost/quality sweep.
    Bench {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write a seeded model's weights.
    Genmodel {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// desk or micro.
        #[arg(long, default_value = "desk")]
        model: String,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::File {
        path: path.into(),
        source,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::File {
        path: path.into(),
        source,
    })
}

fn open_weights(path: &Path) -> Result<Model> {
    let f = File::open(path).map_err(|source| CliError::File {
        path: path.into(),
        source,
    })?;
    Ok(read_weights(BufReader::new(f))?)
}

/// A seed-0 preset whose weights hash to the stream's.
fn preset_for(h: &StreamHeader) -> Result<Model> {
    for name in ["desk", "micro"] {
        let m = Model::generate(preset(name)?, 0)?;
        if m.weight_hash() == h.weight_hash {
            return Ok(m);
        }
    }
    Err(CliError::Usage(format!(
        "no built-in model matches weight hash {:#018x}; pass --weights",
        h.weight_hash
    )))
}

fn encode(input: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = EncodeConfig::parse(&read_text(config)?)?;
    let model = load_model(&cfg)?;
    let src = VideoSequence::load(input, cfg.fps)?;
    let enc = encode_video(&src, &model, &cfg)?;
    fs::write(out, &enc.bytes).map_err(|source| CliError::File {
        path: out.into(),
        source,
    })?;
    let rate = measured_bitrate(&enc.bytes, enc.stream.duration())?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!(
        "{} frames, {} bytes, {:.0} bps, PSNR {:.2} dB ({:.2} dB before residuals)",
        src.len(),
        enc.bytes.len(),
        rate.bps,
        mean(&enc.report.final_psnr),
        mean(&enc.report.recon_psnr)
    );
    let b = rate.breakdown;
    println!(
        "bits: prompt {} scheme {} plan {} residual {} overhead {}",
        b.prompt, b.scheme, b.plan, b.residual, b.overhead
    );
    if !enc.report.scene_cuts.is_empty() {
        println!("scene cuts at stitched frames {:?}", enc.report.scene_cuts);
    }
    Ok(())
}

fn decode(input: &Path, weights: &Path, out: &Path) -> Result<()> {
    let model = open_weights(weights)?;
    let stream = Stream::unpack(&read_bytes(input)?)?;
    let video = decode_stream(&stream, &model)?;
    if out.extension().is_some_and(|e| e == "rgb") {
        video.save_raw(out)?;
    } else {
        video.save_ppm_dir(out)?;
    }
    println!("{} frames written to {}", video.len(), out.display());
    Ok(())
}

fn run_simulate(input: &Path, reference: Option<&Path>, bandwidth: f64, report: &Path, weights: Option<&Path>) -> Result<bool> {
    let bytes = read_bytes(input)?;
    let stream = Stream::unpack(&bytes)?;
    let model = match weights {
        Some(p) => open_weights(p)?,
        None => preset_for(&stream.header)?,
    };
    let fps = (stream.header.fps_num, stream.header.fps_den);
    let clip = reference.map(|p| VideoSequence::load(p, fps)).transpose()?;
    let (verdict, rows) = simulate(&bytes, bandwidth, &model, clip.as_ref())?;
    write_metrics_csv(report, &rows)?;
    println!(
        "mean {:.0} bps over the clip; busiest 1 s window is frames {}..{} at {:.0} bps",
        verdict.mean_bps, verdict.peak.start, verdict.peak.end, verdict.peak.bps
    );
    match verdict.first_violation {
        None => println!("PASS: within {bandwidth:.0} bps"),
        Some(v) => println!(
            "FAIL: frames {}..{} carry {} bits ({:.0} bps > {bandwidth:.0})",
            v.start, v.end, v.bits, v.bps
        ),
    }
    Ok(verdict.pass)
}

fn run_bench(sweep: &Path, report: &Path) -> Result<()> {
    let s = Sweep::parse(&read_text(sweep)?)?;
    let rows = bench::run(&s)?;
    bench::write_csv(report, &rows)?;
    println!("{} rows written to {}", rows.len(), report.display());
    Ok(())
}

fn genmodel(seed: u64, out: &Path, name: &str) -> Result<()> {
    let model = Model::generate(preset(name)?, seed)?;
    let f = File::create(out).map_err(|source| CliError::File {
        path: out.into(),
        source,
    })?;
    write_weights(&model, BufWriter::new(f))?;
    println!("{name} model, seed {seed}, weight hash {:#018x}", model.weight_hash());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Encode { input, config, out } => encode(input, config, out).map(|_| true),
        Cmd::Decode { input, weights, out } => decode(input, weights, out).map(|_| true),
        Cmd::Simulate {
            input,
            reference,
            bandwidth,
            report,
            weights,
        } => run_simulate(input, reference.as_deref(), *bandwidth, report, weights.as_deref()),
        Cmd::Bench { sweep, report } => run_bench(sweep, report).map(|_| true),
        Cmd::Genmodel { seed, out, model } => genmodel(*seed, out, model).map(|_| true),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        // bandwidth exceeded
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
