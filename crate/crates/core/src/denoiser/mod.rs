//! Seeded single-step noise-to-latent predictor, tiny latent decoder and
//! bicubic upsampling.
//!
//! The network runs at two spatial scales: `conv_in`, the high-resolution
//! blocks, a stride-2 conv, the low-resolution blocks, nearest upsampling
//! with a conv, a skip add, then `conv_out`. Every block is residual and
//! reports its contribution so the cache engine can reuse it.

mod flops;
mod weights;

pub use flops::{decoder_macs, flop_count, forward_macs, frame_macs, upsample_macs, BlockMacs, FlopReport, ForwardMacs};
pub use weights::{fnv1a64, read_weights, write_weights};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{Element, ResizePlan, Tape, Tensor, Var};
use crate::prompt_codec::PROMPT_TOKENS;
use crate::stitcher::FrameImage;

pub const NORM_GROUPS: usize = 4;

/// Spatial factor between latent and decoded image.
pub const DECODER_FACTOR: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Res = 0,
    SelfAttn = 1,
    CrossAttn = 2,
    FeedForward = 3,
}

impl BlockKind {
    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Self::Res),
            1 => Ok(Self::SelfAttn),
            2 => Ok(Self::CrossAttn),
            3 => Ok(Self::FeedForward),
            _ => Err(Error::Malformed(format!("unknown block kind {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Res => "res",
            Self::SelfAttn => "self_attn",
            Self::CrossAttn => "cross_attn",
            Self::FeedForward => "feed_forward",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub hidden: usize,
    pub d: usize,
    pub blocks_hi: Vec<BlockKind>,
    pub blocks_lo: Vec<BlockKind>,
    /// Channel widths of the three decoder stages.
    pub decoder: [usize; 3],
    /// Bicubic factor from unstitched frames to output frames.
    pub upscale: usize,
}

impl ModelConfig {
    /// 4×32×32 latent, 256² stitched image, four 128² frames, ×4 to 512².
    pub fn desk() -> Self {
        use BlockKind::*;
        Self {
            latent_channels: 4,
            latent_h: 32,
            latent_w: 32,
            hidden: 32,
            d: 64,
            blocks_hi: vec![Res, SelfAttn, CrossAttn, FeedForward],
            blocks_lo: vec![Res, SelfAttn, CrossAttn, FeedForward],
            decoder: [16, 8, 4],
            upscale: 4,
        }
    }

    /// Small enough for finite-difference checks and quick fits.
    pub fn micro() -> Self {
        use BlockKind::*;
        Self {
            latent_channels: 4,
            latent_h: 8,
            latent_w: 8,
            hidden: 16,
            d: 64,
            blocks_hi: vec![CrossAttn],
            blocks_lo: vec![CrossAttn],
            decoder: [16, 8, 4],
            upscale: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.latent_channels == 0 || self.latent_h < 2 || self.latent_w < 2 {
            return bad(format!("latent {}x{}x{} too small", self.latent_channels, self.latent_h, self.latent_w));
        }
        if self.latent_h % 2 != 0 || self.latent_w % 2 != 0 {
            return bad("latent sides must be even".into());
        }
        if self.hidden == 0 || self.hidden % NORM_GROUPS != 0 {
            return bad(format!("hidden width {} must be a positive multiple of {NORM_GROUPS}", self.hidden));
        }
        if self.d == 0 || self.decoder.contains(&0) || self.upscale == 0 {
            return bad("zero width in model config".into());
        }
        if self.n_blocks() > 255 {
            return bad("at most 255 blocks".into());
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks_hi.len() + self.blocks_lo.len()
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockKind> + '_ {
        self.blocks_hi.iter().chain(&self.blocks_lo).copied()
    }

    /// Positions of cross-attention blocks in block order.
    pub fn cross_blocks(&self) -> Vec<usize> {
        self.blocks()
            .enumerate()
            .filter(|(_, k)| *k == BlockKind::CrossAttn)
            .map(|(i, _)| i)
            .collect()
    }

    /// Spatial size a block runs at for a given latent size.
    pub fn block_hw(&self, block: usize, h: usize, w: usize) -> (usize, usize) {
        if block < self.blocks_hi.len() {
            (h, w)
        } else {
            (h / 2, w / 2)
        }
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.latent_h * DECODER_FACTOR, self.latent_w * DECODER_FACTOR)
    }

    /// Size of one unstitched frame before upsampling.
    pub fn frame_hw(&self) -> (usize, usize) {
        let (h, w) = self.image_hw();
        (h / 2, w / 2)
    }

    pub fn output_hw(&self) -> (usize, usize) {
        let (h, w) = self.frame_hw();
        (h * self.upscale, w * self.upscale)
    }
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
enum Block {
    Res { c1: Conv, c2: Conv },
    SelfAttn { q: Lin, k: Lin, v: Lin, o: Lin },
    CrossAttn { q: Lin, k: Lin, v: Lin, o: Lin },
    FeedForward { l1: Lin, l2: Lin },
}

#[derive(Clone, Debug)]
struct Layout {
    conv_in: Conv,
    blocks: Vec<Block>,
    down: Conv,
    up: Conv,
    conv_out: Conv,
    dec: [Conv; 3],
    dec_out: Conv,
}

/// Name, shape and initialization std of every parameter, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub std: f64,
}

const BIAS_STD: f64 = 0.1;
// Keeps the decoder's output from collapsing to flat grey.
const DEC_GAIN: f64 = 2.0;
const DEC_OUT_GAIN: f64 = 4.0;

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<ParamDef>) {
    let mut defs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, std: f64| {
        defs.push(ParamDef { name, shape, std });
        defs.len() - 1
    };
    let conv = |name: &str, ci: usize, co: usize, k: usize, add: &mut dyn FnMut(String, Vec<usize>, f64) -> usize| Conv {
        w: add(format!("{name}.w"), vec![co, ci, k, k], 1.0 / ((ci * k * k) as f64).sqrt()),
        b: add(format!("{name}.b"), vec![co], BIAS_STD),
    };
    let lin = |name: String, i: usize, o: usize, add: &mut dyn FnMut(String, Vec<usize>, f64) -> usize| Lin {
        w: add(format!("{name}.w"), vec![i, o], 1.0 / (i as f64).sqrt()),
        b: add(format!("{name}.b"), vec![o], BIAS_STD),
    };
    let (c, l, d) = (cfg.hidden, cfg.latent_channels, cfg.d);
    let conv_in = conv("conv_in", l, c, 3, &mut add);
    let mut blocks = Vec::new();
    for (i, kind) in cfg.blocks().enumerate() {
        let p = format!("block{i}");
        blocks.push(match kind {
            BlockKind::Res => Block::Res {
                c1: conv(&format!("{p}.conv1"), c, c, 3, &mut add),
                c2: conv(&format!("{p}.conv2"), c, c, 3, &mut add),
            },
            BlockKind::SelfAttn => Block::SelfAttn {
                q: lin(format!("{p}.q"), c, c, &mut add),
                k: lin(format!("{p}.k"), c, c, &mut add),
                v: lin(format!("{p}.v"), c, c, &mut add),
                o: lin(format!("{p}.o"), c, c, &mut add),
            },
            BlockKind::CrossAttn => Block::CrossAttn {
                q: lin(format!("{p}.q"), c, c, &mut add),
                k: lin(format!("{p}.k"), d, c, &mut add),
                v: lin(format!("{p}.v"), d, c, &mut add),
                o: lin(format!("{p}.o"), c, c, &mut add),
            },
            BlockKind::FeedForward => Block::FeedForward {
                l1: lin(format!("{p}.ff1"), c, 2 * c, &mut add),
                l2: lin(format!("{p}.ff2"), 2 * c, c, &mut add),
            },
        });
    }
    let down = conv("down", c, c, 3, &mut add);
    let up = conv("up", c, c, 3, &mut add);
    let conv_out = conv("conv_out", c, l, 3, &mut add);
    let [w0, w1, w2] = cfg.decoder;
    let dec = [
        conv("dec0", l, w0, 3, &mut add),
        conv("dec1", w0, w1, 3, &mut add),
        conv("dec2", w1, w2, 3, &mut add),
    ];
    let dec_out = conv("dec_out", w2, 3, 3, &mut add);
    for c in &dec {
        defs[c.w].std *= DEC_GAIN;
    }
    defs[dec_out.w].std *= DEC_OUT_GAIN;
    (
        Layout {
            conv_in,
            blocks,
            down,
            up,
            conv_out,
            dec,
            dec_out,
        },
        defs,
    )
}

pub fn param_defs(cfg: &ModelConfig) -> Vec<ParamDef> {
    build_layout(cfg).1
}

/// Denoiser plus tiny decoder weights.
#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    cfg: ModelConfig,
    seed: u64,
    layout: Layout,
    params: Vec<Arc<Tensor<T>>>,
    hash: u64,
}

/// How a block produces its contribution for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum BlockMode {
    Compute,
    /// Contribution is `k ⊙ dx + b` with per-channel `k`, `b`.
    Reuse { dx: Var, k: Var, b: Var },
}

/// Source of a cross-attention layer's keys and values.
#[derive(Clone, Copy, Debug)]
pub enum CrossInput {
    Project,
    Supplied { k: Var, v: Var },
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOpts {
    /// One entry per block, or empty for all-compute.
    pub modes: Vec<BlockMode>,
    /// One entry per cross-attention block, or empty to project the prompt.
    pub cross: Vec<CrossInput>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub latent: Var,
    /// Contribution added by each block.
    pub dx: Vec<Var>,
    /// Input and output of each block.
    pub block_io: Vec<(Var, Var)>,
}

struct Bound {
    p: Vec<Var>,
}

impl Bound {
    fn get(&self, i: usize) -> Var {
        self.p[i]
    }
}

impl Model<f32> {
    pub fn generate(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, defs) = build_layout(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(defs.len());
        for s in &defs {
            let n: usize = s.shape.iter().product();
            let dist = Normal::new(0.0, s.std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let data = (0..n).map(|_| dist.sample(&mut rng) as f32).collect();
            params.push(Arc::new(Tensor::new(&s.shape, data)?));
        }
        let hash = weights::hash_params(&params);
        Ok(Self {
            cfg,
            seed,
            layout,
            params,
            hash,
        })
    }

    pub(crate) fn from_params(cfg: ModelConfig, seed: u64, params: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let (layout, defs) = build_layout(&cfg);
        if defs.len() != params.len() {
            return Err(Error::Malformed(format!(
                "expected {} weight tensors, found {}",
                defs.len(),
                params.len()
            )));
        }
        for (s, p) in defs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(Error::Shape {
                    op: "weights",
                    left: s.shape.clone(),
                    right: p.shape().to_vec(),
                });
            }
            if !p.is_finite() {
                return Err(Error::Malformed(format!("non-finite values in {}", s.name)));
            }
        }
        let params: Vec<_> = params.into_iter().map(Arc::new).collect();
        let hash = weights::hash_params(&params);
        Ok(Self {
            cfg,
            seed,
            layout,
            params,
            hash,
        })
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            seed: self.seed,
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| Arc::new(p.cast())).collect(),
            hash: self.hash,
        }
    }
}

fn tokens<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<(Var, [usize; 3])> {
    let s = tape.shape(x);
    let shape = [s[0], s[1], s[2]];
    let flat = tape.reshape(x, &[shape[0], shape[1] * shape[2]])?;
    Ok((tape.transpose(flat)?, shape))
}

fn untokens<T: Element>(tape: &mut Tape<T>, t: Var, shape: [usize; 3]) -> Result<Var> {
    let cm = tape.transpose(t)?;
    tape.reshape(cm, &shape)
}

impl<T: Element> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// FNV-1a over the little-endian f32 weight bytes.
    pub fn weight_hash(&self) -> u64 {
        self.hash
    }

    pub fn params(&self) -> &[Arc<Tensor<T>>] {
        &self.params
    }

    fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            p: self.params.iter().map(|p| tape.constant_arc(p.clone())).collect(),
        }
    }

    fn linear(&self, tape: &mut Tape<T>, b: &Bound, x: Var, l: Lin) -> Result<Var> {
        let y = tape.matmul(x, b.get(l.w))?;
        tape.add_row_bias(y, b.get(l.b))
    }

    fn conv(&self, tape: &mut Tape<T>, b: &Bound, x: Var, c: Conv, stride: usize) -> Result<Var> {
        tape.conv2d(x, b.get(c.w), Some(b.get(c.b)), stride)
    }

    fn attend(&self, tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
        let c = tape.shape(q)[1];
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, T::of(1.0 / (c as f64).sqrt()))?;
        let a = tape.softmax(s)?;
        tape.matmul(a, v)
    }

    /// Cross-attention keys and values of a `[77, d]` prompt, per cross block.
    pub fn project_kv_on(&self, tape: &mut Tape<T>, prompt: Var) -> Result<Vec<(Var, Var)>> {
        self.check_prompt(tape.shape(prompt))?;
        let b = self.bind(tape);
        let mut out = Vec::new();
        for blk in &self.layout.blocks {
            if let Block::CrossAttn { k, v, .. } = *blk {
                let kk = self.linear(tape, &b, prompt, k)?;
                let vv = self.linear(tape, &b, prompt, v)?;
                out.push((kk, vv));
            }
        }
        Ok(out)
    }

    pub fn project_kv(&self, prompt: &Tensor<T>) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let mut tape = Tape::new();
        let p = tape.constant(prompt.clone());
        let kv = self.project_kv_on(&mut tape, p)?;
        Ok(kv
            .into_iter()
            .map(|(k, v)| (tape.value(k).clone(), tape.value(v).clone()))
            .collect())
    }

    fn check_prompt(&self, shape: &[usize]) -> Result<()> {
        if shape != [PROMPT_TOKENS, self.cfg.d] {
            return Err(Error::Shape {
                op: "prompt",
                left: shape.to_vec(),
                right: vec![PROMPT_TOKENS, self.cfg.d],
            });
        }
        Ok(())
    }

    fn block_delta(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        blk: Block,
        x: Var,
        prompt: Option<Var>,
        cross: CrossInput,
    ) -> Result<Var> {
        match blk {
            Block::Res { c1, c2 } => {
                let h = tape.group_norm(x, NORM_GROUPS)?;
                let h = tape.silu(h)?;
                let h = self.conv(tape, b, h, c1, 1)?;
                let h = tape.group_norm(h, NORM_GROUPS)?;
                let h = tape.silu(h)?;
                self.conv(tape, b, h, c2, 1)
            }
            Block::SelfAttn { q, k, v, o } => {
                let h = tape.group_norm(x, NORM_GROUPS)?;
                let (t, shape) = tokens(tape, h)?;
                let qq = self.linear(tape, b, t, q)?;
                let kk = self.linear(tape, b, t, k)?;
                let vv = self.linear(tape, b, t, v)?;
                let a = self.attend(tape, qq, kk, vv)?;
                let out = self.linear(tape, b, a, o)?;
                untokens(tape, out, shape)
            }
            Block::CrossAttn { q, k, v, o } => {
                let h = tape.group_norm(x, NORM_GROUPS)?;
                let (t, shape) = tokens(tape, h)?;
                let qq = self.linear(tape, b, t, q)?;
                let (kk, vv) = match cross {
                    CrossInput::Supplied { k, v } => (k, v),
                    CrossInput::Project => {
                        let p = prompt.ok_or_else(|| {
                            Error::MissingCache("cross-attention needs a prompt or cached keys".into())
                        })?;
                        (self.linear(tape, b, p, k)?, self.linear(tape, b, p, v)?)
                    }
                };
                let a = self.attend(tape, qq, kk, vv)?;
                let out = self.linear(tape, b, a, o)?;
                untokens(tape, out, shape)
            }
            Block::FeedForward { l1, l2 } => {
                let h = tape.group_norm(x, NORM_GROUPS)?;
                let (t, shape) = tokens(tape, h)?;
                let u = self.linear(tape, b, t, l1)?;
                let u = tape.silu(u)?;
                let out = self.linear(tape, b, u, l2)?;
                untokens(tape, out, shape)
            }
        }
    }

    /// Single denoising pass recorded on `tape`.
    pub fn forward_on(&self, tape: &mut Tape<T>, noise: Var, prompt: Option<Var>, opts: &ForwardOpts) -> Result<Forward> {
        let cfg = &self.cfg;
        let want = [cfg.latent_channels, cfg.latent_h, cfg.latent_w];
        if tape.shape(noise) != want {
            return Err(Error::Shape {
                op: "forward",
                left: tape.shape(noise).to_vec(),
                right: want.to_vec(),
            });
        }
        if let Some(p) = prompt {
            self.check_prompt(tape.shape(p))?;
        }
        let n = cfg.n_blocks();
        if !opts.modes.is_empty() && opts.modes.len() != n {
            return Err(Error::Topology(format!(
                "plan covers {} blocks, model has {n}",
                opts.modes.len()
            )));
        }
        let n_cross = cfg.cross_blocks().len();
        if !opts.cross.is_empty() && opts.cross.len() != n_cross {
            return Err(Error::Topology(format!(
                "{} cached key/value pairs for {n_cross} cross-attention blocks",
                opts.cross.len()
            )));
        }
        let b = self.bind(tape);
        let l = &self.layout;
        let mut h = self.conv(tape, &b, noise, l.conv_in, 1)?;
        let mut skip = None;
        let mut dx = Vec::with_capacity(n);
        let mut block_io = Vec::with_capacity(n);
        let mut cross_i = 0;
        for (i, &blk) in l.blocks.iter().enumerate() {
            if i == cfg.blocks_hi.len() {
                skip = Some(h);
                h = self.conv(tape, &b, h, l.down, 2)?;
            }
            let cross = if matches!(blk, Block::CrossAttn { .. }) {
                cross_i += 1;
                opts.cross.get(cross_i - 1).copied().unwrap_or(CrossInput::Project)
            } else {
                CrossInput::Project
            };
            let mode = opts.modes.get(i).copied().unwrap_or(BlockMode::Compute);
            let delta = match mode {
                BlockMode::Compute => self.block_delta(tape, &b, blk, h, prompt, cross)?,
                BlockMode::Reuse { dx: cached, k, b: off } => {
                    if tape.shape(cached) != tape.shape(h) {
                        return Err(Error::Shape {
                            op: "reuse",
                            left: tape.shape(cached).to_vec(),
                            right: tape.shape(h).to_vec(),
                        });
                    }
                    tape.channel_affine(cached, k, off)?
                }
            };
            let y = tape.add(h, delta)?;
            dx.push(delta);
            block_io.push((h, y));
            h = y;
        }
        if skip.is_none() {
            skip = Some(h);
            h = self.conv(tape, &b, h, l.down, 2)?;
        }
        let up = tape.upsample_nearest2x(h)?;
        let up = self.conv(tape, &b, up, l.up, 1)?;
        let h = tape.add(up, skip.unwrap())?;
        let h = tape.group_norm(h, NORM_GROUPS)?;
        let h = tape.silu(h)?;
        let latent = self.conv(tape, &b, h, l.conv_out, 1)?;
        Ok(Forward { latent, dx, block_io })
    }

    /// Tiny decoder: three conv/SiLU/2× stages, a 3×3 conv to RGB and a sigmoid.
    pub fn decode_on(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let want = [cfg.latent_channels, cfg.latent_h, cfg.latent_w];
        if tape.shape(z) != want {
            return Err(Error::Shape {
                op: "decode",
                left: tape.shape(z).to_vec(),
                right: want.to_vec(),
            });
        }
        let b = self.bind(tape);
        let mut h = z;
        for c in self.layout.dec {
            h = self.conv(tape, &b, h, c, 1)?;
            h = tape.silu(h)?;
            h = tape.upsample_nearest2x(h)?;
        }
        let h = self.conv(tape, &b, h, self.layout.dec_out, 1)?;
        let h = tape.sigmoid(h)?;
        tape.clamp(h, T::zero(), T::one())
    }

    /// Uncached forward pass on plain tensors.
    pub fn forward(&self, noise: &Tensor<T>, prompt: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let n = tape.constant(noise.clone());
        let p = tape.constant(prompt.clone());
        let f = self.forward_on(&mut tape, n, Some(p), &ForwardOpts::default())?;
        Ok(tape.value(f.latent).clone())
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let img = self.decode_on(&mut tape, zv)?;
        Ok(tape.value(img).clone())
    }
}

/// Seeded standard-normal latent noise.
pub fn noise(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(&[c, h, w], data).expect("length matches shape")
}

pub fn decode(model: &Model, z: &Tensor) -> Result<FrameImage> {
    FrameImage::from_tensor(model.decode(z)?)
}

/// Separable Catmull-Rom upsampling by an integer factor with clamped edges.
pub fn upsample_bicubic(img: &FrameImage, factor: usize) -> Result<FrameImage> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsampling factor must be at least 1".into()));
    }
    let plan = ResizePlan::new(3, img.height(), img.width(), factor);
    let data = plan.forward(img.data());
    FrameImage::new(img.height() * factor, img.width() * factor, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn micro() -> Model {
        Model::generate(ModelConfig::micro(), 11).unwrap()
    }

    #[test]
    fn zero_inputs_are_deterministic() {
        let m = micro();
        let z = Tensor::zeros(&[4, 8, 8]);
        let p = Tensor::zeros(&[77, 64]);
        let a = m.forward(&z, &p).unwrap();
        let b = m.forward(&z, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
    }

    #[test]
    fn seeds_reproduce_hash_and_differ_across_seeds() {
        let a = Model::generate(ModelConfig::micro(), 5).unwrap();
        let b = Model::generate(ModelConfig::micro(), 5).unwrap();
        let c = Model::generate(ModelConfig::micro(), 6).unwrap();
        assert_eq!(a.weight_hash(), b.weight_hash());
        assert_ne!(a.weight_hash(), c.weight_hash());
    }

    #[test]
    fn blocks_are_residual() {
        let m = Model::generate(ModelConfig::desk(), 3).unwrap();
        let mut tape = Tape::new();
        let n = tape.constant(noise(1, 4, 32, 32));
        let p = tape.constant(noise(2, 1, 77, 64).reshape(&[77, 64]).unwrap());
        let f = m.forward_on(&mut tape, n, Some(p), &ForwardOpts::default()).unwrap();
        assert_eq!(f.dx.len(), 8);
        for (&(x, y), &dx) in f.block_io.iter().zip(&f.dx) {
            let want = tape.value(x).add(tape.value(dx)).unwrap();
            assert_eq!(tape.value(y), &want);
        }
    }

    #[test]
    fn plan_length_must_match_topology() {
        let m = micro();
        let mut tape = Tape::new();
        let n = tape.constant(Tensor::zeros(&[4, 8, 8]));
        let p = tape.constant(Tensor::zeros(&[77, 64]));
        let opts = ForwardOpts {
            modes: vec![BlockMode::Compute; 3],
            cross: vec![],
        };
        assert!(matches!(m.forward_on(&mut tape, n, Some(p), &opts), Err(Error::Topology(_))));
    }

    #[test]
    fn shape_errors() {
        let m = micro();
        assert!(m.forward(&Tensor::zeros(&[4, 6, 8]), &Tensor::zeros(&[77, 64])).is_err());
        assert!(m.forward(&Tensor::zeros(&[4, 8, 8]), &Tensor::zeros(&[77, 32])).is_err());
        assert!(m.decode(&Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn decoder_shape_and_range() {
        let m = Model::generate(ModelConfig::desk(), 3).unwrap();
        let img = decode(&m, &Tensor::zeros(&[4, 32, 32])).unwrap();
        assert_eq!((img.height(), img.width()), (256, 256));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(img, decode(&m, &Tensor::zeros(&[4, 32, 32])).unwrap());
    }

    #[test]
    fn bicubic_identity_constant_and_ramp() {
        let img = FrameImage::new(4, 5, (0..60).map(|i| (i as f32 * 0.37).sin().abs()).collect()).unwrap();
        assert_eq!(upsample_bicubic(&img, 1).unwrap(), img);
        assert!(upsample_bicubic(&img, 0).is_err());

        let c = upsample_bicubic(&FrameImage::filled(6, 6, 0.3), 3).unwrap();
        assert!(c.data().iter().all(|v| (v - 0.3).abs() < 1e-6));

        // away from the clamped border every tap reads real samples
        let (h, w, f) = (8, 8, 4);
        let ramp: Vec<f32> = (0..3).flat_map(|_| (0..h * w).map(|i| (i % w) as f32 / 16.0)).collect();
        let up = upsample_bicubic(&FrameImage::new(h, w, ramp).unwrap(), f).unwrap();
        for y in 0..h * f {
            for x in 2 * f..(w - 2) * f {
                let src = (x as f64 + 0.5) / f as f64 - 0.5;
                assert!((up.get(0, y, x) as f64 - src / 16.0).abs() < 1e-6);
            }
        }
    }
}
