//! Inter-frame reuse inside a group: exact key/value interpolation for
//! cross-attention and approximate reuse of block contributions from the
//! group's reference frame, corrected by a per-channel affine map.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bitstream::{BitReader, BitWriter};
use crate::denoiser::{BlockMode, CrossInput, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::prompt_codec::{lerp, QuantizedMatrix};

/// Code width of transmitted `k` and `b` values.
pub const AFFINE_BITS: u32 = 8;

/// Per-channel correction `k ⊙ Δx + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAffine {
    pub k: Vec<f32>,
    pub b: Vec<f32>,
}

impl ChannelAffine {
    pub fn identity(channels: usize) -> Self {
        Self {
            k: vec![1.0; channels],
            b: vec![0.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KbInit {
    OnesZeros,
    Random { seed: u64 },
}

/// Sender-chosen reuse decisions for the in-between frames of a group.
///
/// Frame `f` of the plan is stitched frame `f + 1` of the group; frame 0 of
/// the group is the reference whose contributions are reused.
#[derive(Clone, Debug, PartialEq)]
pub struct CachePlan {
    pub n_blocks: usize,
    pub frames: usize,
    /// Per cross-attention layer.
    pub kv_cached: Vec<bool>,
    /// Block-major: entry `block * frames + frame`.
    pub reuse: Vec<Option<ChannelAffine>>,
}

impl CachePlan {
    pub fn all_compute(n_blocks: usize, n_cross: usize, frames: usize) -> Self {
        Self {
            n_blocks,
            frames,
            kv_cached: vec![false; n_cross],
            reuse: vec![None; n_blocks * frames],
        }
    }

    pub fn with_kv(mut self, on: bool) -> Self {
        self.kv_cached.iter_mut().for_each(|v| *v = on);
        self
    }

    pub fn is_reuse(&self, block: usize, frame: usize) -> bool {
        self.affine(block, frame).is_some()
    }

    pub fn affine(&self, block: usize, frame: usize) -> Option<&ChannelAffine> {
        if block >= self.n_blocks || frame >= self.frames {
            return None;
        }
        self.reuse[block * self.frames + frame].as_ref()
    }

    pub fn decisions(&self) -> usize {
        self.reuse.len()
    }

    pub fn n_reuse(&self) -> usize {
        self.reuse.iter().filter(|r| r.is_some()).count()
    }

    pub fn cache_ratio(&self) -> f64 {
        if self.reuse.is_empty() {
            0.0
        } else {
            self.n_reuse() as f64 / self.reuse.len() as f64
        }
    }

    pub fn check_topology(&self, cfg: &ModelConfig) -> Result<()> {
        if self.n_blocks != cfg.n_blocks() || self.kv_cached.len() != cfg.cross_blocks().len() {
            return Err(Error::Topology(format!(
                "plan for {} blocks / {} cross layers, model has {} / {}",
                self.n_blocks,
                self.kv_cached.len(),
                cfg.n_blocks(),
                cfg.cross_blocks().len()
            )));
        }
        for a in self.reuse.iter().flatten() {
            if a.k.len() != cfg.hidden || a.b.len() != cfg.hidden {
                return Err(Error::Topology(format!(
                    "affine with {} channels, model has {}",
                    a.k.len(),
                    cfg.hidden
                )));
            }
        }
        Ok(())
    }

    /// The plan as the receiver sees it after quantization.
    pub fn quantized(&self, cfg: &ModelConfig) -> Result<Self> {
        let w = plan_bits(self, cfg)?;
        let len = w.len();
        plan_from_bits(&w.into_bytes(), len, cfg, self.frames)
    }
}

/// Keys and values of both keyframes and reference-frame contributions for
/// the group being decoded.
#[derive(Clone, Debug, Default)]
pub struct CacheState {
    pub kv_a: Vec<(Tensor, Tensor)>,
    pub kv_b: Vec<(Tensor, Tensor)>,
    /// Per block, recorded while decoding the reference frame.
    pub dx_ref: Vec<Option<Tensor>>,
}

impl CacheState {
    /// Moves keyframe `b` into slot `a` and installs the next keyframe.
    pub fn advance(&mut self, next: Vec<(Tensor, Tensor)>) {
        self.kv_a = std::mem::replace(&mut self.kv_b, next);
    }
}

pub fn kv_interpolate(state: &CacheState, layer: usize, alpha: f32) -> Result<(Tensor, Tensor)> {
    let missing = || Error::MissingCache(format!("no cached keys/values for cross layer {layer}"));
    let (ka, va) = state.kv_a.get(layer).ok_or_else(missing)?;
    let (kb, vb) = state.kv_b.get(layer).ok_or_else(missing)?;
    Ok((lerp(ka, kb, alpha)?, lerp(va, vb, alpha)?))
}

/// `x + (k ⊙ Δx + b)` with `k`, `b` broadcast over the leading axis, evaluated
/// in the same order as a reused block inside the denoiser.
pub fn apply_lossy(x: &Tensor, dx: &Tensor, k: &[f32], b: &[f32]) -> Result<Tensor> {
    x.expect_same_shape(dx, "apply_lossy")?;
    let c = x.shape().first().copied().unwrap_or(0);
    if k.len() != c || b.len() != c {
        return Err(Error::Shape {
            op: "apply_lossy",
            left: x.shape().to_vec(),
            right: vec![k.len(), b.len()],
        });
    }
    let per = x.len() / c.max(1);
    let data = x
        .data()
        .iter()
        .zip(dx.data())
        .enumerate()
        .map(|(i, (&xv, &d))| xv + (k[i / per] * d + b[i / per]))
        .collect();
    Tensor::new(x.shape(), data)
}

/// Cosine similarity in f64; two zero vectors count as identical.
pub fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    match (aa == 0.0, bb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => ab / (aa.sqrt() * bb.sqrt()),
    }
}

/// Number of entries a ratio selects out of `n`.
pub fn reuse_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// The `count` most similar `(block, frame, similarity)` entries, ties to the
/// lower block then lower frame. Independent of input order.
pub fn top_k(entries: &[(usize, usize, f64)], count: usize) -> Vec<(usize, usize)> {
    let mut sorted = entries.to_vec();
    sorted.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    sorted.into_iter().take(count).map(|(b, f, _)| (b, f)).collect()
}

/// Selects reuse entries by similarity to the reference frame.
///
/// `reference[b]` is block `b`'s contribution on the reference frame and
/// `frames[f][b]` the same on plan frame `f`.
pub fn build_plan(
    cfg: &ModelConfig,
    reference: &[Tensor],
    frames: &[Vec<Tensor>],
    ratio: f64,
    init: KbInit,
    kv_cached: bool,
) -> Result<CachePlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("cache ratio {ratio} outside [0, 1]")));
    }
    let nb = cfg.n_blocks();
    if reference.len() != nb || frames.iter().any(|f| f.len() != nb) {
        return Err(Error::Topology(format!("activations do not cover the model's {nb} blocks")));
    }
    let mut entries = Vec::with_capacity(nb * frames.len());
    for (f, acts) in frames.iter().enumerate() {
        for (b, dx) in acts.iter().enumerate() {
            reference[b].expect_same_shape(dx, "build_plan")?;
            entries.push((b, f, cosine(dx, &reference[b])));
        }
    }
    let mut plan = CachePlan::all_compute(nb, cfg.cross_blocks().len(), frames.len()).with_kv(kv_cached);
    let mut chosen = top_k(&entries, reuse_count(ratio, entries.len()));
    chosen.sort();
    let mut rng = match init {
        KbInit::Random { seed } => Some((ChaCha8Rng::seed_from_u64(seed), Normal::new(0.0f32, 0.1).unwrap())),
        KbInit::OnesZeros => None,
    };
    for (b, f) in chosen {
        let affine = match rng.as_mut() {
            None => ChannelAffine::identity(cfg.hidden),
            Some((rng, n)) => ChannelAffine {
                k: (0..cfg.hidden).map(|_| 1.0 + n.sample(rng)).collect(),
                b: (0..cfg.hidden).map(|_| n.sample(rng)).collect(),
            },
        };
        plan.reuse[b * plan.frames + f] = Some(affine);
    }
    Ok(plan)
}

/// Fixed part of the plan layout, independent of decisions.
pub fn plan_header_bits(cfg: &ModelConfig) -> usize {
    8 + 8 + cfg.cross_blocks().len() + 32 + 32
}

/// `n_blocks u8, n_cross u8, kv flag × n_cross, k_scale f32, b_scale f32,
/// decision bit × (blocks · frames) block-major, then per reuse entry in the
/// same order: k code × C, b code × C` at [`AFFINE_BITS`] each. `k` is coded
/// as `k − 1`.
pub fn plan_bits(plan: &CachePlan, cfg: &ModelConfig) -> Result<BitWriter> {
    let mut w = BitWriter::new();
    write_plan(plan, cfg, &mut w)?;
    Ok(w)
}

pub fn write_plan(plan: &CachePlan, cfg: &ModelConfig, w: &mut BitWriter) -> Result<()> {
    plan.check_topology(cfg)?;
    PlanCodes::encode(plan, cfg.hidden)?.write(w);
    Ok(())
}

pub fn plan_from_bits(bytes: &[u8], nbits: usize, cfg: &ModelConfig, frames: usize) -> Result<CachePlan> {
    let mut r = BitReader::new(bytes, nbits);
    let plan = read_plan(&mut r, cfg, frames)?;
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} unused plan bits", r.remaining())));
    }
    Ok(plan)
}

pub fn read_plan(r: &mut BitReader, cfg: &ModelConfig, frames: usize) -> Result<CachePlan> {
    let expect = (cfg.n_blocks(), cfg.cross_blocks().len());
    Ok(PlanCodes::read_checked(r, cfg.hidden, frames, Some(expect))?.to_plan())
}

/// A plan exactly as transmitted: decision flags and affine codes.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanCodes {
    pub n_blocks: usize,
    pub frames: usize,
    pub channels: usize,
    pub kv_cached: Vec<bool>,
    pub k_scale: f32,
    pub b_scale: f32,
    /// Block-major decision flags.
    pub reuse: Vec<bool>,
    /// `channels` codes per reuse entry, in flag order.
    pub k_codes: Vec<u8>,
    pub b_codes: Vec<u8>,
}

impl PlanCodes {
    pub fn encode(plan: &CachePlan, channels: usize) -> Result<Self> {
        let entries: Vec<&ChannelAffine> = plan.reuse.iter().flatten().collect();
        if entries.iter().any(|a| a.k.len() != channels || a.b.len() != channels) {
            return Err(Error::Topology(format!("affine width differs from {channels} channels")));
        }
        if plan.n_blocks > 255 || plan.kv_cached.len() > 255 {
            return Err(Error::InvalidArgument("plan topology exceeds 255 blocks".into()));
        }
        let ks: Vec<f32> = entries.iter().flat_map(|a| a.k.iter().map(|k| k - 1.0)).collect();
        let bs: Vec<f32> = entries.iter().flat_map(|a| a.b.iter().copied()).collect();
        let qk = QuantizedMatrix::quantize(&Tensor::new(&[ks.len()], ks)?, AFFINE_BITS)?;
        let qb = QuantizedMatrix::quantize(&Tensor::new(&[bs.len()], bs)?, AFFINE_BITS)?;
        Ok(Self {
            n_blocks: plan.n_blocks,
            frames: plan.frames,
            channels,
            kv_cached: plan.kv_cached.clone(),
            k_scale: qk.scale,
            b_scale: qb.scale,
            reuse: plan.reuse.iter().map(Option::is_some).collect(),
            k_codes: qk.codes.iter().map(|&c| c as u8).collect(),
            b_codes: qb.codes.iter().map(|&c| c as u8).collect(),
        })
    }

    pub fn n_reuse(&self) -> usize {
        self.reuse.iter().filter(|&&r| r).count()
    }

    pub fn bit_len(&self) -> usize {
        16 + self.kv_cached.len() + 64 + self.reuse.len() + 2 * self.n_reuse() * self.channels * AFFINE_BITS as usize
    }

    pub fn write(&self, w: &mut BitWriter) {
        w.u8(self.n_blocks as u8);
        w.u8(self.kv_cached.len() as u8);
        for &kv in &self.kv_cached {
            w.bit(kv);
        }
        w.f32(self.k_scale);
        w.f32(self.b_scale);
        for &r in &self.reuse {
            w.bit(r);
        }
        let c = self.channels;
        for i in 0..self.n_reuse() {
            for &code in &self.k_codes[i * c..(i + 1) * c] {
                w.bits(code as u64, AFFINE_BITS);
            }
            for &code in &self.b_codes[i * c..(i + 1) * c] {
                w.bits(code as u64, AFFINE_BITS);
            }
        }
    }

    pub fn read(r: &mut BitReader, channels: usize, frames: usize) -> Result<Self> {
        Self::read_checked(r, channels, frames, None)
    }

    fn read_checked(r: &mut BitReader, channels: usize, frames: usize, expect: Option<(usize, usize)>) -> Result<Self> {
        let nb = r.u8()? as usize;
        let nc = r.u8()? as usize;
        if let Some((eb, ec)) = expect {
            if (nb, nc) != (eb, ec) {
                return Err(Error::Topology(format!(
                    "plan for {nb} blocks / {nc} cross layers, model has {eb} / {ec}"
                )));
            }
        }
        let kv_cached = (0..nc).map(|_| r.bit()).collect::<Result<Vec<_>>>()?;
        let k_scale = r.f32()?;
        let b_scale = r.f32()?;
        if !k_scale.is_finite() || !b_scale.is_finite() || k_scale < 0.0 || b_scale < 0.0 {
            return Err(Error::Malformed("invalid plan scale".into()));
        }
        let reuse = (0..nb * frames).map(|_| r.bit()).collect::<Result<Vec<_>>>()?;
        let n = reuse.iter().filter(|&&x| x).count();
        let (mut k_codes, mut b_codes) = (Vec::with_capacity(n * channels), Vec::with_capacity(n * channels));
        for _ in 0..n {
            for _ in 0..channels {
                k_codes.push(r.bits(AFFINE_BITS)? as u8);
            }
            for _ in 0..channels {
                b_codes.push(r.bits(AFFINE_BITS)? as u8);
            }
        }
        Ok(Self {
            n_blocks: nb,
            frames,
            channels,
            kv_cached,
            k_scale,
            b_scale,
            reuse,
            k_codes,
            b_codes,
        })
    }

    pub fn to_plan(&self) -> CachePlan {
        let mid = QuantizedMatrix::max_code(AFFINE_BITS) as f64 / 2.0;
        let deq = |code: u8, scale: f32| ((code as f64 - mid) * scale as f64) as f32;
        let c = self.channels;
        let mut i = 0;
        let reuse = self
            .reuse
            .iter()
            .map(|&on| {
                on.then(|| {
                    let k = self.k_codes[i * c..(i + 1) * c].iter().map(|&q| 1.0 + deq(q, self.k_scale)).collect();
                    let b = self.b_codes[i * c..(i + 1) * c].iter().map(|&q| deq(q, self.b_scale)).collect();
                    i += 1;
                    ChannelAffine { k, b }
                })
            })
            .collect();
        CachePlan {
            n_blocks: self.n_blocks,
            frames: self.frames,
            kv_cached: self.kv_cached.clone(),
            reuse,
        }
    }
}

/// Block modes for plan frame `frame`, binding cached contributions and
/// affine parameters as tape constants.
pub fn frame_modes(tape: &mut Tape, plan: &CachePlan, frame: usize, state: &CacheState) -> Result<Vec<BlockMode>> {
    let mut modes = Vec::with_capacity(plan.n_blocks);
    for b in 0..plan.n_blocks {
        match plan.affine(b, frame) {
            None => modes.push(BlockMode::Compute),
            Some(a) => {
                let dx = state
                    .dx_ref
                    .get(b)
                    .and_then(|d| d.as_ref())
                    .ok_or_else(|| Error::MissingCache(format!("no reference contribution for block {b}")))?;
                let dx = tape.constant(dx.clone());
                let k = tape.constant(Tensor::new(&[a.k.len()], a.k.clone())?);
                let bb = tape.constant(Tensor::new(&[a.b.len()], a.b.clone())?);
                modes.push(BlockMode::Reuse { dx, k, b: bb });
            }
        }
    }
    Ok(modes)
}

/// Cross-attention inputs for a frame at interpolation weight `alpha`.
pub fn cross_inputs(tape: &mut Tape, plan_kv: &[bool], state: &CacheState, alpha: f32) -> Result<Vec<CrossInput>> {
    plan_kv
        .iter()
        .enumerate()
        .map(|(layer, &on)| {
            if !on {
                return Ok(CrossInput::Project);
            }
            let (k, v) = kv_interpolate(state, layer, alpha)?;
            Ok(CrossInput::Supplied {
                k: tape.constant(k),
                v: tape.constant(v),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Model;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn state_for(model: &Model, rng: &mut ChaCha8Rng) -> (CacheState, Tensor, Tensor) {
        let pa = rand_tensor(rng, &[77, 64]);
        let pb = rand_tensor(rng, &[77, 64]);
        let state = CacheState {
            kv_a: model.project_kv(&pa).unwrap(),
            kv_b: model.project_kv(&pb).unwrap(),
            dx_ref: vec![],
        };
        (state, pa, pb)
    }

    #[test]
    fn kv_endpoints_exact_and_interior_affine() {
        let model = Model::generate(ModelConfig::micro(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (state, pa, pb) = state_for(&model, &mut rng);
        for layer in 0..2 {
            let (k0, v0) = kv_interpolate(&state, layer, 0.0).unwrap();
            assert_eq!((&k0, &v0), (&state.kv_a[layer].0, &state.kv_a[layer].1));
            let (k1, v1) = kv_interpolate(&state, layer, 1.0).unwrap();
            assert_eq!((&k1, &v1), (&state.kv_b[layer].0, &state.kv_b[layer].1));
            let (k, v) = kv_interpolate(&state, layer, 0.37).unwrap();
            let direct = model.project_kv(&lerp(&pa, &pb, 0.37).unwrap()).unwrap();
            assert!(k.max_abs_diff(&direct[layer].0).unwrap() <= 1e-5);
            assert!(v.max_abs_diff(&direct[layer].1).unwrap() <= 1e-5);
        }
        assert!(matches!(kv_interpolate(&state, 2, 0.5), Err(Error::MissingCache(_))));
    }

    #[test]
    fn apply_lossy_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[3, 4, 4]);
        let dx = rand_tensor(&mut rng, &[3, 4, 4]);
        assert_eq!(apply_lossy(&x, &dx, &[1.0; 3], &[0.0; 3]).unwrap(), x.add(&dx).unwrap());
        assert_eq!(apply_lossy(&x, &dx, &[0.0; 3], &[0.0; 3]).unwrap(), x);
        let k = [0.5, -1.25, 2.0];
        let b = [0.1, 0.0, -0.3];
        let y = apply_lossy(&x, &dx, &k, &b).unwrap();
        for c in 0..3 {
            for i in 0..16 {
                let j = c * 16 + i;
                assert_eq!(y.data()[j], x.data()[j] + (k[c] * dx.data()[j] + b[c]));
            }
        }
        assert!(apply_lossy(&x, &dx, &[1.0; 2], &[0.0; 3]).is_err());
    }

    fn constructed(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<Vec<Tensor>>) {
        // frames 0 and 2 copy the reference exactly, 1 and 3 are orthogonal to it
        let reference: Vec<Tensor> = (0..cfg.n_blocks()).map(|_| rand_tensor(rng, &[16, 2, 2])).collect();
        let frames = (0..4)
            .map(|f| {
                reference
                    .iter()
                    .map(|r| {
                        if f % 2 == 0 {
                            r.clone()
                        } else {
                            // orthogonal: swap and negate pairs
                            let d = r.data();
                            let data = (0..d.len())
                                .map(|i| if i % 2 == 0 { -d[i + 1] } else { d[i - 1] })
                                .collect();
                            Tensor::new(r.shape(), data).unwrap()
                        }
                    })
                    .collect()
            })
            .collect();
        (reference, frames)
    }

    #[test]
    fn plan_ratio_extremes_and_identical_half() {
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (reference, frames) = constructed(&cfg, &mut rng);
        let p0 = build_plan(&cfg, &reference, &frames, 0.0, KbInit::OnesZeros, false).unwrap();
        assert_eq!(p0.n_reuse(), 0);
        let p1 = build_plan(&cfg, &reference, &frames, 1.0, KbInit::OnesZeros, false).unwrap();
        assert_eq!(p1.n_reuse(), p1.decisions());
        let half = build_plan(&cfg, &reference, &frames, 0.5, KbInit::OnesZeros, false).unwrap();
        for b in 0..cfg.n_blocks() {
            for f in 0..4 {
                assert_eq!(half.is_reuse(b, f), f % 2 == 0, "block {b} frame {f}");
            }
        }
        assert_eq!(half.cache_ratio(), 0.5);
        assert!(build_plan(&cfg, &reference, &frames, 1.5, KbInit::OnesZeros, false).is_err());
    }

    #[test]
    fn top_k_ignores_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut entries: Vec<(usize, usize, f64)> = (0..6)
            .flat_map(|b| (0..5).map(move |f| (b, f)))
            .map(|(b, f)| (b, f, (rng.random_range(0..4) as f64) / 4.0))
            .collect();
        let want = top_k(&entries, 11);
        for _ in 0..20 {
            for i in (1..entries.len()).rev() {
                entries.swap(i, rng.random_range(0..=i));
            }
            assert_eq!(top_k(&entries, 11), want);
        }
    }

    #[test]
    fn all_compute_plan_bits_are_zero() {
        let cfg = ModelConfig::desk();
        let plan = CachePlan::all_compute(cfg.n_blocks(), 2, 3);
        let w = plan_bits(&plan, &cfg).unwrap();
        assert_eq!(w.len(), plan_header_bits(&cfg) + 8 * 3);
        let bytes = w.clone().into_bytes();
        let mut r = BitReader::new(&bytes, w.len());
        r.bits(plan_header_bits(&cfg) as u32 - 64).unwrap();
        r.bits(64).unwrap();
        assert_eq!(r.bits(24).unwrap(), 0);
    }

    #[test]
    fn full_reuse_plan_size() {
        let cfg = ModelConfig::desk();
        let (b, f, c) = (cfg.n_blocks(), 3, cfg.hidden);
        let mut plan = CachePlan::all_compute(b, 2, f);
        for r in plan.reuse.iter_mut() {
            *r = Some(ChannelAffine::identity(c));
        }
        let w = plan_bits(&plan, &cfg).unwrap();
        assert_eq!(w.len(), plan_header_bits(&cfg) + b * f + b * f * 2 * c * 8);
    }

    #[test]
    fn random_plans_roundtrip() {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let frames = rng.random_range(1..5);
            let mut plan = CachePlan::all_compute(cfg.n_blocks(), 2, frames);
            plan.kv_cached = vec![rng.random(), rng.random()];
            for r in plan.reuse.iter_mut() {
                if rng.random::<bool>() {
                    *r = Some(ChannelAffine {
                        k: (0..cfg.hidden).map(|_| rng.random_range(0.5..1.5)).collect(),
                        b: (0..cfg.hidden).map(|_| rng.random_range(-0.2..0.2)).collect(),
                    });
                }
            }
            let w = plan_bits(&plan, &cfg).unwrap();
            let n = w.len();
            let back = plan_from_bits(&w.into_bytes(), n, &cfg, frames).unwrap();
            assert_eq!(back.kv_cached, plan.kv_cached);
            for (a, b) in plan.reuse.iter().zip(&back.reuse) {
                assert_eq!(a.is_some(), b.is_some());
                if let (Some(a), Some(b)) = (a, b) {
                    for (x, y) in a.k.iter().zip(&b.k).chain(a.b.iter().zip(&b.b)) {
                        assert!((x - y).abs() <= 1.0 / 255.0 + 1e-6);
                    }
                }
            }
            let again = back.quantized(&cfg).unwrap();
            assert_eq!(again, back);
        }
    }

    #[test]
    fn plan_bits_errors() {
        let cfg = ModelConfig::desk();
        let plan = CachePlan::all_compute(cfg.n_blocks(), 2, 3);
        let w = plan_bits(&plan, &cfg).unwrap();
        let n = w.len();
        let bytes = w.into_bytes();
        assert!(matches!(plan_from_bits(&bytes, n - 1, &cfg, 3), Err(Error::Truncated { .. })));
        assert!(matches!(plan_from_bits(&bytes, n, &ModelConfig::micro(), 3), Err(Error::Topology(_))));
        let wrong = CachePlan::all_compute(3, 2, 3);
        assert!(matches!(plan_bits(&wrong, &cfg), Err(Error::Topology(_))));
    }
}
