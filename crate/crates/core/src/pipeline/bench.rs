//! Cost and quality sweeps over resolution, cache ratio and pipeline toggles.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use super::codec::{decode_stream, encode_video, reconstruct};
use super::config::{preset, EncodeConfig, KeyValues};
use super::corpus::translating_texture;
use crate::bitstream::{measured_bitrate, GroupRecord, Stream, StreamHeader};
use crate::cache_engine::{build_plan, CachePlan, KbInit, PlanCodes};
use crate::denoiser::{decoder_macs, flop_count, forward_macs, noise, ForwardOpts, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::prompt_codec::{lerp, uniform_alphas, LowRankPrompt, QuantizedPrompt};
use crate::stitcher::StitchScheme;
use crate::trainer::{mse, psnr};

/// Decoder widths charged when the tiny decoder is switched off.
pub const FULL_DECODER: [usize; 3] = [128, 64, 32];
/// Inverse DCT cost per output sample when residuals are on.
const RESIDUAL_MACS_PER_SAMPLE: u64 = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub model: String,
    pub model_seed: u64,
    /// Output frame sides.
    pub resolutions: Vec<usize>,
    pub cache_ratios: Vec<f64>,
    pub cache: Vec<bool>,
    pub residual: Vec<bool>,
    pub train: Vec<bool>,
    pub two_stage: Vec<bool>,
    pub tiny: Vec<bool>,
    pub group_len: usize,
    pub quality: bool,
    pub timing: bool,
    pub frames: usize,
    pub iters: usize,
    pub residual_bps: u64,
    pub seed: u64,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            model: "desk".into(),
            model_seed: 0,
            resolutions: vec![128, 256, 512],
            cache_ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            cache: vec![true],
            residual: vec![false],
            train: vec![true],
            two_stage: vec![true],
            tiny: vec![true],
            group_len: 5,
            quality: false,
            timing: false,
            frames: 8,
            iters: 100,
            residual_bps: 60_000,
            seed: 0,
        }
    }
}

pub const SWEEP_KEYS: &[&str] = &[
    "model",
    "model_seed",
    "resolutions",
    "cache_ratios",
    "cache",
    "residual",
    "train",
    "two_stage",
    "tiny",
    "group_len",
    "quality",
    "timing",
    "frames",
    "iters",
    "residual_bps",
    "seed",
];

impl Sweep {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.expect_keys(SWEEP_KEYS)?;
        let mut s = Self::default();
        if let Some(v) = kv.raw("model") {
            preset(v)?;
            s.model = v.into();
        }
        s.model_seed = kv.get("model_seed")?.unwrap_or(s.model_seed);
        s.resolutions = kv.list("resolutions")?.unwrap_or(s.resolutions);
        s.cache_ratios = kv.list("cache_ratios")?.unwrap_or(s.cache_ratios);
        s.cache = kv.bool_list("cache")?.unwrap_or(s.cache);
        s.residual = kv.bool_list("residual")?.unwrap_or(s.residual);
        s.train = kv.bool_list("train")?.unwrap_or(s.train);
        s.two_stage = kv.bool_list("two_stage")?.unwrap_or(s.two_stage);
        s.tiny = kv.bool_list("tiny")?.unwrap_or(s.tiny);
        s.group_len = kv.get("group_len")?.unwrap_or(s.group_len);
        s.quality = kv.bool("quality")?.unwrap_or(s.quality);
        s.timing = kv.bool("timing")?.unwrap_or(s.timing);
        s.frames = kv.get("frames")?.unwrap_or(s.frames);
        s.iters = kv.get("iters")?.unwrap_or(s.iters);
        s.residual_bps = kv.get("residual_bps")?.unwrap_or(s.residual_bps);
        s.seed = kv.get("seed")?.unwrap_or(s.seed);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if [
            self.resolutions.len(),
            self.cache_ratios.len(),
            self.cache.len(),
            self.residual.len(),
            self.train.len(),
            self.two_stage.len(),
            self.tiny.len(),
        ]
        .contains(&0)
        {
            return bad("every sweep list needs at least one value");
        }
        if self.cache_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("cache ratios must lie in [0, 1]");
        }
        if self.group_len < 3 {
            return bad("group_len must be at least 3");
        }
        if self.frames == 0 {
            return bad("frames must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub resolution: usize,
    pub cache_ratio: f64,
    pub cache: bool,
    pub residual: bool,
    pub train: bool,
    pub two_stage: bool,
    pub tiny: bool,
    /// Reuse entries actually chosen over all decision slots.
    pub reuse_fraction: f64,
    /// MACs per output frame.
    pub forward_macs: f64,
    pub linear_macs: f64,
    pub decoder_macs: f64,
    pub upsample_macs: f64,
    pub residual_macs: f64,
    pub total_macs: f64,
    pub wall_ms: Option<f64>,
    pub psnr: Option<f64>,
    pub bps: Option<f64>,
}

/// Latent side for an output side `res`.
pub fn latent_side(cfg: &ModelConfig, res: usize, two_stage: bool) -> Result<usize> {
    let div = if two_stage { 8 * cfg.upscale } else { 16 };
    if res == 0 || res % div != 0 {
        return Err(Error::InvalidArgument(format!("resolution {res} must be a multiple of {div}")));
    }
    Ok(if two_stage { res / (4 * cfg.upscale) } else { res / 8 })
}

fn at_latent(cfg: &ModelConfig, side: usize) -> ModelConfig {
    ModelConfig {
        latent_h: side,
        latent_w: side,
        ..cfg.clone()
    }
}

/// Block contributions at the model's native size for one group: the
/// reference (previous keyframe) and each decision frame.
fn native_activations(model: &Model, group_len: usize, seed: u64) -> Result<(Vec<Tensor>, Vec<Vec<Tensor>>)> {
    let cfg = model.config();
    let z = noise(seed, cfg.latent_channels, cfg.latent_h, cfg.latent_w);
    let a = LowRankPrompt::random(4, cfg.d, 0.3, seed)?.compose();
    let b = LowRankPrompt::random(4, cfg.d, 0.3, seed.wrapping_add(1))?.compose();
    let dx = |p: &Tensor| -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let pv = tape.constant(p.clone());
        let fwd = model.forward_on(&mut tape, zv, Some(pv), &ForwardOpts::default())?;
        Ok(fwd.dx.iter().map(|&d| tape.value(d).clone()).collect())
    };
    let alphas = uniform_alphas(group_len)?;
    let reference = dx(&a)?;
    let frames = alphas[1..group_len - 1]
        .iter()
        .map(|&al| dx(&lerp(&a, &b, al)?))
        .collect::<Result<_>>()?;
    Ok((reference, frames))
}

/// Denoiser MACs of one group (m stitched frames) under `plan`.
fn group_forward(cfg: &ModelConfig, side: usize, plan: &CachePlan) -> u64 {
    let full = forward_macs(cfg, side, side).total();
    full + flop_count(cfg, side, side, Some(plan)).cached
}

/// Seconds per stitched frame decoding one synthetic group at `cfg`.
fn time_group(cfg: &ModelConfig, seed: u64, plan: &CachePlan, group_len: usize) -> Result<f64> {
    let model = Model::generate(cfg.clone(), seed)?;
    let m = group_len - 1;
    let key = |s: u64| QuantizedPrompt::quantize(&LowRankPrompt::random(4, cfg.d, 0.3, s)?, 8);
    let (oh, ow) = cfg.output_hw();
    let header = StreamHeader {
        width: ow as u16,
        height: oh as u16,
        fps_num: 30,
        fps_den: 1,
        d: cfg.d as u16,
        rank: 4,
        q: 8,
        group_len: group_len as u16,
        latent_c: cfg.latent_channels as u8,
        latent_h: cfg.latent_h as u16,
        latent_w: cfg.latent_w as u16,
        hidden: cfg.hidden as u16,
        upscale: cfg.upscale as u8,
        noise_seed: seed,
        weight_hash: model.weight_hash(),
        residual: false,
        kv_cache: plan.kv_cached.iter().any(|&k| k),
        stitched_frames: (1 + m) as u32,
        source_frames: (4 * (1 + m)) as u32,
    };
    let stream = Stream {
        header,
        records: vec![
            GroupRecord {
                keyframe: key(seed)?,
                schemes: vec![StitchScheme::InterleaveA],
                plan: None,
                residuals: vec![],
            },
            GroupRecord {
                keyframe: key(seed + 1)?,
                schemes: vec![StitchScheme::InterleaveA; m],
                plan: Some(PlanCodes::encode(plan, cfg.hidden)?),
                residuals: vec![],
            },
        ],
    };
    let t = Instant::now();
    reconstruct(&stream, &model)?;
    Ok(t.elapsed().as_secs_f64() / (1 + m) as f64)
}

/// Mean PSNR and bitrate of an encode/decode round trip on the micro model.
fn quality(sweep: &Sweep, ratio: f64, kv: bool, residual: bool, train: bool) -> Result<(f64, f64)> {
    let mut cfg = EncodeConfig {
        model: "micro".into(),
        model_seed: sweep.model_seed,
        residual_bps: if residual { sweep.residual_bps } else { 0 },
        ..EncodeConfig::default()
    };
    cfg.fit.group_len = sweep.group_len;
    cfg.fit.ratio = ratio;
    cfg.fit.kv_cache = kv;
    cfg.fit.seed = sweep.seed;
    let iters = if train { sweep.iters } else { 0 };
    cfg.fit.phase1_iters = iters;
    cfg.fit.phase2_iters = iters / 3;
    let model = Model::generate(ModelConfig::micro(), sweep.model_seed)?;
    let (h, w) = model.config().output_hw();
    let src = translating_texture(h, w, sweep.frames, (0.5, 0.25), sweep.seed);
    let enc = encode_video(&src, &model, &cfg)?;
    let dec = decode_stream(&enc.stream, &model)?;
    let p = src
        .frames
        .iter()
        .zip(&dec.frames)
        .map(|(a, b)| psnr(mse(a.data(), b.data())).min(100.0))
        .sum::<f64>()
        / src.len() as f64;
    let rate = measured_bitrate(&enc.bytes, src.len() as f64 / src.fps_f64())?;
    Ok((p, rate.bps))
}

pub fn run(sweep: &Sweep) -> Result<Vec<BenchRow>> {
    sweep.validate()?;
    let base = preset(&sweep.model)?;
    let model = Model::generate(base.clone(), sweep.model_seed)?;
    let (reference, frames) = native_activations(&model, sweep.group_len, sweep.seed)?;
    let m = sweep.group_len - 1;
    let mut quality_cache: HashMap<(u64, bool, bool, bool), (f64, f64)> = HashMap::new();
    let mut rows = Vec::new();
    for &res in &sweep.resolutions {
        for &two_stage in &sweep.two_stage {
            let side = latent_side(&base, res, two_stage)?;
            let cfg = at_latent(&base, side);
            let fwd = forward_macs(&cfg, side, side);
            let per_pass = if two_stage { 0.25 } else { 1.0 };
            for &cache in &sweep.cache {
                for &ratio in &sweep.cache_ratios {
                    let eff = if cache { ratio } else { 0.0 };
                    let plan = build_plan(&base, &reference, &frames, eff, KbInit::OnesZeros, cache && eff > 0.0)?;
                    let forward = group_forward(&cfg, side, &plan) as f64 / m as f64 * per_pass;
                    let wall = if sweep.timing && two_stage {
                        Some(1e3 * time_group(&cfg, sweep.seed, &plan, sweep.group_len)? * per_pass)
                    } else {
                        None
                    };
                    for &tiny in &sweep.tiny {
                        let dcfg = if tiny {
                            cfg.clone()
                        } else {
                            ModelConfig {
                                decoder: FULL_DECODER,
                                ..cfg.clone()
                            }
                        };
                        let dec = decoder_macs(&dcfg, side, side) as f64 * per_pass;
                        let ups = if two_stage {
                            crate::denoiser::upsample_macs(&cfg, side, side) as f64 * per_pass
                        } else {
                            0.0
                        };
                        for &residual in &sweep.residual {
                            let res_macs = if residual {
                                (3 * res * res) as f64 * RESIDUAL_MACS_PER_SAMPLE as f64
                            } else {
                                0.0
                            };
                            for &train in &sweep.train {
                                let q = if sweep.quality && two_stage && tiny {
                                    let key = (eff.to_bits(), cache && eff > 0.0, residual, train);
                                    if !quality_cache.contains_key(&key) {
                                        let v = quality(sweep, eff, key.1, residual, train)?;
                                        quality_cache.insert(key, v);
                                    }
                                    Some(quality_cache[&key])
                                } else {
                                    None
                                };
                                rows.push(BenchRow {
                                    resolution: res,
                                    cache_ratio: ratio,
                                    cache,
                                    residual,
                                    train,
                                    two_stage,
                                    tiny,
                                    reuse_fraction: plan.cache_ratio(),
                                    forward_macs: forward,
                                    linear_macs: fwd.pixel_linear() as f64 * per_pass,
                                    decoder_macs: dec,
                                    upsample_macs: ups,
                                    residual_macs: res_macs,
                                    total_macs: forward + dec + ups + res_macs,
                                    wall_ms: wall,
                                    psnr: q.map(|v| v.0),
                                    bps: q.map(|v| v.1),
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let header = [
        "resolution",
        "cache_ratio",
        "cache",
        "residual",
        "train",
        "two_stage",
        "tiny",
        "reuse_fraction",
        "forward_macs",
        "linear_macs",
        "decoder_macs",
        "upsample_macs",
        "residual_macs",
        "total_macs",
        "wall_ms",
        "psnr",
        "bps",
    ];
    w.write_record(header).map_err(|e| Error::Io(e.into()))?;
    let b = |v: bool| (v as u8).to_string();
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.3}"));
    for r in rows {
        w.write_record([
            r.resolution.to_string(),
            format!("{}", r.cache_ratio),
            b(r.cache),
            b(r.residual),
            b(r.train),
            b(r.two_stage),
            b(r.tiny),
            format!("{:.4}", r.reuse_fraction),
            format!("{:.1}", r.forward_macs),
            format!("{:.1}", r.linear_macs),
            format!("{:.1}", r.decoder_macs),
            format!("{:.1}", r.upsample_macs),
            format!("{:.1}", r.residual_macs),
            format!("{:.1}", r.total_macs),
            opt(r.wall_ms),
            opt(r.psnr),
            opt(r.bps),
        ])
        .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
