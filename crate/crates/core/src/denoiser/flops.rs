//! Multiply-accumulate accounting.
//!
//! Convolutions are counted densely (padding taps included), linears as
//! `rows · in · out`, attention as its two products. Elementwise work is
//! free except the cached-block affine, which costs one MAC per element.

use super::{BlockKind, ModelConfig, DECODER_FACTOR};
use crate::cache_engine::CachePlan;
use crate::numerics::ResizePlan;
use crate::prompt_codec::PROMPT_TOKENS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockMacs {
    pub kind: BlockKind,
    /// Terms linear in the block's pixel count.
    pub pixel_linear: u64,
    /// Terms quadratic in the token count (self-attention products).
    pub quadratic: u64,
    /// Terms independent of resolution (prompt key/value projection).
    pub constant: u64,
    /// Elements of the block's activation, `C · h · w`.
    pub elements: u64,
}

impl BlockMacs {
    pub fn total(&self) -> u64 {
        self.pixel_linear + self.quadratic + self.constant
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForwardMacs {
    pub blocks: Vec<BlockMacs>,
    /// Input, down, up and output convolutions.
    pub stem: u64,
}

impl ForwardMacs {
    pub fn total(&self) -> u64 {
        self.stem + self.blocks.iter().map(BlockMacs::total).sum::<u64>()
    }

    pub fn pixel_linear(&self) -> u64 {
        self.stem + self.blocks.iter().map(|b| b.pixel_linear).sum::<u64>()
    }

    pub fn quadratic(&self) -> u64 {
        self.blocks.iter().map(|b| b.quadratic).sum()
    }
}

fn conv(ci: usize, co: usize, k: usize, pixels: usize) -> u64 {
    (ci * co * k * k * pixels) as u64
}

/// One uncached denoiser pass on an `h × w` latent.
pub fn forward_macs(cfg: &ModelConfig, h: usize, w: usize) -> ForwardMacs {
    let (c, l, d, m) = (cfg.hidden, cfg.latent_channels, cfg.d, PROMPT_TOKENS);
    let hw = h * w;
    let stem = conv(l, c, 3, hw) + conv(c, c, 3, hw / 4) + conv(c, c, 3, hw) + conv(c, l, 3, hw);
    let blocks = cfg
        .blocks()
        .enumerate()
        .map(|(i, kind)| {
            let (bh, bw) = cfg.block_hw(i, h, w);
            let n = bh * bw;
            let (pixel_linear, quadratic, constant) = match kind {
                BlockKind::Res => (2 * conv(c, c, 3, n), 0, 0),
                BlockKind::SelfAttn => ((4 * n * c * c) as u64, (2 * n * n * c) as u64, 0),
                BlockKind::CrossAttn => ((2 * n * c * c + 2 * n * m * c) as u64, 0, (2 * m * d * c) as u64),
                BlockKind::FeedForward => ((4 * n * c * c) as u64, 0, 0),
            };
            BlockMacs {
                kind,
                pixel_linear,
                quadratic,
                constant,
                elements: (c * n) as u64,
            }
        })
        .collect();
    ForwardMacs { blocks, stem }
}

/// Tiny decoder on an `h × w` latent.
pub fn decoder_macs(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
    let [w0, w1, w2] = cfg.decoder;
    let hw = h * w;
    conv(cfg.latent_channels, w0, 3, hw)
        + conv(w0, w1, 3, 4 * hw)
        + conv(w1, w2, 3, 16 * hw)
        + conv(w2, 3, 3, DECODER_FACTOR * DECODER_FACTOR * hw)
}

/// Bicubic upsampling of the four frames unstitched from an `h × w` latent.
pub fn upsample_macs(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
    let (fh, fw) = (h * DECODER_FACTOR / 2, w * DECODER_FACTOR / 2);
    4 * ResizePlan::new(3, fh, fw, cfg.upscale).macs()
}

/// Denoiser cost of the forward passes a plan governs, with and without it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub frames: usize,
    pub forward: ForwardMacs,
    pub uncached: u64,
    pub cached: u64,
    /// Savings attributable to reusing each block.
    pub saved_per_block: Vec<u64>,
    /// Net savings from interpolating cached keys and values, after paying
    /// one projection per cross-attention layer for the incoming keyframe.
    pub saved_kv: i64,
    pub decoder: u64,
    pub upsample: u64,
}

impl FlopReport {
    pub fn saved(&self) -> i64 {
        self.uncached as i64 - self.cached as i64
    }

    pub fn reduction(&self) -> f64 {
        if self.uncached == 0 {
            0.0
        } else {
            self.saved() as f64 / self.uncached as f64
        }
    }
}

/// Cost of the plan's frames on an `h × w` latent; one frame when `plan` is `None`.
pub fn flop_count(cfg: &ModelConfig, h: usize, w: usize, plan: Option<&CachePlan>) -> FlopReport {
    let fwd = forward_macs(cfg, h, w);
    let frames = plan.map_or(1, |p| p.frames);
    let uncached = frames as u64 * fwd.total();
    let mut saved_per_block = vec![0u64; fwd.blocks.len()];
    let mut cached = uncached;
    let mut saved_kv = 0i64;
    if let Some(p) = plan {
        let cross = cfg.cross_blocks();
        for (b, bm) in fwd.blocks.iter().enumerate() {
            let reused = (0..frames).filter(|&f| p.is_reuse(b, f)).count() as u64;
            let s = reused * (bm.total() - bm.elements);
            saved_per_block[b] = s;
            cached -= s;
        }
        for (layer, &b) in cross.iter().enumerate() {
            if !p.kv_cached.get(layer).copied().unwrap_or(false) {
                continue;
            }
            let bm = &fwd.blocks[b];
            let lerp = 2 * 2 * (PROMPT_TOKENS * cfg.hidden) as u64;
            let computing = (0..frames).filter(|&f| !p.is_reuse(b, f)).count() as u64;
            let net = computing as i64 * (bm.constant as i64 - lerp as i64) - bm.constant as i64;
            saved_kv += net;
            cached = (cached as i64 - net) as u64;
        }
    }
    FlopReport {
        frames,
        forward: fwd,
        uncached,
        cached,
        saved_per_block,
        saved_kv,
        decoder: decoder_macs(cfg, h, w),
        upsample: upsample_macs(cfg, h, w),
    }
}

/// Denoiser cost of decision frame `frame` of `plan`; a keyframe or
/// reference frame (no plan) costs one full pass.
pub fn frame_macs(cfg: &ModelConfig, h: usize, w: usize, plan: Option<(&CachePlan, usize)>) -> u64 {
    let fwd = forward_macs(cfg, h, w);
    let mut cost = fwd.total();
    let Some((p, f)) = plan else { return cost };
    for (b, bm) in fwd.blocks.iter().enumerate() {
        if p.is_reuse(b, f) {
            cost -= bm.total() - bm.elements;
        }
    }
    let lerp = 2 * 2 * (PROMPT_TOKENS * cfg.hidden) as u64;
    for (layer, &b) in cfg.cross_blocks().iter().enumerate() {
        if p.kv_cached.get(layer).copied().unwrap_or(false) && !p.is_reuse(b, f) {
            cost = cost - fwd.blocks[b].constant + lerp;
        }
    }
    cost
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_only_scales_with_area() {
        let mut cfg = ModelConfig::desk();
        cfg.blocks_hi = vec![BlockKind::Res];
        cfg.blocks_lo = vec![BlockKind::Res];
        let a = forward_macs(&cfg, 16, 16);
        let b = forward_macs(&cfg, 32, 32);
        assert_eq!(b.total(), 4 * a.total());
        assert_eq!(decoder_macs(&cfg, 32, 32), 4 * decoder_macs(&cfg, 16, 16));
    }

    #[test]
    fn attention_terms_scale_quadratically() {
        let cfg = ModelConfig::desk();
        let a = forward_macs(&cfg, 16, 16);
        let b = forward_macs(&cfg, 32, 32);
        assert_eq!(b.quadratic(), 16 * a.quadratic());
        assert_eq!(b.pixel_linear(), 4 * a.pixel_linear());
    }

    #[test]
    fn hand_counted_desk_blocks() {
        let f = forward_macs(&ModelConfig::desk(), 32, 32);
        // res at 32×32, C = 32: two 3×3 convs
        assert_eq!(f.blocks[0].total(), 2 * 32 * 32 * 9 * 1024);
        // self-attention: four projections plus QKᵀ and AV
        assert_eq!(f.blocks[1].total(), 4 * 1024 * 32 * 32 + 2 * 1024 * 1024 * 32);
        // cross-attention: q/o, QKᵀ and AV over 77 tokens, K/V from d = 64
        assert_eq!(f.blocks[2].total(), 2 * 1024 * 32 * 32 + 2 * 1024 * 77 * 32 + 2 * 77 * 64 * 32);
        assert_eq!(f.blocks[3].total(), 4 * 1024 * 32 * 32);
        assert_eq!(f.blocks[4].total(), 2 * 32 * 32 * 9 * 256);
    }

    #[test]
    fn decoder_is_cheap_next_to_forward() {
        let cfg = ModelConfig::desk();
        let fwd = forward_macs(&cfg, 32, 32).total();
        let dec = decoder_macs(&cfg, 32, 32);
        assert!(dec * 4 < fwd, "{dec} vs {fwd}");
    }

    #[test]
    fn empty_plan_saves_nothing() {
        let cfg = ModelConfig::desk();
        let plan = CachePlan::all_compute(cfg.n_blocks(), cfg.cross_blocks().len(), 3);
        let r = flop_count(&cfg, 32, 32, Some(&plan));
        assert_eq!(r.saved(), 0);
        assert_eq!(r.uncached, 3 * r.forward.total());
    }
}
