//! Synthetic clips so tests and benchmarks need no dataset.

use std::f32::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::video::VideoSequence;
use crate::denoiser::{noise, Model};
use crate::error::Result;
use crate::prompt_codec::{lerp, LowRankPrompt};
use crate::stitcher::{select_scheme, FrameImage, StitchScheme};
use crate::trainer::{render, split_frames};

const FPS: (u16, u16) = (30, 1);

/// Smooth random field: a few low-frequency sinusoids per channel.
#[derive(Clone, Debug)]
struct Texture {
    waves: Vec<[f32; 5]>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..3 * 4)
            .map(|_| {
                [
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.0..TAU),
                    rng.random_range(0.05..0.15),
                    rng.random_range(0.3..0.7),
                ]
            })
            .collect();
        Self { waves }
    }

    fn frame(&self, h: usize, w: usize, ox: f32, oy: f32) -> FrameImage {
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            let base: f32 = self.waves[c * 4..c * 4 + 4].iter().map(|v| v[4]).sum::<f32>() / 4.0;
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = ((x as f32 + ox) / w as f32, (y as f32 + oy) / h as f32);
                    let s: f32 = self.waves[c * 4..c * 4 + 4]
                        .iter()
                        .map(|wv| wv[3] * (TAU * (wv[0] * u + wv[1] * v) + wv[2]).sin())
                        .sum();
                    data[c * h * w + y * w + x] = (base + s).clamp(0.0, 1.0);
                }
            }
        }
        FrameImage::new(h, w, data).expect("sized")
    }
}

/// Colour ramp whose direction and offset drift over time.
pub fn moving_gradient(h: usize, w: usize, n: usize, seed: u64) -> VideoSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols: Vec<[f32; 3]> = (0..3)
        .map(|_| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)])
        .collect();
    let speed = rng.random_range(0.005..0.02);
    let frames = (0..n)
        .map(|t| {
            let phase = t as f32 * speed;
            let mut data = vec![0.0; 3 * h * w];
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let s = ((x as f32 / w as f32 + 0.5 * y as f32 / h as f32 + phase).fract() * TAU).sin() * 0.5 + 0.5;
                        data[c * h * w + y * w + x] = cols[0][c] * (1.0 - s) + cols[1][c] * s * 0.8 + cols[2][c] * 0.2 * s;
                    }
                }
            }
            FrameImage::new(h, w, data).expect("sized")
        })
        .collect();
    VideoSequence { frames, fps: FPS }
}

/// A smooth texture translating by a constant velocity in pixels per frame.
pub fn translating_texture(h: usize, w: usize, n: usize, velocity: (f32, f32), seed: u64) -> VideoSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = Texture::new(&mut rng);
    let frames = (0..n)
        .map(|t| tex.frame(h, w, velocity.0 * t as f32, velocity.1 * t as f32))
        .collect();
    VideoSequence { frames, fps: FPS }
}

/// Two unrelated textures with a hard cut at frame `cut`.
pub fn scene_cut(h: usize, w: usize, n: usize, cut: usize, seed: u64) -> VideoSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Texture::new(&mut rng);
    let b = Texture::new(&mut rng);
    let frames = (0..n)
        .map(|t| {
            if t < cut {
                a.frame(h, w, t as f32, 0.0)
            } else {
                b.frame(h, w, 0.0, t as f32)
            }
        })
        .collect();
    VideoSequence { frames, fps: FPS }
}

/// Frames the model itself renders from known prompts, for self-consistency
/// checks. Keyframe prompts are interpolated over `groups` groups of
/// `group_len`, giving `4 · (1 + groups · (group_len − 1))` frames.
#[derive(Clone, Debug)]
pub struct SelfGenerated {
    pub video: VideoSequence,
    pub keyframes: Vec<LowRankPrompt>,
    pub schemes: Vec<StitchScheme>,
}

pub fn self_generated(
    model: &Model,
    noise_seed: u64,
    rank: usize,
    std: f32,
    group_len: usize,
    groups: usize,
    seed: u64,
) -> Result<SelfGenerated> {
    let cfg = model.config();
    let z = noise(noise_seed, cfg.latent_channels, cfg.latent_h, cfg.latent_w);
    let keyframes = (0..=groups)
        .map(|j| LowRankPrompt::random(rank, cfg.d, std, seed.wrapping_add(j as u64)))
        .collect::<Result<Vec<_>>>()?;
    let composed: Vec<_> = keyframes.iter().map(|k| k.compose()).collect();
    let m = group_len.max(2) - 1;
    let n = if groups == 0 { 1 } else { 1 + groups * m };
    let mut frames = Vec::with_capacity(4 * n);
    let mut schemes = Vec::with_capacity(n);
    for s in 0..n {
        let prompt = if s == 0 || groups == 0 {
            composed[0].clone()
        } else {
            let (g, i) = ((s - 1) / m, (s - 1) % m + 1);
            lerp(&composed[g], &composed[g + 1], i as f32 / m as f32)?
        };
        // render with whichever scheme the encoder would pick for the result
        let mut chosen = None;
        for scheme in [StitchScheme::InterleaveA, StitchScheme::InterleaveB] {
            let out: [FrameImage; 4] = split_frames(&render(model, &z, &prompt, scheme)?)?
                .iter()
                .map(FrameImage::clamp01)
                .collect::<Vec<_>>()
                .try_into()
                .expect("four frames");
            if select_scheme(&out)? == scheme {
                chosen = Some((scheme, out));
                break;
            }
            chosen.get_or_insert((scheme, out));
        }
        let (scheme, out) = chosen.expect("at least one scheme rendered");
        schemes.push(scheme);
        frames.extend(out);
    }
    Ok(SelfGenerated {
        video: VideoSequence { frames, fps: FPS },
        keyframes,
        schemes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stitcher::gradient_energy;

    #[test]
    fn clips_are_in_range_and_move() {
        for v in [
            moving_gradient(16, 16, 4, 1),
            translating_texture(16, 16, 4, (1.0, 0.5), 2),
            scene_cut(16, 16, 4, 2, 3),
        ] {
            assert_eq!(v.len(), 4);
            assert!(v.frames.iter().all(|f| f.data().iter().all(|&x| (0.0..=1.0).contains(&x))));
            assert_ne!(v.frames[0], v.frames[3]);
            assert!(gradient_energy(&v.frames[0]) > 0.0);
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(translating_texture(8, 8, 3, (1.0, 0.0), 5), translating_texture(8, 8, 3, (1.0, 0.0), 5));
    }
}
