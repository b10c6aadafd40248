//! Browser bindings: prompt interpolation on the micro model, stitching
//! previews and the cache-ratio cost curve.

use pmob::denoiser::{noise, Model, ModelConfig};
use pmob::numerics::Tensor;
use pmob::pipeline::bench::{self, Sweep};
use pmob::pipeline::corpus::translating_texture;
use pmob::prompt_codec::{lerp, LowRankPrompt};
use pmob::stitcher::{scheme_energies, select_scheme, stitch, FrameImage, StitchScheme};
use pmob::trainer::{render, split_frames};
use wasm_bindgen::prelude::*;

const PREVIEW: usize = 32;

fn err(e: pmob::Error) -> String {
    e.to_string()
}

/// RGBA bytes of a planar RGB image.
pub fn to_rgba(img: &FrameImage) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(4 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

/// Four equal-sized frames tiled 2×2, for display only.
pub fn tile(frames: &[FrameImage]) -> FrameImage {
    let (h, w) = (frames[0].height(), frames[0].width());
    let mut data = vec![0.0; 3 * 4 * h * w];
    for (i, f) in frames.iter().enumerate().take(4) {
        let (oy, ox) = (h * (i / 2), w * (i % 2));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(c * 2 * h + oy + y) * 2 * w + ox + x] = f.get(c, y, x);
                }
            }
        }
    }
    FrameImage::new(2 * h, 2 * w, data).expect("sized")
}

fn scheme(code: u8) -> Result<StitchScheme, String> {
    StitchScheme::from_code(code).map_err(err)
}

fn preview_frames(seed: u32, speed: f32) -> [FrameImage; 4] {
    translating_texture(PREVIEW, PREVIEW, 4, (speed, 0.5 * speed), seed as u64)
        .frames
        .try_into()
        .expect("four frames")
}

#[wasm_bindgen]
pub struct Demo {
    model: Model,
    noise: Tensor,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, String> {
        let model = Model::generate(ModelConfig::micro(), seed as u64).map_err(err)?;
        let c = model.config();
        let noise = noise(seed as u64, c.latent_channels, c.latent_h, c.latent_w);
        Ok(Demo { model, noise })
    }

    /// Side of the tiled preview returned by [`Demo::interpolate`].
    pub fn tile_side(&self) -> usize {
        2 * self.model.config().output_hw().0
    }

    /// The four frames generated from the prompt `alpha` of the way from
    /// keyframe `seed_a` to keyframe `seed_b`, tiled 2×2 as RGBA.
    pub fn interpolate(&self, seed_a: u32, seed_b: u32, alpha: f32, scheme_code: u8) -> Result<Vec<u8>, String> {
        let d = self.model.config().d;
        let a = LowRankPrompt::random(4, d, 0.4, seed_a as u64).map_err(err)?.compose();
        let b = LowRankPrompt::random(4, d, 0.4, seed_b as u64).map_err(err)?.compose();
        let p = lerp(&a, &b, alpha.clamp(0.0, 1.0)).map_err(err)?;
        let out = render(&self.model, &self.noise, &p, scheme(scheme_code)?).map_err(err)?;
        let frames: Vec<FrameImage> = split_frames(&out).map_err(err)?.iter().map(FrameImage::clamp01).collect();
        Ok(to_rgba(&tile(&frames)))
    }
}

/// Side of the stitched preview.
#[wasm_bindgen]
pub fn stitch_side() -> usize {
    2 * PREVIEW
}

/// Four consecutive frames of a moving texture stitched with `scheme_code`, as RGBA.
#[wasm_bindgen]
pub fn stitch_preview(scheme_code: u8, seed: u32, speed: f32) -> Result<Vec<u8>, String> {
    let img = stitch(&preview_frames(seed, speed), scheme(scheme_code)?).map_err(err)?;
    Ok(to_rgba(&img))
}

/// Gradient energy of both interleaved layouts (codes 2 and 3) and the chosen code.
#[wasm_bindgen]
pub fn stitch_energies(seed: u32, speed: f32) -> Result<Vec<f64>, String> {
    let f = preview_frames(seed, speed);
    let e = scheme_energies(&f).map_err(err)?;
    let pick = select_scheme(&f).map_err(err)?;
    Ok(vec![e[0], e[1], pick.code() as f64])
}

/// Per-frame MACs of the desk model at `resolution` for `steps + 1` cache
/// ratios from 0 to 1; `two_stage` toggles stitching and upsampling.
#[wasm_bindgen]
pub fn flop_curve(resolution: usize, steps: usize, two_stage: bool) -> Result<Vec<f64>, String> {
    let steps = steps.max(1);
    let sweep = Sweep {
        model: "desk".into(),
        resolutions: vec![resolution],
        cache_ratios: (0..=steps).map(|i| i as f64 / steps as f64).collect(),
        two_stage: vec![two_stage],
        ..Sweep::default()
    };
    let rows = bench::run(&sweep).map_err(err)?;
    Ok(rows.iter().map(|r| r.total_macs).collect())
}
