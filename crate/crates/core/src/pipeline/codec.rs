//! Encoder and decoder over whole clips.

use std::sync::Arc;

use super::config::EncodeConfig;
use super::video::VideoSequence;
use crate::bitstream::{GroupRecord, Stream, StreamHeader};
use crate::cache_engine::{cross_inputs, frame_modes, CachePlan, CacheState, PlanCodes};
use crate::denoiser::{noise, ForwardOpts, Model};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::prompt_codec::{lerp, uniform_alphas, QuantizedPrompt, PROMPT_TOKENS};
use crate::residual_codec::{apply_residual, encode_residual, rank_tradeoff, split_budget};
use crate::stitcher::{scheme_energies, select_scheme, FrameImage, StitchScheme};
use crate::trainer::{
    fit_group_phase1, fit_group_phase2, initial_factors, mse, psnr, render_on, split_frames, stack_frames, Factors,
    FitConfig, FrameTask, Geometry, GroupJob,
};

/// Stitched frame count after padding `n` source frames to whole groups.
pub fn stitched_count(n: usize, group_len: usize) -> usize {
    let s = n.div_ceil(4).max(1);
    if s == 1 {
        return 1;
    }
    let m = group_len - 1;
    1 + (s - 1).div_ceil(m) * m
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodeReport {
    pub loss_trace: Vec<f64>,
    pub schemes: Vec<StitchScheme>,
    /// Stitched frames that fell back to repeating their first frame.
    pub scene_cuts: Vec<usize>,
    pub plans: Vec<CachePlan>,
    /// Receiver-side PSNR per source frame before and after residuals.
    pub recon_psnr: Vec<f64>,
    pub final_psnr: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub stream: Stream,
    pub report: EncodeReport,
}

/// Model named by the configuration: a weight file, else a seeded preset.
pub fn load_model(cfg: &EncodeConfig) -> Result<Model> {
    match &cfg.weights {
        Some(p) => crate::denoiser::read_weights(std::io::BufReader::new(std::fs::File::open(p)?)),
        None => Model::generate(super::config::preset(&cfg.model)?, cfg.model_seed),
    }
}

fn check_model(h: &StreamHeader, model: &Model) -> Result<()> {
    if h.weight_hash != model.weight_hash() {
        return Err(Error::HashMismatch {
            expected: h.weight_hash,
            found: model.weight_hash(),
        });
    }
    let c = model.config();
    let (oh, ow) = c.output_hw();
    let want = (
        c.latent_channels,
        c.latent_h,
        c.latent_w,
        c.hidden,
        c.d,
        c.upscale,
        oh,
        ow,
    );
    let got = (
        h.latent_c as usize,
        h.latent_h as usize,
        h.latent_w as usize,
        h.hidden as usize,
        h.d as usize,
        h.upscale as usize,
        h.height as usize,
        h.width as usize,
    );
    if want != got {
        return Err(Error::Topology(format!("stream geometry {got:?} does not match model {want:?}")));
    }
    Ok(())
}

/// Best stitching energy per stitched frame and the scene-cut flags.
fn scene_cuts(frames: &[FrameImage], factor: f64) -> Result<Vec<bool>> {
    let best: Vec<f64> = frames
        .chunks(4)
        .map(|c| {
            let q: &[FrameImage; 4] = c.try_into().expect("whole stitched frames");
            scheme_energies(q).map(|e| e[0].min(e[1]))
        })
        .collect::<Result<_>>()?;
    let mut sorted = best.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    Ok(best.iter().map(|&b| median > 0.0 && b > factor * median).collect())
}

pub fn encode_video(src: &VideoSequence, model: &Model, cfg: &EncodeConfig) -> Result<Encoded> {
    cfg.validate()?;
    if src.is_empty() {
        return Err(Error::InvalidArgument("empty video".into()));
    }
    let mc = model.config();
    let (oh, ow) = mc.output_hw();
    if src.hw() != Some((oh, ow)) {
        return Err(Error::Shape {
            op: "encode",
            left: vec![src.hw().unwrap().0, src.hw().unwrap().1],
            right: vec![oh, ow],
        });
    }
    let fit: &FitConfig = &cfg.fit;
    if fit.rank > PROMPT_TOKENS.min(mc.d) {
        return Err(Error::InvalidArgument(format!("rank {} exceeds min(77, d = {})", fit.rank, mc.d)));
    }
    let n = src.len();
    let group_len = fit.group_len;
    let m = group_len - 1;
    let s_count = stitched_count(n, group_len);
    let mut frames = src.frames.clone();
    frames.resize(4 * s_count, frames[n - 1].clone());

    let cuts = scene_cuts(&frames, cfg.scene_cut_factor)?;
    let mut schemes = Vec::with_capacity(s_count);
    let mut targets = Vec::with_capacity(s_count);
    for (s, chunk) in frames.chunks(4).enumerate() {
        let quad: [FrameImage; 4] = if cuts[s] {
            std::array::from_fn(|_| chunk[0].clone())
        } else {
            chunk.to_vec().try_into().expect("four frames")
        };
        schemes.push(select_scheme(&quad)?);
        targets.push(Arc::new(stack_frames(&quad)?));
    }

    let z = noise(cfg.noise_seed, mc.latent_channels, mc.latent_h, mc.latent_w);
    let alphas = uniform_alphas(group_len)?;
    let task = |s: usize, pos: usize| FrameTask {
        pos,
        alpha: if s_count == 1 { 0.0 } else { alphas[pos] as f64 },
        scheme: schemes[s],
        target: targets[s].clone(),
    };
    let init = initial_factors(fit, mc.d)?;
    let mut keyframes: Vec<QuantizedPrompt> = Vec::new();
    let mut received: Vec<Factors<f32>> = Vec::new();
    let mut plans: Vec<PlanCodes> = Vec::new();
    let mut report = EncodeReport {
        schemes: schemes.clone(),
        scene_cuts: (0..s_count).filter(|&s| cuts[s]).collect(),
        ..Default::default()
    };
    let push_key = |f: &Factors<f32>, keyframes: &mut Vec<QuantizedPrompt>, received: &mut Vec<Factors<f32>>| -> Result<()> {
        let q = QuantizedPrompt::quantize(&f.to_prompt()?, cfg.q)?;
        let back = q.dequantize()?;
        keyframes.push(q);
        received.push(Factors { u: back.u, v: back.v });
        Ok(())
    };
    if s_count == 1 {
        let job = GroupJob {
            fixed_a: None,
            init: vec![init],
            has_b: false,
            tasks: vec![task(0, 0)],
            m: 1,
        };
        let p1 = fit_group_phase1(model, &z, &job, fit)?;
        let p2 = fit_group_phase2(model, &z, &job, fit, p1)?;
        report.loss_trace.extend(&p2.trace);
        push_key(&p2.keyframes[0], &mut keyframes, &mut received)?;
    } else {
        for g in 0..(s_count - 1) / m {
            let first = if g == 0 { 0 } else { 1 };
            let job = GroupJob {
                fixed_a: (g > 0).then(|| received[g].clone()),
                init: if g == 0 { vec![init.clone(), init.clone()] } else { vec![received[g].clone()] },
                has_b: true,
                tasks: (first..=m).map(|i| task(g * m + i, i)).collect(),
                m,
            };
            let p1 = fit_group_phase1(model, &z, &job, fit)?;
            let p2 = fit_group_phase2(model, &z, &job, fit, p1)?;
            report.loss_trace.extend(&p2.trace);
            for k in &p2.keyframes {
                push_key(k, &mut keyframes, &mut received)?;
            }
            let codes = PlanCodes::encode(&p2.plan, mc.hidden)?;
            report.plans.push(codes.to_plan());
            plans.push(codes);
        }
    }

    // one keyframe per group of 4·m source frames
    let kfps = src.fps_f64() / (4 * m) as f64;
    let residual_bps = cfg.residual_bps + rank_tradeoff(cfg.residual_rank_reduction, mc.d, cfg.q, kfps, 1).bps;
    let header = StreamHeader {
        width: ow as u16,
        height: oh as u16,
        fps_num: src.fps.0,
        fps_den: src.fps.1,
        d: mc.d as u16,
        rank: fit.rank as u16,
        q: cfg.q as u8,
        group_len: group_len as u16,
        latent_c: mc.latent_channels as u8,
        latent_h: mc.latent_h as u16,
        latent_w: mc.latent_w as u16,
        hidden: mc.hidden as u16,
        upscale: mc.upscale as u8,
        noise_seed: cfg.noise_seed,
        weight_hash: model.weight_hash(),
        residual: residual_bps > 0,
        kv_cache: fit.kv_cache,
        stitched_frames: s_count as u32,
        source_frames: n as u32,
    };
    let mut records: Vec<GroupRecord> = keyframes
        .into_iter()
        .enumerate()
        .map(|(j, keyframe)| {
            let (lo, len) = if j == 0 { (0, 1) } else { ((j - 1) * m + 1, m) };
            GroupRecord {
                keyframe,
                schemes: schemes[lo..lo + len].to_vec(),
                plan: (j > 0).then(|| plans[j - 1].clone()),
                residuals: if header.residual { vec![None; 4 * len] } else { vec![] },
            }
        })
        .collect();
    let mut stream = Stream { header, records: records.clone() };

    let recon = reconstruct(&stream, model)?;
    report.recon_psnr = (0..n).map(|i| psnr(mse(recon[i].data(), src.frames[i].data()))).collect();
    report.final_psnr = report.recon_psnr.clone();
    if stream.header.residual {
        let per_second = src.fps_f64().ceil().max(1.0) as usize;
        let budgets = split_budget(residual_bps, per_second);
        for i in 0..n {
            let p = encode_residual(&src.frames[i], &recon[i], budgets[i % per_second])?;
            if p.is_empty() {
                continue;
            }
            let out = apply_residual(&recon[i], &p)?;
            report.final_psnr[i] = psnr(mse(out.data(), src.frames[i].data()));
            let (j, slot) = residual_slot(i, m);
            records[j].residuals[slot] = Some(p);
        }
        stream.records = records;
    }
    let bytes = stream.pack()?;
    Ok(Encoded { bytes, stream, report })
}

/// Record and residual slot of source frame `i`.
pub fn residual_slot(i: usize, m: usize) -> (usize, usize) {
    let s = i / 4;
    if s == 0 {
        (0, i)
    } else {
        let j = (s - 1) / m + 1;
        (j, i - 4 * ((j - 1) * m + 1))
    }
}

fn render_frame(
    tape: &mut Tape,
    model: &Model,
    geom: &Geometry,
    z: &Tensor,
    prompt: &Tensor,
    opts: &ForwardOpts,
    scheme: StitchScheme,
) -> Result<(Vec<FrameImage>, Vec<Tensor>)> {
    let zv = tape.constant(z.clone());
    let pv = tape.constant(prompt.clone());
    let (out, fwd) = render_on(tape, model, geom, zv, Some(pv), opts, scheme)?;
    let dx = fwd.dx.iter().map(|&d| tape.value(d).clone()).collect();
    let frames = split_frames(&tape.value(out).map(|v| v.clamp(0.0, 1.0)))?;
    Ok((frames, dx))
}

/// Every generated frame of the stream (four per stitched frame) before residuals.
pub fn reconstruct(stream: &Stream, model: &Model) -> Result<Vec<FrameImage>> {
    let h = &stream.header;
    check_model(h, model)?;
    if stream.records.is_empty() {
        return Ok(vec![]);
    }
    let cfg = model.config();
    let z = noise(h.noise_seed, cfg.latent_channels, cfg.latent_h, cfg.latent_w);
    let geom = Geometry::new(model);
    let prompts: Vec<Tensor> = stream
        .records
        .iter()
        .map(|r| r.keyframe.dequantize().map(|p| p.compose()))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(4 * h.stitched_frames as usize);
    let mut tape = Tape::new();
    let (f0, mut dx_ref) = render_frame(
        &mut tape,
        model,
        &geom,
        &z,
        &prompts[0],
        &ForwardOpts::default(),
        stream.records[0].schemes[0],
    )?;
    out.extend(f0);
    let m = h.stride();
    let alphas = uniform_alphas(h.group_len as usize)?;
    let mut state = CacheState::default();
    for j in 1..stream.records.len() {
        let rec = &stream.records[j];
        let plan = rec.plan.as_ref().ok_or_else(|| Error::Malformed(format!("record {j} lacks a plan")))?.to_plan();
        plan.check_topology(cfg)?;
        let kv_on = plan.kv_cached.iter().any(|&k| k);
        if kv_on {
            state.kv_a = model.project_kv(&prompts[j - 1])?;
            state.kv_b = model.project_kv(&prompts[j])?;
        }
        state.dx_ref = dx_ref.iter().cloned().map(Some).collect();
        for i in 1..=m {
            let alpha = alphas[i];
            let prompt = lerp(&prompts[j - 1], &prompts[j], alpha)?;
            let mut tape = Tape::new();
            let mut opts = ForwardOpts::default();
            if i < m {
                opts.modes = frame_modes(&mut tape, &plan, i - 1, &state)?;
            }
            if kv_on {
                opts.cross = cross_inputs(&mut tape, &plan.kv_cached, &state, alpha)?;
            }
            let (frames, dx) = render_frame(&mut tape, model, &geom, &z, &prompt, &opts, rec.schemes[i - 1])?;
            out.extend(frames);
            if i == m {
                dx_ref = dx;
            }
        }
    }
    Ok(out)
}

/// Decoded clip: reconstruction plus residuals, trimmed to the source length.
pub fn decode_stream(stream: &Stream, model: &Model) -> Result<VideoSequence> {
    let h = &stream.header;
    let mut frames = reconstruct(stream, model)?;
    frames.truncate(h.source_frames as usize);
    if h.residual {
        let m = h.stride();
        for (i, f) in frames.iter_mut().enumerate() {
            let (j, slot) = residual_slot(i, m);
            if let Some(p) = &stream.records[j].residuals[slot] {
                *f = apply_residual(f, p)?;
            }
        }
    }
    VideoSequence::new(frames, (h.fps_num, h.fps_den))
}

pub fn decode_video(bytes: &[u8], model: &Model) -> Result<VideoSequence> {
    decode_stream(&Stream::unpack(bytes)?, model)
}

/// The same stream with every residual payload removed.
pub fn strip_residuals(stream: &Stream) -> Stream {
    let mut s = stream.clone();
    s.header.residual = false;
    s.records.iter_mut().for_each(|r| r.residuals.clear());
    s
}

/// Source frame index of the first frame carried by record `j`.
pub fn record_first_frame(j: usize, m: usize) -> usize {
    if j == 0 {
        0
    } else {
        4 * ((j - 1) * m + 1)
    }
}
