//! Bandwidth check over sliding one-second windows plus per-frame metrics.
//!
//! Bits are charged to the frame that first needs them: the header to frame
//! 0, a record's keyframe, scheme codes and plan to the first source frame it
//! carries, a residual payload to its own frame, final padding to the last
//! frame.

use std::path::Path;

use super::codec::{decode_stream, record_first_frame, residual_slot};
use super::video::VideoSequence;
use crate::bitstream::{Breakdown, Stream, HEADER_BYTES};
use crate::denoiser::{decoder_macs, frame_macs, upsample_macs, Model};
use crate::error::{Error, Result};
use crate::residual_codec::ResidualPayload;
use crate::trainer::{mse, psnr};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    /// Source frames `start..end`.
    pub start: usize,
    pub end: usize,
    pub bits: u64,
    pub bps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub pass: bool,
    pub bandwidth: f64,
    pub mean_bps: f64,
    pub peak: Window,
    pub first_violation: Option<Window>,
    pub breakdown: Breakdown,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub frame: usize,
    pub mse: Option<f64>,
    pub psnr: Option<f64>,
    pub bits: u64,
    pub cumulative_bits: u64,
    pub cumulative_bps: f64,
    pub flops: u64,
    pub cumulative_flops: u64,
}

/// Stream bits charged to each source frame; sums to the packed size.
pub fn frame_bits(stream: &Stream) -> Result<Vec<u64>> {
    let h = &stream.header;
    let n = h.source_frames as usize;
    let total = 8 * stream.pack()?.len() as u64;
    if n == 0 {
        return Ok(vec![]);
    }
    let mut bits = vec![0u64; n];
    bits[0] += 8 * HEADER_BYTES as u64;
    let m = h.stride();
    let last = n - 1;
    for (j, rec) in stream.records.iter().enumerate() {
        let key = rec.keyframe.u.code_bits() + rec.keyframe.v.code_bits() + 64;
        let fixed = key + 2 * rec.schemes.len() as u64 + rec.plan.as_ref().map_or(0, |p| p.bit_len() as u64);
        bits[record_first_frame(j, m).min(last)] += fixed;
        for (slot, p) in rec.residuals.iter().enumerate() {
            let i = if j == 0 { slot } else { record_first_frame(j, m) + slot };
            debug_assert_eq!(residual_slot(i, m), (j, slot));
            bits[i.min(last)] += 1 + p.as_ref().map_or(0, ResidualPayload::bits);
        }
    }
    let used: u64 = bits.iter().sum();
    bits[last] += total - used;
    Ok(bits)
}

/// Sliding windows of `ceil(fps)` frames, each lasting `ceil(fps) / fps` seconds.
pub fn check_windows(bits: &[u64], fps: f64, bandwidth: f64) -> (Window, Option<Window>) {
    let w = fps.ceil().max(1.0) as usize;
    let secs = w as f64 / fps;
    let starts = bits.len().saturating_sub(w) + 1;
    let mut peak: Option<Window> = None;
    let mut first = None;
    for start in 0..starts {
        let end = (start + w).min(bits.len());
        let b: u64 = bits[start..end].iter().sum();
        let win = Window {
            start,
            end,
            bits: b,
            bps: b as f64 / secs,
        };
        if first.is_none() && win.bps > bandwidth {
            first = Some(win);
        }
        if peak.is_none_or(|p| win.bps > p.bps) {
            peak = Some(win);
        }
    }
    let peak = peak.unwrap_or(Window {
        start: 0,
        end: 0,
        bits: 0,
        bps: 0.0,
    });
    (peak, first)
}

/// Verdict of a packed stream against `bandwidth` bits per second.
pub fn bandwidth_verdict(bytes: &[u8], bandwidth: f64) -> Result<Verdict> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth {bandwidth}")));
    }
    let stream = Stream::unpack(bytes)?;
    let bits = frame_bits(&stream)?;
    let fps = stream.header.fps();
    let (peak, first_violation) = check_windows(&bits, fps, bandwidth);
    let duration = (bits.len().max(1)) as f64 / fps;
    Ok(Verdict {
        pass: first_violation.is_none(),
        bandwidth,
        mean_bps: 8.0 * bytes.len() as f64 / duration,
        peak,
        first_violation,
        breakdown: stream.breakdown()?,
    })
}

/// Denoiser, decoder and upsampling MACs per source frame.
pub fn frame_flops(stream: &Stream, model: &Model) -> Vec<u64> {
    let h = &stream.header;
    let cfg = model.config();
    let (lh, lw) = (cfg.latent_h, cfg.latent_w);
    let tail = decoder_macs(cfg, lh, lw) + upsample_macs(cfg, lh, lw);
    let m = h.stride();
    let mut per_stitched = Vec::with_capacity(h.stitched_frames as usize);
    for (j, rec) in stream.records.iter().enumerate() {
        if j == 0 {
            per_stitched.push(frame_macs(cfg, lh, lw, None) + tail);
            continue;
        }
        let plan = rec.plan.as_ref().map(|p| p.to_plan());
        for i in 1..=m {
            let p = plan.as_ref().filter(|_| i < m).map(|p| (p, i - 1));
            per_stitched.push(frame_macs(cfg, lh, lw, p) + tail);
        }
    }
    let mut out = Vec::with_capacity(4 * per_stitched.len());
    for c in per_stitched {
        out.push(c / 4 + c % 4);
        out.extend([c / 4; 3]);
    }
    out.truncate(h.source_frames as usize);
    out
}

/// Verdict plus per-frame rows; quality columns need a reference clip.
pub fn simulate(
    bytes: &[u8],
    bandwidth: f64,
    model: &Model,
    reference: Option<&VideoSequence>,
) -> Result<(Verdict, Vec<MetricsRow>)> {
    let verdict = bandwidth_verdict(bytes, bandwidth)?;
    let stream = Stream::unpack(bytes)?;
    let decoded = decode_stream(&stream, model)?;
    let bits = frame_bits(&stream)?;
    let flops = frame_flops(&stream, model);
    if let Some(r) = reference {
        if r.hw() != decoded.hw() && !r.is_empty() {
            return Err(Error::Shape {
                op: "simulate",
                left: r.hw().map_or(vec![], |(a, b)| vec![a, b]),
                right: decoded.hw().map_or(vec![], |(a, b)| vec![a, b]),
            });
        }
    }
    let fps = stream.header.fps();
    let (mut cb, mut cf) = (0u64, 0u64);
    let rows = (0..bits.len())
        .map(|i| {
            cb += bits[i];
            cf += flops[i];
            let e = reference
                .and_then(|r| r.frames.get(i))
                .map(|f| mse(decoded.frames[i].data(), f.data()));
            MetricsRow {
                frame: i,
                mse: e,
                psnr: e.map(psnr),
                bits: bits[i],
                cumulative_bits: cb,
                cumulative_bps: cb as f64 * fps / (i + 1) as f64,
                flops: flops[i],
                cumulative_flops: cf,
            }
        })
        .collect();
    Ok((verdict, rows))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    w.write_record([
        "frame",
        "mse",
        "psnr",
        "bits",
        "cumulative_bits",
        "cumulative_bps",
        "flops",
        "cumulative_flops",
    ])
    .map_err(|e| Error::Io(e.into()))?;
    for r in rows {
        w.write_record([
            r.frame.to_string(),
            opt(r.mse),
            opt(r.psnr),
            r.bits.to_string(),
            r.cumulative_bits.to_string(),
            format!("{:.1}", r.cumulative_bps),
            r.flops.to_string(),
            r.cumulative_flops.to_string(),
        ])
        .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
