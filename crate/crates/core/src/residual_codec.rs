//! Budgeted residual coding: 8×8 DCT, zigzag run-length symbols and an
//! adaptive order-0 range coder.

use crate::error::{Error, Result};
use crate::prompt_codec::bitrate_estimate;
use crate::stitcher::FrameImage;

pub const BLOCK: usize = 8;
pub const STEPS: [f64; 8] = [
    1.0 / 256.0,
    1.0 / 128.0,
    1.0 / 64.0,
    1.0 / 32.0,
    1.0 / 16.0,
    1.0 / 8.0,
    1.0 / 4.0,
    1.0 / 2.0,
];
/// Step index and byte length preceding the coded bytes.
pub const PAYLOAD_HEADER_BITS: u64 = 16 + 32;
const EOB: u8 = 64;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ResidualPayload {
    /// Index into [`STEPS`]; `None` for an empty payload.
    pub step: Option<u16>,
    pub data: Vec<u8>,
}

impl ResidualPayload {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.step.is_none()
    }

    pub fn bits(&self) -> u64 {
        if self.is_empty() {
            0
        } else {
            PAYLOAD_HEADER_BITS + 8 * self.data.len() as u64
        }
    }

    pub fn step_size(&self) -> Option<f64> {
        self.step.map(|s| STEPS[s as usize])
    }
}

// ---- transform ----

fn dct_matrix() -> [[f64; BLOCK]; BLOCK] {
    let mut m = [[0.0; BLOCK]; BLOCK];
    let n = BLOCK as f64;
    for (k, row) in m.iter_mut().enumerate() {
        let a = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for (i, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * n)).cos();
        }
    }
    m
}

/// Orthonormal 2-D DCT-II of a row-major 8×8 block.
pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let m = dct_matrix();
    let mut tmp = [0.0; 64];
    for y in 0..BLOCK {
        for k in 0..BLOCK {
            tmp[y * 8 + k] = (0..BLOCK).map(|x| m[k][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for k in 0..BLOCK {
        for x in 0..BLOCK {
            out[k * 8 + x] = (0..BLOCK).map(|y| m[k][y] * tmp[y * 8 + x]).sum();
        }
    }
    out
}

pub fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    let m = dct_matrix();
    let mut tmp = [0.0; 64];
    for k in 0..BLOCK {
        for x in 0..BLOCK {
            tmp[k * 8 + x] = (0..BLOCK).map(|j| m[j][x] * coef[k * 8 + j]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..BLOCK {
        for x in 0..BLOCK {
            out[y * 8 + x] = (0..BLOCK).map(|k| m[k][y] * tmp[k * 8 + x]).sum();
        }
    }
    out
}

/// Zigzag scan order: position `i` of the scan reads raster index `ZIGZAG[i]`.
pub fn zigzag() -> [usize; 64] {
    let mut order = [0usize; 64];
    let mut i = 0;
    for s in 0..(2 * BLOCK - 1) {
        let cells: Vec<(usize, usize)> = (0..BLOCK)
            .filter_map(|y| s.checked_sub(y).filter(|&x| x < BLOCK).map(|x| (y, x)))
            .collect();
        let iter: Box<dyn Iterator<Item = &(usize, usize)>> =
            if s % 2 == 0 { Box::new(cells.iter().rev()) } else { Box::new(cells.iter()) };
        for &(y, x) in iter {
            order[i] = y * BLOCK + x;
            i += 1;
        }
    }
    order
}

fn blocks_of(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(BLOCK), w.div_ceil(BLOCK))
}

/// DCT coefficients of every block, channel-major then raster; partial
/// edge blocks replicate the last row/column.
pub fn forward_blocks(plane: &[f64], h: usize, w: usize) -> Vec<[f64; 64]> {
    let (bh, bw) = blocks_of(h, w);
    let mut out = Vec::with_capacity(bh * bw);
    for by in 0..bh {
        for bx in 0..bw {
            let mut blk = [0.0; 64];
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    let sy = (by * BLOCK + y).min(h - 1);
                    let sx = (bx * BLOCK + x).min(w - 1);
                    blk[y * 8 + x] = plane[sy * w + sx];
                }
            }
            out.push(dct8x8(&blk));
        }
    }
    out
}

pub fn inverse_blocks(coefs: &[[f64; 64]], h: usize, w: usize) -> Vec<f64> {
    let (_, bw) = blocks_of(h, w);
    let mut plane = vec![0.0; h * w];
    for (i, c) in coefs.iter().enumerate() {
        let (by, bx) = (i / bw, i % bw);
        let px = idct8x8(c);
        for y in 0..BLOCK {
            for x in 0..BLOCK {
                let (sy, sx) = (by * BLOCK + y, bx * BLOCK + x);
                if sy < h && sx < w {
                    plane[sy * w + sx] = px[y * 8 + x];
                }
            }
        }
    }
    plane
}

// ---- symbols ----

fn push_level(out: &mut Vec<u8>, v: i64) {
    let mut z = ((v << 1) ^ (v >> 63)) as u64;
    loop {
        let b = (z & 0x7f) as u8;
        z >>= 7;
        if z == 0 {
            out.push(b);
            return;
        }
        out.push(b | 0x80);
    }
}

/// Run/level/EOB byte symbols of quantized blocks.
pub fn block_symbols(codes: &[[i64; 64]]) -> Vec<u8> {
    let zz = zigzag();
    let mut out = Vec::new();
    for blk in codes {
        let mut run = 0u8;
        for &r in &zz {
            let v = blk[r];
            if v == 0 {
                run += 1;
            } else {
                out.push(run);
                push_level(&mut out, v);
                run = 0;
            }
        }
        out.push(EOB);
    }
    out
}

fn parse_symbols(mut next: impl FnMut() -> Result<u8>, n_blocks: usize) -> Result<Vec<[i64; 64]>> {
    let zz = zigzag();
    let mut out = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let mut blk = [0i64; 64];
        let mut pos = 0usize;
        loop {
            let s = next()?;
            if s == EOB {
                break;
            }
            if s > EOB {
                return Err(Error::Malformed(format!("residual symbol {s} is not a run")));
            }
            pos += s as usize;
            if pos >= 64 {
                return Err(Error::Malformed("residual run overflows block".into()));
            }
            let mut z = 0u64;
            for shift in (0..).step_by(7) {
                if shift > 63 {
                    return Err(Error::Malformed("residual level too long".into()));
                }
                let b = next()?;
                z |= ((b & 0x7f) as u64) << shift;
                if b & 0x80 == 0 {
                    break;
                }
            }
            let v = ((z >> 1) as i64) ^ -((z & 1) as i64);
            blk[zz[pos]] = v;
            pos += 1;
        }
        out.push(blk);
    }
    Ok(out)
}

pub fn parse_block_symbols(symbols: &[u8], n_blocks: usize) -> Result<Vec<[i64; 64]>> {
    let mut it = symbols.iter().copied();
    let blocks = parse_symbols(
        || it.next().ok_or_else(|| Error::Malformed("residual symbols end early".into())),
        n_blocks,
    )?;
    if it.next().is_some() {
        return Err(Error::Malformed("trailing residual symbols".into()));
    }
    Ok(blocks)
}

// ---- range coder ----

const TOP: u32 = 1 << 24;
const MAX_TOTAL: u32 = 1 << 16;
const INC: u32 = 24;

/// Adaptive frequency table over byte symbols.
#[derive(Clone, Debug)]
struct Model {
    freq: [u32; 256],
    total: u32,
}

impl Model {
    fn new() -> Self {
        Self {
            freq: [1; 256],
            total: 256,
        }
    }

    fn cum(&self, s: u8) -> u32 {
        self.freq[..s as usize].iter().sum()
    }

    fn update(&mut self, s: u8) {
        self.freq[s as usize] += INC;
        self.total += INC;
        if self.total > MAX_TOTAL {
            self.total = 0;
            for f in self.freq.iter_mut() {
                *f = (*f + 1) / 2;
                self.total += *f;
            }
        }
    }
}

struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Encoder {
    fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || self.low >> 32 != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        let r = self.range / total;
        self.low += (r * cum) as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        // the first byte is always the zero initial cache
        self.out.remove(0);
        self.out
    }
}

struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> Decoder<'a> {
    fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < 4 {
            return Err(Error::Malformed("range-coded residual shorter than 4 bytes".into()));
        }
        let mut d = Self {
            data,
            pos: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.byte() as u32;
        }
        Ok(d)
    }

    fn byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    fn decode(&mut self, m: &Model) -> Result<u8> {
        let r = self.range / m.total;
        let v = (self.code / r).min(m.total - 1);
        let mut cum = 0u32;
        let mut sym = 0usize;
        while cum + m.freq[sym] <= v {
            cum += m.freq[sym];
            sym += 1;
        }
        self.code -= r * cum;
        self.range = r * m.freq[sym];
        while self.range < TOP {
            self.code = (self.code << 8) | self.byte() as u32;
            self.range <<= 8;
        }
        if self.pos > self.data.len() + 4 {
            return Err(Error::Malformed("range decoder ran past its payload".into()));
        }
        Ok(sym as u8)
    }
}

/// Order-0 adaptive range coding of a byte string; the length is not stored.
pub fn range_encode(symbols: &[u8]) -> Vec<u8> {
    let mut m = Model::new();
    let mut e = Encoder::new();
    for &s in symbols {
        e.encode(m.cum(s), m.freq[s as usize], m.total);
        m.update(s);
    }
    e.finish()
}

pub fn range_decode(data: &[u8], n: usize) -> Result<Vec<u8>> {
    let mut m = Model::new();
    let mut d = Decoder::new(data)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let s = d.decode(&m)?;
        m.update(s);
        out.push(s);
    }
    Ok(out)
}

// ---- payload ----

fn check_geometry(a: &FrameImage, b: &FrameImage) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape {
            op: "residual",
            left: vec![a.height(), a.width()],
            right: vec![b.height(), b.width()],
        });
    }
    Ok(())
}

/// Quantized DCT codes of a residual at one ladder step.
pub fn quantize_residual(residual: &[f64], h: usize, w: usize, step: f64) -> Vec<[i64; 64]> {
    residual
        .chunks(h * w)
        .flat_map(|plane| forward_blocks(plane, h, w))
        .map(|c| c.map(|v| (v / step).round_ties_even() as i64))
        .collect()
}

fn code_blocks(codes: &[[i64; 64]]) -> Vec<u8> {
    range_encode(&block_symbols(codes))
}

fn decode_blocks(data: &[u8], n_blocks: usize) -> Result<Vec<[i64; 64]>> {
    let mut m = Model::new();
    let mut d = Decoder::new(data)?;
    parse_symbols(
        || {
            let s = d.decode(&m)?;
            m.update(s);
            Ok(s)
        },
        n_blocks,
    )
}

/// Codes `source − recon` at the ladder step that fits in `budget_bits` with
/// the lowest reconstruction error; empty when none beats sending nothing.
///
/// A larger budget never yields a worse frame.
pub fn encode_residual(source: &FrameImage, recon: &FrameImage, budget_bits: u64) -> Result<ResidualPayload> {
    check_geometry(source, recon)?;
    if budget_bits < PAYLOAD_HEADER_BITS {
        return Ok(ResidualPayload::empty());
    }
    let (h, w) = (source.height(), source.width());
    let residual: Vec<f64> = source
        .data()
        .iter()
        .zip(recon.data())
        .map(|(&s, &r)| s as f64 - r as f64)
        .collect();
    let err = |f: &FrameImage| -> f64 {
        f.data().iter().zip(source.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum()
    };
    let mut best = (err(recon), ResidualPayload::empty());
    for (i, &step) in STEPS.iter().enumerate() {
        let data = code_blocks(&quantize_residual(&residual, h, w, step));
        let p = ResidualPayload {
            step: Some(i as u16),
            data,
        };
        if p.bits() > budget_bits {
            continue;
        }
        let e = err(&apply_residual(recon, &p)?);
        if e < best.0 {
            best = (e, p);
        }
    }
    Ok(best.1)
}

/// Decoded residual, clamped to `[-1, 1]`, channel-major.
pub fn decode_residual(payload: &ResidualPayload, h: usize, w: usize) -> Result<Vec<f32>> {
    let Some(step) = payload.step_size() else {
        return Ok(vec![0.0; 3 * h * w]);
    };
    let (bh, bw) = blocks_of(h, w);
    let codes = decode_blocks(&payload.data, 3 * bh * bw)?;
    let mut out = Vec::with_capacity(3 * h * w);
    for plane in codes.chunks(bh * bw) {
        let coefs: Vec<[f64; 64]> = plane.iter().map(|b| b.map(|c| c as f64 * step)).collect();
        out.extend(inverse_blocks(&coefs, h, w).into_iter().map(|v| v.clamp(-1.0, 1.0) as f32));
    }
    Ok(out)
}

pub fn apply_residual(recon: &FrameImage, payload: &ResidualPayload) -> Result<FrameImage> {
    if payload.is_empty() {
        return Ok(recon.clone());
    }
    if payload.step.is_some_and(|s| s as usize >= STEPS.len()) {
        return Err(Error::Malformed(format!("residual step index {:?}", payload.step)));
    }
    let (h, w) = (recon.height(), recon.width());
    let r = decode_residual(payload, h, w)?;
    let data = recon.data().iter().zip(&r).map(|(&a, &d)| (a + d).clamp(0.0, 1.0)).collect();
    FrameImage::new(h, w, data)
}

/// Residual bits freed by dropping `rank_reduction` ranks, per second and
/// per frame of that second.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualBudget {
    pub bps: u64,
    pub per_frame: Vec<u64>,
}

pub fn rank_tradeoff(rank_reduction: usize, d: usize, q: u32, keyframes_per_second: f64, fps: usize) -> ResidualBudget {
    let per_rank = bitrate_estimate(d, 1, q, keyframes_per_second);
    let bps = (rank_reduction as f64 * per_rank).floor() as u64;
    ResidualBudget {
        bps,
        per_frame: split_budget(bps, fps),
    }
}

/// Even split with the remainder going one bit each to the first frames.
pub fn split_budget(bits: u64, frames: usize) -> Vec<u64> {
    if frames == 0 {
        return vec![];
    }
    let base = bits / frames as u64;
    let rem = (bits % frames as u64) as usize;
    (0..frames).map(|i| base + (i < rem) as u64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(h: usize, w: usize, seed: u64) -> FrameImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrameImage::new(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn dct_roundtrip_and_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blk: [f64; 64] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let c = dct8x8(&blk);
        let back = idct8x8(&c);
        let err = blk.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
        let e0: f64 = blk.iter().map(|v| v * v).sum();
        let e1: f64 = c.iter().map(|v| v * v).sum();
        assert!((e0 - e1).abs() < 1e-10);
        // DC of a constant block
        let c = dct8x8(&[0.5; 64]);
        assert!((c[0] - 4.0).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn plane_roundtrip_with_partial_blocks() {
        let (h, w) = (13, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let back = inverse_blocks(&forward_blocks(&p, h, w), h, w);
        assert!(p.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn zigzag_is_permutation_starting_right() {
        let z = zigzag();
        assert_eq!(&z[..6], &[0, 1, 8, 16, 9, 2]);
        let mut s = z.to_vec();
        s.sort();
        assert_eq!(s, (0..64).collect::<Vec<_>>());
        assert_eq!(z[63], 63);
    }

    #[test]
    fn range_coder_small_cases() {
        for input in [vec![], vec![0u8], vec![255; 3], b"abracadabra".to_vec()] {
            let e = range_encode(&input);
            assert_eq!(range_decode(&e, input.len()).unwrap(), input);
        }
        // skewed input compresses
        let skew = vec![64u8; 5000];
        assert!(range_encode(&skew).len() < 200);
    }

    proptest! {
        #[test]
        fn range_coder_bijective(input in proptest::collection::vec(any::<u8>(), 0..3000)) {
            let e = range_encode(&input);
            prop_assert_eq!(range_decode(&e, input.len()).unwrap(), input);
        }

        #[test]
        fn symbols_roundtrip(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blocks: Vec<[i64; 64]> = (0..n)
                .map(|_| std::array::from_fn(|_| if rng.random_bool(0.3) { rng.random_range(-5000..5000) } else { 0 }))
                .collect();
            let s = block_symbols(&blocks);
            prop_assert_eq!(parse_block_symbols(&s, n).unwrap(), blocks);
        }

        #[test]
        fn payload_never_exceeds_budget(seed in any::<u64>(), budget in 0u64..40_000) {
            let a = random_frame(16, 16, seed);
            let b = random_frame(16, 16, seed ^ 1);
            let p = encode_residual(&a, &b, budget).unwrap();
            prop_assert!(p.bits() <= budget);
        }
    }

    #[test]
    fn identical_frames_code_zero() {
        let a = random_frame(32, 32, 3);
        assert!(encode_residual(&a, &a, 1 << 20).unwrap().is_empty());
        let codes = quantize_residual(&vec![0.0; 3 * 32 * 32], 32, 32, STEPS[0]);
        let p = ResidualPayload {
            step: Some(0),
            data: code_blocks(&codes),
        };
        assert!(p.bits() < 400, "{} bits", p.bits());
        assert_eq!(apply_residual(&a, &p).unwrap(), a);
        assert!(decode_residual(&p, 32, 32).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_budget_is_empty_and_identity() {
        let a = random_frame(16, 16, 4);
        let b = random_frame(16, 16, 5);
        let p = encode_residual(&a, &b, 0).unwrap();
        assert!(p.is_empty());
        assert_eq!(p.bits(), 0);
        assert_eq!(apply_residual(&b, &p).unwrap(), b);
    }

    #[test]
    fn coefficients_match_direct_quantizer() {
        let (h, w) = (16, 24);
        let src = random_frame(h, w, 6);
        let rec = random_frame(h, w, 7);
        let p = encode_residual(&src, &rec, u64::MAX).unwrap();
        let step = p.step_size().unwrap();
        assert_eq!(step, 1.0 / 256.0);
        let residual: Vec<f64> = src.data().iter().zip(rec.data()).map(|(&s, &r)| s as f64 - r as f64).collect();
        let (bh, bw) = blocks_of(h, w);
        let decoded = decode_blocks(&p.data, 3 * bh * bw).unwrap();
        let direct: Vec<[f64; 64]> = residual.chunks(h * w).flat_map(|pl| forward_blocks(pl, h, w)).collect();
        for (d, c) in decoded.iter().zip(&direct) {
            for k in 0..64 {
                let oracle = (c[k] / step).round() * step;
                assert!((d[k] as f64 * step - oracle).abs() < 1e-12);
                assert!((d[k] as f64 * step - c[k]).abs() <= step / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn representable_delta_is_recovered() {
        let (h, w) = (8, 8);
        let step = STEPS[0];
        // a residual whose DCT is an exact multiple of the step
        let mut coef = [0.0; 64];
        coef[0] = 12.0 * step;
        coef[9] = -7.0 * step;
        let delta = idct8x8(&coef);
        let recon = FrameImage::filled(h, w, 0.5);
        let src_data: Vec<f32> = (0..3).flat_map(|_| delta.iter().map(|&d| 0.5 + d as f32)).collect();
        let src = FrameImage::new(h, w, src_data).unwrap();
        let p = encode_residual(&src, &recon, u64::MAX).unwrap();
        let out = apply_residual(&recon, &p).unwrap();
        let err = trainer_mse(&out, &src);
        assert!(err <= (step / 2.0).powi(2), "{err}");
    }

    fn trainer_mse(a: &FrameImage, b: &FrameImage) -> f64 {
        crate::trainer::mse(a.data(), b.data())
    }

    #[test]
    fn residual_improves_quality() {
        for seed in 0..5 {
            let src = random_frame(32, 32, 100 + seed);
            let recon = FrameImage::new(
                32,
                32,
                src.data().iter().enumerate().map(|(i, &v)| (v * 0.8 + 0.1 + 0.02 * ((i % 7) as f32 - 3.0)).clamp(0.0, 1.0)).collect(),
            )
            .unwrap();
            let before = trainer_mse(&src, &recon);
            for budget in [2_000u64, 10_000, 60_000] {
                let p = encode_residual(&src, &recon, budget).unwrap();
                let after = trainer_mse(&src, &apply_residual(&recon, &p).unwrap());
                assert!(after <= before, "seed {seed} budget {budget}: {after} > {before}");
            }
        }
    }

    #[test]
    fn geometry_mismatch_is_error() {
        let a = random_frame(8, 8, 1);
        let b = random_frame(8, 16, 1);
        assert!(matches!(encode_residual(&a, &b, 100), Err(Error::Shape { .. })));
    }

    #[test]
    fn garbage_payload_is_typed_error() {
        let recon = FrameImage::filled(8, 8, 0.5);
        for data in [vec![], vec![0xff; 3], vec![0xff; 64], vec![0x12, 0x34, 0x56, 0x78, 0x9a]] {
            let p = ResidualPayload { step: Some(2), data };
            let _ = apply_residual(&recon, &p);
        }
        let p = ResidualPayload { step: Some(9), data: vec![0; 8] };
        assert!(apply_residual(&recon, &p).is_err());
    }

    #[test]
    fn tradeoff_arithmetic() {
        assert_eq!(rank_tradeoff(0, 1024, 12, 1.0, 30).bps, 0);
        let b = rank_tradeoff(8, 1024, 12, 1.0, 30);
        assert_eq!(b.bps, 105_696);
        assert_eq!(b.per_frame.len(), 30);
        assert_eq!(b.per_frame[0], 3_524);
        assert_eq!(b.per_frame[5], 3_524);
        assert_eq!(b.per_frame[6], 3_523);
        assert_eq!(b.per_frame.iter().sum::<u64>(), 105_696);
    }
}
