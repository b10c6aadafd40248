//! The `.pmob` container. Layout is documented in `docs/format.md`.
//!
//! Stitched frames are numbered `0..S` with `S = 1 + m·G`, `m = group_len − 1`.
//! Record 0 carries keyframe 0 and stitched frame 0; record `j ≥ 1` carries
//! keyframe `j` and stitched frames `(j−1)·m + 1 ..= j·m`.

mod bits;

pub use bits::{BitReader, BitWriter};

use crate::cache_engine::PlanCodes;
use crate::error::{Error, Result};
use crate::prompt_codec::{QuantizedMatrix, QuantizedPrompt, PROMPT_TOKENS};
use crate::residual_codec::{ResidualPayload, STEPS};
use crate::stitcher::StitchScheme;

pub const MAGIC: [u8; 4] = *b"PMOB";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 53;

pub const FLAG_RESIDUAL: u8 = 1;
pub const FLAG_KV: u8 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamHeader {
    /// Output frame size.
    pub width: u16,
    pub height: u16,
    pub fps_num: u16,
    pub fps_den: u16,
    pub d: u16,
    pub rank: u16,
    pub q: u8,
    pub group_len: u16,
    pub latent_c: u8,
    pub latent_h: u16,
    pub latent_w: u16,
    /// Channel width of the denoiser's blocks.
    pub hidden: u16,
    pub upscale: u8,
    pub noise_seed: u64,
    pub weight_hash: u64,
    pub residual: bool,
    pub kv_cache: bool,
    pub stitched_frames: u32,
    /// Source frames before padding to whole groups.
    pub source_frames: u32,
}

impl StreamHeader {
    pub fn stride(&self) -> usize {
        (self.group_len as usize).saturating_sub(1)
    }

    /// Number of records implied by the header.
    pub fn n_records(&self) -> Result<usize> {
        let s = self.stitched_frames as usize;
        if s == 0 {
            return Ok(0);
        }
        let m = self.stride();
        if m == 0 || (s - 1) % m != 0 {
            return Err(Error::Malformed(format!(
                "{s} stitched frames do not fill groups of length {}",
                self.group_len
            )));
        }
        Ok(1 + (s - 1) / m)
    }

    /// Stitched frames carried by record `j`.
    pub fn record_frames(&self, j: usize) -> usize {
        if j == 0 {
            1
        } else {
            self.stride()
        }
    }

    pub fn fps(&self) -> f64 {
        self.fps_num as f64 / self.fps_den.max(1) as f64
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Malformed(m.into()));
        if self.rank == 0 || self.rank as usize > PROMPT_TOKENS.min(self.d as usize) {
            return bad("rank outside 1..=min(77, d)");
        }
        if !(1..=24).contains(&self.q) {
            return bad("prompt code width outside 1..=24");
        }
        if self.group_len < 2 {
            return bad("group length below 2");
        }
        if self.fps_num == 0 || self.fps_den == 0 {
            return bad("zero frame rate");
        }
        if self.stitched_frames as u64 * 4 < self.source_frames as u64 {
            return bad("more source frames than stitched slots");
        }
        if self.hidden == 0 {
            return bad("zero hidden width");
        }
        Ok(())
    }

    pub fn write(&self, w: &mut BitWriter) {
        w.le(&MAGIC);
        w.u8(VERSION);
        for v in [self.width, self.height, self.fps_num, self.fps_den, self.d, self.rank] {
            w.le(&v.to_le_bytes());
        }
        w.u8(self.q);
        w.le(&self.group_len.to_le_bytes());
        w.u8(self.latent_c);
        w.le(&self.latent_h.to_le_bytes());
        w.le(&self.latent_w.to_le_bytes());
        w.le(&self.hidden.to_le_bytes());
        w.u8(self.upscale);
        w.le(&self.noise_seed.to_le_bytes());
        w.le(&self.weight_hash.to_le_bytes());
        w.u8(if self.residual { FLAG_RESIDUAL } else { 0 } | if self.kv_cache { FLAG_KV } else { 0 });
        w.le(&self.stitched_frames.to_le_bytes());
        w.le(&self.source_frames.to_le_bytes());
    }

    pub fn read(r: &mut BitReader) -> Result<Self> {
        let magic = r.le::<4>()?;
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let (width, height, fps_num, fps_den, d, rank) = (r.u16()?, r.u16()?, r.u16()?, r.u16()?, r.u16()?, r.u16()?);
        let q = r.u8()?;
        let group_len = r.u16()?;
        let latent_c = r.u8()?;
        let (latent_h, latent_w, hidden) = (r.u16()?, r.u16()?, r.u16()?);
        let upscale = r.u8()?;
        let noise_seed = u64::from_le_bytes(r.le()?);
        let weight_hash = u64::from_le_bytes(r.le()?);
        let flags = r.u8()?;
        if flags & !(FLAG_RESIDUAL | FLAG_KV) != 0 {
            return Err(Error::Malformed(format!("unknown header flags {flags:#04x}")));
        }
        let stitched_frames = r.u32()?;
        let source_frames = r.u32()?;
        let h = Self {
            width,
            height,
            fps_num,
            fps_den,
            d,
            rank,
            q,
            group_len,
            latent_c,
            latent_h,
            latent_w,
            hidden,
            upscale,
            noise_seed,
            weight_hash,
            residual: flags & FLAG_RESIDUAL != 0,
            kv_cache: flags & FLAG_KV != 0,
            stitched_frames,
            source_frames,
        };
        h.validate()?;
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupRecord {
    pub keyframe: QuantizedPrompt,
    pub schemes: Vec<StitchScheme>,
    /// Absent in record 0.
    pub plan: Option<PlanCodes>,
    /// Four per stitched frame when the stream carries residuals, else empty.
    pub residuals: Vec<Option<ResidualPayload>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub header: StreamHeader,
    pub records: Vec<GroupRecord>,
}

fn write_matrix(m: &QuantizedMatrix, w: &mut BitWriter) {
    for &c in &m.codes {
        w.bits(c as u64, m.bits);
    }
    w.f32(m.scale);
}

fn read_matrix(r: &mut BitReader, shape: [usize; 2], bits: u32) -> Result<QuantizedMatrix> {
    let n = shape[0] * shape[1];
    let mut codes = Vec::with_capacity(n);
    for _ in 0..n {
        codes.push(r.bits(bits)? as u32);
    }
    let scale = r.f32()?;
    if !scale.is_finite() || scale < 0.0 {
        return Err(Error::Malformed(format!("prompt scale {scale}")));
    }
    Ok(QuantizedMatrix {
        bits,
        scale,
        shape: shape.to_vec(),
        codes,
    })
}

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(what()))
    }
}

impl Stream {
    fn check_shapes(&self) -> Result<()> {
        let h = &self.header;
        h.validate().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let n = h.n_records().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        check(self.records.len() == n, || format!("{} records, header implies {n}", self.records.len()))?;
        let (r, d, q) = (h.rank as usize, h.d as usize, h.q as u32);
        for (j, rec) in self.records.iter().enumerate() {
            let k = &rec.keyframe;
            check(
                k.u.shape == [PROMPT_TOKENS, r] && k.v.shape == [r, d] && k.u.bits == q && k.v.bits == q,
                || format!("record {j}: keyframe shape or width"),
            )?;
            check(
                k.u.codes.iter().chain(&k.v.codes).all(|&c| c <= QuantizedMatrix::max_code(q)),
                || format!("record {j}: prompt code out of range"),
            )?;
            let frames = h.record_frames(j);
            check(rec.schemes.len() == frames, || format!("record {j}: scheme count"))?;
            match (&rec.plan, j) {
                (None, 0) => {}
                (Some(p), j) if j > 0 => check(
                    p.frames == frames - 1 && p.channels == h.hidden as usize && p.reuse.len() == p.n_blocks * p.frames,
                    || format!("record {j}: plan geometry"),
                )?,
                _ => return Err(Error::InvalidArgument(format!("record {j}: plan presence"))),
            }
            let want = if h.residual { 4 * frames } else { 0 };
            check(rec.residuals.len() == want, || format!("record {j}: residual count"))?;
            for p in rec.residuals.iter().flatten() {
                check(
                    p.step.is_none_or(|s| (s as usize) < STEPS.len()) && p.data.len() <= u32::MAX as usize,
                    || format!("record {j}: residual payload"),
                )?;
            }
        }
        Ok(())
    }

    pub fn pack(&self) -> Result<Vec<u8>> {
        self.check_shapes()?;
        let mut w = BitWriter::new();
        self.header.write(&mut w);
        for rec in &self.records {
            write_matrix(&rec.keyframe.u, &mut w);
            write_matrix(&rec.keyframe.v, &mut w);
            for s in &rec.schemes {
                w.bits(s.code() as u64, 2);
            }
            if let Some(p) = &rec.plan {
                p.write(&mut w);
            }
            for p in &rec.residuals {
                match p {
                    Some(p) if !p.is_empty() => {
                        w.bit(true);
                        w.le(&p.step.unwrap().to_le_bytes());
                        w.le(&(p.data.len() as u32).to_le_bytes());
                        w.le(&p.data);
                    }
                    _ => w.bit(false),
                }
            }
        }
        Ok(w.into_bytes())
    }

    pub fn unpack(bytes: &[u8]) -> Result<Self> {
        let mut r = BitReader::new(bytes, bytes.len() * 8);
        let header = StreamHeader::read(&mut r)?;
        let n = header.n_records()?;
        let (rank, d, q) = (header.rank as usize, header.d as usize, header.q as u32);
        let mut records = Vec::with_capacity(n.min(bytes.len()));
        for j in 0..n {
            let u = read_matrix(&mut r, [PROMPT_TOKENS, rank], q)?;
            let v = read_matrix(&mut r, [rank, d], q)?;
            let frames = header.record_frames(j);
            let schemes = (0..frames)
                .map(|_| StitchScheme::from_code(r.bits(2)? as u8))
                .collect::<Result<Vec<_>>>()?;
            let plan = if j == 0 {
                None
            } else {
                Some(PlanCodes::read(&mut r, header.hidden as usize, frames - 1)?)
            };
            let mut residuals = Vec::new();
            if header.residual {
                for _ in 0..4 * frames {
                    if !r.bit()? {
                        residuals.push(None);
                        continue;
                    }
                    let step = r.u16()?;
                    if step as usize >= STEPS.len() {
                        return Err(Error::Malformed(format!("residual step index {step}")));
                    }
                    let len = r.u32()? as usize;
                    if r.remaining() / 8 < len {
                        return Err(Error::Truncated { offset: bytes.len() });
                    }
                    let data = (0..len).map(|_| r.u8()).collect::<Result<Vec<_>>>()?;
                    residuals.push(Some(ResidualPayload { step: Some(step), data }));
                }
            }
            records.push(GroupRecord {
                keyframe: QuantizedPrompt { u, v },
                schemes,
                plan,
                residuals,
            });
        }
        let pad = r.remaining();
        if pad >= 8 {
            return Err(Error::Malformed(format!("{} trailing bytes", pad / 8)));
        }
        if r.bits(pad as u32)? != 0 {
            return Err(Error::Malformed("non-zero padding bits".into()));
        }
        Ok(Self { header, records })
    }

    pub fn duration(&self) -> f64 {
        self.header.source_frames as f64 / self.header.fps()
    }

    pub fn breakdown(&self) -> Result<Breakdown> {
        let total = 8 * self.pack()?.len() as u64;
        let mut b = Breakdown {
            total,
            ..Default::default()
        };
        for rec in &self.records {
            b.prompt += rec.keyframe.u.code_bits() + rec.keyframe.v.code_bits();
            b.scheme += 2 * rec.schemes.len() as u64;
            b.plan += rec.plan.as_ref().map_or(0, |p| p.bit_len() as u64);
            b.residual += rec.residuals.iter().flatten().map(ResidualPayload::bits).sum::<u64>();
        }
        b.overhead = total - b.prompt - b.scheme - b.plan - b.residual;
        Ok(b)
    }
}

/// Stream size split by content; the buckets sum to `total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Breakdown {
    pub total: u64,
    pub prompt: u64,
    pub scheme: u64,
    pub plan: u64,
    pub residual: u64,
    /// Header, prompt scales, presence bits and padding.
    pub overhead: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bitrate {
    pub bps: f64,
    pub breakdown: Breakdown,
}

/// Average rate of a stream over `duration` seconds, with its breakdown.
pub fn measured_bitrate(bytes: &[u8], duration: f64) -> Result<Bitrate> {
    if !(duration > 0.0) {
        return Err(Error::InvalidArgument(format!("duration {duration}")));
    }
    let stream = Stream::unpack(bytes)?;
    let breakdown = stream.breakdown()?;
    Ok(Bitrate {
        bps: 8.0 * bytes.len() as f64 / duration,
        breakdown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache_engine::{ChannelAffine, CachePlan};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn header(stitched: u32, residual: bool) -> StreamHeader {
        StreamHeader {
            width: 64,
            height: 64,
            fps_num: 30,
            fps_den: 1,
            d: 8,
            rank: 2,
            q: 6,
            group_len: 3,
            latent_c: 4,
            latent_h: 8,
            latent_w: 8,
            hidden: 4,
            upscale: 2,
            noise_seed: 11,
            weight_hash: 0xdead_beef,
            residual,
            kv_cache: true,
            stitched_frames: stitched,
            source_frames: stitched * 4,
        }
    }

    fn random_stream(rng: &mut ChaCha8Rng) -> Stream {
        let mut h = header(0, rng.random_bool(0.5));
        h.rank = rng.random_range(1..=3);
        h.d = rng.random_range(h.rank..=10);
        h.q = rng.random_range(1..=16);
        h.group_len = rng.random_range(2..=4);
        let g = rng.random_range(0..3u32);
        h.stitched_frames = if rng.random_bool(0.1) { 0 } else { 1 + (h.group_len as u32 - 1) * g };
        h.source_frames = h.stitched_frames * 4 - (h.stitched_frames > 0) as u32 * rng.random_range(0..4);
        let (r, d, q) = (h.rank as usize, h.d as usize, h.q as u32);
        let n = h.n_records().unwrap();
        let mat = |shape: [usize; 2], rng: &mut ChaCha8Rng| QuantizedMatrix {
            bits: q,
            scale: rng.random_range(0.0..2.0),
            shape: shape.to_vec(),
            codes: (0..shape[0] * shape[1]).map(|_| rng.random_range(0..=QuantizedMatrix::max_code(q))).collect(),
        };
        let records = (0..n)
            .map(|j| {
                let frames = h.record_frames(j);
                let plan = (j > 0).then(|| {
                    let nb = 3;
                    let mut p = CachePlan::all_compute(nb, 1, frames - 1).with_kv(rng.random_bool(0.5));
                    for e in p.reuse.iter_mut() {
                        if rng.random_bool(0.4) {
                            *e = Some(ChannelAffine {
                                k: (0..4).map(|_| rng.random_range(0.5..1.5)).collect(),
                                b: (0..4).map(|_| rng.random_range(-0.2..0.2)).collect(),
                            });
                        }
                    }
                    PlanCodes::encode(&p, 4).unwrap()
                });
                let residuals = if h.residual {
                    (0..4 * frames)
                        .map(|_| {
                            rng.random_bool(0.5).then(|| ResidualPayload {
                                step: Some(rng.random_range(0..6)),
                                data: (0..rng.random_range(0..20)).map(|_| rng.random()).collect(),
                            })
                        })
                        .collect()
                } else {
                    vec![]
                };
                GroupRecord {
                    keyframe: QuantizedPrompt {
                        u: mat([PROMPT_TOKENS, r], rng),
                        v: mat([r, d], rng),
                    },
                    schemes: (0..frames).map(|_| StitchScheme::ALL[rng.random_range(0..4)]).collect(),
                    plan,
                    residuals,
                }
            })
            .collect();
        Stream { header: h, records }
    }

    #[test]
    fn header_only_stream() {
        let s = Stream {
            header: header(0, false),
            records: vec![],
        };
        let bytes = s.pack().unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES);
        assert_eq!(&bytes[..4], b"PMOB");
        assert_eq!(Stream::unpack(&bytes).unwrap(), s);
        let b = measured_bitrate(&bytes, 1.0).unwrap();
        assert_eq!(b.bps, 8.0 * HEADER_BYTES as f64);
        assert_eq!(b.breakdown.overhead, b.breakdown.total);
    }

    #[test]
    fn roundtrip_random_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let s = random_stream(&mut rng);
            let bytes = s.pack().unwrap();
            let back = Stream::unpack(&bytes).unwrap();
            assert_eq!(back, s);
            assert_eq!(back.pack().unwrap(), bytes);
            let b = s.breakdown().unwrap();
            assert_eq!(b.prompt + b.scheme + b.plan + b.residual + b.overhead, b.total);
        }
    }

    #[test]
    fn empty_residual_payloads_pack_as_absent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = random_stream(&mut rng);
        while !s.header.residual || s.records.is_empty() {
            s = random_stream(&mut rng);
        }
        s.records[0].residuals[0] = Some(ResidualPayload::empty());
        let back = Stream::unpack(&s.pack().unwrap()).unwrap();
        assert_eq!(back.records[0].residuals[0], None);
    }

    #[test]
    fn every_truncation_is_a_typed_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = random_stream(&mut rng);
        while s.records.len() < 2 || !s.header.residual {
            s = random_stream(&mut rng);
        }
        let bytes = s.pack().unwrap();
        for cut in 0..bytes.len() {
            match Stream::unpack(&bytes[..cut]) {
                Err(Error::Truncated { offset }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn header_checks() {
        let s = Stream {
            header: header(0, false),
            records: vec![],
        };
        let mut bytes = s.pack().unwrap();
        bytes[4] = 2;
        assert!(matches!(Stream::unpack(&bytes), Err(Error::VersionMismatch { found: 2, expected: 1 })));
        bytes[0] = b'X';
        assert!(matches!(Stream::unpack(&bytes), Err(Error::BadMagic { .. })));
        let mut ok = s.pack().unwrap();
        ok.push(0);
        assert!(matches!(Stream::unpack(&ok), Err(Error::Malformed(_))));
    }

    #[test]
    fn inconsistent_records_refuse_to_pack() {
        let s = Stream {
            header: header(3, false),
            records: vec![],
        };
        assert!(matches!(s.pack(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn random_bytes_never_panic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = random_stream(&mut rng).pack().unwrap();
        for _ in 0..2000 {
            let mut b = base.clone();
            let i = rng.random_range(0..b.len());
            b[i] ^= 1 << rng.random_range(0..8);
            let _ = Stream::unpack(&b);
        }
    }
}
