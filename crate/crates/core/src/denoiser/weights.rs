//! Weight file: model config, a shape table, then every tensor as
//! little-endian f32 in table order.
//!
//! ```text
//! "PMW1"
//! u32 latent_channels, latent_h, latent_w, hidden, d
//! u32 n_hi, u32 n_lo, u8 kind × (n_hi + n_lo)
//! u32 decoder[3], u32 upscale, u64 seed
//! u32 n_tensors, then per tensor: u32 rank, u32 dim × rank
//! f32 × Σ numel
//! ```

use std::io::{Read, Write};
use std::sync::Arc;

use super::{BlockKind, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"PMW1";
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv_update(FNV_OFFSET, bytes)
}

fn fnv_update(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub(super) fn hash_params<T: crate::numerics::Element>(params: &[Arc<Tensor<T>>]) -> u64 {
    let mut h = FNV_OFFSET;
    for p in params {
        for &v in p.data() {
            h = fnv_update(h, &(v.as_f64() as f32).to_le_bytes());
        }
    }
    h
}

pub fn write_weights(model: &Model, mut out: impl Write) -> Result<()> {
    let cfg = model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let u32s = [cfg.latent_channels, cfg.latent_h, cfg.latent_w, cfg.hidden, cfg.d];
    for v in u32s {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(cfg.blocks_hi.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.blocks_lo.len() as u32).to_le_bytes());
    buf.extend(cfg.blocks().map(|k| k as u8));
    for v in cfg.decoder.iter().chain([&cfg.upscale]) {
        buf.extend_from_slice(&(*v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&model.seed().to_le_bytes());
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        buf.extend_from_slice(&(p.rank() as u32).to_le_bytes());
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for p in model.params() {
        for v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { offset: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    /// A count that cannot exceed what remains when each item needs `min_bytes`.
    fn count(&mut self, min_bytes: usize) -> Result<usize> {
        let n = self.u32()?;
        if n.saturating_mul(min_bytes) > self.buf.len() - self.pos {
            return Err(Error::Truncated { offset: self.buf.len() });
        }
        Ok(n)
    }
}

pub fn read_weights(mut input: impl Read) -> Result<Model> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    parse(&buf)
}

fn parse(buf: &[u8]) -> Result<Model> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic.try_into().unwrap(),
        });
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = c.u32()?;
    }
    let n_hi = c.count(1)?;
    let n_lo = c.count(1)?;
    let kinds = c
        .take(n_hi + n_lo)?
        .iter()
        .map(|&k| BlockKind::from_code(k))
        .collect::<Result<Vec<_>>>()?;
    let decoder = [c.u32()?, c.u32()?, c.u32()?];
    let upscale = c.u32()?;
    let seed = u64::from_le_bytes(c.take(8)?.try_into().unwrap());
    let cfg = ModelConfig {
        latent_channels: dims[0],
        latent_h: dims[1],
        latent_w: dims[2],
        hidden: dims[3],
        d: dims[4],
        blocks_hi: kinds[..n_hi].to_vec(),
        blocks_lo: kinds[n_hi..].to_vec(),
        decoder,
        upscale,
    };
    cfg.validate().map_err(|e| Error::Malformed(e.to_string()))?;
    let n = c.count(4)?;
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let rank = c.count(4)?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        shapes.push(shape);
    }
    let mut params = Vec::with_capacity(n);
    for shape in shapes {
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Malformed(format!("shape {shape:?} overflows")))?;
        let bytes = c.take(numel.checked_mul(4).ok_or(Error::Truncated { offset: buf.len() })?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.push(Tensor::new(&shape, data)?);
    }
    if c.pos != buf.len() {
        return Err(Error::Malformed(format!("{} trailing bytes after weights", buf.len() - c.pos)));
    }
    Model::from_params(cfg, seed, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn hash_covers_raw_weight_bytes() {
        let m = Model::generate(ModelConfig::micro(), 9).unwrap();
        let bytes: Vec<u8> = m
            .params()
            .iter()
            .flat_map(|p| p.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        assert_eq!(m.weight_hash(), fnv1a64(&bytes));
    }

    #[test]
    fn file_roundtrip() {
        let m = Model::generate(ModelConfig::micro(), 9).unwrap();
        let mut buf = Vec::new();
        write_weights(&m, &mut buf).unwrap();
        let back = read_weights(&buf[..]).unwrap();
        assert_eq!(back.weight_hash(), m.weight_hash());
        assert_eq!(back.config(), m.config());
        assert_eq!(back.seed(), 9);
    }

    #[test]
    fn truncation_and_corruption_are_errors() {
        let m = Model::generate(ModelConfig::micro(), 9).unwrap();
        let mut buf = Vec::new();
        write_weights(&m, &mut buf).unwrap();
        for cut in [0, 3, 10, 60, buf.len() / 2, buf.len() - 1] {
            assert!(read_weights(&buf[..cut]).is_err());
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_weights(&bad[..]), Err(Error::BadMagic { .. })));
        let mut long = buf;
        long.push(0);
        assert!(read_weights(&long[..]).is_err());
    }
}
