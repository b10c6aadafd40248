//! Low-rank prompt matrices: composition, keyframe interpolation,
//! fixed-width quantization and bitrate arithmetic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// Rows of a prompt embedding matrix.
pub const PROMPT_TOKENS: usize = 77;

/// Default code width for prompt factors.
pub const DEFAULT_BITS: u32 = 12;

/// Prompt stored as `u · v` with `u: [77 × rank]`, `v: [rank × d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankPrompt {
    pub u: Tensor,
    pub v: Tensor,
}

impl LowRankPrompt {
    pub fn new(u: Tensor, v: Tensor) -> Result<Self> {
        if u.rank() != 2 || v.rank() != 2 || u.shape()[0] != PROMPT_TOKENS || u.shape()[1] != v.shape()[0] {
            return Err(Error::Shape {
                op: "low_rank_prompt",
                left: u.shape().to_vec(),
                right: v.shape().to_vec(),
            });
        }
        let (r, d) = (v.shape()[0], v.shape()[1]);
        if r == 0 || r > PROMPT_TOKENS.min(d) {
            return Err(Error::InvalidArgument(format!(
                "rank {r} must lie in 1..={}",
                PROMPT_TOKENS.min(d)
            )));
        }
        Ok(Self { u, v })
    }

    /// Gaussian factors with standard deviation `std`, seeded.
    pub fn random(rank: usize, d: usize, std: f32, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut draw = |n: usize| (0..n).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>();
        let u = Tensor::new(&[PROMPT_TOKENS, rank], draw(PROMPT_TOKENS * rank))?;
        let v = Tensor::new(&[rank, d], draw(rank * d))?;
        Self::new(u, v)
    }

    pub fn rank(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.v.shape()[1]
    }

    pub fn compose(&self) -> Tensor {
        self.u.matmul(&self.v).expect("factor shapes validated at construction")
    }
}

pub fn compose(p: &LowRankPrompt) -> Tensor {
    p.compose()
}

/// `(1 - alpha) · a + alpha · b`, elementwise.
pub fn lerp<T: Element>(a: &Tensor<T>, b: &Tensor<T>, alpha: T) -> Result<Tensor<T>> {
    let wa = T::one() - alpha;
    a.zip_map(b, "lerp", |x, y| wa * x + alpha * y)
}

/// Two keyframes and the interpolation weights of the stitched frames between them.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptGroup {
    pub keyframe_a: LowRankPrompt,
    pub keyframe_b: LowRankPrompt,
    pub alphas: Vec<f32>,
}

impl PromptGroup {
    /// Group with `group_len` uniformly spaced weights from 0 to 1 inclusive.
    pub fn uniform(a: LowRankPrompt, b: LowRankPrompt, group_len: usize) -> Result<Self> {
        Self::with_alphas(a, b, uniform_alphas(group_len)?)
    }

    pub fn with_alphas(a: LowRankPrompt, b: LowRankPrompt, alphas: Vec<f32>) -> Result<Self> {
        if a.rank() != b.rank() || a.dim() != b.dim() {
            return Err(Error::Shape {
                op: "prompt_group",
                left: vec![a.rank(), a.dim()],
                right: vec![b.rank(), b.dim()],
            });
        }
        if alphas.is_empty()
            || alphas.iter().any(|x| !(0.0..=1.0).contains(x))
            || alphas.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::InvalidArgument(format!(
                "alphas must be strictly increasing within [0, 1]: {alphas:?}"
            )));
        }
        Ok(Self {
            keyframe_a: a,
            keyframe_b: b,
            alphas,
        })
    }

    pub fn group_len(&self) -> usize {
        self.alphas.len()
    }

    pub fn interpolate(&self, i: usize) -> Result<Tensor> {
        let alpha = *self.alphas.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: self.alphas.len(),
        })?;
        lerp(&self.keyframe_a.compose(), &self.keyframe_b.compose(), alpha)
    }
}

pub fn uniform_alphas(group_len: usize) -> Result<Vec<f32>> {
    match group_len {
        0 => Err(Error::InvalidArgument("group length must be positive".into())),
        1 => Ok(vec![0.0]),
        n => Ok((0..n).map(|i| i as f32 / (n - 1) as f32).collect()),
    }
}

/// Uniformly quantized matrix with `bits`-bit unsigned codes.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatrix {
    pub bits: u32,
    pub scale: f32,
    pub shape: Vec<usize>,
    pub codes: Vec<u32>,
}

impl QuantizedMatrix {
    fn mid(bits: u32) -> f64 {
        ((1u64 << bits) - 1) as f64 / 2.0
    }

    pub fn max_code(bits: u32) -> u32 {
        ((1u64 << bits) - 1) as u32
    }

    /// Symmetric quantizer with `2^bits - 1` steps spanning `[-max|m|, max|m|]`.
    ///
    /// An all-zero input yields scale 0 with every code at the midpoint.
    pub fn quantize(m: &Tensor, bits: u32) -> Result<Self> {
        if !(1..=24).contains(&bits) {
            return Err(Error::InvalidArgument(format!("code width {bits} outside 1..=24")));
        }
        if !m.is_finite() {
            return Err(Error::InvalidArgument("cannot quantize non-finite values".into()));
        }
        let max = Self::max_code(bits);
        let peak = m.max_abs();
        if peak == 0.0 {
            return Ok(Self {
                bits,
                scale: 0.0,
                shape: m.shape().to_vec(),
                codes: vec![1 << (bits - 1); m.len()],
            });
        }
        let scale = (2.0 * peak as f64 / max as f64) as f32;
        let mid = Self::mid(bits);
        let codes = m
            .data()
            .iter()
            .map(|&x| {
                let c = (x as f64 / scale as f64 + mid).round_ties_even();
                c.clamp(0.0, max as f64) as u32
            })
            .collect();
        Ok(Self {
            bits,
            scale,
            shape: m.shape().to_vec(),
            codes,
        })
    }

    pub fn dequantize(&self) -> Tensor {
        let mid = Self::mid(self.bits);
        let data = self
            .codes
            .iter()
            .map(|&c| ((c as f64 - mid) * self.scale as f64) as f32)
            .collect();
        Tensor::new(&self.shape, data).expect("shape recorded at quantization")
    }

    /// Bits occupied by the codes alone.
    pub fn code_bits(&self) -> u64 {
        self.codes.len() as u64 * self.bits as u64
    }
}

/// A keyframe prompt as transmitted: both factors quantized.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedPrompt {
    pub u: QuantizedMatrix,
    pub v: QuantizedMatrix,
}

impl QuantizedPrompt {
    pub fn quantize(p: &LowRankPrompt, bits: u32) -> Result<Self> {
        Ok(Self {
            u: QuantizedMatrix::quantize(&p.u, bits)?,
            v: QuantizedMatrix::quantize(&p.v, bits)?,
        })
    }

    pub fn dequantize(&self) -> Result<LowRankPrompt> {
        LowRankPrompt::new(self.u.dequantize(), self.v.dequantize())
    }
}

/// Prompt-code bitrate, excluding container overhead:
/// `(77 + d) · rank · q · keyframes_per_second`.
pub fn bitrate_estimate(d: usize, rank: usize, q: u32, keyframes_per_second: f64) -> f64 {
    ((PROMPT_TOKENS + d) * rank) as f64 * q as f64 * keyframes_per_second
}

/// Code bits of a single keyframe.
pub fn keyframe_bits(d: usize, rank: usize, q: u32) -> u64 {
    ((PROMPT_TOKENS + d) * rank) as u64 * q as u64
}
