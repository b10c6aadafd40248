//! Reverse-mode differentiation by operation recording.
//!
//! Every primitive evaluates eagerly and appends a node holding its value and
//! enough saved state to run its vector-Jacobian product. `grad` walks the
//! nodes backwards from a scalar loss.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::resample::ResizePlan;
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddRowBias(usize, usize),
    ChannelAffine { x: usize, k: usize, b: usize },
    Silu(usize),
    Sigmoid(usize),
    GroupNorm { x: usize, rstd: Vec<T> },
    Softmax(usize),
    Conv2d { x: usize, w: usize, bias: Option<usize>, geom: ConvGeom },
    Upsample2x(usize),
    Resize { x: usize, plan: Arc<ResizePlan> },
    Gather { x: usize, index: Arc<Vec<usize>> },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    DiffW(usize),
    DiffH(usize),
    Clamp { x: usize, lo: T, hi: T },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Single-threaded; one tape per optimization step.
pub struct Tape<T: Element = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::UnknownLeaf);
        }
        Ok(v.id)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_arc(&mut self, t: Arc<Tensor<T>>) -> Var {
        self.push_arc(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let ng = self.ng(&[ia, ib]);
        Ok(self.push(out, Op::Matmul(ia, ib), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.transpose()?;
        let ng = self.ng(&[ia]);
        Ok(self.push(out, Op::Transpose(ia), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        let ng = self.ng(&[ia, ib]);
        Ok(self.push(out, Op::Add(ia, ib), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ia].value.sub(&self.nodes[ib].value)?;
        let ng = self.ng(&[ia, ib]);
        Ok(self.push(out, Op::Sub(ia, ib), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ia].value.mul(&self.nodes[ib].value)?;
        let ng = self.ng(&[ia, ib]);
        Ok(self.push(out, Op::Mul(ia, ib), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.scale(s);
        let ng = self.ng(&[ia]);
        Ok(self.push(out, Op::Scale(ia, s), ng))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v + s);
        let ng = self.ng(&[ia]);
        Ok(self.push(out, Op::AddScalar(ia), ng))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (xv, bv) = (&self.nodes[ix].value, &self.nodes[ib].value);
        if xv.rank() != 2 || bv.len() != xv.shape()[1] {
            return Err(Error::Shape {
                op: "add_row_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let n = xv.shape()[1];
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % n])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.ng(&[ix, ib]);
        Ok(self.push(out, Op::AddRowBias(ix, ib), ng))
    }

    /// `k[c] * x[c, ..] + b[c]` with per-channel `k` and `b` on the leading axis.
    pub fn channel_affine(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (ix, ik, ib) = (self.check(x)?, self.check(k)?, self.check(b)?);
        let (xv, kv, bv) = (&self.nodes[ix].value, &self.nodes[ik].value, &self.nodes[ib].value);
        let c = xv.shape().first().copied().unwrap_or(0);
        if kv.len() != c || bv.len() != c {
            return Err(Error::Shape {
                op: "channel_affine",
                left: xv.shape().to_vec(),
                right: vec![kv.len(), bv.len()],
            });
        }
        let per = xv.len() / c.max(1);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| kv.data()[i / per] * v + bv.data()[i / per])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.ng(&[ix, ik, ib]);
        Ok(self.push(out, Op::ChannelAffine { x: ix, k: ik, b: ib }, ng))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v / (T::one() + (-v).exp()));
        let ng = self.ng(&[ia]);
        Ok(self.push(out, Op::Silu(ia), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| T::one() / (T::one() + (-v).exp()));
        let ng = self.ng(&[ia]);
        Ok(self.push(out, Op::Sigmoid(ia), ng))
    }

    /// Group normalization over a `[C, H, W]` (or `[C, N]`) tensor.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        let c = xv.shape().first().copied().unwrap_or(0);
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape {
                op: "group_norm",
                left: xv.shape().to_vec(),
                right: vec![groups],
            });
        }
        let (data, rstd) = kernels::group_norm_forward(xv.data(), c, groups, T::of(1e-5));
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.ng(&[ix]);
        Ok(self.push(out, Op::GroupNorm { x: ix, rstd }, ng))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        if av.rank() != 2 {
            return Err(Error::Shape {
                op: "softmax",
                left: av.shape().to_vec(),
                right: vec![],
            });
        }
        let data = kernels::softmax_rows(av.data(), av.shape()[1]);
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let ng = self.ng(&[ia]);
        Ok(self.push(out, Op::Softmax(ia), ng))
    }

    /// Square-kernel convolution of `[Ci, H, W]` by `[Co, Ci, k, k]`, padding `k / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let (xv, wv) = (&self.nodes[ix].value, &self.nodes[iw].value);
        let bad = || Error::Shape {
            op: "conv2d",
            left: xv.shape().to_vec(),
            right: wv.shape().to_vec(),
        };
        if xv.rank() != 3 || wv.rank() != 4 || wv.shape()[1] != xv.shape()[0] || wv.shape()[2] != wv.shape()[3] {
            return Err(bad());
        }
        let k = wv.shape()[2];
        if stride == 0 || k % 2 == 0 {
            return Err(bad());
        }
        let geom = ConvGeom {
            c_in: xv.shape()[0],
            c_out: wv.shape()[0],
            h: xv.shape()[1],
            w: xv.shape()[2],
            k,
            stride,
            pad: k / 2,
        };
        let bdata = match ib {
            Some(i) => {
                let b = &self.nodes[i].value;
                if b.len() != geom.c_out {
                    return Err(bad());
                }
                Some(b.data())
            }
            None => None,
        };
        let data = kernels::conv2d_forward(xv.data(), wv.data(), bdata, &geom);
        let out = Tensor::from_parts(vec![geom.c_out, geom.out_h(), geom.out_w()], data);
        let mut ids = vec![ix, iw];
        ids.extend(ib);
        let ng = self.ng(&ids);
        Ok(self.push(out, Op::Conv2d { x: ix, w: iw, bias: ib, geom }, ng))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        if xv.rank() != 3 {
            return Err(Error::Shape {
                op: "upsample_nearest2x",
                left: xv.shape().to_vec(),
                right: vec![],
            });
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let data = kernels::upsample_nearest2x(xv.data(), c, h, w);
        let out = Tensor::from_parts(vec![c, 2 * h, 2 * w], data);
        let ng = self.ng(&[ix]);
        Ok(self.push(out, Op::Upsample2x(ix), ng))
    }

    /// Linear resampling of a `[C, H, W]` tensor with a precomputed plan.
    pub fn resize(&mut self, x: Var, plan: Arc<ResizePlan>) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        let want = [plan.channels, plan.rows.len_in, plan.cols.len_in];
        if xv.shape() != want {
            return Err(Error::Shape {
                op: "resize",
                left: xv.shape().to_vec(),
                right: want.to_vec(),
            });
        }
        let data = plan.forward(xv.data());
        let out = Tensor::from_parts(plan.out_shape().to_vec(), data);
        let ng = self.ng(&[ix]);
        Ok(self.push(out, Op::Resize { x: ix, plan }, ng))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        let n: usize = shape.iter().product();
        if n != index.len() || index.iter().any(|&i| i >= xv.len()) {
            return Err(Error::Shape {
                op: "gather",
                left: xv.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        let ng = self.ng(&[ix]);
        Ok(self.push(out, Op::Gather { x: ix, index }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.reshape(shape)?;
        let ng = self.ng(&[ix]);
        Ok(self.push(out, Op::Reshape(ix), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = Tensor::scalar(self.nodes[ix].value.sum());
        let ng = self.ng(&[ix]);
        Ok(self.push(out, Op::Sum(ix), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        let out = Tensor::scalar(xv.sum() / T::of(xv.len() as f64));
        let ng = self.ng(&[ix]);
        Ok(self.push(out, Op::Mean(ix), ng))
    }

    /// Forward difference along the last axis: `x[.., j+1] - x[.., j]`.
    pub fn diff_w(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        let w = *xv.shape().last().unwrap_or(&0);
        if w < 2 {
            return Err(Error::Shape {
                op: "diff_w",
                left: xv.shape().to_vec(),
                right: vec![],
            });
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = w - 1;
        let data = xv
            .data()
            .chunks(w)
            .flat_map(|row| row.windows(2).map(|p| p[1] - p[0]))
            .collect();
        let out = Tensor::from_parts(shape, data);
        let ng = self.ng(&[ix]);
        Ok(self.push(out, Op::DiffW(ix), ng))
    }

    /// Forward difference along the second-to-last axis.
    pub fn diff_h(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        let r = xv.rank();
        if r < 2 || xv.shape()[r - 2] < 2 {
            return Err(Error::Shape {
                op: "diff_h",
                left: xv.shape().to_vec(),
                right: vec![],
            });
        }
        let (h, w) = (xv.shape()[r - 2], xv.shape()[r - 1]);
        let mut shape = xv.shape().to_vec();
        shape[r - 2] = h - 1;
        let mut data = Vec::with_capacity(xv.len() / h * (h - 1));
        for plane in xv.data().chunks(h * w) {
            for y in 0..h - 1 {
                for x in 0..w {
                    data.push(plane[(y + 1) * w + x] - plane[y * w + x]);
                }
            }
        }
        let out = Tensor::from_parts(shape, data);
        let ng = self.ng(&[ix]);
        Ok(self.push(out, Op::DiffH(ix), ng))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.map(|v| v.max(lo).min(hi));
        let ng = self.ng(&[ix]);
        Ok(self.push(out, Op::Clamp { x: ix, lo, hi }, ng))
    }

    /// Gradient of the scalar `loss` with respect to each of `leaves`.
    ///
    /// Leaves that did not contribute to `loss` receive zeros.
    pub fn grad(&self, loss: Var, leaves: &[Var]) -> Result<Vec<Tensor<T>>> {
        let il = self.check(loss)?;
        for &l in leaves {
            self.check(l)?;
        }
        if self.nodes[il].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "gradient requires a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=il).map(|_| None).collect();
        grads[il] = Some(Tensor::ones(self.nodes[il].value.shape()));
        let mut is_target = vec![false; il + 1];
        for l in leaves {
            if l.id <= il {
                is_target[l.id] = true;
            }
        }
        for i in (0..=il).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = if is_target[i] {
                match &grads[i] {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backward_node(i, &g, &mut grads);
        }
        Ok(leaves
            .iter()
            .map(|l| {
                grads
                    .get(l.id)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[l.id].value.shape()))
            })
            .collect())
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].needs_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if wants(*a) {
                    let bt = bv.transpose().expect("rank checked");
                    accumulate(grads, *a, g.matmul(&bt).expect("shapes checked"));
                }
                if wants(*b) {
                    let at = av.transpose().expect("rank checked");
                    accumulate(grads, *b, at.matmul(g).expect("shapes checked"));
                }
            }
            Op::Transpose(a) => {
                accumulate(grads, *a, g.transpose().expect("rank checked"));
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.mul(&nodes[*b].value).expect("same shape"));
                }
                if wants(*b) {
                    accumulate(grads, *b, g.mul(&nodes[*a].value).expect("same shape"));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::AddRowBias(x, b) => {
                if wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if wants(*b) {
                    let n = g.shape()[1];
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    let shape = nodes[*b].value.shape().to_vec();
                    accumulate(grads, *b, Tensor::from_parts(shape, db));
                }
            }
            Op::ChannelAffine { x, k, b } => {
                let (xv, kv) = (&nodes[*x].value, &nodes[*k].value);
                let c = kv.len();
                let per = xv.len() / c.max(1);
                if wants(*x) {
                    let data = g.data().iter().enumerate().map(|(j, &d)| d * kv.data()[j / per]).collect();
                    accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
                }
                if wants(*k) || wants(*b) {
                    let mut dk = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for ch in 0..c {
                        for j in ch * per..(ch + 1) * per {
                            dk[ch] = dk[ch] + g.data()[j] * xv.data()[j];
                            db[ch] = db[ch] + g.data()[j];
                        }
                    }
                    if wants(*k) {
                        accumulate(grads, *k, Tensor::from_parts(kv.shape().to_vec(), dk));
                    }
                    if wants(*b) {
                        let shape = nodes[*b].value.shape().to_vec();
                        accumulate(grads, *b, Tensor::from_parts(shape, db));
                    }
                }
            }
            Op::Silu(a) => {
                let xv = &nodes[*a].value;
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&d, &x)| {
                        let s = T::one() / (T::one() + (-x).exp());
                        d * (s + x * s * (T::one() - s))
                    })
                    .collect();
                accumulate(grads, *a, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::Sigmoid(a) => {
                let yv = &nodes[i].value;
                let data = g
                    .data()
                    .iter()
                    .zip(yv.data())
                    .map(|(&d, &y)| d * y * (T::one() - y))
                    .collect();
                accumulate(grads, *a, Tensor::from_parts(yv.shape().to_vec(), data));
            }
            Op::GroupNorm { x, rstd } => {
                let yv = &nodes[i].value;
                let mut dx = vec![T::zero(); yv.len()];
                kernels::group_norm_backward(yv.data(), rstd, g.data(), &mut dx);
                accumulate(grads, *x, Tensor::from_parts(yv.shape().to_vec(), dx));
            }
            Op::Softmax(a) => {
                let yv = &nodes[i].value;
                let mut dx = vec![T::zero(); yv.len()];
                kernels::softmax_rows_backward(yv.data(), g.data(), yv.shape()[1], &mut dx);
                accumulate(grads, *a, Tensor::from_parts(yv.shape().to_vec(), dx));
            }
            Op::Conv2d { x, w, bias, geom } => {
                let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                let mut dx = wants(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = wants(*w).then(|| vec![T::zero(); wv.len()]);
                let mut db = bias.filter(|b| wants(*b)).map(|_| vec![T::zero(); geom.c_out]);
                kernels::conv2d_backward(
                    xv.data(),
                    wv.data(),
                    g.data(),
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    let shape = nodes[*b].value.shape().to_vec();
                    accumulate(grads, *b, Tensor::from_parts(shape, db));
                }
            }
            Op::Upsample2x(a) => {
                let xv = &nodes[*a].value;
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let mut dx = vec![T::zero(); xv.len()];
                kernels::upsample_nearest2x_backward(g.data(), c, h, w, &mut dx);
                accumulate(grads, *a, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Resize { x, plan } => {
                let xv = &nodes[*x].value;
                let mut dx = vec![T::zero(); xv.len()];
                plan.backward(g.data(), &mut dx);
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Gather { x, index } => {
                let xv = &nodes[*x].value;
                let mut dx = vec![T::zero(); xv.len()];
                for (&j, &d) in index.iter().zip(g.data()) {
                    dx[j] = dx[j] + d;
                }
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Reshape(a) => {
                let shape = nodes[*a].value.shape().to_vec();
                accumulate(grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Sum(a) => {
                let shape = nodes[*a].value.shape();
                accumulate(grads, *a, Tensor::full(shape, g.data()[0]));
            }
            Op::Mean(a) => {
                let xv = &nodes[*a].value;
                let v = g.data()[0] / T::of(xv.len() as f64);
                accumulate(grads, *a, Tensor::full(xv.shape(), v));
            }
            Op::DiffW(a) => {
                let xv = &nodes[*a].value;
                let w = *xv.shape().last().unwrap();
                let mut dx = vec![T::zero(); xv.len()];
                for (r, grow) in g.data().chunks(w - 1).enumerate() {
                    for (j, &d) in grow.iter().enumerate() {
                        dx[r * w + j + 1] = dx[r * w + j + 1] + d;
                        dx[r * w + j] = dx[r * w + j] - d;
                    }
                }
                accumulate(grads, *a, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::DiffH(a) => {
                let xv = &nodes[*a].value;
                let r = xv.rank();
                let (h, w) = (xv.shape()[r - 2], xv.shape()[r - 1]);
                let mut dx = vec![T::zero(); xv.len()];
                for (p, gplane) in g.data().chunks((h - 1) * w).enumerate() {
                    let base = p * h * w;
                    for y in 0..h - 1 {
                        for x in 0..w {
                            let d = gplane[y * w + x];
                            dx[base + (y + 1) * w + x] = dx[base + (y + 1) * w + x] + d;
                            dx[base + y * w + x] = dx[base + y * w + x] - d;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &nodes[*x].value;
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&d, &v)| if v < *lo || v > *hi { T::zero() } else { d })
                    .collect();
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
        }
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, &v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::resample::ResizePlan;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks `f`'s tape gradient against central differences, h = 1e-3.
    fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &leaves);
        let analytic = tape.grad(loss, &leaves).unwrap();
        let eval = |ins: &[Tensor<f64>]| {
            let mut t = Tape::new();
            let ls: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
            let l = f(&mut t, &ls);
            t.value(l).data()[0]
        };
        let h = 1e-3;
        for (li, inp) in inputs.iter().enumerate() {
            for e in 0..inp.len() {
                let mut plus = inputs.clone();
                plus[li].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[li].data_mut()[e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[li].data()[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel <= 1e-4, "leaf {li} elem {e}: analytic {a} numeric {numeric} rel {rel}");
            }
        }
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.grad(s, &[x]).unwrap();
        assert_eq!(g[0], Tensor::ones(&[2, 3]));
    }

    #[test]
    fn grad_of_half_square_is_x() {
        let mut tape = Tape::<f32>::new();
        let xt = Tensor::new(&[4], vec![1.0, -2.0, 0.25, 3.0]).unwrap();
        let x = tape.leaf(xt.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        let g = tape.grad(half, &[x]).unwrap();
        assert_eq!(g[0], xt);
    }

    #[test]
    fn foreign_leaf_is_rejected() {
        let mut a = Tape::<f32>::new();
        let mut b = Tape::<f32>::new();
        let x = a.leaf(Tensor::ones(&[2]));
        let y = b.leaf(Tensor::ones(&[2]));
        let s = a.sum(x).unwrap();
        assert!(matches!(a.grad(s, &[y]), Err(Error::UnknownLeaf)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut a = Tape::<f32>::new();
        let x = a.leaf(Tensor::ones(&[2]));
        assert!(a.grad(x, &[x]).is_err());
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut a = Tape::<f32>::new();
        let x = a.leaf(Tensor::ones(&[2]));
        let y = a.leaf(Tensor::ones(&[3]));
        let s = a.sum(x).unwrap();
        assert_eq!(a.grad(s, &[y]).unwrap()[0], Tensor::zeros(&[3]));
    }

    #[test]
    fn fd_matmul_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        check(vec![rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[3, 4])], |t, v| {
            let bt = t.transpose(v[1]).unwrap();
            let m = t.matmul(v[0], bt).unwrap();
            let m2 = t.mul(m, m).unwrap();
            t.sum(m2).unwrap()
        });
    }

    #[test]
    fn fd_elementwise_and_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        check(vec![rand_t(&mut rng, &[2, 5]), rand_t(&mut rng, &[2, 5])], |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let s = t.sub(a, v[1]).unwrap();
            let m = t.mul(s, v[1]).unwrap();
            let si = t.silu(m).unwrap();
            let sg = t.sigmoid(si).unwrap();
            let sc = t.scale(sg, 1.7).unwrap();
            let sh = t.add_scalar(sc, -0.3).unwrap();
            let sq = t.mul(sh, sh).unwrap();
            t.mean(sq).unwrap()
        });
    }

    #[test]
    fn fd_bias_and_channel_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        check(
            vec![
                rand_t(&mut rng, &[3, 4]),
                rand_t(&mut rng, &[4]),
                rand_t(&mut rng, &[3]),
                rand_t(&mut rng, &[3]),
            ],
            |t, v| {
                let a = t.add_row_bias(v[0], v[1]).unwrap();
                let c = t.channel_affine(a, v[2], v[3]).unwrap();
                let sq = t.mul(c, c).unwrap();
                t.sum(sq).unwrap()
            },
        );
    }

    #[test]
    fn fd_group_norm_and_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = rand_t(&mut rng, &[8, 3, 3]);
        check(vec![rand_t(&mut rng, &[8, 3, 3])], move |t, v| {
            let n = t.group_norm(v[0], 4).unwrap();
            let r = t.reshape(n, &[8, 9]).unwrap();
            let s = t.softmax(r).unwrap();
            let r2 = t.reshape(s, &[8, 3, 3]).unwrap();
            let wc = t.constant(w.clone());
            let m = t.mul(r2, wc).unwrap();
            t.sum(m).unwrap()
        });
    }

    #[test]
    fn fd_conv_stride_one_and_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for stride in [1, 2] {
            check(
                vec![
                    rand_t(&mut rng, &[2, 5, 6]),
                    rand_t(&mut rng, &[3, 2, 3, 3]),
                    rand_t(&mut rng, &[3]),
                ],
                move |t, v| {
                    let c = t.conv2d(v[0], v[1], Some(v[2]), stride).unwrap();
                    let sq = t.mul(c, c).unwrap();
                    t.sum(sq).unwrap()
                },
            );
        }
        check(vec![rand_t(&mut rng, &[2, 3, 3]), rand_t(&mut rng, &[4, 2, 1, 1])], |t, v| {
            let c = t.conv2d(v[0], v[1], None, 1).unwrap();
            let s = t.silu(c).unwrap();
            t.sum(s).unwrap()
        });
    }

    #[test]
    fn fd_resampling_gather_diffs() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let plan = Arc::new(ResizePlan::new(2, 3, 4, 2));
        let index = Arc::new((0..24).rev().collect::<Vec<usize>>());
        check(vec![rand_t(&mut rng, &[2, 3, 4])], move |t, v| {
            let u = t.upsample_nearest2x(v[0]).unwrap();
            let g = t.gather(v[0], index.clone(), &[2, 3, 4]).unwrap();
            let r = t.resize(g, plan.clone()).unwrap();
            let m = t.mul(u, r).unwrap();
            let dw = t.diff_w(m).unwrap();
            let dh = t.diff_h(m).unwrap();
            let a = t.mul(dw, dw).unwrap();
            let b = t.mul(dh, dh).unwrap();
            let sa = t.sum(a).unwrap();
            let sb = t.mean(b).unwrap();
            t.add(sa, sb).unwrap()
        });
    }

    #[test]
    fn fd_clamp_away_from_kinks() {
        let x = Tensor::new(&[4], vec![-0.7, -0.2, 0.3, 0.9]).unwrap();
        check(vec![x], |t, v| {
            let c = t.clamp(v[0], -0.5, 0.5).unwrap();
            let sq = t.mul(c, c).unwrap();
            t.sum(sq).unwrap()
        });
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(16);
            let mut t = Tape::<f32>::new();
            let x = t.leaf(rand_t(&mut rng, &[4, 4, 4]).cast());
            let w = t.constant(rand_t(&mut rng, &[4, 4, 3, 3]).cast());
            let c = t.conv2d(x, w, None, 1).unwrap();
            let n = t.group_norm(c, 4).unwrap();
            let s = t.silu(n).unwrap();
            t.value(s).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
