//! Separable Catmull-Rom resampling by an integer factor.

use super::tensor::Element;

/// Catmull-Rom (`a = -0.5`) cubic convolution kernel.
pub fn catmull_rom(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four-tap weights for every output position along one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisTaps {
    pub len_in: usize,
    pub len_out: usize,
    pub index: Vec<[usize; 4]>,
    pub weight: Vec<[f64; 4]>,
}

impl AxisTaps {
    /// Pixel-center aligned mapping; source taps are clamped at the borders.
    pub fn new(len_in: usize, factor: usize) -> Self {
        let len_out = len_in * factor;
        let mut index = Vec::with_capacity(len_out);
        let mut weight = Vec::with_capacity(len_out);
        let last = len_in as isize - 1;
        for o in 0..len_out {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let base = src.floor();
            let t = src - base;
            let base = base as isize;
            let mut idx = [0usize; 4];
            let mut wts = [0f64; 4];
            for k in 0..4 {
                let off = k as isize - 1;
                idx[k] = (base + off).clamp(0, last) as usize;
                wts[k] = catmull_rom(t - off as f64);
            }
            index.push(idx);
            weight.push(wts);
        }
        Self { len_in, len_out, index, weight }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResizePlan {
    pub channels: usize,
    pub rows: AxisTaps,
    pub cols: AxisTaps,
}

impl ResizePlan {
    pub fn new(channels: usize, h: usize, w: usize, factor: usize) -> Self {
        Self {
            channels,
            rows: AxisTaps::new(h, factor),
            cols: AxisTaps::new(w, factor),
        }
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.channels, self.rows.len_out, self.cols.len_out]
    }

    pub fn forward<T: Element>(&self, x: &[T]) -> Vec<T> {
        let (h, w) = (self.rows.len_in, self.cols.len_in);
        let (oh, ow) = (self.rows.len_out, self.cols.len_out);
        let wc: Vec<[T; 4]> = self.cols.weight.iter().map(|w| w.map(T::of)).collect();
        let wr: Vec<[T; 4]> = self.rows.weight.iter().map(|w| w.map(T::of)).collect();
        let mut tmp = vec![T::zero(); h * ow];
        let mut out = vec![T::zero(); self.channels * oh * ow];
        for c in 0..self.channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                let row = &plane[y * w..(y + 1) * w];
                for ox in 0..ow {
                    let idx = &self.cols.index[ox];
                    let wt = &wc[ox];
                    let mut s = T::zero();
                    for k in 0..4 {
                        s = s + wt[k] * row[idx[k]];
                    }
                    tmp[y * ow + ox] = s;
                }
            }
            let oplane = &mut out[c * oh * ow..(c + 1) * oh * ow];
            for oy in 0..oh {
                let idx = &self.rows.index[oy];
                let wt = &wr[oy];
                for ox in 0..ow {
                    let mut s = T::zero();
                    for k in 0..4 {
                        s = s + wt[k] * tmp[idx[k] * ow + ox];
                    }
                    oplane[oy * ow + ox] = s;
                }
            }
        }
        out
    }

    /// Adjoint of [`forward`](Self::forward), accumulated into `dx`.
    pub fn backward<T: Element>(&self, dy: &[T], dx: &mut [T]) {
        let (h, w) = (self.rows.len_in, self.cols.len_in);
        let (oh, ow) = (self.rows.len_out, self.cols.len_out);
        let wc: Vec<[T; 4]> = self.cols.weight.iter().map(|w| w.map(T::of)).collect();
        let wr: Vec<[T; 4]> = self.rows.weight.iter().map(|w| w.map(T::of)).collect();
        let mut dtmp = vec![T::zero(); h * ow];
        for c in 0..self.channels {
            dtmp.iter_mut().for_each(|v| *v = T::zero());
            let dplane = &dy[c * oh * ow..(c + 1) * oh * ow];
            for oy in 0..oh {
                let idx = &self.rows.index[oy];
                let wt = &wr[oy];
                for ox in 0..ow {
                    let d = dplane[oy * ow + ox];
                    for k in 0..4 {
                        let t = &mut dtmp[idx[k] * ow + ox];
                        *t = *t + wt[k] * d;
                    }
                }
            }
            let xplane = &mut dx[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for ox in 0..ow {
                    let d = dtmp[y * ow + ox];
                    let idx = &self.cols.index[ox];
                    let wt = &wc[ox];
                    for k in 0..4 {
                        let t = &mut xplane[y * w + idx[k]];
                        *t = *t + wt[k] * d;
                    }
                }
            }
        }
    }

    /// Multiply-accumulates performed by one forward pass.
    pub fn macs(&self) -> u64 {
        let (h, ow, oh) = (self.rows.len_in, self.cols.len_out, self.rows.len_out);
        (self.channels * 4 * (h * ow + oh * ow)) as u64
    }
}
