//! Raw loops behind the tape primitives. All loops run in a fixed order so
//! forward values are reproducible bit-for-bit.

use super::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Valid output index range along one axis for kernel offset `kk`.
    fn valid(&self, kk: usize, len_in: usize, len_out: usize) -> (usize, usize) {
        // i = o*stride + kk - pad must lie in [0, len_in)
        let mut lo = 0;
        while lo < len_out && (lo * self.stride + kk) < self.pad {
            lo += 1;
        }
        let mut hi = lo;
        while hi < len_out && hi * self.stride + kk - self.pad < len_in {
            hi += 1;
        }
        (lo, hi)
    }
}

pub fn conv2d_forward<T: Element>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); g.c_out * oh * ow];
    for co in 0..g.c_out {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.c_in {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (y0, y1) = g.valid(ky, g.h, oh);
                for kx in 0..g.k {
                    let wv = w[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let (x0, x1) = g.valid(kx, g.w, ow);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &xin[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let ix0 = x0 + kx - g.pad;
                            for (o, &xv) in orow[x0..x1].iter_mut().zip(&row[ix0..ix0 + (x1 - x0)]) {
                                *o = *o + wv * xv;
                            }
                        } else {
                            for ox in x0..x1 {
                                let ix = ox * g.stride + kx - g.pad;
                                orow[ox] = orow[ox] + wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    if let Some(db) = db {
        for co in 0..g.c_out {
            let mut s = T::zero();
            for &v in &dout[co * oh * ow..(co + 1) * oh * ow] {
                s = s + v;
            }
            db[co] = db[co] + s;
        }
    }
    for co in 0..g.c_out {
        let dplane = &dout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.c_in {
            let base = ci * g.h * g.w;
            for ky in 0..g.k {
                let (y0, y1) = g.valid(ky, g.h, oh);
                for kx in 0..g.k {
                    let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                    let wv = w[widx];
                    let (x0, x1) = g.valid(kx, g.w, ow);
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        for ox in x0..x1 {
                            let ix = ox * g.stride + kx - g.pad;
                            let d = dplane[oy * ow + ox];
                            let xi = base + iy * g.w + ix;
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xi] = dx[xi] + wv * d;
                            }
                            acc = acc + x[xi] * d;
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] = dw[widx] + acc;
                    }
                }
            }
        }
    }
}

/// Group normalization without affine parameters over a `[C, H, W]` tensor.
/// Returns the normalized values and the per-group reciprocal std.
pub fn group_norm_forward<T: Element>(x: &[T], channels: usize, groups: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let per = x.len() / groups;
    debug_assert_eq!(channels % groups, 0);
    let mut out = vec![T::zero(); x.len()];
    let mut rstds = Vec::with_capacity(groups);
    let n = T::of(per as f64);
    for gi in 0..groups {
        let seg = &x[gi * per..(gi + 1) * per];
        let mut mean = T::zero();
        for &v in seg {
            mean = mean + v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for &v in seg {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / n;
        let rstd = T::one() / (var + eps).sqrt();
        for (o, &v) in out[gi * per..(gi + 1) * per].iter_mut().zip(seg) {
            *o = (v - mean) * rstd;
        }
        rstds.push(rstd);
    }
    (out, rstds)
}

pub fn group_norm_backward<T: Element>(xhat: &[T], rstd: &[T], dy: &[T], dx: &mut [T]) {
    let groups = rstd.len();
    let per = xhat.len() / groups;
    let n = T::of(per as f64);
    for gi in 0..groups {
        let r = gi * per..(gi + 1) * per;
        let mut mean_dy = T::zero();
        let mut mean_dy_xhat = T::zero();
        for (&d, &xh) in dy[r.clone()].iter().zip(&xhat[r.clone()]) {
            mean_dy = mean_dy + d;
            mean_dy_xhat = mean_dy_xhat + d * xh;
        }
        mean_dy = mean_dy / n;
        mean_dy_xhat = mean_dy_xhat / n;
        for i in r {
            dx[i] = dx[i] + rstd[gi] * (dy[i] - mean_dy - xhat[i] * mean_dy_xhat);
        }
    }
}

pub fn softmax_rows<T: Element>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            s = s + *o;
        }
        for o in orow.iter_mut() {
            *o = *o / s;
        }
    }
    out
}

pub fn softmax_rows_backward<T: Element>(y: &[T], dy: &[T], cols: usize, dx: &mut [T]) {
    for ((yr, dyr), dxr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let mut dot = T::zero();
        for (&a, &b) in yr.iter().zip(dyr) {
            dot = dot + a * b;
        }
        for ((d, &a), &b) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = *d + a * (b - dot);
        }
    }
}

pub fn upsample_nearest2x<T: Element>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                out[(ch * oh + y) * ow + xo] = x[(ch * h + y / 2) * w + xo / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2x_backward<T: Element>(dy: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let i = (ch * h + y / 2) * w + xo / 2;
                dx[i] = dx[i] + dy[(ch * oh + y) * ow + xo];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_geometry() {
        let g = ConvGeom { c_in: 1, c_out: 1, h: 8, w: 6, k: 3, stride: 2, pad: 1 };
        assert_eq!((g.out_h(), g.out_w()), (4, 3));
        let g1 = ConvGeom { stride: 1, ..g };
        assert_eq!((g1.out_h(), g1.out_w()), (8, 6));
        let g2 = ConvGeom { k: 1, pad: 0, stride: 1, ..g };
        assert_eq!((g2.out_h(), g2.out_w()), (8, 6));
    }

    #[test]
    fn conv_matches_direct_definition() {
        let g = ConvGeom { c_in: 2, c_out: 3, h: 5, w: 4, k: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..g.c_in * g.h * g.w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..g.c_out * g.c_in * 9).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let b = [0.5, -1.0, 2.0];
        let got = conv2d_forward(&x, &w, Some(&b), &g);
        let (oh, ow) = (g.out_h(), g.out_w());
        for co in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[co];
                    for ci in 0..g.c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                s += w[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                    * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    assert_eq!(got[(co * oh + oy) * ow + ox], s);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let y = softmax_rows(&[1.0f64, 2.0, 3.0, -1.0, 0.0, 1000.0], 3);
        assert!((y[0] + y[1] + y[2] - 1.0).abs() < 1e-12);
        assert!((y[5] - 1.0).abs() < 1e-12);
    }
}
