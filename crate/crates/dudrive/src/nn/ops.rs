//! Layer kernels. Convolutions run as per-image im2col + GEMM; the transposed
//! convolution reuses the same gather/scatter primitives with input and
//! output roles swapped.

use crate::num::{s, Scalar};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut2, ArrayViewMut3};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Gather image patches into a (C*K*K, OH*OW) matrix. Rows are (c, ky, kx),
/// columns are output positions. Out-of-bounds taps stay zero.
fn im2col<S: Scalar>(
    x: &ArrayView3<'_, S>,
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    cols: &mut Array2<S>,
) {
    let (c_in, h, w) = x.dim();
    debug_assert_eq!(cols.dim(), (c_in * k * k, oh * ow));
    cols.fill(S::zero());
    let x_slice = x.as_slice().expect("contiguous input");
    let cols_slice = cols.as_slice_mut().expect("contiguous cols");
    for ci in 0..c_in {
        let x_chan = &x_slice[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols_slice[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &x_chan[iy as usize * w..(iy as usize + 1) * w];
                    // valid ox range: 0 <= ox*stride + kx - pad < w
                    let (lo, hi) = valid_range(ow, stride, kx, pad, w);
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for ox in lo..hi {
                        let ix = ox * stride + kx - pad;
                        drow[ox] = src_row[ix];
                    }
                }
            }
        }
    }
}

/// Scatter-add the transpose of `im2col`: cols[(c,ky,kx), (oy,ox)] is added
/// into x[c, oy*stride+ky-pad, ox*stride+kx-pad].
fn col2im_add<S: Scalar>(
    cols: &Array2<S>,
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    x: &mut ArrayViewMut3<'_, S>,
) {
    let (c_n, h, w) = x.dim();
    debug_assert_eq!(cols.dim(), (c_n * k * k, oh * ow));
    let cols_slice = cols.as_slice().expect("contiguous cols");
    let x_slice = x.as_slice_mut().expect("contiguous output");
    for ci in 0..c_n {
        let x_chan = &mut x_slice[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols_slice[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut x_chan[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_range(ow, stride, kx, pad, w);
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for ox in lo..hi {
                        let ix = ox * stride + kx - pad;
                        dst_row[ix] += srow[ox];
                    }
                }
            }
        }
    }
}

#[inline]
fn valid_range(ow: usize, stride: usize, kx: usize, pad: usize, w: usize) -> (usize, usize) {
    // smallest ox with ox*stride + kx - pad >= 0
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // largest ox with ox*stride + kx - pad <= w-1, exclusive bound
    let hi = if w + pad > kx {
        (((w + pad - kx - 1) / stride) + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Convolution forward. `x`: (B, Cin, H, W); `w`: (Cout, Cin*K*K); output
/// (B, Cout, OH, OW).
pub fn conv2d_forward<S: Scalar>(
    x: &Array4<S>,
    w: &ArrayView2<'_, S>,
    b: &[S],
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<S> {
    let (batch, c_in, h, win) = x.dim();
    let c_out = w.nrows();
    let oh = super::conv_out(h, k, stride, pad);
    let ow = super::conv_out(win, k, stride, pad);
    let mut out = Array4::<S>::zeros((batch, c_out, oh, ow));
    let mut cols = Array2::<S>::zeros((c_in * k * k, oh * ow));
    for bi in 0..batch {
        im2col(&x.index_axis(ndarray::Axis(0), bi), k, stride, pad, (oh, ow), &mut cols);
        let mut out_img = out.index_axis_mut(ndarray::Axis(0), bi);
        let mut out_mat: ArrayViewMut2<'_, S> = out_img
            .as_slice_mut()
            .map(|sl| ArrayViewMut2::from_shape((c_out, oh * ow), sl).unwrap())
            .expect("contiguous output");
        general_mat_mul(S::one(), w, &cols, S::zero(), &mut out_mat);
        for (co, bias) in b.iter().enumerate() {
            out_mat.row_mut(co).mapv_inplace(|v| v + *bias);
        }
    }
    out
}

/// Convolution backward: returns (dx, dw, db).
pub fn conv2d_backward<S: Scalar>(
    x: &Array4<S>,
    w: &ArrayView2<'_, S>,
    dout: &Array4<S>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array4<S>, Array2<S>, Array1<S>) {
    let (batch, c_in, h, win) = x.dim();
    let (_, c_out, oh, ow) = dout.dim();
    let mut dx = Array4::<S>::zeros((batch, c_in, h, win));
    let mut dw = Array2::<S>::zeros((c_out, c_in * k * k));
    let mut db = Array1::<S>::zeros(c_out);
    let mut cols = Array2::<S>::zeros((c_in * k * k, oh * ow));
    let mut dcols = Array2::<S>::zeros((c_in * k * k, oh * ow));
    for bi in 0..batch {
        let dout_img = dout.index_axis(ndarray::Axis(0), bi);
        let dout_mat =
            ArrayView2::from_shape((c_out, oh * ow), dout_img.as_slice().unwrap()).unwrap();
        // dW += dout * cols^T
        im2col(&x.index_axis(ndarray::Axis(0), bi), k, stride, pad, (oh, ow), &mut cols);
        general_mat_mul(S::one(), &dout_mat, &cols.t(), S::one(), &mut dw);
        // dcols = w^T * dout
        general_mat_mul(S::one(), &w.t(), &dout_mat, S::zero(), &mut dcols);
        col2im_add(&dcols, k, stride, pad, (oh, ow), &mut dx.index_axis_mut(ndarray::Axis(0), bi));
        // db
        for co in 0..c_out {
            db[co] += dout_mat.row(co).iter().copied().sum();
        }
    }
    (dx, dw, db)
}

/// Transposed convolution forward. `x`: (B, Cin, H, W); `w`: (Cin, Cout*K*K).
pub fn convt2d_forward<S: Scalar>(
    x: &Array4<S>,
    w: &ArrayView2<'_, S>,
    b: &[S],
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Array4<S> {
    let (batch, c_in, h, win) = x.dim();
    let c_out = w.ncols() / (k * k);
    let oh = super::convt_out(h, k, stride, pad, out_pad);
    let ow = super::convt_out(win, k, stride, pad, out_pad);
    let mut out = Array4::<S>::zeros((batch, c_out, oh, ow));
    let mut cols = Array2::<S>::zeros((c_out * k * k, h * win));
    for bi in 0..batch {
        let x_img = x.index_axis(ndarray::Axis(0), bi);
        let x_mat = ArrayView2::from_shape((c_in, h * win), x_img.as_slice().unwrap()).unwrap();
        // cols = w^T * x
        general_mat_mul(S::one(), &w.t(), &x_mat, S::zero(), &mut cols);
        let mut out_img = out.index_axis_mut(ndarray::Axis(0), bi);
        col2im_add(&cols, k, stride, pad, (h, win), &mut out_img);
        let out_sl = out_img.as_slice_mut().unwrap();
        for (co, bias) in b.iter().enumerate() {
            for v in &mut out_sl[co * oh * ow..(co + 1) * oh * ow] {
                *v += *bias;
            }
        }
    }
    out
}

/// Transposed convolution backward: returns (dx, dw, db).
pub fn convt2d_backward<S: Scalar>(
    x: &Array4<S>,
    w: &ArrayView2<'_, S>,
    dout: &Array4<S>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array4<S>, Array2<S>, Array1<S>) {
    let (batch, c_in, h, win) = x.dim();
    let (_, c_out, oh, ow) = dout.dim();
    let mut dx = Array4::<S>::zeros((batch, c_in, h, win));
    let mut dw = Array2::<S>::zeros((c_in, c_out * k * k));
    let mut db = Array1::<S>::zeros(c_out);
    let mut dcols = Array2::<S>::zeros((c_out * k * k, h * win));
    for bi in 0..batch {
        let dout_img = dout.index_axis(ndarray::Axis(0), bi);
        // gather dcols[(co,ky,kx),(iy,ix)] = dout[co, iy*s+ky-p, ix*s+kx-p]
        im2col(&dout_img, k, stride, pad, (h, win), &mut dcols);
        let x_img = x.index_axis(ndarray::Axis(0), bi);
        let x_mat = ArrayView2::from_shape((c_in, h * win), x_img.as_slice().unwrap()).unwrap();
        // dW += x * dcols^T
        general_mat_mul(S::one(), &x_mat, &dcols.t(), S::one(), &mut dw);
        // dx = w * dcols
        let mut dx_img = dx.index_axis_mut(ndarray::Axis(0), bi);
        let mut dx_mat =
            ArrayViewMut2::from_shape((c_in, h * win), dx_img.as_slice_mut().unwrap()).unwrap();
        general_mat_mul(S::one(), w, &dcols, S::zero(), &mut dx_mat);
        let dsl = dout_img.as_slice().unwrap();
        for co in 0..c_out {
            db[co] += dsl[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum();
        }
    }
    (dx, dw, db)
}

/// Instance normalization forward: per (sample, channel) statistics over the
/// spatial extent, then a learned affine. Returns (y, x_hat, inv_std).
pub fn instnorm_forward<S: Scalar>(
    x: &Array4<S>,
    gamma: &[S],
    beta: &[S],
    eps: f64,
) -> (Array4<S>, Array4<S>, Array2<S>) {
    let (batch, c, h, w) = x.dim();
    let n = s::<S>((h * w) as f64);
    let epsv = s::<S>(eps);
    let mut y = Array4::<S>::zeros((batch, c, h, w));
    let mut x_hat = Array4::<S>::zeros((batch, c, h, w));
    let mut inv_std = Array2::<S>::zeros((batch, c));
    let xs = x.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    let hs = x_hat.as_slice_mut().unwrap();
    for bi in 0..batch {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            let seg = &xs[base..base + h * w];
            let mean: S = seg.iter().copied().sum::<S>() / n;
            let var: S =
                seg.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / n;
            let istd = S::one() / (var + epsv).sqrt();
            inv_std[(bi, ci)] = istd;
            let g = gamma[ci];
            let b = beta[ci];
            for i in 0..h * w {
                let xh = (seg[i] - mean) * istd;
                hs[base + i] = xh;
                ys[base + i] = g * xh + b;
            }
        }
    }
    (y, x_hat, inv_std)
}

/// Instance normalization backward: returns (dx, dgamma, dbeta).
pub fn instnorm_backward<S: Scalar>(
    dout: &Array4<S>,
    x_hat: &Array4<S>,
    inv_std: &Array2<S>,
    gamma: &[S],
) -> (Array4<S>, Array1<S>, Array1<S>) {
    let (batch, c, h, w) = dout.dim();
    let n = s::<S>((h * w) as f64);
    let mut dx = Array4::<S>::zeros((batch, c, h, w));
    let mut dgamma = Array1::<S>::zeros(c);
    let mut dbeta = Array1::<S>::zeros(c);
    let ds = dout.as_slice().unwrap();
    let hs = x_hat.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    for bi in 0..batch {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            let dseg = &ds[base..base + h * w];
            let hseg = &hs[base..base + h * w];
            let g = gamma[ci];
            let istd = inv_std[(bi, ci)];
            let mut sum_d = S::zero();
            let mut sum_dh = S::zero();
            for i in 0..h * w {
                sum_d += dseg[i];
                sum_dh += dseg[i] * hseg[i];
            }
            dgamma[ci] += sum_dh;
            dbeta[ci] += sum_d;
            let m1 = sum_d / n;
            let m2 = sum_dh / n;
            let k = g * istd;
            for i in 0..h * w {
                dxs[base + i] = k * (dseg[i] - m1 - hseg[i] * m2);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Dense forward: y = x W^T + b. `x`: (B, Fin); `w`: (Fout, Fin).
pub fn dense_forward<S: Scalar>(x: &Array2<S>, w: &ArrayView2<'_, S>, b: &[S]) -> Array2<S> {
    let (batch, _) = x.dim();
    let out_f = w.nrows();
    let mut y = Array2::<S>::zeros((batch, out_f));
    general_mat_mul(S::one(), x, &w.t(), S::zero(), &mut y);
    for mut row in y.rows_mut() {
        for (v, bias) in row.iter_mut().zip(b) {
            *v += *bias;
        }
    }
    y
}

/// Dense backward: returns (dx, dw, db).
pub fn dense_backward<S: Scalar>(
    x: &Array2<S>,
    w: &ArrayView2<'_, S>,
    dout: &Array2<S>,
) -> (Array2<S>, Array2<S>, Array1<S>) {
    let (batch, in_f) = x.dim();
    let out_f = w.nrows();
    let mut dx = Array2::<S>::zeros((batch, in_f));
    let mut dw = Array2::<S>::zeros((out_f, in_f));
    general_mat_mul(S::one(), &dout.t(), x, S::zero(), &mut dw);
    general_mat_mul(S::one(), dout, w, S::zero(), &mut dx);
    let mut db = Array1::<S>::zeros(out_f);
    for row in dout.rows() {
        for (d, v) in db.iter_mut().zip(row) {
            *d += *v;
        }
    }
    (dx, dw, db)
}

/// Mean over channels and spatial positions: (B, C, H, W) -> (B, 1).
pub fn global_mean_forward<S: Scalar>(x: &Array4<S>) -> Array2<S> {
    let (batch, c, h, w) = x.dim();
    let n = s::<S>((c * h * w) as f64);
    let mut y = Array2::<S>::zeros((batch, 1));
    let xs = x.as_slice().unwrap();
    for bi in 0..batch {
        let seg = &xs[bi * c * h * w..(bi + 1) * c * h * w];
        y[(bi, 0)] = seg.iter().copied().sum::<S>() / n;
    }
    y
}

pub fn global_mean_backward<S: Scalar>(
    dout: &Array2<S>,
    dim: (usize, usize, usize, usize),
) -> Array4<S> {
    let (batch, c, h, w) = dim;
    let n = s::<S>((c * h * w) as f64);
    let mut dx = Array4::<S>::zeros(dim);
    let dxs = dx.as_slice_mut().unwrap();
    for bi in 0..batch {
        let g = dout[(bi, 0)] / n;
        for v in &mut dxs[bi * c * h * w..(bi + 1) * c * h * w] {
            *v = g;
        }
    }
    dx
}
