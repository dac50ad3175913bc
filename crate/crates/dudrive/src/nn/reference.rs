//! Straight-line reference interpreter for [`NetDef`]: plain nested loops,
//! no im2col, no GEMM, no buffer reuse. Deliberately independent of the fast
//! kernels in [`super::ops`] so the two paths can check each other. Used by
//! verification tests only; far too slow for training.

use crate::error::Result;
use crate::num::{s, Scalar};
use ndarray::{Array1, Array2, Array4};

use super::{Act, DenseDef, LayerDef, NetDef, NormDef};

/// Forward pass by direct evaluation.
pub fn forward<S: Scalar>(def: &NetDef, params: &[S], x: &Array4<S>) -> Result<Act<S>> {
    let mut act = Act::Map(x.clone());
    for layer in &def.layers {
        act = forward_layer(layer, params, &act)?;
    }
    Ok(act)
}

/// Backward pass by direct evaluation. Returns (dx, dparams).
pub fn backward<S: Scalar>(
    def: &NetDef,
    params: &[S],
    x: &Array4<S>,
    dout: &Act<S>,
) -> Result<(Array4<S>, Vec<S>)> {
    let mut dparams = vec![S::zero(); def.layout.total];
    let dx = backward_layers(&def.layers, params, &Act::Map(x.clone()), dout, &mut dparams)?;
    Ok((dx.map()?, dparams))
}

fn forward_layer<S: Scalar>(layer: &LayerDef, params: &[S], act: &Act<S>) -> Result<Act<S>> {
    Ok(match layer {
        LayerDef::Conv(d) => {
            let x = act.clone().map()?;
            let (batch, _, _, _) = x.dim();
            let (oh, ow) = d.out_hw;
            let w = &params[d.w.offset..d.w.offset + d.w.len];
            let b = &params[d.b.offset..d.b.offset + d.b.len];
            let mut y = Array4::<S>::zeros((batch, d.out_c, oh, ow));
            for bi in 0..batch {
                for co in 0..d.out_c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b[co];
                            for ci in 0..d.in_c {
                                for ky in 0..d.k {
                                    for kx in 0..d.k {
                                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                        if iy < 0
                                            || ix < 0
                                            || iy >= d.in_hw.0 as isize
                                            || ix >= d.in_hw.1 as isize
                                        {
                                            continue;
                                        }
                                        let wv = w[((co * d.in_c + ci) * d.k + ky) * d.k + kx];
                                        acc += wv * x[(bi, ci, iy as usize, ix as usize)];
                                    }
                                }
                            }
                            y[(bi, co, oy, ox)] = acc;
                        }
                    }
                }
            }
            Act::Map(y)
        }
        LayerDef::ConvT(d) => {
            let x = act.clone().map()?;
            let (batch, _, h, wid) = x.dim();
            let (oh, ow) = d.out_hw;
            let w = &params[d.w.offset..d.w.offset + d.w.len];
            let b = &params[d.b.offset..d.b.offset + d.b.len];
            let mut y = Array4::<S>::zeros((batch, d.out_c, oh, ow));
            for bi in 0..batch {
                for co in 0..d.out_c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            y[(bi, co, oy, ox)] = b[co];
                        }
                    }
                }
                for ci in 0..d.in_c {
                    for iy in 0..h {
                        for ix in 0..wid {
                            let xv = x[(bi, ci, iy, ix)];
                            for co in 0..d.out_c {
                                for ky in 0..d.k {
                                    for kx in 0..d.k {
                                        let oy = (iy * d.stride + ky) as isize - d.pad as isize;
                                        let ox = (ix * d.stride + kx) as isize - d.pad as isize;
                                        if oy < 0
                                            || ox < 0
                                            || oy >= oh as isize
                                            || ox >= ow as isize
                                        {
                                            continue;
                                        }
                                        let wv = w[((ci * d.out_c + co) * d.k + ky) * d.k + kx];
                                        y[(bi, co, oy as usize, ox as usize)] += wv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Act::Map(y)
        }
        LayerDef::InstanceNorm(d) => Act::Map(instnorm_naive(d, params, &act.clone().map()?)),
        LayerDef::Relu => unary(act, |v| if v > S::zero() { v } else { S::zero() }),
        LayerDef::LeakyRelu(a) => {
            let a = s::<S>(*a);
            unary(act, move |v| if v > S::zero() { v } else { a * v })
        }
        LayerDef::Tanh => unary(act, |v| v.tanh()),
        LayerDef::Flatten => {
            let x = act.clone().map()?;
            let (batch, c, h, w) = x.dim();
            let mut y = Array2::<S>::zeros((batch, c * h * w));
            for bi in 0..batch {
                let mut i = 0;
                for ci in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            y[(bi, i)] = x[(bi, ci, yy, xx)];
                            i += 1;
                        }
                    }
                }
            }
            Act::Flat(y)
        }
        LayerDef::Dense(d) => {
            let x = act.clone().flat()?;
            let w = &params[d.w.offset..d.w.offset + d.w.len];
            let b = &params[d.b.offset..d.b.offset + d.b.len];
            let batch = x.nrows();
            let mut y = Array2::<S>::zeros((batch, d.out_f));
            for bi in 0..batch {
                for o in 0..d.out_f {
                    let mut acc = b[o];
                    for i in 0..d.in_f {
                        acc += w[o * d.in_f + i] * x[(bi, i)];
                    }
                    y[(bi, o)] = acc;
                }
            }
            Act::Flat(y)
        }
        LayerDef::GlobalMean => {
            let x = act.clone().map()?;
            let (batch, c, h, w) = x.dim();
            let mut y = Array2::<S>::zeros((batch, 1));
            for bi in 0..batch {
                let mut acc = S::zero();
                for ci in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            acc += x[(bi, ci, yy, xx)];
                        }
                    }
                }
                y[(bi, 0)] = acc / s::<S>((c * h * w) as f64);
            }
            Act::Flat(y)
        }
        LayerDef::Residual(body) => {
            let x = act.clone().map()?;
            let mut cur = Act::Map(x.clone());
            for l in body {
                cur = forward_layer(l, params, &cur)?;
            }
            Act::Map(cur.map()? + &x)
        }
    })
}

fn backward_layers<S: Scalar>(
    layers: &[LayerDef],
    params: &[S],
    input: &Act<S>,
    dout: &Act<S>,
    dparams: &mut [S],
) -> Result<Act<S>> {
    // Recompute the chain of inputs, then walk backwards.
    let mut acts = vec![input.clone()];
    for layer in layers {
        let next = forward_layer(layer, params, acts.last().unwrap())?;
        acts.push(next);
    }
    let mut grad = dout.clone();
    for (i, layer) in layers.iter().enumerate().rev() {
        grad = backward_layer(layer, params, &acts[i], &grad, dparams)?;
    }
    Ok(grad)
}

fn backward_layer<S: Scalar>(
    layer: &LayerDef,
    params: &[S],
    input: &Act<S>,
    dout: &Act<S>,
    dparams: &mut [S],
) -> Result<Act<S>> {
    Ok(match layer {
        LayerDef::Conv(d) => {
            let x = input.clone().map()?;
            let dy = dout.clone().map()?;
            let (batch, _, h, wid) = x.dim();
            let (oh, ow) = d.out_hw;
            let w = &params[d.w.offset..d.w.offset + d.w.len];
            let mut dx = Array4::<S>::zeros(x.dim());
            for bi in 0..batch {
                for co in 0..d.out_c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dy[(bi, co, oy, ox)];
                            dparams[d.b.offset + co] += g;
                            for ci in 0..d.in_c {
                                for ky in 0..d.k {
                                    for kx in 0..d.k {
                                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                        if iy < 0
                                            || ix < 0
                                            || iy >= h as isize
                                            || ix >= wid as isize
                                        {
                                            continue;
                                        }
                                        let widx = ((co * d.in_c + ci) * d.k + ky) * d.k + kx;
                                        dparams[d.w.offset + widx] +=
                                            g * x[(bi, ci, iy as usize, ix as usize)];
                                        dx[(bi, ci, iy as usize, ix as usize)] += g * w[widx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Act::Map(dx)
        }
        LayerDef::ConvT(d) => {
            let x = input.clone().map()?;
            let dy = dout.clone().map()?;
            let (batch, _, h, wid) = x.dim();
            let (oh, ow) = d.out_hw;
            let w = &params[d.w.offset..d.w.offset + d.w.len];
            let mut dx = Array4::<S>::zeros(x.dim());
            for bi in 0..batch {
                for co in 0..d.out_c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dparams[d.b.offset + co] += dy[(bi, co, oy, ox)];
                        }
                    }
                }
                for ci in 0..d.in_c {
                    for iy in 0..h {
                        for ix in 0..wid {
                            let xv = x[(bi, ci, iy, ix)];
                            let mut acc = S::zero();
                            for co in 0..d.out_c {
                                for ky in 0..d.k {
                                    for kx in 0..d.k {
                                        let oy = (iy * d.stride + ky) as isize - d.pad as isize;
                                        let ox = (ix * d.stride + kx) as isize - d.pad as isize;
                                        if oy < 0
                                            || ox < 0
                                            || oy >= oh as isize
                                            || ox >= ow as isize
                                        {
                                            continue;
                                        }
                                        let widx = ((ci * d.out_c + co) * d.k + ky) * d.k + kx;
                                        let g = dy[(bi, co, oy as usize, ox as usize)];
                                        dparams[d.w.offset + widx] += g * xv;
                                        acc += g * w[widx];
                                    }
                                }
                            }
                            dx[(bi, ci, iy, ix)] += acc;
                        }
                    }
                }
            }
            Act::Map(dx)
        }
        LayerDef::InstanceNorm(d) => {
            let x = input.clone().map()?;
            let dy = dout.clone().map()?;
            let (batch, c, h, w) = x.dim();
            let n = s::<S>((h * w) as f64);
            let gamma = &params[d.gamma.offset..d.gamma.offset + d.gamma.len];
            let mut dx = Array4::<S>::zeros(x.dim());
            for bi in 0..batch {
                for ci in 0..c {
                    let mut mean = S::zero();
                    for yy in 0..h {
                        for xx in 0..w {
                            mean += x[(bi, ci, yy, xx)];
                        }
                    }
                    mean = mean / n;
                    let mut var = S::zero();
                    for yy in 0..h {
                        for xx in 0..w {
                            let dv = x[(bi, ci, yy, xx)] - mean;
                            var += dv * dv;
                        }
                    }
                    var = var / n;
                    let istd = S::one() / (var + s::<S>(d.eps)).sqrt();
                    let mut sum_d = S::zero();
                    let mut sum_dh = S::zero();
                    for yy in 0..h {
                        for xx in 0..w {
                            let xh = (x[(bi, ci, yy, xx)] - mean) * istd;
                            let g = dy[(bi, ci, yy, xx)];
                            sum_d += g;
                            sum_dh += g * xh;
                        }
                    }
                    dparams[d.gamma.offset + ci] += sum_dh;
                    dparams[d.beta.offset + ci] += sum_d;
                    let m1 = sum_d / n;
                    let m2 = sum_dh / n;
                    for yy in 0..h {
                        for xx in 0..w {
                            let xh = (x[(bi, ci, yy, xx)] - mean) * istd;
                            dx[(bi, ci, yy, xx)] =
                                gamma[ci] * istd * (dy[(bi, ci, yy, xx)] - m1 - xh * m2);
                        }
                    }
                }
            }
            Act::Map(dx)
        }
        LayerDef::Relu => mask(input, dout, |v| if v > S::zero() { S::one() } else { S::zero() }),
        LayerDef::LeakyRelu(a) => {
            let a = s::<S>(*a);
            mask(input, dout, move |v| if v > S::zero() { S::one() } else { a })
        }
        LayerDef::Tanh => {
            let d = |v: S| {
                let t = v.tanh();
                S::one() - t * t
            };
            mask(input, dout, d)
        }
        LayerDef::Flatten => {
            let x = input.clone().map()?;
            let dy = dout.clone().flat()?;
            let (batch, c, h, w) = x.dim();
            let mut dx = Array4::<S>::zeros(x.dim());
            for bi in 0..batch {
                let mut i = 0;
                for ci in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            dx[(bi, ci, yy, xx)] = dy[(bi, i)];
                            i += 1;
                        }
                    }
                }
            }
            Act::Map(dx)
        }
        LayerDef::Dense(DenseDef { in_f, out_f, w, b }) => {
            let x = input.clone().flat()?;
            let dy = dout.clone().flat()?;
            let wv = &params[w.offset..w.offset + w.len];
            let batch = x.nrows();
            let mut dx = Array2::<S>::zeros((batch, *in_f));
            for bi in 0..batch {
                for o in 0..*out_f {
                    let g = dy[(bi, o)];
                    dparams[b.offset + o] += g;
                    for i in 0..*in_f {
                        dparams[w.offset + o * in_f + i] += g * x[(bi, i)];
                        dx[(bi, i)] += g * wv[o * in_f + i];
                    }
                }
            }
            Act::Flat(dx)
        }
        LayerDef::GlobalMean => {
            let x = input.clone().map()?;
            let dy = dout.clone().flat()?;
            let (batch, c, h, w) = x.dim();
            let n = s::<S>((c * h * w) as f64);
            let mut dx = Array4::<S>::zeros(x.dim());
            for bi in 0..batch {
                for ci in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            dx[(bi, ci, yy, xx)] = dy[(bi, 0)] / n;
                        }
                    }
                }
            }
            Act::Map(dx)
        }
        LayerDef::Residual(body) => {
            let dy = dout.clone().map()?;
            let dbody =
                backward_layers(body, params, input, &Act::Map(dy.clone()), dparams)?.map()?;
            Act::Map(dbody + &dy)
        }
    })
}

fn instnorm_naive<S: Scalar>(d: &NormDef, params: &[S], x: &Array4<S>) -> Array4<S> {
    let (batch, c, h, w) = x.dim();
    let n = s::<S>((h * w) as f64);
    let gamma = &params[d.gamma.offset..d.gamma.offset + d.gamma.len];
    let beta = &params[d.beta.offset..d.beta.offset + d.beta.len];
    let mut y = Array4::<S>::zeros(x.dim());
    for bi in 0..batch {
        for ci in 0..c {
            let mut mean = S::zero();
            for yy in 0..h {
                for xx in 0..w {
                    mean += x[(bi, ci, yy, xx)];
                }
            }
            mean = mean / n;
            let mut var = S::zero();
            for yy in 0..h {
                for xx in 0..w {
                    let dv = x[(bi, ci, yy, xx)] - mean;
                    var += dv * dv;
                }
            }
            var = var / n;
            let istd = S::one() / (var + s::<S>(d.eps)).sqrt();
            for yy in 0..h {
                for xx in 0..w {
                    let xh = (x[(bi, ci, yy, xx)] - mean) * istd;
                    y[(bi, ci, yy, xx)] = gamma[ci] * xh + beta[ci];
                }
            }
        }
    }
    y
}

fn unary<S: Scalar>(act: &Act<S>, f: impl Fn(S) -> S) -> Act<S> {
    match act {
        Act::Map(a) => Act::Map(a.mapv(f)),
        Act::Flat(a) => Act::Flat(a.mapv(f)),
    }
}

fn mask<S: Scalar>(input: &Act<S>, dout: &Act<S>, dfn: impl Fn(S) -> S) -> Act<S> {
    match (input, dout) {
        (Act::Map(x), Act::Map(d)) => {
            let mut out = d.clone();
            ndarray::Zip::from(&mut out).and(x).for_each(|o, xv| *o = *o * dfn(*xv));
            Act::Map(out)
        }
        (Act::Flat(x), Act::Flat(d)) => {
            let mut out = d.clone();
            ndarray::Zip::from(&mut out).and(x).for_each(|o, xv| *o = *o * dfn(*xv));
            Act::Flat(out)
        }
        _ => unreachable!("matching activation kinds"),
    }
}

/// Reference scalar Adam update, bias-corrected, one parameter at a time.
pub fn adam_update_scalar(
    w: f64,
    g: f64,
    m: f64,
    v: f64,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> (f64, f64, f64) {
    let m_new = beta1 * m + (1.0 - beta1) * g;
    let v_new = beta2 * v + (1.0 - beta2) * g * g;
    let m_hat = m_new / (1.0 - beta1.powi(t as i32));
    let v_hat = v_new / (1.0 - beta2.powi(t as i32));
    let w_new = w - lr * m_hat / (v_hat.sqrt() + eps);
    (w_new, m_new, v_new)
}

/// Mean absolute error of a batch under the reference forward pass, in the
/// predictor's output units.
pub fn predictor_mae<S: Scalar>(
    def: &NetDef,
    params: &[S],
    x: &Array4<S>,
    targets: &Array1<S>,
) -> Result<f64> {
    let pred = forward(def, params, x)?.scalars()?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(targets)
        .map(|(p, t)| (*p - *t).abs().to_f64().unwrap())
        .sum::<f64>()
        / n)
}
