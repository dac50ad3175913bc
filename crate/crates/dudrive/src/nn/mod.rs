//! Minimal differentiable layer stack used by the three networks.
//!
//! Parameters live in one flat vector per network, described by a
//! [`ParamLayout`] (name, shape, offset). Layers reference their slices by
//! offset, which keeps optimizer steps, checkpointing and finite-difference
//! probing trivial. Forward passes are pure functions of (params, input);
//! `forward_cached` additionally records a tape for the backward pass.

pub mod gradcheck;
pub mod ops;
pub mod reference;

use crate::error::{Error, Result};
use crate::num::Scalar;
use ndarray::{Array1, Array2, Array4, ArrayView2};

/// Location of one named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat-parameter manifest for one network.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Slice range of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

impl ParamRef {
    fn slice<'a, S>(&self, params: &'a [S]) -> &'a [S] {
        &params[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvDef {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub w: ParamRef,
    pub b: ParamRef,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvTDef {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub w: ParamRef,
    pub b: ParamRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormDef {
    pub channels: usize,
    pub eps: f64,
    pub gamma: ParamRef,
    pub beta: ParamRef,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseDef {
    pub in_f: usize,
    pub out_f: usize,
    pub w: ParamRef,
    pub b: ParamRef,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerDef {
    Conv(ConvDef),
    ConvT(ConvTDef),
    InstanceNorm(NormDef),
    Relu,
    LeakyRelu(f64),
    Tanh,
    Flatten,
    Dense(DenseDef),
    /// Mean over all channels and spatial positions, yielding one scalar
    /// per sample.
    GlobalMean,
    Residual(Vec<LayerDef>),
}

/// Activation flowing between layers: a feature map or a flat feature vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Act<S> {
    Map(Array4<S>),
    Flat(Array2<S>),
}

impl<S: Scalar> Act<S> {
    pub fn map(self) -> Result<Array4<S>> {
        match self {
            Act::Map(a) => Ok(a),
            Act::Flat(_) => Err(Error::Dimension("expected a feature map".into())),
        }
    }

    pub fn flat(self) -> Result<Array2<S>> {
        match self {
            Act::Flat(a) => Ok(a),
            Act::Map(_) => Err(Error::Dimension("expected a flat activation".into())),
        }
    }

    /// Interpret a (B, 1) activation as one scalar per sample.
    pub fn scalars(self) -> Result<Array1<S>> {
        let a = self.flat()?;
        if a.ncols() != 1 {
            return Err(Error::Dimension(format!(
                "expected single-column output, got {} columns",
                a.ncols()
            )));
        }
        Ok(a.column(0).to_owned())
    }

    pub fn batch_len(&self) -> usize {
        match self {
            Act::Map(a) => a.dim().0,
            Act::Flat(a) => a.nrows(),
        }
    }
}

/// Per-layer values recorded during `forward_cached`.
pub enum LayerCache<S> {
    Conv { x: Array4<S> },
    ConvT { x: Array4<S> },
    /// Normalized (pre-affine) activations and per-(sample, channel)
    /// 1/sqrt(var + eps).
    InstanceNorm { x_hat: Array4<S>, inv_std: Array2<S> },
    /// Output of an activation layer (enough to recover its derivative).
    Activation { y: Act<S> },
    Flatten { dim: (usize, usize, usize, usize) },
    Dense { x: Array2<S> },
    GlobalMean { dim: (usize, usize, usize, usize) },
    Residual { inner: Vec<LayerCache<S>> },
}

/// Backward tape for one forward pass.
pub struct Tape<S> {
    caches: Vec<LayerCache<S>>,
}

/// A network architecture: ordered layers plus the parameter layout they
/// reference and the expected input shape (C, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct NetDef {
    pub layers: Vec<LayerDef>,
    pub layout: ParamLayout,
    pub input: (usize, usize, usize),
    pub output: OutputKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    Map((usize, usize, usize)),
    Flat(usize),
}

impl NetDef {
    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    fn check_input<S: Scalar>(&self, x: &Array4<S>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != self.input {
            return Err(Error::Dimension(format!(
                "network expects input {:?}, got ({c}, {h}, {w})",
                self.input
            )));
        }
        Ok(())
    }

    fn check_params<S: Scalar>(&self, params: &[S]) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::Dimension(format!(
                "network has {} parameters, got {}",
                self.layout.total,
                params.len()
            )));
        }
        Ok(())
    }

    /// Forward pass without recording a tape.
    pub fn forward<S: Scalar>(&self, params: &[S], x: &Array4<S>) -> Result<Act<S>> {
        self.check_input(x)?;
        self.check_params(params)?;
        let mut act = Act::Map(x.clone());
        for layer in &self.layers {
            act = forward_layer(layer, params, act, None)?;
        }
        Ok(act)
    }

    /// Forward pass recording the tape needed for `backward`.
    pub fn forward_cached<S: Scalar>(
        &self,
        params: &[S],
        x: &Array4<S>,
    ) -> Result<(Act<S>, Tape<S>)> {
        self.check_input(x)?;
        self.check_params(params)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = Act::Map(x.clone());
        for layer in &self.layers {
            act = forward_layer(layer, params, act, Some(&mut caches))?;
        }
        Ok((act, Tape { caches }))
    }

    /// Backward pass. Returns the gradient with respect to the network input
    /// and the flat parameter gradient.
    pub fn backward<S: Scalar>(
        &self,
        params: &[S],
        tape: &Tape<S>,
        dout: Act<S>,
    ) -> Result<(Array4<S>, Vec<S>)> {
        self.check_params(params)?;
        let mut dparams = vec![S::zero(); self.layout.total];
        let dx = backward_layers(&self.layers, params, &tape.caches, dout, &mut dparams)?;
        Ok((dx.map()?, dparams))
    }
}

fn forward_layer<S: Scalar>(
    layer: &LayerDef,
    params: &[S],
    act: Act<S>,
    caches: Option<&mut Vec<LayerCache<S>>>,
) -> Result<Act<S>> {
    match layer {
        LayerDef::Conv(def) => {
            let x = act.map()?;
            check_map_shape(&x, def.in_c, def.in_hw, "conv")?;
            let w = view2(def.w.slice(params), def.out_c, def.in_c * def.k * def.k);
            let y = ops::conv2d_forward(&x, &w, def.b.slice(params), def.k, def.stride, def.pad);
            if let Some(c) = caches {
                c.push(LayerCache::Conv { x });
            }
            Ok(Act::Map(y))
        }
        LayerDef::ConvT(def) => {
            let x = act.map()?;
            check_map_shape(&x, def.in_c, def.in_hw, "conv_transpose")?;
            let w = view2(def.w.slice(params), def.in_c, def.out_c * def.k * def.k);
            let y = ops::convt2d_forward(
                &x,
                &w,
                def.b.slice(params),
                def.k,
                def.stride,
                def.pad,
                def.out_pad,
            );
            if let Some(c) = caches {
                c.push(LayerCache::ConvT { x });
            }
            Ok(Act::Map(y))
        }
        LayerDef::InstanceNorm(def) => {
            let x = act.map()?;
            let (y, x_hat, inv_std) = ops::instnorm_forward(
                &x,
                def.gamma.slice(params),
                def.beta.slice(params),
                def.eps,
            );
            if let Some(c) = caches {
                c.push(LayerCache::InstanceNorm { x_hat, inv_std });
            }
            Ok(Act::Map(y))
        }
        LayerDef::Relu => {
            let y = apply_unary(act, |v| if v > S::zero() { v } else { S::zero() });
            if let Some(c) = caches {
                c.push(LayerCache::Activation { y: y.clone() });
            }
            Ok(y)
        }
        LayerDef::LeakyRelu(slope) => {
            let a = crate::num::s::<S>(*slope);
            let y = apply_unary(act, |v| if v > S::zero() { v } else { a * v });
            if let Some(c) = caches {
                c.push(LayerCache::Activation { y: y.clone() });
            }
            Ok(y)
        }
        LayerDef::Tanh => {
            let y = apply_unary(act, |v| v.tanh());
            if let Some(c) = caches {
                c.push(LayerCache::Activation { y: y.clone() });
            }
            Ok(y)
        }
        LayerDef::Flatten => {
            let x = act.map()?;
            let dim = x.dim();
            let (b, c, h, w) = dim;
            let (vec, _) = x.into_raw_vec_and_offset();
            let flat = Array2::from_shape_vec((b, c * h * w), vec)
                .map_err(|e| Error::Dimension(e.to_string()))?;
            if let Some(cc) = caches {
                cc.push(LayerCache::Flatten { dim });
            }
            Ok(Act::Flat(flat))
        }
        LayerDef::Dense(def) => {
            let x = act.flat()?;
            if x.ncols() != def.in_f {
                return Err(Error::Dimension(format!(
                    "dense expects {} features, got {}",
                    def.in_f,
                    x.ncols()
                )));
            }
            let w = view2(def.w.slice(params), def.out_f, def.in_f);
            let y = ops::dense_forward(&x, &w, def.b.slice(params));
            if let Some(c) = caches {
                c.push(LayerCache::Dense { x });
            }
            Ok(Act::Flat(y))
        }
        LayerDef::GlobalMean => {
            let x = act.map()?;
            let dim = x.dim();
            let y = ops::global_mean_forward(&x);
            if let Some(c) = caches {
                c.push(LayerCache::GlobalMean { dim });
            }
            Ok(Act::Flat(y))
        }
        LayerDef::Residual(body) => {
            let x = act.map()?;
            let mut inner_caches = Vec::with_capacity(body.len());
            let mut cur = Act::Map(x.clone());
            let record = caches.is_some();
            for l in body {
                cur = forward_layer(l, params, cur, if record { Some(&mut inner_caches) } else { None })?;
            }
            let mut y = cur.map()?;
            if y.dim() != x.dim() {
                return Err(Error::Dimension("residual body must preserve shape".into()));
            }
            y += &x;
            if let Some(c) = caches {
                c.push(LayerCache::Residual { inner: inner_caches });
            }
            Ok(Act::Map(y))
        }
    }
}

fn backward_layers<S: Scalar>(
    layers: &[LayerDef],
    params: &[S],
    caches: &[LayerCache<S>],
    dout: Act<S>,
    dparams: &mut [S],
) -> Result<Act<S>> {
    debug_assert_eq!(layers.len(), caches.len());
    let mut grad = dout;
    for (layer, cache) in layers.iter().zip(caches.iter()).rev() {
        grad = backward_layer(layer, params, cache, grad, dparams)?;
    }
    Ok(grad)
}

fn backward_layer<S: Scalar>(
    layer: &LayerDef,
    params: &[S],
    cache: &LayerCache<S>,
    dout: Act<S>,
    dparams: &mut [S],
) -> Result<Act<S>> {
    match (layer, cache) {
        (LayerDef::Conv(def), LayerCache::Conv { x }) => {
            let dy = dout.map()?;
            let w = view2(def.w.slice(params), def.out_c, def.in_c * def.k * def.k);
            let (dx, dw, db) = ops::conv2d_backward(x, &w, &dy, def.k, def.stride, def.pad);
            accumulate(dparams, def.w, dw.as_slice().unwrap());
            accumulate(dparams, def.b, db.as_slice().unwrap());
            Ok(Act::Map(dx))
        }
        (LayerDef::ConvT(def), LayerCache::ConvT { x }) => {
            let dy = dout.map()?;
            let w = view2(def.w.slice(params), def.in_c, def.out_c * def.k * def.k);
            let (dx, dw, db) =
                ops::convt2d_backward(x, &w, &dy, def.k, def.stride, def.pad);
            accumulate(dparams, def.w, dw.as_slice().unwrap());
            accumulate(dparams, def.b, db.as_slice().unwrap());
            Ok(Act::Map(dx))
        }
        (LayerDef::InstanceNorm(def), LayerCache::InstanceNorm { x_hat, inv_std }) => {
            let dy = dout.map()?;
            let (dx, dgamma, dbeta) =
                ops::instnorm_backward(&dy, x_hat, inv_std, def.gamma.slice(params));
            accumulate(dparams, def.gamma, dgamma.as_slice().unwrap());
            accumulate(dparams, def.beta, dbeta.as_slice().unwrap());
            Ok(Act::Map(dx))
        }
        (LayerDef::Relu, LayerCache::Activation { y }) => {
            Ok(mask_grad(dout, y, |v| if v > S::zero() { S::one() } else { S::zero() }))
        }
        (LayerDef::LeakyRelu(slope), LayerCache::Activation { y }) => {
            let a = crate::num::s::<S>(*slope);
            // leaky relu preserves sign, so the output sign recovers the branch
            Ok(mask_grad(dout, y, move |v| if v > S::zero() { S::one() } else { a }))
        }
        (LayerDef::Tanh, LayerCache::Activation { y }) => {
            Ok(mask_grad(dout, y, |v| S::one() - v * v))
        }
        (LayerDef::Flatten, LayerCache::Flatten { dim }) => {
            let dy = dout.flat()?;
            let (vec, _) = dy.into_raw_vec_and_offset();
            let dx = Array4::from_shape_vec(*dim, vec)
                .map_err(|e| Error::Dimension(e.to_string()))?;
            Ok(Act::Map(dx))
        }
        (LayerDef::Dense(def), LayerCache::Dense { x }) => {
            let dy = dout.flat()?;
            let w = view2(def.w.slice(params), def.out_f, def.in_f);
            let (dx, dw, db) = ops::dense_backward(x, &w, &dy);
            accumulate(dparams, def.w, dw.as_slice().unwrap());
            accumulate(dparams, def.b, db.as_slice().unwrap());
            Ok(Act::Flat(dx))
        }
        (LayerDef::GlobalMean, LayerCache::GlobalMean { dim }) => {
            let dy = dout.flat()?;
            Ok(Act::Map(ops::global_mean_backward(&dy, *dim)))
        }
        (LayerDef::Residual(body), LayerCache::Residual { inner }) => {
            let dy = dout.map()?;
            let dx_body =
                backward_layers(body, params, inner, Act::Map(dy.clone()), dparams)?.map()?;
            Ok(Act::Map(dx_body + &dy))
        }
        _ => Err(Error::Dimension("tape does not match architecture".into())),
    }
}

fn check_map_shape<S: Scalar>(
    x: &Array4<S>,
    channels: usize,
    hw: (usize, usize),
    what: &str,
) -> Result<()> {
    let (_, c, h, w) = x.dim();
    if c != channels || (h, w) != hw {
        return Err(Error::Dimension(format!(
            "{what} expects ({channels}, {:?}), got ({c}, ({h}, {w}))",
            hw
        )));
    }
    Ok(())
}

fn view2<S: Scalar>(slice: &[S], rows: usize, cols: usize) -> ArrayView2<'_, S> {
    ArrayView2::from_shape((rows, cols), slice).expect("parameter slice length")
}

fn accumulate<S: Scalar>(dparams: &mut [S], at: ParamRef, grad: &[S]) {
    let dst = &mut dparams[at.offset..at.offset + at.len];
    for (d, g) in dst.iter_mut().zip(grad) {
        *d += *g;
    }
}

fn apply_unary<S: Scalar>(act: Act<S>, f: impl Fn(S) -> S) -> Act<S> {
    match act {
        Act::Map(mut a) => {
            a.mapv_inplace(f);
            Act::Map(a)
        }
        Act::Flat(mut a) => {
            a.mapv_inplace(f);
            Act::Flat(a)
        }
    }
}

fn mask_grad<S: Scalar>(dout: Act<S>, y: &Act<S>, dfn: impl Fn(S) -> S) -> Act<S> {
    match (dout, y) {
        (Act::Map(mut d), Act::Map(y)) => {
            ndarray::Zip::from(&mut d).and(y).for_each(|dv, yv| *dv = *dv * dfn(*yv));
            Act::Map(d)
        }
        (Act::Flat(mut d), Act::Flat(y)) => {
            ndarray::Zip::from(&mut d).and(y).for_each(|dv, yv| *dv = *dv * dfn(*yv));
            Act::Flat(d)
        }
        _ => unreachable!("activation cache kind matches activation"),
    }
}

/// Incremental builder for a [`NetDef`]; tracks activation shape and assigns
/// parameter offsets.
pub struct NetBuilder {
    layers: Vec<LayerDef>,
    entries: Vec<ParamEntry>,
    offset: usize,
    input: (usize, usize, usize),
    cur: Shape,
    prefix: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Map(usize, usize, usize),
    Flat(usize),
}

impl NetBuilder {
    pub fn new(input: (usize, usize, usize)) -> Self {
        NetBuilder {
            layers: Vec::new(),
            entries: Vec::new(),
            offset: 0,
            input,
            cur: Shape::Map(input.0, input.1, input.2),
            prefix: String::new(),
        }
    }

    fn add_param(&mut self, name: &str, shape: Vec<usize>) -> ParamRef {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let len: usize = shape.iter().product();
        let r = ParamRef { offset: self.offset, len };
        self.entries.push(ParamEntry { name: full, shape, offset: self.offset });
        self.offset += len;
        r
    }

    fn map_shape(&self, what: &str) -> (usize, usize, usize) {
        match self.cur {
            Shape::Map(c, h, w) => (c, h, w),
            Shape::Flat(_) => panic!("{what} requires a feature map input"),
        }
    }

    pub fn conv(mut self, name: &str, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let (in_c, h, w) = self.map_shape("conv");
        let oh = conv_out(h, k, stride, pad);
        let ow = conv_out(w, k, stride, pad);
        assert!(oh > 0 && ow > 0, "conv {name} collapses spatial dims: {h}x{w} -> {oh}x{ow}");
        let wref = self.add_param(&format!("{name}.weight"), vec![out_c, in_c, k, k]);
        let bref = self.add_param(&format!("{name}.bias"), vec![out_c]);
        self.layers.push(LayerDef::Conv(ConvDef {
            in_c,
            out_c,
            k,
            stride,
            pad,
            in_hw: (h, w),
            out_hw: (oh, ow),
            w: wref,
            b: bref,
        }));
        self.cur = Shape::Map(out_c, oh, ow);
        self
    }

    pub fn conv_transpose(
        mut self,
        name: &str,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self {
        let (in_c, h, w) = self.map_shape("conv_transpose");
        let oh = convt_out(h, k, stride, pad, out_pad);
        let ow = convt_out(w, k, stride, pad, out_pad);
        let wref = self.add_param(&format!("{name}.weight"), vec![in_c, out_c, k, k]);
        let bref = self.add_param(&format!("{name}.bias"), vec![out_c]);
        self.layers.push(LayerDef::ConvT(ConvTDef {
            in_c,
            out_c,
            k,
            stride,
            pad,
            out_pad,
            in_hw: (h, w),
            out_hw: (oh, ow),
            w: wref,
            b: bref,
        }));
        self.cur = Shape::Map(out_c, oh, ow);
        self
    }

    pub fn instance_norm(mut self, name: &str) -> Self {
        let (c, _, _) = self.map_shape("instance_norm");
        let gamma = self.add_param(&format!("{name}.gamma"), vec![c]);
        let beta = self.add_param(&format!("{name}.beta"), vec![c]);
        self.layers.push(LayerDef::InstanceNorm(NormDef {
            channels: c,
            eps: ops::INSTANCE_NORM_EPS,
            gamma,
            beta,
        }));
        self
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(LayerDef::Relu);
        self
    }

    pub fn leaky_relu(mut self, slope: f64) -> Self {
        self.layers.push(LayerDef::LeakyRelu(slope));
        self
    }

    pub fn tanh(mut self) -> Self {
        self.layers.push(LayerDef::Tanh);
        self
    }

    pub fn flatten(mut self) -> Self {
        let (c, h, w) = self.map_shape("flatten");
        self.layers.push(LayerDef::Flatten);
        self.cur = Shape::Flat(c * h * w);
        self
    }

    pub fn dense(mut self, name: &str, out_f: usize) -> Self {
        let in_f = match self.cur {
            Shape::Flat(f) => f,
            Shape::Map(..) => panic!("dense requires a flat input"),
        };
        let wref = self.add_param(&format!("{name}.weight"), vec![out_f, in_f]);
        let bref = self.add_param(&format!("{name}.bias"), vec![out_f]);
        self.layers.push(LayerDef::Dense(DenseDef { in_f, out_f, w: wref, b: bref }));
        self.cur = Shape::Flat(out_f);
        self
    }

    pub fn global_mean(mut self) -> Self {
        let _ = self.map_shape("global_mean");
        self.layers.push(LayerDef::GlobalMean);
        self.cur = Shape::Flat(1);
        self
    }

    /// Append a residual block; the body is built by `f` and must preserve
    /// the activation shape.
    pub fn residual(mut self, name: &str, f: impl FnOnce(NetBuilder) -> NetBuilder) -> Self {
        let shape = self.map_shape("residual");
        let mut inner = NetBuilder {
            layers: Vec::new(),
            entries: std::mem::take(&mut self.entries),
            offset: self.offset,
            input: self.input,
            cur: Shape::Map(shape.0, shape.1, shape.2),
            prefix: if self.prefix.is_empty() {
                name.to_string()
            } else {
                format!("{}.{name}", self.prefix)
            },
        };
        inner = f(inner);
        assert_eq!(
            inner.cur,
            Shape::Map(shape.0, shape.1, shape.2),
            "residual body must preserve shape"
        );
        self.entries = inner.entries;
        self.offset = inner.offset;
        self.layers.push(LayerDef::Residual(inner.layers));
        self
    }

    pub fn finish(self) -> NetDef {
        let output = match self.cur {
            Shape::Map(c, h, w) => OutputKind::Map((c, h, w)),
            Shape::Flat(f) => OutputKind::Flat(f),
        };
        NetDef {
            layers: self.layers,
            layout: ParamLayout { entries: self.entries, total: self.offset },
            input: self.input,
            output,
        }
    }
}

/// Output size of a convolution along one axis: floor((n + 2p - k)/s) + 1.
pub fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad).saturating_sub(k) / stride + 1
}

/// Output size of a transposed convolution along one axis.
pub fn convt_out(n: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (n - 1) * stride + k + out_pad - 2 * pad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::Scalar;
    use ndarray::Array4;
    use rand::Rng;

    /// A small network touching every layer kind.
    fn mixed_def() -> NetDef {
        NetBuilder::new((2, 8, 12))
            .conv("c1", 3, 3, 2, 1)
            .instance_norm("n1")
            .relu()
            .residual("r0", |r| {
                r.conv("a", 3, 3, 1, 1).instance_norm("na").relu().conv("b", 3, 3, 1, 1)
            })
            .conv_transpose("t1", 2, 3, 2, 1, 1)
            .leaky_relu(0.2)
            .conv("c2", 2, 4, 2, 1)
            .tanh()
            .flatten()
            .dense("fc", 5)
            .relu()
            .dense("out", 1)
            .finish()
    }

    fn random_input<S: Scalar>(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<S> {
        let mut rng = crate::rng::stream(seed, "nn_test_input");
        Array4::from_shape_fn((b, c, h, w), |_| crate::num::s(rng.random_range(-1.0..1.0)))
    }

    fn random_params<S: Scalar>(def: &NetDef, seed: u64) -> Vec<S> {
        let mut rng = crate::rng::stream(seed, "nn_test_params");
        (0..def.layout.total).map(|_| crate::num::s(rng.random_range(-0.3..0.3))).collect()
    }

    #[test]
    fn fast_forward_matches_reference() {
        let def = mixed_def();
        let params = random_params::<f64>(&def, 1);
        let x = random_input::<f64>(3, 2, 8, 12, 2);
        let fast = def.forward(&params, &x).unwrap().flat().unwrap();
        let slow = reference::forward(&def, &params, &x).unwrap().flat().unwrap();
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-10, "fast {a} vs reference {b}");
        }
    }

    #[test]
    fn fast_backward_matches_reference() {
        let def = mixed_def();
        let params = random_params::<f64>(&def, 3);
        let x = random_input::<f64>(2, 2, 8, 12, 4);
        let (y, tape) = def.forward_cached(&params, &x).unwrap();
        let dout = Act::Flat(y.flat().unwrap().mapv(|_| 1.0));
        let (dx_fast, dp_fast) = def.backward(&params, &tape, dout.clone()).unwrap();
        let (dx_slow, dp_slow) = reference::backward(&def, &params, &x, &dout).unwrap();
        for (a, b) in dx_fast.iter().zip(dx_slow.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in dp_fast.iter().zip(dp_slow.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let def = mixed_def();
        let params = random_params::<f64>(&def, 5);
        let x = random_input::<f64>(2, 2, 8, 12, 6);
        // scalar loss: mean of squared outputs
        let mut loss = |p: &[f64]| -> f64 {
            let y = def.forward(p, &x).unwrap().flat().unwrap();
            y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64
        };
        let (y, tape) = def.forward_cached(&params, &x).unwrap();
        let yf = y.flat().unwrap();
        let n = yf.len() as f64;
        let dout = Act::Flat(yf.mapv(|v| 2.0 * v / n));
        let (_, analytic) = def.backward(&params, &tape, dout).unwrap();
        let idx = gradcheck::sample_indices(def.layout.total, 50, 7);
        let report = gradcheck::check_gradient(&mut loss, &params, &analytic, &idx, 1e-4);
        assert!(report.passes(1e-5), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn instance_norm_prenormalized_statistics() {
        // gamma=1, beta=0 output IS the pre-affine normalized activation
        let def = NetBuilder::new((3, 6, 9)).instance_norm("n").finish();
        let mut params = vec![0.0f64; def.layout.total];
        for e in &def.layout.entries {
            if e.name.ends_with("gamma") {
                for v in &mut params[e.offset..e.offset + e.len()] {
                    *v = 1.0;
                }
            }
        }
        let x = random_input::<f64>(4, 3, 6, 9, 8);
        let y = def.forward(&params, &x).unwrap().map().unwrap();
        for bi in 0..4 {
            for ci in 0..3 {
                let ch = y.index_axis(ndarray::Axis(0), bi);
                let ch = ch.index_axis(ndarray::Axis(0), ci);
                let n = ch.len() as f64;
                let mean = ch.iter().sum::<f64>() / n;
                let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                assert!(mean.abs() <= 1e-5, "per-instance mean {mean}");
                assert!((var - 1.0).abs() <= 1e-4, "per-instance variance {var}");
            }
        }
    }

    #[test]
    fn residual_identity_with_zero_body() {
        // zero conv weights: body contributes only IN(0)=beta=0, skip passes x
        let def = NetBuilder::new((2, 4, 4))
            .residual("r", |r| r.conv("c", 2, 3, 1, 1).instance_norm("n"))
            .finish();
        let params = vec![0.0f64; def.layout.total];
        let x = random_input::<f64>(1, 2, 4, 4, 9);
        let y = def.forward(&params, &x).unwrap().map().unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let def = mixed_def();
        let params = random_params::<f64>(&def, 1);
        let x = random_input::<f64>(1, 2, 8, 10, 2);
        assert!(def.forward(&params, &x).is_err());
    }

    #[test]
    fn batch_items_are_independent() {
        let def = mixed_def();
        let params = random_params::<f64>(&def, 10);
        let x = random_input::<f64>(4, 2, 8, 12, 11);
        let y = def.forward(&params, &x).unwrap().flat().unwrap();
        // permuting batch order permutes outputs identically
        let perm = [2usize, 0, 3, 1];
        let xp = Array4::from_shape_fn(x.dim(), |(b, c, h, w)| x[(perm[b], c, h, w)]);
        let yp = def.forward(&params, &xp).unwrap().flat().unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(yp[(i, 0)], y[(p, 0)]);
        }
    }
}
