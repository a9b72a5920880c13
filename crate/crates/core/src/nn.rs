//! Layer primitives with explicit backward passes.
//!
//! Activations are `[T, C]` matrices (one crop, time along rows). Every
//! `backward` accumulates parameter gradients into a structure of the same type
//! and returns the gradient with respect to the layer input.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};

use crate::error::{Error, Result};
use crate::real::Real;

/// Visits named parameter tensors in a fixed order. `fan_in` is `Some` for weight
/// tensors and `None` for biases.
#[allow(clippy::type_complexity)]
pub trait ParamSet<F: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, Option<usize>, ArrayViewD<'a, F>));
    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewMutD<'_, F>),
    );
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fully-connected layer `y = x W + b`, `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl<F: Real> ParamSet<F> for Linear<F> {
    fn visit<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewD<'a, F>),
    ) {
        f(
            &join(prefix, "weight"),
            Some(self.weight.nrows()),
            self.weight.view().into_dyn(),
        );
        f(&join(prefix, "bias"), None, self.bias.view().into_dyn());
    }

    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewMutD<'_, F>),
    ) {
        let fan_in = self.weight.nrows();
        f(
            &join(prefix, "weight"),
            Some(fan_in),
            self.weight.view_mut().into_dyn(),
        );
        f(&join(prefix, "bias"), None, self.bias.view_mut().into_dyn());
    }
}

/// `out[t] = x[t + shift]`, zero outside `[0, T)`.
fn shifted<F: Real>(x: ArrayView2<F>, shift: isize) -> Array2<F> {
    let t = x.nrows() as isize;
    let mut out = Array2::zeros(x.raw_dim());
    let lo = (-shift).clamp(0, t);
    let hi = (t - shift).clamp(0, t);
    if lo < hi {
        out.slice_mut(s![lo..hi, ..])
            .assign(&x.slice(s![lo + shift..hi + shift, ..]));
    }
    out
}

/// Same-padded temporal convolution, `kernel: [out, in, width]`, odd width.
///
/// `y[t, o] = b[o] + sum_{i, j} kernel[o, i, j] * x[t + (j - h) * dilation, i]` with
/// `h = (width - 1) / 2` and zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalConv<F> {
    pub kernel: Array3<F>,
    pub bias: Array1<F>,
    pub dilation: usize,
}

impl<F: Real> TemporalConv<F> {
    pub fn zeros(input: usize, output: usize, width: usize, dilation: usize) -> Result<Self> {
        if width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "convolution width {width} must be odd"
            )));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be positive".into()));
        }
        Ok(Self {
            kernel: Array3::zeros((output, input, width)),
            bias: Array1::zeros(output),
            dilation,
        })
    }

    pub fn width(&self) -> usize {
        self.kernel.dim().2
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.dim().1
    }

    pub fn output_dim(&self) -> usize {
        self.kernel.dim().0
    }

    fn tap_shift(&self, tap: usize) -> isize {
        let half = (self.width() - 1) / 2;
        (tap as isize - half as isize) * self.dilation as isize
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(
                "temporal conv",
                format!(
                    "input has {} channels, kernel expects {}",
                    x.ncols(),
                    self.input_dim()
                ),
            ));
        }
        let mut y = Array2::zeros((x.nrows(), self.output_dim())) + &self.bias;
        for tap in 0..self.width() {
            let xs = shifted(x, self.tap_shift(tap));
            let k = self.kernel.index_axis(Axis(2), tap);
            y += &xs.dot(&k.t());
        }
        Ok(y)
    }

    pub fn backward(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        grad.bias += &dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros(x.raw_dim());
        for tap in 0..self.width() {
            let shift = self.tap_shift(tap);
            let xs = shifted(x, shift);
            let mut gk = grad.kernel.index_axis_mut(Axis(2), tap);
            gk += &dy.t().dot(&xs);
            let dxs = dy.dot(&self.kernel.index_axis(Axis(2), tap));
            dx += &shifted(dxs.view(), -shift);
        }
        dx
    }
}

impl<F: Real> ParamSet<F> for TemporalConv<F> {
    fn visit<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewD<'a, F>),
    ) {
        let fan_in = self.input_dim() * self.width();
        f(
            &join(prefix, "kernel"),
            Some(fan_in),
            self.kernel.view().into_dyn(),
        );
        f(&join(prefix, "bias"), None, self.bias.view().into_dyn());
    }

    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewMutD<'_, F>),
    ) {
        let fan_in = self.input_dim() * self.width();
        f(
            &join(prefix, "kernel"),
            Some(fan_in),
            self.kernel.view_mut().into_dyn(),
        );
        f(&join(prefix, "bias"), None, self.bias.view_mut().into_dyn());
    }
}

/// Short-cut convolution: `x + conv(x)`.
pub fn scc_forward<F: Real>(x: ArrayView2<F>, conv: &TemporalConv<F>) -> Result<Array2<F>> {
    if conv.output_dim() != x.ncols() {
        return Err(Error::shape(
            "short-cut convolution",
            format!(
                "kernel maps to {} channels, input has {}",
                conv.output_dim(),
                x.ncols()
            ),
        ));
    }
    Ok(conv.forward(x)? + x)
}

pub fn scc_backward<F: Real>(
    x: ArrayView2<F>,
    conv: &TemporalConv<F>,
    dy: ArrayView2<F>,
    grad: &mut TemporalConv<F>,
) -> Array2<F> {
    conv.backward(x, dy, grad) + dy
}

/// Row-wise softmax of scaled dot products, restricted to `|i - j| <= radius` when
/// a radius is given. Returns the attention probabilities `[T, T]`.
pub fn attention_probs<F: Real>(
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    radius: Option<usize>,
) -> Array2<F> {
    let t = q.nrows();
    let scale = F::one() / F::from_usize(q.ncols().max(1)).unwrap().sqrt();
    let mut scores = q.dot(&k.t()) * scale;
    for (i, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let (lo, hi) = match radius {
            Some(r) => (i.saturating_sub(r), (i + r + 1).min(t)),
            None => (0, t),
        };
        let max = row
            .slice(s![lo..hi])
            .iter()
            .fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut total = F::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j < lo || j >= hi {
                *v = F::zero();
            } else {
                *v = (*v - max).exp();
                total += *v;
            }
        }
        row.mapv_inplace(|v| v / total);
    }
    scores
}

/// Backward of `out = probs . v` where `probs = attention_probs(q, k, ..)`.
/// Returns `(dq, dk, dv)`.
pub fn attention_backward<F: Real>(
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    v: ArrayView2<F>,
    probs: ArrayView2<F>,
    dout: ArrayView2<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let scale = F::one() / F::from_usize(q.ncols().max(1)).unwrap().sqrt();
    let dv = probs.t().dot(&dout);
    let dp = dout.dot(&v.t());
    let row_dot = (&dp * &probs).sum_axis(Axis(1));
    let mut ds = dp;
    Zip::from(ds.rows_mut())
        .and(probs.rows())
        .and(&row_dot)
        .for_each(|mut d, p, &rd| {
            Zip::from(&mut d)
                .and(&p)
                .for_each(|d, &p| *d = p * (*d - rd) * scale);
        });
    let dq = ds.dot(&k);
    let dk = ds.t().dot(&q);
    (dq, dk, dv)
}

/// Single-head self-attention with query/key/value/output projections.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention<F> {
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub output: Linear<F>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Array2<F>,
    mixed: Array2<F>,
}

impl<F: Real> AttentionCache<F> {
    pub fn probs(&self) -> ArrayView2<'_, F> {
        self.probs.view()
    }
}

impl<F: Real> SelfAttention<F> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            query: Linear::zeros(dim, dim),
            key: Linear::zeros(dim, dim),
            value: Linear::zeros(dim, dim),
            output: Linear::zeros(dim, dim),
        }
    }

    /// Attention without the residual; `radius = None` attends over all positions.
    pub fn forward(
        &self,
        x: ArrayView2<F>,
        radius: Option<usize>,
    ) -> (Array2<F>, AttentionCache<F>) {
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let probs = attention_probs(q.view(), k.view(), radius);
        let mixed = probs.dot(&v);
        let y = self.output.forward(mixed.view());
        (
            y,
            AttentionCache {
                q,
                k,
                v,
                probs,
                mixed,
            },
        )
    }

    pub fn backward(
        &self,
        x: ArrayView2<F>,
        cache: &AttentionCache<F>,
        dy: ArrayView2<F>,
        grad: &mut Self,
    ) -> Array2<F> {
        let dmixed = self
            .output
            .backward(cache.mixed.view(), dy, &mut grad.output);
        let (dq, dk, dv) = attention_backward(
            cache.q.view(),
            cache.k.view(),
            cache.v.view(),
            cache.probs.view(),
            dmixed.view(),
        );
        self.query.backward(x, dq.view(), &mut grad.query)
            + self.key.backward(x, dk.view(), &mut grad.key)
            + self.value.backward(x, dv.view(), &mut grad.value)
    }
}

impl<F: Real> ParamSet<F> for SelfAttention<F> {
    fn visit<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewD<'a, F>),
    ) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewMutD<'_, F>),
    ) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Exact (erf-based) GeLU.
pub fn gelu<F: Real>(x: F) -> F {
    let half = F::lit(0.5);
    half * x * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let cdf = F::lit(0.5) * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * F::lit(0.5)).exp() * F::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Two-layer feed-forward network with a GeLU in between (no residual).
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache<F> {
    pre: Array2<F>,
    act: Array2<F>,
}

impl<F: Real> FeedForward<F> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<F>) -> (Array2<F>, FeedForwardCache<F>) {
        let pre = self.fc1.forward(x);
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(act.view());
        (y, FeedForwardCache { pre, act })
    }

    pub fn backward(
        &self,
        x: ArrayView2<F>,
        cache: &FeedForwardCache<F>,
        dy: ArrayView2<F>,
        grad: &mut Self,
    ) -> Array2<F> {
        let dact = self.fc2.backward(cache.act.view(), dy, &mut grad.fc2);
        let dpre = dact * &cache.pre.mapv(gelu_grad);
        self.fc1.backward(x, dpre.view(), &mut grad.fc1)
    }
}

impl<F: Real> ParamSet<F> for FeedForward<F> {
    fn visit<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewD<'a, F>),
    ) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewMutD<'_, F>),
    ) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
