//! Glance-focus refinement of per-crop visual features.
//!
//! Glance: short-cut convolution, full self-attention over all clips, GeLU FFN.
//! Focus: 1x1 channel projection `D -> D_f`, short-cut convolution, windowed
//! self-attention over neighbouring clips, GeLU FFN. Attention and FFN stages are
//! wrapped in residual connections; there is no positional encoding.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};

use crate::error::{Error, Result};
use crate::nn::{
    join, scc_backward, scc_forward, AttentionCache, FeedForward, FeedForwardCache, Linear,
    ParamSet, SelfAttention, TemporalConv,
};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct GlanceBlock<F> {
    pub scc: TemporalConv<F>,
    pub attention: SelfAttention<F>,
    pub ffn: FeedForward<F>,
}

#[derive(Clone, Debug)]
pub struct GlanceCache<F> {
    short_cut: Array2<F>,
    attention: AttentionCache<F>,
    attended: Array2<F>,
    ffn: FeedForwardCache<F>,
}

impl<F: Real> GlanceBlock<F> {
    pub fn zeros(dim: usize, hidden: usize, scc_width: usize) -> Result<Self> {
        Ok(Self {
            scc: TemporalConv::zeros(dim, dim, scc_width, 1)?,
            attention: SelfAttention::zeros(dim),
            ffn: FeedForward::zeros(dim, hidden),
        })
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Result<(Array2<F>, GlanceCache<F>)> {
        let short_cut = scc_forward(x, &self.scc)?;
        let (attn, attention) = self.attention.forward(short_cut.view(), None);
        let attended = attn + &short_cut;
        let (ff, ffn) = self.ffn.forward(attended.view());
        let y = ff + &attended;
        Ok((
            y,
            GlanceCache {
                short_cut,
                attention,
                attended,
                ffn,
            },
        ))
    }

    pub fn backward(
        &self,
        x: ArrayView2<F>,
        cache: &GlanceCache<F>,
        dy: ArrayView2<F>,
        grad: &mut Self,
    ) -> Array2<F> {
        let d_attended = self
            .ffn
            .backward(cache.attended.view(), &cache.ffn, dy, &mut grad.ffn)
            + dy;
        let d_short_cut = self.attention.backward(
            cache.short_cut.view(),
            &cache.attention,
            d_attended.view(),
            &mut grad.attention,
        ) + &d_attended;
        scc_backward(x, &self.scc, d_short_cut.view(), &mut grad.scc)
    }
}

impl<F: Real> ParamSet<F> for GlanceBlock<F> {
    fn visit<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewD<'a, F>),
    ) {
        self.scc.visit(&join(prefix, "scc"), f);
        self.attention.visit(&join(prefix, "attention"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewMutD<'_, F>),
    ) {
        self.scc.visit_mut(&join(prefix, "scc"), f);
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FocusBlock<F> {
    pub expand: Linear<F>,
    pub scc: TemporalConv<F>,
    pub attention: SelfAttention<F>,
    pub ffn: FeedForward<F>,
    /// Each clip attends to clips at most this many steps away.
    pub radius: usize,
}

#[derive(Clone, Debug)]
pub struct FocusCache<F> {
    expanded: Array2<F>,
    short_cut: Array2<F>,
    attention: AttentionCache<F>,
    attended: Array2<F>,
    ffn: FeedForwardCache<F>,
}

impl<F: Real> FocusBlock<F> {
    pub fn zeros(
        dim: usize,
        grained: usize,
        hidden: usize,
        scc_width: usize,
        radius: usize,
    ) -> Result<Self> {
        Ok(Self {
            expand: Linear::zeros(dim, grained),
            scc: TemporalConv::zeros(grained, grained, scc_width, 1)?,
            attention: SelfAttention::zeros(grained),
            ffn: FeedForward::zeros(grained, hidden),
            radius,
        })
    }

    pub fn forward(&self, g: ArrayView2<F>) -> Result<(Array2<F>, FocusCache<F>)> {
        if g.ncols() != self.expand.input_dim() {
            return Err(Error::shape(
                "focus block",
                format!(
                    "input has {} channels, expected {}",
                    g.ncols(),
                    self.expand.input_dim()
                ),
            ));
        }
        let expanded = self.expand.forward(g);
        let short_cut = scc_forward(expanded.view(), &self.scc)?;
        let (attn, attention) = self.attention.forward(short_cut.view(), Some(self.radius));
        let attended = attn + &short_cut;
        let (ff, ffn) = self.ffn.forward(attended.view());
        let y = ff + &attended;
        Ok((
            y,
            FocusCache {
                expanded,
                short_cut,
                attention,
                attended,
                ffn,
            },
        ))
    }

    pub fn backward(
        &self,
        g: ArrayView2<F>,
        cache: &FocusCache<F>,
        dy: ArrayView2<F>,
        grad: &mut Self,
    ) -> Array2<F> {
        let d_attended = self
            .ffn
            .backward(cache.attended.view(), &cache.ffn, dy, &mut grad.ffn)
            + dy;
        let d_short_cut = self.attention.backward(
            cache.short_cut.view(),
            &cache.attention,
            d_attended.view(),
            &mut grad.attention,
        ) + &d_attended;
        let d_expanded = scc_backward(
            cache.expanded.view(),
            &self.scc,
            d_short_cut.view(),
            &mut grad.scc,
        );
        self.expand.backward(g, d_expanded.view(), &mut grad.expand)
    }
}

impl<F: Real> ParamSet<F> for FocusBlock<F> {
    fn visit<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewD<'a, F>),
    ) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.scc.visit(&join(prefix, "scc"), f);
        self.attention.visit(&join(prefix, "attention"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewMutD<'_, F>),
    ) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.scc.visit_mut(&join(prefix, "scc"), f);
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlanceFocus<F> {
    pub glance: GlanceBlock<F>,
    pub focus: FocusBlock<F>,
}

#[derive(Clone, Debug)]
pub struct GlanceFocusCache<F> {
    glance: GlanceCache<F>,
    glanced: Array2<F>,
    focus: FocusCache<F>,
}

impl<F: Real> GlanceFocus<F> {
    pub fn input_dim(&self) -> usize {
        self.focus.expand.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.focus.expand.output_dim()
    }

    /// One crop: `[T, D] -> [T, D_f]`.
    pub fn forward_crop(&self, x: ArrayView2<F>) -> Result<(Array2<F>, GlanceFocusCache<F>)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(
                "glance-focus",
                format!(
                    "input has {} channels, expected {}",
                    x.ncols(),
                    self.input_dim()
                ),
            ));
        }
        let (glanced, glance) = self.glance.forward(x)?;
        let (y, focus) = self.focus.forward(glanced.view())?;
        Ok((
            y,
            GlanceFocusCache {
                glance,
                glanced,
                focus,
            },
        ))
    }

    pub fn backward_crop(
        &self,
        x: ArrayView2<F>,
        cache: &GlanceFocusCache<F>,
        dy: ArrayView2<F>,
        grad: &mut Self,
    ) -> Array2<F> {
        let dg = self
            .focus
            .backward(cache.glanced.view(), &cache.focus, dy, &mut grad.focus);
        self.glance
            .backward(x, &cache.glance, dg.view(), &mut grad.glance)
    }

    /// All crops independently: `[n_crops, T, D] -> [n_crops, T, D_f]`.
    pub fn forward(&self, features: ArrayView3<F>) -> Result<Array3<F>> {
        let (crops, t, _) = features.dim();
        let mut out = Array3::zeros((crops, t, self.output_dim()));
        for (c, crop) in features.axis_iter(Axis(0)).enumerate() {
            let (y, _) = self.forward_crop(crop)?;
            out.index_axis_mut(Axis(0), c).assign(&y);
        }
        Ok(out)
    }
}

impl<F: Real> ParamSet<F> for GlanceFocus<F> {
    fn visit<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewD<'a, F>),
    ) {
        self.glance.visit(&join(prefix, "glance"), f);
        self.focus.visit(&join(prefix, "focus"), f);
    }

    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewMutD<'_, F>),
    ) {
        self.glance.visit_mut(&join(prefix, "glance"), f);
        self.focus.visit_mut(&join(prefix, "focus"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomize<P: ParamSet<f64>>(p: &mut P, rng: &mut ChaCha8Rng, scale: f64) {
        p.visit_mut("", &mut |_, _, mut a| {
            a.mapv_inplace(|_| rng.random_range(-scale..scale))
        });
    }

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    fn glance(rng: &mut ChaCha8Rng, d: usize) -> GlanceBlock<f64> {
        let mut g = GlanceBlock::zeros(d, 4 * d, 3).unwrap();
        randomize(&mut g, rng, 0.5);
        g
    }

    fn focus(rng: &mut ChaCha8Rng, d: usize, df: usize, r: usize) -> FocusBlock<f64> {
        let mut f = FocusBlock::zeros(d, df, 4 * df, 3, r).unwrap();
        randomize(&mut f, rng, 0.5);
        f
    }

    fn max_abs_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
        (&a - &b).iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = glance(&mut rng, 4);
        let x = random(&mut rng, (1, 4));
        let (y, cache) = g.forward(x.view()).unwrap();
        assert_eq!(cache.attention.probs()[[0, 0]], 1.0);
        let (y2, _) = g.forward(x.view()).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn glance_is_permutation_equivariant_without_scc() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = glance(&mut rng, 4);
        g.scc.kernel.fill(0.0);
        let x = random(&mut rng, (6, 4));
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = x.select(Axis(0), &perm);
        let (y, _) = g.forward(x.view()).unwrap();
        let (yp, _) = g.forward(xp.view()).unwrap();
        assert!(max_abs_diff(yp.view(), y.select(Axis(0), &perm).view()) < 1e-12);
    }

    #[test]
    fn zero_ffn_and_value_output_reduce_glance_to_scc() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = glance(&mut rng, 4);
        g.ffn.visit_mut("", &mut |_, _, mut a| a.fill(0.0));
        g.attention
            .value
            .visit_mut("", &mut |_, _, mut a| a.fill(0.0));
        g.attention
            .output
            .visit_mut("", &mut |_, _, mut a| a.fill(0.0));
        let x = random(&mut rng, (5, 4));
        let (y, _) = g.forward(x.view()).unwrap();
        assert_eq!(y, scc_forward(x.view(), &g.scc).unwrap());
    }

    #[test]
    fn zero_radius_focus_is_per_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut f = focus(&mut rng, 4, 6, 0);
        f.scc.kernel.fill(0.0);
        let g = random(&mut rng, (5, 4));
        let (y, cache) = f.forward(g.view()).unwrap();
        assert_eq!(cache.attention.probs(), Array2::<f64>::eye(5));
        for t in 0..5 {
            let (yt, _) = f.forward(g.slice(s![t..t + 1, ..])).unwrap();
            assert!(max_abs_diff(yt.view(), y.slice(s![t..t + 1, ..])) < 1e-12);
        }
    }

    #[test]
    fn focus_receptive_field_is_radius_plus_scc_half_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = focus(&mut rng, 4, 4, 1);
        let g = random(&mut rng, (5, 4));
        let (y, _) = f.forward(g.view()).unwrap();
        for src in 0..5 {
            let mut gp = g.clone();
            gp.row_mut(src).mapv_inplace(|v| v + 3.0);
            let (yp, _) = f.forward(gp.view()).unwrap();
            for t in 0..5 {
                let changed = max_abs_diff(
                    yp.row(t).insert_axis(Axis(0)),
                    y.row(t).insert_axis(Axis(0)),
                ) > 0.0;
                if t.abs_diff(src) > 2 {
                    assert!(!changed, "output {t} moved when perturbing {src}");
                }
            }
        }
        // with the SCC zeroed the field shrinks to the attention radius
        let mut f0 = f.clone();
        f0.scc.kernel.fill(0.0);
        let (y, _) = f0.forward(g.view()).unwrap();
        let mut gp = g.clone();
        gp.row_mut(0).mapv_inplace(|v| v - 2.0);
        let (yp, _) = f0.forward(gp.view()).unwrap();
        for t in 2..5 {
            assert_eq!(yp.row(t), y.row(t));
        }
        assert_ne!(yp.row(1), y.row(1));
    }

    #[test]
    fn wide_radius_matches_full_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = focus(&mut rng, 4, 4, 4);
        let g = random(&mut rng, (5, 4));
        let (y, _) = f.forward(g.view()).unwrap();
        // recompute with glance-style (unwindowed) attention
        let e = f.expand.forward(g.view());
        let s = scc_forward(e.view(), &f.scc).unwrap();
        let (attn, _) = f.attention.forward(s.view(), None);
        let a = attn + &s;
        let direct = f.ffn.forward(a.view()).0 + &a;
        assert!(max_abs_diff(y.view(), direct.view()) < 1e-12);
    }

    fn model(rng: &mut ChaCha8Rng, d: usize, df: usize) -> GlanceFocus<f64> {
        GlanceFocus {
            glance: glance(rng, d),
            focus: focus(rng, d, df, 2),
        }
    }

    #[test]
    fn identical_crops_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gf = model(&mut rng, 4, 4);
        let crop = random(&mut rng, (6, 4));
        let x = ndarray::stack(Axis(0), &[crop.view(), crop.view()]).unwrap();
        let y = gf.forward(x.view()).unwrap();
        assert_eq!(y.index_axis(Axis(0), 0), y.index_axis(Axis(0), 1));
    }

    #[test]
    fn ten_crop_shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut gf = GlanceFocus {
            glance: GlanceBlock::<f32>::zeros(64, 256, 3).unwrap(),
            focus: FocusBlock::zeros(64, 64, 256, 3, 2).unwrap(),
        };
        gf.visit_mut("", &mut |_, fan, mut a| {
            if let Some(fan) = fan {
                let b = 1.0 / (fan as f32).sqrt();
                a.mapv_inplace(|_| rng.random_range(-b..b));
            }
        });
        let x = Array3::from_shape_simple_fn((10, 32, 64), || rng.random_range(-1.0f32..1.0));
        assert_eq!(gf.forward(x.view()).unwrap().dim(), (10, 32, 64));
    }

    #[test]
    fn large_inputs_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gf = model(&mut rng, 4, 4);
        let x = Array3::from_shape_simple_fn((2, 8, 4), || rng.random_range(-1e3..1e3));
        assert!(gf.forward(x.view()).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_channel_count_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gf = model(&mut rng, 4, 4);
        let x = Array3::<f64>::zeros((1, 3, 5));
        assert!(matches!(gf.forward(x.view()), Err(Error::Shape { .. })));
    }
}
