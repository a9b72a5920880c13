//! Multi-modal concatenation, multi-scale temporal networks and the residual
//! fully-connected fusion of the two streams.

use ndarray::{
    concatenate, s, Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis,
};

use crate::error::{Error, Result};
use crate::nn::{attention_backward, attention_probs, join, Linear, ParamSet, TemporalConv};
use crate::real::Real;

/// Concatenates grained visual and tiled text features along the feature axis.
pub fn concat_multimodal<F: Real>(
    grained: ArrayView3<F>,
    text: ArrayView3<F>,
) -> Result<Array3<F>> {
    let (gc, gt, _) = grained.dim();
    let (tc, tt, _) = text.dim();
    if (gc, gt) != (tc, tt) {
        return Err(Error::shape(
            "multi-modal concat",
            format!("visual [{gc}, {gt}, _] vs text [{tc}, {tt}, _]"),
        ));
    }
    Ok(concatenate(Axis(2), &[grained, text]).expect("leading axes checked"))
}

/// Multi-scale temporal network: three dilated temporal convolutions and a
/// non-local attention branch, each producing a quarter of the channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Mtn<F> {
    pub branches: Vec<TemporalConv<F>>,
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
}

#[derive(Clone, Debug)]
pub struct MtnCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Array2<F>,
}

impl<F: Real> Mtn<F> {
    pub fn zeros(channels: usize, dilations: &[usize], width: usize) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "MTN channels {channels} must be a positive multiple of 4"
            )));
        }
        if dilations.len() != 3 || dilations.windows(2).any(|w| w[0] >= w[1]) || dilations[0] == 0 {
            return Err(Error::Config(format!(
                "MTN needs three positive, strictly increasing dilations, got {dilations:?}"
            )));
        }
        let quarter = channels / 4;
        Ok(Self {
            branches: dilations
                .iter()
                .map(|&d| TemporalConv::zeros(channels, quarter, width, d))
                .collect::<Result<_>>()?,
            query: Linear::zeros(channels, quarter),
            key: Linear::zeros(channels, quarter),
            value: Linear::zeros(channels, quarter),
        })
    }

    pub fn channels(&self) -> usize {
        self.query.input_dim()
    }

    pub fn forward_crop(&self, x: ArrayView2<F>) -> Result<(Array2<F>, MtnCache<F>)> {
        if x.ncols() != self.channels() {
            return Err(Error::shape(
                "MTN",
                format!(
                    "input has {} channels, expected {}",
                    x.ncols(),
                    self.channels()
                ),
            ));
        }
        let mut parts = Vec::with_capacity(4);
        for branch in &self.branches {
            parts.push(branch.forward(x)?);
        }
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let probs = attention_probs(q.view(), k.view(), None);
        parts.push(probs.dot(&v));
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let y = concatenate(Axis(1), &views).expect("branches share T");
        Ok((y, MtnCache { q, k, v, probs }))
    }

    pub fn backward_crop(
        &self,
        x: ArrayView2<F>,
        cache: &MtnCache<F>,
        dy: ArrayView2<F>,
        grad: &mut Self,
    ) -> Array2<F> {
        let quarter = self.channels() / 4;
        let mut dx = Array2::zeros(x.raw_dim());
        for (i, (branch, g)) in self
            .branches
            .iter()
            .zip(grad.branches.iter_mut())
            .enumerate()
        {
            let d = dy.slice(s![.., i * quarter..(i + 1) * quarter]);
            dx += &branch.backward(x, d, g);
        }
        let d_nl = dy.slice(s![.., 3 * quarter..]);
        let (dq, dk, dv) = attention_backward(
            cache.q.view(),
            cache.k.view(),
            cache.v.view(),
            cache.probs.view(),
            d_nl,
        );
        dx += &self.query.backward(x, dq.view(), &mut grad.query);
        dx += &self.key.backward(x, dk.view(), &mut grad.key);
        dx += &self.value.backward(x, dv.view(), &mut grad.value);
        dx
    }

    /// `[n_crops, T, C] -> [n_crops, T, C]`, crops independent.
    pub fn forward(&self, x: ArrayView3<F>) -> Result<Array3<F>> {
        let mut out = Array3::zeros(x.raw_dim());
        for (c, crop) in x.axis_iter(Axis(0)).enumerate() {
            out.index_axis_mut(Axis(0), c)
                .assign(&self.forward_crop(crop)?.0);
        }
        Ok(out)
    }
}

impl<F: Real> ParamSet<F> for Mtn<F> {
    fn visit<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewD<'a, F>),
    ) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&join(prefix, &format!("dilated{i}")), f);
        }
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
    }

    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewMutD<'_, F>),
    ) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("dilated{i}")), f);
        }
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
    }
}

/// `X = FC(X_gm) + X_v`, applied at every crop and time step.
pub fn fuse<F: Real>(x_gm: ArrayView3<F>, x_v: ArrayView3<F>, fc: &Linear<F>) -> Result<Array3<F>> {
    let (c, t, cg) = x_gm.dim();
    if cg != fc.input_dim() || x_v.dim() != (c, t, fc.output_dim()) {
        return Err(Error::shape(
            "fusion",
            format!(
                "x_gm {:?} and x_v {:?} incompatible with FC [{}, {}]",
                x_gm.dim(),
                x_v.dim(),
                fc.input_dim(),
                fc.output_dim()
            ),
        ));
    }
    let flat = x_gm.to_shape((c * t, cg)).expect("contiguous reshape");
    let projected = fc.forward(flat.view());
    let projected = projected
        .into_shape_with_order((c, t, fc.output_dim()))
        .expect("same element count");
    Ok(projected + x_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr3, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    fn random_mtn(rng: &mut ChaCha8Rng, c: usize) -> Mtn<f64> {
        let mut m = Mtn::zeros(c, &[1, 2, 4], 3).unwrap();
        m.visit_mut("", &mut |_, _, mut a| {
            a.mapv_inplace(|_| rng.random_range(-0.5..0.5))
        });
        m
    }

    #[test]
    fn concat_appends_text() {
        let gf = arr3(&[[[1.0, 2.0]]]);
        let txt = arr3(&[[[9.0]]]);
        assert_eq!(
            concat_multimodal(gf.view(), txt.view()).unwrap(),
            arr3(&[[[1.0, 2.0, 9.0]]])
        );
    }

    #[test]
    fn concat_with_empty_text_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gf = random3(&mut rng, (2, 3, 4));
        let txt = Array3::<f64>::zeros((2, 3, 0));
        assert_eq!(concat_multimodal(gf.view(), txt.view()).unwrap(), gf);
    }

    #[test]
    fn concat_slices_back_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gf = random3(&mut rng, (3, 5, 4));
        let txt = random3(&mut rng, (3, 5, 2));
        let gm = concat_multimodal(gf.view(), txt.view()).unwrap();
        assert_eq!(gm.slice(s![.., .., ..4]), gf);
        assert_eq!(gm.slice(s![.., .., 4..]), txt);
        let bad = random3(&mut rng, (3, 4, 2));
        assert!(concat_multimodal(gf.view(), bad.view()).is_err());
    }

    #[test]
    fn zero_mtn_outputs_zero() {
        let m = Mtn::<f64>::zeros(8, &[1, 2, 4], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random3(&mut rng, (2, 6, 8));
        assert!(m.forward(x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mtn_preserves_ten_crop_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_mtn(&mut rng, 64);
        let x = random3(&mut rng, (10, 32, 64));
        assert_eq!(m.forward(x.view()).unwrap().dim(), (10, 32, 64));
    }

    #[test]
    fn mtn_rejects_bad_channels_and_dilations() {
        assert!(Mtn::<f64>::zeros(6, &[1, 2, 4], 3).is_err());
        assert!(Mtn::<f64>::zeros(8, &[1, 1, 4], 3).is_err());
        let m = Mtn::<f64>::zeros(8, &[1, 2, 4], 3).unwrap();
        assert!(m.forward(Array3::zeros((1, 4, 12)).view()).is_err());
    }

    #[test]
    fn dilated_branch_receptive_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_mtn(&mut rng, 8);
        let t = 16;
        let x = random3(&mut rng, (1, t, 8));
        let (y, _) = m.forward_crop(x.index_axis(Axis(0), 0)).unwrap();
        for (b, d) in [1usize, 2, 4].into_iter().enumerate() {
            let cols = s![.., b * 2..(b + 1) * 2];
            for src in 0..t {
                let mut xp = x.clone();
                xp.slice_mut(s![0, src, ..]).mapv_inplace(|v| v + 1.0);
                let (yp, _) = m.forward_crop(xp.index_axis(Axis(0), 0)).unwrap();
                for out in 0..t {
                    let moved = yp.slice(cols).row(out) != y.slice(cols).row(out);
                    let reach = out.abs_diff(src);
                    // taps sit at offsets {-d, 0, d}
                    assert_eq!(
                        moved,
                        reach == 0 || reach == d,
                        "branch {b} out {out} src {src}"
                    );
                }
            }
        }
    }

    #[test]
    fn non_local_branch_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_mtn(&mut rng, 8);
        let x = random3(&mut rng, (1, 7, 8)).index_axis_move(Axis(0), 0);
        let perm = [6, 2, 0, 5, 1, 3, 4];
        let (y, _) = m.forward_crop(x.view()).unwrap();
        let (yp, _) = m.forward_crop(x.select(Axis(0), &perm).view()).unwrap();
        let expected = y.select(Axis(0), &perm);
        let diff = (&yp.slice(s![.., 6..]) - &expected.slice(s![.., 6..]))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn fuse_zero_weight_passes_visual_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xgm = random3(&mut rng, (2, 3, 6));
        let xv = random3(&mut rng, (2, 3, 4));
        let fc = Linear::zeros(6, 4);
        assert_eq!(fuse(xgm.view(), xv.view(), &fc).unwrap(), xv);
    }

    #[test]
    fn fuse_identity_weight_passes_multimodal_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xgm = random3(&mut rng, (2, 3, 4));
        let xv = Array3::zeros((2, 3, 4));
        let fc = Linear {
            weight: Array2::eye(4),
            bias: ndarray::Array1::zeros(4),
        };
        assert_eq!(fuse(xgm.view(), xv.view(), &fc).unwrap(), xgm);
    }

    #[test]
    fn fuse_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random3(&mut rng, (2, 3, 6));
        let b = random3(&mut rng, (2, 3, 6));
        let zero = Array3::zeros((2, 3, 4));
        let mut fc = Linear::zeros(6, 4);
        fc.visit_mut("", &mut |_, _, mut p| {
            p.mapv_inplace(|_| rng.random_range(-1.0..1.0))
        });
        let sum = &a + &b;
        let lhs = fuse(sum.view(), zero.view(), &fc).unwrap();
        let rhs = fuse(a.view(), zero.view(), &fc).unwrap()
            + fuse(b.view(), zero.view(), &fc).unwrap()
            - &fc.bias;
        assert!((lhs - rhs).iter().all(|v| v.abs() < 1e-12));
        assert!(fuse(a.view(), zero.view(), &Linear::zeros(5, 4)).is_err());
    }
}
