//! Top-k feature magnitudes, the snippet classifier and the training objective.

use ndarray::{
    Array1, Array2, ArrayView1, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Linear, ParamSet};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub k: usize,
    pub margin: f64,
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            k: 3,
            margin: 100.0,
            alpha: 1e-4,
            epsilon: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(
                "alpha must be finite and non-negative".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config("epsilon must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Mean over the crop axis: `[n_crops, T, C] -> [T, C]`.
pub fn crop_mean<F: Real>(x: ArrayView3<F>) -> Array2<F> {
    x.mean_axis(Axis(0)).expect("at least one crop")
}

/// Squared norm of each row.
pub fn row_magnitudes<F: Real>(x: ArrayView2<F>) -> Array1<F> {
    x.map_axis(Axis(1), |row| row.iter().map(|&v| v * v).sum())
}

/// Squared L2 norm of the crop-averaged feature at each snippet.
pub fn snippet_magnitudes<F: Real>(x: ArrayView3<F>) -> Array1<F> {
    row_magnitudes(crop_mean(x).view())
}

/// Indices of the `k` largest magnitudes, largest first, ties broken by smaller index.
pub fn select_topk<F: Real>(magnitudes: ArrayView1<F>, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > magnitudes.len() {
        return Err(Error::Config(format!(
            "top-k needs 1 <= k <= T, got k = {k}, T = {}",
            magnitudes.len()
        )));
    }
    let mut order: Vec<usize> = (0..magnitudes.len()).collect();
    // stable sort keeps index order among equal magnitudes
    order.sort_by(|&a, &b| {
        magnitudes[b]
            .partial_cmp(&magnitudes[a])
            .expect("finite magnitudes")
    });
    order.truncate(k);
    Ok(order)
}

/// Mean of the `k` largest magnitudes.
pub fn topk_magnitude<F: Real>(magnitudes: ArrayView1<F>, k: usize) -> Result<f64> {
    let idx = select_topk(magnitudes, k)?;
    Ok(idx
        .iter()
        .map(|&i| magnitudes[i].to_f64_lossless())
        .sum::<f64>()
        / k as f64)
}

/// Hinge on the magnitude gap; non-zero only for an (abnormal, normal) ordered pair.
pub fn margin_loss_pair(m_i: f64, m_j: f64, y_i: u8, y_j: u8, margin: f64) -> f64 {
    if y_i == 1 && y_j == 0 {
        (margin - (m_i - m_j)).max(0.0)
    } else {
        0.0
    }
}

/// Sum of `margin_loss_pair` over all ordered pairs of `(m_k, label)`.
pub fn batch_margin_loss(videos: &[(f64, u8)], margin: f64) -> f64 {
    let mut total = 0.0;
    for &(m_i, y_i) in videos {
        for &(m_j, y_j) in videos {
            total += margin_loss_pair(m_i, m_j, y_i, y_j, margin);
        }
    }
    total
}

/// Derivative of `batch_margin_loss` with respect to each video's `m_k`.
pub fn batch_margin_grad(videos: &[(f64, u8)], margin: f64) -> Vec<f64> {
    let mut grad = vec![0.0; videos.len()];
    for (i, &(m_i, y_i)) in videos.iter().enumerate() {
        for (j, &(m_j, y_j)) in videos.iter().enumerate() {
            if y_i == 1 && y_j == 0 && margin - (m_i - m_j) > 0.0 {
                grad[i] -= 1.0;
                grad[j] += 1.0;
            }
        }
    }
    grad
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_score(p: f64, epsilon: f64) -> f64 {
    p.clamp(epsilon, 1.0 - epsilon)
}

/// Summed binary cross-entropy of the selected snippets' scores against the video label.
pub fn snippet_ce_loss(scores: &[f64], y: u8, epsilon: f64) -> f64 {
    let y = y as f64;
    scores
        .iter()
        .map(|&p| {
            let p = clamp_score(p, epsilon);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
}

/// Gradient of one cross-entropy term with respect to the classifier logit; zero
/// where the clamp is active.
pub fn ce_logit_grad(logit: f64, y: u8, epsilon: f64) -> f64 {
    let p = sigmoid(logit);
    if p < epsilon || p > 1.0 - epsilon {
        0.0
    } else {
        p - y as f64
    }
}

pub fn total_loss(margin_loss: f64, classifier_loss: f64, alpha: f64) -> f64 {
    alpha * margin_loss + classifier_loss
}

/// Three fully-connected layers with ReLU between them and a sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    pub fc3: Linear<F>,
}

#[derive(Clone, Debug)]
pub struct ClassifierCache<F> {
    pre1: Array2<F>,
    act1: Array2<F>,
    pre2: Array2<F>,
    act2: Array2<F>,
}

fn relu<F: Real>(v: F) -> F {
    v.max(F::zero())
}

fn relu_mask<F: Real>(pre: &Array2<F>) -> Array2<F> {
    pre.mapv(|v| if v > F::zero() { F::one() } else { F::zero() })
}

impl<F: Real> Classifier<F> {
    pub fn zeros(input: usize, hidden1: usize, hidden2: usize) -> Self {
        Self {
            fc1: Linear::zeros(input, hidden1),
            fc2: Linear::zeros(hidden1, hidden2),
            fc3: Linear::zeros(hidden2, 1),
        }
    }

    /// Logits for each row of `x: [N, C_v]`.
    pub fn logits(&self, x: ArrayView2<F>) -> (Array1<F>, ClassifierCache<F>) {
        let pre1 = self.fc1.forward(x);
        let act1 = pre1.mapv(relu);
        let pre2 = self.fc2.forward(act1.view());
        let act2 = pre2.mapv(relu);
        let z = self.fc3.forward(act2.view()).remove_axis(Axis(1));
        (
            z,
            ClassifierCache {
                pre1,
                act1,
                pre2,
                act2,
            },
        )
    }

    /// Backward from logit gradients `dz: [N]` to the input rows.
    pub fn backward(
        &self,
        x: ArrayView2<F>,
        cache: &ClassifierCache<F>,
        dz: &Array1<F>,
        grad: &mut Self,
    ) -> Array2<F> {
        let dz = dz.view().insert_axis(Axis(1));
        let dact2 = self.fc3.backward(cache.act2.view(), dz, &mut grad.fc3);
        let dpre2 = dact2 * &relu_mask(&cache.pre2);
        let dact1 = self
            .fc2
            .backward(cache.act1.view(), dpre2.view(), &mut grad.fc2);
        let dpre1 = dact1 * &relu_mask(&cache.pre1);
        self.fc1.backward(x, dpre1.view(), &mut grad.fc1)
    }

    /// Clamped anomaly score of a single feature vector.
    pub fn score(&self, x: ArrayView1<F>, epsilon: f64) -> f64 {
        let (z, _) = self.logits(x.insert_axis(Axis(0)));
        clamp_score(sigmoid(z[0].to_f64_lossless()), epsilon)
    }
}

impl<F: Real> ParamSet<F> for Classifier<F> {
    fn visit<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewD<'a, F>),
    ) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        self.fc3.visit(&join(prefix, "fc3"), f);
    }

    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewMutD<'_, F>),
    ) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.fc3.visit_mut(&join(prefix, "fc3"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr3, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_four_five() {
        let x = arr3(&[[[3.0, 4.0]]]);
        assert_eq!(snippet_magnitudes(x.view()), arr1(&[25.0]));
    }

    #[test]
    fn crops_cancel_before_norm() {
        let x = arr3(&[[[1.0, 0.0]], [[-1.0, 0.0]]]);
        assert_eq!(snippet_magnitudes(x.view()), arr1(&[0.0]));
    }

    #[test]
    fn magnitudes_match_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array::from_shape_simple_fn((10, 32, 64), || rng.random_range(-1.0..1.0));
        let m = snippet_magnitudes(x.view());
        for t in 0..32 {
            let mut norm = 0.0f64;
            for d in 0..64 {
                let mut mean = 0.0;
                for c in 0..10 {
                    mean += x[[c, t, d]];
                }
                mean /= 10.0;
                norm += mean * mean;
            }
            assert!((m[t] - norm).abs() <= 1e-12 * norm.max(1.0));
        }
    }

    #[test]
    fn topk_basic_and_ties() {
        assert_eq!(
            select_topk(arr1(&[5.0, 1.0, 9.0]).view(), 2).unwrap(),
            vec![2, 0]
        );
        assert_eq!(
            select_topk(arr1(&[7.0, 7.0, 7.0]).view(), 2).unwrap(),
            vec![0, 1]
        );
        assert!(select_topk(arr1(&[1.0]).view(), 2).is_err());
        assert!(select_topk(arr1(&[1.0]).view(), 0).is_err());
    }

    #[test]
    fn topk_magnitude_values() {
        assert_eq!(
            topk_magnitude(arr1(&[25.0, 0.0, 0.0]).view(), 1).unwrap(),
            25.0
        );
        assert_eq!(
            topk_magnitude(arr1(&[4.0, 2.0, 6.0]).view(), 3).unwrap(),
            4.0
        );
    }

    #[test]
    fn margin_pairs() {
        assert_eq!(margin_loss_pair(150.0, 10.0, 1, 0, 100.0), 0.0);
        assert_eq!(margin_loss_pair(42.0, 42.0, 1, 0, 100.0), 100.0);
        assert_eq!(margin_loss_pair(0.0, 500.0, 0, 0, 100.0), 0.0);
        assert_eq!(margin_loss_pair(0.0, 500.0, 0, 1, 100.0), 0.0);
    }

    #[test]
    fn batch_margin_examples() {
        assert_eq!(batch_margin_loss(&[(3.0, 0), (9.0, 0)], 100.0), 0.0);
        assert_eq!(batch_margin_loss(&[(50.0, 1), (10.0, 0)], 100.0), 60.0);
        assert_eq!(
            batch_margin_grad(&[(50.0, 1), (10.0, 0)], 100.0),
            vec![-1.0, 1.0]
        );
    }

    #[test]
    fn ce_examples() {
        let eps = 1e-8;
        let confident = snippet_ce_loss(&[1.0 - eps; 3], 1, eps);
        assert!((confident - 3.0 * eps).abs() < 1e-12);
        assert!((snippet_ce_loss(&[0.5], 0, eps) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(snippet_ce_loss(&[0.0, 1.0], 1, eps).is_finite());
        assert_eq!(ce_logit_grad(100.0, 1, eps), 0.0);
        assert_eq!(ce_logit_grad(0.0, 1, eps), -0.5);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(123.0, 0.25, 0.0), 0.25);
        assert!((total_loss(1000.0, 0.5, 1e-4) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn zero_classifier_scores_half() {
        let c = Classifier::<f64>::zeros(4, 8, 3);
        assert_eq!(c.score(arr1(&[1.0, -2.0, 3.0, 0.5]).view(), 1e-8), 0.5);
    }

    #[test]
    fn positive_stack_is_monotone() {
        let mut c = Classifier::<f64>::zeros(1, 1, 1);
        c.fc1.weight.fill(0.7);
        c.fc2.weight.fill(1.3);
        c.fc3.weight.fill(0.4);
        let mut prev = 0.0;
        for i in 1..20 {
            let s = c.score(arr1(&[i as f64 * 0.5]).view(), 1e-8);
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Classifier::<f64>::zeros(5, 7, 4);
        c.visit_mut("", &mut |_, _, mut a| {
            a.mapv_inplace(|_| rng.random_range(-1.0..1.0))
        });
        let x = Array::from_shape_simple_fn((3, 5), || rng.random_range(-1.0..1.0));
        let y = 1u8;
        let eps = 1e-8;
        let loss = |c: &Classifier<f64>| {
            let (z, _) = c.logits(x.view());
            let scores: Vec<f64> = z.iter().map(|&z| sigmoid(z)).collect();
            snippet_ce_loss(&scores, y, eps)
        };
        let (z, cache) = c.logits(x.view());
        let dz = z.mapv(|z| ce_logit_grad(z, y, eps));
        let mut grad = Classifier::zeros(5, 7, 4);
        c.backward(x.view(), &cache, &dz, &mut grad);
        let mut analytic = Vec::new();
        grad.visit("", &mut |_, _, a| analytic.extend(a.iter().copied()));
        let h = 1e-6;
        let mut theta = Vec::new();
        c.visit("", &mut |_, _, a| theta.extend(a.iter().copied()));
        let assign = |c: &mut Classifier<f64>, theta: &[f64]| {
            let mut pos = 0;
            c.visit_mut("", &mut |_, _, mut a| {
                for v in a.iter_mut() {
                    *v = theta[pos];
                    pos += 1;
                }
            });
        };
        let mut probe = c.clone();
        let mut worst = 0.0f64;
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] += h;
            assign(&mut probe, &t);
            let up = loss(&probe);
            t[i] -= 2.0 * h;
            assign(&mut probe, &t);
            let down = loss(&probe);
            let num = (up - down) / (2.0 * h);
            let a = analytic[i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
