use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{batch_loss, batch_loss_and_grad, ModelParams, VideoSample};
use crate::nn::ParamSet;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Number of coordinates to probe; `None` probes every parameter.
    pub coordinates: Option<usize>,
    /// Coordinates drawn from each tensor before topping up at random.
    pub per_tensor: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Minimum distance of top-k boundaries, hinge kinks and clamp edges from the
    /// current point.
    pub stability_gap: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coordinates: Some(200),
            per_tensor: 4,
            seed: 0,
            floor: 1e-6,
            stability_gap: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Tensor name and flat offset of the worst coordinate.
    pub worst: (String, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Rejects points where a small perturbation could change which piece of the
/// piecewise-smooth loss is active.
fn check_stability(
    params: &ModelParams<f64>,
    batch: &[VideoSample<'_, f64>],
    cfg: &LossConfig,
    gap: f64,
) -> Result<()> {
    let mut m_k = Vec::with_capacity(batch.len());
    for v in batch {
        let fwd = params.forward_video(v.features, v.text, cfg.k)?;
        let mut mags: Vec<f64> = fwd.magnitudes.to_vec();
        mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if mags.len() > cfg.k {
            let g = mags[cfg.k - 1] - mags[cfg.k];
            if g < gap {
                return Err(Error::UnstableSelection { gap: g });
            }
        }
        let clamp_logit = ((1.0 - cfg.epsilon) / cfg.epsilon).ln();
        for z in fwd.logits.iter() {
            let g = clamp_logit - z.abs();
            if g < gap {
                return Err(Error::UnstableSelection { gap: g });
            }
        }
        m_k.push((fwd.m_k, v.label));
    }
    for &(mi, yi) in &m_k {
        for &(mj, yj) in &m_k {
            if yi == 1 && yj == 0 {
                let g = (cfg.margin - (mi - mj)).abs();
                if g < gap {
                    return Err(Error::UnstableSelection { gap: g });
                }
            }
        }
    }
    Ok(())
}

/// Compares analytic gradients of the batch objective with central finite
/// differences, returning the largest relative error over the probed coordinates.
pub fn gradient_check(
    params: &ModelParams<f64>,
    batch: &[VideoSample<'_, f64>],
    cfg: &LossConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    check_stability(params, batch, cfg, opts.stability_gap)?;
    let (_, grad) = batch_loss_and_grad(params, batch, cfg)?;
    let analytic = grad.to_flat();

    let mut tensors = Vec::new();
    let mut offset = 0;
    params.visit("", &mut |name, _, a| {
        tensors.push((name.to_string(), offset, a.len()));
        offset += a.len();
    });
    let total = offset;

    let coords: Vec<usize> = match opts.coordinates {
        None => (0..total).collect(),
        Some(target) => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut chosen = vec![false; total];
            for (_, start, len) in &tensors {
                for i in index::sample(&mut rng, *len, opts.per_tensor.min(*len)) {
                    chosen[start + i] = true;
                }
            }
            let mut rest: Vec<usize> = (0..total).filter(|&i| !chosen[i]).collect();
            rest.shuffle(&mut rng);
            let have = chosen.iter().filter(|&&c| c).count();
            for &i in rest.iter().take(target.saturating_sub(have)) {
                chosen[i] = true;
            }
            (0..total).filter(|&i| chosen[i]).collect()
        }
    };

    let mut theta = params.to_flat();
    let mut probe = params.clone();
    let mut eval = |theta: &[f64]| -> Result<f64> {
        probe.assign_flat(theta)?;
        Ok(batch_loss(&probe, batch, cfg)?.0.total)
    };
    let mut worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
    for &i in &coords {
        let orig = theta[i];
        theta[i] = orig + opts.eps;
        let up = eval(&theta)?;
        theta[i] = orig - opts.eps;
        let down = eval(&theta)?;
        theta[i] = orig;
        let numeric = (up - down) / (2.0 * opts.eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if rel > worst.0 || coords.len() == 1 {
            worst = (rel, i, a, numeric);
        }
    }
    let (name, start, _) = tensors
        .iter()
        .rev()
        .find(|(_, start, _)| *start <= worst.1)
        .expect("coordinate belongs to a tensor");
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        checked: coords.len(),
        worst: (name.clone(), worst.1 - start),
        worst_analytic: worst.2,
        worst_numeric: worst.3,
    })
}
