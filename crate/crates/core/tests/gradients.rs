use gmfvad::loss::LossConfig;
use gmfvad::model::{batch_loss_and_grad, init_params, ModelDims, ModelParams, VideoSample};
use gmfvad::nn::ParamSet;
use gmfvad::trainer::{gradient_check, GradCheckOptions};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn tiny_dims() -> ModelDims {
    ModelDims {
        grained_dim: 8,
        ..ModelDims::new(8, 4)
    }
}

fn videos(seed: u64, n: usize, t: usize, dims: &ModelDims) -> Vec<(Array3<f64>, Array2<f64>, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let mut f = Array3::from_shape_simple_fn((2, t, dims.visual_dim), || {
                rng.sample::<f64, _>(StandardNormal)
            });
            let x = Array2::from_shape_simple_fn((t, dims.text_dim), || {
                rng.sample::<f64, _>(StandardNormal)
            });
            if label == 1 {
                f.slice_mut(ndarray::s![.., 3..6, ..])
                    .mapv_inplace(|v| v + 1.5);
            }
            (f, x, label)
        })
        .collect()
}

fn samples(v: &[(Array3<f64>, Array2<f64>, u8)]) -> Vec<VideoSample<'_, f64>> {
    v.iter()
        .map(|(f, x, l)| VideoSample {
            features: f.view(),
            text: x.view(),
            label: *l,
        })
        .collect()
}

#[test]
fn all_coordinates_of_a_small_model_match_finite_differences() {
    let dims = ModelDims {
        classifier_hidden: [16, 8],
        ..tiny_dims()
    };
    let params = init_params::<f64>(&dims, 3).unwrap();
    let data = videos(5, 4, 12, &dims);
    let cfg = LossConfig {
        k: 2,
        ..LossConfig::default()
    };
    let opts = GradCheckOptions {
        coordinates: None,
        ..GradCheckOptions::default()
    };
    let report = gradient_check(&params, &samples(&data), &cfg, &opts).unwrap();
    assert_eq!(report.checked, params.num_params());
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn zero_model_final_bias_gradient() {
    // all-zero parameters: every logit is 0, so dL_s/db3 = k * sum_v (0.5 - y_v)
    let dims = tiny_dims();
    let params = ModelParams::<f64>::zeros(&dims).unwrap();
    let data = videos(6, 4, 12, &dims);
    let cfg = LossConfig {
        k: 2,
        ..LossConfig::default()
    };
    let (_, grad) = batch_loss_and_grad(&params, &samples(&data), &cfg).unwrap();
    let expected: f64 = data.iter().map(|(_, _, y)| 2.0 * (0.5 - *y as f64)).sum();
    assert_eq!(grad.classifier.fc3.bias[0], expected);
    // the magnitude loss has zero gradient here because the fused feature is zero
    assert!(grad.fusion.weight.iter().all(|&g| g == 0.0));
}

#[test]
fn zero_alpha_gradient_is_classifier_gradient() {
    let dims = tiny_dims();
    let params = init_params::<f64>(&dims, 8).unwrap();
    let data = videos(9, 4, 12, &dims);
    let base = LossConfig {
        k: 2,
        alpha: 0.0,
        ..LossConfig::default()
    };
    let (rec, g0) = batch_loss_and_grad(&params, &samples(&data), &base).unwrap();
    assert_eq!(rec.total, rec.classifier);
    // with the hinge removed (huge margin is irrelevant at alpha 0), gradients coincide
    let other = LossConfig {
        margin: 1e9,
        ..base
    };
    let (_, g1) = batch_loss_and_grad(&params, &samples(&data), &other).unwrap();
    assert_eq!(g0, g1);
    // and alpha scales only the magnitude part
    let with = LossConfig {
        alpha: 1e-2,
        ..base
    };
    let (rec2, g2) = batch_loss_and_grad(&params, &samples(&data), &with).unwrap();
    assert_eq!(rec2.total, 1e-2 * rec2.margin + rec2.classifier);
    assert_ne!(g2, g0);
    let mut nonzero = false;
    g0.visit("", &mut |_, _, a| nonzero |= a.iter().any(|&v| v != 0.0));
    assert!(nonzero);
}
