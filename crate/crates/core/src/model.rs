//! The full network: glance-focus, text concatenation, two MTNs, residual fusion,
//! top-k magnitudes and the snippet classifier, with per-video backward passes.

use ndarray::{
    s, Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::tile_text_features;
use crate::error::{Error, Result};
use crate::fusion::{concat_multimodal, fuse, Mtn, MtnCache};
use crate::glance_focus::{FocusBlock, GlanceBlock, GlanceFocus, GlanceFocusCache};
use crate::loss::{
    batch_margin_grad, batch_margin_loss, ce_logit_grad, clamp_score, crop_mean, row_magnitudes,
    select_topk, sigmoid, snippet_ce_loss, total_loss, Classifier, ClassifierCache, LossConfig,
};
use crate::nn::{Linear, ParamSet};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Visual feature width `D`; also the fused width `C_v`.
    pub visual_dim: usize,
    /// Glance-focus output width `D_f`.
    pub grained_dim: usize,
    /// Text embedding width `D_t`; 0 disables the text stream.
    pub text_dim: usize,
    /// FFN hidden width as a multiple of the block width.
    pub ffn_ratio: usize,
    pub classifier_hidden: [usize; 2],
    /// Neighbourhood radius of the focus block attention.
    pub radius: usize,
    pub dilations: [usize; 3],
    /// Width of every temporal convolution.
    pub conv_width: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::new(2048, 768)
    }
}

impl ModelDims {
    pub fn new(visual_dim: usize, text_dim: usize) -> Self {
        Self {
            visual_dim,
            grained_dim: visual_dim,
            text_dim,
            ffn_ratio: 4,
            classifier_hidden: [512, 32],
            radius: 2,
            dilations: [1, 2, 4],
            conv_width: 3,
        }
    }

    pub fn multimodal_dim(&self) -> usize {
        self.grained_dim + self.text_dim
    }

    pub fn fused_dim(&self) -> usize {
        self.visual_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.visual_dim == 0 || self.grained_dim == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config(
                "visual_dim, grained_dim and ffn_ratio must be positive".into(),
            ));
        }
        if self.classifier_hidden.contains(&0) {
            return Err(Error::Config(
                "classifier hidden sizes must be positive".into(),
            ));
        }
        if !self.visual_dim.is_multiple_of(4) || !self.multimodal_dim().is_multiple_of(4) {
            return Err(Error::Config(format!(
                "MTN inputs must have a multiple of 4 channels (visual {}, multi-modal {})",
                self.visual_dim,
                self.multimodal_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub glance_focus: GlanceFocus<F>,
    pub mtn_visual: Mtn<F>,
    pub mtn_multimodal: Mtn<F>,
    pub fusion: Linear<F>,
    pub classifier: Classifier<F>,
}

impl<F: Real> ParamSet<F> for ModelParams<F> {
    fn visit<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewD<'a, F>),
    ) {
        use crate::nn::join;
        self.glance_focus.visit(&join(prefix, "glance_focus"), f);
        self.mtn_visual.visit(&join(prefix, "mtn_visual"), f);
        self.mtn_multimodal
            .visit(&join(prefix, "mtn_multimodal"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, Option<usize>, ArrayViewMutD<'_, F>),
    ) {
        use crate::nn::join;
        self.glance_focus
            .visit_mut(&join(prefix, "glance_focus"), f);
        self.mtn_visual.visit_mut(&join(prefix, "mtn_visual"), f);
        self.mtn_multimodal
            .visit_mut(&join(prefix, "mtn_multimodal"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

impl<F: Real> ModelParams<F> {
    pub fn zeros(dims: &ModelDims) -> Result<Self> {
        dims.validate()?;
        let d = dims.visual_dim;
        let df = dims.grained_dim;
        let w = dims.conv_width;
        Ok(Self {
            glance_focus: GlanceFocus {
                glance: GlanceBlock::zeros(d, dims.ffn_ratio * d, w)?,
                focus: FocusBlock::zeros(d, df, dims.ffn_ratio * df, w, dims.radius)?,
            },
            mtn_visual: Mtn::zeros(d, &dims.dilations, w)?,
            mtn_multimodal: Mtn::zeros(dims.multimodal_dim(), &dims.dilations, w)?,
            fusion: Linear::zeros(dims.multimodal_dim(), dims.fused_dim()),
            classifier: Classifier::zeros(
                dims.fused_dim(),
                dims.classifier_hidden[0],
                dims.classifier_hidden[1],
            ),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, _, mut a| a.fill(F::zero()));
        z
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, a| n += a.len());
        n
    }

    /// All parameters in visiting order.
    pub fn to_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, a| out.extend(a.iter().copied()));
        out
    }

    pub fn assign_flat(&mut self, flat: &[F]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(
                "assign parameters",
                format!("{} values for {} parameters", flat.len(), self.num_params()),
            ));
        }
        let mut pos = 0;
        self.visit_mut("", &mut |_, _, mut a| {
            for v in a.iter_mut() {
                *v = flat[pos];
                pos += 1;
            }
        });
        Ok(())
    }

    /// Named tensors in visiting order.
    pub fn named_tensors(&self) -> Vec<(String, ArrayD<F>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, _, a| {
            out.push((name.to_string(), a.to_owned()))
        });
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        let mut views = Vec::new();
        other.visit("", &mut |_, _, a| views.push(a));
        let mut i = 0;
        self.visit_mut("", &mut |_, _, mut a| {
            a += &views[i];
            i += 1;
        });
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        self.visit("", &mut |_, _, a| {
            for v in a.iter() {
                m = m.max(v.to_f64_lossless().abs());
            }
        });
        m
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, a| ok &= a.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn cast<G: Real>(&self, dims: &ModelDims) -> Result<ModelParams<G>> {
        let mut out = ModelParams::<G>::zeros(dims)?;
        let flat: Vec<G> = self
            .to_flat()
            .into_iter()
            .map(|v| G::from_f64(v.to_f64_lossless()).expect("finite parameter"))
            .collect();
        out.assign_flat(&flat)?;
        Ok(out)
    }
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_params<F: Real>(dims: &ModelDims, seed: u64) -> Result<ModelParams<F>> {
    let mut params = ModelParams::zeros(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.visit_mut("", &mut |_, fan_in, mut a| {
        if let Some(fan_in) = fan_in {
            let bound = 1.0 / (fan_in as f64).sqrt();
            a.mapv_inplace(|_| F::lit(rng.random_range(-bound..=bound)));
        }
    });
    Ok(params)
}

#[derive(Clone, Debug)]
struct CropCache<F> {
    glance_focus: GlanceFocusCache<F>,
    multimodal: Array2<F>,
    mtn_multimodal: MtnCache<F>,
    x_gm: Array2<F>,
    mtn_visual: MtnCache<F>,
}

/// Everything the forward pass of one video produces.
#[derive(Clone, Debug)]
pub struct VideoForward<F> {
    crops: Vec<CropCache<F>>,
    /// Fused feature `[n_crops, T, C_v]`.
    pub fused: Array3<F>,
    /// Crop-averaged fused feature `[T, C_v]`.
    pub mean: Array2<F>,
    pub magnitudes: Array1<F>,
    pub topk: Vec<usize>,
    pub m_k: f64,
    selected: Array2<F>,
    classifier: ClassifierCache<F>,
    pub logits: Array1<F>,
    /// Unclamped sigmoid of each top-k logit.
    pub probs: Vec<f64>,
}

impl<F: Real> VideoForward<F> {
    pub fn scores(&self, epsilon: f64) -> Vec<f64> {
        self.probs
            .iter()
            .map(|&p| clamp_score(p, epsilon))
            .collect()
    }
}

fn text_stream<F: Real>(text: ArrayView2<F>, dims: &ModelDims) -> Result<Array2<F>> {
    if dims.text_dim == 0 {
        return Ok(Array2::zeros((text.nrows(), 0)));
    }
    if text.ncols() != dims.text_dim {
        return Err(Error::shape(
            "text features",
            format!(
                "text has {} channels, model expects {}",
                text.ncols(),
                dims.text_dim
            ),
        ));
    }
    Ok(text.to_owned())
}

impl<F: Real> ModelParams<F> {
    fn text_dim(&self) -> usize {
        self.mtn_multimodal.channels() - self.glance_focus.output_dim()
    }

    /// Text actually fed to the multi-modal stream (empty when the model has no text stream).
    fn text_input(&self, text: ArrayView2<F>) -> Result<Array2<F>> {
        let dims = ModelDims {
            text_dim: self.text_dim(),
            ..ModelDims::new(self.glance_focus.input_dim(), 0)
        };
        text_stream(text, &dims)
    }

    /// Fused feature `[n_crops, T, C_v]` plus per-crop caches.
    fn fused_with_cache(
        &self,
        features: ArrayView3<F>,
        text: ArrayView2<F>,
    ) -> Result<(Array3<F>, Vec<CropCache<F>>)> {
        let (n_crops, t, d) = features.dim();
        if n_crops == 0 || t == 0 {
            return Err(Error::shape(
                "input",
                format!("empty feature tensor {:?}", features.dim()),
            ));
        }
        if d != self.glance_focus.input_dim() {
            return Err(Error::shape(
                "glance-focus",
                format!(
                    "features have {d} channels, model expects {}",
                    self.glance_focus.input_dim()
                ),
            ));
        }
        if text.nrows() != t {
            return Err(Error::shape(
                "text features",
                format!("{} text rows for {t} snippets", text.nrows()),
            ));
        }
        let text = self.text_input(text)?;
        let tiled = tile_text_features(text.view(), 1);
        let tiled = tiled.index_axis(Axis(0), 0);
        let c_v = self.fusion.output_dim();
        let mut fused = Array3::zeros((n_crops, t, c_v));
        let mut caches = Vec::with_capacity(n_crops);
        for (c, crop) in features.axis_iter(Axis(0)).enumerate() {
            let (grained, glance_focus) = self.glance_focus.forward_crop(crop)?;
            let multimodal = concat_multimodal(
                grained.view().insert_axis(Axis(0)),
                tiled.insert_axis(Axis(0)),
            )?
            .index_axis_move(Axis(0), 0);
            let (x_gm, mtn_multimodal) = self.mtn_multimodal.forward_crop(multimodal.view())?;
            let (x_v, mtn_visual) = self.mtn_visual.forward_crop(crop)?;
            let x = fuse(
                x_gm.view().insert_axis(Axis(0)),
                x_v.view().insert_axis(Axis(0)),
                &self.fusion,
            )?;
            fused
                .index_axis_mut(Axis(0), c)
                .assign(&x.index_axis(Axis(0), 0));
            caches.push(CropCache {
                glance_focus,
                multimodal,
                mtn_multimodal,
                x_gm,
                mtn_visual,
            });
        }
        Ok((fused, caches))
    }

    /// Fused feature `[n_crops, T, C_v]` of one video.
    pub fn fused_features(
        &self,
        features: ArrayView3<F>,
        text: ArrayView2<F>,
    ) -> Result<Array3<F>> {
        Ok(self.fused_with_cache(features, text)?.0)
    }

    /// Full forward pass of one video with top-k selection.
    pub fn forward_video(
        &self,
        features: ArrayView3<F>,
        text: ArrayView2<F>,
        k: usize,
    ) -> Result<VideoForward<F>> {
        let (fused, crops) = self.fused_with_cache(features, text)?;
        let mean = crop_mean(fused.view());
        let magnitudes = row_magnitudes(mean.view());
        let topk =
            select_topk(magnitudes.view(), k).map_err(|e| Error::shape("top-k", e.to_string()))?;
        let m_k = topk
            .iter()
            .map(|&i| magnitudes[i].to_f64_lossless())
            .sum::<f64>()
            / k as f64;
        let selected = mean.select(Axis(0), &topk);
        let (logits, classifier) = self.classifier.logits(selected.view());
        let probs = logits
            .iter()
            .map(|z| sigmoid(z.to_f64_lossless()))
            .collect();
        Ok(VideoForward {
            crops,
            fused,
            mean,
            magnitudes,
            topk,
            m_k,
            selected,
            classifier,
            logits,
            probs,
        })
    }

    /// Classifier score for every snippet of the crop-averaged fused feature.
    pub fn snippet_scores(
        &self,
        features: ArrayView3<F>,
        text: ArrayView2<F>,
        epsilon: f64,
    ) -> Result<Vec<f64>> {
        let fused = self.fused_features(features, text)?;
        let mean = crop_mean(fused.view());
        let (logits, _) = self.classifier.logits(mean.view());
        Ok(logits
            .iter()
            .map(|z| clamp_score(sigmoid(z.to_f64_lossless()), epsilon))
            .collect())
    }

    /// Accumulates parameter gradients of one video given `dL/dm_k` and `dL/dlogit`
    /// for each selected snippet. The top-k selection is held fixed.
    pub fn backward_video(
        &self,
        features: ArrayView3<F>,
        fwd: &VideoForward<F>,
        d_mk: f64,
        d_logits: &Array1<F>,
        grad: &mut Self,
    ) -> Result<()> {
        let k = fwd.topk.len();
        let mut d_mean = Array2::<F>::zeros(fwd.mean.raw_dim());
        let d_selected = self.classifier.backward(
            fwd.selected.view(),
            &fwd.classifier,
            d_logits,
            &mut grad.classifier,
        );
        let mag_scale = F::lit(2.0 * d_mk / k as f64);
        for (row, &t) in fwd.topk.iter().enumerate() {
            let mut dst = d_mean.row_mut(t);
            dst += &d_selected.row(row);
            dst.scaled_add(mag_scale, &fwd.mean.row(t));
        }
        let n_crops = fwd.crops.len();
        let d_x = d_mean / F::from_usize(n_crops).unwrap();
        let d_f = self.glance_focus.output_dim();
        for (c, cache) in fwd.crops.iter().enumerate() {
            let crop = features.index_axis(Axis(0), c);
            // X = FC(X_gm) + X_v
            let d_xgm = self
                .fusion
                .backward(cache.x_gm.view(), d_x.view(), &mut grad.fusion);
            self.mtn_visual.backward_crop(
                crop,
                &cache.mtn_visual,
                d_x.view(),
                &mut grad.mtn_visual,
            );
            let d_multimodal = self.mtn_multimodal.backward_crop(
                cache.multimodal.view(),
                &cache.mtn_multimodal,
                d_xgm.view(),
                &mut grad.mtn_multimodal,
            );
            let d_grained = d_multimodal.slice(s![.., ..d_f]);
            self.glance_focus.backward_crop(
                crop,
                &cache.glance_focus,
                d_grained,
                &mut grad.glance_focus,
            );
        }
        Ok(())
    }
}

/// One training video viewed at the model's precision.
#[derive(Clone, Copy, Debug)]
pub struct VideoSample<'a, F> {
    pub features: ArrayView3<'a, F>,
    pub text: ArrayView2<'a, F>,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    /// Magnitude margin loss `L_v`.
    pub margin: f64,
    /// Top-k snippet cross-entropy `L_s`.
    pub classifier: f64,
}

/// Batch objective without gradients; also returns each video's `m_k`.
pub fn batch_loss<F: Real>(
    params: &ModelParams<F>,
    batch: &[VideoSample<'_, F>],
    cfg: &LossConfig,
) -> Result<(LossRecord, Vec<f64>)> {
    let forwards = forward_batch(params, batch, cfg)?;
    let record = objective(&forwards, batch, cfg);
    Ok((record, forwards.iter().map(|f| f.m_k).collect()))
}

fn forward_batch<F: Real>(
    params: &ModelParams<F>,
    batch: &[VideoSample<'_, F>],
    cfg: &LossConfig,
) -> Result<Vec<VideoForward<F>>> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    batch
        .par_iter()
        .map(|v| params.forward_video(v.features, v.text, cfg.k))
        .collect()
}

fn objective<F: Real>(
    forwards: &[VideoForward<F>],
    batch: &[VideoSample<'_, F>],
    cfg: &LossConfig,
) -> LossRecord {
    let pairs: Vec<(f64, u8)> = forwards
        .iter()
        .zip(batch)
        .map(|(f, v)| (f.m_k, v.label))
        .collect();
    let margin = batch_margin_loss(&pairs, cfg.margin);
    let classifier = forwards
        .iter()
        .zip(batch)
        .map(|(f, v)| snippet_ce_loss(&f.probs, v.label, cfg.epsilon))
        .sum();
    LossRecord {
        total: total_loss(margin, classifier, cfg.alpha),
        margin,
        classifier,
    }
}

/// Batch objective `alpha * L_v + L_s` and its gradient with respect to every parameter.
pub fn batch_loss_and_grad<F: Real>(
    params: &ModelParams<F>,
    batch: &[VideoSample<'_, F>],
    cfg: &LossConfig,
) -> Result<(LossRecord, ModelParams<F>)> {
    let forwards = forward_batch(params, batch, cfg)?;
    let record = objective(&forwards, batch, cfg);
    let pairs: Vec<(f64, u8)> = forwards
        .iter()
        .zip(batch)
        .map(|(f, v)| (f.m_k, v.label))
        .collect();
    let d_mk = batch_margin_grad(&pairs, cfg.margin);
    let per_video: Vec<ModelParams<F>> = forwards
        .par_iter()
        .zip(batch.par_iter())
        .zip(d_mk.par_iter())
        .map(|((fwd, v), &dm)| {
            let d_logits = fwd
                .logits
                .mapv(|z| F::lit(ce_logit_grad(z.to_f64_lossless(), v.label, cfg.epsilon)));
            let mut g = params.zeros_like();
            params.backward_video(v.features, fwd, cfg.alpha * dm, &d_logits, &mut g)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    // fixed-order reduction keeps results independent of thread scheduling
    let mut grad = params.zeros_like();
    for g in &per_video {
        grad.add_assign(g);
    }
    Ok((record, grad))
}
