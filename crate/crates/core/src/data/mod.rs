//! Videos as features: file format, manifests, synthetic data and the
//! snippet/frame bookkeeping shared by training and evaluation.

pub mod format;
pub mod manifest;
pub mod synth;

use ndarray::{Array2, Array3, ArrayView2, Axis};

pub use format::{read_feature_file, write_feature_file};
pub use manifest::{load_manifest, Manifest, Split, VideoRecord};
pub use synth::{generate_synthetic_dataset, AnomalyChannel, SyntheticSpec};

use crate::error::{Error, Result};
use crate::SNIPPET_FRAMES;

/// Repeats per-snippet text embeddings once per visual crop: `[T, D_t] -> [n_crops, T, D_t]`.
pub fn tile_text_features<F: Clone>(text: ArrayView2<F>, n_crops: usize) -> Array3<F> {
    text.insert_axis(Axis(0))
        .broadcast((n_crops, text.nrows(), text.ncols()))
        .expect("broadcast along a new leading axis")
        .to_owned()
}

/// Expands snippet scores to frames; frame `f` takes the score of snippet `f / 16`.
pub fn snippet_to_frame_scores(scores: &[f64], num_frames: usize) -> Result<Vec<f64>> {
    manifest::frames_match_snippets(num_frames, scores.len())
        .map_err(|m| Error::shape("snippet_to_frame_scores", m))?;
    Ok((0..num_frames)
        .map(|f| scores[f / SNIPPET_FRAMES])
        .collect())
}

/// Features of one video, loaded and checked against its record.
#[derive(Clone, Debug)]
pub struct VideoData {
    pub record: VideoRecord,
    /// `[n_crops, T, D]`
    pub features: Array3<f32>,
    /// `[T, D_t]`
    pub text: Array2<f32>,
}

impl VideoData {
    pub fn new(record: VideoRecord, features: Array3<f32>, text: Array2<f32>) -> Result<Self> {
        let (crops, t, d) = features.dim();
        if crops == 0 || t == 0 || d == 0 {
            return Err(Error::shape(
                "load video",
                format!(
                    "{}: empty feature tensor {:?}",
                    record.video_id,
                    features.dim()
                ),
            ));
        }
        if text.nrows() != t {
            return Err(Error::shape(
                "load video",
                format!(
                    "{}: {} text rows for {t} snippets",
                    record.video_id,
                    text.nrows()
                ),
            ));
        }
        if features.iter().chain(text.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        record.check_snippets(t)?;
        Ok(Self {
            record,
            features,
            text,
        })
    }

    pub fn snippets(&self) -> usize {
        self.features.dim().1
    }
}

/// Reads every video referenced by `manifest`.
pub fn load_videos(manifest: &Manifest) -> Result<Vec<VideoData>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let features = format::read_rank3(&manifest.resolve(&r.feature_path))?;
            let text = format::read_rank2(&manifest.resolve(&r.text_path))?;
            VideoData::new(r.clone(), features, text)
        })
        .collect()
}
