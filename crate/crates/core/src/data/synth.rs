//! Synthetic datasets with known anomaly windows.
//!
//! Every feature entry is drawn from N(0, 1). Abnormal videos add `shift_magnitude`
//! to every entry of the snippets inside the anomaly window, on the visual features,
//! the text features, or both.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::format::write_feature_file;
use super::manifest::{Manifest, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::SNIPPET_FRAMES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyChannel {
    Visual,
    Text,
    Both,
}

impl AnomalyChannel {
    pub fn shifts_visual(self) -> bool {
        matches!(self, AnomalyChannel::Visual | AnomalyChannel::Both)
    }

    pub fn shifts_text(self) -> bool {
        matches!(self, AnomalyChannel::Text | AnomalyChannel::Both)
    }
}

impl FromStr for AnomalyChannel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "visual" => Ok(Self::Visual),
            "text" => Ok(Self::Text),
            "both" => Ok(Self::Both),
            other => Err(format!(
                "unknown channel {other:?} (expected visual, text or both)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub n_test_normal: usize,
    pub n_test_abnormal: usize,
    pub snippets: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub n_crops: usize,
    /// Half-open snippet range `[start, end)`.
    pub anomaly_window: (usize, usize),
    pub anomaly_channel: AnomalyChannel,
    pub shift_magnitude: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (start, end) = self.anomaly_window;
        if self.snippets == 0 || self.visual_dim == 0 || self.n_crops == 0 {
            return Err(Error::Config(
                "snippets, visual_dim and n_crops must be positive".into(),
            ));
        }
        if start >= end || end > self.snippets {
            return Err(Error::Config(format!(
                "anomaly window {start}:{end} must satisfy 0 <= start < end <= {}",
                self.snippets
            )));
        }
        if !(self.shift_magnitude.is_finite() && self.shift_magnitude >= 0.0) {
            return Err(Error::Config(
                "shift_magnitude must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn in_window(&self, snippet: usize) -> bool {
        (self.anomaly_window.0..self.anomaly_window.1).contains(&snippet)
    }
}

/// One generated video, kept in memory.
#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub record: VideoRecord,
    pub features: Array3<f32>,
    pub text: Array2<f32>,
}

fn sample_video(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    video_id: String,
    abnormal: bool,
    with_frame_labels: bool,
) -> SyntheticVideo {
    let t = spec.snippets;
    let mut features = Array3::<f32>::zeros((spec.n_crops, t, spec.visual_dim));
    features
        .iter_mut()
        .for_each(|v| *v = rng.sample(StandardNormal));
    let mut text = Array2::<f32>::zeros((t, spec.text_dim));
    text.iter_mut()
        .for_each(|v| *v = rng.sample(StandardNormal));
    let num_frames = SNIPPET_FRAMES * (t - 1) + rng.random_range(1..=SNIPPET_FRAMES);

    let (start, end) = spec.anomaly_window;
    if abnormal {
        if spec.anomaly_channel.shifts_visual() {
            features
                .slice_mut(s![.., start..end, ..])
                .mapv_inplace(|v| v + spec.shift_magnitude);
        }
        if spec.anomaly_channel.shifts_text() {
            text.slice_mut(s![start..end, ..])
                .mapv_inplace(|v| v + spec.shift_magnitude);
        }
    }
    let frame_labels = with_frame_labels.then(|| {
        (0..num_frames)
            .map(|f| u8::from(abnormal && spec.in_window(f / SNIPPET_FRAMES)))
            .collect()
    });
    SyntheticVideo {
        record: VideoRecord {
            feature_path: PathBuf::from("features").join(format!("{video_id}.gmfv")),
            text_path: PathBuf::from("text").join(format!("{video_id}.gmfv")),
            video_id,
            label: u8::from(abnormal),
            num_frames,
            frame_labels,
        },
        features,
        text,
    }
}

/// Draws the train and test videos in a fixed order: train normals, train
/// abnormals, test normals, test abnormals.
pub fn sample_dataset(spec: &SyntheticSpec) -> Result<(Vec<SyntheticVideo>, Vec<SyntheticVideo>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw =
        |split: &str, n: usize, abnormal: bool, labels: bool, out: &mut Vec<SyntheticVideo>| {
            let kind = if abnormal { "abnormal" } else { "normal" };
            for i in 0..n {
                out.push(sample_video(
                    spec,
                    &mut rng,
                    format!("{split}_{kind}_{i:04}"),
                    abnormal,
                    labels,
                ));
            }
        };
    let mut train = Vec::new();
    draw("train", spec.n_normal, false, false, &mut train);
    draw("train", spec.n_abnormal, true, false, &mut train);
    let mut test = Vec::new();
    draw("test", spec.n_test_normal, false, true, &mut test);
    draw("test", spec.n_test_abnormal, true, true, &mut test);
    Ok((train, test))
}

/// Writes `train.jsonl`, `test.jsonl` and the feature files under `out_dir`.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSpec,
    out_dir: &Path,
) -> Result<(Manifest, Manifest)> {
    let (train, test) = sample_dataset(spec)?;
    for sub in ["features", "text"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let write_split = |videos: Vec<SyntheticVideo>, split: Split, name: &str| -> Result<Manifest> {
        let mut records = Vec::with_capacity(videos.len());
        for v in videos {
            write_feature_file(&v.features.view(), &out_dir.join(&v.record.feature_path))?;
            write_feature_file(&v.text.view(), &out_dir.join(&v.record.text_path))?;
            records.push(v.record);
        }
        let manifest = Manifest::new(records, split, out_dir)?;
        manifest.save(&out_dir.join(name))?;
        Ok(manifest)
    };
    let train = write_split(train, Split::Train, "train.jsonl")?;
    let test = write_split(test, Split::Test, "test.jsonl")?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(channel: AnomalyChannel, shift: f32) -> SyntheticSpec {
        SyntheticSpec {
            n_normal: 3,
            n_abnormal: 40,
            n_test_normal: 2,
            n_test_abnormal: 2,
            snippets: 8,
            visual_dim: 6,
            text_dim: 4,
            n_crops: 2,
            anomaly_window: (2, 5),
            anomaly_channel: channel,
            shift_magnitude: shift,
            seed: 11,
        }
    }

    #[test]
    fn window_must_be_ordered() {
        let mut s = spec(AnomalyChannel::Both, 1.0);
        s.anomaly_window = (5, 5);
        assert!(s.validate().is_err());
        s.anomaly_window = (0, 9);
        assert!(s.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = sample_dataset(&spec(AnomalyChannel::Both, 2.0)).unwrap();
        let b = sample_dataset(&spec(AnomalyChannel::Both, 2.0)).unwrap();
        for (x, y) in a.0.iter().zip(&b.0).chain(a.1.iter().zip(&b.1)) {
            assert_eq!(x.record, y.record);
            assert_eq!(x.features, y.features);
            assert_eq!(x.text, y.text);
        }
    }

    #[test]
    fn text_channel_shift_statistics() {
        let s = spec(AnomalyChannel::Text, 3.0);
        let (train, _) = sample_dataset(&s).unwrap();
        let (mut tin, mut tout, mut vin, mut vout) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for v in train.iter().filter(|v| v.record.label == 1) {
            for t in 0..s.snippets {
                let (tt, vv) = if s.in_window(t) {
                    (&mut tin, &mut vin)
                } else {
                    (&mut tout, &mut vout)
                };
                tt.extend(v.text.row(t).iter().map(|&x| x as f64));
                vv.extend(v.features.slice(s![.., t, ..]).iter().map(|&x| x as f64));
            }
        }
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        // unit variance per entry, so stderr of a difference of means is sqrt(1/n1 + 1/n2)
        let stderr = |a: &[f64], b: &[f64]| (1.0 / a.len() as f64 + 1.0 / b.len() as f64).sqrt();
        let text_diff = mean(&tin) - mean(&tout);
        assert!(
            (text_diff - 3.0).abs() <= 3.0 * stderr(&tin, &tout),
            "text diff {text_diff}"
        );
        let vis_diff = mean(&vin) - mean(&vout);
        assert!(
            vis_diff.abs() <= 3.0 * stderr(&vin, &vout),
            "visual diff {vis_diff}"
        );
    }

    #[test]
    fn frame_labels_mark_window_frames() {
        let s = spec(AnomalyChannel::Visual, 1.0);
        let (train, test) = sample_dataset(&s).unwrap();
        assert!(train.iter().all(|v| v.record.frame_labels.is_none()));
        for v in &test {
            let labels = v.record.frame_labels.as_ref().unwrap();
            assert_eq!(labels.len(), v.record.num_frames);
            v.record.check_snippets(s.snippets).unwrap();
            for (f, &l) in labels.iter().enumerate() {
                let expected = v.record.label == 1 && (32..80).contains(&f);
                assert_eq!(l == 1, expected);
            }
        }
    }

    #[test]
    fn writes_identical_files_for_identical_specs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let s = spec(AnomalyChannel::Both, 2.0);
        let (train, test) = generate_synthetic_dataset(&s, a.path()).unwrap();
        generate_synthetic_dataset(&s, b.path()).unwrap();
        assert_eq!(train.records.len(), 43);
        assert_eq!(test.split, Split::Test);
        for r in train.records.iter().chain(&test.records) {
            for p in [&r.feature_path, &r.text_path] {
                assert_eq!(
                    fs::read(a.path().join(p)).unwrap(),
                    fs::read(b.path().join(p)).unwrap()
                );
            }
        }
        for m in ["train.jsonl", "test.jsonl"] {
            assert_eq!(
                fs::read(a.path().join(m)).unwrap(),
                fs::read(b.path().join(m)).unwrap()
            );
        }
    }
}
