//! Inference, frame-level score export and pooled ROC-AUC / average precision.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_videos, snippet_to_frame_scores, Manifest, VideoData};
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub video_id: String,
    pub frame_scores: Vec<f64>,
    pub frame_labels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub ap: f64,
    pub n_frames: usize,
    pub n_positive: usize,
}

/// Anomaly score for every snippet of a video.
pub fn infer_video(params: &ModelParams<f32>, video: &VideoData, epsilon: f64) -> Result<Vec<f64>> {
    params.snippet_scores(video.features.view(), video.text.view(), epsilon)
}

fn pooled(records: &[ScoreRecord]) -> (Vec<f64>, Vec<u8>) {
    let scores = records
        .iter()
        .flat_map(|r| r.frame_scores.iter().copied())
        .collect();
    let labels = records
        .iter()
        .flat_map(|r| r.frame_labels.iter().copied())
        .collect();
    (scores, labels)
}

/// Sorts `(score, label)` pairs by score and yields `(positives, negatives)` per tie group.
fn tie_groups(scores: &[f64], labels: &[u8], descending: bool) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| {
        let o = a.0.total_cmp(&b.0);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev = None;
    for (s, l) in pairs {
        if prev != Some(s) {
            groups.push((0, 0));
            prev = Some(s);
        }
        let g = groups.last_mut().unwrap();
        if l == 1 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// ROC-AUC as the Mann-Whitney statistic; tied positive/negative pairs count 1/2.
pub fn roc_auc_scores(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "ROC-AUC needs both positive and negative frames",
        ));
    }
    let mut negatives_below = 0usize;
    let mut concordant = 0.0f64;
    for (pos, neg) in tie_groups(scores, labels, false) {
        concordant += pos as f64 * negatives_below as f64 + 0.5 * (pos * neg) as f64;
        negatives_below += neg;
    }
    Ok(concordant / (n_pos as f64 * n_neg as f64))
}

/// Step-wise average precision `sum (R_n - R_{n-1}) P_n` over descending thresholds.
pub fn average_precision_scores(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(Error::Metric(
            "average precision needs at least one positive frame",
        ));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (pos, neg) in tie_groups(scores, labels, true) {
        tp += pos;
        fp += neg;
        if pos > 0 {
            ap += (pos as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// Pooled (micro) ROC-AUC over every frame of every record.
pub fn roc_auc(records: &[ScoreRecord]) -> Result<f64> {
    let (s, l) = pooled(records);
    roc_auc_scores(&s, &l)
}

pub fn average_precision(records: &[ScoreRecord]) -> Result<f64> {
    let (s, l) = pooled(records);
    average_precision_scores(&s, &l)
}

pub fn metrics(records: &[ScoreRecord]) -> Result<MetricsReport> {
    let (s, l) = pooled(records);
    Ok(MetricsReport {
        auc: roc_auc_scores(&s, &l)?,
        ap: average_precision_scores(&s, &l)?,
        n_frames: l.len(),
        n_positive: l.iter().filter(|&&v| v == 1).count(),
    })
}

/// Frame-level scores for already loaded videos; labels default to empty when absent.
pub fn score_videos(
    params: &ModelParams<f32>,
    videos: &[VideoData],
    epsilon: f64,
) -> Result<Vec<ScoreRecord>> {
    videos
        .iter()
        .map(|v| {
            let snippets = infer_video(params, v, epsilon)?;
            Ok(ScoreRecord {
                video_id: v.record.video_id.clone(),
                frame_scores: snippet_to_frame_scores(&snippets, v.record.num_frames)?,
                frame_labels: v.record.frame_labels.clone().unwrap_or_default(),
            })
        })
        .collect()
}

/// Scores every test video, pools frames and computes AUC and AP. Writes the
/// per-frame score CSV when `csv_out` is given.
pub fn evaluate_dataset(
    params: &ModelParams<f32>,
    manifest: &Manifest,
    epsilon: f64,
    csv_out: Option<&Path>,
) -> Result<(MetricsReport, Vec<ScoreRecord>)> {
    if let Some(r) = manifest.records.iter().find(|r| r.frame_labels.is_none()) {
        return Err(Error::MissingFrameLabels(r.video_id.clone()));
    }
    let videos = load_videos(manifest)?;
    let records = score_videos(params, &videos, epsilon)?;
    if let Some(path) = csv_out {
        write_score_csv(&records, path)?;
    }
    Ok((metrics(&records)?, records))
}

pub const CSV_HEADER: [&str; 4] = ["video_id", "frame_index", "score", "label"];

/// Encodes records as score CSV. Records without labels get an empty label column.
pub fn score_csv_bytes(records: &[ScoreRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv {
        line: 0,
        message: e.to_string(),
    };
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        for (i, s) in r.frame_scores.iter().enumerate() {
            let label = r
                .frame_labels
                .get(i)
                .map(|l| l.to_string())
                .unwrap_or_default();
            // `{}` on f64 is the shortest representation that parses back exactly
            w.write_record([r.video_id.as_str(), &i.to_string(), &s.to_string(), &label])
                .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Csv {
        line: 0,
        message: e.to_string(),
    })
}

pub fn write_score_csv(records: &[ScoreRecord], path: &Path) -> Result<()> {
    let bytes = score_csv_bytes(records)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Parses score CSV, grouping consecutive rows of one video into a record.
pub fn parse_score_csv(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut rows = rdr.records();
    let err = |line: usize, message: String| Error::Csv { line, message };
    match rows.next() {
        Some(Ok(h)) if h.iter().eq(CSV_HEADER) => {}
        Some(Ok(h)) => {
            return Err(err(
                1,
                format!("expected header {}, found {:?}", CSV_HEADER.join(","), h),
            ))
        }
        Some(Err(e)) => return Err(err(1, e.to_string())),
        None => return Err(err(1, "missing header".into())),
    }
    let mut records: Vec<ScoreRecord> = Vec::new();
    for (i, row) in rows.enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| err(line, e.to_string()))?;
        if row.len() != 4 {
            return Err(err(line, format!("expected 4 fields, found {}", row.len())));
        }
        let frame: usize = row[1]
            .parse()
            .map_err(|_| err(line, format!("bad frame_index {:?}", &row[1])))?;
        let score: f64 = row[2]
            .parse()
            .map_err(|_| err(line, format!("bad score {:?}", &row[2])))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(err(line, format!("score {score} outside [0, 1]")));
        }
        let label: u8 = match &row[3] {
            "0" => 0,
            "1" => 1,
            other => return Err(err(line, format!("label must be 0 or 1, found {other:?}"))),
        };
        let id = &row[0];
        if records.last().map(|r| r.video_id.as_str()) != Some(id) {
            if records.iter().any(|r| r.video_id == id) {
                return Err(err(
                    line,
                    format!("rows of video {id:?} are not contiguous"),
                ));
            }
            records.push(ScoreRecord {
                video_id: id.to_string(),
                frame_scores: Vec::new(),
                frame_labels: Vec::new(),
            });
        }
        let rec = records.last_mut().unwrap();
        if frame != rec.frame_scores.len() {
            return Err(err(
                line,
                format!(
                    "expected frame_index {}, found {frame}",
                    rec.frame_scores.len()
                ),
            ));
        }
        rec.frame_scores.push(score);
        rec.frame_labels.push(label);
    }
    Ok(records)
}

pub fn read_score_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_score_csv(&text)
}
