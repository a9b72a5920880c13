//! JSON-lines dataset manifests.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::SNIPPET_FRAMES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub video_id: String,
    /// 0 normal, 1 abnormal.
    pub label: u8,
    pub feature_path: PathBuf,
    pub text_path: PathBuf,
    pub num_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_labels: Option<Vec<u8>>,
}

impl VideoRecord {
    pub fn is_abnormal(&self) -> bool {
        self.label == 1
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.label > 1 {
            return Err(format!("label must be 0 or 1, got {}", self.label));
        }
        if self.num_frames == 0 {
            return Err("num_frames must be positive".into());
        }
        if let Some(labels) = &self.frame_labels {
            if labels.len() != self.num_frames {
                return Err(format!(
                    "frame_labels has {} entries but num_frames is {}",
                    labels.len(),
                    self.num_frames
                ));
            }
            if labels.iter().any(|&l| l > 1) {
                return Err("frame_labels entries must be 0 or 1".into());
            }
        }
        Ok(())
    }

    /// Checks that `num_frames` is covered by exactly `snippets` snippets.
    pub fn check_snippets(&self, snippets: usize) -> Result<()> {
        frames_match_snippets(self.num_frames, snippets).map_err(|message| {
            Error::shape("video record", format!("{}: {message}", self.video_id))
        })
    }
}

pub(crate) fn frames_match_snippets(
    num_frames: usize,
    snippets: usize,
) -> std::result::Result<(), String> {
    if snippets == 0
        || num_frames > SNIPPET_FRAMES * snippets
        || num_frames <= SNIPPET_FRAMES * (snippets - 1)
    {
        return Err(format!(
            "{num_frames} frames cannot be covered by {snippets} snippets of {SNIPPET_FRAMES} frames"
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<VideoRecord>,
    pub split: Split,
    /// Directory relative record paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(
        records: Vec<VideoRecord>,
        split: Split,
        base_dir: impl Into<PathBuf>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.video_id.as_str()) {
                return Err(Error::DuplicateVideoId(r.video_id.clone()));
            }
        }
        Ok(Self {
            records,
            split,
            base_dir: base_dir.into(),
        })
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn count_abnormal(&self) -> usize {
        self.records.iter().filter(|r| r.is_abnormal()).count()
    }

    pub fn count_normal(&self) -> usize {
        self.records.len() - self.count_abnormal()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Parses manifest text. The split is `Test` when every record carries frame labels
/// (and there is at least one record), `Train` otherwise.
pub fn parse_manifest(text: &str, base_dir: impl Into<PathBuf>) -> Result<Manifest> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: VideoRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        record.validate().map_err(|message| Error::Manifest {
            line: i + 1,
            message,
        })?;
        records.push(record);
    }
    let split = if !records.is_empty() && records.iter().all(|r| r.frame_labels.is_some()) {
        Split::Test
    } else {
        Split::Train
    };
    Manifest::new(records, split, base_dir)
}

/// Loads a manifest; record files are not opened.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"{"video_id":"a","label":0,"feature_path":"f/a.gmfv","text_path":"t/a.gmfv","num_frames":32}
{"video_id":"b","label":1,"feature_path":"f/b.gmfv","text_path":"t/b.gmfv","num_frames":20}
"#;

    #[test]
    fn parses_two_records() {
        let m = parse_manifest(TWO, "/data").unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.count_normal(), 1);
        assert_eq!(m.count_abnormal(), 1);
        assert_eq!(m.split, Split::Train);
        assert_eq!(
            m.resolve(&m.records[0].feature_path),
            PathBuf::from("/data/f/a.gmfv")
        );
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = TWO.replace("\"b\"", "\"a\"");
        assert!(
            matches!(parse_manifest(&text, "."), Err(Error::DuplicateVideoId(id)) if id == "a")
        );
    }

    #[test]
    fn empty_file_is_valid() {
        let m = parse_manifest("", ".").unwrap();
        assert!(m.records.is_empty());
    }

    #[test]
    fn malformed_and_missing_fields_rejected() {
        assert!(matches!(
            parse_manifest("{not json", "."),
            Err(Error::Manifest { line: 1, .. })
        ));
        let missing = r#"{"video_id":"a","label":0,"feature_path":"x","text_path":"y"}"#;
        assert!(matches!(
            parse_manifest(missing, "."),
            Err(Error::Manifest { .. })
        ));
    }

    #[test]
    fn frame_label_length_checked() {
        let bad = r#"{"video_id":"a","label":1,"feature_path":"x","text_path":"y","num_frames":3,"frame_labels":[0,1]}"#;
        assert!(matches!(
            parse_manifest(bad, "."),
            Err(Error::Manifest { .. })
        ));
        let good = r#"{"video_id":"a","label":1,"feature_path":"x","text_path":"y","num_frames":2,"frame_labels":[0,1]}"#;
        assert_eq!(parse_manifest(good, ".").unwrap().split, Split::Test);
    }

    #[test]
    fn snippet_coverage() {
        assert!(frames_match_snippets(16, 1).is_ok());
        assert!(frames_match_snippets(17, 2).is_ok());
        assert!(frames_match_snippets(16, 2).is_err());
        assert!(frames_match_snippets(33, 2).is_err());
    }
}
