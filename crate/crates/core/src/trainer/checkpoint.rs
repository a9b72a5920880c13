//! Checkpoint files: a binary container of named GMFV tensors plus a JSON sidecar.
//!
//! Container layout: magic `GMFC`, `u32` version (1), `u32` tensor count, then for
//! each tensor a `u32` name length, the UTF-8 name and a complete GMFV record.
//! Rank-1 tensors are stored as `[1, n]`. The sidecar lives at `<path>.json`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::TrainConfig;
use crate::data::format;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::nn::ParamSet;

const MAGIC: [u8; 4] = *b"GMFC";
const VERSION: u32 = 1;

/// Position of the training shuffler's random stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// `u128` word position, decimal.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optimizer: AdamState<f32>,
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: TrainConfig,
    epoch: usize,
    optimizer_step: u64,
    rng: RngState,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn push_tensor(out: &mut Vec<u8>, name: &str, array: &ArrayD<f32>) -> Result<()> {
    let stored = if array.ndim() == 1 {
        array
            .to_shape(IxDyn(&[1, array.len()]))
            .expect("row vector")
            .to_owned()
    } else {
        array.clone()
    };
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&format::encode(&stored.view())?);
    Ok(())
}

impl Checkpoint {
    fn tensors(&self) -> Result<Vec<(String, ArrayD<f32>)>> {
        let mut tensors = self.params.named_tensors();
        for (prefix, flat) in [("adam.m", &self.optimizer.m), ("adam.v", &self.optimizer.v)] {
            let mut shaped = self.params.clone();
            shaped.assign_flat(flat)?;
            tensors.extend(
                shaped
                    .named_tensors()
                    .into_iter()
                    .map(|(name, t)| (format!("{prefix}.{name}"), t)),
            );
        }
        Ok(tensors)
    }

    pub fn to_bytes(&self) -> Result<(Vec<u8>, String)> {
        let tensors = self.tensors()?;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            push_tensor(&mut bytes, name, t)?;
        }
        let sidecar = Sidecar {
            config: self.config.clone(),
            epoch: self.epoch,
            optimizer_step: self.optimizer.step,
            rng: self.rng.clone(),
        };
        let mut json = serde_json::to_string_pretty(&sidecar)?;
        json.push('\n');
        Ok((bytes, json))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (bytes, json) = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn from_bytes(bytes: &[u8], json: &str) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_str(json)?;
        let tensors = parse_container(bytes)?;
        let mut params = ModelParams::<f32>::zeros(&sidecar.config.dims)?;
        let fill = |target: &mut ModelParams<f32>, prefix: &str| -> Result<()> {
            let mut result = Ok(());
            target.visit_mut("", &mut |name, _, mut slot| {
                let key = if prefix.is_empty() {
                    name.to_string()
                } else {
                    format!("{prefix}.{name}")
                };
                match tensors.get(&key) {
                    Some(t)
                        if t.len() == slot.len()
                            && (t.shape() == slot.shape() || slot.ndim() == 1) =>
                    {
                        slot.iter_mut().zip(t.iter()).for_each(|(d, s)| *d = *s);
                    }
                    Some(t) => {
                        result = Err(Error::shape(
                            "checkpoint",
                            format!(
                                "{key}: stored {:?}, model expects {:?}",
                                t.shape(),
                                slot.shape()
                            ),
                        ))
                    }
                    None => {
                        result = Err(Error::shape("checkpoint", format!("missing tensor {key}")))
                    }
                }
            });
            result
        };
        fill(&mut params, "")?;
        let mut m = params.zeros_like();
        fill(&mut m, "adam.m")?;
        let mut v = params.zeros_like();
        fill(&mut v, "adam.v")?;
        let expected = 3 * params.named_tensors().len();
        if tensors.len() != expected {
            return Err(Error::shape(
                "checkpoint",
                format!("{} tensors stored, {expected} expected", tensors.len()),
            ));
        }
        Ok(Self {
            params,
            optimizer: AdamState {
                step: sidecar.optimizer_step,
                m: m.to_flat(),
                v: v.to_flat(),
            },
            config: sidecar.config,
            epoch: sidecar.epoch,
            rng: sidecar.rng,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        Self::from_bytes(&bytes, &json)
    }
}

fn parse_container(bytes: &[u8]) -> Result<HashMap<String, ArrayD<f32>>> {
    let need = |pos: usize, n: usize| {
        if bytes.len() < pos + n {
            Err(Error::Truncated {
                expected: pos + n,
                actual: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(0, 12)?;
    if bytes[0..4] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[0..4].try_into().unwrap(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut out = HashMap::with_capacity(count);
    for _ in 0..count {
        need(pos, 4)?;
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        need(pos, len)?;
        let name = std::str::from_utf8(&bytes[pos..pos + len])
            .map_err(|e| Error::shape("checkpoint", e.to_string()))?
            .to_string();
        pos += len;
        let (array, used) = format::decode_prefix(&bytes[pos..])?;
        pos += used;
        out.insert(name, array);
    }
    if pos != bytes.len() {
        return Err(Error::Truncated {
            expected: pos,
            actual: bytes.len(),
        });
    }
    Ok(out)
}
