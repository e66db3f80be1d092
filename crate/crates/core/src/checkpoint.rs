//! Single-file checkpoint: magic, manifest length, a JSON manifest and a
//! little-endian f32 payload.
//!
//! ```text
//! b"GFCKPT\0\0" | u64 LE manifest length | manifest (UTF-8 JSON) | payload
//! ```
//!
//! The manifest lists every tensor with its byte range in the payload.
//! Serialization is deterministic, so load followed by save reproduces the
//! file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, Standardizer};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{AdamState, Classifier, Moments};

pub const MAGIC: &[u8; 8] = b"GFCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: BTreeMap<String, u64>,
}

/// Run randomness is derived from the seed and the epoch counter, so these
/// two values are the whole RNG state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub epochs_completed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub run_config: serde_json::Value,
    pub model: ModelConfig,
    pub feature_names: Vec<String>,
    pub feature_config: FeatureConfig,
    pub standardizer: Option<Standardizer>,
    pub optimizer: Option<OptimizerMeta>,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub classifier: Classifier,
    pub optimizer: Option<AdamState>,
    /// Fully resolved configuration of the run that produced this model.
    pub run_config: serde_json::Value,
    pub rng: RngState,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct PayloadWriter {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl PayloadWriter {
    fn push(&mut self, name: &str, kind: TensorKind, t: &Tensor<f32>, trainable: Option<bool>) {
        let offset = self.bytes.len() as u64;
        for v in t.data() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            length: self.bytes.len() as u64 - offset,
            trainable,
        });
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let clf = &self.classifier;
        let mut w = PayloadWriter {
            bytes: Vec::new(),
            entries: Vec::new(),
        };
        for (name, p) in clf.model.params.iter() {
            w.push(name, TensorKind::Param, &p.value, Some(p.trainable));
        }
        for (name, b) in &clf.model.buffers {
            w.push(name, TensorKind::Buffer, b, None);
        }
        let optimizer = self.optimizer.as_ref().map(|opt| {
            for (name, m) in &opt.moments {
                w.push(name, TensorKind::AdamM, &m.m, None);
                w.push(name, TensorKind::AdamV, &m.v, None);
            }
            OptimizerMeta {
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                steps: opt.moments.iter().map(|(k, m)| (k.clone(), m.step)).collect(),
            }
        });
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            run_config: self.run_config.clone(),
            model: clf.model.config.clone(),
            feature_names: clf.feature_names.clone(),
            feature_config: clf.feature_config.clone(),
            standardizer: clf.standardizer.clone(),
            optimizer,
            rng: self.rng,
            tensors: w.entries,
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + w.bytes.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&w.bytes);
        Ok(out)
    }

    /// Split a file into its manifest and payload without interpreting the
    /// tensors.
    pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(ckpt_err("not a checkpoint file (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if len > body.len() {
            return Err(ckpt_err(format!(
                "manifest length {len} exceeds file size {}",
                bytes.len()
            )));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..len]).map_err(|e| ckpt_err(format!("bad manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ckpt_err(format!(
                "format version {} not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        Ok((manifest, &body[len..]))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = Self::read_manifest(bytes)?;
        check_layout(&manifest.tensors, payload.len())?;

        let mut model = Model::new(manifest.model.clone(), 0)
            .map_err(|e| ckpt_err(format!("stored model config is invalid: {e}")))?;
        let expected = model.config.features.names();
        if manifest.feature_names != expected {
            return Err(ckpt_err(format!(
                "feature names {:?} do not match the {:?} set of the model",
                manifest.feature_names, model.config.features
            )));
        }
        if model.config.variant.uses_clinical() {
            match &manifest.standardizer {
                Some(s) if s.dim() == expected.len() && s.std.len() == expected.len() => {}
                Some(s) => {
                    return Err(ckpt_err(format!(
                        "standardizer has {} features, model expects {}",
                        s.dim(),
                        expected.len()
                    )))
                }
                None => return Err(ckpt_err("model has a clinical stream but no standardizer stats")),
            }
        }

        let read = |e: &TensorEntry| -> Result<Tensor<f32>> {
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            Tensor::new(e.shape.clone(), data).map_err(|err| ckpt_err(format!("tensor {}: {err}", e.name)))
        };

        let mut seen_params = 0;
        let mut seen_buffers = 0;
        let mut moments: BTreeMap<String, (Option<Tensor<f32>>, Option<Tensor<f32>>)> = BTreeMap::new();
        for e in &manifest.tensors {
            let t = read(e)?;
            match e.kind {
                TensorKind::Param => {
                    let p = model
                        .params
                        .get_mut(&e.name)
                        .map_err(|_| ckpt_err(format!("unexpected parameter {}", e.name)))?;
                    if p.value.shape() != t.shape() {
                        return Err(ckpt_err(format!(
                            "parameter {} has shape {:?}, model expects {:?}",
                            e.name,
                            t.shape(),
                            p.value.shape()
                        )));
                    }
                    p.value = t;
                    p.trainable = e.trainable.unwrap_or(true);
                    seen_params += 1;
                }
                TensorKind::Buffer => {
                    let b = model
                        .buffers
                        .get_mut(&e.name)
                        .ok_or_else(|| ckpt_err(format!("unexpected buffer {}", e.name)))?;
                    if b.shape() != t.shape() {
                        return Err(ckpt_err(format!("buffer {} has the wrong shape", e.name)));
                    }
                    *b = t;
                    seen_buffers += 1;
                }
                TensorKind::AdamM => moments.entry(e.name.clone()).or_default().0 = Some(t),
                TensorKind::AdamV => moments.entry(e.name.clone()).or_default().1 = Some(t),
            }
        }
        if seen_params != model.params.len() || seen_buffers != model.buffers.len() {
            return Err(ckpt_err(format!(
                "checkpoint has {seen_params}/{} parameters and {seen_buffers}/{} buffers",
                model.params.len(),
                model.buffers.len()
            )));
        }

        let optimizer = match manifest.optimizer {
            None if moments.is_empty() => None,
            None => return Err(ckpt_err("optimizer moments without optimizer metadata")),
            Some(meta) => {
                let mut state = AdamState {
                    beta1: meta.beta1,
                    beta2: meta.beta2,
                    eps: meta.eps,
                    moments: BTreeMap::new(),
                };
                for (name, (m, v)) in moments {
                    let (Some(m), Some(v)) = (m, v) else {
                        return Err(ckpt_err(format!("incomplete optimizer moments for {name}")));
                    };
                    let step = *meta
                        .steps
                        .get(&name)
                        .ok_or_else(|| ckpt_err(format!("no step count for {name}")))?;
                    state.moments.insert(name, Moments { m, v, step });
                }
                if state.moments.len() != meta.steps.len() {
                    return Err(ckpt_err("optimizer step counts without moments"));
                }
                Some(state)
            }
        };

        Ok(Checkpoint {
            classifier: Classifier {
                model,
                standardizer: manifest.standardizer,
                feature_names: manifest.feature_names,
                feature_config: manifest.feature_config,
            },
            optimizer,
            run_config: manifest.run_config,
            rng: manifest.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Entries must be f32, sized to their shape, inside the payload and
/// non-overlapping, and together cover the payload exactly.
fn check_layout(entries: &[TensorEntry], payload_len: usize) -> Result<()> {
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(entries.len());
    for e in entries {
        if e.dtype != "f32" {
            return Err(ckpt_err(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.length != 4 * numel as u64 {
            return Err(ckpt_err(format!(
                "tensor {} length {} does not match shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        let end = e.offset.checked_add(e.length).ok_or_else(|| ckpt_err("offset overflow"))?;
        if end > payload_len as u64 {
            return Err(ckpt_err(format!("tensor {} extends past the payload", e.name)));
        }
        spans.push((e.offset, end, &e.name));
    }
    spans.sort();
    let mut cursor = 0;
    for (start, end, name) in spans {
        if start != cursor {
            return Err(ckpt_err(format!(
                "tensor {name} at byte {start} overlaps or leaves a gap (expected {cursor})"
            )));
        }
        cursor = end;
    }
    if cursor != payload_len as u64 {
        return Err(ckpt_err(format!(
            "payload has {} trailing bytes",
            payload_len as u64 - cursor
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn sample(variant: Variant) -> Checkpoint {
        let model = Model::new(
            ModelConfig {
                variant,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let names = model.config.features.names();
        let mut opt = AdamState::default();
        let g: BTreeMap<String, Tensor<f32>> = model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("head."))
            .map(|(n, p)| (n.to_string(), p.value.map(|v| v * 0.5 + 0.1)))
            .collect();
        let mut params = model.params.clone();
        crate::train::adam_step(&mut params, &g, &mut opt, 1e-3, 5e-5, false).unwrap();
        Checkpoint {
            classifier: Classifier {
                model: Model { params, ..model },
                standardizer: Some(Standardizer {
                    mean: (0..names.len()).map(|i| i as f64 / 3.0).collect(),
                    std: (0..names.len()).map(|i| 1.0 + i as f64 * 0.1).collect(),
                }),
                feature_names: names,
                feature_config: FeatureConfig::default(),
            },
            optimizer: Some(opt),
            run_config: serde_json::json!({"seed": 3, "note": "unit"}),
            rng: RngState {
                seed: 3,
                epochs_completed: 1,
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for v in [Variant::Fused, Variant::Skeleton, Variant::Clinical] {
            let c = sample(v);
            let bytes = c.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample(Variant::Clinical).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_standardizer_is_a_checkpoint_error() {
        let mut c = sample(Variant::Fused);
        c.classifier.standardizer = None;
        let bytes = c.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn overlapping_entries_rejected() {
        let e = |offset| TensorEntry {
            name: "a".into(),
            kind: TensorKind::Param,
            shape: vec![2],
            dtype: "f32".into(),
            offset,
            length: 8,
            trainable: None,
        };
        assert!(check_layout(&[e(0), e(8)], 16).is_ok());
        assert!(check_layout(&[e(0), e(4)], 16).is_err());
        assert!(check_layout(&[e(0), e(12)], 16).is_err());
    }
}
