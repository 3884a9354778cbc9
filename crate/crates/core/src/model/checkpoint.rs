//! Versioned JSON checkpoints. Every real is written with 17 significant
//! digits so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use serde::ser::Error as _;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;
use serde_json::Value;

use crate::corpus::Vocabulary;
use crate::embeddings::{ChannelSet, EmbeddingTable};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{ModelConfig, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a trained classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub channels: ChannelSet,
}

/// Raised when a checkpoint is used with a vocabulary other than the one it
/// was trained with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabMismatch {
    pub checkpoint_digest: String,
    pub other_digest: String,
}

impl std::fmt::Display for VocabMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "vocabulary digest {} differs from the checkpoint's {}",
            self.other_digest, self.checkpoint_digest
        )
    }
}

impl Checkpoint {
    pub fn vocab_digest(&self) -> String {
        self.vocab.digest()
    }

    /// `Some` when `vocab` is not the vocabulary stored in the checkpoint.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Option<VocabMismatch> {
        let ours = self.vocab_digest();
        let theirs = vocab.digest();
        (ours != theirs).then_some(VocabMismatch {
            checkpoint_digest: ours,
            other_digest: theirs,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut tensors: Vec<TensorOut> = self
            .params
            .tensors()
            .into_iter()
            .map(|t| TensorOut {
                name: t.name,
                data: nested(&t.shape, t.data),
                shape: t.shape,
            })
            .collect();
        for (k, table) in self.channels.channels.iter().enumerate() {
            let m = &table.vectors;
            tensors.push(TensorOut {
                name: format!("embedding.{k}"),
                shape: vec![m.rows(), m.cols()],
                data: nested(&[m.rows(), m.cols()], m.as_slice()),
            });
        }
        let doc = DocOut {
            format_version: CHECKPOINT_VERSION,
            config: &self.config,
            vocab_digest: self.vocab_digest(),
            vocab: self.vocab.tokens(),
            channels: self
                .channels
                .channels
                .iter()
                .map(|t| ChannelMeta {
                    trainable: t.trainable,
                })
                .collect(),
            tensors,
        };
        let mut text = serde_json::to_string(&doc)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let version = value
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::CheckpointShape("missing format_version".into()))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::CheckpointVersion {
                found: version.min(u64::from(u32::MAX)) as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let digest = match value.get("vocab_digest") {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            _ => return Err(Error::CheckpointDigestMissing),
        };
        let doc: DocIn = serde_json::from_value(value)?;
        let vocab = Vocabulary::from_tokens(doc.vocab)
            .map_err(|e| Error::CheckpointShape(e.to_string()))?;
        if vocab.digest() != digest {
            return Err(Error::CheckpointShape(
                "stored vocabulary does not match its digest".into(),
            ));
        }
        doc.config
            .validate()
            .map_err(|e| Error::CheckpointShape(e.to_string()))?;

        let mut by_name: std::collections::HashMap<String, TensorIn> = doc
            .tensors
            .into_iter()
            .map(|t| (t.name.clone(), t))
            .collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::CheckpointShape(format!("missing tensor {name}")))?;
            if t.shape != shape {
                return Err(Error::CheckpointShape(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            flatten(&t.data, shape)
                .ok_or_else(|| Error::CheckpointShape(format!("tensor {name} data malformed")))
        };

        let mut params = ModelParams::zeros(&doc.config);
        let shapes = ModelParams::expected_shapes(&doc.config);
        for (slot, (name, shape)) in params.tensors_mut().into_iter().zip(&shapes) {
            let values = take(name, shape)?;
            slot.data.copy_from_slice(&values);
        }

        if doc.channels.len() != doc.config.channels {
            return Err(Error::CheckpointShape(format!(
                "{} channel entries for a {}-channel model",
                doc.channels.len(),
                doc.config.channels
            )));
        }
        let mut tables = Vec::with_capacity(doc.channels.len());
        for (k, meta) in doc.channels.iter().enumerate() {
            let shape = [vocab.len(), doc.config.embed_dim];
            let values = take(&format!("embedding.{k}"), &shape)?;
            tables.push(EmbeddingTable {
                vectors: Matrix::from_vec(shape[0], shape[1], values)?,
                trainable: meta.trainable,
            });
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::CheckpointShape(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            config: doc.config,
            params,
            vocab,
            channels: ChannelSet::new(tables)?,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}

#[derive(Serialize)]
struct DocOut<'a> {
    format_version: u32,
    config: &'a ModelConfig,
    vocab_digest: String,
    vocab: &'a [String],
    channels: Vec<ChannelMeta>,
    tensors: Vec<TensorOut>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(dead_code)]
struct DocIn {
    format_version: u32,
    config: ModelConfig,
    vocab_digest: String,
    vocab: Vec<String>,
    channels: Vec<ChannelMeta>,
    tensors: Vec<TensorIn>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelMeta {
    trainable: bool,
}

#[derive(Serialize)]
struct TensorOut {
    name: String,
    shape: Vec<usize>,
    data: Nested,
}

#[derive(Deserialize)]
struct TensorIn {
    name: String,
    shape: Vec<usize>,
    data: Value,
}

struct Num(f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(S::Error::custom("non-finite value in checkpoint"));
        }
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(S::Error::custom)?;
        raw.serialize(s)
    }
}

#[derive(Serialize)]
#[serde(untagged)]
enum Nested {
    Flat(Vec<Num>),
    Rows(Vec<Vec<Num>>),
}

fn nested(shape: &[usize], data: &[f64]) -> Nested {
    match shape {
        [_, cols] => Nested::Rows(
            data.chunks((*cols).max(1))
                .map(|r| r.iter().map(|&x| Num(x)).collect())
                .collect(),
        ),
        _ => Nested::Flat(data.iter().map(|&x| Num(x)).collect()),
    }
}

fn flatten(value: &Value, shape: &[usize]) -> Option<Vec<f64>> {
    let number = |v: &Value| v.as_f64().filter(|x| x.is_finite());
    match shape {
        [n] => {
            let items = value.as_array()?;
            (items.len() == *n).then_some(())?;
            items.iter().map(number).collect()
        }
        [r, c] => {
            let rows = value.as_array()?;
            (rows.len() == *r).then_some(())?;
            let mut out = Vec::with_capacity(r * c);
            for row in rows {
                let row = row.as_array()?;
                (row.len() == *c).then_some(())?;
                for v in row {
                    out.push(number(v)?);
                }
            }
            Some(out)
        }
        _ => None,
    }
}
