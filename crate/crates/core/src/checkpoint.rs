//! On-disk model: `manifest.json` (configs, vocabulary, tensor layout) and
//! `params.bin` (little-endian binary64, row-major, in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::training::TrainingConfig;
use crate::vocab::Vocabulary;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";
const FORMAT: &str = "panmt-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub model: ModelConfig,
    pub training: Option<TrainingConfig>,
    pub vocab: Vocabulary,
    pub payload: String,
    pub payload_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub training: Option<TrainingConfig>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, vocab: Vocabulary, training: Option<TrainingConfig>) -> Result<Self> {
        if params.config.src_vocab != vocab.src.len() || params.config.tgt_vocab != vocab.tgt.len() {
            return Err(Error::VocabMismatch(format!(
                "model sized {}/{} for vocabulary {}/{}",
                params.config.src_vocab,
                params.config.tgt_vocab,
                vocab.src.len(),
                vocab.tgt.len()
            )));
        }
        Ok(Checkpoint {
            params,
            vocab,
            training,
        })
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let tensors = self
            .params
            .tensors()
            .into_iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        Manifest {
            format: FORMAT.into(),
            model: self.params.config,
            training: self.training,
            vocab: self.vocab.clone(),
            payload: PAYLOAD_FILE.into(),
            payload_bytes: offset,
            tensors,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut payload = Vec::with_capacity(8 * self.params.num_params());
        for (_, t) in self.params.tensors() {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let bin = dir.join(PAYLOAD_FILE);
        fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))?;
        let man = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(&self.manifest())?;
        json.push('\n');
        fs::write(&man, json).map_err(|e| Error::io(&man, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let man_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {:?}", m.format)));
        }
        m.model.validate()?;
        let bin_path = dir.join(&m.payload);
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if bytes.len() as u64 != m.payload_bytes {
            return Err(Error::Checkpoint(format!(
                "payload is {} bytes, manifest says {}",
                bytes.len(),
                m.payload_bytes
            )));
        }
        let mut params = ModelParams::zeros(m.model);
        let expected = params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect::<Vec<_>>();
        if expected.len() != m.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors, model needs {}",
                m.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), (entry, t)) in expected.iter().zip(m.tensors.iter().zip(params.tensors_mut())) {
            if &entry.name != name || &entry.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} where {} {:?} was expected",
                    entry.name, entry.shape, name, shape
                )));
            }
            let start = entry.offset as usize;
            let end = start + 8 * t.len();
            let chunk = bytes
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the payload")))?;
            for (dst, b) in t.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
                *dst = f64::from_le_bytes(b.try_into().expect("8-byte chunk"));
                if !dst.is_finite() {
                    return Err(Error::Checkpoint(format!("non-finite value in {name}")));
                }
            }
        }
        Checkpoint::new(params, m.vocab, m.training)
    }
}
