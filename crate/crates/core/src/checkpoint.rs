//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `manifest.json`, one raw blob
//! `tensors.bin` of little-endian `f32` values and the vocabulary file.
//! The manifest lists every tensor with its shape and byte offset and
//! carries the run config, step counter, data cursor and RNG state.
//! Saving writes a sibling temporary directory and renames it into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::corpus::Vocab;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Result, SedError};
use crate::optim::AdamW;
use crate::schedule::NoiseSchedule;
use crate::tensor::Matrix;
use crate::training::{RngState, SedModel};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "tensors.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
const EMBEDDING_TENSOR: &str = "embedding";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the tensor blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: usize,
    pub data_cursor: usize,
    pub rng: Option<RngState>,
    pub optimizer_step: Option<u64>,
    pub vocab_file: String,
    /// SHA-256 of the tensor blob.
    pub fingerprint: String,
    pub tensors: Vec<TensorEntry>,
    pub config: RunConfig,
}

/// Everything needed to sample from a model or resume its training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub embedding: EmbeddingMatrix,
    pub model: SedModel<f32>,
    pub optimizer: Option<AdamW<f32>>,
    pub step: usize,
    pub data_cursor: usize,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.config.schedule.build()
    }

    fn named_tensors(&self) -> Vec<(String, Matrix<f32>)> {
        let mut out: Vec<(String, Matrix<f32>)> = self
            .model
            .names()
            .into_iter()
            .zip(self.model.tensors())
            .map(|(n, m)| (n, m.clone()))
            .collect();
        out.push((EMBEDDING_TENSOR.into(), self.embedding.cast()));
        if let Some(opt) = &self.optimizer {
            let names = self.model.names();
            for (n, m) in names.iter().zip(&opt.m) {
                out.push((format!("adam.m.{n}"), m.clone()));
            }
            for (n, v) in names.iter().zip(&opt.v) {
                out.push((format!("adam.v.{n}"), v.clone()));
            }
        }
        out
    }

    /// Blob and manifest contents.
    pub fn encode(&self) -> (Vec<u8>, Manifest) {
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (name, m) in self.named_tensors() {
            entries.push(TensorEntry {
                name,
                shape: [m.rows(), m.cols()],
                dtype: "f32".into(),
                offset: blob.len(),
            });
            for &v in m.as_slice() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            step: self.step,
            data_cursor: self.data_cursor,
            rng: self.rng.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            vocab_file: VOCAB_FILE.into(),
            fingerprint: hex_digest(&blob),
            tensors: entries,
            config: self.config.clone(),
        };
        (blob, manifest)
    }

    /// Short identifier derived from the tensor contents.
    pub fn id(&self) -> String {
        self.encode().1.fingerprint[..16].to_string()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (blob, manifest) = self.encode();
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| SedError::io(parent, e))?;
        let name = dir
            .file_name()
            .ok_or_else(|| SedError::InvalidArgument(format!("bad checkpoint path {}", dir.display())))?
            .to_string_lossy()
            .into_owned();
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| SedError::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| SedError::io(&tmp, e))?;
        write_file(&tmp.join(TENSOR_FILE), &blob)?;
        write_file(&tmp.join(VOCAB_FILE), self.vocab.to_file_string().as_bytes())?;
        write_file(
            &tmp.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        let old = parent.join(format!(".{name}.old-{}", std::process::id()));
        let had_old = dir.exists();
        if had_old {
            fs::rename(dir, &old).map_err(|e| SedError::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| SedError::io(dir, e))?;
        if had_old {
            fs::remove_dir_all(&old).map_err(|e| SedError::io(&old, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| SedError::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let bad = |detail: String| SedError::Format {
            what: "checkpoint",
            detail,
        };
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!(
                "format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let blob_path = dir.join(TENSOR_FILE);
        let blob = fs::read(&blob_path).map_err(|e| SedError::io(&blob_path, e))?;
        if hex_digest(&blob) != manifest.fingerprint {
            return Err(bad("tensor blob does not match the manifest fingerprint".into()));
        }
        let vocab_path = dir.join(&manifest.vocab_file);
        let vocab = Vocab::load(&vocab_path, manifest.config.corpus.mode)?;

        let lookup = |name: &str| -> Result<Matrix<f32>> {
            let e = manifest
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if e.dtype != "f32" {
                return Err(bad(format!("tensor {name} has dtype {}", e.dtype)));
            }
            let [r, c] = e.shape;
            let end = e.offset + r * c * 4;
            if end > blob.len() {
                return Err(bad(format!("tensor {name} runs past the blob")));
            }
            let data = blob[e.offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(Matrix::from_vec(r, c, data))
        };

        let embedding = EmbeddingMatrix::from_stored_rows(lookup(EMBEDDING_TENSOR)?.cast())?;
        if embedding.vocab_size() != vocab.size() {
            return Err(bad(format!(
                "embedding has {} rows for a vocabulary of {}",
                embedding.vocab_size(),
                vocab.size()
            )));
        }
        let mut denoiser_cfg = manifest.config.denoiser.clone();
        denoiser_cfg.d_embed = embedding.dim();
        let mut model = SedModel::<f32>::init(&denoiser_cfg, &embedding, 0)?;
        let names = model.names();
        for (name, slot) in names.iter().zip(model.tensors_mut()) {
            let m = lookup(name)?;
            if m.shape() != slot.shape() {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    m.shape(),
                    slot.shape()
                )));
            }
            *slot = m;
        }
        let optimizer = match manifest.optimizer_step {
            Some(step) => Some(AdamW {
                step,
                m: names
                    .iter()
                    .map(|n| lookup(&format!("adam.m.{n}")))
                    .collect::<Result<_>>()?,
                v: names
                    .iter()
                    .map(|n| lookup(&format!("adam.v.{n}")))
                    .collect::<Result<_>>()?,
            }),
            None => None,
        };
        let mut config = manifest.config;
        config.denoiser.d_embed = embedding.dim();
        Ok(Self {
            config,
            vocab,
            embedding,
            model,
            optimizer,
            step: manifest.step,
            data_cursor: manifest.data_cursor,
            rng: manifest.rng,
        })
    }
}

fn write_file(path: &PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| SedError::io(path, e))
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
