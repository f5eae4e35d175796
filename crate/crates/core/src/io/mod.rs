//! On-disk formats: JSON-lines manifests, raw little-endian `f32` feature
//! files, the checkpoint container, flat `key=value` run configs, and a
//! synthetic corpus generator.

mod checkpoint;
mod config;
mod synth;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use synth::{synth_dataset, synth_templates, SynthConfig};

/// One line of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub utt_id: String,
    /// Relative to the manifest's directory.
    pub feat_path: String,
    /// `[T, D]`.
    pub shape: [usize; 2],
    pub tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// A parsed manifest and the directory its feature paths are relative to.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// An utterance with its features loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub feats: Tensor,
    pub tokens: Vec<usize>,
}

/// Parses and validates a manifest: every line must be a well-formed
/// record, its feature file must hold exactly `T·D·4` bytes and every token
/// id must be below `vocab_size`.
pub fn load_manifest(path: impl AsRef<Path>, vocab_size: usize) -> Result<Manifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let [t, d] = entry.shape;
        if t == 0 || d == 0 {
            return Err(parse_err(format!("{}: empty shape {:?}", entry.utt_id, entry.shape)));
        }
        if let Some(&bad) = entry.tokens.iter().find(|&&id| id >= vocab_size) {
            return Err(parse_err(format!(
                "{}: token id {bad} out of range for vocabulary of {vocab_size}",
                entry.utt_id
            )));
        }
        let feat = root.join(&entry.feat_path);
        let size = fs::metadata(&feat).map_err(|e| Error::io(&feat, e))?.len();
        let expected = (t * d * 4) as u64;
        if size != expected {
            return Err(parse_err(format!(
                "{}: feature file {} has {size} bytes, shape {:?} needs {expected}",
                entry.utt_id,
                feat.display(),
                entry.shape
            )));
        }
        entries.push(entry);
    }
    Ok(Manifest { root, entries })
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a row-major little-endian `f32` matrix of the given shape.
pub fn read_features(path: impl AsRef<Path>, shape: [usize; 2]) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = shape[0] * shape[1] * 4;
    if bytes.len() != expected {
        return Err(Error::ShortRead {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Writes a `[T, D]` tensor as little-endian `f32`.
pub fn write_features(path: impl AsRef<Path>, feats: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if feats.rank() != 2 {
        return Err(Error::shape("write_features", feats.shape(), &[0, 0]));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let bytes: Vec<u8> = feats.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

impl Manifest {
    pub fn load_features(&self, entry: &ManifestEntry) -> Result<Tensor> {
        read_features(self.root.join(&entry.feat_path), entry.shape)
    }

    /// Loads every utterance in manifest order.
    pub fn load_utterances(&self) -> Result<Vec<Utterance>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(Utterance {
                    utt_id: e.utt_id.clone(),
                    feats: self.load_features(e)?,
                    tokens: e.tokens.clone(),
                })
            })
            .collect()
    }
}
