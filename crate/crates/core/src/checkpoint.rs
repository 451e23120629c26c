//! Checkpoints: `<base>.json` manifest plus `<base>.csv` weight blocks.
//!
//! Each CSV line is `block,row,v0,v1,...`; values use 17 significant digits
//! so a load after save reproduces every parameter bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{Activation, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::synthdata::format_f64;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub raw_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub hidden_activation: Activation,
    pub num_classes: Option<usize>,
    pub seed: u64,
    pub epoch: usize,
    pub iteration: u64,
    pub weights_file: String,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub encoder: EncoderParams,
    /// Raw `d x c` class weights, if the checkpoint carries a classifier.
    pub class_weights: Option<Matrix>,
}

impl Checkpoint {
    pub fn new(encoder: EncoderParams, class_weights: Option<Matrix>, seed: u64, epoch: usize, iteration: u64) -> Self {
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            raw_dim: encoder.raw_dim(),
            hidden_dims: encoder.hidden_dims(),
            embed_dim: encoder.embed_dim,
            hidden_activation: encoder.hidden_activation,
            num_classes: class_weights.as_ref().map(Matrix::cols),
            seed,
            epoch,
            iteration,
            weights_file: String::new(),
            blocks: Vec::new(),
        };
        Self {
            manifest,
            encoder,
            class_weights,
        }
    }

    fn blocks(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.encoder.layer_weights.iter().zip(&self.encoder.layer_biases).enumerate() {
            out.push((format!("w{l}"), w.clone()));
            out.push((format!("b{l}"), Matrix::new(1, b.len(), b.clone()).expect("bias row")));
        }
        if let Some(w) = &self.class_weights {
            out.push(("class_weights".to_string(), w.clone()));
        }
        out
    }
}

pub fn manifest_path(base: &Path) -> PathBuf {
    suffixed(base, ".json")
}

pub fn weights_path(base: &Path) -> PathBuf {
    suffixed(base, ".csv")
}

fn suffixed(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn save(ckpt: &Checkpoint, base: &Path) -> Result<()> {
    let blocks = ckpt.blocks();
    let wpath = weights_path(base);
    let mut manifest = ckpt.manifest.clone();
    manifest.weights_file = wpath.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    manifest.blocks = blocks
        .iter()
        .map(|(name, m)| BlockInfo {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
        })
        .collect();

    let mut text = String::new();
    for (name, m) in &blocks {
        for i in 0..m.rows() {
            text.push_str(name);
            text.push(',');
            text.push_str(&i.to_string());
            for v in m.row(i) {
                text.push(',');
                text.push_str(&format_f64(*v));
            }
            text.push('\n');
        }
    }
    fs::write(&wpath, text).map_err(|e| Error::io(&wpath, e))?;

    let mpath = manifest_path(base);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&mpath, e))?;
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))
}

pub fn load(base: &Path) -> Result<Checkpoint> {
    let mpath = manifest_path(base);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        line: e.line() as u64,
        field: "manifest".into(),
        message: e.to_string(),
    })?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Parse {
            path: mpath,
            line: 1,
            field: "format_version".into(),
            message: format!("unsupported version {}", manifest.format_version),
        });
    }

    let wpath = base.parent().unwrap_or(Path::new(".")).join(&manifest.weights_file);
    let perr = |line: u64, field: &str, message: String| Error::Parse {
        path: wpath.clone(),
        line,
        field: field.to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(&wpath)
        .map_err(|e| perr(0, "file", e.to_string()))?;
    let mut records = reader.records();
    let mut matrices = Vec::with_capacity(manifest.blocks.len());
    let mut line = 0u64;
    for block in &manifest.blocks {
        let mut data = Vec::with_capacity(block.rows * block.cols);
        for r in 0..block.rows {
            line += 1;
            let rec = records
                .next()
                .ok_or_else(|| perr(line, &block.name, "unexpected end of file".into()))?
                .map_err(|e| perr(line, &block.name, e.to_string()))?;
            if rec.len() != block.cols + 2 || rec[0] != *block.name || rec[1] != *r.to_string() {
                return Err(perr(line, &block.name, format!("expected row {r} with {} values", block.cols)));
            }
            for c in 0..block.cols {
                let v: f64 = rec[c + 2].parse().map_err(|e| perr(line, &format!("{}[{r}][{c}]", block.name), format!("{e}")))?;
                data.push(v);
            }
        }
        matrices.push(Matrix::new(block.rows, block.cols, data)?);
    }
    if records.next().is_some() {
        return Err(perr(line + 1, "trailing", "extra rows after the last block".into()));
    }

    let n_layers = manifest.hidden_dims.len() + 1;
    let mut it = matrices.into_iter();
    let mut layer_weights = Vec::with_capacity(n_layers);
    let mut layer_biases = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let w = it.next().ok_or_else(|| perr(line, "blocks", "missing layer weights".into()))?;
        let b = it.next().ok_or_else(|| perr(line, "blocks", "missing layer bias".into()))?;
        layer_weights.push(w);
        layer_biases.push(b.into_data());
    }
    let class_weights = it.next();
    let encoder = EncoderParams {
        layer_weights,
        layer_biases,
        hidden_activation: manifest.hidden_activation,
        embed_dim: manifest.embed_dim,
    };
    encoder.validate()?;
    Ok(Checkpoint {
        manifest: CheckpointManifest {
            weights_file: String::new(),
            blocks: Vec::new(),
            ..manifest
        },
        encoder,
        class_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("checkpoint");
        let enc = EncoderParams::init(7, &[5, 3], 4, 12).unwrap();
        let w = Matrix::new(4, 6, Rng::new(1).standard_normal(24)).unwrap();
        let ckpt = Checkpoint::new(enc, Some(w), 12, 3, 99);
        save(&ckpt, &base).unwrap();
        assert_eq!(load(&base).unwrap(), ckpt);

        let enc_only = Checkpoint::new(EncoderParams::init(4, &[], 2, 0).unwrap(), None, 0, 0, 0);
        save(&enc_only, &base).unwrap();
        assert_eq!(load(&base).unwrap(), enc_only);
    }

    #[test]
    fn truncated_weights_fail() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        save(&Checkpoint::new(EncoderParams::init(3, &[2], 2, 0).unwrap(), None, 0, 0, 0), &base).unwrap();
        let text = fs::read_to_string(weights_path(&base)).unwrap();
        let keep: Vec<&str> = text.lines().take(2).collect();
        fs::write(weights_path(&base), keep.join("\n")).unwrap();
        assert!(matches!(load(&base), Err(Error::Parse { .. })));
    }
}
