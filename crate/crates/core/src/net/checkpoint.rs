//! On-disk format: `manifest.txt` of `key=value` lines plus `tensors.bin`, the
//! concatenation of little-endian `f64` tensors. Each tensor is listed in the
//! manifest as `tensor.<name>=<byte offset>,<element count>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ModelConfig, Params};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "tensors.bin";
const FORMAT: &str = "blockdiff-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Ordered metadata entries, excluding tensor listings.
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Vec<f64>)>,
}

fn err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_slice())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = format!("format={FORMAT}\n");
        for (k, v) in &self.meta {
            manifest.push_str(&format!("{k}={v}\n"));
        }
        let total: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut blob = Vec::with_capacity(total * 8);
        for (name, t) in &self.tensors {
            manifest.push_str(&format!("tensor.{name}={},{}\n", blob.len(), t.len()));
            for v in t {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        manifest.push_str(&format!("blob_bytes={}\n", blob.len()));
        fs::write(dir.join(BLOB), blob)?;
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest_path)?;
        let blob = fs::read(dir.join(BLOB))?;
        let mut meta = Vec::new();
        let mut listing = Vec::new();
        let mut blob_bytes = None;
        let mut format_seen = false;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(&manifest_path, format!("line {}: expected key=value", i + 1)))?;
            if k == "format" {
                if v != FORMAT {
                    return Err(err(&manifest_path, format!("unknown format {v}")));
                }
                format_seen = true;
            } else if k == "blob_bytes" {
                blob_bytes = Some(v.parse::<usize>().map_err(|e| err(&manifest_path, e.to_string()))?);
            } else if let Some(name) = k.strip_prefix("tensor.") {
                let (off, len) = v
                    .split_once(',')
                    .ok_or_else(|| err(&manifest_path, format!("bad tensor entry {line}")))?;
                let off: usize = off.parse().map_err(|_| err(&manifest_path, format!("bad offset in {line}")))?;
                let len: usize = len.parse().map_err(|_| err(&manifest_path, format!("bad length in {line}")))?;
                listing.push((name.to_string(), off, len));
            } else {
                meta.push((k.to_string(), v.to_string()));
            }
        }
        if !format_seen {
            return Err(err(&manifest_path, "missing format line"));
        }
        let expected = blob_bytes.ok_or_else(|| err(&manifest_path, "missing blob_bytes"))?;
        if blob.len() != expected {
            return Err(err(
                &dir.join(BLOB),
                format!("blob holds {} bytes, manifest says {expected}", blob.len()),
            ));
        }
        let mut next = 0;
        let mut tensors = Vec::with_capacity(listing.len());
        for (name, off, len) in listing {
            if off != next || off + len * 8 > blob.len() {
                return Err(err(&dir.join(BLOB), format!("tensor {name} at {off}+{len} is out of place")));
            }
            let data = blob[off..off + len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, data));
            next = off + len * 8;
        }
        if next != blob.len() {
            return Err(err(&dir.join(BLOB), "trailing bytes after the last tensor"));
        }
        Ok(Self { meta, tensors })
    }
}

pub fn config_meta(config: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("vocab_size".into(), config.vocab_size.to_string()),
        ("d_model".into(), config.d_model.to_string()),
        ("n_heads".into(), config.n_heads.to_string()),
        ("n_layers".into(), config.n_layers.to_string()),
        ("d_ff".into(), config.d_ff.to_string()),
        // `{:?}` prints the shortest string that parses back to the same f64.
        ("rope_base".into(), format!("{:?}", config.rope_base)),
        ("init_scale".into(), format!("{:?}", config.init_scale)),
    ]
}

pub fn config_from_meta(ckpt: &Checkpoint, path: &Path) -> Result<ModelConfig> {
    let meta: BTreeMap<&str, &str> = ckpt.meta.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    fn get<T: std::str::FromStr>(meta: &BTreeMap<&str, &str>, key: &str, path: &Path) -> Result<T> {
        meta.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(path, format!("missing or invalid {key}")))
    }
    let config = ModelConfig {
        vocab_size: get(&meta, "vocab_size", path)?,
        d_model: get(&meta, "d_model", path)?,
        n_heads: get(&meta, "n_heads", path)?,
        n_layers: get(&meta, "n_layers", path)?,
        d_ff: get(&meta, "d_ff", path)?,
        rope_base: get(&meta, "rope_base", path)?,
        init_scale: get(&meta, "init_scale", path)?,
    };
    config.validate()?;
    Ok(config)
}

/// Named tensors of `params`, each name prefixed with `prefix`.
pub fn params_tensors(params: &Params, prefix: &str) -> Vec<(String, Vec<f64>)> {
    params
        .tensors()
        .into_iter()
        .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
        .collect()
}

/// Rebuilds parameters of `config` from tensors named `prefix + name`.
pub fn params_from(ckpt: &Checkpoint, config: &ModelConfig, prefix: &str, path: &Path) -> Result<Params> {
    let mut params = Params::zeros(config);
    for (name, t) in params.tensors_mut() {
        let full = format!("{prefix}{name}");
        let src = ckpt
            .tensor(&full)
            .ok_or_else(|| err(path, format!("missing tensor {full}")))?;
        if src.len() != t.len() {
            return Err(err(
                path,
                format!("tensor {full} has {} entries, expected {}", src.len(), t.len()),
            ));
        }
        t.copy_from_slice(src);
    }
    Ok(params)
}

/// Saves bare parameters with their config.
pub fn save_params(params: &Params, dir: &Path, extra: &[(String, String)]) -> Result<()> {
    let mut meta = config_meta(&params.config);
    meta.extend_from_slice(extra);
    Checkpoint {
        meta,
        tensors: params_tensors(params, "param."),
    }
    .save(dir)
}

pub fn load_params(dir: &Path) -> Result<Params> {
    let ckpt = Checkpoint::load(dir)?;
    let path: PathBuf = dir.join(MANIFEST);
    let config = config_from_meta(&ckpt, &path)?;
    params_from(&ckpt, &config, "param.", &path)
}
