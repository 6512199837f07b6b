//! Run configuration: strict JSON, dotted-path overrides, provenance hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{BenchConfig, TrainConfig};
use crate::model::ModelConfig;

pub const OUT_DIR_ENV: &str = "CHEEMS_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Output root; falls back to `$CHEEMS_OUT_DIR`, then `out`.
    pub dir: Option<PathBuf>,
    pub checkpoint: String,
    pub metrics: String,
    pub bench: String,
    pub vectors: String,
    pub expert_usage: String,
    pub summary: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: None,
            checkpoint: "model.chms".into(),
            metrics: "metrics.csv".into(),
            bench: "bench.csv".into(),
            vectors: "vectors.json".into(),
            expert_usage: "expert_usage.csv".into(),
            summary: "summary.json".into(),
        }
    }
}

impl OutputConfig {
    pub fn root(&self) -> PathBuf {
        match &self.dir {
            Some(d) => d.clone(),
            None => std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out")),
        }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root().join(file)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every named random stream; copied into `model.seed`.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig {
            max_positions: 64,
            moe: crate::cdmmoe::MoeConfig {
                d_shared: 128,
                d_private: 64,
                ..Default::default()
            },
            ..ModelConfig::default()
        };
        RunConfig {
            seed: 0,
            model,
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn strict<T: for<'de> Deserialize<'de>>(v: Value) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.to_string();
        match msg.strip_prefix("unknown field `").and_then(|r| r.split('`').next()) {
            Some(key) if path == "." => Error::UnknownKey(key.to_string()),
            Some(key) if path.ends_with(key) => Error::UnknownKey(path),
            Some(key) => Error::UnknownKey(format!("{path}.{key}")),
            None => Error::Json(inner),
        }
    })
}

/// Sets `path` (dot separated) inside `root`. Every segment must already
/// exist; `text` is parsed as JSON and falls back to a plain string.
pub fn apply_override(root: &mut Value, path: &str, text: &str) -> Result<()> {
    let mut cur = root;
    for seg in path.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(seg).ok_or_else(|| Error::UnknownKey(path.to_string()))?,
            _ => return Err(Error::UnknownKey(path.to_string())),
        };
    }
    *cur = serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()));
    Ok(())
}

impl RunConfig {
    /// Parses a config document, then applies `key=value` overrides.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let raw: Value = serde_json::from_str(text)?;
        let base: RunConfig = strict(raw)?;
        let mut full = serde_json::to_value(&base)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config("override", format!("`{o}` is not key=value")))?;
            apply_override(&mut full, k.trim(), v.trim())?;
        }
        let mut cfg: RunConfig = strict(full)?;
        cfg.model.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.task.vocab() > self.model.vocab_size {
            return Err(Error::config("model.vocab_size", format!("task uses {} tokens", self.train.task.vocab())));
        }
        if self.train.task.seq_len() > self.model.max_positions + 1 {
            return Err(Error::config("model.max_positions", "shorter than the task sequence"));
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hash_str(&self.canonical_json())
    }
}

/// Trailing CSV line recording which config produced the rows above it.
pub fn hash_trailer(hash: &str) -> String {
    format!("# config_hash={hash}\n")
}

/// Reads the hash back out of a CSV written with [`hash_trailer`].
pub fn csv_hash(csv: &str) -> Option<&str> {
    csv.lines().rev().find_map(|l| l.strip_prefix("# config_hash="))
}

pub fn hash_str(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// Writes through a temporary sibling then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        match RunConfig::from_json(r#"{"model": {"d_modle": 3}}"#, &[]) {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "model.d_modle"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_json("{}", &["model.nope=1".into()]) {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "model.nope"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn override_sets_nested_value_and_changes_hash() {
        let a = RunConfig::from_json("{}", &[]).unwrap();
        let b = RunConfig::from_json("{}", &["seed=7".into(), "train.batch_size=8".into()]).unwrap();
        assert_eq!(b.seed, 7);
        assert_eq!(b.model.seed, 7);
        assert_eq!(b.train.batch_size, 8);
        assert_ne!(a.hash(), b.hash());
    }
}
