//! Parameter checkpoints: `params.bin` holds the flat parameter vector as
//! little-endian `f64`, `params.toml` describes the layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{GfmParams, Metric, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const PARAMS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsManifest {
    pub schema_version: u32,
    pub scalar: String,
    pub d: usize,
    pub heads: usize,
    pub tokens: usize,
    pub metric: Metric,
    pub gamma: f64,
    pub beta: f64,
    pub edge_features: bool,
    pub dense_threshold: usize,
    pub param_count: usize,
    pub layout: String,
    pub digest: String,
}

impl ParamsManifest {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            heads: self.heads,
            tokens: self.tokens,
            metric: self.metric,
            gamma: self.gamma,
            beta: self.beta,
            edge_features: self.edge_features,
            dense_threshold: self.dense_threshold,
        }
    }
}

pub fn write_blob<S: Scalar>(path: &Path, values: &[S]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.f64().to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_blob<S: Scalar>(path: &Path, expected: usize) -> Result<Vec<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len().min(expected * 8) as u64,
            detail: format!("expected {} values, file holds {} bytes", expected, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| S::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect())
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: e.span().map_or(0, |s| s.start as u64),
        detail: e.message().to_string(),
    })
}

pub fn save_params<S: Scalar>(params: &GfmParams<S>, model: &ModelConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = ParamsManifest {
        schema_version: PARAMS_SCHEMA_VERSION,
        scalar: S::NAME.to_string(),
        d: params.dim(),
        heads: params.codebook.head_count(),
        tokens: params.codebook.tokens_per_head(),
        metric: params.codebook.metric,
        gamma: model.gamma,
        beta: model.beta,
        edge_features: params.has_edge_weights(),
        dense_threshold: model.dense_threshold,
        param_count: params.param_count(),
        layout: params.schema(),
        digest: params.digest(),
    };
    write_toml(&dir.join("params.toml"), &manifest)?;
    write_blob(&dir.join("params.bin"), &params.flatten())
}

pub fn load_params<S: Scalar>(dir: &Path) -> Result<(GfmParams<S>, ModelConfig)> {
    let m: ParamsManifest = read_toml(&dir.join("params.toml"))?;
    if m.schema_version != PARAMS_SCHEMA_VERSION {
        return Err(Error::Schema {
            expected: format!("parameter schema {PARAMS_SCHEMA_VERSION}"),
            found: format!("parameter schema {}", m.schema_version),
        });
    }
    let model = m.model();
    let mut params = GfmParams::init(&model, 0)?;
    if params.schema() != m.layout {
        return Err(Error::Schema {
            expected: params.schema(),
            found: m.layout,
        });
    }
    let flat = read_blob(&dir.join("params.bin"), m.param_count)?;
    params.unflatten(&flat)?;
    if S::NAME == m.scalar && params.digest() != m.digest {
        return Err(Error::Validation(format!(
            "parameter digest mismatch in {}",
            dir.display()
        )));
    }
    Ok((params, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = ModelConfig {
            d: 5,
            heads: 2,
            tokens: 3,
            metric: Metric::L2,
            ..ModelConfig::default()
        };
        let p = GfmParams::<f64>::init(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_params(&p, &cfg, dir.path()).unwrap();
        let (q, m) = load_params::<f64>(dir.path()).unwrap();
        assert!(q.bitwise_eq(&p));
        assert_eq!(m, cfg);
    }

    #[test]
    fn f32_round_trip_is_bitwise() {
        let cfg = ModelConfig {
            d: 3,
            heads: 1,
            tokens: 2,
            ..ModelConfig::default()
        };
        let p = GfmParams::<f32>::init(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_params(&p, &cfg, dir.path()).unwrap();
        assert!(load_params::<f32>(dir.path()).unwrap().0.bitwise_eq(&p));
    }

    #[test]
    fn version_mismatch_is_refused() {
        let cfg = ModelConfig {
            d: 2,
            heads: 1,
            tokens: 2,
            ..ModelConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        save_params(&GfmParams::<f64>::init(&cfg, 0).unwrap(), &cfg, dir.path()).unwrap();
        let path = dir.path().join("params.toml");
        let text = fs::read_to_string(&path).unwrap().replace("schema_version = 1", "schema_version = 9");
        fs::write(&path, text).unwrap();
        match load_params::<f64>(dir.path()) {
            Err(Error::Schema { expected, found }) => {
                assert!(expected.contains('1') && found.contains('9'));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }
}
