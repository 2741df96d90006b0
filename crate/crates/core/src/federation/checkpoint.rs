//! Checkpoint layout:
//!
//! ```text
//! server.toml           manifest (round, configs, client table, digests)
//! global/params.{toml,bin}
//! prompts_<k>.bin       per-client prompt blob, when prompts are enabled
//! prototypes.bin        prototype registry, when anchors are enabled
//! ```
//!
//! Round records are not part of a checkpoint since they carry timings.
//! Every random stream is keyed by `(seed, client, round)`, so the round
//! index is the only cursor that needs saving.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClientState, FedConfig, Federation, ServerState};
use crate::anchor_init::{load_prototypes, save_prototypes};
use crate::error::{Error, Result};
use crate::graph::ClientData;
use crate::prompt_pool::PromptSet;
use crate::scalar::Scalar;
use crate::vqvae::{load_params, read_blob, read_toml, save_params, write_blob, write_toml, ModelConfig};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientEntry {
    pub client_id: usize,
    pub sample_count: usize,
    pub graph_digest: String,
    pub domain_tag: String,
    pub prompt_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerManifest {
    pub schema_version: u32,
    pub scalar: String,
    pub round: usize,
    pub init_digest: String,
    pub global_digest: String,
    pub federation: FedConfig,
    pub model: ModelConfig,
    pub clients: Vec<ClientEntry>,
}

pub fn save_checkpoint<S: Scalar>(fed: &Federation<S>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_params(&fed.server.global, &fed.model, &dir.join("global"))?;
    for c in &fed.clients {
        if let Some(p) = &c.prompts {
            write_blob(&dir.join(format!("prompts_{}.bin", c.client_id)), &p.flatten())?;
        }
    }
    if !fed.server.prototypes.is_empty() {
        save_prototypes(&dir.join("prototypes.bin"), &fed.server.prototypes)?;
    }
    let manifest = ServerManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        scalar: S::NAME.to_string(),
        round: fed.server.round,
        init_digest: fed.server.init_digest.clone(),
        global_digest: fed.server.global.digest(),
        federation: fed.config.clone(),
        model: fed.model,
        clients: fed
            .clients
            .iter()
            .map(|c| ClientEntry {
                client_id: c.client_id,
                sample_count: c.sample_count,
                graph_digest: c.graph_digest.clone(),
                domain_tag: c.domain_tag.clone(),
                prompt_digest: c.prompts.as_ref().map(PromptSet::digest),
            })
            .collect(),
    };
    write_toml(&dir.join("server.toml"), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<ServerManifest> {
    let path = dir.join("server.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let version = text
        .parse::<toml::Table>()
        .ok()
        .and_then(|t| t.get("schema_version").and_then(toml::Value::as_integer));
    match version {
        Some(v) if v == i64::from(CHECKPOINT_SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(Error::Schema {
                expected: format!("checkpoint schema {CHECKPOINT_SCHEMA_VERSION}"),
                found: format!("checkpoint schema {v}"),
            })
        }
        None => {
            return Err(Error::Schema {
                expected: format!("checkpoint schema {CHECKPOINT_SCHEMA_VERSION}"),
                found: "an unreadable server manifest".into(),
            })
        }
    }
    read_toml(&path).map_err(|e| Error::Schema {
        expected: format!("checkpoint schema {CHECKPOINT_SCHEMA_VERSION}"),
        found: e.to_string(),
    })
}

/// Restores a federation from `dir`. The client data must be the data the
/// checkpoint was written with; graph digests are checked.
pub fn load_checkpoint<S: Scalar>(dir: &Path, data: &[ClientData<S>]) -> Result<Federation<S>> {
    let m = read_manifest(dir)?;
    let (global, _) = load_params::<S>(&dir.join("global"))?;
    if S::NAME == m.scalar && global.digest() != m.global_digest {
        return Err(Error::Validation("global parameters do not match the manifest digest".into()));
    }
    if data.len() != m.clients.len() {
        return Err(Error::Validation(format!(
            "checkpoint has {} clients, {} were supplied",
            m.clients.len(),
            data.len()
        )));
    }
    let mut clients = Vec::with_capacity(data.len());
    for (entry, d) in m.clients.iter().zip(data) {
        let mut c = ClientState::new(entry.client_id, d, m.federation.sample_weight, &global, &m.model)?;
        if c.graph_digest != entry.graph_digest {
            return Err(Error::Validation(format!(
                "client {} data differs from the data the checkpoint was written with",
                entry.client_id
            )));
        }
        if entry.prompt_digest.is_some() {
            let mut set = PromptSet::init(entry.client_id, m.federation.prompt_count, m.model.d, 0)?;
            let n = 2 * set.count() * set.dim();
            set.unflatten(&read_blob(&dir.join(format!("prompts_{}.bin", entry.client_id)), n)?)?;
            if S::NAME == m.scalar && Some(set.digest()) != entry.prompt_digest {
                return Err(Error::Validation(format!("prompt digest mismatch for client {}", entry.client_id)));
            }
            c.prompts = Some(set);
        }
        clients.push(c);
    }
    let prototypes = if dir.join("prototypes.bin").exists() {
        load_prototypes(&dir.join("prototypes.bin"), &m.init_digest)?
    } else {
        Vec::new()
    };
    Ok(Federation {
        config: m.federation,
        model: m.model,
        server: ServerState {
            global,
            round: m.round,
            init_digest: m.init_digest,
            prototypes,
            records: Vec::new(),
        },
        clients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::run_pretraining;
    use crate::graph::testing::plain;
    use crate::rng;
    use crate::tensor::Tensor;
    use crate::vqvae::{GfmParams, LocalTrainConfig};

    fn setup() -> (FedConfig, ModelConfig, Vec<ClientData<f64>>) {
        let model = ModelConfig {
            d: 4,
            heads: 2,
            tokens: 4,
            ..ModelConfig::default()
        };
        let cfg = FedConfig {
            rounds: 4,
            local: LocalTrainConfig {
                lr: 0.02,
                ..LocalTrainConfig::default()
            },
            deterministic: true,
            ..FedConfig::default()
        };
        let data = (0..2)
            .map(|k| {
                let n = 5 + k;
                let x = Tensor::new(vec![n, 4], rng::normal_vec(&mut rng::stream(k as u64, &[]), n * 4, 1.0)).unwrap();
                let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
                ClientData::Subgraph(plain(n, &edges, 4).with_features(x).unwrap())
            })
            .collect();
        (cfg, model, data)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (cfg, model, data) = setup();
        let fed = run_pretraining(&cfg, &model, &data, GfmParams::init(&model, 0).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&fed, dir.path()).unwrap();
        let back = load_checkpoint::<f64>(dir.path(), &data).unwrap();
        assert!(back.server.global.bitwise_eq(&fed.server.global));
        assert_eq!(back.server.round, 4);
        assert_eq!(back.config, fed.config);
        assert_eq!(back.server.prototypes.len(), 2);
        for (a, b) in back.clients.iter().zip(&fed.clients) {
            assert!(a.prompts.as_ref().unwrap().bitwise_eq(b.prompts.as_ref().unwrap()));
        }
    }

    #[test]
    fn resume_equals_uninterrupted() {
        let (cfg, model, data) = setup();
        let init = GfmParams::init(&model, 0).unwrap();
        let full = run_pretraining(&cfg, &model, &data, init.clone()).unwrap();
        let half = run_pretraining(&FedConfig { rounds: 2, ..cfg.clone() }, &model, &data, init).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&half, dir.path()).unwrap();
        let mut resumed = load_checkpoint::<f64>(dir.path(), &data).unwrap();
        resumed.run_to(4, |_| {}).unwrap();
        assert!(resumed.server.global.bitwise_eq(&full.server.global));
        for (a, b) in resumed.clients.iter().zip(&full.clients) {
            assert!(a.prompts.as_ref().unwrap().bitwise_eq(b.prompts.as_ref().unwrap()));
        }
    }

    #[test]
    fn corrupt_manifest_is_a_schema_error() {
        let (cfg, model, data) = setup();
        let fed = run_pretraining(&FedConfig { rounds: 1, ..cfg }, &model, &data, GfmParams::init(&model, 0).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&fed, dir.path()).unwrap();
        let path = dir.path().join("server.toml");
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("schema_version = 1", "schema_version = 2")).unwrap();
        assert!(matches!(load_checkpoint::<f64>(dir.path(), &data), Err(Error::Schema { .. })));
        fs::write(&path, "round = [").unwrap();
        assert!(matches!(load_checkpoint::<f64>(dir.path(), &data), Err(Error::Schema { .. })));
    }

    #[test]
    fn foreign_data_is_refused() {
        let (cfg, model, data) = setup();
        let fed = run_pretraining(&FedConfig { rounds: 1, ..cfg }, &model, &data, GfmParams::init(&model, 0).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&fed, dir.path()).unwrap();
        let swapped = vec![data[1].clone(), data[0].clone()];
        assert!(load_checkpoint::<f64>(dir.path(), &swapped).is_err());
    }
}
