//! In-process federated pre-training: broadcast, local updates (in parallel
//! unless deterministic), sample-weighted aggregation and the round loop.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, ClientEntry, ServerManifest, CHECKPOINT_SCHEMA_VERSION};

use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchor_init::{extract_prototype, graph_digest, init_codebook, relative_sigma, DomainPrototype, SIGMA_FACTOR};
use crate::error::{Error, Result};
use crate::graph::ClientData;
use crate::prompt_pool::{build_pool, PromptPool, PromptSet};
use crate::rng::{self, STREAM_ANCHORS, STREAM_CLIENT, STREAM_PARTICIPATION, STREAM_PROMPTS};
use crate::scalar::Scalar;
use crate::vqvae::{local_pretrain, GfmParams, LocalTrainConfig, LossBreakdown, ModelConfig, PreparedGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SampleWeight {
    /// Node count, or total nodes over a collection.
    #[default]
    Nodes,
    /// Number of graphs held.
    Graphs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub rounds: usize,
    pub local: LocalTrainConfig,
    pub ancdai_enabled: bool,
    /// Anchor noise relative to the mean prototype norm.
    pub sigma_factor: f64,
    /// Absolute anchor noise; overrides `sigma_factor` when set.
    pub sigma: Option<f64>,
    pub adadpp_enabled: bool,
    pub prompt_count: usize,
    /// Fraction of clients sampled per round.
    pub participation: f64,
    pub sample_weight: SampleWeight,
    pub seed: u64,
    /// Train clients sequentially in id order.
    pub deterministic: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 25,
            local: LocalTrainConfig::default(),
            ancdai_enabled: true,
            sigma_factor: SIGMA_FACTOR,
            sigma: None,
            adadpp_enabled: true,
            prompt_count: 3,
            participation: 1.0,
            sample_weight: SampleWeight::Nodes,
            seed: 0,
            deterministic: false,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local.epochs == 0 {
            return Err(Error::Config("federation.epochs must be at least 1".into()));
        }
        if !(self.local.lr >= 0.0) {
            return Err(Error::Config("federation.lr must be non-negative".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config("federation.participation must lie in (0, 1]".into()));
        }
        if self.adadpp_enabled && self.prompt_count == 0 {
            return Err(Error::Config("adadpp.prompt_count must be at least 1".into()));
        }
        if !(self.sigma_factor >= 0.0) || self.sigma.is_some_and(|s| !(s >= 0.0)) {
            return Err(Error::Config("ancdai sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClientState<S> {
    pub client_id: usize,
    pub params: GfmParams<S>,
    pub prompts: Option<PromptSet<S>>,
    pub graph: Arc<PreparedGraph<S>>,
    pub graph_digest: String,
    pub sample_count: usize,
    pub domain_tag: String,
}

impl<S: Scalar> ClientState<S> {
    pub fn new(
        client_id: usize,
        data: &ClientData<S>,
        weight: SampleWeight,
        init: &GfmParams<S>,
        model: &ModelConfig,
    ) -> Result<Self> {
        if data.feature_dim() != model.d {
            return Err(Error::contract(format!(
                "client {client_id} has feature dimension {}, the model expects {}",
                data.feature_dim(),
                model.d
            )));
        }
        let graph = Arc::new(PreparedGraph::new(&*data.training_graph()?, model.dense_threshold));
        let sample_count = match weight {
            SampleWeight::Nodes => data.node_count(),
            SampleWeight::Graphs => data.graph_count(),
        };
        if sample_count == 0 {
            return Err(Error::contract(format!("client {client_id} holds no training instances")));
        }
        Ok(Self {
            client_id,
            params: init.clone(),
            prompts: None,
            graph_digest: graph_digest(&graph),
            graph,
            sample_count,
            domain_tag: data.domain_tag().to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundRecord {
    pub client: usize,
    pub participated: bool,
    /// Loss at the last local epoch (measured before its update).
    pub loss: Option<LossBreakdown>,
    pub epochs_completed: usize,
    pub utilization: Option<f64>,
    pub aborted: Option<String>,
    pub duration_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientRoundRecord>,
    pub digest_before: String,
    pub digest_after: String,
    pub duration_ms: f64,
}

/// One line of the round log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundLogLine {
    pub round: usize,
    pub client: usize,
    pub loss_total: Option<f64>,
    pub loss_feat: Option<f64>,
    pub loss_topo: Option<f64>,
    pub loss_codebook: Option<f64>,
    pub loss_commit: Option<f64>,
    /// Fraction of tokens in use at the last local epoch.
    pub utilization: Option<f64>,
    pub duration_ms: f64,
    pub participated: bool,
    pub aborted: Option<String>,
    pub digest_after: String,
}

impl RoundRecord {
    pub fn log_lines(&self) -> Vec<RoundLogLine> {
        self.clients
            .iter()
            .map(|c| RoundLogLine {
                round: self.round,
                client: c.client,
                loss_total: c.loss.map(|l| l.total),
                loss_feat: c.loss.map(|l| l.feat),
                loss_topo: c.loss.map(|l| l.topo),
                loss_codebook: c.loss.map(|l| l.codebook_term),
                loss_commit: c.loss.map(|l| l.commitment_term),
                utilization: c.utilization,
                duration_ms: c.duration_ms,
                participated: c.participated,
                aborted: c.aborted.clone(),
                digest_after: self.digest_after.clone(),
            })
            .collect()
    }

    pub fn to_ndjson(&self) -> String {
        self.log_lines()
            .iter()
            .map(|l| serde_json::to_string(l).expect("record serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ServerState<S> {
    pub global: GfmParams<S>,
    /// Rounds completed.
    pub round: usize,
    /// Digest of the parameters the prototypes were extracted under.
    pub init_digest: String,
    pub prototypes: Vec<DomainPrototype<S>>,
    pub records: Vec<RoundRecord>,
}

/// Deep-copies the global backbone into every client. Prompts are local and
/// stay untouched.
pub fn broadcast<S: Scalar>(server: &ServerState<S>, clients: &mut [ClientState<S>]) {
    for c in clients {
        c.params = server.global.clone();
    }
}

/// `Σ N_k θ_k / N`, coordinatewise, summed in client-id order and clamped to
/// the coordinate's range over clients so exact identities survive rounding.
pub fn aggregate<S: Scalar>(updates: &[(usize, usize, &GfmParams<S>)]) -> Result<GfmParams<S>> {
    let (_, _, first) = *updates
        .first()
        .ok_or_else(|| Error::contract("aggregation needs at least one client"))?;
    let schema = first.schema();
    if updates.iter().any(|(_, _, p)| p.schema() != schema) {
        return Err(Error::contract("clients hold parameters with different schemas"));
    }
    let mut order: Vec<&(usize, usize, &GfmParams<S>)> = updates.iter().collect();
    order.sort_by_key(|u| u.0);
    if order.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::contract("duplicate client id in aggregation"));
    }
    let total: usize = order.iter().map(|u| u.1).sum();
    if total == 0 {
        return Err(Error::contract("aggregation weights sum to zero"));
    }
    let flats: Vec<Vec<S>> = order.iter().map(|u| u.2.flatten()).collect();
    let len = flats[0].len();
    let mut out = Vec::with_capacity(len);
    for j in 0..len {
        let mut acc = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (u, f) in order.iter().zip(&flats) {
            let v = f[j].f64();
            acc += u.1 as f64 * v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        out.push(S::from_f64_lossy((acc / total as f64).clamp(lo, hi)));
    }
    let mut g = first.clone();
    g.unflatten(&out)?;
    Ok(g)
}

/// Seed of client `k`'s local work in round `r` (1-based).
pub fn client_seed(seed: u64, client: usize, round: usize) -> u64 {
    rng::derive_seed(seed, &[STREAM_CLIENT, client as u64, round as u64])
}

/// Clients taking part in round `r`, ascending.
pub fn participants(seed: u64, count: usize, fraction: f64, round: usize) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..count).collect();
    }
    let take = ((fraction * count as f64).ceil() as usize).clamp(1, count);
    let mut rng = rng::stream(seed, &[STREAM_PARTICIPATION, round as u64]);
    let mut picked = sample(&mut rng, count, take).into_vec();
    picked.sort_unstable();
    picked
}

/// A federation in progress: server, clients and the settings they share.
#[derive(Debug, Clone)]
pub struct Federation<S> {
    pub config: FedConfig,
    pub model: ModelConfig,
    pub server: ServerState<S>,
    pub clients: Vec<ClientState<S>>,
}

impl<S: Scalar> Federation<S> {
    /// Sets up clients, and with anchors enabled extracts prototypes under
    /// `global_init` and reseeds its codebook before any round runs.
    pub fn new(
        config: FedConfig,
        model: ModelConfig,
        data: &[ClientData<S>],
        global_init: GfmParams<S>,
    ) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if data.is_empty() {
            return Err(Error::contract("a federation needs at least one client"));
        }
        if global_init.dim() != model.d {
            return Err(Error::contract("initial parameters do not match the model dimension"));
        }
        let mut clients = data
            .iter()
            .enumerate()
            .map(|(k, d)| ClientState::new(k, d, config.sample_weight, &global_init, &model))
            .collect::<Result<Vec<_>>>()?;
        if config.adadpp_enabled {
            for c in &mut clients {
                c.prompts = Some(PromptSet::init(
                    c.client_id,
                    config.prompt_count,
                    model.d,
                    rng::derive_seed(config.seed, &[STREAM_PROMPTS]),
                )?);
            }
        }
        let init_digest = global_init.digest();
        let mut global = global_init;
        let mut prototypes = Vec::new();
        if config.ancdai_enabled {
            prototypes = clients
                .iter()
                .map(|c| extract_prototype(&global, &c.graph, c.client_id))
                .collect::<Result<Vec<_>>>()?;
            let sigma = config
                .sigma
                .unwrap_or_else(|| relative_sigma(&prototypes, config.sigma_factor));
            global.codebook = init_codebook(
                &prototypes,
                model.heads,
                model.tokens,
                &model,
                sigma,
                rng::derive_seed(config.seed, &[STREAM_ANCHORS]),
            )?;
        }
        for c in &mut clients {
            c.params = global.clone();
        }
        Ok(Self {
            config,
            model,
            server: ServerState {
                global,
                round: 0,
                init_digest,
                prototypes,
                records: Vec::new(),
            },
            clients,
        })
    }

    /// Runs round `server.round + 1`.
    pub fn step_round(&mut self) -> Result<&RoundRecord> {
        let start = Instant::now();
        let round = self.server.round + 1;
        broadcast(&self.server, &mut self.clients);
        let digest_before = self.server.global.digest();
        let active = participants(self.config.seed, self.clients.len(), self.config.participation, round);
        let (cfg, model) = (&self.config, &self.model);
        let work = |c: &ClientState<S>| {
            let t = Instant::now();
            let out = local_pretrain(
                &c.params,
                c.prompts.as_ref(),
                &c.graph,
                model,
                &cfg.local,
                client_seed(cfg.seed, c.client_id, round),
            );
            (out, t.elapsed().as_secs_f64() * 1e3)
        };
        let selected: Vec<&ClientState<S>> = active.iter().map(|&k| &self.clients[k]).collect();
        let results: Vec<_> = if cfg.deterministic {
            selected.iter().map(|c| work(c)).collect()
        } else {
            selected.par_iter().map(|c| work(c)).collect()
        };
        let mut records: Vec<ClientRoundRecord> = self
            .clients
            .iter()
            .map(|c| ClientRoundRecord {
                client: c.client_id,
                participated: false,
                loss: None,
                epochs_completed: 0,
                utilization: None,
                aborted: None,
                duration_ms: 0.0,
            })
            .collect();
        for (&k, (out, ms)) in active.iter().zip(results) {
            let out = out.map_err(|e| e.in_component(&format!("client {k}")))?;
            let c = &mut self.clients[k];
            let rec = &mut records[k];
            rec.participated = true;
            rec.loss = out.history.last().copied();
            rec.epochs_completed = out.history.len();
            rec.utilization = out.utilization.last().copied();
            rec.duration_ms = ms;
            if let Some(e) = &out.aborted {
                rec.aborted = Some(e.to_string());
            }
            c.params = out.params;
            if out.prompts.is_some() {
                c.prompts = out.prompts;
            }
        }
        let updates: Vec<(usize, usize, &GfmParams<S>)> = active
            .iter()
            .filter(|&&k| records[k].aborted.is_none())
            .map(|&k| (k, self.clients[k].sample_count, &self.clients[k].params))
            .collect();
        if !updates.is_empty() {
            self.server.global = aggregate(&updates)?;
        }
        self.server.round = round;
        self.server.records.push(RoundRecord {
            round,
            clients: records,
            digest_before,
            digest_after: self.server.global.digest(),
            duration_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        Ok(self.server.records.last().expect("just pushed"))
    }

    /// Runs rounds until `rounds` have completed in total.
    pub fn run_to(&mut self, rounds: usize, mut on_round: impl FnMut(&RoundRecord)) -> Result<()> {
        while self.server.round < rounds {
            on_round(self.step_round()?);
        }
        Ok(())
    }

    /// Client prompt sets, ascending by id.
    pub fn prompt_sets(&self) -> Vec<PromptSet<S>> {
        self.clients.iter().filter_map(|c| c.prompts.clone()).collect()
    }

    pub fn pool(&self) -> Result<Option<PromptPool<S>>> {
        let sets = self.prompt_sets();
        if sets.is_empty() {
            Ok(None)
        } else {
            build_pool(&sets).map(Some)
        }
    }
}

/// Sets up a federation and runs `config.rounds` rounds.
pub fn run_pretraining<S: Scalar>(
    config: &FedConfig,
    model: &ModelConfig,
    data: &[ClientData<S>],
    global_init: GfmParams<S>,
) -> Result<Federation<S>> {
    let mut fed = Federation::new(config.clone(), *model, data, global_init)?;
    fed.run_to(config.rounds, |_| {})?;
    Ok(fed)
}
