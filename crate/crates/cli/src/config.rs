//! Experiment configuration: one TOML file with a section per stage. Every
//! field has a default, so an empty file is a complete configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use graphfed_core::downstream::FinetuneConfig;
use graphfed_core::federation::{FedConfig, SampleWeight};
use graphfed_core::graph::{CollectionSpec, SplitRatios, SyntheticDomainSpec};
use graphfed_core::optim::Optimizer;
use graphfed_core::vqvae::{LocalTrainConfig, ModelConfig};
use graphfed_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub precision: Precision,
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelConfig,
    pub federation: FederationSection,
    pub ancdai: AncdaiSection,
    pub adadpp: AdadppSection,
    pub finetune: FinetuneSection,
    pub diagnose: DiagnoseSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F64,
            seed: 0,
            data: DataSection::default(),
            model: ModelConfig::default(),
            federation: FederationSection::default(),
            ancdai: AncdaiSection::default(),
            adadpp: AdadppSection::default(),
            finetune: FinetuneSection::default(),
            diagnose: DiagnoseSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub datasets: Vec<DatasetConfig>,
}

impl Default for DataSection {
    /// The three-domain synthetic benchmark, one client per domain.
    fn default() -> Self {
        Self {
            datasets: (0..3)
                .map(|k| DatasetConfig {
                    name: format!("domain{k}"),
                    source: Source::Benchmark {
                        domain: k,
                        domains: 3,
                        nodes: 300,
                        seed: None,
                    },
                    clients: 1,
                    partition: PartitionMethod::Auto,
                    split: SplitSpec::default(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub source: Source,
    #[serde(default = "one")]
    pub clients: usize,
    #[serde(default)]
    pub partition: PartitionMethod,
    #[serde(default)]
    pub split: SplitSpec,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    /// A graph container directory.
    Container { path: PathBuf },
    /// A graph collection directory.
    Collection { path: PathBuf },
    Synthetic { spec: SyntheticDomainSpec },
    SyntheticCollection { spec: CollectionSpec },
    /// Domain `domain` of the generated benchmark family; the feature width
    /// follows `model.d` and the seed defaults to the experiment seed.
    Benchmark {
        domain: usize,
        domains: usize,
        nodes: usize,
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMethod {
    /// Louvain for single graphs, random allocation for collections.
    #[default]
    Auto,
    Louvain,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSpec {
    /// `cora`, `wikics` or `pubmed`.
    Preset(String),
    Ratios(SplitRatios),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratios(SplitRatios::PUBMED)
    }
}

impl SplitSpec {
    pub fn ratios(&self) -> Result<SplitRatios> {
        let r = match self {
            SplitSpec::Preset(p) => match p.to_ascii_lowercase().as_str() {
                "cora" => SplitRatios::CORA,
                "wikics" => SplitRatios::WIKICS,
                "pubmed" => SplitRatios::PUBMED,
                other => return Err(Error::Config(format!("unknown split preset `{other}`"))),
            },
            SplitSpec::Ratios(r) => *r,
        };
        r.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub rounds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub participation: f64,
    pub sample_weight: SampleWeight,
    pub deterministic: bool,
    /// Write a checkpoint every this many rounds (the last round always is).
    pub checkpoint_every: usize,
}

impl Default for FederationSection {
    fn default() -> Self {
        let fed = FedConfig::default();
        Self {
            rounds: fed.rounds,
            epochs: fed.local.epochs,
            lr: fed.local.lr,
            optimizer: fed.local.optimizer,
            participation: fed.participation,
            sample_weight: fed.sample_weight,
            deterministic: false,
            checkpoint_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AncdaiSection {
    pub enabled: bool,
    pub sigma_factor: f64,
    pub sigma: Option<f64>,
}

impl Default for AncdaiSection {
    fn default() -> Self {
        let fed = FedConfig::default();
        Self {
            enabled: true,
            sigma_factor: fed.sigma_factor,
            sigma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdadppSection {
    pub enabled: bool,
    pub prompt_count: usize,
    pub top_k: Option<usize>,
}

impl Default for AdadppSection {
    fn default() -> Self {
        Self {
            enabled: true,
            prompt_count: FedConfig::default().prompt_count,
            top_k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    /// Learning rates tried per run; the one with the best validation
    /// metric is kept.
    pub lr_grid: Vec<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub full_finetune: bool,
    /// Independent runs per client.
    pub runs: usize,
    pub few_shot: bool,
    pub shots: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        Self {
            lr_grid: vec![f.lr],
            max_epochs: f.max_epochs,
            patience: f.patience,
            weight_decay: f.weight_decay,
            optimizer: f.optimizer,
            full_finetune: f.full_finetune,
            runs: 3,
            few_shot: false,
            shots: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    /// Drop degrees above this from the histogram tables.
    pub max_degree: Option<usize>,
    /// Checkpoint of a second model whose embeddings are compared too.
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    CodebookTokens,
    PromptCount,
    Sigma,
    Ablation,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::CodebookTokens => "codebook_tokens",
            SweepAxis::PromptCount => "prompt_count",
            SweepAxis::Sigma => "sigma",
            SweepAxis::Ablation => "ablation",
        }
    }

    /// Grid used when no values are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::CodebookTokens => &["32", "64", "128", "256"],
            SweepAxis::PromptCount => &["1", "2", "3", "4", "8"],
            SweepAxis::Sigma => &["0.01", "0.05", "0.1", "0.2"],
            SweepAxis::Ablation => &["full", "wo_adadpp", "wo_ancdai", "naive"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub axis: SweepAxis,
    /// Grid values as text: integers, reals or ablation names.
    pub values: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            axis: SweepAxis::PromptCount,
            values: SweepAxis::PromptCount.default_values(),
        }
    }
}

/// Components switched on for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub ancdai: bool,
    pub adadpp: bool,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation { ancdai: true, adadpp: true },
        Ablation { ancdai: true, adadpp: false },
        Ablation { ancdai: false, adadpp: true },
        Ablation { ancdai: false, adadpp: false },
    ];

    pub fn label(self) -> &'static str {
        match (self.ancdai, self.adadpp) {
            (true, true) => "full",
            (true, false) => "wo_adadpp",
            (false, true) => "wo_ancdai",
            (false, false) => "naive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`; use full, wo_adadpp, wo_ancdai or naive")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            ancdai: self.ancdai.enabled,
            adadpp: self.adadpp.enabled,
        }
    }

    pub fn set_ablation(&mut self, a: Ablation) {
        self.ancdai.enabled = a.ancdai;
        self.adadpp.enabled = a.adadpp;
    }

    pub fn total_clients(&self) -> usize {
        self.data.datasets.iter().map(|d| d.clients).sum()
    }

    pub fn fed_config(&self) -> FedConfig {
        let f = &self.federation;
        FedConfig {
            rounds: f.rounds,
            local: LocalTrainConfig {
                lr: f.lr,
                epochs: f.epochs,
                optimizer: f.optimizer,
            },
            ancdai_enabled: self.ancdai.enabled,
            sigma_factor: self.ancdai.sigma_factor,
            sigma: self.ancdai.sigma,
            adadpp_enabled: self.adadpp.enabled,
            prompt_count: self.adadpp.prompt_count,
            participation: f.participation,
            sample_weight: f.sample_weight,
            seed: self.seed,
            deterministic: f.deterministic,
        }
    }

    pub fn finetune_config(&self, lr: f64) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            lr,
            max_epochs: f.max_epochs,
            patience: f.patience,
            weight_decay: f.weight_decay,
            optimizer: f.optimizer,
            top_k: if self.adadpp.enabled { self.adadpp.top_k } else { None },
            full_finetune: f.full_finetune,
        }
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.fed_config().validate()?;
        if self.federation.checkpoint_every == 0 {
            return Err(Error::Config("federation.checkpoint_every must be at least 1".into()));
        }
        let sets = &self.data.datasets;
        if sets.is_empty() {
            return Err(Error::Config("data.datasets is empty".into()));
        }
        let mut names = BTreeSet::new();
        for d in sets {
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("dataset name `{}` is used twice", d.name)));
            }
            if d.clients == 0 {
                return Err(Error::Config(format!("dataset `{}` needs at least one client", d.name)));
            }
            d.split.ratios().map_err(|e| Error::Config(format!("dataset `{}`: {e}", d.name)))?;
            match &d.source {
                Source::Container { path } | Source::Collection { path } => {
                    if !path.exists() {
                        return Err(Error::Config(format!(
                            "dataset `{}`: path {} does not exist",
                            d.name,
                            path.display()
                        )));
                    }
                }
                Source::Synthetic { spec } if spec.feature_dim != self.model.d => {
                    return Err(Error::Config(format!(
                        "dataset `{}` has feature_dim {}, model.d is {}",
                        d.name, spec.feature_dim, self.model.d
                    )));
                }
                Source::SyntheticCollection { spec } if spec.feature_dim != self.model.d => {
                    return Err(Error::Config(format!(
                        "dataset `{}` has feature_dim {}, model.d is {}",
                        d.name, spec.feature_dim, self.model.d
                    )));
                }
                Source::Benchmark { domain, domains, .. } if domain >= domains => {
                    return Err(Error::Config(format!(
                        "dataset `{}`: benchmark domain {domain} out of {domains}",
                        d.name
                    )));
                }
                _ => {}
            }
            let single_graph = matches!(
                d.source,
                Source::Container { .. } | Source::Synthetic { .. } | Source::Benchmark { .. }
            );
            match (d.partition, single_graph) {
                (PartitionMethod::Random, true) if d.clients > 1 => {
                    return Err(Error::Config(format!(
                        "dataset `{}`: random allocation needs a graph collection",
                        d.name
                    )))
                }
                (PartitionMethod::Louvain, false) => {
                    return Err(Error::Config(format!(
                        "dataset `{}`: Louvain partitioning needs a single graph",
                        d.name
                    )))
                }
                _ => {}
            }
        }
        if let Some(k) = self.adadpp.top_k {
            let pool = self.total_clients() * self.adadpp.prompt_count;
            if !self.adadpp.enabled {
                return Err(Error::Config("adadpp.top_k is set but adadpp is disabled".into()));
            }
            if k == 0 || k > pool {
                return Err(Error::Config(format!(
                    "adadpp.top_k = {k} must lie in [1, {pool}] (clients x prompt_count)"
                )));
            }
        }
        let f = &self.finetune;
        if f.lr_grid.is_empty() || f.lr_grid.iter().any(|&lr| !(lr > 0.0)) {
            return Err(Error::Config("finetune.lr_grid needs positive learning rates".into()));
        }
        if f.runs == 0 || f.max_epochs == 0 {
            return Err(Error::Config("finetune.runs and finetune.max_epochs must be at least 1".into()));
        }
        if f.few_shot && f.shots == 0 {
            return Err(Error::Config("finetune.shots must be at least 1".into()));
        }
        if let Some(r) = &self.diagnose.reference {
            if !r.exists() {
                return Err(Error::Config(format!("diagnose.reference {} does not exist", r.display())));
            }
        }
        Ok(())
    }
}
