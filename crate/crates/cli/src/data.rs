//! Turns the data section into per-client training and task data.

use graphfed_core::downstream::TaskData;
use graphfed_core::graph::{
    benchmark_domains, load_collection, load_graph, louvain_partition, random_allocate, synth_collection,
    synth_domain, ClientData, GraphCollection, PartitionAssignment, SplitRatios, TextAttributedGraph,
};
use graphfed_core::rng::{derive_seed, STREAM_PARTITION, STREAM_SPLIT};
use graphfed_core::{Error, Result, Scalar};

use crate::config::{DatasetConfig, ExperimentConfig, Source};

/// A dataset as loaded, before partitioning.
#[derive(Debug, Clone)]
pub enum Whole<S> {
    Graph(TextAttributedGraph<S>),
    Collection(GraphCollection<S>),
}

impl<S: Scalar> Whole<S> {
    pub fn feature_dim(&self) -> usize {
        match self {
            Whole::Graph(g) => g.feature_dim(),
            Whole::Collection(c) => c.feature_dim(),
        }
    }

    /// One graph standing for the whole dataset (collections are joined).
    pub fn as_graph(&self) -> Result<TextAttributedGraph<S>> {
        match self {
            Whole::Graph(g) => Ok(g.clone()),
            Whole::Collection(c) => Ok(c.disjoint_union()?.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientSlot<S> {
    pub dataset: String,
    /// Index among the dataset's clients.
    pub local: usize,
    pub data: ClientData<S>,
    pub task: TaskData<S>,
    pub split: SplitRatios,
}

#[derive(Debug, Clone)]
pub struct DatasetParts<S> {
    pub name: String,
    pub whole: Whole<S>,
    pub assignment: PartitionAssignment,
    pub clients: Vec<ClientData<S>>,
    /// Cross-client edges lost by a subgraph partition.
    pub dropped_edges: usize,
}

pub fn load_dataset<S: Scalar>(cfg: &DatasetConfig, model_d: usize, seed: u64) -> Result<Whole<S>> {
    let whole = match &cfg.source {
        Source::Container { path } => Whole::Graph(load_graph(path)?),
        Source::Collection { path } => Whole::Collection(load_collection(path)?),
        Source::Synthetic { spec } => Whole::Graph(synth_domain(spec)?),
        Source::SyntheticCollection { spec } => Whole::Collection(synth_collection(spec)?),
        Source::Benchmark {
            domain,
            domains,
            nodes,
            seed: s,
        } => {
            let specs = benchmark_domains(*domains, *nodes, model_d, s.unwrap_or(seed));
            Whole::Graph(synth_domain(&specs[*domain])?)
        }
    };
    if whole.feature_dim() != model_d {
        return Err(Error::Config(format!(
            "dataset `{}` has feature width {}, model.d is {model_d}",
            cfg.name,
            whole.feature_dim()
        )));
    }
    Ok(whole)
}

pub fn partition_dataset<S: Scalar>(cfg: &DatasetConfig, whole: Whole<S>, seed: u64) -> Result<DatasetParts<S>> {
    let k = cfg.clients;
    let (assignment, clients, dropped_edges) = match &whole {
        Whole::Graph(g) if k == 1 => (
            PartitionAssignment::new(1, vec![0; g.node_count()])?,
            vec![ClientData::Subgraph(g.clone())],
            0,
        ),
        Whole::Graph(g) => {
            let s = louvain_partition(g, k, seed)?;
            (s.assignment, s.clients.into_iter().map(ClientData::Subgraph).collect(), s.dropped_edges)
        }
        Whole::Collection(c) => {
            let (a, parts) = random_allocate(c, k, seed)?;
            (a, parts.into_iter().map(ClientData::Collection).collect(), 0)
        }
    };
    Ok(DatasetParts {
        name: cfg.name.clone(),
        whole,
        assignment,
        clients,
        dropped_edges,
    })
}

/// Everything an experiment trains and evaluates on.
#[derive(Debug, Clone)]
pub struct Prepared<S> {
    pub datasets: Vec<DatasetParts<S>>,
    pub clients: Vec<ClientSlot<S>>,
}

impl<S: Scalar> Prepared<S> {
    pub fn client_data(&self) -> Vec<ClientData<S>> {
        self.clients.iter().map(|c| c.data.clone()).collect()
    }

    /// `(name, graph)` per dataset, or per client when there is a single
    /// dataset.
    pub fn domains(&self) -> Result<Vec<(String, TextAttributedGraph<S>)>> {
        if self.datasets.len() >= 2 {
            self.datasets
                .iter()
                .map(|d| Ok((d.name.clone(), d.whole.as_graph()?)))
                .collect()
        } else {
            self.clients
                .iter()
                .map(|c| Ok((format!("{}/{}", c.dataset, c.local), (*c.data.training_graph()?).clone())))
                .collect()
        }
    }

    /// Split seed of the client at global position `index`.
    pub fn split_seed(seed: u64, index: usize) -> u64 {
        derive_seed(seed, &[STREAM_SPLIT, index as u64])
    }
}

pub fn prepare<S: Scalar>(cfg: &ExperimentConfig) -> Result<Prepared<S>> {
    cfg.validate()?;
    let mut datasets = Vec::new();
    let mut clients = Vec::new();
    for (i, d) in cfg.data.datasets.iter().enumerate() {
        let whole = load_dataset::<S>(d, cfg.model.d, cfg.seed)?;
        let parts = partition_dataset(d, whole, derive_seed(cfg.seed, &[STREAM_PARTITION, i as u64]))?;
        let split = d.split.ratios()?;
        for (local, data) in parts.clients.iter().enumerate() {
            let task = match data {
                ClientData::Subgraph(g) => TaskData::from_graph(g.clone())?,
                ClientData::Collection(c) => TaskData::Graph(c.clone()),
            };
            clients.push(ClientSlot {
                dataset: d.name.clone(),
                local,
                data: data.clone(),
                task,
                split,
            });
        }
        datasets.push(parts);
    }
    if cfg.finetune.few_shot {
        if let Some(c) = clients.iter().find(|c| matches!(c.task, TaskData::Graph(_))) {
            return Err(Error::Config(format!(
                "finetune.few_shot needs class labels; dataset `{}` is multi-task graph classification",
                c.dataset
            )));
        }
    }
    if let Some(k) = cfg.adadpp.top_k {
        let pool = clients.len() * cfg.adadpp.prompt_count;
        if k > pool {
            return Err(Error::Config(format!("adadpp.top_k = {k} exceeds the pool size {pool}")));
        }
    }
    Ok(Prepared { datasets, clients })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PartitionMethod;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.model.d = 8;
        for d in &mut c.data.datasets {
            if let Source::Benchmark { nodes, .. } = &mut d.source {
                *nodes = 40;
            }
        }
        c
    }

    #[test]
    fn default_benchmark_has_one_client_per_domain() {
        let p = prepare::<f64>(&small()).unwrap();
        assert_eq!(p.clients.len(), 3);
        assert_eq!(p.domains().unwrap().len(), 3);
        assert!(p.clients.iter().all(|c| c.data.node_count() == 40));
    }

    #[test]
    fn louvain_split_into_three() {
        let mut c = small();
        c.data.datasets.truncate(1);
        c.data.datasets[0].clients = 3;
        c.data.datasets[0].partition = PartitionMethod::Louvain;
        let p = prepare::<f64>(&c).unwrap();
        assert_eq!(p.clients.len(), 3);
        assert_eq!(p.datasets[0].assignment.sizes().iter().sum::<usize>(), 40);
        assert_eq!(p.domains().unwrap().len(), 3);
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let mut c = small();
        c.data.datasets.truncate(1);
        c.data.datasets[0].source = Source::Synthetic {
            spec: benchmark_domains(1, 20, 4, 0).remove(0),
        };
        assert!(matches!(prepare::<f64>(&c), Err(Error::Config(_))));
    }
}
