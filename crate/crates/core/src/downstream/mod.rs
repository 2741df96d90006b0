//! Task heads on a frozen backbone and prompt pool, evaluation metrics,
//! few-shot subsampling and the inter-domain similarity diagnostic.

mod entanglement;
mod metrics;

pub use entanglement::{cosine_matrix, entanglement_diagnostic, matrix_csv, mean_off_diagonal, EntanglementReport};
pub use metrics::{accuracy, auc, mean_std, mean_task_auc, summarize, summary_csv, MetricRecord, SummaryRow};

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DataSplit, GraphCollection, LabelLevel, Labels, TextAttributedGraph};
use crate::optim::{Optimizer, OptimizerState};
use crate::prompt_pool::{apply_pool, PromptPool};
use crate::rng::{self, STREAM_HEAD, STREAM_SPLIT};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tape, Tensor, Var};
use crate::vqvae::{encode, encode_taped, BoundParams, GfmParams, PreparedGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    NodeCls,
    EdgeCls,
    GraphClsMultitask,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::NodeCls => "node_cls",
            TaskKind::EdgeCls => "edge_cls",
            TaskKind::GraphClsMultitask => "graph_cls_multitask",
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::GraphClsMultitask => "auc",
            _ => "accuracy",
        }
    }
}

/// Labeled data for one downstream task. Units are nodes, labeled edges or
/// member graphs.
#[derive(Debug, Clone)]
pub enum TaskData<S> {
    Node(TextAttributedGraph<S>),
    Edge(TextAttributedGraph<S>),
    Graph(GraphCollection<S>),
}

impl<S: Scalar> TaskData<S> {
    /// Node or edge task chosen by the graph's label level.
    pub fn from_graph(g: TextAttributedGraph<S>) -> Result<Self> {
        match g.label_level() {
            LabelLevel::Node => Ok(TaskData::Node(g)),
            LabelLevel::Edge => Ok(TaskData::Edge(g)),
            LabelLevel::Graph => Err(Error::contract(
                "a single graph with graph-level labels is not a task; use a collection",
            )),
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            TaskData::Node(_) => TaskKind::NodeCls,
            TaskData::Edge(_) => TaskKind::EdgeCls,
            TaskData::Graph(_) => TaskKind::GraphClsMultitask,
        }
    }

    pub fn unit_count(&self) -> usize {
        match self {
            TaskData::Node(g) => g.node_count(),
            TaskData::Edge(g) => g.edge_count(),
            TaskData::Graph(c) => c.len(),
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            TaskData::Node(g) | TaskData::Edge(g) => g.arity(),
            TaskData::Graph(c) => c.arity(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            TaskData::Node(g) | TaskData::Edge(g) => g.feature_dim(),
            TaskData::Graph(c) => c.feature_dim(),
        }
    }

    pub fn domain_tag(&self) -> &str {
        match self {
            TaskData::Node(g) | TaskData::Edge(g) => g.domain_tag(),
            TaskData::Graph(c) => c.graphs()[0].domain_tag(),
        }
    }

    /// Class of each unit for stratified splitting; `None` marks an
    /// unlabeled unit. Graph-level units form a single stratum.
    pub fn strata(&self) -> Vec<Option<usize>> {
        let class = |l: &[i32]| l.iter().map(|&c| (c >= 0).then_some(c as usize)).collect();
        match self {
            TaskData::Node(g) | TaskData::Edge(g) => match g.labels() {
                Labels::Node(l) | Labels::Edge(l) => class(l),
                Labels::Graph(_) => vec![None; self.unit_count()],
            },
            TaskData::Graph(c) => vec![Some(0); c.len()],
        }
    }

    fn class_targets(&self, units: &[usize]) -> Result<Vec<usize>> {
        let strata = self.strata();
        units
            .iter()
            .map(|&u| {
                strata[u].ok_or_else(|| Error::contract(format!("unit {u} has no label")))
            })
            .collect()
    }

    /// `units x tasks`, NaN where missing.
    fn task_targets(&self, units: &[usize]) -> Result<Tensor<S>> {
        let TaskData::Graph(c) = self else {
            return Err(Error::contract("multi-task targets exist only for graph collections"));
        };
        let t = c.arity();
        let mut data = Vec::with_capacity(units.len() * t);
        for &u in units {
            match c.graphs()[u].labels() {
                Labels::Graph(v) => data.extend(v.iter().map(|&y| S::from_f64_lossy(y as f64))),
                _ => return Err(Error::contract("collection member lacks graph labels")),
            }
        }
        Tensor::matrix(units.len(), t, data)
    }
}

/// Linear map from a `d`-wide readout to `arity` logits.
#[derive(Debug, Clone)]
pub struct TaskHead<S> {
    pub kind: TaskKind,
    /// `d x arity`.
    pub weight: Tensor<S>,
    /// `1 x arity`.
    pub bias: Tensor<S>,
}

impl<S: Scalar> TaskHead<S> {
    pub fn arity(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, reps: &Tensor<S>) -> Result<Tensor<S>> {
        kernels::add_row(&kernels::matmul(reps, &self.weight)?, &self.bias)
    }

    pub fn digest(&self) -> String {
        crate::digest::digest_values([self.weight.data(), self.bias.data()])
    }
}

/// Weights drawn from `N(0, 1/d)`, zero bias.
pub fn make_head<S: Scalar>(kind: TaskKind, d: usize, arity: usize, seed: u64) -> Result<TaskHead<S>> {
    if arity == 0 || d == 0 {
        return Err(Error::contract("a task head needs d >= 1 and arity >= 1"));
    }
    let mut r = rng::stream(seed, &[STREAM_HEAD]);
    Ok(TaskHead {
        kind,
        weight: Tensor::matrix(d, arity, rng::normal_vec(&mut r, d * arity, (1.0 / d as f64).sqrt()))?,
        bias: Tensor::zeros(&[1, arity]),
    })
}

pub(crate) fn augmented<S: Scalar>(
    g: &TextAttributedGraph<S>,
    pool: Option<&PromptPool<S>>,
    top_k: Option<usize>,
) -> Result<TextAttributedGraph<S>> {
    match pool {
        Some(p) => g.with_features(apply_pool(p, g.features(), top_k)?),
        None => Ok(g.clone()),
    }
}

fn graph_embedding<S: Scalar>(
    gfm: &GfmParams<S>,
    pool: Option<&PromptPool<S>>,
    top_k: Option<usize>,
    g: &TextAttributedGraph<S>,
) -> Result<Tensor<S>> {
    encode(gfm, &PreparedGraph::new(&augmented(g, pool, top_k)?, 0))
}

fn edge_readout<S: Scalar>(z: &Tensor<S>, edges: &[(usize, usize)]) -> Result<Tensor<S>> {
    let d = z.cols();
    let mut out = Vec::with_capacity(edges.len() * d);
    for &(u, v) in edges {
        out.extend(z.row(u).iter().zip(z.row(v)).map(|(a, b)| S::from_f64_lossy(0.5 * (a.f64() + b.f64()))));
    }
    Tensor::matrix(edges.len(), d, out)
}

/// Representation of every unit: `z_i` for nodes, `(z_u + z_v)/2` for edges,
/// the row mean of `Z` for graphs.
pub fn readout<S: Scalar>(
    gfm: &GfmParams<S>,
    pool: Option<&PromptPool<S>>,
    top_k: Option<usize>,
    data: &TaskData<S>,
) -> Result<Tensor<S>> {
    match data {
        TaskData::Node(g) => graph_embedding(gfm, pool, top_k, g),
        TaskData::Edge(g) => edge_readout(&graph_embedding(gfm, pool, top_k, g)?, g.edges()),
        TaskData::Graph(c) => {
            let d = gfm.dim();
            let mut out = Vec::with_capacity(c.len() * d);
            for g in c.graphs() {
                out.extend(kernels::mean_rows(&graph_embedding(gfm, pool, top_k, g)?)?.into_data());
            }
            Tensor::matrix(c.len(), d, out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    /// Hard top-k selection over the pool instead of the full softmax.
    pub top_k: Option<usize>,
    /// Also update the backbone (the pool stays frozen).
    pub full_finetune: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            max_epochs: 1000,
            patience: 20,
            weight_decay: 5e-4,
            optimizer: Optimizer::Adam,
            top_k: None,
            full_finetune: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<S> {
    pub head: TaskHead<S>,
    /// Updated backbone, only with `full_finetune`.
    pub backbone: Option<GfmParams<S>>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Best selection metric (validation, or training when there is no
    /// validation set).
    pub best_metric: Option<f64>,
    /// Training loss per epoch.
    pub losses: Vec<f64>,
    /// Tasks with no training target, left out of the loss.
    pub skipped_tasks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric_name: String,
    pub value: f64,
    pub skipped_tasks: Vec<usize>,
}

fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Metric of `head` on precomputed unit representations.
pub fn score_units<S: Scalar>(
    head: &TaskHead<S>,
    reps: &Tensor<S>,
    data: &TaskData<S>,
    units: &[usize],
) -> Result<Evaluation> {
    if units.is_empty() {
        return Err(Error::contract("evaluation needs at least one unit"));
    }
    let logits = head.logits(&kernels::gather_rows(reps, units)?)?;
    match data.kind() {
        TaskKind::GraphClsMultitask => {
            let targets = data.task_targets(units)?;
            let (m, skipped) = mean_task_auc(&logits.to_f64_vec(), &targets.to_f64_vec(), head.arity());
            let value = m.ok_or_else(|| {
                Error::Validation("no task has both classes among the evaluated graphs".into())
            })?;
            Ok(Evaluation {
                metric_name: "auc".into(),
                value,
                skipped_tasks: skipped,
            })
        }
        kind => Ok(Evaluation {
            metric_name: kind.metric_name().into(),
            value: accuracy(&argmax_rows(&logits), &data.class_targets(units)?),
            skipped_tasks: Vec::new(),
        }),
    }
}

pub fn evaluate<S: Scalar>(
    gfm: &GfmParams<S>,
    pool: Option<&PromptPool<S>>,
    head: &TaskHead<S>,
    data: &TaskData<S>,
    units: &[usize],
    top_k: Option<usize>,
) -> Result<Evaluation> {
    if units.is_empty() {
        return Err(Error::contract("the test split is empty"));
    }
    score_units(head, &readout(gfm, pool, top_k, data)?, data, units)
}

enum Targets<S> {
    Classes(Arc<[usize]>),
    Tasks(Arc<Tensor<S>>),
}

fn head_loss<S: Scalar>(tape: &mut Tape<S>, logits: Var, targets: &Targets<S>) -> Result<Var> {
    match targets {
        Targets::Classes(y) => tape.softmax_cross_entropy(logits, y.clone()),
        Targets::Tasks(t) => tape.masked_bce(logits, t.clone()),
    }
}

/// Trains the head (and with `full_finetune` the backbone) on the training
/// units, keeping the head with the best selection metric and stopping after
/// `patience` epochs without improvement.
pub fn finetune<S: Scalar>(
    gfm: &GfmParams<S>,
    pool: Option<&PromptPool<S>>,
    head: &TaskHead<S>,
    data: &TaskData<S>,
    split: &DataSplit,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome<S>> {
    if split.train.is_empty() {
        return Err(Error::contract("fine-tuning needs a non-empty training split"));
    }
    if head.kind != data.kind() || head.arity() != data.arity() || head.weight.rows() != gfm.dim() {
        return Err(Error::contract("task head does not match the task or the backbone"));
    }
    if cfg.full_finetune && data.kind() == TaskKind::GraphClsMultitask {
        return Err(Error::contract("full fine-tuning supports node and edge tasks only"));
    }
    let train = &split.train;
    let select_units = if split.val.is_empty() { &split.train } else { &split.val };
    let (targets, skipped_tasks) = match data.kind() {
        TaskKind::GraphClsMultitask => {
            let t = data.task_targets(train)?;
            let skipped = (0..t.cols())
                .filter(|&j| (0..t.rows()).all(|i| t.at(i, j).is_nan()))
                .collect();
            (Targets::Tasks(Arc::new(t)), skipped)
        }
        _ => (Targets::Classes(data.class_targets(train)?.into()), Vec::new()),
    };
    let mut head_now = head.clone();
    let mut backbone = cfg.full_finetune.then(|| gfm.clone());
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr, cfg.weight_decay)?;
    let frozen_reps = if cfg.full_finetune {
        None
    } else {
        Some(readout(gfm, pool, cfg.top_k, data)?)
    };
    let full_input = match (cfg.full_finetune, data) {
        (true, TaskData::Node(g) | TaskData::Edge(g)) => {
            Some(PreparedGraph::new(&augmented(g, pool, cfg.top_k)?, 0))
        }
        _ => None,
    };
    let train_idx: Arc<[usize]> = train.as_slice().into();
    let mut best = (head_now.clone(), backbone.clone(), None::<f64>, 0usize);
    let mut losses = Vec::new();
    let mut epoch = 0;
    while epoch < cfg.max_epochs {
        epoch += 1;
        let mut tape = Tape::new();
        let w = tape.param(head_now.weight.clone());
        let b = tape.param(head_now.bias.clone());
        let (reps, bound) = match (&frozen_reps, &full_input, &backbone) {
            (Some(r), _, _) => (tape.constant(kernels::gather_rows(r, train)?), None),
            (None, Some(g), Some(bb)) => {
                let bound = BoundParams::bind(&mut tape, bb, true);
                let x = tape.constant(g.features.clone());
                let z = encode_taped(&mut tape, &bound, g, x)?;
                let r = match data {
                    TaskData::Edge(graph) => {
                        let (us, vs): (Vec<usize>, Vec<usize>) = train.iter().map(|&e| graph.edges()[e]).unzip();
                        let zu = tape.gather_rows(z, us.into())?;
                        let zv = tape.gather_rows(z, vs.into())?;
                        let s = tape.add(zu, zv)?;
                        tape.scale(s, 0.5)?
                    }
                    _ => tape.gather_rows(z, train_idx.clone())?,
                };
                (r, Some(bound))
            }
            _ => unreachable!("full fine-tuning inputs are prepared above"),
        };
        let l = tape.matmul(reps, w)?;
        let logits = tape.add_row(l, b)?;
        let loss = head_loss(&mut tape, logits, &targets)?;
        losses.push(tape.value(loss).item().f64());
        let g = tape.backward(loss)?;
        let mut grads = vec![g.wrt(w), g.wrt(b)];
        let mut params: Vec<&mut Tensor<S>> = vec![&mut head_now.weight, &mut head_now.bias];
        if let (Some(bb), Some(bound)) = (backbone.as_mut(), bound.as_ref()) {
            grads.extend(bound.gradients(&g));
            params.extend(bb.tensors_mut());
        }
        opt.step(&mut params, &grads)?;
        let reps_now = match (&frozen_reps, &backbone) {
            (Some(r), _) => r.clone(),
            (None, Some(bb)) => readout(bb, pool, cfg.top_k, data)?,
            _ => unreachable!(),
        };
        let metric = match score_units(&head_now, &reps_now, data, select_units) {
            Ok(e) => e.value,
            Err(Error::Validation(_)) => -losses[losses.len() - 1],
            Err(e) => return Err(e),
        };
        if best.2.is_none_or(|m| metric > m) {
            best = (head_now.clone(), backbone.clone(), Some(metric), epoch);
        } else if epoch - best.3 >= cfg.patience {
            break;
        }
    }
    Ok(FinetuneOutcome {
        head: best.0,
        backbone: best.1,
        epochs_run: epoch,
        best_epoch: best.3,
        best_metric: best.2,
        losses,
        skipped_tasks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotSpec {
    pub shots: usize,
    pub seed: u64,
}

impl Default for FewShotSpec {
    fn default() -> Self {
        Self { shots: 2, seed: 0 }
    }
}

/// Keeps at most `shots` training units per class, chosen uniformly;
/// validation and test are untouched.
pub fn few_shot_subsample<S: Scalar>(split: &DataSplit, data: &TaskData<S>, spec: FewShotSpec) -> Result<DataSplit> {
    if data.kind() == TaskKind::GraphClsMultitask {
        return Err(Error::contract(
            "few-shot subsampling applies to node and edge classification only; multi-task graph classification has no per-class shots",
        ));
    }
    if spec.shots == 0 {
        return Err(Error::contract("few-shot subsampling needs at least one shot"));
    }
    let strata = data.strata();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &u in &split.train {
        if let Some(c) = strata[u] {
            by_class.entry(c).or_default().push(u);
        }
    }
    let mut train = Vec::new();
    for (c, mut units) in by_class {
        let mut r = rng::stream(spec.seed, &[STREAM_SPLIT, 0x5407, c as u64]);
        units.shuffle(&mut r);
        units.truncate(spec.shots);
        train.extend(units);
    }
    train.sort_unstable();
    Ok(DataSplit {
        train,
        val: split.val.clone(),
        test: split.test.clone(),
        warnings: split.warnings.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{split as make_split, synth_collection, CollectionSpec, SplitRatios};
    use crate::prompt_pool::{build_pool, PromptSet};
    use crate::vqvae::ModelConfig;

    fn model(d: usize) -> ModelConfig {
        ModelConfig {
            d,
            heads: 2,
            tokens: 4,
            ..ModelConfig::default()
        }
    }

    /// Backbone whose output is its input: identity self weights, no
    /// neighbor term, no bias.
    fn identity_backbone(d: usize) -> GfmParams<f64> {
        let mut p = GfmParams::init(&model(d), 0).unwrap();
        for l in &mut p.layers {
            l.w_self = Tensor::identity(d);
            l.w_nbr = Tensor::zeros(&[d, d]);
            l.bias = Tensor::zeros(&[1, d]);
        }
        p
    }

    fn separable(n: usize, d: usize, seed: u64) -> TextAttributedGraph<f64> {
        let mut r = rng::stream(seed, &[]);
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 3;
            let noise: Vec<f64> = rng::normal_vec(&mut r, d, 0.3);
            // Non-negative features so the first-layer ReLU keeps them.
            x.extend(noise.iter().enumerate().map(|(j, e)| (if j == c { 2.0 } else { 0.0 }) + e.abs() * 0.5));
            labels.push(c as i32);
        }
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        TextAttributedGraph::new(n, edges, Tensor::matrix(n, d, x).unwrap(), None, Labels::Node(labels), 3, "sep").unwrap()
    }

    #[test]
    fn head_shapes() {
        let h = make_head::<f64>(TaskKind::NodeCls, 16, 7, 0).unwrap();
        assert_eq!(h.weight.shape(), &[16, 7]);
        let h = make_head::<f64>(TaskKind::GraphClsMultitask, 16, 128, 0).unwrap();
        assert_eq!(h.logits(&Tensor::zeros(&[3, 16])).unwrap().shape(), &[3, 128]);
        assert!(make_head::<f64>(TaskKind::NodeCls, 4, 0, 0).is_err());
    }

    #[test]
    fn edge_readout_averages_endpoints() {
        let z = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 0.0, 3.0, 2.0, 0.0, 0.0]).unwrap();
        let r = edge_readout(&z, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(r.data(), &[2.0, 1.0, 1.5, 1.0]);
    }

    /// Logistic regression fitted directly on the encoder outputs sets the
    /// accuracy bar the frozen-backbone head has to reach.
    fn oracle_train_accuracy(x: &Tensor<f64>, y: &[usize], classes: usize) -> f64 {
        let (n, d) = (x.rows(), x.cols());
        let mut w = vec![0.0; d * classes];
        for _ in 0..500 {
            let mut g = vec![0.0; d * classes];
            for i in 0..n {
                let logits: Vec<f64> = (0..classes)
                    .map(|c| (0..d).map(|j| x.at(i, j) * w[j * classes + c]).sum())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for c in 0..classes {
                    let p = (logits[c] - mx).exp() / z - if y[i] == c { 1.0 } else { 0.0 };
                    for j in 0..d {
                        g[j * classes + c] += p * x.at(i, j) / n as f64;
                    }
                }
            }
            for (a, b) in w.iter_mut().zip(g) {
                *a -= 0.5 * b;
            }
        }
        let correct = (0..n)
            .filter(|&i| {
                let s: Vec<f64> = (0..classes).map(|c| (0..d).map(|j| x.at(i, j) * w[j * classes + c]).sum()).collect();
                let best = (0..classes).fold(0, |b, c| if s[c] > s[b] { c } else { b });
                best == y[i]
            })
            .count();
        correct as f64 / n as f64
    }

    #[test]
    fn separable_labels_are_learned() {
        let g = separable(90, 6, 1);
        let data = TaskData::Node(g);
        let gfm = identity_backbone(6);
        let all: Vec<usize> = (0..90).collect();
        let split = DataSplit {
            train: all.clone(),
            val: Vec::new(),
            test: all.clone(),
            warnings: Vec::new(),
        };
        let reps = readout(&gfm, None, None, &data).unwrap();
        let bar = oracle_train_accuracy(&reps, &data.class_targets(&all).unwrap(), 3);
        assert!(bar >= 0.98, "oracle reached {bar}");
        let head = make_head(TaskKind::NodeCls, 6, 3, 0).unwrap();
        let cfg = FinetuneConfig {
            max_epochs: 200,
            lr: 0.05,
            ..FinetuneConfig::default()
        };
        let out = finetune(&gfm, None, &head, &data, &split, &cfg).unwrap();
        let acc = evaluate(&gfm, None, &out.head, &data, &all, None).unwrap().value;
        assert!(acc >= 0.98, "{acc} vs oracle {bar}");
        assert!(out.epochs_run <= 200);
    }

    #[test]
    fn freezing_holds_bitwise() {
        let g = separable(30, 4, 2);
        let data = TaskData::Node(g);
        let gfm = GfmParams::init(&model(4), 3).unwrap();
        let pool = build_pool(&[PromptSet::init(0, 3, 4, 1).unwrap(), PromptSet::init(1, 3, 4, 1).unwrap()]).unwrap();
        let (gd, pd) = (gfm.digest(), pool.digest());
        let split = make_split(&data.strata(), SplitRatios::new(0.5, 0.25, 0.25), 0).unwrap();
        let head = make_head(TaskKind::NodeCls, 4, 3, 0).unwrap();
        let cfg = FinetuneConfig {
            max_epochs: 30,
            ..FinetuneConfig::default()
        };
        let out = finetune(&gfm, Some(&pool), &head, &data, &split, &cfg).unwrap();
        assert!(out.backbone.is_none());
        assert_eq!(gfm.digest(), gd);
        assert_eq!(pool.digest(), pd);
        assert_ne!(out.head.digest(), head.digest());
    }

    #[test]
    fn full_finetune_moves_the_backbone() {
        let data = TaskData::Node(separable(30, 4, 2));
        let gfm = GfmParams::init(&model(4), 3).unwrap();
        let split = make_split(&data.strata(), SplitRatios::new(0.5, 0.25, 0.25), 0).unwrap();
        let head = make_head(TaskKind::NodeCls, 4, 3, 0).unwrap();
        let cfg = FinetuneConfig {
            max_epochs: 10,
            patience: 100,
            full_finetune: true,
            ..FinetuneConfig::default()
        };
        let out = finetune(&gfm, None, &head, &data, &split, &cfg).unwrap();
        assert_ne!(out.backbone.unwrap().digest(), gfm.digest());
    }

    #[test]
    fn graph_tasks_use_masked_auc() {
        let spec = CollectionSpec {
            graphs: 40,
            min_nodes: 4,
            max_nodes: 8,
            p_edge: 0.2,
            tasks: 3,
            feature_dim: 4,
            missing_rate: 0.2,
            domain_tag: "mol".into(),
            seed: 5,
        };
        let data = TaskData::Graph(synth_collection::<f64>(&spec).unwrap());
        let gfm = GfmParams::init(&model(4), 0).unwrap();
        let split = make_split(&data.strata(), SplitRatios::new(0.6, 0.2, 0.2), 0).unwrap();
        let head = make_head(TaskKind::GraphClsMultitask, 4, 3, 0).unwrap();
        let cfg = FinetuneConfig {
            max_epochs: 50,
            ..FinetuneConfig::default()
        };
        let out = finetune(&gfm, None, &head, &data, &split, &cfg).unwrap();
        let e = evaluate(&gfm, None, &out.head, &data, &split.test, None).unwrap();
        assert_eq!(e.metric_name, "auc");
        assert!((0.0..=1.0).contains(&e.value));
        assert!(few_shot_subsample(&split, &data, FewShotSpec::default()).is_err());
    }

    #[test]
    fn empty_test_rejected() {
        let data = TaskData::Node(separable(9, 4, 0));
        let gfm = GfmParams::init(&model(4), 0).unwrap();
        let head = make_head(TaskKind::NodeCls, 4, 3, 0).unwrap();
        assert!(evaluate(&gfm, None, &head, &data, &[], None).is_err());
    }

    #[test]
    fn evaluation_ignores_unit_order() {
        let data = TaskData::Node(separable(30, 4, 4));
        let gfm = GfmParams::init(&model(4), 0).unwrap();
        let head = make_head(TaskKind::NodeCls, 4, 3, 1).unwrap();
        let units: Vec<usize> = (0..30).collect();
        let mut rev = units.clone();
        rev.reverse();
        let a = evaluate(&gfm, None, &head, &data, &units, None).unwrap();
        let b = evaluate(&gfm, None, &head, &data, &rev, None).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn few_shot_counts() {
        let data = TaskData::Node(separable(30, 4, 0));
        let split = DataSplit {
            train: vec![0, 1, 2, 3, 4, 5, 6, 9, 12],
            val: vec![20],
            test: vec![21, 22],
            warnings: Vec::new(),
        };
        // Class 0: {0, 3, 6, 9, 12}, class 1: {1, 4}, class 2: {2, 5}.
        let s = few_shot_subsample(&split, &data, FewShotSpec { shots: 2, seed: 1 }).unwrap();
        assert_eq!(s.train.len(), 6);
        assert_eq!(s.val, split.val);
        assert_eq!(s.test, split.test);
        assert_eq!(s, few_shot_subsample(&split, &data, FewShotSpec { shots: 2, seed: 1 }).unwrap());
        let one = DataSplit {
            train: vec![0, 3, 1],
            ..split.clone()
        };
        let s = few_shot_subsample(&one, &data, FewShotSpec { shots: 2, seed: 0 }).unwrap();
        assert_eq!(s.train.len(), 3);
    }
}
