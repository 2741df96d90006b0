//! Subcommands: each reads the configuration, does its stage and leaves
//! artifacts plus a [`RunReport`] in the output directory.
//!
//! ```text
//! out/
//!   partition/<dataset>/client_<k>/   containers, assignment.json
//!   checkpoint/                       federation checkpoint
//!   rounds.ndjson                     one line per client per round
//!   heads/client<i>_run<r>/           fine-tuned heads
//!   metrics.ndjson, summary.csv       fine-tune test metrics
//!   evaluation.ndjson, evaluation_summary.csv
//!   diagnose/                         similarity and degree tables
//!   sweep.csv, sweep_metrics.ndjson
//!   report_<command>.json, config_<command>.toml
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use graphfed_core::downstream::{evaluate, matrix_csv, mean_off_diagonal, summarize, summary_csv, MetricRecord, TaskHead, TaskKind};
use graphfed_core::federation::{load_checkpoint, read_manifest, save_checkpoint, FedConfig, Federation};
use graphfed_core::graph::{save_collection, save_graph, ClientData, DataSplit};
use graphfed_core::prompt_pool::PromptPool;
use graphfed_core::tensor::Tensor;
use graphfed_core::vqvae::{load_params, read_blob, save_params, write_blob, GfmParams};
use graphfed_core::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Precision};
use crate::data::{prepare, Prepared};
use crate::pipeline::{self, diagnose, finetune_all, new_federation, run_rounds, sweep};
use crate::report::{append_text, ndjson, write_text, CliError, OutputLock, RunReport};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Partition,
    Pretrain { resume: bool },
    Finetune,
    Evaluate,
    Diagnose { max_degree: Option<usize> },
    Sweep,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Partition => "partition",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::Diagnose { .. } => "diagnose",
            Command::Sweep => "sweep",
        }
    }
}

pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Runs `command` under the output-directory lock.
pub fn run(command: &Command, cfg: &ExperimentConfig, out: &Path) -> std::result::Result<RunReport, CliError> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(out)?;
    let report = match cfg.precision {
        Precision::F64 => run_typed::<f64>(command, cfg, out),
        Precision::F32 => run_typed::<f32>(command, cfg, out),
    }?;
    Ok(report)
}

fn run_typed<S: Scalar>(command: &Command, cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let mut report = RunReport::new(command.name(), cfg);
    match command {
        Command::Partition => partition::<S>(cfg, out, &mut report)?,
        Command::Pretrain { resume } => pretrain::<S>(cfg, out, *resume, &mut report)?,
        Command::Finetune => finetune::<S>(cfg, out, &mut report)?,
        Command::Evaluate => evaluate_heads::<S>(cfg, out, &mut report)?,
        Command::Diagnose { max_degree } => {
            diagnose_cmd::<S>(cfg, out, max_degree.or(cfg.diagnose.max_degree), &mut report)?
        }
        Command::Sweep => sweep_cmd::<S>(cfg, out, &mut report)?,
    }
    report.write(out)?;
    Ok(report)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::contract(e.to_string()))
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        detail: e.to_string(),
    })
}

#[derive(Debug, Serialize)]
struct AssignmentFile<'a> {
    client_count: usize,
    dropped_edges: usize,
    sizes: Vec<usize>,
    assignment: &'a [usize],
}

fn partition<S: Scalar>(cfg: &ExperimentConfig, out: &Path, report: &mut RunReport) -> Result<()> {
    let data = prepare::<S>(cfg)?;
    for d in &data.datasets {
        let dir = out.join("partition").join(&d.name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (k, c) in d.clients.iter().enumerate() {
            let cdir = dir.join(format!("client_{k}"));
            match c {
                ClientData::Subgraph(g) => save_graph(g, &cdir)?,
                ClientData::Collection(c) => save_collection(c, &cdir)?,
            }
        }
        let file = AssignmentFile {
            client_count: d.assignment.client_count,
            dropped_edges: d.dropped_edges,
            sizes: d.assignment.sizes(),
            assignment: &d.assignment.assignment,
        };
        write_text(&dir.join("assignment.json"), &to_json(&file)?)?;
        report
            .artifacts
            .insert(format!("partition/{}", d.name), PathBuf::from("partition").join(&d.name));
        report.notes.push(format!(
            "{}: {} clients, sizes {:?}, {} cross-client edges dropped",
            d.name,
            d.clients.len(),
            d.assignment.sizes(),
            d.dropped_edges
        ));
    }
    Ok(())
}

/// Federation settings that must agree between a checkpoint and a resumed
/// run (everything except the round budget and the scheduling flag).
fn resumable(c: &FedConfig) -> FedConfig {
    FedConfig {
        rounds: 0,
        deterministic: false,
        ..c.clone()
    }
}

/// Drops log lines of rounds after `round`, written before an interruption
/// the checkpoint does not cover.
fn truncate_log(log: &Path, round: usize) -> Result<()> {
    if !log.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(log).map_err(|e| Error::io(log, e))?;
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v.get("round").and_then(serde_json::Value::as_u64))
                .is_some_and(|r| r as usize <= round)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    write_text(log, &kept)
}

fn pretrain<S: Scalar>(cfg: &ExperimentConfig, out: &Path, resume: bool, report: &mut RunReport) -> Result<()> {
    let data = prepare::<S>(cfg)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    let log = out.join("rounds.ndjson");
    let mut fed = if resume && ckpt.join("server.toml").exists() {
        let mut f = load_checkpoint::<S>(&ckpt, &data.client_data())?;
        if resumable(&f.config) != resumable(&cfg.fed_config()) || f.model != cfg.model {
            return Err(Error::Config(
                "the checkpoint was written with different model or federation settings".into(),
            ));
        }
        f.config.rounds = cfg.federation.rounds;
        f.config.deterministic = cfg.federation.deterministic;
        report.notes.push(format!("resumed at round {}", f.server.round));
        truncate_log(&log, f.server.round)?;
        f
    } else {
        if log.exists() {
            fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
        if ckpt.exists() {
            fs::remove_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        }
        new_federation(cfg, &data)?
    };
    let every = cfg.federation.checkpoint_every;
    let last = cfg.federation.rounds;
    run_rounds(cfg, &mut fed, |f| {
        let rec = f.server.records.last().expect("a round just ran");
        append_text(&log, &rec.to_ndjson())?;
        if f.server.round % every == 0 || f.server.round == last {
            save_checkpoint(f, &ckpt)?;
        }
        Ok(())
    })?;
    if !ckpt.join("server.toml").exists() {
        save_checkpoint(&fed, &ckpt)?;
    }
    if let Some(rec) = fed.server.records.last() {
        for c in &rec.clients {
            if let Some(l) = &c.loss {
                report.notes.push(format!(
                    "round {} client {}: total {:.6} (feat {:.6}, topo {:.6}, codebook {:.6}, commit {:.6})",
                    rec.round, c.client, l.total, l.feat, l.topo, l.codebook_term, l.commitment_term
                ));
            }
            if let Some(a) = &c.aborted {
                report.notes.push(format!("round {} client {} dropped: {a}", rec.round, c.client));
            }
        }
    }
    report.notes.push(format!("global digest {}", fed.server.global.digest()));
    report.artifacts.insert("checkpoint".into(), CHECKPOINT_DIR.into());
    report.artifacts.insert("rounds".into(), "rounds.ndjson".into());
    Ok(())
}

/// Loads the checkpoint under `out` for the data of `cfg`, with the prompt
/// pool when the run uses prompts.
fn load_trained<S: Scalar>(cfg: &ExperimentConfig, out: &Path, data: &Prepared<S>) -> Result<(Federation<S>, Option<PromptPool<S>>)> {
    let ckpt = out.join(CHECKPOINT_DIR);
    if !ckpt.join("server.toml").exists() {
        return Err(Error::Config(format!("no checkpoint at {}; run `pretrain` first", ckpt.display())));
    }
    let fed = load_checkpoint::<S>(&ckpt, &data.client_data())?;
    if fed.config.ancdai_enabled != cfg.ancdai.enabled || fed.config.adadpp_enabled != cfg.adadpp.enabled {
        return Err(Error::Config(format!(
            "the checkpoint was trained with ancdai={} adadpp={}, the config says ancdai={} adadpp={}",
            fed.config.ancdai_enabled, fed.config.adadpp_enabled, cfg.ancdai.enabled, cfg.adadpp.enabled
        )));
    }
    let pool = fed.pool()?;
    Ok((fed, pool))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub slot: usize,
    pub dataset: String,
    pub client: usize,
    pub run: usize,
    pub seed: u64,
    pub lr: f64,
    pub kind: TaskKind,
    pub d: usize,
    pub arity: usize,
    pub digest: String,
    pub val_metric: Option<f64>,
    pub epochs_run: usize,
    pub ablation_flags: String,
    pub split: DataSplit,
    pub full_finetune: bool,
}

fn head_dir(out: &Path, slot: usize, run: usize) -> PathBuf {
    out.join("heads").join(format!("client{slot}_run{run}"))
}

fn finetune<S: Scalar>(cfg: &ExperimentConfig, out: &Path, report: &mut RunReport) -> Result<()> {
    let data = prepare::<S>(cfg)?;
    let (fed, pool) = load_trained(cfg, out, &data)?;
    let (records, heads) = finetune_all(cfg, &data, &fed.server.global, pool.as_ref())?;
    let hroot = out.join("heads");
    if hroot.exists() {
        fs::remove_dir_all(&hroot).map_err(|e| Error::io(&hroot, e))?;
    }
    let mut index = Vec::new();
    for h in &heads {
        let dir = head_dir(out, h.client, h.run);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut values = h.head.weight.data().to_vec();
        values.extend_from_slice(h.head.bias.data());
        write_blob(&dir.join("head.bin"), &values)?;
        if let Some(bb) = &h.backbone {
            save_params(bb, &cfg.model, &dir.join("backbone"))?;
        }
        let slot = &data.clients[h.client];
        let meta = HeadMeta {
            slot: h.client,
            dataset: slot.dataset.clone(),
            client: slot.local,
            run: h.run,
            seed: h.seed,
            lr: h.lr,
            kind: h.head.kind,
            d: h.head.weight.rows(),
            arity: h.head.arity(),
            digest: h.head.digest(),
            val_metric: h.val_metric,
            epochs_run: h.epochs_run,
            ablation_flags: cfg.ablation().label().into(),
            split: h.split.clone(),
            full_finetune: h.backbone.is_some(),
        };
        write_text(&dir.join("head.json"), &to_json(&meta)?)?;
        index.push(dir.strip_prefix(out).unwrap_or(&dir).to_path_buf());
    }
    write_text(&hroot.join("index.json"), &to_json(&index)?)?;
    write_text(&out.join("metrics.ndjson"), &ndjson(&records))?;
    let rows = summarize(&records);
    write_text(&out.join("summary.csv"), &summary_csv(&rows))?;
    report.summaries = rows;
    report.artifacts.insert("metrics".into(), "metrics.ndjson".into());
    report.artifacts.insert("summary".into(), "summary.csv".into());
    report.artifacts.insert("heads".into(), "heads".into());
    Ok(())
}

fn load_head<S: Scalar>(dir: &Path, meta: &HeadMeta) -> Result<TaskHead<S>> {
    let n = meta.d * meta.arity;
    let v: Vec<S> = read_blob(&dir.join("head.bin"), n + meta.arity)?;
    let head = TaskHead {
        kind: meta.kind,
        weight: Tensor::matrix(meta.d, meta.arity, v[..n].to_vec())?,
        bias: Tensor::matrix(1, meta.arity, v[n..].to_vec())?,
    };
    if head.digest() != meta.digest {
        return Err(Error::Validation(format!("head in {} does not match its digest", dir.display())));
    }
    Ok(head)
}

fn evaluate_heads<S: Scalar>(cfg: &ExperimentConfig, out: &Path, report: &mut RunReport) -> Result<()> {
    let data = prepare::<S>(cfg)?;
    let (fed, pool) = load_trained(cfg, out, &data)?;
    let index_path = out.join("heads").join("index.json");
    if !index_path.exists() {
        return Err(Error::Config(format!("no heads at {}; run `finetune` first", index_path.display())));
    }
    let index: Vec<PathBuf> = from_json(&index_path)?;
    let mut records = Vec::new();
    for rel in index {
        let dir = out.join(rel);
        let meta: HeadMeta = from_json(&dir.join("head.json"))?;
        let slot = data
            .clients
            .get(meta.slot)
            .filter(|s| s.dataset == meta.dataset && s.local == meta.client)
            .ok_or_else(|| Error::Validation(format!("head {} refers to a client this config does not have", dir.display())))?;
        let head = load_head::<S>(&dir, &meta)?;
        let backbone: GfmParams<S> = if meta.full_finetune {
            load_params(&dir.join("backbone"))?.0
        } else {
            fed.server.global.clone()
        };
        let top_k = cfg.finetune_config(meta.lr).top_k;
        let e = evaluate(&backbone, pool.as_ref(), &head, &slot.task, &meta.split.test, top_k)?;
        records.push(MetricRecord {
            dataset: meta.dataset,
            client: meta.client,
            task: meta.kind.name().into(),
            metric_name: e.metric_name,
            value: e.value,
            seed: meta.seed,
            ablation_flags: meta.ablation_flags,
        });
    }
    write_text(&out.join("evaluation.ndjson"), &ndjson(&records))?;
    let rows = summarize(&records);
    write_text(&out.join("evaluation_summary.csv"), &summary_csv(&rows))?;
    report.summaries = rows;
    report.artifacts.insert("evaluation".into(), "evaluation.ndjson".into());
    report.artifacts.insert("evaluation_summary".into(), "evaluation_summary.csv".into());
    Ok(())
}

fn load_reference<S: Scalar>(path: &Path) -> Result<GfmParams<S>> {
    let dir = if path.join("global").is_dir() {
        path.join("global")
    } else {
        path.to_path_buf()
    };
    Ok(load_params(&dir)?.0)
}

fn diagnose_cmd<S: Scalar>(cfg: &ExperimentConfig, out: &Path, max_degree: Option<usize>, report: &mut RunReport) -> Result<()> {
    let data = prepare::<S>(cfg)?;
    let (fed, pool) = load_trained(cfg, out, &data)?;
    let reference = cfg.diagnose.reference.as_deref().map(load_reference::<S>).transpose()?;
    let d = diagnose(&data, &fed.server.global, pool.as_ref(), reference.as_ref())?;
    let dir = out.join("diagnose");
    let e = &d.entanglement;
    write_text(&dir.join("entanglement.json"), &to_json(e)?)?;
    let mut tables = vec![("raw", &e.raw), ("embedding", &e.embedding), ("quantized", &e.quantized)];
    if let Some(r) = &e.reference {
        tables.push(("reference", r));
    }
    for (name, m) in tables {
        let file = format!("similarity_{name}.csv");
        write_text(&dir.join(&file), &matrix_csv(&e.domains, m))?;
        report.artifacts.insert(format!("similarity_{name}"), PathBuf::from("diagnose").join(file));
        report
            .notes
            .push(format!("mean inter-domain cosine ({name}): {:.6}", mean_off_diagonal(m)));
    }
    write_text(&dir.join("degrees.csv"), &pipeline::degree_csv(&d.degrees, max_degree))?;
    report.artifacts.insert("degrees".into(), PathBuf::from("diagnose").join("degrees.csv"));
    report.artifacts.insert("entanglement".into(), PathBuf::from("diagnose").join("entanglement.json"));
    Ok(())
}

fn sweep_cmd<S: Scalar>(cfg: &ExperimentConfig, out: &Path, report: &mut RunReport) -> Result<()> {
    let data = prepare::<S>(cfg)?;
    let (rows, records) = sweep(cfg, &data, cfg.sweep.axis, &cfg.sweep.values)?;
    write_text(&out.join("sweep.csv"), &pipeline::sweep_csv(&rows))?;
    write_text(&out.join("sweep_metrics.ndjson"), &ndjson(&records))?;
    report.summaries = summarize(&records);
    report.artifacts.insert("sweep".into(), "sweep.csv".into());
    report.artifacts.insert("sweep_metrics".into(), "sweep_metrics.ndjson".into());
    Ok(())
}

/// Reads the checkpoint manifest under `out`, for callers that only need
/// its metadata.
pub fn checkpoint_manifest(out: &Path) -> Result<graphfed_core::federation::ServerManifest> {
    read_manifest(&out.join(CHECKPOINT_DIR))
}
