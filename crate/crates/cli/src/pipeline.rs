//! In-memory experiment stages. The subcommands wrap these with file I/O.

use std::collections::BTreeMap;

use graphfed_core::downstream::{
    entanglement_diagnostic, evaluate, few_shot_subsample, finetune, make_head, mean_std, EntanglementReport,
    FewShotSpec, MetricRecord, TaskHead,
};
use graphfed_core::federation::Federation;
use graphfed_core::graph::{degree_distribution, split, DataSplit};
use graphfed_core::prompt_pool::PromptPool;
use graphfed_core::rng::{derive_seed, STREAM_FINETUNE};
use graphfed_core::vqvae::GfmParams;
use graphfed_core::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ExperimentConfig, SweepAxis};
use crate::data::Prepared;

pub fn initial_params<S: Scalar>(cfg: &ExperimentConfig) -> Result<GfmParams<S>> {
    GfmParams::init(&cfg.model, cfg.seed)
}

pub fn new_federation<S: Scalar>(cfg: &ExperimentConfig, data: &Prepared<S>) -> Result<Federation<S>> {
    Federation::new(cfg.fed_config(), cfg.model, &data.client_data(), initial_params(cfg)?)
}

/// Runs rounds until `cfg.federation.rounds`, calling `after_round` once per
/// completed round.
pub fn run_rounds<S: Scalar>(
    cfg: &ExperimentConfig,
    fed: &mut Federation<S>,
    mut after_round: impl FnMut(&Federation<S>) -> Result<()>,
) -> Result<()> {
    while fed.server.round < cfg.federation.rounds {
        fed.step_round()?;
        after_round(fed)?;
    }
    Ok(())
}

pub fn pretrain<S: Scalar>(cfg: &ExperimentConfig, data: &Prepared<S>) -> Result<Federation<S>> {
    let mut fed = new_federation(cfg, data)?;
    run_rounds(cfg, &mut fed, |_| Ok(()))?;
    Ok(fed)
}

/// Seed shared by every client and every sweep point in run `run`.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    derive_seed(seed, &[STREAM_FINETUNE, run as u64])
}

/// A fine-tuned head with what is needed to evaluate it again.
#[derive(Debug, Clone)]
pub struct TrainedHead<S> {
    pub client: usize,
    pub run: usize,
    pub seed: u64,
    pub lr: f64,
    pub head: TaskHead<S>,
    pub backbone: Option<GfmParams<S>>,
    pub split: DataSplit,
    pub val_metric: Option<f64>,
    pub epochs_run: usize,
}

/// Fine-tunes one head per client and run, picking the learning rate on
/// validation, and scores each on its test split.
pub fn finetune_all<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Prepared<S>,
    gfm: &GfmParams<S>,
    pool: Option<&PromptPool<S>>,
) -> Result<(Vec<MetricRecord>, Vec<TrainedHead<S>>)> {
    let label = cfg.ablation().label();
    let mut records = Vec::new();
    let mut heads = Vec::new();
    for (i, slot) in data.clients.iter().enumerate() {
        let base = split(&slot.task.strata(), slot.split, Prepared::<S>::split_seed(cfg.seed, i))?;
        for run in 0..cfg.finetune.runs {
            let rs = run_seed(cfg.seed, run);
            let client_seed = derive_seed(rs, &[i as u64]);
            let sp = if cfg.finetune.few_shot {
                few_shot_subsample(
                    &base,
                    &slot.task,
                    FewShotSpec {
                        shots: cfg.finetune.shots,
                        seed: client_seed,
                    },
                )?
            } else {
                base.clone()
            };
            if sp.train.is_empty() || sp.test.is_empty() {
                return Err(Error::Validation(format!(
                    "client {}/{} has an empty training or test split",
                    slot.dataset, slot.local
                )));
            }
            let init = make_head(slot.task.kind(), gfm.dim(), slot.task.arity(), client_seed)?;
            let mut best: Option<(f64, graphfed_core::downstream::FinetuneOutcome<S>)> = None;
            for &lr in &cfg.finetune.lr_grid {
                let out = finetune(gfm, pool, &init, &slot.task, &sp, &cfg.finetune_config(lr))?;
                let better = match &best {
                    None => true,
                    Some((_, b)) => out.best_metric.unwrap_or(f64::NEG_INFINITY) > b.best_metric.unwrap_or(f64::NEG_INFINITY),
                };
                if better {
                    best = Some((lr, out));
                }
            }
            let (lr, out) = best.expect("lr_grid is non-empty");
            let backbone = out.backbone.as_ref().unwrap_or(gfm);
            let top_k = cfg.finetune_config(lr).top_k;
            let eval = evaluate(backbone, pool, &out.head, &slot.task, &sp.test, top_k)?;
            records.push(MetricRecord {
                dataset: slot.dataset.clone(),
                client: slot.local,
                task: slot.task.kind().name().into(),
                metric_name: eval.metric_name,
                value: eval.value,
                seed: rs,
                ablation_flags: label.into(),
            });
            heads.push(TrainedHead {
                client: i,
                run,
                seed: rs,
                lr,
                head: out.head,
                backbone: out.backbone,
                split: sp,
                val_metric: out.best_metric,
                epochs_run: out.epochs_run,
            });
        }
    }
    Ok((records, heads))
}

/// Pretrains from scratch and fine-tunes on the result.
pub fn pretrain_and_finetune<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Prepared<S>,
) -> Result<(Federation<S>, Vec<MetricRecord>)> {
    let fed = pretrain(cfg, data)?;
    let pool = fed.pool()?;
    let (records, _) = finetune_all(cfg, data, &fed.server.global, pool.as_ref())?;
    Ok((fed, records))
}

/// The configuration at one grid point of `axis`.
pub fn apply_point(cfg: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    let bad = |e: String| Error::Config(format!("sweep value `{value}` for {}: {e}", axis.name()));
    match axis {
        SweepAxis::CodebookTokens => c.model.tokens = value.parse().map_err(|e| bad(format!("{e}")))?,
        SweepAxis::PromptCount => c.adadpp.prompt_count = value.parse().map_err(|e| bad(format!("{e}")))?,
        SweepAxis::Sigma => {
            c.ancdai.sigma_factor = value.parse().map_err(|e| bad(format!("{e}")))?;
            c.ancdai.sigma = None;
        }
        SweepAxis::Ablation => c.set_ablation(Ablation::parse(value)?),
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub runs: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

/// One full pretrain and fine-tune per grid value, all with the same seeds.
pub fn sweep<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Prepared<S>,
    axis: SweepAxis,
    values: &[String],
) -> Result<(Vec<SweepRow>, Vec<MetricRecord>)> {
    if values.is_empty() {
        return Err(Error::Config("sweep.values is empty".into()));
    }
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for v in values {
        let point = apply_point(cfg, axis, v)?;
        let (_, mut records) = pretrain_and_finetune(&point, data)?;
        if axis != SweepAxis::Ablation {
            for r in &mut records {
                r.ablation_flags = format!("{};{}={v}", r.ablation_flags, axis.name());
            }
        }
        let values: Vec<f64> = records.iter().map(|r| r.value).collect();
        let (mean, std) = mean_std(&values);
        let mut metrics: Vec<&str> = records.iter().map(|r| r.metric_name.as_str()).collect();
        metrics.dedup();
        rows.push(SweepRow {
            axis: axis.name().into(),
            value: v.clone(),
            seed: cfg.seed,
            runs: values.len(),
            metric: if metrics.len() == 1 { metrics[0].into() } else { "mixed".into() },
            mean,
            std,
        });
        all.extend(records);
    }
    Ok((rows, all))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,value,seed,runs,metric,mean,std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6}\n",
            r.axis, r.value, r.seed, r.runs, r.metric, r.mean, r.std
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct Diagnosis {
    pub entanglement: EntanglementReport,
    /// Degree histogram per domain.
    pub degrees: Vec<(String, BTreeMap<usize, usize>)>,
}

pub fn diagnose<S: Scalar>(
    data: &Prepared<S>,
    gfm: &GfmParams<S>,
    pool: Option<&PromptPool<S>>,
    reference: Option<&GfmParams<S>>,
) -> Result<Diagnosis> {
    let domains = data.domains()?;
    let entanglement = entanglement_diagnostic(gfm, pool, &domains, reference)?;
    let degrees = domains
        .iter()
        .map(|(n, g)| (n.clone(), degree_distribution(g)))
        .collect();
    Ok(Diagnosis { entanglement, degrees })
}

/// `domain,degree,count` rows, optionally only up to `max_degree`.
pub fn degree_csv(degrees: &[(String, BTreeMap<usize, usize>)], max_degree: Option<usize>) -> String {
    let mut out = String::from("domain,degree,count\n");
    for (name, hist) in degrees {
        for (&d, &c) in hist {
            if max_degree.is_none_or(|m| d <= m) {
                out.push_str(&format!("{name},{d},{c}\n"));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Source;
    use crate::data::prepare;
    use graphfed_core::downstream::cosine_matrix;

    pub(crate) fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.model.d = 8;
        c.model.tokens = 6;
        c.model.heads = 2;
        c.federation.rounds = 2;
        c.federation.lr = 1e-3;
        c.federation.optimizer = graphfed_core::optim::Optimizer::Adam;
        c.finetune.max_epochs = 30;
        c.finetune.patience = 5;
        c.finetune.runs = 2;
        for d in &mut c.data.datasets {
            if let Source::Benchmark { nodes, .. } = &mut d.source {
                *nodes = 30;
            }
        }
        c
    }

    #[test]
    fn records_per_client_and_run() {
        let mut c = tiny();
        c.finetune.runs = 3;
        let data = prepare::<f64>(&c).unwrap();
        let (_, records) = pretrain_and_finetune(&c, &data).unwrap();
        assert_eq!(records.len(), 9);
        assert!(records.iter().all(|r| (0.0..=1.0).contains(&r.value)));
        let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 3);
    }

    #[test]
    fn sweep_has_one_row_per_value_with_shared_seeds() {
        let c = tiny();
        let data = prepare::<f64>(&c).unwrap();
        let values: Vec<String> = ["1", "2"].map(String::from).to_vec();
        let (rows, records) = sweep(&c, &data, SweepAxis::PromptCount, &values).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.seed == c.seed && r.runs == 6));
        let seeds = |tag: &str| -> Vec<u64> {
            records.iter().filter(|r| r.ablation_flags.ends_with(tag)).map(|r| r.seed).collect()
        };
        assert_eq!(seeds("=1"), seeds("=2"));
    }

    #[test]
    fn ablation_grid_labels_rows() {
        let c = tiny();
        let data = prepare::<f64>(&c).unwrap();
        let values: Vec<String> = Ablation::ALL.iter().map(|a| a.label().to_string()).collect();
        let (_, records) = sweep(&c, &data, SweepAxis::Ablation, &values).unwrap();
        for a in Ablation::ALL {
            assert_eq!(records.iter().filter(|r| r.ablation_flags == a.label()).count(), 6);
        }
    }

    #[test]
    fn few_shot_keeps_two_per_class() {
        let mut c = tiny();
        c.finetune.few_shot = true;
        c.finetune.runs = 1;
        let data = prepare::<f64>(&c).unwrap();
        let fed = pretrain(&c, &data).unwrap();
        let (_, heads) = finetune_all(&c, &data, &fed.server.global, fed.pool().unwrap().as_ref()).unwrap();
        for h in &heads {
            let strata = data.clients[h.client].task.strata();
            let mut per: BTreeMap<usize, usize> = BTreeMap::new();
            for &u in &h.split.train {
                *per.entry(strata[u].unwrap()).or_default() += 1;
            }
            assert!(per.values().all(|&n| n <= 2), "{per:?}");
        }
    }

    #[test]
    fn diagnosis_matrices_are_symmetric() {
        let c = tiny();
        let data = prepare::<f64>(&c).unwrap();
        let fed = pretrain(&c, &data).unwrap();
        let d = diagnose(&data, &fed.server.global, None, Some(&initial_params(&c).unwrap())).unwrap();
        let e = &d.entanglement;
        for m in [&e.raw, &e.embedding, &e.quantized, e.reference.as_ref().unwrap()] {
            for a in 0..3 {
                assert_eq!(m[a][a], 1.0);
                for b in 0..3 {
                    assert_eq!(m[a][b], m[b][a]);
                }
            }
        }
        assert_eq!(cosine_matrix(&[vec![1.0]]), vec![vec![1.0]]);
        let csv = degree_csv(&d.degrees, Some(2));
        assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap() <= 2));
    }
}
