use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Area under the ROC curve with ties counted one half. `None` when only one
/// class is present. Computed from the integer `2U` statistic, so the value
/// equals exhaustive pair counting exactly.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auc: scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut twice_u = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Some(twice_u as f64 / (2 * pos * neg) as f64)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len(), "accuracy: length mismatch");
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Mean ROC-AUC over tasks. `scores` and `targets` are row-major
/// `units x tasks`; NaN targets are masked and single-class tasks skipped.
/// Returns the mean and the skipped task indices, or `None` if no task was
/// evaluable.
pub fn mean_task_auc(scores: &[f64], targets: &[f64], tasks: usize) -> (Option<f64>, Vec<usize>) {
    let units = if tasks == 0 { 0 } else { targets.len() / tasks };
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for t in 0..tasks {
        let (mut s, mut l) = (Vec::new(), Vec::new());
        for u in 0..units {
            let y = targets[u * tasks + t];
            if !y.is_nan() {
                s.push(scores[u * tasks + t]);
                l.push(y > 0.5);
            }
        }
        match auc(&s, &l) {
            Some(a) => {
                sum += a;
                used += 1;
            }
            None => skipped.push(t),
        }
    }
    ((used > 0).then(|| sum / used as f64), skipped)
}

/// One fine-tuning result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub client: usize,
    pub task: String,
    pub metric_name: String,
    pub value: f64,
    pub seed: u64,
    pub ablation_flags: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub task: String,
    pub metric_name: String,
    pub ablation_flags: String,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation (0 for a single run).
    pub std: f64,
}

/// Mean and standard deviation per `(dataset, task, metric, ablation)`.
pub fn summarize(records: &[MetricRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.dataset.clone(), r.task.clone(), r.metric_name.clone(), r.ablation_flags.clone()))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((dataset, task, metric_name, ablation_flags), v)| {
            let (mean, std) = mean_std(&v);
            SummaryRow {
                dataset,
                task,
                metric_name,
                ablation_flags,
                runs: v.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("dataset,task,metric,ablation,runs,mean,std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6}\n",
            r.dataset, r.task, r.metric_name, r.ablation_flags, r.runs, r.mean, r.std
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let (mut twice, mut pairs) = (0u64, 0u64);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1;
                    twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
                }
            }
        }
        (pairs > 0).then(|| twice as f64 / (2 * pairs) as f64)
    }

    #[test]
    fn hand_case() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
    }

    #[test]
    fn constant_scores_give_one_half() {
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]), Some(0.5));
    }

    #[test]
    fn single_class_is_undefined() {
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn masked_tasks() {
        let nan = f64::NAN;
        // Task 0 evaluable (AUC 1), task 1 all-NaN, task 2 single class.
        let targets = [1.0, nan, 1.0, 0.0, nan, 1.0];
        let scores = [0.9, 0.0, 0.1, 0.2, 0.0, 0.3];
        let (m, skipped) = mean_task_auc(&scores, &targets, 3);
        assert_eq!(m, Some(1.0));
        assert_eq!(skipped, vec![1, 2]);
    }

    #[test]
    fn summary_groups_runs() {
        let rec = |v: f64, seed| MetricRecord {
            dataset: "a".into(),
            client: 0,
            task: "node_cls".into(),
            metric_name: "accuracy".into(),
            value: v,
            seed,
            ablation_flags: "full".into(),
        };
        let rows = summarize(&[rec(0.5, 0), rec(0.7, 1)]);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].mean - 0.6).abs() < 1e-12);
        assert!((rows[0].std - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(summary_csv(&rows).starts_with("dataset,"));
    }

    proptest! {
        #[test]
        fn auc_equals_pair_counting(items in prop::collection::vec((0u8..20, any::<bool>()), 1..200)) {
            let scores: Vec<f64> = items.iter().map(|(s, _)| *s as f64 / 7.0).collect();
            let labels: Vec<bool> = items.iter().map(|(_, l)| *l).collect();
            prop_assert_eq!(auc(&scores, &labels), brute(&scores, &labels));
        }

        #[test]
        fn auc_ignores_order(items in prop::collection::vec((0u8..20, any::<bool>()), 2..50)) {
            let scores: Vec<f64> = items.iter().map(|(s, _)| *s as f64).collect();
            let labels: Vec<bool> = items.iter().map(|(_, l)| *l).collect();
            let (mut rs, mut rl) = (scores.clone(), labels.clone());
            rs.reverse();
            rl.reverse();
            prop_assert_eq!(auc(&scores, &labels), auc(&rs, &rl));
        }
    }
}
