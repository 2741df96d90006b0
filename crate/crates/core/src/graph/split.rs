use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, STREAM_SPLIT};

const FLOOR_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const CORA: Self = Self::new(0.05, 0.20, 0.40);
    pub const WIKICS: Self = Self::new(0.8, 0.1, 0.1);
    pub const PUBMED: Self = Self::new(0.6, 0.2, 0.2);

    pub const fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }

    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&x| !(x >= 0.0)) || r.iter().sum::<f64>() > 1.0 + FLOOR_EPS {
            return Err(Error::contract(format!(
                "split ratios {r:?} must be non-negative and sum to at most 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl DataSplit {
    pub fn is_disjoint(&self) -> bool {
        let mut all: Vec<usize> = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .copied()
            .collect();
        let len = all.len();
        all.sort_unstable();
        all.dedup();
        all.len() == len
    }
}

fn floor_count(r: f64, n: usize) -> usize {
    (r * n as f64 + FLOOR_EPS).floor() as usize
}

/// Per-stratum counts for one ratio: each stratum gets floor(r·n_c) or one
/// more, with the extras going to the largest fractional remainders until the
/// global count floor(r·N) is met. `capacity` caps each stratum.
fn apportion(r: f64, sizes: &[usize], capacity: &[usize]) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = floor_count(r, total);
    let mut counts: Vec<usize> = sizes
        .iter()
        .zip(capacity)
        .map(|(&n, &cap)| floor_count(r, n).min(cap))
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    let rem = |c: usize| r * sizes[c] as f64 - floor_count(r, sizes[c]) as f64;
    order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    let mut assigned: usize = counts.iter().sum();
    for &c in &order {
        if assigned >= target {
            break;
        }
        if counts[c] < capacity[c] && counts[c] <= floor_count(r, sizes[c]) {
            counts[c] += 1;
            assigned += 1;
        }
    }
    counts
}

/// Stratified random split. `strata[i]` is the class of unit `i`, or `None`
/// for units without a label (never assigned). Units left over after the three
/// ratios are unassigned.
pub fn split(strata: &[Option<usize>], ratios: SplitRatios, seed: u64) -> Result<DataSplit> {
    ratios.validate()?;
    let classes = strata.iter().flatten().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in strata.iter().enumerate() {
        if let Some(c) = s {
            members[*c].push(i);
        }
    }
    let mut rng = rng::stream(seed, &[STREAM_SPLIT]);
    for m in &mut members {
        m.shuffle(&mut rng);
    }
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let mut capacity = sizes.clone();
    let mut taken = vec![0usize; classes];
    let mut out = DataSplit::default();
    for (which, r) in [ratios.train, ratios.val, ratios.test].into_iter().enumerate() {
        let counts = apportion(r, &sizes, &capacity);
        let set = match which {
            0 => &mut out.train,
            1 => &mut out.val,
            _ => &mut out.test,
        };
        for c in 0..classes {
            set.extend_from_slice(&members[c][taken[c]..taken[c] + counts[c]]);
            taken[c] += counts[c];
            capacity[c] -= counts[c];
        }
        set.sort_unstable();
    }
    if ratios.train > 0.0 {
        let mut in_train = vec![false; classes];
        for &i in &out.train {
            in_train[strata[i].expect("labeled")] = true;
        }
        for c in 0..classes {
            if sizes[c] > 0 && !in_train[c] {
                out.warnings
                    .push(format!("class {c} ({} units) has no training member", sizes[c]));
            }
        }
    }
    Ok(out)
}
