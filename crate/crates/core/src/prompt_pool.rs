//! Learnable feature prompts. Each client owns `λ` prompt vectors and as
//! many attention projections; a node's features are shifted by the
//! softmax-weighted prompt mix. At fine-tuning time all clients' prompts are
//! pooled and frozen.

use crate::digest::digest_values;
use crate::error::{Error, Result};
use crate::rng::{self, STREAM_PROMPTS};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tape, Tensor, Var};

pub const PROMPT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct PromptSet<S> {
    pub client_id: usize,
    /// `λ x d` prompt vectors.
    pub prompts: Tensor<S>,
    /// `λ x d` attention projections.
    pub projections: Tensor<S>,
}

impl<S: Scalar> PromptSet<S> {
    pub fn init(client_id: usize, count: usize, d: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::contract("a prompt set needs at least one prompt"));
        }
        let mut rng = rng::stream(seed, &[STREAM_PROMPTS, client_id as u64]);
        let prompts = Tensor::new(vec![count, d], rng::normal_vec(&mut rng, count * d, PROMPT_INIT_SCALE))?;
        let projections =
            Tensor::new(vec![count, d], rng::normal_vec(&mut rng, count * d, PROMPT_INIT_SCALE))?;
        Ok(Self {
            client_id,
            prompts,
            projections,
        })
    }

    pub fn count(&self) -> usize {
        self.prompts.rows()
    }

    pub fn dim(&self) -> usize {
        self.prompts.cols()
    }

    pub fn digest(&self) -> String {
        digest_values([self.prompts.data(), self.projections.data()])
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.client_id == other.client_id
            && self.prompts.bitwise_eq(&other.prompts)
            && self.projections.bitwise_eq(&other.projections)
    }

    pub fn flatten(&self) -> Vec<S> {
        let mut v = self.prompts.data().to_vec();
        v.extend_from_slice(self.projections.data());
        v
    }

    pub fn unflatten(&mut self, flat: &[S]) -> Result<()> {
        let n = self.prompts.len();
        if flat.len() != 2 * n {
            return Err(Error::contract("prompt blob length does not match the prompt shape"));
        }
        self.prompts.data_mut().copy_from_slice(&flat[..n]);
        self.projections.data_mut().copy_from_slice(&flat[n..]);
        Ok(())
    }

    fn check(&self, x: &Tensor<S>) -> Result<()> {
        if self.projections.shape() != self.prompts.shape() || x.cols() != self.dim() {
            return Err(Error::contract(format!(
                "prompts {:?} / projections {:?} do not fit features {:?}",
                self.prompts.shape(),
                self.projections.shape(),
                x.shape()
            )));
        }
        Ok(())
    }
}

/// `x̃ = x + softmax(x·Wᵀ)·Φ` on the tape.
pub fn apply_prompts_taped<S: Scalar>(
    tape: &mut Tape<S>,
    prompts: Var,
    projections: Var,
    x: Var,
) -> Result<Var> {
    let logits = tape.matmul_nt(x, projections)?;
    let alpha = tape.softmax_rows(logits)?;
    let shift = tape.matmul(alpha, prompts)?;
    tape.add(x, shift)
}

/// Per-node attention over the client's own prompts.
pub fn local_attention<S: Scalar>(set: &PromptSet<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    set.check(x)?;
    Ok(kernels::softmax_rows(&kernels::matmul_nt(x, &set.projections)?))
}

pub fn apply_prompts_local<S: Scalar>(set: &PromptSet<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let alpha = local_attention(set, x)?;
    kernels::add(x, &kernels::matmul(&alpha, &set.prompts)?)
}

/// All clients' prompt sets in ascending client order, frozen.
#[derive(Debug, Clone)]
pub struct PromptPool<S> {
    sets: Vec<PromptSet<S>>,
    prompts: Tensor<S>,
    projections: Tensor<S>,
}

impl<S: Scalar> PromptPool<S> {
    pub fn sets(&self) -> &[PromptSet<S>] {
        &self.sets
    }

    pub fn size(&self) -> usize {
        self.prompts.rows()
    }

    pub fn prompts(&self) -> &Tensor<S> {
        &self.prompts
    }

    pub fn projections(&self) -> &Tensor<S> {
        &self.projections
    }

    pub fn digest(&self) -> String {
        digest_values([self.prompts.data(), self.projections.data()])
    }
}

pub fn build_pool<S: Scalar>(sets: &[PromptSet<S>]) -> Result<PromptPool<S>> {
    if sets.is_empty() {
        return Err(Error::contract("cannot build a prompt pool from no prompt sets"));
    }
    let mut sets = sets.to_vec();
    sets.sort_by_key(|s| s.client_id);
    if sets.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::contract("duplicate client id in prompt sets"));
    }
    let d = sets[0].dim();
    if sets.iter().any(|s| s.dim() != d) {
        return Err(Error::contract("prompt sets differ in feature dimension"));
    }
    let stack = |f: fn(&PromptSet<S>) -> &Tensor<S>| -> Result<Tensor<S>> {
        let rows: usize = sets.iter().map(|s| f(s).rows()).sum();
        let data = sets.iter().flat_map(|s| f(s).data().iter().copied()).collect();
        Tensor::matrix(rows, d, data)
    };
    let prompts = stack(|s| &s.prompts)?;
    let projections = stack(|s| &s.projections)?;
    Ok(PromptPool {
        sets,
        prompts,
        projections,
    })
}

/// Attention over the whole pool: one softmax across all `K·λ` logits. With
/// `top_k`, only the `k` largest logits per node (ties toward the lower
/// index) take part.
pub fn pool_attention<S: Scalar>(
    pool: &PromptPool<S>,
    x: &Tensor<S>,
    top_k: Option<usize>,
) -> Result<Tensor<S>> {
    if x.cols() != pool.prompts.cols() {
        return Err(Error::contract("features do not match the pool dimension"));
    }
    let logits = kernels::matmul_nt(x, &pool.projections)?;
    let size = pool.size();
    match top_k {
        None => Ok(kernels::softmax_rows(&logits)),
        Some(k) if k == 0 || k > size => Err(Error::contract(format!(
            "top_k must be in [1, {size}], got {k}"
        ))),
        Some(k) => {
            let mut out = Tensor::zeros(logits.shape());
            for i in 0..logits.rows() {
                let row = logits.row(i);
                let mut order: Vec<usize> = (0..size).collect();
                order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite").then(a.cmp(&b)));
                let kept = &order[..k];
                let max = row[kept[0]].f64();
                let z: f64 = kept.iter().map(|&j| (row[j].f64() - max).exp()).sum();
                for &j in kept {
                    out.set(i, j, S::from_f64_lossy((row[j].f64() - max).exp() / z));
                }
            }
            Ok(out)
        }
    }
}

pub fn apply_pool<S: Scalar>(
    pool: &PromptPool<S>,
    x: &Tensor<S>,
    top_k: Option<usize>,
) -> Result<Tensor<S>> {
    let alpha = pool_attention(pool, x, top_k)?;
    kernels::add(x, &kernels::matmul(&alpha, &pool.prompts)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(id: usize, prompts: &[f64], proj: &[f64], d: usize) -> PromptSet<f64> {
        let l = prompts.len() / d;
        PromptSet {
            client_id: id,
            prompts: Tensor::from_f64(&[l, d], prompts).unwrap(),
            projections: Tensor::from_f64(&[l, d], proj).unwrap(),
        }
    }

    fn x() -> Tensor<f64> {
        Tensor::from_f64(&[2, 2], &[1.0, -0.5, 0.25, 2.0]).unwrap()
    }

    #[test]
    fn single_prompt_is_added_in_full() {
        let s = set(0, &[0.5, 1.0], &[3.0, -1.0], 2);
        let out = apply_prompts_local(&s, &x()).unwrap();
        assert_eq!(out.data(), &[1.5, 0.5, 0.75, 3.0]);
    }

    #[test]
    fn zero_prompts_are_identity() {
        let s = set(0, &[0.0; 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2);
        assert!(apply_prompts_local(&s, &x()).unwrap().bitwise_eq(&x()));
    }

    #[test]
    fn equal_projections_average_prompts() {
        let s = set(0, &[1.0, 0.0, 0.0, 3.0], &[0.2, 0.7, 0.2, 0.7], 2);
        let out = apply_prompts_local(&s, &x()).unwrap();
        assert_eq!(out.row(0), &[1.5, 1.0]);
    }

    #[test]
    fn taped_and_plain_agree_bitwise() {
        let s = PromptSet::<f64>::init(2, 3, 4, 9).unwrap();
        let xs = Tensor::new(vec![5, 4], rng::normal_vec(&mut rng::stream(0, &[]), 20, 1.0)).unwrap();
        let mut t = Tape::new();
        let p = t.param(s.prompts.clone());
        let w = t.param(s.projections.clone());
        let xv = t.constant(xs.clone());
        let y = apply_prompts_taped(&mut t, p, w, xv).unwrap();
        assert!(t.value(y).bitwise_eq(&apply_prompts_local(&s, &xs).unwrap()));
    }

    #[test]
    fn pool_of_one_equals_local() {
        let s = PromptSet::<f64>::init(0, 3, 4, 1).unwrap();
        let xs = Tensor::new(vec![6, 4], rng::normal_vec(&mut rng::stream(3, &[]), 24, 1.0)).unwrap();
        let pool = build_pool(std::slice::from_ref(&s)).unwrap();
        assert_eq!(pool.size(), 3);
        assert!(pool.sets()[0].bitwise_eq(&s));
        assert!(apply_pool(&pool, &xs, None)
            .unwrap()
            .bitwise_eq(&apply_prompts_local(&s, &xs).unwrap()));
    }

    #[test]
    fn pool_sizes_and_errors() {
        let sets: Vec<_> = (0..3).map(|k| PromptSet::<f64>::init(k, 3, 4, 0).unwrap()).collect();
        assert_eq!(build_pool(&sets).unwrap().size(), 9);
        assert!(build_pool::<f64>(&[]).is_err());
        let dup = vec![sets[0].clone(), sets[0].clone()];
        assert!(build_pool(&dup).is_err());
    }

    #[test]
    fn pool_sorts_by_client() {
        let sets: Vec<_> = [2, 0, 1].iter().map(|&k| PromptSet::<f64>::init(k, 1, 2, 0).unwrap()).collect();
        let pool = build_pool(&sets).unwrap();
        let ids: Vec<usize> = pool.sets().iter().map(|s| s.client_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(pool.prompts().row(0), sets[1].prompts.row(0));
    }

    #[test]
    fn two_clients_equal_logits_split_evenly() {
        let a = set(0, &[2.0, 0.0], &[1.0, 1.0], 2);
        let b = set(1, &[0.0, 4.0], &[1.0, 1.0], 2);
        let pool = build_pool(&[a, b]).unwrap();
        let out = apply_pool(&pool, &x(), None).unwrap();
        assert_eq!(out.row(0), &[2.0, 1.5]);
    }

    #[test]
    fn top_k_keeps_largest() {
        let a = set(0, &[1.0, 0.0, 0.0, 1.0, 5.0, 5.0], &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0], 2);
        let pool = build_pool(&[a]).unwrap();
        let att = pool_attention(&pool, &x(), Some(1)).unwrap();
        assert_eq!(att.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(att.row(1), &[0.0, 1.0, 0.0]);
        assert!(pool_attention(&pool, &x(), Some(4)).is_err());
    }

    proptest! {
        #[test]
        fn attention_rows_sum_to_one(
            xs in proptest::collection::vec(-5.0f64..5.0, 12),
            seed: u64, k in 1usize..4,
        ) {
            let x = Tensor::from_f64(&[4, 3], &xs).unwrap();
            let sets: Vec<_> = (0..k).map(|c| {
                let mut s = PromptSet::<f64>::init(c, 2, 3, seed).unwrap();
                s.projections = s.projections.map(|v| v * 100.0);
                s
            }).collect();
            let local = local_attention(&sets[0], &x).unwrap();
            let pooled = pool_attention(&build_pool(&sets).unwrap(), &x, None).unwrap();
            for att in [local, pooled] {
                for i in 0..4 {
                    let r = att.row(i);
                    prop_assert!(r.iter().all(|&v| v >= 0.0));
                    prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn pool_is_permutation_equivariant(seed: u64) {
            let sets: Vec<_> = (0..2).map(|c| PromptSet::<f64>::init(c, 2, 3, seed).unwrap()).collect();
            let pool = build_pool(&sets).unwrap();
            let x = Tensor::new(vec![4, 3], rng::normal_vec(&mut rng::stream(seed, &[1]), 12, 1.0)).unwrap();
            let perm = [2usize, 0, 3, 1];
            let px = crate::tensor::kernels::gather_rows(&x, &perm).unwrap();
            let a = apply_pool(&pool, &x, None).unwrap();
            let b = apply_pool(&pool, &px, None).unwrap();
            prop_assert!(crate::tensor::kernels::gather_rows(&a, &perm).unwrap().bitwise_eq(&b));
        }
    }
}
