use graphfed_core::downstream::auc;
use graphfed_core::federation::aggregate;
use graphfed_core::graph::{louvain, modularity};
use graphfed_core::prompt_pool::{build_pool, pool_attention, PromptSet};
use graphfed_core::rng;
use graphfed_core::tensor::Tensor;
use graphfed_core::vqvae::{GfmParams, ModelConfig};
use proptest::prelude::*;

fn model() -> ModelConfig {
    ModelConfig {
        d: 4,
        heads: 2,
        tokens: 3,
        ..ModelConfig::default()
    }
}

proptest! {
    #[test]
    fn auc_flips_with_the_scores(
        items in proptest::collection::vec((0u8..6, any::<bool>()), 2..80),
    ) {
        let scores: Vec<f64> = items.iter().map(|i| f64::from(i.0)).collect();
        let labels: Vec<bool> = items.iter().map(|i| i.1).collect();
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        match (auc(&scores, &labels), auc(&negated, &labels)) {
            (Some(a), Some(b)) => prop_assert!((a + b - 1.0).abs() < 1e-12),
            (a, b) => prop_assert!(a.is_none() && b.is_none()),
        }
        let squashed: Vec<f64> = scores.iter().map(|s| (s / 3.0).tanh()).collect();
        prop_assert_eq!(auc(&squashed, &labels), auc(&scores, &labels));
    }

    #[test]
    fn louvain_beats_the_trivial_partitions(n in 2usize..40, p in 0.05f64..0.5, seed: u64) {
        let mut r = rng::stream(seed, &[]);
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| ((u + 1)..n).map(move |v| (u, v)))
            .filter(|_| rng::normal::<f64>(&mut r) < p * 4.0 - 2.0)
            .collect();
        prop_assume!(!edges.is_empty());
        let res = louvain(n, &edges, seed);
        let singletons: Vec<usize> = (0..n).collect();
        prop_assert!(res.modularity >= modularity(n, &edges, &singletons) - 1e-12);
        prop_assert!(res.modularity >= modularity(n, &edges, &vec![0; n]) - 1e-12);
        prop_assert!((res.modularity - modularity(n, &edges, &res.communities)).abs() < 1e-12);
    }

    #[test]
    fn doubling_every_weight_changes_nothing(w in proptest::collection::vec(1usize..500, 1..5), seed: u64) {
        let params: Vec<GfmParams<f64>> = (0..w.len()).map(|k| GfmParams::init(&model(), seed ^ k as u64).unwrap()).collect();
        let once: Vec<_> = w.iter().enumerate().map(|(k, &n)| (k, n, &params[k])).collect();
        let twice: Vec<_> = w.iter().enumerate().map(|(k, &n)| (k, 2 * n, &params[k])).collect();
        prop_assert!(aggregate(&once).unwrap().bitwise_eq(&aggregate(&twice).unwrap()));
    }

    #[test]
    fn top_k_over_the_whole_pool_is_the_softmax(counts in proptest::collection::vec(1usize..4, 1..4), seed: u64) {
        let sets: Vec<PromptSet<f64>> = counts
            .iter()
            .enumerate()
            .map(|(c, &n)| PromptSet::init(c, n, 4, seed ^ c as u64).unwrap())
            .collect();
        let pool = build_pool(&sets).unwrap();
        let x = Tensor::new(vec![5, 4], rng::normal_vec(&mut rng::stream(seed, &[1]), 20, 1.0)).unwrap();
        let full = pool_attention(&pool, &x, None).unwrap();
        let all = pool_attention(&pool, &x, Some(pool.size())).unwrap();
        for (a, b) in full.data().iter().zip(all.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
