use graphfed_core::downstream::{evaluate, finetune, make_head, FinetuneConfig, TaskData};
use graphfed_core::federation::{run_pretraining, FedConfig};
use graphfed_core::graph::{
    benchmark_domains, load_collection, load_graph, louvain_partition, random_allocate, save_collection, save_graph,
    split, synth_collection, synth_domain, ClientData, CollectionSpec, SplitRatios,
};
use graphfed_core::optim::Optimizer;
use graphfed_core::vqvae::{GfmParams, LocalTrainConfig, ModelConfig};
use graphfed_core::Scalar;

fn model() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        tokens: 6,
        ..ModelConfig::default()
    }
}

fn fed_config(deterministic: bool) -> FedConfig {
    FedConfig {
        rounds: 3,
        local: LocalTrainConfig {
            lr: 1e-3,
            epochs: 2,
            optimizer: Optimizer::Adam,
        },
        deterministic,
        seed: 4,
        ..FedConfig::default()
    }
}

/// Two benchmark domains, each split into two Louvain clients.
fn clients<S: Scalar>() -> Vec<ClientData<S>> {
    benchmark_domains(2, 60, 8, 1)
        .iter()
        .enumerate()
        .flat_map(|(i, spec)| {
            let g = synth_domain::<S>(spec).unwrap();
            louvain_partition(&g, 2, i as u64).unwrap().clients.into_iter().map(ClientData::Subgraph)
        })
        .collect()
}

#[test]
fn parallel_clients_match_sequential_order() {
    let data = clients::<f64>();
    let init = GfmParams::init(&model(), 2).unwrap();
    let seq = run_pretraining(&fed_config(true), &model(), &data, init.clone()).unwrap();
    let par = run_pretraining(&fed_config(false), &model(), &data, init).unwrap();
    assert!(seq.server.global.bitwise_eq(&par.server.global));
    let (a, b) = (seq.pool().unwrap().unwrap(), par.pool().unwrap().unwrap());
    assert_eq!(a.digest(), b.digest());
    assert_eq!(a.size(), 4 * 3);
}

#[test]
fn single_precision_tracks_double() {
    let init = GfmParams::<f64>::init(&model(), 2).unwrap();
    let hi = run_pretraining(&fed_config(true), &model(), &clients::<f64>(), init.clone()).unwrap();
    let lo = run_pretraining(&fed_config(true), &model(), &clients::<f32>(), init.cast::<f32>()).unwrap();
    let (a, b) = (hi.server.global.flatten(), lo.server.global.flatten());
    let worst = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - f64::from(*y)).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "largest difference {worst}");
}

#[test]
fn finetuned_head_reproduces_its_validation_metric() {
    let data = clients::<f64>();
    let fed = run_pretraining(&fed_config(true), &model(), &data, GfmParams::init(&model(), 2).unwrap()).unwrap();
    let pool = fed.pool().unwrap().unwrap();
    let task = TaskData::from_graph(synth_domain::<f64>(&benchmark_domains(2, 60, 8, 1)[0]).unwrap()).unwrap();
    let sp = split(&task.strata(), SplitRatios::PUBMED, 3).unwrap();
    let head = make_head(task.kind(), 8, task.arity(), 5).unwrap();
    let cfg = FinetuneConfig {
        max_epochs: 60,
        ..FinetuneConfig::default()
    };
    let out = finetune(&fed.server.global, Some(&pool), &head, &task, &sp, &cfg).unwrap();
    let val = evaluate(&fed.server.global, Some(&pool), &out.head, &task, &sp.val, None).unwrap();
    assert_eq!(Some(val.value), out.best_metric);
    let test = evaluate(&fed.server.global, Some(&pool), &out.head, &task, &sp.test, None).unwrap();
    assert!((0.0..=1.0).contains(&test.value));
    assert_eq!(test.metric_name, "accuracy");
}

#[test]
fn partitioned_clients_survive_containers() {
    let dir = tempfile::tempdir().unwrap();
    for (k, c) in clients::<f64>().iter().enumerate() {
        let ClientData::Subgraph(g) = c else { unreachable!() };
        let path = dir.path().join(format!("client_{k}"));
        save_graph(g, &path).unwrap();
        assert!(load_graph::<f64>(&path).unwrap().bitwise_eq(g));
    }
    let spec = CollectionSpec {
        graphs: 12,
        min_nodes: 4,
        max_nodes: 9,
        p_edge: 0.3,
        tasks: 3,
        feature_dim: 8,
        missing_rate: 0.2,
        domain_tag: "molecules".into(),
        seed: 6,
    };
    let (assignment, parts) = random_allocate(&synth_collection::<f64>(&spec).unwrap(), 3, 7).unwrap();
    assert_eq!(assignment.sizes().iter().sum::<usize>(), 12);
    for (k, part) in parts.iter().enumerate() {
        let path = dir.path().join(format!("collection_{k}"));
        save_collection(part, &path).unwrap();
        let back = load_collection::<f64>(&path).unwrap();
        assert_eq!(back.len(), part.len());
        assert!(back.graphs().iter().zip(part.graphs()).all(|(a, b)| a.bitwise_eq(b)));
    }
}
