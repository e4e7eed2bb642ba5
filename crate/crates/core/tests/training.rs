mod common;

use common::*;
use lexrel::data::{Dataset, RelationTriple};
use lexrel::network::{init_params, CellSharing, Head, ParamBlocks};
use lexrel::prototypes::compute_prototypes;
use lexrel::synth::{generate, SplitCounts, SynthSpec};
use lexrel::tasks::{RanMode, TaskSampler};
use lexrel::training::{
    inner_adapt, meta_step, meta_train, supervised_finetune, task_examples, AdaptedTask, FineTuner,
    MetaUpdate, TrainConfig,
};
use proptest::prelude::*;

fn small() -> (lexrel::data::EmbeddingTable, Dataset) {
    let spec = SynthSpec::balanced(6, 3, SplitCounts::new(30, 10, 10), 0.05, 21);
    generate(&spec).unwrap()
}

#[test]
fn inner_step_is_plain_gradient_descent() {
    let (emb, ds) = small();
    let protos = compute_prototypes(&ds.train, &emb, &ds.relations).unwrap();
    let theta = init_params(6, &ds.relations, CellSharing::Shared, 2);
    let sampler = TaskSampler::new(&ds.train, &ds.relations, RanMode::Explicit).unwrap();
    let batch = sampler.sample_batch(1, 16, &mut rng(0)).unwrap();
    let ex = task_examples(&batch, &emb).unwrap();

    let config = TrainConfig {
        alpha: 0.1,
        inner_steps: 1,
        ..TrainConfig::default()
    };
    let adapted = inner_adapt(&theta, 1, &ex, &protos, &config).unwrap();
    let (_, g) = theta
        .backward(&ex, &protos, Head::Meta(1), config.lambda)
        .unwrap();
    let mut expected = theta.clone();
    expected.apply(-0.1, &g).unwrap();
    assert_eq!(adapted, expected);
    // Other heads are not touched.
    assert_eq!(adapted.meta_heads[0], theta.meta_heads[0]);
    assert_eq!(adapted.final_head, theta.final_head);

    let two = inner_adapt(
        &theta,
        1,
        &ex,
        &protos,
        &TrainConfig {
            inner_steps: 2,
            ..config.clone()
        },
    )
    .unwrap();
    let again = inner_adapt(&adapted, 1, &ex, &protos, &config).unwrap();
    assert_eq!(two, again);
}

#[test]
fn reptile_moves_toward_adapted_mean() {
    let (_, ds) = small();
    let theta = init_params(6, &ds.relations, CellSharing::Shared, 2);
    let shift = |c: f64| {
        let mut p = theta.clone();
        for b in p.blocks_mut() {
            b.iter_mut().for_each(|v| *v += c);
        }
        p
    };
    let tasks = vec![
        AdaptedTask {
            relation: 0,
            adapted: shift(1.0),
            eval_examples: vec![],
        },
        AdaptedTask {
            relation: 1,
            adapted: shift(3.0),
            eval_examples: vec![],
        },
    ];
    let config = TrainConfig {
        epsilon: 0.5,
        meta_update_rule: MetaUpdate::Reptile,
        ..TrainConfig::default()
    };
    let protos =
        lexrel::prototypes::PrototypeSet::from_parts(6, vec![vec![0.0; 6]; 3], vec![1; 3]).unwrap();
    let next = meta_step(&theta, &tasks, &protos, &config).unwrap();
    // θ + 0.5 · mean(1, 3) = θ + 1
    for (a, b) in next.blocks().iter().zip(theta.blocks()) {
        for (x, y) in a.values.iter().zip(b.values) {
            assert!((x - y - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_meta_iterations_returns_theta() {
    let (emb, ds) = small();
    let protos = compute_prototypes(&ds.train, &emb, &ds.relations).unwrap();
    let theta = init_params(6, &ds.relations, CellSharing::Shared, 2);
    let config = TrainConfig {
        max_meta_iters: 0,
        ..TrainConfig::default()
    };
    let (out, hist) = meta_train(theta.clone(), &ds.train, &emb, &protos, &config).unwrap();
    assert_eq!(out, theta);
    assert!(hist.is_empty());
}

#[test]
fn plateau_stops_early() {
    let (emb, ds) = small();
    let protos = compute_prototypes(&ds.train, &emb, &ds.relations).unwrap();
    let theta = init_params(6, &ds.relations, CellSharing::Shared, 2);
    let config = TrainConfig {
        max_meta_iters: 200,
        plateau_window: 5,
        plateau_delta: 10.0,
        batch_size: 8,
        probe_batch_size: 8,
        ..TrainConfig::default()
    };
    let (_, hist) = meta_train(theta, &ds.train, &emb, &protos, &config).unwrap();
    // The first iteration sets the best value, then five without improvement.
    assert_eq!(hist.len(), 6);
}

#[test]
fn dataset_without_random_class_uses_complement_negatives() {
    let (emb, ds) = small();
    let rels = relations(3, false);
    let train: Vec<RelationTriple> = ds
        .train
        .iter()
        .filter(|t| !ds.relations.is_random(t.relation))
        .cloned()
        .collect();
    assert_eq!(RanMode::for_relations(&rels), RanMode::Complement);
    let protos = compute_prototypes(&train, &emb, &rels).unwrap();
    let theta = init_params(6, &rels, CellSharing::Shared, 0);
    assert_eq!(theta.dense_input_width(), 2 * 3 * 6 + 2 * 6);
    let config = TrainConfig {
        max_meta_iters: 3,
        batch_size: 8,
        probe_batch_size: 8,
        ..TrainConfig::default()
    };
    let (_, hist) = meta_train(theta, &train, &emb, &protos, &config).unwrap();
    assert_eq!(hist.len(), 3);
    assert!(hist.iter().all(|m| m.tasks.iter().all(|&r| r < 3)));

    let explicit = TrainConfig {
        ran_mode: Some(RanMode::Explicit),
        ..config
    };
    let theta = init_params(6, &rels, CellSharing::Shared, 0);
    assert!(meta_train(theta, &train, &emb, &protos, &explicit).is_err());
}

#[test]
fn full_batch_finetune_loss_does_not_increase() {
    let (emb, ds) = small();
    let protos = compute_prototypes(&ds.train, &emb, &ds.relations).unwrap();
    let theta = init_params(6, &ds.relations, CellSharing::Shared, 2);
    let config = TrainConfig {
        finetune_lr: 1e-4,
        batch_size: ds.train.len(),
        ..TrainConfig::default()
    };
    let mut tuner = FineTuner::new(theta, &ds.train, &emb, &protos, &config).unwrap();
    let losses: Vec<f64> = (0..20).map(|_| tuner.run_epoch().unwrap()).collect();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{losses:?}");
    }
    assert!(tuner.params.meta_heads.is_empty());
}

#[test]
fn early_stopping_keeps_best_epoch() {
    let (emb, ds) = small();
    let protos = compute_prototypes(&ds.train, &emb, &ds.relations).unwrap();
    let theta = init_params(6, &ds.relations, CellSharing::Shared, 2);
    let config = TrainConfig {
        batch_size: 16,
        max_supervised_epochs: 30,
        patience: 3,
        ..TrainConfig::default()
    };
    let (_, records, best) =
        supervised_finetune(theta, &ds.train, &ds.validation, &emb, &protos, &config).unwrap();
    let best = best.unwrap();
    let top = records
        .iter()
        .map(|r| r.val_f1)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(records[best].val_f1, top);
    assert!(records.len() <= 30);
}

#[test]
fn ran_discard_thins_random_class() {
    let (emb, ds) = small();
    let protos = compute_prototypes(&ds.train, &emb, &ds.relations).unwrap();
    let theta = init_params(6, &ds.relations, CellSharing::Shared, 2);
    let full = TrainConfig {
        batch_size: ds.train.len(),
        ..TrainConfig::default()
    };
    let thinned = TrainConfig {
        ran_discard_fraction: 0.7,
        ..full.clone()
    };
    let l_full = FineTuner::new(theta.clone(), &ds.train, &emb, &protos, &full)
        .unwrap()
        .run_epoch()
        .unwrap();
    let l_thin = FineTuner::new(theta, &ds.train, &emb, &protos, &thinned)
        .unwrap()
        .run_epoch()
        .unwrap();
    // Summed loss over fewer examples.
    assert!(l_thin < l_full);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn gradients_match_finite_differences(seed in 0u64..1000, per_relation in any::<bool>(), n in 1usize..4) {
        let d = 3;
        let rels = relations(n, seed % 2 == 0);
        let mut r = rng(seed);
        let protos = random_protos(d, rels.num_tasks(), &mut r);
        let sharing = if per_relation { CellSharing::PerRelation } else { CellSharing::Shared };
        let mut params = init_params(d, &rels, sharing, seed);
        jitter(&mut params, &mut r);
        let xs = random_vectors(2, d, &mut r);
        let ys = random_vectors(2, d, &mut r);
        for head in [Head::Meta(0), Head::Final] {
            let classes = if head == Head::Final { rels.len() } else { 2 };
            let batch: Vec<_> = (0..2)
                .map(|i| lexrel::network::Example { x: &xs[i], y: &ys[i], target: (i + 1) % classes })
                .collect();
            let g = grad_check(&params, &batch, &protos, head, 1e-2, 1e-5);
            prop_assert!(g.worst_rel < 1e-4, "{:?}", g);
        }
    }
}
