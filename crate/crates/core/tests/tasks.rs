use gqa_core::grouping::{enumerate_equal_partitions, AccuracyOracle, HeadGrouping};
use gqa_core::merge::{convert_model, LayerGroupingPlan};
use gqa_core::model::{init_model, ModelConfig, Projection};
use gqa_core::tasks::{evaluate, finetune, gen_dataset, make_search_oracle, train, Split, TaskKind, TaskSpec, TrainConfig};

fn majority(types: usize, n: usize) -> TaskSpec {
    TaskSpec {
        task: TaskKind::Majority {
            n_classes: 4,
            marker_types_per_seq: types,
            marker_prob: 0.5,
        },
        seq_len: 10,
        vocab_size: 12,
        n_train: n,
        n_val: 64,
        n_test: 64,
    }
}

fn first_last(n_test: usize) -> TaskSpec {
    TaskSpec {
        task: TaskKind::FirstLastMatch,
        seq_len: 6,
        vocab_size: 8,
        n_train: 32,
        n_val: 32,
        n_test,
    }
}

fn model_for(spec: &TaskSpec, layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        n_heads: heads,
        head_dim: 4,
        d_model: 4 * heads,
        mlp_hidden: 16,
        vocab_size: spec.vocab_size,
        max_seq_len: spec.seq_len,
        n_classes: spec.n_classes(),
    }
}

#[test]
fn classes_are_balanced_over_ten_thousand() {
    for spec in [majority(3, 10_000), TaskSpec { n_train: 10_000, ..first_last(64) }] {
        let ds = gen_dataset(&spec, 3).unwrap();
        let (_, labels) = ds.examples(Split::Train);
        let c = spec.n_classes();
        for k in 0..c {
            let frac = labels.iter().filter(|&&y| y == k).count() as f64 / labels.len() as f64;
            assert!((frac - 1.0 / c as f64).abs() < 0.02, "class {k}: {frac}");
        }
    }
}

#[test]
fn majority_labels_follow_marker_counts() {
    let ds = gen_dataset(&majority(3, 500), 4).unwrap();
    for (seq, &y) in ds.inputs.iter().zip(&ds.labels) {
        let count = |m: usize| seq.iter().filter(|&&t| t == m).count();
        assert!((0..4).filter(|&m| m != y).all(|m| count(m) < count(y)));
    }
}

#[test]
fn single_marker_type_is_linearly_readable() {
    // Bag-of-tokens features with an identity readout on the marker tokens.
    let ds = gen_dataset(&majority(1, 500), 5).unwrap();
    for (seq, &y) in ds.inputs.iter().zip(&ds.labels) {
        let mut scores = [0.0f64; 4];
        for &t in seq {
            if t < 4 {
                scores[t] += 1.0;
            }
        }
        let pred = (0..4).max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a))).unwrap();
        assert_eq!(pred, y);
    }
}

#[test]
fn generation_is_byte_deterministic() {
    let a = gen_dataset(&majority(2, 100), 9).unwrap().to_json().unwrap();
    let b = gen_dataset(&majority(2, 100), 9).unwrap().to_json().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, gen_dataset(&majority(2, 100), 10).unwrap().to_json().unwrap());
}

#[test]
fn untrained_model_is_at_chance_on_binary_task() {
    let spec = first_last(2000);
    let ds = gen_dataset(&spec, 1).unwrap();
    let ckpt = init_model(&model_for(&spec, 1, 2), 2).unwrap();
    let acc = evaluate(&ckpt, &ds, Split::Test).unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    assert_eq!(acc, evaluate(&ckpt, &ds, Split::Test).unwrap());
}

#[test]
fn memorization_fixture_reaches_full_accuracy() {
    // Label is the parity of the first token.
    let spec = first_last(32);
    let mut ds = gen_dataset(&spec, 2).unwrap();
    for (seq, y) in ds.inputs.iter().zip(ds.labels.iter_mut()) {
        *y = seq[0] % 2;
    }
    ds.validate().unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 8,
        learning_rate: 1e-2,
        weight_decay: 0.0,
        seed: 3,
    };
    let (trained, _) = train(&init_model(&model_for(&spec, 1, 2), 4).unwrap(), &ds, &cfg).unwrap();
    assert_eq!(evaluate(&trained, &ds, Split::Train).unwrap(), 1.0);
}

#[test]
fn finetune_is_extra_training_epochs() {
    let spec = majority(2, 64);
    let ds = gen_dataset(&spec, 6).unwrap();
    let init = init_model(&model_for(&spec, 1, 2), 7).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let (a, _) = train(&init, &ds, &cfg).unwrap();
    let (b, hist) = finetune(&init, &ds, 2, &TrainConfig { epochs: 99, ..cfg.clone() }).unwrap();
    assert_eq!(a, b);
    assert_eq!(hist.records.len(), 2);
}

#[test]
fn oracle_is_pure_and_matches_convert_then_evaluate() {
    let spec = TaskSpec { n_val: 96, ..majority(3, 64) };
    let ds = gen_dataset(&spec, 8).unwrap();
    let ckpt = init_model(&model_for(&spec, 2, 4), 9).unwrap();
    // The oracle split here is the whole validation split.
    for projection in [Projection::Key, Projection::Value] {
        let oracle = make_search_oracle(&ckpt, &ds, 1, projection).unwrap();
        let g = HeadGrouping::new(vec![vec![0, 3], vec![1, 2]], 4).unwrap();
        let first = oracle.accuracy(&g).unwrap();
        assert!((0..100).all(|_| oracle.accuracy(&g).unwrap() == first));

        assert_eq!(
            oracle.accuracy(&HeadGrouping::singletons(4)).unwrap(),
            evaluate(&ckpt, &ds, Split::Val).unwrap()
        );
        for g in enumerate_equal_partitions(4, 2, 10).unwrap() {
            let singles = HeadGrouping::singletons(4);
            let plan = match projection {
                Projection::Key => LayerGroupingPlan {
                    layer_index: 1,
                    key_grouping: g.clone(),
                    value_grouping: singles.clone(),
                },
                Projection::Value => LayerGroupingPlan {
                    layer_index: 1,
                    key_grouping: singles.clone(),
                    value_grouping: g.clone(),
                },
            };
            let converted =
                convert_model(&ckpt, &[LayerGroupingPlan::uniform(0, singles.clone()), plan]).unwrap();
            assert_eq!(oracle.accuracy(&g).unwrap(), evaluate(&converted, &ds, Split::Val).unwrap());
        }
    }
}
