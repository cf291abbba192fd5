mod common;

use common::{config, max_abs_diff, perturb_all, random_batch, reference_logits};
use gqa_core::grouping::HeadGrouping;
use gqa_core::merge::{convert_model, LayerGroupingPlan};
use gqa_core::model::{backward, capture_activations, forward, init_model, predict};
use gqa_core::Matrix;

fn asym_plan(layer: usize) -> LayerGroupingPlan {
    LayerGroupingPlan {
        layer_index: layer,
        key_grouping: HeadGrouping::new(vec![vec![0, 1, 3], vec![2]], 4).unwrap(),
        value_grouping: HeadGrouping::new(vec![vec![0], vec![1, 2], vec![3]], 4).unwrap(),
    }
}

#[test]
fn forward_matches_reference_implementation() {
    let cfg = config(2, 4, 3);
    let mut ckpt = init_model(&cfg, 11).unwrap();
    perturb_all(&mut ckpt, 12);
    let batch = random_batch(&cfg, 6, 13);
    let logits = predict(&ckpt, &batch, None).unwrap();
    for (i, seq) in batch.iter().enumerate() {
        let d = max_abs_diff(logits.row(i), &reference_logits(&ckpt, seq));
        assert!(d < 1e-9, "example {i}: {d}");
    }

    // Same reference on a grouped model reads the shared tensors per head.
    let grouped = convert_model(&ckpt, &[asym_plan(0), asym_plan(1)]).unwrap();
    let logits = predict(&grouped, &batch, None).unwrap();
    for (i, seq) in batch.iter().enumerate() {
        assert!(max_abs_diff(logits.row(i), &reference_logits(&grouped, seq)) < 1e-9);
    }
}

#[test]
fn constant_logits_with_balanced_labels_give_zero_bias_gradient() {
    let cfg = config(1, 2, 2);
    let mut ckpt = init_model(&cfg, 3).unwrap();
    ckpt.weights.classifier = Matrix::zeros(cfg.d_model, cfg.n_classes);
    let batch = random_batch(&cfg, 6, 4);
    let labels = vec![0, 1, 2, 0, 1, 2];
    let (loss, grads) = backward(&ckpt, &batch, &labels).unwrap();
    assert!((loss - (3.0f64).ln()).abs() < 1e-12);
    assert!(grads.classifier_bias.as_slice().iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn small_gradient_step_reduces_loss() {
    let cfg = config(2, 2, 3);
    let mut ckpt = init_model(&cfg, 5).unwrap();
    let batch = random_batch(&cfg, 8, 6);
    let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let (before, grads) = backward(&ckpt, &batch, &labels).unwrap();
    for (w, g) in ckpt.weights.tensors_mut().into_iter().zip(grads.tensors()) {
        for (v, d) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *v -= 1e-2 * d;
        }
    }
    let (after, _) = backward(&ckpt, &batch, &labels).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn shared_key_gradient_is_sum_over_expanded_heads() {
    let cfg = config(2, 4, 3);
    let mut base = init_model(&cfg, 21).unwrap();
    perturb_all(&mut base, 22);
    let grouped = convert_model(&base, &[asym_plan(0), asym_plan(1)]).unwrap();
    let expanded = grouped.expanded();
    let batch = random_batch(&cfg, 5, 23);
    let labels = vec![0, 2, 1, 1, 0];
    let (loss_g, grads_g) = backward(&grouped, &batch, &labels).unwrap();
    let (loss_e, grads_e) = backward(&expanded, &batch, &labels).unwrap();
    assert!((loss_g - loss_e).abs() < 1e-12);

    for l in 0..cfg.n_layers {
        let attn = grouped.layer(l);
        let (kg, vg) = (attn.key_grouping(), attn.value_grouping());
        for (slot, members) in kg.groups().iter().enumerate() {
            let mut sum = Matrix::zeros(cfg.d_model, cfg.head_dim);
            for &h in members {
                sum.add_assign(&grads_e.blocks[l].attn.wk[h]).unwrap();
            }
            let shared = &grads_g.blocks[l].attn.wk[attn.key_slot(members[0])];
            assert!(max_abs_diff(shared.as_slice(), sum.as_slice()) < 1e-9, "layer {l} key slot {slot}");
        }
        for members in vg.groups() {
            let mut sum = Matrix::zeros(cfg.d_model, cfg.head_dim);
            for &h in members {
                sum.add_assign(&grads_e.blocks[l].attn.wv[h]).unwrap();
            }
            let shared = &grads_g.blocks[l].attn.wv[attn.value_slot(members[0])];
            assert!(max_abs_diff(shared.as_slice(), sum.as_slice()) < 1e-9);
        }
    }
}

#[test]
fn layer_zero_capture_ignores_later_groupings() {
    let cfg = config(2, 4, 3);
    let base = init_model(&cfg, 31).unwrap();
    let batch = random_batch(&cfg, 3, 32);
    let grouped = convert_model(
        &base,
        &[
            LayerGroupingPlan::uniform(0, HeadGrouping::singletons(4)),
            LayerGroupingPlan::uniform(1, HeadGrouping::new(vec![vec![0, 1, 2, 3]], 4).unwrap()),
        ],
    )
    .unwrap();
    let a = capture_activations(&base, &batch, 0).unwrap();
    let b = capture_activations(&grouped, &batch, 0).unwrap();
    assert_eq!(a.keys, b.keys);
    assert_eq!(a.values, b.values);
    let rows: usize = batch.iter().map(Vec::len).sum();
    assert!(a.keys.iter().all(|k| k.rows() == rows));
}

#[test]
fn forward_is_deterministic() {
    let cfg = config(2, 2, 2);
    let ckpt = init_model(&cfg, 1).unwrap();
    let batch = random_batch(&cfg, 4, 2);
    assert_eq!(forward(&ckpt, &batch).unwrap().logits, forward(&ckpt, &batch).unwrap().logits);
}
