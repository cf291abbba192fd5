#![allow(dead_code)]

use gqa_core::model::{Checkpoint, ModelConfig};
use gqa_core::Rng;

pub fn config(n_layers: usize, n_heads: usize, head_dim: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        head_dim,
        d_model: n_heads * head_dim,
        mlp_hidden: 12,
        vocab_size: 10,
        max_seq_len: 6,
        n_classes: 3,
    }
}

pub fn random_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let len = 2 + rng.below(cfg.max_seq_len - 1);
            (0..len).map(|_| rng.below(cfg.vocab_size)).collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// Straight-line reference transformer on nested vectors. Only plain
// loops and the weight values are shared with the library.

type Mat = Vec<Vec<f64>>;

fn to_mat(m: &gqa_core::Matrix) -> Mat {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn ln(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
}

pub fn reference_logits(ckpt: &Checkpoint, tokens: &[usize]) -> Vec<f64> {
    let c = &ckpt.config;
    let w = &ckpt.weights;
    let emb = to_mat(&w.embedding);
    let pos = to_mat(&w.positional);
    let s = tokens.len();
    let mut x: Mat = (0..s)
        .map(|i| (0..c.d_model).map(|j| emb[tokens[i]][j] + pos[i][j]).collect())
        .collect();
    for l in 0..c.n_layers {
        let b = &w.blocks[l];
        let h = ln(&x, b.ln1.gain.as_slice(), b.ln1.bias.as_slice());
        let mut concat = vec![vec![0.0; c.d_model]; s];
        for head in 0..c.n_heads {
            let q = mm(&h, &to_mat(&b.attn.wq[head]));
            let k = mm(&h, &to_mat(b.attn.head_key(head)));
            let v = mm(&h, &to_mat(b.attn.head_value(head)));
            for i in 0..s {
                let mut scores: Vec<f64> = (0..s)
                    .map(|j| (0..c.head_dim).map(|t| q[i][t] * k[j][t]).sum::<f64>() / (c.head_dim as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|v| (v - m).exp()).sum();
                for sc in scores.iter_mut() {
                    *sc = (*sc - m).exp() / z;
                }
                for t in 0..c.head_dim {
                    concat[i][head * c.head_dim + t] = (0..s).map(|j| scores[j] * v[j][t]).sum();
                }
            }
        }
        let o = mm(&concat, &to_mat(&b.attn.wo));
        for i in 0..s {
            for j in 0..c.d_model {
                x[i][j] += o[i][j];
            }
        }
        let h2 = ln(&x, b.ln2.gain.as_slice(), b.ln2.bias.as_slice());
        let mut a = mm(&h2, &to_mat(&b.mlp.w1));
        for row in a.iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = gelu(*v + b.mlp.b1.as_slice()[j]);
            }
        }
        let m = mm(&a, &to_mat(&b.mlp.w2));
        for i in 0..s {
            for j in 0..c.d_model {
                x[i][j] += m[i][j] + b.mlp.b2.as_slice()[j];
            }
        }
    }
    let hf = ln(&x, w.final_norm.gain.as_slice(), w.final_norm.bias.as_slice());
    let pooled: Vec<f64> = (0..c.d_model).map(|j| hf.iter().map(|r| r[j]).sum::<f64>() / s as f64).collect();
    let cls = to_mat(&w.classifier);
    (0..c.n_classes)
        .map(|k| (0..c.d_model).map(|j| pooled[j] * cls[j][k]).sum::<f64>() + w.classifier_bias.as_slice()[k])
        .collect()
}

/// Randomizes layer-norm parameters and biases so tests exercise them.
pub fn perturb_all(ckpt: &mut Checkpoint, seed: u64) {
    let mut rng = Rng::new(seed);
    for t in ckpt.weights.tensors_mut() {
        for v in t.as_mut_slice() {
            *v += rng.uniform_in(-0.2, 0.2);
        }
    }
}

pub fn gqa(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_gqa"))
        .args(args)
        .output()
        .expect("spawn gqa")
}

pub fn gqa_ok(args: &[&str]) -> String {
    let out = gqa(args);
    assert!(
        out.status.success(),
        "gqa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small majority-task run configuration for CLI tests.
pub fn write_run_config(path: &std::path::Path, n_heads: usize, epochs: usize) {
    let cfg = serde_json::json!({
        "format_version": 1,
        "model": {
            "n_layers": 2, "n_heads": n_heads, "head_dim": 2, "d_model": 2 * n_heads,
            "mlp_hidden": 8, "vocab_size": 10, "max_seq_len": 6, "n_classes": 3
        },
        "task": {
            "task": {"kind": "majority", "n_classes": 3, "marker_types_per_seq": 2, "marker_prob": 0.5},
            "seq_len": 6, "vocab_size": 10, "n_train": 48, "n_val": 32, "n_test": 32
        },
        "data_seed": 1,
        "init_seed": 2,
        "train": {"epochs": epochs, "batch_size": 16, "learning_rate": 0.003, "weight_decay": 0.01, "seed": 3}
    });
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

pub fn read_manifest(dir: &std::path::Path) -> gqa_core::cli::RunManifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}
