//! Toy pre-norm transformer classifier with grouping-aware attention.
//!
//! Block layout: `x + Attn(LN(x))`, then `x + MLP(LN(x))` with a tanh-GELU
//! MLP. After the last block a final layer norm is applied, positions are
//! mean-pooled and a linear head produces class logits. Attention is
//! bidirectional. Q/K/V projections have no bias.
//!
//! A layer whose attention carries a [`KvGrouping`] stores one key tensor per
//! key group and one value tensor per value group; each query head reads the
//! shared tensors of its groups.

mod backward;
pub(crate) mod forward;
mod io;

pub use backward::{backward, Gradients};
pub use forward::{capture_activations, forward, predict, ActivationCapture, ForwardOutput, MacCounter};
pub use io::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{GqaError, Result};
use crate::grouping::HeadGrouping;
use crate::numerics::Rng;
use crate::Matrix;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_model", self.d_model),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(GqaError::Config(format!("{name} must be >= 1")));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(GqaError::Config(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        Ok(())
    }
}

/// Key and value groupings of one attention layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvGrouping {
    pub key: HeadGrouping,
    pub value: HeadGrouping,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Key,
    Value,
}

impl Projection {
    pub fn tag(self) -> u64 {
        match self {
            Projection::Key => 0,
            Projection::Value => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormWeights {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNormWeights {
    fn new(d: usize) -> Self {
        Self {
            gain: Matrix::filled(1, d, 1.0),
            bias: Matrix::zeros(1, d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerWeights {
    /// One `d_model × head_dim` query projection per head.
    pub wq: Vec<Matrix>,
    /// One key projection per key group (per head when `kv` is `None`).
    pub wk: Vec<Matrix>,
    /// One value projection per value group (per head when `kv` is `None`).
    pub wv: Vec<Matrix>,
    pub wo: Matrix,
    pub kv: Option<KvGrouping>,
}

impl AttentionLayerWeights {
    pub fn n_heads(&self) -> usize {
        self.wq.len()
    }

    #[inline]
    pub fn key_slot(&self, head: usize) -> usize {
        self.kv.as_ref().map_or(head, |g| g.key.group_of(head))
    }

    #[inline]
    pub fn value_slot(&self, head: usize) -> usize {
        self.kv.as_ref().map_or(head, |g| g.value.group_of(head))
    }

    pub fn key_grouping(&self) -> HeadGrouping {
        self.kv
            .as_ref()
            .map_or_else(|| HeadGrouping::singletons(self.n_heads()), |g| g.key.clone())
    }

    pub fn value_grouping(&self) -> HeadGrouping {
        self.kv
            .as_ref()
            .map_or_else(|| HeadGrouping::singletons(self.n_heads()), |g| g.value.clone())
    }

    pub fn head_key(&self, head: usize) -> &Matrix {
        &self.wk[self.key_slot(head)]
    }

    pub fn head_value(&self, head: usize) -> &Matrix {
        &self.wv[self.value_slot(head)]
    }

    pub fn head_projection(&self, head: usize, projection: Projection) -> &Matrix {
        match projection {
            Projection::Key => self.head_key(head),
            Projection::Value => self.head_value(head),
        }
    }

    /// Same function, stored as plain multi-head attention with one copy of
    /// the shared key/value tensors per head.
    pub fn expanded(&self) -> Self {
        let h = self.n_heads();
        Self {
            wq: self.wq.clone(),
            wk: (0..h).map(|i| self.head_key(i).clone()).collect(),
            wv: (0..h).map(|i| self.head_value(i).clone()).collect(),
            wo: self.wo.clone(),
            kv: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.wq.iter().chain(&self.wk).chain(&self.wv).map(Matrix::len).sum::<usize>() + self.wo.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNormWeights,
    pub attn: AttentionLayerWeights,
    pub ln2: LayerNormWeights,
    pub mlp: MlpWeights,
}

/// Every learned tensor of the model. Gradients use the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub embedding: Matrix,
    pub positional: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: LayerNormWeights,
    pub classifier: Matrix,
    pub classifier_bias: Matrix,
}

impl Weights {
    /// All tensors with stable names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("embedding".into(), &self.embedding),
            ("positional".into(), &self.positional),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.ln1.gain"), &b.ln1.gain));
            out.push((format!("blocks.{l}.ln1.bias"), &b.ln1.bias));
            for (h, w) in b.attn.wq.iter().enumerate() {
                out.push((format!("blocks.{l}.attn.wq.{h}"), w));
            }
            for (g, w) in b.attn.wk.iter().enumerate() {
                out.push((format!("blocks.{l}.attn.wk.{g}"), w));
            }
            for (g, w) in b.attn.wv.iter().enumerate() {
                out.push((format!("blocks.{l}.attn.wv.{g}"), w));
            }
            out.push((format!("blocks.{l}.attn.wo"), &b.attn.wo));
            out.push((format!("blocks.{l}.ln2.gain"), &b.ln2.gain));
            out.push((format!("blocks.{l}.ln2.bias"), &b.ln2.bias));
            out.push((format!("blocks.{l}.mlp.w1"), &b.mlp.w1));
            out.push((format!("blocks.{l}.mlp.b1"), &b.mlp.b1));
            out.push((format!("blocks.{l}.mlp.w2"), &b.mlp.w2));
            out.push((format!("blocks.{l}.mlp.b2"), &b.mlp.b2));
        }
        out.push(("final_norm.gain".into(), &self.final_norm.gain));
        out.push(("final_norm.bias".into(), &self.final_norm.bias));
        out.push(("classifier.weight".into(), &self.classifier));
        out.push(("classifier.bias".into(), &self.classifier_bias));
        out
    }

    /// Mutable tensors in the same order as [`Weights::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.embedding, &mut self.positional];
        for b in &mut self.blocks {
            out.push(&mut b.ln1.gain);
            out.push(&mut b.ln1.bias);
            out.extend(b.attn.wq.iter_mut());
            out.extend(b.attn.wk.iter_mut());
            out.extend(b.attn.wv.iter_mut());
            out.push(&mut b.attn.wo);
            out.push(&mut b.ln2.gain);
            out.push(&mut b.ln2.bias);
            out.push(&mut b.mlp.w1);
            out.push(&mut b.mlp.b1);
            out.push(&mut b.mlp.w2);
            out.push(&mut b.mlp.b2);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out.push(&mut self.classifier);
        out.push(&mut self.classifier_bias);
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.named_tensors().into_iter().map(|(_, m)| m).collect()
    }

    /// Zero tensors with identical shapes and groupings.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill_zero();
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl Checkpoint {
    /// Per-layer key/value groupings, or `None` for a model that was never
    /// converted. Layers without a grouping report singleton groups.
    pub fn kv_grouping(&self) -> Option<Vec<KvGrouping>> {
        if self.weights.blocks.iter().all(|b| b.attn.kv.is_none()) {
            return None;
        }
        Some(
            self.weights
                .blocks
                .iter()
                .map(|b| KvGrouping {
                    key: b.attn.key_grouping(),
                    value: b.attn.value_grouping(),
                })
                .collect(),
        )
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// Parameters of the attention projections (Q, K, V, O) over all layers.
    pub fn attention_param_count(&self) -> usize {
        self.weights.blocks.iter().map(|b| b.attn.param_count()).sum()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.blocks.len()
    }

    pub fn layer(&self, index: usize) -> &AttentionLayerWeights {
        &self.weights.blocks[index].attn
    }

    /// Same function as plain multi-head attention in every layer.
    pub fn expanded(&self) -> Self {
        let mut out = self.clone();
        for b in &mut out.weights.blocks {
            b.attn = b.attn.expanded();
        }
        out
    }

    /// Structural check of shapes, groupings and finiteness against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let err = |m: String| Err(GqaError::Checkpoint(m));
        let w = &self.weights;
        let expect = |name: &str, m: &Matrix, r: usize, k: usize| -> Result<()> {
            if m.shape() != (r, k) {
                return Err(GqaError::Checkpoint(format!(
                    "{name}: shape {:?}, expected ({r}, {k})",
                    m.shape()
                )));
            }
            Ok(())
        };
        expect("embedding", &w.embedding, c.vocab_size, c.d_model)?;
        expect("positional", &w.positional, c.max_seq_len, c.d_model)?;
        if w.blocks.len() != c.n_layers {
            return err(format!("{} blocks for {} layers", w.blocks.len(), c.n_layers));
        }
        for (l, b) in w.blocks.iter().enumerate() {
            let a = &b.attn;
            if a.wq.len() != c.n_heads {
                return err(format!("layer {l}: {} query heads", a.wq.len()));
            }
            let (nk, nv) = match &a.kv {
                None => (c.n_heads, c.n_heads),
                Some(g) => {
                    if g.key.n_heads() != c.n_heads || g.value.n_heads() != c.n_heads {
                        return err(format!("layer {l}: grouping covers the wrong number of heads"));
                    }
                    (g.key.n_groups(), g.value.n_groups())
                }
            };
            if a.wk.len() != nk || a.wv.len() != nv {
                return err(format!("layer {l}: {} key / {} value tensors", a.wk.len(), a.wv.len()));
            }
            for m in a.wq.iter().chain(&a.wk).chain(&a.wv) {
                expect("attention projection", m, c.d_model, c.head_dim)?;
            }
            expect("wo", &a.wo, c.d_model, c.d_model)?;
            for ln in [&b.ln1, &b.ln2] {
                expect("ln.gain", &ln.gain, 1, c.d_model)?;
                expect("ln.bias", &ln.bias, 1, c.d_model)?;
            }
            expect("mlp.w1", &b.mlp.w1, c.d_model, c.mlp_hidden)?;
            expect("mlp.b1", &b.mlp.b1, 1, c.mlp_hidden)?;
            expect("mlp.w2", &b.mlp.w2, c.mlp_hidden, c.d_model)?;
            expect("mlp.b2", &b.mlp.b2, 1, c.d_model)?;
        }
        expect("final_norm.gain", &w.final_norm.gain, 1, c.d_model)?;
        expect("final_norm.bias", &w.final_norm.bias, 1, c.d_model)?;
        expect("classifier.weight", &w.classifier, c.d_model, c.n_classes)?;
        expect("classifier.bias", &w.classifier_bias, 1, c.n_classes)?;
        if !w.is_finite() {
            return err("non-finite weight".into());
        }
        Ok(())
    }
}

/// Fresh MHA model. Every weight matrix is drawn from
/// `U(-1/sqrt(d_model), 1/sqrt(d_model))`; biases start at zero and
/// layer-norm gains at one.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let bound = 1.0 / (config.d_model as f64).sqrt();
    let (d, dh, f) = (config.d_model, config.head_dim, config.mlp_hidden);
    let mut u = |r: usize, c: usize| Matrix::uniform(r, c, bound, &mut rng);

    let embedding = u(config.vocab_size, d);
    let positional = u(config.max_seq_len, d);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let wq = (0..config.n_heads).map(|_| u(d, dh)).collect();
        let wk = (0..config.n_heads).map(|_| u(d, dh)).collect();
        let wv = (0..config.n_heads).map(|_| u(d, dh)).collect();
        let wo = u(d, d);
        let w1 = u(d, f);
        let w2 = u(f, d);
        blocks.push(BlockWeights {
            ln1: LayerNormWeights::new(d),
            attn: AttentionLayerWeights {
                wq,
                wk,
                wv,
                wo,
                kv: None,
            },
            ln2: LayerNormWeights::new(d),
            mlp: MlpWeights {
                w1,
                b1: Matrix::zeros(1, f),
                w2,
                b2: Matrix::zeros(1, d),
            },
        });
    }
    let classifier = u(d, config.n_classes);
    Ok(Checkpoint {
        config: config.clone(),
        weights: Weights {
            embedding,
            positional,
            blocks,
            final_norm: LayerNormWeights::new(d),
            classifier,
            classifier_bias: Matrix::zeros(1, config.n_classes),
        },
    })
}
