use std::cell::Cell;

use crate::error::{GqaError, Result};
use crate::numerics::softmax_rows_in_place;
use crate::Matrix;

use super::{BlockWeights, Checkpoint, KvGrouping, LayerNormWeights, Projection};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Counts multiply-accumulates spent in attention projections and in the
/// score/value matmuls.
#[derive(Debug, Default)]
pub struct MacCounter {
    projection: Cell<u64>,
    attention: Cell<u64>,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn projection_macs(&self) -> u64 {
        self.projection.get()
    }

    pub fn attention_macs(&self) -> u64 {
        self.attention.get()
    }

    pub fn total_macs(&self) -> u64 {
        self.projection_macs() + self.attention_macs()
    }

    fn add_projection(&self, rows: usize, inner: usize, cols: usize) {
        self.projection
            .set(self.projection.get() + (rows * inner * cols) as u64);
    }

    fn add_attention(&self, rows: usize, inner: usize, cols: usize) {
        self.attention
            .set(self.attention.get() + (rows * inner * cols) as u64);
    }
}

pub(crate) struct LnCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Matrix, w: &LayerNormWeights) -> (Matrix, LnCache) {
    let (n, d) = x.shape();
    let mut xhat = Matrix::zeros(n, d);
    let mut y = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    let g = w.gain.as_slice();
    let b = w.bias.as_slice();
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xr = xhat.row_mut(i);
        for (o, &v) in xr.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = g[j] * xhat[(i, j)] + b[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

#[inline]
pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn add_row_bias(m: &mut Matrix, bias: &Matrix) {
    let b = bias.as_slice();
    for i in 0..m.rows() {
        for (v, &bb) in m.row_mut(i).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

pub(crate) struct BlockCache {
    pub ln1: LnCache,
    pub h: Matrix,
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub probs: Vec<Matrix>,
    pub concat: Matrix,
    pub ln2: LnCache,
    pub h2: Matrix,
    pub pre_act: Matrix,
    pub act: Matrix,
}

pub(crate) struct ExampleCache {
    pub tokens: Vec<usize>,
    pub blocks: Vec<BlockCache>,
    pub final_ln: LnCache,
    pub pooled: Matrix,
    pub logits: Vec<f64>,
}

fn embed(ckpt: &Checkpoint, tokens: &[usize]) -> Matrix {
    let d = ckpt.config.d_model;
    let w = &ckpt.weights;
    let mut x = Matrix::zeros(tokens.len(), d);
    for (s, &t) in tokens.iter().enumerate() {
        let row = x.row_mut(s);
        for ((o, &e), &p) in row.iter_mut().zip(w.embedding.row(t)).zip(w.positional.row(s)) {
            *o = e + p;
        }
    }
    x
}

fn block_forward(block: &BlockWeights, x: &Matrix, head_dim: usize, counter: Option<&MacCounter>) -> (Matrix, BlockCache) {
    let attn = &block.attn;
    let (s, d) = x.shape();
    let (h, ln1) = layer_norm(x, &block.ln1);

    // Shared projections are computed once per group.
    let k: Vec<Matrix> = attn.wk.iter().map(|w| h.matmul(w).expect("key shape")).collect();
    let v: Vec<Matrix> = attn.wv.iter().map(|w| h.matmul(w).expect("value shape")).collect();
    if let Some(c) = counter {
        for _ in 0..attn.wk.len() + attn.wv.len() {
            c.add_projection(s, d, head_dim);
        }
    }

    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut q = Vec::with_capacity(attn.n_heads());
    let mut probs = Vec::with_capacity(attn.n_heads());
    let mut concat = Matrix::zeros(s, d);
    for head in 0..attn.n_heads() {
        let qh = h.matmul(&attn.wq[head]).expect("query shape");
        let kh = &k[attn.key_slot(head)];
        let vh = &v[attn.value_slot(head)];
        let mut scores = qh.matmul_nt(kh).expect("score shape");
        scores.scale(scale);
        softmax_rows_in_place(&mut scores);
        let out = scores.matmul(vh).expect("context shape");
        if let Some(c) = counter {
            c.add_projection(s, d, head_dim);
            c.add_attention(s, head_dim, s);
            c.add_attention(s, s, head_dim);
        }
        concat.set_column_block(head * head_dim, &out);
        q.push(qh);
        probs.push(scores);
    }
    let attn_out = concat.matmul(&attn.wo).expect("output projection shape");
    if let Some(c) = counter {
        c.add_projection(s, d, d);
    }
    let mut x_mid = x.clone();
    x_mid.add_assign(&attn_out).expect("residual shape");

    let (h2, ln2) = layer_norm(&x_mid, &block.ln2);
    let mut pre_act = h2.matmul(&block.mlp.w1).expect("mlp shape");
    add_row_bias(&mut pre_act, &block.mlp.b1);
    let act = pre_act.map(gelu);
    let mut mlp_out = act.matmul(&block.mlp.w2).expect("mlp shape");
    add_row_bias(&mut mlp_out, &block.mlp.b2);
    let mut x_out = x_mid;
    x_out.add_assign(&mlp_out).expect("residual shape");

    (
        x_out,
        BlockCache {
            ln1,
            h,
            q,
            k,
            v,
            probs,
            concat,
            ln2,
            h2,
            pre_act,
            act,
        },
    )
}

pub(crate) fn check_batch(ckpt: &Checkpoint, batch: &[Vec<usize>]) -> Result<()> {
    if batch.is_empty() {
        return Err(GqaError::Input("empty batch".into()));
    }
    let c = &ckpt.config;
    for (i, seq) in batch.iter().enumerate() {
        if seq.is_empty() || seq.len() > c.max_seq_len {
            return Err(GqaError::Input(format!(
                "sequence {i} has length {} (max {})",
                seq.len(),
                c.max_seq_len
            )));
        }
        if let Some(&t) = seq.iter().find(|&&t| t >= c.vocab_size) {
            return Err(GqaError::Input(format!(
                "token {t} in sequence {i} is outside the vocabulary of {}",
                c.vocab_size
            )));
        }
    }
    Ok(())
}

pub(crate) fn example_forward(ckpt: &Checkpoint, tokens: &[usize], counter: Option<&MacCounter>) -> ExampleCache {
    let w = &ckpt.weights;
    let mut x = embed(ckpt, tokens);
    let mut blocks = Vec::with_capacity(w.blocks.len());
    for block in &w.blocks {
        let (next, cache) = block_forward(block, &x, ckpt.config.head_dim, counter);
        blocks.push(cache);
        x = next;
    }
    let (hf, final_ln) = layer_norm(&x, &w.final_norm);
    let s = tokens.len() as f64;
    let mut pooled = Matrix::zeros(1, hf.cols());
    for i in 0..hf.rows() {
        for (p, &v) in pooled.as_mut_slice().iter_mut().zip(hf.row(i)) {
            *p += v / s;
        }
    }
    let mut logits = pooled.matmul(&w.classifier).expect("classifier shape");
    add_row_bias(&mut logits, &w.classifier_bias);
    ExampleCache {
        tokens: tokens.to_vec(),
        blocks,
        final_ln,
        pooled,
        logits: logits.into_vec(),
    }
}

/// Residual stream entering block `layer` for one sequence.
pub(crate) fn hidden_before(ckpt: &Checkpoint, tokens: &[usize], layer: usize) -> Matrix {
    let mut x = embed(ckpt, tokens);
    for b in &ckpt.weights.blocks[..layer] {
        x = block_forward(b, &x, ckpt.config.head_dim, None).0;
    }
    x
}

/// Logits from the residual stream entering block `start`, with that block
/// optionally replaced.
pub(crate) fn logits_from(ckpt: &Checkpoint, x: &Matrix, start: usize, replacement: Option<&BlockWeights>) -> Vec<f64> {
    let w = &ckpt.weights;
    let dh = ckpt.config.head_dim;
    let mut x = match replacement {
        Some(b) => block_forward(b, x, dh, None).0,
        None => block_forward(&w.blocks[start], x, dh, None).0,
    };
    for b in &w.blocks[start + 1..] {
        x = block_forward(b, &x, dh, None).0;
    }
    head_logits(ckpt, &x)
}

fn head_logits(ckpt: &Checkpoint, x: &Matrix) -> Vec<f64> {
    let w = &ckpt.weights;
    let (hf, _) = layer_norm(x, &w.final_norm);
    let s = x.rows() as f64;
    let mut pooled = Matrix::zeros(1, hf.cols());
    for i in 0..hf.rows() {
        for (p, &v) in pooled.as_mut_slice().iter_mut().zip(hf.row(i)) {
            *p += v / s;
        }
    }
    let mut logits = pooled.matmul(&w.classifier).expect("classifier shape");
    add_row_bias(&mut logits, &w.classifier_bias);
    logits.into_vec()
}

pub struct ForwardOutput {
    /// `batch × n_classes`.
    pub logits: Matrix,
    pub(crate) caches: Vec<ExampleCache>,
}

/// Full forward pass keeping the intermediates needed by [`super::backward`].
pub fn forward(ckpt: &Checkpoint, batch: &[Vec<usize>]) -> Result<ForwardOutput> {
    check_batch(ckpt, batch)?;
    let caches: Vec<ExampleCache> = batch.iter().map(|t| example_forward(ckpt, t, None)).collect();
    let logits = stack_logits(&caches, ckpt.config.n_classes);
    Ok(ForwardOutput { logits, caches })
}

/// Logits only; optionally counts attention MACs.
pub fn predict(ckpt: &Checkpoint, batch: &[Vec<usize>], counter: Option<&MacCounter>) -> Result<Matrix> {
    check_batch(ckpt, batch)?;
    let n_classes = ckpt.config.n_classes;
    let mut logits = Matrix::zeros(batch.len(), n_classes);
    for (i, t) in batch.iter().enumerate() {
        let cache = example_forward(ckpt, t, counter);
        logits.row_mut(i).copy_from_slice(&cache.logits);
    }
    Ok(logits)
}

fn stack_logits(caches: &[ExampleCache], n_classes: usize) -> Matrix {
    let mut logits = Matrix::zeros(caches.len(), n_classes);
    for (i, c) in caches.iter().enumerate() {
        logits.row_mut(i).copy_from_slice(&c.logits);
    }
    logits
}

/// Per-head key and value projection outputs of one layer, rows flattened
/// over (example, position).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCapture {
    pub layer_index: usize,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    /// Groupings of the layers before `layer_index` at capture time.
    pub upstream: Vec<Option<KvGrouping>>,
}

impl ActivationCapture {
    pub fn projection(&self, projection: Projection) -> &[Matrix] {
        match projection {
            Projection::Key => &self.keys,
            Projection::Value => &self.values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.keys.first().map_or(0, Matrix::rows)
    }
}

/// Runs the layers before `layer_index` as they currently stand (merged or
/// not) and records every head's key and value projection outputs at
/// `layer_index`.
pub fn capture_activations(ckpt: &Checkpoint, batch: &[Vec<usize>], layer_index: usize) -> Result<ActivationCapture> {
    if layer_index >= ckpt.n_layers() {
        return Err(GqaError::Input(format!(
            "layer {layer_index} out of range for {} layers",
            ckpt.n_layers()
        )));
    }
    check_batch(ckpt, batch)?;
    let c = &ckpt.config;
    let n_rows: usize = batch.iter().map(Vec::len).sum();
    let block = &ckpt.weights.blocks[layer_index];
    let mut keys = vec![Matrix::zeros(n_rows, c.head_dim); c.n_heads];
    let mut values = vec![Matrix::zeros(n_rows, c.head_dim); c.n_heads];
    let mut row = 0;
    for tokens in batch {
        let mut x = embed(ckpt, tokens);
        for b in &ckpt.weights.blocks[..layer_index] {
            x = block_forward(b, &x, c.head_dim, None).0;
        }
        let (h, _) = layer_norm(&x, &block.ln1);
        for head in 0..c.n_heads {
            let kh = h.matmul(block.attn.head_key(head))?;
            let vh = h.matmul(block.attn.head_value(head))?;
            for s in 0..tokens.len() {
                keys[head].row_mut(row + s).copy_from_slice(kh.row(s));
                values[head].row_mut(row + s).copy_from_slice(vh.row(s));
            }
        }
        row += tokens.len();
    }
    Ok(ActivationCapture {
        layer_index,
        keys,
        values,
        upstream: ckpt.weights.blocks[..layer_index]
            .iter()
            .map(|b| b.attn.kv.clone())
            .collect(),
    })
}
