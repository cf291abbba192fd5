use crate::error::{GqaError, Result};
use crate::Matrix;

use super::forward::{forward, gelu_grad, BlockCache, ExampleCache, LnCache};
use super::{BlockWeights, Checkpoint, LayerNormWeights, Weights};

/// Gradient tensors laid out exactly like the model weights. Shared
/// key/value tensors receive the summed contribution of every head that
/// reads them.
pub type Gradients = Weights;

/// Mean cross-entropy over the batch and its gradient for every tensor.
pub fn backward(ckpt: &Checkpoint, batch: &[Vec<usize>], labels: &[usize]) -> Result<(f64, Gradients)> {
    let out = forward(ckpt, batch)?;
    if labels.len() != batch.len() {
        return Err(GqaError::Input(format!(
            "{} labels for {} sequences",
            labels.len(),
            batch.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= ckpt.config.n_classes) {
        return Err(GqaError::Input(format!(
            "label {y} outside {} classes",
            ckpt.config.n_classes
        )));
    }
    let mut grads = ckpt.weights.zeros_like();
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (cache, &y) in out.caches.iter().zip(labels) {
        loss += example_backward(ckpt, cache, y, inv_b, &mut grads);
    }
    Ok((loss * inv_b, grads))
}

fn layer_norm_backward(dy: &Matrix, cache: &LnCache, w: &LayerNormWeights, dw: &mut LayerNormWeights) -> Matrix {
    let (n, d) = dy.shape();
    let g = w.gain.as_slice();
    let mut dx = Matrix::zeros(n, d);
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let dgain = dw.gain.as_mut_slice();
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
        }
        let dbias = dw.bias.as_mut_slice();
        for j in 0..d {
            dbias[j] += dyr[j];
        }
        let dxhat: Vec<f64> = (0..d).map(|j| dyr[j] * g[j]).collect();
        let mean = dxhat.iter().sum::<f64>() / d as f64;
        let mean_x = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = is * (dxhat[j] - mean - xh[j] * mean_x);
        }
    }
    dx
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    dst.add_assign(src).expect("gradient shape");
}

fn sum_rows_into(dst: &mut Matrix, src: &Matrix) {
    let d = dst.as_mut_slice();
    for i in 0..src.rows() {
        for (a, &b) in d.iter_mut().zip(src.row(i)) {
            *a += b;
        }
    }
}

fn block_backward(block: &BlockWeights, cache: &BlockCache, dx_out: Matrix, head_dim: usize, grad: &mut BlockWeights) -> Matrix {
    let attn = &block.attn;
    let mlp = &block.mlp;

    // MLP branch
    let dmlp = &dx_out;
    add_into(&mut grad.mlp.w2, &cache.act.matmul_tn(dmlp).expect("shape"));
    sum_rows_into(&mut grad.mlp.b2, dmlp);
    let mut dpre = dmlp.matmul_nt(&mlp.w2).expect("shape");
    for (g, &u) in dpre.as_mut_slice().iter_mut().zip(cache.pre_act.as_slice()) {
        *g *= gelu_grad(u);
    }
    add_into(&mut grad.mlp.w1, &cache.h2.matmul_tn(&dpre).expect("shape"));
    sum_rows_into(&mut grad.mlp.b1, &dpre);
    let dh2 = dpre.matmul_nt(&mlp.w1).expect("shape");
    let mut dx_mid = dx_out;
    add_into(&mut dx_mid, &layer_norm_backward(&dh2, &cache.ln2, &block.ln2, &mut grad.ln2));

    // Attention branch
    add_into(&mut grad.attn.wo, &cache.concat.matmul_tn(&dx_mid).expect("shape"));
    let dconcat = dx_mid.matmul_nt(&attn.wo).expect("shape");
    let scale = 1.0 / (head_dim as f64).sqrt();
    let (s, _) = cache.h.shape();
    let mut dk: Vec<Matrix> = cache.k.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let mut dv: Vec<Matrix> = cache.v.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let mut dh = Matrix::zeros(s, cache.h.cols());
    for head in 0..attn.n_heads() {
        let ks = attn.key_slot(head);
        let vs = attn.value_slot(head);
        let probs = &cache.probs[head];
        let dout = dconcat.column_block(head * head_dim, head_dim);
        let dprobs = dout.matmul_nt(&cache.v[vs]).expect("shape");
        add_into(&mut dv[vs], &probs.matmul_tn(&dout).expect("shape"));
        let mut dscores = Matrix::zeros(s, s);
        for r in 0..s {
            let p = probs.row(r);
            let dp = dprobs.row(r);
            let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
            for (o, (&pv, &dpv)) in dscores.row_mut(r).iter_mut().zip(p.iter().zip(dp)) {
                *o = pv * (dpv - inner) * scale;
            }
        }
        let dq = dscores.matmul(&cache.k[ks]).expect("shape");
        add_into(&mut dk[ks], &dscores.matmul_tn(&cache.q[head]).expect("shape"));
        add_into(&mut grad.attn.wq[head], &cache.h.matmul_tn(&dq).expect("shape"));
        add_into(&mut dh, &dq.matmul_nt(&attn.wq[head]).expect("shape"));
    }
    for (slot, dkg) in dk.iter().enumerate() {
        add_into(&mut grad.attn.wk[slot], &cache.h.matmul_tn(dkg).expect("shape"));
        add_into(&mut dh, &dkg.matmul_nt(&attn.wk[slot]).expect("shape"));
    }
    for (slot, dvg) in dv.iter().enumerate() {
        add_into(&mut grad.attn.wv[slot], &cache.h.matmul_tn(dvg).expect("shape"));
        add_into(&mut dh, &dvg.matmul_nt(&attn.wv[slot]).expect("shape"));
    }
    let mut dx_in = dx_mid;
    add_into(&mut dx_in, &layer_norm_backward(&dh, &cache.ln1, &block.ln1, &mut grad.ln1));
    dx_in
}

/// Accumulates `weight ×` the example's gradient into `grads`; returns the
/// example's loss.
fn example_backward(ckpt: &Checkpoint, cache: &ExampleCache, label: usize, weight: f64, grads: &mut Gradients) -> f64 {
    let w = &ckpt.weights;
    let logits = &cache.logits;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(exps[label] / z).ln();

    let mut dlogits = Matrix::zeros(1, logits.len());
    for (c, e) in exps.iter().enumerate() {
        let p = e / z;
        dlogits[(0, c)] = weight * (p - if c == label { 1.0 } else { 0.0 });
    }
    add_into(&mut grads.classifier, &cache.pooled.matmul_tn(&dlogits).expect("shape"));
    add_into(&mut grads.classifier_bias, &dlogits);
    let dpooled = dlogits.matmul_nt(&w.classifier).expect("shape");

    let s = cache.tokens.len();
    let d = dpooled.cols();
    let mut dhf = Matrix::zeros(s, d);
    for i in 0..s {
        for (o, &g) in dhf.row_mut(i).iter_mut().zip(dpooled.as_slice()) {
            *o = g / s as f64;
        }
    }
    let mut dx = layer_norm_backward(&dhf, &cache.final_ln, &w.final_norm, &mut grads.final_norm);
    for (l, block) in w.blocks.iter().enumerate().rev() {
        dx = block_backward(block, &cache.blocks[l], dx, ckpt.config.head_dim, &mut grads.blocks[l]);
    }
    for (pos, &t) in cache.tokens.iter().enumerate() {
        let g = dx.row(pos);
        for (o, &v) in grads.embedding.row_mut(t).iter_mut().zip(g) {
            *o += v;
        }
        for (o, &v) in grads.positional.row_mut(pos).iter_mut().zip(g) {
            *o += v;
        }
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn label_checks() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            head_dim: 2,
            d_model: 4,
            mlp_hidden: 4,
            vocab_size: 5,
            max_seq_len: 4,
            n_classes: 2,
        };
        let ckpt = init_model(&cfg, 0).unwrap();
        assert!(backward(&ckpt, &[vec![1, 2]], &[2]).is_err());
        assert!(backward(&ckpt, &[vec![1, 2]], &[0, 1]).is_err());
        let (loss, g) = backward(&ckpt, &[vec![1, 2]], &[1]).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert!(g.is_finite());
    }
}
