//! Versioned JSON checkpoints.
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "config": { ... },
//!   "kv_grouping": [ {"key": [[0,1],[2,3]], "value": [[0],[1],[2],[3]]}, ... ],
//!   "tensors": { "<name>": {"shape": [rows, cols], "data": [...]}, ... }
//! }
//! ```
//!
//! `kv_grouping` is absent for a model that was never converted.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GqaError, Result};
use crate::Matrix;

use super::{AttentionLayerWeights, BlockWeights, Checkpoint, KvGrouping, LayerNormWeights, MlpWeights, ModelConfig, Weights};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kv_grouping: Option<Vec<KvGrouping>>,
    tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let tensors = self
            .weights
            .named_tensors()
            .into_iter()
            .map(|(name, m)| {
                (
                    name,
                    TensorRecord {
                        shape: [m.rows(), m.cols()],
                        data: m.as_slice().to_vec(),
                    },
                )
            })
            .collect();
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            kv_grouping: self.kv_grouping(),
            tensors,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| GqaError::Checkpoint(format!("not valid JSON: {e}")))?;
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == CHECKPOINT_FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(GqaError::Checkpoint(format!(
                    "unsupported format_version {v} (expected {CHECKPOINT_FORMAT_VERSION})"
                )))
            }
            None => return Err(GqaError::Checkpoint("missing format_version".into())),
        }
        let file: CheckpointFile =
            serde_json::from_value(value).map_err(|e| GqaError::Checkpoint(format!("malformed checkpoint: {e}")))?;
        let ckpt = assemble(file)?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}

fn assemble(mut file: CheckpointFile) -> Result<Checkpoint> {
    let c = file.config.clone();
    c.validate().map_err(|e| GqaError::Checkpoint(e.to_string()))?;
    if let Some(g) = &file.kv_grouping {
        if g.len() != c.n_layers {
            return Err(GqaError::Checkpoint(format!(
                "kv_grouping has {} layers, config has {}",
                g.len(),
                c.n_layers
            )));
        }
    }
    let mut take = |name: String| -> Result<Matrix> {
        let rec = file
            .tensors
            .remove(&name)
            .ok_or_else(|| GqaError::Checkpoint(format!("missing tensor {name}")))?;
        Matrix::from_vec(rec.shape[0], rec.shape[1], rec.data)
            .map_err(|e| GqaError::Checkpoint(format!("tensor {name}: {e}")))
    };
    let ln = |take: &mut dyn FnMut(String) -> Result<Matrix>, prefix: &str| -> Result<LayerNormWeights> {
        Ok(LayerNormWeights {
            gain: take(format!("{prefix}.gain"))?,
            bias: take(format!("{prefix}.bias"))?,
        })
    };

    let embedding = take("embedding".into())?;
    let positional = take("positional".into())?;
    let mut blocks = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        let kv = file.kv_grouping.as_ref().map(|g| g[l].clone());
        let (nk, nv) = kv
            .as_ref()
            .map_or((c.n_heads, c.n_heads), |g| (g.key.n_groups(), g.value.n_groups()));
        let ln1 = ln(&mut take, &format!("blocks.{l}.ln1"))?;
        let wq = (0..c.n_heads)
            .map(|h| take(format!("blocks.{l}.attn.wq.{h}")))
            .collect::<Result<_>>()?;
        let wk = (0..nk)
            .map(|g| take(format!("blocks.{l}.attn.wk.{g}")))
            .collect::<Result<_>>()?;
        let wv = (0..nv)
            .map(|g| take(format!("blocks.{l}.attn.wv.{g}")))
            .collect::<Result<_>>()?;
        let wo = take(format!("blocks.{l}.attn.wo"))?;
        let ln2 = ln(&mut take, &format!("blocks.{l}.ln2"))?;
        let mlp = MlpWeights {
            w1: take(format!("blocks.{l}.mlp.w1"))?,
            b1: take(format!("blocks.{l}.mlp.b1"))?,
            w2: take(format!("blocks.{l}.mlp.w2"))?,
            b2: take(format!("blocks.{l}.mlp.b2"))?,
        };
        blocks.push(BlockWeights {
            ln1,
            attn: AttentionLayerWeights { wq, wk, wv, wo, kv },
            ln2,
            mlp,
        });
    }
    let final_norm = ln(&mut take, "final_norm")?;
    let classifier = take("classifier.weight".into())?;
    let classifier_bias = take("classifier.bias".into())?;
    drop(take);
    if let Some(extra) = file.tensors.keys().next() {
        return Err(GqaError::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        config: c,
        weights: Weights {
            embedding,
            positional,
            blocks,
            final_norm,
            classifier,
            classifier_bias,
        },
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GqaError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Checkpoint::from_json(&text)
}
