//! Analytic parameter and FLOP counts of the attention layers as a function
//! of the key/value group count.
//!
//! FLOPs are 2 per multiply-accumulate. Counted: Q, K, V and output
//! projections and the score and weighted-value matmuls. Softmax and
//! normalization are not counted.

use serde::{Deserialize, Serialize};

use crate::error::{GqaError, Result};
use crate::model::{Checkpoint, ModelConfig};

/// Number of stored key and value projections in one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerKvCounts {
    pub key_groups: usize,
    pub value_groups: usize,
}

fn uniform_counts(config: &ModelConfig, group_size: usize) -> Result<Vec<LayerKvCounts>> {
    if group_size == 0 || config.n_heads % group_size != 0 {
        return Err(GqaError::Config(format!(
            "group size {group_size} does not divide {} heads",
            config.n_heads
        )));
    }
    let g = config.n_heads / group_size;
    Ok(vec![
        LayerKvCounts {
            key_groups: g,
            value_groups: g
        };
        config.n_layers
    ])
}

fn check_counts(config: &ModelConfig, layers: &[LayerKvCounts]) -> Result<()> {
    if layers.len() != config.n_layers {
        return Err(GqaError::Config(format!(
            "{} layer counts for {} layers",
            layers.len(),
            config.n_layers
        )));
    }
    for c in layers {
        for n in [c.key_groups, c.value_groups] {
            if n == 0 || n > config.n_heads {
                return Err(GqaError::Config(format!("group count {n} outside 1..={}", config.n_heads)));
            }
        }
    }
    Ok(())
}

/// Group counts as stored in a checkpoint.
pub fn kv_counts(ckpt: &Checkpoint) -> Vec<LayerKvCounts> {
    ckpt.weights
        .blocks
        .iter()
        .map(|b| LayerKvCounts {
            key_groups: b.attn.wk.len(),
            value_groups: b.attn.wv.len(),
        })
        .collect()
}

pub fn attention_params_for(config: &ModelConfig, layers: &[LayerKvCounts]) -> Result<u64> {
    check_counts(config, layers)?;
    let (h, d, dh) = (config.n_heads as u64, config.d_model as u64, config.head_dim as u64);
    Ok(layers
        .iter()
        .map(|c| h * d * dh + d * d + (c.key_groups + c.value_groups) as u64 * d * dh)
        .sum())
}

pub fn attention_flops_for(config: &ModelConfig, layers: &[LayerKvCounts], seq_len: usize) -> Result<u64> {
    check_counts(config, layers)?;
    if seq_len == 0 {
        return Err(GqaError::Config("seq_len must be >= 1".into()));
    }
    let (h, d, dh, s) = (
        config.n_heads as u64,
        config.d_model as u64,
        config.head_dim as u64,
        seq_len as u64,
    );
    let macs: u64 = layers
        .iter()
        .map(|c| {
            let kv = (c.key_groups + c.value_groups) as u64;
            let projections = s * d * dh * (h + kv) + s * d * d;
            let attention = 2 * h * s * s * dh;
            projections + attention
        })
        .sum();
    Ok(2 * macs)
}

/// Q, K, V and output projection parameters over all layers at uniform
/// group size.
pub fn attention_params(config: &ModelConfig, group_size: usize) -> Result<u64> {
    attention_params_for(config, &uniform_counts(config, group_size)?)
}

/// Attention FLOPs for one sequence of `seq_len` tokens at uniform group size.
pub fn attention_flops(config: &ModelConfig, group_size: usize, seq_len: usize) -> Result<u64> {
    attention_flops_for(config, &uniform_counts(config, group_size)?, seq_len)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub group_size: usize,
    pub n_kv_groups: usize,
    pub attn_params: u64,
    pub attn_flops_per_token: u64,
    pub relative_params: f64,
    pub relative_flops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

pub const COST_CSV_HEADER: &str = "group_size,n_kv_groups,attn_params,attn_flops_per_token,relative_params,relative_flops";

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{COST_CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.group_size, r.n_kv_groups, r.attn_params, r.attn_flops_per_token, r.relative_params, r.relative_flops
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(COST_CSV_HEADER) {
            return Err(GqaError::Input("cost CSV header mismatch".into()));
        }
        let bad = |line: &str| GqaError::Input(format!("malformed cost row `{line}`"));
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 6 {
                    return Err(bad(line));
                }
                Ok(CostRow {
                    group_size: f[0].parse().map_err(|_| bad(line))?,
                    n_kv_groups: f[1].parse().map_err(|_| bad(line))?,
                    attn_params: f[2].parse().map_err(|_| bad(line))?,
                    attn_flops_per_token: f[3].parse().map_err(|_| bad(line))?,
                    relative_params: f[4].parse().map_err(|_| bad(line))?,
                    relative_flops: f[5].parse().map_err(|_| bad(line))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    /// Two-column `group_size value` text for plotting.
    pub fn to_dat(&self, column: fn(&CostRow) -> f64) -> String {
        self.rows
            .iter()
            .map(|r| format!("{} {}\n", r.group_size, column(r)))
            .collect()
    }
}

/// One row per distinct group size, ascending; relative columns are
/// normalized to group size 1.
pub fn cost_curve(config: &ModelConfig, group_sizes: &[usize], seq_len: usize) -> Result<CostReport> {
    if group_sizes.is_empty() {
        return Err(GqaError::Config("no group sizes given".into()));
    }
    let mut sizes = group_sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let base_params = attention_params(config, 1)? as f64;
    let base_flops = attention_flops(config, 1, seq_len)? as f64;
    let rows = sizes
        .into_iter()
        .map(|g| {
            let params = attention_params(config, g)?;
            let flops = attention_flops(config, g, seq_len)?;
            Ok(CostRow {
                group_size: g,
                n_kv_groups: config.n_heads / g,
                attn_params: params,
                attn_flops_per_token: flops / seq_len as u64,
                relative_params: params as f64 / base_params,
                relative_flops: flops as f64 / base_flops,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CostReport { rows })
}
