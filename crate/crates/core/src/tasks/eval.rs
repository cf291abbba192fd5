use crate::error::{GqaError, Result};
use crate::grouping::{AccuracyOracle, HeadGrouping};
use crate::merge::merge_projection;
use crate::model::forward::{hidden_before, logits_from};
use crate::model::{predict, Checkpoint, Projection};
use crate::Matrix;

use super::data::{Dataset, Split};

const EVAL_CHUNK: usize = 256;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of examples whose arg-max logit (lowest class index on ties)
/// matches the label.
pub fn evaluate(ckpt: &Checkpoint, dataset: &Dataset, split: Split) -> Result<f64> {
    dataset.check_compatible(&ckpt.config)?;
    let idx = dataset.split_indices(split);
    if idx.is_empty() {
        return Err(GqaError::Input(format!("split {split:?} is empty")));
    }
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| dataset.inputs[i].clone()).collect();
        let logits = predict(ckpt, &batch, None)?;
        for (r, &i) in chunk.iter().enumerate() {
            if argmax(logits.row(r)) == dataset.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Oracle-split accuracy of a model whose layer `layer_index` has one
/// projection regrouped. Holds its own copy of the model and of the
/// residual stream entering that layer, so calls never touch the caller's
/// checkpoint.
pub struct SearchOracle {
    base: Checkpoint,
    layer_index: usize,
    projection: Projection,
    hidden: Vec<Matrix>,
    labels: Vec<usize>,
}

impl SearchOracle {
    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn projection(&self) -> Projection {
        self.projection
    }
}

impl AccuracyOracle for SearchOracle {
    fn accuracy(&self, grouping: &HeadGrouping) -> Result<f64> {
        let mut block = self.base.weights.blocks[self.layer_index].clone();
        block.attn = merge_projection(&block.attn, self.projection, grouping)?;
        let correct = self
            .hidden
            .iter()
            .zip(&self.labels)
            .filter(|(x, &y)| argmax(&logits_from(&self.base, x, self.layer_index, Some(&block))) == y)
            .count();
        Ok(correct as f64 / self.labels.len() as f64)
    }
}

pub fn make_search_oracle(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    layer_index: usize,
    projection: Projection,
) -> Result<SearchOracle> {
    if layer_index >= ckpt.n_layers() {
        return Err(GqaError::Input(format!(
            "layer {layer_index} out of range for {} layers",
            ckpt.n_layers()
        )));
    }
    dataset.check_compatible(&ckpt.config)?;
    let (inputs, labels) = dataset.examples(Split::Oracle);
    if inputs.is_empty() {
        return Err(GqaError::Input("oracle split is empty".into()));
    }
    let hidden = inputs.iter().map(|t| hidden_before(ckpt, t, layer_index)).collect();
    Ok(SearchOracle {
        base: ckpt.clone(),
        layer_index,
        projection,
        hidden,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::{merge_heads, LayerGroupingPlan};
    use crate::model::{init_model, ModelConfig};
    use crate::tasks::{gen_dataset, TaskKind, TaskSpec};

    fn setup() -> (Checkpoint, Dataset) {
        let spec = TaskSpec {
            task: TaskKind::FirstLastMatch,
            seq_len: 5,
            vocab_size: 6,
            n_train: 20,
            n_val: 60,
            n_test: 20,
        };
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 4,
            head_dim: 2,
            d_model: 8,
            mlp_hidden: 6,
            vocab_size: 6,
            max_seq_len: 5,
            n_classes: 2,
        };
        (init_model(&cfg, 3).unwrap(), gen_dataset(&spec, 4).unwrap())
    }

    #[test]
    fn singleton_oracle_matches_evaluate() {
        let (ckpt, ds) = setup();
        let oracle = make_search_oracle(&ckpt, &ds, 1, Projection::Key).unwrap();
        let acc = oracle.accuracy(&HeadGrouping::singletons(4)).unwrap();
        assert_eq!(acc, evaluate(&ckpt, &ds, Split::Oracle).unwrap());
    }

    #[test]
    fn oracle_matches_convert_then_evaluate() {
        let (ckpt, ds) = setup();
        let g = HeadGrouping::from_groups(vec![vec![0, 3], vec![1, 2]]).unwrap();
        for projection in [Projection::Key, Projection::Value] {
            let oracle = make_search_oracle(&ckpt, &ds, 0, projection).unwrap();
            let plan = match projection {
                Projection::Key => LayerGroupingPlan {
                    layer_index: 0,
                    key_grouping: g.clone(),
                    value_grouping: HeadGrouping::singletons(4),
                },
                Projection::Value => LayerGroupingPlan {
                    layer_index: 0,
                    key_grouping: HeadGrouping::singletons(4),
                    value_grouping: g.clone(),
                },
            };
            let mut conv = ckpt.clone();
            conv.weights.blocks[0].attn = merge_heads(ckpt.layer(0), &plan).unwrap();
            assert_eq!(oracle.accuracy(&g).unwrap(), evaluate(&conv, &ds, Split::Oracle).unwrap());
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }
}
