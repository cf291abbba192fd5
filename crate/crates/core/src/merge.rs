//! MHA → GQA conversion by averaging grouped key/value projections, and the
//! sequential layer-by-layer conversion pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{GqaError, Result};
use crate::grouping::{
    asymmetric_search_with, brute_force_search, neighbour_grouping, symmetric_search_with, HeadGrouping,
    SearchConfig, SearchResult, SimilarityFeed,
};
use crate::model::{capture_activations, AttentionLayerWeights, Checkpoint, KvGrouping, Projection};
use crate::numerics::{derive_seed, Rng};
use crate::similarity::{similarity_matrix, SimilarityMetric};
use crate::tasks::{make_search_oracle, Dataset};
use crate::{Matrix, SimilarityMatrix};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroupingPlan {
    pub layer_index: usize,
    pub key_grouping: HeadGrouping,
    pub value_grouping: HeadGrouping,
}

impl LayerGroupingPlan {
    /// Same grouping for keys and values.
    pub fn uniform(layer_index: usize, grouping: HeadGrouping) -> Self {
        Self {
            layer_index,
            key_grouping: grouping.clone(),
            value_grouping: grouping,
        }
    }
}

fn group_means(per_head: &[&Matrix], grouping: &HeadGrouping, slots: &[usize]) -> Vec<Matrix> {
    grouping
        .groups()
        .iter()
        .map(|members| {
            // A group that already reads one stored tensor keeps it bit for bit.
            if members.iter().all(|&h| slots[h] == slots[members[0]]) {
                return per_head[members[0]].clone();
            }
            let mut acc = per_head[members[0]].clone();
            for &h in &members[1..] {
                acc.add_assign(per_head[h]).expect("projection shapes agree");
            }
            let n = members.len() as f64;
            acc.as_mut_slice().iter_mut().for_each(|v| *v /= n);
            acc
        })
        .collect()
}

/// Replaces the key (value) projections of every key (value) group by their
/// elementwise mean, stored once per group. Query and output projections are
/// untouched. Layers that are already grouped are read through their current
/// head → group maps, so merging again with the same plan is a no-op.
pub fn merge_heads(layer: &AttentionLayerWeights, plan: &LayerGroupingPlan) -> Result<AttentionLayerWeights> {
    let h = layer.n_heads();
    for (name, g) in [("key", &plan.key_grouping), ("value", &plan.value_grouping)] {
        if g.n_heads() != h {
            return Err(GqaError::Grouping(format!(
                "{name} grouping covers {} heads, layer has {h}",
                g.n_heads()
            )));
        }
    }
    let keys: Vec<&Matrix> = (0..h).map(|i| layer.head_key(i)).collect();
    let values: Vec<&Matrix> = (0..h).map(|i| layer.head_value(i)).collect();
    let key_slots: Vec<usize> = (0..h).map(|i| layer.key_slot(i)).collect();
    let value_slots: Vec<usize> = (0..h).map(|i| layer.value_slot(i)).collect();
    Ok(AttentionLayerWeights {
        wq: layer.wq.clone(),
        wk: group_means(&keys, &plan.key_grouping, &key_slots),
        wv: group_means(&values, &plan.value_grouping, &value_slots),
        wo: layer.wo.clone(),
        kv: Some(KvGrouping {
            key: plan.key_grouping.clone(),
            value: plan.value_grouping.clone(),
        }),
    })
}

/// Merges one projection of a layer, keeping the other projection's current
/// grouping.
pub fn merge_projection(
    layer: &AttentionLayerWeights,
    projection: Projection,
    grouping: &HeadGrouping,
) -> Result<AttentionLayerWeights> {
    let (key_grouping, value_grouping) = match projection {
        Projection::Key => (grouping.clone(), layer.value_grouping()),
        Projection::Value => (layer.key_grouping(), grouping.clone()),
    };
    merge_heads(
        layer,
        &LayerGroupingPlan {
            layer_index: 0,
            key_grouping,
            value_grouping,
        },
    )
}

/// Applies one plan per layer.
pub fn convert_model(ckpt: &Checkpoint, plans: &[LayerGroupingPlan]) -> Result<Checkpoint> {
    let n = ckpt.n_layers();
    let mut by_layer: Vec<Option<&LayerGroupingPlan>> = vec![None; n];
    for p in plans {
        if p.layer_index >= n {
            return Err(GqaError::Plan(format!("plan for layer {} but model has {n} layers", p.layer_index)));
        }
        if by_layer[p.layer_index].replace(p).is_some() {
            return Err(GqaError::Plan(format!("duplicate plan for layer {}", p.layer_index)));
        }
    }
    let mut out = ckpt.clone();
    for (l, plan) in by_layer.into_iter().enumerate() {
        let plan = plan.ok_or_else(|| GqaError::Plan(format!("no plan for layer {l}")))?;
        out.weights.blocks[l].attn = merge_heads(ckpt.layer(l), plan)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Adjacent heads, no search.
    Ng,
    /// Equal-size similarity-guided search.
    Sg,
    /// Varied-size similarity-guided search with a fixed group count.
    Ag,
    /// Exhaustive search over equal-size partitions.
    Brute,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ng => "ng",
            Strategy::Sg => "sg",
            Strategy::Ag => "ag",
            Strategy::Brute => "brute",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = GqaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ng" => Ok(Strategy::Ng),
            "sg" => Ok(Strategy::Sg),
            "ag" => Ok(Strategy::Ag),
            "brute" => Ok(Strategy::Brute),
            other => Err(GqaError::Config(format!("unknown strategy `{other}` (ng, sg, ag, brute)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvertConfig {
    pub strategy: Strategy,
    pub search: SearchConfig,
    pub metric: SimilarityMetric,
    /// Recompute the similarity matrix at the start of every search
    /// iteration instead of once per layer.
    pub per_iteration_similarity: bool,
    /// Number of training sequences whose activations feed the similarity.
    pub calibration_size: usize,
    pub calibration_seed: u64,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ag,
            search: SearchConfig::default(),
            metric: SimilarityMetric::Activation,
            per_iteration_similarity: false,
            calibration_size: 8,
            calibration_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub projection: Projection,
    pub grouping: HeadGrouping,
    pub search: Option<SearchResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_index: usize,
    /// Whether each earlier layer was already grouped when this layer's
    /// activations were captured.
    pub upstream_merged: Vec<bool>,
    pub key: ProjectionReport,
    pub value: ProjectionReport,
    pub kv_params_before: usize,
    pub kv_params_after: usize,
}

impl LayerReport {
    pub fn plan(&self) -> LayerGroupingPlan {
        LayerGroupingPlan {
            layer_index: self.layer_index,
            key_grouping: self.key.grouping.clone(),
            value_grouping: self.value.grouping.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub strategy: Strategy,
    pub metric: SimilarityMetric,
    pub group_size: usize,
    pub layers: Vec<LayerReport>,
    pub params_before: usize,
    pub params_after: usize,
    pub attention_params_before: usize,
    pub attention_params_after: usize,
    pub oracle_calls: usize,
}

impl ConversionReport {
    pub fn plans(&self) -> Vec<LayerGroupingPlan> {
        self.layers.iter().map(LayerReport::plan).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conversion {
    pub checkpoint: Checkpoint,
    pub report: ConversionReport,
}

/// Fixed calibration sequences drawn from the training split.
pub fn calibration_batch(dataset: &Dataset, size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let train = &dataset.splits.train;
    if size == 0 || train.is_empty() {
        return Err(GqaError::Config("calibration batch needs >= 1 training sequence".into()));
    }
    let mut rng = Rng::derived(seed, &[0xca1]);
    let order = rng.permutation(train.len());
    Ok(order
        .iter()
        .take(size.min(train.len()))
        .map(|&i| dataset.inputs[train[i]].clone())
        .collect())
}

fn weight_heads(layer: &AttentionLayerWeights, projection: Projection) -> Vec<Matrix> {
    (0..layer.n_heads())
        .map(|h| layer.head_projection(h, projection).clone())
        .collect()
}

fn layer_similarity(
    ckpt: &Checkpoint,
    layer: usize,
    projection: Projection,
    metric: SimilarityMetric,
    calibration: &[Vec<usize>],
) -> Result<(SimilarityMatrix, Vec<bool>)> {
    match metric {
        SimilarityMetric::Activation => {
            let cap = capture_activations(ckpt, calibration, layer)?;
            let upstream = cap.upstream.iter().map(Option::is_some).collect();
            Ok((similarity_matrix(cap.projection(projection), metric)?, upstream))
        }
        SimilarityMetric::Weight => {
            let upstream = ckpt.weights.blocks[..layer].iter().map(|b| b.attn.kv.is_some()).collect();
            Ok((similarity_matrix(&weight_heads(ckpt.layer(layer), projection), metric)?, upstream))
        }
    }
}

fn search_projection(
    ckpt: &Checkpoint,
    layer: usize,
    projection: Projection,
    cfg: &ConvertConfig,
    dataset: &Dataset,
    calibration: &[Vec<usize>],
) -> Result<(SearchResult, Vec<bool>)> {
    let h = ckpt.config.n_heads;
    let oracle = make_search_oracle(ckpt, dataset, layer, projection)?;
    let mut search = cfg.search.clone();
    search.seed = derive_seed(cfg.search.seed, &[layer as u64, projection.tag()]);
    if cfg.strategy == Strategy::Brute {
        let upstream = ckpt.weights.blocks[..layer].iter().map(|b| b.attn.kv.is_some()).collect();
        return Ok((brute_force_search(&oracle, h, search.group_size)?, upstream));
    }
    let (sim, upstream) = layer_similarity(ckpt, layer, projection, cfg.metric, calibration)?;
    let mut recompute = |_: usize| layer_similarity(ckpt, layer, projection, cfg.metric, calibration).map(|r| r.0);
    let feed = if cfg.per_iteration_similarity {
        SimilarityFeed::PerIteration {
            n_heads: h,
            compute: &mut recompute,
        }
    } else {
        SimilarityFeed::Fixed(&sim)
    };
    let result = match cfg.strategy {
        Strategy::Sg => symmetric_search_with(feed, &oracle, &search)?,
        Strategy::Ag => asymmetric_search_with(feed, &oracle, &search)?,
        Strategy::Ng | Strategy::Brute => unreachable!(),
    };
    Ok((result, upstream))
}

fn kv_params(layer: &AttentionLayerWeights) -> usize {
    layer.wk.iter().chain(&layer.wv).map(Matrix::len).sum()
}

/// Converts every layer in order, from the first to the last. Each layer's
/// similarity and oracle see the earlier layers already merged; keys are
/// grouped first, then values (with this layer's keys merged). `NG` needs
/// no dataset and makes no oracle calls.
pub fn group_and_convert(ckpt: &Checkpoint, cfg: &ConvertConfig, dataset: Option<&Dataset>) -> Result<Conversion> {
    ckpt.validate()?;
    let h = ckpt.config.n_heads;
    let m = cfg.search.group_size;
    cfg.search.validate(h)?;
    let calibration = match (cfg.strategy, dataset) {
        (Strategy::Ng, _) => Vec::new(),
        (_, None) => {
            return Err(GqaError::Config(format!(
                "strategy {} needs a dataset",
                cfg.strategy.name()
            )))
        }
        (_, Some(ds)) => {
            ds.check_compatible(&ckpt.config)?;
            if cfg.metric == SimilarityMetric::Activation && cfg.strategy != Strategy::Brute {
                calibration_batch(ds, cfg.calibration_size, cfg.calibration_seed)?
            } else {
                Vec::new()
            }
        }
    };

    let mut current = ckpt.clone();
    let mut layers = Vec::with_capacity(ckpt.n_layers());
    let mut oracle_calls = 0;
    for l in 0..ckpt.n_layers() {
        let kv_before = kv_params(current.layer(l));
        let mut reports = Vec::with_capacity(2);
        let mut upstream_merged = current.weights.blocks[..l].iter().map(|b| b.attn.kv.is_some()).collect();
        for projection in [Projection::Key, Projection::Value] {
            let (grouping, search) = match (cfg.strategy, dataset) {
                (Strategy::Ng, _) => (neighbour_grouping(h, m)?, None),
                (_, Some(ds)) => {
                    let (result, upstream) = search_projection(&current, l, projection, cfg, ds, &calibration)?;
                    if projection == Projection::Key {
                        upstream_merged = upstream;
                    }
                    oracle_calls += result.oracle_calls;
                    (result.best_grouping.clone(), Some(result))
                }
                (_, None) => unreachable!(),
            };
            current.weights.blocks[l].attn = merge_projection(current.layer(l), projection, &grouping)?;
            reports.push(ProjectionReport {
                projection,
                grouping,
                search,
            });
        }
        let value = reports.pop().expect("value report");
        let key = reports.pop().expect("key report");
        layers.push(LayerReport {
            layer_index: l,
            upstream_merged,
            key,
            value,
            kv_params_before: kv_before,
            kv_params_after: kv_params(current.layer(l)),
        });
    }
    let report = ConversionReport {
        strategy: cfg.strategy,
        metric: cfg.metric,
        group_size: m,
        layers,
        params_before: ckpt.param_count(),
        params_after: current.param_count(),
        attention_params_before: ckpt.attention_param_count(),
        attention_params_after: current.attention_param_count(),
        oracle_calls,
    };
    Ok(Conversion {
        checkpoint: current,
        report,
    })
}
