//! Weight- vs activation-informed symmetric search against brute force.
//!
//! Two measurements per group size and seed:
//!
//! * stepwise: the brute-force pipeline is the shared context. At every
//!   (layer, projection) step both similarity-guided searches run on the
//!   very oracle brute force enumerates, so their best accuracies are
//!   directly comparable with the exhaustive optimum.
//! * end to end: each method converts the model on its own, then the
//!   converted model is evaluated on the test split before and after
//!   recovery fine-tuning.

use serde::{Deserialize, Serialize};

use crate::error::{GqaError, Result};
use crate::grouping::{brute_force_search, symmetric_search, SearchConfig};
use crate::merge::{calibration_batch, group_and_convert, merge_projection, ConvertConfig, Strategy};
use crate::model::{capture_activations, Checkpoint, Projection};
use crate::numerics::derive_seed;
use crate::similarity::{similarity_matrix, SimilarityMetric};
use crate::tasks::{evaluate, finetune, make_search_oracle, Dataset, Split, TrainConfig};

pub const METHODS: [&str; 3] = ["brute_force", "weight_informed", "activation_informed"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub sizes: Vec<usize>,
    pub seeds: u64,
    /// Search settings; `group_size` is taken from `sizes`.
    pub search: SearchConfig,
    pub calibration_size: usize,
    pub finetune: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub group_size: usize,
    pub seed: u64,
    pub layer_index: usize,
    pub projection: Projection,
    pub brute_force: f64,
    pub weight_informed: f64,
    pub activation_informed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub group_size: usize,
    pub seed: u64,
    pub method: String,
    pub pre_ft: f64,
    pub post_ft: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub group_size: usize,
    pub method: String,
    pub n_seeds: u64,
    pub stepwise_mean: f64,
    pub stepwise_std: f64,
    pub pre_mean: f64,
    pub pre_std: f64,
    pub post_mean: f64,
    pub post_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareOutcome {
    pub steps: Vec<StepRecord>,
    pub runs: Vec<PipelineRecord>,
    pub rows: Vec<CompareRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl CompareOutcome {
    pub fn table_csv(&self) -> String {
        let mut out =
            String::from("group_size,method,n_seeds,stepwise_mean,stepwise_std,pre_ft_mean,pre_ft_std,post_ft_mean,post_ft_std\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.group_size, r.method, r.n_seeds, r.stepwise_mean, r.stepwise_std, r.pre_mean, r.pre_std, r.post_mean, r.post_std
            ));
        }
        out
    }

    pub fn steps_csv(&self) -> String {
        let mut out = String::from("group_size,seed,layer,projection,brute_force,weight_informed,activation_informed\n");
        for s in &self.steps {
            let p = match s.projection {
                Projection::Key => "key",
                Projection::Value => "value",
            };
            out.push_str(&format!(
                "{},{},{},{p},{},{},{}\n",
                s.group_size, s.seed, s.layer_index, s.brute_force, s.weight_informed, s.activation_informed
            ));
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("group_size,seed,method,pre_ft,post_ft\n");
        for r in &self.runs {
            out.push_str(&format!("{},{},{},{},{}\n", r.group_size, r.seed, r.method, r.pre_ft, r.post_ft));
        }
        out
    }
}

fn seed_search(base: &SearchConfig, group_size: usize, seed: u64) -> SearchConfig {
    SearchConfig {
        group_size,
        seed: base.seed.wrapping_add(seed),
        ..base.clone()
    }
}

/// Fine-tunes and evaluates, reusing the result for a checkpoint already
/// fine-tuned with the same seed.
struct FinetuneCache<'a> {
    dataset: &'a Dataset,
    epochs: usize,
    cfg: TrainConfig,
    done: Vec<(Checkpoint, u64, f64)>,
}

impl FinetuneCache<'_> {
    fn post_accuracy(&mut self, ckpt: &Checkpoint, seed: u64) -> Result<f64> {
        if let Some((_, _, acc)) = self.done.iter().find(|(c, s, _)| *s == seed && c == ckpt) {
            return Ok(*acc);
        }
        let cfg = TrainConfig {
            seed: derive_seed(self.cfg.seed, &[seed]),
            ..self.cfg.clone()
        };
        let (tuned, _) = finetune(ckpt, self.dataset, self.epochs, &cfg)?;
        let acc = evaluate(&tuned, self.dataset, Split::Test)?;
        self.done.push((ckpt.clone(), seed, acc));
        Ok(acc)
    }
}

pub fn compare_metrics(ckpt: &Checkpoint, dataset: &Dataset, cfg: &CompareConfig) -> Result<CompareOutcome> {
    ckpt.validate()?;
    dataset.check_compatible(&ckpt.config)?;
    if cfg.seeds == 0 || cfg.sizes.is_empty() {
        return Err(GqaError::Config("compare needs >= 1 seed and >= 1 group size".into()));
    }
    let h = ckpt.config.n_heads;
    for &m in &cfg.sizes {
        seed_search(&cfg.search, m, 0).validate(h)?;
    }
    let calibration = calibration_batch(dataset, cfg.calibration_size, cfg.search.seed)?;
    let mut tuner = FinetuneCache {
        dataset,
        epochs: cfg.finetune.epochs,
        cfg: cfg.finetune.clone(),
        done: Vec::new(),
    };
    let mut steps = Vec::new();
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    let mut sizes = cfg.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();

    for &m in &sizes {
        // Shared brute-force context with both searches at every step.
        let mut current = ckpt.clone();
        let mut size_steps = Vec::new();
        for l in 0..ckpt.n_layers() {
            for projection in [Projection::Key, Projection::Value] {
                let oracle = make_search_oracle(&current, dataset, l, projection)?;
                let brute = brute_force_search(&oracle, h, m)?;
                let weights: Vec<_> = (0..h).map(|i| current.layer(l).head_projection(i, projection).clone()).collect();
                let weight_sim = similarity_matrix(&weights, SimilarityMetric::Weight)?;
                let cap = capture_activations(&current, &calibration, l)?;
                let act_sim = similarity_matrix(cap.projection(projection), SimilarityMetric::Activation)?;
                for seed in 0..cfg.seeds {
                    let mut search = seed_search(&cfg.search, m, seed);
                    search.seed = derive_seed(search.seed, &[l as u64, projection.tag()]);
                    let w = symmetric_search(&weight_sim, &oracle, &search)?;
                    let a = symmetric_search(&act_sim, &oracle, &search)?;
                    size_steps.push(StepRecord {
                        group_size: m,
                        seed,
                        layer_index: l,
                        projection,
                        brute_force: brute.best_acc,
                        weight_informed: w.best_acc,
                        activation_informed: a.best_acc,
                    });
                }
                current.weights.blocks[l].attn = merge_projection(current.layer(l), projection, &brute.best_grouping)?;
            }
        }
        let brute_pre = evaluate(&current, dataset, Split::Test)?;

        let mut size_runs = Vec::new();
        for seed in 0..cfg.seeds {
            size_runs.push(PipelineRecord {
                group_size: m,
                seed,
                method: METHODS[0].into(),
                pre_ft: brute_pre,
                post_ft: tuner.post_accuracy(&current, seed)?,
            });
            for (method, metric) in [(METHODS[1], SimilarityMetric::Weight), (METHODS[2], SimilarityMetric::Activation)] {
                let conv = group_and_convert(
                    ckpt,
                    &ConvertConfig {
                        strategy: Strategy::Sg,
                        search: seed_search(&cfg.search, m, seed),
                        metric,
                        per_iteration_similarity: false,
                        calibration_size: cfg.calibration_size,
                        calibration_seed: cfg.search.seed,
                    },
                    Some(dataset),
                )?;
                size_runs.push(PipelineRecord {
                    group_size: m,
                    seed,
                    method: method.into(),
                    pre_ft: evaluate(&conv.checkpoint, dataset, Split::Test)?,
                    post_ft: tuner.post_accuracy(&conv.checkpoint, seed)?,
                });
            }
        }

        for (k, method) in METHODS.iter().enumerate() {
            let stepwise: Vec<f64> = (0..cfg.seeds)
                .map(|seed| {
                    let mine: Vec<f64> = size_steps
                        .iter()
                        .filter(|s| s.seed == seed)
                        .map(|s| [s.brute_force, s.weight_informed, s.activation_informed][k])
                        .collect();
                    mine.iter().sum::<f64>() / mine.len() as f64
                })
                .collect();
            let pre: Vec<f64> = size_runs.iter().filter(|r| r.method == *method).map(|r| r.pre_ft).collect();
            let post: Vec<f64> = size_runs.iter().filter(|r| r.method == *method).map(|r| r.post_ft).collect();
            let (stepwise_mean, stepwise_std) = mean_std(&stepwise);
            let (pre_mean, pre_std) = mean_std(&pre);
            let (post_mean, post_std) = mean_std(&post);
            rows.push(CompareRow {
                group_size: m,
                method: method.to_string(),
                n_seeds: cfg.seeds,
                stepwise_mean,
                stepwise_std,
                pre_mean,
                pre_std,
                post_mean,
                post_std,
            });
        }
        steps.extend(size_steps);
        runs.extend(size_runs);
    }
    Ok(CompareOutcome { steps, runs, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
