//! Similarity-guided stochastic search over head groupings.
//!
//! Each iteration draws its randomness in a fixed order: reset coin, head
//! `a`, candidate `b`, swap partner from `b`'s group, preserve coin
//! (asymmetric only), acceptance coin. A candidate replaces the current
//! grouping when it beats the best accuracy seen so far or when the
//! acceptance coin fires.

use serde::{Deserialize, Serialize};

use crate::error::{GqaError, Result};
use crate::numerics::{topk_excluding, Rng, Scalar};
use crate::similarity::SimilarityMatrix;

use super::partition::{enumerate_equal_partitions, random_grouping, HeadGrouping};

/// Partition count above which brute force refuses to run.
pub const BRUTE_FORCE_CAP: u64 = 1_000_000;

/// Deterministic, side-effect free accuracy of a candidate grouping.
pub trait AccuracyOracle: Sync {
    fn accuracy(&self, grouping: &HeadGrouping) -> Result<f64>;
}

impl<F> AccuracyOracle for F
where
    F: Fn(&HeadGrouping) -> f64 + Sync,
{
    fn accuracy(&self, grouping: &HeadGrouping) -> Result<f64> {
        Ok(self(grouping))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub n_iters: usize,
    pub group_size: usize,
    pub top_k: usize,
    pub p_acc: f64,
    pub p_reset: f64,
    pub p_preserve: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_iters: 10,
            group_size: 2,
            top_k: 3,
            p_acc: 0.1,
            p_reset: 0.1,
            p_preserve: 0.2,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, n_heads: usize) -> Result<()> {
        if self.n_iters == 0 {
            return Err(GqaError::Config("n_iters must be >= 1".into()));
        }
        if self.top_k == 0 {
            return Err(GqaError::Config("top_k must be >= 1".into()));
        }
        for (name, p) in [("p_acc", self.p_acc), ("p_reset", self.p_reset), ("p_preserve", self.p_preserve)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GqaError::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.group_size == 0 || n_heads % self.group_size != 0 {
            return Err(GqaError::Config(format!(
                "group size {} does not divide {n_heads} heads",
                self.group_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub grouping: HeadGrouping,
    pub accuracy: f64,
    pub accepted: bool,
    pub reset: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_acc: f64,
    pub best_grouping: HeadGrouping,
    pub trace: Vec<TraceEntry>,
    pub oracle_calls: usize,
}

/// Where the search reads head similarities from.
pub enum SimilarityFeed<'a, T = f64> {
    /// Computed once up front.
    Fixed(&'a SimilarityMatrix<T>),
    /// Recomputed at the start of every iteration (argument: iteration index).
    PerIteration {
        n_heads: usize,
        compute: &'a mut dyn FnMut(usize) -> Result<SimilarityMatrix<T>>,
    },
}

impl<T: Scalar> SimilarityFeed<'_, T> {
    fn n_heads(&self) -> usize {
        match self {
            SimilarityFeed::Fixed(s) => s.n_heads(),
            SimilarityFeed::PerIteration { n_heads, .. } => *n_heads,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Symmetric,
    Asymmetric,
}

fn checked_accuracy(oracle: &dyn AccuracyOracle, g: &HeadGrouping) -> Result<f64> {
    let acc = oracle.accuracy(g)?;
    if !acc.is_finite() {
        return Err(GqaError::Oracle(format!("non-finite accuracy {acc} for {g}")));
    }
    Ok(acc)
}

/// Equal-size grouping search: candidates swap head `a` with a member of the
/// group of a similar head, so every visited grouping has uniform size.
pub fn symmetric_search<T: Scalar>(
    sim: &SimilarityMatrix<T>,
    oracle: &dyn AccuracyOracle,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    run_search(SimilarityFeed::Fixed(sim), oracle, cfg, Mode::Symmetric)
}

/// Varied-size grouping search: head `a` moves into the group of a similar
/// head; with probability `p_preserve` a head from that group moves back so
/// sizes are kept. Moves that would empty a group are redrawn, so the number
/// of groups stays fixed at `n_heads / group_size`.
pub fn asymmetric_search<T: Scalar>(
    sim: &SimilarityMatrix<T>,
    oracle: &dyn AccuracyOracle,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    run_search(SimilarityFeed::Fixed(sim), oracle, cfg, Mode::Asymmetric)
}

pub fn symmetric_search_with<T: Scalar>(
    feed: SimilarityFeed<'_, T>,
    oracle: &dyn AccuracyOracle,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    run_search(feed, oracle, cfg, Mode::Symmetric)
}

pub fn asymmetric_search_with<T: Scalar>(
    feed: SimilarityFeed<'_, T>,
    oracle: &dyn AccuracyOracle,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    run_search(feed, oracle, cfg, Mode::Asymmetric)
}

struct Proposal {
    candidate: HeadGrouping,
}

fn propose<T: Scalar>(
    current: &HeadGrouping,
    sim: &SimilarityMatrix<T>,
    cfg: &SearchConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Proposal> {
    let n_heads = current.n_heads();
    let all_singletons = current.is_singletons();
    loop {
        let a = rng.below(n_heads);
        let home = &current.groups()[current.group_of(a)];
        let near = topk_excluding(sim.row(a), cfg.top_k, home)?;
        let b = near[rng.below(near.len())];
        let target = &current.groups()[current.group_of(b)];
        let partner = target[rng.below(target.len())];
        match mode {
            Mode::Symmetric => {
                return Ok(Proposal {
                    candidate: current.swapped(a, partner),
                });
            }
            Mode::Asymmetric => {
                let preserve = rng.uniform() < cfg.p_preserve;
                if preserve || all_singletons {
                    return Ok(Proposal {
                        candidate: current.swapped(a, partner),
                    });
                }
                if home.len() == 1 {
                    // would empty a's group; redraw
                    continue;
                }
                return Ok(Proposal {
                    candidate: current.moved(a, b),
                });
            }
        }
    }
}

fn run_search<T: Scalar>(
    mut feed: SimilarityFeed<'_, T>,
    oracle: &dyn AccuracyOracle,
    cfg: &SearchConfig,
    mode: Mode,
) -> Result<SearchResult> {
    let n_heads = feed.n_heads();
    cfg.validate(n_heads)?;
    if n_heads < 2 {
        return Err(GqaError::Input("search needs at least 2 heads".into()));
    }
    let mut rng = Rng::new(cfg.seed);

    let mut current = random_grouping(n_heads, cfg.group_size, &mut rng)?;
    let initial_acc = checked_accuracy(oracle, &current)?;
    let mut best_acc = initial_acc;
    let mut best_grouping = current.clone();
    let mut trace = vec![TraceEntry {
        iteration: 0,
        grouping: current.clone(),
        accuracy: initial_acc,
        accepted: true,
        reset: false,
    }];
    let mut oracle_calls = 1;

    // A single group admits no move.
    if current.n_groups() == 1 {
        return Ok(SearchResult {
            best_acc,
            best_grouping,
            trace,
            oracle_calls,
        });
    }

    let mut fresh;
    for iteration in 1..=cfg.n_iters {
        let sim: &SimilarityMatrix<T> = match &mut feed {
            SimilarityFeed::Fixed(s) => s,
            SimilarityFeed::PerIteration { compute, .. } => {
                fresh = compute(iteration)?;
                if fresh.n_heads() != n_heads {
                    return Err(GqaError::shape("search", "similarity head count changed"));
                }
                &fresh
            }
        };

        let reset = rng.uniform() < cfg.p_reset;
        if reset {
            current = random_grouping(n_heads, cfg.group_size, &mut rng)?;
        }
        let Proposal { candidate } = propose(&current, sim, cfg, mode, &mut rng)?;
        let acc = checked_accuracy(oracle, &candidate)?;
        oracle_calls += 1;

        let improved = acc > best_acc;
        let accepted = improved || rng.uniform() < cfg.p_acc;
        if improved {
            best_acc = acc;
            best_grouping = candidate.clone();
        }
        trace.push(TraceEntry {
            iteration,
            grouping: candidate.clone(),
            accuracy: acc,
            accepted,
            reset,
        });
        if accepted {
            current = candidate;
        }
    }

    Ok(SearchResult {
        best_acc,
        best_grouping,
        trace,
        oracle_calls,
    })
}

/// Evaluates every partition of `n_heads` into groups of `group_size` and
/// keeps the first one reaching the maximum accuracy.
pub fn brute_force_search(oracle: &dyn AccuracyOracle, n_heads: usize, group_size: usize) -> Result<SearchResult> {
    let all = enumerate_equal_partitions(n_heads, group_size, BRUTE_FORCE_CAP)?;
    let mut trace = Vec::with_capacity(all.len());
    let mut best: Option<(f64, HeadGrouping)> = None;
    for (iteration, grouping) in all.into_iter().enumerate() {
        let acc = checked_accuracy(oracle, &grouping)?;
        let improved = best.as_ref().is_none_or(|(b, _)| acc > *b);
        if improved {
            best = Some((acc, grouping.clone()));
        }
        trace.push(TraceEntry {
            iteration,
            grouping,
            accuracy: acc,
            accepted: improved,
            reset: false,
        });
    }
    let (best_acc, best_grouping) = best.expect("at least one partition");
    Ok(SearchResult {
        best_acc,
        best_grouping,
        oracle_calls: trace.len(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::partition::enumerate_partitions;
    use crate::numerics::Matrix;
    use crate::similarity::{similarity_matrix, SimilarityMetric};

    fn random_sim(h: usize, seed: u64) -> SimilarityMatrix {
        let mut rng = Rng::new(seed);
        let heads: Vec<Matrix> = (0..h).map(|_| Matrix::uniform(12, 3, 1.0, &mut rng)).collect();
        similarity_matrix(&heads, SimilarityMetric::Activation).unwrap()
    }

    fn table_oracle(table: Vec<(HeadGrouping, f64)>) -> impl Fn(&HeadGrouping) -> f64 + Sync {
        move |g: &HeadGrouping| table.iter().find(|(p, _)| p == g).map_or(0.0, |(_, v)| *v)
    }

    #[test]
    fn single_group_is_degenerate() {
        let sim = random_sim(4, 1);
        let cfg = SearchConfig {
            group_size: 4,
            ..Default::default()
        };
        let r = symmetric_search(&sim, &|_: &HeadGrouping| 0.42, &cfg).unwrap();
        assert_eq!(r.best_acc, 0.42);
        assert_eq!(r.best_grouping.n_groups(), 1);
        assert_eq!(r.oracle_calls, 1);
    }

    #[test]
    fn symmetric_finds_best_of_three() {
        let parts = enumerate_equal_partitions(4, 2, BRUTE_FORCE_CAP).unwrap();
        let values = [0.3, 0.9, 0.5];
        let oracle = table_oracle(parts.iter().cloned().zip(values).collect());
        let sim = random_sim(4, 3);
        for seed in 0..20 {
            let cfg = SearchConfig {
                n_iters: 50,
                p_reset: 0.3,
                seed,
                ..Default::default()
            };
            let r = symmetric_search(&sim, &oracle, &cfg).unwrap();
            assert_eq!(r.best_grouping, parts[1], "seed {seed}");
            assert_eq!(r.best_acc, 0.9);
        }
    }

    #[test]
    fn accept_everything_still_tracks_best() {
        let sim = random_sim(8, 2);
        let oracle = |g: &HeadGrouping| (g.groups()[0].iter().sum::<usize>() as f64 / 30.0).min(1.0);
        let cfg = SearchConfig {
            n_iters: 40,
            p_acc: 1.0,
            seed: 7,
            ..Default::default()
        };
        let r = symmetric_search(&sim, &oracle, &cfg).unwrap();
        assert!(r.trace.iter().all(|t| t.accepted));
        let max = r.trace.iter().map(|t| t.accuracy).fold(f64::MIN, f64::max);
        assert_eq!(r.best_acc, max);
    }

    #[test]
    fn forced_preserve_keeps_sizes() {
        let sim = random_sim(8, 4);
        let oracle = |g: &HeadGrouping| g.assignment()[0] as f64 / 8.0;
        let cfg = SearchConfig {
            n_iters: 60,
            p_preserve: 1.0,
            seed: 1,
            ..Default::default()
        };
        let r = asymmetric_search(&sim, &oracle, &cfg).unwrap();
        assert!(r.trace.iter().all(|t| t.grouping.is_uniform(2)));
    }

    #[test]
    fn asymmetric_without_preserve_unbalances() {
        let sim = random_sim(4, 5);
        let oracle = |_: &HeadGrouping| 0.5;
        let cfg = SearchConfig {
            n_iters: 30,
            p_preserve: 0.0,
            p_reset: 0.0,
            p_acc: 1.0,
            seed: 3,
            ..Default::default()
        };
        let r = asymmetric_search(&sim, &oracle, &cfg).unwrap();
        assert!(r.trace.iter().any(|t| t.grouping.sizes().contains(&3)));
        assert!(r.trace.iter().all(|t| t.grouping.n_groups() == 2));
    }

    #[test]
    fn asymmetric_finds_unbalanced_optimum() {
        let parts = enumerate_partitions(4, 2);
        let target = HeadGrouping::from_groups(vec![vec![0, 1, 2], vec![3]]).unwrap();
        let table: Vec<_> = parts
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), if *p == target { 0.95 } else { 0.1 + 0.05 * i as f64 }))
            .collect();
        let oracle = table_oracle(table);
        let sim = random_sim(4, 9);
        let hits = (0..20)
            .filter(|&seed| {
                let cfg = SearchConfig {
                    n_iters: 100,
                    seed,
                    ..Default::default()
                };
                asymmetric_search(&sim, &oracle, &cfg).unwrap().best_grouping == target
            })
            .count();
        assert!(hits >= 18, "{hits}/20");
    }

    #[test]
    fn brute_force_dominates_search() {
        let sim = random_sim(6, 6);
        let oracle = |g: &HeadGrouping| {
            let s: usize = g.groups().iter().map(|grp| grp[0] * grp[grp.len() - 1]).sum();
            (s % 17) as f64 / 17.0
        };
        let brute = brute_force_search(&oracle, 6, 2).unwrap();
        assert_eq!(brute.oracle_calls, 15);
        for seed in 0..10 {
            let cfg = SearchConfig { seed, ..Default::default() };
            let r = symmetric_search(&sim, &oracle, &cfg).unwrap();
            assert!(brute.best_acc >= r.best_acc);
        }
    }

    #[test]
    fn non_finite_oracle_is_an_error() {
        let sim = random_sim(4, 1);
        let r = symmetric_search(&sim, &|_: &HeadGrouping| f64::NAN, &SearchConfig::default());
        assert!(matches!(r, Err(GqaError::Oracle(_))));
    }

    #[test]
    fn invalid_config() {
        let sim = random_sim(4, 1);
        let oracle = |_: &HeadGrouping| 0.0;
        let bad = [
            SearchConfig { group_size: 3, ..Default::default() },
            SearchConfig { n_iters: 0, ..Default::default() },
            SearchConfig { top_k: 0, ..Default::default() },
            SearchConfig { p_acc: 1.5, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(symmetric_search(&sim, &oracle, &cfg), Err(GqaError::Config(_))));
        }
    }

    #[test]
    fn per_iteration_feed_matches_fixed_when_constant() {
        let sim = random_sim(8, 12);
        let oracle = |g: &HeadGrouping| g.assignment()[3] as f64 / 10.0;
        let cfg = SearchConfig { n_iters: 25, seed: 5, ..Default::default() };
        let fixed = asymmetric_search(&sim, &oracle, &cfg).unwrap();
        let mut calls = 0;
        let mut compute = |_: usize| {
            calls += 1;
            Ok(sim.clone())
        };
        let feed = SimilarityFeed::PerIteration { n_heads: 8, compute: &mut compute };
        let per_iter = asymmetric_search_with(feed, &oracle, &cfg).unwrap();
        assert_eq!(fixed, per_iter);
        assert_eq!(calls, 25);
    }
}
