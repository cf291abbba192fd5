use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GqaError, Result};
use crate::model::ModelConfig;
use crate::numerics::Rng;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Validation examples used by the search oracle (a prefix of the val split).
pub const ORACLE_SPLIT_SIZE: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Tokens `0..n_classes` are markers, the rest filler. The label is the
    /// marker that occurs most often; sequences with a tie (or no marker)
    /// are regenerated.
    Majority {
        n_classes: usize,
        /// Distinct marker types drawn into one sequence.
        marker_types_per_seq: usize,
        /// Probability that a position holds a marker.
        marker_prob: f64,
    },
    /// Binary: does the last token equal the first?
    FirstLastMatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl TaskSpec {
    pub fn n_classes(&self) -> usize {
        match self.task {
            TaskKind::Majority { n_classes, .. } => n_classes,
            TaskKind::FirstLastMatch => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GqaError::Config(m));
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("every split needs at least one example".into());
        }
        if self.seq_len == 0 {
            return bad("seq_len must be >= 1".into());
        }
        match self.task {
            TaskKind::Majority {
                n_classes,
                marker_types_per_seq,
                marker_prob,
            } => {
                if n_classes < 2 {
                    return bad("majority task needs >= 2 classes".into());
                }
                if self.vocab_size <= n_classes {
                    return bad(format!(
                        "vocab_size {} leaves no filler token after {n_classes} markers",
                        self.vocab_size
                    ));
                }
                if marker_types_per_seq == 0 || marker_types_per_seq > n_classes {
                    return bad(format!("marker_types_per_seq must be in 1..={n_classes}"));
                }
                if !(marker_prob > 0.0 && marker_prob <= 1.0) {
                    return bad(format!("marker_prob {marker_prob} must be in (0, 1]"));
                }
            }
            TaskKind::FirstLastMatch => {
                if self.vocab_size < 2 || self.seq_len < 2 {
                    return bad("first-last-match needs vocab_size >= 2 and seq_len >= 2".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    /// First [`ORACLE_SPLIT_SIZE`] validation examples.
    Oracle,
}

impl std::str::FromStr for Split {
    type Err = GqaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "oracle" => Ok(Split::Oracle),
            other => Err(GqaError::Config(format!("unknown split `{other}` (train, val, test, oracle)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub format_version: u32,
    pub spec: TaskSpec,
    pub seed: u64,
    pub inputs: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub splits: Splits,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.spec.n_classes()
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
            Split::Oracle => &self.splits.val[..self.splits.val.len().min(ORACLE_SPLIT_SIZE)],
        }
    }

    /// Token sequences and labels of a split.
    pub fn examples(&self, split: Split) -> (Vec<Vec<usize>>, Vec<usize>) {
        let idx = self.split_indices(split);
        (
            idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        if self.spec.vocab_size > config.vocab_size
            || self.spec.seq_len > config.max_seq_len
            || self.n_classes() != config.n_classes
        {
            return Err(GqaError::Config(format!(
                "dataset (vocab {}, seq_len {}, {} classes) does not fit the model (vocab {}, max_seq_len {}, {} classes)",
                self.spec.vocab_size,
                self.spec.seq_len,
                self.n_classes(),
                config.vocab_size,
                config.max_seq_len,
                config.n_classes
            )));
        }
        Ok(())
    }

    /// Structural checks: disjoint covering splits, labels and tokens in range.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let n = self.inputs.len();
        if self.labels.len() != n {
            return Err(GqaError::Input(format!("{n} inputs but {} labels", self.labels.len())));
        }
        let mut seen = vec![false; n];
        for &i in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(GqaError::Input(format!("split index {i} out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(GqaError::Input("splits do not cover every example".into()));
        }
        if self.labels.iter().any(|&y| y >= self.n_classes()) {
            return Err(GqaError::Input("label out of range".into()));
        }
        if self
            .inputs
            .iter()
            .any(|s| s.len() != self.spec.seq_len || s.iter().any(|&t| t >= self.spec.vocab_size))
        {
            return Err(GqaError::Input("sequence with wrong length or token out of range".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == DATASET_FORMAT_VERSION as u64 => {}
            other => {
                return Err(GqaError::Input(format!(
                    "unsupported dataset format_version {other:?} (expected {DATASET_FORMAT_VERSION})"
                )))
            }
        }
        let ds: Dataset = serde_json::from_value(value)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GqaError::Input(format!("cannot read dataset {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

fn majority_sequence(
    rng: &mut Rng,
    target: usize,
    seq_len: usize,
    vocab: usize,
    n_classes: usize,
    types: usize,
    p: f64,
) -> Vec<usize> {
    loop {
        let markers: Vec<usize> = rng.permutation(n_classes).into_iter().take(types).collect();
        let seq: Vec<usize> = (0..seq_len)
            .map(|_| {
                if rng.uniform() < p {
                    markers[rng.below(types)]
                } else {
                    n_classes + rng.below(vocab - n_classes)
                }
            })
            .collect();
        let mut counts = vec![0usize; n_classes];
        for &t in &seq {
            if t < n_classes {
                counts[t] += 1;
            }
        }
        let max = *counts.iter().max().expect("n_classes >= 2");
        if max == 0 || counts.iter().filter(|&&c| c == max).count() > 1 {
            continue;
        }
        let winner = counts.iter().position(|&c| c == max).expect("max exists");
        // Relabel so that the target marker wins; a bijection on marker ids.
        return seq
            .into_iter()
            .map(|t| match t {
                t if t == winner => target,
                t if t == target => winner,
                t => t,
            })
            .collect();
    }
}

fn first_last_sequence(rng: &mut Rng, target: usize, seq_len: usize, vocab: usize) -> Vec<usize> {
    let mut seq: Vec<usize> = (0..seq_len).map(|_| rng.below(vocab)).collect();
    let first = seq[0];
    if target == 1 {
        seq[seq_len - 1] = first;
    } else {
        while seq[seq_len - 1] == first {
            seq[seq_len - 1] = rng.below(vocab);
        }
    }
    seq
}

/// Generates all three splits. Labels cycle through the classes within each
/// split, so every split is balanced to within one example per class.
pub fn gen_dataset(spec: &TaskSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let c = spec.n_classes();
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut ranges = Vec::new();
    for (tag, n) in [spec.n_train, spec.n_val, spec.n_test].into_iter().enumerate() {
        let mut rng = Rng::derived(seed, &[tag as u64]);
        let start = inputs.len();
        for i in 0..n {
            let y = i % c;
            let seq = match spec.task {
                TaskKind::Majority {
                    n_classes,
                    marker_types_per_seq,
                    marker_prob,
                } => majority_sequence(
                    &mut rng,
                    y,
                    spec.seq_len,
                    spec.vocab_size,
                    n_classes,
                    marker_types_per_seq,
                    marker_prob,
                ),
                TaskKind::FirstLastMatch => first_last_sequence(&mut rng, y, spec.seq_len, spec.vocab_size),
            };
            inputs.push(seq);
            labels.push(y);
        }
        ranges.push((start..inputs.len()).collect::<Vec<_>>());
    }
    let test = ranges.pop().expect("three splits");
    let val = ranges.pop().expect("three splits");
    let train = ranges.pop().expect("three splits");
    Ok(Dataset {
        format_version: DATASET_FORMAT_VERSION,
        spec: spec.clone(),
        seed,
        inputs,
        labels,
        splits: Splits { train, val, test },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn majority_spec() -> TaskSpec {
        TaskSpec {
            task: TaskKind::Majority {
                n_classes: 4,
                marker_types_per_seq: 3,
                marker_prob: 0.5,
            },
            seq_len: 10,
            vocab_size: 12,
            n_train: 100,
            n_val: 40,
            n_test: 40,
        }
    }

    fn majority_label(seq: &[usize], c: usize) -> Option<usize> {
        let mut counts = vec![0; c];
        for &t in seq {
            if t < c {
                counts[t] += 1;
            }
        }
        let max = *counts.iter().max()?;
        (counts.iter().filter(|&&x| x == max).count() == 1 && max > 0).then(|| counts.iter().position(|&x| x == max).unwrap())
    }

    #[test]
    fn majority_labels_are_correct() {
        let ds = gen_dataset(&majority_spec(), 3).unwrap();
        ds.validate().unwrap();
        for (s, &y) in ds.inputs.iter().zip(&ds.labels) {
            assert_eq!(majority_label(s, 4), Some(y));
        }
    }

    #[test]
    fn first_last_labels_are_correct() {
        let spec = TaskSpec {
            task: TaskKind::FirstLastMatch,
            seq_len: 6,
            vocab_size: 5,
            n_train: 50,
            n_val: 10,
            n_test: 10,
        };
        let ds = gen_dataset(&spec, 1).unwrap();
        for (s, &y) in ds.inputs.iter().zip(&ds.labels) {
            assert_eq!(y == 1, s[0] == s[5]);
        }
    }

    #[test]
    fn deterministic_and_versioned() {
        let a = gen_dataset(&majority_spec(), 7).unwrap();
        let b = gen_dataset(&majority_spec(), 7).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_ne!(a, gen_dataset(&majority_spec(), 8).unwrap());
        let back = Dataset::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        let bumped = a.to_json().unwrap().replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert!(Dataset::from_json(&bumped).is_err());
    }

    #[test]
    fn invalid_specs() {
        let mut s = majority_spec();
        s.vocab_size = 4;
        assert!(matches!(gen_dataset(&s, 0), Err(GqaError::Config(_))));
        let mut s = majority_spec();
        s.task = TaskKind::Majority {
            n_classes: 4,
            marker_types_per_seq: 5,
            marker_prob: 0.5,
        };
        assert!(gen_dataset(&s, 0).is_err());
        let mut s = majority_spec();
        s.n_val = 0;
        assert!(gen_dataset(&s, 0).is_err());
    }

    #[test]
    fn oracle_split_is_val_prefix() {
        let mut s = majority_spec();
        s.n_val = 600;
        let ds = gen_dataset(&s, 0).unwrap();
        assert_eq!(ds.split_indices(Split::Oracle).len(), ORACLE_SPLIT_SIZE);
        assert_eq!(ds.split_indices(Split::Oracle)[0], ds.splits.val[0]);
    }
}
