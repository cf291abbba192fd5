//! Pairwise head similarity.
//!
//! The activation metric compares two `n × m` activation matrices row by row
//! (rows are token positions, columns are head features): every row of one
//! matrix is matched to its best cosine partner in the other, the matches are
//! summed, and the two directions are averaged. The weight metric is the
//! cosine of the flattened projection matrices.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{GqaError, Result};
use crate::numerics::{cosim, norm, Matrix, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMetric {
    Activation,
    Weight,
}

impl std::str::FromStr for SimilarityMetric {
    type Err = GqaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activation" => Ok(Self::Activation),
            "weight" => Ok(Self::Weight),
            other => Err(GqaError::Config(format!("unknown similarity metric `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<T = f64> {
    values: Matrix<T>,
    metric: SimilarityMetric,
    n_rows: usize,
}

impl<T: Scalar> SimilarityMatrix<T> {
    /// Wraps precomputed scores. The matrix must be square, symmetric and finite.
    pub fn from_values(values: Matrix<T>, metric: SimilarityMetric, n_rows: usize) -> Result<Self> {
        let h = values.rows();
        if values.cols() != h {
            return Err(GqaError::shape("SimilarityMatrix", "matrix is not square"));
        }
        if !values.is_finite() {
            return Err(GqaError::Input("similarity values must be finite".into()));
        }
        let tol = T::from_f64_lossy(1e-9);
        for i in 0..h {
            for j in 0..i {
                if (values[(i, j)] - values[(j, i)]).abs() > tol {
                    return Err(GqaError::Input(format!("similarity not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { values, metric, n_rows })
    }

    pub fn n_heads(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn metric(&self) -> SimilarityMetric {
        self.metric
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn row(&self, head: usize) -> &[T] {
        self.values.row(head)
    }

    pub fn get(&self, a: usize, b: usize) -> T {
        self.values[(a, b)]
    }

    /// CSV with head indices as the header row and first column.
    pub fn to_csv(&self) -> String {
        let h = self.n_heads();
        let mut out = String::from("head");
        for j in 0..h {
            let _ = write!(out, ",{j}");
        }
        out.push('\n');
        for i in 0..h {
            let _ = write!(out, "{i}");
            for j in 0..h {
                let _ = write!(out, ",{}", self.values[(i, j)].to_f64_lossy());
            }
            out.push('\n');
        }
        out
    }
}

fn normalized_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n > T::zero() {
            row.iter_mut().for_each(|v| *v = *v / n);
        }
    }
    out
}

/// Activation-informed similarity of two equally shaped activation matrices.
pub fn activation_similarity<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    a.check_same_shape(b, "activation_similarity")?;
    if a.rows() == 0 {
        return Err(GqaError::Input("activation matrices need at least one row".into()));
    }
    let an = normalized_rows(a);
    let bn = normalized_rows(b);
    // cos[i][j] = cosim(A_i, B_j); zero rows stay zero, giving cosim 0.
    let cos = an.matmul_nt(&bn)?;
    let n = a.rows();
    let mut a_to_b = T::zero();
    for i in 0..n {
        a_to_b = a_to_b + cos.row(i).iter().copied().fold(T::neg_infinity(), T::max);
    }
    let mut b_to_a = T::zero();
    for j in 0..n {
        let best = (0..n).map(|i| cos[(i, j)]).fold(T::neg_infinity(), T::max);
        b_to_a = b_to_a + best;
    }
    Ok((a_to_b + b_to_a) / T::from_f64_lossy(2.0))
}

/// Weight-informed similarity: cosine of the flattened matrices.
pub fn weight_similarity<T: Scalar>(wa: &Matrix<T>, wb: &Matrix<T>) -> Result<T> {
    wa.check_same_shape(wb, "weight_similarity")?;
    cosim(wa.as_slice(), wb.as_slice())
}

/// Pairwise similarity of per-head matrices: activations for
/// [`SimilarityMetric::Activation`], projection weights for
/// [`SimilarityMetric::Weight`].
pub fn similarity_matrix<T: Scalar>(per_head: &[Matrix<T>], metric: SimilarityMetric) -> Result<SimilarityMatrix<T>> {
    let h = per_head.len();
    if h < 2 {
        return Err(GqaError::Input(format!("similarity matrix needs >= 2 heads, got {h}")));
    }
    let shape = per_head[0].shape();
    if per_head.iter().any(|m| m.shape() != shape) {
        return Err(GqaError::shape("similarity_matrix", "heads have different shapes"));
    }
    let pair = |a: &Matrix<T>, b: &Matrix<T>| match metric {
        SimilarityMetric::Activation => activation_similarity(a, b),
        SimilarityMetric::Weight => weight_similarity(a, b),
    };
    let mut values = Matrix::zeros(h, h);
    for i in 0..h {
        values[(i, i)] = pair(&per_head[i], &per_head[i])?;
        for j in 0..i {
            let s = pair(&per_head[i], &per_head[j])?;
            values[(i, j)] = s;
            values[(j, i)] = s;
        }
    }
    Ok(SimilarityMatrix {
        values,
        metric,
        n_rows: shape.0,
    })
}
