use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine_from_parts, row_sq_norms};
use crate::Metric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// `‖a − b‖²`
    SqEuclidean,
    /// `½(1 − cos(a, b))`, in `[0, 1]`
    CosineDist,
}

impl From<Metric> for CostMode {
    fn from(metric: Metric) -> Self {
        match metric {
            Metric::Euclidean => CostMode::SqEuclidean,
            Metric::Cosine => CostMode::CosineDist,
        }
    }
}

impl CostMode {
    /// Distance between two vectors given their dot product and squared norms.
    pub(crate) fn distance(self, dot: f64, sq_a: f64, sq_b: f64) -> f64 {
        match self {
            CostMode::SqEuclidean => (sq_a + sq_b - 2.0 * dot).max(0.0),
            CostMode::CosineDist => 0.5 * (1.0 - cosine_from_parts(dot, sq_a, sq_b)),
        }
    }
}

/// Nonnegative finite `m x n` cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    data: Array2<f64>,
    mode: CostMode,
}

impl CostMatrix {
    pub fn new(data: Array2<f64>, mode: CostMode) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("cost matrix must be non-empty"));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!(
                "cost entries must be finite and >= 0, found {v}"
            )));
        }
        Ok(Self { data, mode })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn mode(&self) -> CostMode {
        self.mode
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }
}

/// Pairwise costs between the rows of `a` (`m x c`) and `b` (`n x c`).
pub fn cost_matrix(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    mode: CostMode,
) -> Result<CostMatrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::invalid(format!(
            "channel mismatch: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let data = match mode {
        CostMode::SqEuclidean => Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
            a.row(i)
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        }),
        CostMode::CosineDist => {
            let na = row_sq_norms(a);
            let nb = row_sq_norms(b);
            Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
                mode.distance(a.row(i).dot(&b.row(j)), na[i], nb[j])
            })
        }
    };
    CostMatrix::new(data, mode)
}
