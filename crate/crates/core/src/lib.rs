//! Test-time prototype refinement for few-shot anomaly detection.
//!
//! A query image's patch features are reconstructed from a bank of normal
//! prototypes through a transform matrix `W`, while an entropic optimal
//! transport plan `T` ties the refined prototypes `W·M` back to the normal
//! bank so anomalous patches cannot be reconstructed cheaply. The two are
//! solved alternately: Sinkhorn for `T` with `W` fixed, a closed-form ridge
//! solve for `W` with `T` fixed. Patches are then scored by their distance to
//! the nearest refined prototype.
//!
//! Module map:
//!
//! - [`tensor_io`]: feature tensors and the FTZ file format
//! - [`coreset`]: greedy farthest-first prototype selection
//! - [`ot`]: cost matrices, log-stabilized Sinkhorn, exact small-instance OT
//! - [`refine`]: the alternating optimizer and the mean-alignment baseline
//! - [`scoring`]: score maps, upsampling, smoothing, image scores
//! - [`eval`]: AUROC, synthetic data, timing harness

use serde::{Deserialize, Serialize};

pub mod coreset;
pub mod error;
pub mod eval;
pub(crate) mod linalg;
pub mod ot;
pub mod refine;
pub mod scoring;
pub mod tensor_io;

pub use error::{Error, Result};

/// Distance used for reconstruction, transport cost and scoring.
///
/// `Euclidean` uses squared Euclidean distance; `Cosine` uses `½(1 − cos)` on
/// unit-normalized rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl Metric {
    /// Balance coefficient used when none is given.
    pub fn default_lambda(self) -> f64 {
        match self {
            Metric::Euclidean => 0.3,
            Metric::Cosine => 0.1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::InvalidInput(format!("unknown metric {other:?}"))),
        }
    }
}
