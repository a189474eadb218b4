//! Alternating prototype refinement.
//!
//! Given query features `F` (`m x c`) and the prototype bank `M` (`n x c`),
//! the refined prototypes are `W·M` for a transform `W` (`m x n`) minimizing
//!
//! ```text
//! L(W, T) = Σ_i dis(F_i, (W·M)_i) + λ·(⟨C(W·M, M), T⟩ + ε Σ T ln T)
//! ```
//!
//! over `W` and couplings `T` with uniform marginals. Each outer step solves
//! for `T` by Sinkhorn with `W` fixed, then for `W` in closed form with `T`
//! fixed:
//!
//! ```text
//! W = (F·Mᵀ + λ·T·M·Mᵀ)·(M·Mᵀ + δ·tr(M·Mᵀ)/n·I)⁻¹,  row i ÷ (1 + λ·Σ_j T_ij)
//! ```
//!
//! Cosine mode unit-normalizes `F` and `M` and reuses the same update.

mod engine;
mod ttt;

use std::time::Duration;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::{cost_matrix, entropic_value, CostMode, TransportPlan};
use crate::tensor_io::{FlatFeatures, PrototypeBank};
use crate::Metric;

pub use engine::{PreparedQuery, RefineEngine};
pub use ttt::{ttt_refine, TttConfig, TttOutput};

/// How the entropic regularization strength is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonRule {
    /// `0.05 · median(C)` of the cost at the initial transform, held fixed
    /// for every outer iteration of one refinement.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub lambda: f64,
    pub outer_iters: usize,
    pub epsilon: EpsilonRule,
    pub inner_iters: usize,
    pub marginal_tol: f64,
    pub ridge: f64,
    pub metric: Metric,
}

impl RefineConfig {
    /// Defaults for a metric: λ = 0.3 (Euclidean) or 0.1 (cosine), two outer
    /// iterations, ten Sinkhorn sweeps, automatic ε, δ = 1e-6.
    pub fn new(metric: Metric) -> Self {
        Self {
            lambda: metric.default_lambda(),
            outer_iters: 2,
            epsilon: EpsilonRule::Auto,
            inner_iters: 10,
            marginal_tol: 1e-6,
            ridge: 1e-6,
            metric,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.outer_iters == 0 {
            return Err(Error::invalid("outer_iters must be >= 1"));
        }
        if self.inner_iters == 0 {
            return Err(Error::invalid("inner_iters must be >= 1"));
        }
        if let EpsilonRule::Fixed(eps) = self.epsilon {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::invalid(format!(
                    "epsilon must be finite and > 0, got {eps}"
                )));
            }
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::invalid(format!(
                "ridge must be finite and >= 0, got {}",
                self.ridge
            )));
        }
        Ok(())
    }
}

/// The `m x n` transform mapping prototypes to refined prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformMatrix {
    data: Array2<f64>,
}

impl TransformMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("transform matrix entries must be finite"));
        }
        Ok(Self { data })
    }

    pub(crate) fn from_array(data: Array2<f64>) -> Self {
        Self { data }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }
}

/// Objective split into its two terms; `total = recon + λ·ot`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub total: f64,
    pub recon: f64,
    pub ot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub objective: f64,
    pub recon: f64,
    pub ot: f64,
    /// `‖W_{l+1} − W_l‖_F`
    pub w_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineTrace {
    /// `L(W_0, T_1)`: initial transform against the first plan.
    pub initial_objective: f64,
    /// One record per outer iteration, `L(W_{l+1}, T_{l+1})`.
    pub records: Vec<TraceRecord>,
}

impl RefineTrace {
    /// Objective sequence starting with `L(W_0, T_1)`.
    pub fn objectives(&self) -> Vec<f64> {
        std::iter::once(self.initial_objective)
            .chain(self.records.iter().map(|r| r.objective))
            .collect()
    }
}

/// Wall time spent per stage of one refinement.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub init: Duration,
    pub sinkhorn: Duration,
    pub w_update: Duration,
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub transform: TransformMatrix,
    pub plan: TransportPlan,
    pub trace: RefineTrace,
    pub epsilon: f64,
    /// `‖(W·M)_i‖²` for the final transform.
    pub refined_sq: Array1<f64>,
    pub timings: StageTimings,
}

/// Full result of [`fastref_refine`], including the refined bank `W*·M`.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub refined: Array2<f64>,
    pub transform: TransformMatrix,
    pub plan: TransportPlan,
    pub trace: RefineTrace,
    pub epsilon: f64,
}

/// Least-squares initial transform `W_0 = F·Mᵀ·(M·Mᵀ + ridge term)⁻¹`.
pub fn init_transform(
    query: &FlatFeatures,
    bank: &PrototypeBank,
    ridge: f64,
) -> Result<TransformMatrix> {
    let engine = RefineEngine::new(bank, ridge)?;
    let q = engine.prepare(query)?;
    Ok(TransformMatrix::from_array(engine.initial_transform(&q)))
}

/// One closed-form transform update with the plan held fixed.
pub fn update_transform(
    query: &FlatFeatures,
    bank: &PrototypeBank,
    plan: &TransportPlan,
    lambda: f64,
    ridge: f64,
) -> Result<TransformMatrix> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let engine = RefineEngine::new(bank, ridge)?;
    let q = engine.prepare(query)?;
    Ok(TransformMatrix::from_array(
        engine.update_transform(&q, plan, lambda)?,
    ))
}

/// Evaluates the objective by forming `W·M` explicitly.
///
/// In cosine mode `query` and `bank` rows are unit-normalized first, as the
/// optimizer does.
pub fn objective_value(
    query: &FlatFeatures,
    bank: &PrototypeBank,
    transform: &TransformMatrix,
    plan: &TransportPlan,
    lambda: f64,
    epsilon: f64,
    metric: Metric,
) -> Result<Objective> {
    let (f, m) = engine::widen_pair(query, bank, metric)?;
    objective_from_arrays(
        f.view(),
        m.view(),
        transform.view(),
        plan.view(),
        lambda,
        epsilon,
        metric,
    )
}

pub(crate) fn objective_from_arrays(
    f: ArrayView2<'_, f64>,
    m: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    plan: ArrayView2<'_, f64>,
    lambda: f64,
    epsilon: f64,
    metric: Metric,
) -> Result<Objective> {
    let (rows, n) = w.dim();
    if rows != f.nrows() || n != m.nrows() || plan.dim() != (rows, n) {
        return Err(Error::invalid(format!(
            "shape mismatch: query {}x{}, bank {}x{}, transform {rows}x{n}, plan {}x{}",
            f.nrows(),
            f.ncols(),
            m.nrows(),
            m.ncols(),
            plan.nrows(),
            plan.ncols()
        )));
    }
    let refined = w.dot(&m);
    let mode = CostMode::from(metric);
    let recon: f64 = f
        .rows()
        .into_iter()
        .zip(refined.rows())
        .map(|(fi, ri)| match metric {
            Metric::Euclidean => fi.iter().zip(ri).map(|(a, b)| (a - b) * (a - b)).sum(),
            Metric::Cosine => mode.distance(fi.dot(&ri), fi.dot(&fi), ri.dot(&ri)),
        })
        .sum();
    let cost = cost_matrix(refined.view(), m, mode)?;
    let ot = entropic_value(cost.view(), plan, epsilon);
    Ok(Objective {
        total: recon + lambda * ot,
        recon,
        ot,
    })
}

/// Runs the alternating optimizer on one query.
pub fn fastref_refine(
    query: &FlatFeatures,
    bank: &PrototypeBank,
    config: &RefineConfig,
) -> Result<Refinement> {
    if bank.metric() != config.metric {
        return Err(Error::invalid(format!(
            "bank was built for {} but refinement uses {}",
            bank.metric().as_str(),
            config.metric.as_str()
        )));
    }
    let engine = RefineEngine::new(bank, config.ridge)?;
    let q = engine.prepare(query)?;
    let out = engine.refine(&q, config)?;
    Ok(Refinement {
        refined: engine.refined_bank(&out.transform),
        transform: out.transform,
        plan: out.plan,
        trace: out.trace,
        epsilon: out.epsilon,
    })
}
