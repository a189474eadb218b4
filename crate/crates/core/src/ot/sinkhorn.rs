//! Entropic OT by alternating row/column scaling.
//!
//! The kernel is kept in stabilized form
//! `K_ij = exp(−(C_ij − f_i − g_j)/ε)` where `(f, g)` are dual potentials.
//! They start as the row minima of `C` and the column minima of `C − f`, so
//! every row and every column of `K` holds an entry equal to one and the
//! kernel cannot underflow along a whole row or column however small `ε`
//! is. Whenever a scaling vector drifts outside `[e^-200, e^200]` its log is
//! absorbed into the potentials and the kernel is rebuilt.
//!
//! The scaled kernel only meets the row marginal approximately when the
//! sweep budget runs out, so the returned plan is rounded onto the feasible
//! set: rows then columns are scaled down where they carry too much mass and
//! the deficit is restored by a rank-one correction (Altschuler, Weed and
//! Rigollet, 2017). The reported residuals describe the scaling iterate
//! before rounding.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::cost::CostMatrix;
use crate::error::{Error, Result};
use crate::linalg::median;

/// `ε = AUTO_EPSILON_SCALE · median(C)` under the automatic rule.
pub const AUTO_EPSILON_SCALE: f64 = 0.05;

const ABSORB_LOG_BOUND: f64 = 200.0;

/// `exp(x)` is subnormal below this.
const MIN_EXP_ARG: f64 = -708.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    /// Hard budget on full row+column sweeps.
    pub max_inner_iters: usize,
    /// Early exit once both L∞ marginal residuals fall below this.
    pub marginal_tol: f64,
}

impl SinkhornConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            max_inner_iters: 10,
            marginal_tol: 1e-6,
        }
    }

    pub fn with_iters(mut self, iters: usize) -> Self {
        self.max_inner_iters = iters;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.marginal_tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be finite and > 0, got {}",
                self.epsilon
            )));
        }
        if self.max_inner_iters == 0 {
            return Err(Error::invalid("max_inner_iters must be >= 1"));
        }
        if !(self.marginal_tol > 0.0) {
            return Err(Error::invalid("marginal_tol must be > 0"));
        }
        Ok(())
    }
}

/// `0.05 · median(C)`, falling back to the mean and then to 1 when the median
/// vanishes (a zero cost matrix makes every `ε` equivalent).
pub fn auto_epsilon(cost: &CostMatrix) -> f64 {
    let values: Vec<f64> = cost.view().iter().copied().collect();
    let med = median(&values);
    if med > 0.0 {
        return AUTO_EPSILON_SCALE * med;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean > 0.0 {
        AUTO_EPSILON_SCALE * mean
    } else {
        1.0
    }
}

/// An `m x n` coupling with (approximately) uniform marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    data: Array2<f64>,
}

impl TransportPlan {
    pub(crate) fn from_array(data: Array2<f64>) -> Self {
        Self { data }
    }

    /// Checks shape, nonnegativity and both marginals against `tol`.
    pub fn new(data: Array2<f64>, tol: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("transport plan must be non-empty"));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(
                "transport plan entries must be finite and >= 0",
            ));
        }
        let plan = Self { data };
        let (r, c) = (plan.row_residual(), plan.col_residual());
        if r > tol || c > tol {
            return Err(Error::invalid(format!(
                "transport plan marginals off by {r:e} (rows) / {c:e} (cols), tolerance {tol:e}"
            )));
        }
        Ok(plan)
    }

    /// Product coupling `1/(m·n)` everywhere.
    pub fn uniform(m: usize, n: usize) -> Self {
        Self {
            data: Array2::from_elem((m, n), 1.0 / (m * n) as f64),
        }
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

    pub fn row_sums(&self) -> Array1<f64> {
        self.data.sum_axis(Axis(1))
    }

    /// `max_i |Σ_j T_ij − 1/m|`
    pub fn row_residual(&self) -> f64 {
        let target = 1.0 / self.rows() as f64;
        self.row_sums()
            .iter()
            .map(|s| (s - target).abs())
            .fold(0.0, f64::max)
    }

    /// `max_j |Σ_i T_ij − 1/n|`
    pub fn col_residual(&self) -> f64 {
        let target = 1.0 / self.cols() as f64;
        self.data
            .sum_axis(Axis(0))
            .iter()
            .map(|s| (s - target).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornOutput {
    pub plan: TransportPlan,
    /// `⟨T, C⟩ + ε Σ T ln T`
    pub value: f64,
    /// Sweeps actually run.
    pub iterations: usize,
    /// L1 row-marginal residual after each sweep (columns are exact after
    /// the column half-step).
    pub residual_history: Vec<f64>,
    /// L∞ row-marginal residual of the last scaling iterate, before rounding.
    pub residual: f64,
    /// `Σ T ln T` of the returned plan.
    pub neg_entropy: f64,
}

/// `⟨T, C⟩ + ε Σ T ln T`, with `0 ln 0 = 0`.
pub fn entropic_value(cost: ArrayView2<'_, f64>, plan: ArrayView2<'_, f64>, epsilon: f64) -> f64 {
    linear_cost(cost, plan) + epsilon * neg_entropy(plan)
}

/// `⟨T, C⟩`
pub(crate) fn linear_cost(cost: ArrayView2<'_, f64>, plan: ArrayView2<'_, f64>) -> f64 {
    Zip::from(cost)
        .and(plan)
        .fold(0.0, |acc, &c, &t| acc + c * t)
}

/// `Σ T ln T` with `0 ln 0 = 0`.
pub(crate) fn neg_entropy(plan: ArrayView2<'_, f64>) -> f64 {
    plan.iter().filter(|&&t| t > 0.0).map(|&t| t * t.ln()).sum()
}

struct Kernel {
    f: Array1<f64>,
    g: Array1<f64>,
    k: Array2<f64>,
}

impl Kernel {
    fn init(cost: ArrayView2<'_, f64>, epsilon: f64) -> Self {
        let f = cost.map_axis(Axis(1), |r| r.iter().copied().fold(f64::INFINITY, f64::min));
        let mut g = Array1::from_elem(cost.ncols(), f64::INFINITY);
        for (i, row) in cost.axis_iter(Axis(0)).enumerate() {
            for (gj, &c) in g.iter_mut().zip(row) {
                *gj = gj.min(c - f[i]);
            }
        }
        let mut kernel = Self {
            f,
            g,
            k: Array2::zeros(cost.raw_dim()),
        };
        kernel.rebuild(cost, epsilon);
        kernel
    }

    fn rebuild(&mut self, cost: ArrayView2<'_, f64>, epsilon: f64) {
        let inv_eps = 1.0 / epsilon;
        for ((mut k_row, c_row), &fi) in self.k.rows_mut().into_iter().zip(cost.rows()).zip(&self.f)
        {
            for ((k, &c), &gj) in k_row.iter_mut().zip(c_row).zip(&self.g) {
                let x = (fi + gj - c) * inv_eps;
                // Flush instead of producing subnormals, which are slow in
                // every later product.
                *k = if x < MIN_EXP_ARG { 0.0 } else { x.exp() };
            }
        }
    }

    fn absorb(
        &mut self,
        cost: ArrayView2<'_, f64>,
        epsilon: f64,
        u: &mut Array1<f64>,
        v: &mut Array1<f64>,
    ) {
        Zip::from(&mut self.f)
            .and(&*u)
            .for_each(|f, &ui| *f += epsilon * ui.ln());
        Zip::from(&mut self.g)
            .and(&*v)
            .for_each(|g, &vj| *g += epsilon * vj.ln());
        u.fill(1.0);
        v.fill(1.0);
        self.rebuild(cost, epsilon);
    }
}

/// Projects a positive matrix onto the plans with marginals `(a·1, b·1)`.
fn round_to_marginals(plan: &mut Array2<f64>, a: f64, b: f64) {
    for mut row in plan.rows_mut() {
        let s = row.sum();
        if s > a {
            row.mapv_inplace(|t| t * (a / s));
        }
    }
    let col_scale = plan
        .sum_axis(Axis(0))
        .mapv(|s| if s > b { b / s } else { 1.0 });
    *plan *= &col_scale;
    let row_deficit = plan.sum_axis(Axis(1)).mapv(|s| (a - s).max(0.0));
    let col_deficit = plan.sum_axis(Axis(0)).mapv(|s| (b - s).max(0.0));
    let total = col_deficit.sum();
    if total > 0.0 {
        for (mut row, &r) in plan.rows_mut().into_iter().zip(&row_deficit) {
            row.scaled_add(r / total, &col_deficit);
        }
    }
}

/// `Kᵀ·u` accumulated over contiguous rows.
fn transpose_dot(k: &Array2<f64>, u: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(k.ncols());
    for (row, &ui) in k.rows().into_iter().zip(u) {
        out.scaled_add(ui, &row);
    }
    out
}

fn out_of_range(x: &Array1<f64>) -> bool {
    x.iter().any(|v| v.ln().abs() > ABSORB_LOG_BOUND)
}

/// Entropic OT with uniform marginals.
///
/// Runs at most `max_inner_iters` row+column sweeps and stops early when
/// both L∞ marginal residuals are within `marginal_tol`. Individual plan
/// entries may underflow to zero for very small `ε`; a row or column whose
/// mass vanishes entirely is reported as [`Error::DegenerateKernel`].
pub fn sinkhorn(cost: &CostMatrix, config: &SinkhornConfig) -> Result<SinkhornOutput> {
    config.validate()?;
    let c = cost.view();
    let (m, n) = c.dim();
    let eps = config.epsilon;
    let a = 1.0 / m as f64;
    let b = 1.0 / n as f64;

    let mut kernel = Kernel::init(c, eps);
    let mut u = Array1::<f64>::ones(m);
    let mut v = Array1::<f64>::ones(n);
    let mut history = Vec::with_capacity(config.max_inner_iters);
    let mut iterations = 0;
    let mut residual = f64::INFINITY;

    // `kv = K·v` is carried from the end of one sweep, where it yields the
    // row residual, into the row step of the next.
    let mut kv = kernel.k.dot(&v);
    while iterations < config.max_inner_iters {
        iterations += 1;
        Zip::from(&mut u).and(&kv).for_each(|u, &s| *u = a / s);
        if out_of_range(&u) {
            kernel.absorb(c, eps, &mut u, &mut v);
            kv = kernel.k.dot(&v);
            Zip::from(&mut u).and(&kv).for_each(|u, &s| *u = a / s);
        }
        let ktu = transpose_dot(&kernel.k, &u);
        Zip::from(&mut v).and(&ktu).for_each(|v, &s| *v = b / s);
        if out_of_range(&v) {
            kernel.absorb(c, eps, &mut u, &mut v);
            let ktu = transpose_dot(&kernel.k, &u);
            Zip::from(&mut v).and(&ktu).for_each(|v, &s| *v = b / s);
        }
        if u.iter()
            .chain(v.iter())
            .any(|x| !x.is_finite() || *x <= 0.0)
        {
            return Err(Error::DegenerateKernel(format!(
                "scaling vectors became non-finite at sweep {iterations} (epsilon {eps:e})"
            )));
        }

        // Row marginals of diag(u)·K·diag(v) after the column step.
        kv = kernel.k.dot(&v);
        let (l1, linf) = u
            .iter()
            .zip(&kv)
            .fold((0.0, 0.0_f64), |(l1, linf), (ui, s)| {
                let d = (ui * s - a).abs();
                (l1 + d, linf.max(d))
            });
        history.push(l1);
        residual = linf;
        if linf <= config.marginal_tol {
            break;
        }
    }

    let mut plan = kernel.k;
    for (mut row, &ui) in plan.rows_mut().into_iter().zip(&u) {
        Zip::from(&mut row).and(&v).for_each(|t, &vj| *t *= ui * vj);
    }
    let row_mass = plan.sum_axis(Axis(1));
    let col_mass = plan.sum_axis(Axis(0));
    if row_mass
        .iter()
        .chain(col_mass.iter())
        .any(|s| !(s.is_finite() && *s > 0.0))
    {
        return Err(Error::DegenerateKernel(format!(
            "a row or column of the plan carries no mass (epsilon {eps:e})"
        )));
    }
    round_to_marginals(&mut plan, a, b);
    let neg_entropy = neg_entropy(plan.view());
    let value = linear_cost(c, plan.view()) + eps * neg_entropy;
    Ok(SinkhornOutput {
        plan: TransportPlan::from_array(plan),
        value,
        iterations,
        residual_history: history,
        residual,
        neg_entropy,
    })
}
