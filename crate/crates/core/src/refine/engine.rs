use std::time::Instant;

use ndarray::{Array1, Array2, Axis, Zip};

use super::{
    EpsilonRule, RefineConfig, RefineOutput, RefineTrace, StageTimings, TraceRecord,
    TransformMatrix,
};
use crate::error::{Error, Result};
use crate::linalg::{
    cosine_from_parts, gram, normalize_rows, regularized_inverse, ridge_shift, row_sq_norms,
};
use crate::ot::{
    auto_epsilon, linear_cost, sinkhorn, CostMatrix, CostMode, SinkhornConfig, TransportPlan,
};
use crate::tensor_io::{FlatFeatures, PrototypeBank};
use crate::Metric;

/// Widens query and bank to f64, unit-normalizing rows in cosine mode.
pub(crate) fn widen_pair(
    query: &FlatFeatures,
    bank: &PrototypeBank,
    metric: Metric,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if query.channels() != bank.channels() {
        return Err(Error::invalid(format!(
            "channel mismatch: query has {}, bank has {}",
            query.channels(),
            bank.channels()
        )));
    }
    let mut f = query.to_f64();
    let mut m = bank.to_f64();
    if metric == Metric::Cosine {
        normalize_rows(&mut f)?;
        normalize_rows(&mut m)?;
    }
    Ok((f, m))
}

/// Bank-side state shared read-only by every query: the (normalized) bank,
/// its Gram matrix `G`, the regularized inverse `G_δ⁻¹` and `G·G_δ⁻¹`.
///
/// Everything the optimizer needs is expressed through `G = M·Mᵀ` and
/// `F·Mᵀ`: the cross products `(W·M)_i · M_j` are `(W·G)_ij`, so once `F·Mᵀ`
/// is formed no step touches the channel dimension again.
#[derive(Debug, Clone)]
pub struct RefineEngine {
    metric: Metric,
    bank: Array2<f64>,
    gram: Array2<f64>,
    gram_inv: Array2<f64>,
    gain: Array2<f64>,
    shift: f64,
    bank_sq: Array1<f64>,
}

/// Per-query state: widened (normalized) features, `F·Mᵀ` and the
/// least-squares transform `W_0`.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub(crate) features: Array2<f64>,
    pub(crate) cross: Array2<f64>,
    pub(crate) init: Array2<f64>,
    pub(crate) sq_norms: Array1<f64>,
}

impl PreparedQuery {
    pub fn rows(&self) -> usize {
        self.features.nrows()
    }
}

fn frobenius_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a)
        .and(b)
        .fold(0.0, |acc, x, y| acc + (x - y) * (x - y))
        .sqrt()
}

impl RefineEngine {
    pub fn new(bank: &PrototypeBank, ridge: f64) -> Result<Self> {
        let metric = bank.metric();
        let mut m = bank.to_f64();
        if metric == Metric::Cosine {
            normalize_rows(&mut m)?;
        }
        let gram = gram(m.view());
        let gram_inv = regularized_inverse(&gram, ridge)?;
        let bank_sq = gram.diag().to_owned();
        let gain = gram.dot(&gram_inv);
        let shift = ridge_shift(&gram, ridge);
        Ok(Self {
            metric,
            bank: m,
            gram,
            gram_inv,
            gain,
            shift,
            bank_sq,
        })
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn bank_size(&self) -> usize {
        self.bank.nrows()
    }

    #[cfg(test)]
    pub(crate) fn bank(&self) -> &Array2<f64> {
        &self.bank
    }

    pub(crate) fn gram(&self) -> &Array2<f64> {
        &self.gram
    }

    pub(crate) fn gram_inv(&self) -> &Array2<f64> {
        &self.gram_inv
    }

    pub fn prepare(&self, query: &FlatFeatures) -> Result<PreparedQuery> {
        if query.channels() != self.bank.ncols() {
            return Err(Error::invalid(format!(
                "channel mismatch: query has {}, bank has {}",
                query.channels(),
                self.bank.ncols()
            )));
        }
        let mut features = query.to_f64();
        if self.metric == Metric::Cosine {
            normalize_rows(&mut features)?;
        }
        let cross = features.dot(&self.bank.t());
        let init = cross.dot(&self.gram_inv);
        let sq_norms = row_sq_norms(features.view());
        Ok(PreparedQuery {
            features,
            cross,
            init,
            sq_norms,
        })
    }

    pub fn initial_transform(&self, q: &PreparedQuery) -> Array2<f64> {
        q.init.clone()
    }

    /// `(F·Mᵀ + λ·T·G)·G_δ⁻¹`, row `i` divided by `1 + λ·Σ_j T_ij`,
    /// evaluated as `W_0 + λ·T·(G·G_δ⁻¹)`.
    pub fn update_transform(
        &self,
        q: &PreparedQuery,
        plan: &TransportPlan,
        lambda: f64,
    ) -> Result<Array2<f64>> {
        if plan.rows() != q.rows() || plan.cols() != self.bank_size() {
            return Err(Error::invalid(format!(
                "plan is {}x{}, expected {}x{}",
                plan.rows(),
                plan.cols(),
                q.rows(),
                self.bank_size()
            )));
        }
        let mut w = plan.view().dot(&self.gain);
        w.zip_mut_with(&q.init, |w, &w0| *w = w0 + lambda * *w);
        let row_mass = plan.row_sums();
        for (mut row, &mass) in w.axis_iter_mut(Axis(0)).zip(&row_mass) {
            let scale = 1.0 / (1.0 + lambda * mass);
            row.mapv_inplace(|v| v * scale);
        }
        Ok(w)
    }

    /// Squared norms `‖(W·M)_i‖²` from `P = W·G`.
    fn refined_sq_norms(w: &Array2<f64>, p: &Array2<f64>) -> Array1<f64> {
        Zip::from(w.rows())
            .and(p.rows())
            .map_collect(|wi, pi| wi.dot(&pi).max(0.0))
    }

    /// Cost between the refined prototypes `W·M` and the bank, plus `‖(W·M)_i‖²`.
    pub(crate) fn transform_cost(&self, w: &Array2<f64>) -> Result<(CostMatrix, Array1<f64>)> {
        self.cost_from_product(w, w.dot(&self.gram))
    }

    /// As [`Self::transform_cost`] with `P = W·G` supplied.
    fn cost_from_product(
        &self,
        w: &Array2<f64>,
        p: Array2<f64>,
    ) -> Result<(CostMatrix, Array1<f64>)> {
        let sq = Self::refined_sq_norms(w, &p);
        let mode = CostMode::from(self.metric);
        let mut cost = p;
        for (mut row, &sq_i) in cost.rows_mut().into_iter().zip(&sq) {
            Zip::from(&mut row)
                .and(&self.bank_sq)
                .for_each(|c, &sq_j| *c = mode.distance(*c, sq_i, sq_j));
        }
        Ok((CostMatrix::new(cost, mode)?, sq))
    }

    /// Reconstruction term from `F·Mᵀ` and `‖(W·M)_i‖²`.
    fn recon_term(&self, q: &PreparedQuery, w: &Array2<f64>, refined_sq: &Array1<f64>) -> f64 {
        let mut total = 0.0;
        for i in 0..q.rows() {
            let dot = w.row(i).dot(&q.cross.row(i));
            total += match self.metric {
                Metric::Euclidean => (q.sq_norms[i] + refined_sq[i] - 2.0 * dot).max(0.0),
                Metric::Cosine => {
                    0.5 * (1.0 - cosine_from_parts(dot, q.sq_norms[i], refined_sq[i]))
                }
            };
        }
        total
    }

    /// The alternating loop: Sinkhorn with `W` fixed, closed-form `W` with
    /// `T` fixed, `outer_iters` times.
    pub fn refine(&self, q: &PreparedQuery, config: &RefineConfig) -> Result<RefineOutput> {
        config.validate()?;
        if config.metric != self.metric {
            return Err(Error::invalid(format!(
                "engine was built for {} but refinement uses {}",
                self.metric.as_str(),
                config.metric.as_str()
            )));
        }
        let lambda = config.lambda;
        let mut timings = StageTimings::default();

        let start = Instant::now();
        let mut w = self.initial_transform(q);
        // W_0·G = F·Mᵀ·G_δ⁻¹·G = F·Mᵀ − δ'·W_0 since G_δ⁻¹·G = I − δ'·G_δ⁻¹.
        let mut p0 = q.cross.clone();
        p0.scaled_add(-self.shift, &w);
        let (mut cost, mut refined_sq) = self.cost_from_product(&w, p0)?;
        let epsilon = match config.epsilon {
            EpsilonRule::Auto => auto_epsilon(&cost),
            EpsilonRule::Fixed(eps) => eps,
        };
        let sk = SinkhornConfig {
            epsilon,
            max_inner_iters: config.inner_iters,
            marginal_tol: config.marginal_tol,
        };
        timings.init = start.elapsed();

        let mut initial_objective = f64::NAN;
        let mut records: Vec<TraceRecord> = Vec::with_capacity(config.outer_iters);
        let mut held: Option<(TransportPlan, f64)> = None;
        for _ in 0..config.outer_iters {
            let start = Instant::now();
            let solved = sinkhorn(&cost, &sk)?;
            timings.sinkhorn += start.elapsed();
            // A truncated solve can do worse than the plan already held; the
            // last record's OT term is that plan's value under the current cost.
            let improves = records.last().is_none_or(|r| solved.value <= r.ot);
            if improves {
                held = Some((solved.plan, solved.neg_entropy));
            }
            let (plan, neg_entropy) = held.as_ref().expect("first plan is always taken");
            if records.is_empty() {
                initial_objective = self.recon_term(q, &w, &refined_sq) + lambda * solved.value;
            }

            let start = Instant::now();
            let next = self.update_transform(q, plan, lambda)?;
            let w_change = frobenius_diff(&next, &w);
            w = next;
            (cost, refined_sq) = self.transform_cost(&w)?;
            let recon = self.recon_term(q, &w, &refined_sq);
            let ot = linear_cost(cost.view(), plan.view()) + epsilon * neg_entropy;
            records.push(TraceRecord {
                objective: recon + lambda * ot,
                recon,
                ot,
                w_change,
            });
            timings.w_update += start.elapsed();
        }
        let plan = held.expect("outer_iters >= 1").0;

        Ok(RefineOutput {
            transform: TransformMatrix::from_array(w),
            plan,
            trace: RefineTrace {
                initial_objective,
                records,
            },
            epsilon,
            refined_sq,
            timings,
        })
    }

    /// `W·M`, the refined prototypes.
    pub fn refined_bank(&self, w: &TransformMatrix) -> Array2<f64> {
        w.view().dot(&self.bank)
    }

    /// Patch scores `s_j = min_r dis(F_j, (W·M)_r)` without forming `W·M`:
    /// `F_j · (W·M)_r = (F·Mᵀ·Wᵀ)_jr`.
    pub fn score_patches(&self, q: &PreparedQuery, w: &TransformMatrix) -> Result<Array1<f64>> {
        if w.cols() != self.bank_size() || w.rows() == 0 {
            return Err(Error::invalid(format!(
                "transform is {}x{}, bank has {} prototypes",
                w.rows(),
                w.cols(),
                self.bank_size()
            )));
        }
        let w = w.view().to_owned();
        let p = w.dot(&self.gram);
        let refined_sq = Self::refined_sq_norms(&w, &p);
        Ok(self.scores_with_norms(q, &w, &refined_sq))
    }

    /// [`Self::score_patches`] for the output of [`Self::refine`], reusing
    /// the refined norms it already holds.
    pub fn score_refinement(&self, q: &PreparedQuery, out: &RefineOutput) -> Array1<f64> {
        let w = out.transform.view().to_owned();
        self.scores_with_norms(q, &w, &out.refined_sq)
    }

    /// Every score needs all `m²` products `F_j·(W·M)_r = (F·Mᵀ·Wᵀ)_jr`.
    /// They are first formed in single precision, where each carries an
    /// error of at most `κ·‖(F·Mᵀ)_j‖·‖W_r‖` with `κ = (n + 3)·u/(1 − (n + 3)·u)`
    /// for unit roundoff `u` (two rounding conversions plus an `n`-term dot
    /// product). Only pairs whose bounds reach the row's best upper bound are
    /// recomputed in double precision, so the minimum is the double-precision
    /// minimum.
    fn scores_with_norms(
        &self,
        q: &PreparedQuery,
        w: &Array2<f64>,
        refined_sq: &Array1<f64>,
    ) -> Array1<f64> {
        let inv_norm = |sq: f64| if sq > 0.0 { 1.0 / sq.sqrt() } else { 0.0 };
        // Minimize key_jr = offset_r − weight_r·d_jr over r.
        let (offset, weight) = match self.metric {
            Metric::Euclidean => (refined_sq.clone(), Array1::from_elem(refined_sq.len(), 2.0)),
            Metric::Cosine => (Array1::zeros(refined_sq.len()), refined_sq.mapv(inv_norm)),
        };
        let unit = f64::from(f32::EPSILON) / 2.0;
        let terms = (self.bank_size() + 3) as f64 * unit;
        let kappa = terms / (1.0 - terms);
        let w_norms = row_sq_norms(w.view()).mapv(f64::sqrt);
        let slack_r = &weight * &w_norms * kappa;

        let approx = q.cross.mapv(|v| v as f32).dot(&w.mapv(|v| v as f32).t());
        let (offset, weight, slack_r) = (
            offset.as_slice().expect("owned"),
            weight.as_slice().expect("owned"),
            slack_r.as_slice().expect("owned"),
        );
        let mut keys = vec![0.0; w.nrows()];
        let best: Array1<f64> = approx
            .rows()
            .into_iter()
            .zip(q.cross.rows())
            .map(|(row, b_j)| {
                let b_norm = b_j.dot(&b_j).sqrt();
                for (((k, &d), &o), &wt) in keys.iter_mut().zip(row).zip(offset).zip(weight) {
                    *k = o - wt * f64::from(d);
                }
                let upper = lane_min(&keys, slack_r, b_norm);
                let mut best = f64::INFINITY;
                for (r, (&k, &sl)) in keys.iter().zip(slack_r).enumerate() {
                    if k - sl * b_norm <= upper {
                        best = best.min(offset[r] - weight[r] * b_j.dot(&w.row(r)));
                    }
                }
                best
            })
            .collect();
        match self.metric {
            Metric::Euclidean => Zip::from(&best)
                .and(&q.sq_norms)
                .map_collect(|&k, &fsq| (fsq + k).max(0.0)),
            Metric::Cosine => Zip::from(&best)
                .and(&q.sq_norms)
                .map_collect(|&k, &fsq| 0.5 * (1.0 - (-k * inv_norm(fsq)).clamp(-1.0, 1.0))),
        }
    }
}

/// `min_r keys[r] + slack[r]·scale`, reduced over four independent lanes.
fn lane_min(keys: &[f64], slack: &[f64], scale: f64) -> f64 {
    let mut lanes = [f64::INFINITY; 4];
    let mut kc = keys.chunks_exact(4);
    let mut sc = slack.chunks_exact(4);
    for (k, s) in (&mut kc).zip(&mut sc) {
        for l in 0..4 {
            let v = k[l] + s[l] * scale;
            lanes[l] = if v < lanes[l] { v } else { lanes[l] };
        }
    }
    let mut upper = lanes.into_iter().fold(f64::INFINITY, f64::min);
    for (&k, &s) in kc.remainder().iter().zip(sc.remainder()) {
        upper = upper.min(k + s * scale);
    }
    upper
}
