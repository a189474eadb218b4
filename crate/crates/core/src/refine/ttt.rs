//! Mean-alignment baseline: the transport term is replaced by
//! `λ·‖μ_M − mean_i (W·M)_i‖²`, which only matches first moments.
//!
//! Setting the gradient for row `i` to zero with the other rows held fixed
//! gives
//!
//! ```text
//! W_i = [2m²·F_i + 2mλ·μ_M − 2λ·(Σ_r W_r·M − W_i·M)]·Mᵀ·G_δ⁻¹ / (2m² + 2λ)
//! ```
//!
//! which has `W` on both sides. All rows are updated at once (Jacobi). The
//! coupling `(J − I)` has eigenvalue `m − 1` along the all-ones direction and
//! `−1` on its complement, so the Jacobi map, scaled by `−λ/(m² + λ)`, acts as
//! `ρ₁ = −λ(m − 1)/(m² + λ)` on the row mean of the step and as
//! `ρ₂ = λ/(m² + λ)` on the deviations from it. Each part is relaxed by its
//! own factor `1/(1 − ρ)`, which cancels the coupling up to the ridge term
//! and keeps the iteration contracting for every `λ ≥ 0`.

use ndarray::{Array1, Array2, Axis, Zip};

use super::engine::RefineEngine;
use super::TransformMatrix;
use crate::error::{Error, Result};
use crate::tensor_io::{FlatFeatures, PrototypeBank};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TttConfig {
    pub lambda: f64,
    pub ridge: f64,
    pub fp_iters: usize,
    pub fp_tol: f64,
}

impl TttConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            ridge: 1e-6,
            fp_iters: 100,
            fp_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TttOutput {
    pub refined: Array2<f64>,
    pub transform: TransformMatrix,
    pub iterations: usize,
    /// `‖W_{t+1} − W_t‖_F` at the last iteration.
    pub residual: f64,
}

/// Relaxation factors for the row-mean part and the deviation part of a step.
fn relaxation(m: usize, lambda: f64) -> (f64, f64) {
    let m2 = (m * m) as f64;
    let rho_mean = -lambda * (m as f64 - 1.0) / (m2 + lambda);
    let rho_rest = lambda / (m2 + lambda);
    (1.0 / (1.0 - rho_mean), 1.0 / (1.0 - rho_rest))
}

impl RefineEngine {
    /// Solves the mean-alignment stationarity condition by relaxed fixed-point
    /// iteration from the least-squares transform. Returns the transform, the
    /// number of iterations and the final residual.
    pub fn ttt_transform(
        &self,
        q: &super::PreparedQuery,
        lambda: f64,
        fp_iters: usize,
        fp_tol: f64,
    ) -> Result<(Array2<f64>, usize, f64)> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        if fp_iters == 0 || !(fp_tol > 0.0) {
            return Err(Error::invalid("fp_iters must be >= 1 and fp_tol > 0"));
        }
        let m = q.rows();
        let mf = m as f64;
        let gram = self.gram();
        let gram_inv = self.gram_inv();
        // μ_M·Mᵀ: column means of the Gram matrix.
        let mean_gram: Array1<f64> = gram.mean_axis(Axis(0)).expect("bank is non-empty");
        let coupling = lambda / (mf * mf);
        let denom = 1.0 + coupling;
        let (omega_mean, omega_rest) = relaxation(m, lambda);

        let mut constant = q.cross.clone();
        for mut row in constant.axis_iter_mut(Axis(0)) {
            row.scaled_add(lambda / mf, &mean_gram);
        }

        let mut w = self.initial_transform(q);
        let mut residual = f64::INFINITY;
        for iter in 1..=fp_iters {
            let wg = w.dot(gram);
            let sum_g = wg.sum_axis(Axis(0));
            let mut rhs = constant.clone();
            Zip::from(rhs.rows_mut())
                .and(wg.rows())
                .for_each(|mut r, own| {
                    Zip::from(&mut r)
                        .and(&sum_g)
                        .and(own)
                        .for_each(|r, &s, &o| {
                            *r -= coupling * (s - o);
                        });
                });
            let mut step = rhs.dot(gram_inv);
            step.mapv_inplace(|v| v / denom);
            step -= &w;
            let step_mean = step.mean_axis(Axis(0)).expect("query is non-empty");
            for mut row in step.axis_iter_mut(Axis(0)) {
                Zip::from(&mut row).and(&step_mean).for_each(|s, &mu| {
                    *s = omega_rest * (*s - mu) + omega_mean * mu;
                });
            }
            residual = step.iter().map(|v| v * v).sum::<f64>().sqrt();
            w += &step;
            if residual <= fp_tol {
                return Ok((w, iter, residual));
            }
        }
        Err(Error::NonConvergence {
            iterations: fp_iters,
            residual,
        })
    }
}

/// Mean-alignment refinement of one query.
pub fn ttt_refine(
    query: &FlatFeatures,
    bank: &PrototypeBank,
    config: &TttConfig,
) -> Result<TttOutput> {
    let engine = RefineEngine::new(bank, config.ridge)?;
    let q = engine.prepare(query)?;
    let (w, iterations, residual) =
        engine.ttt_transform(&q, config.lambda, config.fp_iters, config.fp_tol)?;
    let transform = TransformMatrix::from_array(w);
    Ok(TttOutput {
        refined: engine.refined_bank(&transform),
        transform,
        iterations,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{fd_grad_norm, uniform};
    use super::*;
    use crate::Metric;

    fn instance(m: usize, n: usize, c: usize, seed: u64) -> (FlatFeatures, PrototypeBank) {
        (
            FlatFeatures::new(uniform(m, c, seed)).unwrap(),
            PrototypeBank::new(uniform(n, c, seed + 1000), Metric::Euclidean).unwrap(),
        )
    }

    fn mean_gap(w: &Array2<f64>, bank: &Array2<f64>) -> f64 {
        let refined_mean = w.dot(bank).mean_axis(Axis(0)).unwrap();
        let bank_mean = bank.mean_axis(Axis(0)).unwrap();
        (&refined_mean - &bank_mean).mapv(|v| v * v).sum().sqrt()
    }

    #[test]
    fn single_row_query_converges() {
        let (q, bank) = instance(1, 3, 5, 1);
        let out = ttt_refine(&q, &bank, &TttConfig::new(0.3)).unwrap();
        assert!(out.residual <= 1e-8);
        assert_eq!(out.refined.dim(), (1, 5));
    }

    #[test]
    fn fixed_point_is_stationary() {
        let (m, n, c, lambda) = (6, 4, 5, 0.3);
        let (q, bank) = instance(m, n, c, 2);
        let mut cfg = TttConfig::new(lambda);
        cfg.ridge = 0.0;
        let out = ttt_refine(&q, &bank, &cfg).unwrap();
        let (f, mb) = (q.to_f64(), bank.to_f64());
        let mu = mb.mean_axis(Axis(0)).unwrap();
        let obj = |w: &Array2<f64>| {
            let r = w.dot(&mb);
            let recon: f64 = (&f - &r).mapv(|v| v * v).sum();
            let gap = &mu - &r.mean_axis(Axis(0)).unwrap();
            recon + lambda * gap.mapv(|v| v * v).sum()
        };
        let w = out.transform.into_array();
        let total = obj(&w);
        let grad = fd_grad_norm(&w, 1e-4, obj);
        assert!(grad <= 1e-3 * (1.0 + total.abs()), "gradient norm {grad}");
    }

    #[test]
    fn large_lambda_closes_mean_gap() {
        let (q, bank) = instance(8, 5, 6, 3);
        let mb = bank.to_f64();
        let base = ttt_refine(&q, &bank, &TttConfig::new(0.0)).unwrap();
        let strong = ttt_refine(&q, &bank, &TttConfig::new(1e3)).unwrap();
        let (g0, g1) = (
            mean_gap(&base.transform.into_array(), &mb),
            mean_gap(&strong.transform.into_array(), &mb),
        );
        assert!(g1 <= g0, "{g1} vs {g0}");
        assert!(g1 < 1e-2 * g0.max(1e-12) + 1e-6);
    }

    #[test]
    fn budget_exhaustion_reports_residual() {
        let (q, bank) = instance(8, 5, 6, 4);
        let mut cfg = TttConfig::new(50.0);
        cfg.fp_iters = 1;
        cfg.fp_tol = 1e-300;
        match ttt_refine(&q, &bank, &cfg) {
            Err(Error::NonConvergence {
                iterations,
                residual,
            }) => {
                assert_eq!(iterations, 1);
                assert!(residual > 0.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn relaxation_factors() {
        assert_eq!(relaxation(3, 0.0), (1.0, 1.0));
        assert_eq!(relaxation(1, 5.0).0, 1.0);
        let (mean, rest) = relaxation(4, 100.0);
        assert!(mean < 1.0 && rest > 1.0);
    }
}
