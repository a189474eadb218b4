use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planted-outlier recipe: bank and inlier rows are standard normal, outlier
/// rows are inliers shifted by `shift` along channel 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    /// Query rows per image.
    pub m: usize,
    /// Bank rows.
    pub n: usize,
    pub c: usize,
    /// Shifted rows in each anomalous query.
    pub outliers: usize,
    pub shift: f64,
}

impl SynthSpec {
    /// 64-row bank, 64-row queries with 4 outliers, 16 channels, shift 6.
    pub fn outlier_suite(seed: u64) -> Self {
        Self {
            seed,
            m: 64,
            n: 64,
            c: 16,
            outliers: 4,
            shift: 6.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.c == 0 {
            return Err(Error::invalid(format!(
                "synthetic dims must be positive, got m={} n={} c={}",
                self.m, self.n, self.c
            )));
        }
        if self.outliers >= self.m {
            return Err(Error::invalid(format!(
                "outlier count {} must be below m = {}",
                self.outliers, self.m
            )));
        }
        if !self.shift.is_finite() {
            return Err(Error::invalid("shift must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthQuery {
    pub features: Array2<f32>,
    /// Sorted indices of the shifted rows.
    pub outliers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthInstance {
    pub bank: Array2<f32>,
    pub query: Array2<f32>,
    pub outliers: Vec<usize>,
}

/// One bank with several query images drawn after it from the same stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub bank: Array2<f32>,
    pub queries: Vec<SynthQuery>,
}

fn normal_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || {
        rand::Rng::sample::<f64, _>(rng, StandardNormal) as f32
    })
}

fn draw_query(rng: &mut ChaCha8Rng, spec: &SynthSpec, outliers: usize) -> SynthQuery {
    let mut features = normal_rows(rng, spec.m, spec.c);
    let mut order: Vec<usize> = (0..spec.m).collect();
    order.shuffle(rng);
    let mut chosen = order[..outliers].to_vec();
    chosen.sort_unstable();
    for &i in &chosen {
        features[[i, 0]] = (f64::from(features[[i, 0]]) + spec.shift) as f32;
    }
    SynthQuery {
        features,
        outliers: chosen,
    }
}

/// Bank plus `normal` outlier-free queries followed by `anomalous` queries
/// with `spec.outliers` shifted rows each.
pub fn synth_dataset(spec: &SynthSpec, normal: usize, anomalous: usize) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bank = normal_rows(&mut rng, spec.n, spec.c);
    let queries = (0..normal)
        .map(|_| 0)
        .chain((0..anomalous).map(|_| spec.outliers))
        .map(|k| draw_query(&mut rng, spec, k))
        .collect();
    Ok(SynthDataset { bank, queries })
}

/// A single bank and query with `spec.outliers` planted rows.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthInstance> {
    let mut data = synth_dataset(spec, 0, 1)?;
    let query = data.queries.pop().expect("one query requested");
    Ok(SynthInstance {
        bank: data.bank,
        query: query.features,
        outliers: query.outliers,
    })
}
