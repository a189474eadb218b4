//! Greedy farthest-first (k-center) selection of the prototype bank.

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{normalize_rows_f32, FlatFeatures, PrototypeBank};
use crate::Metric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRule {
    /// First point drawn uniformly from a ChaCha8 stream seeded with the config seed.
    SeededRandom,
    IndexZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoresetConfig {
    pub ratio: f64,
    pub seed: u64,
    pub start_rule: StartRule,
}

impl Default for CoresetConfig {
    fn default() -> Self {
        Self {
            ratio: 0.05,
            seed: 0,
            start_rule: StartRule::SeededRandom,
        }
    }
}

impl CoresetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "coreset ratio must lie in (0, 1], got {}",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// `max(1, round(ratio·rows))`, never more than `rows`.
pub fn target_size(rows: usize, ratio: f64) -> usize {
    ((ratio * rows as f64).round() as usize).clamp(1, rows.max(1))
}

#[derive(Debug, Clone)]
pub struct CoresetSelection {
    pub bank: PrototypeBank,
    /// Selected row indices in selection order.
    pub indices: Vec<usize>,
}

fn sq_dist(a: ArrayView1<'_, f32>, b: ArrayView1<'_, f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Selects `target_size(rows, ratio)` rows by farthest-first traversal.
///
/// After the start point, each step adds the unselected row whose squared
/// Euclidean distance to its nearest selected row is largest, ties going to
/// the lowest index. In cosine mode rows are unit-normalized first and the
/// bank holds the normalized copies.
pub fn select_coreset(
    features: &FlatFeatures,
    metric: Metric,
    config: &CoresetConfig,
) -> Result<CoresetSelection> {
    config.validate()?;
    let mut points: Array2<f32> = features.view().to_owned();
    if metric == Metric::Cosine {
        normalize_rows_f32(&mut points)?;
    }
    let rows = points.nrows();
    let target = target_size(rows, config.ratio);

    let start = match config.start_rule {
        StartRule::IndexZero => 0,
        StartRule::SeededRandom => ChaCha8Rng::seed_from_u64(config.seed).gen_range(0..rows),
    };

    let mut indices = Vec::with_capacity(target);
    let mut selected = vec![false; rows];
    let mut min_dist = vec![f64::INFINITY; rows];
    let mut last = start;
    indices.push(start);
    selected[start] = true;

    while indices.len() < target {
        let anchor = points.row(last);
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in points.axis_iter(Axis(0)).enumerate() {
            if selected[i] {
                continue;
            }
            let d = sq_dist(row, anchor);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if best.is_none_or(|(_, bd)| min_dist[i] > bd) {
                best = Some((i, min_dist[i]));
            }
        }
        let (next, _) = best.expect("target never exceeds row count");
        indices.push(next);
        selected[next] = true;
        last = next;
    }

    let bank_rows = points.select(Axis(0), &indices);
    let bank = PrototypeBank::from_validated(bank_rows, metric);
    Ok(CoresetSelection { bank, indices })
}
