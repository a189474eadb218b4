use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refine::{RefineConfig, RefineEngine};
use crate::tensor_io::{FlatFeatures, PrototypeBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchDims {
    pub m: usize,
    pub n: usize,
    pub c: usize,
}

impl BenchDims {
    /// 32x32 patch grid, 102 prototypes, 640 channels.
    pub fn full_size() -> Self {
        Self {
            m: 1024,
            n: 102,
            c: 640,
        }
    }
}

/// Median and 95th percentile over repeats, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl StageStats {
    fn from_samples(samples: &[Duration]) -> Self {
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let len = ms.len();
        let median = if len % 2 == 1 {
            ms[len / 2]
        } else {
            0.5 * (ms[len / 2 - 1] + ms[len / 2])
        };
        let p95 = ms[((0.95 * len as f64).ceil() as usize).clamp(1, len) - 1];
        Self {
            median_ms: median,
            p95_ms: p95,
        }
    }
}

/// Per-image timings of refinement plus scoring. Bank preprocessing (Gram
/// matrix and its inverse) is shared by every query and excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub dims: BenchDims,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub repeats: usize,
    pub init: StageStats,
    pub sinkhorn: StageStats,
    pub w_update: StageStats,
    pub scoring: StageStats,
    pub total: StageStats,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || {
        rand::Rng::sample::<f64, _>(rng, StandardNormal) as f32
    })
}

/// Times `repeats` refinements of fresh random queries against one random
/// bank, after one untimed warm-up round.
pub fn bench_refine(
    dims: BenchDims,
    config: &RefineConfig,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repeats < 10 {
        return Err(Error::invalid(format!(
            "repeats must be >= 10, got {repeats}"
        )));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = PrototypeBank::new(normal_matrix(&mut rng, dims.n, dims.c), config.metric)?;
    let engine = RefineEngine::new(&bank, config.ridge)?;

    let mut stages: [Vec<Duration>; 5] = Default::default();
    for round in 0..=repeats {
        let query = FlatFeatures::new(normal_matrix(&mut rng, dims.m, dims.c))?;
        let start = Instant::now();
        let q = engine.prepare(&query)?;
        let prepared = start.elapsed();
        let out = engine.refine(&q, config)?;
        let score_start = Instant::now();
        let scores = engine.score_refinement(&q, &out);
        let scoring = score_start.elapsed();
        let total = start.elapsed();
        std::hint::black_box(scores);
        if round == 0 {
            continue;
        }
        let t = out.timings;
        for (bucket, sample) in
            stages
                .iter_mut()
                .zip([prepared + t.init, t.sinkhorn, t.w_update, scoring, total])
        {
            bucket.push(sample);
        }
    }
    let [init, sinkhorn, w_update, scoring, total] = stages.map(|s| StageStats::from_samples(&s));
    Ok(BenchReport {
        dims,
        outer_iters: config.outer_iters,
        inner_iters: config.inner_iters,
        repeats,
        init,
        sinkhorn,
        w_update,
        scoring,
        total,
    })
}
