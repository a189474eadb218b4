//! Anomaly score maps and image-level scores.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::ot::CostMode;
use crate::tensor_io::FlatFeatures;
use crate::Metric;

/// Default Gaussian smoothing width in pixels.
pub const DEFAULT_SIGMA: f64 = 4.0;

/// A grid of nonnegative anomaly scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    data: Array2<f64>,
}

impl ScoreMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("score map must be non-empty"));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("score map entries must be finite and >= 0"));
        }
        Ok(Self { data })
    }

    /// Reshapes per-patch scores into an `height x width` grid.
    pub fn from_patches(scores: Array1<f64>, height: usize, width: usize) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::invalid(format!(
                "{} patch scores do not fill a {height}x{width} grid",
                scores.len()
            )));
        }
        Self::new(
            scores
                .into_shape_with_order((height, width))
                .expect("length checked"),
        )
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Single-precision copy for FTZ output.
    pub fn to_flat(&self) -> FlatFeatures {
        FlatFeatures::new(self.data.mapv(|v| v as f32)).expect("score map is finite and non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ImageScore(pub f64);

/// `s_j = min_r dis(query_j, refined_r)`, reshaped to `height x width`.
pub fn score_map(
    query: &FlatFeatures,
    refined: ArrayView2<'_, f64>,
    metric: Metric,
    height: usize,
    width: usize,
) -> Result<ScoreMap> {
    if query.rows() != height * width {
        return Err(Error::invalid(format!(
            "query has {} rows, grid {height}x{width} needs {}",
            query.rows(),
            height * width
        )));
    }
    if query.channels() != refined.ncols() {
        return Err(Error::invalid(format!(
            "channel mismatch: query has {}, refined bank has {}",
            query.channels(),
            refined.ncols()
        )));
    }
    if refined.nrows() == 0 {
        return Err(Error::invalid("refined bank is empty"));
    }
    let q = query.to_f64();
    let mode = CostMode::from(metric);
    let refined_sq: Vec<f64> = refined.rows().into_iter().map(|r| r.dot(&r)).collect();
    let scores = q.rows().into_iter().map(|f| {
        let fsq = f.dot(&f);
        refined
            .rows()
            .into_iter()
            .zip(&refined_sq)
            .map(|(r, &rsq)| match metric {
                Metric::Euclidean => f.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum(),
                Metric::Cosine => mode.distance(f.dot(&r), fsq, rsq),
            })
            .fold(f64::INFINITY, f64::min)
    });
    ScoreMap::from_patches(scores.collect(), height, width)
}

/// Maximum over the map.
pub fn image_score(map: &ScoreMap) -> ImageScore {
    ImageScore(map.max())
}

/// Corner-aligned bilinear resampling to `height x width`.
///
/// Output pixel `y` samples source row `y·(h − 1)/(H − 1)` (0 when `H = 1`),
/// and likewise for columns.
pub fn upsample_bilinear(map: &ScoreMap, height: usize, width: usize) -> Result<ScoreMap> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "target size must be positive, got {height}x{width}"
        )));
    }
    let (h, w) = (map.height(), map.width());
    let src = map.view();
    let coords = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|k| {
                let pos = if out > 1 {
                    k as f64 * (len - 1) as f64 / (out - 1) as f64
                } else {
                    0.0
                };
                let lo = (pos.floor() as usize).min(len - 1);
                let hi = (lo + 1).min(len - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = coords(height, h);
    let cols = coords(width, w);
    let data = Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, ty) = rows[y];
        let (x0, x1, tx) = cols[x];
        let top = src[[y0, x0]] * (1.0 - tx) + src[[y0, x1]] * tx;
        let bottom = src[[y1, x0]] * (1.0 - tx) + src[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    });
    ScoreMap::new(data)
}

/// Normalized Gaussian taps for offsets `−r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "sigma must be finite and > 0, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(idx: i64, len: usize) -> usize {
    let len = len as i64;
    let period = 2 * len;
    let mut i = idx.rem_euclid(period);
    if i >= len {
        i = period - 1 - i;
    }
    i as usize
}

fn convolve_axis(src: &Array2<f64>, kernel: &[f64], along_rows: bool) -> Array2<f64> {
    let radius = (kernel.len() / 2) as i64;
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &tap)| {
                let off = k as i64 - radius;
                let v = if along_rows {
                    src[[y, reflect(x as i64 + off, w)]]
                } else {
                    src[[reflect(y as i64 + off, h), x]]
                };
                tap * v
            })
            .sum()
    })
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_smooth(map: &ScoreMap, sigma: f64) -> Result<ScoreMap> {
    let kernel = gaussian_kernel(sigma)?;
    let horizontal = convolve_axis(&map.data, &kernel, true);
    let both = convolve_axis(&horizontal, &kernel, false);
    ScoreMap::new(both.mapv(|v| v.max(0.0)))
}

/// `½(s₀ + max_j s_j)` for an external zero-shot score `s₀ ∈ [0, 1]`.
pub fn combine_zero_shot(s_zero: f64, map: &ScoreMap) -> Result<ImageScore> {
    if !(0.0..=1.0).contains(&s_zero) {
        return Err(Error::invalid(format!(
            "zero-shot score must lie in [0, 1], got {s_zero}"
        )));
    }
    Ok(ImageScore(0.5 * (s_zero + map.max())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn map(data: Array2<f64>) -> ScoreMap {
        ScoreMap::new(data).unwrap()
    }

    #[test]
    fn verbatim_rows_score_zero() {
        let q = FlatFeatures::new(array![[1.0f32, 2.0], [3.0, -1.0]]).unwrap();
        let refined = array![[3.0, -1.0], [9.0, 9.0], [1.0, 2.0]];
        let s = score_map(&q, refined.view(), Metric::Euclidean, 1, 2).unwrap();
        assert_eq!(s.view().iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_prototype_offsets() {
        let q = FlatFeatures::new(array![[1.0f32, 1.0], [1.0, 3.0]]).unwrap();
        let refined = array![[1.0, 1.0]];
        let s = score_map(&q, refined.view(), Metric::Euclidean, 2, 1).unwrap();
        assert_eq!(s.view().iter().copied().collect::<Vec<_>>(), vec![0.0, 4.0]);
    }

    #[test]
    fn cosine_scores_ignore_query_scale() {
        let base = array![[1.0f32, 2.0, 0.5], [-1.0, 0.0, 3.0]];
        let refined = array![[0.3, 0.1, 0.9], [1.0, -1.0, 0.0]];
        let a = score_map(
            &FlatFeatures::new(base.clone()).unwrap(),
            refined.view(),
            Metric::Cosine,
            2,
            1,
        )
        .unwrap();
        let b = score_map(
            &FlatFeatures::new(base * 7.0).unwrap(),
            refined.view(),
            Metric::Cosine,
            2,
            1,
        )
        .unwrap();
        for (x, y) in a.view().iter().zip(b.view()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn score_map_shape_errors() {
        let q = FlatFeatures::new(array![[1.0f32, 1.0]]).unwrap();
        assert!(score_map(&q, array![[1.0, 1.0]].view(), Metric::Euclidean, 2, 1).is_err());
        assert!(score_map(&q, array![[1.0]].view(), Metric::Euclidean, 1, 1).is_err());
    }

    #[test]
    fn image_score_is_max() {
        assert_eq!(image_score(&map(Array2::zeros((2, 2)))).0, 0.0);
        assert_eq!(image_score(&map(array![[0.0, 4.0]])).0, 4.0);
        let base = map(array![[0.5, 1.5], [0.25, 3.0]]);
        let shifted = map(base.view().mapv(|v| v + 2.0));
        assert_eq!(image_score(&shifted).0, image_score(&base).0 + 2.0);
    }

    #[test]
    fn bilinear_corner_aligned() {
        let up = upsample_bilinear(&map(array![[0.0, 1.0]]), 1, 4).unwrap();
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (x, e) in up.view().iter().zip(expected) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_constant_and_single_pixel() {
        let c = upsample_bilinear(&map(Array2::from_elem((3, 2), 2.5)), 7, 9).unwrap();
        assert!(c.view().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        let s = upsample_bilinear(&map(array![[1.75]]), 4, 5).unwrap();
        assert!(s.view().iter().all(|&v| v == 1.75));
        assert!(upsample_bilinear(&map(array![[1.0]]), 0, 5).is_err());
    }

    #[test]
    fn kernel_is_normalized() {
        for sigma in [0.3, 1.0, 4.0, 7.5] {
            let k = gaussian_kernel(sigma).unwrap();
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(gaussian_kernel(0.0).is_err());
    }

    #[test]
    fn smoothing_preserves_constants() {
        let s = gaussian_smooth(&map(Array2::from_elem((5, 6), 0.75)), 4.0).unwrap();
        assert!(s.view().iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn impulse_response_is_sampled_gaussian() {
        let sigma = 1.5;
        let mut impulse = Array2::zeros((41, 41));
        impulse[[20, 20]] = 1.0;
        let s = gaussian_smooth(&map(impulse), sigma).unwrap();
        let radius = (3.0 * sigma).ceil() as i64;
        let z: f64 = (-radius..=radius)
            .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
            .sum();
        let g = |k: i64| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp() / z;
        for k in 0..=2 {
            let got = s.view()[[20, 20 + k as usize]];
            assert!((got - g(0) * g(k)).abs() < 1e-15, "offset {k}");
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 3)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 2, 1, 0, 0]);
    }

    #[test]
    fn zero_shot_mean() {
        assert_eq!(combine_zero_shot(0.0, &map(array![[0.0]])).unwrap().0, 0.0);
        assert_eq!(combine_zero_shot(1.0, &map(array![[1.0]])).unwrap().0, 1.0);
        assert!((combine_zero_shot(0.3, &map(array![[0.1, 0.5]])).unwrap().0 - 0.4).abs() < 1e-15);
        assert!(combine_zero_shot(1.2, &map(array![[0.1]])).is_err());
    }
}
