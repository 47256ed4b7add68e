//! 2D Gaussian kernel density estimation, mode seeking, and the coordinate
//! aggregation strategies used by the crop and voting stages.
//!
//! The kernel bandwidth `variance` is interpreted in frame-normalized
//! coordinates (u = x/W, v = y/H), so the default 0.01 corresponds to a ~10%
//! bandwidth regardless of image resolution. Densities use the expectation
//! (mean) form of the kernel sum, so values fall in (0, 1].

use crate::geometry::{ImageDims, NormCoord, PixelCoord};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    #[error("aggregation requires at least one sample")]
    EmptySampleSet,
}

/// Bandwidth and mode-search settings for the Gaussian KDE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeConfig {
    /// Isotropic kernel variance in normalized-coordinate units.
    pub variance: f64,
    pub mean_shift_max_iters: u32,
    /// Convergence threshold on the mean-shift step, normalized units.
    pub mean_shift_tol: f64,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self {
            variance: 0.01,
            mean_shift_max_iters: 50,
            mean_shift_tol: 1e-6,
        }
    }
}

/// Prediction samples sharing a coordinate frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub points: Vec<PixelCoord>,
    pub frame: ImageDims,
}

impl SampleSet {
    pub fn new(points: Vec<PixelCoord>, frame: ImageDims) -> Self {
        Self { points, frame }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    fn normalized(&self) -> Vec<NormCoord> {
        self.points.iter().map(|p| p.normalize(self.frame)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationStrategy {
    Kde,
    Center,
    Medoid,
}

impl std::str::FromStr for AggregationStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "kde" => Ok(Self::Kde),
            "center" => Ok(Self::Center),
            "medoid" => Ok(Self::Medoid),
            other => Err(format!("unknown strategy '{other}' (expected kde|center|medoid)")),
        }
    }
}

impl std::fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Kde => write!(f, "kde"),
            Self::Center => write!(f, "center"),
            Self::Medoid => write!(f, "medoid"),
        }
    }
}

fn kernel(d_sq: f64, variance: f64) -> f64 {
    (-d_sq / (2.0 * variance)).exp()
}

fn density_norm(z: NormCoord, samples: &[NormCoord], variance: f64) -> f64 {
    let sum: f64 = samples.iter().map(|c| kernel(z.dist_sq(c), variance)).sum();
    sum / samples.len() as f64
}

/// Mean of unnormalized isotropic Gaussian kernels centered at the samples,
/// evaluated at `z`. Both `z` and the samples are normalized by the sample
/// frame before kernel evaluation; the result lies in (0, 1].
pub fn kde_density_at(
    z: PixelCoord,
    samples: &SampleSet,
    cfg: &KdeConfig,
) -> Result<f64, DensityError> {
    if samples.is_empty() {
        return Err(DensityError::EmptySampleSet);
    }
    let zn = z.normalize(samples.frame);
    Ok(density_norm(zn, &samples.normalized(), cfg.variance))
}

fn mean_shift(start: NormCoord, norm: &[NormCoord], cfg: &KdeConfig) -> NormCoord {
    let mut z = start;
    for _ in 0..cfg.mean_shift_max_iters {
        let mut wsum = 0.0;
        let mut u = 0.0;
        let mut v = 0.0;
        for c in norm {
            let w = kernel(z.dist_sq(c), cfg.variance);
            wsum += w;
            u += w * c.u;
            v += w * c.v;
        }
        let next = NormCoord {
            u: u / wsum,
            v: v / wsum,
        };
        let step = next.dist_sq(&z).sqrt();
        z = next;
        if step < cfg.mean_shift_tol {
            break;
        }
    }
    z
}

/// Maximizer of the sample density: run Gaussian mean-shift from every sample
/// and keep the converged point of highest density. A single ascent from the
/// densest sample can stall on a secondary mode, so every basin gets a start;
/// near-ties (within 1e-12) resolve to the lowest sample index.
pub fn kde_mode(samples: &SampleSet, cfg: &KdeConfig) -> Result<PixelCoord, DensityError> {
    if samples.is_empty() {
        return Err(DensityError::EmptySampleSet);
    }
    let norm = samples.normalized();
    let mut best_idx = 0usize;
    let mut best_z = norm[0];
    let mut best_density = f64::NEG_INFINITY;
    for (i, &start) in norm.iter().enumerate() {
        let z = mean_shift(start, &norm, cfg);
        let d = density_norm(z, &norm, cfg.variance);
        if d > best_density + 1e-12 {
            best_density = d;
            best_idx = i;
            best_z = z;
        }
    }
    // If the winning ascent never left its initializing sample, return that
    // sample's exact pixel coordinate; denormalizing would reintroduce
    // rounding drift.
    if best_z.dist_sq(&norm[best_idx]).sqrt() < cfg.mean_shift_tol {
        return Ok(samples.points[best_idx]);
    }
    Ok(best_z.denormalize(samples.frame))
}

/// Component-wise arithmetic mean of the samples.
pub fn aggregate_center(samples: &SampleSet) -> Result<PixelCoord, DensityError> {
    if samples.is_empty() {
        return Err(DensityError::EmptySampleSet);
    }
    let n = samples.len() as f64;
    let x: f64 = samples.points.iter().map(|p| p.x).sum();
    let y: f64 = samples.points.iter().map(|p| p.y).sum();
    Ok(PixelCoord::new(x / n, y / n))
}

/// The sample minimizing the sum of Euclidean distances to all samples; ties
/// broken by lowest index.
pub fn aggregate_medoid(samples: &SampleSet) -> Result<PixelCoord, DensityError> {
    if samples.is_empty() {
        return Err(DensityError::EmptySampleSet);
    }
    let mut best = 0usize;
    let mut best_sum = f64::INFINITY;
    for (i, a) in samples.points.iter().enumerate() {
        let sum: f64 = samples
            .points
            .iter()
            .map(|b| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt())
            .sum();
        if sum < best_sum {
            best_sum = sum;
            best = i;
        }
    }
    Ok(samples.points[best])
}

/// Dispatch to the configured aggregation strategy.
pub fn aggregate(
    samples: &SampleSet,
    strategy: AggregationStrategy,
    cfg: &KdeConfig,
) -> Result<PixelCoord, DensityError> {
    match strategy {
        AggregationStrategy::Kde => kde_mode(samples, cfg),
        AggregationStrategy::Center => aggregate_center(samples),
        AggregationStrategy::Medoid => aggregate_medoid(samples),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pts: &[(f64, f64)], w: u32, h: u32) -> SampleSet {
        SampleSet::new(
            pts.iter().map(|&(x, y)| PixelCoord::new(x, y)).collect(),
            ImageDims::new(w, h),
        )
    }

    #[test]
    fn density_at_own_center_is_one() {
        let s = set(&[(400.0, 300.0)], 1000, 1000);
        let d = kde_density_at(PixelCoord::new(400.0, 300.0), &s, &KdeConfig::default()).unwrap();
        assert_eq!(d, 1.0);
    }

    #[test]
    fn density_closed_form_single_sample() {
        // distance 0.1 normalized along u
        let s = set(&[(400.0, 300.0)], 1000, 1000);
        let d = kde_density_at(PixelCoord::new(500.0, 300.0), &s, &KdeConfig::default()).unwrap();
        let expected = (-0.1f64.powi(2) / 0.02).exp();
        assert!((d - expected).abs() < 1e-12);
    }

    #[test]
    fn density_peaks_at_separated_samples_not_midpoint() {
        let s = set(&[(200.0, 500.0), (800.0, 500.0)], 1000, 1000);
        let cfg = KdeConfig::default();
        let at_sample = kde_density_at(PixelCoord::new(200.0, 500.0), &s, &cfg).unwrap();
        let at_mid = kde_density_at(PixelCoord::new(500.0, 500.0), &s, &cfg).unwrap();
        assert!(at_sample > at_mid);
    }

    #[test]
    fn density_empty_errors() {
        let s = set(&[], 1000, 1000);
        assert_eq!(
            kde_density_at(PixelCoord::new(0.0, 0.0), &s, &KdeConfig::default()),
            Err(DensityError::EmptySampleSet)
        );
    }

    #[test]
    fn mode_of_single_sample_is_the_sample() {
        let s = set(&[(400.0, 300.0)], 1000, 1000);
        let m = kde_mode(&s, &KdeConfig::default()).unwrap();
        assert_eq!(m, PixelCoord::new(400.0, 300.0));
    }

    #[test]
    fn mode_of_symmetric_pair_is_a_sample_never_midpoint() {
        let s = set(&[(100.0, 500.0), (900.0, 500.0)], 1000, 1000);
        let m = kde_mode(&s, &KdeConfig::default()).unwrap();
        // tie broken to the lowest index; far separation keeps the pull negligible
        assert!((m.x - 100.0).abs() < 1e-6 && (m.y - 500.0).abs() < 1e-6);
    }

    #[test]
    fn mode_ignores_outlier() {
        let s = set(&[(100.0, 100.0), (102.0, 101.0), (99.0, 103.0), (900.0, 900.0)], 1000, 1000);
        let m = kde_mode(&s, &KdeConfig::default()).unwrap();
        assert!((m.x - 100.3).abs() < 5.0 && (m.y - 101.3).abs() < 5.0);
    }

    #[test]
    fn center_examples() {
        let s = set(&[(0.0, 0.0), (0.0, 1.0), (10.0, 10.0)], 100, 100);
        let c = aggregate_center(&s).unwrap();
        assert!((c.x - 10.0 / 3.0).abs() < 1e-12);
        assert!((c.y - 11.0 / 3.0).abs() < 1e-12);
        let single = set(&[(3.0, 4.0)], 100, 100);
        assert_eq!(aggregate_center(&single).unwrap(), PixelCoord::new(3.0, 4.0));
        let pair = set(&[(0.0, 0.0), (10.0, 10.0)], 100, 100);
        assert_eq!(aggregate_center(&pair).unwrap(), PixelCoord::new(5.0, 5.0));
    }

    // brute-force oracle for the medoid: exhaustive pairwise distance sums
    fn medoid_oracle(s: &SampleSet) -> PixelCoord {
        let mut best = (f64::INFINITY, 0usize);
        for (i, a) in s.points.iter().enumerate() {
            let sum: f64 = s
                .points
                .iter()
                .map(|b| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt())
                .sum();
            if sum < best.0 {
                best = (sum, i);
            }
        }
        s.points[best.1]
    }

    #[test]
    fn medoid_examples() {
        let s = set(&[(0.0, 0.0), (0.0, 1.0), (10.0, 10.0)], 100, 100);
        assert_eq!(aggregate_medoid(&s).unwrap(), PixelCoord::new(0.0, 1.0));
        assert_eq!(aggregate_medoid(&s).unwrap(), medoid_oracle(&s));
        let single = set(&[(2.0, 2.0)], 100, 100);
        assert_eq!(aggregate_medoid(&single).unwrap(), PixelCoord::new(2.0, 2.0));
        let dup = set(&[(0.0, 0.0), (0.0, 0.0), (5.0, 5.0)], 100, 100);
        assert_eq!(aggregate_medoid(&dup).unwrap(), PixelCoord::new(0.0, 0.0));
        assert_eq!(aggregate_medoid(&dup).unwrap(), medoid_oracle(&dup));
    }

    #[test]
    fn aggregate_dispatch() {
        let s = set(&[(1.0, 2.0), (3.0, 4.0), (3.0, 4.0)], 100, 100);
        let cfg = KdeConfig::default();
        assert_eq!(
            aggregate(&s, AggregationStrategy::Kde, &cfg).unwrap(),
            kde_mode(&s, &cfg).unwrap()
        );
        assert_eq!(
            aggregate(&s, AggregationStrategy::Center, &cfg).unwrap(),
            aggregate_center(&s).unwrap()
        );
        assert_eq!(
            aggregate(&s, AggregationStrategy::Medoid, &cfg).unwrap(),
            aggregate_medoid(&s).unwrap()
        );
    }

    #[test]
    fn all_strategies_return_unique_sample() {
        let s = set(&[(123.0, 456.0)], 1000, 1000);
        let cfg = KdeConfig::default();
        for strat in [AggregationStrategy::Kde, AggregationStrategy::Center, AggregationStrategy::Medoid] {
            assert_eq!(aggregate(&s, strat, &cfg).unwrap(), PixelCoord::new(123.0, 456.0));
        }
    }

    #[test]
    fn outlier_robustness_vs_center() {
        // cluster of 3 coincident points plus a far outlier
        let s = set(&[(100.0, 100.0), (100.0, 100.0), (100.0, 100.0), (900.0, 900.0)], 1000, 1000);
        let cfg = KdeConfig::default();
        let mode = kde_mode(&s, &cfg).unwrap();
        let center = aggregate_center(&s).unwrap();
        let cluster = PixelCoord::new(100.0, 100.0);
        let d = |p: PixelCoord| ((p.x - cluster.x).powi(2) + (p.y - cluster.y).powi(2)).sqrt();
        assert!(d(center) > d(mode));
    }

    #[test]
    fn density_permutation_invariant() {
        let a = set(&[(10.0, 20.0), (30.0, 40.0), (50.0, 60.0)], 100, 100);
        let b = set(&[(50.0, 60.0), (10.0, 20.0), (30.0, 40.0)], 100, 100);
        let cfg = KdeConfig::default();
        let z = PixelCoord::new(25.0, 35.0);
        let da = kde_density_at(z, &a, &cfg).unwrap();
        let db = kde_density_at(z, &b, &cfg).unwrap();
        assert!((da - db).abs() < 1e-15);
    }
}
