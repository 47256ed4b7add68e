//! Shared test oracles, independent of the implementation paths they check.

use grounder::density::{kde_density_at, KdeConfig, SampleSet};
use grounder::geometry::PixelCoord;

/// Dense-grid argmax of the sample density over the full normalized square.
/// Brute force on purpose; the only shared code with the implementation is
/// the pointwise density evaluation.
pub fn grid_argmax(samples: &SampleSet, cfg: &KdeConfig, step_norm: f64) -> PixelCoord {
    let fw = samples.frame.width as f64;
    let fh = samples.frame.height as f64;
    let n = (1.0 / step_norm).round() as usize;
    let mut best = PixelCoord::new(0.0, 0.0);
    let mut best_density = f64::NEG_INFINITY;
    for i in 0..=n {
        for j in 0..=n {
            let z = PixelCoord::new(i as f64 * step_norm * fw, j as f64 * step_norm * fh);
            let d = kde_density_at(z, samples, cfg).unwrap();
            if d > best_density {
                best_density = d;
                best = z;
            }
        }
    }
    best
}
