//! Two-stage test-time spatial search: crop stage (N global samples -> KDE
//! mode -> RoI) and voting stage (M crop samples mapped back to the global
//! frame -> aggregation over the union), plus a single-stage baseline.

use crate::density::{aggregate, kde_mode, AggregationStrategy, KdeConfig, SampleSet};
use crate::geometry::{make_roi, to_global, ImageDims, PixelCoord, RoI};
use crate::predictor::{GroundingQuery, Predictor, PredictorError};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("every sampled prediction failed to parse")]
    AllSamplesFailed,
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error("query already carries a region; the crop stage expects the full image")]
    RegionAlreadySet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// N: samples drawn on the full image.
    pub n_initial: usize,
    /// M: samples drawn on the crop.
    pub n_refine: usize,
    pub temperature: f64,
    pub roi_dims: ImageDims,
    pub kde: KdeConfig,
    pub strategy: AggregationStrategy,
    /// Vote over the union of crop and initial samples rather than the crop
    /// samples alone.
    pub union_vote: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_initial: 16,
            n_refine: 16,
            temperature: 1.0,
            roi_dims: ImageDims::new(840, 840),
            kde: KdeConfig::default(),
            strategy: AggregationStrategy::Kde,
            union_vote: true,
        }
    }
}

/// Full record of one two-stage search, serializable for `--trace` output.
#[derive(Debug, Clone)]
pub struct SearchTrace {
    /// Global-frame initial samples (parse failures excluded).
    pub initial_samples: SampleSet,
    pub roi: RoI,
    /// Crop samples mapped back to the global frame.
    pub refined_samples: SampleSet,
    pub final_coord: PixelCoord,
    pub crop_stage_ms: f64,
    pub vote_stage_ms: f64,
}

impl SearchTrace {
    pub fn to_json(&self) -> serde_json::Value {
        let pts = |s: &SampleSet| -> Vec<[f64; 2]> {
            s.points.iter().map(|p| [p.x, p.y]).collect()
        };
        serde_json::json!({
            "initial_samples": pts(&self.initial_samples),
            "roi": {
                "x0": self.roi.origin.x,
                "y0": self.roi.origin.y,
                "w": self.roi.dims.width,
                "h": self.roi.dims.height,
            },
            "refined_samples": pts(&self.refined_samples),
            "final": [self.final_coord.x, self.final_coord.y],
            "timings_ms": {
                "crop_stage": self.crop_stage_ms,
                "vote_stage": self.vote_stage_ms,
            },
        })
    }
}

fn collect_coords(
    slots: &[crate::predictor::SampleSlot],
) -> Vec<PixelCoord> {
    slots
        .iter()
        .filter_map(|s| s.parsed())
        .map(|p| p.coord)
        .filter(|c| c.is_finite())
        .collect()
}

/// Sample N predictions on the full image, take the KDE mode, and cut a
/// fixed-size region of interest around it.
pub fn crop_stage(
    query: &GroundingQuery,
    cfg: &SearchConfig,
    predictor: &dyn Predictor,
) -> Result<(SampleSet, RoI), SearchError> {
    if query.region.is_some() {
        return Err(SearchError::RegionAlreadySet);
    }
    let slots = predictor.sample_predictions(query, cfg.n_initial, cfg.temperature)?;
    let coords = collect_coords(&slots);
    if coords.is_empty() {
        return Err(SearchError::AllSamplesFailed);
    }
    let samples = SampleSet::new(coords, query.dims);
    let mode = kde_mode(&samples, &cfg.kde).expect("non-empty");
    let roi = make_roi(mode, cfg.roi_dims, query.dims);
    Ok((samples, roi))
}

/// Sample M predictions on the crop, map them back to the global frame, and
/// aggregate the configured vote set (union with the initial samples by
/// default). The KDE frame for the vote is the full image.
pub fn vote_stage(
    query: &GroundingQuery,
    roi: &RoI,
    initial: &SampleSet,
    cfg: &SearchConfig,
    predictor: &dyn Predictor,
) -> Result<(SampleSet, PixelCoord), SearchError> {
    let refined = if cfg.n_refine > 0 {
        let mut crop_query = query.clone();
        crop_query.region = Some(*roi);
        let slots = predictor.sample_predictions(&crop_query, cfg.n_refine, cfg.temperature)?;
        // out-of-crop coordinates are evidence of a bad rollout, not a
        // location; drop them rather than clamping
        collect_coords(&slots)
            .into_iter()
            .filter(|c| roi.contains_local(*c))
            .filter_map(|c| to_global(c, roi).ok())
            .collect()
    } else {
        Vec::new()
    };
    let refined_set = SampleSet::new(refined, query.dims);

    let mut vote: Vec<PixelCoord> = refined_set.points.clone();
    if cfg.union_vote {
        vote.extend(initial.points.iter().copied());
    }
    if vote.is_empty() {
        return Err(SearchError::AllSamplesFailed);
    }
    let vote_set = SampleSet::new(vote, query.dims);
    let final_coord = aggregate(&vote_set, cfg.strategy, &cfg.kde).expect("non-empty");
    Ok((refined_set, final_coord))
}

/// Crop stage followed by voting stage.
pub fn two_stage_search(
    query: &GroundingQuery,
    cfg: &SearchConfig,
    predictor: &dyn Predictor,
) -> Result<SearchTrace, SearchError> {
    let t0 = Instant::now();
    let (initial, roi) = crop_stage(query, cfg, predictor)?;
    let crop_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    let (refined, final_coord) = vote_stage(query, &roi, &initial, cfg, predictor)?;
    let vote_ms = t1.elapsed().as_secs_f64() * 1e3;

    Ok(SearchTrace {
        initial_samples: initial,
        roi,
        refined_samples: refined,
        final_coord,
        crop_stage_ms: crop_ms,
        vote_stage_ms: vote_ms,
    })
}

/// The "w/o crop" ablation arm: N samples on the full image, aggregated
/// directly.
pub fn single_stage_search(
    query: &GroundingQuery,
    n: usize,
    strategy: AggregationStrategy,
    kde: &KdeConfig,
    predictor: &dyn Predictor,
    temperature: f64,
) -> Result<PixelCoord, SearchError> {
    let slots = predictor.sample_predictions(query, n, temperature)?;
    let coords = collect_coords(&slots);
    if coords.is_empty() {
        return Err(SearchError::AllSamplesFailed);
    }
    let samples = SampleSet::new(coords, query.dims);
    Ok(aggregate(&samples, strategy, kde).expect("non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::predictor::{ImageRef, SimPredictor, SimPredictorConfig};

    fn query(gt: BBox, w: u32, h: u32) -> GroundingQuery {
        GroundingQuery {
            id: "rec-1".into(),
            instruction: "press ok".into(),
            image: ImageRef::Synthetic { gt },
            dims: ImageDims::new(w, h),
            region: None,
        }
    }

    fn zero_noise(seed: u64) -> SimPredictor {
        SimPredictor::new(SimPredictorConfig {
            noise_sigma_frac: 0.0,
            rng_seed: seed,
            ..Default::default()
        })
    }

    #[test]
    fn crop_stage_centers_roi_on_mode() {
        let gt = BBox::new(480.0, 280.0, 520.0, 320.0);
        let q = query(gt, 2000, 2000);
        let cfg = SearchConfig::default();
        let (_, roi) = crop_stage(&q, &cfg, &zero_noise(0)).unwrap();
        // make_roi((500,300), 840x840, 2000x2000): x centered, y clamped to 0
        assert_eq!(roi.origin, PixelCoord::new(80.0, 0.0));
        assert_eq!(roi.dims, ImageDims::new(840, 840));
    }

    #[test]
    fn crop_stage_single_sample() {
        let gt = BBox::new(990.0, 990.0, 1010.0, 1010.0);
        let q = query(gt, 2000, 2000);
        let cfg = SearchConfig {
            n_initial: 1,
            ..Default::default()
        };
        let (samples, roi) = crop_stage(&q, &cfg, &zero_noise(0)).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(roi.origin, PixelCoord::new(1000.0 - 420.0, 1000.0 - 420.0));
    }

    #[test]
    fn crop_stage_rejects_region_query() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let mut q = query(gt, 2000, 2000);
        q.region = Some(RoI::new(PixelCoord::new(0.0, 0.0), ImageDims::new(840, 840)));
        assert!(matches!(
            crop_stage(&q, &SearchConfig::default(), &zero_noise(0)),
            Err(SearchError::RegionAlreadySet)
        ));
    }

    #[test]
    fn zero_noise_final_is_gt_center_exactly() {
        let gt = BBox::new(701.0, 420.0, 760.0, 470.0);
        let q = query(gt, 1600, 1200);
        let trace = two_stage_search(&q, &SearchConfig::default(), &zero_noise(3)).unwrap();
        assert_eq!(trace.final_coord, gt.center());
    }

    #[test]
    fn m_zero_reduces_to_initial_aggregation() {
        let gt = BBox::new(400.0, 400.0, 500.0, 480.0);
        let q = query(gt, 1600, 1200);
        let sim = SimPredictor::new(SimPredictorConfig {
            noise_sigma_frac: 0.05,
            outlier_rate: 0.1,
            rng_seed: 21,
            ..Default::default()
        });
        let cfg = SearchConfig {
            n_refine: 0,
            ..Default::default()
        };
        let trace = two_stage_search(&q, &cfg, &sim).unwrap();
        assert!(trace.refined_samples.is_empty());
        let single = single_stage_search(
            &q,
            cfg.n_initial,
            cfg.strategy,
            &cfg.kde,
            &sim,
            cfg.temperature,
        )
        .unwrap();
        assert_eq!(trace.final_coord, single);
    }

    #[test]
    fn refined_samples_lie_inside_roi() {
        let gt = BBox::new(400.0, 400.0, 500.0, 480.0);
        let q = query(gt, 1600, 1200);
        let sim = SimPredictor::new(SimPredictorConfig {
            noise_sigma_frac: 0.08,
            outlier_rate: 0.2,
            rng_seed: 4,
            ..Default::default()
        });
        let trace = two_stage_search(&q, &SearchConfig::default(), &sim).unwrap();
        for p in &trace.refined_samples.points {
            assert!(trace.roi.contains_global(*p));
        }
    }

    #[test]
    fn fixed_seed_trace_identical() {
        let gt = BBox::new(400.0, 400.0, 500.0, 480.0);
        let q = query(gt, 1600, 1200);
        let sim = SimPredictor::new(SimPredictorConfig {
            rng_seed: 77,
            outlier_rate: 0.15,
            ..Default::default()
        });
        let cfg = SearchConfig::default();
        let a = two_stage_search(&q, &cfg, &sim).unwrap();
        let b = two_stage_search(&q, &cfg, &sim).unwrap();
        assert_eq!(a.initial_samples, b.initial_samples);
        assert_eq!(a.roi, b.roi);
        assert_eq!(a.refined_samples, b.refined_samples);
        assert_eq!(a.final_coord, b.final_coord);
    }

    #[test]
    fn strategy_sweep_runs() {
        let gt = BBox::new(400.0, 400.0, 500.0, 480.0);
        let q = query(gt, 1600, 1200);
        let sim = SimPredictor::new(SimPredictorConfig {
            rng_seed: 5,
            outlier_rate: 0.1,
            ..Default::default()
        });
        let kde = KdeConfig::default();
        for strat in [
            AggregationStrategy::Kde,
            AggregationStrategy::Center,
            AggregationStrategy::Medoid,
        ] {
            single_stage_search(&q, 8, strat, &kde, &sim, 1.0).unwrap();
        }
    }
}
