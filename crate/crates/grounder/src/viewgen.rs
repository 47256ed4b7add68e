//! Consistency training-data generation: for each record with at least one
//! correct rollout, emit a global-view and a local-view training example
//! sharing instruction and reasoning, with the center target remapped
//! equivariantly into the crop frame.

use crate::density::{kde_density_at, KdeConfig, SampleSet};
use crate::geometry::{
    center_of_bbox, sample_training_crop, to_local, GeometryError, PixelCoord, RoI,
};
use crate::harness::EvalRecord;
use crate::predictor::ImageRef;
use crate::reward::{filter_correct_rollouts, Rollout};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ViewGenError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("rollout did not hit the ground-truth region")]
    RolloutNotCorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewGenConfig {
    pub max_area_frac: f64,
    pub rng_seed: u64,
    pub pairs_per_record: usize,
}

impl Default for ViewGenConfig {
    fn default() -> Self {
        Self {
            max_area_frac: 0.3,
            rng_seed: 0,
            pairs_per_record: 1,
        }
    }
}

/// A global/local training pair sharing instruction and reasoning.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub instruction: String,
    pub reasoning: String,
    pub global_target: PixelCoord,
    pub local_crop: RoI,
    pub local_target: PixelCoord,
    pub image: ImageRef,
}

/// One line of the training JSONL. Crops are referenced by geometry rather
/// than re-encoded pixels, so the file is image-store agnostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLine {
    pub image: String,
    pub instruction: String,
    pub reasoning: String,
    pub target: [f64; 2],
    pub view: String,
    pub crop: Option<CropSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CropSpec {
    pub x0: f64,
    pub y0: f64,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ViewGenManifest {
    pub pairs: usize,
    pub lines: usize,
    pub skipped_infeasible: usize,
    pub records_without_correct_rollout: usize,
}

/// Build one view pair from a correct rollout: the crop contains the
/// ground-truth box and the local target is the global target translated into
/// the crop frame, exactly.
pub fn make_view_pair(
    record: &EvalRecord,
    rollout: &Rollout,
    cfg: &ViewGenConfig,
    crop_seed: u64,
) -> Result<ViewPair, ViewGenError> {
    if !rollout.in_gt() {
        return Err(ViewGenError::RolloutNotCorrect);
    }
    let crop = sample_training_crop(&record.gt, record.dims, cfg.max_area_frac, crop_seed)?;
    let global_target = center_of_bbox(&record.gt);
    let local_target = to_local(global_target, &crop)?;
    Ok(ViewPair {
        instruction: record.instruction.clone(),
        reasoning: rollout.reasoning.clone(),
        global_target,
        local_crop: crop,
        local_target,
        image: record.image.clone(),
    })
}

fn image_field(image: &ImageRef) -> String {
    match image {
        ImageRef::Path(p) => p.display().to_string(),
        ImageRef::Synthetic { .. } => "synthetic".into(),
    }
}

impl ViewPair {
    pub fn lines(&self) -> [TrainingLine; 2] {
        let image = image_field(&self.image);
        [
            TrainingLine {
                image: image.clone(),
                instruction: self.instruction.clone(),
                reasoning: self.reasoning.clone(),
                target: [self.global_target.x, self.global_target.y],
                view: "global".into(),
                crop: None,
            },
            TrainingLine {
                image,
                instruction: self.instruction.clone(),
                reasoning: self.reasoning.clone(),
                target: [self.local_target.x, self.local_target.y],
                view: "local".into(),
                crop: Some(CropSpec {
                    x0: self.local_crop.origin.x,
                    y0: self.local_crop.origin.y,
                    w: self.local_crop.dims.width,
                    h: self.local_crop.dims.height,
                }),
            },
        ]
    }
}

/// Among multiple correct rollouts, pick the one whose coordinate has the
/// highest KDE density over all correct coordinates (consensus reasoning);
/// ties go to the lowest index.
pub fn select_reasoning_rollout<'a>(
    correct: &'a [Rollout],
    record: &EvalRecord,
) -> Option<&'a Rollout> {
    if correct.is_empty() {
        return None;
    }
    if correct.len() == 1 {
        return Some(&correct[0]);
    }
    let coords: Vec<PixelCoord> = correct.iter().filter_map(|r| r.coord).collect();
    let set = SampleSet::new(coords, record.dims);
    let kde = KdeConfig::default();
    let mut best = 0usize;
    let mut best_density = f64::NEG_INFINITY;
    for (i, r) in correct.iter().enumerate() {
        let coord = r.coord.expect("correct rollouts have coordinates");
        let d = kde_density_at(coord, &set, &kde).expect("non-empty");
        if d > best_density {
            best_density = d;
            best = i;
        }
    }
    Some(&correct[best])
}

fn pair_seed(base: u64, record_id: &str, pair_index: usize) -> u64 {
    // FNV-1a, kept in sync with the predictor's stream derivation style
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in base.to_le_bytes().iter() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    for &b in record_id.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    for &b in (pair_index as u64).to_le_bytes().iter() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Generate the consistency dataset: for each (record, rollouts) pair, filter
/// correct rollouts, select the consensus reasoning, and emit
/// `pairs_per_record` view pairs as two JSONL lines each. Records whose
/// ground-truth box is too large for any admissible crop contribute only the
/// global line. Returns counts.
pub fn gen_consistency_dataset<W: Write>(
    items: &[(EvalRecord, Vec<Rollout>)],
    cfg: &ViewGenConfig,
    out: &mut W,
) -> Result<ViewGenManifest, ViewGenError> {
    let mut manifest = ViewGenManifest::default();
    for (record, rollouts) in items {
        let correct = filter_correct_rollouts(rollouts);
        let Some(source) = select_reasoning_rollout(&correct, record) else {
            manifest.records_without_correct_rollout += 1;
            continue;
        };
        for k in 0..cfg.pairs_per_record {
            let seed = pair_seed(cfg.rng_seed, &record.id, k);
            match make_view_pair(record, source, cfg, seed) {
                Ok(pair) => {
                    for line in pair.lines() {
                        serde_json::to_writer(&mut *out, &line)
                            .map_err(|e| ViewGenError::Io(e.into()))?;
                        out.write_all(b"\n")?;
                    }
                    manifest.pairs += 1;
                    manifest.lines += 2;
                }
                Err(ViewGenError::Geometry(GeometryError::Infeasible)) => {
                    // fall back to the global view alone
                    let global_target = center_of_bbox(&record.gt);
                    let line = TrainingLine {
                        image: image_field(&record.image),
                        instruction: record.instruction.clone(),
                        reasoning: source.reasoning.clone(),
                        target: [global_target.x, global_target.y],
                        view: "global".into(),
                        crop: None,
                    };
                    serde_json::to_writer(&mut *out, &line)
                        .map_err(|e| ViewGenError::Io(e.into()))?;
                    out.write_all(b"\n")?;
                    manifest.skipped_infeasible += 1;
                    manifest.lines += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(manifest)
}
