//! Dataset loading, accuracy evaluation with per-domain breakdowns, tall-image
//! tiling, the synthetic-screen benchmark generator, and ablation sweeps.

use crate::geometry::{point_in_bbox, BBox, ImageDims, PixelCoord, RoI};
use crate::predictor::{GroundingQuery, ImageRef, Predictor};
use crate::search::{single_stage_search, two_stage_search, SearchConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset contains no valid records")]
    EmptyDataset,
    #[error("invalid tiling config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Device {
    Mobile,
    Desktop,
    Web,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Element {
    Text,
    Icon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Domain {
    pub device: Device,
    pub element: Element,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}/{:?}", self.device, self.element)
    }
}

/// One benchmark row: an (image, instruction, bounding box) triplet with an
/// optional domain label.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub image: ImageRef,
    pub dims: ImageDims,
    pub instruction: String,
    pub gt: BBox,
    pub domain: Option<Domain>,
}

impl EvalRecord {
    pub fn query(&self) -> GroundingQuery {
        GroundingQuery {
            id: self.id.clone(),
            instruction: self.instruction.clone(),
            image: self.image.clone(),
            dims: self.dims,
            region: None,
        }
    }
}

/// Wire schema of one dataset JSONL line. `image` is a file path, or the
/// literal "synthetic" for records whose predictor target is the bbox itself.
#[derive(Debug, Serialize, Deserialize)]
struct RecordRow {
    id: String,
    image: String,
    width: u32,
    height: u32,
    instruction: String,
    bbox: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    device: Option<Device>,
    #[serde(skip_serializing_if = "Option::is_none")]
    element: Option<Element>,
}

impl RecordRow {
    fn into_record(self) -> Result<EvalRecord, String> {
        if self.width < 1 || self.height < 1 {
            return Err("image dims must be positive".into());
        }
        let gt = BBox {
            x0: self.bbox[0],
            y0: self.bbox[1],
            x1: self.bbox[2],
            y1: self.bbox[3],
        };
        if !gt.is_valid() {
            return Err("malformed bbox".into());
        }
        let dims = ImageDims::new(self.width, self.height);
        if !gt.fits_in(dims) {
            return Err("bbox outside image".into());
        }
        let image = if self.image == "synthetic" {
            ImageRef::Synthetic { gt }
        } else {
            ImageRef::Path(self.image.into())
        };
        let domain = match (self.device, self.element) {
            (Some(device), Some(element)) => Some(Domain { device, element }),
            _ => None,
        };
        Ok(EvalRecord {
            id: self.id,
            image,
            dims,
            instruction: self.instruction,
            gt,
            domain,
        })
    }

    fn from_record(r: &EvalRecord) -> Self {
        Self {
            id: r.id.clone(),
            image: match &r.image {
                ImageRef::Path(p) => p.display().to_string(),
                ImageRef::Synthetic { .. } => "synthetic".into(),
            },
            width: r.dims.width,
            height: r.dims.height,
            instruction: r.instruction.clone(),
            bbox: [r.gt.x0, r.gt.y0, r.gt.x1, r.gt.y1],
            device: r.domain.map(|d| d.device),
            element: r.domain.map(|d| d.element),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub records: Vec<EvalRecord>,
    pub errors: Vec<LineError>,
}

/// Load and validate a JSONL dataset. Malformed lines are collected into the
/// error list; valid lines are kept.
pub fn load_dataset(path: &Path) -> Result<LoadedDataset, HarnessError> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::Unreadable {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Result<RecordRow, _> = serde_json::from_str(&line);
        match parsed {
            Ok(row) => match row.into_record() {
                Ok(rec) => records.push(rec),
                Err(msg) => errors.push(LineError {
                    line: i + 1,
                    message: msg,
                }),
            },
            Err(e) => errors.push(LineError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    if records.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    Ok(LoadedDataset { records, errors })
}

pub fn save_dataset(records: &[EvalRecord], path: &Path) -> Result<(), HarnessError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, &RecordRow::from_record(r))
            .map_err(|e| HarnessError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchMode {
    TwoStage,
    SingleStage,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub id: String,
    pub final_coord: Option<[f64; 2]>,
    pub hit: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miss_reason: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainStats {
    pub hits: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub hits: usize,
    pub total: usize,
    pub per_domain: BTreeMap<String, DomainStats>,
    pub records: Vec<RecordOutcome>,
    pub config: EvalConfigEcho,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfigEcho {
    pub mode: SearchMode,
    pub search: SearchConfig,
    pub predictor: String,
    pub seed: u64,
}

/// Run the configured search over every record and score hits. Per-record
/// failures count as misses with a reason string; evaluation is total.
pub fn evaluate(
    records: &[EvalRecord],
    mode: SearchMode,
    cfg: &SearchConfig,
    predictor: &dyn Predictor,
    seed: u64,
) -> EvalReport {
    let outcomes: Vec<(Option<Domain>, RecordOutcome)> = records
        .par_iter()
        .map(|rec| {
            let query = rec.query();
            let result: Result<PixelCoord, String> = match mode {
                SearchMode::TwoStage => two_stage_search(&query, cfg, predictor)
                    .map(|t| t.final_coord)
                    .map_err(|e| e.to_string()),
                SearchMode::SingleStage => single_stage_search(
                    &query,
                    cfg.n_initial,
                    cfg.strategy,
                    &cfg.kde,
                    predictor,
                    cfg.temperature,
                )
                .map_err(|e| e.to_string()),
            };
            let outcome = match result {
                Ok(coord) => RecordOutcome {
                    id: rec.id.clone(),
                    final_coord: Some([coord.x, coord.y]),
                    hit: point_in_bbox(coord, &rec.gt),
                    miss_reason: None,
                },
                Err(reason) => RecordOutcome {
                    id: rec.id.clone(),
                    final_coord: None,
                    hit: false,
                    miss_reason: Some(reason),
                },
            };
            (rec.domain, outcome)
        })
        .collect();

    let total = outcomes.len();
    let hits = outcomes.iter().filter(|(_, o)| o.hit).count();
    let mut per_domain: BTreeMap<String, DomainStats> = BTreeMap::new();
    for (domain, outcome) in &outcomes {
        if let Some(d) = domain {
            let entry = per_domain.entry(d.to_string()).or_insert(DomainStats {
                hits: 0,
                total: 0,
                accuracy: 0.0,
            });
            entry.total += 1;
            if outcome.hit {
                entry.hits += 1;
            }
        }
    }
    for stats in per_domain.values_mut() {
        stats.accuracy = stats.hits as f64 / stats.total as f64;
    }

    EvalReport {
        overall_accuracy: if total > 0 { hits as f64 / total as f64 } else { 0.0 },
        hits,
        total,
        per_domain,
        records: outcomes.into_iter().map(|(_, o)| o).collect(),
        config: EvalConfigEcho {
            mode,
            search: *cfg,
            predictor: predictor.id(),
            seed,
        },
    }
}

impl EvalReport {
    /// Aligned-text table mirroring the device x element breakdown.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "overall  {:>5}/{:<5}  {:6.2}%\n",
            self.hits,
            self.total,
            self.overall_accuracy * 100.0
        ));
        for (name, s) in &self.per_domain {
            out.push_str(&format!(
                "{:<14} {:>5}/{:<5}  {:6.2}%\n",
                name,
                s.hits,
                s.total,
                s.accuracy * 100.0
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingConfig {
    pub block_height: u32,
    pub overlap: u32,
}

/// Split a tall image into full-width horizontal blocks. Block i starts at
/// i * (block_height - overlap); the final block is anchored to the image
/// bottom so the union always covers [0, H].
pub fn tile_tall_image(dims: ImageDims, cfg: &TilingConfig) -> Result<Vec<RoI>, HarnessError> {
    if cfg.block_height == 0 {
        return Err(HarnessError::InvalidConfig("block_height must be positive".into()));
    }
    if cfg.overlap >= cfg.block_height {
        return Err(HarnessError::InvalidConfig(
            "overlap must be smaller than block_height".into(),
        ));
    }
    let h = dims.height;
    let b = cfg.block_height;
    if h <= b {
        return Ok(vec![RoI::new(
            PixelCoord::new(0.0, 0.0),
            ImageDims::new(dims.width, h),
        )]);
    }
    let step = b - cfg.overlap;
    let block = |y: u32| RoI::new(PixelCoord::new(0.0, y as f64), ImageDims::new(dims.width, b));
    let mut blocks = vec![block(0)];
    let mut y = 0u32;
    loop {
        y += step;
        if y + b >= h {
            blocks.push(block(h - b));
            break;
        }
        blocks.push(block(y));
    }
    Ok(blocks)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthBenchConfig {
    pub n_records: usize,
    pub width_range: (u32, u32),
    pub height_range: (u32, u32),
    /// Ground-truth element extent range, pixels per axis.
    pub elem_size_range: (f64, f64),
    pub rng_seed: u64,
}

impl Default for SynthBenchConfig {
    fn default() -> Self {
        Self {
            n_records: 500,
            width_range: (1200, 2400),
            height_range: (800, 1600),
            elem_size_range: (40.0, 120.0),
            rng_seed: 42,
        }
    }
}

const DOMAIN_CYCLE: [Domain; 6] = [
    Domain { device: Device::Mobile, element: Element::Text },
    Domain { device: Device::Mobile, element: Element::Icon },
    Domain { device: Device::Desktop, element: Element::Text },
    Domain { device: Device::Desktop, element: Element::Icon },
    Domain { device: Device::Web, element: Element::Text },
    Domain { device: Device::Web, element: Element::Icon },
];

/// Generate a seeded synthetic benchmark: uniformly placed ground-truth boxes
/// with integer pixel coordinates and round-robin domain labels.
pub fn gen_synth_benchmark(cfg: &SynthBenchConfig) -> Vec<EvalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    (0..cfg.n_records)
        .map(|i| {
            let width = rng.gen_range(cfg.width_range.0..=cfg.width_range.1);
            let height = rng.gen_range(cfg.height_range.0..=cfg.height_range.1);
            let ew = rng
                .gen_range(cfg.elem_size_range.0..=cfg.elem_size_range.1)
                .round()
                .min(width as f64 - 1.0);
            let eh = rng
                .gen_range(cfg.elem_size_range.0..=cfg.elem_size_range.1)
                .round()
                .min(height as f64 - 1.0);
            let x0 = rng.gen_range(0.0..=(width as f64 - ew)).floor();
            let y0 = rng.gen_range(0.0..=(height as f64 - eh)).floor();
            let gt = BBox::new(x0, y0, x0 + ew, y0 + eh);
            EvalRecord {
                id: format!("synth-{i:05}"),
                image: ImageRef::Synthetic { gt },
                dims: ImageDims::new(width, height),
                instruction: format!("click element {i}"),
                gt,
                domain: Some(DOMAIN_CYCLE[i % DOMAIN_CYCLE.len()]),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationAxis {
    N,
    Temperature,
    RoiSize,
    Strategy,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "n" => Ok(Self::N),
            "t" | "temperature" => Ok(Self::Temperature),
            "roi_size" | "roi" => Ok(Self::RoiSize),
            "strategy" => Ok(Self::Strategy),
            other => Err(format!("unknown axis '{other}' (expected n|t|roi_size|strategy)")),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub accuracy: f64,
    pub hits: usize,
    pub total: usize,
}

/// One `evaluate` run per axis value, sharing the base config and seed.
pub fn ablation_sweep(
    records: &[EvalRecord],
    axis: AblationAxis,
    values: &[String],
    base: &SearchConfig,
    mode: SearchMode,
    predictor: &dyn Predictor,
    seed: u64,
) -> Result<Vec<SweepRow>, String> {
    assert!(!values.is_empty());
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = *base;
        match axis {
            AblationAxis::N => {
                let n: usize = value.parse().map_err(|_| format!("bad N value '{value}'"))?;
                cfg.n_initial = n;
                cfg.n_refine = n;
            }
            AblationAxis::Temperature => {
                cfg.temperature = value.parse().map_err(|_| format!("bad T value '{value}'"))?;
            }
            AblationAxis::RoiSize => {
                let s: u32 = value.parse().map_err(|_| format!("bad roi size '{value}'"))?;
                cfg.roi_dims = ImageDims::new(s, s);
            }
            AblationAxis::Strategy => {
                cfg.strategy = value.parse()?;
            }
        }
        let report = evaluate(records, mode, &cfg, predictor, seed);
        rows.push(SweepRow {
            value: value.clone(),
            accuracy: report.overall_accuracy,
            hits: report.hits,
            total: report.total,
        });
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("value,accuracy,hits,total\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.value, r.accuracy, r.hits, r.total));
    }
    out
}
