//! The abstraction over the grounding model: given (instruction, image,
//! temperature), produce sampled (reasoning, coordinate) rollouts.
//!
//! Two implementations are provided: a deterministic simulated predictor for
//! desk-scale verification (Gaussian noise around the target center with an
//! outlier mixture, optionally bimodal) and a remote HTTP client for real
//! models.

use crate::geometry::{BBox, ImageDims, PixelCoord, RoI};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("predictor unavailable: {0}")]
    Unavailable(String),
    #[error("request timed out")]
    Timeout,
    #[error("image reference not usable by this predictor: {0}")]
    UnsupportedImage(String),
}

/// Reference to the screen being queried. Synthetic screens are described by
/// their ground-truth box alone; no pixels exist for them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ImageRef {
    Path(PathBuf),
    Synthetic { gt: BBox },
}

/// One grounding request: instruction plus image, optionally restricted to a
/// crop. Coordinates in the model's reply are interpreted in the frame of the
/// queried image or crop.
#[derive(Debug, Clone)]
pub struct GroundingQuery {
    pub id: String,
    pub instruction: String,
    pub image: ImageRef,
    pub dims: ImageDims,
    pub region: Option<RoI>,
}

impl GroundingQuery {
    /// Dimensions of the frame the model answers in.
    pub fn frame(&self) -> ImageDims {
        self.region.map(|r| r.dims).unwrap_or(self.dims)
    }
}

/// One model rollout. `raw` preserves the verbatim model output.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSample {
    pub reasoning: String,
    pub coord: PixelCoord,
    pub raw: String,
}

/// One slot of a sampling batch: a batch of n requests always yields exactly
/// n slots; unparseable completions keep their raw text but no coordinate.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleSlot {
    Parsed(PredictionSample),
    Failed { raw: String },
}

impl SampleSlot {
    pub fn parsed(&self) -> Option<&PredictionSample> {
        match self {
            SampleSlot::Parsed(s) => Some(s),
            SampleSlot::Failed { .. } => None,
        }
    }
}

pub trait Predictor: Sync {
    /// Produce exactly `n` sample slots for the query. Implementations must
    /// tolerate concurrent calls; the simulated predictor derives per-sample
    /// RNG streams from (seed, query id, region, index) so results are
    /// order-independent.
    fn sample_predictions(
        &self,
        query: &GroundingQuery,
        n: usize,
        temperature: f64,
    ) -> Result<Vec<SampleSlot>, PredictorError>;

    /// Short identifier echoed into reports.
    fn id(&self) -> String;
}

// --- output parsing ---------------------------------------------------------

static COORD_RE: OnceLock<Regex> = OnceLock::new();

fn coord_re() -> &'static Regex {
    COORD_RE.get_or_init(|| {
        Regex::new(r"[\(\[]?\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*[\)\]]?").unwrap()
    })
}

/// Content of the first well-formed outermost `<think>...</think>` span, with
/// the byte offset just past the closing tag. `None` when no such span exists.
pub fn extract_think_span(raw: &str) -> Option<(&str, usize)> {
    let open = raw.find("<think>")?;
    let close_rel = raw[open + 7..].find("</think>")?;
    let start = open + 7;
    let end = start + close_rel;
    Some((&raw[start..end], end + 8))
}

/// Split a raw completion into (reasoning, coordinate). The reasoning is the
/// first outermost think-span (empty if absent); the coordinate is the first
/// parseable "(x, y)" / "x, y" / "[x, y]" pair after the reasoning span.
pub fn parse_model_output(raw: &str) -> Option<(String, PixelCoord)> {
    let (reasoning, after) = match extract_think_span(raw) {
        Some((r, end)) => (r.to_string(), end),
        None => (String::new(), 0),
    };
    let caps = coord_re().captures(&raw[after..])?;
    let x: f64 = caps[1].parse().ok()?;
    let y: f64 = caps[2].parse().ok()?;
    if !x.is_finite() || !y.is_finite() {
        return None;
    }
    Some((reasoning, PixelCoord::new(x, y)))
}

fn slot_from_raw(raw: String) -> SampleSlot {
    match parse_model_output(&raw) {
        Some((reasoning, coord)) => SampleSlot::Parsed(PredictionSample {
            reasoning,
            coord,
            raw,
        }),
        None => SampleSlot::Failed { raw },
    }
}

// --- deterministic per-sample streams ---------------------------------------

/// 64-bit FNV-1a; spelled out so the stream derivation is portable and fixed.
fn fnv1a(bytes: &[u8], mut state: u64) -> u64 {
    for &b in bytes {
        state ^= b as u64;
        state = state.wrapping_mul(0x0000_0100_0000_01b3);
    }
    state
}

pub(crate) fn derive_rng(seed: u64, query: &GroundingQuery, index: usize) -> ChaCha8Rng {
    let mut h = fnv1a(&seed.to_le_bytes(), 0xcbf2_9ce4_8422_2325);
    h = fnv1a(query.id.as_bytes(), h);
    if let Some(roi) = &query.region {
        h = fnv1a(&roi.origin.x.to_bits().to_le_bytes(), h);
        h = fnv1a(&roi.origin.y.to_bits().to_le_bytes(), h);
        h = fnv1a(&roi.dims.width.to_le_bytes(), h);
        h = fnv1a(&roi.dims.height.to_le_bytes(), h);
    }
    h = fnv1a(&(index as u64).to_le_bytes(), h);
    ChaCha8Rng::seed_from_u64(h)
}

// --- simulated predictor ----------------------------------------------------

/// Secondary mode of the simulated output distribution: with probability
/// `rate` a sample is drawn around the ground-truth center reflected about the
/// image center instead of the true target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoyConfig {
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimPredictorConfig {
    /// Noise std dev as a fraction of the queried frame's max dimension.
    pub noise_sigma_frac: f64,
    /// Probability of a uniform-over-frame outlier, in [0, 1).
    pub outlier_rate: f64,
    /// Scale the noise linearly with the sampling temperature.
    pub temperature_scaling: bool,
    pub rng_seed: u64,
    /// Optional second cluster; `None` keeps the distribution unimodal.
    pub decoy: Option<DecoyConfig>,
}

impl Default for SimPredictorConfig {
    fn default() -> Self {
        Self {
            noise_sigma_frac: 0.05,
            outlier_rate: 0.0,
            temperature_scaling: true,
            rng_seed: 0,
            decoy: None,
        }
    }
}

pub struct SimPredictor {
    pub cfg: SimPredictorConfig,
}

impl SimPredictor {
    pub fn new(cfg: SimPredictorConfig) -> Self {
        Self { cfg }
    }

    fn gt_of(&self, query: &GroundingQuery) -> Result<BBox, PredictorError> {
        match &query.image {
            ImageRef::Synthetic { gt } => Ok(*gt),
            ImageRef::Path(p) => Err(PredictorError::UnsupportedImage(format!(
                "simulated predictor needs a synthetic image ref, got path {}",
                p.display()
            ))),
        }
    }
}

/// Draw one simulated rollout: Gaussian noise around the target center in the
/// query frame (crop-local when a region is set), an outlier mixture uniform
/// over the frame, and an optional decoy cluster. The coordinate is clamped to
/// the frame.
pub fn simulate_sample(
    gt: &BBox,
    query: &GroundingQuery,
    cfg: &SimPredictorConfig,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> PredictionSample {
    let frame = query.frame();
    let fw = frame.width as f64;
    let fh = frame.height as f64;

    // target center expressed in the query frame
    let global_center = gt.center();
    let mut center = match &query.region {
        Some(roi) => PixelCoord::new(global_center.x - roi.origin.x, global_center.y - roi.origin.y),
        None => global_center,
    };

    let pick: f64 = rng.gen();
    let coord = if pick < cfg.outlier_rate {
        PixelCoord::new(rng.gen::<f64>() * fw, rng.gen::<f64>() * fh)
    } else {
        if let Some(decoy) = cfg.decoy {
            if pick < cfg.outlier_rate + (1.0 - cfg.outlier_rate) * decoy.rate {
                // reflect the target about the full-image center
                let reflected = PixelCoord::new(
                    query.dims.width as f64 - global_center.x,
                    query.dims.height as f64 - global_center.y,
                );
                center = match &query.region {
                    Some(roi) => {
                        PixelCoord::new(reflected.x - roi.origin.x, reflected.y - roi.origin.y)
                    }
                    None => reflected,
                };
            }
        }
        let scale = if cfg.temperature_scaling { temperature } else { 1.0 };
        let sigma = cfg.noise_sigma_frac * frame.max_dim() * scale;
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).unwrap();
            PixelCoord::new(center.x + normal.sample(rng), center.y + normal.sample(rng))
                .clamp_to(frame)
        } else {
            center.clamp_to(frame)
        }
    };

    let raw = format!(
        "<think>simulated rollout for {}</think> ({}, {})",
        query.id, coord.x, coord.y
    );
    let (reasoning, parsed) = parse_model_output(&raw).expect("synthetic raw always parses");
    PredictionSample {
        reasoning,
        coord: parsed,
        raw,
    }
}

impl Predictor for SimPredictor {
    fn sample_predictions(
        &self,
        query: &GroundingQuery,
        n: usize,
        temperature: f64,
    ) -> Result<Vec<SampleSlot>, PredictorError> {
        let gt = self.gt_of(query)?;
        Ok((0..n)
            .map(|i| {
                let mut rng = derive_rng(self.cfg.rng_seed, query, i);
                SampleSlot::Parsed(simulate_sample(&gt, query, &self.cfg, temperature, &mut rng))
            })
            .collect())
    }

    fn id(&self) -> String {
        format!("sim(seed={})", self.cfg.rng_seed)
    }
}

// --- remote predictor -------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemotePredictorConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub request_timeout: Duration,
    pub max_retries: u32,
    /// Must contain the `{instruction}` placeholder.
    pub prompt_template: String,
    /// JSON pointer to the completion text in the response body.
    pub response_pointer: String,
}

impl Default for RemotePredictorConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://localhost:8000/v1/chat/completions".into(),
            model_name: "grounding-model".into(),
            request_timeout: Duration::from_secs(60),
            max_retries: 2,
            prompt_template: "{instruction}".into(),
            response_pointer: "/choices/0/message/content".into(),
        }
    }
}

impl RemotePredictorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.prompt_template.contains("{instruction}") {
            return Err("prompt template is missing the {instruction} placeholder".into());
        }
        reqwest::Url::parse(&self.endpoint_url).map_err(|e| format!("bad endpoint url: {e}"))?;
        Ok(())
    }
}

pub struct RemotePredictor {
    cfg: RemotePredictorConfig,
    client: reqwest::blocking::Client,
}

impl RemotePredictor {
    pub fn new(cfg: RemotePredictorConfig) -> Result<Self, PredictorError> {
        cfg.validate().map_err(PredictorError::Unavailable)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.request_timeout)
            .build()
            .map_err(|e| PredictorError::Unavailable(e.to_string()))?;
        Ok(Self { cfg, client })
    }

    fn image_payload(&self, query: &GroundingQuery) -> Result<String, PredictorError> {
        use base64::Engine;
        match &query.image {
            ImageRef::Path(p) => {
                let bytes = std::fs::read(p).map_err(|e| {
                    PredictorError::UnsupportedImage(format!("{}: {e}", p.display()))
                })?;
                Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
            }
            ImageRef::Synthetic { .. } => Err(PredictorError::UnsupportedImage(
                "synthetic image refs have no pixels to send".into(),
            )),
        }
    }
}

/// Issue one completion request for the rendered prompt and image payload,
/// retrying on transport failure or server error up to `max_retries` times.
pub fn remote_request(
    client: &reqwest::blocking::Client,
    query: &GroundingQuery,
    image_b64: &str,
    temperature: f64,
    cfg: &RemotePredictorConfig,
) -> Result<String, PredictorError> {
    let prompt = cfg.prompt_template.replace("{instruction}", &query.instruction);
    let body = serde_json::json!({
        "model": cfg.model_name,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": prompt},
                {"type": "image", "data": image_b64},
            ],
        }],
        "temperature": temperature,
        "n": 1,
    });

    let mut last_err = String::new();
    for _ in 0..=cfg.max_retries {
        let mut req = client.post(&cfg.endpoint_url).json(&body);
        if let Ok(key) = std::env::var("GROUNDER_API_KEY") {
            req = req.bearer_auth(key);
        }
        match req.send() {
            Ok(resp) if resp.status().is_success() => {
                let json: serde_json::Value = resp
                    .json()
                    .map_err(|e| PredictorError::Unavailable(format!("bad response body: {e}")))?;
                let text = json
                    .pointer(&cfg.response_pointer)
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| {
                        PredictorError::Unavailable(format!(
                            "no completion text at pointer {}",
                            cfg.response_pointer
                        ))
                    })?;
                return Ok(text.to_string());
            }
            Ok(resp) => last_err = format!("server returned {}", resp.status()),
            Err(e) if e.is_timeout() => return Err(PredictorError::Timeout),
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(PredictorError::Unavailable(last_err))
}

impl Predictor for RemotePredictor {
    fn sample_predictions(
        &self,
        query: &GroundingQuery,
        n: usize,
        temperature: f64,
    ) -> Result<Vec<SampleSlot>, PredictorError> {
        // n independent single-completion requests, so any endpoint works
        let image_b64 = self.image_payload(query)?;
        let mut slots = Vec::with_capacity(n);
        for _ in 0..n {
            let raw = remote_request(&self.client, query, &image_b64, temperature, &self.cfg)?;
            slots.push(slot_from_raw(raw));
        }
        Ok(slots)
    }

    fn id(&self) -> String {
        format!("remote({}, {})", self.cfg.endpoint_url, self.cfg.model_name)
    }
}
