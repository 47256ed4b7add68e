//! Command-line surface tying the modules into runnable workflows.
//!
//! Setting precedence is flags > environment > config file > defaults. The
//! config file is TOML with keys mirroring the flag names; the recognized
//! environment variables are GROUNDER_SEED, GROUNDER_ENDPOINT, GROUNDER_MODEL,
//! and GROUNDER_API_KEY (bearer token, read by the remote predictor).

use crate::density::{AggregationStrategy, KdeConfig};
use crate::geometry::{BBox, ImageDims, PixelCoord};
use crate::harness::{
    ablation_sweep, evaluate, gen_synth_benchmark, load_dataset, save_dataset, sweep_to_csv,
    AblationAxis, EvalRecord, SearchMode, SynthBenchConfig,
};
use crate::predictor::{
    GroundingQuery, ImageRef, Predictor, RemotePredictor, RemotePredictorConfig, SimPredictor,
    SimPredictorConfig,
};
use crate::reward::{score_rollouts, RewardConfig, Rollout};
use crate::search::{single_stage_search, two_stage_search, SearchConfig};
use crate::viewgen::{gen_consistency_dataset, ViewGenConfig};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

#[derive(Debug, Parser)]
#[command(name = "grounder", version, about = "GUI-grounding search, scoring, and evaluation")]
pub struct Cli {
    /// TOML config file; flags and environment variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for record-level parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a benchmark evaluation and write a report.
    Evaluate(EvaluateArgs),
    /// Ground a single instruction and print the final coordinate.
    Search(SearchArgs),
    /// Generate a synthetic benchmark corpus.
    Synth(SynthArgs),
    /// Build consistency-view training data from correct rollouts.
    GenViews(GenViewsArgs),
    /// Score a rollout file with rewards and group-relative advantages.
    ScoreRollouts(ScoreRolloutsArgs),
    /// Sweep one search hyperparameter and tabulate accuracy.
    Ablate(AblateArgs),
}

/// Flags shared by every command that runs the search pipeline.
#[derive(Debug, Args, Clone)]
pub struct SearchFlags {
    /// Initial samples on the full image (N).
    #[arg(long)]
    pub n: Option<usize>,
    /// Refinement samples on the crop (M).
    #[arg(long)]
    pub m: Option<usize>,
    /// Sampling temperature.
    #[arg(long, short = 't')]
    pub temperature: Option<f64>,
    /// Square crop side length in pixels.
    #[arg(long)]
    pub roi: Option<u32>,
    /// KDE variance in normalized coordinates.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Aggregation strategy: kde | center | medoid.
    #[arg(long)]
    pub strategy: Option<AggregationStrategy>,
    /// Vote over crop samples only instead of the union with initial samples.
    #[arg(long)]
    pub no_union_vote: bool,
}

#[derive(Debug, Args, Clone)]
pub struct PredictorFlags {
    /// Predictor backend: sim | remote.
    #[arg(long, default_value = "sim")]
    pub predictor: String,
    /// RNG seed for all randomized paths; echoed into outputs.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Simulated predictor: noise std dev as a fraction of the frame max dim.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Simulated predictor: probability of a uniform outlier.
    #[arg(long)]
    pub outlier_rate: Option<f64>,
    /// Simulated predictor: probability of a decoy-cluster sample.
    #[arg(long)]
    pub decoy_rate: Option<f64>,
    /// Remote predictor endpoint URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Remote model name.
    #[arg(long)]
    pub model: Option<String>,
    /// Remote request timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Remote retry budget.
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Prompt template containing the {instruction} placeholder.
    #[arg(long)]
    pub prompt_template: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dataset JSONL path.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Skip the crop stage and aggregate initial samples directly.
    #[arg(long)]
    pub single_stage: bool,
    /// Report JSON output path.
    #[arg(long, short = 'o', default_value = "report.json")]
    pub out: PathBuf,
    #[command(flatten)]
    pub search: SearchFlags,
    #[command(flatten)]
    pub predictor: PredictorFlags,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Screenshot path (remote predictor).
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Ground-truth box "x0,y0,x1,y1" defining a synthetic screen (sim predictor).
    #[arg(long)]
    pub sim_gt: Option<String>,
    #[arg(long)]
    pub width: u32,
    #[arg(long)]
    pub height: u32,
    #[arg(long)]
    pub instruction: String,
    #[arg(long)]
    pub single_stage: bool,
    /// Write the full search trace as JSON.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchFlags,
    #[command(flatten)]
    pub predictor: PredictorFlags,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenViewsArgs {
    /// Dataset JSONL with the records the rollouts refer to.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Rollout JSONL ({query_id, raw}); mutually exclusive with --simulate-rollouts.
    #[arg(long)]
    pub rollouts: Option<PathBuf>,
    /// Draw this many rollouts per record from the simulated predictor instead
    /// of reading a rollout file.
    #[arg(long)]
    pub simulate_rollouts: Option<usize>,
    #[arg(long, default_value_t = 0.3)]
    pub max_area_frac: f64,
    #[arg(long, default_value_t = 1)]
    pub pairs_per_record: usize,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
    /// Manifest JSON with emission counts.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub predictor: PredictorFlags,
}

#[derive(Debug, Args)]
pub struct ScoreRolloutsArgs {
    /// Rollout JSONL: one {query_id, raw, gt:[x0,y0,x1,y1]} object per line.
    #[arg(long)]
    pub rollouts: PathBuf,
    /// Format-reward weight.
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Sweep axis: n | t | roi_size | strategy.
    #[arg(long)]
    pub axis: AblationAxis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    #[arg(long)]
    pub single_stage: bool,
    #[arg(long, short = 'o')]
    pub out: PathBuf,
    #[command(flatten)]
    pub search: SearchFlags,
    #[command(flatten)]
    pub predictor: PredictorFlags,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Runtime(String),
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    crate::harness::HarnessError,
    crate::predictor::PredictorError,
    crate::search::SearchError,
    crate::viewgen::ViewGenError,
    std::io::Error,
    serde_json::Error
);

/// Optional TOML config file; keys mirror the flag names.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub temperature: Option<f64>,
    pub roi: Option<u32>,
    pub sigma: Option<f64>,
    pub strategy: Option<String>,
    pub seed: Option<u64>,
    pub predictor: Option<String>,
    pub noise: Option<f64>,
    pub outlier_rate: Option<f64>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub timeout: Option<f64>,
    pub max_retries: Option<u32>,
    pub prompt_template: Option<String>,
    pub jobs: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Runtime(format!("bad config {}: {e}", p.display())))
            }
        }
    }
}

fn env_u64(name: &str) -> Option<u64> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

/// Merge flags > env > file > defaults into a SearchConfig.
pub fn resolve_search_config(flags: &SearchFlags, file: &FileConfig) -> Result<SearchConfig, CliError> {
    let mut cfg = SearchConfig::default();
    if let Some(n) = flags.n.or(file.n) {
        if n == 0 {
            return Err(CliError::Runtime("--n must be at least 1".into()));
        }
        cfg.n_initial = n;
    }
    if let Some(m) = flags.m.or(file.m) {
        cfg.n_refine = m;
    }
    if let Some(t) = flags.temperature.or(file.temperature) {
        if t < 0.0 {
            return Err(CliError::Runtime("--temperature must be non-negative".into()));
        }
        cfg.temperature = t;
    }
    if let Some(r) = flags.roi.or(file.roi) {
        if r == 0 {
            return Err(CliError::Runtime("--roi must be positive".into()));
        }
        cfg.roi_dims = ImageDims::new(r, r);
    }
    if let Some(s) = flags.sigma.or(file.sigma) {
        if s <= 0.0 {
            return Err(CliError::Runtime("--sigma must be positive".into()));
        }
        cfg.kde = KdeConfig {
            variance: s,
            ..KdeConfig::default()
        };
    }
    match (&flags.strategy, &file.strategy) {
        (Some(s), _) => cfg.strategy = *s,
        (None, Some(s)) => cfg.strategy = s.parse().map_err(CliError::Runtime)?,
        _ => {}
    }
    if flags.no_union_vote {
        cfg.union_vote = false;
    }
    Ok(cfg)
}

pub fn resolve_seed(flags: &PredictorFlags, file: &FileConfig) -> u64 {
    flags.seed.or_else(|| env_u64("GROUNDER_SEED")).or(file.seed).unwrap_or(0)
}

/// Build the predictor selected by flags/env/file.
pub fn resolve_predictor(
    flags: &PredictorFlags,
    file: &FileConfig,
) -> Result<(Box<dyn Predictor>, u64), CliError> {
    let seed = resolve_seed(flags, file);
    let kind = if flags.predictor == "sim" {
        file.predictor.clone().unwrap_or_else(|| flags.predictor.clone())
    } else {
        flags.predictor.clone()
    };
    match kind.as_str() {
        "sim" => {
            let mut cfg = SimPredictorConfig {
                rng_seed: seed,
                ..Default::default()
            };
            if let Some(n) = flags.noise.or(file.noise) {
                if n < 0.0 {
                    return Err(CliError::Runtime("--noise must be non-negative".into()));
                }
                cfg.noise_sigma_frac = n;
            }
            if let Some(r) = flags.outlier_rate.or(file.outlier_rate) {
                if !(0.0..1.0).contains(&r) {
                    return Err(CliError::Runtime("--outlier-rate must be in [0, 1)".into()));
                }
                cfg.outlier_rate = r;
            }
            if let Some(d) = flags.decoy_rate {
                if !(0.0..1.0).contains(&d) {
                    return Err(CliError::Runtime("--decoy-rate must be in [0, 1)".into()));
                }
                cfg.decoy = Some(crate::predictor::DecoyConfig { rate: d });
            }
            Ok((Box::new(SimPredictor::new(cfg)), seed))
        }
        "remote" => {
            let mut cfg = RemotePredictorConfig::default();
            if let Some(e) = flags
                .endpoint
                .clone()
                .or_else(|| std::env::var("GROUNDER_ENDPOINT").ok())
                .or(file.endpoint.clone())
            {
                cfg.endpoint_url = e;
            }
            if let Some(m) = flags
                .model
                .clone()
                .or_else(|| std::env::var("GROUNDER_MODEL").ok())
                .or(file.model.clone())
            {
                cfg.model_name = m;
            }
            if let Some(t) = flags.timeout.or(file.timeout) {
                cfg.request_timeout = Duration::from_secs_f64(t);
            }
            if let Some(r) = flags.max_retries.or(file.max_retries) {
                cfg.max_retries = r;
            }
            if let Some(p) = flags.prompt_template.clone().or(file.prompt_template.clone()) {
                cfg.prompt_template = p;
            }
            Ok((Box::new(RemotePredictor::new(cfg)?), seed))
        }
        other => Err(CliError::Runtime(format!(
            "unknown predictor '{other}' (expected sim|remote)"
        ))),
    }
}

fn load_records(path: &Path) -> Result<Vec<EvalRecord>, CliError> {
    let loaded = load_dataset(path)?;
    for err in &loaded.errors {
        eprintln!("warning: line {}: {}", err.line, err.message);
    }
    Ok(loaded.records)
}

pub fn cmd_evaluate(args: &EvaluateArgs, file: &FileConfig) -> Result<(), CliError> {
    let records = load_records(&args.dataset)?;
    let cfg = resolve_search_config(&args.search, file)?;
    let (predictor, seed) = resolve_predictor(&args.predictor, file)?;
    let mode = if args.single_stage {
        SearchMode::SingleStage
    } else {
        SearchMode::TwoStage
    };
    let report = evaluate(&records, mode, &cfg, predictor.as_ref(), seed);
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)? + "\n")?;
    print!("{}", report.text_table());
    println!("report written to {}", args.out.display());
    Ok(())
}

fn parse_gt(text: &str) -> Result<BBox, CliError> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Runtime(format!("bad --sim-gt '{text}': {e}")))?;
    if parts.len() != 4 || parts[0] > parts[2] || parts[1] > parts[3] {
        return Err(CliError::Runtime(format!(
            "--sim-gt expects x0,y0,x1,y1 with x0<=x1 and y0<=y1, got '{text}'"
        )));
    }
    Ok(BBox::new(parts[0], parts[1], parts[2], parts[3]))
}

pub fn cmd_search(args: &SearchArgs, file: &FileConfig) -> Result<(), CliError> {
    let image = match (&args.image, &args.sim_gt) {
        (Some(p), None) => ImageRef::Path(p.clone()),
        (None, Some(gt)) => ImageRef::Synthetic { gt: parse_gt(gt)? },
        _ => {
            return Err(CliError::Runtime(
                "exactly one of --image or --sim-gt is required".into(),
            ))
        }
    };
    if args.width < 1 || args.height < 1 {
        return Err(CliError::Runtime("--width/--height must be positive".into()));
    }
    let query = GroundingQuery {
        id: "cli-query".into(),
        instruction: args.instruction.clone(),
        image,
        dims: ImageDims::new(args.width, args.height),
        region: None,
    };
    let cfg = resolve_search_config(&args.search, file)?;
    let (predictor, _) = resolve_predictor(&args.predictor, file)?;

    let final_coord: PixelCoord = if args.single_stage {
        single_stage_search(
            &query,
            cfg.n_initial,
            cfg.strategy,
            &cfg.kde,
            predictor.as_ref(),
            cfg.temperature,
        )?
    } else {
        let trace = two_stage_search(&query, &cfg, predictor.as_ref())?;
        if let Some(path) = &args.trace {
            std::fs::write(path, serde_json::to_string_pretty(&trace.to_json())? + "\n")?;
        }
        trace.final_coord
    };
    println!("{} {}", final_coord.x, final_coord.y);
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs, file: &FileConfig) -> Result<(), CliError> {
    let seed = args.seed.or_else(|| env_u64("GROUNDER_SEED")).or(file.seed).unwrap_or(42);
    let cfg = SynthBenchConfig {
        n_records: args.n,
        rng_seed: seed,
        ..Default::default()
    };
    let records = gen_synth_benchmark(&cfg);
    save_dataset(&records, &args.out)?;
    println!("wrote {} records (seed {}) to {}", records.len(), seed, args.out.display());
    Ok(())
}

/// One line of a rollout input file. `gt` may be omitted when the record it
/// refers to carries the box.
#[derive(Debug, Deserialize)]
struct RolloutRow {
    query_id: String,
    raw: String,
    gt: Option<[f64; 4]>,
}

fn read_rollout_rows(path: &Path) -> Result<Vec<RolloutRow>, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Runtime(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: RolloutRow = serde_json::from_str(&line)
            .map_err(|e| CliError::Runtime(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn cmd_gen_views(args: &GenViewsArgs, file: &FileConfig) -> Result<(), CliError> {
    let records = load_records(&args.dataset)?;
    let seed = resolve_seed(&args.predictor, file);

    let items: Vec<(EvalRecord, Vec<Rollout>)> = match (&args.rollouts, args.simulate_rollouts) {
        (Some(path), None) => {
            let rows = read_rollout_rows(path)?;
            records
                .into_iter()
                .map(|rec| {
                    let rollouts = rows
                        .iter()
                        .filter(|r| r.query_id == rec.id)
                        .map(|r| Rollout::from_raw(r.query_id.clone(), r.raw.clone(), rec.gt))
                        .collect();
                    (rec, rollouts)
                })
                .collect()
        }
        (None, Some(k)) => {
            let (predictor, _) = resolve_predictor(&args.predictor, file)?;
            let mut items = Vec::with_capacity(records.len());
            for rec in records {
                let slots = predictor.sample_predictions(&rec.query(), k, 1.0)?;
                let rollouts = slots
                    .iter()
                    .map(|s| {
                        let raw = match s {
                            crate::predictor::SampleSlot::Parsed(p) => p.raw.clone(),
                            crate::predictor::SampleSlot::Failed { raw } => raw.clone(),
                        };
                        Rollout::from_raw(rec.id.clone(), raw, rec.gt)
                    })
                    .collect();
                items.push((rec, rollouts));
            }
            items
        }
        _ => {
            return Err(CliError::Runtime(
                "exactly one of --rollouts or --simulate-rollouts is required".into(),
            ))
        }
    };

    if !(0.0..=1.0).contains(&args.max_area_frac) || args.max_area_frac == 0.0 {
        return Err(CliError::Runtime("--max-area-frac must be in (0, 1]".into()));
    }
    let cfg = ViewGenConfig {
        max_area_frac: args.max_area_frac,
        rng_seed: seed,
        pairs_per_record: args.pairs_per_record.max(1),
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    let manifest = gen_consistency_dataset(&items, &cfg, &mut out)?;
    out.flush()?;
    if let Some(path) = &args.manifest {
        std::fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    }
    println!(
        "wrote {} lines ({} pairs, {} infeasible, {} without correct rollout) to {}",
        manifest.lines,
        manifest.pairs,
        manifest.skipped_infeasible,
        manifest.records_without_correct_rollout,
        args.out.display()
    );
    Ok(())
}

pub fn cmd_score_rollouts(args: &ScoreRolloutsArgs) -> Result<(), CliError> {
    if args.lambda < 0.0 {
        return Err(CliError::Runtime("--lambda must be non-negative".into()));
    }
    let rows = read_rollout_rows(&args.rollouts)?;
    let rollouts: Vec<Rollout> = rows
        .into_iter()
        .map(|r| {
            let gt = r.gt.ok_or_else(|| {
                CliError::Runtime(format!("rollout for {} is missing gt", r.query_id))
            })?;
            Ok(Rollout::from_raw(
                r.query_id,
                r.raw,
                BBox::new(gt[0], gt[1], gt[2].max(gt[0]), gt[3].max(gt[1])),
            ))
        })
        .collect::<Result<_, CliError>>()?;
    let scores = score_rollouts(&rollouts, &RewardConfig { lambda: args.lambda });
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    for s in &scores {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    println!("scored {} rollouts to {}", scores.len(), args.out.display());
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs, file: &FileConfig) -> Result<(), CliError> {
    if args.values.is_empty() {
        return Err(CliError::Runtime("--values must not be empty".into()));
    }
    let records = load_records(&args.dataset)?;
    let base = resolve_search_config(&args.search, file)?;
    let (predictor, seed) = resolve_predictor(&args.predictor, file)?;
    let mode = if args.single_stage {
        SearchMode::SingleStage
    } else {
        SearchMode::TwoStage
    };
    let rows = ablation_sweep(&records, args.axis, &args.values, &base, mode, predictor.as_ref(), seed)
        .map_err(CliError::Runtime)?;
    std::fs::write(&args.out, sweep_to_csv(&rows))?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

/// Dispatch a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let file = match FileConfig::load(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if let Some(jobs) = cli.jobs.or(file.jobs) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let result = match &cli.command {
        Command::Evaluate(args) => cmd_evaluate(args, &file),
        Command::Search(args) => cmd_search(args, &file),
        Command::Synth(args) => cmd_synth(args, &file),
        Command::GenViews(args) => cmd_gen_views(args, &file),
        Command::ScoreRollouts(args) => cmd_score_rollouts(args),
        Command::Ablate(args) => cmd_ablate(args, &file),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
