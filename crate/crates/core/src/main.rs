use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use seetrek::geometry::RansacParams;
use seetrek::metrics::AnswerKind;
use seetrek::pipeline::{self, CacheStatus, PipelineConfig, PipelineError, CACHE_DIR_ENV};
use seetrek::prompt::PromptTemplates;
use seetrek::sampling::Strategy;

#[derive(Parser, Debug)]
#[command(name = "seetrek", version, about = "Spatial prompt bundles from video frames")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Detections and visual odometry for one video, cached on disk.
    Precompute(VideoArgs),
    /// Build a prompt bundle for one question from an existing cache.
    Prep(PrepArgs),
    /// Precompute (or reuse the cache) then build a prompt bundle.
    Run(PrepArgs),
    /// Score answers against ground truth; prints JSON.
    Score(ScoreArgs),
}

#[derive(Args, Debug)]
struct VideoArgs {
    /// Directory of frame images, ordered by file name.
    #[arg(long)]
    frames: PathBuf,
    /// Keep one frame every N frames.
    #[arg(long, default_value_t = pipeline::DEFAULT_INTERVAL)]
    interval: usize,
    /// JSON file with fx, fy, cx, cy.
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Detection sidecar (JSONL).
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Detector command; receives `--frames DIR --interval N` and prints JSONL.
    #[arg(long)]
    detector_cmd: Option<String>,
    /// RANSAC inlier threshold on the Sampson distance (normalized units).
    #[arg(long, default_value_t = RansacParams::default().threshold)]
    ransac_threshold: f64,
    /// RANSAC sampling seed.
    #[arg(long, default_value_t = RansacParams::default().seed)]
    seed: u64,
    /// Worker threads (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Cache root directory.
    #[arg(long, env = CACHE_DIR_ENV)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PrepArgs {
    #[command(flatten)]
    video: VideoArgs,
    /// Number of keyframes K.
    #[arg(long, default_value_t = pipeline::DEFAULT_KEYFRAMES)]
    keyframes: usize,
    /// Keyframe ranking strategy.
    #[arg(long, value_enum, default_value_t = StrategyArg::BalancedTopk)]
    strategy: StrategyArg,
    /// Minimum detection confidence for the class sets.
    #[arg(long, default_value_t = seetrek::detections::DEFAULT_CONF_THRESHOLD)]
    conf_threshold: f64,
    /// Question appended to the prompt.
    #[arg(long)]
    question: String,
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file overriding the instruction templates.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long = "type", value_enum)]
    kind: KindArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Topk,
    #[value(alias = "temporal_topk")]
    TemporalTopk,
    #[value(alias = "balanced_topk")]
    BalancedTopk,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Topk => Strategy::Topk,
            StrategyArg::TemporalTopk => Strategy::TemporalTopk,
            StrategyArg::BalancedTopk => Strategy::BalancedTopk,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Mca,
    Na,
}

fn video_config(v: &VideoArgs) -> PipelineConfig {
    PipelineConfig {
        interval: v.interval,
        ransac: RansacParams {
            threshold: v.ransac_threshold,
            seed: v.seed,
            ..RansacParams::default()
        },
        intrinsics: v.intrinsics.clone(),
        detections: v.detections.clone(),
        detector_cmd: v.detector_cmd.clone(),
        cache_root: v.cache_dir.clone(),
        workers: v.workers,
        ..PipelineConfig::default()
    }
}

fn prep_config(p: &PrepArgs) -> Result<PipelineConfig, PipelineError> {
    let templates = match &p.templates {
        Some(path) => pipeline::load_templates(path)?,
        None => PromptTemplates::default(),
    };
    Ok(PipelineConfig {
        keyframes: p.keyframes,
        strategy: p.strategy.into(),
        conf_threshold: p.conf_threshold,
        templates,
        ..video_config(&p.video)
    })
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Cmd::Precompute(v) => {
            let outcome = pipeline::precompute(&v.frames, &video_config(&v))?;
            let status = match outcome.status {
                CacheStatus::Hit => "cache hit",
                CacheStatus::Computed => "computed",
            };
            println!("{} ({status})", outcome.path.display());
        }
        Cmd::Prep(p) => {
            let config = prep_config(&p)?;
            let cache = pipeline::load_cache(&p.video.frames, &config)?;
            let bundle = pipeline::answer_prep(&cache, &p.question, &config, &p.out)?;
            println!("{}", bundle.manifest_path.display());
        }
        Cmd::Run(p) => {
            let config = prep_config(&p)?;
            let outcome = pipeline::precompute(&p.video.frames, &config)?;
            info!("cache {}", outcome.path.display());
            let bundle = pipeline::answer_prep(&outcome.cache, &p.question, &config, &p.out)?;
            println!("{}", bundle.manifest_path.display());
        }
        Cmd::Score(s) => {
            let kind = match s.kind {
                KindArg::Mca => AnswerKind::Mca,
                KindArg::Na => AnswerKind::Na,
            };
            let report = pipeline::score(&s.pred, &s.truth, kind)?;
            let json = serde_json::to_string(&report).map_err(|e| PipelineError::Internal(e.to_string()))?;
            println!("{json}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
