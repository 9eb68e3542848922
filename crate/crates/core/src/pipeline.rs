//! Two-phase orchestration: a per-video precompute (detections + visual
//! odometry, cached on disk) and a cheap per-question bundle preparation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use log::{info, warn};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detections::{self, class_set, Detection, DetectionError, DetectionTimeline, DEFAULT_CONF_THRESHOLD};
use crate::frames::{self, CameraIntrinsics, IngestError};
use crate::geometry::{self, GeometryError, RansacParams, Trajectory, TrajectoryPoint, VoConfig, WorldPose};
use crate::metrics::{self, AnswerKind, MetricError, ScoreReport};
use crate::prompt::{self, BundleMeta, PromptBundle, PromptError, PromptTemplates};
use crate::render::{self, RenderError};
use crate::sampling::{self, SamplingError, Strategy};

pub const CACHE_SCHEMA_VERSION: u32 = 1;
pub const CACHE_DIR_ENV: &str = "SEETREK_CACHE_DIR";
pub const DEFAULT_CACHE_DIR: &str = ".seetrek-cache";
pub const DEFAULT_INTERVAL: usize = 4;
pub const DEFAULT_KEYFRAMES: usize = 8;

#[derive(thiserror::Error, Debug)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("detections: {0}")]
    Detections(#[from] DetectionError),
    #[error("detector command failed ({status}): {stderr}")]
    DetectorFailed { status: String, stderr: String },
    #[error("visual odometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("keyframe selection: {0}")]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

impl PipelineError {
    /// 0 success, 2 configuration, 3 input, 4 detector, 5 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Configuration(_) | PipelineError::Sampling(SamplingError::InvalidK) => 2,
            PipelineError::Sampling(SamplingError::UnknownStrategy(_)) => 2,
            PipelineError::Ingest(IngestError::InvalidInterval | IngestError::InvalidIntrinsics(_)) => 2,
            PipelineError::Ingest(_)
            | PipelineError::Detections(_)
            | PipelineError::Metric(_)
            | PipelineError::Cache { .. }
            | PipelineError::Io { .. }
            | PipelineError::Sampling(_)
            | PipelineError::Prompt(PromptError::EmptyQuestion)
            | PipelineError::Prompt(PromptError::WriteError { .. })
            | PipelineError::Geometry(GeometryError::InsufficientFrames(_))
            | PipelineError::Render(RenderError::FrameTooSmall { .. }) => 3,
            PipelineError::DetectorFailed { .. } => 4,
            _ => 5,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub interval: usize,
    pub keyframes: usize,
    pub strategy: Strategy,
    pub conf_threshold: f64,
    pub ransac: RansacParams,
    pub intrinsics: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub detector_cmd: Option<String>,
    pub cache_root: Option<PathBuf>,
    pub workers: Option<usize>,
    pub templates: PromptTemplates,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            interval: DEFAULT_INTERVAL,
            keyframes: DEFAULT_KEYFRAMES,
            strategy: Strategy::BalancedTopk,
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            ransac: RansacParams::default(),
            intrinsics: None,
            detections: None,
            detector_cmd: None,
            cache_root: None,
            workers: None,
            templates: PromptTemplates::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Configuration(m));
        if self.interval == 0 {
            return bad("interval must be >= 1".into());
        }
        if self.keyframes == 0 {
            return bad("keyframes must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return bad(format!("confidence threshold {} outside [0, 1]", self.conf_threshold));
        }
        if !(self.ransac.threshold > 0.0 && self.ransac.threshold.is_finite()) {
            return bad(format!("RANSAC threshold must be positive, got {}", self.ransac.threshold));
        }
        if self.workers == Some(0) {
            return bad("workers must be >= 1".into());
        }
        if self.detections.is_some() && self.detector_cmd.is_some() {
            return bad("give either a detections file or a detector command, not both".into());
        }
        Ok(())
    }

    /// Explicit root, then the environment variable, then `.seetrek-cache`.
    pub fn resolved_cache_root(&self) -> PathBuf {
        self.cache_root
            .clone()
            .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
    }

    /// Per-video cache file: `<root>/<hash of the frame directory>/cache-n<N>.json`.
    pub fn cache_path(&self, frames_dir: &Path) -> Result<PathBuf, PipelineError> {
        let canonical = fs::canonicalize(frames_dir).map_err(io_err(frames_dir))?;
        let key = hex::encode(Sha256::digest(canonical.to_string_lossy().as_bytes()));
        Ok(self
            .resolved_cache_root()
            .join(&key[..16])
            .join(format!("cache-n{}.json", self.interval)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CachedFrame {
    pub t: usize,
    pub path: PathBuf,
    pub detections: Vec<Detection>,
    /// World rotation, row-major.
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    /// World position.
    #[serde(rename = "T")]
    pub position: [f64; 3],
    pub flag: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoCache {
    pub schema_version: u32,
    pub fingerprint: String,
    pub interval: usize,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<CachedFrame>,
}

impl VideoCache {
    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != CACHE_SCHEMA_VERSION {
            return Err(format!(
                "schema version {} (expected {CACHE_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.frames.is_empty() {
            return Err("no frames".into());
        }
        if self.frames.windows(2).any(|w| w[0].t >= w[1].t) {
            return Err("timesteps not strictly increasing".into());
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if self.frames.iter().any(|f| !finite(&f.rotation) || !finite(&f.position)) {
            return Err("non-finite pose".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cache: VideoCache = serde_json::from_str(&text).map_err(|e| PipelineError::Cache {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cache.validate().map_err(|message| PipelineError::Cache {
            path: path.to_path_buf(),
            message,
        })?;
        Ok(cache)
    }

    /// Writes to a sibling temporary file and renames it over `path`, so
    /// readers see the old cache or the new one, never a partial file.
    pub fn store(&self, path: &Path) -> Result<(), PipelineError> {
        let dir = path.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = dir.join(format!(
            ".{}.tmp-{}",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("cache"),
            std::process::id()
        ));
        let write = || -> std::io::Result<()> {
            let mut file = fs::File::create(&tmp)?;
            serde_json::to_writer_pretty(&mut file, self)?;
            file.write_all(b"\n")?;
            file.sync_all()
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(PipelineError::Io { path: tmp, source: e });
        }
        fs::rename(&tmp, path).map_err(|e| {
            let _ = fs::remove_file(&tmp);
            PipelineError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        })
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            points: self
                .frames
                .iter()
                .map(|f| TrajectoryPoint {
                    timestep: f.t,
                    pose: WorldPose {
                        rotation: Matrix3::from_row_slice(&f.rotation),
                        position: Vector3::from(f.position),
                    },
                    flagged: f.flag,
                })
                .collect(),
        }
    }

    pub fn class_timeline(&self, conf_threshold: f64) -> Vec<(usize, detections::ClassSet)> {
        self.frames
            .iter()
            .map(|f| (f.t, class_set(&f.detections, conf_threshold)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Computed,
}

#[derive(Clone, Debug)]
pub struct PrecomputeOutcome {
    pub cache: VideoCache,
    pub path: PathBuf,
    pub status: CacheStatus,
}

enum DetectionSource {
    Sidecar(PathBuf, Vec<u8>),
    Command(String),
}

fn detection_source(config: &PipelineConfig) -> Result<Option<DetectionSource>, PipelineError> {
    match (&config.detections, &config.detector_cmd) {
        (Some(path), _) => {
            let bytes = fs::read(path).map_err(io_err(path))?;
            Ok(Some(DetectionSource::Sidecar(path.clone(), bytes)))
        }
        (None, Some(cmd)) => Ok(Some(DetectionSource::Command(cmd.clone()))),
        (None, None) => Ok(None),
    }
}

fn resolve_intrinsics(config: &PipelineConfig, first_frame: &Path) -> Result<CameraIntrinsics, PipelineError> {
    let frame = frames::load_frame(first_frame, 0)?;
    let k = match &config.intrinsics {
        Some(path) => frames::parse_intrinsics(path)?,
        None => frames::default_intrinsics(frame.width, frame.height),
    };
    k.validate_for(frame.width, frame.height)?;
    Ok(k)
}

/// Content hash over every input that changes the cached result.
fn fingerprint(
    config: &PipelineConfig,
    files: &[(usize, PathBuf)],
    source: &DetectionSource,
    intrinsics: &CameraIntrinsics,
) -> Result<String, PipelineError> {
    let mut h = Sha256::new();
    let mut field = |name: &str, bytes: &[u8]| {
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field("schema", &CACHE_SCHEMA_VERSION.to_le_bytes());
    field("interval", &(config.interval as u64).to_le_bytes());
    for (t, path) in files {
        let bytes = fs::read(path).map_err(io_err(path))?;
        field("t", &(*t as u64).to_le_bytes());
        field("name", path.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
        field("frame", &bytes);
    }
    match source {
        DetectionSource::Sidecar(_, bytes) => field("sidecar", bytes),
        DetectionSource::Command(cmd) => field("detector", cmd.as_bytes()),
    }
    field("intrinsics", &serde_json::to_vec(intrinsics).expect("plain struct"));
    let r = &config.ransac;
    field(
        "ransac",
        format!("{}:{}:{}:{}", r.threshold, r.max_iterations, r.confidence, r.seed).as_bytes(),
    );
    Ok(hex::encode(h.finalize()))
}

/// Runs `sh -c '<cmd> "$@"' sh --frames DIR --interval N` and parses its
/// standard output as sidecar JSONL.
pub fn run_detector(cmd: &str, frames_dir: &Path, interval: usize) -> Result<DetectionTimeline, PipelineError> {
    info!("running detector: {cmd}");
    let output = Command::new("sh")
        .arg("-c")
        .arg(format!("{cmd} \"$@\""))
        .arg("sh")
        .arg("--frames")
        .arg(frames_dir)
        .arg("--interval")
        .arg(interval.to_string())
        .output()
        .map_err(|e| PipelineError::DetectorFailed {
            status: "spawn failed".into(),
            stderr: e.to_string(),
        })?;
    if !output.status.success() {
        return Err(PipelineError::DetectorFailed {
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    Ok(detections::parse_detections(output.stdout.as_slice())?)
}

fn thread_pool(workers: Option<usize>) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| PipelineError::Internal(format!("thread pool: {e}")))
}

/// Detections and poses for every subsampled frame, cached on disk. A
/// cache whose fingerprint matches the current inputs is returned untouched.
pub fn precompute(frames_dir: &Path, config: &PipelineConfig) -> Result<PrecomputeOutcome, PipelineError> {
    config.validate()?;
    let source = detection_source(config)?.ok_or_else(|| {
        PipelineError::Configuration("no detections: pass a sidecar file or a detector command".into())
    })?;
    let files = frames::subsampled_files(frames_dir, config.interval)?;
    let intrinsics = resolve_intrinsics(config, &files[0].1)?;
    let fp = fingerprint(config, &files, &source, &intrinsics)?;
    let path = config.cache_path(frames_dir)?;

    if path.exists() {
        match VideoCache::load(&path) {
            Ok(cache) if cache.fingerprint == fp => {
                info!("cache hit: {}", path.display());
                return Ok(PrecomputeOutcome {
                    cache,
                    path,
                    status: CacheStatus::Hit,
                });
            }
            Ok(_) => info!("inputs changed, recomputing {}", path.display()),
            Err(e) => warn!("ignoring unreadable cache: {e}"),
        }
    }

    let timeline = match &source {
        DetectionSource::Sidecar(p, bytes) => {
            info!("reading detections from {}", p.display());
            detections::parse_detections(bytes.as_slice())?
        }
        DetectionSource::Command(cmd) => run_detector(cmd, frames_dir, config.interval)?,
    };
    let by_t: BTreeMap<usize, &Vec<Detection>> =
        timeline.entries().iter().map(|e| (e.t, &e.detections)).collect();
    let missing = files.iter().filter(|(t, _)| !by_t.contains_key(t)).count();
    if missing > 0 {
        warn!("{missing} subsampled frames have no detection record; treating them as empty");
    }

    let pool = thread_pool(config.workers)?;
    let (trajectory, steps) = pool.install(|| -> Result<_, PipelineError> {
        let frames = frames::load_sequence(frames_dir, config.interval)?;
        let gray: Vec<_> = frames.iter().map(frames::to_grayscale).collect();
        let vo = VoConfig {
            ransac: config.ransac,
            ..VoConfig::default()
        };
        Ok(geometry::run_vo_detailed(&gray, &intrinsics, &vo)?)
    })?;
    let flagged = steps.iter().filter(|s| s.failure.is_some() || s.pose.flagged).count();
    if flagged > 0 {
        warn!("{flagged} of {} odometry steps flagged", steps.len());
    }
    if trajectory.len() != files.len() {
        return Err(PipelineError::Internal("trajectory length differs from frame count".into()));
    }

    let cached = files
        .iter()
        .zip(&trajectory.points)
        .map(|((t, file), point)| {
            let r = point.pose.rotation;
            Ok(CachedFrame {
                t: *t,
                path: fs::canonicalize(file).map_err(io_err(file))?,
                detections: by_t.get(t).map(|d| (*d).clone()).unwrap_or_default(),
                rotation: [
                    r[(0, 0)], r[(0, 1)], r[(0, 2)],
                    r[(1, 0)], r[(1, 1)], r[(1, 2)],
                    r[(2, 0)], r[(2, 1)], r[(2, 2)],
                ],
                position: point.pose.position.into(),
                flag: point.flagged,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let cache = VideoCache {
        schema_version: CACHE_SCHEMA_VERSION,
        fingerprint: fp,
        interval: config.interval,
        intrinsics,
        frames: cached,
    };
    cache.store(&path)?;
    info!("wrote cache {}", path.display());
    Ok(PrecomputeOutcome {
        cache,
        path,
        status: CacheStatus::Computed,
    })
}

/// Loads the cache written by [`precompute`] for this video and interval.
/// When the detection source is configured, the fingerprint is checked too.
pub fn load_cache(frames_dir: &Path, config: &PipelineConfig) -> Result<VideoCache, PipelineError> {
    config.validate()?;
    let path = config.cache_path(frames_dir)?;
    if !path.exists() {
        return Err(PipelineError::Configuration(format!(
            "no cache at {}; run precompute first",
            path.display()
        )));
    }
    let cache = VideoCache::load(&path)?;
    if let Some(source) = detection_source(config)? {
        let files = frames::subsampled_files(frames_dir, config.interval)?;
        let intrinsics = resolve_intrinsics(config, &files[0].1)?;
        if fingerprint(config, &files, &source, &intrinsics)? != cache.fingerprint {
            return Err(PipelineError::Configuration(format!(
                "cache {} is stale; run precompute again",
                path.display()
            )));
        }
    }
    Ok(cache)
}

/// Keyframe selection, marker overlay, trajectory renders and prompt text
/// for one question. Reads only the cache and the selected frame images.
pub fn answer_prep(
    cache: &VideoCache,
    question: &str,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<PromptBundle, PipelineError> {
    config.validate()?;
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion.into());
    }
    let timeline = cache.class_timeline(config.conf_threshold);
    let span = sampling::trim_span(&timeline)?;
    let selection = sampling::select(config.strategy, &timeline, span, config.keyframes)?;
    let k = selection.timesteps.len();
    info!("selected keyframes {:?}", selection.timesteps);

    let by_t: BTreeMap<usize, &CachedFrame> = cache.frames.iter().map(|f| (f.t, f)).collect();
    let keyframes = selection
        .timesteps
        .iter()
        .enumerate()
        .map(|(rank, t)| {
            let cached = by_t
                .get(t)
                .ok_or_else(|| PipelineError::Internal(format!("selected timestep {t} not in cache")))?;
            let frame = frames::load_frame(&cached.path, *t)?;
            Ok(render::overlay_marker(&frame, rank, k)?)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;

    let trajectory = cache.trajectory();
    let sub = trajectory
        .restrict(&selection.timesteps)
        .ok_or_else(|| PipelineError::Internal("selected timesteps missing from trajectory".into()))?;
    let bev = render::render_bev(&sub)?;
    let plot3d = render::render_3d(&sub)?;
    let points = prompt::format_points(&trajectory, &selection)?;
    let text = prompt::build_prompt(&points, question, &config.templates)?;
    let meta = BundleMeta {
        interval: cache.interval,
        strategy: config.strategy,
        timesteps: selection.timesteps.clone(),
        points,
        flags: trajectory.flags(),
    };
    Ok(prompt::write_bundle(&keyframes, &bev, &plot3d, &text, &meta, out_dir)?)
}

/// Non-blank lines of a text file, trimmed.
pub fn read_answers(path: &Path) -> Result<Vec<String>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn score(pred_file: &Path, truth_file: &Path, kind: AnswerKind) -> Result<ScoreReport, PipelineError> {
    let preds = read_answers(pred_file)?;
    let truths = read_answers(truth_file)?;
    Ok(metrics::score_answers(&preds, &truths, kind)?)
}

pub fn load_templates(path: &Path) -> Result<PromptTemplates, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Configuration(format!("{}: {e}", path.display())))
}
