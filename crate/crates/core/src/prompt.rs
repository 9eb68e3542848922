//! Prompt text, keyframe point lists and the on-disk bundle.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::Trajectory;
use crate::render::{encode_png, EncodedKeyframe, RenderError, RenderedImage, Rgb};
use crate::sampling::{KeyframeSelection, Strategy};

pub const UNIVERSAL_TEMPLATE: &str = "Each video frame has its serial number in the top-right corner. \
The highlight color mark of frame matches the color in the spatial map, indicating its position.";
pub const VIEWS_TEMPLATE: &str = "Both 2D (bird's-eye) and 3D views illustrate the camera's spatial trajectory, \
with color encoding time progression.";
pub const POINTS_TEMPLATE: &str =
    "Points represent the camera's relative positions; the number of points reflects only spatial relationships.";

pub const BEV_FILE: &str = "bev.png";
pub const TRAJ3D_FILE: &str = "traj3d.png";
pub const PROMPT_FILE: &str = "prompt.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(thiserror::Error, Debug)]
pub enum PromptError {
    #[error("no trajectory pose for selected timestep {0}")]
    MissingPose(usize),
    #[error("question is empty")]
    EmptyQuestion,
    #[error("failed to write {path}: {source}")]
    WriteError {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("manifest serialization failed: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Instruction templates. Defaults reproduce the stock wording; any field
/// can be overridden per model family from a JSON file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplates {
    pub universal: String,
    pub views: String,
    pub points: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            universal: UNIVERSAL_TEMPLATE.to_string(),
            views: VIEWS_TEMPLATE.to_string(),
            points: POINTS_TEMPLATE.to_string(),
        }
    }
}

/// Fixed two-decimal formatting, rounding half away from zero on the
/// decimal expansion (so `1.005` gives `1.01`). Never prints `-0.00`.
pub fn format_fixed2(value: f64) -> String {
    let digits = format!("{:.12}", value.abs());
    let (int_part, frac) = digits.split_once('.').unwrap_or((&digits, "000"));
    let mut cents: u128 = int_part.parse::<u128>().unwrap_or(0) * 100 + frac[..2].parse::<u128>().unwrap_or(0);
    if frac.as_bytes()[2] >= b'5' {
        cents += 1;
    }
    let sign = if value < 0.0 && cents != 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", cents / 100, cents % 100)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointEntry {
    pub rank: usize,
    pub timestep: usize,
    pub text: [String; 3],
}

impl PointEntry {
    pub fn values(&self) -> [f64; 3] {
        self.text.clone().map(|s| s.parse().unwrap_or(0.0))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointList {
    pub entries: Vec<PointEntry>,
}

impl PointList {
    /// `(x, y, z); (x, y, z); ...`
    pub fn serialize(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("({}, {}, {})", e.text[0], e.text[1], e.text[2]))
            .collect::<Vec<_>>()
            .join("; ")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn format_points(traj: &Trajectory, selection: &KeyframeSelection) -> Result<PointList, PromptError> {
    let entries = selection
        .timesteps
        .iter()
        .enumerate()
        .map(|(rank, &t)| {
            let pose = traj.pose_at(t).ok_or(PromptError::MissingPose(t))?;
            let p = pose.position;
            Ok(PointEntry {
                rank,
                timestep: t,
                text: [format_fixed2(p.x), format_fixed2(p.y), format_fixed2(p.z)],
            })
        })
        .collect::<Result<_, PromptError>>()?;
    Ok(PointList { entries })
}

/// universal + views + points template + serialized points + "\n" + question.
pub fn build_prompt(points: &PointList, question: &str, templates: &PromptTemplates) -> Result<String, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    Ok(format!(
        "{}{}{}{}\n{}",
        templates.universal,
        templates.views,
        templates.points,
        points.serialize(),
        question
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestKeyframe {
    pub rank: usize,
    pub t: usize,
    pub file: String,
    pub color: Rgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub k: usize,
    pub interval: usize,
    pub strategy: Strategy,
    pub keyframes: Vec<ManifestKeyframe>,
    pub bev: String,
    pub traj3d: String,
    pub prompt: String,
    pub points: Vec<[f64; 3]>,
    pub flags: Vec<bool>,
}

impl Manifest {
    /// Every file the manifest references, relative to the bundle directory.
    pub fn files(&self) -> Vec<&str> {
        let mut files: Vec<&str> = self.keyframes.iter().map(|k| k.file.as_str()).collect();
        files.extend([self.bev.as_str(), self.traj3d.as_str(), self.prompt.as_str()]);
        files
    }
}

/// Bundle metadata that is not carried by the images themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleMeta {
    pub interval: usize,
    pub strategy: Strategy,
    pub timesteps: Vec<usize>,
    pub points: PointList,
    pub flags: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub dir: PathBuf,
    pub keyframes: Vec<PathBuf>,
    pub bev: PathBuf,
    pub traj3d: PathBuf,
    pub prompt_path: PathBuf,
    pub manifest_path: PathBuf,
    pub prompt: String,
    pub manifest: Manifest,
}

pub fn keyframe_file_name(rank: usize) -> String {
    format!("keyframe_{rank}.png")
}

fn temp_name(name: &str) -> String {
    format!(".{name}.tmp-{}", std::process::id())
}

/// Writes every artifact next to a temporary name first and only renames
/// once all of them are on disk, so a failure leaves no partial bundle.
fn write_all_atomic(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<(), PromptError> {
    let werr = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PromptError::WriteError { path, source }
    };
    fs::create_dir_all(dir).map_err(werr(dir))?;
    let mut staged = Vec::new();
    let result = (|| {
        for (name, bytes) in files {
            let tmp = dir.join(temp_name(name));
            staged.push(tmp.clone());
            fs::write(&tmp, bytes).map_err(werr(&tmp))?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        for tmp in &staged {
            let _ = fs::remove_file(tmp);
        }
        return Err(e);
    }
    for (name, _) in files {
        let (tmp, dst) = (dir.join(temp_name(name)), dir.join(name));
        if let Err(e) = fs::rename(&tmp, &dst) {
            for (name, _) in files {
                let _ = fs::remove_file(dir.join(temp_name(name)));
            }
            return Err(PromptError::WriteError { path: dst, source: e });
        }
    }
    Ok(())
}

pub fn write_bundle(
    keyframes: &[EncodedKeyframe],
    bev: &RenderedImage,
    plot3d: &RenderedImage,
    prompt: &str,
    meta: &BundleMeta,
    out_dir: &Path,
) -> Result<PromptBundle, PromptError> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::with_capacity(keyframes.len() + 4);
    let mut manifest_keyframes = Vec::with_capacity(keyframes.len());
    for (kf, &t) in keyframes.iter().zip(&meta.timesteps) {
        let name = keyframe_file_name(kf.rank);
        files.push((name.clone(), encode_png(kf.frame.width, kf.frame.height, &kf.frame.pixels)?));
        manifest_keyframes.push(ManifestKeyframe {
            rank: kf.rank,
            t,
            file: name,
            color: kf.color,
        });
    }
    files.push((BEV_FILE.to_string(), bev.to_png()?));
    files.push((TRAJ3D_FILE.to_string(), plot3d.to_png()?));
    files.push((PROMPT_FILE.to_string(), prompt.as_bytes().to_vec()));
    let manifest = Manifest {
        k: keyframes.len(),
        interval: meta.interval,
        strategy: meta.strategy,
        keyframes: manifest_keyframes,
        bev: BEV_FILE.to_string(),
        traj3d: TRAJ3D_FILE.to_string(),
        prompt: PROMPT_FILE.to_string(),
        points: meta.points.entries.iter().map(PointEntry::values).collect(),
        flags: meta.flags.clone(),
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    manifest_bytes.push(b'\n');
    files.push((MANIFEST_FILE.to_string(), manifest_bytes));
    write_all_atomic(out_dir, &files)?;

    Ok(PromptBundle {
        dir: out_dir.to_path_buf(),
        keyframes: manifest.keyframes.iter().map(|k| out_dir.join(&k.file)).collect(),
        bev: out_dir.join(BEV_FILE),
        traj3d: out_dir.join(TRAJ3D_FILE),
        prompt_path: out_dir.join(PROMPT_FILE),
        manifest_path: out_dir.join(MANIFEST_FILE),
        prompt: prompt.to_string(),
        manifest,
    })
}

/// Reads a manifest back and checks that every referenced file exists.
pub fn read_manifest(dir: &Path) -> Result<Manifest, String> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    if manifest.k != manifest.keyframes.len() || manifest.points.len() != manifest.k {
        return Err(format!(
            "k = {} but {} keyframes and {} points",
            manifest.k,
            manifest.keyframes.len(),
            manifest.points.len()
        ));
    }
    for (i, kf) in manifest.keyframes.iter().enumerate() {
        if kf.rank != i {
            return Err(format!("keyframe {i} has rank {}", kf.rank));
        }
    }
    for f in manifest.files() {
        if !dir.join(f).is_file() {
            return Err(format!("missing file {f}"));
        }
    }
    Ok(manifest)
}
