//! Frame ingest: image-sequence loading, uniform temporal subsampling,
//! grayscale conversion and camera intrinsics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Smallest width/height accepted for any frame.
pub const MIN_FRAME_DIM: u32 = 16;

#[derive(thiserror::Error, Debug)]
pub enum IngestError {
    #[error("no image frames found in {0}")]
    NoFrames(PathBuf),
    #[error("failed to decode {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },
    #[error("frame {path} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        path: PathBuf,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("frame {width}x{height} is smaller than {MIN_FRAME_DIM}x{MIN_FRAME_DIM}")]
    FrameTooSmall { width: u32, height: u32 },
    #[error("raster length {got} does not match {width}x{height}x{channels}")]
    BadRaster {
        width: u32,
        height: u32,
        channels: usize,
        got: usize,
    },
    #[error("sampling interval must be >= 1")]
    InvalidInterval,
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("intrinsics parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// An RGB8 frame sampled from the source video at `timestep`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub timestep: usize,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl FrameRecord {
    pub fn new(timestep: usize, width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, IngestError> {
        if width < MIN_FRAME_DIM || height < MIN_FRAME_DIM {
            return Err(IngestError::FrameTooSmall { width, height });
        }
        if pixels.len() != width as usize * height as usize * 3 {
            return Err(IngestError::BadRaster {
                width,
                height,
                channels: 3,
                got: pixels.len(),
            });
        }
        Ok(Self {
            timestep,
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn rgb(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put_rgb(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// 8-bit luma image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayFrame {
    pub timestep: usize,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayFrame {
    pub fn new(timestep: usize, width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, IngestError> {
        if pixels.len() != width as usize * height as usize {
            return Err(IngestError::BadRaster {
                width,
                height,
                channels: 1,
                got: pixels.len(),
            });
        }
        Ok(Self {
            timestep,
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, x: i32, y: i32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, IngestError> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if !(self.fx.is_finite() && self.fx > 0.0) || !(self.fy.is_finite() && self.fy > 0.0) {
            return Err(IngestError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(IngestError::InvalidIntrinsics("principal point must be finite".into()));
        }
        Ok(())
    }

    /// Checks the principal point against the frame size of a sequence.
    pub fn validate_for(&self, width: u32, height: u32) -> Result<(), IngestError> {
        self.validate()?;
        if self.cx < 0.0 || self.cx >= width as f64 || self.cy < 0.0 || self.cy >= height as f64 {
            return Err(IngestError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} frame",
                self.cx, self.cy, width, height
            )));
        }
        Ok(())
    }
}

/// Max-dimension focal heuristic with the principal point at the image centre.
pub fn default_intrinsics(width: u32, height: u32) -> CameraIntrinsics {
    let f = width.max(height) as f64;
    CameraIntrinsics {
        fx: f,
        fy: f,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsFile {
    fx: f64,
    fy: Option<f64>,
    cx: f64,
    cy: f64,
}

/// Parses `{"fx":..,"fy":..,"cx":..,"cy":..}`; a missing `fy` defaults to `fx`.
pub fn parse_intrinsics_str(text: &str) -> Result<CameraIntrinsics, IngestError> {
    let raw: IntrinsicsFile = serde_json::from_str(text).map_err(|e| IngestError::ParseError {
        line: e.line(),
        message: e.to_string(),
    })?;
    CameraIntrinsics::new(raw.fx, raw.fy.unwrap_or(raw.fx), raw.cx, raw.cy)
}

pub fn parse_intrinsics(path: &Path) -> Result<CameraIntrinsics, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_intrinsics_str(&text)
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Every PNG/JPEG file in `dir`, sorted lexicographically by file name. The
/// position in this list is the source timestep.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let entries = fs::read_dir(dir).map_err(|source| IngestError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| IngestError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if path.is_file() && is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if files.is_empty() {
        return Err(IngestError::NoFrames(dir.to_path_buf()));
    }
    Ok(files)
}

/// Source files kept by the `t mod interval == 0` rule, paired with their timestep.
pub fn subsampled_files(dir: &Path, interval: usize) -> Result<Vec<(usize, PathBuf)>, IngestError> {
    if interval == 0 {
        return Err(IngestError::InvalidInterval);
    }
    Ok(list_frame_files(dir)?
        .into_iter()
        .enumerate()
        .filter(|(t, _)| t % interval == 0)
        .collect())
}

pub fn load_frame(path: &Path, timestep: usize) -> Result<FrameRecord, IngestError> {
    let img = image::open(path).map_err(|e| IngestError::DecodeError {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    FrameRecord::new(timestep, w, h, rgb.into_raw())
}

/// Loads one frame every `interval` frames from an image-sequence directory.
pub fn load_sequence(dir: &Path, interval: usize) -> Result<Vec<FrameRecord>, IngestError> {
    let files = subsampled_files(dir, interval)?;
    let mut frames: Vec<FrameRecord> = Vec::with_capacity(files.len());
    for (t, path) in files {
        let frame = load_frame(&path, t)?;
        if let Some(first) = frames.first() {
            if frame.width != first.width || frame.height != first.height {
                return Err(IngestError::DimensionMismatch {
                    path,
                    got_w: frame.width,
                    got_h: frame.height,
                    want_w: first.width,
                    want_h: first.height,
                });
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

/// BT.601 luma, rounded half-up, computed in integer arithmetic.
#[inline]
pub fn luma(rgb: [u8; 3]) -> u8 {
    let weighted = 299 * rgb[0] as u32 + 587 * rgb[1] as u32 + 114 * rgb[2] as u32;
    ((weighted + 500) / 1000) as u8
}

pub fn to_grayscale(frame: &FrameRecord) -> GrayFrame {
    let pixels = frame
        .pixels
        .chunks_exact(3)
        .map(|p| luma([p[0], p[1], p[2]]))
        .collect();
    GrayFrame {
        timestep: frame.timestep,
        width: frame.width,
        height: frame.height,
        pixels,
    }
}
