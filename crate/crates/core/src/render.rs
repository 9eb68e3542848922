//! Deterministic rasterization of trajectories and keyframe markers.
//!
//! Everything is integer-exact: no anti-aliasing, Bresenham lines, discs by
//! integer distance test, and an embedded 5x7 bitmap font for digits.

use std::io::Cursor;

use image::{codecs::png::PngEncoder, ExtendedColorType, ImageEncoder};

use crate::frames::FrameRecord;
use crate::geometry::Trajectory;

pub const CANVAS_SIZE: u32 = 800;
pub const CANVAS_MARGIN: f64 = 0.10;
pub const LINE_WIDTH: i32 = 3;
pub const POINT_DIAMETER: i32 = 5;
/// Hue swept by the colormap, in degrees.
pub const HUE_SPAN: f64 = 300.0;
pub const VIEW_AZIMUTH_DEG: f64 = 45.0;
pub const VIEW_ELEVATION_DEG: f64 = 30.0;
pub const MIN_MARKER_FRAME_WIDTH: u32 = 64;

pub type Rgb = [u8; 3];
pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];

#[derive(thiserror::Error, Debug, PartialEq, Eq)]
pub enum RenderError {
    #[error("frame {width}x{height} is too small for a marker")]
    FrameTooSmall { width: u32, height: u32 },
    #[error("rank {rank} out of range for {k} keyframes")]
    RankOutOfRange { rank: usize, k: usize },
    #[error("nothing to render")]
    EmptyTrajectory,
    #[error("png encoding failed: {0}")]
    Encode(String),
}

/// Time colormap: HSV with hue `300° · s`, full saturation and value.
/// Inputs outside `[0, 1]` are clamped.
pub fn colormap(s: f64) -> Rgb {
    let s = if s.is_nan() { 0.0 } else { s.clamp(0.0, 1.0) };
    hsv_to_rgb(HUE_SPAN * s, 1.0, 1.0)
}

/// Standard sector conversion, components rounded half-up to bytes.
pub fn hsv_to_rgb(hue: f64, saturation: f64, value: f64) -> Rgb {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = value * saturation;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let m = value - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let byte = |v: f64| ((v + m) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
    [byte(r), byte(g), byte(b)]
}

/// Color of point `index` in a sequence of `count`: `Φ(index / count)`.
pub fn sequence_color(index: usize, count: usize) -> Rgb {
    if count == 0 {
        return colormap(0.0);
    }
    colormap(index as f64 / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderKind {
    Bev,
    Plot3d,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
    pub kind: RenderKind,
    /// Pixel position of every trajectory point, in trajectory order.
    pub points: Vec<(i32, i32)>,
}

impl RenderedImage {
    pub fn rgb(&self, x: i32, y: i32) -> Rgb {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_png(&self) -> Result<Vec<u8>, RenderError> {
        encode_png(self.width, self.height, &self.pixels)
    }
}

pub fn encode_png(width: u32, height: u32, rgb: &[u8]) -> Result<Vec<u8>, RenderError> {
    let mut out = Cursor::new(Vec::new());
    PngEncoder::new(&mut out)
        .write_image(rgb, width, height, ExtendedColorType::Rgb8)
        .map_err(|e| RenderError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

/// A mutable RGB raster with clipped drawing primitives.
struct Raster<'a> {
    width: i32,
    height: i32,
    pixels: &'a mut [u8],
    clip: (i32, i32, i32, i32),
}

impl<'a> Raster<'a> {
    fn new(width: u32, height: u32, pixels: &'a mut [u8]) -> Self {
        Self {
            width: width as i32,
            height: height as i32,
            pixels,
            clip: (0, 0, width as i32 - 1, height as i32 - 1),
        }
    }

    fn put(&mut self, x: i32, y: i32, c: Rgb) {
        let (x0, y0, x1, y1) = self.clip;
        if x < x0 || y < y0 || x > x1 || y > y1 || x >= self.width || y >= self.height || x < 0 || y < 0 {
            return;
        }
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    /// Filled disc of the given radius (integer distance test).
    fn disc(&mut self, cx: i32, cy: i32, radius: i32, c: Rgb) {
        let r2 = radius * radius + radius;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dx * dx + dy * dy <= r2 {
                    self.put(cx + dx, cy + dy, c);
                }
            }
        }
    }

    fn square(&mut self, cx: i32, cy: i32, half: i32, c: Rgb) {
        for dy in -half..=half {
            for dx in -half..=half {
                self.put(cx + dx, cy + dy, c);
            }
        }
    }

    /// Bresenham line stamped with a square brush of `width` pixels.
    fn line(&mut self, (mut x0, mut y0): (i32, i32), (x1, y1): (i32, i32), width: i32, c: Rgb) {
        let half = width / 2;
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.square(x0, y0, half, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }
}

/// Maps 2D coordinates into the canvas with a 10% margin, preserving aspect
/// ratio. With `y_up` the second coordinate grows towards the top of the
/// image. A degenerate extent puts every point at the centre.
pub fn fit_to_canvas(coords: &[(f64, f64)], y_up: bool) -> Vec<(i32, i32)> {
    if coords.is_empty() {
        return Vec::new();
    }
    let (mut min_u, mut max_u, mut min_v, mut max_v) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(u, v) in coords {
        min_u = min_u.min(u);
        max_u = max_u.max(u);
        min_v = min_v.min(v);
        max_v = max_v.max(v);
    }
    let size = CANVAS_SIZE as f64;
    let usable = size * (1.0 - 2.0 * CANVAS_MARGIN);
    let extent = (max_u - min_u).max(max_v - min_v);
    let scale = if extent > 1e-12 { usable / extent } else { 0.0 };
    let (mid_u, mid_v) = ((min_u + max_u) / 2.0, (min_v + max_v) / 2.0);
    let centre = size / 2.0;
    coords
        .iter()
        .map(|&(u, v)| {
            let px = centre + (u - mid_u) * scale;
            let dv = (v - mid_v) * scale;
            let py = if y_up { centre - dv } else { centre + dv };
            (px.round() as i32, py.round() as i32)
        })
        .collect()
}

fn draw_polyline(points: &[(i32, i32)], kind: RenderKind) -> RenderedImage {
    let (w, h) = (CANVAS_SIZE, CANVAS_SIZE);
    let mut pixels = WHITE.repeat((w * h) as usize);
    {
        let mut raster = Raster::new(w, h, &mut pixels);
        let n = points.len();
        for i in 1..n {
            raster.line(points[i - 1], points[i], LINE_WIDTH, sequence_color(i, n));
        }
        // later points first, so coincident points show the earliest color
        for (i, &(x, y)) in points.iter().enumerate().rev() {
            raster.disc(x, y, POINT_DIAMETER / 2, sequence_color(i, n));
        }
    }
    RenderedImage {
        width: w,
        height: h,
        pixels,
        kind,
        points: points.to_vec(),
    }
}

/// Top-down view: camera positions projected onto the XY plane, y up.
pub fn render_bev(traj: &Trajectory) -> Result<RenderedImage, RenderError> {
    if traj.is_empty() {
        return Err(RenderError::EmptyTrajectory);
    }
    let coords: Vec<_> = traj.positions().iter().map(|p| (p.x, p.y)).collect();
    Ok(draw_polyline(&fit_to_canvas(&coords, true), RenderKind::Bev))
}

/// Orthographic screen coordinates for the fixed 3D view.
pub fn project_3d(x: f64, y: f64, z: f64) -> (f64, f64) {
    let (sa, ca) = VIEW_AZIMUTH_DEG.to_radians().sin_cos();
    let (se, ce) = VIEW_ELEVATION_DEG.to_radians().sin_cos();
    let u = x * ca - y * sa;
    let v = (x * sa + y * ca) * se - z * ce;
    (u, v)
}

/// Oblique orthographic view (azimuth 45°, elevation 30°). `v` already
/// points down the screen, so it is not flipped.
pub fn render_3d(traj: &Trajectory) -> Result<RenderedImage, RenderError> {
    if traj.is_empty() {
        return Err(RenderError::EmptyTrajectory);
    }
    let coords: Vec<_> = traj.positions().iter().map(|p| project_3d(p.x, p.y, p.z)).collect();
    Ok(draw_polyline(&fit_to_canvas(&coords, false), RenderKind::Plot3d))
}

const DIGITS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

/// Rasterizes a decimal number with the 5x7 font scaled (nearest neighbour)
/// to `height` pixels. Returns `(width, mask)`.
pub fn text_mask(value: usize, height: i32) -> (i32, Vec<bool>) {
    let height = height.max(1);
    let glyph_w = ((5 * height) as f64 / 7.0).round().max(1.0) as i32;
    let gap = ((height as f64) / 7.0).round().max(1.0) as i32;
    let digits: Vec<usize> = value.to_string().bytes().map(|b| (b - b'0') as usize).collect();
    let width = digits.len() as i32 * glyph_w + (digits.len() as i32 - 1) * gap;
    let mut mask = vec![false; (width * height) as usize];
    for (d, &digit) in digits.iter().enumerate() {
        let x0 = d as i32 * (glyph_w + gap);
        for gy in 0..height {
            let row = DIGITS[digit][(gy * 7 / height) as usize];
            for gx in 0..glyph_w {
                let col = gx * 5 / glyph_w;
                if row >> (4 - col) & 1 == 1 {
                    mask[(gy * width + x0 + gx) as usize] = true;
                }
            }
        }
    }
    (width, mask)
}

/// A keyframe carrying its time marker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedKeyframe {
    pub frame: FrameRecord,
    pub rank: usize,
    pub color: Rgb,
    pub center: (i32, i32),
    pub radius: i32,
}

impl EncodedKeyframe {
    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of the marker.
    pub fn bounding_box(&self) -> (i32, i32, i32, i32) {
        marker_bounds(self.center, self.radius, self.frame.width, self.frame.height)
    }
}

fn marker_bounds(center: (i32, i32), r: i32, w: u32, h: u32) -> (i32, i32, i32, i32) {
    (
        (center.0 - r).max(0),
        (center.1 - r).max(0),
        (center.0 + r).min(w as i32 - 1),
        (center.1 + r).min(h as i32 - 1),
    )
}

/// Marker geometry for a frame width: `(margin, radius)`.
pub fn marker_geometry(width: u32) -> (i32, i32) {
    let margin = (0.06 * width as f64).round().max(12.0) as i32;
    let radius = (0.75 * margin as f64).round() as i32;
    (margin, radius)
}

/// Draws a filled circle of color `Φ(rank / k)` in the top-right corner
/// with the rank printed inside in white with a black outline. Pixels
/// outside the circle's bounding box are left untouched.
pub fn overlay_marker(frame: &FrameRecord, rank: usize, k: usize) -> Result<EncodedKeyframe, RenderError> {
    if rank >= k {
        return Err(RenderError::RankOutOfRange { rank, k });
    }
    let (margin, radius) = marker_geometry(frame.width);
    if frame.width < MIN_MARKER_FRAME_WIDTH || (frame.height as i32) < margin + radius + 1 {
        return Err(RenderError::FrameTooSmall {
            width: frame.width,
            height: frame.height,
        });
    }
    let center = (frame.width as i32 - margin, margin);
    let color = sequence_color(rank, k);
    let mut out = frame.clone();
    {
        let mut raster = Raster::new(frame.width, frame.height, &mut out.pixels);
        raster.clip = marker_bounds(center, radius, frame.width, frame.height);
        raster.disc_exact(center.0, center.1, radius, color);

        let (tw, mask) = text_mask(rank, radius);
        let th = radius.max(1);
        let left = center.0 - tw / 2;
        let top = center.1 - th / 2;
        let on = |x: i32, y: i32| x >= 0 && y >= 0 && x < tw && y < th && mask[(y * tw + x) as usize];
        for y in -1..=th {
            for x in -1..=tw {
                if on(x, y) {
                    continue;
                }
                let near = (-1..=1).any(|dy| (-1..=1).any(|dx| on(x + dx, y + dy)));
                if near {
                    raster.put(left + x, top + y, BLACK);
                }
            }
        }
        for y in 0..th {
            for x in 0..tw {
                if on(x, y) {
                    raster.put(left + x, top + y, WHITE);
                }
            }
        }
    }
    Ok(EncodedKeyframe {
        frame: out,
        rank,
        color,
        center,
        radius,
    })
}

impl Raster<'_> {
    fn disc_exact(&mut self, cx: i32, cy: i32, radius: i32, c: Rgb) {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dx * dx + dy * dy <= radius * radius {
                    self.put(cx + dx, cy + dy, c);
                }
            }
        }
    }
}
