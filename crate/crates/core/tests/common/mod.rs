//! Synthetic scenes with known geometry, shared by the integration tests.
#![allow(dead_code)]

pub mod oracles;

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
pub use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use seetrek::frames::{CameraIntrinsics, FrameRecord, GrayFrame};
use seetrek::geometry::Correspondence;

pub const SIZE: (u32, u32) = (640, 480);

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0).unwrap()
}

/// Camera-to-world rotation and camera center.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub r_wc: Matrix3<f64>,
    pub center: Vector3<f64>,
}

impl Camera {
    pub fn identity() -> Self {
        Self {
            r_wc: Matrix3::identity(),
            center: Vector3::zeros(),
        }
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.r_wc.transpose() * (world - self.center)
    }

    pub fn project(&self, k: &CameraIntrinsics, world: &Vector3<f64>) -> Option<(f64, f64)> {
        let c = self.to_camera(world);
        (c.z > 1e-6).then(|| (k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
    }
}

/// Ground-truth motion of `b` expressed in the frame of `a`: rotation and
/// unit direction of travel.
pub fn relative_motion(a: &Camera, b: &Camera) -> (Matrix3<f64>, Vector3<f64>) {
    let r = a.r_wc.transpose() * b.r_wc;
    let d = a.r_wc.transpose() * (b.center - a.center);
    (r, d.normalize())
}

pub fn rotation_error_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn direction_error_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a.normalize().dot(&b.normalize())).clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn random_rotation(rng: &mut impl Rng, max_deg: f64) -> Matrix3<f64> {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let angle = rng.random_range(-max_deg..max_deg).to_radians();
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
}

/// Next camera: small rotation and a step of length `step` along a mostly
/// forward or sideways direction in the current camera frame.
pub fn random_step(rng: &mut impl Rng, cam: &Camera, step: f64, max_rot_deg: f64) -> Camera {
    let dir = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.4..0.4),
        rng.random_range(-0.3..1.0),
    )
    .normalize();
    Camera {
        r_wc: cam.r_wc * random_rotation(rng, max_rot_deg),
        center: cam.center + cam.r_wc * dir * step,
    }
}

/// A textured rectangle: `center + a * axis_u + b * axis_v`, `|a|, |b| <= 1`.
#[derive(Clone, Copy, Debug)]
pub struct Quad {
    pub center: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
}

impl Quad {
    /// Ray parameter and in-plane coordinates of the hit, if any.
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let normal = self.axis_u.cross(&self.axis_v);
        let denom = normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = normal.dot(&(self.center - origin)) / denom;
        if s <= 1e-9 {
            return None;
        }
        let rel = origin + dir * s - self.center;
        let a = rel.dot(&self.axis_u) / self.axis_u.norm_squared();
        let b = rel.dot(&self.axis_v) / self.axis_v.norm_squared();
        (a.abs() <= 1.0 && b.abs() <= 1.0).then_some((s, a * self.axis_u.norm(), b * self.axis_v.norm()))
    }
}

/// Textured planes with known geometry: a backdrop box room plus a set of
/// free-standing rectangles at varied depths and orientations, so that no
/// view is dominated by a single plane. Textures are random blocks whose
/// junctions give plenty of corners.
#[derive(Clone, Debug)]
pub struct Scene {
    pub seed: u64,
    pub block: f64,
    pub quads: Vec<Quad>,
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Scene {
    /// Twelve rectangles in front of the origin, looking down +z.
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed ^ 0x5CE7E);
        let quads = (0..12)
            .map(|_| {
                let z = r.random_range(3.0..10.0);
                let center = Vector3::new(r.random_range(-0.6..0.6) * z, r.random_range(-0.45..0.45) * z, z);
                let facing = random_rotation(&mut r, 50.0);
                let half = r.random_range(0.6..1.4);
                Quad {
                    center,
                    axis_u: facing * Vector3::x() * half,
                    axis_v: facing * Vector3::y() * half,
                }
            })
            .collect();
        Self {
            seed,
            block: 0.2,
            quads,
            room_min: [-12.0, -9.0, -6.0],
            room_max: [12.0, 9.0, 16.0],
        }
    }

    /// Nearest surface hit: point and a surface id with its 2D texture coordinates.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(Vector3<f64>, usize, f64, f64)> {
        let mut best: Option<(f64, usize, f64, f64)> = None;
        for (i, q) in self.quads.iter().enumerate() {
            if let Some((s, a, b)) = q.hit(origin, dir) {
                if best.is_none_or(|(bs, ..)| s < bs) {
                    best = Some((s, i, a, b));
                }
            }
        }
        for axis in 0..3 {
            if dir[axis].abs() < 1e-12 {
                continue;
            }
            for (side, bound) in [(0, self.room_min[axis]), (1, self.room_max[axis])] {
                let s = (bound - origin[axis]) / dir[axis];
                if s <= 1e-9 || best.is_some_and(|(bs, ..)| bs <= s) {
                    continue;
                }
                let p = origin + dir * s;
                let inside =
                    (0..3).all(|a| a == axis || (self.room_min[a] - 1e-9..=self.room_max[a] + 1e-9).contains(&p[a]));
                if inside {
                    let (a, b) = match axis {
                        0 => (p.y, p.z),
                        1 => (p.x, p.z),
                        _ => (p.x, p.y),
                    };
                    best = Some((s, 100 + axis * 2 + side, a, b));
                }
            }
        }
        best.map(|(s, id, a, b)| (origin + dir * s, id, a, b))
    }

    fn texture(&self, id: usize, a: f64, b: f64) -> u8 {
        // Backdrop walls use coarser blocks since they are farther away.
        let block = if id >= 100 { self.block * 3.0 } else { self.block };
        let i = (a / block).floor() as i64 as u64;
        let j = (b / block).floor() as i64 as u64;
        let h = mix(self.seed ^ mix(id as u64 ^ mix(i ^ mix(j))));
        20 + (h % 216) as u8
    }

    fn ray(cam: &Camera, k: &CameraIntrinsics, u: f64, v: f64) -> Vector3<f64> {
        cam.r_wc * Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0)
    }

    /// Renders with 3x3 supersampling per pixel.
    pub fn render(&self, cam: &Camera, k: &CameraIntrinsics, width: u32, height: u32) -> Vec<u8> {
        let mut out = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0u32;
                for sy in 0..3 {
                    for sx in 0..3 {
                        let u = x as f64 + (sx as f64 + 0.5) / 3.0 - 0.5;
                        let v = y as f64 + (sy as f64 + 0.5) / 3.0 - 0.5;
                        acc += self
                            .intersect(&cam.center, &Self::ray(cam, k, u, v))
                            .map(|(_, id, a, b)| self.texture(id, a, b) as u32)
                            .unwrap_or(0);
                    }
                }
                out.push(((acc + 4) / 9) as u8);
            }
        }
        out
    }

    pub fn render_gray(&self, t: usize, cam: &Camera, k: &CameraIntrinsics, (w, h): (u32, u32)) -> GrayFrame {
        GrayFrame::new(t, w, h, self.render(cam, k, w, h)).unwrap()
    }

    pub fn render_rgb(&self, t: usize, cam: &Camera, k: &CameraIntrinsics, (w, h): (u32, u32)) -> FrameRecord {
        let gray = self.render(cam, k, w, h);
        let pixels = gray.iter().flat_map(|&g| [g, g / 2 + 60, 255 - g]).collect();
        FrameRecord::new(t, w, h, pixels).unwrap()
    }

    /// Visible surface points: rays through random pixels of a `w x h` view.
    pub fn sample_surface(
        &self,
        rng: &mut impl Rng,
        cam: &Camera,
        k: &CameraIntrinsics,
        (w, h): (u32, u32),
        n: usize,
    ) -> Vec<Vector3<f64>> {
        (0..n)
            .filter_map(|_| {
                let u = rng.random_range(0.0..w as f64);
                let v = rng.random_range(0.0..h as f64);
                self.intersect(&cam.center, &Self::ray(cam, k, u, v)).map(|(p, ..)| p)
            })
            .collect()
    }
}

/// Normalized correspondences of `points` seen by both cameras, with
/// optional Gaussian pixel noise of standard deviation `noise_px`.
pub fn correspondences(
    rng: &mut impl Rng,
    points: &[Vector3<f64>],
    a: &Camera,
    b: &Camera,
    k: &CameraIntrinsics,
    noise_px: f64,
) -> Vec<Correspondence> {
    let noise = Normal::new(0.0, noise_px.max(1e-300)).unwrap();
    let mut jitter = |v: f64| if noise_px > 0.0 { v + noise.sample(rng) } else { v };
    points
        .iter()
        .filter_map(|p| {
            let (u0, v0) = a.project(k, p)?;
            let (u1, v1) = b.project(k, p)?;
            let (u0, v0, u1, v1) = (jitter(u0), jitter(v0), jitter(u1), jitter(v1));
            Some(Correspondence {
                prev: Vector3::new((u0 - k.cx) / k.fx, (v0 - k.cy) / k.fy, 1.0),
                cur: Vector3::new((u1 - k.cx) / k.fx, (v1 - k.cy) / k.fy, 1.0),
            })
        })
        .collect()
}

/// Like [`correspondences`] but keeps only points that land inside a
/// `width x height` image in both views (before noise is added).
pub fn visible_correspondences(
    rng: &mut impl Rng,
    points: &[Vector3<f64>],
    a: &Camera,
    b: &Camera,
    k: &CameraIntrinsics,
    noise_px: f64,
    (width, height): (u32, u32),
) -> Vec<Correspondence> {
    let inside = |c: &Camera, p: &Vector3<f64>| {
        c.project(k, p)
            .is_some_and(|(u, v)| u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64)
    };
    let kept: Vec<_> = points.iter().filter(|p| inside(a, p) && inside(b, p)).copied().collect();
    correspondences(rng, &kept, a, b, k, noise_px)
}

/// Random points in a slab in front of the identity camera.
pub fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| {
            Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(4.0..10.0),
            )
        })
        .collect()
}

/// Writes `frames` as PNGs named `frame_0000.png`, ... into `dir`.
pub fn write_frames(dir: &Path, frames: &[FrameRecord]) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, f) in frames.iter().enumerate() {
        image::RgbImage::from_raw(f.width, f.height, f.pixels.clone())
            .unwrap()
            .save(dir.join(format!("frame_{i:04}.png")))
            .unwrap();
    }
}
