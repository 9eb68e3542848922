//! Single-scale ORB: FAST corners, intensity-centroid orientation,
//! steered BRIEF descriptors and mutual-best Hamming matching.

use std::f64::consts::TAU;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::frames::GrayFrame;

/// Keypoints keep at least this many pixels to every image border.
pub const BORDER: u32 = 16;
/// Half-size of the 31x31 descriptor patch.
pub const PATCH_RADIUS: i32 = 15;
pub const DESCRIPTOR_BITS: usize = 256;
/// Number of discrete orientations used when steering the BRIEF pattern.
pub const ANGLE_BINS: usize = 30;
/// Seed of the BRIEF sampling pattern. Changing it changes every descriptor.
pub const BRIEF_SEED: u64 = 0x5EE7_7EC4_0B1E_F00D;

/// Radius-3 Bresenham circle, clockwise from 12 o'clock (image y points down).
pub const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

#[derive(thiserror::Error, Debug, Clone, PartialEq, Eq)]
pub enum OrbError {
    #[error("image {width}x{height} is smaller than 32x32")]
    ImageTooSmall { width: u32, height: u32 },
    #[error("FAST arc length {0} outside [9, 16]")]
    InvalidArcLength(usize),
    #[error("FAST threshold must be >= 1")]
    InvalidThreshold,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FastConfig {
    pub threshold: i32,
    pub arc_length: usize,
    pub max_keypoints: usize,
}

impl Default for FastConfig {
    fn default() -> Self {
        Self {
            threshold: 20,
            arc_length: 12,
            max_keypoints: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrbConfig {
    pub fast: FastConfig,
    pub orientation_radius: i32,
}

impl Default for OrbConfig {
    fn default() -> Self {
        Self {
            fast: FastConfig::default(),
            orientation_radius: PATCH_RADIUS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchConfig {
    pub ratio: f64,
    pub max_distance: u32,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            ratio: 0.75,
            max_distance: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: u32,
    pub y: u32,
    pub score: u32,
    /// Orientation in `[0, 2π)`.
    pub angle: f64,
}

impl Keypoint {
    pub fn position(&self) -> (f64, f64) {
        (self.x as f64, self.y as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Descriptor(pub [u64; 4]);

impl Descriptor {
    #[inline]
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| (a ^ b).count_ones()).sum()
    }

    #[inline]
    pub fn bit(&self, k: usize) -> bool {
        self.0[k / 64] >> (k % 64) & 1 == 1
    }

    #[inline]
    fn set(&mut self, k: usize) {
        self.0[k / 64] |= 1 << (k % 64);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    pub keypoint: Keypoint,
    pub descriptor: Descriptor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub prev_index: usize,
    pub cur_index: usize,
    pub prev: (f64, f64),
    pub cur: (f64, f64),
    pub distance: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn circular_run(mask: u16, n: usize) -> bool {
    let doubled = mask as u32 | (mask as u32) << 16;
    let mut run = doubled;
    for _ in 1..n {
        run &= run >> 1;
    }
    run & 0xFFFF != 0
}

/// FAST score at `(x, y)`: the largest summed absolute difference over any
/// arc of `n` consecutive circle pixels that are all brighter or all darker
/// than the centre by more than `threshold`; `0` when no arc qualifies.
pub fn fast_score(gray: &GrayFrame, x: i32, y: i32, threshold: i32, n: usize) -> u32 {
    let center = gray.get(x, y) as i32;
    let mut diffs = [0i32; 16];
    let mut bright: u16 = 0;
    let mut dark: u16 = 0;
    for (i, (dx, dy)) in CIRCLE.iter().enumerate() {
        let d = gray.get(x + dx, y + dy) as i32 - center;
        diffs[i] = d;
        if d > threshold {
            bright |= 1 << i;
        } else if d < -threshold {
            dark |= 1 << i;
        }
    }
    // An n-arc covers at least n/4 of the four compass pixels.
    let compass: u16 = 0b0001_0001_0001_0001;
    let need = (n / 4) as u32;
    let bright_ok = (bright & compass).count_ones() >= need && circular_run(bright, n);
    let dark_ok = (dark & compass).count_ones() >= need && circular_run(dark, n);
    if !bright_ok && !dark_ok {
        return 0;
    }
    let mut best = 0u32;
    for start in 0..16 {
        let window = arc_mask(start, n);
        if (bright_ok && bright & window == window) || (dark_ok && dark & window == window) {
            let sum: u32 = (0..n).map(|k| diffs[(start + k) % 16].unsigned_abs()).sum();
            best = best.max(sum);
        }
    }
    best
}

fn arc_mask(start: usize, n: usize) -> u16 {
    (0..n).fold(0u16, |m, k| m | 1 << ((start + k) % 16))
}

/// Detects FAST corners with 3x3 non-maximum suppression. Orientation is
/// left at zero; see [`orientation`].
pub fn detect_fast(gray: &GrayFrame, config: &FastConfig) -> Result<Vec<Keypoint>, OrbError> {
    if gray.width < 2 * BORDER || gray.height < 2 * BORDER {
        return Err(OrbError::ImageTooSmall {
            width: gray.width,
            height: gray.height,
        });
    }
    if !(9..=16).contains(&config.arc_length) {
        return Err(OrbError::InvalidArcLength(config.arc_length));
    }
    if config.threshold < 1 {
        return Err(OrbError::InvalidThreshold);
    }
    let (w, h) = (gray.width as i32, gray.height as i32);
    let b = BORDER as i32;
    // Scores for the keypoint region plus a one-pixel ring used by the NMS.
    let (x0, y0, x1, y1) = (b - 1, b - 1, w - b, h - b);
    let sw = (x1 - x0 + 1) as usize;
    let sh = (y1 - y0 + 1).max(0) as usize;
    let mut scores = vec![0u32; sw * sh];
    for y in y0..=y1 {
        for x in x0..=x1 {
            scores[(y - y0) as usize * sw + (x - x0) as usize] =
                fast_score(gray, x, y, config.threshold, config.arc_length);
        }
    }
    let at = |x: i32, y: i32| scores[(y - y0) as usize * sw + (x - x0) as usize];

    let mut keypoints = Vec::new();
    for y in b..(h - b) {
        for x in b..(w - b) {
            let s = at(x, y);
            if s == 0 {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -1..=1 {
                for dx in -1..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let o = at(x + dx, y + dy);
                    // equal scores: the first in raster order survives
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if o > s || (o == s && earlier) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                keypoints.push(Keypoint {
                    x: x as u32,
                    y: y as u32,
                    score: s,
                    angle: 0.0,
                });
            }
        }
    }
    keypoints.sort_by(|a, b| b.score.cmp(&a.score).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
    keypoints.truncate(config.max_keypoints);
    Ok(keypoints)
}

/// Intensity-centroid orientation over a disc of `radius` around the keypoint.
pub fn orientation(gray: &GrayFrame, kp: &Keypoint, radius: i32) -> f64 {
    let (cx, cy) = (kp.x as i32, kp.y as i32);
    let r2 = radius * radius;
    let mut m10: i64 = 0;
    let mut m01: i64 = 0;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy > r2 {
                continue;
            }
            let v = gray.get(cx + dx, cy + dy) as i64;
            m10 += dx as i64 * v;
            m01 += dy as i64 * v;
        }
    }
    if m10 == 0 && m01 == 0 {
        return 0.0;
    }
    wrap_angle((m01 as f64).atan2(m10 as f64))
}

fn wrap_angle(theta: f64) -> f64 {
    let t = if theta < 0.0 { theta + TAU } else { theta };
    if t >= TAU {
        0.0
    } else {
        t
    }
}

type PointPair = [(i32, i32); 2];

/// The 256 BRIEF test pairs, drawn from an isotropic Gaussian with
/// sigma = 31/5 and restricted to the disc of radius 15 so every rotated
/// copy stays inside the 31x31 patch.
pub fn brief_pattern() -> &'static [PointPair; DESCRIPTOR_BITS] {
    static PATTERN: OnceLock<[PointPair; DESCRIPTOR_BITS]> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(BRIEF_SEED);
        let normal = Normal::<f64>::new(0.0, 31.0 / 5.0).expect("valid sigma");
        let mut draw = || loop {
            let x = normal.sample(&mut rng).round() as i32;
            let y = normal.sample(&mut rng).round() as i32;
            if x * x + y * y <= PATCH_RADIUS * PATCH_RADIUS {
                return (x, y);
            }
        };
        let mut pattern = [[(0, 0); 2]; DESCRIPTOR_BITS];
        for pair in pattern.iter_mut() {
            loop {
                let a = draw();
                let b = draw();
                if a != b {
                    *pair = [a, b];
                    break;
                }
            }
        }
        pattern
    })
}

fn rotated_patterns() -> &'static [[PointPair; DESCRIPTOR_BITS]] {
    static ROTATED: OnceLock<Vec<[PointPair; DESCRIPTOR_BITS]>> = OnceLock::new();
    ROTATED.get_or_init(|| {
        let base = brief_pattern();
        (0..ANGLE_BINS)
            .map(|bin| {
                let angle = bin as f64 * TAU / ANGLE_BINS as f64;
                let (s, c) = angle.sin_cos();
                let rot = |(x, y): (i32, i32)| {
                    let (x, y) = (x as f64, y as f64);
                    ((c * x - s * y).round() as i32, (s * x + c * y).round() as i32)
                };
                let mut out = [[(0, 0); 2]; DESCRIPTOR_BITS];
                for (dst, src) in out.iter_mut().zip(base.iter()) {
                    *dst = [rot(src[0]), rot(src[1])];
                }
                out
            })
            .collect()
    })
}

/// Index of the steering bin closest to `angle` (12 degree steps).
pub fn angle_bin(angle: f64) -> usize {
    ((angle / (TAU / ANGLE_BINS as f64)).round() as usize) % ANGLE_BINS
}

/// Steered BRIEF: bit k is set iff `f(p + R a_k) < f(p + R b_k)`.
pub fn describe_brief(gray: &GrayFrame, kp: &Keypoint) -> Descriptor {
    let pattern = &rotated_patterns()[angle_bin(kp.angle)];
    let (cx, cy) = (kp.x as i32, kp.y as i32);
    let mut d = Descriptor::default();
    for (k, [a, b]) in pattern.iter().enumerate() {
        if gray.get(cx + a.0, cy + a.1) < gray.get(cx + b.0, cy + b.1) {
            d.set(k);
        }
    }
    d
}

/// Full ORB extraction for one frame.
pub fn extract(gray: &GrayFrame, config: &OrbConfig) -> Result<Vec<Feature>, OrbError> {
    let keypoints = detect_fast(gray, &config.fast)?;
    Ok(keypoints
        .into_iter()
        .map(|mut kp| {
            kp.angle = orientation(gray, &kp, config.orientation_radius);
            Feature {
                descriptor: describe_brief(gray, &kp),
                keypoint: kp,
            }
        })
        .collect())
}

#[derive(Clone, Copy)]
struct Nearest {
    index: usize,
    best: u32,
    second: u32,
}

impl Nearest {
    fn new() -> Self {
        Self {
            index: usize::MAX,
            best: u32::MAX,
            second: u32::MAX,
        }
    }

    fn offer(&mut self, index: usize, d: u32) {
        if d < self.best {
            self.second = self.best;
            self.best = d;
            self.index = index;
        } else if d < self.second {
            self.second = d;
        }
    }

    fn passes(&self, config: &MatchConfig) -> bool {
        self.best <= config.max_distance && (self.second == u32::MAX || (self.best as f64) < config.ratio * self.second as f64)
    }
}

/// Matches previous-frame features to current-frame features. A pair is
/// kept when each is the other's nearest neighbour, the distance is within
/// `max_distance` and the ratio test holds in both directions.
pub fn match_descriptors(prev: &[Feature], cur: &[Feature], config: &MatchConfig) -> MatchSet {
    if prev.is_empty() || cur.is_empty() {
        return MatchSet::default();
    }
    let mut rows = vec![Nearest::new(); prev.len()];
    let mut cols = vec![Nearest::new(); cur.len()];
    for (i, p) in prev.iter().enumerate() {
        for (j, c) in cur.iter().enumerate() {
            let d = p.descriptor.hamming(&c.descriptor);
            rows[i].offer(j, d);
            cols[j].offer(i, d);
        }
    }
    let pairs = rows
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let j = row.index;
            let col = &cols[j];
            (col.index == i && row.passes(config) && col.passes(config)).then(|| Match {
                prev_index: i,
                cur_index: j,
                prev: prev[i].keypoint.position(),
                cur: cur[j].keypoint.position(),
                distance: row.best,
            })
        })
        .collect();
    MatchSet { pairs }
}
