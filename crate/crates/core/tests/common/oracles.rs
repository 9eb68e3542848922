//! Brute-force reference implementations written straight from the
//! definitions, without the shortcuts taken by the library.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use rand::Rng;
use seetrek::detections::ClassSet;
use seetrek::frames::GrayFrame;
use seetrek::orb::{Descriptor, Feature, Keypoint, MatchConfig};

/// Radius-3 circle, listed independently of the library table.
fn circle() -> Vec<(i32, i32)> {
    let quarter = [(0, -3), (1, -3), (2, -2), (3, -1)];
    let mut out = Vec::new();
    for q in 0..4 {
        for &(x, y) in &quarter {
            // rotate by q quarter turns clockwise (image y down): (x, y) -> (-y, x)
            let (mut a, mut b) = (x, y);
            for _ in 0..q {
                (a, b) = (-b, a);
            }
            out.push((a, b));
        }
    }
    out
}

/// FAST criterion evaluated over every arc start, both polarities.
pub fn fast_score_oracle(g: &GrayFrame, x: i32, y: i32, tau: i32, n: usize) -> u32 {
    let c = circle();
    let p = g.get(x, y) as i32;
    let vals: Vec<i32> = c.iter().map(|(dx, dy)| g.get(x + dx, y + dy) as i32).collect();
    let mut best = 0;
    for start in 0..16 {
        let arc: Vec<i32> = (0..n).map(|k| vals[(start + k) % 16]).collect();
        let brighter = arc.iter().all(|&v| v > p + tau);
        let darker = arc.iter().all(|&v| v < p - tau);
        if brighter || darker {
            best = best.max(arc.iter().map(|&v| (v - p).unsigned_abs()).sum());
        }
    }
    best
}

/// Exhaustive detection: criterion at every pixel, 3x3 suppression where a
/// tie goes to the pixel earlier in raster order, then ranking.
pub fn detect_fast_oracle(g: &GrayFrame, tau: i32, n: usize, max_keypoints: usize) -> Vec<(u32, u32, u32)> {
    let (w, h) = (g.width as i32, g.height as i32);
    let score = |x: i32, y: i32| fast_score_oracle(g, x, y, tau, n);
    let mut out = Vec::new();
    for y in 16..h - 16 {
        for x in 16..w - 16 {
            let s = score(x, y);
            if s == 0 {
                continue;
            }
            let mut keep = true;
            for ny in y - 1..=y + 1 {
                for nx in x - 1..=x + 1 {
                    if (nx, ny) == (x, y) {
                        continue;
                    }
                    let o = score(nx, ny);
                    let earlier = (ny, nx) < (y, x);
                    if o > s || (o == s && earlier) {
                        keep = false;
                    }
                }
            }
            if keep {
                out.push((x as u32, y as u32, s));
            }
        }
    }
    out.sort_by_key(|&(x, y, s)| (std::cmp::Reverse(s), y, x));
    out.truncate(max_keypoints);
    out
}

/// Intensity-centroid angle from a direct double loop in floating point.
pub fn orientation_oracle(g: &GrayFrame, x: u32, y: u32, radius: i32) -> f64 {
    let (mut m10, mut m01) = (0.0f64, 0.0f64);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if ((dx * dx + dy * dy) as f64).sqrt() <= radius as f64 {
                let v = g.get(x as i32 + dx, y as i32 + dy) as f64;
                m10 += dx as f64 * v;
                m01 += dy as f64 * v;
            }
        }
    }
    if m10 == 0.0 && m01 == 0.0 {
        return 0.0;
    }
    let a = m01.atan2(m10);
    if a < 0.0 {
        a + std::f64::consts::TAU
    } else {
        a
    }
}

fn hamming(a: &Descriptor, b: &Descriptor) -> u32 {
    (0..256).filter(|&k| a.bit(k) != b.bit(k)).count() as u32
}

/// Nearest index (lowest on ties) and whether the ratio and distance tests
/// pass, from a fully sorted distance list.
fn nearest(from: &Descriptor, to: &[Descriptor], cfg: &MatchConfig) -> (usize, u32, bool) {
    let mut d: Vec<(u32, usize)> = to.iter().enumerate().map(|(j, x)| (hamming(from, x), j)).collect();
    d.sort();
    let (best, j) = d[0];
    let ratio_ok = d.len() == 1 || (best as f64) < cfg.ratio * d[1].0 as f64;
    (j, best, best <= cfg.max_distance && ratio_ok)
}

/// O(N^2) matching: mutual nearest neighbours passing both tests.
pub fn match_oracle(prev: &[Feature], cur: &[Feature], cfg: &MatchConfig) -> Vec<(usize, usize, u32)> {
    if prev.is_empty() || cur.is_empty() {
        return Vec::new();
    }
    let dp: Vec<Descriptor> = prev.iter().map(|f| f.descriptor).collect();
    let dc: Vec<Descriptor> = cur.iter().map(|f| f.descriptor).collect();
    let mut out = Vec::new();
    for (i, d) in dp.iter().enumerate() {
        let (j, dist, ok) = nearest(d, &dc, cfg);
        let (back, _, back_ok) = nearest(&dc[j], &dp, cfg);
        if ok && back_ok && back == i {
            out.push((i, j, dist));
        }
    }
    out
}

/// Random features whose descriptors cluster around a few prototypes, so
/// that near-ties and ratio-test rejections actually occur.
pub fn random_features(rng: &mut impl Rng, n: usize, prototypes: &[Descriptor], flips: u32) -> Vec<Feature> {
    (0..n)
        .map(|i| {
            let mut d = prototypes[rng.random_range(0..prototypes.len())];
            for _ in 0..rng.random_range(0..=flips) {
                let k = rng.random_range(0..256);
                d.0[k / 64] ^= 1 << (k % 64);
            }
            Feature {
                keypoint: Keypoint {
                    x: i as u32,
                    y: 0,
                    score: 1,
                    angle: 0.0,
                },
                descriptor: d,
            }
        })
        .collect()
}

pub fn random_descriptor(rng: &mut impl Rng) -> Descriptor {
    Descriptor([rng.random(), rng.random(), rng.random(), rng.random()])
}

/// A 64x64 test image from one of several generators.
pub fn corpus_image(rng: &mut impl Rng, kind: usize) -> GrayFrame {
    let (w, h) = (64u32, 64u32);
    let mut px = vec![0u8; (w * h) as usize];
    match kind % 6 {
        0 => px.iter_mut().for_each(|p| *p = rng.random()),
        1 => {
            let (x0, y0) = (rng.random_range(8..30), rng.random_range(8..30));
            for y in y0..y0 + 20 {
                for x in x0..x0 + 20 {
                    px[(y * w + x) as usize] = 255;
                }
            }
        }
        2 => {
            let cell = rng.random_range(3..9);
            let vals: Vec<u8> = (0..400).map(|_| rng.random()).collect();
            for y in 0..h {
                for x in 0..w {
                    px[(y * w + x) as usize] = vals[((y / cell) * 20 + x / cell) as usize % 400];
                }
            }
        }
        3 => {
            px.iter_mut().for_each(|p| *p = 128);
            for _ in 0..6 {
                let (x0, y0) = (rng.random_range(0..56), rng.random_range(0..56));
                let (rw, rh) = (rng.random_range(3..20), rng.random_range(3..20));
                let v: u8 = rng.random();
                for y in y0..(y0 + rh).min(h) {
                    for x in x0..(x0 + rw).min(w) {
                        px[(y * w + x) as usize] = v;
                    }
                }
            }
        }
        4 => {
            // few distinct levels: many equal scores exercise the tie rules
            px.iter_mut().for_each(|p| *p = [0u8, 100, 200][rng.random_range(0..3)]);
        }
        _ => {
            let (cx, cy) = (rng.random_range(20.0..44.0), rng.random_range(20.0..44.0));
            for y in 0..h {
                for x in 0..w {
                    let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    px[(y * w + x) as usize] = if r < 9.0 { 230 } else { (x * 2) as u8 };
                }
            }
        }
    }
    GrayFrame::new(0, w, h, px).unwrap()
}

/// Class timeline with random labels from a small vocabulary.
pub fn random_timeline(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<(usize, ClassSet)> {
    let mut t = 0;
    (0..len)
        .map(|_| {
            t += rng.random_range(1..4);
            let labels: Vec<String> = (0..vocab)
                .filter(|_| rng.random_bool(0.3))
                .map(|v| format!("c{v}"))
                .collect();
            (t, labels.into_iter().collect())
        })
        .collect()
}

fn labels(c: &ClassSet) -> HashSet<String> {
    c.labels().iter().cloned().collect()
}

/// Contiguous near-equal segments of `0..len`, earlier ones larger.
fn segments(len: usize, parts: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); parts];
    let mut idx = 0;
    for (p, seg) in out.iter_mut().enumerate() {
        let size = len / parts + usize::from(p < len % parts);
        seg.extend(idx..idx + size);
        idx += size;
    }
    out
}

/// Global top-K by class count, earlier timestep on ties.
pub fn topk_oracle(tl: &[(usize, ClassSet)], k: usize) -> Vec<usize> {
    let mut all: Vec<(usize, usize)> = tl.iter().map(|(t, c)| (labels(c).len(), *t)).collect();
    all.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = all.into_iter().take(k).map(|(_, t)| t).collect();
    out.sort();
    out
}

/// Richest frame of each of `min(k, n)` temporal segments.
pub fn temporal_oracle(tl: &[(usize, ClassSet)], k: usize) -> Vec<usize> {
    segments(tl.len(), k.min(tl.len()))
        .into_iter()
        .map(|seg| {
            let mut best = seg[0];
            for &i in &seg {
                if labels(&tl[i].1).len() > labels(&tl[best].1).len() {
                    best = i;
                }
            }
            tl[best].0
        })
        .collect()
}

/// Global richest frame, then per segment the unselected frame minimizing
/// (overlap with the accumulated pool, -count, t); segments without an
/// unselected frame fall back to the nearest unselected frame in time.
pub fn balanced_oracle(tl: &[(usize, ClassSet)], k: usize) -> Vec<usize> {
    let n = tl.len();
    if k >= n {
        return tl.iter().map(|(t, _)| *t).collect();
    }
    let mut global = 0;
    for i in 0..n {
        if labels(&tl[i].1).len() > labels(&tl[global].1).len() {
            global = i;
        }
    }
    let mut chosen: BTreeSet<usize> = [global].into();
    let mut pool = labels(&tl[global].1);
    for seg in segments(n, k - 1) {
        let free: Vec<usize> = seg.iter().copied().filter(|i| !chosen.contains(i)).collect();
        let pick = if free.is_empty() {
            let (lo, hi) = (tl[seg[0]].0, tl[*seg.last().unwrap()].0);
            (0..n)
                .filter(|i| !chosen.contains(i))
                .min_by_key(|&i| {
                    let t = tl[i].0;
                    (if t < lo { lo - t } else if t > hi { t - hi } else { 0 }, t)
                })
        } else {
            free.into_iter().min_by_key(|&i| {
                let l = labels(&tl[i].1);
                (l.intersection(&pool).count(), std::cmp::Reverse(l.len()), tl[i].0)
            })
        };
        let Some(i) = pick else { break };
        chosen.insert(i);
        pool.extend(labels(&tl[i].1));
    }
    chosen.into_iter().map(|i| tl[i].0).collect()
}
