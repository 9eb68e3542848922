//! Two-view relative pose and trajectory chaining.
//!
//! ```text
//! matches (pixels)
//!   -> K^-1 normalization
//!   -> RANSAC over 8-point essential estimates, Sampson scoring
//!   -> re-fit on inliers, projection onto diag(1, 1, 0)
//!   -> four (R, t) candidates
//!   -> cheirality vote (linear triangulation)
//!   -> relative camera motion, folded into world poses
//! ```
//!
//! Conventions: an essential matrix satisfies `x_curᵀ E x_prev = 0` for
//! normalized homogeneous points, and decomposition candidates are point
//! transfers `X_cur = R X_prev + t`. [`RelativePose`] stores the inverse,
//! i.e. the orientation and position of the current camera expressed in the
//! previous camera's frame, which is what the world-pose recursion consumes.

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3, Vector4};
use rand::seq::index;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::frames::{CameraIntrinsics, GrayFrame};
use crate::orb::{self, MatchConfig, MatchSet, OrbConfig};

pub const MIN_CORRESPONDENCES: usize = 8;
/// Tolerance for the singular-value gap that marks a degenerate 8-point system.
pub const DEGENERACY_GAP: f64 = 1e-12;
/// Relative tolerance used when checking the (1, 1, 0) singular-value shape.
pub const MANIFOLD_TOLERANCE: f64 = 1e-6;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum GeometryError {
    #[error("need at least {MIN_CORRESPONDENCES} correspondences, got {0}")]
    InsufficientMatches(usize),
    #[error("best consensus has only {0} inliers")]
    NoConsensus(usize),
    #[error("degenerate point configuration")]
    DegenerateConfiguration,
    #[error("input matrix is zero or not finite")]
    InvalidInput,
    #[error("matrix is not an essential matrix (singular values {0:?})")]
    NotEssential([f64; 3]),
    #[error("need at least two frames, got {0}")]
    InsufficientFrames(usize),
    #[error(transparent)]
    Features(#[from] orb::OrbError),
}

/// A pair of normalized homogeneous image points (`z = 1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub prev: Vector3<f64>,
    pub cur: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EssentialMatrix(pub Matrix3<f64>);

impl EssentialMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Algebraic residual `x_curᵀ E x_prev`.
    pub fn residual(&self, c: &Correspondence) -> f64 {
        c.cur.dot(&(self.0 * c.prev))
    }

    /// First-order geometric (Sampson) distance of a correspondence, in
    /// normalized image units.
    pub fn sampson_distance(&self, c: &Correspondence) -> f64 {
        let e = self.residual(c);
        let l_cur = self.0 * c.prev;
        let l_prev = self.0.transpose() * c.cur;
        let denom = l_cur.x * l_cur.x + l_cur.y * l_cur.y + l_prev.x * l_prev.x + l_prev.y * l_prev.y;
        if denom <= f64::MIN_POSITIVE {
            return if e == 0.0 { 0.0 } else { f64::INFINITY };
        }
        e.abs() / denom.sqrt()
    }
}

/// Motion of the current camera relative to the previous one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    /// Unit-norm direction of travel; zero when flagged.
    pub translation: Vector3<f64>,
    pub inlier_count: usize,
    pub flagged: bool,
}

impl RelativePose {
    pub fn flagged() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            inlier_count: 0,
            flagged: true,
        }
    }

    /// Builds the camera motion from a point transfer `X_cur = R X_prev + t`.
    pub fn from_point_transfer(r: &Matrix3<f64>, t: &Vector3<f64>, inlier_count: usize) -> Self {
        let rotation = r.transpose();
        let translation = -(rotation * t);
        let norm = translation.norm();
        Self {
            rotation,
            translation: if norm > 0.0 { translation / norm } else { translation },
            inlier_count,
            flagged: false,
        }
    }

    /// The inverse of [`RelativePose::from_point_transfer`].
    pub fn point_transfer(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let r = self.rotation.transpose();
        (r, -(r * self.translation))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldPose {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
}

impl WorldPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            position: Vector3::zeros(),
        }
    }
}

impl Default for WorldPose {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub timestep: usize,
    pub pose: WorldPose,
    /// True when the step into this pose failed and was replaced by identity motion.
    pub flagged: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flags(&self) -> Vec<bool> {
        self.points.iter().map(|p| p.flagged).collect()
    }

    pub fn pose_at(&self, timestep: usize) -> Option<&WorldPose> {
        self.points.iter().find(|p| p.timestep == timestep).map(|p| &p.pose)
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.pose.position).collect()
    }

    /// Sub-trajectory restricted to the given timesteps (in their order).
    pub fn restrict(&self, timesteps: &[usize]) -> Option<Trajectory> {
        let points = timesteps
            .iter()
            .map(|&t| self.points.iter().find(|p| p.timestep == t).copied())
            .collect::<Option<Vec<_>>>()?;
        Some(Trajectory { points })
    }
}

/// `K^-1 [x, y, 1]ᵀ` for each pixel.
pub fn normalize_points(points: &[(f64, f64)], k: &CameraIntrinsics) -> Vec<Vector3<f64>> {
    points
        .iter()
        .map(|&(x, y)| Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0))
        .collect()
}

pub fn normalize_matches(matches: &MatchSet, k: &CameraIntrinsics) -> Vec<Correspondence> {
    matches
        .pairs
        .iter()
        .map(|m| Correspondence {
            prev: Vector3::new((m.prev.0 - k.cx) / k.fx, (m.prev.1 - k.cy) / k.fy, 1.0),
            cur: Vector3::new((m.cur.0 - k.cx) / k.fx, (m.cur.1 - k.cy) / k.fy, 1.0),
        })
        .collect()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SVD of a 3x3 matrix with singular values sorted in decreasing order.
pub(crate) fn sorted_svd3(m: &Matrix3<f64>) -> (Matrix3<f64>, Vector3<f64>, Matrix3<f64>) {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let mut us = Matrix3::zeros();
    let mut vs = Matrix3::zeros();
    let mut ss = Vector3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        us.set_column(dst, &u.column(src));
        vs.set_column(dst, &v.column(src));
        ss[dst] = s[src];
    }
    (us, ss, vs)
}

/// Closest essential matrix: `U diag(1, 1, 0) Vᵀ`.
pub fn project_to_essential_manifold(e: &Matrix3<f64>) -> Result<EssentialMatrix, GeometryError> {
    if !e.iter().all(|v| v.is_finite()) || e.iter().all(|&v| v == 0.0) {
        return Err(GeometryError::InvalidInput);
    }
    let (u, _, v) = sorted_svd3(e);
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
    Ok(EssentialMatrix(u * d * v.transpose()))
}

/// Translates points to their centroid and scales them to mean distance √2.
fn hartley_transform(points: impl Iterator<Item = Vector3<f64>> + Clone) -> Matrix3<f64> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    let (mx, my) = (sx / n, sy / n);
    let mean_dist = points.map(|p| ((p.x - mx).powi(2) + (p.y - my).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

/// Linear 8-point estimate followed by projection onto the essential manifold.
pub fn estimate_essential_8pt(corr: &[Correspondence]) -> Result<EssentialMatrix, GeometryError> {
    if corr.len() < MIN_CORRESPONDENCES {
        return Err(GeometryError::InsufficientMatches(corr.len()));
    }
    let t_prev = hartley_transform(corr.iter().map(|c| c.prev));
    let t_cur = hartley_transform(corr.iter().map(|c| c.cur));
    let rows = corr.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, c) in corr.iter().enumerate() {
        let p = t_prev * c.prev;
        let q = t_cur * c.cur;
        for r in 0..3 {
            for col in 0..3 {
                a[(i, 3 * r + col)] = q[r] * p[col];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateConfiguration)?;
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&x, &y| s[x].total_cmp(&s[y]));
    let largest = s[order[order.len() - 1]];
    if !(largest > 0.0) || s[order[1]] <= DEGENERACY_GAP * largest {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let null = v_t.row(order[0]);
    let e_hat = Matrix3::from_row_iterator(null.iter().copied());
    let e = t_cur.transpose() * e_hat * t_prev;
    project_to_essential_manifold(&e).map_err(|_| GeometryError::DegenerateConfiguration)
}

/// The four `(R, t)` point transfers consistent with `E = [t]x R`.
pub fn decompose_essential(e: &EssentialMatrix) -> Result<[(Matrix3<f64>, Vector3<f64>); 4], GeometryError> {
    if !e.0.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::InvalidInput);
    }
    let (mut u, s, mut v) = sorted_svd3(&e.0);
    let sv = [s[0], s[1], s[2]];
    if !(s[0] > 0.0) || (s[0] - s[1]).abs() > MANIFOLD_TOLERANCE * s[0] || s[2] > MANIFOLD_TOLERANCE * s[0] {
        return Err(GeometryError::NotEssential(sv));
    }
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v.determinant() < 0.0 {
        v = -v;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v.transpose();
    let r2 = u * w.transpose() * v.transpose();
    let t: Vector3<f64> = u.column(2).into_owned().normalize();
    Ok([(r1, t), (r1, -t), (r2, t), (r2, -t)])
}

/// Linear (DLT) triangulation between `[I | 0]` and `[R | t]`. Returns the
/// homogeneous point.
pub fn triangulate(c: &Correspondence, r: &Matrix3<f64>, t: &Vector3<f64>) -> Vector4<f64> {
    let p1 = nalgebra::Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let mut p2 = nalgebra::Matrix3x4::zeros();
    p2.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    p2.set_column(3, t);
    let (x1, x2) = (c.prev / c.prev.z, c.cur / c.cur.z);
    let a = Matrix4::from_rows(&[
        p1.row(2) * x1.x - p1.row(0),
        p1.row(2) * x1.y - p1.row(1),
        p2.row(2) * x2.x - p2.row(0),
        p2.row(2) * x2.y - p2.row(1),
    ]);
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;
    let min = (0..4).min_by(|&i, &j| s[i].total_cmp(&s[j])).unwrap_or(3);
    v_t.row(min).transpose()
}

/// Whether the triangulated point lies in front of both cameras.
pub fn in_front_of_both(c: &Correspondence, r: &Matrix3<f64>, t: &Vector3<f64>) -> bool {
    let x = triangulate(c, r, t);
    if x.w.abs() <= f64::EPSILON * x.xyz().norm() {
        return false;
    }
    let p = x.xyz() / x.w;
    let depth_prev = p.z;
    let depth_cur = (r * p + t).z;
    depth_prev > 0.0 && depth_cur > 0.0
}

pub fn cheirality_score(r: &Matrix3<f64>, t: &Vector3<f64>, inliers: &[Correspondence]) -> usize {
    inliers.iter().filter(|c| in_front_of_both(c, r, t)).count()
}

/// Picks the candidate with the most points in front of both cameras.
/// Returns a flagged identity pose when the winner's support is below
/// `max(8, half the inliers)`.
pub fn cheirality_select(candidates: &[(Matrix3<f64>, Vector3<f64>)], inliers: &[Correspondence]) -> RelativePose {
    let best = candidates
        .iter()
        .map(|(r, t)| (cheirality_score(r, t, inliers), r, t))
        .fold(None::<(usize, &Matrix3<f64>, &Vector3<f64>)>, |acc, cand| match acc {
            Some(a) if a.0 >= cand.0 => Some(a),
            _ => Some(cand),
        });
    let Some((score, r, t)) = best else {
        return RelativePose::flagged();
    };
    let needed = (MIN_CORRESPONDENCES as f64).max(0.5 * inliers.len() as f64);
    if (score as f64) < needed {
        return RelativePose::flagged();
    }
    RelativePose::from_point_transfer(r, t, inliers.len())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacParams {
    /// Inlier bound on the Sampson distance, normalized image units.
    pub threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold: 1e-3,
            max_iterations: 2000,
            confidence: 0.999,
            seed: 0x5EED,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacOutput {
    pub essential: EssentialMatrix,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub iterations: usize,
}

impl RansacOutput {
    pub fn inlier_correspondences(&self, corr: &[Correspondence]) -> Vec<Correspondence> {
        corr.iter().zip(&self.inliers).filter(|(_, &m)| m).map(|(c, _)| *c).collect()
    }
}

struct Score {
    count: usize,
    mean_error: f64,
    mask: Vec<bool>,
}

impl Score {
    fn of(e: &EssentialMatrix, corr: &[Correspondence], threshold: f64) -> Self {
        let mut count = 0;
        let mut sum = 0.0;
        let mask = corr
            .iter()
            .map(|c| {
                let d = e.sampson_distance(c);
                let inlier = d < threshold;
                if inlier {
                    count += 1;
                    sum += d;
                }
                inlier
            })
            .collect();
        Self {
            count,
            mean_error: if count > 0 { sum / count as f64 } else { f64::INFINITY },
            mask,
        }
    }

    fn beats(&self, other: &Score) -> bool {
        self.count > other.count || (self.count == other.count && self.mean_error < other.mean_error)
    }
}

/// Iterations needed to draw one all-inlier minimal sample with the given
/// confidence when a fraction `inlier_ratio` of the data are inliers.
pub fn required_iterations(inlier_ratio: f64, confidence: f64, sample_size: usize) -> usize {
    let good = inlier_ratio.powi(sample_size as i32);
    if good >= 1.0 {
        return 1;
    }
    if good <= 0.0 {
        return usize::MAX;
    }
    let n = (1.0 - confidence).ln() / (1.0 - good).ln();
    if n.is_finite() {
        n.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// Local optimization of a new best hypothesis: re-fit on the support
/// gathered at relaxed thresholds, keeping any fit that scores better at
/// the real threshold. Pulls hypotheses from near-degenerate minimal
/// samples back toward the model the whole scene agrees on.
fn local_optimize(
    mut e: EssentialMatrix,
    mut score: Score,
    corr: &[Correspondence],
    threshold: f64,
) -> (EssentialMatrix, Score) {
    for scale in [4.0, 2.0, 1.0] {
        for _ in 0..2 {
            let support: Vec<_> = corr
                .iter()
                .filter(|c| e.sampson_distance(c) < threshold * scale)
                .copied()
                .collect();
            let Ok(refit) = estimate_essential_8pt(&support) else {
                break;
            };
            let refit_score = Score::of(&refit, corr, threshold);
            if !refit_score.beats(&score) {
                break;
            }
            e = refit;
            score = refit_score;
        }
    }
    (e, score)
}

pub fn ransac_essential(corr: &[Correspondence], params: &RansacParams) -> Result<RansacOutput, GeometryError> {
    let n = corr.len();
    if n < MIN_CORRESPONDENCES {
        return Err(GeometryError::InsufficientMatches(n));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(EssentialMatrix, Score)> = None;
    let mut budget = params.max_iterations;
    let mut iterations = 0;
    let mut sample = [Correspondence {
        prev: Vector3::zeros(),
        cur: Vector3::zeros(),
    }; MIN_CORRESPONDENCES];
    while iterations < budget {
        iterations += 1;
        for (slot, i) in sample.iter_mut().zip(index::sample(&mut rng, n, MIN_CORRESPONDENCES)) {
            *slot = corr[i];
        }
        let Ok(e) = estimate_essential_8pt(&sample) else {
            continue;
        };
        let score = Score::of(&e, corr, params.threshold);
        if best.as_ref().is_none_or(|(_, b)| score.beats(b)) {
            let (e, score) = local_optimize(e, score, corr, params.threshold);
            let ratio = score.count as f64 / n as f64;
            budget = budget.min(required_iterations(ratio, params.confidence, MIN_CORRESPONDENCES));
            best = Some((e, score));
        }
    }
    let Some((mut e, mut score)) = best else {
        return Err(GeometryError::NoConsensus(0));
    };
    if score.count < MIN_CORRESPONDENCES {
        return Err(GeometryError::NoConsensus(score.count));
    }
    // Re-fit on the consensus set while it keeps growing or tightening.
    for _ in 0..4 {
        let support: Vec<_> = corr.iter().zip(&score.mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect();
        let Ok(refit) = estimate_essential_8pt(&support) else {
            break;
        };
        let refit_score = Score::of(&refit, corr, params.threshold);
        if refit_score.count < score.count
            || (refit_score.count == score.count && refit_score.mean_error >= score.mean_error)
        {
            break;
        }
        e = refit;
        score = refit_score;
    }
    Ok(RansacOutput {
        essential: e,
        inlier_count: score.count,
        inliers: score.mask,
        iterations,
    })
}

/// Signed Sampson residual of `x_curᵀ [t]× R x_prev`.
fn signed_sampson(e: &Matrix3<f64>, c: &Correspondence) -> f64 {
    let l_cur = e * c.prev;
    let l_prev = e.transpose() * c.cur;
    let denom = l_cur.x * l_cur.x + l_cur.y * l_cur.y + l_prev.x * l_prev.x + l_prev.y * l_prev.y;
    if denom <= f64::MIN_POSITIVE {
        return 0.0;
    }
    c.cur.dot(&l_cur) / denom.sqrt()
}

/// Unit vectors spanning the plane orthogonal to `t`.
fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = t.cross(&helper).normalize();
    (b1, t.cross(&b1))
}

/// Point transfer moved by a 5-vector: rotation increment (axis-angle,
/// right-multiplied) and a step along the unit sphere of directions.
fn perturb(r: &Matrix3<f64>, t: &Vector3<f64>, d: &[f64; 5]) -> (Matrix3<f64>, Vector3<f64>) {
    let (b1, b2) = tangent_basis(t);
    let rot = nalgebra::Rotation3::new(Vector3::new(d[0], d[1], d[2])).into_inner();
    (r * rot, (t + b1 * d[3] + b2 * d[4]).normalize())
}

fn sampson_cost(r: &Matrix3<f64>, t: &Vector3<f64>, corr: &[Correspondence]) -> f64 {
    let e = skew(t) * r;
    corr.iter().map(|c| signed_sampson(&e, c).powi(2)).sum()
}

/// Levenberg-Marquardt on the squared Sampson distances of `support`,
/// starting from the point transfer `(r, t)` with `|t| = 1`. The linear
/// 8-point fit minimizes an algebraic error that weights points unevenly;
/// this pulls the estimate to the geometric optimum.
pub fn refine_point_transfer(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    support: &[Correspondence],
) -> (Matrix3<f64>, Vector3<f64>) {
    const STEP: f64 = 1e-7;
    let (mut r, mut t) = (*r, t.normalize());
    if support.len() < MIN_CORRESPONDENCES {
        return (r, t);
    }
    let mut cost = sampson_cost(&r, &t, support);
    let mut lambda = 1e-3;
    for _ in 0..50 {
        let e0 = skew(&t) * r;
        let residuals: Vec<f64> = support.iter().map(|c| signed_sampson(&e0, c)).collect();
        let mut jac = DMatrix::<f64>::zeros(support.len(), 5);
        for k in 0..5 {
            let mut plus = [0.0; 5];
            let mut minus = [0.0; 5];
            plus[k] = STEP;
            minus[k] = -STEP;
            let (rp, tp) = perturb(&r, &t, &plus);
            let (rm, tm) = perturb(&r, &t, &minus);
            let (ep, em) = (skew(&tp) * rp, skew(&tm) * rm);
            for (i, c) in support.iter().enumerate() {
                jac[(i, k)] = (signed_sampson(&ep, c) - signed_sampson(&em, c)) / (2.0 * STEP);
            }
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let grad = &jt * DMatrix::from_column_slice(residuals.len(), 1, &residuals);
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj.clone();
            for k in 0..5 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&grad)) else {
                lambda *= 10.0;
                continue;
            };
            let d = [step[0], step[1], step[2], step[3], step[4]];
            let (rn, tn) = perturb(&r, &t, &d);
            let new_cost = sampson_cost(&rn, &tn, support);
            if new_cost < cost {
                let converged = cost - new_cost <= 1e-14 * cost || step.norm() < 1e-12;
                (r, t, cost) = (rn, tn, new_cost);
                lambda = (lambda / 10.0).max(1e-9);
                improved = !converged;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (r, t)
}

/// R_world' = R_world R_rel, T_world' = R_world T_rel + T_world. Flagged
/// steps leave the pose unchanged.
pub fn chain_pose(prev: &WorldPose, rel: &RelativePose) -> WorldPose {
    if rel.flagged {
        return *prev;
    }
    WorldPose {
        rotation: prev.rotation * rel.rotation,
        position: prev.rotation * rel.translation + prev.position,
    }
}

/// Relative pose from pixel matches, flagging instead of failing when the
/// step is degenerate.
pub fn relative_pose_from_matches(
    matches: &MatchSet,
    k: &CameraIntrinsics,
    params: &RansacParams,
) -> Result<RelativePose, GeometryError> {
    pose_from_correspondences(&normalize_matches(matches, k), params)
}

/// RANSAC, decomposition and cheirality, then geometric refinement of the
/// winning candidate. The consensus set is re-collected once after the
/// first refinement pass.
pub fn pose_from_correspondences(corr: &[Correspondence], params: &RansacParams) -> Result<RelativePose, GeometryError> {
    let fit = ransac_essential(corr, params)?;
    let candidates = decompose_essential(&fit.essential)?;
    let inliers = fit.inlier_correspondences(corr);
    let linear = cheirality_select(&candidates, &inliers);
    if linear.flagged {
        return Ok(linear);
    }
    let (r0, t0) = linear.point_transfer();
    let (mut r, mut t) = refine_point_transfer(&r0, &t0, &inliers);
    let mut support = inliers;
    let e = EssentialMatrix(skew(&t) * r);
    let regathered: Vec<_> = corr
        .iter()
        .filter(|c| e.sampson_distance(c) < params.threshold)
        .copied()
        .collect();
    if regathered.len() >= support.len() {
        support = regathered;
        (r, t) = refine_point_transfer(&r, &t, &support);
    }
    let needed = (MIN_CORRESPONDENCES as f64).max(0.5 * support.len() as f64);
    if (cheirality_score(&r, &t, &support) as f64) < needed {
        return Ok(linear);
    }
    Ok(RelativePose::from_point_transfer(&r, &t, support.len()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VoConfig {
    pub orb: OrbConfig,
    pub matching: MatchConfig,
    pub ransac: RansacParams,
}

/// Per-step diagnostics from [`run_vo`].
#[derive(Clone, Debug, PartialEq)]
pub struct VoStep {
    pub matches: usize,
    pub pose: RelativePose,
    pub failure: Option<GeometryError>,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Feature-based visual odometry over consecutive frames. Feature
/// extraction and per-pair estimation run on the current rayon pool; the
/// pose fold is sequential, so the result does not depend on scheduling.
pub fn run_vo_detailed(
    frames: &[GrayFrame],
    k: &CameraIntrinsics,
    config: &VoConfig,
) -> Result<(Trajectory, Vec<VoStep>), GeometryError> {
    if frames.len() < 2 {
        return Err(GeometryError::InsufficientFrames(frames.len()));
    }
    let features = frames
        .par_iter()
        .map(|f| orb::extract(f, &config.orb))
        .collect::<Result<Vec<_>, _>>()?;
    let steps: Vec<VoStep> = (1..frames.len())
        .into_par_iter()
        .map(|i| {
            let matches = orb::match_descriptors(&features[i - 1], &features[i], &config.matching);
            let params = RansacParams {
                seed: step_seed(config.ransac.seed, i),
                ..config.ransac
            };
            match relative_pose_from_matches(&matches, k, &params) {
                Ok(pose) => VoStep {
                    matches: matches.len(),
                    pose,
                    failure: None,
                },
                Err(e) => VoStep {
                    matches: matches.len(),
                    pose: RelativePose::flagged(),
                    failure: Some(e),
                },
            }
        })
        .collect();

    let mut points = Vec::with_capacity(frames.len());
    let mut pose = WorldPose::identity();
    points.push(TrajectoryPoint {
        timestep: frames[0].timestep,
        pose,
        flagged: false,
    });
    for (frame, step) in frames[1..].iter().zip(&steps) {
        pose = chain_pose(&pose, &step.pose);
        points.push(TrajectoryPoint {
            timestep: frame.timestep,
            pose,
            flagged: step.pose.flagged,
        });
    }
    Ok((Trajectory { points }, steps))
}

pub fn run_vo(frames: &[GrayFrame], k: &CameraIntrinsics, config: &VoConfig) -> Result<Trajectory, GeometryError> {
    run_vo_detailed(frames, k, config).map(|(t, _)| t)
}
