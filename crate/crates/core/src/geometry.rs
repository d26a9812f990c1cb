//! Planar rigid-body poses, closed-form rigid alignment, and a small ICP
//! refiner used by the merge back-end.

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
}

/// Normalize an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

/// A planar rigid-body pose. `yaw` is kept normalized in (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose2 {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Pose2 {
            x: 0.0,
            y: 0.0,
            yaw: 0.0,
        }
    }

    pub fn translation(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    /// Apply this pose as a transform to a point expressed in its local frame.
    pub fn transform_point(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (
            self.x + c * p.0 - s * p.1,
            self.y + s * p.0 + c * p.1,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(
            -c * self.x - s * self.y,
            s * self.x - c * self.y,
            -self.yaw,
        )
    }
}

/// SE(2) composition `a * b`: apply `b` in the frame of `a`.
pub fn compose(a: &Pose2, b: &Pose2) -> Pose2 {
    let (x, y) = a.transform_point((b.x, b.y));
    Pose2::new(x, y, a.yaw + b.yaw)
}

/// Relative pose taking `a` to `b`: `compose(a, between(a, b)) == b`.
pub fn between(a: &Pose2, b: &Pose2) -> Pose2 {
    compose(&a.inverse(), b)
}

/// A planar point cloud.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud2 {
    pub points: Vec<(f64, f64)>,
}

impl PointCloud2 {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        PointCloud2 { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &Pose2) -> PointCloud2 {
        PointCloud2 {
            points: self
                .points
                .iter()
                .map(|&p| pose.transform_point(p))
                .collect(),
        }
    }
}

/// Least-squares rigid transform mapping `src` onto `dst` over index-paired
/// correspondences. Solved in closed form: centroids plus the polar angle of
/// the 2x2 cross-covariance.
pub fn estimate_rigid_transform(
    src: &[(f64, f64)],
    dst: &[(f64, f64)],
) -> Result<Pose2, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::DegenerateInput("length mismatch"));
    }
    if src.len() < 2 {
        return Err(GeometryError::DegenerateInput("fewer than 2 points"));
    }
    let n = src.len() as f64;
    let (mut csx, mut csy, mut cdx, mut cdy) = (0.0, 0.0, 0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        csx += s.0;
        csy += s.1;
        cdx += d.0;
        cdy += d.1;
    }
    csx /= n;
    csy /= n;
    cdx /= n;
    cdy /= n;

    // Cross-covariance terms: sum of dot and cross products of centered pairs.
    let mut dot = 0.0;
    let mut cross = 0.0;
    let mut src_spread = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (px, py) = (s.0 - csx, s.1 - csy);
        let (qx, qy) = (d.0 - cdx, d.1 - cdy);
        dot += px * qx + py * qy;
        cross += px * qy - py * qx;
        src_spread += px * px + py * py;
    }
    if src_spread < 1e-18 {
        return Err(GeometryError::DegenerateInput("all source points coincide"));
    }
    if dot * dot + cross * cross < 1e-24 * src_spread * src_spread {
        return Err(GeometryError::DegenerateInput("degenerate covariance"));
    }
    let yaw = cross.atan2(dot);
    let (s, c) = yaw.sin_cos();
    Ok(Pose2::new(cdx - (c * csx - s * csy), cdy - (s * csx + c * csy), yaw))
}

/// Rigid transform with residual trimming: refit on the correspondences
/// within three median residuals until the active set settles. Outlying
/// pairs (near-matches that are not the same physical point) stop skewing
/// the fit, and on exact data the estimate converges to machine precision.
pub fn estimate_rigid_transform_trimmed(
    src: &[(f64, f64)],
    dst: &[(f64, f64)],
) -> Result<Pose2, GeometryError> {
    let mut active: Vec<usize> = (0..src.len()).collect();
    let mut pose = estimate_rigid_transform(src, dst)?;
    for _ in 0..10 {
        let mut residuals: Vec<(usize, f64)> = active
            .iter()
            .map(|&i| {
                let p = pose.transform_point(src[i]);
                let d = ((p.0 - dst[i].0).powi(2) + (p.1 - dst[i].1).powi(2)).sqrt();
                (i, d)
            })
            .collect();
        residuals.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let median = residuals[residuals.len() / 2].1;
        let threshold = (3.0 * median).max(1e-9);
        let next: Vec<usize> = residuals
            .iter()
            .filter(|&&(_, d)| d <= threshold)
            .map(|&(i, _)| i)
            .collect();
        if next.len() < 2 || next.len() == active.len() {
            break;
        }
        let s: Vec<(f64, f64)> = next.iter().map(|&i| src[i]).collect();
        let d: Vec<(f64, f64)> = next.iter().map(|&i| dst[i]).collect();
        match estimate_rigid_transform(&s, &d) {
            Ok(p) => pose = p,
            Err(_) => break,
        }
        active = next;
    }
    Ok(pose)
}

/// Outcome of an ICP run. `converged` is false when the iteration hit
/// `max_iter` without the pose settling, or when no correspondences were
/// found inside the reject radius.
#[derive(Debug, Clone)]
pub struct IcpResult {
    pub pose: Pose2,
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Nearest-neighbor correspondences beyond this distance are dropped so that
/// non-overlapping regions cannot drag the alignment.
pub const ICP_REJECT_RADIUS: f64 = 2.0;

pub fn icp_refine(
    src: &PointCloud2,
    dst: &PointCloud2,
    init: &Pose2,
    max_iter: usize,
    tol: f64,
) -> Result<IcpResult, GeometryError> {
    icp_refine_with_radius(src, dst, init, max_iter, tol, ICP_REJECT_RADIUS)
}

pub fn icp_refine_with_radius(
    src: &PointCloud2,
    dst: &PointCloud2,
    init: &Pose2,
    max_iter: usize,
    tol: f64,
    reject_radius: f64,
) -> Result<IcpResult, GeometryError> {
    if src.is_empty() || dst.is_empty() {
        return Err(GeometryError::DegenerateInput("empty cloud"));
    }
    let mut pose = *init;
    let mut best_pose = pose;
    let mut best_residual = mean_matched_residual(src, dst, &pose, reject_radius);
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..max_iter {
        iterations = it + 1;
        let moved = src.transformed(&pose);
        let mut pairs_src = Vec::new();
        let mut pairs_dst = Vec::new();
        for p in &moved.points {
            let (q, d) = nearest(dst, *p);
            if d <= reject_radius {
                pairs_src.push(*p);
                pairs_dst.push(q);
            }
        }
        if pairs_src.len() < 2 {
            break; // no usable overlap
        }
        let delta = match estimate_rigid_transform(&pairs_src, &pairs_dst) {
            Ok(d) => d,
            Err(_) => break,
        };
        pose = compose(&delta, &pose);
        let residual = mean_matched_residual(src, dst, &pose, reject_radius);
        if residual < best_residual {
            best_residual = residual;
            best_pose = pose;
        }
        let step = delta.x.abs() + delta.y.abs() + delta.yaw.abs();
        if step < tol {
            converged = true;
            break;
        }
    }
    if !best_residual.is_finite() {
        converged = false;
    }
    Ok(IcpResult {
        pose: best_pose,
        residual: best_residual,
        converged,
        iterations,
    })
}

fn nearest(cloud: &PointCloud2, p: (f64, f64)) -> ((f64, f64), f64) {
    let mut best = (f64::INFINITY, (0.0, 0.0));
    for &q in &cloud.points {
        let d2 = (q.0 - p.0) * (q.0 - p.0) + (q.1 - p.1) * (q.1 - p.1);
        if d2 < best.0 {
            best = (d2, q);
        }
    }
    (best.1, best.0.sqrt())
}

fn mean_matched_residual(
    src: &PointCloud2,
    dst: &PointCloud2,
    pose: &Pose2,
    reject_radius: f64,
) -> f64 {
    let moved = src.transformed(pose);
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in &moved.points {
        let (_, d) = nearest(dst, *p);
        if d <= reject_radius {
            sum += d;
            count += 1;
        }
    }
    if count == 0 {
        f64::INFINITY
    } else {
        sum / count as f64
    }
}
