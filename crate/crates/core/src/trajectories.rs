//! Dense trajectory sampling, tracking, pruning and camera-motion compensation.

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clipio::{Frame, SemanticMask};
use crate::denseflow::FlowField;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Flow steps per trajectory.
pub const TRACK_STEPS: usize = 15;
/// Points per trajectory (`TRACK_STEPS + 1`).
pub const TRACK_POINTS: usize = TRACK_STEPS + 1;

/// Corner responses at or below this are treated as flat.
const RESPONSE_FLOOR: f32 = 1e-10;
const MIN_HOMOGRAPHY_INLIERS: usize = 20;
const RANSAC_ITERATIONS: usize = 300;
const RANSAC_THRESHOLD: f64 = 1.0;
const RANSAC_SEED: u64 = 0x5EED_CAFE;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub x: f32,
    pub y: f32,
    pub z: usize,
}

/// Sixteen consecutive tracked positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    /// Builds a trajectory from 16 `(x, y)` positions starting at frame `start`.
    pub fn from_positions(start: usize, positions: &[(f32, f32)]) -> Result<Self> {
        if positions.len() != TRACK_POINTS {
            return Err(Error::CountMismatch {
                context: "trajectory points".into(),
                expected: TRACK_POINTS,
                found: positions.len(),
            });
        }
        Ok(Trajectory {
            points: positions
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| TrajectoryPoint { x, y, z: start + i })
                .collect(),
        })
    }

    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn start_frame(&self) -> usize {
        self.points[0].z
    }

    pub fn end_frame(&self) -> usize {
        self.points[TRACK_STEPS].z
    }

    /// Euclidean length of each of the 15 steps.
    pub fn step_lengths(&self) -> Vec<f32> {
        self.points
            .windows(2)
            .map(|w| ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt())
            .collect()
    }

    /// Point at frame `z`, if the trajectory covers it.
    pub fn at_frame(&self, z: usize) -> Option<&TrajectoryPoint> {
        z.checked_sub(self.start_frame())
            .and_then(|i| self.points.get(i))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerParams {
    /// Grid spacing in pixels.
    pub stride: usize,
    /// Corner threshold as a fraction of the frame's strongest response.
    pub quality_floor: f32,
    pub max_step: f32,
    pub min_std: f32,
    /// Mean step length that keeps a low-variance track as a uniform mover.
    pub motion_floor: f32,
    pub erratic_frac: f32,
    pub median_kernel: usize,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            stride: 5,
            quality_floor: 0.001,
            max_step: 8.0,
            min_std: 0.3,
            motion_floor: 0.4,
            erratic_frac: 0.7,
            median_kernel: 3,
        }
    }
}

impl SamplerParams {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 2 {
            return Err(Error::Invalid("sampling stride must be >= 2".into()));
        }
        if !(self.erratic_frac > 0.0 && self.erratic_frac < 1.0) {
            return Err(Error::Invalid("erratic_frac must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// Minimum eigenvalue of the 3×3-summed structure tensor.
pub fn corner_response(img: &Grid<f32>) -> Grid<f32> {
    let (dx, dy) = img.gradients();
    let (w, h) = (img.width(), img.height());
    let xx = Grid::from_fn(w, h, |x, y| dx.get(x, y) * dx.get(x, y));
    let yy = Grid::from_fn(w, h, |x, y| dy.get(x, y) * dy.get(x, y));
    let xy = Grid::from_fn(w, h, |x, y| dx.get(x, y) * dy.get(x, y));
    let ones = [1.0f32; 3];
    let (sxx, syy, sxy) = (
        xx.convolve_separable(&ones),
        yy.convolve_separable(&ones),
        xy.convolve_separable(&ones),
    );
    Grid::from_fn(w, h, |x, y| {
        let (a, c, b) = (sxx.get(x, y), syy.get(x, y), sxy.get(x, y));
        let half_tr = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        (half_tr - disc).max(0.0)
    })
}

/// Grid coordinates visited by the sampler for a frame of the given size.
pub fn sample_grid(width: usize, height: usize, stride: usize) -> Vec<(usize, usize)> {
    let offset = stride / 2;
    let mut pts = Vec::new();
    for y in (offset..height).step_by(stride) {
        for x in (offset..width).step_by(stride) {
            pts.push((x, y));
        }
    }
    pts
}

/// Grid points with a strong enough corner response that no existing track
/// already covers (Chebyshev distance ≤ stride/2).
pub fn dense_sample(
    frame: &Frame,
    stride: usize,
    quality_floor: f32,
    existing: &[(f32, f32)],
) -> Vec<(f32, f32)> {
    let response = corner_response(frame.grid());
    let threshold = (quality_floor * response.max_abs()).max(RESPONSE_FLOOR);
    let radius = stride as f32 / 2.0;
    sample_grid(frame.width(), frame.height(), stride)
        .into_iter()
        .filter(|&(x, y)| response.get(x, y) > threshold)
        .map(|(x, y)| (x as f32, y as f32))
        .filter(|&(x, y)| {
            !existing
                .iter()
                .any(|&(ex, ey)| (ex - x).abs() <= radius && (ey - y).abs() <= radius)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrackOutcome {
    Accepted(Trajectory),
    LeftFrame { step: usize },
    StepTooLarge { step: usize, length: f32 },
}

/// Advects `seed` through the first 15 of `flows`; `flows[0]` maps frame `start` to `start + 1`.
pub fn track(
    flows: &[FlowField],
    seed: (f32, f32),
    start: usize,
    max_step: f32,
) -> Result<TrackOutcome> {
    if flows.len() < TRACK_STEPS {
        return Err(Error::CountMismatch {
            context: "flow fields for tracking".into(),
            expected: TRACK_STEPS,
            found: flows.len(),
        });
    }
    let (w, h) = (flows[0].width() as f32, flows[0].height() as f32);
    let inside = |x: f32, y: f32| x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0;
    if !inside(seed.0, seed.1) {
        return Ok(TrackOutcome::LeftFrame { step: 0 });
    }
    let mut pos = Vec::with_capacity(TRACK_POINTS);
    pos.push(seed);
    let (mut x, mut y) = seed;
    for (step, flow) in flows[..TRACK_STEPS].iter().enumerate() {
        let (u, v) = flow.sample(x, y);
        let length = (u * u + v * v).sqrt();
        if length > max_step {
            return Ok(TrackOutcome::StepTooLarge {
                step: step + 1,
                length,
            });
        }
        x += u;
        y += v;
        if !inside(x, y) {
            return Ok(TrackOutcome::LeftFrame { step: step + 1 });
        }
        pos.push((x, y));
    }
    Ok(TrackOutcome::Accepted(Trajectory::from_positions(start, &pos)?))
}

/// True when the track barely moves: low step-length spread and a mean step
/// below the motion floor.
pub fn is_static(traj: &Trajectory, params: &SamplerParams) -> bool {
    let steps = traj.step_lengths();
    let n = steps.len() as f32;
    let mean = steps.iter().sum::<f32>() / n;
    let var = steps.iter().map(|s| (s - mean).powi(2)).sum::<f32>() / n;
    var.sqrt() < params.min_std && mean < params.motion_floor
}

/// True when a single step dominates the path length.
pub fn is_erratic(traj: &Trajectory, params: &SamplerParams) -> bool {
    let steps = traj.step_lengths();
    let total: f32 = steps.iter().sum();
    let max = steps.iter().copied().fold(0.0f32, f32::max);
    total > 0.0 && max > params.erratic_frac * total
}

/// Drops static and erratic tracks, preserving order.
pub fn prune(trajs: Vec<Trajectory>, params: &SamplerParams) -> Vec<Trajectory> {
    trajs
        .into_iter()
        .filter(|t| !is_static(t, params) && !is_erratic(t, params))
        .collect()
}

/// Samples, tracks and prunes every trajectory of a clip. `flows[i]` maps
/// frame `i` to `i + 1` and should already be median-filtered. The result is
/// ordered by start frame, then seed row, then seed column.
pub fn extract_trajectories(
    frames: &[Frame],
    flows: &[FlowField],
    params: &SamplerParams,
) -> Result<Vec<Trajectory>> {
    params.validate()?;
    if frames.len() < TRACK_POINTS {
        return Ok(Vec::new());
    }
    if flows.len() + 1 < frames.len() {
        return Err(Error::CountMismatch {
            context: "flow fields per clip".into(),
            expected: frames.len() - 1,
            found: flows.len(),
        });
    }
    let mut accepted: Vec<Trajectory> = Vec::new();
    for start in 0..=frames.len() - TRACK_POINTS {
        let existing: Vec<(f32, f32)> = accepted
            .iter()
            .filter_map(|t| t.at_frame(start).map(|p| (p.x, p.y)))
            .collect();
        let seeds = dense_sample(&frames[start], params.stride, params.quality_floor, &existing);
        let window = &flows[start..start + TRACK_STEPS];
        let tracked: Vec<TrackOutcome> = seeds
            .par_iter()
            .map(|&s| track(window, s, start, params.max_step))
            .collect::<Result<_>>()?;
        accepted.extend(tracked.into_iter().filter_map(|o| match o {
            TrackOutcome::Accepted(t) => Some(t),
            _ => None,
        }));
    }
    Ok(prune(accepted, params))
}

/// Result of removing the dominant homography from a flow field.
#[derive(Clone, Debug)]
pub struct CameraCompensation {
    pub flow: FlowField,
    pub homography: Option<Matrix3<f64>>,
    pub inliers: usize,
    /// Set when fewer than 20 inliers supported a fit; `flow` is then the input.
    pub degenerate: bool,
}

/// Fits a homography to flow correspondences by RANSAC and subtracts the
/// motion it induces. Correspondences come from textured pixels of `prev` on a
/// 4-pixel grid; pixels labelled foreground in `exclude` are skipped.
pub fn compensate_camera(
    flow: &FlowField,
    prev: &Frame,
    next: &Frame,
    exclude: Option<&SemanticMask>,
) -> Result<CameraCompensation> {
    let (w, h) = (flow.width(), flow.height());
    for (name, fw, fh) in [
        ("prev", prev.width(), prev.height()),
        ("next", next.width(), next.height()),
    ] {
        if fw != w || fh != h {
            return Err(Error::dims(
                format!("compensate_camera {name} frame"),
                format!("{w}x{h}"),
                format!("{fw}x{fh}"),
            ));
        }
    }
    let degenerate = |inliers| CameraCompensation {
        flow: flow.clone(),
        homography: None,
        inliers,
        degenerate: true,
    };

    let response = corner_response(prev.grid());
    let threshold = (0.001 * response.max_abs()).max(RESPONSE_FLOOR);
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (x, y) in sample_grid(w, h, 4) {
        if response.get(x, y) <= threshold {
            continue;
        }
        if exclude.is_some_and(|m| m.grid().get(x, y) != 0) {
            continue;
        }
        let (u, v) = (flow.u.get(x, y) as f64, flow.v.get(x, y) as f64);
        src.push((x as f64, y as f64));
        dst.push((x as f64 + u, y as f64 + v));
    }
    if src.len() < MIN_HOMOGRAPHY_INLIERS {
        log::warn!("camera compensation: only {} correspondences", src.len());
        return Ok(degenerate(src.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(RANSAC_SEED);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..RANSAC_ITERATIONS {
        let pick = sample(&mut rng, src.len(), 4).into_vec();
        let s: Vec<_> = pick.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = pick.iter().map(|&i| dst[i]).collect();
        let Some(hm) = fit_homography(&s, &d) else {
            continue;
        };
        let inliers: Vec<usize> = (0..src.len())
            .filter(|&i| reprojection_error(&hm, src[i], dst[i]) < RANSAC_THRESHOLD)
            .collect();
        if inliers.len() > best.len() {
            best = inliers;
            if best.len() == src.len() {
                break;
            }
        }
    }
    if best.len() < MIN_HOMOGRAPHY_INLIERS {
        log::warn!("camera compensation: only {} inliers", best.len());
        return Ok(degenerate(best.len()));
    }
    let s: Vec<_> = best.iter().map(|&i| src[i]).collect();
    let d: Vec<_> = best.iter().map(|&i| dst[i]).collect();
    let Some(hm) = fit_homography(&s, &d) else {
        return Ok(degenerate(best.len()));
    };

    let mut out = flow.clone();
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64, y as f64);
            let Some((qx, qy)) = apply_homography(&hm, (px, py)) else {
                continue;
            };
            out.u.set(x, y, flow.u.get(x, y) - (qx - px) as f32);
            out.v.set(x, y, flow.v.get(x, y) - (qy - py) as f32);
        }
    }
    Ok(CameraCompensation {
        flow: out,
        homography: Some(hm),
        inliers: best.len(),
        degenerate: false,
    })
}

pub fn apply_homography(hm: &Matrix3<f64>, p: (f64, f64)) -> Option<(f64, f64)> {
    let q = hm * Vector3::new(p.0, p.1, 1.0);
    (q.z.abs() > 1e-12).then(|| (q.x / q.z, q.y / q.z))
}

fn reprojection_error(hm: &Matrix3<f64>, s: (f64, f64), d: (f64, f64)) -> f64 {
    match apply_homography(hm, s) {
        Some((x, y)) => ((x - d.0).powi(2) + (y - d.1).powi(2)).sqrt(),
        None => f64::INFINITY,
    }
}

/// Similarity transform moving the centroid to the origin with mean distance √2.
fn normalizer(pts: &[(f64, f64)]) -> Option<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// Normalised direct linear transform over ≥ 4 correspondences.
pub fn fit_homography(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<Matrix3<f64>> {
    if src.len() < 4 || src.len() != dst.len() {
        return None;
    }
    let ts = normalizer(src)?;
    let td = normalizer(dst)?;
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (s, d) in src.iter().zip(dst) {
        let ps = ts * Vector3::new(s.0, s.1, 1.0);
        let pd = td * Vector3::new(d.0, d.1, 1.0);
        let (x, y) = (ps.x, ps.y);
        let (u, v) = (pd.x, pd.y);
        let r1 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r2 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for r in [r1, r2] {
            for i in 0..9 {
                for j in 0..9 {
                    ata[(i, j)] += r[i] * r[j];
                }
            }
        }
    }
    let eig = SymmetricEigen::new(ata);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let hv = eig.eigenvectors.column(imin);
    let hn = Matrix3::new(hv[0], hv[1], hv[2], hv[3], hv[4], hv[5], hv[6], hv[7], hv[8]);
    let hm = td.try_inverse()? * hn * ts;
    let scale = hm[(2, 2)];
    if scale.abs() < 1e-12 || !hm.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(hm / scale)
}
