//! Projective data association and GICP registration against the pano.

use std::time::{Duration, Instant};

use nalgebra::{Matrix3x6, Matrix6, Vector6};
use rayon::prelude::*;

use crate::geometry::{skew, Gaussian3, Mat3, Pose, Vec3};
use crate::grid::FeatureGrid;
use crate::pano::DepthPano;
use crate::traj::LocalTrajectory;

pub const DEFAULT_ASSOC_TOL: f64 = 0.1;
pub const COV_EPS: f64 = 1e-6;
/// Reduction chunk size. Partial sums are combined in chunk order, so the
/// result does not depend on how chunks are scheduled.
const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpParams {
    /// Relative depth gate for association.
    pub assoc_tol: f64,
    pub window_rows: usize,
    pub window_cols: usize,
    pub max_outer: usize,
    pub max_inner: usize,
    pub min_matches: usize,
    pub lm_lambda: f64,
    pub huber_delta: f64,
    /// Optional gate on the squared Mahalanobis residual, applied when the
    /// matches are prepared.
    pub chi2_gate: Option<f64>,
    pub cond_warn: f64,
    pub step_tol: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            assoc_tol: DEFAULT_ASSOC_TOL,
            window_rows: 3,
            window_cols: 16,
            max_outer: 5,
            max_inner: 3,
            min_matches: 10,
            lm_lambda: 1e-4,
            huber_delta: 1.0,
            chi2_gate: None,
            cond_warn: 1e6,
            step_tol: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    /// Sweep-frame cell Gaussian.
    pub src: Gaussian3,
    /// Pano-frame window Gaussian.
    pub dst: Gaussian3,
    pub pixel: (usize, usize),
    /// Grid column of the source cell.
    pub col: usize,
    /// Cell index in the feature grid.
    pub cell: usize,
}

/// A match with the source moved into the pano frame and its GICP weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreparedMatch {
    pub point: Vec3,
    pub target: Vec3,
    /// `(Σᴾ + R Σˢ Rᵀ + εI)⁻¹`.
    pub weight: Mat3,
}

impl PreparedMatch {
    /// Combine source and target in the pano frame given the source pose.
    /// `None` when the regularized covariance cannot be inverted.
    pub fn new(m: &Match, pose: &Pose) -> Option<Self> {
        let r = pose.rotation_matrix();
        let cov = m.dst.covariance + r * m.src.covariance * r.transpose() + Mat3::identity() * COV_EPS;
        let weight = cov.try_inverse()?;
        if !weight.iter().all(|v| v.is_finite()) {
            return None;
        }
        Some(Self {
            point: pose.transform(&m.src.mean),
            target: m.dst.mean,
            weight: (weight + weight.transpose()) * 0.5,
        })
    }

    /// `μᴾ − ΔT·x` with `x` the source point in the pano frame.
    pub fn residual(&self, delta: &Pose) -> Vec3 {
        self.target - delta.transform(&self.point)
    }

    /// Derivative of the residual with respect to a left perturbation
    /// `(φ, ρ)` of `delta`, evaluated at zero: `[ [y]×, −I ]`, `y = ΔT·x`.
    pub fn jacobian(&self, delta: &Pose) -> Matrix3x6<f64> {
        let y = delta.transform(&self.point);
        let mut j = Matrix3x6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&y));
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Mat3::identity()));
        j
    }

    pub fn mahalanobis_sq(&self, delta: &Pose) -> f64 {
        let r = self.residual(delta);
        r.dot(&(self.weight * r))
    }
}

/// Huber loss applied to the Mahalanobis norm, expressed in squared units so
/// that the inlier branch equals `r²`.
pub fn huber_cost(m2: f64, delta: f64) -> f64 {
    let m = m2.sqrt();
    if m <= delta {
        m2
    } else {
        2.0 * delta * m - delta * delta
    }
}

/// IRLS weight for [`huber_cost`].
fn huber_weight(m2: f64, delta: f64) -> f64 {
    let m = m2.sqrt();
    if m <= delta {
        1.0
    } else {
        delta / m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveReport {
    /// Accepted and rejected LM steps over all outer rounds.
    pub iterations: usize,
    pub outer_iterations: usize,
    pub final_cost: f64,
    /// Total correction applied to the trajectory start.
    pub correction: Pose,
    pub match_count: usize,
    pub candidate_count: usize,
    pub condition: f64,
    pub near_singular: bool,
    /// Matches dropped for a non-invertible covariance or the χ² gate.
    pub dropped: usize,
    pub converged: bool,
    /// Too few matches: no correction was applied.
    pub degenerate: bool,
}

impl Default for SolveReport {
    fn default() -> Self {
        Self {
            iterations: 0,
            outer_iterations: 0,
            final_cost: 0.0,
            correction: Pose::identity(),
            match_count: 0,
            candidate_count: 0,
            condition: 1.0,
            near_singular: false,
            dropped: 0,
            converged: false,
            degenerate: false,
        }
    }
}

/// Project candidate cells into the pano and keep the ones passing the
/// bounds, depth and window checks. `col_poses[gc]` is the sensor pose
/// (pano frame) for grid column `gc`. Output order follows `candidates`.
pub fn associate(
    grid: &FeatureGrid,
    candidates: &[usize],
    col_poses: &[Pose],
    pano: &DepthPano,
    params: &IcpParams,
) -> Vec<Match> {
    let found: Vec<Option<Match>> = candidates
        .par_iter()
        .map(|&idx| {
            let cell = &grid.cells[idx];
            let col = idx % grid.cols;
            let pose = &col_poses[col];
            let x = pose.transform(&cell.stats.mean);
            let px = pano.model().project(&x)?;
            let row = nearest_valid_row(pano, px.row, px.col, params.window_rows / 2)?;
            let depth = f64::from(pano.depth(row, px.col));
            if (px.range - depth).abs() > params.assoc_tol * depth {
                return None;
            }
            let (row_f, col_f) = pano.model().image_coords(&x);
            let dst = pano.window_stats_near(row_f, col_f, params.window_rows, params.window_cols)?;
            Some(Match {
                src: cell.stats,
                dst,
                pixel: (px.row, px.col),
                col,
                cell: idx,
            })
        })
        .collect();
    found.into_iter().flatten().collect()
}

/// Row whose depth is used for the depth check: the hit row if valid, else
/// the closest valid row in the same column within `reach` rows (upper row
/// first on ties). A pano denser than the sensor leaves rows between beams
/// empty until motion fills them.
fn nearest_valid_row(pano: &DepthPano, row: usize, col: usize, reach: usize) -> Option<usize> {
    if pano.depth(row, col) > 0.0 {
        return Some(row);
    }
    for k in 1..=reach {
        if row >= k && pano.depth(row - k, col) > 0.0 {
            return Some(row - k);
        }
        if row + k < pano.rows() && pano.depth(row + k, col) > 0.0 {
            return Some(row + k);
        }
    }
    None
}

/// Build prepared matches; returns them with the number dropped.
pub fn prepare(matches: &[Match], col_poses: &[Pose], params: &IcpParams) -> (Vec<PreparedMatch>, usize) {
    let prepared: Vec<Option<PreparedMatch>> = matches
        .par_iter()
        .map(|m| {
            let p = PreparedMatch::new(m, &col_poses[m.col])?;
            match params.chi2_gate {
                Some(g) if p.mahalanobis_sq(&Pose::identity()) > g => None,
                _ => Some(p),
            }
        })
        .collect();
    let n = prepared.len();
    let kept: Vec<PreparedMatch> = prepared.into_iter().flatten().collect();
    let dropped = n - kept.len();
    (kept, dropped)
}

/// Robust cost of all matches under `delta`.
pub fn total_cost(matches: &[PreparedMatch], delta: &Pose, huber_delta: f64) -> f64 {
    let partial: Vec<f64> = matches
        .par_chunks(CHUNK)
        .map(|c| {
            c.iter()
                .map(|m| huber_cost(m.mahalanobis_sq(delta), huber_delta))
                .sum()
        })
        .collect();
    partial.into_iter().sum()
}

/// Gauss-Newton system `(H, b, cost)` with IRLS Huber weights at `delta`.
fn normal_equations(
    matches: &[PreparedMatch],
    delta: &Pose,
    huber_delta: f64,
) -> (Matrix6<f64>, Vector6<f64>, f64) {
    let partial: Vec<(Matrix6<f64>, Vector6<f64>, f64)> = matches
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut h = Matrix6::zeros();
            let mut b = Vector6::zeros();
            let mut cost = 0.0;
            for m in chunk {
                let r = m.residual(delta);
                let wr = m.weight * r;
                let m2 = r.dot(&wr);
                let w = huber_weight(m2, huber_delta);
                cost += huber_cost(m2, huber_delta);
                let j = m.jacobian(delta);
                let jtw = j.transpose() * m.weight * w;
                h += jtw * j;
                b += jtw * r;
            }
            (h, b, cost)
        })
        .collect();
    partial.into_iter().fold(
        (Matrix6::zeros(), Vector6::zeros(), 0.0),
        |(h, b, c), (ph, pb, pc)| (h + ph, b + pb, c + pc),
    )
}

fn condition_number(h: &Matrix6<f64>) -> f64 {
    let eig = h.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 || !lo.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Result of one LM run on a fixed set of matches.
#[derive(Clone, Copy, Debug)]
pub struct RigidSolution {
    pub delta: Pose,
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    pub condition: f64,
    /// Norm of the last accepted step.
    pub last_step: f64,
}

/// Levenberg-Marquardt on a single rigid left correction.
pub fn solve_rigid(matches: &[PreparedMatch], params: &IcpParams) -> RigidSolution {
    let mut delta = Pose::identity();
    let mut lambda = params.lm_lambda;
    let (mut h, mut b, mut cost) = normal_equations(matches, &delta, params.huber_delta);
    let initial_cost = cost;
    let condition = condition_number(&h);
    let mut iterations = 0;
    let mut last_step = 0.0;
    'outer: for _ in 0..params.max_inner {
        let mut retries = 0;
        loop {
            iterations += 1;
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-9);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-b))) else {
                lambda *= 10.0;
                retries += 1;
                if retries > 3 {
                    break 'outer;
                }
                continue;
            };
            let xi_rot = Vec3::new(step[0], step[1], step[2]);
            let xi_trans = Vec3::new(step[3], step[4], step[5]);
            let candidate = Pose::exp(&xi_rot, &xi_trans).compose(&delta);
            let new_cost = total_cost(matches, &candidate, params.huber_delta);
            if new_cost <= cost {
                delta = candidate;
                last_step = step.norm();
                lambda = (lambda / 10.0).max(1e-12);
                if last_step < params.step_tol {
                    cost = new_cost;
                    break 'outer;
                }
                let (nh, nb, nc) = normal_equations(matches, &delta, params.huber_delta);
                h = nh;
                b = nb;
                cost = nc;
                break;
            }
            lambda *= 10.0;
            retries += 1;
            if retries > 3 {
                break 'outer;
            }
        }
    }
    RigidSolution {
        delta,
        cost,
        initial_cost,
        iterations,
        condition,
        last_step,
    }
}

/// Sensor pose of each grid column: the trajectory at the middle raw column
/// of the grid column. `oldest_col` is the raw buffer column of state 0.
pub fn grid_column_poses(traj: &LocalTrajectory, grid_cols: usize, cols: usize, oldest_col: usize) -> Vec<Pose> {
    let cc = traj.cell_cols();
    (0..grid_cols)
        .map(|gc| {
            let offset = (gc * cc + cols - oldest_col) % cols;
            traj.pose_at_offset(offset as f64 + 0.5 * (cc as f64 - 1.0))
        })
        .collect()
}

/// Wall time spent in association and in the solver during [`register`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IcpTiming {
    pub associate: Duration,
    pub solve: Duration,
}

/// Full registration: associate, solve, correct the trajectory start and
/// repropagate, then re-associate, for up to `max_outer` rounds.
pub fn register(
    grid: &FeatureGrid,
    candidates: &[usize],
    traj: &mut LocalTrajectory,
    pano: &DepthPano,
    oldest_col: usize,
    params: &IcpParams,
) -> (SolveReport, Vec<Match>) {
    register_timed(grid, candidates, traj, pano, oldest_col, params, &mut IcpTiming::default())
}

pub fn register_timed(
    grid: &FeatureGrid,
    candidates: &[usize],
    traj: &mut LocalTrajectory,
    pano: &DepthPano,
    oldest_col: usize,
    params: &IcpParams,
    timing: &mut IcpTiming,
) -> (SolveReport, Vec<Match>) {
    let cols = grid.cols * grid.cell_cols;
    let mut report = SolveReport {
        candidate_count: candidates.len(),
        ..SolveReport::default()
    };
    let mut matches = Vec::new();
    for _ in 0..params.max_outer {
        let t = Instant::now();
        let poses = grid_column_poses(traj, grid.cols, cols, oldest_col);
        matches = associate(grid, candidates, &poses, pano, params);
        report.match_count = matches.len();
        let (prepared, dropped) = prepare(&matches, &poses, params);
        report.dropped = dropped;
        timing.associate += t.elapsed();
        if prepared.len() < params.min_matches {
            report.degenerate = true;
            break;
        }
        let t = Instant::now();
        report.outer_iterations += 1;
        let sol = solve_rigid(&prepared, params);
        report.iterations += sol.iterations;
        report.final_cost = sol.cost;
        report.condition = sol.condition;
        report.near_singular = !(sol.condition <= params.cond_warn);
        let step = sol.delta.rotation.scaled_axis().norm() + sol.delta.translation.norm();
        traj.apply_correction(&sol.delta);
        report.correction = sol.delta.compose(&report.correction);
        timing.solve += t.elapsed();
        if step < params.step_tol {
            report.converged = true;
            break;
        }
    }
    (report, matches)
}

/// Widening of the association gate on the first outer iteration of
/// [`register_rigid`]; it halves every iteration down to `assoc_tol`.
pub const RIGID_GATE_START: f64 = 4.0;

/// Rigid registration of fixed column poses: the same associate/solve loop
/// as [`register`], but the correction moves every column alike instead of
/// going through the trajectory. Returns the pano-frame correction `ΔT` so
/// that `ΔT·col_poses[i]` aligns the sweep.
///
/// The start can be off by decimeters, which moves floor and ceiling
/// returns by more than `assoc_tol`; the gate starts wide and narrows.
pub fn register_rigid(
    grid: &FeatureGrid,
    candidates: &[usize],
    col_poses: &[Pose],
    pano: &DepthPano,
    params: &IcpParams,
) -> (Pose, SolveReport) {
    let mut report = SolveReport {
        candidate_count: candidates.len(),
        ..SolveReport::default()
    };
    let mut total = Pose::identity();
    let mut gate = RIGID_GATE_START;
    for _ in 0..params.max_outer {
        let poses: Vec<Pose> = col_poses.iter().map(|p| total.compose(p)).collect();
        let coarse = IcpParams { assoc_tol: params.assoc_tol * gate, ..*params };
        let matches = associate(grid, candidates, &poses, pano, &coarse);
        report.match_count = matches.len();
        let (prepared, dropped) = prepare(&matches, &poses, params);
        report.dropped = dropped;
        if prepared.len() < params.min_matches {
            report.degenerate = true;
            break;
        }
        report.outer_iterations += 1;
        let sol = solve_rigid(&prepared, params);
        report.iterations += sol.iterations;
        report.final_cost = sol.cost;
        report.condition = sol.condition;
        report.near_singular = !(sol.condition <= params.cond_warn);
        total = sol.delta.compose(&total);
        let step = sol.delta.rotation.scaled_axis().norm() + sol.delta.translation.norm();
        if gate <= 1.0 && step < params.step_tol {
            report.converged = true;
            break;
        }
        gate = (gate * 0.5).max(1.0);
    }
    report.correction = total;
    (total, report)
}
