//! Self-calibrating bundle adjustment in inverse-depth form.
//!
//! Free parameters, in vector order: focal, k1, k2, then per non-reference
//! frame `(θ_i, t_i)`, then every inverse depth except the gauge point.
//! Residuals are measured in the undistorted domain: each observed pixel is
//! undistorted under the current model and compared with the pinhole
//! projection of the reference ray, scaled back to pixels by the focal.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix2x6, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::TrackTable;
use crate::geometry::{
    hat, pixel_to_normalized, so3_exp, so3_right_jacobian, undistort, CameraModel, Distortion,
    Intrinsics, InverseDepthPoint, Pose,
};

/// |k1|, |k2| bound.
pub const DISTORTION_BOUND: f64 = 2.0;
/// Lower bound on inverse depth after every accepted step.
pub const OMEGA_MIN: f64 = 1e-4;
const FOCAL_RANGE: (f64, f64) = (0.25, 4.0);
const MAX_DAMPING: f64 = 1e8;
const UNDISTORT_TOL: f64 = 1e-14;
const UNDISTORT_MAX_ITER: usize = 200;
const MIN_DIAGONAL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaState {
    pub focal: f64,
    pub distortion: Distortion,
    /// Principal point and image size; never optimized.
    pub intrinsics: Intrinsics,
    /// Poses of the non-reference frames; the reference is the identity.
    pub poses: Vec<Pose>,
    pub omegas: Vec<f64>,
    /// Index of the inverse depth held fixed.
    pub gauge_point: usize,
    /// Focal at initialization; bounds are relative to it.
    pub focal_init: f64,
}

impl BaState {
    /// Starting state with zero distortion. The gauge point is the one whose
    /// initial inverse depth is the median.
    pub fn new(
        intrinsics: Intrinsics,
        poses: Vec<Pose>,
        points: &[InverseDepthPoint],
    ) -> Result<Self> {
        let omegas: Vec<f64> = points.iter().map(|p| p.omega).collect();
        if let Some(w) = omegas.iter().find(|w| !(**w > 0.0)) {
            return Err(Error::NonPositiveDepth(*w));
        }
        if omegas.is_empty() {
            return Err(Error::TooFewTracks {
                found: 0,
                required: 1,
            });
        }
        let mut order: Vec<usize> = (0..omegas.len()).collect();
        order.sort_by(|&a, &b| omegas[a].total_cmp(&omegas[b]));
        let gauge_point = order[omegas.len() / 2];
        Ok(BaState {
            focal: intrinsics.focal,
            distortion: Distortion::NONE,
            intrinsics,
            poses,
            omegas,
            gauge_point,
            focal_init: intrinsics.focal,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.poses.len()
    }

    pub fn m_points(&self) -> usize {
        self.omegas.len()
    }

    pub fn n_params(&self) -> usize {
        3 + 6 * self.n_frames() + self.m_points() - 1
    }

    pub fn camera(&self) -> CameraModel {
        CameraModel {
            intrinsics: self.intrinsics.with_focal(self.focal),
            distortion: self.distortion,
        }
    }

    /// Column of `ω_j` in the parameter vector, `None` for the gauge point.
    pub fn omega_column(&self, j: usize) -> Option<usize> {
        let base = 3 + 6 * self.n_frames();
        match j.cmp(&self.gauge_point) {
            std::cmp::Ordering::Less => Some(base + j),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(base + j - 1),
        }
    }

    pub fn params(&self) -> DVector<f64> {
        let mut p = DVector::zeros(self.n_params());
        p[0] = self.focal;
        p[1] = self.distortion.k1;
        p[2] = self.distortion.k2;
        for (i, pose) in self.poses.iter().enumerate() {
            let o = 3 + 6 * i;
            p.fixed_rows_mut::<3>(o)
                .copy_from(&pose.rotation.axis_angle());
            p.fixed_rows_mut::<3>(o + 3).copy_from(&pose.translation);
        }
        for (j, w) in self.omegas.iter().enumerate() {
            if let Some(c) = self.omega_column(j) {
                p[c] = *w;
            }
        }
        p
    }

    pub fn with_params(&self, p: &DVector<f64>) -> BaState {
        let mut s = self.clone();
        s.focal = p[0];
        s.distortion = Distortion::new(p[1], p[2]);
        for (i, pose) in s.poses.iter_mut().enumerate() {
            let o = 3 + 6 * i;
            *pose = Pose::new(
                so3_exp(p.fixed_rows::<3>(o).into_owned()),
                p.fixed_rows::<3>(o + 3).into_owned(),
            );
        }
        for j in 0..s.omegas.len() {
            if let Some(c) = self.omega_column(j) {
                s.omegas[j] = p[c];
            }
        }
        s
    }

    /// Projects the state into its bounds.
    pub fn clamped(mut self) -> BaState {
        let (lo, hi) = FOCAL_RANGE;
        self.focal = self.focal.clamp(lo * self.focal_init, hi * self.focal_init);
        self.distortion.k1 = self
            .distortion
            .k1
            .clamp(-DISTORTION_BOUND, DISTORTION_BOUND);
        self.distortion.k2 = self
            .distortion
            .k2
            .clamp(-DISTORTION_BOUND, DISTORTION_BOUND);
        for w in &mut self.omegas {
            *w = w.max(OMEGA_MIN);
        }
        self
    }
}

/// Undistorted normalized point and its derivatives w.r.t. focal and (k1, k2).
struct Undistorted {
    x: Vector2<f64>,
    d_focal: Vector2<f64>,
    d_k: Matrix2<f64>,
}

fn undistort_with_derivatives(
    pixel: &Vector2<f64>,
    k: &Intrinsics,
    d: &Distortion,
) -> Result<Undistorted> {
    let xd = pixel_to_normalized(*pixel, k);
    let x = undistort(xd, d, UNDISTORT_TOL, UNDISTORT_MAX_ITER)?;
    // Implicit function theorem on distort(x, k) = x_d.
    let r2 = x.norm_squared();
    let s = d.factor(r2);
    let jd = Matrix2::identity() * s + x * x.transpose() * (2.0 * d.k1 + 4.0 * d.k2 * r2);
    let inv = jd.try_inverse().ok_or(Error::NonConvergent {
        residual: f64::NAN,
        iterations: 0,
    })?;
    let dd_dk = Matrix2::from_columns(&[x * r2, x * r2 * r2]);
    Ok(Undistorted {
        x,
        d_focal: inv * (-xd / k.focal),
        d_k: -inv * dd_dk,
    })
}

/// Residual of one observation and its Jacobian blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianBlock {
    pub frame: usize,
    pub point: usize,
    pub residual: Vector2<f64>,
    /// Columns: focal, k1, k2.
    pub intrinsics: Matrix2x3<f64>,
    /// Columns: θ_i then t_i.
    pub pose: Matrix2x6<f64>,
    /// `None` for the gauge point.
    pub omega: Option<Vector2<f64>>,
}

/// Residual-major sparse Jacobian: one 2-row block per non-reference observation.
#[derive(Clone, Debug)]
pub struct SparseJacobian {
    pub n_params: usize,
    pub blocks: Vec<JacobianBlock>,
}

impl SparseJacobian {
    pub fn to_dense(&self, state: &BaState) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2 * self.blocks.len(), self.n_params);
        for (b, blk) in self.blocks.iter().enumerate() {
            let r = 2 * b;
            j.view_mut((r, 0), (2, 3)).copy_from(&blk.intrinsics);
            j.view_mut((r, 3 + 6 * blk.frame), (2, 6))
                .copy_from(&blk.pose);
            if let (Some(w), Some(c)) = (blk.omega, state.omega_column(blk.point)) {
                j.view_mut((r, c), (2, 1)).copy_from(&w);
            }
        }
        j
    }
}

/// Per-evaluation cache of the undistorted reference rays.
struct RefRays {
    rays: Vec<Undistorted>,
}

impl RefRays {
    fn new(state: &BaState, tracks: &TrackTable) -> Result<Self> {
        let k = state.intrinsics.with_focal(state.focal);
        let rays = tracks
            .ref_points
            .iter()
            .map(|p| undistort_with_derivatives(p, &k, &state.distortion))
            .collect::<Result<_>>()?;
        Ok(RefRays { rays })
    }
}

fn check_shapes(state: &BaState, tracks: &TrackTable) -> Result<()> {
    if tracks.n_frames() != state.n_frames() || tracks.m_points() != state.m_points() {
        return Err(Error::SizeMismatch(format!(
            "state has {}x{} frames/points, tracks {}x{}",
            state.n_frames(),
            state.m_points(),
            tracks.n_frames(),
            tracks.m_points()
        )));
    }
    Ok(())
}

fn block(
    state: &BaState,
    rays: &RefRays,
    tracks: &TrackTable,
    i: usize,
    j: usize,
    jacobian: bool,
) -> Result<JacobianBlock> {
    let f = state.focal;
    let k = state.intrinsics.with_focal(f);
    let pose = &state.poses[i];
    let w = state.omegas[j];
    let r0 = &rays.rays[j];
    let v = Vector3::new(r0.x.x, r0.x.y, 1.0);
    // ω·(R P + t) = R v + ω t keeps the same projection without dividing by ω.
    let q = pose.rotation.matrix() * v + pose.translation * w;
    if q.z / w <= 1e-9 {
        return Err(Error::BehindCamera(q.z / w));
    }
    let proj = Vector2::new(q.x / q.z, q.y / q.z);
    let obs = if jacobian {
        undistort_with_derivatives(&tracks.obs[i][j], &k, &state.distortion)?
    } else {
        Undistorted {
            x: undistort(
                pixel_to_normalized(tracks.obs[i][j], &k),
                &state.distortion,
                UNDISTORT_TOL,
                UNDISTORT_MAX_ITER,
            )?,
            d_focal: Vector2::zeros(),
            d_k: Matrix2::zeros(),
        }
    };
    let diff = obs.x - proj;
    let residual = diff * f;
    let mut blk = JacobianBlock {
        frame: i,
        point: j,
        residual,
        intrinsics: Matrix2x3::zeros(),
        pose: Matrix2x6::zeros(),
        omega: None,
    };
    if !jacobian {
        return Ok(blk);
    }

    let jpi = Matrix2x3::new(
        1.0 / q.z,
        0.0,
        -q.x / (q.z * q.z),
        0.0,
        1.0 / q.z,
        -q.y / (q.z * q.z),
    );
    let r = pose.rotation.matrix();
    let r01 = r.fixed_columns::<2>(0);
    let jpi_r01 = jpi * r01;
    let d_focal = diff + (obs.d_focal - jpi_r01 * r0.d_focal) * f;
    let d_k = (obs.d_k - jpi_r01 * r0.d_k) * f;
    blk.intrinsics.set_column(0, &d_focal);
    blk.intrinsics.fixed_columns_mut::<2>(1).copy_from(&d_k);

    let jr = so3_right_jacobian(&pose.rotation.axis_angle());
    // d(R v)/dθ = -R [v]× J_r
    let d_theta: Matrix2x3<f64> = jpi * r * hat(&v) * jr * f;
    let d_t: Matrix2x3<f64> = -jpi * (w * f);
    blk.pose.fixed_columns_mut::<3>(0).copy_from(&d_theta);
    blk.pose.fixed_columns_mut::<3>(3).copy_from(&d_t);
    if state.omega_column(j).is_some() {
        blk.omega = Some(-jpi * pose.translation * f);
    }
    Ok(blk)
}

/// Reprojection residual in pixels of point `point` in frame `frame`;
/// frame 0 is the reference (identity pose), frame `i ≥ 1` is `tracks.obs[i-1]`.
pub fn reproj_residual(
    state: &BaState,
    tracks: &TrackTable,
    frame: usize,
    point: usize,
) -> Result<Vector2<f64>> {
    check_shapes(state, tracks)?;
    let k = state.intrinsics.with_focal(state.focal);
    let x0 = undistort(
        pixel_to_normalized(tracks.ref_points[point], &k),
        &state.distortion,
        UNDISTORT_TOL,
        UNDISTORT_MAX_ITER,
    )?;
    let p = crate::geometry::backproject(&InverseDepthPoint {
        ref_normalized: x0,
        omega: state.omegas[point],
    })?;
    let (pose, observed) = if frame == 0 {
        (Pose::identity(), tracks.ref_points[point])
    } else {
        (state.poses[frame - 1], tracks.obs[frame - 1][point])
    };
    let xu = undistort(
        pixel_to_normalized(observed, &k),
        &state.distortion,
        UNDISTORT_TOL,
        UNDISTORT_MAX_ITER,
    )?;
    let proj = crate::geometry::dehomogenize(&pose.transform(&p))?;
    Ok((xu - proj) * state.focal)
}

fn blocks(state: &BaState, tracks: &TrackTable, jacobian: bool) -> Result<Vec<JacobianBlock>> {
    check_shapes(state, tracks)?;
    let rays = RefRays::new(state, tracks)?;
    let m = state.m_points();
    let rows: Vec<Vec<JacobianBlock>> = (0..state.n_frames())
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|j| block(state, &rays, tracks, i, j, jacobian))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Residuals of every non-reference observation, frame-major. Reference-frame
/// residuals vanish identically and are not included.
pub fn residuals(state: &BaState, tracks: &TrackTable) -> Result<Vec<Vector2<f64>>> {
    Ok(blocks(state, tracks, false)?
        .into_iter()
        .map(|b| b.residual)
        .collect())
}

/// Analytic Jacobian of [`residuals`] w.r.t. the free parameters.
pub fn jacobian(state: &BaState, tracks: &TrackTable) -> Result<SparseJacobian> {
    Ok(SparseJacobian {
        n_params: state.n_params(),
        blocks: blocks(state, tracks, true)?,
    })
}

/// Huber loss on a residual 2-vector.
#[inline]
pub fn robust_cost(residual: &Vector2<f64>, delta: f64) -> f64 {
    let n = residual.norm();
    if n <= delta {
        n * n
    } else {
        2.0 * delta * n - delta * delta
    }
}

/// IRLS weight matching [`robust_cost`] (half its derivative w.r.t. ‖r‖²).
#[inline]
fn robust_weight(residual: &Vector2<f64>, delta: f64) -> f64 {
    let n = residual.norm();
    if n <= delta {
        1.0
    } else {
        delta / n
    }
}

/// Robust cost of a state, px².
pub fn total_cost(state: &BaState, tracks: &TrackTable, delta: f64) -> Result<f64> {
    Ok(residuals(state, tracks)?
        .iter()
        .map(|r| robust_cost(r, delta))
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaOptions {
    pub max_iter: usize,
    pub ftol: f64,
    pub xtol: f64,
    /// Huber threshold, px.
    pub delta: f64,
    pub lambda0: f64,
}

impl Default for BaOptions {
    fn default() -> Self {
        BaOptions {
            max_iter: 100,
            ftol: 1e-6,
            xtol: 1e-10,
            delta: 1.0,
            lambda0: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaReport {
    /// LM iterations, accepted and rejected.
    pub iterations: usize,
    pub converged: bool,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Initial cost followed by the cost after every accepted step.
    pub cost_trace: Vec<TracePoint>,
    pub wall_time_s: f64,
}

impl BaReport {
    /// First iteration whose accepted cost is at or below `target`.
    pub fn iterations_to_reach(&self, target: f64) -> Option<usize> {
        self.cost_trace
            .iter()
            .find(|t| t.cost <= target)
            .map(|t| t.iteration)
    }
}

struct Normal {
    a: DMatrix<f64>,
    g: DVector<f64>,
}

fn normal_equations(state: &BaState, jac: &SparseJacobian, delta: f64) -> Normal {
    let np = jac.n_params;
    let mut a = DMatrix::zeros(np, np);
    let mut g = DVector::zeros(np);
    let mut cols = [0usize; 10];
    let mut jrow = nalgebra::SMatrix::<f64, 2, 10>::zeros();
    for blk in &jac.blocks {
        let w = robust_weight(&blk.residual, delta);
        let mut k = 0;
        for c in 0..3 {
            cols[k] = c;
            jrow.set_column(k, &blk.intrinsics.column(c));
            k += 1;
        }
        for c in 0..6 {
            cols[k] = 3 + 6 * blk.frame + c;
            jrow.set_column(k, &blk.pose.column(c));
            k += 1;
        }
        if let (Some(wj), Some(c)) = (blk.omega, state.omega_column(blk.point)) {
            cols[k] = c;
            jrow.set_column(k, &wj);
            k += 1;
        }
        for p in 0..k {
            let jp = jrow.column(p);
            g[cols[p]] += w * jp.dot(&blk.residual);
            for q in 0..k {
                a[(cols[p], cols[q])] += w * jp.dot(&jrow.column(q));
            }
        }
    }
    Normal { a, g }
}

/// Levenberg-Marquardt on the Huber-robustified reprojection cost.
///
/// Rejected steps multiply the damping by 10, accepted steps divide it by 3.
/// The run counts as converged when an accepted step lowers the cost by less
/// than `ftol` relative, or a step is shorter than `xtol`.
pub fn solve(init: &BaState, tracks: &TrackTable, opts: &BaOptions) -> Result<(BaState, BaReport)> {
    let start = Instant::now();
    if !(opts.delta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "Huber delta {} must be > 0",
            opts.delta
        )));
    }
    let mut state = init.clone().clamped();
    let mut cost = total_cost(&state, tracks, opts.delta)?;
    let initial_cost = cost;
    let mut trace = vec![TracePoint { iteration: 0, cost }];
    let mut lambda = opts.lambda0;
    let mut converged = false;
    let mut iterations = 0;
    let mut normal = normal_equations(&state, &jacobian(&state, tracks)?, opts.delta);

    while iterations < opts.max_iter {
        iterations += 1;
        let step = damped_step(&normal, &mut lambda)?;
        let step_norm = step.norm();
        let trial = state.with_params(&(state.params() + &step)).clamped();
        let trial_cost = total_cost(&trial, tracks, opts.delta).unwrap_or(f64::INFINITY);

        if trial_cost < cost {
            let rel = (cost - trial_cost) / cost;
            state = trial;
            cost = trial_cost;
            lambda /= 3.0;
            trace.push(TracePoint {
                iteration: iterations,
                cost,
            });
            if rel < opts.ftol || step_norm < opts.xtol {
                converged = true;
                break;
            }
            normal = normal_equations(&state, &jacobian(&state, tracks)?, opts.delta);
        } else {
            lambda *= 10.0;
            if step_norm < opts.xtol {
                converged = true;
                break;
            }
        }
    }

    Ok((
        state,
        BaReport {
            iterations,
            converged,
            initial_cost,
            final_cost: cost,
            cost_trace: trace,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Solves `(A + λ·diag(A)) δ = -g`, raising `λ` until the system factors.
fn damped_step(normal: &Normal, lambda: &mut f64) -> Result<DVector<f64>> {
    let np = normal.g.len();
    loop {
        let mut a = normal.a.clone();
        for k in 0..np {
            let d = normal.a[(k, k)].clamp(MIN_DIAGONAL, 1e32);
            a[(k, k)] += *lambda * d;
        }
        if let Some(ch) = a.cholesky() {
            let step = ch.solve(&(-&normal.g));
            if step.iter().all(|v| v.is_finite()) {
                return Ok(step);
            }
        }
        if *lambda >= MAX_DAMPING {
            return Err(Error::NumericalFailure(*lambda));
        }
        *lambda = (*lambda * 10.0).min(MAX_DAMPING);
    }
}
