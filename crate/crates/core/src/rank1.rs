//! Rank-1 initialization of camera translations and inverse depths.
//!
//! After rotation compensation, the flow of point `j` in frame `i` relative to
//! its reference position is, to first order in the baseline,
//!
//! ```text
//! r_ij = h(R_iᵀ·[x̄_ij, 1]) − [x̄_0j, 1] ≈ −ω_j · (c_i − c_iz·[x̄_0j, 1])
//! ```
//!
//! with `c_i` the center of camera `i` in the reference frame. Stacking the
//! `r_ij` into a `3n × m` matrix gives `M ≈ C·Dᵀ` with `D = ω`, and the best
//! rank-1 approximation (leading singular triplet) recovers both factors up to
//! a scale fixed by `mean(D) = 1`.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{TrackTable, MIN_TRACKS};
use crate::geometry::{
    hat, pixel_to_normalized, so3_exp, so3_right_jacobian, Intrinsics, InverseDepthPoint, Pose,
    Rotation,
};

const ROTATION_MAX_ITER: usize = 10;
const ROTATION_STEP_TOL: f64 = 1e-12;
const ROTATION_MAX_CONDITION: f64 = 1e12;
/// Inverse depths below this are clamped before bundle adjustment.
pub const OMEGA_FLOOR: f64 = 1e-3;
/// `σ2/σ1` above this means the leading singular vector is not separable
/// from isotropic noise, i.e. there is no usable translation baseline.
pub const MAX_NOISE_SINGULAR_RATIO: f64 = 0.8;

#[inline]
fn bearing(x: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(x.x, x.y, 1.0)
}

#[inline]
fn rescale_z(v: &Vector3<f64>) -> Vector3<f64> {
    v / v.z
}

fn check_condition(jtj: &Matrix3<f64>) -> Result<()> {
    let eig = SymmetricEigen::new(*jtj).eigenvalues;
    let (lo, hi) = (eig.min().abs(), eig.max().abs());
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if cond > ROTATION_MAX_CONDITION {
        return Err(Error::Degenerate(cond));
    }
    Ok(())
}

/// Rotation of a frame relative to the reference, independent of translation.
///
/// For the correct rotation the epipolar-plane normals
/// `n_j = [x̄_0j, 1] × Rᵀ[x̄_ij, 1]` are all orthogonal to the baseline, so the
/// smallest eigenvalue of `Σ n_j n_jᵀ` vanishes. Starting from `θ = 0`, each
/// Gauss-Newton step takes the current smallest eigenvector as the baseline
/// direction `b` and linearizes the residuals `bᵀ n_j(θ)`.
pub fn estimate_rotation(ref_pts: &[Vector2<f64>], frame_pts: &[Vector2<f64>]) -> Result<Rotation> {
    if ref_pts.len() != frame_pts.len() {
        return Err(Error::SizeMismatch(format!(
            "{} reference vs {} frame points",
            ref_pts.len(),
            frame_pts.len()
        )));
    }
    if ref_pts.len() < 3 {
        return Err(Error::TooFewTracks {
            found: ref_pts.len(),
            required: 3,
        });
    }
    let f0: Vec<_> = ref_pts.iter().map(bearing).collect();
    let fi: Vec<_> = frame_pts.iter().map(bearing).collect();
    let mut theta = Vector3::zeros();

    for _ in 0..ROTATION_MAX_ITER {
        let rot = so3_exp(theta);
        let rt = rot.matrix().transpose();
        let jr = so3_right_jacobian(&theta);
        let rotated: Vec<Vector3<f64>> = fi.iter().map(|f| rt * f).collect();

        let mut scatter = Matrix3::zeros();
        for (a, b) in f0.iter().zip(&rotated) {
            let n = a.cross(b);
            scatter += n * n.transpose();
        }
        let eig = SymmetricEigen::new(scatter);
        let imin = eig.eigenvalues.imin();
        let baseline: Vector3<f64> = eig.eigenvectors.column(imin).into();

        let mut jtj = Matrix3::zeros();
        let mut jte = Vector3::zeros();
        for (a, b) in f0.iter().zip(&rotated) {
            // d(Rᵀv)/dθ = [Rᵀv]× J_r, so dn/dθ = [a]× [Rᵀv]× J_r.
            let row = (baseline.transpose() * hat(a) * hat(b) * jr).transpose();
            let e = baseline.dot(&a.cross(b));
            jtj += row * row.transpose();
            jte += row * e;
        }
        check_condition(&jtj)?;
        let step = jtj
            .cholesky()
            .ok_or(Error::Degenerate(f64::INFINITY))?
            .solve(&(-jte));
        theta += step;
        if step.norm() < ROTATION_STEP_TOL {
            break;
        }
    }
    Ok(so3_exp(theta))
}

/// Rotation minimizing `Σ_j ‖h(Rᵀ[x̄_ij, 1]) − [x̄_0j, 1] − flow_j‖²` by
/// Gauss-Newton from `init`. With zero `flow` this is the plain rotation-only
/// reprojection fit; with the flow predicted by a rank-1 solution it re-fits
/// the rotation on translation-compensated points.
pub fn fit_rotation_to_flow(
    ref_pts: &[Vector2<f64>],
    frame_pts: &[Vector2<f64>],
    flow: &[Vector2<f64>],
    init: &Rotation,
) -> Result<Rotation> {
    if ref_pts.len() != frame_pts.len() || flow.len() != ref_pts.len() {
        return Err(Error::SizeMismatch("point lists differ in length".into()));
    }
    if ref_pts.len() < 3 {
        return Err(Error::TooFewTracks {
            found: ref_pts.len(),
            required: 3,
        });
    }
    let mut theta = init.axis_angle();
    for _ in 0..ROTATION_MAX_ITER {
        let rt = so3_exp(theta).matrix().transpose();
        let jr = so3_right_jacobian(&theta);
        let mut jtj = Matrix3::zeros();
        let mut jte = Vector3::zeros();
        for ((x0, xi), fl) in ref_pts.iter().zip(frame_pts).zip(flow) {
            let q = rt * bearing(xi);
            let e = Vector2::new(q.x / q.z - x0.x - fl.x, q.y / q.z - x0.y - fl.y);
            let jpi = nalgebra::Matrix2x3::new(
                1.0 / q.z,
                0.0,
                -q.x / (q.z * q.z),
                0.0,
                1.0 / q.z,
                -q.y / (q.z * q.z),
            );
            let j = jpi * hat(&q) * jr;
            jtj += j.transpose() * j;
            jte += j.transpose() * e;
        }
        check_condition(&jtj)?;
        let step = jtj
            .cholesky()
            .ok_or(Error::Degenerate(f64::INFINITY))?
            .solve(&(-jte));
        theta += step;
        if step.norm() < ROTATION_STEP_TOL {
            break;
        }
    }
    Ok(so3_exp(theta))
}

/// Rotation-compensated flow of one point, third component identically zero.
pub fn flow_residual(
    rotation: &Rotation,
    ref_pt: &Vector2<f64>,
    frame_pt: &Vector2<f64>,
) -> Vector3<f64> {
    let q = rescale_z(&(rotation.matrix().transpose() * bearing(frame_pt)));
    let mut r = q - bearing(ref_pt);
    r.z = 0.0;
    r
}

/// The stacked flow matrix, rows `3i..3i+3` for frame `i`, one column per point.
#[derive(Clone, Debug, PartialEq)]
pub struct Rank1Problem {
    pub m: DMatrix<f64>,
}

impl Rank1Problem {
    pub fn n_frames(&self) -> usize {
        self.m.nrows() / 3
    }

    pub fn m_points(&self) -> usize {
        self.m.ncols()
    }
}

pub fn build_constraint_matrix(
    ref_pts: &[Vector2<f64>],
    frame_pts: &[Vec<Vector2<f64>>],
    rotations: &[Rotation],
) -> Result<Rank1Problem> {
    if rotations.len() != frame_pts.len() {
        return Err(Error::SizeMismatch(format!(
            "{} rotations for {} frames",
            rotations.len(),
            frame_pts.len()
        )));
    }
    let (n, m) = (frame_pts.len(), ref_pts.len());
    let mut mat = DMatrix::zeros(3 * n, m);
    for (i, (row, rot)) in frame_pts.iter().zip(rotations).enumerate() {
        if row.len() != m {
            return Err(Error::SizeMismatch(format!(
                "frame {i} has {} points, expected {m}",
                row.len()
            )));
        }
        for (j, (x0, xi)) in ref_pts.iter().zip(row).enumerate() {
            let r = flow_residual(rot, x0, xi);
            mat[(3 * i, j)] = r.x;
            mat[(3 * i + 1, j)] = r.y;
        }
    }
    Ok(Rank1Problem { m: mat })
}

/// Best rank-1 factors of `M`, gauged so that `mean(D) = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rank1Solution {
    /// Stacked per-frame flow directions, `3n` entries. Block `i` equals the
    /// negated camera center `-c_i` in the reference frame (z entry 0).
    pub c: Vec<f64>,
    /// Inverse depths, one per point.
    pub d: Vec<f64>,
    /// Leading two singular values.
    pub sigma: (f64, f64),
    /// `‖M − C·Dᵀ‖_F / ‖M‖_F`.
    pub residual: f64,
}

impl Rank1Solution {
    pub fn block(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.c[3 * i], self.c[3 * i + 1], self.c[3 * i + 2])
    }

    pub fn singular_ratio(&self) -> f64 {
        self.sigma.1 / self.sigma.0
    }

    /// `C·Dᵀ` as a dense matrix.
    pub fn product(&self) -> DMatrix<f64> {
        DVector::from_column_slice(&self.c) * DVector::from_column_slice(&self.d).transpose()
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

pub fn rank1_factorize(prob: &Rank1Problem) -> Result<Rank1Solution> {
    let (n, m) = (prob.n_frames(), prob.m_points());
    if n < 2 {
        return Err(Error::TooFewFrames(n + 1));
    }
    if m < MIN_TRACKS {
        return Err(Error::TooFewTracks {
            found: m,
            required: MIN_TRACKS,
        });
    }
    let norm = prob.m.norm();
    if !norm.is_finite() {
        return Err(Error::InvalidParameter(
            "flow matrix has non-finite entries".into(),
        ));
    }
    if norm <= 1e-12 {
        return Err(Error::DegenerateMotion(0.0));
    }

    let (rows, cols) = prob.m.shape();
    let svd = faer::Mat::<f64>::from_fn(rows, cols, |i, j| prob.m[(i, j)])
        .thin_svd()
        .map_err(|_| Error::NumericalFailure(norm))?;
    let sv = svd.S().column_vector();
    let s1 = sv[0];
    let s2 = sv[1];
    if s1 / norm < 1e-6 || s2 / s1 > MAX_NOISE_SINGULAR_RATIO {
        return Err(Error::DegenerateMotion(s1 / norm));
    }
    let u = DVector::from_fn(rows, |i, _| svd.U()[(i, 0)]);
    let v = DVector::from_fn(cols, |j, _| svd.V()[(j, 0)]);

    let med = median(v.as_slice());
    if med.abs() < 1e-12 {
        return Err(Error::SignAmbiguous(med));
    }
    let sign = med.signum();
    let mean = sign * v.mean();
    if mean <= 1e-12 {
        return Err(Error::SignAmbiguous(mean));
    }
    let d: Vec<f64> = v.iter().map(|x| sign * x / mean).collect();
    let c: Vec<f64> = u.iter().map(|x| sign * s1 * mean * x).collect();
    let rest: f64 = (1..sv.nrows()).map(|k| sv[k].powi(2)).sum();
    let residual = rest.sqrt() / norm;
    Ok(Rank1Solution {
        c,
        d,
        sigma: (s1, s2),
        residual,
    })
}

/// Output of [`initialize`]: starting point for bundle adjustment.
#[derive(Clone, Debug)]
pub struct Rank1Init {
    pub poses: Vec<Pose>,
    pub points: Vec<InverseDepthPoint>,
    pub solution: Rank1Solution,
    /// Constraint matrix of the final round.
    pub problem: Rank1Problem,
}

/// Normalized reference points and per-frame observations under `k`,
/// ignoring distortion.
pub fn normalize_tracks(
    table: &TrackTable,
    k: &Intrinsics,
) -> (Vec<Vector2<f64>>, Vec<Vec<Vector2<f64>>>) {
    let refs = table
        .ref_points
        .iter()
        .map(|p| pixel_to_normalized(*p, k))
        .collect();
    let obs = table
        .obs
        .iter()
        .map(|row| row.iter().map(|p| pixel_to_normalized(*p, k)).collect())
        .collect();
    (refs, obs)
}

fn poses_and_points(
    rotations: &[Rotation],
    sol: &Rank1Solution,
    refs: &[Vector2<f64>],
) -> (Vec<Pose>, Vec<InverseDepthPoint>) {
    let poses = rotations
        .iter()
        .enumerate()
        .map(|(i, r)| {
            // Block i is -c_i, so t_i = -R_i c_i = R_i · block_i.
            Pose::new(*r, r.matrix() * sol.block(i))
        })
        .collect();
    let points = refs
        .iter()
        .zip(&sol.d)
        .map(|(x, &w)| InverseDepthPoint {
            ref_normalized: *x,
            omega: w.max(OMEGA_FLOOR),
        })
        .collect();
    (poses, points)
}

/// Per-frame rotations from [`estimate_rotation`], in frame order.
pub fn estimate_rotations(
    refs: &[Vector2<f64>],
    obs: &[Vec<Vector2<f64>>],
) -> Result<Vec<Rotation>> {
    obs.par_iter()
        .map(|row| estimate_rotation(refs, row))
        .collect()
}

/// Rotation estimation, rank-1 factorization, then one round of rotation
/// re-fitting on translation-compensated points and re-factorization.
pub fn initialize(table: &TrackTable, k: &Intrinsics) -> Result<Rank1Init> {
    table.validate()?;
    let (refs, obs) = normalize_tracks(table, k);
    let rotations = estimate_rotations(&refs, &obs)?;
    let problem = build_constraint_matrix(&refs, &obs, &rotations)?;
    let first = rank1_factorize(&problem)?;

    let refined: Vec<Rotation> = obs
        .par_iter()
        .zip(&rotations)
        .enumerate()
        .map(|(i, (row, rot))| {
            let c = first.block(i);
            let flow: Vec<Vector2<f64>> = first
                .d
                .iter()
                .map(|&w| Vector2::new(c.x * w, c.y * w))
                .collect();
            fit_rotation_to_flow(&refs, row, &flow, rot)
        })
        .collect::<Result<_>>()?;
    let problem = build_constraint_matrix(&refs, &obs, &refined)?;
    let solution = rank1_factorize(&problem)?;
    let (poses, points) = poses_and_points(&refined, &solution, &refs);
    Ok(Rank1Init {
        poses,
        points,
        solution,
        problem,
    })
}

/// Rotations from [`estimate_rotation`], zero translation and unit inverse depth.
pub fn flat_initialize(
    table: &TrackTable,
    k: &Intrinsics,
) -> Result<(Vec<Pose>, Vec<InverseDepthPoint>)> {
    table.validate()?;
    let (refs, obs) = normalize_tracks(table, k);
    let rotations = estimate_rotations(&refs, &obs)?;
    let poses = rotations
        .into_iter()
        .map(|r| Pose::new(r, Vector3::zeros()))
        .collect();
    let points = refs
        .into_iter()
        .map(|x| InverseDepthPoint {
            ref_normalized: x,
            omega: 1.0,
        })
        .collect();
    Ok((poses, points))
}
