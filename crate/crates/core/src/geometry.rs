//! Pinhole camera with two-coefficient radial distortion, SO(3) helpers and
//! the inverse-depth point parametrization.
//!
//! Conventions used throughout the crate:
//!
//! * pixel `(u, v)` maps to normalized `((u - cx) / f, (v - cy) / f)`;
//! * distortion acts on normalized coordinates, `x_d = x_u (1 + k1 r² + k2 r⁴)`;
//! * a pose maps reference-frame points into its own frame, `X = R·X_ref + t`;
//! * a point seen at normalized `(x, y)` in the reference view with inverse
//!   depth `ω` sits at `(x, y, 1) / ω`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance of [`undistort`], in normalized units.
pub const UNDISTORT_TOL: f64 = 1e-10;
/// Default iteration cap of [`undistort`].
pub const UNDISTORT_MAX_ITER: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(focal: f64, principal_point: [f64; 2], width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            focal,
            principal_point,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Initial intrinsics for an uncalibrated image: focal = max(width, height),
    /// principal point at the image center.
    pub fn initial_guess(width: usize, height: usize) -> Result<Self> {
        Self::new(
            width.max(height) as f64,
            [width as f64 / 2.0, height as f64 / 2.0],
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let [cx, cy] = self.principal_point;
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "focal {} must be > 0",
                self.focal
            )));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::InvalidParameter(format!(
                "image {}x{} smaller than 16x16",
                self.width, self.height
            )));
        }
        if !(0.0..=self.width as f64).contains(&cx) || !(0.0..=self.height as f64).contains(&cy) {
            return Err(Error::InvalidParameter(format!(
                "principal point ({cx}, {cy}) outside the image"
            )));
        }
        Ok(())
    }

    /// Same camera at `1/factor` resolution, matching a `factor × factor` box
    /// downscale whose output pixel centers sit at the block centers.
    pub fn downscaled(&self, factor: usize) -> Intrinsics {
        let s = factor as f64;
        let shift = |c: f64| (c - 0.5 * (s - 1.0)) / s;
        Intrinsics {
            focal: self.focal / s,
            principal_point: [
                shift(self.principal_point[0]),
                shift(self.principal_point[1]),
            ],
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    /// Same camera with a different focal length.
    pub fn with_focal(&self, focal: f64) -> Intrinsics {
        Intrinsics { focal, ..*self }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
}

impl Distortion {
    pub const NONE: Distortion = Distortion { k1: 0.0, k2: 0.0 };

    pub fn new(k1: f64, k2: f64) -> Self {
        Distortion { k1, k2 }
    }

    /// Radial scale factor `1 + k1 r² + k2 r⁴` for squared radius `r2`.
    #[inline]
    pub fn factor(&self, r2: f64) -> f64 {
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }
}

/// Intrinsics plus lens distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub distortion: Distortion,
}

impl CameraModel {
    /// Distorted pixel to undistorted normalized coordinates.
    pub fn pixel_to_undistorted(
        &self,
        p: Vector2<f64>,
        tol: f64,
        max_iter: usize,
    ) -> Result<Vector2<f64>> {
        undistort(
            pixel_to_normalized(p, &self.intrinsics),
            &self.distortion,
            tol,
            max_iter,
        )
    }

    /// Undistorted normalized coordinates to distorted pixel.
    pub fn undistorted_to_pixel(&self, x: Vector2<f64>) -> Vector2<f64> {
        normalized_to_pixel(distort(x, &self.distortion), &self.intrinsics)
    }
}

#[inline]
pub fn pixel_to_normalized(p: Vector2<f64>, k: &Intrinsics) -> Vector2<f64> {
    Vector2::new(
        (p.x - k.principal_point[0]) / k.focal,
        (p.y - k.principal_point[1]) / k.focal,
    )
}

#[inline]
pub fn normalized_to_pixel(x: Vector2<f64>, k: &Intrinsics) -> Vector2<f64> {
    Vector2::new(
        x.x * k.focal + k.principal_point[0],
        x.y * k.focal + k.principal_point[1],
    )
}

#[inline]
pub fn distort(x_u: Vector2<f64>, d: &Distortion) -> Vector2<f64> {
    x_u * d.factor(x_u.norm_squared())
}

/// Inverts [`distort`] by the fixed-point iteration `x ← x_d / (1 + k1 r(x)² + k2 r(x)⁴)`
/// started at `x_d`.
///
/// Iterates until the forward residual is below `tol / 10` so that the
/// inverse error stays below `tol` where the model is not too flat. Fails
/// with [`Error::NonConvergent`] when the residual is still above `tol` after
/// `max_iter` iterations, which happens outside the invertible radius.
pub fn undistort(
    x_d: Vector2<f64>,
    d: &Distortion,
    tol: f64,
    max_iter: usize,
) -> Result<Vector2<f64>> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::InvalidParameter(format!(
            "undistort needs tol > 0 and max_iter >= 1 (tol {tol}, max_iter {max_iter})"
        )));
    }
    let mut x = x_d;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let s = d.factor(x.norm_squared());
        x = x_d / s;
        residual = (distort(x, d) - x_d).norm();
        if !residual.is_finite() {
            return Err(Error::NonConvergent {
                residual,
                iterations: it,
            });
        }
        if residual <= 0.1 * tol {
            return Ok(x);
        }
    }
    if residual <= tol {
        return Ok(x);
    }
    Err(Error::NonConvergent {
        residual,
        iterations: max_iter,
    })
}

/// Skew-symmetric cross-product matrix, `hat(a) * b = a × b`.
#[inline]
pub fn hat(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Rotation stored both as axis-angle and as a cached matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    axis_angle: Vector3<f64>,
    matrix: Matrix3<f64>,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            axis_angle: Vector3::zeros(),
            matrix: Matrix3::identity(),
        }
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        self.axis_angle
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> Rotation {
        Rotation {
            axis_angle: -self.axis_angle,
            matrix: self.matrix.transpose(),
        }
    }

    /// Builds a rotation from an orthonormal matrix.
    pub fn from_matrix(m: &Matrix3<f64>) -> Rotation {
        so3_exp(so3_log(m))
    }

    pub fn angle(&self) -> f64 {
        self.axis_angle.norm()
    }
}

impl Serialize for Rotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let a = self.axis_angle;
        [a.x, a.y, a.z].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(so3_exp(Vector3::new(a[0], a[1], a[2])))
    }
}

/// Rodrigues' formula.
pub fn so3_exp(theta: Vector3<f64>) -> Rotation {
    let angle2 = theta.norm_squared();
    let k = hat(&theta);
    let (a, b) = if angle2 < 1e-10 {
        // Taylor terms; truncation error is below 1e-21 here.
        (
            1.0 - angle2 / 6.0 + angle2 * angle2 / 120.0,
            0.5 - angle2 / 24.0 + angle2 * angle2 / 720.0,
        )
    } else {
        let angle = angle2.sqrt();
        (angle.sin() / angle, (1.0 - angle.cos()) / angle2)
    };
    Rotation {
        axis_angle: theta,
        matrix: Matrix3::identity() + k * a + k * k * b,
    }
}

/// Axis-angle of an orthonormal matrix, angle in `[0, π]`.
pub fn so3_log(m: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let w = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    if angle < 1e-6 {
        // sin(a)/a ≈ 1 - a²/6
        return w * (0.5 * (1.0 + angle * angle / 6.0));
    }
    if std::f64::consts::PI - angle < 1e-6 {
        // Near π the antisymmetric part vanishes; read the axis off R + I.
        let s = m + Matrix3::identity();
        let col = (0..3)
            .max_by(|&a, &b| s.column(a).norm().total_cmp(&s.column(b).norm()))
            .unwrap_or(0);
        let mut axis: Vector3<f64> = s.column(col).normalize();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        return axis * angle;
    }
    w * (angle / (2.0 * angle.sin()))
}

/// Right Jacobian of SO(3): `exp(θ + δ) ≈ exp(θ)·exp(J_r(θ)·δ)`.
pub fn so3_right_jacobian(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle2 = theta.norm_squared();
    let k = hat(theta);
    let (a, b) = if angle2 < 1e-8 {
        (0.5 - angle2 / 24.0, 1.0 / 6.0 - angle2 / 120.0)
    } else {
        let angle = angle2.sqrt();
        (
            (1.0 - angle.cos()) / angle2,
            (angle - angle.sin()) / (angle2 * angle),
        )
    };
    Matrix3::identity() - k * a + k * k * b
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p + self.translation
    }

    /// Camera center expressed in the reference frame, `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.matrix().transpose() * self.translation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseDepthPoint {
    pub ref_normalized: Vector2<f64>,
    pub omega: f64,
}

/// Reference-frame 3D point `(x, y, 1) / ω`.
pub fn backproject(pt: &InverseDepthPoint) -> Result<Vector3<f64>> {
    if !(pt.omega > 0.0) {
        return Err(Error::NonPositiveDepth(pt.omega));
    }
    let z = 1.0 / pt.omega;
    Ok(Vector3::new(
        pt.ref_normalized.x * z,
        pt.ref_normalized.y * z,
        z,
    ))
}

/// Perspective division; fails for points at or behind the image plane.
#[inline]
pub fn dehomogenize(p: &Vector3<f64>) -> Result<Vector2<f64>> {
    if p.z <= 1e-9 {
        return Err(Error::BehindCamera(p.z));
    }
    Ok(Vector2::new(p.x / p.z, p.y / p.z))
}

/// Distorted pixel of reference-frame point `p` seen from `pose`.
pub fn project(
    p: &Vector3<f64>,
    pose: &Pose,
    k: &Intrinsics,
    d: &Distortion,
) -> Result<Vector2<f64>> {
    let x = dehomogenize(&pose.transform(p))?;
    Ok(normalized_to_pixel(distort(x, d), k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn k1280() -> Intrinsics {
        Intrinsics::new(1280.0, [960.0, 540.0], 1920, 1080).unwrap()
    }

    #[test]
    fn normalization_examples() {
        let k = k1280();
        assert_eq!(
            pixel_to_normalized(Vector2::new(960.0, 540.0), &k),
            Vector2::zeros()
        );
        assert_eq!(
            pixel_to_normalized(Vector2::new(2240.0, 540.0), &k),
            Vector2::new(1.0, 0.0)
        );
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, [8.0, 8.0], 16, 16).is_err());
        assert!(Intrinsics::new(10.0, [8.0, 8.0], 15, 16).is_err());
        assert!(Intrinsics::new(10.0, [17.0, 8.0], 16, 16).is_err());
        let k = Intrinsics::initial_guess(1280, 720).unwrap();
        assert_eq!(k.focal, 1280.0);
        assert_eq!(k.principal_point, [640.0, 360.0]);
    }

    #[test]
    fn distort_examples() {
        let x = Vector2::new(0.3, -0.7);
        assert_eq!(distort(x, &Distortion::NONE), x);
        assert_eq!(
            distort(Vector2::zeros(), &Distortion::new(0.4, -0.2)),
            Vector2::zeros()
        );
        let d = distort(Vector2::new(0.5, 0.0), &Distortion::new(0.1, 0.0));
        assert!((d.x - 0.5125).abs() < 1e-15 && d.y == 0.0);
    }

    #[test]
    fn undistort_identity_in_one_iteration() {
        let x = Vector2::new(0.25, 0.5);
        assert_eq!(undistort(x, &Distortion::NONE, 1e-10, 1).unwrap(), x);
    }

    #[test]
    fn undistort_outside_invertible_radius() {
        let r = undistort(
            Vector2::new(0.9, 0.0),
            &Distortion::new(-1.5, 0.0),
            UNDISTORT_TOL,
            UNDISTORT_MAX_ITER,
        );
        assert!(matches!(r, Err(Error::NonConvergent { .. })));
    }

    #[test]
    fn undistort_round_trip_grid() {
        for &(k1, k2) in &[
            (-0.3, -0.1),
            (-0.3, 0.1),
            (0.3, -0.1),
            (0.3, 0.1),
            (-0.12, 0.03),
        ] {
            let d = Distortion::new(k1, k2);
            for i in -8..=8 {
                for j in -8..=8 {
                    let x = Vector2::new(i as f64 * 0.066, j as f64 * 0.066);
                    if x.norm() > 0.8 {
                        continue;
                    }
                    let back = undistort(distort(x, &d), &d, UNDISTORT_TOL, 60).unwrap();
                    assert!((back - x).norm() <= 1e-10, "{k1} {k2} {x:?}");
                }
            }
        }
    }

    fn series_exp(theta: Vector3<f64>) -> Matrix3<f64> {
        let k = hat(&theta);
        let mut term = Matrix3::identity();
        let mut sum = Matrix3::identity();
        for n in 1..20 {
            term = term * k / n as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn so3_exp_examples() {
        assert_eq!(*so3_exp(Vector3::zeros()).matrix(), Matrix3::identity());
        let theta = Vector3::new(0.0, 0.0, FRAC_PI_2);
        let diff = so3_exp(theta).matrix() - series_exp(theta);
        assert!(diff.abs().max() <= 1e-12);
    }

    #[test]
    fn so3_log_inverts_exp() {
        for theta in [
            Vector3::new(1e-9, -2e-9, 0.0),
            Vector3::new(0.002, -0.003, 0.001),
            Vector3::new(1.0, 0.5, -0.25),
            Vector3::new(0.0, 3.0, 0.0),
        ] {
            let back = so3_log(so3_exp(theta).matrix());
            assert!((back - theta).norm() < 1e-12, "{theta:?} -> {back:?}");
        }
    }

    #[test]
    fn right_jacobian_matches_finite_differences() {
        let theta = Vector3::new(0.3, -0.2, 0.5);
        let jr = so3_right_jacobian(&theta);
        let r = so3_exp(theta);
        for c in 0..3 {
            let mut e = Vector3::zeros();
            e[c] = 1e-6;
            let rp = so3_exp(theta + e);
            let rm = so3_exp(theta - e);
            let local = (so3_log(&(r.matrix().transpose() * rp.matrix()))
                - so3_log(&(r.matrix().transpose() * rm.matrix())))
                / 2e-6;
            assert!((local - jr.column(c)).norm() < 1e-8);
        }
    }

    #[test]
    fn backproject_examples() {
        let p = backproject(&InverseDepthPoint {
            ref_normalized: Vector2::zeros(),
            omega: 1.0,
        })
        .unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 1.0));
        let p = backproject(&InverseDepthPoint {
            ref_normalized: Vector2::new(0.2, -0.1),
            omega: 0.5,
        })
        .unwrap();
        assert!((p - Vector3::new(0.4, -0.2, 2.0)).norm() < 1e-15);
        let r = backproject(&InverseDepthPoint {
            ref_normalized: Vector2::zeros(),
            omega: 0.0,
        });
        assert!(matches!(r, Err(Error::NonPositiveDepth(_))));
    }

    #[test]
    fn project_examples() {
        let k = k1280();
        let d = Distortion::new(-0.1, 0.02);
        let pp = project(
            &Vector3::new(0.0, 0.0, 1.0),
            &Pose::identity(),
            &k,
            &Distortion::NONE,
        )
        .unwrap();
        assert_eq!(pp, Vector2::new(960.0, 540.0));
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, -1.0), &Pose::identity(), &k, &d),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Error::DegenerateMotion(0.0).exit_code(), 3);
        assert_eq!(Error::NumericalFailure(1e8).exit_code(), 4);
        assert_eq!(Error::TooFewFrames(1).exit_code(), 2);
    }
}
