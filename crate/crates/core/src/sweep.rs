//! Dense depth by plane sweep over inverse depth.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    distort, normalized_to_pixel, pixel_to_normalized, undistort, CameraModel, Pose,
};
use crate::geometry::{UNDISTORT_MAX_ITER, UNDISTORT_TOL};
use crate::image::GrayImage;

/// Cost of an entry with too few samples.
pub const INVALID_COST: f32 = f32::INFINITY;

/// Minimum intensities per entry: the reference plus two frames.
pub const MIN_SAMPLES: usize = 3;

/// Default window radius of [`median_refine`].
pub const MEDIAN_RADIUS: usize = 2;

/// `n` inverse depths spaced uniformly over `[omega_min, omega_max]`.
pub fn sample_planes(omega_min: f64, omega_max: f64, n: usize) -> Result<Vec<f64>> {
    if !(omega_min > 0.0 && omega_max > omega_min && omega_max.is_finite()) || n == 0 {
        return Err(Error::BadRange {
            min: omega_min,
            max: omega_max,
            count: n,
        });
    }
    if n == 1 {
        return Ok(vec![0.5 * (omega_min + omega_max)]);
    }
    let step = (omega_max - omega_min) / (n - 1) as f64;
    Ok((0..n)
        .map(|k| {
            if k == n - 1 {
                omega_max
            } else {
                omega_min + step * k as f64
            }
        })
        .collect())
}

/// Sweep range from sparse inverse depths: 10% margin on both ends.
pub fn plane_range(omegas: &[f64]) -> Result<(f64, f64)> {
    let min = omegas.iter().copied().fold(f64::INFINITY, f64::min);
    let max = omegas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(min > 0.0 && max.is_finite()) {
        return Err(Error::BadRange {
            min,
            max,
            count: omegas.len(),
        });
    }
    Ok((0.9 * min, 1.1 * max))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    pub n_planes: usize,
    /// Pixel-major: entry `(y * width + x) * n_planes + k`.
    pub cost: Vec<f32>,
}

impl CostVolume {
    pub fn new(width: usize, height: usize, n_planes: usize, cost: Vec<f32>) -> Result<Self> {
        if cost.len() != width * height * n_planes {
            return Err(Error::SizeMismatch(format!(
                "{} costs for {width}x{height}x{n_planes}",
                cost.len()
            )));
        }
        Ok(CostVolume {
            width,
            height,
            n_planes,
            cost,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.n_planes;
        &self.cost[i..i + self.n_planes]
    }

    pub fn is_valid(&self, x: usize, y: usize, k: usize) -> bool {
        self.pixel(x, y)[k].is_finite()
    }
}

/// Computes the variance cost of every reference pixel against every plane.
/// `camera` must describe the images at their current resolution; poses map
/// reference coordinates into each frame.
pub fn sweep(
    reference: &GrayImage,
    frames: &[GrayImage],
    camera: &CameraModel,
    poses: &[Pose],
    planes: &[f64],
) -> Result<CostVolume> {
    let (w, h) = (reference.width(), reference.height());
    if frames.len() != poses.len() {
        return Err(Error::SizeMismatch(format!(
            "{} frames, {} poses",
            frames.len(),
            poses.len()
        )));
    }
    if let Some((i, f)) = frames
        .iter()
        .enumerate()
        .find(|(_, f)| !f.same_size(reference))
    {
        return Err(Error::SizeMismatch(format!(
            "frame {} is {}x{}, reference {w}x{h}",
            i + 1,
            f.width(),
            f.height()
        )));
    }
    let k = &camera.intrinsics;
    if k.width != w || k.height != h {
        return Err(Error::SizeMismatch(format!(
            "intrinsics for {}x{}, images {w}x{h}",
            k.width, k.height
        )));
    }
    if planes.is_empty() {
        return Err(Error::BadRange {
            min: f64::NAN,
            max: f64::NAN,
            count: 0,
        });
    }
    let n = planes.len();
    let mut cost = vec![INVALID_COST; w * h * n];
    cost.par_chunks_mut(w * n).enumerate().for_each(|(y, row)| {
        let mut rays = vec![Vector3::zeros(); poses.len()];
        for x in 0..w {
            let out = &mut row[x * n..(x + 1) * n];
            let p = Vector2::new(x as f64, y as f64);
            let Ok(xu) = undistort(
                pixel_to_normalized(p, k),
                &camera.distortion,
                UNDISTORT_TOL,
                UNDISTORT_MAX_ITER,
            ) else {
                continue;
            };
            let ray = Vector3::new(xu.x, xu.y, 1.0);
            for (r, pose) in rays.iter_mut().zip(poses) {
                *r = pose.rotation.matrix() * ray;
            }
            let i_ref = reference.get(x, y) as f64;
            for (c, &omega) in out.iter_mut().zip(planes) {
                // ω·(R P + t) with P = ray / ω.
                let (mut count, mut sum, mut sum2) = (1usize, i_ref, i_ref * i_ref);
                for ((r, pose), frame) in rays.iter().zip(poses).zip(frames) {
                    let q = r + pose.translation * omega;
                    if q.z <= 1e-9 {
                        continue;
                    }
                    let xd = distort(Vector2::new(q.x / q.z, q.y / q.z), &camera.distortion);
                    let px = normalized_to_pixel(xd, k);
                    if let Some(v) = frame.sample(px.x, px.y) {
                        count += 1;
                        sum += v;
                        sum2 += v * v;
                    }
                }
                if count >= MIN_SAMPLES {
                    let mean = sum / count as f64;
                    *c = (sum2 / count as f64 - mean * mean).max(0.0) as f32;
                }
            }
        }
    });
    CostVolume::new(w, h, n, cost)
}

/// Per-pixel inverse depth; `0` marks an invalid pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub inverse_depth: Vec<f32>,
    pub confidence: Vec<f32>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            inverse_depth: vec![0.0; width * height],
            confidence: vec![0.0; width * height],
        }
    }

    pub fn omega(&self, x: usize, y: usize) -> Option<f32> {
        let v = self.inverse_depth[y * self.width + x];
        (v > 0.0).then_some(v)
    }

    pub fn valid_count(&self) -> usize {
        self.inverse_depth.iter().filter(|v| **v > 0.0).count()
    }
}

/// Index of the plane nearest to `omega`.
pub fn nearest_plane(planes: &[f64], omega: f64) -> usize {
    let mut best = 0;
    for (k, p) in planes.iter().enumerate() {
        if (p - omega).abs() < (planes[best] - omega).abs() {
            best = k;
        }
    }
    best
}

/// Lowest-cost valid plane per pixel. Confidence is `1 − c_min / c_second`.
pub fn winner_take_all(vol: &CostVolume, planes: &[f64]) -> Result<DepthMap> {
    if planes.len() != vol.n_planes {
        return Err(Error::SizeMismatch(format!(
            "{} planes for a volume of {}",
            planes.len(),
            vol.n_planes
        )));
    }
    let mut map = DepthMap::invalid(vol.width, vol.height);
    map.inverse_depth
        .par_chunks_mut(vol.width)
        .zip(map.confidence.par_chunks_mut(vol.width))
        .enumerate()
        .for_each(|(y, (omega_row, conf_row))| {
            for x in 0..vol.width {
                let mut best: Option<(usize, f32)> = None;
                let mut second = INVALID_COST;
                for (k, &c) in vol.pixel(x, y).iter().enumerate() {
                    if !c.is_finite() {
                        continue;
                    }
                    match best {
                        Some((_, b)) if c >= b => second = second.min(c),
                        Some((_, b)) => {
                            second = b;
                            best = Some((k, c));
                        }
                        None => best = Some((k, c)),
                    }
                }
                if let Some((k, c_min)) = best {
                    omega_row[x] = planes[k] as f32;
                    conf_row[x] = if second.is_finite() && second > 0.0 {
                        1.0 - c_min / second
                    } else {
                        0.0
                    };
                }
            }
        });
    Ok(map)
}

/// Median filter over valid inverse depths in a `(2r+1)²` window, truncated
/// at the borders. Invalid pixels are filled when at least half the window
/// is valid. Even counts take the lower median, so output values are always
/// input values.
pub fn median_refine(map: &DepthMap, radius: usize) -> Result<DepthMap> {
    if radius == 0 {
        return Err(Error::InvalidParameter("median radius must be >= 1".into()));
    }
    let (w, h) = (map.width, map.height);
    let mut out = DepthMap::invalid(w, h);
    out.inverse_depth
        .par_chunks_mut(w)
        .zip(out.confidence.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (omega_row, conf_row))| {
            let mut window = Vec::with_capacity((2 * radius + 1).pow(2));
            let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
                window.clear();
                for yy in y0..=y1 {
                    let row = &map.inverse_depth[yy * w..(yy + 1) * w];
                    window.extend(row[x0..=x1].iter().copied().filter(|v| *v > 0.0));
                }
                let area = (x1 - x0 + 1) * (y1 - y0 + 1);
                let own = map.inverse_depth[y * w + x];
                let keep = if own > 0.0 {
                    !window.is_empty()
                } else {
                    2 * window.len() >= area
                };
                if keep {
                    window.sort_by(f32::total_cmp);
                    omega_row[x] = window[(window.len() - 1) / 2];
                    conf_row[x] = if own > 0.0 {
                        map.confidence[y * w + x]
                    } else {
                        0.0
                    };
                }
            }
        });
    Ok(out)
}
