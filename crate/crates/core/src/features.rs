//! Grid-constrained Shi-Tomasi corners on the reference frame and pyramidal
//! Lucas-Kanade tracking into every other frame.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, Pyramid, ScalarMap};

/// Minimum number of complete tracks for a well-posed reconstruction.
pub const MIN_TRACKS: usize = 16;

/// Feature tracks of `m` points over the reference frame and `n` further frames.
/// Coordinates are distorted pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackTable {
    pub width: usize,
    pub height: usize,
    pub ref_points: Vec<Vector2<f64>>,
    /// `obs[i][j]`: point `j` in non-reference frame `i`.
    pub obs: Vec<Vec<Vector2<f64>>>,
}

impl TrackTable {
    pub fn new(
        width: usize,
        height: usize,
        ref_points: Vec<Vector2<f64>>,
        obs: Vec<Vec<Vector2<f64>>>,
    ) -> Result<Self> {
        let t = TrackTable {
            width,
            height,
            ref_points,
            obs,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn n_frames(&self) -> usize {
        self.obs.len()
    }

    pub fn m_points(&self) -> usize {
        self.ref_points.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m_points();
        if let Some(i) = self.obs.iter().position(|row| row.len() != m) {
            return Err(Error::SizeMismatch(format!(
                "frame {} has {} observations, expected {m}",
                i + 1,
                self.obs[i].len()
            )));
        }
        if m < MIN_TRACKS {
            return Err(Error::TooFewTracks {
                found: m,
                required: MIN_TRACKS,
            });
        }
        if self.n_frames() == 0 {
            return Err(Error::TooFewFrames(1));
        }
        Ok(())
    }

    /// Keeps only the listed columns, in order.
    pub fn select(&self, columns: &[usize]) -> TrackTable {
        TrackTable {
            width: self.width,
            height: self.height,
            ref_points: columns.iter().map(|&j| self.ref_points[j]).collect(),
            obs: self
                .obs
                .iter()
                .map(|row| columns.iter().map(|&j| row[j]).collect())
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerParams {
    pub grid_size: usize,
    pub min_response: f32,
    pub window_radius: usize,
    pub levels: usize,
    pub max_iter: usize,
    pub eps: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            grid_size: 80,
            min_response: 1e-4,
            window_radius: 10,
            levels: 3,
            max_iter: 30,
            eps: 0.01,
        }
    }
}

/// Shi-Tomasi score: smallest eigenvalue of the window-averaged structure
/// tensor of the binomially smoothed image. A border band of width
/// `window_radius + 1` is zero.
pub fn shi_tomasi_response(img: &GrayImage, window_radius: usize) -> Result<ScalarMap> {
    let (w, h) = (img.width(), img.height());
    let side = 2 * window_radius + 1;
    if window_radius < 1 || w < side || h < side {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            radius: window_radius,
        });
    }
    let (gx, gy) = img.as_map().smooth_binomial().gradients();

    // Integral images of the tensor entries, (w+1)×(h+1).
    let stride = w + 1;
    let mut sxx = vec![0.0f64; stride * (h + 1)];
    let mut syy = sxx.clone();
    let mut sxy = sxx.clone();
    for y in 0..h {
        let (mut rxx, mut ryy, mut rxy) = (0.0, 0.0, 0.0);
        for x in 0..w {
            let a = gx.get(x, y) as f64;
            let b = gy.get(x, y) as f64;
            rxx += a * a;
            ryy += b * b;
            rxy += a * b;
            let i = (y + 1) * stride + x + 1;
            sxx[i] = sxx[i - stride] + rxx;
            syy[i] = syy[i - stride] + ryy;
            sxy[i] = sxy[i - stride] + rxy;
        }
    }
    let box_sum = |s: &[f64], x0: usize, y0: usize, x1: usize, y1: usize| {
        s[y1 * stride + x1] - s[y0 * stride + x1] - s[y1 * stride + x0] + s[y0 * stride + x0]
    };

    let r = window_radius;
    let area = (side * side) as f64;
    let mut out = ScalarMap::zeros(w, h);
    for y in (r + 1)..h.saturating_sub(r + 1) {
        for x in (r + 1)..w.saturating_sub(r + 1) {
            let (x0, y0, x1, y1) = (x - r, y - r, x + r + 1, y + r + 1);
            let a = box_sum(&sxx, x0, y0, x1, y1) / area;
            let c = box_sum(&syy, x0, y0, x1, y1) / area;
            let b = box_sum(&sxy, x0, y0, x1, y1) / area;
            out.set(x, y, min_eigenvalue_2x2(a, b, c).max(0.0) as f32);
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn min_eigenvalue_2x2(a: f64, b: f64, c: f64) -> f64 {
    let half_trace = 0.5 * (a + c);
    let half_diff = 0.5 * (a - c);
    half_trace - (half_diff * half_diff + b * b).sqrt()
}

/// At most one feature per `grid_size`² cell: the cell's response argmax,
/// kept when it reaches `min_response`. Ties go to the smallest row-major index.
pub fn grid_extract(
    response: &ScalarMap,
    grid_size: usize,
    min_response: f32,
) -> Result<Vec<Vector2<f64>>> {
    if grid_size < 8 {
        return Err(Error::InvalidParameter(format!(
            "grid size {grid_size} < 8"
        )));
    }
    let (w, h) = (response.width, response.height);
    let mut out = Vec::new();
    for cy in (0..h).step_by(grid_size) {
        for cx in (0..w).step_by(grid_size) {
            let mut best: Option<(f32, usize, usize)> = None;
            for y in cy..(cy + grid_size).min(h) {
                for x in cx..(cx + grid_size).min(w) {
                    let v = response.get(x, y);
                    if best.is_none_or(|(b, _, _)| v > b) {
                        best = Some((v, x, y));
                    }
                }
            }
            if let Some((v, x, y)) = best {
                if v >= min_response {
                    out.push(Vector2::new(x as f64, y as f64));
                }
            }
        }
    }
    Ok(out)
}

/// Every 3×3 local maximum at or above `min_response`, without any grid.
/// This is the ungridded baseline that grid extraction is compared against.
pub fn threshold_extract(response: &ScalarMap, min_response: f32) -> Vec<Vector2<f64>> {
    let (w, h) = (response.width, response.height);
    let mut out = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let v = response.get(x, y);
            if v < min_response {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in 0..3 {
                for dx in 0..3 {
                    if dx == 1 && dy == 1 {
                        continue;
                    }
                    let n = response.get(x + dx - 1, y + dy - 1);
                    // Earlier neighbours in row-major order win ties.
                    let earlier = dy < 1 || (dy == 1 && dx < 1);
                    if n > v || (earlier && n == v) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                out.push(Vector2::new(x as f64, y as f64));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackStatus {
    Ok,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KltParams {
    pub levels: usize,
    pub window_radius: usize,
    pub max_iter: usize,
    pub eps: f64,
}

impl From<&TrackerParams> for KltParams {
    fn from(p: &TrackerParams) -> Self {
        KltParams {
            levels: p.levels,
            window_radius: p.window_radius,
            max_iter: p.max_iter,
            eps: p.eps,
        }
    }
}

const KLT_MIN_EIGENVALUE: f64 = 1e-6;
const KLT_MAX_SSD: f64 = 0.05;

struct RefPyramid {
    img: Pyramid,
    gx: Vec<ScalarMap>,
    gy: Vec<ScalarMap>,
}

impl RefPyramid {
    fn build(img: &GrayImage, levels: usize) -> Self {
        let img = Pyramid::build(img, levels);
        let (gx, gy) = img.levels.iter().map(|l| l.gradients()).unzip();
        RefPyramid { img, gx, gy }
    }
}

/// Pyramidal translational Lucas-Kanade from `reference` into `target`.
pub fn klt_track_pair(
    reference: &GrayImage,
    target: &GrayImage,
    pts: &[Vector2<f64>],
    params: &KltParams,
) -> Result<(Vec<Vector2<f64>>, Vec<TrackStatus>)> {
    if !reference.same_size(target) {
        return Err(Error::SizeMismatch(format!(
            "reference {}x{} vs target {}x{}",
            reference.width(),
            reference.height(),
            target.width(),
            target.height()
        )));
    }
    let rp = RefPyramid::build(reference, params.levels);
    let tp = Pyramid::build(target, params.levels);
    Ok(track_with_pyramids(&rp, &tp, pts, params))
}

fn track_with_pyramids(
    rp: &RefPyramid,
    tp: &Pyramid,
    pts: &[Vector2<f64>],
    params: &KltParams,
) -> (Vec<Vector2<f64>>, Vec<TrackStatus>) {
    pts.iter()
        .map(|p| match track_point(rp, tp, *p, params) {
            Some(d) => (p + d, TrackStatus::Ok),
            None => (*p, TrackStatus::Failed),
        })
        .unzip()
}

/// Displacement of `p`, or `None` when tracking fails.
fn track_point(
    rp: &RefPyramid,
    tp: &Pyramid,
    p: Vector2<f64>,
    params: &KltParams,
) -> Option<Vector2<f64>> {
    let r = params.window_radius as isize;
    let n_levels = rp.img.levels.len().min(tp.levels.len());
    let npix = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut d = Vector2::zeros();
    let mut template = Vec::with_capacity(npix as usize);

    for level in (0..n_levels).rev() {
        let finest = level == 0;
        let scale = (1usize << level) as f64;
        let pl = p / scale;
        let (img, gx, gy, tgt) = (
            &rp.img.levels[level],
            &rp.gx[level],
            &rp.gy[level],
            &tp.levels[level],
        );

        template.clear();
        let (mut hxx, mut hxy, mut hyy) = (0.0, 0.0, 0.0);
        let mut inside = true;
        'collect: for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (pl.x + dx as f64, pl.y + dy as f64);
                match (img.sample(x, y), gx.sample(x, y), gy.sample(x, y)) {
                    (Some(t), Some(a), Some(b)) => {
                        hxx += a * a;
                        hxy += a * b;
                        hyy += b * b;
                        template.push((dx as f64, dy as f64, t, a, b));
                    }
                    _ => {
                        inside = false;
                        break 'collect;
                    }
                }
            }
        }
        let (hxx, hxy, hyy) = (hxx / npix, hxy / npix, hyy / npix);
        if !inside || min_eigenvalue_2x2(hxx, hxy, hyy) < KLT_MIN_EIGENVALUE {
            if finest {
                return None;
            }
            d *= 2.0;
            continue;
        }
        let det = hxx * hyy - hxy * hxy;

        for _ in 0..params.max_iter {
            let (mut bx, mut by) = (0.0, 0.0);
            for &(dx, dy, t, a, b) in &template {
                let Some(v) = tgt.sample(pl.x + d.x + dx, pl.y + d.y + dy) else {
                    if finest {
                        return None;
                    }
                    bx = f64::NAN;
                    break;
                };
                let e = v - t;
                bx += a * e;
                by += b * e;
            }
            if bx.is_nan() {
                break;
            }
            let (bx, by) = (bx / npix, by / npix);
            let step = Vector2::new((hyy * bx - hxy * by) / det, (hxx * by - hxy * bx) / det);
            d -= step;
            if step.norm() < params.eps {
                break;
            }
        }
        if !finest {
            d *= 2.0;
        }
    }

    let mut ssd = 0.0;
    for &(dx, dy, t, _, _) in &template {
        let v = tp.levels[0].sample(p.x + d.x + dx, p.y + d.y + dy)?;
        ssd += (v - t) * (v - t);
    }
    (ssd / npix <= KLT_MAX_SSD).then_some(d)
}

/// Extracts grid features on frame 0 and tracks them into every other frame.
/// Points that fail in any frame are dropped.
pub fn build_tracks(frames: &[GrayImage], params: &TrackerParams) -> Result<TrackTable> {
    if frames.len() < 2 {
        return Err(Error::TooFewFrames(frames.len()));
    }
    let reference = &frames[0];
    if let Some(i) = frames.iter().position(|f| !f.same_size(reference)) {
        return Err(Error::SizeMismatch(format!(
            "frame {i} is {}x{}, reference is {}x{}",
            frames[i].width(),
            frames[i].height(),
            reference.width(),
            reference.height()
        )));
    }
    let response = shi_tomasi_response(reference, params.window_radius)?;
    let seeds = grid_extract(&response, params.grid_size, params.min_response)?;

    let klt = KltParams::from(params);
    let rp = RefPyramid::build(reference, klt.levels);
    let tracked: Vec<_> = frames[1..]
        .par_iter()
        .map(|f| track_with_pyramids(&rp, &Pyramid::build(f, klt.levels), &seeds, &klt))
        .collect();

    let keep: Vec<usize> = (0..seeds.len())
        .filter(|&j| tracked.iter().all(|(_, st)| st[j] == TrackStatus::Ok))
        .collect();
    let table = TrackTable {
        width: reference.width(),
        height: reference.height(),
        ref_points: keep.iter().map(|&j| seeds[j]).collect(),
        obs: tracked
            .iter()
            .map(|(pts, _)| keep.iter().map(|&j| pts[j]).collect())
            .collect(),
    };
    table.validate()?;
    Ok(table)
}
