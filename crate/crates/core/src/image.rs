//! Single-channel raster types, sampling, smoothing and pyramids.

use crate::error::{Error, Result};

/// Row-major scalar raster (responses, gradients, intermediate images).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ScalarMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        ScalarMap {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        ScalarMap {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Whether `(x, y)` can be sampled bilinearly without leaving the raster.
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    /// Bilinear sample; `None` outside `[0, w-1] × [0, h-1]`.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        if !self.contains(x, y) {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width - 2);
        let y0 = (y.floor() as usize).min(self.height - 2);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let i = y0 * self.width + x0;
        let a = self.data[i] as f64;
        let b = self.data[i + 1] as f64;
        let c = self.data[i + self.width] as f64;
        let d = self.data[i + self.width + 1] as f64;
        Some((a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy)
    }

    /// Separable 5-tap binomial `[1 4 6 4 1] / 16` with replicated borders.
    pub fn smooth_binomial(&self) -> ScalarMap {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let (w, h) = (self.width, self.height);
        let mut tmp = ScalarMap::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &c) in K.iter().enumerate() {
                    acc += c * self.get_clamped(x as isize + k as isize - 2, y as isize);
                }
                tmp.set(x, y, acc);
            }
        }
        let mut out = ScalarMap::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &c) in K.iter().enumerate() {
                    acc += c * tmp.get_clamped(x as isize, y as isize + k as isize - 2);
                }
                out.set(x, y, acc);
            }
        }
        out
    }

    /// Central-difference gradients `(∂x, ∂y)`; one-sided on the border.
    pub fn gradients(&self) -> (ScalarMap, ScalarMap) {
        let (w, h) = (self.width, self.height);
        let gx = ScalarMap::from_fn(w, h, |x, y| {
            let l = self.get(x.saturating_sub(1), y);
            let r = self.get((x + 1).min(w - 1), y);
            let span = ((x + 1).min(w - 1) - x.saturating_sub(1)) as f32;
            (r - l) / span
        });
        let gy = ScalarMap::from_fn(w, h, |x, y| {
            let u = self.get(x, y.saturating_sub(1));
            let d = self.get(x, (y + 1).min(h - 1));
            let span = ((y + 1).min(h - 1) - y.saturating_sub(1)) as f32;
            (d - u) / span
        });
        (gx, gy)
    }

    /// Binomial anti-aliasing followed by 2× decimation.
    pub fn downsample(&self) -> ScalarMap {
        let s = self.smooth_binomial();
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        ScalarMap::from_fn(w, h, |x, y| s.get(2 * x, 2 * y))
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    map: ScalarMap,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::SizeMismatch(format!(
                "{} samples for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(bad) = data
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::InvalidParameter(format!(
                "intensity {bad} outside [0, 1]"
            )));
        }
        Ok(GrayImage {
            map: ScalarMap {
                width,
                height,
                data,
            },
        })
    }

    /// Builds an image from a closure; values are clamped into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        GrayImage {
            map: ScalarMap::from_fn(width, height, |x, y| f(x, y).clamp(0.0, 1.0)),
        }
    }

    pub fn constant(width: usize, height: usize, v: f32) -> Self {
        Self::from_fn(width, height, |_, _| v)
    }

    pub fn width(&self) -> usize {
        self.map.width
    }

    pub fn height(&self) -> usize {
        self.map.height
    }

    pub fn data(&self) -> &[f32] {
        &self.map.data
    }

    pub fn as_map(&self) -> &ScalarMap {
        &self.map
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.map.get(x, y)
    }

    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        self.map.sample(x, y)
    }

    /// Integer-factor box downscale.
    pub fn downscale(&self, factor: usize) -> GrayImage {
        if factor <= 1 {
            return self.clone();
        }
        let w = self.width() / factor;
        let h = self.height() / factor;
        let norm = 1.0 / (factor * factor) as f32;
        GrayImage::from_fn(w, h, |x, y| {
            let mut acc = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += self.get(x * factor + dx, y * factor + dy);
                }
            }
            acc * norm
        })
    }

    pub fn same_size(&self, other: &GrayImage) -> bool {
        self.width() == other.width() && self.height() == other.height()
    }
}

/// Gaussian-like pyramid, level 0 at full resolution.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<ScalarMap>,
}

impl Pyramid {
    pub fn build(img: &GrayImage, levels: usize) -> Pyramid {
        let mut out = vec![img.as_map().clone()];
        while out.len() < levels.max(1) {
            let next = out[out.len() - 1].downsample();
            if next.width < 4 || next.height < 4 {
                break;
            }
            out.push(next);
        }
        Pyramid { levels: out }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_is_exact_on_affine_ramps() {
        let m = ScalarMap::from_fn(8, 6, |x, y| 0.1 * x as f32 + 0.05 * y as f32);
        let v = m.sample(3.25, 2.5).unwrap();
        assert!((v - (0.325 + 0.125)).abs() < 1e-6);
        assert_eq!(m.sample(7.0, 5.0).map(|v| (v * 1e4).round()), Some(9500.0));
        assert!(m.sample(7.01, 0.0).is_none());
        assert!(m.sample(-0.01, 0.0).is_none());
    }

    #[test]
    fn smoothing_preserves_constants() {
        let m = ScalarMap::from_fn(9, 7, |_, _| 0.4);
        assert!(m
            .smooth_binomial()
            .data
            .iter()
            .all(|v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn central_difference_of_ramp() {
        let m = ScalarMap::from_fn(10, 10, |x, _| 0.02 * x as f32);
        let (gx, gy) = m.gradients();
        assert!((gx.get(5, 5) - 0.02).abs() < 1e-6);
        assert_eq!(gy.get(5, 5), 0.0);
    }

    #[test]
    fn gray_image_validation() {
        assert!(GrayImage::new(2, 2, vec![0.0; 3]).is_err());
        assert!(GrayImage::new(2, 2, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(GrayImage::new(2, 2, vec![0.0, 0.5, 1.0, f32::NAN]).is_err());
        assert!(GrayImage::new(2, 2, vec![0.0, 0.5, 1.0, 0.25]).is_ok());
    }

    #[test]
    fn pyramid_halves() {
        let img = GrayImage::constant(64, 48, 0.5);
        let p = Pyramid::build(&img, 3);
        assert_eq!(p.levels.len(), 3);
        assert_eq!((p.levels[2].width, p.levels[2].height), (16, 12));
    }
}
