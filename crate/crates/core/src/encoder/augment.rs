//! Photometric and geometric augmentation: flips, rotation, crop-and-resize
//! and additive Gaussian noise, applied in that order.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::colorspace::RgbImage;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability of each of the horizontal and vertical flips.
    pub flip_p: f64,
    /// Rotation angle is drawn from `[-rot_deg, rot_deg]`.
    pub rot_deg: f64,
    pub noise_std: f64,
    /// Crop side as a fraction of the image side is drawn from `[min_crop_frac, 1]`.
    pub min_crop_frac: f64,
    /// Probability of rotation, crop and noise, each independently.
    pub apply_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_p: 0.5, rot_deg: 20.0, noise_std: 0.08, min_crop_frac: 0.9, apply_p: 0.5 }
    }
}

impl AugmentConfig {
    /// Leaves every image untouched.
    pub fn disabled() -> Self {
        Self { flip_p: 0.0, apply_p: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("augment.flip_p", self.flip_p), ("augment.apply_p", self.apply_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name}: must lie in [0, 1], got {p}")));
            }
        }
        if !(self.rot_deg >= 0.0 && self.rot_deg <= 180.0) {
            return Err(Error::InvalidArgument(format!("augment.rot_deg: must lie in [0, 180], got {}", self.rot_deg)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("augment.noise_std: must be non-negative, got {}", self.noise_std)));
        }
        if !(self.min_crop_frac > 0.0 && self.min_crop_frac <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "augment.min_crop_frac: must lie in (0, 1], got {}",
                self.min_crop_frac
            )));
        }
        Ok(())
    }
}

pub fn augment(img: &RgbImage, cfg: &AugmentConfig, rng: &mut Rng) -> RgbImage {
    let mut out = img.clone();
    if rng.random_bool(cfg.flip_p) {
        out = hflip(&out);
    }
    if rng.random_bool(cfg.flip_p) {
        out = vflip(&out);
    }
    if rng.random_bool(cfg.apply_p) {
        let deg = if cfg.rot_deg > 0.0 { rng.random_range(-cfg.rot_deg..=cfg.rot_deg) } else { 0.0 };
        out = rotate(&out, deg);
    }
    if rng.random_bool(cfg.apply_p) {
        let frac = if cfg.min_crop_frac < 1.0 { rng.random_range(cfg.min_crop_frac..=1.0) } else { 1.0 };
        let (h, w) = (out.height(), out.width());
        let ch = ((frac * h as f64).round() as usize).clamp(1, h);
        let cw = ((frac * w as f64).round() as usize).clamp(1, w);
        let oy = rng.random_range(0..=h - ch);
        let ox = rng.random_range(0..=w - cw);
        out = crop_resize(&out, oy, ox, ch, cw);
    }
    if rng.random_bool(cfg.apply_p) && cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
        let data = out.data().iter().map(|v| (v + normal.sample(rng)).clamp(0.0, 1.0)).collect();
        out = RgbImage::new(out.height(), out.width(), data).expect("clamped into [0, 1]");
    }
    out
}

pub fn hflip(img: &RgbImage) -> RgbImage {
    let w = img.width();
    RgbImage::from_fn(img.height(), w, |y, x| img.pixel(y, w - 1 - x)).expect("same values")
}

pub fn vflip(img: &RgbImage) -> RgbImage {
    let h = img.height();
    RgbImage::from_fn(h, img.width(), |y, x| img.pixel(h - 1 - y, x)).expect("same values")
}

/// Mirror a continuous coordinate into `[0, n − 1]` about the edge pixel
/// centres (`d c b | a b c d | c b a`).
fn reflect(u: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let r = u.rem_euclid(period);
    if r > (n - 1) as f64 {
        period - r
    } else {
        r
    }
}

/// Bilinear sample at continuous `(y, x)` with reflect padding.
fn sample(img: &RgbImage, y: f64, x: f64) -> [f64; 3] {
    let (h, w) = (img.height(), img.width());
    let (y, x) = (reflect(y, h), reflect(x, w));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
    std::array::from_fn(|k| {
        let top = a[k] + (b[k] - a[k]) * tx;
        let bottom = c[k] + (d[k] - c[k]) * tx;
        top + (bottom - top) * ty
    })
}

/// Rotation about the image centre by `deg` degrees.
pub fn rotate(img: &RgbImage, deg: f64) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = deg.to_radians().sin_cos();
    RgbImage::from_fn(h, w, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        // Inverse map: rotate the output coordinate back by −θ.
        let sy = cy + c * dy - s * dx;
        let sx = cx + s * dy + c * dx;
        sample(img, sy, sx)
    })
    .expect("bilinear mix of valid pixels")
}

/// Crop the `ch × cw` window at `(oy, ox)` and resize it back to the input
/// size with corner-aligned bilinear interpolation.
pub fn crop_resize(img: &RgbImage, oy: usize, ox: usize, ch: usize, cw: usize) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let scale = |n_out: usize, n_in: usize| if n_out > 1 { (n_in as f64 - 1.0) / (n_out as f64 - 1.0) } else { 0.0 };
    let (sy, sx) = (scale(h, ch), scale(w, cw));
    RgbImage::from_fn(h, w, |y, x| sample(img, oy as f64 + y as f64 * sy, ox as f64 + x as f64 * sx))
        .expect("bilinear mix of valid pixels")
}
