//! Conversions between RGB, optical density (Beer–Lambert) and Ruderman lαβ.
//!
//! All images are stored as interleaved `H × W × 3` buffers of `f64`.
//! RGB channels live in `[0, 1]` (8-bit value / 255) with the white
//! reference fixed at 1.0.

use std::sync::LazyLock;

use nalgebra::Matrix3;

use crate::error::{Error, Result};

/// Guard used by every logarithm in this module.
pub const LOG_EPSILON: f64 = 1e-6;

macro_rules! image_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            height: usize,
            width: usize,
            data: Vec<f64>,
        }

        impl $name {
            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn n_pixels(&self) -> usize {
                self.height * self.width
            }

            /// Interleaved channel data, row-major.
            pub fn data(&self) -> &[f64] {
                &self.data
            }

            pub fn into_data(self) -> Vec<f64> {
                self.data
            }

            pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
                let i = 3 * (y * self.width + x);
                [self.data[i], self.data[i + 1], self.data[i + 2]]
            }

            pub fn pixels(&self) -> impl ExactSizeIterator<Item = [f64; 3]> + '_ {
                self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
            }

            fn check_shape(height: usize, width: usize, len: usize) -> Result<()> {
                if height == 0 || width == 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "image dimensions must be positive, got {height}x{width}"
                    )));
                }
                if len != height * width * 3 {
                    return Err(Error::ShapeMismatch(format!(
                        "expected {} values for {height}x{width}x3, got {len}",
                        height * width * 3
                    )));
                }
                Ok(())
            }

            fn from_pixels(height: usize, width: usize, pixels: impl Iterator<Item = [f64; 3]>) -> Self {
                let mut data = Vec::with_capacity(height * width * 3);
                for p in pixels {
                    data.extend_from_slice(&p);
                }
                debug_assert_eq!(data.len(), height * width * 3);
                Self { height, width, data }
            }
        }
    };
}

image_type! {
    /// An RGB image with channels in `[0, 1]`.
    RgbImage
}

image_type! {
    /// Per-channel optical density, `-log10(I / I0)`.
    OdImage
}

image_type! {
    /// Ruderman lαβ image (decorrelated log-LMS).
    LabImage
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::check_shape(height, width, data.len())?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("channel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from 8-bit interleaved RGB bytes.
    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::check_shape(height, width, bytes.len())?;
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Ok(Self { height, width, data })
    }

    /// Quantizes to 8 bits with round-to-nearest.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(height, width, rgb.repeat(height * width))
    }

    /// Builds an image from a per-pixel function, clamping into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        Self::check_shape(height, width, height * width * 3)?;
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Ok(Self { height, width, data })
    }

    /// Mean absolute per-channel difference; panics on a shape mismatch.
    pub fn mean_abs_diff(&self, other: &RgbImage) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width), "image shapes differ");
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        sum / self.data.len() as f64
    }

    pub(crate) fn from_clamped(height: usize, width: usize, pixels: impl Iterator<Item = [f64; 3]>) -> Self {
        Self::from_pixels(height, width, pixels.map(|p| p.map(|v| v.clamp(0.0, 1.0))))
    }
}

impl OdImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::check_shape(height, width, data.len())?;
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("optical density {v} must be finite and >= 0")));
        }
        Ok(Self { height, width, data })
    }

    /// Euclidean norm of each pixel's OD vector.
    pub fn norms(&self) -> impl Iterator<Item = f64> + '_ {
        self.pixels().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
    }
}

impl LabImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::check_shape(height, width, data.len())?;
        Ok(Self { height, width, data })
    }

    pub(crate) fn map_pixels(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> LabImage {
        LabImage::from_pixels(self.height, self.width, self.pixels().map(f))
    }
}

/// `od = -log10(max(v, epsilon))`.
pub fn rgb_to_od(img: &RgbImage, epsilon: f64) -> OdImage {
    assert!(epsilon > 0.0, "epsilon must be positive");
    OdImage::from_pixels(
        img.height,
        img.width,
        img.pixels().map(|p| p.map(|v| -v.max(epsilon).log10())),
    )
}

/// `v = 10^(-od)`, clamped into `[0, 1]`.
pub fn od_to_rgb(img: &OdImage) -> RgbImage {
    RgbImage::from_clamped(img.height, img.width, img.pixels().map(|p| p.map(|od| 10f64.powf(-od))))
}

pub fn od_pixel_to_rgb(od: [f64; 3]) -> [f64; 3] {
    od.map(|v| 10f64.powf(-v).clamp(0.0, 1.0))
}

// Ruderman et al. RGB -> LMS with each row rescaled to sum to one, so that
// achromatic pixels land exactly on the l axis.
static RGB_TO_LMS: LazyLock<Matrix3<f64>> = LazyLock::new(|| {
    let raw = Matrix3::new(
        0.3811, 0.5783, 0.0402, //
        0.1967, 0.7244, 0.0782, //
        0.0241, 0.1288, 0.8444,
    );
    let mut m = raw;
    for r in 0..3 {
        let s = raw.row(r).sum();
        for c in 0..3 {
            m[(r, c)] = raw[(r, c)] / s;
        }
    }
    m
});

static LMS_TO_RGB: LazyLock<Matrix3<f64>> =
    LazyLock::new(|| RGB_TO_LMS.try_inverse().expect("RGB->LMS matrix is invertible"));

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn inv_sqrt3() -> f64 {
    1.0 / 3f64.sqrt()
}

fn inv_sqrt6() -> f64 {
    1.0 / 6f64.sqrt()
}

pub fn rgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let m = &*RGB_TO_LMS;
    let mut log_lms = [0.0; 3];
    for (r, out) in log_lms.iter_mut().enumerate() {
        let v = m[(r, 0)] * rgb[0] + m[(r, 1)] * rgb[1] + m[(r, 2)] * rgb[2];
        *out = v.max(LOG_EPSILON).log10();
    }
    let [l, mm, s] = log_lms;
    [
        (l + mm + s) * inv_sqrt3(),
        (l + mm - 2.0 * s) * inv_sqrt6(),
        (l - mm) * INV_SQRT2,
    ]
}

/// Inverse of [`rgb_pixel_to_lab`] without clamping.
pub fn lab_pixel_to_rgb_unclamped(lab: [f64; 3]) -> [f64; 3] {
    let [l, a, b] = lab;
    let lu = l * inv_sqrt3();
    let au = a * inv_sqrt6();
    let bu = b * INV_SQRT2;
    let lms = [
        10f64.powf(lu + au + bu),
        10f64.powf(lu + au - bu),
        10f64.powf(lu - 2.0 * au),
    ];
    let m = &*LMS_TO_RGB;
    let mut rgb = [0.0; 3];
    for (r, out) in rgb.iter_mut().enumerate() {
        *out = m[(r, 0)] * lms[0] + m[(r, 1)] * lms[1] + m[(r, 2)] * lms[2];
    }
    rgb
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    LabImage::from_pixels(img.height, img.width, img.pixels().map(rgb_pixel_to_lab))
}

pub fn lab_to_rgb(img: &LabImage) -> RgbImage {
    RgbImage::from_clamped(img.height, img.width, img.pixels().map(lab_pixel_to_rgb_unclamped))
}
