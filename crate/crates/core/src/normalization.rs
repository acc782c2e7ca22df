//! The stain normalization map `g(X, x_r)` and the per-batch protocol that
//! picks the reference image and the method.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::{lab_pixel_to_rgb_unclamped, od_pixel_to_rgb, rgb_to_lab, rgb_to_od, LabImage, RgbImage, LOG_EPSILON};
use crate::error::{Error, Result};
use crate::stain::{
    concentrations_for, estimate_macenko, estimate_vahadane, foreground_mask, MacenkoParams, StainBasis,
    VahadaneParams,
};

/// Lower bound on Reinhard channel standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationMethod {
    Reinhard,
    Macenko,
    Vahadane,
}

impl NormalizationMethod {
    /// All methods, in the order used for round-robin assignment.
    pub const ALL: [NormalizationMethod; 3] =
        [NormalizationMethod::Vahadane, NormalizationMethod::Macenko, NormalizationMethod::Reinhard];

    pub fn name(self) -> &'static str {
        match self {
            NormalizationMethod::Reinhard => "reinhard",
            NormalizationMethod::Macenko => "macenko",
            NormalizationMethod::Vahadane => "vahadane",
        }
    }
}

impl fmt::Display for NormalizationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormalizationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reinhard" => Ok(Self::Reinhard),
            "macenko" => Ok(Self::Macenko),
            "vahadane" => Ok(Self::Vahadane),
            other => Err(Error::InvalidArgument(format!("unknown normalization method '{other}'"))),
        }
    }
}

/// Per-channel lαβ mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl LabStats {
    pub fn of(lab: &LabImage) -> Self {
        let n = lab.n_pixels() as f64;
        let mut mean = [0.0; 3];
        for p in lab.pixels() {
            for c in 0..3 {
                mean[c] += p[c];
            }
        }
        mean = mean.map(|m| m / n);
        let mut var = [0.0; 3];
        for p in lab.pixels() {
            for c in 0..3 {
                var[c] += (p[c] - mean[c]).powi(2);
            }
        }
        let std = var.map(|v| (v / n).sqrt().max(SIGMA_FLOOR));
        Self { mean, std }
    }
}

/// Precomputed statistics of a reference image for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum NormalizationTarget {
    Reinhard(LabStats),
    Macenko(StainBasis),
    Vahadane(StainBasis),
}

impl NormalizationTarget {
    pub fn method(&self) -> NormalizationMethod {
        match self {
            NormalizationTarget::Reinhard(_) => NormalizationMethod::Reinhard,
            NormalizationTarget::Macenko(_) => NormalizationMethod::Macenko,
            NormalizationTarget::Vahadane(_) => NormalizationMethod::Vahadane,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeWarning {
    /// The source had no foreground and was passed through unchanged.
    EmptyForeground,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub image: RgbImage,
    pub warning: Option<NormalizeWarning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

/// Stain normalizer holding the estimator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Normalizer {
    pub macenko: MacenkoParams,
    pub vahadane: VahadaneParams,
}

impl Normalizer {
    pub fn with_seed(seed: u64) -> Self {
        Self { vahadane: VahadaneParams { seed, ..Default::default() }, ..Default::default() }
    }

    pub fn fit_target(&self, img: &RgbImage, method: NormalizationMethod) -> Result<NormalizationTarget> {
        Ok(match method {
            NormalizationMethod::Reinhard => NormalizationTarget::Reinhard(LabStats::of(&rgb_to_lab(img))),
            NormalizationMethod::Macenko => NormalizationTarget::Macenko(estimate_macenko(img, &self.macenko)?),
            NormalizationMethod::Vahadane => {
                NormalizationTarget::Vahadane(estimate_vahadane(img, &self.vahadane)?.basis)
            }
        })
    }

    /// Normalizes `img` to `target`. A source without foreground is returned
    /// unchanged with a warning; other estimation failures propagate.
    pub fn normalize(&self, img: &RgbImage, target: &NormalizationTarget) -> Result<Normalized> {
        let image = match target {
            NormalizationTarget::Reinhard(tgt) => reinhard_transfer(img, tgt),
            NormalizationTarget::Macenko(tgt) => match estimate_macenko(img, &self.macenko) {
                Ok(src) => concentration_transfer(img, &src, tgt),
                Err(Error::EmptyForeground) => return Ok(passthrough(img)),
                Err(e) => return Err(e),
            },
            NormalizationTarget::Vahadane(tgt) => match estimate_vahadane(img, &self.vahadane) {
                Ok(fit) => rescale_and_render(img, &fit.concentrations.data, &fit.basis, tgt),
                Err(Error::EmptyForeground) => return Ok(passthrough(img)),
                Err(e) => return Err(e),
            },
        };
        Ok(Normalized { image, warning: None })
    }

    /// Normalizes every image of `batch` (the reference included) to
    /// `batch[ref_index]`. Fails as a whole only when the reference target
    /// cannot be fitted; per-image failures are reported per slot.
    pub fn normalize_batch(
        &self,
        batch: &[RgbImage],
        ref_index: usize,
        method: NormalizationMethod,
        execution: Execution,
    ) -> Result<Vec<Result<Normalized>>> {
        if ref_index >= batch.len() {
            return Err(Error::InvalidArgument(format!(
                "reference index {ref_index} out of range for batch of {}",
                batch.len()
            )));
        }
        let target = self.fit_target(&batch[ref_index], method)?;
        Ok(match execution {
            Execution::Serial => batch.iter().map(|img| self.normalize(img, &target)).collect(),
            Execution::Parallel => batch.par_iter().map(|img| self.normalize(img, &target)).collect(),
        })
    }
}

fn passthrough(img: &RgbImage) -> Normalized {
    Normalized { image: img.clone(), warning: Some(NormalizeWarning::EmptyForeground) }
}

/// `v' = (v − μ_src)·(σ_tgt/σ_src) + μ_tgt` on each lαβ channel.
pub fn match_lab_statistics(lab: &LabImage, src: &LabStats, tgt: &LabStats) -> LabImage {
    lab.map_pixels(|p| [0, 1, 2].map(|c| (p[c] - src.mean[c]) * (tgt.std[c] / src.std[c]) + tgt.mean[c]))
}

fn reinhard_transfer(img: &RgbImage, tgt: &LabStats) -> RgbImage {
    let lab = rgb_to_lab(img);
    let src = LabStats::of(&lab);
    let mapped = match_lab_statistics(&lab, &src, tgt);
    RgbImage::from_clamped(img.height(), img.width(), mapped.pixels().map(lab_pixel_to_rgb_unclamped))
}

fn concentration_transfer(img: &RgbImage, src: &StainBasis, tgt: &StainBasis) -> RgbImage {
    let od: Vec<[f64; 3]> = rgb_to_od(img, LOG_EPSILON).pixels().collect();
    let conc = concentrations_for(&od, src);
    rescale_and_render(img, &conc.data, src, tgt)
}

fn rescale_and_render(img: &RgbImage, conc: &[[f64; 2]], src: &StainBasis, tgt: &StainBasis) -> RgbImage {
    let scale = [0, 1].map(|k| tgt.max_concentration[k] / src.max_concentration[k]);
    RgbImage::from_clamped(
        img.height(),
        img.width(),
        conc.iter().map(|c| od_pixel_to_rgb(tgt.reconstruct([c[0] * scale[0], c[1] * scale[1]]))),
    )
}

/// Draws the reference index and the method for one batch, in that order.
pub fn sample_protocol<R: Rng + ?Sized>(rng: &mut R, batch_size: usize) -> Result<(usize, NormalizationMethod)> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let ref_index = rng.random_range(0..batch_size);
    let method = NormalizationMethod::ALL[rng.random_range(0..NormalizationMethod::ALL.len())];
    Ok((ref_index, method))
}

/// True when `img` has any pixel above the foreground threshold.
pub fn has_foreground(img: &RgbImage, beta: f64) -> bool {
    foreground_mask(&rgb_to_od(img, LOG_EPSILON), beta).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::{od_to_rgb, OdImage};

    fn textured(seed: u64, side: usize) -> RgbImage {
        let truth = StainBasis::canonical();
        let mut rng = crate::rng::seeded(seed);
        let data: Vec<f64> = (0..side * side)
            .flat_map(|i| {
                let c = match i % 4 {
                    0 => [rng.random_range(0.2..1.0), 0.0],
                    1 => [0.0, rng.random_range(0.2..1.0)],
                    _ => [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                };
                truth.reconstruct(c)
            })
            .collect();
        od_to_rgb(&OdImage::new(side, side, data).unwrap())
    }

    #[test]
    fn reinhard_self_target_is_identity() {
        let n = Normalizer::default();
        let x = textured(1, 24);
        let t = n.fit_target(&x, NormalizationMethod::Reinhard).unwrap();
        let y = n.normalize(&x, &t).unwrap();
        assert!(y.warning.is_none());
        assert!(x.mean_abs_diff(&y.image) < 1.0 / 255.0);
        let z = n.normalize(&y.image, &t).unwrap();
        assert!(z.image.mean_abs_diff(&y.image) < 2.0 / 255.0);
    }

    #[test]
    fn reinhard_constant_image_uses_sigma_floor() {
        let flat = RgbImage::filled(4, 4, [0.4, 0.5, 0.6]).unwrap();
        match Normalizer::default().fit_target(&flat, NormalizationMethod::Reinhard).unwrap() {
            NormalizationTarget::Reinhard(s) => assert!(s.std.iter().all(|&v| v == SIGMA_FLOOR)),
            other => panic!("unexpected target {other:?}"),
        }
    }

    #[test]
    fn lab_statistics_transfer_exactly() {
        let a = rgb_to_lab(&textured(2, 16));
        let b = rgb_to_lab(&textured(3, 16));
        let (sa, sb) = (LabStats::of(&a), LabStats::of(&b));
        let mapped = LabStats::of(&match_lab_statistics(&a, &sa, &sb));
        for c in 0..3 {
            assert!((mapped.mean[c] - sb.mean[c]).abs() < 1e-3);
            assert!((mapped.std[c] - sb.std[c]).abs() < 1e-3);
        }
    }

    #[test]
    fn macenko_white_target_fails_and_white_source_passes_through() {
        let n = Normalizer::default();
        let white = RgbImage::filled(6, 6, [1.0; 3]).unwrap();
        assert_eq!(n.fit_target(&white, NormalizationMethod::Macenko), Err(Error::EmptyForeground));
        let t = n.fit_target(&textured(4, 16), NormalizationMethod::Macenko).unwrap();
        let out = n.normalize(&white, &t).unwrap();
        assert_eq!(out.warning, Some(NormalizeWarning::EmptyForeground));
        assert_eq!(out.image, white);
    }

    #[test]
    fn stain_methods_self_target_identity() {
        let n = Normalizer::default();
        let x = textured(5, 32);
        for method in [NormalizationMethod::Macenko, NormalizationMethod::Vahadane] {
            let t = n.fit_target(&x, method).unwrap();
            let y = n.normalize(&x, &t).unwrap().image;
            assert!(x.mean_abs_diff(&y) < 2.0 / 255.0, "{method}: {}", x.mean_abs_diff(&y));
        }
    }

    #[test]
    fn batch_of_one_is_self_normalized() {
        let n = Normalizer::default();
        let x = textured(6, 16);
        for method in NormalizationMethod::ALL {
            let out = n.normalize_batch(std::slice::from_ref(&x), 0, method, Execution::Serial).unwrap();
            assert_eq!(out.len(), 1);
            assert!(x.mean_abs_diff(&out[0].as_ref().unwrap().image) < 2.0 / 255.0);
        }
    }

    #[test]
    fn serial_and_parallel_batches_agree_bitwise() {
        let n = Normalizer::default();
        let batch: Vec<RgbImage> = (0..5).map(|s| textured(10 + s, 16)).collect();
        for method in NormalizationMethod::ALL {
            let a = n.normalize_batch(&batch, 2, method, Execution::Serial).unwrap();
            let b = n.normalize_batch(&batch, 2, method, Execution::Parallel).unwrap();
            assert_eq!(a.len(), batch.len());
            assert_eq!(a, b);
        }
        assert!(n.normalize_batch(&batch, 5, NormalizationMethod::Reinhard, Execution::Serial).is_err());
    }

    #[test]
    fn protocol_is_uniform_and_deterministic() {
        let mut rng = crate::rng::seeded(2024);
        let mut counts = [0usize; 3];
        let draws = 30_000;
        for _ in 0..draws {
            let (r, m) = sample_protocol(&mut rng, 20).unwrap();
            assert!(r < 20);
            counts[NormalizationMethod::ALL.iter().position(|x| *x == m).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((0.323..=0.343).contains(&f), "frequency {f}");
        }
        let mut a = crate::rng::seeded(1);
        let mut b = crate::rng::seeded(1);
        for _ in 0..100 {
            assert_eq!(sample_protocol(&mut a, 7).unwrap(), sample_protocol(&mut b, 7).unwrap());
            assert_eq!(sample_protocol(&mut a, 1).unwrap().0, 0);
            sample_protocol(&mut b, 1).unwrap();
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in NormalizationMethod::ALL {
            assert_eq!(m.name().parse::<NormalizationMethod>().unwrap(), m);
        }
        assert!("gan".parse::<NormalizationMethod>().is_err());
    }
}
