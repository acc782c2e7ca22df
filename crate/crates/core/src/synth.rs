//! Beer–Lambert synthetic H&E patches with known stain bases, concentration
//! maps and class labels.
//!
//! Classes differ in the count and size of hematoxylin blobs, so they are
//! separable from spatial structure regardless of stain color. Each image
//! draws its own basis by rotating the canonical stain vectors; train and
//! held-out test sets use disjoint rotation bands.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::{od_to_rgb, OdImage, RgbImage};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};
use crate::stain::{dot3, ConcentrationMap, StainBasis};

/// Above this cosine the two jittered stain vectors are rejected as too
/// similar to be told apart.
const MAX_STAIN_COSINE: f64 = 0.9;
const TEXTURE_RANGE: (f64, f64) = (0.7, 1.3);
/// Side length the blob radii are expressed for.
const REFERENCE_SIDE: f64 = 32.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTexture {
    /// Inclusive range of hematoxylin blobs per image.
    pub blob_count: (usize, usize),
    /// Gaussian blob sigma in pixels at a 32-pixel side; scaled with the side.
    pub blob_radius: (f64, f64),
    pub amplitude_h: (f64, f64),
    pub amplitude_e: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub side: usize,
    pub classes: Vec<ClassTexture>,
    /// Maximum rotation of each canonical stain vector, in degrees.
    pub jitter_deg: f64,
    /// Exact fraction of pixels left as white background.
    pub background_frac: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    /// Four classes on a blob-count × blob-size grid.
    fn default() -> Self {
        let class = |blob_count, blob_radius| ClassTexture {
            blob_count,
            blob_radius,
            amplitude_h: (0.5, 0.9),
            amplitude_e: (0.3, 0.6),
        };
        Self {
            side: 32,
            classes: vec![
                class((3, 5), (2.0, 2.5)),
                class((3, 5), (3.5, 4.5)),
                class((10, 14), (2.0, 2.5)),
                class((10, 14), (3.5, 4.5)),
            ],
            jitter_deg: 5.0,
            background_frac: 0.15,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.side < 4 {
            return bad(format!("side must be at least 4, got {}", self.side));
        }
        if self.classes.len() < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes.len()));
        }
        if !(self.jitter_deg >= 0.0 && self.jitter_deg < 90.0) {
            return bad(format!("jitter_deg must lie in [0, 90), got {}", self.jitter_deg));
        }
        if !(0.0..1.0).contains(&self.background_frac) {
            return bad(format!("background_frac must lie in [0, 1), got {}", self.background_frac));
        }
        for (k, c) in self.classes.iter().enumerate() {
            let ranges = [c.blob_radius, c.amplitude_h, c.amplitude_e];
            if c.blob_count.0 > c.blob_count.1 || ranges.iter().any(|r| !(r.0 >= 0.0 && r.0 <= r.1)) {
                return bad(format!("class {k} has an empty or negative range"));
            }
            if c.blob_radius.0 <= 0.0 && c.blob_count.1 > 0 {
                return bad(format!("class {k} has non-positive blob radius"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: RgbImage,
    pub basis: StainBasis,
    pub concentrations: ConcentrationMap,
    /// Rotation actually applied to each stain, in degrees.
    pub jitter: [f64; 2],
}

/// Render one patch with stain rotations drawn from `[0, jitter_deg]`.
pub fn render(spec: &SynthSpec, label: usize, rng: &mut Rng) -> Result<Rendered> {
    render_in_band(spec, label, (0.0, spec.jitter_deg), rng)
}

/// Render one patch with stain rotations drawn uniformly from `band`
/// (degrees, `lo ≤ θ ≤ hi`).
pub fn render_in_band(spec: &SynthSpec, label: usize, band: (f64, f64), rng: &mut Rng) -> Result<Rendered> {
    spec.validate()?;
    let class = spec
        .classes
        .get(label)
        .ok_or_else(|| Error::InvalidArgument(format!("label {label} out of range for {} classes", spec.n_classes())))?;
    if !(band.0 >= 0.0 && band.0 <= band.1 && band.1 < 90.0) {
        return Err(Error::InvalidArgument(format!("invalid jitter band {band:?}")));
    }

    let (columns, jitter) = jittered_basis(band, rng);
    let side = spec.side;
    let n = side * side;
    let tissue = tissue_mask(side, spec.background_frac, rng);
    let texture = smooth_field(side, rng).map_range(TEXTURE_RANGE);

    let scale = side as f64 / REFERENCE_SIDE;
    let tissue_idx: Vec<usize> = (0..n).filter(|&i| tissue[i]).collect();
    let n_blobs = rng.random_range(class.blob_count.0..=class.blob_count.1);
    let blobs: Vec<(f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let at = tissue_idx[rng.random_range(0..tissue_idx.len())];
            let sigma = uniform(rng, class.blob_radius) * scale;
            ((at / side) as f64, (at % side) as f64, sigma)
        })
        .collect();
    let a_h = uniform(rng, class.amplitude_h);
    let a_e = uniform(rng, class.amplitude_e);

    let data: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            if !tissue[i] {
                return [0.0, 0.0];
            }
            let (y, x) = ((i / side) as f64, (i % side) as f64);
            let bumps: f64 = blobs
                .iter()
                .map(|&(cy, cx, s)| (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            [a_h * bumps, a_e * texture.values[i] * (1.0 - bumps.min(1.0))]
        })
        .collect();

    let concentrations = ConcentrationMap { data };
    let provisional = StainBasis::new(columns, [1.0, 1.0])?;
    let od: Vec<f64> = concentrations.data.iter().flat_map(|&c| provisional.reconstruct(c)).collect();
    let image = od_to_rgb(&OdImage::new(side, side, od)?);
    let max_concentration = concentrations.robust_max(&tissue_idx);
    Ok(Rendered { image, basis: StainBasis { max_concentration, ..provisional }, concentrations, jitter })
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Rotate each canonical stain vector by an angle drawn from `band` about a
/// random perpendicular axis. Draws that leave the non-negative octant,
/// swap the stain ordering or make the stains nearly parallel are redrawn.
fn jittered_basis(band: (f64, f64), rng: &mut Rng) -> ([[f64; 3]; 2], [f64; 2]) {
    let canonical = StainBasis::canonical();
    loop {
        let mut angles = [0.0; 2];
        let mut cols = [canonical.hematoxylin(), canonical.eosin()];
        for (col, angle) in cols.iter_mut().zip(&mut angles) {
            *angle = uniform(rng, band);
            *col = rotate_away(*col, angle.to_radians(), rng);
        }
        let ok = cols.iter().all(|c| c.iter().all(|&v| v >= 0.0))
            && !StainBasis::needs_swap(&cols)
            && dot3(cols[0], cols[1]) < MAX_STAIN_COSINE;
        if ok {
            return (cols, angles);
        }
    }
}

/// `v` is unit; the result is unit and at angle `theta` from `v`.
fn rotate_away(v: [f64; 3], theta: f64, rng: &mut Rng) -> [f64; 3] {
    loop {
        let r: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let along = dot3(r, v);
        let perp: [f64; 3] = std::array::from_fn(|i| r[i] - along * v[i]);
        let norm = dot3(perp, perp).sqrt();
        if norm > 1e-3 {
            return std::array::from_fn(|i| v[i] * theta.cos() + perp[i] / norm * theta.sin());
        }
    }
}

struct Field {
    values: Vec<f64>,
}

impl Field {
    fn map_range(self, (lo, hi): (f64, f64)) -> Field {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        let values = self
            .values
            .iter()
            .map(|v| if span > 0.0 { lo + (hi - lo) * (v - min) / span } else { 0.5 * (lo + hi) })
            .collect();
        Field { values }
    }
}

/// Low-frequency random field: a few broad Gaussian bumps.
fn smooth_field(side: usize, rng: &mut Rng) -> Field {
    let s = side as f64 / 3.0;
    let bumps: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64), rng.random_range(0.0..1.0)))
        .collect();
    let values = (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f64, (i % side) as f64);
            bumps.iter().map(|&(cy, cx, w)| w * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp()).sum()
        })
        .collect();
    Field { values }
}

/// Exactly `floor(frac · n)` pixels, those with the lowest field values,
/// become background.
fn tissue_mask(side: usize, frac: f64, rng: &mut Rng) -> Vec<bool> {
    let field = smooth_field(side, rng);
    let n = side * side;
    let n_bg = (frac * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field.values[a].total_cmp(&field.values[b]).then(a.cmp(&b)));
    let mut tissue = vec![true; n];
    for &i in &order[..n_bg] {
        tissue[i] = false;
    }
    tissue
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub rendered: Rendered,
    pub label: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
    /// Jitter band of the test set; its lower end is the train band's upper end, exclusive.
    pub test_band: (f64, f64),
}

/// Balanced train and test sets, `per_class` images per class each. Test
/// images draw stain rotations from `(spec.jitter_deg, heldout_jitter]`.
pub fn make_dataset(spec: &SynthSpec, per_class: usize, heldout_jitter: f64) -> Result<SynthDataset> {
    spec.validate()?;
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be at least 1".into()));
    }
    if !(heldout_jitter > spec.jitter_deg && heldout_jitter < 90.0) {
        return Err(Error::InvalidArgument(format!(
            "heldout_jitter must exceed jitter_deg ({}) and stay below 90, got {heldout_jitter}",
            spec.jitter_deg
        )));
    }
    // The open lower end keeps the two supports disjoint.
    let test_lo = next_up(spec.jitter_deg);
    let test_band = (test_lo, heldout_jitter);
    let k = spec.n_classes();
    let build = |split: u64, band: (f64, f64)| -> Result<Vec<SynthSample>> {
        (0..per_class * k)
            .into_par_iter()
            .map(|i| {
                let label = i % k;
                let seed = derive_seed(derive_seed(spec.seed, split), i as u64);
                let rendered = render_in_band(spec, label, band, &mut seeded(seed))?;
                Ok(SynthSample { rendered, label, seed })
            })
            .collect()
    };
    Ok(SynthDataset { train: build(0, (0.0, spec.jitter_deg))?, test: build(1, test_band)?, test_band })
}

fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::{rgb_to_od, LOG_EPSILON};
    use crate::stain::{estimate_macenko, MacenkoParams};

    #[test]
    fn zero_concentration_is_white() {
        let mut spec = SynthSpec::default();
        for c in &mut spec.classes {
            c.blob_count = (0, 0);
            c.amplitude_e = (0.0, 0.0);
        }
        let r = render(&spec, 0, &mut seeded(1)).unwrap();
        assert!(r.image.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn same_seed_same_output() {
        let spec = SynthSpec::default();
        let a = render(&spec, 2, &mut seeded(9)).unwrap();
        let b = render(&spec, 2, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, render(&spec, 2, &mut seeded(10)).unwrap());
    }

    #[test]
    fn od_matches_basis_times_concentration() {
        let spec = SynthSpec::default();
        for seed in 0..10 {
            let r = render(&spec, seed as usize % 4, &mut seeded(seed)).unwrap();
            let od = rgb_to_od(&r.image, LOG_EPSILON);
            for ((p, rgb), c) in od.pixels().zip(r.image.pixels()).zip(&r.concentrations.data) {
                let expect = r.basis.reconstruct(*c);
                for k in 0..3 {
                    if rgb[k] > LOG_EPSILON {
                        assert!((p[k] - expect[k]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn background_fraction_is_exact() {
        let spec = SynthSpec { background_frac: 0.25, ..Default::default() };
        let r = render(&spec, 1, &mut seeded(3)).unwrap();
        let white = r.concentrations.data.iter().filter(|c| c[0] == 0.0 && c[1] == 0.0).count();
        assert_eq!(white, 256);
    }

    #[test]
    fn jitter_band_respected_and_basis_valid() {
        let spec = SynthSpec::default();
        let mut rng = seeded(4);
        for _ in 0..50 {
            let r = render_in_band(&spec, 0, (10.0, 20.0), &mut rng).unwrap();
            let canonical = StainBasis::canonical();
            for (cos, j) in r.basis.column_cosines(&canonical).iter().zip(r.jitter) {
                assert!((10.0..=20.0).contains(&j));
                assert!((cos.acos().to_degrees() - j).abs() < 1e-6);
            }
            r.basis.validate().unwrap();
        }
    }

    #[test]
    fn macenko_recovers_jittered_basis() {
        let spec = SynthSpec { jitter_deg: 10.0, ..Default::default() };
        for seed in 0..20 {
            let r = render(&spec, seed as usize % 4, &mut seeded(seed)).unwrap();
            let est = estimate_macenko(&r.image, &MacenkoParams::default()).unwrap();
            for c in est.column_cosines(&r.basis) {
                assert!(c >= 0.99, "seed {seed}: cosine {c}");
            }
        }
    }

    #[test]
    fn dataset_counts_and_disjoint_bands() {
        let spec = SynthSpec::default();
        let ds = make_dataset(&spec, 10, 15.0).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (40, 40));
        for k in 0..4 {
            assert_eq!(ds.train.iter().filter(|s| s.label == k).count(), 10);
            assert_eq!(ds.test.iter().filter(|s| s.label == k).count(), 10);
        }
        assert!(ds.train.iter().flat_map(|s| s.rendered.jitter).all(|j| j <= spec.jitter_deg));
        assert!(ds.test.iter().flat_map(|s| s.rendered.jitter).all(|j| j > spec.jitter_deg && j <= 15.0));
        assert!(ds.test_band.0 > spec.jitter_deg);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(make_dataset(&SynthSpec::default(), 0, 15.0).is_err());
        assert!(make_dataset(&SynthSpec::default(), 1, 5.0).is_err());
        let one_class = SynthSpec { classes: SynthSpec::default().classes[..1].to_vec(), ..Default::default() };
        assert!(one_class.validate().is_err());
        assert!(render(&SynthSpec::default(), 4, &mut seeded(0)).is_err());
    }
}
