//! Two-stain optical density bases and their estimation.

mod macenko;
mod nnls;
mod vahadane;

pub use macenko::{estimate_macenko, MacenkoParams};
pub use nnls::{concentrations_for, nnls2};
pub use vahadane::{estimate_vahadane, snmf_fit, SnmfFit, VahadaneFit, VahadaneParams};

use serde::{Deserialize, Serialize};

use crate::colorspace::OdImage;
use crate::error::{Error, Result};

/// Reference hematoxylin OD colour (before normalization).
pub const CANONICAL_HEMATOXYLIN: [f64; 3] = [0.65, 0.70, 0.29];
/// Reference eosin OD colour (before normalization).
pub const CANONICAL_EOSIN: [f64; 3] = [0.07, 0.99, 0.11];

/// Floor applied to robust-max concentrations.
pub const MIN_MAX_CONCENTRATION: f64 = 1e-6;

const MAX_CONCENTRATION_PERCENTILE: f64 = 99.0;

/// A 3×2 non-negative stain matrix with unit columns, hematoxylin first,
/// plus per-stain 99th-percentile concentrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainBasis {
    /// Columns of the stain matrix, `[hematoxylin, eosin]`, each `[r, g, b]`.
    pub od_basis: [[f64; 3]; 2],
    pub max_concentration: [f64; 2],
}

impl StainBasis {
    /// Normalizes, clamps and orders two stain vectors. `max_concentration`
    /// is given in the same order as `columns` and is reordered with them.
    pub fn new(columns: [[f64; 3]; 2], max_concentration: [f64; 2]) -> Result<Self> {
        let mut cols = [[0.0; 3]; 2];
        for (k, col) in columns.iter().enumerate() {
            cols[k] = unit_non_negative(*col)?;
        }
        let mut maxc = max_concentration.map(|c| c.max(MIN_MAX_CONCENTRATION));
        if cols[1][2] > cols[0][2] {
            cols.swap(0, 1);
            maxc.swap(0, 1);
        }
        Ok(Self { od_basis: cols, max_concentration: maxc })
    }

    /// The canonical H&E reference basis with unit concentration scales.
    pub fn canonical() -> Self {
        Self::new([CANONICAL_HEMATOXYLIN, CANONICAL_EOSIN], [1.0, 1.0]).expect("canonical basis is valid")
    }

    /// True when hematoxylin/eosin had to be swapped to satisfy the ordering.
    pub fn needs_swap(columns: &[[f64; 3]; 2]) -> bool {
        columns[1][2] > columns[0][2]
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.od_basis[0]
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.od_basis[1]
    }

    /// `W · c` for one pixel.
    pub fn reconstruct(&self, c: [f64; 2]) -> [f64; 3] {
        let [h, e] = self.od_basis;
        [0, 1, 2].map(|i| h[i] * c[0] + e[i] * c[1])
    }

    /// Cosine similarity of matching columns against another basis.
    pub fn column_cosines(&self, other: &StainBasis) -> [f64; 2] {
        [0, 1].map(|k| dot3(self.od_basis[k], other.od_basis[k]))
    }

    pub fn validate(&self) -> Result<()> {
        for col in &self.od_basis {
            let n = dot3(*col, *col).sqrt();
            if col.iter().any(|v| *v < 0.0 || !v.is_finite()) || (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("stain column {col:?} is not a unit non-negative vector")));
            }
        }
        if self.max_concentration.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::InvalidArgument("max_concentration entries must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stain basis serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let basis: StainBasis =
            serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("stain basis JSON: {e}")))?;
        basis.validate()?;
        Ok(basis)
    }
}

/// Per-pixel non-negative stain concentrations, `[hematoxylin, eosin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationMap {
    pub data: Vec<[f64; 2]>,
}

impl ConcentrationMap {
    pub fn n_pixels(&self) -> usize {
        self.data.len()
    }

    /// Values of one stain across all pixels.
    pub fn channel(&self, stain: usize) -> Vec<f64> {
        self.data.iter().map(|c| c[stain]).collect()
    }

    /// 99th percentile of each stain over the given pixel indices.
    pub fn robust_max(&self, pixels: &[usize]) -> [f64; 2] {
        [0, 1].map(|k| {
            let vals: Vec<f64> = pixels.iter().map(|&i| self.data[i][k]).collect();
            percentile(&vals, MAX_CONCENTRATION_PERCENTILE).max(MIN_MAX_CONCENTRATION)
        })
    }
}

/// Indices of pixels whose OD norm exceeds `beta`.
pub fn foreground_mask(od: &OdImage, beta: f64) -> Result<Vec<usize>> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("OD threshold must be positive, got {beta}")));
    }
    let idx: Vec<usize> = od.norms().enumerate().filter(|(_, n)| *n > beta).map(|(i, _)| i).collect();
    if idx.is_empty() {
        return Err(Error::EmptyForeground);
    }
    Ok(idx)
}

/// Linear-interpolation percentile (the "linear" rule: rank `p/100 · (n-1)`).
/// Returns 0 for an empty slice.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * t
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit_non_negative(v: [f64; 3]) -> Result<[f64; 3]> {
    let v = if v.iter().sum::<f64>() < 0.0 { v.map(|x| -x) } else { v };
    let v = v.map(|x| x.max(0.0));
    let n = dot3(v, v).sqrt();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::InvalidArgument(format!("stain vector {v:?} has no non-negative direction")));
    }
    Ok(v.map(|x| x / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::{rgb_to_od, RgbImage, LOG_EPSILON};

    #[test]
    fn canonical_basis_is_hematoxylin_first() {
        let b = StainBasis::canonical();
        assert!(b.hematoxylin()[2] > b.eosin()[2]);
        for col in b.od_basis {
            assert!((dot3(col, col) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn new_swaps_columns_and_scales() {
        let b = StainBasis::new([CANONICAL_EOSIN, CANONICAL_HEMATOXYLIN], [2.0, 3.0]).unwrap();
        assert_eq!(b.max_concentration, [3.0, 2.0]);
        assert!(b.hematoxylin()[0] > 0.6);
    }

    #[test]
    fn json_field_names() {
        let json = StainBasis::canonical().to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["od_basis"].as_array().unwrap().len(), 2);
        assert_eq!(v["od_basis"][0].as_array().unwrap().len(), 3);
        assert_eq!(v["max_concentration"].as_array().unwrap().len(), 2);
        assert_eq!(StainBasis::from_json(&json).unwrap(), StainBasis::canonical());
        assert!(StainBasis::from_json(r#"{"od_basis": [[1,0,0],[0,1,0]], "max_concentration": [0, 1]}"#).is_err());
    }

    #[test]
    fn white_image_has_no_foreground() {
        let od = rgb_to_od(&RgbImage::filled(4, 4, [1.0; 3]).unwrap(), LOG_EPSILON);
        assert_eq!(foreground_mask(&od, 0.15), Err(Error::EmptyForeground));
    }

    #[test]
    fn single_dark_pixel_is_foreground() {
        let mut data = vec![0.0; 3 * 9];
        data[3 * 4..3 * 5].copy_from_slice(&[1.0, 1.0, 1.0]);
        let od = OdImage::new(3, 3, data).unwrap();
        assert_eq!(foreground_mask(&od, 0.15).unwrap(), vec![4]);
    }

    #[test]
    fn percentile_matches_linear_rule() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 5.0);
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert!((percentile(&v, 99.0) - 4.96).abs() < 1e-12);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }
}
