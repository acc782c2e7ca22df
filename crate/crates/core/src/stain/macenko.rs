use nalgebra::DMatrix;

use super::{concentrations_for, dot3, foreground_mask, percentile, StainBasis};
use crate::colorspace::{rgb_to_od, RgbImage, LOG_EPSILON};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacenkoParams {
    /// Angular percentile of the extreme stain directions, in `(0, 50)`.
    pub alpha: f64,
    /// Foreground OD-norm threshold.
    pub beta: f64,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.15 }
    }
}

/// Minimum `sigma2 / sigma1` before the OD plane is considered degenerate.
const RANK_TOLERANCE: f64 = 1e-8;

/// SVD-plane stain estimation: project foreground OD onto the top two right
/// singular vectors, take the `alpha` / `100 − alpha` angle percentiles as
/// the stain directions, then robust-max the NNLS concentrations.
pub fn estimate_macenko(img: &RgbImage, params: &MacenkoParams) -> Result<StainBasis> {
    if !(params.alpha > 0.0 && params.alpha < 50.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 50), got {}", params.alpha)));
    }
    let od = rgb_to_od(img, LOG_EPSILON);
    let fg = foreground_mask(&od, params.beta)?;
    let pixels: Vec<[f64; 3]> = od.pixels().collect();
    let fg_pixels: Vec<[f64; 3]> = fg.iter().map(|&i| pixels[i]).collect();

    let columns = macenko_directions(&fg_pixels, params.alpha)?;
    let provisional = StainBasis::new(columns, [1.0, 1.0])?;
    let conc = concentrations_for(&pixels, &provisional);
    let maxc = conc.robust_max(&fg);
    Ok(StainBasis { max_concentration: maxc, ..provisional })
}

/// The two extreme stain directions (unordered, unnormalized) of a set of OD
/// pixels.
pub(crate) fn macenko_directions(pixels: &[[f64; 3]], alpha: f64) -> Result<[[f64; 3]; 2]> {
    let od = DMatrix::from_fn(pixels.len(), 3, |r, c| pixels[r][c]);
    let svd = od.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("V^T requested");
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s1 = svd.singular_values[order[0]];
    let s2 = svd.singular_values[order[1]];
    if !(s1 > 0.0) || s2 < RANK_TOLERANCE * s1 {
        return Err(Error::DegenerateRank { ratio: if s1 > 0.0 { s2 / s1 } else { 0.0 } });
    }

    let row = |k: usize| [v_t[(k, 0)], v_t[(k, 1)], v_t[(k, 2)]];
    let mut v1 = row(order[0]);
    let mut v2 = row(order[1]);
    // Fix singular vector signs so the result does not depend on the solver.
    if v1.iter().sum::<f64>() < 0.0 {
        v1 = v1.map(|x| -x);
    }
    if v2[0] - v2[2] < 0.0 {
        v2 = v2.map(|x| -x);
    }

    let angles: Vec<f64> = pixels.iter().map(|p| dot3(*p, v2).atan2(dot3(*p, v1))).collect();
    let lo = percentile(&angles, alpha);
    let hi = percentile(&angles, 100.0 - alpha);
    let dir = |phi: f64| [0, 1, 2].map(|i| v1[i] * phi.cos() + v2[i] * phi.sin());
    Ok([dir(lo), dir(hi)])
}
