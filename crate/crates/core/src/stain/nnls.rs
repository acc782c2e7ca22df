use rayon::prelude::*;

use super::{dot3, ConcentrationMap, StainBasis};

/// Non-negative least squares for `min ‖od − W c‖²`, `c ≥ 0`, with `W`
/// given as two columns. Solves the unconstrained 2×2 system and, when it
/// leaves the feasible orthant, compares the single-stain faces.
pub fn nnls2(cols: &[[f64; 3]; 2], od: [f64; 3]) -> [f64; 2] {
    let g00 = dot3(cols[0], cols[0]);
    let g11 = dot3(cols[1], cols[1]);
    let g01 = dot3(cols[0], cols[1]);
    let b0 = dot3(cols[0], od);
    let b1 = dot3(cols[1], od);

    let det = g00 * g11 - g01 * g01;
    if det > 1e-12 * g00 * g11 {
        let c0 = (g11 * b0 - g01 * b1) / det;
        let c1 = (g00 * b1 - g01 * b0) / det;
        if c0 >= 0.0 && c1 >= 0.0 {
            return [c0, c1];
        }
    }

    // Objective up to the constant ‖od‖²: cᵀGc − 2bᵀc; on face k it is −b_k²/g_kk.
    let only_h = if g00 > 0.0 { b0.max(0.0) / g00 } else { 0.0 };
    let only_e = if g11 > 0.0 { b1.max(0.0) / g11 } else { 0.0 };
    let gain_h = only_h * b0.max(0.0);
    let gain_e = only_e * b1.max(0.0);
    if gain_h == 0.0 && gain_e == 0.0 {
        [0.0, 0.0]
    } else if gain_h >= gain_e {
        [only_h, 0.0]
    } else {
        [0.0, only_e]
    }
}

/// Per-pixel NNLS concentrations against a basis.
pub fn concentrations_for(od_pixels: &[[f64; 3]], basis: &StainBasis) -> ConcentrationMap {
    let cols = basis.od_basis;
    let data = od_pixels.par_iter().map(|&p| nnls2(&cols, p)).collect();
    ConcentrationMap { data }
}
