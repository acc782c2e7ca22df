use rand::seq::index;

use super::macenko::macenko_directions;
use super::{concentrations_for, foreground_mask, StainBasis};
use crate::colorspace::{rgb_to_od, RgbImage, LOG_EPSILON};
use crate::error::{Error, Result};
use crate::stain::ConcentrationMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VahadaneParams {
    /// ℓ1 weight on the concentrations.
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop when the relative objective decrease falls below this.
    pub tol: f64,
    /// Foreground OD-norm threshold.
    pub beta: f64,
    /// Angular percentile used by the Macenko warm start.
    pub alpha: f64,
    /// Cap on the number of foreground pixels used for fitting.
    pub max_pixels: usize,
    /// Seed of the foreground subsample.
    pub seed: u64,
}

impl Default for VahadaneParams {
    fn default() -> Self {
        Self { lambda: 0.1, max_iters: 200, tol: 1e-5, beta: 0.15, alpha: 1.0, max_pixels: 10_000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VahadaneFit {
    pub basis: StainBasis,
    /// Concentrations for every pixel of the input image.
    pub concentrations: ConcentrationMap,
    pub objective_trace: Vec<f64>,
}

/// Result of the raw factorization `V ≈ W H`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnmfFit {
    /// Unit-norm columns of `W`.
    pub columns: [[f64; 3]; 2],
    /// `H`, one `[h0, h1]` per pixel.
    pub coefficients: Vec<[f64; 2]>,
    /// Objective after initialization and after every iteration.
    pub objective_trace: Vec<f64>,
    /// Iterations whose W step was rejected because renormalization
    /// would have raised the objective.
    pub rejected_w_steps: usize,
}

/// Sparse-NMF stain estimation, warm-started from the Macenko directions.
pub fn estimate_vahadane(img: &RgbImage, params: &VahadaneParams) -> Result<VahadaneFit> {
    if !(params.lambda >= 0.0) || params.max_iters == 0 || params.max_pixels == 0 {
        return Err(Error::InvalidArgument(format!("invalid SNMF parameters {params:?}")));
    }
    let od = rgb_to_od(img, LOG_EPSILON);
    let fg = foreground_mask(&od, params.beta)?;
    let pixels: Vec<[f64; 3]> = od.pixels().collect();

    let sample: Vec<[f64; 3]> = if fg.len() > params.max_pixels {
        let mut rng = crate::rng::seeded(params.seed);
        let mut picked = index::sample(&mut rng, fg.len(), params.max_pixels).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| pixels[fg[i]]).collect()
    } else {
        fg.iter().map(|&i| pixels[i]).collect()
    };

    let init = match macenko_directions(&sample, params.alpha) {
        Ok(cols) => StainBasis::new(cols, [1.0, 1.0])?.od_basis,
        Err(Error::DegenerateRank { .. }) => StainBasis::canonical().od_basis,
        Err(e) => return Err(e),
    };

    let fit = snmf_fit(&sample, init, params.lambda, params.max_iters, params.tol)?;
    let provisional = StainBasis::new(fit.columns, [1.0, 1.0])?;
    let concentrations = concentrations_for(&pixels, &provisional);
    let maxc = concentrations.robust_max(&fg);
    let basis = StainBasis { max_concentration: maxc, ..provisional };
    Ok(VahadaneFit { basis, concentrations, objective_trace: fit.objective_trace })
}

const W_FLOOR: f64 = 1e-6;
const H_FLOOR: f64 = 1e-9;

/// Alternating multiplicative updates for
/// `½‖V − WH‖²_F + λ‖H‖₁` with `W, H ≥ 0` and unit-norm `W` columns.
///
/// Each iteration takes an H step (monotone for fixed unit-norm `W`), then a
/// W step followed by column renormalization with compensating row scaling
/// of `H`. Renormalization rescales the ℓ1 term, so the W step is kept only
/// when the objective does not increase.
pub fn snmf_fit(
    v: &[[f64; 3]],
    init_columns: [[f64; 3]; 2],
    lambda: f64,
    max_iters: usize,
    tol: f64,
) -> Result<SnmfFit> {
    let mut w = init_columns.map(|c| {
        let c = c.map(|x| x.max(W_FLOOR));
        let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        c.map(|x| x / n)
    });
    let start = StainBasis { od_basis: w, max_concentration: [1.0, 1.0] };
    let mut h: Vec<[f64; 2]> =
        concentrations_for(v, &start).data.into_iter().map(|c| c.map(|x| x.max(H_FLOOR))).collect();

    let mut obj = objective(v, &w, &h, lambda);
    if !obj.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: 0 });
    }
    let mut trace = vec![obj];
    let mut rejected = 0;

    for iter in 1..=max_iters {
        h_step(v, &w, &mut h, lambda);
        let obj_h = objective(v, &w, &h, lambda);

        let (w_new, h_new) = w_step(v, &w, &h);
        let obj_w = objective(v, &w_new, &h_new, lambda);

        let next = if obj_w.is_finite() && obj_w <= obj_h {
            w = w_new;
            h = h_new;
            obj_w
        } else {
            rejected += 1;
            obj_h
        };
        if !next.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: iter });
        }
        trace.push(next);
        let decrease = (obj - next) / obj.abs().max(f64::MIN_POSITIVE);
        obj = next;
        if decrease < tol {
            break;
        }
    }

    Ok(SnmfFit { columns: w, coefficients: h, objective_trace: trace, rejected_w_steps: rejected })
}

fn objective(v: &[[f64; 3]], w: &[[f64; 3]; 2], h: &[[f64; 2]], lambda: f64) -> f64 {
    let mut fit = 0.0;
    let mut l1 = 0.0;
    for (p, c) in v.iter().zip(h) {
        for i in 0..3 {
            let r = p[i] - w[0][i] * c[0] - w[1][i] * c[1];
            fit += r * r;
        }
        l1 += c[0] + c[1];
    }
    0.5 * fit + lambda * l1
}

fn gram(w: &[[f64; 3]; 2]) -> [[f64; 2]; 2] {
    let d = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    [[d(w[0], w[0]), d(w[0], w[1])], [d(w[1], w[0]), d(w[1], w[1])]]
}

/// `H ← H ⊙ WᵀV / (WᵀWH + λ)`.
fn h_step(v: &[[f64; 3]], w: &[[f64; 3]; 2], h: &mut [[f64; 2]], lambda: f64) {
    let g = gram(w);
    for (p, c) in v.iter().zip(h.iter_mut()) {
        let wtv = [0, 1].map(|k| w[k][0] * p[0] + w[k][1] * p[1] + w[k][2] * p[2]);
        let wtwh = [g[0][0] * c[0] + g[0][1] * c[1], g[1][0] * c[0] + g[1][1] * c[1]];
        for k in 0..2 {
            let denom = wtwh[k] + lambda;
            c[k] = if denom > 0.0 { c[k] * wtv[k].max(0.0) / denom } else { 0.0 };
        }
    }
}

/// `W ← W ⊙ VHᵀ / (WHHᵀ)`, then unit columns with `H` rows rescaled.
fn w_step(v: &[[f64; 3]], w: &[[f64; 3]; 2], h: &[[f64; 2]]) -> ([[f64; 3]; 2], Vec<[f64; 2]>) {
    let mut vht = [[0.0; 3]; 2];
    let mut hht = [[0.0; 2]; 2];
    for (p, c) in v.iter().zip(h) {
        for k in 0..2 {
            for i in 0..3 {
                vht[k][i] += p[i] * c[k];
            }
            hht[k][0] += c[k] * c[0];
            hht[k][1] += c[k] * c[1];
        }
    }
    let mut w_new = *w;
    for k in 0..2 {
        for i in 0..3 {
            let whht = w[0][i] * hht[0][k] + w[1][i] * hht[1][k];
            if whht > 0.0 {
                w_new[k][i] = w[k][i] * vht[k][i] / whht;
            }
        }
    }
    let norms = w_new.map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt());
    if norms.iter().any(|n| !(n.is_finite() && *n > 0.0)) {
        return (*w, h.to_vec());
    }
    for k in 0..2 {
        w_new[k] = w_new[k].map(|x| x / norms[k]);
    }
    let h_new = h.iter().map(|c| [c[0] * norms[0], c[1] * norms[1]]).collect();
    (w_new, h_new)
}
