//! Positive/negative pairing over a raw batch and its stain-normalized
//! variant, the temperature-scaled embedding loss, cross entropy, and their
//! weighted sum, all with analytic gradients.
//!
//! Embeddings are indexed in a combined `2B` array: raw sample `j` is `j`,
//! its normalized variant is `B + j`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Default temperature.
pub const DEFAULT_TAU: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSets {
    pub batch_size: usize,
    /// `(anchor, variant)` pairs, always `(i, i)`.
    pub positives: Vec<(usize, usize)>,
    /// Negatives of each anchor as indices into the combined `2B` array.
    pub negatives: Vec<Vec<usize>>,
}

impl PairSets {
    pub fn total_negatives(&self) -> usize {
        self.negatives.iter().map(Vec::len).sum()
    }
}

/// Every raw `x_j` and every variant `x̄_j` with `j ≠ i` is a negative of
/// anchor `i`; `(x_i, x̄_i)` is its only positive.
pub fn build_pairs(batch_size: usize) -> Result<PairSets> {
    if batch_size < 2 {
        return Err(Error::BatchTooSmall(batch_size));
    }
    let positives = (0..batch_size).map(|i| (i, i)).collect();
    let negatives = (0..batch_size)
        .map(|i| {
            let raw = (0..batch_size).filter(move |&j| j != i);
            let var = (0..batch_size).filter(move |&j| j != i).map(move |j| batch_size + j);
            raw.chain(var).collect()
        })
        .collect();
    Ok(PairSets { batch_size, positives, negatives })
}

/// Pooled embeddings of the raw batch and of its normalized variant.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    /// `B × M`.
    pub raw: DMatrix<f64>,
    /// `B × M`.
    pub variant: DMatrix<f64>,
}

impl EmbeddingSet {
    pub fn new(raw: DMatrix<f64>, variant: DMatrix<f64>) -> Result<Self> {
        if raw.shape() != variant.shape() {
            return Err(Error::ShapeMismatch(format!(
                "raw embeddings {:?} vs variant embeddings {:?}",
                raw.shape(),
                variant.shape()
            )));
        }
        Ok(Self { raw, variant })
    }

    pub fn batch_size(&self) -> usize {
        self.raw.nrows()
    }

    fn row(&self, combined: usize) -> Vec<f64> {
        let b = self.batch_size();
        if combined < b {
            self.raw.row(combined).iter().copied().collect()
        } else {
            self.variant.row(combined - b).iter().copied().collect()
        }
    }
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if !(nu > 0.0 && nv > 0.0) {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Gradients of `sim(u, v)` with respect to `u` and `v`.
fn cosine_sim_grad(u: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (nu, nv) = (norm(u), norm(v));
    let s = dot(u, v) / (nu * nv);
    let du = u.iter().zip(v).map(|(a, b)| b / (nu * nv) - s * a / (nu * nu)).collect();
    let dv = u.iter().zip(v).map(|(a, b)| a / (nu * nv) - s * b / (nv * nv)).collect();
    (s, du, dv)
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Numerically stable `ln Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveTerm {
    pub value: f64,
    pub grad_raw: DMatrix<f64>,
    pub grad_variant: DMatrix<f64>,
}

/// `ℓ_c = −Σ_i log[exp(sim(x_i, x̄_i)/τ) / Σ_{n ∈ N(i)} exp(sim(x_i, n)/τ)]`.
///
/// The denominator runs over the anchor's negatives only, so the loss is not
/// bounded below by zero.
pub fn stain_invariance_loss(emb: &EmbeddingSet, pairs: &PairSets, tau: f64) -> Result<ContrastiveTerm> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let b = emb.batch_size();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if pairs.batch_size != b {
        return Err(Error::ShapeMismatch(format!("pair sets for B={} used with B={b}", pairs.batch_size)));
    }
    let m = emb.raw.ncols();
    let rows: Vec<Vec<f64>> = (0..2 * b).map(|k| emb.row(k)).collect();
    if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("embeddings contain non-finite values".into()));
    }
    if rows.iter().any(|r| !(norm(r) > 0.0)) {
        return Err(Error::ZeroVector);
    }

    let mut grads = vec![vec![0.0; m]; 2 * b];
    let mut value = 0.0;
    for (&(i, v), negs) in pairs.positives.iter().zip(&pairs.negatives) {
        let anchor = &rows[i];
        let (s_pos, da, dp) = cosine_sim_grad(anchor, &rows[b + v]);
        let neg: Vec<(f64, Vec<f64>, Vec<f64>)> = negs.iter().map(|&n| cosine_sim_grad(anchor, &rows[n])).collect();
        let logits: Vec<f64> = neg.iter().map(|(s, _, _)| s / tau).collect();
        let lse = log_sum_exp(&logits);
        value += -s_pos / tau + lse;

        // d/ds_pos = −1/τ, d/ds_n = softmax_n / τ
        for k in 0..m {
            grads[i][k] -= da[k] / tau;
            grads[b + v][k] -= dp[k] / tau;
        }
        for ((&n, (_, da_n, dn)), z) in negs.iter().zip(&neg).zip(&logits) {
            let w = (z - lse).exp() / tau;
            for k in 0..m {
                grads[i][k] += w * da_n[k];
                grads[n][k] += w * dn[k];
            }
        }
    }

    let grad_raw = DMatrix::from_fn(b, m, |r, c| grads[r][c]);
    let grad_variant = DMatrix::from_fn(b, m, |r, c| grads[b + r][c]);
    Ok(ContrastiveTerm { value, grad_raw, grad_variant })
}

/// `−log softmax(logits)[label]` and its gradient `softmax − onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", logits.len())));
    }
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", logits.len())));
    }
    let lse = log_sum_exp(logits);
    let value = lse - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((value, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedTerm {
    pub value: f64,
    pub grad_raw: DMatrix<f64>,
    pub grad_variant: DMatrix<f64>,
}

/// `ℓ_e = (Σ CE(raw_i) + Σ CE(variant_i)) / 2B`.
pub fn supervised_loss(
    logits_raw: &DMatrix<f64>,
    logits_variant: &DMatrix<f64>,
    labels: &[usize],
) -> Result<SupervisedTerm> {
    let b = labels.len();
    if logits_raw.shape() != logits_variant.shape() || logits_raw.nrows() != b {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} / {:?} for {b} labels",
            logits_raw.shape(),
            logits_variant.shape()
        )));
    }
    if b == 0 {
        return Err(Error::EmptyDataset);
    }
    let k = logits_raw.ncols();
    let scale = 1.0 / (2.0 * b as f64);
    let mut grad_raw = DMatrix::zeros(b, k);
    let mut grad_variant = DMatrix::zeros(b, k);
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for (logits, grad) in [(logits_raw, &mut grad_raw), (logits_variant, &mut grad_variant)] {
            let row: Vec<f64> = logits.row(i).iter().copied().collect();
            let (ce, g) = cross_entropy(&row, y)?;
            value += ce;
            for (c, gv) in g.iter().enumerate() {
                grad[(i, c)] = gv * scale;
            }
        }
    }
    Ok(SupervisedTerm { value: value * scale, grad_raw, grad_variant })
}

/// Loss terms and gradients of `ℓ = w_c·ℓ_c + w_e·ℓ_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_c: f64,
    pub l_e: f64,
    pub total: f64,
    pub grad_raw: DMatrix<f64>,
    pub grad_variant: DMatrix<f64>,
    pub grad_logits_raw: DMatrix<f64>,
    pub grad_logits_variant: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub tau: f64,
    pub w_c: f64,
    pub w_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, w_c: 1.0, w_e: 1.0 }
    }
}

pub fn total_loss(
    emb: &EmbeddingSet,
    pairs: &PairSets,
    logits_raw: &DMatrix<f64>,
    logits_variant: &DMatrix<f64>,
    labels: &[usize],
    weights: LossWeights,
) -> Result<LossReport> {
    let c = stain_invariance_loss(emb, pairs, weights.tau)?;
    let e = supervised_loss(logits_raw, logits_variant, labels)?;
    Ok(LossReport {
        l_c: c.value,
        l_e: e.value,
        total: weights.w_c * c.value + weights.w_e * e.value,
        grad_raw: c.grad_raw * weights.w_c,
        grad_variant: c.grad_variant * weights.w_c,
        grad_logits_raw: e.grad_raw * weights.w_e,
        grad_logits_variant: e.grad_variant * weights.w_e,
    })
}
