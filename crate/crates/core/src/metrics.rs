//! Robustness and latent-geometry metrics over a test set evaluated under
//! several stain variants.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::cosine_sim;

pub fn accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    if preds.len() != truth.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: truth.len() });
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Fraction of samples whose predicted label agrees across variants.
///
/// With `quorum = None` a sample counts only when every variant agrees; with
/// `Some(q)` it counts when its most frequent label appears at least `q` times.
pub fn cross_stain_consistency(preds: &[Vec<usize>], quorum: Option<usize>) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut consistent = 0usize;
    for (sample, labels) in preds.iter().enumerate() {
        if labels.len() < 2 {
            return Err(Error::TooFewVariants { sample, count: labels.len() });
        }
        let need = quorum.unwrap_or(labels.len());
        if mode_count(labels) >= need {
            consistent += 1;
        }
    }
    Ok(consistent as f64 / preds.len() as f64)
}

fn mode_count(labels: &[usize]) -> usize {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    sorted.chunk_by(|a, b| a == b).map(<[usize]>::len).max().unwrap_or(0)
}

/// Per sample: one raw embedding and `V` variant embeddings, all of length `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantEmbeddings {
    raw: Vec<Vec<f64>>,
    variants: Vec<Vec<Vec<f64>>>,
    dim: usize,
}

impl VariantEmbeddings {
    pub fn new(raw: Vec<Vec<f64>>, variants: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if raw.len() != variants.len() {
            return Err(Error::LengthMismatch { left: raw.len(), right: variants.len() });
        }
        let dim = raw[0].len();
        let n_var = variants[0].len();
        if n_var == 0 {
            return Err(Error::TooFewVariants { sample: 0, count: 0 });
        }
        for (s, (r, vs)) in raw.iter().zip(&variants).enumerate() {
            if vs.len() != n_var {
                return Err(Error::ShapeMismatch(format!("sample {s} has {} variants, expected {n_var}", vs.len())));
            }
            if r.len() != dim || vs.iter().any(|v| v.len() != dim) {
                return Err(Error::ShapeMismatch(format!("sample {s} has embeddings not of length {dim}")));
            }
        }
        Ok(Self { raw, variants, dim })
    }

    pub fn n_samples(&self) -> usize {
        self.raw.len()
    }

    pub fn n_variants(&self) -> usize {
        self.variants[0].len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn raw(&self, sample: usize) -> &[f64] {
        &self.raw[sample]
    }

    pub fn variant(&self, sample: usize, v: usize) -> &[f64] {
        &self.variants[sample][v]
    }

    /// Centroid of raw plus all variants.
    fn centroid(&self, sample: usize) -> Vec<f64> {
        let n = (self.n_variants() + 1) as f64;
        let mut c = self.raw[sample].clone();
        for v in &self.variants[sample] {
            for (a, b) in c.iter_mut().zip(v) {
                *a += b;
            }
        }
        c.iter_mut().for_each(|a| *a /= n);
        c
    }

    /// CSV with columns `sample_id,variant_id,m0..m{M-1}`; the raw embedding
    /// uses variant id `raw`.
    pub fn to_csv(&self, variant_names: &[String]) -> Result<String> {
        if variant_names.len() != self.n_variants() {
            return Err(Error::LengthMismatch { left: variant_names.len(), right: self.n_variants() });
        }
        let mut out = String::from("sample_id,variant_id");
        for m in 0..self.dim {
            write!(out, ",m{m}").unwrap();
        }
        out.push('\n');
        for s in 0..self.n_samples() {
            let rows = std::iter::once(("raw", &self.raw[s]))
                .chain(variant_names.iter().map(String::as_str).zip(&self.variants[s]));
            for (name, e) in rows {
                write!(out, "{s},{name}").unwrap();
                for x in e {
                    write!(out, ",{x}").unwrap();
                }
                out.push('\n');
            }
        }
        Ok(out)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean over samples of the mean distance from each member (raw and
/// variants) to the cluster centroid.
pub fn intra_cluster_distance(emb: &VariantEmbeddings) -> f64 {
    let per_sample = (0..emb.n_samples()).map(|s| {
        let c = emb.centroid(s);
        let members = std::iter::once(emb.raw(s)).chain(emb.variants[s].iter().map(Vec::as_slice));
        members.map(|m| euclidean(m, &c)).sum::<f64>() / (emb.n_variants() + 1) as f64
    });
    per_sample.sum::<f64>() / emb.n_samples() as f64
}

pub fn centroid_to_raw_distance(emb: &VariantEmbeddings) -> f64 {
    (0..emb.n_samples()).map(|s| euclidean(&emb.centroid(s), emb.raw(s))).sum::<f64>() / emb.n_samples() as f64
}

/// Mean cosine similarity between each raw embedding and its variants.
pub fn colinearity(emb: &VariantEmbeddings) -> Result<f64> {
    let mut total = 0.0;
    for s in 0..emb.n_samples() {
        for v in &emb.variants[s] {
            total += cosine_sim(emb.raw(s), v)?;
        }
    }
    Ok(total / (emb.n_samples() * emb.n_variants()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub consistency: f64,
    pub intra_cluster: f64,
    pub centroid_raw: f64,
    pub colinearity: f64,
}

impl MetricsReport {
    /// `accuracy` is the mean over variants of per-variant accuracy.
    /// `preds[v][s]` is the prediction for sample `s` under variant `v`.
    pub fn compute(preds: &[Vec<usize>], truth: &[usize], emb: &VariantEmbeddings) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut acc = 0.0;
        for p in preds {
            acc += accuracy(p, truth)?;
        }
        let per_sample: Vec<Vec<usize>> = (0..truth.len()).map(|s| preds.iter().map(|p| p[s]).collect()).collect();
        Ok(Self {
            accuracy: acc / preds.len() as f64,
            consistency: cross_stain_consistency(&per_sample, None)?,
            intra_cluster: intra_cluster_distance(emb),
            centroid_raw: centroid_to_raw_distance(emb),
            colinearity: colinearity(emb)?,
        })
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
