//! Variant-set planning, tile labelling and multi-variant evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::RgbImage;
use crate::encoder::{embed, Network};
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, centroid_to_raw_distance, colinearity, cross_stain_consistency, intra_cluster_distance, mean_std,
    MetricsReport, VariantEmbeddings,
};
use crate::normalization::NormalizationMethod;

pub const RAW_VARIANT: &str = "raw";
pub const DEFAULT_TILE_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantAssignment {
    /// File stem of the target image.
    pub target: String,
    pub method: NormalizationMethod,
}

impl VariantAssignment {
    pub fn dir_name(&self) -> String {
        format!("{}_{}", self.method.name(), self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantPlan {
    pub assignments: Vec<VariantAssignment>,
    pub include_raw: bool,
}

impl VariantPlan {
    /// Target `i` gets `NormalizationMethod::ALL[i % 3]`.
    pub fn round_robin(targets: impl IntoIterator<Item = String>, include_raw: bool) -> Self {
        let assignments = targets
            .into_iter()
            .enumerate()
            .map(|(i, target)| VariantAssignment { target, method: NormalizationMethod::ALL[i % 3] })
            .collect();
        Self { assignments, include_raw }
    }

    /// Output directory names, `raw` last.
    pub fn dir_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.assignments.iter().map(VariantAssignment::dir_name).collect();
        if self.include_raw {
            names.push(RAW_VARIANT.into());
        }
        names
    }

    pub fn method_counts(&self) -> [usize; 3] {
        NormalizationMethod::ALL.map(|m| self.assignments.iter().filter(|a| a.method == m).count())
    }
}

/// 1 iff the fraction of positive mask pixels is strictly above `threshold`.
pub fn tile_label(mask: &[bool], threshold: f64) -> Result<u8> {
    if mask.is_empty() {
        return Err(Error::InvalidArgument("mask is empty".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    let positive = mask.iter().filter(|&&m| m).count();
    Ok(u8::from(positive as f64 / mask.len() as f64 > threshold))
}

/// One test-set version: the same samples, in the same order, under one
/// stain treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSet {
    pub name: String,
    pub images: Vec<RgbImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAccuracy {
    pub variant: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentMetrics {
    pub intra_cluster: f64,
    pub centroid_raw: f64,
    pub colinearity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub per_variant: Vec<VariantAccuracy>,
    pub mean_accuracy: f64,
    /// Population standard deviation across variants.
    pub std_accuracy: f64,
    /// Needs at least two variants.
    pub consistency: Option<f64>,
    /// Needs a `raw` set and at least one other.
    pub latent: Option<LatentMetrics>,
}

impl EvalReport {
    /// The flat metrics record, when every component is available.
    pub fn metrics(&self) -> Option<MetricsReport> {
        let latent = self.latent?;
        Some(MetricsReport {
            accuracy: self.mean_accuracy,
            consistency: self.consistency?,
            intra_cluster: latent.intra_cluster,
            centroid_raw: latent.centroid_raw,
            colinearity: latent.colinearity,
        })
    }

    /// Columns `variant,accuracy,std`: one row per variant with an empty
    /// `std`, then a single `mean` row carrying the spread.
    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("variant,accuracy,std\n");
        for v in &self.per_variant {
            out.push_str(&format!("{},{},\n", v.variant, v.accuracy));
        }
        out.push_str(&format!("mean,{},{}\n", self.mean_accuracy, self.std_accuracy));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    /// `predictions[v][s]`.
    pub predictions: Vec<Vec<usize>>,
    /// Present when `raw` and at least one other set were given.
    pub embeddings: Option<VariantEmbeddings>,
    /// Names of the non-raw sets, in embedding order.
    pub embedding_variants: Vec<String>,
}

pub fn evaluate(net: &Network, sets: &[VariantSet], labels: &[usize]) -> Result<Evaluation> {
    if sets.is_empty() || labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(s) = sets.iter().find(|s| s.images.len() != labels.len()) {
        return Err(Error::LengthMismatch { left: s.images.len(), right: labels.len() });
    }
    let outputs: Vec<Vec<(Vec<f64>, usize)>> = sets.par_iter().map(|s| embed(net, &s.images)).collect::<Result<_>>()?;
    let predictions: Vec<Vec<usize>> = outputs.iter().map(|o| o.iter().map(|(_, p)| *p).collect()).collect();

    let mut per_variant = Vec::with_capacity(sets.len());
    for (s, p) in sets.iter().zip(&predictions) {
        per_variant.push(VariantAccuracy { variant: s.name.clone(), accuracy: accuracy(p, labels)? });
    }
    let accs: Vec<f64> = per_variant.iter().map(|v| v.accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);

    let consistency = if sets.len() >= 2 {
        let per_sample: Vec<Vec<usize>> =
            (0..labels.len()).map(|i| predictions.iter().map(|p| p[i]).collect()).collect();
        Some(cross_stain_consistency(&per_sample, None)?)
    } else {
        None
    };

    let raw_idx = sets.iter().position(|s| s.name == RAW_VARIANT);
    let (embeddings, embedding_variants, latent) = match raw_idx {
        Some(r) if sets.len() >= 2 => {
            let others: Vec<usize> = (0..sets.len()).filter(|&v| v != r).collect();
            let raw = outputs[r].iter().map(|(e, _)| e.clone()).collect();
            let variants = (0..labels.len()).map(|i| others.iter().map(|&v| outputs[v][i].0.clone()).collect()).collect();
            let emb = VariantEmbeddings::new(raw, variants)?;
            let latent = LatentMetrics {
                intra_cluster: intra_cluster_distance(&emb),
                centroid_raw: centroid_to_raw_distance(&emb),
                colinearity: colinearity(&emb)?,
            };
            (Some(emb), others.iter().map(|&v| sets[v].name.clone()).collect(), Some(latent))
        }
        _ => (None, Vec::new(), None),
    };

    Ok(Evaluation {
        report: EvalReport {
            n_samples: labels.len(),
            per_variant,
            mean_accuracy,
            std_accuracy,
            consistency,
            latent,
        },
        predictions,
        embeddings,
        embedding_variants,
    })
}

/// Confusion counts summed over variants, as CSV `true,pred,count` for
/// every class pair.
pub fn confusion_csv(predictions: &[Vec<usize>], labels: &[usize], n_classes: usize) -> String {
    let mut counts = vec![0usize; n_classes * n_classes];
    for p in predictions {
        for (&pred, &truth) in p.iter().zip(labels) {
            if pred < n_classes && truth < n_classes {
                counts[truth * n_classes + pred] += 1;
            }
        }
    }
    let mut out = String::from("true,pred,count\n");
    for t in 0..n_classes {
        for p in 0..n_classes {
            out.push_str(&format!("{t},{p},{}\n", counts[t * n_classes + p]));
        }
    }
    out
}
