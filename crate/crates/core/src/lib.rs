//! Stain normalization (Reinhard, Macenko, Vahadane), a stain-invariant
//! embedding objective with analytic gradients, a small trainable encoder,
//! and robustness metrics for H&E image classifiers.
//!
//! The crate is organised bottom-up:
//!
//! * [`colorspace`] – RGB, optical density and lαβ conversions.
//! * [`stain`] – stain basis estimation (SVD/angle percentiles and sparse NMF).
//! * [`normalization`] – the three stain normalizers and the per-batch protocol.
//! * [`loss`] – raw/normalized pairing, the embedding loss and cross entropy.
//! * [`encoder`] – convolutional encoder, Adam, augmentation and the training loop.
//! * [`metrics`] – accuracy, cross-stain consistency and latent-geometry metrics.
//! * [`synth`] – Beer–Lambert synthetic patch generator used as a test oracle.
//! * [`harness`] – variant-set planning, tile labelling and evaluation.

pub mod colorspace;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod normalization;
pub mod rng;
pub mod stain;
pub mod synth;

pub use colorspace::{LabImage, OdImage, RgbImage};
pub use encoder::{Network, Sample, TrainConfig, TrainMode, TrainReport};
pub use error::{Error, Result};
pub use harness::{EvalReport, VariantPlan, VariantSet};
pub use loss::{EmbeddingSet, LossReport, PairSets};
pub use metrics::{MetricsReport, VariantEmbeddings};
pub use normalization::{NormalizationMethod, NormalizationTarget, Normalizer};
pub use stain::{ConcentrationMap, StainBasis};
pub use synth::{SynthDataset, SynthSpec};
