use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::augment::augment;
use super::config::{TrainConfig, TrainMode};
use super::network::{argmax, Network, Trace};
use crate::colorspace::RgbImage;
use crate::error::{Error, Result};
use crate::loss::{build_pairs, cross_entropy, total_loss, EmbeddingSet, LossWeights};
use crate::normalization::{sample_protocol, Execution, NormalizationMethod, Normalizer};
use crate::rng::{derive_seed, seeded, Rng};

const INIT_TAG: u64 = 1;
const DATA_TAG: u64 = 2;
/// Parameters probed by the in-training finite-difference check.
const GRAD_CHECK_PARAMS: usize = 8;
const GRAD_CHECK_STEP: f64 = 1e-6;
/// Absolute floor of the relative-error denominator in gradient checks.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub l_c: f64,
    pub l_e: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_c: f64,
    pub l_e: f64,
    pub total: f64,
    /// Accuracy of the first branch's predictions during the epoch's updates.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub params_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub parameter_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub gradient_check: Option<GradientCheck>,
    pub steps: usize,
    pub normalization_calls: usize,
    /// Images passed through unnormalized because estimation failed.
    pub normalization_failures: usize,
    /// Not serialized, so saved reports stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl TrainReport {
    /// Columns `epoch,l_c,l_e,total`.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,l_c,l_e,total\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.l_c, e.l_e, e.total));
        }
        out
    }
}

/// Loss and parameter gradient of one step on fixed inputs. `second` is
/// the paired branch; `None` means plain cross entropy on `first`.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: StepLoss,
    pub grad: Vec<f64>,
    pub first_predictions: Vec<usize>,
}

pub fn evaluate_objective(
    net: &Network,
    first: &[RgbImage],
    second: Option<&[RgbImage]>,
    labels: &[usize],
    weights: LossWeights,
) -> Result<Objective> {
    if first.len() != labels.len() {
        return Err(Error::LengthMismatch { left: first.len(), right: labels.len() });
    }
    let ta = net.forward_batch(first)?;
    let first_predictions = ta.iter().map(|t| argmax(&t.logits)).collect();
    let (ea, la) = Network::stack(&ta);
    match second {
        Some(second) => {
            if second.len() != first.len() {
                return Err(Error::LengthMismatch { left: first.len(), right: second.len() });
            }
            let tb = net.forward_batch(second)?;
            let (eb, lb) = Network::stack(&tb);
            let pairs = build_pairs(first.len())?;
            let emb = EmbeddingSet::new(ea, eb)?;
            let r = total_loss(&emb, &pairs, &la, &lb, labels, weights)?;
            let mut grad = net.backward_batch(&ta, &r.grad_raw, &r.grad_logits_raw);
            let gb = net.backward_batch(&tb, &r.grad_variant, &r.grad_logits_variant);
            grad.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
            Ok(Objective { loss: StepLoss { l_c: r.l_c, l_e: r.l_e, total: r.total }, grad, first_predictions })
        }
        None => {
            let b = first.len();
            let mut l_e = 0.0;
            let mut d_logits = DMatrix::zeros(b, la.ncols());
            for (i, (t, &y)) in ta.iter().zip(labels).enumerate() {
                let (ce, g) = cross_entropy(&t.logits, y)?;
                l_e += ce / b as f64;
                for (c, gv) in g.iter().enumerate() {
                    d_logits[(i, c)] = weights.w_e * gv / b as f64;
                }
            }
            let grad = net.backward_batch(&ta, &DMatrix::zeros(b, ea.ncols()), &d_logits);
            Ok(Objective { loss: StepLoss { l_c: 0.0, l_e, total: weights.w_e * l_e }, grad, first_predictions })
        }
    }
}

/// Largest relative error between the analytic gradient and central
/// differences over the given parameter indices.
pub fn gradient_check(
    net: &Network,
    first: &[RgbImage],
    second: Option<&[RgbImage]>,
    labels: &[usize],
    weights: LossWeights,
    params: &[usize],
    step: f64,
) -> Result<f64> {
    let analytic = evaluate_objective(net, first, second, labels, weights)?.grad;
    let mut probe = net.clone();
    let value = |n: &Network| -> Result<f64> { Ok(evaluate_objective(n, first, second, labels, weights)?.loss.total) };
    let mut worst: f64 = 0.0;
    for &p in params {
        let orig = probe.params()[p];
        probe.params_mut()[p] = orig + step;
        let plus = value(&probe)?;
        probe.params_mut()[p] = orig - step;
        let minus = value(&probe)?;
        probe.params_mut()[p] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[p] - numeric).abs() / analytic[p].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Holds the network, optimizer and the training random stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    network: Network,
    adam: Adam,
    normalizer: Normalizer,
    rng: Rng,
    steps: usize,
    normalization_calls: usize,
    normalization_failures: usize,
    gradient_check: Option<GradientCheck>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: StepLoss,
    pub correct: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let network = Network::init(config.architecture(), &mut seeded(derive_seed(config.seed, INIT_TAG)))?;
        let adam = Adam::new(network.parameter_count(), config.adam_beta1, config.adam_beta2);
        let rng = seeded(derive_seed(config.seed, DATA_TAG));
        Ok(Self {
            config,
            network,
            adam,
            normalizer: Normalizer::default(),
            rng,
            steps: 0,
            normalization_calls: 0,
            normalization_failures: 0,
            gradient_check: None,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn into_network(self) -> Network {
        self.network
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn normalization_calls(&self) -> usize {
        self.normalization_calls
    }

    /// Normalizes `batch` to one of its members; failed slots keep the input.
    fn normalized_view(&mut self, batch: &[RgbImage]) -> Result<Vec<RgbImage>> {
        let (ref_index, method) = sample_protocol(&mut self.rng, batch.len())?;
        self.normalization_calls += 1;
        Ok(self.normalize_with(batch, ref_index, method))
    }

    fn normalize_with(&mut self, batch: &[RgbImage], ref_index: usize, method: NormalizationMethod) -> Vec<RgbImage> {
        match self.normalizer.normalize_batch(batch, ref_index, method, Execution::Parallel) {
            Ok(results) => results
                .into_iter()
                .zip(batch)
                .map(|(r, img)| match r {
                    Ok(n) => n.image,
                    Err(_) => {
                        self.normalization_failures += 1;
                        img.clone()
                    }
                })
                .collect(),
            Err(_) => {
                self.normalization_failures += batch.len();
                batch.to_vec()
            }
        }
    }

    fn augmented(&mut self, batch: &[RgbImage]) -> Vec<RgbImage> {
        let base = self.rng.next_u64();
        let cfg = self.config.augment;
        batch
            .par_iter()
            .enumerate()
            .map(|(i, img)| augment(img, &cfg, &mut seeded(derive_seed(base, i as u64))))
            .collect()
    }

    /// One optimizer update on a raw batch.
    pub fn train_step(&mut self, batch: &[RgbImage], labels: &[usize], lr: f64) -> Result<StepOutcome> {
        let mode = self.config.mode;
        if mode.uses_pairing() && batch.len() < 2 {
            return Err(Error::BatchTooSmall(batch.len()));
        }
        let x = self.augmented(batch);
        let (first, second) = match mode {
            TrainMode::Ours => {
                let v = self.normalized_view(&x)?;
                (x, Some(v))
            }
            TrainMode::Contrastive => {
                let a = self.normalized_view(&x)?;
                let b = self.normalized_view(&x)?;
                (a, Some(b))
            }
            TrainMode::CeOnly => (x, None),
        };
        let weights = self.config.loss_weights();
        if self.gradient_check.is_none() {
            let n = self.network.parameter_count();
            let probes: Vec<usize> = (0..GRAD_CHECK_PARAMS).map(|i| i * n / GRAD_CHECK_PARAMS).collect();
            let err = gradient_check(&self.network, &first, second.as_deref(), labels, weights, &probes, GRAD_CHECK_STEP)?;
            self.gradient_check = Some(GradientCheck { params_checked: probes.len(), max_rel_error: err });
        }
        let obj = evaluate_objective(&self.network, &first, second.as_deref(), labels, weights)?;
        if !obj.loss.total.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: self.steps });
        }
        self.adam.step(self.network.params_mut(), &obj.grad, lr);
        self.steps += 1;
        let correct = obj.first_predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(StepOutcome { loss: obj.loss, correct })
    }

    /// Full epoch loop with seeded shuffling. Under pairing modes a trailing
    /// batch of one image is skipped.
    pub fn fit(&mut self, dataset: &[Sample]) -> Result<TrainReport> {
        let start = Instant::now();
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = self.config.encoder.n_classes;
        if let Some(s) = dataset.iter().find(|s| s.label >= k) {
            return Err(Error::InvalidArgument(format!("label {} out of range for {k} classes", s.label)));
        }
        let side = self.config.image_side;
        if let Some(s) = dataset.iter().find(|s| s.image.height() != side || s.image.width() != side) {
            return Err(Error::ShapeMismatch(format!(
                "config expects {side}×{side} images, got {}×{}",
                s.image.height(),
                s.image.width()
            )));
        }
        let min_batch = if self.config.mode.uses_pairing() { 2 } else { 1 };
        if dataset.len() < min_batch {
            return Err(Error::BatchTooSmall(dataset.len()));
        }

        let mut epochs = Vec::with_capacity(self.config.epochs);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for epoch in 0..self.config.epochs {
            let lr = self.config.lr_at(epoch);
            order.shuffle(&mut self.rng);
            let (mut sums, mut n_steps, mut correct, mut seen) = ([0.0; 3], 0usize, 0usize, 0usize);
            for chunk in order.chunks(self.config.batch_size).filter(|c| c.len() >= min_batch) {
                let images: Vec<RgbImage> = chunk.iter().map(|&i| dataset[i].image.clone()).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| dataset[i].label).collect();
                let out = self.train_step(&images, &labels, lr)?;
                sums[0] += out.loss.l_c;
                sums[1] += out.loss.l_e;
                sums[2] += out.loss.total;
                n_steps += 1;
                correct += out.correct;
                seen += chunk.len();
            }
            let n = n_steps as f64;
            epochs.push(EpochRecord {
                epoch,
                lr,
                l_c: sums[0] / n,
                l_e: sums[1] / n,
                total: sums[2] / n,
                train_accuracy: correct as f64 / seen as f64,
            });
        }
        Ok(TrainReport {
            mode: self.config.mode,
            seed: self.config.seed,
            parameter_count: self.network.parameter_count(),
            epochs,
            gradient_check: self.gradient_check.clone(),
            steps: self.steps,
            normalization_calls: self.normalization_calls,
            normalization_failures: self.normalization_failures,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }
}

/// Trains a fresh network under `config`.
pub fn train(config: &TrainConfig, dataset: &[Sample]) -> Result<(Network, TrainReport)> {
    let mut trainer = Trainer::new(config.clone())?;
    let report = trainer.fit(dataset)?;
    Ok((trainer.into_network(), report))
}

/// Pooled embedding and predicted label of each image.
pub fn embed(net: &Network, images: &[RgbImage]) -> Result<Vec<(Vec<f64>, usize)>> {
    let traces: Vec<Trace> = net.forward_batch(images)?;
    Ok(traces.into_iter().map(|t| {
        let label = argmax(&t.logits);
        (t.embedding, label)
    }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::augment::AugmentConfig;
    use crate::encoder::config::EncoderConfig;
    use crate::synth::{render, SynthSpec};
    use rand::Rng as _;

    fn tiny_config(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            image_side: 16,
            epochs: 2,
            lr_initial: 1e-3,
            lr_dropped: 1e-4,
            lr_drop_epoch: 1,
            mode,
            encoder: EncoderConfig { filters: vec![4, 8], embed_dim: 8, n_classes: 2 },
            ..Default::default()
        }
    }

    fn tiny_dataset(n: usize, side: usize) -> Vec<Sample> {
        let spec = SynthSpec { side, classes: SynthSpec::default().classes[..2].to_vec(), ..Default::default() };
        (0..n)
            .map(|i| Sample { image: render(&spec, i % 2, &mut seeded(i as u64)).unwrap().image, label: i % 2 })
            .collect()
    }

    #[test]
    fn same_seed_same_report_and_params() {
        let data = tiny_dataset(8, 16);
        let (na, ra) = train(&tiny_config(TrainMode::Ours), &data).unwrap();
        let (nb, rb) = train(&tiny_config(TrainMode::Ours), &data).unwrap();
        assert_eq!(na.params(), nb.params());
        assert_eq!(ra.epochs, rb.epochs);
        assert_eq!(ra.epochs.len(), 2);
        assert_eq!(ra.epochs[0].lr, 1e-3);
        assert_eq!(ra.epochs[1].lr, 1e-4);
    }

    #[test]
    fn normalization_call_counts_by_mode() {
        let data = tiny_dataset(8, 16);
        let (_, ours) = train(&tiny_config(TrainMode::Ours), &data).unwrap();
        assert_eq!(ours.normalization_calls, ours.steps);
        let (_, con) = train(&tiny_config(TrainMode::Contrastive), &data).unwrap();
        assert_eq!(con.normalization_calls, 2 * con.steps);
        let (_, ce) = train(&tiny_config(TrainMode::CeOnly), &data).unwrap();
        assert_eq!(ce.normalization_calls, 0);
        assert!(ce.epochs.iter().all(|e| e.l_c == 0.0));
        assert_eq!(ours.steps, 4);
    }

    #[test]
    fn zero_epochs_gives_empty_series() {
        let cfg = TrainConfig { epochs: 0, ..tiny_config(TrainMode::Ours) };
        let (net, report) = train(&cfg, &tiny_dataset(4, 16)).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(report.steps, 0);
        assert_eq!(net, Trainer::new(cfg).unwrap().into_network());
    }

    #[test]
    fn dataset_errors() {
        let cfg = tiny_config(TrainMode::Ours);
        assert_eq!(train(&cfg, &[]).unwrap_err(), Error::EmptyDataset);
        let mut bad = tiny_dataset(4, 16);
        bad[0].label = 5;
        assert!(matches!(train(&cfg, &bad), Err(Error::InvalidArgument(_))));
        assert!(matches!(train(&cfg, &tiny_dataset(4, 8)), Err(Error::ShapeMismatch(_))));
        assert_eq!(train(&cfg, &tiny_dataset(1, 16)).unwrap_err(), Error::BatchTooSmall(1));
    }

    #[test]
    fn in_training_gradient_check_passes() {
        let (_, report) = train(&tiny_config(TrainMode::Ours), &tiny_dataset(4, 16)).unwrap();
        let gc = report.gradient_check.unwrap();
        assert_eq!(gc.params_checked, GRAD_CHECK_PARAMS);
        assert!(gc.max_rel_error < 1e-3, "{}", gc.max_rel_error);
    }

    #[test]
    fn loss_csv_columns() {
        let (_, report) = train(&tiny_config(TrainMode::CeOnly), &tiny_dataset(4, 16)).unwrap();
        let csv = report.loss_csv();
        assert!(csv.starts_with("epoch,l_c,l_e,total\n0,0,"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn ce_only_objective_is_mean_cross_entropy() {
        let net = Network::init(tiny_config(TrainMode::CeOnly).architecture(), &mut seeded(1)).unwrap();
        let data = tiny_dataset(3, 16);
        let images: Vec<RgbImage> = data.iter().map(|s| s.image.clone()).collect();
        let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
        let obj = evaluate_objective(&net, &images, None, &labels, LossWeights::default()).unwrap();
        let expected: f64 = images
            .iter()
            .zip(&labels)
            .map(|(img, &y)| cross_entropy(&net.forward(img).unwrap().logits, y).unwrap().0)
            .sum::<f64>()
            / 3.0;
        assert!((obj.loss.l_e - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_falls_on_a_fixed_batch() {
        let cfg = TrainConfig { augment: AugmentConfig::disabled(), ..tiny_config(TrainMode::Ours) };
        let data = tiny_dataset(4, 16);
        let images: Vec<RgbImage> = data.iter().map(|s| s.image.clone()).collect();
        let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
        let mut rng = seeded(3);
        let variant: Vec<RgbImage> = images
            .iter()
            .map(|img| RgbImage::new(16, 16, img.data().iter().map(|v| v * rng.random_range(0.9..1.0)).collect()).unwrap())
            .collect();
        let mut trainer = Trainer::new(cfg).unwrap();
        let weights = trainer.config.loss_weights();
        let first = evaluate_objective(&trainer.network, &images, Some(&variant), &labels, weights).unwrap().loss.total;
        for _ in 0..50 {
            let obj = evaluate_objective(&trainer.network, &images, Some(&variant), &labels, weights).unwrap();
            trainer.adam.step(trainer.network.params_mut(), &obj.grad, 1e-3);
        }
        let last = evaluate_objective(&trainer.network, &images, Some(&variant), &labels, weights).unwrap().loss.total;
        assert!(last < first, "{first} -> {last}");
    }
}
