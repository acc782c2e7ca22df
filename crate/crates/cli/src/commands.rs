use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use stainvar::encoder::checkpoint::{self, Manifest, MANIFEST_FILE, WEIGHTS_FILE};
use stainvar::encoder::{self, Sample};
use stainvar::harness::{self, confusion_csv, VariantPlan, RAW_VARIANT};
use stainvar::normalization::NormalizeWarning;
use stainvar::stain::StainBasis;
use stainvar::synth::{make_dataset, SynthSample};
use stainvar::{
    EvalReport, MetricsReport, NormalizationMethod, NormalizationTarget, Normalizer, RgbImage, SynthSpec,
    TrainConfig, VariantSet,
};

use crate::args::SynthArgs;
use crate::error::{CliError, CliResult};
use crate::io::{self, create_dir, list_images, read_rgb, stem, to_json, write_png, write_text};

pub const SIDECAR_FILE: &str = "normalization.json";
pub const VARIANTS_FILE: &str = "variants.json";
pub const LABELS_FILE: &str = "labels.csv";

/// Per-file failures of a finished command.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub failed_files: usize,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        i32::from(self.failed_files > 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileRecord {
    pub file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<NormalizeWarning>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Summary {
    pub total: usize,
    pub written: usize,
    pub warnings: usize,
    pub failed: usize,
}

impl Summary {
    fn of(records: &[FileRecord]) -> Self {
        let failed = records.iter().filter(|r| r.error.is_some()).count();
        Summary {
            total: records.len(),
            written: records.len() - failed,
            warnings: records.iter().filter(|r| r.warning.is_some()).count(),
            failed,
        }
    }
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    method: NormalizationMethod,
    target: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_fit: Option<&'a NormalizationTarget>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_error: Option<String>,
    summary: Summary,
    files: &'a [FileRecord],
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn require_dir(dir: &Path) -> CliResult<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} is not a directory", dir.display())))
    }
}

/// Outputs are keyed by stem, so two inputs may not share one.
fn unique_stems(files: &[PathBuf]) -> CliResult<()> {
    let mut seen = BTreeSet::new();
    for f in files {
        if !seen.insert(stem(f)) {
            return Err(CliError::Usage(format!("more than one input image has the stem '{}'", stem(f))));
        }
    }
    Ok(())
}

fn output_path(dir: &Path, input: &Path) -> PathBuf {
    dir.join(format!("{}.png", stem(input)))
}

fn normalize_files(
    normalizer: &Normalizer,
    files: &[PathBuf],
    target: &NormalizationTarget,
    out_dir: &Path,
) -> Vec<FileRecord> {
    files
        .par_iter()
        .map(|path| {
            let result = read_rgb(path).and_then(|img| {
                let normalized = normalizer.normalize(&img, target)?;
                write_png(&output_path(out_dir, path), &normalized.image)?;
                Ok(normalized.warning)
            });
            match result {
                Ok(warning) => FileRecord { file: file_name(path), warning, error: None },
                Err(e) => {
                    warn!("{}: {e}", path.display());
                    FileRecord { file: file_name(path), warning: None, error: Some(e.to_string()) }
                }
            }
        })
        .collect()
}

fn failed_all(files: &[PathBuf], reason: &str) -> Vec<FileRecord> {
    files.iter().map(|p| FileRecord { file: file_name(p), warning: None, error: Some(reason.into()) }).collect()
}

pub fn fit(image: &Path, method: NormalizationMethod, output: Option<&Path>, seed: u64) -> CliResult<Outcome> {
    let target = Normalizer::with_seed(seed).fit_target(&read_rgb(image)?, method)?;
    let json = to_json(&target);
    match output {
        Some(path) => write_text(path, &json)?,
        None => print!("{json}"),
    }
    Ok(Outcome::default())
}

pub fn normalize(
    input: &Path,
    target_path: &Path,
    method: NormalizationMethod,
    output: &Path,
    seed: u64,
) -> CliResult<Outcome> {
    require_dir(input)?;
    let files = list_images(input)?;
    unique_stems(&files)?;
    let normalizer = Normalizer::with_seed(seed);
    let target = normalizer.fit_target(&read_rgb(target_path)?, method)?;
    create_dir(output)?;
    let records = normalize_files(&normalizer, &files, &target, output);
    let summary = Summary::of(&records);
    info!("normalized {} of {} images ({} failed)", summary.written, summary.total, summary.failed);
    let failed_files = summary.failed;
    let sidecar = Sidecar {
        method,
        target: &file_name(target_path),
        target_fit: Some(&target),
        target_error: None,
        summary,
        files: &records,
    };
    write_text(&output.join(SIDECAR_FILE), &to_json(&sidecar))?;
    Ok(Outcome { failed_files })
}

#[derive(Debug, Serialize)]
struct VariantEntry {
    directory: String,
    method: Option<NormalizationMethod>,
    target: Option<String>,
    summary: Summary,
}

pub fn gen_variants(input: &Path, targets: &[PathBuf], output: &Path, seed: u64) -> CliResult<Outcome> {
    require_dir(input)?;
    if targets.is_empty() {
        return Err(CliError::Usage("at least one target image is required".into()));
    }
    unique_stems(targets)?;
    let files = list_images(input)?;
    unique_stems(&files)?;
    let plan = VariantPlan::round_robin(targets.iter().map(|t| stem(t)), true);
    let normalizer = Normalizer::with_seed(seed);
    create_dir(output)?;

    let mut entries = Vec::new();
    let mut failed_files = 0;
    for (assignment, target_path) in plan.assignments.iter().zip(targets) {
        let dir = output.join(assignment.dir_name());
        create_dir(&dir)?;
        let fitted = read_rgb(target_path).and_then(|img| Ok(normalizer.fit_target(&img, assignment.method)?));
        let (records, target_error) = match &fitted {
            Ok(target) => (normalize_files(&normalizer, &files, target, &dir), None),
            Err(e) => {
                warn!("{}: {e}", target_path.display());
                (failed_all(&files, "target could not be fitted"), Some(e.to_string()))
            }
        };
        let summary = Summary::of(&records);
        failed_files += summary.failed;
        let sidecar = Sidecar {
            method: assignment.method,
            target: &file_name(target_path),
            target_fit: fitted.as_ref().ok(),
            target_error,
            summary: summary.clone(),
            files: &records,
        };
        write_text(&dir.join(SIDECAR_FILE), &to_json(&sidecar))?;
        entries.push(VariantEntry {
            directory: assignment.dir_name(),
            method: Some(assignment.method),
            target: Some(file_name(target_path)),
            summary,
        });
    }

    let raw_dir = output.join(RAW_VARIANT);
    create_dir(&raw_dir)?;
    let raw_records: Vec<FileRecord> = files
        .par_iter()
        .map(|path| match read_rgb(path).and_then(|img| write_png(&output_path(&raw_dir, path), &img)) {
            Ok(()) => FileRecord { file: file_name(path), warning: None, error: None },
            Err(e) => FileRecord { file: file_name(path), warning: None, error: Some(e.to_string()) },
        })
        .collect();
    let summary = Summary::of(&raw_records);
    failed_files += summary.failed;
    entries.push(VariantEntry { directory: RAW_VARIANT.into(), method: None, target: None, summary });

    info!("wrote {} variant directories", entries.len());
    write_text(&output.join(VARIANTS_FILE), &to_json(&entries))?;
    Ok(Outcome { failed_files })
}

#[derive(Debug, Serialize)]
struct SynthRecord<'a> {
    file: String,
    label: usize,
    seed: u64,
    jitter_deg: [f64; 2],
    basis: &'a StainBasis,
}

#[derive(Debug, Serialize)]
struct SynthManifest<'a> {
    spec: &'a SynthSpec,
    per_class: usize,
    test_band: (f64, f64),
    train: Vec<SynthRecord<'a>>,
    test: Vec<SynthRecord<'a>>,
}

pub fn synth(args: &SynthArgs, seed: u64) -> CliResult<Outcome> {
    let spec = SynthSpec { side: args.side, jitter_deg: args.jitter, seed, ..SynthSpec::default() };
    let ds = make_dataset(&spec, args.per_class, args.heldout_jitter).map_err(|e| CliError::Usage(e.to_string()))?;
    let write_split = |name: &str, samples: &'_ [SynthSample]| -> CliResult<Vec<(String, usize)>> {
        let dir = args.output.join(name);
        create_dir(&dir)?;
        let files: Vec<(String, usize)> =
            samples.iter().enumerate().map(|(i, s)| (format!("{i:05}.png"), s.label)).collect();
        files
            .par_iter()
            .zip(samples)
            .try_for_each(|((file, _), s)| write_png(&dir.join(file), &s.rendered.image))?;
        write_text(&dir.join(LABELS_FILE), &io::labels_csv(files.iter().map(|(f, l)| (f.as_str(), *l))))?;
        Ok(files)
    };
    fn records(files: Vec<(String, usize)>, samples: &[SynthSample]) -> Vec<SynthRecord<'_>> {
        files
            .into_iter()
            .zip(samples)
            .map(|((file, label), s)| SynthRecord {
                file,
                label,
                seed: s.seed,
                jitter_deg: s.rendered.jitter,
                basis: &s.rendered.basis,
            })
            .collect()
    }
    let train_files = write_split("train", &ds.train)?;
    let test_files = write_split("test", &ds.test)?;
    let manifest = SynthManifest {
        spec: &spec,
        per_class: args.per_class,
        test_band: ds.test_band,
        train: records(train_files, &ds.train),
        test: records(test_files, &ds.test),
    };
    write_text(&args.output.join("manifest.json"), &to_json(&manifest))?;
    info!("wrote {} train and {} test images", ds.train.len(), ds.test.len());
    Ok(Outcome::default())
}

#[derive(Debug, Serialize)]
struct Skipped {
    file: String,
    error: String,
}

#[derive(Debug, Serialize)]
struct DataSummary {
    used: usize,
    skipped: Vec<Skipped>,
}

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";

pub fn train(config_path: &Path, data: &Path, output: &Path, seed: Option<u64>) -> CliResult<Outcome> {
    let mut config =
        TrainConfig::from_json(&io::read_text(config_path)?).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    require_dir(data)?;
    let labels = io::read_labels(&data.join(LABELS_FILE))?;
    let files = list_images(data)?;
    let side = config.image_side;
    let loaded: Vec<(PathBuf, CliResult<Sample>)> = files
        .par_iter()
        .map(|path| {
            let sample = (|| {
                let label = *labels
                    .get(&stem(path))
                    .ok_or_else(|| CliError::Config(format!("no label for {}", file_name(path))))?;
                if label >= config.encoder.n_classes {
                    return Err(CliError::Config(format!("label {label} out of range")));
                }
                let image = read_rgb(path)?;
                if image.height() != side || image.width() != side {
                    return Err(CliError::Config(format!(
                        "image is {}×{}, config expects {side}×{side}",
                        image.height(),
                        image.width()
                    )));
                }
                Ok(Sample { image, label })
            })();
            (path.clone(), sample)
        })
        .collect();
    let mut dataset = Vec::new();
    let mut skipped = Vec::new();
    for (path, sample) in loaded {
        match sample {
            Ok(s) => dataset.push(s),
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped.push(Skipped { file: file_name(&path), error: e.to_string() });
            }
        }
    }

    info!("training {:?} on {} images for {} epochs", config.mode, dataset.len(), config.epochs);
    let (net, report) = encoder::train(&config, &dataset)?;
    info!("trained in {:.1}s", report.wall_time_s);
    create_dir(output)?;
    write_text(&output.join(MANIFEST_FILE), &to_json(&checkpoint::manifest_for(&net)))?;
    std::fs::write(output.join(WEIGHTS_FILE), checkpoint::encode_weights(&net))
        .map_err(|e| CliError::io(&output.join(WEIGHTS_FILE), e))?;
    write_text(&output.join(CONFIG_FILE), &config.to_json())?;
    write_text(&output.join(REPORT_FILE), &to_json(&report))?;
    write_text(&output.join("loss.csv"), &report.loss_csv())?;
    let failed_files = skipped.len();
    write_text(&output.join("data.json"), &to_json(&DataSummary { used: dataset.len(), skipped }))?;
    Ok(Outcome { failed_files })
}

pub fn load_run(run: &Path) -> CliResult<stainvar::Network> {
    let manifest: Manifest = serde_json::from_str(&io::read_text(&run.join(MANIFEST_FILE))?)
        .map_err(|e| CliError::Config(format!("{}: {e}", run.join(MANIFEST_FILE).display())))?;
    let weights_path = run.join(&manifest.weights_file);
    let weights = std::fs::read(&weights_path).map_err(|e| CliError::io(&weights_path, e))?;
    Ok(checkpoint::decode(&manifest, &weights)?)
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    report: &'a EvalReport,
    samples: &'a [String],
    skipped: &'a [Skipped],
}

pub fn eval(run: &Path, variants_root: &Path, labels_path: &Path, output: Option<&Path>) -> CliResult<Outcome> {
    let net = load_run(run)?;
    require_dir(variants_root)?;
    let labels = io::read_labels(labels_path)?;
    let mut variant_dirs: Vec<PathBuf> = std::fs::read_dir(variants_root)
        .map_err(|e| CliError::io(variants_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    variant_dirs.sort();
    if variant_dirs.is_empty() {
        return Err(CliError::Usage(format!("{} has no variant directories", variants_root.display())));
    }

    // A sample is evaluated only if every variant has a readable image for it.
    let loaded: Vec<BTreeMap<String, CliResult<RgbImage>>> = variant_dirs
        .iter()
        .map(|dir| {
            let files = list_images(dir)?;
            Ok(files
                .par_iter()
                .filter(|p| labels.contains_key(&stem(p)))
                .map(|p| (stem(p), read_rgb(p)))
                .collect::<Vec<_>>()
                .into_iter()
                .collect())
        })
        .collect::<CliResult<_>>()?;
    let mut skipped = Vec::new();
    let mut samples = Vec::new();
    for name in labels.keys() {
        let mut problem = None;
        for (dir, images) in variant_dirs.iter().zip(&loaded) {
            match images.get(name) {
                None => problem = Some(format!("missing from {}", file_name(dir))),
                Some(Err(e)) => problem = Some(e.to_string()),
                Some(Ok(_)) => continue,
            }
            break;
        }
        match problem {
            Some(error) => {
                warn!("skipping {name}: {error}");
                skipped.push(Skipped { file: name.clone(), error });
            }
            None => samples.push(name.clone()),
        }
    }
    if samples.is_empty() {
        return Err(CliError::Usage("no sample is present in every variant directory".into()));
    }

    let sets: Vec<VariantSet> = variant_dirs
        .iter()
        .zip(loaded)
        .map(|(dir, mut images)| VariantSet {
            name: file_name(dir),
            images: samples
                .iter()
                .map(|s| images.remove(s).expect("present").expect("readable"))
                .collect(),
        })
        .collect();
    let truth: Vec<usize> = samples.iter().map(|s| labels[s]).collect();
    let evaluation = harness::evaluate(&net, &sets, &truth)?;

    let out = output.map(Path::to_path_buf).unwrap_or_else(|| run.join("eval"));
    create_dir(&out)?;
    let report = &evaluation.report;
    write_text(
        &out.join("eval.json"),
        &to_json(&EvalOutput { report, samples: &samples, skipped: &skipped }),
    )?;
    write_text(&out.join("accuracy.csv"), &report.accuracy_csv())?;
    let k = net.architecture().n_classes;
    write_text(&out.join("confusion.csv"), &confusion_csv(&evaluation.predictions, &truth, k))?;
    if let Some(metrics) = report.metrics() {
        write_text(&out.join("metrics.json"), &to_json::<MetricsReport>(&metrics))?;
    }
    if let Some(emb) = &evaluation.embeddings {
        write_text(&out.join("embeddings.csv"), &emb.to_csv(&evaluation.embedding_variants)?)?;
    }
    info!(
        "mean accuracy {:.4} ± {:.4} over {} variants",
        report.mean_accuracy,
        report.std_accuracy,
        report.per_variant.len()
    );
    Ok(Outcome { failed_files: skipped.len() })
}

pub fn tile_label(mask: &Path, threshold: f64) -> CliResult<Outcome> {
    let pixels = io::read_mask(mask)?;
    let label = harness::tile_label(&pixels, threshold).map_err(|e| CliError::Usage(e.to_string()))?;
    println!("{label}");
    Ok(Outcome::default())
}
