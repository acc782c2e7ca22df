use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use stainvar::NormalizationMethod;

#[derive(Debug, Parser)]
#[command(name = "stainvar", version, about = "Stain normalization and stain-invariant training toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Seed for every random choice; overrides the config seed in `train`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only log errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a normalization target from one image and write it as JSON.
    Fit {
        #[arg(long)]
        image: PathBuf,
        /// reinhard, macenko or vahadane.
        #[arg(long, value_parser = parse_method)]
        method: NormalizationMethod,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Normalize every image in a directory to one target image.
    Normalize {
        /// Directory of PNG or PPM images.
        #[arg(long)]
        input: PathBuf,
        /// Reference image the inputs are normalized to.
        #[arg(long)]
        target: PathBuf,
        /// reinhard, macenko or vahadane.
        #[arg(long, value_parser = parse_method)]
        method: NormalizationMethod,
        /// Receives one PNG per input plus `normalization.json`.
        #[arg(long)]
        output: PathBuf,
    },
    /// Write one normalized copy of a test set per target plus a raw copy.
    GenVariants {
        /// Test-set directory.
        #[arg(long)]
        input: PathBuf,
        /// Target images; methods are assigned round-robin in the given order.
        #[arg(long, num_args = 1.., required_unless_present = "targets_dir")]
        targets: Vec<PathBuf>,
        /// Use every image of this directory, sorted by name, as a target.
        #[arg(long, conflicts_with = "targets")]
        targets_dir: Option<PathBuf>,
        /// Root for the `<method>_<target>/` and `raw/` directories.
        #[arg(long)]
        output: PathBuf,
    },
    /// Render a labelled synthetic train/test corpus.
    Synth(SynthArgs),
    /// Train an encoder from a JSON config on a labelled image directory.
    Train {
        /// JSON training config; omitted keys take their defaults.
        #[arg(long)]
        config: PathBuf,
        /// Directory of images with a `labels.csv` (`file,label`).
        #[arg(long)]
        data: PathBuf,
        /// Run directory for the checkpoint and reports.
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate a trained run on every variant directory under a root.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Root holding one subdirectory per variant.
        #[arg(long)]
        variants: PathBuf,
        /// `file,label` CSV keyed by file stem.
        #[arg(long)]
        labels: PathBuf,
        /// Report directory; `<run>/eval` when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print 1 when the positive fraction of a mask tile exceeds the threshold.
    TileLabel {
        /// Mask image; any nonzero pixel counts as positive.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = stainvar::harness::DEFAULT_TILE_THRESHOLD)]
        threshold: f64,
    },
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Receives `train/`, `test/` and `manifest.json`.
    #[arg(long)]
    pub output: PathBuf,
    /// Images per class in each split.
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    /// Upper end of the training stain rotation, in degrees.
    #[arg(long, default_value_t = 5.0)]
    pub jitter: f64,
    /// Upper end of the test stain rotation, in degrees.
    #[arg(long, default_value_t = 15.0)]
    pub heldout_jitter: f64,
}

fn parse_method(s: &str) -> Result<NormalizationMethod, String> {
    s.parse().map_err(|e: stainvar::Error| e.to_string())
}
