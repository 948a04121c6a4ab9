use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lgcn_core::config::{Architecture, DfmMode, Fusion};
use lgcn_core::gradsuite::Scope;

#[derive(Debug, Parser)]
#[command(name = "lgcn", version, about = "Place recognition with fused CNN and ViT streams")]
pub struct Cli {
    /// Worker threads for batch-parallel work; 0 uses every core. Outputs
    /// are only guaranteed byte-identical across runs with 1.
    #[arg(long, global = true, env = "LGCN_THREADS", default_value_t = 1)]
    pub threads: usize,

    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic geotagged place world to disk.
    Gen(GenArgs),
    /// Fine-tune the adapters, fusion gate and head with triplet loss.
    Train(TrainArgs),
    /// Recall@N of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every differentiable module.
    Gradcheck(GradcheckArgs),
    /// Per-stream response maps of one image.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, env = "LGCN_SEED", default_value_t = 7)]
    pub seed: u64,
    #[arg(long, env = "LGCN_PLACES", default_value_t = 200)]
    pub places: usize,
    /// Views per place, split evenly between database and queries.
    #[arg(long, env = "LGCN_VIEWS", default_value_t = 6)]
    pub views: usize,
    /// Image side in pixels.
    #[arg(long, env = "LGCN_SIZE", default_value_t = 64)]
    pub size: usize,
    #[arg(long, env = "LGCN_OUT")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArchPreset {
    Full,
    Baseline,
    FsaOnly,
    CnnStreamOnly,
    DfmOnly,
}

impl ArchPreset {
    pub fn arch(self) -> Architecture {
        match self {
            ArchPreset::Full => Architecture::full(),
            ArchPreset::Baseline => Architecture::baseline(),
            ArchPreset::FsaOnly => Architecture::fsa_only(),
            ArchPreset::CnnStreamOnly => Architecture::cnn_stream_only(),
            ArchPreset::DfmOnly => Architecture::dfm_only(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelPreset {
    Toy,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DfmModeArg {
    PaperText,
    VerbatimEq5,
}

impl From<DfmModeArg> for DfmMode {
    fn from(m: DfmModeArg) -> Self {
        match m {
            DfmModeArg::PaperText => DfmMode::PaperText,
            DfmModeArg::VerbatimEq5 => DfmMode::VerbatimEq5,
        }
    }
}

/// Component switches shared by train, eval and heatmap.
#[derive(Clone, Debug, Default, Args)]
pub struct Ablation {
    /// Drop the frequency-spatial adapters.
    #[arg(long, env = "LGCN_DISABLE_FSA")]
    pub disable_fsa: bool,
    /// Drop the CNN stream (and with it any fusion).
    #[arg(long, env = "LGCN_DISABLE_CNN_STREAM")]
    pub disable_cnn_stream: bool,
    /// Replace the gated fusion by a plain sum of the two streams.
    #[arg(long, env = "LGCN_DISABLE_DFM", conflicts_with = "static_fusion")]
    pub disable_dfm: bool,
    /// Recombination rule of the fusion gate.
    #[arg(long, env = "LGCN_DFM_MODE", value_enum)]
    pub dfm_mode: Option<DfmModeArg>,
    /// Concatenate the two streams instead of gating them (doubles the
    /// descriptor width, so only meaningful at training time).
    #[arg(long, env = "LGCN_STATIC_FUSION")]
    pub static_fusion: bool,
}

impl Ablation {
    pub fn apply(&self, mut arch: Architecture) -> Architecture {
        if self.disable_fsa {
            arch.fsa = false;
        }
        if self.disable_cnn_stream {
            arch.cnn_stream = false;
        }
        if self.disable_dfm && arch.fusion == Fusion::Dfm {
            arch.fusion = Fusion::Sum;
        }
        if self.static_fusion {
            arch.fusion = Fusion::Concat;
        }
        if let Some(m) = self.dfm_mode {
            arch.dfm_mode = m.into();
        }
        arch
    }

    pub fn is_empty(&self) -> bool {
        !(self.disable_fsa || self.disable_cnn_stream || self.disable_dfm || self.static_fusion)
            && self.dfm_mode.is_none()
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest CSV; image paths are relative to its directory.
    #[arg(long, env = "LGCN_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "LGCN_OUT")]
    pub out: PathBuf,
    /// JSON run configuration (`model` and `train` sections, both optional).
    #[arg(long, env = "LGCN_CONFIG")]
    pub config: Option<PathBuf>,
    /// Base model preset when no config file is given.
    #[arg(long, env = "LGCN_PRESET", value_enum)]
    pub preset: Option<ModelPreset>,
    /// Named architecture variant; ablation flags apply on top.
    #[arg(long, env = "LGCN_ARCH", value_enum)]
    pub arch: Option<ArchPreset>,
    #[arg(long, env = "LGCN_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "LGCN_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "LGCN_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "LGCN_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "LGCN_MARGIN")]
    pub margin: Option<f64>,
    /// Keep the ViT and CNN backbones fixed (default on).
    #[arg(long, env = "LGCN_FREEZE_BACKBONE", num_args = 0..=1, default_missing_value = "true")]
    pub freeze_backbone: Option<bool>,
    #[command(flatten)]
    pub ablation: Ablation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "LGCN_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "LGCN_DATA")]
    pub data: PathBuf,
    /// Recall cut-offs.
    #[arg(long = "n", env = "LGCN_N", value_delimiter = ',', default_values_t = [1, 5, 10])]
    pub n_values: Vec<usize>,
    /// Match radius in metres.
    #[arg(long, env = "LGCN_THRESHOLD", default_value_t = 25.0)]
    pub threshold: f64,
    /// Report path; stdout when absent.
    #[arg(long, env = "LGCN_OUT")]
    pub out: Option<PathBuf>,
    /// Include per-query top-N ids in the JSON report.
    #[arg(long)]
    pub per_query: bool,
    /// Per-query ranking CSV.
    #[arg(long)]
    pub per_query_csv: Option<PathBuf>,
    /// Binary descriptor dump of every record.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub dump_precision: PrecisionArg,
    /// Recompute recall with a brute-force reference and fail on mismatch.
    #[arg(long)]
    pub oracle_check: bool,
    #[command(flatten)]
    pub ablation: Ablation,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// all, or one of tensor, vit, fsa, cnn, dfm, head, e2e.
    #[arg(default_value = "all", value_parser = parse_scope)]
    pub scope: Scope,
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Corrupt every analytic gradient; every check must then fail.
    #[arg(long)]
    pub inject_bug: bool,
    #[arg(long, env = "LGCN_SEED", default_value_t = 1234)]
    pub seed: u64,
    /// Also write the reports as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn parse_scope(s: &str) -> Result<Scope, String> {
    s.parse().map_err(|e: lgcn_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long, env = "LGCN_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// PPM image of the model's input size.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, env = "LGCN_OUT")]
    pub out: PathBuf,
    /// Output pixels per feature-map cell.
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
    #[command(flatten)]
    pub ablation: Ablation,
}
