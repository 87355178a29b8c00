//! The `placelab` command line: `gen`, `train`, `infer` and `eval`.
//!
//! Exit codes: 0 ok, 2 input or configuration error, 3 generation failure,
//! 4 numerical abort, 5 no proposals.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{derive_seed, generate_dataset, read_dataset, write_dataset, Dataset, DatasetConfig, Split, Task};
use crate::diffusion::{sample_poses, DenoiseOptions, OracleRefiner, Refiner};
use crate::error::Error;
use crate::eval::{evaluate, write_reports, EvalOptions, Prediction, PredictionFile, Tolerances};
use crate::model::checkpoint::Checkpoint;
use crate::model::train::{train, write_loss_csv, TrainConfig};
use crate::model::{ModelConfig, PoseModel};
use crate::procgen::ProcgenConfig;
use crate::proposer::{propose_heuristic, propose_oracle, HeuristicConfig};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_GENERATION: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_NO_PROPOSALS: u8 = 5;

/// Range overrides on top of the built-in generator defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcgenOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_range: Option<[f64; 2]>,
    /// `category -> parameter -> [low, high]`.
    pub ranges: BTreeMap<String, BTreeMap<String, [f64; 2]>>,
}

impl ProcgenOverrides {
    pub fn resolve(&self) -> Result<ProcgenConfig, Error> {
        let mut cfg = ProcgenConfig::default();
        if let Some(s) = self.scale_range {
            cfg.scale_range = s;
        }
        for (cat, params) in &self.ranges {
            for (key, range) in params {
                cfg.set_range(cat, key, *range)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProposerKind {
    #[default]
    Oracle,
    Heuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RefinerKind {
    #[default]
    Model,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposerSection {
    pub kind: ProposerKind,
    pub samples: usize,
    pub blocked: Vec<usize>,
    pub heuristic: HeuristicConfig,
}

impl Default for ProposerSection {
    fn default() -> Self {
        ProposerSection { kind: ProposerKind::Oracle, samples: 1, blocked: Vec::new(), heuristic: HeuristicConfig::default() }
    }
}

/// Every knob of a run; each section falls back to its defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub procgen: ProcgenOverrides,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub proposer: ProposerSection,
    pub inference: DenoiseOptions,
    pub tolerances: Tolerances,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => Self::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[derive(Debug, Parser)]
#[command(name = "placelab", version, about = "Placement datasets, diffusion pose refinement and metrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate objects, placements and scenes.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a pose refiner on a dataset's train split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample placements for dataset scenes.
    Infer {
        #[arg(long)]
        dataset: PathBuf,
        /// Required for the model refiner.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict to these scene indices.
        #[arg(long, value_delimiter = ',')]
        scene: Vec<usize>,
        /// Split to run when no scene is given.
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long, value_enum)]
        proposer: Option<ProposerKind>,
        #[arg(long, value_enum, default_value_t = RefinerKind::Model)]
        refiner: RefinerKind,
        /// Samples per proposal.
        #[arg(long)]
        samples: Option<usize>,
        /// Slot indices hidden from the oracle proposer.
        #[arg(long, value_delimiter = ',')]
        blocked: Option<Vec<usize>>,
        /// Keep the denoising trace of every sample.
        #[arg(long)]
        trace: bool,
    },
    /// Score predictions against a dataset.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Meters; defaults to each slot's clearance.
        #[arg(long)]
        tolerance_translation: Option<f64>,
        /// Degrees.
        #[arg(long)]
        tolerance_axis: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

/// A command failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Failure { code, message: message.to_string() }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_CONFIG, e)
}

/// Exit code for library errors outside the command-specific cases.
fn classify(e: Error) -> Failure {
    let code = match e {
        Error::NanLoss { .. } | Error::NonFiniteActivation { .. } | Error::NonFiniteStep { .. } => EXIT_NUMERIC,
        Error::Generation { .. } => EXIT_GENERATION,
        Error::NoPlacements => EXIT_NO_PROPOSALS,
        _ => EXIT_CONFIG,
    };
    Failure::new(code, e)
}

fn write_echo(out: &Path, config: &RunConfig) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(|e| config_err(Error::io(out, e)))?;
    let p = out.join("run_config.toml");
    std::fs::write(&p, config.to_toml()).map_err(|e| config_err(Error::io(&p, e)))
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    read_dataset(dir).map_err(config_err)
}

pub fn cmd_gen(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config).map_err(config_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let procgen = cfg.procgen.resolve().map_err(config_err)?;
    cfg.dataset.validate().map_err(config_err)?;
    let ds = generate_dataset(&cfg.dataset, &procgen, cfg.seed).map_err(|e| match e {
        Error::Config(_) => config_err(e),
        other => Failure::new(EXIT_GENERATION, other),
    })?;
    write_dataset(&ds, out).map_err(|e| Failure::new(EXIT_GENERATION, e))?;
    write_echo(out, &cfg)?;
    for task in Task::ALL {
        eprintln!(
            "{task:?}: {} train, {} val",
            ds.manifest.train_counts.get(task),
            ds.manifest.val_counts.get(task)
        );
    }
    Ok(())
}

pub fn cmd_train(dataset: &Path, config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config).map_err(config_err)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.model.validate().map_err(config_err)?;
    cfg.train.validate().map_err(config_err)?;
    let ds = load_dataset(dataset)?;
    let model = PoseModel::new(cfg.model.clone(), cfg.train.seed).map_err(config_err)?;
    write_echo(out, &cfg)?;
    let every = (cfg.train.total_iterations / 40).max(1);
    let last = cfg.train.total_iterations - 1;
    let result = train(&ds, model, &cfg.train, |row| {
        if row.iteration % every == 0 || row.iteration == last {
            eprintln!("iteration {} loss {:.5} lr {:.3e}", row.iteration, row.total, row.lr);
        }
    })
    .map_err(classify)?;
    write_loss_csv(&result.losses, &out.join("loss.csv")).map_err(config_err)?;
    Checkpoint::from(result).save(&out.join("checkpoint.bin")).map_err(config_err)?;
    Ok(())
}

/// Options of [`cmd_infer`] beyond the run configuration.
#[derive(Debug, Clone, Default)]
pub struct InferArgs {
    pub dataset: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub scenes: Vec<usize>,
    pub split: Option<Split>,
    pub proposer: Option<ProposerKind>,
    pub refiner: RefinerKind,
    pub samples: Option<usize>,
    pub blocked: Option<Vec<usize>>,
    pub trace: bool,
}

pub fn cmd_infer(args: &InferArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(args.config.as_deref()).map_err(config_err)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(p) = args.proposer {
        cfg.proposer.kind = p;
    }
    if let Some(n) = args.samples {
        cfg.proposer.samples = n;
    }
    if let Some(b) = &args.blocked {
        cfg.proposer.blocked = b.clone();
    }
    let ds = load_dataset(&args.dataset)?;
    let model = match args.refiner {
        RefinerKind::Model => {
            let path = args.checkpoint.as_deref().ok_or_else(|| config_err("--checkpoint is required for the model refiner"))?;
            Some(Checkpoint::load(path).map_err(config_err)?.model)
        }
        RefinerKind::Oracle => None,
    };
    let scenes: Vec<usize> = if args.scenes.is_empty() {
        ds.scenes.iter().filter(|s| args.split.is_none_or(|sp| s.split == sp)).map(|s| s.index).collect()
    } else {
        args.scenes.clone()
    };
    if let Some(bad) = scenes.iter().find(|&&i| i >= ds.scenes.len()) {
        return Err(config_err(format!("scene {bad} does not exist")));
    }
    write_echo(&args.out, &cfg)?;
    let mut predictions = Vec::new();
    let mut any_proposals = false;
    for &si in &scenes {
        let scene = &ds.scenes[si];
        let base = ds.base_of(scene);
        let proposals = match cfg.proposer.kind {
            ProposerKind::Oracle => match propose_oracle(base, &crate::geometry::RigidTransform::IDENTITY, &cfg.proposer.blocked) {
                Ok(p) => p,
                Err(Error::NoPlacements) => Vec::new(),
                Err(e) => return Err(classify(e)),
            },
            ProposerKind::Heuristic => {
                let hint = base.slots[scene.sample.slot_index].slot_type;
                propose_heuristic(&scene.p_b, hint, &cfg.proposer.heuristic).map_err(classify)?
            }
        };
        if proposals.is_empty() {
            eprintln!("scene {si}: no proposals");
            continue;
        }
        any_proposals = true;
        let locations: Vec<_> = proposals.iter().map(|p| p.location).collect();
        let oracle;
        let refiner: &dyn Refiner = match &model {
            Some(m) => m,
            None => {
                oracle = OracleRefiner::new(base, ds.target_of(scene), &scene.p_c).map_err(classify)?;
                &oracle
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x1f, si as u64));
        let out = sample_poses(refiner, scene, &locations, cfg.proposer.samples, &cfg.inference, args.trace, &mut rng)
            .map_err(classify)?;
        for w in &out.warnings {
            eprintln!("{w}");
        }
        predictions.extend(out.samples.into_iter().map(|s| Prediction {
            scene_index: si,
            proposal_index: s.proposal_index,
            sample_index: s.sample_index,
            location: s.location,
            transform: s.transform,
            trace: s.trace,
        }));
    }
    if !any_proposals {
        return Err(Failure::new(EXIT_NO_PROPOSALS, "the proposer found no placements in any scene"));
    }
    let file = PredictionFile { seed: cfg.seed, predictions };
    let p = args.out.join("preds.json");
    let text = serde_json::to_string_pretty(&file).map_err(|e| config_err(Error::from(e)))?;
    std::fs::write(&p, text).map_err(|e| config_err(Error::io(&p, e)))?;
    eprintln!("{} predictions over {} scenes", file.predictions.len(), scenes.len());
    Ok(())
}

pub fn cmd_eval(
    predictions: &Path,
    dataset: &Path,
    config: Option<&Path>,
    out: &Path,
    tolerance_translation: Option<f64>,
    tolerance_axis_deg: Option<f64>,
) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config).map_err(config_err)?;
    if let Some(t) = tolerance_translation {
        cfg.tolerances.translation = Some(t);
    }
    if let Some(a) = tolerance_axis_deg {
        cfg.tolerances.axis = a.to_radians();
    }
    cfg.tolerances.validate().map_err(config_err)?;
    let text = std::fs::read_to_string(predictions).map_err(|e| config_err(Error::io(predictions, e)))?;
    let file: PredictionFile = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", predictions.display())))?;
    if file.predictions.is_empty() {
        return Err(config_err("prediction file is empty"));
    }
    let ds = load_dataset(dataset)?;
    let result = evaluate(&file.predictions, &ds, &cfg.tolerances, &cfg.eval).map_err(config_err)?;
    write_echo(out, &cfg)?;
    write_reports(&result, out).map_err(config_err)?;
    let s = &result.summary;
    eprintln!(
        "success {:.3}, coverage {:.3}, median errors {:.4} m / {:.2} deg",
        s.success_rate,
        s.final_coverage,
        s.median_translation_error,
        s.median_rotation_error.to_degrees()
    );
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { config, out, seed } => cmd_gen(config.as_deref(), &out, seed),
        Command::Train { dataset, config, out, seed } => cmd_train(&dataset, config.as_deref(), &out, seed),
        Command::Infer { dataset, checkpoint, config, out, seed, scene, split, proposer, refiner, samples, blocked, trace } => {
            cmd_infer(&InferArgs {
                dataset,
                checkpoint,
                config,
                out,
                seed,
                scenes: scene,
                split: match split {
                    SplitArg::Train => Some(Split::Train),
                    SplitArg::Val => Some(Split::Val),
                    SplitArg::All => None,
                },
                proposer,
                refiner,
                samples,
                blocked,
                trace,
            })
        }
        Command::Eval { predictions, dataset, config, out, tolerance_translation, tolerance_axis } => {
            cmd_eval(&predictions, &dataset, config.as_deref(), &out, tolerance_translation, tolerance_axis)
        }
    }
}

/// Parses `std::env::args`, runs the command and maps failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
