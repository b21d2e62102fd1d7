//! Command-line surface: eight subcommands over the pipeline, a flat-key
//! config file with flag overrides, machine-readable JSON on stdout, and
//! a single error-JSON line on stderr with stable exit codes (0 ok,
//! 1 user error, 2 internal error).

use std::path::{Path, PathBuf};

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::canon::{canonical_form, CanonError, CanonMethod};
use crate::config::{ConfigError, RunConfig};
use crate::dataset::{
    load_dataset, save_dataset, split, DatasetError, LabeledCrystal, PredictionRecord,
    TargetRecord,
};
use crate::graph::{AtomEmbeddingTable, GraphParams, DEFAULT_RBF_C};
use crate::harness::{
    augment_testset, evaluate, perturbation_study, predict_all, synth_dataset, training_samples,
    verify_equivariance, HarnessError, Pipeline, SynthConfig, REPORT_SCHEMA,
};
use crate::predictor::{self, PredictorError, PredictorModel};
use crate::tensor::{CrystalSystem, SymmetryMask, TensorError, TensorKind};
use crate::Mat3;

const USER_ERROR: i32 = 1;
const INTERNAL_ERROR: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Canon(#[from] CanonError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("failed to write {path}: {source}")]
    OutputIo {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// Numeric failures inside training are ours; everything else traces
    /// back to the invocation or its inputs.
    fn exit_code(&self) -> i32 {
        let non_finite = matches!(
            self,
            CliError::Predictor(PredictorError::NonFiniteLoss { .. })
                | CliError::Harness(HarnessError::Predictor(PredictorError::NonFiniteLoss {
                    ..
                }))
        );
        if non_finite {
            INTERNAL_ERROR
        } else {
            USER_ERROR
        }
    }

    fn label(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Dataset(_) => "dataset",
            CliError::Canon(_) => "canon",
            CliError::Harness(_) => "pipeline",
            CliError::Predictor(_) => "predictor",
            CliError::Tensor(_) => "tensor",
            CliError::OutputIo { .. } => "io",
        }
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    detail: String,
    code: i32,
}

fn emit_error(error: &str, detail: String, code: i32) {
    let line = ErrorLine {
        error,
        detail,
        code,
    };
    eprintln!(
        "{}",
        serde_json::to_string(&line).expect("error serialization cannot fail")
    );
}

#[derive(Debug, Parser)]
#[command(
    name = "crystensor",
    version,
    about = "O(3)-equivariant crystal tensor property prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a backbone on a labeled dataset and write a checkpoint.
    Train(TrainArgs),
    /// Equivariant predictions for every record, in Voigt form.
    Predict(PredictArgs),
    /// Mean Fnorm error and EwT 25/10/5 for a model over a dataset.
    Evaluate(EvaluateArgs),
    /// Check h(g·M) = ρ(g)·h(M) per sample with fresh random g.
    VerifyEquivariance(VerifyArgs),
    /// Rotate every sample (crystal and label) by a fresh random g.
    Augment(AugmentArgs),
    /// Lattice-perturbation drift, polar vs QR canonicalization.
    Perturb(PerturbArgs),
    /// Generate a synthetic dataset with closed-form equivariant labels.
    Synth(SynthArgs),
    /// Canonical lattices and the rotations that produce them.
    Canon(CanonArgs),
}

/// Everything needed to rebuild a prediction pipeline around a saved
/// checkpoint. Graph parameters must match the ones used in training.
#[derive(Debug, Args)]
struct PipelineArgs {
    /// Trained checkpoint JSON.
    #[arg(long)]
    model: PathBuf,
    /// Atom embedding table JSON; defaults to one-hot over Z = 1..=92.
    #[arg(long)]
    atom_table: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    k_neighbors: usize,
    #[arg(long, default_value_t = 12)]
    max_offset_shells: i32,
    #[arg(long, default_value_t = DEFAULT_RBF_C)]
    rbf_c: f64,
    /// Canonicalization method: polar | qr.
    #[arg(long, default_value = "polar")]
    canon_method: CanonMethod,
}

impl PipelineArgs {
    fn build(&self) -> Result<Pipeline, CliError> {
        let model = PredictorModel::load(&self.model)?;
        let table = match &self.atom_table {
            Some(path) => AtomEmbeddingTable::from_path(path)
                .map_err(|e| CliError::Usage(e.to_string()))?,
            None => AtomEmbeddingTable::one_hot(),
        };
        let mut pipeline = Pipeline::new(model, table)?.with_method(self.canon_method);
        pipeline.graph_params = GraphParams {
            k_neighbors: self.k_neighbors,
            max_offset_shells: self.max_offset_shells,
        };
        pipeline.rbf_c = self.rbf_c;
        Ok(pipeline)
    }
}

/// Config-file keys that may be overridden from the command line. Unset
/// flags leave the config value in place.
#[derive(Debug, Args)]
struct Overrides {
    /// Property kind: dielectric | piezoelectric | elastic.
    #[arg(long)]
    kind: Option<TensorKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    node_dim: Option<usize>,
    #[arg(long)]
    edge_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Output clamp: none | non_negative.
    #[arg(long)]
    output_clamp: Option<crate::predictor::OutputClamp>,
    /// Mask mode: off | weighted | independent_only.
    #[arg(long)]
    mask_mode: Option<crate::predictor::MaskMode>,
    /// Built-in mask selector (requires a non-off mask mode).
    #[arg(long)]
    crystal_system: Option<CrystalSystem>,
    /// Mask JSON file (alternative to --crystal-system).
    #[arg(long)]
    mask_path: Option<PathBuf>,
    #[arg(long)]
    atom_table: Option<PathBuf>,
    /// Canonicalization method: polar | qr.
    #[arg(long)]
    canon_method: Option<CanonMethod>,
}

impl Overrides {
    fn apply_to(&self, config: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() {
                    config.$field = v.into();
                })*
            };
        }
        set!(kind, seed, epochs, batch_size, lr0, weight_decay);
        set!(node_dim, edge_dim, layers, output_clamp, mask_mode);
        set!(canon_method);
        if let Some(v) = &self.crystal_system {
            config.crystal_system = Some(*v);
        }
        if let Some(v) = &self.mask_path {
            config.mask_path = Some(v.clone());
        }
        if let Some(v) = &self.atom_table {
            config.atom_table_path = Some(v.clone());
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration JSON (flat keys; flags override).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Labeled dataset (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Loss-history JSON output path.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Use the published model dimensions and epoch count for the kind.
    #[arg(long)]
    paper_scale: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    data: PathBuf,
    /// Predictions output path (JSONL).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PerturbArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    data: PathBuf,
    /// Crystal id within the dataset.
    #[arg(long)]
    id: String,
    /// Either "start..end" stepped by 0.05, or a comma-separated list.
    #[arg(long, default_value = "0.05..0.40")]
    ratios: String,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Property kind: dielectric | piezoelectric | elastic.
    #[arg(long)]
    kind: TensorKind,
    /// Number of samples.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Atoms per crystal are drawn from 1..=max_atoms.
    #[arg(long, default_value_t = 6)]
    max_atoms: usize,
    /// Constrain labels to the built-in mask for this crystal system.
    #[arg(long)]
    crystal_system: Option<CrystalSystem>,
}

#[derive(Debug, Args)]
struct CanonArgs {
    #[arg(long)]
    data: PathBuf,
    /// Canonical-form records output path (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Canonicalization method: polar | qr.
    #[arg(long, default_value = "polar")]
    method: CanonMethod,
}

/// Entry point used by `main`; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            return match err.kind() {
                ClapErrorKind::DisplayHelp
                | ClapErrorKind::DisplayVersion
                | ClapErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = err.print();
                    0
                }
                _ => {
                    emit_error("usage", err.to_string(), USER_ERROR);
                    USER_ERROR
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            let code = err.exit_code();
            emit_error(err.label(), err.to_string(), code);
            code
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::VerifyEquivariance(args) => cmd_verify(args),
        Command::Augment(args) => cmd_augment(args),
        Command::Perturb(args) => cmd_perturb(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Canon(args) => cmd_canon(args),
    }
}

fn load_samples(path: &Path) -> Result<Vec<LabeledCrystal>, CliError> {
    let loaded = load_dataset(path)?;
    for warning in &loaded.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(loaded.samples)
}

fn write_output(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::OutputIo {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serialization cannot fail");
    text.push('\n');
    write_output(path, &text)
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("report serialization cannot fail")
    );
}

#[derive(Serialize)]
struct TrainSummary {
    schema: &'static str,
    checkpoint: String,
    kind: TensorKind,
    train_samples: usize,
    val_samples: usize,
    test_samples: usize,
    epochs: usize,
    final_train_loss: f64,
    final_val_loss: Option<f64>,
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if args.paper_scale {
        config.apply_paper_scale();
    }
    args.overrides.apply_to(&mut config);
    config.validate()?;

    let samples = load_samples(&args.data)?;
    for s in &samples {
        if s.property.kind != config.kind {
            return Err(TensorError::KindMismatch {
                expected: config.kind,
                got: s.property.kind,
            }
            .into());
        }
    }
    let (train_split, val_split, test_split) =
        split(&samples, config.split_ratios(), config.seed)?;

    let table = config.atom_table()?;
    let model_config = config.model_config()?;
    let graph_params = config.graph_params();
    let train_set = training_samples(
        &train_split,
        &model_config,
        &table,
        &graph_params,
        config.rbf_c,
        config.canon_method,
    )?;
    let val_set = training_samples(
        &val_split,
        &model_config,
        &table,
        &graph_params,
        config.rbf_c,
        config.canon_method,
    )?;

    let mut model = PredictorModel::new(model_config)?;
    let history = predictor::train(&mut model, &train_set, &val_set, &config.train_config())?;
    model.save(&args.out)?;
    if let Some(path) = &args.history {
        write_json(path, &history)?;
    }

    print_json(&TrainSummary {
        schema: REPORT_SCHEMA,
        checkpoint: args.out.display().to_string(),
        kind: config.kind,
        train_samples: train_split.len(),
        val_samples: val_split.len(),
        test_samples: test_split.len(),
        epochs: config.epochs,
        final_train_loss: history.train_loss.last().copied().unwrap_or(f64::NAN),
        final_val_loss: history.val_loss.last().copied(),
    });
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let pipeline = args.pipeline.build()?;
    let samples = load_samples(&args.data)?;
    let predictions = predict_all(&pipeline, &samples)?;

    let mut out = String::new();
    for (sample, prediction) in samples.iter().zip(&predictions) {
        let record = PredictionRecord {
            schema: crate::dataset::DATASET_SCHEMA.to_string(),
            id: sample.crystal.id.clone(),
            target: TargetRecord {
                kind: prediction.kind,
                voigt: prediction.voigt.clone(),
                units: prediction.units.clone(),
            },
        };
        out.push_str(&serde_json::to_string(&record).expect("record serialization cannot fail"));
        out.push('\n');
    }
    write_output(&args.out, &out)?;
    print_json(&serde_json::json!({
        "schema": REPORT_SCHEMA,
        "predictions": predictions.len(),
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let pipeline = args.pipeline.build()?;
    let samples = load_samples(&args.data)?;
    let table = evaluate(&pipeline, &samples)?;
    print_json(&table);
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<(), CliError> {
    let pipeline = args.pipeline.build()?;
    let samples = load_samples(&args.data)?;
    let report = verify_equivariance(&pipeline, &samples, args.seed)?;
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    print_json(&report);
    Ok(())
}

fn cmd_augment(args: AugmentArgs) -> Result<(), CliError> {
    let samples = load_samples(&args.data)?;
    let augmented = augment_testset(&samples, args.seed)?;
    save_dataset(&augmented, &args.out)?;
    print_json(&serde_json::json!({
        "schema": REPORT_SCHEMA,
        "samples": augmented.len(),
        "seed": args.seed,
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

fn parse_ratios(spec: &str) -> Result<Vec<f64>, CliError> {
    let usage = |reason: String| CliError::Usage(format!("--ratios {spec:?}: {reason}"));
    let number = |token: &str| {
        token
            .trim()
            .parse::<f64>()
            .map_err(|_| usage(format!("{token:?} is not a number")))
    };
    if let Some((a, b)) = spec.split_once("..") {
        let (start, end) = (number(a)?, number(b)?);
        if end < start {
            return Err(usage("range end precedes start".to_string()));
        }
        let mut out = Vec::new();
        for i in 0.. {
            let r = start + 0.05 * f64::from(i);
            if r > end + 1e-9 {
                break;
            }
            out.push(r);
        }
        Ok(out)
    } else {
        spec.split(',').map(number).collect()
    }
}

fn cmd_perturb(args: PerturbArgs) -> Result<(), CliError> {
    let pipeline = args.pipeline.build()?;
    let samples = load_samples(&args.data)?;
    let sample = samples
        .iter()
        .find(|s| s.crystal.id == args.id)
        .ok_or_else(|| CliError::Usage(format!("no record with id {:?} in the dataset", args.id)))?;
    let ratios = parse_ratios(&args.ratios)?;
    let report = perturbation_study(&pipeline, &sample.crystal, &ratios)?;
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    print_json(&report);
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let mask = match args.crystal_system {
        Some(system) => Some(SymmetryMask::builtin(args.kind, system).ok_or_else(|| {
            CliError::Usage(format!(
                "no built-in {} mask for the {system} system",
                args.kind
            ))
        })?),
        None => None,
    };
    let mut config = SynthConfig::new(args.kind, args.n, args.seed);
    config.max_atoms = args.max_atoms;
    config.mask = mask;
    let samples = synth_dataset(&config)?;
    save_dataset(&samples, &args.out)?;
    print_json(&serde_json::json!({
        "schema": REPORT_SCHEMA,
        "kind": args.kind,
        "samples": samples.len(),
        "seed": args.seed,
        "out": args.out.display().to_string(),
    }));
    Ok(())
}

/// One canonicalization result: the canonical lattice H and the rotation
/// Q with L = QH.
#[derive(Serialize)]
struct CanonRecord {
    schema: &'static str,
    id: String,
    method: CanonMethod,
    lattice: Mat3,
    q: Mat3,
    det_q: f64,
}

fn cmd_canon(args: CanonArgs) -> Result<(), CliError> {
    let samples = load_samples(&args.data)?;
    let mut out = String::new();
    for s in &samples {
        let (canonical, q) = canonical_form(&s.crystal, args.method)?;
        let record = CanonRecord {
            schema: REPORT_SCHEMA,
            id: s.crystal.id.clone(),
            method: args.method,
            lattice: canonical.lattice,
            q: *q.matrix(),
            det_q: q.det(),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serialization cannot fail"));
        out.push('\n');
    }
    write_output(&args.out, &out)?;
    print_json(&serde_json::json!({
        "schema": REPORT_SCHEMA,
        "records": samples.len(),
        "method": args.method,
        "out": args.out.display().to_string(),
    }));
    Ok(())
}
