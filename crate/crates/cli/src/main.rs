//! Pipeline driver for the vidpref testbed.
//!
//! Five subcommands cover the full experiment lifecycle: `gen` materializes
//! the world and datasets, `train` fits a model (supervised or preference),
//! `eval` scores a checkpoint on saved suites, `prefdata` mines offline
//! preference pairs with the rule-based judge, and `sweep` runs one
//! preference run per augmentation family. Every command reads a TOML
//! config, honors a `--seed` override, targets its own output directory,
//! and finishes by writing a `manifest.json` recording the canonical config,
//! its hash, input file hashes, output paths, and wall-clock timings. Given
//! the same config and seed, every output except the manifest (which carries
//! timings) is byte-identical across reruns.
//!
//! Exit codes: 0 success, 2 bad usage or malformed inputs, 3 numeric
//! divergence, 1 anything else.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use vidpref::benchmark::{
    build_suites, construct_offline_preference, evaluate, sweep_augmentations, BenchmarkError,
    PreferenceRecord, Suite, SuiteSizes,
};
use vidpref::config::ExperimentConfig;
use vidpref::model::{ModelParams, PolicyPair};
use vidpref::training::{run_preference, run_sft, PreferenceData, TrainingError, TrainingMethod};
use vidpref::world::{
    build_training_set, generate_library, read_jsonl, write_jsonl, ExampleRecord, VideoLibrary,
};

/// Bumped when any output file format changes shape.
const ARTIFACT_VERSION: u32 = 1;

const LIBRARY_FILE: &str = "library.json";
const EVAL_LIBRARY_FILE: &str = "library_eval.json";
const TRAIN_FILE: &str = "train.jsonl";
const HALLUC_ITEMS: &str = "suite_halluc.jsonl";
const HALLUC_INDEX: &str = "suite_halluc_index.json";
const GENERAL_ITEMS: &str = "suite_general.jsonl";
const GENERAL_INDEX: &str = "suite_general_index.json";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOG_FILE: &str = "log.jsonl";
const PREFERENCE_FILE: &str = "preference.jsonl";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
enum CliError {
    /// Bad flags, malformed configs, missing or corrupt input files.
    #[error("{0}")]
    Usage(String),
    /// Training left the finite regime.
    #[error("{0}")]
    Numeric(String),
    /// Filesystem trouble unrelated to what the user asked for.
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn from_training(e: TrainingError) -> CliError {
    match e {
        TrainingError::Aborted { step, reason, .. } => {
            CliError::Numeric(format!("training aborted at step {step}: {reason}"))
        }
        TrainingError::NonFiniteGradient { step } => {
            CliError::Numeric(format!("non-finite gradient at optimizer step {step}"))
        }
        other => CliError::Usage(other.to_string()),
    }
}

fn from_benchmark(e: BenchmarkError) -> CliError {
    match e {
        BenchmarkError::Training(inner) => from_training(*inner),
        other => CliError::Usage(other.to_string()),
    }
}

#[derive(Parser)]
#[command(name = "vidpref", version, about = "Deterministic video-preference pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML). Unknown keys are rejected.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if absent. Each run should get its own.
    #[arg(long)]
    out: PathBuf,
    /// Replaces the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the video libraries, training set, and evaluation suites.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the method named by the config's `method` key.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding `gen` outputs (and, for preference methods, the
        /// supervised checkpoint under `sft/` and for dpo the mined pairs
        /// under `prefdata/`).
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint on saved evaluation suites.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Model checkpoint to score.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding the suites and the evaluation library.
        #[arg(long)]
        suites: PathBuf,
    },
    /// Run one preference run per augmentation family and report deltas.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Mine offline chosen/rejected pairs with the rule-based judge.
    Prefdata {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint that decodes the candidate answers.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Provenance record written by every command.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    artifact_version: u32,
    seed: u64,
    /// Canonical serialized config; `config_hash` is its SHA-256.
    config: String,
    config_hash: String,
    /// SHA-256 of every input file read, keyed by path as given.
    inputs: BTreeMap<String, String>,
    /// Files this run produced, relative to its output directory.
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
    timings: Timings,
}

#[derive(Serialize)]
struct Timings {
    started_unix_ms: u128,
    wall_ms: u128,
}

/// Accumulates manifest fields while a command runs.
struct ManifestBuilder {
    command: &'static str,
    started: u128,
    clock: Instant,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    warnings: Vec<String>,
}

impl ManifestBuilder {
    fn new(command: &'static str) -> ManifestBuilder {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or_default();
        ManifestBuilder {
            command,
            started,
            clock: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Hashes an input file that the command is about to read.
    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path)
            .map_err(|e| usage(format!("cannot read input {}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }

    fn write(self, cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            artifact_version: ARTIFACT_VERSION,
            seed: cfg.seed,
            config: cfg.canonical_json(),
            config_hash: cfg.hash(),
            inputs: self.inputs,
            outputs: self.outputs,
            warnings: self.warnings,
            timings: Timings { started_unix_ms: self.started, wall_ms: self.clock.elapsed().as_millis() },
        };
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Io(format!("manifest serialization: {e}")))?;
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    // toml's serde errors already name unknown and missing keys.
    let mut cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| usage(format!("invalid config: {e}")))?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn ensure_out_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// First existing candidate path, or a usage error naming all of them.
fn find_input(candidates: &[PathBuf], what: &str) -> Result<PathBuf, CliError> {
    for c in candidates {
        if c.is_file() {
            return Ok(c.clone());
        }
    }
    let tried: Vec<String> = candidates.iter().map(|p| p.display().to_string()).collect();
    Err(usage(format!("no {what} found; looked for {}", tried.join(", "))))
}

fn load_checkpoint(path: &Path) -> Result<ModelParams, CliError> {
    ModelParams::load(path)
        .map_err(|e| usage(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn cmd_gen(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(&common.config, common.seed)?;
    ensure_out_dir(&common.out)?;
    let mut manifest = ManifestBuilder::new("gen");

    let library = generate_library(&cfg.world(), cfg.world_seed()).map_err(usage)?;
    let eval_library = generate_library(&cfg.world_eval(), cfg.eval_world_seed()).map_err(usage)?;
    let rows = build_training_set(&library, cfg.train_examples, cfg.mix(), cfg.dataset_seed())
        .map_err(usage)?;
    let sizes = SuiteSizes { halluc_pairs: cfg.halluc_pairs, general_items: cfg.general_items };
    let (halluc, general) =
        build_suites(&eval_library, cfg.suite_seed(), sizes).map_err(from_benchmark)?;

    let out = &common.out;
    library.save(&out.join(LIBRARY_FILE)).map_err(|e| io_err(out, e))?;
    eval_library.save(&out.join(EVAL_LIBRARY_FILE)).map_err(|e| io_err(out, e))?;
    write_jsonl(&out.join(TRAIN_FILE), &rows).map_err(|e| io_err(out, e))?;
    halluc
        .save(&out.join(HALLUC_ITEMS), &out.join(HALLUC_INDEX))
        .map_err(|e| CliError::Io(e.to_string()))?;
    general
        .save(&out.join(GENERAL_ITEMS), &out.join(GENERAL_INDEX))
        .map_err(|e| CliError::Io(e.to_string()))?;

    for name in [
        LIBRARY_FILE,
        EVAL_LIBRARY_FILE,
        TRAIN_FILE,
        HALLUC_ITEMS,
        HALLUC_INDEX,
        GENERAL_ITEMS,
        GENERAL_INDEX,
    ] {
        manifest.output(name);
    }
    manifest.write(&cfg, out)
}

fn cmd_train(common: &CommonArgs, data: &Path) -> Result<(), CliError> {
    let cfg = load_config(&common.config, common.seed)?;
    ensure_out_dir(&common.out)?;
    let mut manifest = ManifestBuilder::new("train");

    let library_path = data.join(LIBRARY_FILE);
    manifest.input(&library_path)?;
    let library = VideoLibrary::load(&library_path).map_err(usage)?;

    let log = match cfg.method {
        TrainingMethod::Sft => {
            let train_path = data.join(TRAIN_FILE);
            manifest.input(&train_path)?;
            let rows: Vec<ExampleRecord> = read_jsonl(&train_path).map_err(usage)?;
            let (_, log) =
                run_sft(&library, &rows, &cfg.model(), &cfg.sft_training(), Some(&common.out))
                    .map_err(from_training)?;
            log
        }
        method => {
            let ckpt_path = find_input(
                &[data.join("sft").join(CHECKPOINT_FILE), data.join(CHECKPOINT_FILE)],
                "supervised checkpoint (train with method \"sft\" first)",
            )?;
            manifest.input(&ckpt_path)?;
            let pair = PolicyPair::from_policy(load_checkpoint(&ckpt_path)?);
            let train_cfg = cfg.preference_training(method).map_err(usage)?;
            let (_, log) = match method {
                TrainingMethod::Dpo => {
                    let pref_path = find_input(
                        &[data.join("prefdata").join(PREFERENCE_FILE), data.join(PREFERENCE_FILE)],
                        "preference data (run `prefdata` first)",
                    )?;
                    manifest.input(&pref_path)?;
                    let pairs: Vec<PreferenceRecord> = read_jsonl(&pref_path).map_err(usage)?;
                    run_preference(
                        &library,
                        pair,
                        PreferenceData::Offline(&pairs),
                        &train_cfg,
                        Some(&common.out),
                    )
                    .map_err(from_training)?
                }
                _ => {
                    let train_path = data.join(TRAIN_FILE);
                    manifest.input(&train_path)?;
                    let rows: Vec<ExampleRecord> = read_jsonl(&train_path).map_err(usage)?;
                    run_preference(
                        &library,
                        pair,
                        PreferenceData::Online(&rows),
                        &train_cfg,
                        Some(&common.out),
                    )
                    .map_err(from_training)?
                }
            };
            log
        }
    };

    log.save_jsonl(&common.out.join(LOG_FILE)).map_err(|e| CliError::Io(e.to_string()))?;
    manifest.output(LOG_FILE);
    // The training loop wrote the final and per-epoch checkpoints; list what
    // actually landed so every file stays reachable from the manifest.
    let mut bins: Vec<String> = fs::read_dir(&common.out)
        .map_err(|e| io_err(&common.out, e))?
        .filter_map(|entry| entry.ok())
        .filter_map(|entry| entry.file_name().into_string().ok())
        .filter(|name| name.ends_with(".bin"))
        .collect();
    bins.sort();
    for name in bins {
        manifest.output(&name);
    }
    manifest.write(&cfg, &common.out)
}

/// Accuracy summary for one checkpoint over the paired and general suites.
#[derive(Serialize)]
struct EvalMetrics {
    halluc_pair_acc: f64,
    halluc_item_acc: f64,
    general_acc: f64,
}

fn cmd_eval(common: &CommonArgs, checkpoint: &Path, suites: &Path) -> Result<(), CliError> {
    let cfg = load_config(&common.config, common.seed)?;
    ensure_out_dir(&common.out)?;
    let mut manifest = ManifestBuilder::new("eval");

    manifest.input(checkpoint)?;
    let params = load_checkpoint(checkpoint)?;

    let library_path = suites.join(EVAL_LIBRARY_FILE);
    manifest.input(&library_path)?;
    let library = VideoLibrary::load(&library_path).map_err(usage)?;

    let halluc_items = suites.join(HALLUC_ITEMS);
    let halluc_index = suites.join(HALLUC_INDEX);
    let general_items = suites.join(GENERAL_ITEMS);
    let general_index = suites.join(GENERAL_INDEX);
    for p in [&halluc_items, &halluc_index, &general_items, &general_index] {
        manifest.input(p)?;
    }
    let halluc = Suite::load(&halluc_items, &halluc_index).map_err(from_benchmark)?;
    let general = Suite::load(&general_items, &general_index).map_err(from_benchmark)?;

    let halluc_scores = evaluate(&params, &library, &halluc).map_err(from_benchmark)?;
    let general_scores = evaluate(&params, &library, &general).map_err(from_benchmark)?;
    let metrics = EvalMetrics {
        halluc_pair_acc: halluc_scores
            .pair_accuracy
            .ok_or_else(|| usage("hallucination suite has no pair index"))?,
        halluc_item_acc: halluc_scores.item_accuracy,
        general_acc: general_scores.item_accuracy,
    };

    let csv = format!(
        "halluc_pair_acc,halluc_item_acc,general_acc\n{},{},{}\n",
        metrics.halluc_pair_acc, metrics.halluc_item_acc, metrics.general_acc
    );
    let csv_path = common.out.join("metrics.csv");
    fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;
    let json_path = common.out.join("metrics.jsonl");
    let line = serde_json::to_string(&metrics)
        .map_err(|e| CliError::Io(format!("metrics serialization: {e}")))?;
    fs::write(&json_path, line + "\n").map_err(|e| io_err(&json_path, e))?;

    manifest.output("metrics.csv");
    manifest.output("metrics.jsonl");
    manifest.write(&cfg, &common.out)
}

fn cmd_sweep(common: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(&common.config, common.seed)?;
    ensure_out_dir(&common.out)?;
    let mut manifest = ManifestBuilder::new("sweep");

    let report = sweep_augmentations(&cfg).map_err(from_benchmark)?;

    let csv_path = common.out.join("report.csv");
    fs::write(&csv_path, report.to_csv()).map_err(|e| io_err(&csv_path, e))?;
    write_jsonl(&common.out.join("curves.jsonl"), &report.curve_lines())
        .map_err(|e| io_err(&common.out, e))?;
    let report_path = common.out.join("report.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Io(format!("report serialization: {e}")))?;
    fs::write(&report_path, text + "\n").map_err(|e| io_err(&report_path, e))?;

    manifest.output("report.csv");
    manifest.output("curves.jsonl");
    manifest.output("report.json");
    for w in &report.warnings {
        manifest.warn(w.clone());
    }
    for row in &report.rows {
        if let Some(err) = &row.error {
            manifest.warn(format!("run {} failed: {err}", row.spec));
        }
    }
    let completed = report.completed_runs;
    manifest.write(&cfg, &common.out)?;
    if completed == 0 {
        return Err(CliError::Numeric("no sweep run completed".into()));
    }
    Ok(())
}

fn cmd_prefdata(common: &CommonArgs, checkpoint: &Path) -> Result<(), CliError> {
    let cfg = load_config(&common.config, common.seed)?;
    ensure_out_dir(&common.out)?;
    let mut manifest = ManifestBuilder::new("prefdata");

    manifest.input(checkpoint)?;
    let params = load_checkpoint(checkpoint)?;
    let library = generate_library(&cfg.world(), cfg.world_seed()).map_err(usage)?;
    // Fresh rows, disjoint from the training draw by sub-seed.
    let rows = build_training_set(
        &library,
        cfg.prefdata_examples,
        cfg.mix(),
        cfg.prefdata_seed(),
    )
    .map_err(usage)?;
    let records = construct_offline_preference(&library, &rows, &params, cfg.prefdata_seed())
        .map_err(from_benchmark)?;
    if records.is_empty() {
        manifest.warn("no candidate scored below the acceptance threshold; output is empty");
    }
    write_jsonl(&common.out.join(PREFERENCE_FILE), &records)
        .map_err(|e| io_err(&common.out, e))?;
    manifest.output(PREFERENCE_FILE);
    manifest.write(&cfg, &common.out)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen { common } => cmd_gen(common),
        Command::Train { common, data } => cmd_train(common, data),
        Command::Eval { common, checkpoint, suites } => cmd_eval(common, checkpoint, suites),
        Command::Sweep { common } => cmd_sweep(common),
        Command::Prefdata { common, checkpoint } => cmd_prefdata(common, checkpoint),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
