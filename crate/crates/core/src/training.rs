//! Training loops: supervised warm start, offline preference tuning over
//! fixed chosen/rejected answer pairs, and online preference tuning that
//! manufactures rejected clips by augmentation at every step.
//!
//! All three loops share one driver: shuffle the dataset each epoch with a
//! seed derived from (run seed, epoch), walk it in batches, record one
//! [`StepRecord`] per update with the loss computed *before* the update, and
//! snapshot accuracy once per epoch. Augmentation randomness is drawn from a
//! per-(epoch, example) seed chain, so a run is a pure function of its
//! config and the library it trains on.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

use crate::augment::{
    build_candidate_set, instantiate, oracle_reject_label, AugKind, AugmentError,
    AugmentationSpec, CandidatePolicy, CandidateSet, RejectLabel,
};
use crate::benchmark::PreferenceRecord;
use crate::model::{
    decode_argmax, Gradients, Graph, ModelConfig, ModelError, ModelParams, PolicyPair,
};
use crate::objectives::{
    build_response_preference_loss, build_sft_loss, build_weighted_preference_loss,
    candidate_distances, prompt_weights, DistanceMode, ObjectiveError, WeightStrategy,
};
use crate::rng::{child_rng, child_seed, rng_from};
use crate::world::{
    render_features, write_jsonl, ExampleRecord, FeatureTensor, QAExample, TokenId, VideoClip,
    VideoLibrary, WorldError,
};

/// A step whose loss exceeds this (or stops being finite) aborts the run.
/// Preference losses spike when a pair's reward gap swings deep negative;
/// the sigmoid weight saturates toward 1 there, so such excursions carry a
/// maximal restoring gradient and usually recover. The bound only exists to
/// stop runs that are already beyond numeric repair.
pub const DIVERGENCE_LOSS_LIMIT: f64 = 200.0;

/// Rows probed for the per-epoch accuracy snapshot.
const EVAL_PROBE_ROWS: usize = 128;

/// Errors from configuration, data mismatches, and aborted runs.
#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training config `{key}`: {reason}")]
    Config { key: &'static str, reason: String },
    #[error("training data does not fit method {method:?}: {reason}")]
    Data { method: TrainingMethod, reason: String },
    #[error("training aborted at step {step}: {reason}")]
    Aborted { step: usize, reason: String, log: Box<RunLog> },
    #[error("non-finite gradient at optimizer step {step}")]
    NonFiniteGradient { step: usize },
    #[error("run logs in group `{group}` disagree on the step grid")]
    MismatchedSteps { group: String },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// The four training procedures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMethod {
    /// Supervised next-token training on ground-truth answers.
    Sft,
    /// Offline preference tuning: fixed pairs of answers to the same clip.
    Dpo,
    /// Online preference tuning against one augmented rejected clip.
    Vdpo,
    /// Online preference tuning against a weighted candidate set.
    Pami,
}

impl TrainingMethod {
    pub fn is_preference(&self) -> bool {
        !matches!(self, TrainingMethod::Sft)
    }

    pub fn is_online(&self) -> bool {
        matches!(self, TrainingMethod::Vdpo | TrainingMethod::Pami)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Learning-rate shape over the planned length of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Ramps linearly from the configured rate down to zero. Long memorizing
    /// runs plateau and then blow up under constant-rate single-example
    /// updates; the ramp freezes the plateau instead.
    LinearDecay,
}

/// Multiplier applied to the base rate before update `t` of `total`.
fn schedule_factor(schedule: LrSchedule, t: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => 1.0,
        LrSchedule::LinearDecay => (1.0 - t as f64 / total.max(1) as f64).max(0.0),
    }
}

/// Moment-decay settings; only read when the optimizer is Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// How the single-candidate online method picks its augmentation family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationChoice {
    /// Same family every step; parameters still re-drawn per step.
    Fixed(AugKind),
    /// A family drawn uniformly at every step.
    Random,
}

/// Everything a run depends on besides the library and the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub method: TrainingMethod,
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub adam: AdamParams,
    pub lr_schedule: LrSchedule,
    /// Global gradient-norm cap applied before every update; `None` disables
    /// clipping. Single-example steps occasionally spike late in training,
    /// and the cap keeps those spikes from ejecting the run.
    pub max_grad_norm: Option<f64>,
    /// Preference-loss sharpness; ignored by supervised runs.
    pub beta: f64,
    /// Rejected clips per step for the multi-candidate method.
    pub candidates: usize,
    pub weight_strategy: WeightStrategy,
    pub distance_mode: DistanceMode,
    /// Candidate assembly for the multi-candidate method.
    pub candidate_policy: CandidatePolicy,
    /// Family choice for the single-candidate method.
    pub augmentation: Option<AugmentationChoice>,
}

impl TrainingConfig {
    /// Supervised warm-start defaults.
    pub fn sft(seed: u64) -> TrainingConfig {
        TrainingConfig {
            method: TrainingMethod::Sft,
            seed,
            learning_rate: 1.5e-3,
            epochs: 50,
            batch_size: 1,
            optimizer: OptimizerKind::Adam,
            adam: AdamParams::default(),
            lr_schedule: LrSchedule::LinearDecay,
            max_grad_norm: Some(10.0),
            beta: 0.1,
            candidates: 1,
            weight_strategy: WeightStrategy::Far,
            distance_mode: DistanceMode::Output,
            candidate_policy: CandidatePolicy::Mixed,
            augmentation: None,
        }
    }

    /// Preference-stage defaults on top of [`TrainingConfig::sft`].
    ///
    /// The single-candidate method defaults to the same family the default
    /// candidate policy puts first, so the two methods differ only in bag
    /// size and weighting when compared on one dataset. The multi-candidate
    /// method defaults to a bag of two.
    pub fn preference(method: TrainingMethod, seed: u64) -> TrainingConfig {
        let mut cfg = TrainingConfig::sft(seed);
        cfg.method = method;
        cfg.learning_rate = 3e-4;
        cfg.epochs = 2;
        match method {
            TrainingMethod::Vdpo => {
                cfg.augmentation = Some(AugmentationChoice::Fixed(AugKind::DClip));
            }
            TrainingMethod::Pami => cfg.candidates = 2,
            _ => {}
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let err = |key, reason: String| Err(TrainingError::Config { key, reason });
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate", format!("must be finite and > 0, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return err("epochs", "need at least one epoch".into());
        }
        if self.batch_size == 0 {
            return err("batch_size", "need at least one example per step".into());
        }
        if self.candidates == 0 {
            return err("candidates", "need at least one rejected clip per step".into());
        }
        if self.method.is_preference() && !(self.beta > 0.0 && self.beta.is_finite()) {
            return err("beta", format!("preference methods need finite beta > 0, got {}", self.beta));
        }
        if self.method == TrainingMethod::Vdpo {
            if self.augmentation.is_none() {
                return err("augmentation", "the single-candidate method needs a family choice".into());
            }
            if self.candidates != 1 {
                return err(
                    "candidates",
                    format!("the single-candidate method uses exactly 1, got {}", self.candidates),
                );
            }
        }
        if let Some(cap) = self.max_grad_norm {
            if !(cap > 0.0 && cap.is_finite()) {
                return err("max_grad_norm", format!("cap must be finite and > 0, got {cap}"));
            }
        }
        if self.optimizer == OptimizerKind::Adam {
            let AdamParams { beta1, beta2, epsilon } = self.adam;
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
                return err("adam", format!("moment decays must lie in [0, 1), got {beta1} and {beta2}"));
            }
            if !(epsilon > 0.0 && epsilon.is_finite()) {
                return err("adam", format!("epsilon must be finite and > 0, got {epsilon}"));
            }
        }
        Ok(())
    }

    /// Hash of the canonical JSON form; stable across runs and processes.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// First and second Adam moments, index-aligned with the parameter tensors.
#[derive(Debug, Clone)]
pub struct OptState {
    pub step: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl OptState {
    pub fn new(config: &ModelConfig) -> OptState {
        let zeros: Vec<Array2<f64>> = config
            .layout()
            .into_iter()
            .map(|(_, rows, cols)| Array2::zeros((rows, cols)))
            .collect();
        OptState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One parameter update. Rejects non-finite gradients instead of poisoning
/// the parameters.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptState,
    cfg: &TrainingConfig,
) -> Result<(), TrainingError> {
    if !grads.is_finite() {
        return Err(TrainingError::NonFiniteGradient { step: state.step + 1 });
    }
    state.step += 1;
    let scale = match cfg.max_grad_norm {
        Some(cap) => {
            let norm = grads.norm();
            if norm > cap {
                cap / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for (theta, g) in params.tensors.iter_mut().zip(&grads.tensors) {
                theta.scaled_add(-cfg.learning_rate * scale, g);
            }
        }
        OptimizerKind::Adam => {
            let AdamParams { beta1, beta2, epsilon } = cfg.adam;
            let bc1 = 1.0 - beta1.powi(state.step as i32);
            let bc2 = 1.0 - beta2.powi(state.step as i32);
            for i in 0..params.tensors.len() {
                let g = &grads.tensors[i];
                state.m[i].zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g * scale);
                state.v[i].zip_mut_with(g, |v, &g| {
                    *v = beta2 * *v + (1.0 - beta2) * (g * scale) * (g * scale)
                });
                let (m, v) = (&state.m[i], &state.v[i]);
                for ((theta, m), v) in params.tensors[i].iter_mut().zip(m.iter()).zip(v.iter()) {
                    *theta -= cfg.learning_rate * (m / bc1) / ((v / bc2).sqrt() + epsilon);
                }
            }
        }
    }
    Ok(())
}

/// Telemetry for one rejected candidate inside a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub spec: AugmentationSpec,
    pub distance: f64,
    pub weight: f64,
    pub label: RejectLabel,
}

/// Telemetry for one example inside a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleTrace {
    /// Index of the row in the (unshuffled) dataset.
    pub example: usize,
    pub candidates: Vec<CandidateTrace>,
}

/// One optimizer update. `loss` and `reward_margin` are batch means taken
/// before the update, so the first record of a preference run reflects the
/// untouched policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub examples: Vec<ExampleTrace>,
}

/// Accuracy probe taken after each epoch's updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    /// Exact-match accuracy on a fixed probe of training rows.
    pub probe_accuracy: f64,
    /// Mean step loss inside the epoch; absent when every step was skipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_loss: Option<f64>,
}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub step: usize,
    pub reason: String,
}

/// Complete record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub method: TrainingMethod,
    pub config_hash: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<EpochSnapshot>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort: Option<AbortRecord>,
}

/// One line of the on-disk log format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Run {
        method: TrainingMethod,
        config_hash: String,
        seed: u64,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        warnings: Vec<String>,
    },
    Step(StepRecord),
    Epoch(EpochSnapshot),
    Abort(AbortRecord),
}

impl RunLog {
    fn new(cfg: &TrainingConfig) -> RunLog {
        RunLog {
            method: cfg.method,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            steps: Vec::new(),
            snapshots: Vec::new(),
            warnings: Vec::new(),
            abort: None,
        }
    }

    /// Appends a step record. Step numbers must strictly increase.
    pub fn push_step(&mut self, record: StepRecord) {
        if let Some(last) = self.steps.last() {
            assert!(record.step > last.step, "step numbers must strictly increase");
        }
        self.steps.push(record);
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Writes the log as one JSON object per line: a run header, every step,
    /// every epoch snapshot, then the abort record if the run stopped early.
    pub fn save_jsonl(&self, path: &Path) -> Result<(), TrainingError> {
        let mut lines = Vec::with_capacity(1 + self.steps.len() + self.snapshots.len() + 1);
        lines.push(LogLine::Run {
            method: self.method,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            warnings: self.warnings.clone(),
        });
        lines.extend(self.steps.iter().cloned().map(LogLine::Step));
        lines.extend(self.snapshots.iter().cloned().map(LogLine::Epoch));
        lines.extend(self.abort.iter().cloned().map(LogLine::Abort));
        write_jsonl(path, &lines)?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<RunLog, TrainingError> {
        let lines: Vec<LogLine> = crate::world::read_jsonl(path)?;
        let mut iter = lines.into_iter();
        let Some(LogLine::Run { method, config_hash, seed, warnings }) = iter.next() else {
            return Err(TrainingError::Config {
                key: "log",
                reason: format!("{} does not start with a run header", path.display()),
            });
        };
        let mut log = RunLog {
            method,
            config_hash,
            seed,
            steps: Vec::new(),
            snapshots: Vec::new(),
            warnings,
            abort: None,
        };
        for line in iter {
            match line {
                LogLine::Run { .. } => {
                    return Err(TrainingError::Config {
                        key: "log",
                        reason: "multiple run headers in one log".into(),
                    })
                }
                LogLine::Step(s) => log.push_step(s),
                LogLine::Epoch(e) => log.snapshots.push(e),
                LogLine::Abort(a) => log.abort = Some(a),
            }
        }
        Ok(log)
    }
}

/// Dataset for the preference stage.
#[derive(Debug, Clone, Copy)]
pub enum PreferenceData<'a> {
    /// Rows whose rejected clips are manufactured online.
    Online(&'a [ExampleRecord]),
    /// Fixed chosen/rejected answer pairs.
    Offline(&'a [PreferenceRecord]),
}

/// Exact-match answer accuracy of greedy decoding over `rows`.
pub fn train_accuracy(
    params: &ModelParams,
    library: &VideoLibrary,
    rows: &[ExampleRecord],
) -> Result<f64, TrainingError> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for row in rows {
        let clip = row.clip(library)?;
        let feats = render_features(&library.config, &clip);
        let decoded = decode_argmax(params, &feats, &row.prompt_tokens, row.answer_tokens.len());
        if decoded == row.answer_tokens {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows.len() as f64)
}

/// Supervised warm start from freshly initialized parameters. The returned
/// pair carries the final parameters as both policy and frozen reference.
pub fn run_sft(
    library: &VideoLibrary,
    rows: &[ExampleRecord],
    model_cfg: &ModelConfig,
    cfg: &TrainingConfig,
    out_dir: Option<&Path>,
) -> Result<(PolicyPair, RunLog), TrainingError> {
    cfg.validate()?;
    if cfg.method != TrainingMethod::Sft {
        return Err(TrainingError::Data {
            method: cfg.method,
            reason: "run_sft only drives the supervised method".into(),
        });
    }
    let params = ModelParams::init(model_cfg, child_seed(cfg.seed, "init", 0))?;
    let (params, log) = drive(library, Task::Sft(rows), params, None, cfg, out_dir)?;
    Ok((PolicyPair::from_policy(params), log))
}

/// Preference stage over a warm-started pair. Only the policy moves; the
/// reference is returned untouched.
pub fn run_preference(
    library: &VideoLibrary,
    pair: PolicyPair,
    data: PreferenceData<'_>,
    cfg: &TrainingConfig,
    out_dir: Option<&Path>,
) -> Result<(PolicyPair, RunLog), TrainingError> {
    cfg.validate()?;
    let task = match (cfg.method, data) {
        (TrainingMethod::Dpo, PreferenceData::Offline(rows)) => Task::Offline(rows),
        (TrainingMethod::Vdpo | TrainingMethod::Pami, PreferenceData::Online(rows)) => {
            Task::Online(rows)
        }
        (TrainingMethod::Sft, _) => {
            return Err(TrainingError::Data {
                method: cfg.method,
                reason: "run_preference does not drive the supervised method".into(),
            })
        }
        (method, PreferenceData::Online(_)) => {
            return Err(TrainingError::Data {
                method,
                reason: "offline method was handed online rows".into(),
            })
        }
        (method, PreferenceData::Offline(_)) => {
            return Err(TrainingError::Data {
                method,
                reason: "online method was handed fixed preference pairs".into(),
            })
        }
    };
    let PolicyPair { policy, reference } = pair;
    let (policy, log) = drive(library, task, policy, Some(&reference), cfg, out_dir)?;
    Ok((PolicyPair { policy, reference }, log))
}

enum Task<'a> {
    Sft(&'a [ExampleRecord]),
    Online(&'a [ExampleRecord]),
    Offline(&'a [PreferenceRecord]),
}

impl Task<'_> {
    fn len(&self) -> usize {
        match self {
            Task::Sft(rows) | Task::Online(rows) => rows.len(),
            Task::Offline(rows) => rows.len(),
        }
    }
}

/// Per-row state that survives across epochs.
struct RowCtx {
    feats: FeatureTensor,
    prompt: Vec<TokenId>,
    /// Teacher answer: ground truth, or the chosen side of a fixed pair.
    answer: Vec<TokenId>,
    /// Rejected answer of a fixed pair.
    rejected: Option<Vec<TokenId>>,
    /// Base clip used to manufacture rejected candidates online.
    clip: Option<VideoClip>,
    /// The question, re-interpreted on augmented clips for exact labels.
    qa: Option<QAExample>,
}

fn row_contexts(library: &VideoLibrary, task: &Task<'_>) -> Result<Vec<RowCtx>, TrainingError> {
    let build_example = |row: &ExampleRecord, online: bool| -> Result<RowCtx, TrainingError> {
        let clip = row.clip(library)?;
        let feats = render_features(&library.config, &clip);
        Ok(RowCtx {
            feats,
            prompt: row.prompt_tokens.clone(),
            answer: row.answer_tokens.clone(),
            rejected: None,
            clip: online.then_some(clip),
            qa: online.then(|| row.qa()),
        })
    };
    match task {
        Task::Sft(rows) => rows.iter().map(|r| build_example(r, false)).collect(),
        Task::Online(rows) => rows.iter().map(|r| build_example(r, true)).collect(),
        Task::Offline(rows) => rows
            .iter()
            .map(|r| {
                let mut ctx = build_example(&r.example, false)?;
                ctx.answer = r.chosen_answer.clone();
                ctx.rejected = Some(r.rejected_answer.clone());
                Ok(ctx)
            })
            .collect(),
    }
}

enum Pass {
    Done { loss: f64, margin: Option<f64>, grads: Gradients, trace: Option<ExampleTrace> },
    Skipped(String),
}

/// Candidate policy actually used by an online step.
fn online_policy(
    cfg: &TrainingConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> CandidatePolicy {
    match cfg.method {
        TrainingMethod::Pami => cfg.candidate_policy.clone(),
        TrainingMethod::Vdpo => {
            let kind = match cfg.augmentation.as_ref().expect("validated") {
                AugmentationChoice::Fixed(kind) => *kind,
                AugmentationChoice::Random => *AugKind::ALL.choose(rng).expect("non-empty"),
            };
            CandidatePolicy::Explicit(vec![instantiate(kind, rng)])
        }
        _ => unreachable!("online passes only run for online methods"),
    }
}

fn online_pass(
    library: &VideoLibrary,
    idx: usize,
    ctx: &RowCtx,
    params: &ModelParams,
    reference: &ModelParams,
    cfg: &TrainingConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Pass, TrainingError> {
    let clip = ctx.clip.as_ref().expect("online rows carry their clip");
    let qa = ctx.qa.as_ref().expect("online rows carry their question");
    let policy = online_policy(cfg, rng);
    let set: CandidateSet = match build_candidate_set(clip, library, &policy, cfg.candidates, rng) {
        Ok(set) => set,
        Err(AugmentError::Unavailable(reason)) => return Ok(Pass::Skipped(reason)),
        Err(e) => return Err(e.into()),
    };
    let cand_feats: Vec<FeatureTensor> =
        set.entries.iter().map(|e| render_features(&library.config, &e.clip)).collect();
    // Distances and weights come from plain forwards of the current policy;
    // they enter the loss graph as constants, so no gradient reaches them.
    let distances = candidate_distances(
        params,
        cfg.distance_mode,
        &ctx.feats,
        &cand_feats,
        &ctx.prompt,
        &ctx.answer,
    )?;
    let weights = prompt_weights(&distances, cfg.weight_strategy)?;
    let weighted: Vec<(f64, &FeatureTensor)> =
        weights.iter().copied().zip(cand_feats.iter()).collect();
    let mut g = Graph::new(params);
    let nodes = build_weighted_preference_loss(
        &mut g,
        reference,
        cfg.beta,
        &ctx.feats,
        &weighted,
        &ctx.prompt,
        &ctx.answer,
    );
    let loss = g.scalar(nodes.loss);
    let margin = g.scalar(nodes.reward_chosen) - g.scalar(nodes.combined_rejected);
    let grads = g.backward(nodes.loss)?;
    let candidates = set
        .entries
        .iter()
        .zip(&distances)
        .zip(&weights)
        .map(|((entry, &distance), &weight)| CandidateTrace {
            spec: entry.spec.clone(),
            distance,
            weight,
            label: oracle_reject_label(qa, &entry.clip, library),
        })
        .collect();
    Ok(Pass::Done {
        loss,
        margin: Some(margin),
        grads,
        trace: Some(ExampleTrace { example: idx, candidates }),
    })
}

fn drive(
    library: &VideoLibrary,
    task: Task<'_>,
    mut params: ModelParams,
    reference: Option<&ModelParams>,
    cfg: &TrainingConfig,
    out_dir: Option<&Path>,
) -> Result<(ModelParams, RunLog), TrainingError> {
    let n = task.len();
    if n == 0 {
        return Err(TrainingError::Config { key: "rows", reason: "dataset is empty".into() });
    }
    let contexts = row_contexts(library, &task)?;
    let mut log = RunLog::new(cfg);
    let mut opt = OptState::new(&params.config);
    let mut step = 0usize;
    let planned_updates = cfg.epochs * n.div_ceil(cfg.batch_size);
    let mut step_cfg = cfg.clone();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut child_rng(cfg.seed, "order", epoch as u64));
        let aug_epoch_seed = child_seed(cfg.seed, "augment", epoch as u64);
        let mut epoch_losses = Vec::new();

        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros(&params.config);
            let mut losses = Vec::new();
            let mut margins = Vec::new();
            let mut traces = Vec::new();
            for &idx in batch {
                let ctx = &contexts[idx];
                let pass = match task {
                    Task::Sft(_) => {
                        let mut g = Graph::new(&params);
                        let node = build_sft_loss(&mut g, &ctx.feats, &ctx.prompt, &ctx.answer);
                        let loss = g.scalar(node);
                        let example_grads = g.backward(node)?;
                        Pass::Done { loss, margin: None, grads: example_grads, trace: None }
                    }
                    Task::Offline(_) => {
                        let reference = reference.expect("preference runs carry a reference");
                        let rejected = ctx.rejected.as_ref().expect("fixed pairs carry both sides");
                        let mut g = Graph::new(&params);
                        let nodes = build_response_preference_loss(
                            &mut g,
                            reference,
                            cfg.beta,
                            &ctx.feats,
                            &ctx.prompt,
                            &ctx.answer,
                            rejected,
                        );
                        let loss = g.scalar(nodes.loss);
                        let margin =
                            g.scalar(nodes.reward_chosen) - g.scalar(nodes.combined_rejected);
                        let example_grads = g.backward(nodes.loss)?;
                        Pass::Done {
                            loss,
                            margin: Some(margin),
                            grads: example_grads,
                            trace: Some(ExampleTrace { example: idx, candidates: Vec::new() }),
                        }
                    }
                    Task::Online(_) => {
                        let reference = reference.expect("preference runs carry a reference");
                        let mut rng = rng_from(child_seed(aug_epoch_seed, "example", idx as u64));
                        online_pass(library, idx, ctx, &params, reference, cfg, &mut rng)?
                    }
                };
                match pass {
                    Pass::Done { loss, margin, grads: example_grads, trace } => {
                        grads.add_scaled(&example_grads, 1.0);
                        losses.push(loss);
                        margins.extend(margin);
                        traces.extend(trace);
                    }
                    Pass::Skipped(reason) => {
                        log.warnings.push(format!(
                            "epoch {epoch} example {idx}: {reason}; example skipped"
                        ));
                    }
                }
            }
            if losses.is_empty() {
                continue;
            }
            let used = losses.len() as f64;
            grads.scale(1.0 / used);
            let loss = losses.iter().sum::<f64>() / used;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS_LIMIT {
                let reason = format!("loss {loss} breached the divergence guard");
                log.abort = Some(AbortRecord { step, reason: reason.clone() });
                return Err(TrainingError::Aborted { step, reason, log: Box::new(log) });
            }
            let reward_margin = if margins.is_empty() {
                None
            } else {
                Some(margins.iter().sum::<f64>() / margins.len() as f64)
            };
            log.push_step(StepRecord { step, epoch, loss, reward_margin, examples: traces });
            epoch_losses.push(loss);
            step_cfg.learning_rate =
                cfg.learning_rate * schedule_factor(cfg.lr_schedule, opt.step, planned_updates);
            if let Err(TrainingError::NonFiniteGradient { .. }) =
                optimizer_step(&mut params, &grads, &mut opt, &step_cfg)
            {
                let reason = "non-finite gradient".to_string();
                log.abort = Some(AbortRecord { step, reason: reason.clone() });
                return Err(TrainingError::Aborted { step, reason, log: Box::new(log) });
            }
            step += 1;
        }

        let probe = &contexts[..n.min(EVAL_PROBE_ROWS)];
        let hits = probe
            .iter()
            .filter(|ctx| {
                decode_argmax(&params, &ctx.feats, &ctx.prompt, ctx.answer.len()) == ctx.answer
            })
            .count();
        let mean_loss = if epoch_losses.is_empty() {
            None
        } else {
            Some(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64)
        };
        log.snapshots.push(EpochSnapshot {
            epoch,
            probe_accuracy: hits as f64 / probe.len() as f64,
            mean_loss,
        });
        if let Some(dir) = out_dir {
            params.save(&dir.join(format!("checkpoint_epoch{epoch:03}.bin")))?;
        }
    }

    if let Some(dir) = out_dir {
        params.save(&dir.join("checkpoint.bin"))?;
    }
    Ok((params, log))
}

/// Per-step loss mean and population variance across the runs of each group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Aggregates runs into per-group loss curves. Runs grouped together must
/// share their step grid exactly.
pub fn loss_stats(
    logs: &[(String, &RunLog)],
) -> Result<BTreeMap<String, Vec<CurvePoint>>, TrainingError> {
    let mut groups: BTreeMap<String, Vec<&RunLog>> = BTreeMap::new();
    for (group, log) in logs {
        groups.entry(group.clone()).or_default().push(log);
    }
    let mut out = BTreeMap::new();
    for (group, members) in groups {
        let grid: Vec<usize> = members[0].steps.iter().map(|s| s.step).collect();
        for log in &members[1..] {
            let other: Vec<usize> = log.steps.iter().map(|s| s.step).collect();
            if other != grid {
                return Err(TrainingError::MismatchedSteps { group });
            }
        }
        let runs = members.len() as f64;
        let points = grid
            .iter()
            .enumerate()
            .map(|(i, &step)| {
                let mean = members.iter().map(|l| l.steps[i].loss).sum::<f64>() / runs;
                let variance = members
                    .iter()
                    .map(|l| {
                        let d = l.steps[i].loss - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / runs;
                CurvePoint { step, mean, variance }
            })
            .collect();
        out.insert(group, points);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::softplus;
    use crate::objectives::sft_loss;
    use crate::world::{
        build_training_set, generate_library, prompt_tokens, DatasetMix, EventScript, Placement,
        Question, QuestionKind, TruthValue, VideoRecord, WorldConfig,
    };
    use std::f64::consts::LN_2;

    fn small_library(seed: u64) -> VideoLibrary {
        generate_library(&WorldConfig::default(), seed).unwrap()
    }

    fn small_rows(library: &VideoLibrary, n: usize, seed: u64) -> Vec<ExampleRecord> {
        build_training_set(library, n, DatasetMix::default(), seed).unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig::for_world(&WorldConfig::default())
    }

    #[test]
    fn sgd_step_matches_closed_form() {
        let cfg = tiny_model();
        let mut params = ModelParams::zeros(&cfg).unwrap();
        let mut grads = Gradients::zeros(&cfg);
        grads.tensors[0][[0, 0]] = 1.0;
        grads.tensors[1][[2, 3]] = -2.0;
        let mut state = OptState::new(&cfg);
        let mut train = TrainingConfig::sft(0);
        train.optimizer = OptimizerKind::Sgd;
        train.learning_rate = 0.1;
        train.max_grad_norm = None;
        optimizer_step(&mut params, &grads, &mut state, &train).unwrap();
        assert_eq!(params.tensors[0][[0, 0]], -0.1);
        assert_eq!(params.tensors[1][[2, 3]], 0.2);
        assert_eq!(params.tensors[0][[0, 1]], 0.0);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn clipping_rescales_only_oversized_gradients() {
        let cfg = tiny_model();
        let mut params = ModelParams::zeros(&cfg).unwrap();
        let mut grads = Gradients::zeros(&cfg);
        // Global norm 5 against a cap of 1: every entry shrinks fivefold.
        grads.tensors[0][[0, 0]] = 3.0;
        grads.tensors[1][[1, 1]] = -4.0;
        let mut state = OptState::new(&cfg);
        let mut train = TrainingConfig::sft(0);
        train.optimizer = OptimizerKind::Sgd;
        train.learning_rate = 1.0;
        train.max_grad_norm = Some(1.0);
        optimizer_step(&mut params, &grads, &mut state, &train).unwrap();
        assert!((params.tensors[0][[0, 0]] + 0.6).abs() < 1e-15);
        assert!((params.tensors[1][[1, 1]] - 0.8).abs() < 1e-15);

        // A gradient already inside the cap passes through untouched.
        let mut params = ModelParams::zeros(&cfg).unwrap();
        grads.tensors[0][[0, 0]] = 0.3;
        grads.tensors[1][[1, 1]] = -0.4;
        optimizer_step(&mut params, &grads, &mut state, &train).unwrap();
        assert_eq!(params.tensors[0][[0, 0]], -0.3);
        assert_eq!(params.tensors[1][[1, 1]], 0.4);
    }

    #[test]
    fn adam_first_steps_match_closed_form() {
        // With a constant unit gradient, bias correction makes every update
        // exactly lr / (1 + eps) in magnitude, at step one and step two.
        let cfg = tiny_model();
        let mut params = ModelParams::zeros(&cfg).unwrap();
        let mut grads = Gradients::zeros(&cfg);
        for t in &mut grads.tensors {
            t.fill(1.0);
        }
        let mut state = OptState::new(&cfg);
        let mut train = TrainingConfig::sft(0);
        train.learning_rate = 1e-3;
        train.max_grad_norm = None;
        optimizer_step(&mut params, &grads, &mut state, &train).unwrap();
        let got = params.tensors[0][[0, 0]];
        assert!((got + 1e-3).abs() < 1e-9, "first step moved by {got}");
        optimizer_step(&mut params, &grads, &mut state, &train).unwrap();
        let got = params.tensors[0][[0, 0]];
        assert!((got + 2e-3).abs() < 1e-8, "two steps moved by {got}");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let cfg = tiny_model();
        let mut params = ModelParams::init(&cfg, 11).unwrap();
        let before = params.clone();
        let grads = Gradients::zeros(&cfg);
        let mut state = OptState::new(&cfg);
        optimizer_step(&mut params, &grads, &mut state, &TrainingConfig::sft(0)).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let cfg = tiny_model();
        let mut params = ModelParams::zeros(&cfg).unwrap();
        let before = params.clone();
        let mut grads = Gradients::zeros(&cfg);
        grads.tensors[0][[0, 0]] = f64::NAN;
        let mut state = OptState::new(&cfg);
        let err = optimizer_step(&mut params, &grads, &mut state, &TrainingConfig::sft(0));
        assert!(matches!(err, Err(TrainingError::NonFiniteGradient { step: 1 })));
        assert_eq!(params, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let assert_key = |cfg: &TrainingConfig, expect: &str| match cfg.validate() {
            Err(TrainingError::Config { key, .. }) => assert_eq!(key, expect),
            other => panic!("expected config error on `{expect}`, got {other:?}"),
        };

        let mut cfg = TrainingConfig::preference(TrainingMethod::Vdpo, 0);
        cfg.beta = 0.0;
        assert_key(&cfg, "beta");

        let mut cfg = TrainingConfig::sft(0);
        cfg.learning_rate = 0.0;
        assert_key(&cfg, "learning_rate");

        let mut cfg = TrainingConfig::sft(0);
        cfg.epochs = 0;
        assert_key(&cfg, "epochs");

        let mut cfg = TrainingConfig::sft(0);
        cfg.batch_size = 0;
        assert_key(&cfg, "batch_size");

        let mut cfg = TrainingConfig::preference(TrainingMethod::Vdpo, 0);
        cfg.augmentation = None;
        assert_key(&cfg, "augmentation");

        let mut cfg = TrainingConfig::preference(TrainingMethod::Vdpo, 0);
        cfg.candidates = 2;
        assert_key(&cfg, "candidates");

        let mut cfg = TrainingConfig::sft(0);
        cfg.adam.beta1 = 1.0;
        assert_key(&cfg, "adam");

        assert!(TrainingConfig::preference(TrainingMethod::Pami, 0).validate().is_ok());
    }

    #[test]
    fn config_hash_tracks_content_not_identity() {
        let a = TrainingConfig::sft(7);
        let b = TrainingConfig::sft(7);
        assert_eq!(a.hash(), b.hash());
        let mut c = TrainingConfig::sft(7);
        c.learning_rate = 2e-3;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn sft_training_reaches_target_accuracy() {
        let library = small_library(91);
        let rows = small_rows(&library, 500, 92);
        let cfg = TrainingConfig::sft(93);
        let (pair, log) = run_sft(&library, &rows, &tiny_model(), &cfg, None).unwrap();
        let accuracy = train_accuracy(&pair.policy, &library, &rows).unwrap();
        assert!(accuracy >= 0.95, "supervised accuracy only reached {accuracy}");
        assert_eq!(log.steps.len(), rows.len() * cfg.epochs);
        assert_eq!(log.snapshots.len(), cfg.epochs);
        let first = log.snapshots.first().unwrap().mean_loss.unwrap();
        let last = log.snapshots.last().unwrap().mean_loss.unwrap();
        assert!(last < first, "loss failed to drop: {first} -> {last}");
        assert_eq!(pair.policy, pair.reference);
    }

    #[test]
    fn sft_batch_loss_is_the_example_mean() {
        let library = small_library(21);
        let rows = small_rows(&library, 6, 22);
        let mut cfg = TrainingConfig::sft(23);
        cfg.epochs = 1;
        cfg.batch_size = rows.len();
        let (_, log) = run_sft(&library, &rows, &tiny_model(), &cfg, None).unwrap();
        assert_eq!(log.steps.len(), 1);

        let model_cfg = ModelConfig::for_world(&library.config);
        let params = ModelParams::init(&model_cfg, child_seed(23, "init", 0)).unwrap();
        let mean = rows
            .iter()
            .map(|row| {
                let feats = render_features(&library.config, &row.clip(&library).unwrap());
                sft_loss(&params, &feats, &row.prompt_tokens, &row.answer_tokens)
            })
            .sum::<f64>()
            / rows.len() as f64;
        assert!((log.steps[0].loss - mean).abs() < 1e-12);
    }

    #[test]
    fn first_preference_step_loss_is_log_two() {
        let library = small_library(31);
        let rows = small_rows(&library, 8, 32);
        let model_cfg = ModelConfig::for_world(&library.config);
        let pair = PolicyPair::from_policy(ModelParams::init(&model_cfg, 33).unwrap());
        for method in [TrainingMethod::Vdpo, TrainingMethod::Pami] {
            let mut cfg = TrainingConfig::preference(method, 34);
            cfg.epochs = 1;
            if method == TrainingMethod::Pami {
                cfg.candidates = 2;
            }
            let (_, log) =
                run_preference(&library, pair.clone(), PreferenceData::Online(&rows), &cfg, None)
                    .unwrap();
            let first = &log.steps[0];
            assert!((first.loss - LN_2).abs() < 1e-15, "step 0 loss {}", first.loss);
            assert_eq!(first.reward_margin, Some(0.0));
        }
    }

    #[test]
    fn single_candidate_pami_equals_vdpo_bitwise() {
        let library = small_library(41);
        let rows = small_rows(&library, 24, 42);
        let model_cfg = ModelConfig::for_world(&library.config);
        let pair = PolicyPair::from_policy(ModelParams::init(&model_cfg, 43).unwrap());

        // Same instantiated spec, same seed: the candidate streams align.
        let pairs: [(AugmentationChoice, CandidatePolicy); 2] = [
            (
                AugmentationChoice::Fixed(AugKind::Shuffle),
                CandidatePolicy::Explicit(vec![AugmentationSpec::Shuffle]),
            ),
            (AugmentationChoice::Fixed(AugKind::DClip), CandidatePolicy::Mixed),
        ];
        for (choice, policy) in pairs {
            let mut vdpo = TrainingConfig::preference(TrainingMethod::Vdpo, 44);
            vdpo.augmentation = Some(choice);
            let mut pami = TrainingConfig::preference(TrainingMethod::Pami, 44);
            pami.candidates = 1;
            pami.candidate_policy = policy;

            let (pair_v, log_v) =
                run_preference(&library, pair.clone(), PreferenceData::Online(&rows), &vdpo, None)
                    .unwrap();
            let (pair_p, log_p) =
                run_preference(&library, pair.clone(), PreferenceData::Online(&rows), &pami, None)
                    .unwrap();

            assert_eq!(log_v.steps.len(), log_p.steps.len());
            for (a, b) in log_v.steps.iter().zip(&log_p.steps) {
                assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "step {} diverged", a.step);
            }
            assert_eq!(pair_v.policy.tensors, pair_p.policy.tensors);
        }
    }

    #[test]
    fn unrelated_video_negatives_drive_loss_down() {
        let library = small_library(51);
        let rows = small_rows(&library, 200, 52);
        let model_cfg = ModelConfig::for_world(&library.config);
        let pair = PolicyPair::from_policy(ModelParams::init(&model_cfg, 53).unwrap());
        let reference_before = pair.reference.clone();
        let mut cfg = TrainingConfig::preference(TrainingMethod::Vdpo, 54);
        cfg.epochs = 1;
        cfg.augmentation = Some(AugmentationChoice::Fixed(AugKind::DVideo));
        let (pair, log) =
            run_preference(&library, pair, PreferenceData::Online(&rows), &cfg, None).unwrap();
        assert_eq!(log.steps.len(), 200);
        let losses = log.losses();
        let first: f64 = losses[..50].iter().sum::<f64>() / 50.0;
        let last: f64 = losses[150..].iter().sum::<f64>() / 50.0;
        assert!(last < first, "loss failed to drop: {first} -> {last}");
        assert_eq!(pair.reference, reference_before);
    }

    #[test]
    fn unavailable_augmentation_skips_with_warning() {
        // One lonely video: swapping in a different video can never work.
        let world = WorldConfig::default();
        let script = EventScript {
            placements: vec![
                Placement {
                    symbol: 0,
                    attribute: world.attribute_of(0),
                    frame_range: (0, 20),
                    cell: world.cell_of(0),
                },
                Placement {
                    symbol: 1,
                    attribute: world.attribute_of(1),
                    frame_range: (30, 50),
                    cell: world.cell_of(1),
                },
            ],
        };
        let video = VideoRecord::materialize(&world, 0, script, 7);
        let library = VideoLibrary::from_parts(world, 7, vec![video]);
        let row = {
            let clip = crate::world::slice_clip(&library, 0, 0, 8).unwrap();
            let question = Question::Present(0);
            ExampleRecord {
                video_id: 0,
                segment: clip.segment,
                prompt_tokens: prompt_tokens(&question),
                answer_tokens: vec![crate::world::vocab::YES],
                kind: QuestionKind::Static,
                symbols: vec![0],
                truth: TruthValue::Bool(true),
                frame_order: None,
            }
        };
        let model_cfg = ModelConfig::for_world(&library.config);
        let pair = PolicyPair::from_policy(ModelParams::init(&model_cfg, 61).unwrap());
        let before = pair.policy.clone();
        let mut cfg = TrainingConfig::preference(TrainingMethod::Vdpo, 62);
        cfg.epochs = 1;
        cfg.augmentation = Some(AugmentationChoice::Fixed(AugKind::DVideo));
        let rows = vec![row];
        let (pair, log) =
            run_preference(&library, pair, PreferenceData::Online(&rows), &cfg, None).unwrap();
        assert!(log.steps.is_empty());
        assert_eq!(log.warnings.len(), 1);
        assert_eq!(log.snapshots.len(), 1);
        assert_eq!(log.snapshots[0].mean_loss, None);
        assert_eq!(pair.policy, before);
    }

    #[test]
    fn divergence_guard_aborts_the_run() {
        let library = small_library(71);
        let rows = small_rows(&library, 20, 72);
        let mut cfg = TrainingConfig::sft(73);
        cfg.optimizer = OptimizerKind::Sgd;
        cfg.learning_rate = 1e6;
        cfg.epochs = 1;
        match run_sft(&library, &rows, &tiny_model(), &cfg, None) {
            Err(TrainingError::Aborted { step, log, .. }) => {
                assert!(step >= 1, "first recorded loss precedes any update");
                assert!(log.abort.is_some());
                assert_eq!(log.steps.len(), step);
            }
            other => panic!("expected divergence abort, got {other:?}"),
        }
    }

    #[test]
    fn run_log_round_trips_through_jsonl() {
        let library = small_library(81);
        let rows = small_rows(&library, 12, 82);
        let model_cfg = ModelConfig::for_world(&library.config);
        let pair = PolicyPair::from_policy(ModelParams::init(&model_cfg, 83).unwrap());
        let mut cfg = TrainingConfig::preference(TrainingMethod::Pami, 84);
        cfg.epochs = 1;
        cfg.candidates = 2;
        let (_, log) =
            run_preference(&library, pair, PreferenceData::Online(&rows), &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        log.save_jsonl(&path).unwrap();
        let loaded = RunLog::load_jsonl(&path).unwrap();
        assert_eq!(loaded, log);
        assert!(!log.steps[0].examples[0].candidates.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let library = small_library(101);
        let rows = small_rows(&library, 16, 102);
        let mut cfg = TrainingConfig::sft(103);
        cfg.epochs = 2;
        let (pair_a, log_a) = run_sft(&library, &rows, &tiny_model(), &cfg, None).unwrap();
        let (pair_b, log_b) = run_sft(&library, &rows, &tiny_model(), &cfg, None).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(pair_a.policy.tensors, pair_b.policy.tensors);
    }

    #[test]
    fn loss_stats_matches_hand_computed_moments() {
        let fake = |losses: &[f64]| RunLog {
            method: TrainingMethod::Vdpo,
            config_hash: "x".into(),
            seed: 0,
            steps: losses
                .iter()
                .enumerate()
                .map(|(i, &loss)| StepRecord {
                    step: i,
                    epoch: 0,
                    loss,
                    reward_margin: None,
                    examples: Vec::new(),
                })
                .collect(),
            snapshots: Vec::new(),
            warnings: Vec::new(),
            abort: None,
        };
        let a1 = fake(&[1.0, 2.0]);
        let a2 = fake(&[3.0, 6.0]);
        let b = fake(&[5.0, 5.0]);
        let stats = loss_stats(&[
            ("high".into(), &a1),
            ("high".into(), &a2),
            ("low".into(), &b),
        ])
        .unwrap();
        let high = &stats["high"];
        assert_eq!(high[0], CurvePoint { step: 0, mean: 2.0, variance: 1.0 });
        assert_eq!(high[1], CurvePoint { step: 1, mean: 4.0, variance: 4.0 });
        let low = &stats["low"];
        assert_eq!(low[0], CurvePoint { step: 0, mean: 5.0, variance: 0.0 });

        let short = fake(&[1.0]);
        let err = loss_stats(&[("high".into(), &a1), ("high".into(), &short)]);
        assert!(matches!(err, Err(TrainingError::MismatchedSteps { .. })));
    }

    #[test]
    #[should_panic(expected = "strictly increase")]
    fn step_numbers_must_increase() {
        let mut log = RunLog::new(&TrainingConfig::sft(0));
        let record = StepRecord {
            step: 3,
            epoch: 0,
            loss: softplus(0.0),
            reward_margin: None,
            examples: Vec::new(),
        };
        log.push_step(record.clone());
        log.push_step(record);
    }
}

