//! Held-out evaluation suites, answer scoring, the programmatic judge,
//! dataset curation, offline preference construction, and the augmentation
//! sweep harness.
//!
//! The hallucination suite is built from minimal pairs: two questions with
//! identical prompts whose correct answers differ because the underlying
//! clips differ (reversed frame order, or a segment where the queried symbol
//! is absent). A model that answers from the prompt alone cannot score above
//! chance on pairs, so pair accuracy isolates visual grounding from prompt
//! priors. The general suite measures plain held-out QA accuracy.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{
    apply_augmentation, similarity_class, AugKind, AugmentError, AugmentationSpec, SimilarityClass,
};
use crate::config::ExperimentConfig;
use crate::model::{decode_argmax, sequence_log_prob, ModelParams};
use crate::rng::child_rng;
use crate::training::{
    loss_stats, run_preference, run_sft, AugmentationChoice, CurvePoint, PreferenceData, RunLog,
    TrainingError, TrainingMethod,
};
use crate::world::{
    answer_tokens, build_training_set, clip_truth, generate_library, generate_qa, prompt_tokens,
    read_jsonl, render_features, script_truth, slice_clip, vocab, write_jsonl, ExampleRecord,
    QAExample, QaMeta, Question, QuestionKind, SymbolId, TokenId, TruthValue, VideoClip,
    VideoLibrary, WorldError,
};

/// Errors from suite construction, scoring, and the sweep harness.
#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("suite generation failed: {0}")]
    Generation(String),
    #[error("invalid benchmark input: {0}")]
    Input(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Training(#[from] Box<TrainingError>),
}

impl From<TrainingError> for BenchmarkError {
    fn from(e: TrainingError) -> Self {
        BenchmarkError::Training(Box::new(e))
    }
}

/// Which evaluation the suite implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    /// Minimal pairs probing visually ungrounded answers.
    Halluc,
    /// Independent held-out boolean questions.
    General,
}

/// An evaluation suite: items plus the index of minimal pairs over them.
/// General suites carry no pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub kind: SuiteKind,
    pub items: Vec<ExampleRecord>,
    pub pairs: Vec<(usize, usize)>,
}

/// Pairing index persisted next to the item rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SuiteIndex {
    kind: SuiteKind,
    pairs: Vec<(usize, usize)>,
}

impl Suite {
    /// Writes items as JSONL rows and the pairing index as a JSON sidecar.
    pub fn save(&self, items_path: &Path, index_path: &Path) -> Result<(), BenchmarkError> {
        write_jsonl(items_path, &self.items)?;
        let index = SuiteIndex { kind: self.kind, pairs: self.pairs.clone() };
        let file = std::fs::File::create(index_path).map_err(WorldError::Io)?;
        serde_json::to_writer_pretty(file, &index).map_err(WorldError::Serde)?;
        Ok(())
    }

    pub fn load(items_path: &Path, index_path: &Path) -> Result<Suite, BenchmarkError> {
        let items: Vec<ExampleRecord> = read_jsonl(items_path)?;
        let file = std::fs::File::open(index_path).map_err(WorldError::Io)?;
        let index: SuiteIndex = serde_json::from_reader(file).map_err(WorldError::Serde)?;
        for &(a, b) in &index.pairs {
            if a >= items.len() || b >= items.len() {
                return Err(BenchmarkError::Input(format!(
                    "pair ({a}, {b}) exceeds {} items",
                    items.len()
                )));
            }
        }
        Ok(Suite { kind: index.kind, items, pairs: index.pairs })
    }

    pub fn yes_count(&self) -> usize {
        self.items.iter().filter(|r| r.truth == TruthValue::Bool(true)).count()
    }
}

/// Suite sizes, in pairs for the hallucination suite and items for the
/// general suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSizes {
    pub halluc_pairs: usize,
    pub general_items: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        SuiteSizes { halluc_pairs: 400, general_items: 400 }
    }
}

/// Accuracy summary of one suite evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteScores {
    pub items: usize,
    /// Fraction of items answered exactly.
    pub item_accuracy: f64,
    /// Fraction of pairs with both members answered exactly; absent for
    /// unpaired suites.
    pub pair_accuracy: Option<f64>,
}

/// Redraw budget per suite element before generation gives up.
const MAX_DRAWS: usize = 400;

fn random_clip(library: &VideoLibrary, rng: &mut ChaCha8Rng) -> Result<VideoClip, BenchmarkError> {
    let cfg = &library.config;
    let video = library.videos.choose(rng).expect("library holds at least one video");
    let start = rng.gen_range(0..=cfg.video_length - cfg.frames_per_clip);
    Ok(slice_clip(library, video.video_id, start, cfg.frames_per_clip)?)
}

/// Permutation draws per clip when hunting for a truth-flipping reorder.
const REORDER_DRAWS: usize = 8;

/// One order question asked twice: once on the plain clip, once on a frame
/// reorder chosen so the answer flips. A random permutation is drawn rather
/// than the deterministic reversal so the perturbed member sits in the same
/// distribution family the temporal contrast operates on.
fn temporal_pair(
    library: &VideoLibrary,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(ExampleRecord, ExampleRecord)>, BenchmarkError> {
    let cfg = &library.config;
    let clip = random_clip(library, rng)?;
    let example = match generate_qa(library, &clip, QuestionKind::Temporal, rng) {
        Ok(e) => e,
        Err(WorldError::Generation { .. }) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let TruthValue::Bool(truth) = example.meta.truth else { return Ok(None) };
    let question = crate::world::parse_prompt(cfg, &example.prompt)?;
    let flipped = TruthValue::Bool(!truth);
    let mut order: Vec<usize> = (0..cfg.frames_per_clip).collect();
    let mut reversed = None;
    for _ in 0..REORDER_DRAWS {
        order.shuffle(rng);
        let candidate = clip.reordered(&order);
        if clip_truth(&candidate, &question) == Some(flipped) {
            reversed = Some(candidate);
            break;
        }
    }
    let Some(reversed) = reversed else { return Ok(None) };
    let partner = QAExample {
        prompt: example.prompt.clone(),
        answer: answer_tokens(cfg, &question, &flipped),
        meta: QaMeta {
            kind: QuestionKind::Temporal,
            symbols: example.meta.symbols.clone(),
            truth: flipped,
        },
    };
    Ok(Some((
        ExampleRecord::from_example(&clip, &example),
        ExampleRecord::from_example(&reversed, &partner),
    )))
}

/// One presence question asked on two segments of the same video, chosen so
/// the answer flips between them.
fn presence_pair(
    library: &VideoLibrary,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(ExampleRecord, ExampleRecord)>, BenchmarkError> {
    let cfg = &library.config;
    let f = cfg.frames_per_clip;
    let video = library.videos.choose(rng).expect("library holds at least one video");
    let symbol = rng.gen_range(0..cfg.symbols as SymbolId);
    let question = Question::Present(symbol);
    let start_a = rng.gen_range(0..=cfg.video_length - f);
    let Some(truth_a @ TruthValue::Bool(t)) = script_truth(video, (start_a, start_a + f), &question)
    else {
        return Ok(None);
    };
    let flipped = TruthValue::Bool(!t);
    let starts: Vec<usize> = (0..=cfg.video_length - f)
        .filter(|&s| script_truth(video, (s, s + f), &question) == Some(flipped))
        .collect();
    let Some(&start_b) = starts.choose(rng) else { return Ok(None) };
    let make = |start: usize, truth: TruthValue| -> Result<ExampleRecord, BenchmarkError> {
        let clip = slice_clip(library, video.video_id, start, f)?;
        let example = QAExample {
            prompt: prompt_tokens(&question),
            answer: answer_tokens(cfg, &question, &truth),
            meta: QaMeta { kind: QuestionKind::Static, symbols: question.symbols(), truth },
        };
        Ok(ExampleRecord::from_example(&clip, &example))
    };
    Ok(Some((make(start_a, truth_a)?, make(start_b, flipped)?)))
}

fn build_halluc(library: &VideoLibrary, seed: u64, pairs: usize) -> Result<Suite, BenchmarkError> {
    let mut rng = child_rng(seed, "halluc", 0);
    let mut items = Vec::with_capacity(pairs * 2);
    let mut index = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let mut found = None;
        for _ in 0..MAX_DRAWS {
            // Alternate flavors so both failure modes are probed evenly.
            let attempt = if i % 2 == 0 {
                temporal_pair(library, &mut rng)?
            } else {
                presence_pair(library, &mut rng)?
            };
            if attempt.is_some() {
                found = attempt;
                break;
            }
        }
        let (a, b) =
            found.ok_or_else(|| BenchmarkError::Generation(format!("no valid pair for slot {i}")))?;
        let base = items.len();
        items.push(a);
        items.push(b);
        index.push((base, base + 1));
    }
    Ok(Suite { kind: SuiteKind::Halluc, items, pairs: index })
}

fn build_general(library: &VideoLibrary, seed: u64, n: usize) -> Result<Suite, BenchmarkError> {
    let mut rng = child_rng(seed, "general", 0);
    let yes_target = n / 2;
    let no_target = n - yes_target;
    let mut yes: Vec<ExampleRecord> = Vec::with_capacity(yes_target);
    let mut no: Vec<ExampleRecord> = Vec::with_capacity(no_target);
    let mut draws = 0usize;
    while yes.len() < yes_target || no.len() < no_target {
        draws += 1;
        if draws > MAX_DRAWS * n.max(1) {
            return Err(BenchmarkError::Generation(
                "general suite answer quota unreachable".into(),
            ));
        }
        let clip = random_clip(library, &mut rng)?;
        let kind =
            if rng.gen_bool(0.5) { QuestionKind::Temporal } else { QuestionKind::Static };
        let example = match generate_qa(library, &clip, kind, &mut rng) {
            Ok(e) => e,
            Err(WorldError::Generation { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        // Boolean questions only: chance is exactly one half, which anchors
        // the accuracy scale of every suite comparison.
        let TruthValue::Bool(t) = example.meta.truth else { continue };
        let (bucket, target) = if t { (&mut yes, yes_target) } else { (&mut no, no_target) };
        if bucket.len() < target {
            bucket.push(ExampleRecord::from_example(&clip, &example));
        }
    }
    let mut items: Vec<ExampleRecord> = yes.into_iter().chain(no).collect();
    items.shuffle(&mut rng);
    Ok(Suite { kind: SuiteKind::General, items, pairs: Vec::new() })
}

/// Builds the hallucination and general suites from one seed.
pub fn build_suites(
    library: &VideoLibrary,
    seed: u64,
    sizes: SuiteSizes,
) -> Result<(Suite, Suite), BenchmarkError> {
    let halluc = build_halluc(library, seed, sizes.halluc_pairs)?;
    let general = build_general(library, seed, sizes.general_items)?;
    Ok((halluc, general))
}

/// Legal completions for a question, in canonical order. Ties during forced
/// choice resolve to the first entry.
fn answer_candidates(cfg: &crate::world::WorldConfig, truth: &TruthValue) -> Vec<Vec<TokenId>> {
    match truth {
        TruthValue::Bool(_) => vec![vec![vocab::YES], vec![vocab::NO]],
        TruthValue::Attribute(_) => (0..cfg.attributes as u8)
            .map(|k| vec![vocab::ATTR_MARK, vocab::attribute_token(cfg, k)])
            .collect(),
    }
}

/// Scores each legal completion of the item's answer class and returns the
/// most probable one. Equivalent to per-position argmax restricted to the
/// answer alphabet, so a constant model lands exactly at class chance.
pub fn predict_answer(
    params: &ModelParams,
    library: &VideoLibrary,
    record: &ExampleRecord,
) -> Result<Vec<TokenId>, BenchmarkError> {
    let clip = record.clip(library)?;
    let feats = render_features(&library.config, &clip);
    let candidates = answer_candidates(&library.config, &record.truth);
    let mut best = 0;
    let mut best_lp = f64::NEG_INFINITY;
    for (i, cand) in candidates.iter().enumerate() {
        let lp = sequence_log_prob(params, &feats, &record.prompt_tokens, cand);
        if lp > best_lp {
            best_lp = lp;
            best = i;
        }
    }
    Ok(candidates.into_iter().nth(best).expect("candidate list is non-empty"))
}

/// Scores a pre-computed answer sheet against a suite.
pub fn score_answers(suite: &Suite, answers: &[Vec<TokenId>]) -> Result<SuiteScores, BenchmarkError> {
    if suite.items.is_empty() {
        return Err(BenchmarkError::Input("suite has no items".into()));
    }
    if answers.len() != suite.items.len() {
        return Err(BenchmarkError::Input(format!(
            "{} answers for {} items",
            answers.len(),
            suite.items.len()
        )));
    }
    let hit: Vec<bool> = suite
        .items
        .iter()
        .zip(answers)
        .map(|(item, answer)| item.answer_tokens == *answer)
        .collect();
    let item_accuracy = hit.iter().filter(|&&h| h).count() as f64 / hit.len() as f64;
    let pair_accuracy = if suite.pairs.is_empty() {
        None
    } else {
        let both = suite.pairs.iter().filter(|&&(a, b)| hit[a] && hit[b]).count();
        Some(both as f64 / suite.pairs.len() as f64)
    };
    Ok(SuiteScores { items: suite.items.len(), item_accuracy, pair_accuracy })
}

/// Evaluates a model on a suite by forced-choice decoding every item.
pub fn evaluate(
    params: &ModelParams,
    library: &VideoLibrary,
    suite: &Suite,
) -> Result<SuiteScores, BenchmarkError> {
    let answers: Vec<Vec<TokenId>> = suite
        .items
        .par_iter()
        .map(|record| predict_answer(params, library, record))
        .collect::<Result<_, _>>()?;
    score_answers(suite, &answers)
}

/// Integer quality score on a 1..=5 scale, linear in positionwise token
/// overlap: 5 is an exact match, 1 shares nothing.
pub fn judge_score(candidate: &[TokenId], truth: &[TokenId]) -> u8 {
    let len = truth.len().max(candidate.len()).max(1);
    let matches = truth.iter().zip(candidate.iter()).filter(|(a, b)| a == b).count();
    let frac = matches as f64 / len as f64;
    (1.0 + 4.0 * frac).round() as u8
}

/// A fixed chosen/rejected answer pair with judge provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub example: ExampleRecord,
    pub chosen_answer: Vec<TokenId>,
    pub chosen_score: u8,
    pub rejected_answer: Vec<TokenId>,
    pub rejected_score: u8,
    /// Perturbation whose decoded answer was rejected.
    pub rejected_spec: AugmentationSpec,
}

/// Perturbation families probed when mining offline rejected answers, in
/// tie-break priority order.
fn offline_candidate_specs() -> [AugmentationSpec; 3] {
    [AugmentationSpec::DVideo, AugmentationSpec::Shuffle, AugmentationSpec::Reverse]
}

/// Mines chosen/rejected pairs by decoding the model on perturbed clips and
/// keeping the worst answer the judge scores below 3. The dataset answer is
/// always chosen; an example with no candidate below 3 yields no record.
pub fn construct_offline_preference(
    library: &VideoLibrary,
    rows: &[ExampleRecord],
    params: &ModelParams,
    seed: u64,
) -> Result<Vec<PreferenceRecord>, BenchmarkError> {
    let mut out = Vec::new();
    for (idx, row) in rows.iter().enumerate() {
        let mut rng = child_rng(seed, "prefpair", idx as u64);
        let clip = row.clip(library)?;
        let mut worst: Option<(u8, Vec<TokenId>, AugmentationSpec)> = None;
        for spec in offline_candidate_specs() {
            let perturbed = match apply_augmentation(&spec, &clip, library, &mut rng) {
                Ok(c) => c,
                Err(AugmentError::Unavailable(_)) => continue,
                Err(e) => return Err(e.into()),
            };
            let feats = render_features(&library.config, &perturbed);
            let decoded =
                decode_argmax(params, &feats, &row.prompt_tokens, row.answer_tokens.len());
            let score = judge_score(&decoded, &row.answer_tokens);
            // Strict comparison keeps the earliest family on score ties.
            if score < 3 && worst.as_ref().is_none_or(|(s, _, _)| score < *s) {
                worst = Some((score, decoded, spec));
            }
        }
        if let Some((score, answer, spec)) = worst {
            out.push(PreferenceRecord {
                example: row.clone(),
                chosen_answer: row.answer_tokens.clone(),
                chosen_score: 5,
                rejected_answer: answer,
                rejected_score: score,
                rejected_spec: spec,
            });
        }
    }
    Ok(out)
}

/// Splits a dataset into a temporal-only subset and a size-matched random
/// subset of the full mix, for comparing curation strategies at equal budget.
pub fn curate_clean(
    rows: &[ExampleRecord],
    seed: u64,
) -> Result<(Vec<ExampleRecord>, Vec<ExampleRecord>), BenchmarkError> {
    let clean: Vec<ExampleRecord> =
        rows.iter().filter(|r| r.kind == QuestionKind::Temporal).cloned().collect();
    if clean.is_empty() {
        return Err(BenchmarkError::Input("dataset has no temporal rows to curate".into()));
    }
    let mut indices: Vec<usize> = (0..rows.len()).collect();
    indices.shuffle(&mut child_rng(seed, "curate", 0));
    let mixed: Vec<ExampleRecord> =
        indices[..clean.len()].iter().map(|&i| rows[i].clone()).collect();
    Ok((clean, mixed))
}

/// One row of the augmentation sweep report. Metric cells are empty when the
/// sub-run failed; `error` says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub spec: String,
    pub group: String,
    pub halluc_delta: Option<f64>,
    pub general_delta: Option<f64>,
    pub final_loss_mean: Option<f64>,
    pub final_loss_var: Option<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Per-step loss summary line for plotting grouped training curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveLine {
    pub group: String,
    pub step: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Full result of an augmentation sweep: one shared supervised baseline, one
/// preference run per augmentation family, and loss curves grouped by
/// similarity class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub baseline_halluc: SuiteScores,
    pub baseline_general: SuiteScores,
    pub rows: Vec<SweepRow>,
    pub curves: BTreeMap<String, Vec<CurvePoint>>,
    pub completed_runs: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("spec,group,halluc_delta,general_delta,final_loss_mean,final_loss_var,seed\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.spec,
                row.group,
                csv_cell(row.halluc_delta),
                csv_cell(row.general_delta),
                csv_cell(row.final_loss_mean),
                csv_cell(row.final_loss_var),
                row.seed,
            ));
        }
        out
    }

    /// Flattens grouped curves into one line per (group, step).
    pub fn curve_lines(&self) -> Vec<CurveLine> {
        let mut out = Vec::new();
        for (group, points) in &self.curves {
            for p in points {
                out.push(CurveLine {
                    group: group.clone(),
                    step: p.step,
                    mean: p.mean,
                    variance: p.variance,
                });
            }
        }
        out
    }
}

/// Mean and population variance of the final half of a run's loss series.
fn final_half_stats(log: &RunLog) -> Option<(f64, f64)> {
    let losses = log.losses();
    if losses.is_empty() {
        return None;
    }
    let tail = &losses[losses.len() / 2..];
    let n = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / n;
    let var = tail.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var))
}

fn group_name(kind: AugKind) -> &'static str {
    match similarity_class(kind) {
        SimilarityClass::High => "high",
        SimilarityClass::Low => "low",
    }
}

/// Trains one shared supervised baseline, then one online preference run per
/// augmentation family, and reports accuracy deltas against the baseline.
/// Sub-run failures become error rows; the report survives as long as the
/// baseline does.
pub fn sweep_augmentations(cfg: &ExperimentConfig) -> Result<SweepReport, BenchmarkError> {
    cfg.validate().map_err(|e| BenchmarkError::Input(e.to_string()))?;
    let library = generate_library(&cfg.world(), cfg.world_seed())?;
    let eval_library = generate_library(&cfg.world_eval(), cfg.eval_world_seed())?;
    let rows = build_training_set(&library, cfg.train_examples, cfg.mix(), cfg.dataset_seed())?;
    let (sft, sft_log) = run_sft(&library, &rows, &cfg.model(), &cfg.sft_training(), None)?;

    let sizes = SuiteSizes { halluc_pairs: cfg.halluc_pairs, general_items: cfg.general_items };
    let (halluc, general) = build_suites(&eval_library, cfg.suite_seed(), sizes)?;
    let baseline_halluc = evaluate(&sft.policy, &eval_library, &halluc)?;
    let baseline_general = evaluate(&sft.policy, &eval_library, &general)?;
    let base_pair = baseline_halluc.pair_accuracy.expect("hallucination suite is paired");

    let template =
        cfg.preference_training(TrainingMethod::Vdpo).map_err(|e| BenchmarkError::Input(e.to_string()))?;

    type Outcome = (SweepRow, Option<(String, RunLog)>);
    let outcomes: Vec<Outcome> = AugKind::ALL
        .par_iter()
        .enumerate()
        .map(|(i, &kind)| {
            let seed = cfg.sweep_seed(i as u64);
            let mut train = template.clone();
            train.seed = seed;
            train.augmentation = Some(AugmentationChoice::Fixed(kind));
            let group = group_name(kind);
            let run = run_preference(&library, sft.clone(), PreferenceData::Online(&rows), &train, None)
                .map_err(BenchmarkError::from)
                .and_then(|(pair, log)| {
                    let h = evaluate(&pair.policy, &eval_library, &halluc)?;
                    let g = evaluate(&pair.policy, &eval_library, &general)?;
                    Ok((h, g, log))
                });
            match run {
                Ok((h, g, log)) => {
                    let stats = final_half_stats(&log);
                    let row = SweepRow {
                        spec: kind.name().into(),
                        group: group.into(),
                        halluc_delta: Some(
                            h.pair_accuracy.expect("hallucination suite is paired") - base_pair,
                        ),
                        general_delta: Some(g.item_accuracy - baseline_general.item_accuracy),
                        final_loss_mean: stats.map(|s| s.0),
                        final_loss_var: stats.map(|s| s.1),
                        seed,
                        error: None,
                    };
                    (row, Some((group.to_string(), log)))
                }
                Err(e) => {
                    let row = SweepRow {
                        spec: kind.name().into(),
                        group: group.into(),
                        halluc_delta: None,
                        general_delta: None,
                        final_loss_mean: None,
                        final_loss_var: None,
                        seed,
                        error: Some(e.to_string()),
                    };
                    (row, None)
                }
            }
        })
        .collect();

    let sft_stats = final_half_stats(&sft_log);
    let mut report_rows = vec![SweepRow {
        spec: "sft_baseline".into(),
        group: "baseline".into(),
        halluc_delta: Some(0.0),
        general_delta: Some(0.0),
        final_loss_mean: sft_stats.map(|s| s.0),
        final_loss_var: sft_stats.map(|s| s.1),
        seed: cfg.seed,
        error: None,
    }];
    let mut curve_logs: Vec<(String, RunLog)> = Vec::new();
    for (row, log) in outcomes {
        report_rows.push(row);
        if let Some(entry) = log {
            curve_logs.push(entry);
        }
    }
    let completed_runs = report_rows.iter().skip(1).filter(|r| r.error.is_none()).count();

    let mut warnings = Vec::new();
    let labelled: Vec<(String, &RunLog)> =
        curve_logs.iter().map(|(g, l)| (g.clone(), l)).collect();
    let curves = match loss_stats(&labelled) {
        Ok(c) => c,
        Err(e) => {
            warnings.push(format!("grouped loss curves unavailable: {e}"));
            BTreeMap::new()
        }
    };

    Ok(SweepReport {
        seed: cfg.seed,
        baseline_halluc,
        baseline_general,
        rows: report_rows,
        curves,
        completed_runs,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};
    use crate::rng::child_rng;
    use crate::world::{DatasetMix, WorldConfig};
    use std::collections::BTreeSet;

    fn eval_library(seed: u64) -> VideoLibrary {
        let cfg = WorldConfig { video_id_base: 10_000, ..WorldConfig::default() };
        generate_library(&cfg, seed).unwrap()
    }

    #[test]
    fn suites_are_deterministic_and_balanced() {
        let lib = eval_library(401);
        let sizes = SuiteSizes { halluc_pairs: 60, general_items: 80 };
        let (h1, g1) = build_suites(&lib, 17, sizes).unwrap();
        let (h2, g2) = build_suites(&lib, 17, sizes).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(g1, g2);

        assert_eq!(h1.items.len(), 120);
        assert_eq!(h1.pairs.len(), 60);
        // Every pair holds one yes and one no under the same prompt.
        assert_eq!(h1.yes_count(), 60);
        for &(a, b) in &h1.pairs {
            assert_eq!(h1.items[a].prompt_tokens, h1.items[b].prompt_tokens);
            assert_ne!(h1.items[a].answer_tokens, h1.items[b].answer_tokens);
            assert_ne!(h1.items[a].truth, h1.items[b].truth);
        }

        assert_eq!(g1.items.len(), 80);
        assert!(g1.pairs.is_empty());
        assert_eq!(g1.yes_count(), 40);
        assert!(g1.items.iter().all(|r| matches!(r.truth, TruthValue::Bool(_))));
        assert!(g1.items.iter().any(|r| r.kind == QuestionKind::Temporal));
        assert!(g1.items.iter().any(|r| r.kind == QuestionKind::Static));
    }

    #[test]
    fn answer_sheets_score_at_their_expected_rates() {
        let lib = eval_library(402);
        let sizes = SuiteSizes { halluc_pairs: 500, general_items: 1000 };
        let (halluc, general) = build_suites(&lib, 23, sizes).unwrap();

        let perfect: Vec<Vec<TokenId>> =
            halluc.items.iter().map(|r| r.answer_tokens.clone()).collect();
        let scores = score_answers(&halluc, &perfect).unwrap();
        assert_eq!(scores.item_accuracy, 1.0);
        assert_eq!(scores.pair_accuracy, Some(1.0));

        // Exactly one member of each pair answered correctly.
        let mut one_sided = perfect.clone();
        for &(_, b) in &halluc.pairs {
            one_sided[b] = vec![if one_sided[b] == vec![vocab::YES] { vocab::NO } else { vocab::YES }];
        }
        let scores = score_answers(&halluc, &one_sided).unwrap();
        assert_eq!(scores.item_accuracy, 0.5);
        assert_eq!(scores.pair_accuracy, Some(0.0));

        // A uniform random yes/no sheet sits near 1/2 on items and 1/4 on
        // pairs; bands are three binomial standard errors.
        let mut rng = child_rng(23, "sheet", 0);
        let coin = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<TokenId> {
            vec![if rng.gen_bool(0.5) { vocab::YES } else { vocab::NO }]
        };
        let random: Vec<Vec<TokenId>> = (0..halluc.items.len()).map(|_| coin(&mut rng)).collect();
        let scores = score_answers(&halluc, &random).unwrap();
        assert!((scores.item_accuracy - 0.5).abs() < 3.0 * (0.25f64 / 1000.0).sqrt());
        let pair = scores.pair_accuracy.unwrap();
        assert!((pair - 0.25).abs() < 3.0 * (0.25 * 0.75f64 / 500.0).sqrt());

        let random: Vec<Vec<TokenId>> = (0..general.items.len()).map(|_| coin(&mut rng)).collect();
        let scores = score_answers(&general, &random).unwrap();
        assert!(scores.pair_accuracy.is_none());
        assert!((scores.item_accuracy - 0.5).abs() < 3.0 * (0.25f64 / 1000.0).sqrt());
    }

    #[test]
    fn zero_parameter_model_scores_at_chance() {
        let lib = eval_library(403);
        let (_, general) =
            build_suites(&lib, 29, SuiteSizes { halluc_pairs: 1, general_items: 400 }).unwrap();
        let params = ModelParams::zeros(&ModelConfig::for_world(&lib.config)).unwrap();
        let scores = evaluate(&params, &lib, &general).unwrap();
        // All completions tie, so forced choice answers yes everywhere and
        // the balanced suite pins accuracy to chance.
        assert!((scores.item_accuracy - 0.5).abs() <= 3.0 * (0.25f64 / 400.0).sqrt());
    }

    #[test]
    fn train_and_eval_questions_never_share_clips() {
        let train_cfg = WorldConfig::default();
        let train_lib = generate_library(&train_cfg, 404).unwrap();
        let rows =
            build_training_set(&train_lib, 300, DatasetMix::default(), 405).unwrap();
        let eval_lib = eval_library(404);
        let (halluc, general) =
            build_suites(&eval_lib, 31, SuiteSizes { halluc_pairs: 50, general_items: 50 }).unwrap();

        let train_keys: BTreeSet<(u64, (usize, usize))> =
            rows.iter().map(|r| (r.video_id, r.segment)).collect();
        let eval_keys: BTreeSet<(u64, (usize, usize))> = halluc
            .items
            .iter()
            .chain(&general.items)
            .map(|r| (r.video_id, r.segment))
            .collect();
        assert!(!train_keys.is_empty() && !eval_keys.is_empty());
        assert!(train_keys.is_disjoint(&eval_keys));
    }

    #[test]
    fn judge_scores_track_token_overlap() {
        let cfg = WorldConfig::default();
        let attr = |k: u8| vocab::attribute_token(&cfg, k);
        assert_eq!(judge_score(&[vocab::YES], &[vocab::YES]), 5);
        assert_eq!(judge_score(&[vocab::NO], &[vocab::YES]), 1);
        assert_eq!(judge_score(&[vocab::ATTR_MARK, attr(0)], &[vocab::ATTR_MARK, attr(1)]), 3);
        assert_eq!(judge_score(&[vocab::YES], &[vocab::ATTR_MARK, attr(0)]), 1);
        // A short candidate is penalized by the longer reference length.
        assert_eq!(judge_score(&[vocab::ATTR_MARK], &[vocab::ATTR_MARK, attr(2)]), 3);
    }

    #[test]
    fn offline_preference_records_are_valid() {
        let lib = generate_library(&WorldConfig::default(), 406).unwrap();
        let rows = build_training_set(&lib, 120, DatasetMix::default(), 407).unwrap();
        let params =
            ModelParams::init(&ModelConfig::for_world(&lib.config), 408).unwrap();
        let records = construct_offline_preference(&lib, &rows, &params, 409).unwrap();
        // An untrained decoder rarely reproduces the exact answer, so the
        // judge rejects nearly every perturbed decode.
        assert!(!records.is_empty());
        let allowed = [AugKind::DVideo, AugKind::Shuffle, AugKind::Reverse];
        for rec in &records {
            assert_eq!(rec.chosen_answer, rec.example.answer_tokens);
            assert_eq!(rec.chosen_score, 5);
            assert!(rec.rejected_score < 3);
            assert_ne!(rec.rejected_answer, rec.chosen_answer);
            assert!(allowed.contains(&rec.rejected_spec.kind()));
        }
        let again = construct_offline_preference(&lib, &rows, &params, 409).unwrap();
        assert_eq!(records, again);
    }

    #[test]
    fn curation_splits_by_question_kind() {
        let lib = generate_library(&WorldConfig::default(), 410).unwrap();
        let rows = build_training_set(&lib, 200, DatasetMix::default(), 411).unwrap();
        let (clean, mixed) = curate_clean(&rows, 412).unwrap();
        assert_eq!(clean.len(), 100);
        assert!(clean.iter().all(|r| r.kind == QuestionKind::Temporal));
        assert_eq!(mixed.len(), clean.len());
        assert!(mixed.iter().all(|m| rows.contains(m)));
        let (_, mixed_again) = curate_clean(&rows, 412).unwrap();
        assert_eq!(mixed, mixed_again);

        let statics_only =
            build_training_set(&lib, 40, DatasetMix { temporal_fraction: 0.0 }, 413).unwrap();
        assert!(matches!(curate_clean(&statics_only, 1), Err(BenchmarkError::Input(_))));
    }

    #[test]
    fn suites_round_trip_through_disk() {
        let lib = eval_library(414);
        let (halluc, _) =
            build_suites(&lib, 37, SuiteSizes { halluc_pairs: 10, general_items: 10 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let items = dir.path().join("halluc.jsonl");
        let index = dir.path().join("halluc_pairs.json");
        halluc.save(&items, &index).unwrap();
        let loaded = Suite::load(&items, &index).unwrap();
        assert_eq!(loaded, halluc);
    }

    #[test]
    fn sweep_produces_a_full_report() {
        let mut cfg = ExperimentConfig::with_seed(910);
        cfg.train_examples = 40;
        cfg.sft_epochs = 3;
        cfg.preference_epochs = 1;
        cfg.halluc_pairs = 25;
        cfg.general_items = 30;
        let report = sweep_augmentations(&cfg).unwrap();

        assert_eq!(report.rows.len(), 1 + AugKind::ALL.len());
        assert_eq!(report.rows[0].spec, "sft_baseline");
        assert_eq!(report.rows[0].group, "baseline");
        assert_eq!(report.completed_runs, AugKind::ALL.len());
        for (row, kind) in report.rows[1..].iter().zip(AugKind::ALL) {
            assert_eq!(row.spec, kind.name());
            assert!(row.error.is_none());
            assert!(row.halluc_delta.is_some() && row.general_delta.is_some());
            assert!(row.final_loss_mean.is_some() && row.final_loss_var.is_some());
            assert_eq!(row.seed, cfg.sweep_seed(AugKind::ALL.iter().position(|k| *k == kind).unwrap() as u64));
            assert!(matches!(row.group.as_str(), "high" | "low"));
        }

        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "spec,group,halluc_delta,general_delta,final_loss_mean,final_loss_var,seed"
        );
        assert_eq!(lines.count(), report.rows.len());

        assert!(report.curves.keys().all(|k| k == "high" || k == "low"));
        assert!(!report.curve_lines().is_empty());
        assert!(report.warnings.is_empty());
    }
}
