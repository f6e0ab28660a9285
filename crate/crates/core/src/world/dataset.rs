//! Dataset rows and JSONL persistence.
//!
//! A row points at a clip by `(video_id, segment)` rather than embedding
//! features, so datasets stay small and rendering stays in one place. Rows
//! produced for evaluation suites may additionally carry a frame
//! permutation (`frame_order`) describing a temporally perturbed member.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::rng::child_rng;

use super::{
    generate_qa, slice_clip, QAExample, QaMeta, QuestionKind, SymbolId, TokenId, TruthValue,
    VideoClip, VideoLibrary, WorldError,
};

/// One dataset row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub video_id: u64,
    pub segment: (usize, usize),
    pub prompt_tokens: Vec<TokenId>,
    pub answer_tokens: Vec<TokenId>,
    pub kind: QuestionKind,
    pub symbols: Vec<SymbolId>,
    pub truth: TruthValue,
    /// Frame permutation applied to the segment; absent means identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_order: Option<Vec<usize>>,
}

impl ExampleRecord {
    pub fn from_example(clip: &VideoClip, example: &QAExample) -> Self {
        ExampleRecord {
            video_id: clip.source_video_id,
            segment: clip.segment,
            prompt_tokens: example.prompt.clone(),
            answer_tokens: example.answer.clone(),
            kind: example.meta.kind,
            symbols: example.meta.symbols.clone(),
            truth: example.meta.truth,
            frame_order: if clip.is_identity_order() { None } else { Some(clip.frame_order.clone()) },
        }
    }

    /// Rebuilds the question/answer view of this row.
    pub fn qa(&self) -> QAExample {
        QAExample {
            prompt: self.prompt_tokens.clone(),
            answer: self.answer_tokens.clone(),
            meta: QaMeta {
                kind: self.kind,
                symbols: self.symbols.clone(),
                truth: self.truth,
            },
        }
    }

    /// Cuts and reorders the clip this row refers to.
    pub fn clip(&self, library: &VideoLibrary) -> Result<VideoClip, WorldError> {
        let frames = self.segment.1 - self.segment.0;
        let clip = slice_clip(library, self.video_id, self.segment.0, frames)?;
        match &self.frame_order {
            Some(order) => Ok(clip.reordered(order)),
            None => Ok(clip),
        }
    }
}

/// Answer-class mix used when sampling a balanced dataset.
#[derive(Debug, Clone, Copy)]
pub struct DatasetMix {
    /// Fraction of rows asking a temporal question.
    pub temporal_fraction: f64,
}

impl Default for DatasetMix {
    fn default() -> Self {
        DatasetMix { temporal_fraction: 0.5 }
    }
}

/// Target answer classes used to balance sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bucket {
    TemporalYes,
    TemporalNo,
    PresentYes,
    PresentNo,
    Attribute,
}

impl Bucket {
    fn matches(&self, ex: &QAExample) -> bool {
        match (self, ex.meta.kind, ex.meta.truth) {
            (Bucket::TemporalYes, QuestionKind::Temporal, TruthValue::Bool(true)) => true,
            (Bucket::TemporalNo, QuestionKind::Temporal, TruthValue::Bool(false)) => true,
            (Bucket::PresentYes, QuestionKind::Static, TruthValue::Bool(true)) => true,
            (Bucket::PresentNo, QuestionKind::Static, TruthValue::Bool(false)) => true,
            (Bucket::Attribute, QuestionKind::Static, TruthValue::Attribute(_)) => true,
            _ => false,
        }
    }

    fn kind(&self) -> QuestionKind {
        match self {
            Bucket::TemporalYes | Bucket::TemporalNo => QuestionKind::Temporal,
            _ => QuestionKind::Static,
        }
    }
}

const MAX_DRAWS_PER_ROW: usize = 4000;

/// Samples a balanced training set: yes/no classes split evenly inside each
/// question family, attribute rows governed by the library's configured
/// fraction of static questions.
pub fn build_training_set(
    library: &VideoLibrary,
    n: usize,
    mix: DatasetMix,
    seed: u64,
) -> Result<Vec<ExampleRecord>, WorldError> {
    let cfg = &library.config;
    if !(0.0..=1.0).contains(&mix.temporal_fraction) {
        return Err(WorldError::Config {
            key: "temporal_fraction",
            reason: format!("must lie in [0, 1], got {}", mix.temporal_fraction),
        });
    }
    let n_temporal = (n as f64 * mix.temporal_fraction).round() as usize;
    let n_static = n - n_temporal;
    let n_attr = (n_static as f64 * cfg.attribute_question_fraction).round() as usize;
    let n_presence = n_static - n_attr;

    let mut buckets = Vec::with_capacity(n);
    for i in 0..n_temporal {
        buckets.push(if i % 2 == 0 { Bucket::TemporalYes } else { Bucket::TemporalNo });
    }
    for i in 0..n_presence {
        buckets.push(if i % 2 == 0 { Bucket::PresentYes } else { Bucket::PresentNo });
    }
    buckets.extend(std::iter::repeat(Bucket::Attribute).take(n_attr));
    let mut order_rng = child_rng(seed, "bucket-order", 0);
    use rand::seq::SliceRandom;
    buckets.shuffle(&mut order_rng);

    let mut out = Vec::with_capacity(n);
    let mut draw_rng = child_rng(seed, "draws", 0);
    for (row, bucket) in buckets.into_iter().enumerate() {
        let mut found = None;
        for _ in 0..MAX_DRAWS_PER_ROW {
            let clip = random_clip(library, &mut draw_rng)?;
            let Ok(example) = generate_qa(library, &clip, bucket.kind(), &mut draw_rng) else {
                continue;
            };
            if bucket.matches(&example) {
                found = Some(ExampleRecord::from_example(&clip, &example));
                break;
            }
        }
        match found {
            Some(rec) => out.push(rec),
            None => {
                return Err(WorldError::LibraryGeneration(format!(
                    "could not fill dataset row {row} ({bucket:?}) after {MAX_DRAWS_PER_ROW} draws"
                )))
            }
        }
    }
    Ok(out)
}

/// Cuts a uniformly random plain clip.
pub(crate) fn random_clip(library: &VideoLibrary, rng: &mut ChaCha8Rng) -> Result<VideoClip, WorldError> {
    let cfg = &library.config;
    let video = &library.videos[rng.gen_range(0..library.videos.len())];
    let start = rng.gen_range(0..=cfg.video_length - cfg.frames_per_clip);
    slice_clip(library, video.video_id, start, cfg.frames_per_clip)
}

/// Writes records as one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), WorldError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one JSON object per line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, WorldError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
