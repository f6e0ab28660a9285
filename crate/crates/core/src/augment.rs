//! Clip augmentations for constructing rejected preference pairs, candidate
//! set assembly, and exact rejected-clip labeling.
//!
//! Seven augmentation families exist. Five of them keep the rejected clip
//! visually close to the original (border crop, disjoint segment of the same
//! video, frame shuffle, reversal, speed change); swapping in a different
//! video or composing two augmentations lands far away. A rejected clip is
//! *truly* rejected when the question's answer changes — or stops being
//! defined — on the augmented frames, and *falsely* rejected when the answer
//! survives, which is exactly the failure mode multi-candidate weighting is
//! meant to absorb.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{
    clip_truth, parse_prompt, slice_clip, QAExample, VideoClip, VideoLibrary, WorldError,
};

/// Errors from augmentation application and candidate assembly.
#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("augmentation unavailable: {0}")]
    Unavailable(String),
    #[error("invalid candidate configuration: {0}")]
    Config(String),
    #[error("invalid augmentation parameter `{param}`: {reason}")]
    Parameter { param: &'static str, reason: String },
    #[error(transparent)]
    World(#[from] WorldError),
}

/// The seven augmentation families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Crop,
    DVideo,
    DClip,
    Shuffle,
    Reverse,
    Rate,
    Combination,
}

impl AugKind {
    pub const ALL: [AugKind; 7] = [
        AugKind::Crop,
        AugKind::DVideo,
        AugKind::DClip,
        AugKind::Shuffle,
        AugKind::Reverse,
        AugKind::Rate,
        AugKind::Combination,
    ];

    /// The six base families a combination may draw from.
    pub const BASE: [AugKind; 6] = [
        AugKind::Crop,
        AugKind::DVideo,
        AugKind::DClip,
        AugKind::Shuffle,
        AugKind::Reverse,
        AugKind::Rate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AugKind::Crop => "crop",
            AugKind::DVideo => "dvideo",
            AugKind::DClip => "dclip",
            AugKind::Shuffle => "shuffle",
            AugKind::Reverse => "reverse",
            AugKind::Rate => "rate",
            AugKind::Combination => "combination",
        }
    }
}

impl std::str::FromStr for AugKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AugKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown augmentation `{s}`"))
    }
}

/// Corner a crop region is anchored to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Anchor {
    pub const ALL: [Anchor; 4] = [Anchor::TopLeft, Anchor::TopRight, Anchor::BottomLeft, Anchor::BottomRight];
}

/// Largest board fraction a crop may remove.
pub const MAX_CROP_RATIO: f64 = 0.2;

/// A fully instantiated augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AugmentationSpec {
    /// Zero out a border rectangle (symbols removed, noise zeroed), fixed
    /// across the clip's frames.
    Crop { ratio: f64, anchor: Anchor },
    /// Same-length clip from a different video.
    DVideo,
    /// Same-length clip from the same video, temporally disjoint.
    DClip,
    /// Uniformly drawn non-identity frame permutation.
    Shuffle,
    /// Frames in reverse order.
    Reverse,
    /// Playback speed change: 0.5 duplicates frames, 2.0 strides over a
    /// doubled window.
    Rate { factor: f64 },
    /// Two base augmentations applied in sequence.
    Combination { first: Box<AugmentationSpec>, second: Box<AugmentationSpec> },
}

impl AugmentationSpec {
    pub fn kind(&self) -> AugKind {
        match self {
            AugmentationSpec::Crop { .. } => AugKind::Crop,
            AugmentationSpec::DVideo => AugKind::DVideo,
            AugmentationSpec::DClip => AugKind::DClip,
            AugmentationSpec::Shuffle => AugKind::Shuffle,
            AugmentationSpec::Reverse => AugKind::Reverse,
            AugmentationSpec::Rate { .. } => AugKind::Rate,
            AugmentationSpec::Combination { .. } => AugKind::Combination,
        }
    }

    fn validate(&self) -> Result<(), AugmentError> {
        match self {
            AugmentationSpec::Crop { ratio, .. } => {
                if !(*ratio > 0.0 && *ratio <= MAX_CROP_RATIO) {
                    return Err(AugmentError::Parameter {
                        param: "ratio",
                        reason: format!("must lie in (0, {MAX_CROP_RATIO}], got {ratio}"),
                    });
                }
            }
            AugmentationSpec::Rate { factor } => {
                if *factor != 0.5 && *factor != 2.0 {
                    return Err(AugmentError::Parameter {
                        param: "factor",
                        reason: format!("supported factors are 0.5 and 2.0, got {factor}"),
                    });
                }
            }
            AugmentationSpec::Combination { first, second } => {
                for part in [first, second] {
                    if part.kind() == AugKind::Combination {
                        return Err(AugmentError::Parameter {
                            param: "combination",
                            reason: "combinations cannot nest".into(),
                        });
                    }
                    part.validate()?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// How far an augmented clip sits from the original, per family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityClass {
    High,
    Low,
}

/// Fixed family-to-class map: crop, disjoint clip, shuffle, reverse, and
/// rate stay close to the original; different-video and combinations do not.
pub fn similarity_class(kind: AugKind) -> SimilarityClass {
    match kind {
        AugKind::Crop | AugKind::DClip | AugKind::Shuffle | AugKind::Reverse | AugKind::Rate => {
            SimilarityClass::High
        }
        AugKind::DVideo | AugKind::Combination => SimilarityClass::Low,
    }
}

/// Draws concrete parameters for a family.
pub fn instantiate(kind: AugKind, rng: &mut ChaCha8Rng) -> AugmentationSpec {
    match kind {
        AugKind::Crop => AugmentationSpec::Crop {
            ratio: rng.gen_range(0.08..=MAX_CROP_RATIO),
            anchor: *Anchor::ALL.choose(rng).expect("non-empty"),
        },
        AugKind::DVideo => AugmentationSpec::DVideo,
        AugKind::DClip => AugmentationSpec::DClip,
        AugKind::Shuffle => AugmentationSpec::Shuffle,
        AugKind::Reverse => AugmentationSpec::Reverse,
        AugKind::Rate => AugmentationSpec::Rate {
            factor: if rng.gen_bool(0.5) { 0.5 } else { 2.0 },
        },
        AugKind::Combination => {
            let picks = sample(rng, AugKind::BASE.len(), 2);
            let first = instantiate(AugKind::BASE[picks.index(0)], rng);
            let second = instantiate(AugKind::BASE[picks.index(1)], rng);
            AugmentationSpec::Combination { first: Box::new(first), second: Box::new(second) }
        }
    }
}

/// Applies an augmentation, producing the rejected clip.
pub fn apply_augmentation(
    spec: &AugmentationSpec,
    clip: &VideoClip,
    library: &VideoLibrary,
    rng: &mut ChaCha8Rng,
) -> Result<VideoClip, AugmentError> {
    spec.validate()?;
    let f = clip.frames.len();
    match spec {
        AugmentationSpec::Crop { ratio, anchor } => {
            let g = library.config.grid;
            let budget = (ratio * (g * g) as f64).floor() as usize;
            let mut out = clip.clone();
            if budget == 0 {
                return Ok(out);
            }
            let rows = rng.gen_range(1..=budget.min(g));
            let cols = (budget / rows).min(g).max(1);
            for frame in &mut out.frames {
                for r in 0..rows {
                    for c in 0..cols {
                        let (rr, cc) = match anchor {
                            Anchor::TopLeft => (r, c),
                            Anchor::TopRight => (r, g - 1 - c),
                            Anchor::BottomLeft => (g - 1 - r, c),
                            Anchor::BottomRight => (g - 1 - r, g - 1 - c),
                        };
                        frame.cells[rr * g + cc] = None;
                        frame.noise[rr * g + cc] = 0.0;
                    }
                }
            }
            Ok(out)
        }
        AugmentationSpec::DVideo => {
            let others: Vec<u64> = library
                .videos
                .iter()
                .map(|v| v.video_id)
                .filter(|&id| id != clip.source_video_id)
                .collect();
            let Some(&video_id) = others.choose(rng) else {
                return Err(AugmentError::Unavailable("library holds no other video".into()));
            };
            let length = library.video(video_id)?.length;
            let start = rng.gen_range(0..=length - f);
            Ok(slice_clip(library, video_id, start, f)?)
        }
        AugmentationSpec::DClip => {
            let video = library.video(clip.source_video_id)?;
            let (seg_start, seg_end) = clip.segment;
            let starts: Vec<usize> = (0..=video.length - f)
                .filter(|&s| s + f <= seg_start || s >= seg_end)
                .collect();
            let Some(&start) = starts.choose(rng) else {
                return Err(AugmentError::Unavailable(format!(
                    "no clip-length segment disjoint from [{seg_start}, {seg_end})"
                )));
            };
            Ok(slice_clip(library, clip.source_video_id, start, f)?)
        }
        AugmentationSpec::Shuffle => {
            if f < 2 {
                return Err(AugmentError::Unavailable("cannot shuffle a single frame".into()));
            }
            let mut order: Vec<usize> = (0..f).collect();
            loop {
                order.shuffle(rng);
                if order.iter().enumerate().any(|(i, &j)| i != j) {
                    break;
                }
            }
            Ok(clip.reordered(&order))
        }
        AugmentationSpec::Reverse => {
            let order: Vec<usize> = (0..f).rev().collect();
            Ok(clip.reordered(&order))
        }
        AugmentationSpec::Rate { factor } => {
            let video = library.video(clip.source_video_id)?;
            let (seg_start, _) = clip.segment;
            let (resampled, segment) = if *factor == 2.0 {
                let window = 2 * f;
                let w0 = seg_start.min(video.length - window);
                let base = slice_clip(library, clip.source_video_id, w0, window)?;
                let frames: Vec<_> = (0..f).map(|k| base.frames[2 * k].clone()).collect();
                (frames, (w0, w0 + window))
            } else {
                let base = slice_clip(library, clip.source_video_id, seg_start, f)?;
                let frames: Vec<_> = (0..f).map(|k| base.frames[k / 2].clone()).collect();
                (frames, (seg_start, seg_start + f))
            };
            // Preserve any temporal transform already applied to the input.
            let base_clip = VideoClip {
                source_video_id: clip.source_video_id,
                segment,
                frames: resampled,
                frame_order: (0..f).collect(),
            };
            Ok(base_clip.reordered(&clip.frame_order))
        }
        AugmentationSpec::Combination { first, second } => {
            let mid = apply_augmentation(first, clip, library, rng)?;
            apply_augmentation(second, &mid, library, rng)
        }
    }
}

/// Label of a rejected clip relative to the example it rejects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectLabel {
    /// The answer changed or stopped being defined: a legitimate negative.
    TrueRejected,
    /// The answer survived the augmentation: rejecting this clip pushes the
    /// model away from a still-correct answer.
    FalseRejected,
}

/// Exact rejected-clip label: re-interpret the example's question on the
/// augmented frames and compare against the original truth.
pub fn oracle_reject_label(example: &QAExample, augmented: &VideoClip, library: &VideoLibrary) -> RejectLabel {
    let question = match parse_prompt(&library.config, &example.prompt) {
        Ok(q) => q,
        Err(_) => return RejectLabel::TrueRejected,
    };
    match clip_truth(augmented, &question) {
        Some(truth) if truth == example.meta.truth => RejectLabel::FalseRejected,
        _ => RejectLabel::TrueRejected,
    }
}

/// Strategy for assembling the candidate set of rejected clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidatePolicy {
    /// Draw from the close-to-original families.
    HighSimilarity,
    /// Draw from the far-from-original families.
    LowSimilarity,
    /// Half close, half far (the extra pick goes to the close side).
    CombinationMix,
    /// Order-perturbing families only.
    Temporal,
    /// Content-perturbing families only.
    Visual,
    /// Interleave content and order picks, starting with the disjoint-clip
    /// swap (falling back to crop when unavailable) and then the shuffle.
    Mixed,
    /// Apply exactly these instantiated specs.
    Explicit(Vec<AugmentationSpec>),
}

const HIGH_POOL: [AugKind; 5] = [AugKind::Crop, AugKind::DClip, AugKind::Shuffle, AugKind::Reverse, AugKind::Rate];
const LOW_POOL: [AugKind; 2] = [AugKind::DVideo, AugKind::Combination];
const TEMPORAL_POOL: [AugKind; 3] = [AugKind::Shuffle, AugKind::Reverse, AugKind::Rate];
const VISUAL_POOL: [AugKind; 2] = [AugKind::Crop, AugKind::DClip];
const MIXED_PRIORITY: [AugKind; 5] = [AugKind::DClip, AugKind::Shuffle, AugKind::Crop, AugKind::Reverse, AugKind::Rate];

/// One rejected candidate: the augmented clip plus the spec that made it.
#[derive(Debug, Clone)]
pub struct CandidateEntry {
    pub clip: VideoClip,
    pub spec: AugmentationSpec,
}

/// The candidate set used by the multi-candidate objective.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub entries: Vec<CandidateEntry>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn draw_kinds(pool: &[AugKind], n: usize, rng: &mut ChaCha8Rng) -> Vec<AugKind> {
    sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
}

/// Builds the candidate set for one training step.
pub fn build_candidate_set(
    clip: &VideoClip,
    library: &VideoLibrary,
    policy: &CandidatePolicy,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CandidateSet, AugmentError> {
    if n == 0 {
        return Err(AugmentError::Config("candidate count must be at least 1".into()));
    }
    let too_many = |available: usize| {
        AugmentError::Config(format!(
            "candidate count {n} exceeds the {available} distinct specs available under this policy"
        ))
    };
    let specs: Vec<AugmentationSpec> = match policy {
        CandidatePolicy::HighSimilarity => {
            if n > HIGH_POOL.len() {
                return Err(too_many(HIGH_POOL.len()));
            }
            draw_kinds(&HIGH_POOL, n, rng).into_iter().map(|k| instantiate(k, rng)).collect()
        }
        CandidatePolicy::LowSimilarity => {
            if n > LOW_POOL.len() {
                return Err(too_many(LOW_POOL.len()));
            }
            draw_kinds(&LOW_POOL, n, rng).into_iter().map(|k| instantiate(k, rng)).collect()
        }
        CandidatePolicy::CombinationMix => {
            let high = n.div_ceil(2);
            let low = n / 2;
            if high > HIGH_POOL.len() || low > LOW_POOL.len() {
                return Err(too_many(HIGH_POOL.len() + LOW_POOL.len()));
            }
            let mut kinds = draw_kinds(&HIGH_POOL, high, rng);
            kinds.extend(draw_kinds(&LOW_POOL, low, rng));
            kinds.into_iter().map(|k| instantiate(k, rng)).collect()
        }
        CandidatePolicy::Temporal => {
            if n > TEMPORAL_POOL.len() {
                return Err(too_many(TEMPORAL_POOL.len()));
            }
            draw_kinds(&TEMPORAL_POOL, n, rng).into_iter().map(|k| instantiate(k, rng)).collect()
        }
        CandidatePolicy::Visual => {
            if n > VISUAL_POOL.len() {
                return Err(too_many(VISUAL_POOL.len()));
            }
            draw_kinds(&VISUAL_POOL, n, rng).into_iter().map(|k| instantiate(k, rng)).collect()
        }
        CandidatePolicy::Mixed => {
            if n > MIXED_PRIORITY.len() {
                return Err(too_many(MIXED_PRIORITY.len()));
            }
            MIXED_PRIORITY[..n].iter().map(|&k| instantiate(k, rng)).collect()
        }
        CandidatePolicy::Explicit(list) => {
            if list.len() != n {
                return Err(AugmentError::Config(format!(
                    "explicit policy supplies {} specs but {n} candidates were requested",
                    list.len()
                )));
            }
            list.clone()
        }
    };

    let mut entries = Vec::with_capacity(n);
    for spec in specs {
        match apply_augmentation(&spec, clip, library, rng) {
            Ok(aug) => entries.push(CandidateEntry { clip: aug, spec }),
            // The disjoint-clip swap is the one family that can run out of
            // source material; fall back to a crop of the original.
            Err(AugmentError::Unavailable(_)) if spec.kind() == AugKind::DClip => {
                let fallback = instantiate(AugKind::Crop, rng);
                let aug = apply_augmentation(&fallback, clip, library, rng)?;
                entries.push(CandidateEntry { clip: aug, spec: fallback });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(CandidateSet { entries })
}
