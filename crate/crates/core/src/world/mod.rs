//! Synthetic video world: symbol-grid frames driven by scripted appearance
//! events, plus clip slicing and deterministic rendering.
//!
//! A video is a sequence of `length` frames over an `grid`×`grid` board.
//! Scripted placements put one symbol at one cell for a contiguous frame
//! range; at most one symbol ever occupies a cell. Each frame also carries a
//! low-amplitude noise board so that no two frames are ever bit-identical.
//! Ground truth for every question is decidable from the script alone, which
//! is what makes rejected-clip labeling exact.

mod dataset;
mod features;
mod gen;
mod qa;

pub use dataset::{
    build_training_set, read_jsonl, write_jsonl, DatasetMix, ExampleRecord,
};
pub use features::{render_features, FeatureTensor};
pub use gen::generate_library;
pub use qa::{
    answer_tokens, clip_truth, generate_qa, parse_prompt, prompt_tokens, script_truth, vocab,
    QaMeta, QAExample, Question, QuestionKind, TruthValue,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifies one of the world's symbols.
pub type SymbolId = u16;

/// Token identifier in the closed QA vocabulary.
pub type TokenId = usize;

/// Errors from world construction, slicing, and question generation.
#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world config `{key}`: {reason}")]
    Config { key: &'static str, reason: String },
    #[error("video {0} not found in library")]
    UnknownVideo(u64),
    #[error("clip [{start}, {end}) out of bounds for video of length {length}")]
    Bounds { start: usize, end: usize, length: usize },
    #[error("no valid question of kind {kind:?} for this clip")]
    Generation { kind: QuestionKind },
    #[error("library generation failed: {0}")]
    LibraryGeneration(String),
    #[error("malformed prompt: {0}")]
    Prompt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// World dimensions and generation knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WorldConfig {
    /// Number of videos in the library.
    pub videos: usize,
    /// Frames per video (`T`).
    pub video_length: usize,
    /// Frames per clip (`F`).
    pub frames_per_clip: usize,
    /// Board side length; the board is `grid`×`grid`.
    pub grid: usize,
    /// Number of distinct symbols (`S`).
    pub symbols: usize,
    /// Number of attribute values (`K`).
    pub attributes: usize,
    /// Upper bound of the per-cell uniform noise.
    pub noise_scale: f64,
    /// Fewest symbols placed in a single video.
    pub min_symbols_per_video: usize,
    /// Most symbols placed in a single video.
    pub max_symbols_per_video: usize,
    /// Fraction of generated static questions that ask for an attribute.
    pub attribute_question_fraction: f64,
    /// Offset added to every video id, so libraries can use disjoint id
    /// ranges (e.g. training vs evaluation).
    pub video_id_base: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            videos: 12,
            video_length: 64,
            frames_per_clip: 8,
            grid: 8,
            symbols: 28,
            attributes: 4,
            noise_scale: 0.05,
            min_symbols_per_video: 4,
            max_symbols_per_video: 6,
            attribute_question_fraction: 1.0 / 3.0,
            video_id_base: 0,
        }
    }
}

impl WorldConfig {
    /// Validates the dimensional constraints the rest of the crate relies on.
    pub fn validate(&self) -> Result<(), WorldError> {
        let err = |key, reason: String| Err(WorldError::Config { key, reason });
        if self.videos < 2 {
            return err("videos", format!("need at least 2 videos, got {}", self.videos));
        }
        if self.frames_per_clip < 2 {
            return err("frames", format!("clips need at least 2 frames, got {}", self.frames_per_clip));
        }
        if self.video_length < 4 * self.frames_per_clip {
            return err(
                "video_length",
                format!(
                    "videos must span at least 4 clip lengths ({}), got {}",
                    4 * self.frames_per_clip,
                    self.video_length
                ),
            );
        }
        if self.grid < 2 || self.grid % 2 != 0 {
            return err("grid", format!("grid side must be even and >= 2, got {}", self.grid));
        }
        if self.symbols < 2 {
            return err("symbols", format!("need at least 2 symbols, got {}", self.symbols));
        }
        if self.symbols > self.grid * self.grid {
            return err(
                "symbols",
                format!("{} symbols cannot get distinct cells on a {0}x{0} board", self.grid),
            );
        }
        if self.attributes == 0 {
            return err("attributes", "need at least one attribute value".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return err("noise_scale", format!("must be finite and >= 0, got {}", self.noise_scale));
        }
        if self.min_symbols_per_video < 2 || self.min_symbols_per_video > self.max_symbols_per_video {
            return err(
                "min_symbols_per_video",
                format!(
                    "need 2 <= min <= max, got {}..{}",
                    self.min_symbols_per_video, self.max_symbols_per_video
                ),
            );
        }
        if self.max_symbols_per_video > self.symbols {
            return err(
                "max_symbols_per_video",
                format!("{} exceeds symbol count {}", self.max_symbols_per_video, self.symbols),
            );
        }
        if !(0.0..=1.0).contains(&self.attribute_question_fraction) {
            return err(
                "attribute_question_fraction",
                format!("must lie in [0, 1], got {}", self.attribute_question_fraction),
            );
        }
        Ok(())
    }

    /// Cell a symbol always occupies. Keeping the map global (and injective)
    /// means the position of every symbol's feature channel is stable across
    /// videos, so presence detection learned on one library transfers to
    /// held-out libraries.
    pub fn cell_of(&self, symbol: SymbolId) -> (usize, usize) {
        let g = self.grid;
        let s = symbol as usize;
        (s % g, (s / g + 3 * (s % g)) % g)
    }

    /// Attribute a symbol always carries, derived from its identity so the
    /// value is learnable from plain presence features.
    pub fn attribute_of(&self, symbol: SymbolId) -> u8 {
        ((3 * symbol as usize + 1) % self.attributes) as u8
    }

    /// Feature dimensionality per frame: one pooled board per symbol plane
    /// plus one for the noise plane.
    pub fn feature_dim(&self) -> usize {
        let pooled = (self.grid / 2) * (self.grid / 2);
        pooled * (self.symbols + 1)
    }
}

/// One scripted appearance: a symbol sits at `cell` for frames
/// `[frame_range.0, frame_range.1)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Placement {
    pub symbol: SymbolId,
    pub attribute: u8,
    pub frame_range: (usize, usize),
    pub cell: (usize, usize),
}

/// Full appearance script of one video. Ranges of the same symbol never
/// overlap, and no two placements that overlap in time share a cell.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct EventScript {
    pub placements: Vec<Placement>,
}

impl EventScript {
    /// Symbols mentioned anywhere in the script, deduplicated and sorted.
    pub fn symbols(&self) -> Vec<SymbolId> {
        let mut out: Vec<SymbolId> = self.placements.iter().map(|p| p.symbol).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Frames in `[start, end)` where `symbol` is visible, as offsets from
    /// `start`.
    pub fn coverage(&self, symbol: SymbolId, start: usize, end: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for t in start..end {
            if self
                .placements
                .iter()
                .any(|p| p.symbol == symbol && p.frame_range.0 <= t && t < p.frame_range.1)
            {
                out.push(t - start);
            }
        }
        out
    }
}

/// One rendered board state.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Row-major `grid*grid` cells; an occupied cell holds `(symbol, attribute)`.
    pub cells: Vec<Option<(SymbolId, u8)>>,
    /// Row-major per-cell noise in `[0, noise_scale]`.
    pub noise: Vec<f64>,
}

impl Frame {
    /// Symbols present anywhere in the frame.
    pub fn symbols(&self) -> impl Iterator<Item = (SymbolId, u8)> + '_ {
        self.cells.iter().filter_map(|c| *c)
    }
}

/// One video: script plus deterministically re-renderable frames.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VideoRecord {
    pub video_id: u64,
    pub length: usize,
    pub script: EventScript,
    /// Seed of the noise stream; frames are rebuilt from script + this seed.
    pub noise_seed: u64,
    #[serde(skip)]
    frames: Vec<Frame>,
}

impl VideoRecord {
    /// Renders all frames from the script and noise seed.
    pub(crate) fn materialize(cfg: &WorldConfig, video_id: u64, script: EventScript, noise_seed: u64) -> Self {
        let cells = cfg.grid * cfg.grid;
        let mut noise_rng = crate::rng::rng_from(noise_seed);
        let mut frames = Vec::with_capacity(cfg.video_length);
        for t in 0..cfg.video_length {
            let mut frame = Frame {
                cells: vec![None; cells],
                noise: Vec::with_capacity(cells),
            };
            for _ in 0..cells {
                use rand::Rng;
                frame.noise.push(noise_rng.gen::<f64>() * cfg.noise_scale);
            }
            for p in &script.placements {
                if p.frame_range.0 <= t && t < p.frame_range.1 {
                    frame.cells[p.cell.0 * cfg.grid + p.cell.1] = Some((p.symbol, p.attribute));
                }
            }
            frames.push(frame);
        }
        VideoRecord { video_id, length: cfg.video_length, script, noise_seed, frames }
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }
}

/// Library of videos with the config that generated them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VideoLibrary {
    pub format_version: u32,
    pub config: WorldConfig,
    pub seed: u64,
    pub videos: Vec<VideoRecord>,
}

/// Current on-disk format version for [`VideoLibrary`] files.
pub const LIBRARY_FORMAT_VERSION: u32 = 1;

impl VideoLibrary {
    pub fn video(&self, video_id: u64) -> Result<&VideoRecord, WorldError> {
        self.videos
            .iter()
            .find(|v| v.video_id == video_id)
            .ok_or(WorldError::UnknownVideo(video_id))
    }

    /// Serializes to the single-file library format.
    pub fn save(&self, path: &std::path::Path) -> Result<(), WorldError> {
        let body = serde_json::to_string(self)?;
        std::fs::write(path, body)?;
        Ok(())
    }

    /// Loads a library file and re-renders every video's frames.
    pub fn load(path: &std::path::Path) -> Result<Self, WorldError> {
        let body = std::fs::read_to_string(path)?;
        let mut lib: VideoLibrary = serde_json::from_str(&body)?;
        if lib.format_version != LIBRARY_FORMAT_VERSION {
            return Err(WorldError::LibraryGeneration(format!(
                "unsupported library format version {}",
                lib.format_version
            )));
        }
        for video in &mut lib.videos {
            let rendered = VideoRecord::materialize(&lib.config, video.video_id, video.script.clone(), video.noise_seed);
            *video = rendered;
        }
        Ok(lib)
    }

    /// Test-only constructor that skips generation-time checks.
    pub fn from_parts(config: WorldConfig, seed: u64, videos: Vec<VideoRecord>) -> Self {
        VideoLibrary { format_version: LIBRARY_FORMAT_VERSION, config, seed, videos }
    }
}

/// A fixed-length run of frames cut (and possibly reordered) from a video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub source_video_id: u64,
    /// Span of source frames the clip was drawn from, `[start, end)`.
    pub segment: (usize, usize),
    pub frames: Vec<Frame>,
    /// `frame_order[i]` is the index, in the clip's base segment order, of
    /// the frame now at position `i`. Identity for plain slices.
    pub frame_order: Vec<usize>,
}

impl VideoClip {
    /// Returns the clip with frames permuted so that position `i` holds the
    /// frame previously at `order[i]`, composing the order bookkeeping.
    pub fn reordered(&self, order: &[usize]) -> VideoClip {
        assert_eq!(order.len(), self.frames.len(), "permutation length mismatch");
        let frames = order.iter().map(|&j| self.frames[j].clone()).collect();
        let frame_order = order.iter().map(|&j| self.frame_order[j]).collect();
        VideoClip {
            source_video_id: self.source_video_id,
            segment: self.segment,
            frames,
            frame_order,
        }
    }

    /// True when `frame_order` is the identity permutation.
    pub fn is_identity_order(&self) -> bool {
        self.frame_order.iter().enumerate().all(|(i, &j)| i == j)
    }
}

/// Cuts the `frames`-long clip starting at `start` out of a video.
pub fn slice_clip(
    library: &VideoLibrary,
    video_id: u64,
    start: usize,
    frames: usize,
) -> Result<VideoClip, WorldError> {
    let video = library.video(video_id)?;
    let end = start + frames;
    if frames == 0 || end > video.length {
        return Err(WorldError::Bounds { start, end, length: video.length });
    }
    Ok(VideoClip {
        source_video_id: video_id,
        segment: (start, end),
        frames: video.frames()[start..end].to_vec(),
        frame_order: (0..frames).collect(),
    })
}
