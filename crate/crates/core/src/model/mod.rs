//! A tiny autoregressive transformer over clip features and question tokens.
//!
//! The policy reads one row per frame (projected features plus a frame
//! position embedding) followed by one row per text token (token embedding
//! plus a text position embedding), runs a stack of causal attention blocks
//! with gated feed-forward layers, and emits next-token logits through an
//! output head. Parameters live in a flat, index-stable list of dense
//! matrices so gradients, optimizer state, and checkpoints all share one
//! layout.

mod autodiff;
mod net;

pub use autodiff::{
    finite_diff_check, log_softmax_rows, sigmoid, softmax_rows, softplus, FdCoord, FdReport,
    Graph, NodeId,
};
pub use net::{
    build_sequence_log_prob, decode_argmax, logits_for_answer, next_token_logits,
    sequence_log_prob, PolicyPair,
};

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_from;
use crate::world::{vocab, WorldConfig};

/// Errors from model construction, gradient checks, and checkpoint IO.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration `{key}`: {reason}")]
    Config { key: &'static str, reason: String },
    #[error("backward requires a 1x1 loss node, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error(
        "gradient check failed at {tensor}[{index}]: analytic {analytic:.6e}, numeric {numeric:.6e}, relative error {rel_err:.3e}"
    )]
    GradientCheck { tensor: String, index: usize, analytic: f64, numeric: f64, rel_err: f64 },
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
}

/// Network shape. All sizes are in elements, not bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of every internal representation.
    pub embed_dim: usize,
    /// Attention heads per block; must divide `embed_dim`.
    pub n_heads: usize,
    /// Number of attention + feed-forward blocks.
    pub n_blocks: usize,
    /// Token vocabulary size.
    pub vocab: usize,
    /// Length of one frame's feature vector.
    pub feature_dim: usize,
    /// Frames per clip (one input row each).
    pub frames: usize,
    /// Longest supported prompt, in tokens.
    pub max_prompt: usize,
    /// Longest supported answer, in tokens.
    pub max_answer: usize,
}

impl ModelConfig {
    /// Shape derived from a world description with the default capacity.
    pub fn for_world(world: &WorldConfig) -> ModelConfig {
        ModelConfig {
            embed_dim: 32,
            n_heads: 2,
            n_blocks: 2,
            vocab: vocab::size(world),
            feature_dim: world.feature_dim(),
            frames: world.frames_per_clip,
            max_prompt: vocab::MAX_PROMPT,
            max_answer: vocab::MAX_ANSWER,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |key, reason: String| Err(ModelError::Config { key, reason });
        if self.embed_dim == 0 {
            return err("embed_dim", "must be positive".into());
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return err(
                "n_heads",
                format!("{} must be positive and divide embed_dim {}", self.n_heads, self.embed_dim),
            );
        }
        if self.n_blocks == 0 {
            return err("n_blocks", "must be positive".into());
        }
        if self.vocab < 2 {
            return err("vocab", format!("need at least 2 tokens, got {}", self.vocab));
        }
        if self.feature_dim == 0 {
            return err("feature_dim", "must be positive".into());
        }
        if self.frames == 0 {
            return err("frames", "must be positive".into());
        }
        if self.max_prompt == 0 {
            return err("max_prompt", "must be positive".into());
        }
        if self.max_answer == 0 {
            return err("max_answer", "must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Named shape of every tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let e = self.embed_dim;
        let mut tensors = vec![
            ("tok_embed".to_string(), self.vocab, e),
            ("feat_proj".to_string(), self.feature_dim, e),
            ("frame_pos".to_string(), self.frames, e),
            ("text_pos".to_string(), self.max_prompt + self.max_answer, e),
        ];
        for b in 0..self.n_blocks {
            for name in ["wq", "wk", "wv", "wo", "wg", "wu", "wd"] {
                tensors.push((format!("block{b}.{name}"), e, e));
            }
        }
        tensors.push(("head".to_string(), e, self.vocab));
        tensors
    }

    pub fn n_tensors(&self) -> usize {
        5 + TENSORS_PER_BLOCK * self.n_blocks
    }
}

/// Index of the token embedding matrix (vocab x embed).
pub const TOK_EMBED: usize = 0;
/// Index of the frame feature projection (feature_dim x embed).
pub const FEAT_PROJ: usize = 1;
/// Index of the per-frame position table (frames x embed).
pub const FRAME_POS: usize = 2;
/// Index of the text position table ((max_prompt + max_answer) x embed).
pub const TEXT_POS: usize = 3;
/// Matrices per block: wq, wk, wv, wo, wg, wu, wd.
pub const TENSORS_PER_BLOCK: usize = 7;

/// First tensor index of block `b`.
pub fn block_base(b: usize) -> usize {
    4 + TENSORS_PER_BLOCK * b
}

/// Offsets of the per-block matrices relative to [`block_base`].
pub mod block_offset {
    pub const WQ: usize = 0;
    pub const WK: usize = 1;
    pub const WV: usize = 2;
    pub const WO: usize = 3;
    pub const WG: usize = 4;
    pub const WU: usize = 5;
    pub const WD: usize = 6;
}

/// Tensor index of the output head.
pub fn head_index(config: &ModelConfig) -> usize {
    4 + TENSORS_PER_BLOCK * config.n_blocks
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VPCK";
const CHECKPOINT_VERSION: u32 = 1;

/// All trainable parameters, index-aligned with [`ModelConfig::layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Array2<f64>>,
}

impl ModelParams {
    /// Uniform init in `[-1/sqrt(embed_dim), 1/sqrt(embed_dim)]`, drawn from a
    /// single stream so the full parameter vector is a function of the seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
        config.validate()?;
        let bound = 1.0 / (config.embed_dim as f64).sqrt();
        let mut rng = rng_from(seed);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(_, rows, cols)| {
                let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
                Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
            })
            .collect();
        Ok(ModelParams { config: config.clone(), tensors })
    }

    /// All-zero parameters (the answer distribution is exactly uniform).
    pub fn zeros(config: &ModelConfig) -> Result<ModelParams, ModelError> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(_, rows, cols)| Array2::zeros((rows, cols)))
            .collect();
        Ok(ModelParams { config: config.clone(), tensors })
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Copy with one scalar nudged by `delta`; used by the gradient checker.
    pub fn perturbed(&self, tensor: usize, index: usize, delta: f64) -> ModelParams {
        let mut out = self.clone();
        let slice = out.tensors[tensor].as_slice_mut().expect("standard layout");
        slice[index] += delta;
        out
    }

    /// Writes a byte-exact snapshot: magic, version, embedded config, then
    /// every tensor as little-endian f64 in storage order.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config_json = serde_json::to_vec(&self.config)?;
        buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&config_json);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for tensor in &self.tensors {
            let (rows, cols) = tensor.dim();
            buf.extend_from_slice(&(rows as u32).to_le_bytes());
            buf.extend_from_slice(&(cols as u32).to_le_bytes());
            for &x in tensor.as_slice().expect("standard layout") {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Reads a snapshot written by [`ModelParams::save`], verifying magic,
    /// version, and every tensor shape against the embedded config.
    pub fn load(path: &Path) -> Result<ModelParams, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8], ModelError> {
            if *cursor + n > bytes.len() {
                return Err(ModelError::Format("checkpoint truncated".into()));
            }
            let slice = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(slice)
        };
        let read_u32 = |cursor: &mut usize| -> Result<u32, ModelError> {
            let slice = take(cursor, 4)?;
            Ok(u32::from_le_bytes(slice.try_into().expect("4 bytes")))
        };

        if take(&mut cursor, 4)? != CHECKPOINT_MAGIC {
            return Err(ModelError::Format("missing magic bytes".into()));
        }
        let version = read_u32(&mut cursor)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config_len = read_u32(&mut cursor)? as usize;
        let config: ModelConfig = serde_json::from_slice(take(&mut cursor, config_len)?)?;
        config.validate()?;
        let n_tensors = read_u32(&mut cursor)? as usize;
        let layout = config.layout();
        if n_tensors != layout.len() {
            return Err(ModelError::Format(format!(
                "checkpoint holds {n_tensors} tensors, config implies {}",
                layout.len()
            )));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for (name, exp_rows, exp_cols) in layout {
            let rows = read_u32(&mut cursor)? as usize;
            let cols = read_u32(&mut cursor)? as usize;
            if (rows, cols) != (exp_rows, exp_cols) {
                return Err(ModelError::Format(format!(
                    "tensor {name} has shape {rows}x{cols}, expected {exp_rows}x{exp_cols}"
                )));
            }
            let raw = take(&mut cursor, rows * cols * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Array2::from_shape_vec((rows, cols), data).expect("shape matches"));
        }
        if cursor != bytes.len() {
            return Err(ModelError::Format("trailing bytes after tensor data".into()));
        }
        Ok(ModelParams { config, tensors })
    }
}

/// Per-parameter gradients, index-aligned with [`ModelParams::tensors`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros(config: &ModelConfig) -> Gradients {
        Gradients {
            tensors: config
                .layout()
                .into_iter()
                .map(|(_, rows, cols)| Array2::zeros((rows, cols)))
                .collect(),
        }
    }

    /// `self += other * scale`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.scaled_add(scale, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|x| x * factor);
        }
    }

    /// Largest absolute entry across all tensors; 0 for empty gradients.
    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0f64, |acc, &x| acc.max(x.abs()))
    }

    /// Global L2 norm across all tensors.
    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}
