//! Frame featurization: per-symbol one-hot planes plus the noise plane,
//! 2×2 average pooled and flattened to one row per frame.

use ndarray::Array2;

use super::{VideoClip, WorldConfig};

/// Per-clip feature matrix, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    /// `frames × feature_dim`, laid out channel-major: channel `c`'s pooled
    /// board occupies columns `[c*p*p, (c+1)*p*p)` with `p = grid/2`,
    /// symbol channels first and the noise channel last.
    pub data: Array2<f64>,
}

impl FeatureTensor {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Renders a clip into its feature tensor.
///
/// Each symbol plane holds a single 1.0 at the symbol's cell when visible;
/// 2×2 average pooling therefore produces exactly 0.25 in the pooled cell
/// covering it. The noise plane is pooled the same way.
pub fn render_features(cfg: &WorldConfig, clip: &VideoClip) -> FeatureTensor {
    let g = cfg.grid;
    let p = g / 2;
    let per_channel = p * p;
    let dim = per_channel * (cfg.symbols + 1);
    let noise_base = per_channel * cfg.symbols;
    let mut data = Array2::zeros((clip.frames.len(), dim));
    for (row, frame) in clip.frames.iter().enumerate() {
        for r in 0..g {
            for c in 0..g {
                let pooled = (r / 2) * p + c / 2;
                if let Some((symbol, _)) = frame.cells[r * g + c] {
                    data[[row, symbol as usize * per_channel + pooled]] += 0.25;
                }
                data[[row, noise_base + pooled]] += frame.noise[r * g + c] * 0.25;
            }
        }
    }
    FeatureTensor { data }
}
