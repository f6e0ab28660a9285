//! Library generation: scripted videos with guaranteed question support.
//!
//! Every video gets one engineered back-to-back symbol pair (so at least one
//! clip supports an order question with two well-separated symbols) plus a
//! handful of randomly placed symbols. A generated video is accepted only
//! after a frame-level scan confirms the guarantees, and rejected videos are
//! resampled under a fresh attempt seed.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::{child_rng, child_seed};

use super::{EventScript, Placement, SymbolId, VideoLibrary, VideoRecord, WorldConfig, WorldError};
use super::LIBRARY_FORMAT_VERSION;

const MAX_ATTEMPTS: u64 = 64;

/// Generates a library deterministically from a seed.
pub fn generate_library(cfg: &WorldConfig, seed: u64) -> Result<VideoLibrary, WorldError> {
    cfg.validate()?;
    let mut videos = Vec::with_capacity(cfg.videos);
    for index in 0..cfg.videos {
        let video_id = cfg.video_id_base + index as u64;
        let video_seed = child_seed(seed, "video", index as u64);
        let mut accepted = None;
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = child_rng(video_seed, "attempt", attempt);
            let script = sample_script(cfg, &mut rng);
            let noise_seed = child_seed(video_seed, "noise", attempt);
            let video = VideoRecord::materialize(cfg, video_id, script, noise_seed);
            if well_posed(cfg, &video) {
                accepted = Some(video);
                break;
            }
        }
        match accepted {
            Some(v) => videos.push(v),
            None => {
                return Err(WorldError::LibraryGeneration(format!(
                    "video {video_id} failed the well-posedness scan {MAX_ATTEMPTS} times"
                )))
            }
        }
    }
    Ok(VideoLibrary { format_version: LIBRARY_FORMAT_VERSION, config: cfg.clone(), seed, videos })
}

fn sample_script(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> EventScript {
    let t = cfg.video_length;
    let f = cfg.frames_per_clip;
    let n_symbols = rng.gen_range(cfg.min_symbols_per_video..=cfg.max_symbols_per_video);
    let chosen: Vec<SymbolId> = sample(rng, cfg.symbols, n_symbols)
        .into_iter()
        .map(|s| s as SymbolId)
        .collect();

    let mut placements = Vec::new();
    let place = |symbol: SymbolId, range: (usize, usize), cfg: &WorldConfig| Placement {
        symbol,
        attribute: cfg.attribute_of(symbol),
        frame_range: range,
        cell: cfg.cell_of(symbol),
    };

    // Engineered pair: the first two chosen symbols appear back to back
    // inside one clip-sized window, each for half the window. This is what
    // guarantees at least one segment supports an order question.
    let half = f / 2;
    let g = rng.gen_range(0..=t - f);
    placements.push(place(chosen[0], (g, g + half), cfg));
    placements.push(place(chosen[1], (g + half, g + f), cfg));

    // Remaining symbols get one or two free placements. Two placements are
    // confined to separate halves of the video so same-symbol ranges can
    // never overlap.
    for &symbol in &chosen[2..] {
        let two = rng.gen_bool(0.5);
        if two {
            let len_a = rng.gen_range(4..=(t / 4));
            let start_a = rng.gen_range(0..=t / 2 - len_a);
            let len_b = rng.gen_range(4..=(t / 4));
            let start_b = rng.gen_range(t / 2..=t - len_b);
            placements.push(place(symbol, (start_a, start_a + len_a), cfg));
            placements.push(place(symbol, (start_b, start_b + len_b), cfg));
        } else {
            let len = rng.gen_range(6..=(t / 4 + 2));
            let start = rng.gen_range(0..=t - len);
            placements.push(place(symbol, (start, start + len), cfg));
        }
    }
    EventScript { placements }
}

/// Frame-level scan verifying the generation guarantees:
/// some clip window supports an order question between two symbols that each
/// show for at least two frames, and some placed symbol is absent from at
/// least one window (so a disjoint-segment swap can flip a presence answer).
fn well_posed(cfg: &WorldConfig, video: &VideoRecord) -> bool {
    let f = cfg.frames_per_clip;
    let symbols = video.script.symbols();
    if symbols.len() < 2 {
        return false;
    }
    let mut temporal_ok = false;
    let mut absence_ok = false;
    for start in 0..=video.length - f {
        let mut coverage: Vec<(SymbolId, Vec<usize>)> = Vec::new();
        for &s in &symbols {
            let frames: Vec<usize> = (start..start + f)
                .filter(|&t| {
                    video.frames()[t]
                        .cells
                        .iter()
                        .any(|c| matches!(c, Some((sym, _)) if *sym == s))
                })
                .map(|t| t - start)
                .collect();
            if frames.is_empty() {
                absence_ok = true;
            }
            coverage.push((s, frames));
        }
        for i in 0..coverage.len() {
            for j in 0..coverage.len() {
                if i == j {
                    continue;
                }
                let a = &coverage[i].1;
                let b = &coverage[j].1;
                if a.len() >= 2 && b.len() >= 2 && a.last() < b.first() {
                    temporal_ok = true;
                }
            }
        }
        if temporal_ok && absence_ok {
            return true;
        }
    }
    temporal_ok && absence_ok
}
