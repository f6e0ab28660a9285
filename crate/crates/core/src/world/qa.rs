//! Question generation and ground-truth interpretation.
//!
//! Questions are templated token sequences over a closed vocabulary. Truth is
//! computed twice by independent routes: `script_truth` reads the event
//! script restricted to a segment (the generation route) and `clip_truth`
//! scans rendered frames in clip order (the route used to label rejected
//! clips, since it also understands reordered, cropped, or re-sliced clips).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SymbolId, TokenId, VideoClip, VideoLibrary, VideoRecord, WorldConfig, WorldError};

/// Token ids of the closed QA vocabulary. Symbol tokens follow the specials,
/// attribute tokens follow the symbols.
pub mod vocab {
    use super::{SymbolId, TokenId, WorldConfig};

    pub const PAD: TokenId = 0;
    pub const Q_BEFORE: TokenId = 1;
    pub const Q_PRESENT: TokenId = 2;
    pub const Q_ATTR: TokenId = 3;
    pub const QMARK: TokenId = 4;
    pub const YES: TokenId = 5;
    pub const NO: TokenId = 6;
    pub const ATTR_MARK: TokenId = 7;
    pub const SYMBOL_BASE: TokenId = 8;

    pub fn symbol_token(symbol: SymbolId) -> TokenId {
        SYMBOL_BASE + symbol as TokenId
    }

    pub fn attribute_token(cfg: &WorldConfig, attribute: u8) -> TokenId {
        SYMBOL_BASE + cfg.symbols + attribute as TokenId
    }

    pub fn size(cfg: &WorldConfig) -> usize {
        SYMBOL_BASE + cfg.symbols + cfg.attributes
    }

    /// Longest prompt the templates emit.
    pub const MAX_PROMPT: usize = 4;
    /// Longest answer the templates emit.
    pub const MAX_ANSWER: usize = 2;
}

/// Coarse question kind recorded in dataset rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Temporal,
    Static,
}

/// Parsed form of a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Question {
    /// "does `a` finish appearing before `b` starts?"
    Before(SymbolId, SymbolId),
    /// "is `a` visible anywhere in the clip?"
    Present(SymbolId),
    /// "which attribute does `a` carry?"
    AttributeOf(SymbolId),
}

impl Question {
    pub fn kind(&self) -> QuestionKind {
        match self {
            Question::Before(..) => QuestionKind::Temporal,
            Question::Present(..) | Question::AttributeOf(..) => QuestionKind::Static,
        }
    }

    pub fn symbols(&self) -> Vec<SymbolId> {
        match *self {
            Question::Before(a, b) => vec![a, b],
            Question::Present(a) | Question::AttributeOf(a) => vec![a],
        }
    }
}

/// Ground-truth answer value before rendering to tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthValue {
    Bool(bool),
    Attribute(u8),
}

/// Metadata carried by every generated example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaMeta {
    pub kind: QuestionKind,
    pub symbols: Vec<SymbolId>,
    pub truth: TruthValue,
}

/// A generated question/answer pair.
#[derive(Debug, Clone, PartialEq)]
pub struct QAExample {
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub meta: QaMeta,
}

/// Renders a question to its prompt tokens.
pub fn prompt_tokens(question: &Question) -> Vec<TokenId> {
    match *question {
        Question::Before(a, b) => vec![
            vocab::Q_BEFORE,
            vocab::symbol_token(a),
            vocab::symbol_token(b),
            vocab::QMARK,
        ],
        Question::Present(a) => vec![vocab::Q_PRESENT, vocab::symbol_token(a), vocab::QMARK],
        Question::AttributeOf(a) => vec![vocab::Q_ATTR, vocab::symbol_token(a), vocab::QMARK],
    }
}

/// Parses prompt tokens back into a question.
pub fn parse_prompt(cfg: &WorldConfig, tokens: &[TokenId]) -> Result<Question, WorldError> {
    let symbol = |t: TokenId| -> Result<SymbolId, WorldError> {
        if (vocab::SYMBOL_BASE..vocab::SYMBOL_BASE + cfg.symbols).contains(&t) {
            Ok((t - vocab::SYMBOL_BASE) as SymbolId)
        } else {
            Err(WorldError::Prompt(format!("token {t} is not a symbol token")))
        }
    };
    match tokens {
        [q, a, b, m] if *q == vocab::Q_BEFORE && *m == vocab::QMARK => {
            Ok(Question::Before(symbol(*a)?, symbol(*b)?))
        }
        [q, a, m] if *q == vocab::Q_PRESENT && *m == vocab::QMARK => Ok(Question::Present(symbol(*a)?)),
        [q, a, m] if *q == vocab::Q_ATTR && *m == vocab::QMARK => Ok(Question::AttributeOf(symbol(*a)?)),
        _ => Err(WorldError::Prompt(format!("unrecognized prompt shape {tokens:?}"))),
    }
}

/// Renders a truth value to answer tokens.
pub fn answer_tokens(cfg: &WorldConfig, question: &Question, truth: &TruthValue) -> Vec<TokenId> {
    match (question, truth) {
        (_, TruthValue::Bool(true)) => vec![vocab::YES],
        (_, TruthValue::Bool(false)) => vec![vocab::NO],
        (_, TruthValue::Attribute(k)) => vec![vocab::ATTR_MARK, vocab::attribute_token(cfg, *k)],
    }
}

/// Frames (as clip positions) where a symbol is visible, in clip order.
fn clip_coverage(clip: &VideoClip, symbol: SymbolId) -> Vec<usize> {
    clip.frames
        .iter()
        .enumerate()
        .filter(|(_, f)| f.symbols().any(|(s, _)| s == symbol))
        .map(|(i, _)| i)
        .collect()
}

/// Interprets a question against rendered frames in clip order. Returns
/// `None` when the question has no defined answer on this clip (symbol
/// missing, or appearance ranges interleaved).
pub fn clip_truth(clip: &VideoClip, question: &Question) -> Option<TruthValue> {
    match *question {
        Question::Before(a, b) => {
            let ca = clip_coverage(clip, a);
            let cb = clip_coverage(clip, b);
            if ca.is_empty() || cb.is_empty() {
                return None;
            }
            if ca.last() < cb.first() {
                Some(TruthValue::Bool(true))
            } else if cb.last() < ca.first() {
                Some(TruthValue::Bool(false))
            } else {
                None
            }
        }
        Question::Present(a) => Some(TruthValue::Bool(!clip_coverage(clip, a).is_empty())),
        Question::AttributeOf(a) => {
            let mut attrs = clip
                .frames
                .iter()
                .flat_map(|f| f.symbols().filter(|(s, _)| *s == a).map(|(_, k)| k))
                .collect::<Vec<u8>>();
            attrs.sort_unstable();
            attrs.dedup();
            match attrs.as_slice() {
                [k] => Some(TruthValue::Attribute(*k)),
                _ => None,
            }
        }
    }
}

/// Interprets a question from the event script restricted to a segment of a
/// video, in natural frame order. Independent of frame rendering.
pub fn script_truth(
    video: &VideoRecord,
    segment: (usize, usize),
    question: &Question,
) -> Option<TruthValue> {
    let (start, end) = segment;
    match *question {
        Question::Before(a, b) => {
            let ca = video.script.coverage(a, start, end);
            let cb = video.script.coverage(b, start, end);
            if ca.is_empty() || cb.is_empty() {
                return None;
            }
            if ca.last() < cb.first() {
                Some(TruthValue::Bool(true))
            } else if cb.last() < ca.first() {
                Some(TruthValue::Bool(false))
            } else {
                None
            }
        }
        Question::Present(a) => Some(TruthValue::Bool(!video.script.coverage(a, start, end).is_empty())),
        Question::AttributeOf(a) => {
            if video.script.coverage(a, start, end).is_empty() {
                return None;
            }
            let mut attrs: Vec<u8> = video
                .script
                .placements
                .iter()
                .filter(|p| p.symbol == a && p.frame_range.0 < end && start < p.frame_range.1)
                .map(|p| p.attribute)
                .collect();
            attrs.sort_unstable();
            attrs.dedup();
            match attrs.as_slice() {
                [k] => Some(TruthValue::Attribute(*k)),
                _ => None,
            }
        }
    }
}

/// Minimum frames each symbol of an order question must show inside the
/// segment. Two frames apiece makes a random reshuffle overwhelmingly likely
/// to change (or undefine) the answer.
const MIN_TEMPORAL_COVERAGE: usize = 2;

/// Generates one question of the requested kind about a plain clip.
///
/// Truth comes from the script route; callers that need balanced answer
/// classes resample until the draw fits their quota.
pub fn generate_qa(
    library: &VideoLibrary,
    clip: &VideoClip,
    kind: QuestionKind,
    rng: &mut ChaCha8Rng,
) -> Result<QAExample, WorldError> {
    let cfg = &library.config;
    let video = library.video(clip.source_video_id)?;
    debug_assert!(clip.is_identity_order(), "questions are generated on plain slices");
    let segment = clip.segment;
    let question = match kind {
        QuestionKind::Temporal => {
            let symbols = video.script.symbols();
            let mut ordered_pairs = Vec::new();
            for &x in &symbols {
                for &y in &symbols {
                    if x == y {
                        continue;
                    }
                    let cx = video.script.coverage(x, segment.0, segment.1);
                    let cy = video.script.coverage(y, segment.0, segment.1);
                    if cx.len() >= MIN_TEMPORAL_COVERAGE
                        && cy.len() >= MIN_TEMPORAL_COVERAGE
                        && (cx.last() < cy.first() || cy.last() < cx.first())
                    {
                        ordered_pairs.push((x, y));
                    }
                }
            }
            match ordered_pairs.choose(rng) {
                Some(&(a, b)) => Question::Before(a, b),
                None => return Err(WorldError::Generation { kind }),
            }
        }
        QuestionKind::Static => {
            let ask_attribute = rng.gen_bool(cfg.attribute_question_fraction);
            let present: Vec<SymbolId> = (0..cfg.symbols as SymbolId)
                .filter(|&s| !video.script.coverage(s, segment.0, segment.1).is_empty())
                .collect();
            if ask_attribute && !present.is_empty() {
                Question::AttributeOf(*present.choose(rng).expect("non-empty"))
            } else {
                let want_present = rng.gen_bool(0.5);
                let absent: Vec<SymbolId> = (0..cfg.symbols as SymbolId)
                    .filter(|s| !present.contains(s))
                    .collect();
                let pool = if want_present && !present.is_empty() {
                    &present
                } else if !absent.is_empty() {
                    &absent
                } else {
                    &present
                };
                match pool.choose(rng) {
                    Some(&s) => Question::Present(s),
                    None => return Err(WorldError::Generation { kind }),
                }
            }
        }
    };
    let truth = script_truth(video, segment, &question).ok_or(WorldError::Generation { kind })?;
    Ok(QAExample {
        prompt: prompt_tokens(&question),
        answer: answer_tokens(cfg, &question, &truth),
        meta: QaMeta { kind, symbols: question.symbols(), truth },
    })
}
