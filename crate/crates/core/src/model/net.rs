//! Network forward passes, with and without gradient tracking.
//!
//! The input sequence has one row per frame (features through a linear
//! projection, plus a learned frame position) followed by one row per text
//! token (token embedding plus a learned text position). Prompt positions
//! are shared across prompt lengths; answer tokens use positions after the
//! prompt budget. Causal attention lets the row holding the last prompt
//! token predict the first answer token, and each answer row predict the
//! next. All value-only entry points run the same tape arithmetic as the
//! gradient path, so evaluation and training see identical numbers.

use ndarray::Array2;

use super::{
    block_base, block_offset, head_index, Graph, ModelParams, NodeId, FEAT_PROJ, FRAME_POS,
    TEXT_POS, TOK_EMBED,
};
use crate::world::{FeatureTensor, TokenId};

fn check_inputs(params: &ModelParams, feats: &FeatureTensor, prompt: &[TokenId], answer_len: usize) {
    let cfg = &params.config;
    assert_eq!(feats.frames(), cfg.frames, "clip has wrong frame count");
    assert_eq!(feats.dim(), cfg.feature_dim, "features have wrong width");
    assert!(!prompt.is_empty() && prompt.len() <= cfg.max_prompt, "prompt length out of range");
    assert!(answer_len <= cfg.max_answer, "answer length out of range");
    for &tok in prompt {
        assert!(tok < cfg.vocab, "prompt token {tok} outside vocabulary");
    }
}

/// Builds the stacked input rows: frames, then prompt, then (optionally) a
/// prefix of the answer.
fn build_input_rows(
    g: &mut Graph<'_>,
    feats: &FeatureTensor,
    prompt: &[TokenId],
    answer_prefix: &[TokenId],
) -> NodeId {
    let cfg = g.config().clone();
    let feat_const = g.constant(feats.data.clone());
    let feat_proj = g.param(FEAT_PROJ);
    let projected = g.matmul(feat_const, feat_proj);
    let frame_pos = g.param(FRAME_POS);
    let frame_rows = g.add(projected, frame_pos);

    let tok_embed = g.param(TOK_EMBED);
    let text_pos = g.param(TEXT_POS);
    let prompt_emb = g.gather_rows(tok_embed, prompt.to_vec());
    let prompt_pos = g.gather_rows(text_pos, (0..prompt.len()).collect());
    let prompt_rows = g.add(prompt_emb, prompt_pos);

    let mut parts = vec![frame_rows, prompt_rows];
    if !answer_prefix.is_empty() {
        let answer_emb = g.gather_rows(tok_embed, answer_prefix.to_vec());
        let answer_pos =
            g.gather_rows(text_pos, (0..answer_prefix.len()).map(|t| cfg.max_prompt + t).collect());
        parts.push(g.add(answer_emb, answer_pos));
    }
    g.vstack(parts)
}

/// One block: multi-head causal attention with a residual, then a gated
/// feed-forward layer with a residual.
fn build_block(g: &mut Graph<'_>, block: usize, x: NodeId) -> NodeId {
    let cfg = g.config().clone();
    let base = block_base(block);
    let wq = g.param(base + block_offset::WQ);
    let wk = g.param(base + block_offset::WK);
    let wv = g.param(base + block_offset::WV);
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);

    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let kt = g.transpose(kh);
        let raw = g.matmul(qh, kt);
        let scaled = g.scale(raw, scale);
        let attn = g.causal_softmax(scaled);
        heads.push(g.matmul(attn, vh));
    }
    let concat = if heads.len() == 1 { heads[0] } else { g.hstack(heads) };
    let wo = g.param(base + block_offset::WO);
    let mixed = g.matmul(concat, wo);
    let after_attn = g.add(x, mixed);

    let wg = g.param(base + block_offset::WG);
    let wu = g.param(base + block_offset::WU);
    let wd = g.param(base + block_offset::WD);
    let gate_raw = g.matmul(after_attn, wg);
    let gate = g.sigmoid(gate_raw);
    let up = g.matmul(after_attn, wu);
    let gated = g.mul_elem(gate, up);
    let down = g.matmul(gated, wd);
    g.add(after_attn, down)
}

fn build_hidden(g: &mut Graph<'_>, feats: &FeatureTensor, prompt: &[TokenId], answer_prefix: &[TokenId]) -> NodeId {
    let mut h = build_input_rows(g, feats, prompt, answer_prefix);
    for b in 0..g.config().n_blocks {
        h = build_block(g, b, h);
    }
    h
}

/// Graph node holding the logits for every answer position: row `t` predicts
/// `answer[t]` from the frames, the prompt, and `answer[..t]`.
pub fn build_answer_logits(
    g: &mut Graph<'_>,
    feats: &FeatureTensor,
    prompt: &[TokenId],
    answer: &[TokenId],
) -> NodeId {
    assert!(!answer.is_empty(), "answers have at least one token");
    let cfg = g.config().clone();
    let hidden = build_hidden(g, feats, prompt, &answer[..answer.len() - 1]);
    let start = cfg.frames + prompt.len() - 1;
    let rows = g.slice_rows(hidden, start, start + answer.len());
    let head = g.param(head_index(&cfg));
    g.matmul(rows, head)
}

/// Graph node (1x1) holding `log p(answer | frames, prompt)` as a sum of
/// per-position log-softmax terms.
pub fn build_sequence_log_prob(
    g: &mut Graph<'_>,
    feats: &FeatureTensor,
    prompt: &[TokenId],
    answer: &[TokenId],
) -> NodeId {
    let logits = build_answer_logits(g, feats, prompt, answer);
    let logp = g.log_softmax_rows(logits);
    let positions = answer.iter().enumerate().map(|(t, &tok)| (t, tok)).collect();
    g.pick_sum(logp, positions)
}

/// Per-position answer logits without gradient tracking.
pub fn logits_for_answer(
    params: &ModelParams,
    feats: &FeatureTensor,
    prompt: &[TokenId],
    answer: &[TokenId],
) -> Array2<f64> {
    check_inputs(params, feats, prompt, answer.len());
    for &tok in answer {
        assert!(tok < params.config.vocab, "answer token {tok} outside vocabulary");
    }
    let mut g = Graph::new(params);
    let node = build_answer_logits(&mut g, feats, prompt, answer);
    g.value(node).clone()
}

/// `log p(answer | frames, prompt)` without gradient tracking.
pub fn sequence_log_prob(
    params: &ModelParams,
    feats: &FeatureTensor,
    prompt: &[TokenId],
    answer: &[TokenId],
) -> f64 {
    check_inputs(params, feats, prompt, answer.len());
    for &tok in answer {
        assert!(tok < params.config.vocab, "answer token {tok} outside vocabulary");
    }
    let mut g = Graph::new(params);
    let node = build_sequence_log_prob(&mut g, feats, prompt, answer);
    g.scalar(node)
}

/// Logits for the token following `prefix`, without gradient tracking.
pub fn next_token_logits(
    params: &ModelParams,
    feats: &FeatureTensor,
    prompt: &[TokenId],
    prefix: &[TokenId],
) -> Vec<f64> {
    check_inputs(params, feats, prompt, prefix.len() + 1);
    let cfg = &params.config;
    let mut g = Graph::new(params);
    let hidden = build_hidden(&mut g, feats, prompt, prefix);
    let last = cfg.frames + prompt.len() + prefix.len() - 1;
    let rows = g.slice_rows(hidden, last, last + 1);
    let head = g.param(head_index(cfg));
    let logits = g.matmul(rows, head);
    g.value(logits).row(0).to_vec()
}

/// Index of the largest entry; ties go to the first index.
pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decode of exactly `len` tokens, feeding each pick back in.
pub fn decode_argmax(
    params: &ModelParams,
    feats: &FeatureTensor,
    prompt: &[TokenId],
    len: usize,
) -> Vec<TokenId> {
    assert!(len >= 1 && len <= params.config.max_answer, "decode length out of range");
    let mut out: Vec<TokenId> = Vec::with_capacity(len);
    for _ in 0..len {
        let logits = next_token_logits(params, feats, prompt, &out);
        out.push(argmax_first(&logits));
    }
    out
}

/// A trainable policy plus the frozen snapshot preference losses compare
/// against.
#[derive(Debug, Clone)]
pub struct PolicyPair {
    pub policy: ModelParams,
    pub reference: ModelParams,
}

impl PolicyPair {
    /// Freezes a copy of `policy` as the comparison point.
    pub fn from_policy(policy: ModelParams) -> PolicyPair {
        PolicyPair { reference: policy.clone(), policy }
    }
}
