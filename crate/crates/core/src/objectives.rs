//! Training objectives: likelihood, preference losses over clip pairs, and
//! the multi-candidate weighting that softens noisy rejected clips.
//!
//! Rewards are sequence log-probability ratios between the trainable policy
//! and its frozen reference. The pairwise loss is `softplus(-beta * margin)`
//! where the margin contrasts the original clip against one rejected clip,
//! or against a weighted combination of several. Weights come from output-
//! or feature-space distances between each candidate and the original, and
//! are treated as constants during differentiation: gradients flow through
//! the rewards only.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    build_sequence_log_prob, logits_for_answer, sequence_log_prob, softmax_rows, softplus, Graph,
    NodeId, ModelParams, PolicyPair,
};
use crate::world::{FeatureTensor, TokenId};

/// Errors from distance and weight computations.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ObjectiveError {
    #[error("answer position counts differ: {left} vs {right}")]
    PositionMismatch { left: usize, right: usize },
    #[error("need at least one candidate")]
    Empty,
    #[error("pooled feature vector has zero norm")]
    ZeroNorm,
}

/// How candidate weights respond to distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightStrategy {
    /// Softmax over distances: the farthest candidate weighs most.
    Far,
    /// Softmax over negated distances: the nearest candidate weighs most.
    Near,
    /// Uniform 1/N regardless of distance.
    Equal,
}

/// Space in which candidate distances are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Divergence between the model's answer distributions.
    Output,
    /// One minus cosine similarity of frame-pooled features.
    Visual,
}

/// Negative sequence log-likelihood of the answer.
pub fn sft_loss(
    params: &ModelParams,
    feats: &FeatureTensor,
    prompt: &[TokenId],
    answer: &[TokenId],
) -> f64 {
    -sequence_log_prob(params, feats, prompt, answer)
}

/// Policy-vs-reference log-probability ratio for one (clip, prompt, answer).
pub fn reward(
    pair: &PolicyPair,
    feats: &FeatureTensor,
    prompt: &[TokenId],
    answer: &[TokenId],
) -> f64 {
    sequence_log_prob(&pair.policy, feats, prompt, answer)
        - sequence_log_prob(&pair.reference, feats, prompt, answer)
}

/// Pairwise preference loss `softplus(-beta * (chosen - rejected))`.
///
/// Equal rewards give exactly `ln 2` for any beta.
pub fn dpo_loss(beta: f64, reward_chosen: f64, reward_rejected: f64) -> f64 {
    let z = beta * (reward_chosen - reward_rejected);
    softplus(-z)
}

/// Preference loss contrasting the original clip against one rejected clip,
/// with the answer held fixed.
pub fn vdpo_loss(
    pair: &PolicyPair,
    beta: f64,
    chosen: &FeatureTensor,
    rejected: &FeatureTensor,
    prompt: &[TokenId],
    answer: &[TokenId],
) -> f64 {
    let reward_chosen = reward(pair, chosen, prompt, answer);
    let reward_rejected = reward(pair, rejected, prompt, answer);
    dpo_loss(beta, reward_chosen, reward_rejected)
}

/// Pairwise loss against a weighted combination of rejected rewards.
pub fn weighted_dpo_loss(
    beta: f64,
    reward_chosen: f64,
    weights: &[f64],
    rejected_rewards: &[f64],
) -> f64 {
    assert_eq!(weights.len(), rejected_rewards.len(), "one weight per rejected reward");
    assert!(!weights.is_empty(), "need at least one rejected reward");
    let mut combined = weights[0] * rejected_rewards[0];
    for i in 1..weights.len() {
        combined += weights[i] * rejected_rewards[i];
    }
    let z = beta * (reward_chosen - combined);
    softplus(-z)
}

/// Jensen-Shannon divergence between two distributions over the same
/// support, in nats. Symmetric and bounded by `ln 2`; zero-probability
/// entries contribute nothing.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must share a support");
    fn kl_to_mid(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (x / (0.5 * (x + y))).ln())
            .sum()
    }
    0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p)
}

/// Mean per-position JS divergence between two answer logit matrices.
pub fn answer_distance_from_logits(
    logits_a: &Array2<f64>,
    logits_b: &Array2<f64>,
) -> Result<f64, ObjectiveError> {
    if logits_a.nrows() != logits_b.nrows() {
        return Err(ObjectiveError::PositionMismatch {
            left: logits_a.nrows(),
            right: logits_b.nrows(),
        });
    }
    let pa = softmax_rows(logits_a);
    let pb = softmax_rows(logits_b);
    let total: f64 = pa
        .rows()
        .into_iter()
        .zip(pb.rows())
        .map(|(ra, rb)| js_divergence(ra.as_slice().expect("row"), rb.as_slice().expect("row")))
        .sum();
    Ok(total / logits_a.nrows() as f64)
}

/// Output-space distance between two clips: mean per-answer-position JS
/// divergence of the model's next-token distributions.
pub fn answer_distance(
    params: &ModelParams,
    feats_a: &FeatureTensor,
    feats_b: &FeatureTensor,
    prompt: &[TokenId],
    answer: &[TokenId],
) -> f64 {
    let logits_a = logits_for_answer(params, feats_a, prompt, answer);
    let logits_b = logits_for_answer(params, feats_b, prompt, answer);
    answer_distance_from_logits(&logits_a, &logits_b).expect("equal answer lengths")
}

/// Feature-space distance: one minus the cosine similarity of the two
/// clips' frame-averaged feature vectors.
pub fn visual_distance(a: &FeatureTensor, b: &FeatureTensor) -> Result<f64, ObjectiveError> {
    assert_eq!(a.data.dim(), b.data.dim(), "feature tensors must share a shape");
    let pa = a.data.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let pb = b.data.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let dot: f64 = pa.iter().zip(pb.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = pa.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = pb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(ObjectiveError::ZeroNorm);
    }
    Ok(1.0 - dot / (na * nb))
}

/// Converts candidate distances into convex weights.
pub fn prompt_weights(distances: &[f64], strategy: WeightStrategy) -> Result<Vec<f64>, ObjectiveError> {
    if distances.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    match strategy {
        WeightStrategy::Equal => Ok(vec![1.0 / distances.len() as f64; distances.len()]),
        WeightStrategy::Far => Ok(stable_softmax(distances)),
        WeightStrategy::Near => {
            let negated: Vec<f64> = distances.iter().map(|&d| -d).collect();
            Ok(stable_softmax(&negated))
        }
    }
}

fn stable_softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Result of the multi-candidate preference loss: the scalar loss plus the
/// weights and distances that produced it, for logging.
#[derive(Debug, Clone)]
pub struct PamiOutcome {
    pub loss: f64,
    pub weights: Vec<f64>,
    pub distances: Vec<f64>,
    pub reward_chosen: f64,
    pub rejected_rewards: Vec<f64>,
}

/// Preference loss over a candidate set of rejected clips.
///
/// Distances and weights are computed from the current policy's outputs
/// (or the raw features) and then used as plain numbers; with a single
/// candidate the result is bit-identical to [`vdpo_loss`].
pub fn pami_vdpo_loss(
    pair: &PolicyPair,
    beta: f64,
    strategy: WeightStrategy,
    mode: DistanceMode,
    chosen: &FeatureTensor,
    candidates: &[FeatureTensor],
    prompt: &[TokenId],
    answer: &[TokenId],
) -> Result<PamiOutcome, ObjectiveError> {
    if candidates.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    let distances = candidate_distances(&pair.policy, mode, chosen, candidates, prompt, answer)?;
    let weights = prompt_weights(&distances, strategy)?;
    let reward_chosen = reward(pair, chosen, prompt, answer);
    let rejected_rewards: Vec<f64> =
        candidates.iter().map(|c| reward(pair, c, prompt, answer)).collect();
    let loss = weighted_dpo_loss(beta, reward_chosen, &weights, &rejected_rewards);
    Ok(PamiOutcome { loss, weights, distances, reward_chosen, rejected_rewards })
}

/// Distance from the original clip to every candidate, in the given mode.
pub fn candidate_distances(
    params: &ModelParams,
    mode: DistanceMode,
    chosen: &FeatureTensor,
    candidates: &[FeatureTensor],
    prompt: &[TokenId],
    answer: &[TokenId],
) -> Result<Vec<f64>, ObjectiveError> {
    match mode {
        DistanceMode::Output => {
            let chosen_logits = logits_for_answer(params, chosen, prompt, answer);
            candidates
                .iter()
                .map(|c| {
                    let cand_logits = logits_for_answer(params, c, prompt, answer);
                    answer_distance_from_logits(&chosen_logits, &cand_logits)
                })
                .collect()
        }
        DistanceMode::Visual => candidates.iter().map(|c| visual_distance(chosen, c)).collect(),
    }
}

/// Graph node for the negative answer log-likelihood.
pub fn build_sft_loss(
    g: &mut Graph<'_>,
    feats: &FeatureTensor,
    prompt: &[TokenId],
    answer: &[TokenId],
) -> NodeId {
    let lp = build_sequence_log_prob(g, feats, prompt, answer);
    g.scale(lp, -1.0)
}

/// Graph node for the policy-vs-reference reward; the reference side enters
/// as a constant, so no gradient reaches it.
pub fn build_reward(
    g: &mut Graph<'_>,
    reference: &ModelParams,
    feats: &FeatureTensor,
    prompt: &[TokenId],
    answer: &[TokenId],
) -> NodeId {
    let policy_lp = build_sequence_log_prob(g, feats, prompt, answer);
    let reference_lp = sequence_log_prob(reference, feats, prompt, answer);
    let reference_node = g.scalar_const(reference_lp);
    g.sub(policy_lp, reference_node)
}

/// Node handles into a preference-loss graph, for reading margins back out.
#[derive(Debug, Clone, Copy)]
pub struct PreferenceNodes {
    pub loss: NodeId,
    pub reward_chosen: NodeId,
    pub combined_rejected: NodeId,
}

/// Graph for the preference loss against pre-weighted rejected clips.
/// The weights are fixed numbers: this is the training-time form, where
/// distances and weights were already computed from the current policy.
pub fn build_weighted_preference_loss(
    g: &mut Graph<'_>,
    reference: &ModelParams,
    beta: f64,
    chosen: &FeatureTensor,
    weighted_candidates: &[(f64, &FeatureTensor)],
    prompt: &[TokenId],
    answer: &[TokenId],
) -> PreferenceNodes {
    assert!(!weighted_candidates.is_empty(), "need at least one rejected clip");
    let reward_chosen = build_reward(g, reference, chosen, prompt, answer);
    let mut combined: Option<NodeId> = None;
    for (weight, feats) in weighted_candidates {
        let reward_rejected = build_reward(g, reference, feats, prompt, answer);
        let scaled = g.scale(reward_rejected, *weight);
        combined = Some(match combined {
            None => scaled,
            Some(acc) => g.add(acc, scaled),
        });
    }
    let combined_rejected = combined.expect("nonempty");
    let margin = g.sub(reward_chosen, combined_rejected);
    let z = g.scale(margin, beta);
    let neg_z = g.scale(z, -1.0);
    let loss = g.softplus(neg_z);
    PreferenceNodes { loss, reward_chosen, combined_rejected }
}

/// Graph for the response-contrast preference loss: one clip, two answers.
pub fn build_response_preference_loss(
    g: &mut Graph<'_>,
    reference: &ModelParams,
    beta: f64,
    feats: &FeatureTensor,
    prompt: &[TokenId],
    chosen_answer: &[TokenId],
    rejected_answer: &[TokenId],
) -> PreferenceNodes {
    let reward_chosen = build_reward(g, reference, feats, prompt, chosen_answer);
    let combined_rejected = build_reward(g, reference, feats, prompt, rejected_answer);
    let margin = g.sub(reward_chosen, combined_rejected);
    let z = g.scale(margin, beta);
    let neg_z = g.scale(z, -1.0);
    let loss = g.softplus(neg_z);
    PreferenceNodes { loss, reward_chosen, combined_rejected }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{finite_diff_check, ModelConfig};
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand::Rng;

    const LN_2: f64 = 0.6931471805599453;

    fn small_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            n_heads: 2,
            n_blocks: 2,
            vocab: 9,
            feature_dim: 6,
            frames: 3,
            max_prompt: 4,
            max_answer: 2,
        }
    }

    fn random_feats(cfg: &ModelConfig, seed: u64) -> FeatureTensor {
        let mut rng = rng_from(seed);
        FeatureTensor {
            data: Array2::from_shape_fn((cfg.frames, cfg.feature_dim), |_| rng.gen_range(0.0..0.3)),
        }
    }

    fn random_pair(cfg: &ModelConfig, seed: u64) -> PolicyPair {
        PolicyPair {
            policy: ModelParams::init(cfg, seed).unwrap(),
            reference: ModelParams::init(cfg, seed.wrapping_add(1)).unwrap(),
        }
    }

    #[test]
    fn equal_rewards_give_ln2_for_any_beta() {
        let mut rng = rng_from(100);
        for _ in 0..100 {
            let beta = rng.gen_range(1e-3..5.0);
            let r = rng.gen_range(-10.0..10.0);
            assert!((dpo_loss(beta, r, r) - LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_margins_hit_the_frozen_softplus_values() {
        assert!((dpo_loss(1.0, 1.0, 0.0) - 0.31326168751822286).abs() < 1e-15);
        assert!((dpo_loss(1.0, 0.0, 1.0) - 1.3132616875182228).abs() < 1e-15);
    }

    #[test]
    fn js_divergence_matches_a_direct_kl_oracle() {
        // Oracle route: the two KL terms expanded by hand.
        fn oracle(p: &[f64], q: &[f64]) -> f64 {
            let m: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| 0.5 * (a + b)).collect();
            let mut total = 0.0;
            for (i, &mi) in m.iter().enumerate() {
                if p[i] > 0.0 {
                    total += 0.5 * p[i] * (p[i] / mi).ln();
                }
                if q[i] > 0.0 {
                    total += 0.5 * q[i] * (q[i] / mi).ln();
                }
            }
            total
        }
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        let got = js_divergence(&p, &q);
        assert!((got - oracle(&p, &q)).abs() < 1e-15);
        assert!((got - 0.033822075568605205).abs() < 1e-12);
        assert!((got - 0.033822).abs() < 1e-5);
    }

    #[test]
    fn js_divergence_edge_cases() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        let one_hot = js_divergence(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((one_hot - LN_2).abs() < 1e-12);
    }

    #[test]
    fn answer_distance_means_over_positions() {
        // positions engineered so the per-position JS values are {0, ln 2}
        let a = ndarray::array![[3.0, 3.0, 3.0], [800.0, 0.0, 0.0]];
        let b = ndarray::array![[3.0, 3.0, 3.0], [0.0, 800.0, 0.0]];
        let d = answer_distance_from_logits(&a, &b).unwrap();
        assert!((d - 0.34657359027997264).abs() < 1e-12);

        let single_a = ndarray::array![[800.0, 0.0]];
        let single_b = ndarray::array![[0.0, 800.0]];
        let d = answer_distance_from_logits(&single_a, &single_b).unwrap();
        assert!((d - LN_2).abs() < 1e-9);

        assert_eq!(
            answer_distance_from_logits(&a, &single_a),
            Err(ObjectiveError::PositionMismatch { left: 2, right: 1 })
        );
    }

    #[test]
    fn answer_distance_of_identical_clips_is_zero() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let feats = random_feats(&cfg, 4);
        let d = answer_distance(&params, &feats, &feats, &[1, 2], &[5, 6]);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn visual_distance_matches_a_direct_linear_algebra_oracle() {
        let cfg = small_config();
        let a = random_feats(&cfg, 5);
        let b = random_feats(&cfg, 6);
        let got = visual_distance(&a, &b).unwrap();

        let frames = cfg.frames as f64;
        let mut pa = vec![0.0; cfg.feature_dim];
        let mut pb = vec![0.0; cfg.feature_dim];
        for f in 0..cfg.frames {
            for d in 0..cfg.feature_dim {
                pa[d] += a.data[[f, d]] / frames;
                pb[d] += b.data[[f, d]] / frames;
            }
        }
        let dot: f64 = pa.iter().zip(&pb).map(|(x, y)| x * y).sum();
        let na: f64 = pa.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = pb.iter().map(|x| x * x).sum::<f64>().sqrt();
        let expected = 1.0 - dot / (na * nb);
        assert!((got - expected).abs() < 1e-12);

        assert!(visual_distance(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn visual_distance_handles_orthogonal_and_zero_inputs() {
        let mut x = Array2::zeros((2, 4));
        x[[0, 0]] = 1.0;
        x[[1, 0]] = 1.0;
        let mut y = Array2::zeros((2, 4));
        y[[0, 1]] = 1.0;
        y[[1, 1]] = 1.0;
        let d = visual_distance(&FeatureTensor { data: x }, &FeatureTensor { data: y }).unwrap();
        assert!((d - 1.0).abs() < 1e-12);

        let zero = FeatureTensor { data: Array2::zeros((2, 4)) };
        let other = FeatureTensor {
            data: Array2::from_elem((2, 4), 0.5),
        };
        assert_eq!(visual_distance(&zero, &other), Err(ObjectiveError::ZeroNorm));
    }

    #[test]
    fn weights_hit_the_frozen_two_candidate_values() {
        let d = [0.0, LN_2];
        let far = prompt_weights(&d, WeightStrategy::Far).unwrap();
        assert!((far[0] - 1.0 / 3.0).abs() < 1e-9);
        assert!((far[1] - 2.0 / 3.0).abs() < 1e-9);
        let near = prompt_weights(&d, WeightStrategy::Near).unwrap();
        assert!((near[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((near[1] - 1.0 / 3.0).abs() < 1e-9);
        let equal = prompt_weights(&[0.1, 0.2, 0.3], WeightStrategy::Equal).unwrap();
        for w in equal {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_candidate_weight_is_exactly_one() {
        for strategy in [WeightStrategy::Far, WeightStrategy::Near, WeightStrategy::Equal] {
            let w = prompt_weights(&[0.37], strategy).unwrap();
            assert_eq!(w, vec![1.0]);
        }
        assert_eq!(prompt_weights(&[], WeightStrategy::Far), Err(ObjectiveError::Empty));
    }

    #[test]
    fn equal_distances_give_uniform_weights_for_every_strategy() {
        for strategy in [WeightStrategy::Far, WeightStrategy::Near, WeightStrategy::Equal] {
            let w = prompt_weights(&[0.4, 0.4, 0.4, 0.4], strategy).unwrap();
            for &x in &w {
                assert!((x - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_candidate_loss_is_bitwise_identical_to_the_pairwise_loss() {
        let cfg = small_config();
        let mut rng = rng_from(200);
        for trial in 0..100 {
            let pair = random_pair(&cfg, 300 + trial);
            let chosen = random_feats(&cfg, 1000 + trial);
            let rejected = random_feats(&cfg, 2000 + trial);
            let beta = rng.gen_range(0.01..2.0);
            let prompt = vec![rng.gen_range(0..cfg.vocab), rng.gen_range(0..cfg.vocab)];
            let answer = vec![rng.gen_range(0..cfg.vocab)];
            let direct = vdpo_loss(&pair, beta, &chosen, &rejected, &prompt, &answer);
            for strategy in [WeightStrategy::Far, WeightStrategy::Near, WeightStrategy::Equal] {
                let got = pami_vdpo_loss(
                    &pair,
                    beta,
                    strategy,
                    DistanceMode::Output,
                    &chosen,
                    std::slice::from_ref(&rejected),
                    &prompt,
                    &answer,
                )
                .unwrap();
                assert_eq!(got.loss.to_bits(), direct.to_bits(), "trial {trial}");
                assert_eq!(got.weights, vec![1.0]);
            }
        }
    }

    #[test]
    fn worked_two_candidate_example_matches_the_scalar_oracle() {
        // Oracle: the same composition evaluated with plain scalar
        // arithmetic, frozen. weights (1/3, 2/3) over rejected rewards
        // (-0.1, 0.4) give a combined reward of 7/30, a margin of -1/30,
        // and a loss of ln(1 + e^(1/30)).
        let weights = prompt_weights(&[0.0, LN_2], WeightStrategy::Far).unwrap();
        let loss = weighted_dpo_loss(1.0, 0.2, &weights, &[-0.1, 0.4]);
        assert!((loss - 0.7099527296859359).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn equal_weights_over_identical_rewards_collapse_to_the_pairwise_loss() {
        let loss_pair = dpo_loss(0.3, 0.7, 0.25);
        let loss_combined = weighted_dpo_loss(0.3, 0.7, &[0.5, 0.5], &[0.25, 0.25]);
        assert_eq!(loss_pair.to_bits(), loss_combined.to_bits());
    }

    #[test]
    fn losses_are_positive_and_equal_ln2_when_policy_is_the_reference() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 77).unwrap();
        let pair = PolicyPair::from_policy(params);
        let chosen = random_feats(&cfg, 10);
        let rejected = random_feats(&cfg, 11);
        let prompt = vec![1, 2, 3];
        let answer = vec![4];
        assert_eq!(reward(&pair, &chosen, &prompt, &answer), 0.0);
        let loss = vdpo_loss(&pair, 0.1, &chosen, &rejected, &prompt, &answer);
        assert!((loss - LN_2).abs() < 1e-12);
        let multi = pami_vdpo_loss(
            &pair,
            0.1,
            WeightStrategy::Far,
            DistanceMode::Output,
            &chosen,
            &[rejected.clone(), random_feats(&cfg, 12)],
            &prompt,
            &answer,
        )
        .unwrap();
        assert!((multi.loss - LN_2).abs() < 1e-12);
        assert!(sft_loss(&pair.policy, &chosen, &prompt, &answer) > 0.0);
    }

    #[test]
    fn far_weights_argmax_tracks_the_distance_argmax() {
        let mut rng = rng_from(400);
        for _ in 0..200 {
            let n = rng.gen_range(2..6);
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..LN_2)).collect();
            let w = prompt_weights(&d, WeightStrategy::Far).unwrap();
            let argmax_d = (0..n).max_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap()).unwrap();
            let argmax_w = (0..n).max_by(|&i, &j| w[i].partial_cmp(&w[j]).unwrap()).unwrap();
            assert_eq!(argmax_d, argmax_w);
        }
    }

    #[test]
    fn graph_loss_values_match_the_plain_computation() {
        let cfg = small_config();
        let pair = random_pair(&cfg, 500);
        let chosen = random_feats(&cfg, 20);
        let cand_a = random_feats(&cfg, 21);
        let cand_b = random_feats(&cfg, 22);
        let prompt = vec![0, 3, 5];
        let answer = vec![7, 1];
        let beta = 0.4;

        let outcome = pami_vdpo_loss(
            &pair,
            beta,
            WeightStrategy::Far,
            DistanceMode::Output,
            &chosen,
            &[cand_a.clone(), cand_b.clone()],
            &prompt,
            &answer,
        )
        .unwrap();

        let weighted: Vec<(f64, &FeatureTensor)> =
            vec![(outcome.weights[0], &cand_a), (outcome.weights[1], &cand_b)];
        let mut g = Graph::new(&pair.policy);
        let nodes =
            build_weighted_preference_loss(&mut g, &pair.reference, beta, &chosen, &weighted, &prompt, &answer);
        assert_eq!(g.scalar(nodes.loss).to_bits(), outcome.loss.to_bits());
        assert_eq!(g.scalar(nodes.reward_chosen).to_bits(), outcome.reward_chosen.to_bits());

        let direct = vdpo_loss(&pair, beta, &chosen, &cand_a, &prompt, &answer);
        let mut g2 = Graph::new(&pair.policy);
        let single = build_weighted_preference_loss(
            &mut g2,
            &pair.reference,
            beta,
            &chosen,
            &[(1.0, &cand_a)],
            &prompt,
            &answer,
        );
        assert_eq!(g2.scalar(single.loss).to_bits(), direct.to_bits());
    }

    #[test]
    fn sft_gradients_pass_finite_differences() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 600).unwrap();
        let feats = random_feats(&cfg, 30);
        let prompt = vec![2, 4, 1];
        let answer = vec![6, 3];
        let build = |g: &mut Graph<'_>| build_sft_loss(g, &feats, &prompt, &answer);
        let report = finite_diff_check(&params, build, 36, 1e-4, 1e-4, 601).unwrap();
        assert!(report.max_rel_err < 1e-4);
    }

    #[test]
    fn preference_gradients_pass_finite_differences_with_frozen_weights() {
        let cfg = small_config();
        let pair = random_pair(&cfg, 700);
        let chosen = random_feats(&cfg, 40);
        let cand_a = random_feats(&cfg, 41);
        let cand_b = random_feats(&cfg, 42);
        let prompt = vec![1, 8];
        let answer = vec![0];

        // weights fixed at their forward values before differentiation
        let distances = candidate_distances(
            &pair.policy,
            DistanceMode::Output,
            &chosen,
            &[cand_a.clone(), cand_b.clone()],
            &prompt,
            &answer,
        )
        .unwrap();
        let weights = prompt_weights(&distances, WeightStrategy::Far).unwrap();

        let weighted: Vec<(f64, &FeatureTensor)> =
            vec![(weights[0], &cand_a), (weights[1], &cand_b)];
        let reference = pair.reference.clone();
        let build = |g: &mut Graph<'_>| {
            build_weighted_preference_loss(g, &reference, 0.2, &chosen, &weighted, &prompt, &answer).loss
        };
        let report = finite_diff_check(&pair.policy, build, 36, 1e-4, 1e-4, 701).unwrap();
        assert!(report.max_rel_err < 1e-4);

        let single: Vec<(f64, &FeatureTensor)> = vec![(1.0, &cand_a)];
        let build_single = |g: &mut Graph<'_>| {
            build_weighted_preference_loss(g, &reference, 0.2, &chosen, &single, &prompt, &answer).loss
        };
        let report = finite_diff_check(&pair.policy, build_single, 36, 1e-4, 1e-4, 702).unwrap();
        assert!(report.max_rel_err < 1e-4);
    }

    proptest! {
        #[test]
        fn js_is_symmetric_and_bounded(raw_p in proptest::collection::vec(1e-6f64..1.0, 2..8)) {
            let n = raw_p.len();
            let mut raw_q = raw_p.clone();
            raw_q.rotate_left(1);
            let sum_p: f64 = raw_p.iter().sum();
            let sum_q: f64 = raw_q.iter().sum();
            let p: Vec<f64> = raw_p.iter().map(|x| x / sum_p).collect();
            let q: Vec<f64> = raw_q.iter().map(|x| x / sum_q).collect();
            prop_assert_eq!(p.len(), n);
            let a = js_divergence(&p, &q);
            let b = js_divergence(&q, &p);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0);
            prop_assert!(a <= LN_2 + 1e-12);
        }

        #[test]
        fn weights_sum_to_one_and_respect_order(
            d in proptest::collection::vec(0.0f64..0.6931, 1..7),
            shift in -3.0f64..3.0,
        ) {
            for strategy in [WeightStrategy::Far, WeightStrategy::Near, WeightStrategy::Equal] {
                let w = prompt_weights(&d, strategy).unwrap();
                let sum: f64 = w.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);

                let shifted: Vec<f64> = d.iter().map(|x| x + shift).collect();
                let w_shifted = prompt_weights(&shifted, strategy).unwrap();
                for (a, b) in w.iter().zip(&w_shifted) {
                    prop_assert!((a - b).abs() < 1e-9);
                }

                for i in 0..d.len() {
                    for j in 0..d.len() {
                        if d[i] > d[j] + 1e-9 {
                            match strategy {
                                WeightStrategy::Far => prop_assert!(w[i] > w[j]),
                                WeightStrategy::Near => prop_assert!(w[i] < w[j]),
                                WeightStrategy::Equal => prop_assert!((w[i] - w[j]).abs() < 1e-15),
                            }
                        }
                    }
                }
            }
        }
    }
}
