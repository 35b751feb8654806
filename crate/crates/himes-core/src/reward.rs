//! Reward engine for rewriter post-training: the hard supervised explicit
//! reward (HSER) over the black-box responder's answer, the soft supervised
//! explicit reward (SSER) over the rewrite itself, their weighted fusion,
//! and group-relative advantage normalization for GRPO-style consumers.

use serde::{Deserialize, Serialize};

use crate::clients::EmbedderClient;
use crate::embedding::cosine_similarity;
use crate::error::{Error, Result};
use crate::text::{normalize_text, rouge_l_f1, tokenize};

/// Default token-coverage threshold for the hit check.
pub const DEFAULT_HIT_THRESHOLD: f64 = 0.8;

/// Floor applied to the per-group standard deviation during advantage
/// normalization.
pub const ADVANTAGE_STD_FLOOR: f64 = 1e-6;

/// Weights of the reward formula: `hser = f1 + alpha*em + beta*hit` and
/// `fused = hser + lambda*sser`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            alpha: 0.5,
            beta: 0.5,
            lambda: 0.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {value}"
                )));
            }
        }
        Ok(())
    }
}

/// How the hit component decides that a prediction "appears in" retrieved
/// content. Coverage counts the fraction of distinct normalized prediction
/// tokens present in a single content item; Substring requires the whole
/// normalized prediction verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum HitMode {
    Coverage { threshold: f64 },
    Substring,
}

impl Default for HitMode {
    fn default() -> Self {
        HitMode::Coverage {
            threshold: DEFAULT_HIT_THRESHOLD,
        }
    }
}

/// One rollout to score: the rewritten query, the responder's answer, the
/// golden reference answer, and the contents retrieval returned for the
/// rewrite. `annotated_rewrite` enables the SSER component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutSample {
    pub rewritten_query: String,
    pub predicted_answer: String,
    pub reference_answer: String,
    #[serde(default)]
    pub retrieved_contents: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotated_rewrite: Option<String>,
}

/// Per-rollout reward components. Invariants: `hser` equals
/// `f1_h + alpha*em_h + beta*hit` exactly, and `fused` equals
/// `hser + lambda*sser` when `sser` is present, else `hser`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub f1_h: f64,
    pub em_h: u8,
    pub hit: u8,
    pub hser: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sser: Option<f64>,
    pub fused: f64,
}

/// 1 iff prediction and reference are equal after text normalization.
pub fn exact_match(pred: &str, reference: &str) -> u8 {
    u8::from(normalize_text(pred) == normalize_text(reference))
}

/// Hit with the default coverage threshold of 0.8.
pub fn hit(pred: &str, contents: &[String]) -> u8 {
    hit_with_mode(pred, contents, &HitMode::default())
}

/// 1 iff the prediction appears in at least one content item per `mode`.
/// Empty contents (or a prediction that normalizes to nothing) never hit.
pub fn hit_with_mode(pred: &str, contents: &[String], mode: &HitMode) -> u8 {
    let normalized_pred = normalize_text(pred);
    if normalized_pred.is_empty() || contents.is_empty() {
        return 0;
    }
    match mode {
        HitMode::Substring => u8::from(
            contents
                .iter()
                .any(|c| normalize_text(c).contains(&normalized_pred)),
        ),
        HitMode::Coverage { threshold } => {
            let pred_tokens: std::collections::HashSet<String> =
                tokenize(pred).tokens().iter().cloned().collect();
            if pred_tokens.is_empty() {
                return 0;
            }
            for content in contents {
                let content_tokens: std::collections::HashSet<String> =
                    tokenize(content).tokens().iter().cloned().collect();
                let covered = pred_tokens
                    .iter()
                    .filter(|t| content_tokens.contains(*t))
                    .count();
                if covered as f64 / pred_tokens.len() as f64 >= *threshold {
                    return 1;
                }
            }
            0
        }
    }
}

/// Hard supervised explicit reward: Rouge-L F1 against the reference, plus
/// weighted exact-match and hit components. The returned breakdown has no
/// SSER component and `fused == hser`.
pub fn hser(sample: &RolloutSample, weights: &RewardWeights) -> Result<RewardBreakdown> {
    hser_with_mode(sample, weights, &HitMode::default())
}

pub fn hser_with_mode(
    sample: &RolloutSample,
    weights: &RewardWeights,
    hit_mode: &HitMode,
) -> Result<RewardBreakdown> {
    weights.validate()?;
    if normalize_text(&sample.reference_answer).is_empty() {
        return Err(Error::EmptyReference);
    }
    let f1_h = rouge_l_f1(
        &tokenize(&sample.predicted_answer),
        &tokenize(&sample.reference_answer),
    );
    let em_h = exact_match(&sample.predicted_answer, &sample.reference_answer);
    let hit = hit_with_mode(&sample.predicted_answer, &sample.retrieved_contents, hit_mode);
    let hser = f1_h + weights.alpha * f64::from(em_h) + weights.beta * f64::from(hit);
    Ok(RewardBreakdown {
        f1_h,
        em_h,
        hit,
        hser,
        sser: None,
        fused: hser,
    })
}

/// Soft supervised explicit reward: Rouge-L F1 between the rewritten query
/// and the annotated reference rewrite.
pub fn sser(rewritten_query: &str, annotated_rewrite: &str) -> Result<f64> {
    if normalize_text(annotated_rewrite).is_empty() {
        return Err(Error::EmptyAnnotation);
    }
    Ok(rouge_l_f1(
        &tokenize(rewritten_query),
        &tokenize(annotated_rewrite),
    ))
}

/// Embedding-cosine variant of SSER, selectable by configuration.
pub fn sser_embedding(
    rewritten_query: &str,
    annotated_rewrite: &str,
    embedder: &dyn EmbedderClient,
) -> Result<f64> {
    if normalize_text(annotated_rewrite).is_empty() {
        return Err(Error::EmptyAnnotation);
    }
    let a = embedder.embed(rewritten_query)?;
    let b = embedder.embed(annotated_rewrite)?;
    // clamp: cosine lands in [-1, 1] but SSER is documented as [0, 1]
    Ok(cosine_similarity(&a, &b)?.clamp(0.0, 1.0))
}

/// Fuses the HSER and SSER components: `hser + lambda*sser`. A positive
/// lambda with no SSER component is an error rather than a silent zero.
pub fn fused_reward(breakdown: &RewardBreakdown, weights: &RewardWeights) -> Result<f64> {
    weights.validate()?;
    match breakdown.sser {
        Some(sser) => Ok(breakdown.hser + weights.lambda * sser),
        None if weights.lambda == 0.0 => Ok(breakdown.hser),
        None => Err(Error::MissingSser),
    }
}

/// Full scoring of one rollout: HSER always, SSER whenever an annotation is
/// present, fused per the weights.
pub fn score_rollout(sample: &RolloutSample, weights: &RewardWeights) -> Result<RewardBreakdown> {
    score_rollout_with_mode(sample, weights, &HitMode::default())
}

pub fn score_rollout_with_mode(
    sample: &RolloutSample,
    weights: &RewardWeights,
    hit_mode: &HitMode,
) -> Result<RewardBreakdown> {
    let mut breakdown = hser_with_mode(sample, weights, hit_mode)?;
    if let Some(annotation) = &sample.annotated_rewrite {
        breakdown.sser = Some(sser(&sample.rewritten_query, annotation)?);
    }
    breakdown.fused = fused_reward(&breakdown, weights)?;
    Ok(breakdown)
}

/// Group-relative advantages: within each consecutive group of `group_size`
/// rewards, `(r - mean) / std` with the standard deviation floored at
/// [`ADVANTAGE_STD_FLOOR`]. A group of identical rewards yields exact zeros.
pub fn group_relative_advantages(rewards: &[f64], group_size: usize) -> Result<Vec<f64>> {
    if group_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "group size must be >= 2, got {group_size}"
        )));
    }
    if rewards.is_empty() || !rewards.len().is_multiple_of(group_size) {
        return Err(Error::GroupMismatch {
            count: rewards.len(),
            group: group_size,
        });
    }
    let mut advantages = Vec::with_capacity(rewards.len());
    for group in rewards.chunks(group_size) {
        let first = group[0];
        if group.iter().all(|r| *r == first) {
            advantages.extend(std::iter::repeat_n(0.0, group_size));
            continue;
        }
        let mean = group.iter().sum::<f64>() / group_size as f64;
        let variance =
            group.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / group_size as f64;
        let std = variance.sqrt().max(ADVANTAGE_STD_FLOOR);
        advantages.extend(group.iter().map(|r| (r - mean) / std));
    }
    Ok(advantages)
}
