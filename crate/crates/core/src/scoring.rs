//! Causal scoring: counterfactual images, per-token log-probability drops,
//! and thresholded argmax attribution over concepts and composite groups.
//!
//! For each concept region the target image is zero-masked inside the
//! region's bounding box, the model's original output is re-scored under
//! teacher forcing, and the concept's effect is the clamped cumulative drop
//!
//! ```text
//! delta_c = sum_t max(0, logp(y_t | x, q, y_<t) - logp(y_t | x_c, q, y_<t))
//! ```
//!
//! The winner is the concept (or composite) with the largest drop; if every
//! retention ratio `exp(-delta)` stays at or above the threshold, no single
//! concept drives the prediction and the whole image is returned instead.

use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptRegion, ConceptVocabulary};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::image::GrayImage;
use crate::samples::Counterfactual;
use crate::services::{bounded_parallel_map, ScoringService};

/// Winner key reported when attribution falls back to the whole image.
pub const WHOLE_IMAGE: &str = "entire_image";

/// A forced output sequence with aligned per-token log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    question: String,
    forced_text: String,
    tokens: Vec<String>,
    logprobs: Vec<f64>,
}

impl ScoredSequence {
    pub fn new(
        question: String,
        forced_text: String,
        tokens: Vec<String>,
        logprobs: Vec<f64>,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::ServiceContract("empty token sequence".to_string()));
        }
        if tokens.len() != logprobs.len() {
            return Err(Error::ServiceContract(format!(
                "{} tokens but {} logprobs",
                tokens.len(),
                logprobs.len()
            )));
        }
        if logprobs.iter().any(|lp| !lp.is_finite() || *lp > 0.0) {
            return Err(Error::ServiceContract(
                "logprobs must be finite and <= 0".to_string(),
            ));
        }
        Ok(ScoredSequence {
            question,
            forced_text,
            tokens,
            logprobs,
        })
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn forced_text(&self) -> &str {
        &self.forced_text
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Mean per-token log-probability.
    pub fn mean_logprob(&self) -> f64 {
        self.logprobs.iter().sum::<f64>() / self.logprobs.len() as f64
    }
}

/// Per-concept causal effect.
#[derive(Debug, Clone, Serialize)]
pub struct ConceptDelta {
    /// Concept id or composite group name.
    pub concept_key: String,
    /// Cumulative clamped log-probability drop; always >= 0.
    pub delta: f64,
    /// Retention ratio `exp(-delta)` in (0, 1].
    pub ratio: f64,
    /// Clamped per-token drops; sums to `delta`.
    pub per_token_drops: Vec<f64>,
    /// Intervention box (for composites, the box enclosing the member union).
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Attribution thresholds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    /// Relevance threshold on the minimum retention ratio.
    pub tau: f64,
    /// Whether composite groups are evaluated alongside singletons.
    pub include_composites: bool,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            tau: 0.75,
            include_composites: true,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidParams(format!("tau = {}", self.tau)));
        }
        Ok(())
    }
}

/// Outcome of one attribution run.
#[derive(Debug, Clone)]
pub struct AttributionResult {
    /// Winning concept key, or [`WHOLE_IMAGE`] on fallback.
    pub winner: String,
    /// Winner's spatial attribution: the concept box, each member box of a
    /// winning composite, or the full-image box on fallback.
    pub boxes: Vec<BBox>,
    /// Every evaluated concept and composite, in evaluation order.
    pub deltas: Vec<ConceptDelta>,
    /// Tokens of the original output, for aligning `token_attribution`.
    pub tokens: Vec<String>,
    /// Winner's per-token drops (zeros on fallback), aligned to `tokens`.
    pub token_attribution: Vec<f64>,
    pub fallback: bool,
}

/// Report row for one evaluated concept.
#[derive(Debug, Clone, Serialize)]
pub struct DeltaRecord {
    pub concept_key: String,
    pub delta: f64,
    pub ratio: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// The attribution report written by the CLI and integration harnesses.
#[derive(Debug, Clone, Serialize)]
pub struct AttributionReport {
    pub sample_id: String,
    pub winner: String,
    pub fallback: bool,
    pub boxes: Vec<BBox>,
    pub deltas: Vec<DeltaRecord>,
    pub tokens: Vec<String>,
    pub token_attribution: Vec<f64>,
}

impl AttributionResult {
    pub fn report(&self, sample_id: &str) -> AttributionReport {
        AttributionReport {
            sample_id: sample_id.to_string(),
            winner: self.winner.clone(),
            fallback: self.fallback,
            boxes: self.boxes.clone(),
            deltas: self
                .deltas
                .iter()
                .map(|d| DeltaRecord {
                    concept_key: d.concept_key.clone(),
                    delta: d.delta,
                    ratio: d.ratio,
                    bbox: d.bbox,
                })
                .collect(),
            tokens: self.tokens.clone(),
            token_attribution: self.token_attribution.clone(),
        }
    }
}

/// Zero every pixel inside the union of the boxes, leaving the rest intact.
pub fn make_counterfactual(img: &GrayImage, boxes: &[BBox]) -> Result<Counterfactual> {
    if boxes.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let removed = Mask::from_boxes(img.width(), img.height(), boxes)?;
    let mut data = img.data().to_vec();
    for (px, &set) in data.iter_mut().zip(removed.bits()) {
        if set {
            *px = 0;
        }
    }
    Ok(Counterfactual {
        source_id: String::new(),
        image: GrayImage::new(img.width(), img.height(), data)?,
        removed,
    })
}

/// One teacher-forced scoring call.
pub fn score_sequence(
    model: &dyn ScoringService,
    img: &GrayImage,
    question: &str,
    forced_text: &str,
) -> Result<ScoredSequence> {
    if forced_text.is_empty() {
        return Err(Error::EmptyForcedText);
    }
    model.score(img, question, forced_text)
}

/// The `(delta, per_token_drops)` fields of a [`ConceptDelta`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaParts {
    pub delta: f64,
    pub per_token_drops: Vec<f64>,
}

/// Clamped cumulative drop between the original and a perturbed scoring of
/// the same forced sequence. The token lists must match element-wise.
pub fn delta(original: &ScoredSequence, perturbed: &ScoredSequence) -> Result<DeltaParts> {
    if original.len() != perturbed.len() {
        return Err(Error::SequenceLengthMismatch {
            original: original.len(),
            perturbed: perturbed.len(),
        });
    }
    for (i, (a, b)) in original.tokens.iter().zip(&perturbed.tokens).enumerate() {
        if a != b {
            return Err(Error::TokenMismatch {
                index: i,
                original: a.clone(),
                perturbed: b.clone(),
            });
        }
    }
    let per_token_drops: Vec<f64> = original
        .logprobs
        .iter()
        .zip(&perturbed.logprobs)
        .map(|(o, p)| (o - p).max(0.0))
        .collect();
    let delta = per_token_drops.iter().sum();
    Ok(DeltaParts {
        delta,
        per_token_drops,
    })
}

/// Full attribution over present concepts and eligible composites.
///
/// Scores the original once, then one counterfactual per present singleton
/// and per composite whose members are all present (exactly
/// `1 + n_singletons + n_composites` scoring calls). Interventions may be
/// scored concurrently up to `in_flight` calls.
#[allow(clippy::too_many_arguments)]
pub fn attribute(
    model: &dyn ScoringService,
    img: &GrayImage,
    question: &str,
    forced_text: &str,
    regions: &std::collections::BTreeMap<String, ConceptRegion>,
    vocab: &ConceptVocabulary,
    cfg: &AttributionConfig,
    in_flight: usize,
) -> Result<AttributionResult> {
    cfg.validate()?;
    let original = score_sequence(model, img, question, forced_text)?;
    let full_box = BBox::full(img.width(), img.height())?;

    // Interventions in vocabulary order, singletons before composites.
    struct Intervention {
        key: String,
        mask_boxes: Vec<BBox>,
        record_box: BBox,
        winner_boxes: Vec<BBox>,
    }
    let mut interventions = Vec::new();
    for concept in vocab.concepts() {
        if let Some(region) = regions.get(&concept.id) {
            interventions.push(Intervention {
                key: concept.id.clone(),
                mask_boxes: vec![region.bbox],
                record_box: region.bbox,
                winner_boxes: vec![region.bbox],
            });
        }
    }
    if cfg.include_composites {
        for comp in vocab.composites() {
            let members: Vec<BBox> = comp
                .member_ids
                .iter()
                .filter_map(|id| regions.get(id).map(|r| r.bbox))
                .collect();
            if members.len() == comp.member_ids.len() {
                interventions.push(Intervention {
                    key: comp.name.clone(),
                    record_box: BBox::enclosing(&members).expect("members nonempty"),
                    winner_boxes: members.clone(),
                    mask_boxes: members,
                });
            }
        }
    }

    if interventions.is_empty() {
        eprintln!("warning: no present concepts; falling back to the whole image");
        return Ok(AttributionResult {
            winner: WHOLE_IMAGE.to_string(),
            boxes: vec![full_box],
            deltas: Vec::new(),
            tokens: original.tokens.clone(),
            token_attribution: vec![0.0; original.len()],
            fallback: true,
        });
    }

    let scored = bounded_parallel_map(&interventions, in_flight, |iv| {
        let run = || -> Result<ConceptDelta> {
            let cf = make_counterfactual(img, &iv.mask_boxes)?;
            let perturbed = score_sequence(model, &cf.image, question, forced_text)?;
            let parts = delta(&original, &perturbed)?;
            Ok(ConceptDelta {
                concept_key: iv.key.clone(),
                ratio: (-parts.delta).exp(),
                delta: parts.delta,
                per_token_drops: parts.per_token_drops,
                bbox: iv.record_box,
            })
        };
        run().map_err(|e| e.for_concept(&iv.key))
    });
    let mut deltas = Vec::with_capacity(scored.len());
    for d in scored {
        deltas.push(d?);
    }

    let min_ratio = deltas.iter().map(|d| d.ratio).fold(f64::INFINITY, f64::min);
    if min_ratio >= cfg.tau {
        return Ok(AttributionResult {
            winner: WHOLE_IMAGE.to_string(),
            boxes: vec![full_box],
            deltas,
            tokens: original.tokens.clone(),
            token_attribution: vec![0.0; original.len()],
            fallback: true,
        });
    }

    // Strict comparison keeps the earliest intervention on ties, which is
    // vocabulary order with singletons ahead of composites.
    let mut best = 0;
    for (i, d) in deltas.iter().enumerate() {
        if d.delta > deltas[best].delta {
            best = i;
        }
    }
    let winner = &deltas[best];
    Ok(AttributionResult {
        winner: winner.concept_key.clone(),
        boxes: interventions[best].winner_boxes.clone(),
        tokens: original.tokens.clone(),
        token_attribution: winner.per_token_drops.clone(),
        fallback: false,
        deltas,
    })
}
