//! Deterministic stand-ins for the three external services plus synthetic
//! data generation, so every pipeline and acceptance test runs offline.
//!
//! The mock model's replies are pure functions of one evidence box: each
//! token's log-probability degrades linearly with how far the box's mean
//! intensity has moved from its clean baseline, and the yes/no answer flips
//! when the mean crosses a threshold. Zero-filling the evidence region
//! therefore flips answers and produces large, localized drops, which is
//! exactly the signal the attribution and filtering pipelines look for.

pub mod http;
pub mod oracles;

use std::collections::HashMap;
use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptVocabulary, PackEntry, ReferencePack};
use crate::error::{Error, Result};
use crate::geometry::{mask_to_bbox, BBox, Mask};
use crate::image::{save_image, GrayImage};
use crate::samples::{write_samples, Answer, Mode, VqaSample};
use crate::scoring::ScoredSequence;
use crate::services::{EditorService, RefineOutcome, RefinerService, ScoringService};

/// Behavior of the evidence-keyed mock model.
///
/// `canned_answer` is a reply template; the literal `{answer}` is replaced
/// with "yes" or "no" according to the answer rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockModelSpec {
    pub evidence_box: BBox,
    /// Mean intensity of `evidence_box` in the clean image.
    pub baseline_intensity: f64,
    /// Log-probability units lost per unit of mean-intensity change.
    pub sensitivity: f64,
    /// Base log-probability of every token on the clean image.
    pub floor: f64,
    pub canned_answer: String,
    /// Answer is "yes" iff the box's mean intensity is at or above this.
    pub answer_threshold: f64,
}

impl MockModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.sensitivity.is_finite() || self.sensitivity <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "sensitivity = {}",
                self.sensitivity
            )));
        }
        if !self.floor.is_finite() || self.floor > 0.0 {
            return Err(Error::InvalidParams(format!("floor = {}", self.floor)));
        }
        Ok(())
    }
}

/// Tokenize by whitespace and score each token at
/// `floor - sensitivity * |mean(evidence_box) - baseline|`.
pub fn mock_score(
    spec: &MockModelSpec,
    img: &GrayImage,
    question: &str,
    forced_text: &str,
) -> Result<ScoredSequence> {
    if forced_text.is_empty() {
        return Err(Error::EmptyForcedText);
    }
    spec.validate()?;
    let mean = img.mean_in_box(&spec.evidence_box)?;
    let lp = spec.floor - spec.sensitivity * (mean - spec.baseline_intensity).abs();
    let tokens: Vec<String> = forced_text.split_whitespace().map(str::to_string).collect();
    let n = tokens.len();
    ScoredSequence::new(
        question.to_string(),
        forced_text.to_string(),
        tokens,
        vec![lp; n],
    )
}

/// In-process scoring service driven by a [`MockModelSpec`].
#[derive(Debug, Clone)]
pub struct MockModel {
    pub spec: MockModelSpec,
}

impl MockModel {
    pub fn new(spec: MockModelSpec) -> Self {
        MockModel { spec }
    }
}

impl ScoringService for MockModel {
    fn generate(&self, image: &GrayImage, _question: &str, _mode: Mode) -> Result<String> {
        let mean = image.mean_in_box(&self.spec.evidence_box)?;
        let answer = if mean >= self.spec.answer_threshold {
            "yes"
        } else {
            "no"
        };
        Ok(self.spec.canned_answer.replace("{answer}", answer))
    }

    fn score(
        &self,
        image: &GrayImage,
        question: &str,
        forced_text: &str,
    ) -> Result<ScoredSequence> {
        mock_score(&self.spec, image, question, forced_text)
    }
}

/// Scoring service with scripted generate replies, keyed by question text.
/// Each call pops the next reply for its question; running out is an error.
#[derive(Default)]
pub struct ScriptedModel {
    scripts: Mutex<HashMap<String, VecDeque<String>>>,
}

impl ScriptedModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_reply(&self, question: &str, reply: &str) {
        self.scripts
            .lock()
            .expect("script table")
            .entry(question.to_string())
            .or_default()
            .push_back(reply.to_string());
    }

    /// Replies left unconsumed, for trace-completeness assertions.
    pub fn remaining(&self) -> usize {
        self.scripts
            .lock()
            .expect("script table")
            .values()
            .map(|q| q.len())
            .sum()
    }
}

impl ScoringService for ScriptedModel {
    fn generate(&self, _image: &GrayImage, question: &str, _mode: Mode) -> Result<String> {
        self.scripts
            .lock()
            .expect("script table")
            .get_mut(question)
            .and_then(|q| q.pop_front())
            .ok_or_else(|| Error::Service {
                endpoint: "scripted-model".to_string(),
                reason: format!("no scripted reply left for question {question:?}"),
            })
    }

    fn score(&self, _: &GrayImage, _: &str, _: &str) -> Result<ScoredSequence> {
        Err(Error::Service {
            endpoint: "scripted-model".to_string(),
            reason: "scripted model has no scoring table".to_string(),
        })
    }
}

/// Wrapper counting calls to an inner scoring service.
pub struct CountingModel<S> {
    inner: S,
    generate_calls: AtomicUsize,
    score_calls: AtomicUsize,
}

impl<S: ScoringService> CountingModel<S> {
    pub fn new(inner: S) -> Self {
        CountingModel {
            inner,
            generate_calls: AtomicUsize::new(0),
            score_calls: AtomicUsize::new(0),
        }
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls.load(Ordering::Relaxed)
    }

    pub fn score_calls(&self) -> usize {
        self.score_calls.load(Ordering::Relaxed)
    }
}

impl<S: ScoringService> ScoringService for CountingModel<S> {
    fn generate(&self, image: &GrayImage, question: &str, mode: Mode) -> Result<String> {
        self.generate_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.generate(image, question, mode)
    }

    fn score(
        &self,
        image: &GrayImage,
        question: &str,
        forced_text: &str,
    ) -> Result<ScoredSequence> {
        self.score_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score(image, question, forced_text)
    }
}

/// Fill every masked pixel with a constant.
pub fn stub_edit(img: &GrayImage, mask: &Mask, fill: u8) -> Result<GrayImage> {
    if mask.dimensions() != img.dimensions() {
        return Err(Error::MaskDimensionMismatch {
            want_w: img.width(),
            want_h: img.height(),
            got_w: mask.width(),
            got_h: mask.height(),
        });
    }
    let mut data = img.data().to_vec();
    for (px, &set) in data.iter_mut().zip(mask.bits()) {
        if set {
            *px = fill;
        }
    }
    GrayImage::new(img.width(), img.height(), data)
}

/// Editor stub: constant fill regardless of the prompt.
#[derive(Debug, Clone, Copy)]
pub struct ConstantFillEditor {
    pub fill: u8,
}

impl EditorService for ConstantFillEditor {
    fn edit(&self, image: &GrayImage, mask: &Mask, _prompt: &str) -> Result<GrayImage> {
        stub_edit(image, mask, self.fill)
    }
}

/// Refiner stub: the mask is exactly the box interior.
pub fn stub_refine(img: &GrayImage, bbox: BBox) -> Result<Mask> {
    bbox.check_within(img.width(), img.height())?;
    Mask::from_boxes(img.width(), img.height(), &[bbox])
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BoxFillRefiner;

impl RefinerService for BoxFillRefiner {
    fn refine(&self, image: &GrayImage, bbox: BBox) -> Result<RefineOutcome> {
        Ok(RefineOutcome::Mask(stub_refine(image, bbox)?))
    }
}

/// A synthetic planted-evidence fixture: a target image with a bright
/// elliptical finding inside one concept region, the annotated reference
/// pack it can be transferred from, the VQA sample row, and the mock-model
/// spec keyed to the finding.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub target: GrayImage,
    pub pack: ReferencePack,
    pub vocab: ConceptVocabulary,
    pub sample: VqaSample,
    pub model_spec: MockModelSpec,
    pub planted_concept: String,
}

const SYNTH_DIM: u32 = 224;
const CELL_W: u32 = 56;
const CELL_H: u32 = 42;
const REGION_BOOST: u8 = 75;

/// Parameters the synthetic pipeline fixtures solve with. The synthetic
/// regions are one grid cell wide, so transport runs with a small entropic
/// coefficient to keep the blur radius below the inter-cell gaps.
pub fn synth_uot_params() -> crate::transport::UotParams {
    crate::transport::UotParams {
        epsilon: 2e-3,
        lambda1: 0.1,
        lambda2: 0.1,
        max_iters: 2000,
        tol: 1e-6,
    }
}

/// Cell box of concept `i` in the fixed 3x4 synthetic layout.
fn synth_cell(i: usize) -> BBox {
    let c = (i % 3) as u32;
    let r = (i / 3) as u32;
    let x1 = 12 + c * 72;
    let y1 = 10 + r * 54;
    BBox::new(x1, y1, x1 + CELL_W, y1 + CELL_H).expect("layout fits 224x224")
}

fn ellipse_mask(width: u32, height: u32, cx: f64, cy: f64, rx: f64, ry: f64) -> Mask {
    let mut m = Mask::empty(width, height).expect("nonzero dims");
    for y in 0..height {
        for x in 0..width {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                m.set(x, y, true);
            }
        }
    }
    m
}

/// The fixed synthetic region geometry: one inscribed ellipse per concept
/// cell, identical across references and targets.
fn synth_region_masks(vocab: &ConceptVocabulary) -> Vec<(String, Mask)> {
    vocab
        .concepts()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let cell = synth_cell(i);
            let cx = cell.x1() as f64 + CELL_W as f64 / 2.0;
            let cy = cell.y1() as f64 + CELL_H as f64 / 2.0;
            let mask = ellipse_mask(
                SYNTH_DIM,
                SYNTH_DIM,
                cx,
                cy,
                CELL_W as f64 / 2.0,
                CELL_H as f64 / 2.0,
            );
            (c.id.clone(), mask)
        })
        .collect()
}

fn synth_background(base: u8, phase: f64, amp: f64) -> GrayImage {
    let mut img = GrayImage::filled(SYNTH_DIM, SYNTH_DIM, base).expect("valid dims");
    for y in 0..SYNTH_DIM {
        for x in 0..SYNTH_DIM {
            let gradient = ((x + y) as f64 * 24.0 / 446.0) as i32;
            let wave = (amp * ((x as f64 * 0.07 + y as f64 * 0.05 + phase).sin())) as i32;
            let v = (base as i32 + gradient + wave).clamp(0, 255) as u8;
            img.set(x, y, v);
        }
    }
    img
}

fn brighten(img: &mut GrayImage, mask: &Mask, boost: u8) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(x, y) {
                let v = img.get(x, y).saturating_add(boost);
                img.set(x, y, v);
            }
        }
    }
}

/// Generate the deterministic fixture for a seed.
///
/// The planted ellipse's tight box is `sample.gt_boxes[0]` and doubles as
/// the mock model's evidence box. Zero-filling it drops the box mean below
/// the answer threshold, so the mock flips yes -> no.
pub fn synth_sample(seed: u64) -> SynthSample {
    let vocab = ConceptVocabulary::imagenome_default();
    let regions = synth_region_masks(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Reference pack: three annotated normals with different backgrounds.
    let mut entries = Vec::new();
    for k in 0..3u8 {
        let mut image = synth_background(36 + 4 * k, k as f64 * 1.7, 2.0);
        for (_, mask) in &regions {
            brighten(&mut image, mask, REGION_BOOST);
        }
        entries.push(PackEntry {
            name: format!("ref{k:02}"),
            image,
            masks: regions.iter().cloned().collect(),
        });
    }
    let pack = ReferencePack::new(entries).expect("synthetic pack is valid");

    // Target: same geometry, seed-varied background, one planted finding.
    // The finding fills most of its concept region, the way a region-scale
    // abnormality fills the anatomy it names; the jitter keeps it strictly
    // inside the region ellipse.
    let planted_idx = rng.random_range(0..vocab.concepts().len() as u32) as usize;
    let planted_concept = vocab.concepts()[planted_idx].id.clone();
    let mut target = synth_background(40, rng.random_range(0.0..std::f64::consts::TAU), 3.0);
    for (_, mask) in &regions {
        brighten(&mut target, mask, REGION_BOOST);
    }
    let cell = synth_cell(planted_idx);
    let scale = rng.random_range(0.70..0.80);
    let cx = cell.x1() as f64 + CELL_W as f64 / 2.0 + rng.random_range(-3.0..3.0);
    let cy = cell.y1() as f64 + CELL_H as f64 / 2.0 + rng.random_range(-2.0..2.0);
    let rx = scale * CELL_W as f64 / 2.0;
    let ry = scale * CELL_H as f64 / 2.0;
    let finding = ellipse_mask(SYNTH_DIM, SYNTH_DIM, cx, cy, rx, ry);
    for y in 0..SYNTH_DIM {
        for x in 0..SYNTH_DIM {
            if finding.get(x, y) {
                target.set(x, y, 235);
            }
        }
    }
    let gt_box = mask_to_bbox(&finding).expect("finding is nonempty");

    let sample_id = format!("synth-{seed:05}");
    let sample = VqaSample {
        sample_id: sample_id.clone(),
        image_path: format!("{sample_id}.pgm"),
        attribute: "focal opacity".to_string(),
        gt_boxes: vec![gt_box],
        answer: Answer::Yes,
        mode: Mode::Direct,
    };
    let baseline_intensity = target.mean_in_box(&gt_box).expect("box within image");
    let model_spec = MockModelSpec {
        evidence_box: gt_box,
        baseline_intensity,
        sensitivity: 0.05,
        floor: -0.05,
        canned_answer: "{answer}".to_string(),
        answer_threshold: baseline_intensity / 2.0,
    };
    SynthSample {
        target,
        pack,
        vocab,
        sample,
        model_spec,
        planted_concept,
    }
}

/// On-disk layout of a written fixture.
#[derive(Debug, Clone)]
pub struct SynthFixture {
    pub image_path: std::path::PathBuf,
    pub refpack_dir: std::path::PathBuf,
    pub vocab_path: std::path::PathBuf,
    pub samples_path: std::path::PathBuf,
    pub model_spec_path: std::path::PathBuf,
}

impl SynthSample {
    /// Write the fixture into a directory: target PGM, reference pack,
    /// vocabulary JSON, a one-line samples JSONL, and the mock-model spec.
    pub fn write_to_dir(&self, dir: impl AsRef<std::path::Path>) -> Result<SynthFixture> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let image_path = dir.join(&self.sample.image_path);
        save_image(&self.target, &image_path)?;
        let refpack_dir = dir.join("refpack");
        self.pack.write_dir(&refpack_dir)?;
        let vocab_path = dir.join("vocab.json");
        self.vocab.to_json_file(&vocab_path)?;
        let samples_path = dir.join("samples.jsonl");
        write_samples(&samples_path, std::slice::from_ref(&self.sample))?;
        let model_spec_path = dir.join("model_spec.json");
        let text = serde_json::to_string_pretty(&self.model_spec)
            .map_err(|e| Error::json("model spec", e))?;
        std::fs::write(&model_spec_path, text).map_err(|e| Error::io(&model_spec_path, e))?;
        Ok(SynthFixture {
            image_path,
            refpack_dir,
            vocab_path,
            samples_path,
            model_spec_path,
        })
    }
}
