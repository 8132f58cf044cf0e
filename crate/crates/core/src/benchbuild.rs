//! Benchmark construction: question templating, answer grading, and the
//! three-step causal filter (correctness, foreground flip, background
//! stability) that retains only samples whose annotated region is verified
//! to drive the model's answer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Mask;
use crate::image::{load_image, GrayImage};
use crate::samples::{read_samples_lenient, write_samples, Answer, Mode, VqaSample};
use crate::services::{bounded_parallel_map, EditorService, ScoringService};

const QUESTION_TEMPLATE: &str = "Is there evidence of {attribute} in the image?";
const DIRECT_SUFFIX: &str = "Answer directly with yes or no without any explanation.";
const REASON_SUFFIX: &str = "Think step by step and answer with yes or no.";

/// Render the fixed binary question for an attribute and output mode.
pub fn make_question(attribute: &str, mode: Mode) -> Result<String> {
    if attribute.is_empty() {
        return Err(Error::EmptyAttribute);
    }
    let suffix = match mode {
        Mode::Direct => DIRECT_SUFFIX,
        Mode::Reason => REASON_SUFFIX,
    };
    Ok(format!(
        "{} {}",
        QUESTION_TEMPLATE.replace("{attribute}", attribute),
        suffix
    ))
}

/// Graded model reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParsedAnswer {
    Yes,
    No,
    Ungradable,
}

impl ParsedAnswer {
    fn matches(self, key: Answer) -> bool {
        matches!(
            (self, key),
            (ParsedAnswer::Yes, Answer::Yes) | (ParsedAnswer::No, Answer::No)
        )
    }
}

fn token_matches(token: &str, word: &str) -> bool {
    token
        .trim_matches(|c: char| !c.is_ascii_alphanumeric())
        .eq_ignore_ascii_case(word)
}

/// Grade a model reply.
///
/// Direct mode matches the leading token case-insensitively; reason mode
/// lets the last word-boundary occurrence of "yes"/"no" win. Anything else
/// is ungradable.
pub fn parse_answer(text: &str, mode: Mode) -> ParsedAnswer {
    match mode {
        Mode::Direct => match text.split_whitespace().next() {
            Some(tok) if token_matches(tok, "yes") => ParsedAnswer::Yes,
            Some(tok) if token_matches(tok, "no") => ParsedAnswer::No,
            _ => ParsedAnswer::Ungradable,
        },
        Mode::Reason => {
            let lower = text.to_ascii_lowercase();
            let bytes = lower.as_bytes();
            let is_boundary = |i: Option<u8>| match i {
                None => true,
                Some(c) => !c.is_ascii_alphanumeric(),
            };
            let mut last: Option<(usize, ParsedAnswer)> = None;
            for (word, parsed) in [("yes", ParsedAnswer::Yes), ("no", ParsedAnswer::No)] {
                let w = word.as_bytes();
                let mut start = 0;
                while let Some(pos) = lower[start..].find(word) {
                    let at = start + pos;
                    let before = at.checked_sub(1).map(|i| bytes[i]);
                    let after = bytes.get(at + w.len()).copied();
                    if is_boundary(before)
                        && is_boundary(after)
                        && last.is_none_or(|(prev, _)| at > prev)
                    {
                        last = Some((at, parsed));
                    }
                    start = at + 1;
                }
            }
            last.map_or(ParsedAnswer::Ungradable, |(_, p)| p)
        }
    }
}

/// Which bucket the three-step filter put a sample in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterGroup {
    Incorrect,
    CorrectUngrounded,
    CorrectGrounded,
}

/// Parsed answers observed at each stage; later stages are `None` when an
/// earlier stage already decided the group.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageTrace {
    pub original: ParsedAnswer,
    pub foreground: Option<ParsedAnswer>,
    pub background: Option<(ParsedAnswer, ParsedAnswer)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub sample_id: String,
    pub group: FilterGroup,
    pub trace: StageTrace,
}

/// Run the three-step filter for one sample.
///
/// 1. the model must answer the original image correctly;
/// 2. editing the union of the ground-truth boxes with "No [attribute]"
///    must flip the answer;
/// 3. editing the exact complement with "No [attribute]" and with
///    "No abnormality" must leave the answer unchanged both times.
pub fn causal_filter(
    sample: &VqaSample,
    image: &GrayImage,
    model: &dyn ScoringService,
    editor: &dyn EditorService,
) -> Result<FilterVerdict> {
    if sample.gt_boxes.is_empty() {
        return Err(Error::MissingGtBoxes {
            sample_id: sample.sample_id.clone(),
        });
    }
    let question = make_question(&sample.attribute, sample.mode)?;
    let verdict = |group, trace| {
        Ok(FilterVerdict {
            sample_id: sample.sample_id.clone(),
            group,
            trace,
        })
    };

    let original = parse_answer(&model.generate(image, &question, sample.mode)?, sample.mode);
    let mut trace = StageTrace {
        original,
        foreground: None,
        background: None,
    };
    if !original.matches(sample.answer) {
        return verdict(FilterGroup::Incorrect, trace);
    }

    let fg_mask = Mask::from_boxes(image.width(), image.height(), &sample.gt_boxes)?;
    let attribute_prompt = format!("No {}", sample.attribute);
    let fg_image = editor.edit(image, &fg_mask, &attribute_prompt)?;
    let foreground = parse_answer(
        &model.generate(&fg_image, &question, sample.mode)?,
        sample.mode,
    );
    trace.foreground = Some(foreground);
    let flipped = foreground.matches(sample.answer.flipped());
    if !flipped {
        return verdict(FilterGroup::CorrectUngrounded, trace);
    }

    let bg_mask = fg_mask.complement();
    let bg1_image = editor.edit(image, &bg_mask, &attribute_prompt)?;
    let bg1 = parse_answer(
        &model.generate(&bg1_image, &question, sample.mode)?,
        sample.mode,
    );
    let bg2_image = editor.edit(image, &bg_mask, "No abnormality")?;
    let bg2 = parse_answer(
        &model.generate(&bg2_image, &question, sample.mode)?,
        sample.mode,
    );
    trace.background = Some((bg1, bg2));
    if bg1 == original && bg2 == original {
        verdict(FilterGroup::CorrectGrounded, trace)
    } else {
        verdict(FilterGroup::CorrectUngrounded, trace)
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct GroupCounts {
    pub incorrect: usize,
    pub correct_ungrounded: usize,
    pub correct_grounded: usize,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct GroupPercentages {
    pub incorrect: f64,
    pub correct_ungrounded: f64,
    pub correct_grounded: f64,
}

/// Statistics record emitted alongside the retained-sample file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchStats {
    /// Samples read from the input, excluding malformed lines.
    pub total: usize,
    pub counts: GroupCounts,
    /// Percentages of graded (non-error) samples; they sum to 100.
    pub percentages: GroupPercentages,
    /// Samples that failed with service or i/o errors.
    pub errors: usize,
    /// Input lines that did not parse.
    pub malformed: usize,
    pub retained: usize,
}

/// Filter every sample in a JSONL file and write the retained ones.
///
/// Image paths resolve relative to the samples file. Per-sample failures
/// are counted, not fatal; the output is ordered by sample id.
pub fn build_bench(
    samples_path: impl AsRef<Path>,
    model: &dyn ScoringService,
    editor: &dyn EditorService,
    out_path: impl AsRef<Path>,
    dims: (u32, u32),
    in_flight: usize,
) -> Result<BenchStats> {
    let samples_path = samples_path.as_ref();
    let (samples, malformed_lines) = read_samples_lenient(samples_path)?;
    for (line, reason) in &malformed_lines {
        eprintln!("warning: {}:{line}: {reason}", samples_path.display());
    }
    let base_dir = samples_path.parent().unwrap_or(Path::new("."));

    let outcomes = bounded_parallel_map(&samples, in_flight, |sample| {
        let image = load_image(base_dir.join(&sample.image_path), dims)?;
        causal_filter(sample, &image, model, editor)
    });

    let mut counts = GroupCounts::default();
    let mut errors = 0usize;
    let mut retained: Vec<VqaSample> = Vec::new();
    for (sample, outcome) in samples.iter().zip(outcomes) {
        match outcome {
            Ok(v) => match v.group {
                FilterGroup::Incorrect => counts.incorrect += 1,
                FilterGroup::CorrectUngrounded => counts.correct_ungrounded += 1,
                FilterGroup::CorrectGrounded => {
                    counts.correct_grounded += 1;
                    retained.push(sample.clone());
                }
            },
            Err(e) => {
                eprintln!("warning: sample {} failed: {e}", sample.sample_id);
                errors += 1;
            }
        }
    }
    retained.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    write_samples(out_path, &retained)?;

    let graded = counts.incorrect + counts.correct_ungrounded + counts.correct_grounded;
    let pct = |n: usize| {
        if graded == 0 {
            0.0
        } else {
            n as f64 * 100.0 / graded as f64
        }
    };
    Ok(BenchStats {
        total: samples.len(),
        percentages: GroupPercentages {
            incorrect: pct(counts.incorrect),
            correct_ungrounded: pct(counts.correct_ungrounded),
            correct_grounded: pct(counts.correct_grounded),
        },
        retained: counts.correct_grounded,
        counts,
        errors,
        malformed: malformed_lines.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn question_templates_verbatim() {
        assert_eq!(
            make_question("pleural effusion", Mode::Direct).unwrap(),
            "Is there evidence of pleural effusion in the image? \
             Answer directly with yes or no without any explanation."
        );
        assert_eq!(
            make_question("nodule", Mode::Reason).unwrap(),
            "Is there evidence of nodule in the image? \
             Think step by step and answer with yes or no."
        );
        assert!(make_question("", Mode::Direct).is_err());
    }

    #[test]
    fn parse_direct_answers() {
        assert_eq!(parse_answer("Yes.", Mode::Direct), ParsedAnswer::Yes);
        assert_eq!(
            parse_answer("  no, nothing", Mode::Direct),
            ParsedAnswer::No
        );
        assert_eq!(
            parse_answer("uncertain", Mode::Direct),
            ParsedAnswer::Ungradable
        );
        assert_eq!(parse_answer("", Mode::Direct), ParsedAnswer::Ungradable);
    }

    #[test]
    fn parse_reason_takes_last_occurrence() {
        assert_eq!(
            parse_answer("...the lungs are clear, so the answer is no", Mode::Reason),
            ParsedAnswer::No
        );
        assert_eq!(
            parse_answer("no signs at first, but ultimately yes", Mode::Reason),
            ParsedAnswer::Yes
        );
        // word boundaries: "nodule" and "eyes" must not match
        assert_eq!(
            parse_answer("a nodule with eyes nearby", Mode::Reason),
            ParsedAnswer::Ungradable
        );
        assert_eq!(parse_answer("Yes(!)", Mode::Reason), ParsedAnswer::Yes);
    }

    use crate::geometry::BBox;
    use crate::testkit::{ConstantFillEditor, ScriptedModel};

    fn scripted_sample(attribute: &str) -> (VqaSample, String) {
        let sample = VqaSample {
            sample_id: "s".to_string(),
            image_path: "unused".to_string(),
            attribute: attribute.to_string(),
            gt_boxes: vec![BBox::new(2, 2, 6, 6).unwrap()],
            answer: Answer::Yes,
            mode: Mode::Direct,
        };
        let question = make_question(attribute, Mode::Direct).unwrap();
        (sample, question)
    }

    #[test]
    fn filter_grounded_trace() {
        let (sample, question) = scripted_sample("effusion");
        let model = ScriptedModel::new();
        for reply in ["yes", "no", "yes", "yes"] {
            model.push_reply(&question, reply);
        }
        let img = GrayImage::filled(8, 8, 50).unwrap();
        let editor = ConstantFillEditor { fill: 0 };
        let v = causal_filter(&sample, &img, &model, &editor).unwrap();
        assert_eq!(v.group, FilterGroup::CorrectGrounded);
        assert_eq!(v.trace.original, ParsedAnswer::Yes);
        assert_eq!(v.trace.foreground, Some(ParsedAnswer::No));
        assert_eq!(
            v.trace.background,
            Some((ParsedAnswer::Yes, ParsedAnswer::Yes))
        );
        assert_eq!(model.remaining(), 0);
    }

    #[test]
    fn filter_no_flip_skips_background_stage() {
        let (sample, question) = scripted_sample("nodule");
        let model = ScriptedModel::new();
        for reply in ["yes", "yes"] {
            model.push_reply(&question, reply);
        }
        let img = GrayImage::filled(8, 8, 50).unwrap();
        let v = causal_filter(&sample, &img, &model, &ConstantFillEditor { fill: 0 }).unwrap();
        assert_eq!(v.group, FilterGroup::CorrectUngrounded);
        assert!(v.trace.background.is_none());
        assert_eq!(model.remaining(), 0);
    }

    #[test]
    fn filter_incorrect_gate_stops_early() {
        let (sample, question) = scripted_sample("mass");
        let model = ScriptedModel::new();
        model.push_reply(&question, "no");
        let img = GrayImage::filled(8, 8, 50).unwrap();
        let v = causal_filter(&sample, &img, &model, &ConstantFillEditor { fill: 0 }).unwrap();
        assert_eq!(v.group, FilterGroup::Incorrect);
        assert!(v.trace.foreground.is_none());
        assert!(v.trace.background.is_none());
    }

    #[test]
    fn filter_requires_gt_boxes() {
        let (mut sample, _) = scripted_sample("mass");
        sample.gt_boxes.clear();
        let img = GrayImage::filled(8, 8, 50).unwrap();
        let model = ScriptedModel::new();
        assert!(matches!(
            causal_filter(&sample, &img, &model, &ConstantFillEditor { fill: 0 }),
            Err(Error::MissingGtBoxes { .. })
        ));
    }

    #[test]
    fn build_bench_empty_input() {
        let dir = tempfile::tempdir().unwrap();
        let samples_path = dir.path().join("empty.jsonl");
        std::fs::write(&samples_path, "").unwrap();
        let out_path = dir.path().join("out.jsonl");
        let model = ScriptedModel::new();
        let stats = build_bench(
            &samples_path,
            &model,
            &ConstantFillEditor { fill: 0 },
            &out_path,
            (224, 224),
            1,
        )
        .unwrap();
        assert_eq!(stats.total, 0);
        assert_eq!(stats.retained, 0);
        assert_eq!(std::fs::read_to_string(&out_path).unwrap(), "");
    }

    #[test]
    fn build_bench_counts_per_sample_errors() {
        // Image file missing: the sample errors, the run continues.
        let dir = tempfile::tempdir().unwrap();
        let samples_path = dir.path().join("s.jsonl");
        let (sample, _q) = scripted_sample("ghost");
        crate::samples::write_samples(&samples_path, &[sample]).unwrap();
        let model = ScriptedModel::new();
        let stats = build_bench(
            &samples_path,
            &model,
            &ConstantFillEditor { fill: 0 },
            dir.path().join("out.jsonl"),
            (224, 224),
            1,
        )
        .unwrap();
        assert_eq!(stats.total, 1);
        assert_eq!(stats.errors, 1);
        assert_eq!(stats.retained, 0);
    }
}
