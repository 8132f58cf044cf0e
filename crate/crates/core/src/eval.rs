//! Attribution metrics over rasterized union regions, and the batch
//! evaluation harness joining predictions to JSONL benchmarks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{union_pixel_count, BBox};
use crate::samples::read_samples_lenient;

/// The four overlap metrics for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Metrics attached to a sample id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub sample_id: String,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Score predicted boxes against ground truth over union regions.
///
/// Empty predictions score zero on every metric; an empty ground-truth list
/// is an error (the sample is not evaluable).
pub fn score_boxes(pred: &[BBox], gt: &[BBox], dims: (u32, u32)) -> Result<MetricScores> {
    if gt.is_empty() {
        return Err(Error::Unevaluable(String::new()));
    }
    if pred.is_empty() {
        return Ok(MetricScores {
            iou: 0.0,
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        });
    }
    let counts = union_pixel_count(pred, gt, dims)?;
    let i = counts.intersection as f64;
    let precision = i / counts.area_a as f64;
    let recall = i / counts.area_b as f64;
    let iou = i / counts.union as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricScores {
        iou,
        precision,
        recall,
        f1,
    })
}

/// One predictions-file row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: String,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct EvalCounts {
    pub evaluated: usize,
    pub failed: usize,
}

/// Aggregated evaluation output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub means: MetricScores,
    pub per_sample: Vec<MetricRecord>,
    pub counts: EvalCounts,
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("report", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Join predictions to samples on `sample_id`, score each pair, and
/// aggregate. Malformed rows and unknown ids are skipped and counted.
pub fn evaluate(
    samples_path: impl AsRef<Path>,
    predictions_path: impl AsRef<Path>,
    dims: (u32, u32),
) -> Result<EvalReport> {
    let (samples, malformed) = read_samples_lenient(samples_path.as_ref())?;
    let by_id: BTreeMap<&str, &crate::samples::VqaSample> =
        samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();

    let predictions_path = predictions_path.as_ref();
    let text = fs::read_to_string(predictions_path).map_err(|e| Error::io(predictions_path, e))?;
    let raw: Vec<serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| Error::json(predictions_path.display().to_string(), e))?;

    let mut failed = malformed.len();
    let mut per_sample = Vec::new();
    for value in raw {
        let row: PredictionRow = match serde_json::from_value(value) {
            Ok(row) => row,
            Err(e) => {
                eprintln!("warning: skipping malformed prediction row: {e}");
                failed += 1;
                continue;
            }
        };
        let Some(sample) = by_id.get(row.sample_id.as_str()) else {
            eprintln!(
                "warning: prediction references unknown sample {}",
                row.sample_id
            );
            failed += 1;
            continue;
        };
        match score_boxes(&row.boxes, &sample.gt_boxes, dims) {
            Ok(scores) => per_sample.push(MetricRecord {
                sample_id: row.sample_id,
                iou: scores.iou,
                precision: scores.precision,
                recall: scores.recall,
                f1: scores.f1,
            }),
            Err(e) => {
                eprintln!("warning: sample {} not evaluable: {e}", row.sample_id);
                failed += 1;
            }
        }
    }
    per_sample.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    let n = per_sample.len() as f64;
    let mean = |f: fn(&MetricRecord) -> f64| {
        if per_sample.is_empty() {
            0.0
        } else {
            per_sample.iter().map(f).sum::<f64>() / n
        }
    };
    Ok(EvalReport {
        means: MetricScores {
            iou: mean(|r| r.iou),
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            f1: mean(|r| r.f1),
        },
        counts: EvalCounts {
            evaluated: per_sample.len(),
            failed,
        },
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samples::{write_samples, Answer, Mode, VqaSample};
    use std::fs;
    use std::path::Path;

    fn b(x1: u32, y1: u32, x2: u32, y2: u32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn identity_scores_one() {
        let s = score_boxes(&[b(0, 0, 10, 10)], &[b(0, 0, 10, 10)], (224, 224)).unwrap();
        assert_eq!((s.iou, s.precision, s.recall, s.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn half_overlap_hand_values() {
        let s = score_boxes(&[b(5, 0, 15, 10)], &[b(0, 0, 10, 10)], (224, 224)).unwrap();
        assert!((s.iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.precision, 0.5);
        assert_eq!(s.recall, 0.5);
        assert_eq!(s.f1, 0.5);
    }

    #[test]
    fn empty_pred_scores_zero() {
        let s = score_boxes(&[], &[b(0, 0, 10, 10)], (224, 224)).unwrap();
        assert_eq!((s.iou, s.precision, s.recall, s.f1), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_gt_is_unevaluable() {
        assert!(score_boxes(&[b(0, 0, 10, 10)], &[], (224, 224)).is_err());
    }

    fn sample(id: &str, gt: Vec<BBox>) -> VqaSample {
        VqaSample {
            sample_id: id.to_string(),
            image_path: "none.pgm".to_string(),
            attribute: "finding".to_string(),
            gt_boxes: gt,
            answer: Answer::Yes,
            mode: Mode::Direct,
        }
    }

    fn write_predictions(path: &Path, rows: &[PredictionRow]) {
        fs::write(path, serde_json::to_string(rows).unwrap()).unwrap();
    }

    #[test]
    fn evaluate_joins_and_averages() {
        let dir = tempfile::tempdir().unwrap();
        let samples_path = dir.path().join("s.jsonl");
        let preds_path = dir.path().join("p.json");
        write_samples(
            &samples_path,
            &[
                sample("a", vec![b(0, 0, 10, 10)]),
                sample("b", vec![b(0, 0, 10, 10)]),
            ],
        )
        .unwrap();
        write_predictions(
            &preds_path,
            &[
                PredictionRow {
                    sample_id: "a".into(),
                    boxes: vec![b(0, 0, 10, 10)],
                },
                PredictionRow {
                    sample_id: "b".into(),
                    boxes: vec![b(100, 100, 110, 110)],
                },
            ],
        );
        let report = evaluate(&samples_path, &preds_path, (224, 224)).unwrap();
        assert_eq!(report.counts.evaluated, 2);
        assert_eq!(report.counts.failed, 0);
        assert_eq!(report.means.iou, 0.5);
        assert_eq!(report.means.f1, 0.5);
    }

    #[test]
    fn evaluate_counts_unknown_ids() {
        let dir = tempfile::tempdir().unwrap();
        let samples_path = dir.path().join("s.jsonl");
        let preds_path = dir.path().join("p.json");
        write_samples(&samples_path, &[sample("a", vec![b(0, 0, 10, 10)])]).unwrap();
        write_predictions(
            &preds_path,
            &[
                PredictionRow {
                    sample_id: "a".into(),
                    boxes: vec![b(0, 0, 10, 10)],
                },
                PredictionRow {
                    sample_id: "ghost".into(),
                    boxes: vec![],
                },
            ],
        );
        let report = evaluate(&samples_path, &preds_path, (224, 224)).unwrap();
        assert_eq!(report.counts.evaluated, 1);
        assert_eq!(report.counts.failed, 1);
        assert_eq!(report.means.iou, 1.0);
    }

    #[test]
    fn evaluate_is_order_independent() {
        let dir = tempfile::tempdir().unwrap();
        let samples_path = dir.path().join("s.jsonl");
        write_samples(
            &samples_path,
            &[
                sample("a", vec![b(0, 0, 10, 10)]),
                sample("b", vec![b(5, 5, 20, 20)]),
            ],
        )
        .unwrap();
        let rows = [
            PredictionRow {
                sample_id: "a".into(),
                boxes: vec![b(0, 0, 5, 10)],
            },
            PredictionRow {
                sample_id: "b".into(),
                boxes: vec![b(5, 5, 20, 20)],
            },
        ];
        let p1 = dir.path().join("p1.json");
        let p2 = dir.path().join("p2.json");
        write_predictions(&p1, &rows);
        let mut rev = rows.to_vec();
        rev.reverse();
        write_predictions(&p2, &rev);
        let r1 = evaluate(&samples_path, &p1, (224, 224)).unwrap();
        let r2 = evaluate(&samples_path, &p2, (224, 224)).unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
    }
}
