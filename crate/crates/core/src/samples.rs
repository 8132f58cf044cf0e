//! VQA samples, JSONL serialization, and counterfactual images.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::image::GrayImage;

/// Graded yes/no answer key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn flipped(self) -> Answer {
        match self {
            Answer::Yes => Answer::No,
            Answer::No => Answer::Yes,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Yes => "yes",
            Answer::No => "no",
        }
    }
}

/// Output mode: answer immediately, or produce a reasoning chain first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Direct,
    Reason,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Direct => "direct",
            Mode::Reason => "reason",
        }
    }
}

/// One benchmark row: a finding, its evidence boxes, and the answer key.
///
/// `gt_boxes` carries the merged evidence list; multiple boxes for the same
/// attribute are evaluated as one union region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqaSample {
    pub sample_id: String,
    pub image_path: String,
    pub attribute: String,
    pub gt_boxes: Vec<BBox>,
    pub answer: Answer,
    pub mode: Mode,
}

/// Read samples from JSONL, one object per line. Blank lines are skipped;
/// any malformed line is an error.
pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<VqaSample>> {
    let (samples, failures) = read_samples_lenient(path.as_ref())?;
    if let Some((line, reason)) = failures.into_iter().next() {
        return Err(Error::MalformedRecord { line, reason });
    }
    Ok(samples)
}

/// A skipped input line: `(line_number, reason)`.
pub type MalformedLine = (usize, String);

/// Read samples from JSONL, skipping malformed lines and reporting them.
pub fn read_samples_lenient(
    path: impl AsRef<Path>,
) -> Result<(Vec<VqaSample>, Vec<MalformedLine>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<VqaSample>(line) {
            Ok(s) => samples.push(s),
            Err(e) => failures.push((idx + 1, e.to_string())),
        }
    }
    Ok((samples, failures))
}

/// Write samples as JSONL in the given order.
pub fn write_samples(path: impl AsRef<Path>, samples: &[VqaSample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s).map_err(|e| Error::json("sample", e))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// An image with a region removed; removed pixels are exactly zero under
/// zero-masking and dimensions equal the source image.
#[derive(Debug, Clone)]
pub struct Counterfactual {
    pub source_id: String,
    pub removed: Mask,
    pub image: GrayImage,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VqaSample {
        VqaSample {
            sample_id: "s1".into(),
            image_path: "img/s1.pgm".into(),
            attribute: "pleural effusion".into(),
            gt_boxes: vec![BBox::new(10, 20, 30, 40).unwrap()],
            answer: Answer::Yes,
            mode: Mode::Direct,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        write_samples(&path, &[sample()]).unwrap();
        let back = read_samples(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].sample_id, "s1");
        assert_eq!(back[0].gt_boxes, vec![BBox::new(10, 20, 30, 40).unwrap()]);
    }

    #[test]
    fn wire_schema_matches() {
        let json = serde_json::to_value(sample()).unwrap();
        assert_eq!(json["gt_boxes"][0], serde_json::json!([10, 20, 30, 40]));
        assert_eq!(json["answer"], "yes");
        assert_eq!(json["mode"], "direct");
    }

    #[test]
    fn invalid_box_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            r#"{"sample_id":"x","image_path":"p","attribute":"a","gt_boxes":[[5,5,5,9]],"answer":"yes","mode":"direct"}"#,
        )
        .unwrap();
        let (ok, failures) = read_samples_lenient(&path).unwrap();
        assert!(ok.is_empty());
        assert_eq!(failures.len(), 1);
        assert!(read_samples(&path).is_err());
    }
}
