//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported or malformed image {path}: {reason}")]
    ImageFormat { path: PathBuf, reason: String },

    #[error("image has zero dimension ({width}x{height})")]
    ZeroDimension { width: u32, height: u32 },

    #[error("pixel buffer length {got} does not match {width}x{height}")]
    BadBufferLength { width: u32, height: u32, got: usize },

    #[error("invalid box [{x1},{y1},{x2},{y2}): coordinates must satisfy x1<x2 and y1<y2")]
    InvalidBox { x1: u32, y1: u32, x2: u32, y2: u32 },

    #[error("box [{x1},{y1},{x2},{y2}) exceeds image bounds {width}x{height}")]
    BoxOutOfBounds {
        x1: u32,
        y1: u32,
        x2: u32,
        y2: u32,
        width: u32,
        height: u32,
    },

    #[error("mask has no set pixels")]
    EmptyRegion,

    #[error("mask dimensions {got_w}x{got_h} do not match image {want_w}x{want_h}")]
    MaskDimensionMismatch {
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },

    #[error("empty distribution")]
    EmptyDistribution,

    #[error("distribution has {coords} coordinates but {weights} weights")]
    DistributionLengthMismatch { coords: usize, weights: usize },

    #[error("invalid solver parameters: {0}")]
    InvalidParams(String),

    #[error("non-finite potential at iteration {iteration}")]
    NonFinitePotential { iteration: u32 },

    #[error("no transported mass from the requested source pixels")]
    EmptyTransfer,

    #[error("source pixel index {index} out of range for {len} points")]
    SourceIndexOutOfRange { index: usize, len: usize },

    #[error("no reference candidates")]
    NoCandidates,

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid reference pack: {0}")]
    InvalidReferencePack(String),

    #[error("forced text must be nonempty")]
    EmptyForcedText,

    #[error("attribute must be nonempty")]
    EmptyAttribute,

    #[error("service {endpoint} failed: {reason}")]
    Service { endpoint: String, reason: String },

    #[error("service reply violates the wire contract: {0}")]
    ServiceContract(String),

    #[error("tokenization mismatch at index {index}: {original:?} vs {perturbed:?}")]
    TokenMismatch {
        index: usize,
        original: String,
        perturbed: String,
    },

    #[error("sequences have {original} and {perturbed} tokens")]
    SequenceLengthMismatch { original: usize, perturbed: usize },

    #[error("while handling concept {concept}: {source}")]
    Concept {
        concept: String,
        #[source]
        source: Box<Error>,
    },

    #[error("patch size {patch} does not divide {width}x{height}")]
    PatchSize { patch: u32, width: u32, height: u32 },

    #[error("saliency map contains non-finite values")]
    NonFiniteSaliency,

    #[error("sample {0} has no ground-truth boxes; not evaluable")]
    Unevaluable(String),

    #[error("prediction references unknown sample id {0}")]
    UnknownSampleId(String),

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("sample {sample_id} has no ground-truth boxes")]
    MissingGtBoxes { sample_id: String },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Wrap an error with the concept it occurred for.
    pub fn for_concept(self, concept: &str) -> Error {
        Error::Concept {
            concept: concept.to_string(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Error {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
