//! medfocus: concept-level causal attribution for vision-language models.
//!
//! The crate localizes named concepts in a grayscale image by transferring
//! annotated reference masks through unbalanced optimal transport, then
//! measures each concept's causal effect on a model's output by zero-masking
//! its bounding box and scoring the original output sequence under teacher
//! forcing. It also ships the perturbation baselines (occlusion, randomized
//! masking), the box-overlap evaluation harness, and the counterfactual
//! benchmark-filtering pipeline, all wired to external services through small
//! HTTP+JSON protocols with deterministic in-process stand-ins for offline
//! runs.
//!
//! Module map:
//! - [`image`], [`geometry`], [`samples`]: pixel data, boxes, masks, file I/O
//! - [`transport`]: entropic unbalanced OT solver and dense-core transfer
//! - [`concepts`]: vocabulary, reference packs, concept transfer + refinement
//! - [`scoring`]: counterfactuals, log-probability drops, attribution
//! - [`baselines`]: occlusion / randomized-mask saliency and box conversion
//! - [`eval`]: union-region IoU / precision / recall / F1 harness
//! - [`benchbuild`]: question templating and the three-step causal filter
//! - [`services`]: service traits, wire schemas, HTTP clients
//! - [`testkit`]: deterministic mocks, synthetic fixtures, test oracles

pub mod baselines;
pub mod benchbuild;
pub mod concepts;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod samples;
pub mod scoring;
pub mod services;
pub mod testkit;
pub mod transport;

pub use error::{Error, Result};
pub use geometry::{mask_to_bbox, union_pixel_count, BBox, Mask};
pub use image::{load_image, save_image, GrayImage};
pub use samples::{Answer, Counterfactual, Mode, VqaSample};

/// Working resolution every pipeline stage operates at, in pixels.
pub const WORKING_RESOLUTION: (u32, u32) = (224, 224);
