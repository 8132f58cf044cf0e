//! External service contracts and their HTTP + JSON clients.
//!
//! Three services back the pipeline, all speaking JSON over HTTP POST with
//! images exchanged as base64-encoded binary PGM:
//!
//! - scoring model: `/generate` (greedy decode) and `/score` (teacher-forced
//!   per-token log-probabilities of a fixed output)
//! - editor: `/edit` (inpaint a masked region under a text prompt)
//! - mask refiner: `/refine` (box prompt to segmentation mask)
//!
//! [`crate::testkit`] provides deterministic in-process implementations of
//! every trait plus a loopback HTTP server speaking these exact schemas.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::image::{decode_pgm, encode_pgm, GrayImage};
use crate::samples::Mode;
use crate::scoring::ScoredSequence;

/// Teacher-forced scoring and greedy generation.
pub trait ScoringService: Send + Sync {
    /// Deterministic (greedy) decode for an image/question pair.
    fn generate(&self, image: &GrayImage, question: &str, mode: Mode) -> Result<String>;

    /// Per-token log-probabilities of `forced_text` under teacher forcing.
    fn score(&self, image: &GrayImage, question: &str, forced_text: &str)
        -> Result<ScoredSequence>;
}

/// Counterfactual image editing: rewrite the masked region per the prompt.
pub trait EditorService: Send + Sync {
    fn edit(&self, image: &GrayImage, mask: &Mask, prompt: &str) -> Result<GrayImage>;
}

/// Outcome of a refinement request that reached the service.
#[derive(Debug, Clone)]
pub enum RefineOutcome {
    Mask(Mask),
    /// The service answered but declined to produce a mask.
    Declined(String),
}

/// Box-prompted mask refinement.
pub trait RefinerService: Send + Sync {
    fn refine(&self, image: &GrayImage, bbox: BBox) -> Result<RefineOutcome>;
}

// Wire schemas.

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub image_b64: String,
    pub question: String,
    pub mode: Mode,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateReply {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub image_b64: String,
    pub question: String,
    pub forced_text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreReply {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditRequest {
    pub image_b64: String,
    pub mask_b64: String,
    pub prompt: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditReply {
    pub image_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RefineRequest {
    pub image_b64: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Serialize, Deserialize, Default)]
pub struct RefineReply {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_b64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn image_to_b64(img: &GrayImage) -> String {
    BASE64.encode(encode_pgm(img))
}

pub fn image_from_b64(b64: &str) -> Result<GrayImage> {
    let bytes = BASE64
        .decode(b64)
        .map_err(|e| Error::ServiceContract(format!("invalid base64 image: {e}")))?;
    decode_pgm(&bytes)
}

pub fn mask_to_b64(mask: &Mask) -> String {
    image_to_b64(&mask.to_image())
}

pub fn mask_from_b64(b64: &str) -> Result<Mask> {
    Ok(Mask::from_image(&image_from_b64(b64)?))
}

/// HTTP client for all three service roles; which endpoints exist depends on
/// what the base URL serves.
#[derive(Clone)]
pub struct HttpService {
    agent: ureq::Agent,
    base: String,
}

impl HttpService {
    pub fn new(base_url: &str) -> Self {
        let config = ureq::config::Config::builder()
            .timeout_global(Some(std::time::Duration::from_secs(300)))
            .build();
        HttpService {
            agent: config.new_agent(),
            base: base_url.trim_end_matches('/').to_string(),
        }
    }

    fn post<Req: Serialize, Rep: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        req: &Req,
    ) -> Result<Rep> {
        let url = format!("{}{}", self.base, path);
        let fail = |reason: String| Error::Service {
            endpoint: url.clone(),
            reason,
        };
        let mut resp = self
            .agent
            .post(&url)
            .send_json(req)
            .map_err(|e| fail(e.to_string()))?;
        resp.body_mut()
            .read_json::<Rep>()
            .map_err(|e| fail(format!("bad reply: {e}")))
    }
}

impl ScoringService for HttpService {
    fn generate(&self, image: &GrayImage, question: &str, mode: Mode) -> Result<String> {
        let reply: GenerateReply = self.post(
            "/generate",
            &GenerateRequest {
                image_b64: image_to_b64(image),
                question: question.to_string(),
                mode,
            },
        )?;
        Ok(reply.text)
    }

    fn score(
        &self,
        image: &GrayImage,
        question: &str,
        forced_text: &str,
    ) -> Result<ScoredSequence> {
        let reply: ScoreReply = self.post(
            "/score",
            &ScoreRequest {
                image_b64: image_to_b64(image),
                question: question.to_string(),
                forced_text: forced_text.to_string(),
            },
        )?;
        ScoredSequence::new(
            question.to_string(),
            forced_text.to_string(),
            reply.tokens,
            reply.logprobs,
        )
    }
}

impl EditorService for HttpService {
    fn edit(&self, image: &GrayImage, mask: &Mask, prompt: &str) -> Result<GrayImage> {
        let reply: EditReply = self.post(
            "/edit",
            &EditRequest {
                image_b64: image_to_b64(image),
                mask_b64: mask_to_b64(mask),
                prompt: prompt.to_string(),
            },
        )?;
        image_from_b64(&reply.image_b64)
    }
}

impl RefinerService for HttpService {
    fn refine(&self, image: &GrayImage, bbox: BBox) -> Result<RefineOutcome> {
        let reply: RefineReply = self.post(
            "/refine",
            &RefineRequest {
                image_b64: image_to_b64(image),
                bbox,
            },
        )?;
        match (reply.mask_b64, reply.error) {
            (Some(b64), _) => Ok(RefineOutcome::Mask(mask_from_b64(&b64)?)),
            (None, Some(err)) => Ok(RefineOutcome::Declined(err)),
            (None, None) => Err(Error::ServiceContract(
                "refine reply carries neither mask_b64 nor error".to_string(),
            )),
        }
    }
}

/// Apply `f` to every item with at most `cap` calls in flight, preserving
/// input order in the results regardless of completion order.
pub fn bounded_parallel_map<T, U, F>(items: &[T], cap: usize, f: F) -> Vec<Result<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    let cap = cap.max(1);
    if cap == 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<U>>>> =
        items.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..cap.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                *slots[i].lock().expect("result slot") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot lock").expect("slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn b64_image_round_trip() {
        let img = GrayImage::new(3, 2, vec![0, 50, 100, 150, 200, 255]).unwrap();
        assert_eq!(image_from_b64(&image_to_b64(&img)).unwrap(), img);
    }

    #[test]
    fn refine_request_schema_uses_box_key() {
        let req = RefineRequest {
            image_b64: "x".into(),
            bbox: BBox::new(1, 2, 3, 4).unwrap(),
        };
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(v["box"], serde_json::json!([1, 2, 3, 4]));
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u64> = (0..50).collect();
        let out = bounded_parallel_map(&items, 8, |&x| Ok::<u64, Error>(x * x));
        for (i, r) in out.iter().enumerate() {
            assert_eq!(*r.as_ref().unwrap(), (i * i) as u64);
        }
    }

    #[test]
    fn parallel_map_cap_one_is_sequential() {
        let items = vec![1, 2, 3];
        let out = bounded_parallel_map(&items, 1, |&x| Ok::<i32, Error>(x + 1));
        let vals: Vec<i32> = out.into_iter().map(|r| r.unwrap()).collect();
        assert_eq!(vals, vec![2, 3, 4]);
    }
}
