//! Loopback HTTP server exposing in-process services over the production
//! wire schemas, for integration tests of the HTTP clients.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::services::{
    image_from_b64, image_to_b64, mask_from_b64, mask_to_b64, EditRequest, EditorService,
    GenerateRequest, RefineOutcome, RefineRequest, RefinerService, ScoreRequest, ScoringService,
};

/// The three in-process services a loopback server mounts.
pub struct LoopbackServices {
    pub model: Arc<dyn ScoringService>,
    pub editor: Arc<dyn EditorService>,
    pub refiner: Arc<dyn RefinerService>,
}

/// A loopback HTTP server serving `/generate`, `/score`, `/edit`, `/refine`.
/// Shuts down when dropped.
pub struct LoopbackServer {
    base_url: String,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl LoopbackServer {
    pub fn start(services: LoopbackServices) -> Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(|e| Error::Service {
            endpoint: "loopback".to_string(),
            reason: e.to_string(),
        })?;
        let port = match server.server_addr() {
            tiny_http::ListenAddr::IP(addr) => addr.port(),
            _ => unreachable!("tcp listener"),
        };
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = stop.clone();
        let handle = std::thread::spawn(move || {
            while !stop_flag.load(Ordering::Relaxed) {
                match server.recv_timeout(Duration::from_millis(20)) {
                    Ok(Some(request)) => handle_request(request, &services),
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
        });
        Ok(LoopbackServer {
            base_url: format!("http://127.0.0.1:{port}"),
            stop,
            handle: Some(handle),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }
}

impl Drop for LoopbackServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_request(mut request: tiny_http::Request, services: &LoopbackServices) {
    let mut body = String::new();
    if request.as_reader().read_to_string(&mut body).is_err() {
        respond(request, 400, r#"{"error":"unreadable body"}"#.to_string());
        return;
    }
    let url = request.url().to_string();
    let (status, reply) = match dispatch(&url, &body, services) {
        Ok(json) => (200, json),
        Err(e) => (
            500,
            serde_json::json!({ "error": e.to_string() }).to_string(),
        ),
    };
    respond(request, status, reply);
}

fn respond(request: tiny_http::Request, status: u16, body: String) {
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
        .expect("static header");
    let response = tiny_http::Response::from_string(body)
        .with_status_code(status)
        .with_header(header);
    let _ = request.respond(response);
}

fn dispatch(url: &str, body: &str, services: &LoopbackServices) -> Result<String> {
    let parse = |what: &str, e: serde_json::Error| Error::json(what.to_string(), e);
    match url {
        "/generate" => {
            let req: GenerateRequest =
                serde_json::from_str(body).map_err(|e| parse("generate request", e))?;
            let image = image_from_b64(&req.image_b64)?;
            let text = services.model.generate(&image, &req.question, req.mode)?;
            Ok(serde_json::json!({ "text": text }).to_string())
        }
        "/score" => {
            let req: ScoreRequest =
                serde_json::from_str(body).map_err(|e| parse("score request", e))?;
            let image = image_from_b64(&req.image_b64)?;
            let scored = services
                .model
                .score(&image, &req.question, &req.forced_text)?;
            Ok(serde_json::json!({
                "tokens": scored.tokens(),
                "logprobs": scored.logprobs(),
            })
            .to_string())
        }
        "/edit" => {
            let req: EditRequest =
                serde_json::from_str(body).map_err(|e| parse("edit request", e))?;
            let image = image_from_b64(&req.image_b64)?;
            let mask = mask_from_b64(&req.mask_b64)?;
            let edited = services.editor.edit(&image, &mask, &req.prompt)?;
            Ok(serde_json::json!({ "image_b64": image_to_b64(&edited) }).to_string())
        }
        "/refine" => {
            let req: RefineRequest =
                serde_json::from_str(body).map_err(|e| parse("refine request", e))?;
            let image = image_from_b64(&req.image_b64)?;
            match services.refiner.refine(&image, req.bbox)? {
                RefineOutcome::Mask(mask) => {
                    Ok(serde_json::json!({ "mask_b64": mask_to_b64(&mask) }).to_string())
                }
                RefineOutcome::Declined(reason) => {
                    Ok(serde_json::json!({ "error": reason }).to_string())
                }
            }
        }
        other => Err(Error::Service {
            endpoint: other.to_string(),
            reason: "unknown endpoint".to_string(),
        }),
    }
}
