//! Run configuration: JSON file, environment default, flag overrides, and
//! service construction (HTTP endpoints or the in-process "stub:" scheme).

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use medfocus::concepts::ConceptVocabulary;
use medfocus::geometry::BBox;
use medfocus::scoring::AttributionConfig;
use medfocus::services::{EditorService, HttpService, RefinerService, ScoringService};
use medfocus::testkit::{BoxFillRefiner, ConstantFillEditor, MockModel, MockModelSpec};
use medfocus::transport::UotParams;

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "MEDFOCUS_CONFIG";

/// Scheme selecting in-process testkit services instead of HTTP.
pub const STUB_SCHEME: &str = "stub:";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model_url: String,
    pub editor_url: String,
    pub refiner_url: String,
    pub vocab_path: Option<PathBuf>,
    pub refpack_path: Option<PathBuf>,
    pub uot: UotParams,
    pub attribution: AttributionConfig,
    pub in_flight_cap: usize,
    /// Master seed; seeded subsystems derive child seeds by stable labels.
    /// Unset means no randomness is available (the randomized-mask baseline
    /// then refuses to run).
    pub seed: Option<u64>,
    /// Mock model behavior when `model_url` uses the stub scheme.
    pub stub_model: Option<MockModelSpec>,
    /// Fill value of the stub editor when `editor_url` uses the stub scheme.
    pub stub_editor_fill: u8,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_url: STUB_SCHEME.to_string(),
            editor_url: STUB_SCHEME.to_string(),
            refiner_url: STUB_SCHEME.to_string(),
            vocab_path: None,
            refpack_path: None,
            uot: UotParams::default(),
            attribution: AttributionConfig::default(),
            in_flight_cap: 1,
            seed: None,
            stub_model: None,
            stub_editor_fill: 0,
        }
    }
}

/// Derive a subsystem seed from the master seed and a stable label
/// (FNV-1a over the label, folded into the master).
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &byte in label.as_bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    master ^ hash
}

/// Flags shared by every subcommand; any flag given overrides the matching
/// config-file value.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file (JSON); defaults to $MEDFOCUS_CONFIG when set.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub model_url: Option<String>,

    #[arg(long, global = true)]
    pub editor_url: Option<String>,

    #[arg(long, global = true)]
    pub refiner_url: Option<String>,

    /// Concept vocabulary JSON; the built-in 11-concept vocabulary if unset.
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,

    /// Reference pack directory.
    #[arg(long, global = true)]
    pub refpack: Option<PathBuf>,

    #[arg(long, global = true)]
    pub epsilon: Option<f64>,

    #[arg(long, global = true)]
    pub lambda1: Option<f64>,

    #[arg(long, global = true)]
    pub lambda2: Option<f64>,

    #[arg(long, global = true)]
    pub max_iters: Option<u32>,

    #[arg(long, global = true)]
    pub tol: Option<f64>,

    /// Relevance threshold for whole-image fallback.
    #[arg(long, global = true)]
    pub tau: Option<f64>,

    /// Max concurrent service calls.
    #[arg(long, global = true)]
    pub in_flight: Option<usize>,

    /// Master seed; subsystems derive child seeds from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    /// defaults < config file < flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let path = self
            .config
            .clone()
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        let mut cfg = match path {
            Some(path) => {
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = &self.model_url {
            cfg.model_url = v.clone();
        }
        if let Some(v) = &self.editor_url {
            cfg.editor_url = v.clone();
        }
        if let Some(v) = &self.refiner_url {
            cfg.refiner_url = v.clone();
        }
        if let Some(v) = &self.vocab {
            cfg.vocab_path = Some(v.clone());
        }
        if let Some(v) = &self.refpack {
            cfg.refpack_path = Some(v.clone());
        }
        if let Some(v) = self.epsilon {
            cfg.uot.epsilon = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.uot.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.uot.lambda2 = v;
        }
        if let Some(v) = self.max_iters {
            cfg.uot.max_iters = v;
        }
        if let Some(v) = self.tol {
            cfg.uot.tol = v;
        }
        if let Some(v) = self.tau {
            cfg.attribution.tau = v;
        }
        if let Some(v) = self.in_flight {
            cfg.in_flight_cap = v.max(1);
        }
        if let Some(v) = self.seed {
            cfg.seed = Some(v);
        }
        cfg.uot.validate()?;
        cfg.attribution.validate()?;
        Ok(cfg)
    }
}

/// Stub model used when `model_url` is `stub:` and no spec is configured:
/// evidence in the image center, answering by mean brightness.
fn default_stub_spec() -> MockModelSpec {
    MockModelSpec {
        evidence_box: BBox::new(56, 56, 168, 168).expect("static box"),
        baseline_intensity: 128.0,
        sensitivity: 0.02,
        floor: -0.1,
        canned_answer: "{answer}".to_string(),
        answer_threshold: 100.0,
    }
}

impl RunConfig {
    pub fn scoring_service(&self) -> Arc<dyn ScoringService> {
        if self.model_url.starts_with(STUB_SCHEME) {
            let spec = self.stub_model.clone().unwrap_or_else(default_stub_spec);
            Arc::new(MockModel::new(spec))
        } else {
            Arc::new(HttpService::new(&self.model_url))
        }
    }

    pub fn editor_service(&self) -> Arc<dyn EditorService> {
        if self.editor_url.starts_with(STUB_SCHEME) {
            Arc::new(ConstantFillEditor {
                fill: self.stub_editor_fill,
            })
        } else {
            Arc::new(HttpService::new(&self.editor_url))
        }
    }

    pub fn refiner_service(&self) -> Arc<dyn RefinerService> {
        if self.refiner_url.starts_with(STUB_SCHEME) {
            Arc::new(BoxFillRefiner)
        } else {
            Arc::new(HttpService::new(&self.refiner_url))
        }
    }

    pub fn vocabulary(&self) -> Result<ConceptVocabulary> {
        match &self.vocab_path {
            Some(path) => Ok(ConceptVocabulary::from_json_file(path)?),
            None => Ok(ConceptVocabulary::imagenome_default()),
        }
    }
}
