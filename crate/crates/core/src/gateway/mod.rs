//! Uniform backend interface for multimodal judging and detection.
//!
//! One HTTP adapter covers hosted models; two deterministic mock backends
//! (`mock-perfect`, `mock-noisy`) answer from the corruption answer key so
//! the whole pipeline is testable offline. Switching a run between a hosted
//! model and a mock is a configuration change, not a code change.

mod http;
mod mock;
pub mod schema;
pub mod tokens;

pub use http::{HttpBackend, Transport, TransportReply, UreqTransport, API_KEY_ENV};
pub use schema::{parse_structured_response, BoxQaReply, ParseError, ParsedPayload, RawClaim, RawDetection};

use crate::corruption::InjectionLog;
use crate::grounding::PromptBundle;
use crate::model::{Dataset, DetectionSet, Diagram};
use serde::{Deserialize, Serialize};

/// Which backend a [`ModelConfig`] selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Http,
    MockPerfect,
    MockNoisy,
}

/// Noise applied by the `mock-noisy` backend on top of the answer key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseProfile {
    /// Probability a truly missed symbol is claimed.
    pub claim_detect_prob: f64,
    /// Expected spurious claims per tile (Poisson).
    pub spurious_claim_rate: f64,
    /// Probability each box-QA answer is flipped or corrupted.
    pub verdict_flip_prob: f64,
    /// Positional noise on claimed boxes, as a fraction of box dimensions.
    pub jitter_frac: f64,
    pub seed: u64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self {
            claim_detect_prob: 1.0,
            spurious_claim_rate: 0.0,
            verdict_flip_prob: 0.0,
            jitter_frac: 0.0,
            seed: 0,
        }
    }
}

impl NoiseProfile {
    pub fn validate(&self) -> Result<(), GatewayError> {
        for (name, v) in [
            ("claim_detect_prob", self.claim_detect_prob),
            ("verdict_flip_prob", self.verdict_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(GatewayError::InvalidConfig(format!(
                    "{name} must be in [0,1], got {v}"
                )));
            }
        }
        for (name, v) in [
            ("spurious_claim_rate", self.spurious_claim_rate),
            ("jitter_frac", self.jitter_frac),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(GatewayError::InvalidConfig(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Backend selection plus request parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backend: BackendKind,
    /// Chat-completion endpoint; required for the http backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default = "default_model_name")]
    pub model_name: String,
    /// Sampling temperature; 0 keeps judging as reproducible as the backend
    /// allows.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    /// Noise profile for the mock-noisy backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseProfile>,
}

fn default_model_name() -> String {
    "mock".to_string()
}
fn default_max_output_tokens() -> u32 {
    1024
}
fn default_max_retries() -> u32 {
    3
}
fn default_timeout_secs() -> f64 {
    60.0
}
fn default_max_concurrency() -> usize {
    4
}

impl ModelConfig {
    /// A mock-perfect config, the default for offline runs and tests.
    pub fn mock_perfect() -> Self {
        Self {
            backend: BackendKind::MockPerfect,
            endpoint_url: None,
            model_name: "mock-perfect".into(),
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            max_retries: default_max_retries(),
            timeout_secs: default_timeout_secs(),
            max_concurrency: default_max_concurrency(),
            noise: None,
        }
    }

    pub fn mock_noisy(profile: NoiseProfile) -> Self {
        Self {
            backend: BackendKind::MockNoisy,
            model_name: "mock-noisy".into(),
            noise: Some(profile),
            ..Self::mock_perfect()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(GatewayError::InvalidConfig(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_concurrency < 1 {
            return Err(GatewayError::InvalidConfig(
                "max_concurrency must be >= 1".into(),
            ));
        }
        if self.backend == BackendKind::Http && self.endpoint_url.is_none() {
            return Err(GatewayError::InvalidConfig(
                "http backend requires endpoint_url".into(),
            ));
        }
        if let Some(noise) = &self.noise {
            noise.validate()?;
        }
        Ok(())
    }
}

/// Input/output token counts for one response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: Self) {
        self.input_tokens += rhs.input_tokens;
        self.output_tokens += rhs.output_tokens;
    }
}

/// One model reply: raw text, the schema-validated payload when the text
/// contained one, and token accounting (from the provider when reported,
/// estimated otherwise).
#[derive(Debug, Clone)]
pub struct VlmResponse {
    pub raw_text: String,
    pub parsed: Option<ParsedPayload>,
    pub token_usage: TokenUsage,
}

/// Ground truth and answer key handed to mock backends.
///
/// `tightness_iou` is the oracle rule for the box-QA "tight" answer: a
/// detection is tight iff its IoU with the originating GT box reaches this
/// threshold (default 0.75).
#[derive(Clone, Copy)]
pub struct OracleContext<'a> {
    pub diagram: &'a Diagram,
    pub log: &'a InjectionLog,
    pub detections: Option<&'a DetectionSet>,
    pub classes: &'a [String],
    pub tightness_iou: f64,
}

pub const DEFAULT_TIGHTNESS_IOU: f64 = 0.75;

impl<'a> OracleContext<'a> {
    pub fn new(dataset: &'a Dataset, diagram: &'a Diagram, log: &'a InjectionLog) -> Self {
        Self {
            diagram,
            log,
            detections: None,
            classes: &dataset.classes,
            tightness_iou: DEFAULT_TIGHTNESS_IOU,
        }
    }

    pub fn with_detections(mut self, detections: &'a DetectionSet) -> Self {
        self.detections = Some(detections);
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("mock backend requires an oracle context: {detail}")]
    MissingOracleContext { detail: String },
    #[error("[{key}] transport failed after {attempts} attempts: {detail}")]
    Transport {
        key: String,
        attempts: u32,
        detail: String,
    },
    #[error("[{key}] backend returned HTTP {status}: {detail}")]
    Http {
        key: String,
        status: u16,
        detail: String,
    },
    #[error("[{key}] malformed provider response: {detail}")]
    Provider { key: String, detail: String },
    #[error("[{key}] image encoding failed: {detail}")]
    ImageEncode { key: String, detail: String },
}

/// A ready-to-call backend.
pub enum Backend {
    Http(HttpBackend),
    MockPerfect,
    MockNoisy(NoiseProfile),
}

impl Backend {
    pub fn from_config(config: &ModelConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        match config.backend {
            BackendKind::Http => Ok(Backend::Http(HttpBackend::from_config(config)?)),
            BackendKind::MockPerfect => Ok(Backend::MockPerfect),
            BackendKind::MockNoisy => Ok(Backend::MockNoisy(config.noise.unwrap_or_default())),
        }
    }

    /// True when `complete` needs an [`OracleContext`].
    pub fn requires_oracle(&self) -> bool {
        !matches!(self, Backend::Http(_))
    }

    /// Issues one multimodal completion. Mock replies are rendered to text
    /// and run through the real response parser, so the parse path is
    /// exercised on every call.
    pub fn complete(
        &self,
        bundle: &PromptBundle,
        ctx: Option<&OracleContext>,
    ) -> Result<VlmResponse, GatewayError> {
        match self {
            Backend::Http(backend) => backend.complete(bundle),
            Backend::MockPerfect | Backend::MockNoisy(_) => {
                let ctx = ctx.ok_or_else(|| GatewayError::MissingOracleContext {
                    detail: format!("backend call for {}", bundle.key()),
                })?;
                let payload = match self {
                    Backend::MockPerfect => mock::perfect_payload(bundle, ctx)?,
                    Backend::MockNoisy(profile) => mock::noisy_payload(bundle, ctx, profile)?,
                    Backend::Http(_) => unreachable!(),
                };
                let raw_text = schema::render_payload(&payload);
                let parsed = parse_structured_response(&raw_text, &bundle.schema).ok();
                debug_assert!(parsed.is_some(), "mock reply must parse against its schema");
                let input_tokens = tokens::bundle_input_tokens(bundle);
                let output_tokens = tokens::text_tokens(&raw_text);
                Ok(VlmResponse {
                    raw_text,
                    parsed,
                    token_usage: TokenUsage {
                        input_tokens,
                        output_tokens,
                    },
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::ResponseSchema;
    use crate::imaging::TileIndex;
    use crate::model::{BoundingBox, DetectionRecord, Provenance, SymbolAnnotation};
    use image::{Rgb, RgbImage};
    use std::sync::atomic::{AtomicIsize, AtomicU32, Ordering};
    use std::time::Duration;

    fn bb(x: u32, y: u32, w: u32, h: u32) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn diagram_with_symbols(n: usize) -> Diagram {
        let mut symbols = Vec::new();
        for i in 0..n {
            let col = (i % 25) as u32;
            let row = (i / 25) as u32;
            symbols.push(SymbolAnnotation {
                id: format!("s{i:04}"),
                class_label: if i % 2 == 0 { "valve".into() } else { "pump".into() },
                bbox: bb(10 + col * 40, 10 + row * 40, 24, 20),
                tag: Some(format!("WX-{i:05}")),
            });
        }
        Diagram {
            id: "diag".into(),
            image: "diag.png".into(),
            width: 1024,
            height: 40 * (n as u32).div_ceil(25) + 40,
            symbols,
        }
    }

    fn classes() -> Vec<String> {
        vec!["valve".into(), "pump".into()]
    }

    fn empty_log(diagram_id: &str) -> InjectionLog {
        InjectionLog {
            diagram_id: diagram_id.into(),
            omitted: vec![],
            perturbed: vec![],
            false_positives: vec![],
            class_swapped: vec![],
        }
    }

    fn judge_bundle(diagram: &Diagram) -> PromptBundle {
        let window = bb(0, 0, diagram.width, diagram.height);
        PromptBundle {
            diagram_id: diagram.id.clone(),
            tile_index: Some(TileIndex { row: 0, col: 0 }),
            target_id: None,
            window,
            images: vec![RgbImage::from_pixel(64, 64, Rgb([255, 255, 255]))],
            text: "find missing symbols".into(),
            schema: ResponseSchema::MissingJudge {
                tile_w: window.w,
                tile_h: window.h,
            },
        }
    }

    #[test]
    fn mock_perfect_claims_exactly_the_omitted_symbols() {
        let diagram = diagram_with_symbols(10);
        let mut log = empty_log("diag");
        log.omitted = vec!["s0002".into(), "s0005".into()];
        let classes = classes();
        let ctx = OracleContext {
            diagram: &diagram,
            log: &log,
            detections: None,
            classes: &classes,
            tightness_iou: DEFAULT_TIGHTNESS_IOU,
        };
        let response = Backend::MockPerfect
            .complete(&judge_bundle(&diagram), Some(&ctx))
            .unwrap();
        match response.parsed.expect("mock reply parses") {
            ParsedPayload::Claims(claims) => {
                assert_eq!(claims.len(), 2);
                assert_eq!(claims[0].bbox, diagram.symbol("s0002").unwrap().bbox);
                assert_eq!(claims[1].bbox, diagram.symbol("s0005").unwrap().bbox);
                assert_eq!(claims[0].class.as_deref(), Some("valve"));
            }
            other => panic!("wrong payload {other:?}"),
        }
        assert!(response.token_usage.input_tokens > 0);
    }

    #[test]
    fn mock_backends_are_deterministic() {
        let diagram = diagram_with_symbols(50);
        let mut log = empty_log("diag");
        log.omitted = (0..20).map(|i| format!("s{i:04}")).collect();
        let classes = classes();
        let ctx = OracleContext {
            diagram: &diagram,
            log: &log,
            detections: None,
            classes: &classes,
            tightness_iou: DEFAULT_TIGHTNESS_IOU,
        };
        let profile = NoiseProfile {
            claim_detect_prob: 0.7,
            spurious_claim_rate: 1.5,
            jitter_frac: 0.1,
            seed: 99,
            ..NoiseProfile::default()
        };
        let backend = Backend::MockNoisy(profile);
        let bundle = judge_bundle(&diagram);
        let a = backend.complete(&bundle, Some(&ctx)).unwrap();
        let b = backend.complete(&bundle, Some(&ctx)).unwrap();
        assert_eq!(a.raw_text, b.raw_text);
    }

    #[test]
    fn mock_noisy_with_zero_detect_prob_claims_nothing_true() {
        let diagram = diagram_with_symbols(30);
        let mut log = empty_log("diag");
        log.omitted = (0..30).map(|i| format!("s{i:04}")).collect();
        let classes = classes();
        let ctx = OracleContext {
            diagram: &diagram,
            log: &log,
            detections: None,
            classes: &classes,
            tightness_iou: DEFAULT_TIGHTNESS_IOU,
        };
        let profile = NoiseProfile {
            claim_detect_prob: 0.0,
            seed: 5,
            ..NoiseProfile::default()
        };
        let response = Backend::MockNoisy(profile)
            .complete(&judge_bundle(&diagram), Some(&ctx))
            .unwrap();
        match response.parsed.unwrap() {
            ParsedPayload::Claims(claims) => assert!(claims.is_empty()),
            other => panic!("wrong payload {other:?}"),
        }
    }

    #[test]
    fn mock_noisy_claim_rate_tracks_detect_prob() {
        // Monte Carlo over 600 missed symbols: empirical rate 0.85 +/- 0.05.
        let diagram = diagram_with_symbols(600);
        let mut log = empty_log("diag");
        log.omitted = (0..600).map(|i| format!("s{i:04}")).collect();
        let classes = classes();
        let ctx = OracleContext {
            diagram: &diagram,
            log: &log,
            detections: None,
            classes: &classes,
            tightness_iou: DEFAULT_TIGHTNESS_IOU,
        };
        let profile = NoiseProfile {
            claim_detect_prob: 0.85,
            seed: 11,
            ..NoiseProfile::default()
        };
        let response = Backend::MockNoisy(profile)
            .complete(&judge_bundle(&diagram), Some(&ctx))
            .unwrap();
        let claimed = match response.parsed.unwrap() {
            ParsedPayload::Claims(claims) => claims.len(),
            other => panic!("wrong payload {other:?}"),
        };
        let rate = claimed as f64 / 600.0;
        assert!((0.80..=0.90).contains(&rate), "rate {rate} outside band");
    }

    #[test]
    fn mock_box_qa_verdicts_follow_answer_key() {
        let diagram = diagram_with_symbols(4);
        let mut log = empty_log("diag");
        log.false_positives = vec!["fp_0000".into()];
        let mut detections = vec![];
        for s in &diagram.symbols {
            detections.push(DetectionRecord {
                id: s.id.clone(),
                class_label: s.class_label.clone(),
                bbox: s.bbox,
                score: 0.9,
                provenance: Provenance::Base,
            });
        }
        // Offset copy of s0000's box far enough to break tightness.
        detections[0].bbox = bb(
            detections[0].bbox.x + 15,
            detections[0].bbox.y,
            detections[0].bbox.w,
            detections[0].bbox.h,
        );
        detections.push(DetectionRecord {
            id: "fp_0000".into(),
            class_label: "valve".into(),
            bbox: bb(500, 5, 24, 20),
            score: 0.8,
            provenance: Provenance::Base,
        });
        let set = DetectionSet {
            diagram_id: "diag".into(),
            detections,
        };
        let classes = classes();
        let ctx = OracleContext {
            diagram: &diagram,
            log: &log,
            detections: Some(&set),
            classes: &classes,
            tightness_iou: DEFAULT_TIGHTNESS_IOU,
        };

        let ask = |target: &str| {
            let det = set.detection(target).unwrap();
            let bundle = PromptBundle {
                diagram_id: "diag".into(),
                tile_index: None,
                target_id: Some(target.into()),
                window: bb(0, 0, diagram.width, diagram.height),
                images: vec![RgbImage::from_pixel(32, 32, Rgb([255, 255, 255]))],
                text: format!("assess {}", det.id),
                schema: ResponseSchema::BoxQa { classes: classes.clone() },
            };
            match Backend::MockPerfect.complete(&bundle, Some(&ctx)).unwrap().parsed.unwrap() {
                ParsedPayload::BoxQa(reply) => reply,
                other => panic!("wrong payload {other:?}"),
            }
        };

        let fp = ask("fp_0000");
        assert!(!fp.valid);
        let offset = ask("s0000");
        assert!(offset.valid && !offset.tight);
        let untouched = ask("s0001");
        assert!(untouched.valid && untouched.tight);
        assert_eq!(untouched.class, "pump");
    }

    struct ScriptedTransport {
        replies: Vec<Result<TransportReply, String>>,
        cursor: AtomicU32,
    }

    impl Transport for ScriptedTransport {
        fn post_json(
            &self,
            _url: &str,
            _bearer: Option<&str>,
            _body: &serde_json::Value,
            _timeout: Duration,
        ) -> Result<TransportReply, String> {
            let idx = self.cursor.fetch_add(1, Ordering::SeqCst) as usize;
            self.replies[idx.min(self.replies.len() - 1)].clone()
        }
    }

    fn http_config() -> ModelConfig {
        ModelConfig {
            backend: BackendKind::Http,
            endpoint_url: Some("http://localhost:9/v1/chat/completions".into()),
            model_name: "test-model".into(),
            max_retries: 2,
            ..ModelConfig::mock_perfect()
        }
    }

    fn ok_reply(content: &str, usage: bool) -> TransportReply {
        let mut body = serde_json::json!({
            "choices": [ { "message": { "content": content } } ]
        });
        if usage {
            body["usage"] = serde_json::json!({"prompt_tokens": 321, "completion_tokens": 45});
        }
        TransportReply { status: 200, body: body.to_string() }
    }

    #[test]
    fn http_backend_parses_reply_and_usage() {
        let diagram = diagram_with_symbols(1);
        let transport = ScriptedTransport {
            replies: vec![Ok(ok_reply("```json\n{\"claims\": []}\n```", true))],
            cursor: AtomicU32::new(0),
        };
        let backend = HttpBackend::with_transport(&http_config(), Box::new(transport)).unwrap();
        let response = backend.complete(&judge_bundle(&diagram)).unwrap();
        assert_eq!(response.token_usage.input_tokens, 321);
        assert_eq!(response.token_usage.output_tokens, 45);
        assert!(matches!(response.parsed, Some(ParsedPayload::Claims(ref c)) if c.is_empty()));
    }

    #[test]
    fn http_backend_retries_transient_failures() {
        let diagram = diagram_with_symbols(1);
        let transport = ScriptedTransport {
            replies: vec![
                Err("connection refused".into()),
                Ok(TransportReply { status: 503, body: "busy".into() }),
                Ok(ok_reply("{\"claims\": []}", false)),
            ],
            cursor: AtomicU32::new(0),
        };
        let mut backend = HttpBackend::with_transport(&http_config(), Box::new(transport)).unwrap();
        backend.set_backoff_base(Duration::from_millis(1));
        let response = backend.complete(&judge_bundle(&diagram)).unwrap();
        assert!(response.parsed.is_some());
        // Estimated usage: 64x64 image = 4x4 patches, 20-byte text = 5 tokens.
        assert_eq!(response.token_usage.input_tokens, 16 + 5);
    }

    #[test]
    fn http_backend_fails_fast_on_client_error() {
        let diagram = diagram_with_symbols(1);
        let transport = ScriptedTransport {
            replies: vec![Ok(TransportReply { status: 401, body: "no auth".into() })],
            cursor: AtomicU32::new(0),
        };
        let backend = HttpBackend::with_transport(&http_config(), Box::new(transport)).unwrap();
        match backend.complete(&judge_bundle(&diagram)) {
            Err(GatewayError::Http { status: 401, key, .. }) => {
                assert!(key.contains("diag"), "error keyed by tile: {key}");
            }
            other => panic!("expected 401 error, got {other:?}"),
        }
    }

    #[test]
    fn unparseable_reply_yields_none_parsed() {
        let diagram = diagram_with_symbols(1);
        let transport = ScriptedTransport {
            replies: vec![Ok(ok_reply("I see nothing missing.", false))],
            cursor: AtomicU32::new(0),
        };
        let backend = HttpBackend::with_transport(&http_config(), Box::new(transport)).unwrap();
        let response = backend.complete(&judge_bundle(&diagram)).unwrap();
        assert!(response.parsed.is_none());
        assert_eq!(response.raw_text, "I see nothing missing.");
    }

    #[test]
    fn in_flight_requests_respect_max_concurrency() {
        struct CountingTransport {
            in_flight: AtomicIsize,
            peak: AtomicIsize,
        }
        impl Transport for CountingTransport {
            fn post_json(
                &self,
                _url: &str,
                _bearer: Option<&str>,
                _body: &serde_json::Value,
                _timeout: Duration,
            ) -> Result<TransportReply, String> {
                let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(3));
                self.in_flight.fetch_sub(1, Ordering::SeqCst);
                Ok(ok_reply("{\"claims\": []}", false))
            }
        }

        let diagram = diagram_with_symbols(1);
        let config = ModelConfig { max_concurrency: 3, ..http_config() };
        let transport = Box::leak(Box::new(CountingTransport {
            in_flight: AtomicIsize::new(0),
            peak: AtomicIsize::new(0),
        }));
        struct Shim<'a>(&'a CountingTransport);
        impl Transport for Shim<'static> {
            fn post_json(
                &self,
                url: &str,
                bearer: Option<&str>,
                body: &serde_json::Value,
                timeout: Duration,
            ) -> Result<TransportReply, String> {
                self.0.post_json(url, bearer, body, timeout)
            }
        }
        let backend = HttpBackend::with_transport(&config, Box::new(Shim(transport))).unwrap();
        let bundles: Vec<PromptBundle> = (0..24).map(|_| judge_bundle(&diagram)).collect();
        let results = crate::parallel::run_bounded(&bundles, config.max_concurrency, |_, b| {
            backend.complete(b).map(|r| r.parsed.is_some())
        });
        assert!(results.iter().all(|r| matches!(r, Ok(true))));
        let peak = transport.peak.load(Ordering::SeqCst);
        assert!(peak <= 3, "peak in-flight {peak} exceeded max_concurrency");
    }
}
