//! HTTP clients: a chat-completions VLM and the vision service shim.

use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::limits::{RetryPolicy, Semaphore, DEFAULT_CONCURRENCY};
use super::wire::{
    encode_image, rect_to_xyxy, DepthResponse, DetectRequest, DetectResponse, ImageRequest, OrientResponse,
    SegmentRequest, SegmentResponse,
};
use super::{
    ChatPart, ChatRequest, ChatResponse, ClientError, DepthEstimator, Detector, OrientationEstimator, RawDepth,
    ScoredBox, Segmenter, Vlm,
};
use crate::geometry::PixelMask;
use crate::raster::RgbImage;
use crate::scene::{PixelRect, Vec3};

pub const ENV_VLM_BASE_URL: &str = "APC_VLM_BASE_URL";
pub const ENV_VLM_API_KEY: &str = "APC_VLM_API_KEY";
pub const ENV_VLM_MODEL: &str = "APC_VLM_MODEL";
pub const ENV_VISION_BASE_URL: &str = "APC_VISION_BASE_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpSettings {
    pub timeout_secs: u64,
    pub concurrency: usize,
}

impl Default for HttpSettings {
    fn default() -> Self {
        Self {
            timeout_secs: 60,
            concurrency: DEFAULT_CONCURRENCY,
        }
    }
}

fn agent(settings: &HttpSettings) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(settings.timeout_secs)))
        .http_status_as_error(false)
        .build()
        .into()
}

fn post_json<T: DeserializeOwned>(
    agent: &ureq::Agent,
    url: &str,
    auth: Option<&str>,
    body: &impl Serialize,
) -> Result<T, ClientError> {
    let mut req = agent.post(url);
    if let Some(key) = auth {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req
        .send_json(body)
        .map_err(|e| ClientError::ServiceUnavailable(format!("{url}: {e}")))?;
    let status = resp.status().as_u16();
    if status == 429 || status >= 500 {
        return Err(ClientError::ServiceUnavailable(format!("{url}: HTTP {status}")));
    }
    if status >= 400 {
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        return Err(ClientError::InvalidRequest(format!("{url}: HTTP {status}: {text}")));
    }
    resp.body_mut()
        .with_config()
        .limit(256 * 1024 * 1024)
        .read_json()
        .map_err(|e| ClientError::BadResponse(format!("{url}: {e}")))
}

/// Chat-completions endpoint (`{base}/chat/completions`).
pub struct HttpVlm {
    base_url: String,
    api_key: Option<String>,
    model: String,
    agent: ureq::Agent,
    limit: Semaphore,
    retry: RetryPolicy,
}

impl HttpVlm {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model: impl Into<String>, settings: &HttpSettings) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            model: model.into(),
            agent: agent(settings),
            limit: Semaphore::new(settings.concurrency),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads the base URL, key and model name from the environment.
    pub fn from_env(settings: &HttpSettings) -> Result<Self, ClientError> {
        let base = std::env::var(ENV_VLM_BASE_URL)
            .map_err(|_| ClientError::InvalidRequest(format!("{ENV_VLM_BASE_URL} is not set")))?;
        let key = std::env::var(ENV_VLM_API_KEY).ok();
        let model = std::env::var(ENV_VLM_MODEL).unwrap_or_else(|_| "default".to_string());
        Ok(Self::new(base, key, model, settings))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn endpoint(&self) -> String {
        format!("{} ({})", self.base_url, self.model)
    }

    pub fn body(&self, request: &ChatRequest) -> Value {
        let content: Vec<Value> = request
            .parts
            .iter()
            .map(|p| match p {
                ChatPart::Text(t) => json!({"type": "text", "text": t}),
                ChatPart::Image(img) => {
                    let (_, mime) = img.encode_for_wire();
                    json!({"type": "image_url", "image_url": {"url": format!("data:{mime};base64,{}", encode_image(img))}})
                }
            })
            .collect();
        json!({
            "model": self.model,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "messages": [{"role": "user", "content": content}],
        })
    }
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u32>,
    completion_tokens: Option<u32>,
}

impl Vlm for HttpVlm {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let body = self.body(request);
        let url = format!("{}/chat/completions", self.base_url);
        let _permit = self.limit.acquire();
        let start = Instant::now();
        let c: Completion = self
            .retry
            .run(|| post_json(&self.agent, &url, self.api_key.as_deref(), &body))?;
        let text = c
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ClientError::BadResponse("completion has no message content".into()))?;
        Ok(ChatResponse {
            text,
            latency_ms: start.elapsed().as_millis() as u64,
            prompt_tokens: c.usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: c.usage.as_ref().and_then(|u| u.completion_tokens),
        })
    }
}

/// The four vision endpoints behind one base URL.
pub struct HttpVision {
    base_url: String,
    agent: ureq::Agent,
    limits: [Semaphore; 4],
    retry: RetryPolicy,
}

impl HttpVision {
    pub fn new(base_url: impl Into<String>, settings: &HttpSettings) -> Self {
        let n = settings.concurrency;
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent: agent(settings),
            limits: [Semaphore::new(n), Semaphore::new(n), Semaphore::new(n), Semaphore::new(n)],
            retry: RetryPolicy::default(),
        }
    }

    pub fn from_env(settings: &HttpSettings) -> Result<Self, ClientError> {
        let base = std::env::var(ENV_VISION_BASE_URL)
            .map_err(|_| ClientError::InvalidRequest(format!("{ENV_VISION_BASE_URL} is not set")))?;
        Ok(Self::new(base, settings))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn call<T: DeserializeOwned>(&self, slot: usize, path: &str, body: &impl Serialize) -> Result<T, ClientError> {
        let url = format!("{}/{path}", self.base_url);
        let _permit = self.limits[slot].acquire();
        self.retry.run(|| post_json(&self.agent, &url, None, body))
    }
}

impl Detector for HttpVision {
    fn detect(&self, image: &RgbImage, label: &str) -> Result<Vec<ScoredBox>, ClientError> {
        let body = DetectRequest {
            image_b64: encode_image(image),
            label: label.to_string(),
        };
        let r: DetectResponse = self.call(0, "detect", &body)?;
        r.into_boxes(label, image.width(), image.height())
    }
}

impl Segmenter for HttpVision {
    fn segment(&self, image: &RgbImage, rect: &PixelRect) -> Result<PixelMask, ClientError> {
        let body = SegmentRequest {
            image_b64: encode_image(image),
            bbox: rect_to_xyxy(rect),
        };
        let r: SegmentResponse = self.call(1, "segment", &body)?;
        r.into_mask(image.width(), image.height())
    }
}

impl DepthEstimator for HttpVision {
    fn depth(&self, image: &RgbImage) -> Result<RawDepth, ClientError> {
        let body = ImageRequest {
            image_b64: encode_image(image),
        };
        let r: DepthResponse = self.call(2, "depth", &body)?;
        let raw = r.into_raw()?;
        if raw.width != image.width() || raw.height != image.height() {
            return Err(ClientError::BadResponse(format!(
                "depth map is {}x{}, image is {}x{}",
                raw.width,
                raw.height,
                image.width(),
                image.height()
            )));
        }
        Ok(raw)
    }
}

impl OrientationEstimator for HttpVision {
    fn orient(&self, crop: &RgbImage) -> Result<Vec3, ClientError> {
        if crop.is_empty() {
            return Err(ClientError::InvalidRequest("empty crop".into()));
        }
        let body = ImageRequest {
            image_b64: encode_image(crop),
        };
        let r: OrientResponse = self.call(3, "orient", &body)?;
        r.into_direction()
    }
}
