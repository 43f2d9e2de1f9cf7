//! Interfaces to the VLM and the four vision services.
//!
//! Pipeline code never talks to a client directly; every call goes through a
//! [`Session`], which hashes the request, replays or performs it, and logs
//! it to the item's transcript.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PixelMask;
use crate::raster::RgbImage;
use crate::scene::{PixelRect, Vec3};

pub mod http;
pub mod limits;
pub mod oracle;
pub mod refine;
pub mod transcript;
pub mod wire;

pub use refine::{refine_detection, RefineSettings};
pub use transcript::{BlobSink, Caches, Entry, ReplayStore, Session, Transcript};

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "message", rename_all = "snake_case")]
pub enum ClientError {
    #[error("service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("segmentation mask is empty")]
    MaskEmpty,
    #[error("no detection for {0:?}")]
    NoDetection(String),
    #[error("no recorded response for {0}")]
    ReplayMiss(String),
    #[error("item deadline exceeded")]
    Timeout,
}

/// Pipeline stage tags used in transcripts and request hashes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Objects,
    Perspective,
    Detect,
    Refine,
    Segment,
    Depth,
    Orient,
    Abstraction,
    Rephrase,
    Transform,
    Shift,
    Normalize,
    Render,
    AbstractQuestion,
    Answer,
    Judge,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Objects => "objects",
            Stage::Perspective => "perspective",
            Stage::Detect => "detect",
            Stage::Refine => "refine",
            Stage::Segment => "segment",
            Stage::Depth => "depth",
            Stage::Orient => "orient",
            Stage::Abstraction => "abstraction",
            Stage::Rephrase => "rephrase",
            Stage::Transform => "transform",
            Stage::Shift => "shift",
            Stage::Normalize => "normalize",
            Stage::Render => "render",
            Stage::AbstractQuestion => "abstract_question",
            Stage::Answer => "answer",
            Stage::Judge => "judge",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChatPart {
    Text(String),
    Image(Arc<RgbImage>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub parts: Vec<ChatPart>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// Image first, then the prompt; temperature 0.
    pub fn new(prompt: impl Into<String>, image: Option<Arc<RgbImage>>, max_tokens: u32) -> Self {
        let mut parts = Vec::new();
        if let Some(img) = image {
            parts.push(ChatPart::Image(img));
        }
        parts.push(ChatPart::Text(prompt.into()));
        Self {
            parts,
            temperature: 0.0,
            max_tokens,
        }
    }

    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                ChatPart::Text(t) => Some(t.as_str()),
                ChatPart::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &RgbImage> {
        self.parts.iter().filter_map(|p| match p {
            ChatPart::Image(i) => Some(i.as_ref()),
            ChatPart::Text(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u32>,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub rect: PixelRect,
    pub confidence: f64,
    pub label: String,
}

/// Metric depth as returned by a depth service, before intrinsics are
/// attached.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDepth {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

pub trait Vlm: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError>;
}

pub trait Detector: Send + Sync {
    /// Candidates sorted by confidence, highest first.
    fn detect(&self, image: &RgbImage, label: &str) -> Result<Vec<ScoredBox>, ClientError>;
}

pub trait Segmenter: Send + Sync {
    /// Non-empty mask or [`ClientError::MaskEmpty`].
    fn segment(&self, image: &RgbImage, rect: &PixelRect) -> Result<PixelMask, ClientError>;
}

pub trait DepthEstimator: Send + Sync {
    fn depth(&self, image: &RgbImage) -> Result<RawDepth, ClientError>;
}

pub trait OrientationEstimator: Send + Sync {
    /// Unit frontal direction in the camera frame.
    fn orient(&self, crop: &RgbImage) -> Result<Vec3, ClientError>;
}

/// One client per service. The judge defaults to the answering VLM.
#[derive(Clone)]
pub struct Clients {
    pub vlm: Arc<dyn Vlm>,
    pub judge: Arc<dyn Vlm>,
    pub detector: Arc<dyn Detector>,
    pub segmenter: Arc<dyn Segmenter>,
    pub depth: Arc<dyn DepthEstimator>,
    pub orient: Arc<dyn OrientationEstimator>,
}

/// Sort candidates by confidence, highest first, ties kept in input order.
pub fn sort_by_confidence(boxes: &mut [ScoredBox]) {
    boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
}

/// A VLM that replays fixed replies in order (last one repeats). Handy in
/// tests and examples.
pub struct ScriptedVlm {
    replies: Vec<String>,
    next: std::sync::Mutex<usize>,
    seen: std::sync::Mutex<Vec<ChatRequest>>,
}

impl ScriptedVlm {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self {
            replies: replies.into_iter().map(Into::into).collect(),
            next: std::sync::Mutex::new(0),
            seen: std::sync::Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl Vlm for ScriptedVlm {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        self.seen.lock().unwrap().push(request.clone());
        let mut next = self.next.lock().unwrap();
        let reply = self
            .replies
            .get(*next)
            .or(self.replies.last())
            .cloned()
            .ok_or_else(|| ClientError::ServiceUnavailable("script is empty".into()))?;
        *next += 1;
        Ok(ChatResponse::text(reply))
    }
}
