//! Per-item call log and record/replay.
//!
//! Requests are hashed over canonical JSON in which images are replaced by
//! their SHA-256 digest. Responses are stored in wire form (errors included),
//! so a replayed session decodes exactly what the live one decoded. Depth
//! maps are too large for the log and go to a content-addressed blob store.

use std::collections::HashMap;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::wire::{rect_to_xyxy, DetectResponse, MaskRle, OrientResponse, SegmentResponse};
use super::{ChatPart, ChatRequest, ClientError, Clients, RawDepth, ScoredBox, Stage};
use crate::geometry::{f32_from_le_bytes, PixelMask};
use crate::raster::RgbImage;
use crate::scene::{PixelRect, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Entry {
    Stage {
        stage: Stage,
    },
    Call {
        stage: Stage,
        endpoint: String,
        request_hash: String,
        response: Value,
        duration_ms: u64,
    },
    /// A depth map served from the run-wide cache.
    Cached {
        stage: Stage,
        request_hash: String,
    },
    Warning {
        stage: Stage,
        message: String,
    },
}

impl Entry {
    pub fn stage(&self) -> Stage {
        match self {
            Entry::Stage { stage }
            | Entry::Call { stage, .. }
            | Entry::Cached { stage, .. }
            | Entry::Warning { stage, .. } => *stage,
        }
    }
}

/// Append-only log of one item.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Transcript {
    entries: Vec<Entry>,
}

impl Transcript {
    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn push(&mut self, e: Entry) {
        self.entries.push(e);
    }

    pub fn extend(&mut self, other: Transcript) {
        self.entries.extend(other.entries);
    }

    pub fn calls(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(|e| matches!(e, Entry::Call { .. }))
    }

    pub fn warnings(&self) -> impl Iterator<Item = (Stage, &str)> {
        self.entries.iter().filter_map(|e| match e {
            Entry::Warning { stage, message } => Some((*stage, message.as_str())),
            _ => None,
        })
    }

    /// Stage tags in order, consecutive duplicates collapsed.
    pub fn stage_sequence(&self) -> Vec<Stage> {
        let mut out: Vec<Stage> = Vec::new();
        for e in &self.entries {
            if !matches!(e, Entry::Warning { .. }) && out.last() != Some(&e.stage()) {
                out.push(e.stage());
            }
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("entries serialize"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }
}

/// Content-addressed storage for depth maps.
pub trait BlobSink: Send + Sync {
    fn put(&self, digest: &str, depth: &RawDepth) -> std::io::Result<()>;
    fn get(&self, digest: &str) -> Option<RawDepth>;
}

#[derive(Debug, Default)]
pub struct MemBlobs(Mutex<HashMap<String, RawDepth>>);

impl BlobSink for MemBlobs {
    fn put(&self, digest: &str, depth: &RawDepth) -> std::io::Result<()> {
        self.0.lock().unwrap().insert(digest.to_string(), depth.clone());
        Ok(())
    }

    fn get(&self, digest: &str) -> Option<RawDepth> {
        self.0.lock().unwrap().get(digest).cloned()
    }
}

/// One `<digest>.dpth` file per map: "DPTH", u32 width, u32 height, u32 0,
/// then little-endian f32 values.
#[derive(Debug, Clone)]
pub struct DirBlobs {
    dir: PathBuf,
}

impl DirBlobs {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.dpth"))
    }
}

impl BlobSink for DirBlobs {
    fn put(&self, digest: &str, depth: &RawDepth) -> std::io::Result<()> {
        let path = self.path(digest);
        if path.exists() {
            return Ok(());
        }
        std::fs::create_dir_all(&self.dir)?;
        let mut bytes = Vec::with_capacity(16 + depth.values.len() * 4);
        bytes.extend_from_slice(b"DPTH");
        bytes.extend_from_slice(&depth.width.to_le_bytes());
        bytes.extend_from_slice(&depth.height.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        for v in &depth.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&bytes)?;
        std::fs::rename(tmp, path)
    }

    fn get(&self, digest: &str) -> Option<RawDepth> {
        let bytes = std::fs::read(self.path(digest)).ok()?;
        if bytes.len() < 16 || &bytes[..4] != b"DPTH" {
            return None;
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().ok()?);
        let height = u32::from_le_bytes(bytes[8..12].try_into().ok()?);
        let values = f32_from_le_bytes(&bytes[16..]);
        (values.len() == width as usize * height as usize).then_some(RawDepth { width, height, values })
    }
}

pub fn depth_digest(depth: &RawDepth) -> String {
    let mut h = Sha256::new();
    h.update(depth.width.to_le_bytes());
    h.update(depth.height.to_le_bytes());
    for v in &depth.values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// File stem of an item's transcript: the id with anything outside
/// `[A-Za-z0-9._-]` replaced by `_`.
pub fn transcript_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Recorded responses of a whole run, addressed by request hash.
///
/// A session scoped to an item replays that item's own responses first, in
/// recorded order per hash; other hashes fall back to the first response
/// recorded anywhere in the run (e.g. a depth map another item fetched).
pub struct ReplayStore {
    calls: HashMap<String, Value>,
    scoped: HashMap<String, HashMap<String, Vec<Value>>>,
    blobs: Arc<dyn BlobSink>,
}

fn calls_of(t: &Transcript) -> impl Iterator<Item = (&String, &Value)> {
    t.calls().filter_map(|e| match e {
        Entry::Call {
            request_hash, response, ..
        } => Some((request_hash, response)),
        _ => None,
    })
}

impl ReplayStore {
    pub fn new<'t>(transcripts: impl IntoIterator<Item = &'t Transcript>, blobs: Arc<dyn BlobSink>) -> Self {
        Self::scoped(transcripts.into_iter().map(|t| (String::new(), t)), blobs)
    }

    /// Transcripts tagged with the scope (item id) they belong to.
    pub fn scoped<'t>(transcripts: impl IntoIterator<Item = (String, &'t Transcript)>, blobs: Arc<dyn BlobSink>) -> Self {
        let mut calls = HashMap::new();
        let mut scoped: HashMap<String, HashMap<String, Vec<Value>>> = HashMap::new();
        for (scope, t) in transcripts {
            for (hash, response) in calls_of(t) {
                calls.entry(hash.clone()).or_insert_with(|| response.clone());
                if !scope.is_empty() {
                    scoped
                        .entry(scope.clone())
                        .or_default()
                        .entry(hash.clone())
                        .or_default()
                        .push(response.clone());
                }
            }
        }
        Self { calls, scoped, blobs }
    }

    /// Every `*.jsonl` under `<run>/transcripts`, scoped by file stem, plus
    /// `<run>/blobs`.
    pub fn load_dir(run_dir: &Path) -> std::io::Result<Self> {
        let mut transcripts = Vec::new();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(run_dir.join("transcripts"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for p in paths {
            let f = std::io::BufReader::new(std::fs::File::open(&p)?);
            let mut t = Transcript::default();
            for line in f.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: Entry = serde_json::from_str(&line)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", p.display())))?;
                t.push(e);
            }
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            transcripts.push((stem, t));
        }
        Ok(Self::scoped(
            transcripts.iter().map(|(s, t)| (s.clone(), t)),
            Arc::new(DirBlobs::new(run_dir.join("blobs"))),
        ))
    }

    pub fn len(&self) -> usize {
        self.calls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.calls.is_empty()
    }

    fn get(&self, scope: Option<&str>, hash: &str, seen: usize) -> Option<&Value> {
        let own = scope.and_then(|s| self.scoped.get(s)).and_then(|m| m.get(hash));
        match own {
            Some(list) => list.get(seen).or(list.last()),
            None => self.calls.get(hash),
        }
    }
}

/// Run-wide caches shared by all items.
#[derive(Default)]
pub struct Caches {
    depth: Mutex<HashMap<String, Arc<RawDepth>>>,
    judge: Mutex<HashMap<String, String>>,
}

/// Token budget per stage; temperature is always 0.
pub fn max_tokens(stage: Stage) -> u32 {
    match stage {
        Stage::Objects => 128,
        Stage::Perspective => 32,
        Stage::Rephrase => 256,
        Stage::Refine | Stage::Judge => 8,
        _ => 256,
    }
}

fn request_hash(stage: Stage, endpoint: &str, request: &Value) -> String {
    let canonical = serde_json::to_string(&json!({"stage": stage, "endpoint": endpoint, "request": request}))
        .expect("json values serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn error_value(e: &ClientError) -> Value {
    json!({ "error": e })
}

fn decode<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T, ClientError> {
    if let Some(e) = v.get("error") {
        return Err(serde_json::from_value(e.clone()).unwrap_or_else(|_| ClientError::BadResponse(e.to_string())));
    }
    serde_json::from_value(v.clone()).map_err(|e| ClientError::BadResponse(format!("recorded response: {e}")))
}

/// Routes one item's calls to live clients or a replay store and logs
/// every one of them.
pub struct Session<'a> {
    clients: Option<&'a Clients>,
    replay: Option<&'a ReplayStore>,
    caches: &'a Caches,
    blobs: Option<&'a dyn BlobSink>,
    deadline: Option<Instant>,
    scope: Option<String>,
    replayed: HashMap<String, usize>,
    transcript: Transcript,
}

impl<'a> Session<'a> {
    pub fn live(clients: &'a Clients, caches: &'a Caches) -> Self {
        Self {
            clients: Some(clients),
            replay: None,
            caches,
            blobs: None,
            deadline: None,
            scope: None,
            replayed: HashMap::new(),
            transcript: Transcript::default(),
        }
    }

    pub fn replay(store: &'a ReplayStore, caches: &'a Caches) -> Self {
        Self {
            clients: None,
            replay: Some(store),
            caches,
            blobs: None,
            deadline: None,
            scope: None,
            replayed: HashMap::new(),
            transcript: Transcript::default(),
        }
    }

    pub fn with_blobs(mut self, blobs: &'a dyn BlobSink) -> Self {
        self.blobs = Some(blobs);
        self
    }

    pub fn with_deadline(mut self, deadline: Instant) -> Self {
        self.deadline = Some(deadline);
        self
    }

    /// Replay this item's own recorded responses first.
    pub fn with_scope(mut self, item_id: &str) -> Self {
        self.scope = Some(transcript_stem(item_id));
        self
    }

    pub fn set_deadline(&mut self, deadline: Option<Instant>) {
        self.deadline = deadline;
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> Transcript {
        std::mem::take(&mut self.transcript)
    }

    pub fn stage(&mut self, stage: Stage) {
        self.transcript.push(Entry::Stage { stage });
    }

    pub fn warn(&mut self, stage: Stage, message: impl Into<String>) {
        self.transcript.push(Entry::Warning {
            stage,
            message: message.into(),
        });
    }

    pub fn check_deadline(&self) -> Result<(), ClientError> {
        match self.deadline {
            Some(d) if Instant::now() >= d => Err(ClientError::Timeout),
            _ => Ok(()),
        }
    }

    fn clients(&self) -> Result<&'a Clients, ClientError> {
        self.clients
            .ok_or_else(|| ClientError::InvalidRequest("no live clients configured".into()))
    }

    fn call(
        &mut self,
        stage: Stage,
        endpoint: &str,
        request: Value,
        live: impl FnOnce(&'a Clients) -> Result<Value, ClientError>,
    ) -> Result<Value, ClientError> {
        self.check_deadline()?;
        let hash = request_hash(stage, endpoint, &request);
        let start = Instant::now();
        let response = match self.replay {
            Some(store) => {
                let seen = self.replayed.entry(hash.clone()).or_insert(0);
                let v = store
                    .get(self.scope.as_deref(), &hash, *seen)
                    .cloned()
                    .unwrap_or_else(|| error_value(&ClientError::ReplayMiss(format!("{} {hash}", stage.name()))));
                *seen += 1;
                v
            }
            None => match self.clients().and_then(live) {
                Ok(v) => v,
                Err(e) => error_value(&e),
            },
        };
        let duration_ms = if self.replay.is_some() { 0 } else { start.elapsed().as_millis() as u64 };
        self.transcript.push(Entry::Call {
            stage,
            endpoint: endpoint.to_string(),
            request_hash: hash,
            response: response.clone(),
            duration_ms,
        });
        Ok(response)
    }

    fn chat_with(&mut self, stage: Stage, request: ChatRequest, judge: bool) -> Result<String, ClientError> {
        let parts: Vec<Value> = request
            .parts
            .iter()
            .map(|p| match p {
                ChatPart::Text(t) => json!({"text": t}),
                ChatPart::Image(i) => json!({"image_sha256": i.digest_hex()}),
            })
            .collect();
        let req = json!({"parts": parts, "temperature": request.temperature, "max_tokens": request.max_tokens});
        let endpoint = if judge { "judge" } else { "chat" };
        let v = self.call(stage, endpoint, req, |c| {
            let vlm = if judge { &c.judge } else { &c.vlm };
            let r = vlm.chat(&request)?;
            Ok(json!({"text": r.text}))
        })?;
        #[derive(Deserialize)]
        struct Text {
            text: String,
        }
        decode::<Text>(&v).map(|t| t.text)
    }

    /// One VLM call at temperature 0.
    pub fn chat(&mut self, stage: Stage, prompt: &str, image: Option<Arc<RgbImage>>) -> Result<String, ClientError> {
        self.chat_with(stage, ChatRequest::new(prompt, image, max_tokens(stage)), false)
    }

    /// Judge call, cached run-wide by `key`.
    pub fn judge(&mut self, key: &str, prompt: &str) -> Result<String, ClientError> {
        if let Some(hit) = self.caches.judge.lock().unwrap().get(key).cloned() {
            return Ok(hit);
        }
        let text = self.chat_with(Stage::Judge, ChatRequest::new(prompt, None, max_tokens(Stage::Judge)), true)?;
        self.caches.judge.lock().unwrap().insert(key.to_string(), text.clone());
        Ok(text)
    }

    pub fn detect(&mut self, image: &RgbImage, label: &str) -> Result<Vec<ScoredBox>, ClientError> {
        let req = json!({"image_sha256": image.digest_hex(), "label": label});
        let v = self.call(Stage::Detect, "detect", req, |c| {
            let boxes = c.detector.detect(image, label)?;
            Ok(serde_json::to_value(DetectResponse::from_boxes(&boxes)).expect("serializable"))
        })?;
        decode::<DetectResponse>(&v)?.into_boxes(label, image.width(), image.height())
    }

    pub fn segment(&mut self, image: &RgbImage, rect: &PixelRect) -> Result<PixelMask, ClientError> {
        let req = json!({"image_sha256": image.digest_hex(), "box": rect_to_xyxy(rect)});
        let v = self.call(Stage::Segment, "segment", req, |c| {
            let mask = c.segmenter.segment(image, rect)?;
            let rle = MaskRle::encode(&mask, image.width(), image.height());
            Ok(serde_json::to_value(SegmentResponse { mask_rle: rle }).expect("serializable"))
        })?;
        decode::<SegmentResponse>(&v)?.into_mask(image.width(), image.height())
    }

    pub fn orient(&mut self, crop: &RgbImage) -> Result<Vec3, ClientError> {
        let req = json!({"image_sha256": crop.digest_hex()});
        let v = self.call(Stage::Orient, "orient", req, |c| {
            let d = c.orient.orient(crop)?;
            Ok(serde_json::to_value(OrientResponse { dir: [d.x, d.y, d.z] }).expect("serializable"))
        })?;
        decode::<OrientResponse>(&v)?.into_direction()
    }

    /// Depth of `image`. Successful maps are cached run-wide by image
    /// digest; a cache hit is logged as [`Entry::Cached`].
    pub fn depth(&mut self, image: &RgbImage) -> Result<Arc<RawDepth>, ClientError> {
        let digest = image.digest_hex();
        if let Some(hit) = self.caches.depth.lock().unwrap().get(&digest).cloned() {
            let hash = request_hash(Stage::Depth, "depth", &json!({"image_sha256": digest}));
            self.transcript.push(Entry::Cached {
                stage: Stage::Depth,
                request_hash: hash,
            });
            return Ok(hit);
        }
        let depth = self.depth_call(image, &digest)?;
        self.caches.depth.lock().unwrap().insert(digest, depth.clone());
        Ok(depth)
    }

    fn depth_call(&mut self, image: &RgbImage, digest: &str) -> Result<Arc<RawDepth>, ClientError> {
        let req = json!({"image_sha256": digest});
        let mut fresh: Option<RawDepth> = None;
        let blobs = self.blobs;
        let v = self.call(Stage::Depth, "depth", req, |c| {
            let d = c.depth.depth(image)?;
            if d.width != image.width() || d.height != image.height() || d.values.len() != (d.width * d.height) as usize
            {
                return Err(ClientError::BadResponse("depth map does not match the image".into()));
            }
            let key = depth_digest(&d);
            if let Some(b) = blobs {
                b.put(&key, &d)
                    .map_err(|e| ClientError::ServiceUnavailable(format!("blob store: {e}")))?;
            }
            let v = json!({"width": d.width, "height": d.height, "depth_sha256": key});
            fresh = Some(d);
            Ok(v)
        })?;
        #[derive(Deserialize)]
        struct DepthRef {
            width: u32,
            height: u32,
            depth_sha256: String,
        }
        let r: DepthRef = decode(&v)?;
        let depth = match fresh {
            Some(d) => d,
            None => {
                let store = self.replay.map(|s| &s.blobs);
                store
                    .and_then(|b| b.get(&r.depth_sha256))
                    .ok_or_else(|| ClientError::ReplayMiss(format!("depth blob {}", r.depth_sha256)))?
            }
        };
        if depth.width != r.width || depth.height != r.height {
            return Err(ClientError::BadResponse("depth blob dimensions differ from the record".into()));
        }
        Ok(Arc::new(depth))
    }
}
