//! Benchmark runs: every item under every cyclic option order, scored and
//! written to a run directory.
//!
//! ```text
//! <out>/manifest.json
//! <out>/results.jsonl        one EvalRecord per line, benchmark order
//! <out>/report.txt
//! <out>/curve.csv            theta_bucket,accuracy,count
//! <out>/transcripts/<id>.jsonl
//! <out>/blobs/<sha256>.dpth  depth maps referenced by transcripts
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clients::oracle::{oracle_suite, OracleOptions};
use crate::clients::transcript::{max_tokens, transcript_stem, DirBlobs};
use crate::clients::{BlobSink, Caches, Clients, ReplayStore, Session, Stage, Transcript};
use crate::eval::{aggregate, permutations, score_response, EvalRecord, PermRecord, Report, Verdict, DEFAULT_BUCKET_DEG};
use crate::pipeline::{run_apc, PipelineConfig};
use crate::prompt::{format_question, template_hashes, Question};
use crate::raster::RgbImage;
use crate::render::PALETTE;
use crate::scene::CameraModel;
use crate::synth::{BenchmarkItem, SynthSettings};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("{0}")]
    Config(String),
}

/// Where service calls go.
#[derive(Clone)]
pub enum Backend {
    /// Per-item oracle clients built from the item's synthetic scene.
    Oracle(OracleOptions),
    Live(Clients),
    Replay(Arc<ReplayStore>),
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Oracle(o) if o.egocentric => "oracle-egocentric",
            Backend::Oracle(_) => "oracle",
            Backend::Live(_) => "live",
            Backend::Replay(_) => "replay",
        }
    }
}

pub struct RunOptions {
    pub pipeline: PipelineConfig,
    pub jobs: usize,
    /// Resolves relative image paths.
    pub base_dir: PathBuf,
    pub blobs: Option<Arc<dyn BlobSink>>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            jobs: 4,
            base_dir: PathBuf::from("."),
            blobs: None,
        }
    }
}

pub struct ItemOutcome {
    pub record: EvalRecord,
    pub transcript: Transcript,
}

pub struct RunOutput {
    pub outcomes: Vec<ItemOutcome>,
}

impl RunOutput {
    pub fn records(&self) -> Vec<EvalRecord> {
        self.outcomes.iter().map(|o| o.record.clone()).collect()
    }

    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| o.record.failed()).count()
    }

    pub fn report(&self) -> Option<Report> {
        aggregate(&self.records(), DEFAULT_BUCKET_DEG).ok()
    }
}

fn failed_record(item: &BenchmarkItem, reason: String) -> EvalRecord {
    let orders = permutations(&item.options).unwrap_or_else(|_| vec![item.options.clone()]);
    let perms = orders
        .into_iter()
        .map(|order| PermRecord {
            order,
            response: String::new(),
            verdict: Verdict::Incorrect,
            failure: Some(reason.clone()),
            flag: None,
        })
        .collect();
    EvalRecord::new(item.id.clone(), item.task, item.theta, perms)
}

fn item_inputs(item: &BenchmarkItem, backend: &Backend, options: &RunOptions) -> Result<(Arc<RgbImage>, CameraModel, Option<Clients>), String> {
    match backend {
        Backend::Oracle(o) => {
            let scene = item
                .scene
                .as_ref()
                .ok_or_else(|| format!("input: oracle backend needs a synthetic scene for {}", item.id))?;
            let oracle = Arc::new(scene.oracle_scene().map_err(|e| format!("input: {e}"))?);
            Ok((oracle.image(), *oracle.camera(), Some(oracle_suite(oracle, *o))))
        }
        Backend::Live(_) | Backend::Replay(_) => {
            let (image, camera) = item
                .load_image(&options.base_dir, options.pipeline.default_vfov_deg)
                .map_err(|e| format!("input: {e}"))?;
            Ok((image, camera, None))
        }
    }
}

/// Run one item under each cyclic order of its options.
pub fn evaluate_item(item: &BenchmarkItem, backend: &Backend, caches: &Caches, options: &RunOptions) -> ItemOutcome {
    let orders = match permutations(&item.options) {
        Ok(o) => o,
        Err(e) => {
            return ItemOutcome {
                record: failed_record(item, format!("options: {e}")),
                transcript: Transcript::default(),
            }
        }
    };
    let (image, camera, own_clients) = match item_inputs(item, backend, options) {
        Ok(x) => x,
        Err(e) => {
            return ItemOutcome {
                record: failed_record(item, e),
                transcript: Transcript::default(),
            }
        }
    };
    let mut session = match (backend, &own_clients) {
        (_, Some(c)) => Session::live(c, caches),
        (Backend::Live(c), None) => Session::live(c, caches),
        (Backend::Replay(store), None) => Session::replay(store, caches).with_scope(&item.id),
        (Backend::Oracle(_), None) => unreachable!("oracle items carry their own clients"),
    };
    if let Some(b) = &options.blobs {
        session = session.with_blobs(b.as_ref());
    }
    let answer_text = item.answer_text().to_string();
    let mut perms = Vec::with_capacity(orders.len());
    for order in orders {
        let answer = order.iter().position(|o| *o == answer_text).expect("rotation keeps every option");
        let question = Question::new(format_question(&item.question, &order), order.clone(), item.task);
        session.set_deadline(Some(options.pipeline.deadline()));
        let result = run_apc(&mut session, image.clone(), &camera, &question, &options.pipeline);
        session.set_deadline(None);
        let perm = match result.outcome {
            Ok(response) => {
                let j = score_response(&mut session, &response, &item.question, &order, answer);
                PermRecord {
                    order,
                    response,
                    verdict: j.verdict,
                    failure: None,
                    flag: j.flag,
                }
            }
            Err(e) => PermRecord {
                order,
                response: String::new(),
                verdict: Verdict::Incorrect,
                failure: Some(format!("{}: {e}", e.kind())),
                flag: None,
            },
        };
        perms.push(perm);
    }
    ItemOutcome {
        record: EvalRecord::new(item.id.clone(), item.task, item.theta, perms),
        transcript: session.take_transcript(),
    }
}

/// Evaluate `items` on a pool of `options.jobs` threads; outcomes keep the
/// input order.
pub fn run_benchmark(items: &[BenchmarkItem], backend: &Backend, options: &RunOptions) -> Result<RunOutput, RunError> {
    let caches = Caches::default();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs.max(1))
        .build()
        .map_err(|e| RunError::Config(format!("worker pool: {e}")))?;
    let outcomes = pool.install(|| {
        items
            .par_iter()
            .map(|item| evaluate_item(item, backend, &caches, options))
            .collect()
    });
    Ok(RunOutput { outcomes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRef {
    pub file: String,
    pub sha256: String,
    pub items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub tool: String,
    pub version: String,
    pub command: String,
    pub backend: String,
    pub seed: u64,
    pub jobs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkRef>,
    pub pipeline: PipelineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSettings>,
    pub templates: BTreeMap<String, String>,
    pub palette: Vec<PaletteEntry>,
    pub temperature: f64,
    pub max_tokens: BTreeMap<String, u32>,
    /// Endpoint URLs and model ids; keys are never recorded.
    pub endpoints: BTreeMap<String, String>,
    pub started_unix: u64,
    #[serde(default)]
    pub finished_unix: Option<u64>,
    #[serde(default)]
    pub failures: Option<usize>,
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set.
pub fn now_unix() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok()) {
        return v;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or(Duration::ZERO)
        .as_secs()
}

pub fn benchmark_ref(path: &Path, items: usize) -> Result<BenchmarkRef, RunError> {
    let bytes = std::fs::read(path)?;
    Ok(BenchmarkRef {
        file: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        items,
    })
}

impl RunManifest {
    pub fn new(command: &str, backend: &str, seed: u64, jobs: usize, pipeline: PipelineConfig) -> Self {
        let stages = [
            Stage::Objects,
            Stage::Perspective,
            Stage::Refine,
            Stage::Rephrase,
            Stage::Answer,
            Stage::Judge,
        ];
        Self {
            schema: MANIFEST_SCHEMA,
            tool: "apc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            backend: backend.into(),
            seed,
            jobs,
            benchmark: None,
            pipeline,
            synth: None,
            templates: template_hashes(),
            palette: PALETTE
                .iter()
                .map(|c| PaletteEntry {
                    name: c.name().into(),
                    rgb: c.rgb(),
                })
                .collect(),
            temperature: 0.0,
            max_tokens: stages.iter().map(|s| (s.name().to_string(), max_tokens(*s))).collect(),
            endpoints: BTreeMap::new(),
            started_unix: now_unix(),
            finished_unix: None,
            failures: None,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Manifest(m.to_string()));
        if self.schema != MANIFEST_SCHEMA {
            return bad("unknown schema version");
        }
        if self.tool != "apc" || self.version.is_empty() || self.command.is_empty() {
            return bad("missing tool identity");
        }
        if self.templates.len() != crate::prompt::TEMPLATES.len() || self.templates.values().any(|h| h.len() != 64) {
            return bad("template hashes incomplete");
        }
        if self.palette.len() != PALETTE.len() {
            return bad("palette incomplete");
        }
        if self.temperature != 0.0 {
            return bad("temperature must be 0");
        }
        if self.endpoints.values().any(|v| v.to_ascii_lowercase().contains("key=")) {
            return bad("endpoint strings must not carry keys");
        }
        if let Some(f) = self.finished_unix {
            if f < self.started_unix {
                return bad("finished before it started");
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<(), RunError> {
        std::fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

pub fn results_jsonl(records: &[EvalRecord]) -> Result<String, RunError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_results(path: &Path) -> Result<Vec<EvalRecord>, RunError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

/// Write results, transcripts and report files into `dir`.
pub fn write_outputs(dir: &Path, output: &RunOutput) -> Result<(), RunError> {
    let tdir = dir.join("transcripts");
    std::fs::create_dir_all(&tdir)?;
    std::fs::write(dir.join(RESULTS_FILE), results_jsonl(&output.records())?)?;
    for o in &output.outcomes {
        std::fs::write(tdir.join(format!("{}.jsonl", transcript_stem(&o.record.id))), o.transcript.to_jsonl())?;
    }
    if let Some(report) = output.report() {
        std::fs::write(dir.join("report.txt"), report.to_table())?;
        std::fs::write(dir.join("curve.csv"), report.to_csv())?;
    }
    Ok(())
}

/// A full run into `dir`: the manifest is written before the first item and
/// completed after the last. In replay mode the timestamps come from the
/// recorded manifest so reruns are byte-identical.
pub fn run_to_dir(
    dir: &Path,
    items: &[BenchmarkItem],
    backend: &Backend,
    mut options: RunOptions,
    mut manifest: RunManifest,
    recorded: Option<&RunManifest>,
) -> Result<RunOutput, RunError> {
    std::fs::create_dir_all(dir)?;
    if let Some(r) = recorded {
        manifest.started_unix = r.started_unix;
    }
    manifest.write(dir)?;
    if options.blobs.is_none() && !matches!(backend, Backend::Replay(_)) {
        options.blobs = Some(Arc::new(DirBlobs::new(dir.join("blobs"))));
    }
    let output = run_benchmark(items, backend, &options)?;
    write_outputs(dir, &output)?;
    manifest.failures = Some(output.failures());
    manifest.finished_unix = Some(match recorded.and_then(|r| r.finished_unix) {
        Some(t) => t,
        None => now_unix().max(manifest.started_unix),
    });
    manifest.write(dir)?;
    Ok(output)
}
