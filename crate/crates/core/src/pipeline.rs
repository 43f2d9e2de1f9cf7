//! The end-to-end question answering pipeline.
//!
//! objects (E1) -> reference (E2) -> [camera: plain answer]
//! -> abstraction -> rephrase (E3) -> transform -> numerical or visual
//! prompt -> answer.
//!
//! The reference is extracted before the abstraction is built so that
//! egocentric questions cost no vision calls.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{refine_detection, ClientError, RefineSettings, Session, Stage};
use crate::geometry::{
    centroid_median, filter_by_depth, mode_depth, transform_scene_with, unproject_mask, DepthMap, GeometryError,
    UpAxes, DEFAULT_DEPTH_BIN,
};
use crate::prompt::{
    abstract_question, direct_prompt, numerical_prompt, objects_prompt, parse_object_list, parse_perspective,
    parse_rephrase, perspective_prompt, rephrase_prompt, visual_prompt, NumericalOptions, Perspective, PromptError,
    Question, Task,
};
use crate::raster::RgbImage;
use crate::render::{
    assign_colors, backward_shift, normalize_layout, render_cubes, render_empty, RenderError, RenderSettings,
};
use crate::scene::{CameraModel, Frame, ObjectAbstraction, SceneAbstraction, SceneError, CAMERA_LABEL};

pub const DEFAULT_ITEM_TIMEOUT_SECS: u64 = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Numerical,
    Visual,
    /// Baseline: the question and image go straight to the VLM.
    Direct,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s.to_ascii_lowercase().as_str() {
            "numerical" => Some(Mode::Numerical),
            "visual" => Some(Mode::Visual),
            "direct" => Some(Mode::Direct),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TaskProfile {
    /// Shift the render camera back so objects behind the viewer show up.
    pub backward_shift: bool,
    /// List each object's facing direction in numerical prompts.
    pub facing_lines: bool,
}

impl TaskProfile {
    /// Left/right targets can sit beside or behind the viewer, so that task
    /// renders with the backward shift. Visibility must not: hiding objects
    /// behind the viewer is the signal.
    pub fn for_task(task: Task) -> Self {
        Self {
            backward_shift: task == Task::LeftRight,
            facing_lines: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub render: RenderSettings,
    pub refine: RefineSettings,
    pub depth_bin: f64,
    /// Vertical field of view assumed for images without intrinsics.
    pub default_vfov_deg: f64,
    pub item_timeout_secs: u64,
    #[serde(default)]
    pub profile: Option<TaskProfile>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Visual,
            render: RenderSettings::default(),
            refine: RefineSettings::default(),
            depth_bin: DEFAULT_DEPTH_BIN,
            default_vfov_deg: 60.0,
            item_timeout_secs: DEFAULT_ITEM_TIMEOUT_SECS,
            profile: None,
        }
    }
}

impl PipelineConfig {
    pub fn with_mode(mode: Mode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn profile_for(&self, task: Task) -> TaskProfile {
        self.profile.unwrap_or_else(|| TaskProfile::for_task(task))
    }

    pub fn deadline(&self) -> Instant {
        Instant::now() + Duration::from_secs(self.item_timeout_secs)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("{stage}: {source}")]
    Client {
        stage: &'static str,
        #[source]
        source: ClientError,
    },
    #[error("no detection for {0:?}")]
    NoDetection(String),
    #[error("empty mask for {0:?}")]
    MaskEmpty(String),
    #[error("all points of {label:?} fell outside the depth window around {depth} m")]
    AllFiltered { label: String, depth: f64 },
    #[error("{0}")]
    Prompt(#[from] PromptError),
    #[error("{0}")]
    Geometry(#[from] GeometryError),
    #[error("{0}")]
    Render(#[from] RenderError),
    #[error("{0}")]
    Scene(#[from] SceneError),
    #[error("item deadline exceeded")]
    Timeout,
}

impl PipelineError {
    fn client(stage: Stage, e: ClientError) -> Self {
        match e {
            ClientError::Timeout => PipelineError::Timeout,
            source => PipelineError::Client {
                stage: stage.name(),
                source,
            },
        }
    }

    /// Short stable tag for reports.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Client { .. } => "client",
            PipelineError::NoDetection(_) => "no_detection",
            PipelineError::MaskEmpty(_) => "mask_empty",
            PipelineError::AllFiltered { .. } => "all_filtered",
            PipelineError::Prompt(_) => "prompt",
            PipelineError::Geometry(_) => "geometry",
            PipelineError::Render(_) => "render",
            PipelineError::Scene(_) => "scene",
            PipelineError::Timeout => "timeout",
        }
    }
}

/// Intermediate products kept for inspection.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub camera_scene: Option<SceneAbstraction>,
    pub viewer_scene: Option<SceneAbstraction>,
    pub prompt: Option<String>,
    pub abstract_image: Option<Arc<RgbImage>>,
}

#[derive(Debug, Clone)]
pub struct ItemResult {
    pub question: Question,
    pub outcome: Result<String, PipelineError>,
    pub artifacts: Artifacts,
}

impl ItemResult {
    pub fn answer(&self) -> Option<&str> {
        self.outcome.as_ref().ok().map(String::as_str)
    }

    pub fn failure(&self) -> Option<&PipelineError> {
        self.outcome.as_ref().err()
    }
}

fn chat(session: &mut Session<'_>, stage: Stage, prompt: &str, image: Option<Arc<RgbImage>>) -> Result<String, PipelineError> {
    session
        .chat(stage, prompt, image)
        .map_err(|e| PipelineError::client(stage, e))
}

/// Ask, parse, and ask once more if the reply does not parse.
fn ask_parsed<T>(
    session: &mut Session<'_>,
    stage: Stage,
    prompt: &str,
    image: Option<Arc<RgbImage>>,
    parse: impl Fn(&str) -> Result<T, PromptError>,
) -> Result<T, PipelineError> {
    let reply = chat(session, stage, prompt, image.clone())?;
    match parse(&reply) {
        Err(PromptError::Parse(_)) => {
            session.warn(stage, format!("unparseable reply {reply:?}; asking again"));
            let reply = chat(session, stage, prompt, image)?;
            Ok(parse(&reply)?)
        }
        other => Ok(other?),
    }
}

/// Camera-frame abstraction of `labels` in `image`; the camera entry is
/// appended last.
pub fn build_abstraction(
    session: &mut Session<'_>,
    image: &RgbImage,
    camera: &CameraModel,
    labels: &[String],
    config: &PipelineConfig,
) -> Result<SceneAbstraction, PipelineError> {
    let raw = session.depth(image).map_err(|e| PipelineError::client(Stage::Depth, e))?;
    if raw.width != camera.width || raw.height != camera.height {
        return Err(GeometryError::InvalidDepthMap(format!(
            "depth is {}x{}, camera is {}x{}",
            raw.width, raw.height, camera.width, camera.height
        ))
        .into());
    }
    let depth = DepthMap::new(*camera, raw.values.clone())?;
    let mut objects = Vec::new();
    for label in labels.iter().filter(|l| l.as_str() != CAMERA_LABEL) {
        session.check_deadline().map_err(|_| PipelineError::Timeout)?;
        let candidates = session
            .detect(image, label)
            .map_err(|e| PipelineError::client(Stage::Detect, e))?;
        let best = match refine_detection(session, image, label, &candidates, &config.refine) {
            Ok(b) => b,
            Err(ClientError::NoDetection(l)) => return Err(PipelineError::NoDetection(l)),
            Err(e) => return Err(PipelineError::client(Stage::Refine, e)),
        };
        let mask = match session.segment(image, &best.rect) {
            Ok(m) => m,
            Err(ClientError::MaskEmpty) => return Err(PipelineError::MaskEmpty(label.clone())),
            Err(e) => return Err(PipelineError::client(Stage::Segment, e)),
        };
        let points = unproject_mask(&depth, &mask)?;
        let depths: Vec<f64> = points.iter().map(|p| p.z).collect();
        let d_mode = mode_depth(&depths, config.depth_bin)?;
        let kept = match filter_by_depth(&points, d_mode) {
            Ok(k) => k,
            Err(GeometryError::AllFiltered(depth)) => {
                return Err(PipelineError::AllFiltered {
                    label: label.clone(),
                    depth,
                })
            }
            Err(e) => return Err(e.into()),
        };
        let center = centroid_median(&kept)?;
        let crop = image
            .crop(&best.rect)
            .map_err(|e| PipelineError::client(Stage::Orient, ClientError::InvalidRequest(e.to_string())))?;
        let facing = session.orient(&crop).map_err(|e| PipelineError::client(Stage::Orient, e))?;
        objects.push(ObjectAbstraction::new(label.clone(), center, facing).with_bbox(best.rect));
    }
    objects.push(ObjectAbstraction::camera());
    session.stage(Stage::Abstraction);
    Ok(SceneAbstraction::new(objects, Frame::CameraEgocentric)?)
}

/// Answer one question about one image.
pub fn run_apc(
    session: &mut Session<'_>,
    image: Arc<RgbImage>,
    camera: &CameraModel,
    question: &Question,
    config: &PipelineConfig,
) -> ItemResult {
    let mut q = question.clone();
    let mut artifacts = Artifacts::default();
    let outcome = run_stages(session, image, camera, &mut q, config, &mut artifacts);
    ItemResult {
        question: q,
        outcome,
        artifacts,
    }
}

fn run_stages(
    session: &mut Session<'_>,
    image: Arc<RgbImage>,
    camera: &CameraModel,
    q: &mut Question,
    config: &PipelineConfig,
    artifacts: &mut Artifacts,
) -> Result<String, PipelineError> {
    if config.mode == Mode::Direct {
        let prompt = direct_prompt(&q.raw);
        artifacts.prompt = Some(prompt.clone());
        return chat(session, Stage::Answer, &prompt, Some(image));
    }

    let objects = ask_parsed(session, Stage::Objects, &objects_prompt(&q.raw), Some(image.clone()), parse_object_list)?;
    q.extracted_objects = objects.clone();

    let reference = ask_parsed(session, Stage::Perspective, &perspective_prompt(&q.raw, &objects), None, |r| {
        parse_perspective(r, &objects)
    })?;
    q.reference = Some(reference.clone());
    let reference = match reference {
        Perspective::Camera => {
            let prompt = direct_prompt(&q.raw);
            artifacts.prompt = Some(prompt.clone());
            return chat(session, Stage::Answer, &prompt, Some(image));
        }
        Perspective::Object(r) => r,
    };

    let camera_scene = build_abstraction(session, &image, camera, &objects, config)?;
    artifacts.camera_scene = Some(camera_scene.clone());

    let reply = chat(session, Stage::Rephrase, &rephrase_prompt(&q.raw), None)?;
    let (ego, warning) = parse_rephrase(&reply, &q.raw);
    if let Some(w) = warning {
        session.warn(Stage::Rephrase, w);
    }
    q.egocentric_text = Some(ego.clone());

    session.check_deadline().map_err(|_| PipelineError::Timeout)?;
    let viewer_scene = transform_scene_with(&camera_scene, &reference, &UpAxes::default())?;
    session.stage(Stage::Transform);
    artifacts.viewer_scene = Some(viewer_scene.clone());
    let profile = config.profile_for(q.task);

    match config.mode {
        Mode::Numerical => {
            let opts = NumericalOptions {
                include_facing: profile.facing_lines,
            };
            let prompt = numerical_prompt(&viewer_scene, &ego, opts)?;
            artifacts.prompt = Some(prompt.clone());
            chat(session, Stage::Answer, &prompt, None)
        }
        Mode::Visual => {
            let mut scene = viewer_scene;
            if profile.backward_shift {
                scene = backward_shift(&scene, config.render.margin)?;
                session.stage(Stage::Shift);
            }
            let colors = assign_colors(&scene)?;
            let rendered = match normalize_layout(&scene, &config.render) {
                Ok(normalized) => {
                    session.stage(Stage::Normalize);
                    render_cubes(&normalized, &colors, &config.render)?
                }
                Err(RenderError::NothingVisible) => {
                    session.warn(Stage::Normalize, "nothing in front of the viewer; rendering an empty view");
                    render_empty(&colors, &config.render)?
                }
                Err(e) => return Err(e.into()),
            };
            session.stage(Stage::Render);
            let abstract_text = match abstract_question(&ego, &colors) {
                Ok(t) => t,
                Err(PromptError::NoReplacement(_)) => {
                    session.warn(Stage::AbstractQuestion, "no object label found in the question");
                    ego.clone()
                }
                Err(e) => return Err(e.into()),
            };
            session.stage(Stage::AbstractQuestion);
            q.abstract_text = Some(abstract_text.clone());
            let image = Arc::new(rendered.image);
            artifacts.abstract_image = Some(image.clone());
            let prompt = visual_prompt(&abstract_text);
            artifacts.prompt = Some(prompt.clone());
            chat(session, Stage::Answer, &prompt, Some(image))
        }
        Mode::Direct => unreachable!("handled above"),
    }
}

/// Objects named in `question` (asked with the image) and their
/// camera-frame abstraction.
pub fn abstract_image(
    session: &mut Session<'_>,
    image: Arc<RgbImage>,
    camera: &CameraModel,
    question: &str,
    config: &PipelineConfig,
) -> Result<SceneAbstraction, PipelineError> {
    let objects = ask_parsed(session, Stage::Objects, &objects_prompt(question), Some(image.clone()), parse_object_list)?;
    build_abstraction(session, &image, camera, &objects, config)
}
