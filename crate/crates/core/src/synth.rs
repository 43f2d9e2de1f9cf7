//! Synthetic benchmarks with analytic ground truth.
//!
//! World frame is y-up with objects resting on the y = 0 plane. A heading
//! `h` (degrees) means the horizontal direction `(sin h, 0, cos h)`, and the
//! right-hand side of that direction is `(cos h, 0, -sin h)`, the same
//! `up x forward` rule the viewer frames use.
//!
//! Each scene is seen by a level camera placed so that its heading differs
//! from the reference viewer's by the item's `theta`:
//! `viewer heading = camera heading + theta`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::oracle::{cube_bounds, OracleScene, TruthObject};
use crate::geometry::viewer_frame;
use crate::prompt::{format_question, Task};
use crate::raster::{RasterError, RgbImage};
use crate::scene::{CameraModel, Frame, ObjectAbstraction, SceneAbstraction, SceneError, Vec3};

pub const SCENES_PER_TASK: usize = 60;
pub const VIEWS_PER_SCENE: usize = 5;
pub const VISIBILITY_SCENES: usize = 160;
pub const AZIMUTHS: usize = 20;
pub const AZIMUTH_STEP_DEG: f64 = 18.0;

pub const MIN_LATERAL: f64 = 0.05;
pub const MIN_DISTANCE_GAP: f64 = 0.05;
pub const MIN_FACING_GAP_DEG: f64 = 10.0;
pub const MIN_DEPTH: f64 = 0.05;

const LABELS: [&str; 16] = [
    "mug", "lamp", "chair", "plant", "teddy bear", "book", "vase", "clock", "basket", "toy duck", "laptop", "shoe",
    "bottle", "bowl", "hat", "kettle",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
    #[error("item {0} has no synthetic scene")]
    MissingScene(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("benchmark file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{0}")]
    Raster(#[from] RasterError),
    #[error("{0}")]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSettings {
    pub image_size: u32,
    pub vfov_deg: f64,
    /// Horizontal distance from the camera to the layout centroid.
    pub camera_distance: f64,
    pub camera_height: f64,
    pub edge: f64,
    /// Half-width of the uniform x/z jitter applied to every object.
    pub perturbation: f64,
    pub facing_jitter_deg: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            image_size: 384,
            vfov_deg: 60.0,
            camera_distance: 5.0,
            camera_height: 1.2,
            edge: 0.1,
            perturbation: 0.3,
            facing_jitter_deg: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub label: String,
    pub position: [f64; 3],
    pub heading_deg: f64,
}

impl WorldObject {
    pub fn forward(&self) -> Vec3 {
        heading_vec(self.heading_deg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub heading_deg: f64,
    pub width: u32,
    pub height: u32,
    pub vfov_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub task: Task,
    pub objects: Vec<WorldObject>,
    pub reference: String,
    /// Objects the question asks about, in stem order.
    pub subjects: Vec<String>,
    pub camera: CameraPose,
    pub edge: f64,
    pub seed: u64,
}

fn heading_vec(deg: f64) -> Vec3 {
    let r = deg.to_radians();
    Vec3::new(r.sin(), 0.0, r.cos())
}

fn wrap_deg(d: f64) -> f64 {
    let w = d.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// The 20 azimuth offsets, `0, 18, ..., 180, -162, ..., -18`.
pub fn theta_grid() -> Vec<f64> {
    (0..AZIMUTHS).map(|k| wrap_deg(k as f64 * AZIMUTH_STEP_DEG)).collect()
}

impl SyntheticScene {
    pub fn object(&self, label: &str) -> Option<&WorldObject> {
        self.objects.iter().find(|o| o.label == label)
    }

    pub fn camera_model(&self) -> Result<CameraModel, SceneError> {
        CameraModel::from_vertical_fov(self.camera.width, self.camera.height, self.camera.vfov_deg)
    }

    /// Layout in the camera frame.
    pub fn truth_objects(&self) -> Vec<TruthObject> {
        let to_camera = viewer_frame(
            &Vec3::from(self.camera.position),
            &heading_vec(self.camera.heading_deg),
            &Vec3::y(),
        )
        .expect("a level camera always has a valid frame");
        self.objects
            .iter()
            .map(|o| TruthObject {
                label: o.label.clone(),
                position: to_camera.apply_point(&Vec3::from(o.position)),
                orientation: to_camera.apply_direction(&o.forward()),
                edge: self.edge,
            })
            .collect()
    }

    pub fn oracle_scene(&self) -> Result<OracleScene, SceneError> {
        Ok(OracleScene::new(self.camera_model()?, self.truth_objects()))
    }

    /// The true camera-frame abstraction, camera entry included.
    pub fn camera_abstraction(&self) -> Result<SceneAbstraction, SceneError> {
        let mut objects: Vec<ObjectAbstraction> = self
            .truth_objects()
            .into_iter()
            .map(|t| ObjectAbstraction::new(t.label, t.position, t.orientation))
            .collect();
        objects.push(ObjectAbstraction::camera());
        SceneAbstraction::new(objects, Frame::CameraEgocentric)
    }

    /// Signed offset from the camera's heading to the reference's heading.
    pub fn theta(&self) -> f64 {
        let r = self.object(&self.reference).map(|o| o.heading_deg).unwrap_or(0.0);
        wrap_deg(r - self.camera.heading_deg)
    }

    /// Ground-plane coordinates of `label` relative to the reference, as
    /// (right, forward).
    fn relative(&self, label: &str) -> Option<(f64, f64)> {
        let r = self.object(&self.reference)?;
        let t = self.object(label)?;
        let (dx, dz) = (t.position[0] - r.position[0], t.position[2] - r.position[2]);
        let h = r.heading_deg.to_radians();
        Some((dx * h.cos() - dz * h.sin(), dx * h.sin() + dz * h.cos()))
    }
}

/// The correct answer text, computed on the ground plane.
pub fn ground_truth(scene: &SyntheticScene) -> Result<String, SynthError> {
    let missing = || SynthError::DegenerateScene("question subject not in the layout".into());
    let subject = |i: usize| scene.subjects.get(i).ok_or_else(missing);
    match scene.task {
        Task::LeftRight => {
            let (x, _) = scene.relative(subject(0)?).ok_or_else(missing)?;
            if x.abs() < MIN_LATERAL {
                return Err(SynthError::DegenerateScene(format!("lateral offset {x:.3} m")));
            }
            Ok(if x > 0.0 { "right" } else { "left" }.into())
        }
        Task::Closer => {
            let (a, b) = (subject(0)?, subject(1)?);
            let da = scene.relative(a).map(|(x, z)| x.hypot(z)).ok_or_else(missing)?;
            let db = scene.relative(b).map(|(x, z)| x.hypot(z)).ok_or_else(missing)?;
            if (da - db).abs() < MIN_DISTANCE_GAP {
                return Err(SynthError::DegenerateScene(format!("distances {da:.3} and {db:.3}")));
            }
            Ok(if da < db { a } else { b }.to_string())
        }
        Task::Visibility => {
            let (_, z) = scene.relative(subject(0)?).ok_or_else(missing)?;
            if z.abs() < MIN_DEPTH {
                return Err(SynthError::DegenerateScene(format!("depth {z:.3} m")));
            }
            Ok(if z > 0.0 { "yes" } else { "no" }.into())
        }
        Task::Facing => {
            let (a, b) = (subject(0)?, subject(1)?);
            let angle = |l: &str| scene.relative(l).map(|(x, z)| x.atan2(z).abs().to_degrees()).ok_or_else(missing);
            let (ta, tb) = (angle(a)?, angle(b)?);
            if (ta - tb).abs() < MIN_FACING_GAP_DEG {
                return Err(SynthError::DegenerateScene(format!("facing angles {ta:.1} and {tb:.1}")));
            }
            Ok(if ta < tb { a } else { b }.to_string())
        }
        Task::Other => Err(SynthError::DegenerateScene("no ground truth for free-form questions".into())),
    }
}

pub fn question_stem(scene: &SyntheticScene) -> String {
    let r = &scene.reference;
    let s = &scene.subjects;
    match scene.task {
        Task::LeftRight => format!("From the {r}'s perspective, is the {} on the left or right?", s[0]),
        Task::Closer => format!("From the {r}'s perspective, which object is closer: the {} or the {}?", s[0], s[1]),
        Task::Visibility => format!("From the {r}'s perspective, is the {} visible?", s[0]),
        Task::Facing => format!(
            "From the {r}'s perspective, which object are you facing towards: the {} or the {}?",
            s[0], s[1]
        ),
        Task::Other => String::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    Synthetic,
    File(PathBuf),
}

impl Serialize for ImageSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ImageSource::Synthetic => s.serialize_str("synthetic"),
            ImageSource::File(p) => s.serialize_str(&p.to_string_lossy()),
        }
    }
}

impl<'de> Deserialize<'de> for ImageSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == "synthetic" {
            ImageSource::Synthetic
        } else {
            ImageSource::File(PathBuf::from(s))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub task: Task,
    pub image: ImageSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SyntheticScene>,
    /// Question stem without options.
    pub question: String,
    pub options: Vec<String>,
    pub answer: usize,
    pub theta: f64,
    /// Vertical field of view of an external image, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vfov_deg: Option<f64>,
}

impl BenchmarkItem {
    pub fn answer_text(&self) -> &str {
        &self.options[self.answer]
    }

    pub fn full_question(&self) -> String {
        format_question(&self.question, &self.options)
    }

    /// The input image and its intrinsics. Relative file paths resolve
    /// against `base`.
    pub fn load_image(&self, base: &Path, default_vfov_deg: f64) -> Result<(Arc<RgbImage>, CameraModel), SynthError> {
        match &self.image {
            ImageSource::Synthetic => {
                let scene = self.scene.as_ref().ok_or_else(|| SynthError::MissingScene(self.id.clone()))?;
                let oracle = scene.oracle_scene()?;
                Ok((oracle.image(), *oracle.camera()))
            }
            ImageSource::File(p) => {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                let image = RgbImage::load(&path)?;
                let camera = CameraModel::from_vertical_fov(
                    image.width(),
                    image.height(),
                    self.vfov_deg.unwrap_or(default_vfov_deg),
                )?;
                Ok((Arc::new(image), camera))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settings: Option<SynthSettings>,
    pub items: Vec<BenchmarkItem>,
}

impl Benchmark {
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn task_tag(task: Task) -> u64 {
    match task {
        Task::LeftRight => 1,
        Task::Closer => 2,
        Task::Visibility => 3,
        Task::Facing => 4,
        Task::Other => 5,
    }
}

/// Per-scene seed: the run seed mixed with the task, scene index and a
/// stream tag so probe and benchmark scenes never coincide.
fn scene_seed(seed: u64, task: Task, stream: u64, index: usize) -> u64 {
    let mut z = seed
        ^ task_tag(task).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Layout {
    objects: Vec<WorldObject>,
    reference: String,
    subjects: Vec<String>,
}

/// Layout-local coordinates (right, forward) rotated to heading `psi`.
fn place(psi: f64, right: f64, forward: f64, y: f64) -> [f64; 3] {
    let h = psi.to_radians();
    [right * h.cos() + forward * h.sin(), y, -right * h.sin() + forward * h.cos()]
}

fn draw_layout(task: Task, rng: &mut ChaCha8Rng, settings: &SynthSettings) -> Layout {
    let n = if task == Task::Visibility { 2 } else { 3 };
    let labels: Vec<String> = sample(rng, LABELS.len(), n).into_iter().map(|i| LABELS[i].to_string()).collect();
    let psi = rng.random_range(-180.0..180.0);
    let p = settings.perturbation;
    let y = settings.edge / 2.0;
    let jitter = |rng: &mut ChaCha8Rng| if p > 0.0 { rng.random_range(-p..p) } else { 0.0 };
    let obj = |label: &str, local: (f64, f64), heading: f64| WorldObject {
        label: label.to_string(),
        position: place(psi, local.0, local.1, y),
        heading_deg: wrap_deg(heading),
    };
    let any_heading = |rng: &mut ChaCha8Rng| rng.random_range(-180.0..180.0);
    match task {
        Task::LeftRight => {
            let a = (1.0 + jitter(rng), jitter(rng));
            let b = (-1.0 + jitter(rng), jitter(rng));
            let (ha, hb) = (any_heading(rng), any_heading(rng));
            let target = rng.random_range(0..2usize);
            Layout {
                objects: vec![obj(&labels[0], (0.0, 0.0), psi), obj(&labels[1], a, ha), obj(&labels[2], b, hb)],
                reference: labels[0].clone(),
                subjects: vec![labels[1 + target].clone()],
            }
        }
        Task::Closer => {
            let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let a = (0.4 * s + jitter(rng), 1.0 + jitter(rng));
            let b = (-0.4 * s + jitter(rng), 2.0 + jitter(rng));
            let (ha, hb) = (any_heading(rng), any_heading(rng));
            let mut subjects = vec![labels[1].clone(), labels[2].clone()];
            subjects.shuffle(rng);
            Layout {
                objects: vec![obj(&labels[0], (0.0, 0.0), psi), obj(&labels[1], a, ha), obj(&labels[2], b, hb)],
                reference: labels[0].clone(),
                subjects,
            }
        }
        Task::Visibility => {
            let x = rng.random_range(-1.5..1.5);
            let z = rng.random_range(0.4..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let h = any_heading(rng);
            Layout {
                objects: vec![obj(&labels[0], (0.0, 0.0), psi), obj(&labels[1], (x, z), h)],
                reference: labels[0].clone(),
                subjects: vec![labels[1].clone()],
            }
        }
        Task::Facing | Task::Other => {
            let a = (jitter(rng), rng.random_range(0.8..1.5));
            let b = (jitter(rng), -rng.random_range(0.8..1.5));
            let toward_b = rng.random_bool(0.5);
            let j = settings.facing_jitter_deg;
            let heading = psi + if toward_b { 180.0 } else { 0.0 } + if j > 0.0 { rng.random_range(-j..j) } else { 0.0 };
            let (ha, hb) = (any_heading(rng), any_heading(rng));
            let mut subjects = vec![labels[1].clone(), labels[2].clone()];
            subjects.shuffle(rng);
            Layout {
                // the reference sits between the other two
                objects: vec![obj(&labels[1], a, ha), obj(&labels[0], (0.0, 0.0), heading), obj(&labels[2], b, hb)],
                reference: labels[0].clone(),
                subjects,
            }
        }
    }
}

fn camera_for(layout: &Layout, theta: f64, settings: &SynthSettings) -> CameraPose {
    let n = layout.objects.len() as f64;
    let (cx, cz) = layout
        .objects
        .iter()
        .fold((0.0, 0.0), |(x, z), o| (x + o.position[0] / n, z + o.position[2] / n));
    let reference = layout.objects.iter().find(|o| o.label == layout.reference).expect("reference in layout");
    let heading = wrap_deg(reference.heading_deg - theta);
    let f = heading_vec(heading);
    CameraPose {
        position: [
            cx - settings.camera_distance * f.x,
            settings.camera_height,
            cz - settings.camera_distance * f.z,
        ],
        heading_deg: heading,
        width: settings.image_size,
        height: settings.image_size,
        vfov_deg: settings.vfov_deg,
    }
}

/// Every object fully inside the image and no two projected boxes touching.
fn view_is_clean(scene: &SyntheticScene) -> bool {
    let Ok(camera) = scene.camera_model() else {
        return false;
    };
    let (w, h) = (camera.width as f64, camera.height as f64);
    let mut boxes = Vec::new();
    for t in scene.truth_objects() {
        match cube_bounds(&camera, &t.position, t.edge) {
            Some(b) if b.x0 >= 1.0 && b.y0 >= 1.0 && b.x1 <= w - 1.0 && b.y1 <= h - 1.0 => boxes.push(b),
            _ => return false,
        }
    }
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            let (a, b) = (boxes[i], boxes[j]);
            let apart = a.x1 + 2.0 < b.x0 || b.x1 + 2.0 < a.x0 || a.y1 + 2.0 < b.y0 || b.y1 + 2.0 < a.y0;
            if !apart {
                return false;
            }
        }
    }
    true
}

fn scene_for(task: Task, layout: &Layout, theta: f64, settings: &SynthSettings, seed: u64) -> SyntheticScene {
    SyntheticScene {
        task,
        objects: layout.objects.clone(),
        reference: layout.reference.clone(),
        subjects: layout.subjects.clone(),
        camera: camera_for(layout, theta, settings),
        edge: settings.edge,
        seed,
    }
}

fn flip_viewer(layout: &Layout) -> Layout {
    let mut flipped = Layout {
        objects: layout.objects.clone(),
        reference: layout.reference.clone(),
        subjects: layout.subjects.clone(),
    };
    for o in flipped.objects.iter_mut().filter(|o| o.label == layout.reference) {
        o.heading_deg = wrap_deg(o.heading_deg + 180.0);
    }
    flipped
}

/// Draw layouts until every requested view is unambiguous and clean. Each
/// returned scene pairs with its theta.
fn scene_views(
    task: Task,
    seed: u64,
    thetas: &[f64],
    settings: &SynthSettings,
    rng: &mut ChaCha8Rng,
    paired: bool,
) -> Vec<SyntheticScene> {
    loop {
        let layout = draw_layout(task, rng, settings);
        let mut layouts = vec![layout];
        if paired {
            let flipped = flip_viewer(&layouts[0]);
            layouts.push(flipped);
        }
        let scenes: Vec<SyntheticScene> = layouts
            .iter()
            .flat_map(|l| thetas.iter().map(move |&t| (l, t)))
            .map(|(l, t)| scene_for(task, l, t, settings, seed))
            .collect();
        if scenes.iter().all(|s| ground_truth(s).is_ok() && view_is_clean(s)) {
            return scenes;
        }
    }
}

/// `theta` is the nominal grid angle the view was built from.
fn item_for(scene: SyntheticScene, theta: f64, id: String, rng: &mut ChaCha8Rng) -> BenchmarkItem {
    let answer = ground_truth(&scene).expect("views are checked before use");
    let mut options: Vec<String> = match scene.task {
        Task::LeftRight => vec!["left".into(), "right".into()],
        Task::Visibility => vec!["yes".into(), "no".into()],
        _ => scene.subjects.clone(),
    };
    options.shuffle(rng);
    let answer = options.iter().position(|o| *o == answer).expect("answer is an option");
    BenchmarkItem {
        id,
        task: scene.task,
        image: ImageSource::Synthetic,
        question: question_stem(&scene),
        options,
        answer,
        theta,
        vfov_deg: None,
        scene: Some(scene),
    }
}

pub fn gen_task(task: Task, seed: u64) -> Vec<BenchmarkItem> {
    gen_task_with(task, seed, &SynthSettings::default())
}

/// The benchmark for one task: 60 scenes seen from 5 of the 20 azimuths
/// (300 items), or for visibility 160 scenes each seen from one azimuth
/// and from the opposite side with the viewer turned around (320 items).
pub fn gen_task_with(task: Task, seed: u64, settings: &SynthSettings) -> Vec<BenchmarkItem> {
    let grid = theta_grid();
    let mut items = Vec::new();
    if task == Task::Visibility {
        for s in 0..VISIBILITY_SCENES {
            let scene_seed = scene_seed(seed, task, 0, s);
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
            let theta = grid[rng.random_range(0..grid.len())];
            let scenes = scene_views(task, scene_seed, &[theta], settings, &mut rng, true);
            for (v, scene) in scenes.into_iter().enumerate() {
                items.push(item_for(scene, theta, format!("{}-{s:03}-{v}", task.name()), &mut rng));
            }
        }
        return items;
    }
    for s in 0..SCENES_PER_TASK {
        let scene_seed = scene_seed(seed, task, 0, s);
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        let mut picks: Vec<usize> = sample(&mut rng, grid.len(), VIEWS_PER_SCENE).into_vec();
        picks.sort_unstable();
        let thetas: Vec<f64> = picks.iter().map(|&k| grid[k]).collect();
        let scenes = scene_views(task, scene_seed, &thetas, settings, &mut rng, false);
        for (scene, k) in scenes.into_iter().zip(&picks) {
            items.push(item_for(scene, grid[*k], format!("{}-{s:03}-{k:02}", task.name()), &mut rng));
        }
    }
    items
}

pub fn probe_sweep(task: Task, seed: u64) -> Vec<BenchmarkItem> {
    probe_sweep_with(task, seed, &SynthSettings::default())
}

/// 60 scenes, each seen from all 20 azimuths: 1200 items, 60 per theta.
pub fn probe_sweep_with(task: Task, seed: u64, settings: &SynthSettings) -> Vec<BenchmarkItem> {
    let grid = theta_grid();
    let mut items = Vec::new();
    for s in 0..SCENES_PER_TASK {
        let scene_seed = scene_seed(seed, task, 1, s);
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        let scenes = scene_views(task, scene_seed, &grid, settings, &mut rng, false);
        for (k, scene) in scenes.into_iter().enumerate() {
            items.push(item_for(scene, grid[k], format!("probe-{}-{s:03}-{k:02}", task.name()), &mut rng));
        }
    }
    items
}
