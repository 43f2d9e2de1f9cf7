//! Deterministic stand-ins for every service, built from a known layout.
//!
//! The input image is a render of the true layout as small coloured cubes in
//! the camera frame. Detector, segmenter, depth and orientation read the
//! geometry directly; the VLM answers each prompt type from what the prompt
//! itself carries (coordinates, or the colours in the attached image), so the
//! whole pipeline can be closed without any model.

use std::sync::Arc;

use regex::Regex;

use super::{
    ChatPart, ChatRequest, ChatResponse, ClientError, Clients, DepthEstimator, Detector, OrientationEstimator, RawDepth,
    ScoredBox, Segmenter, Vlm,
};
use crate::geometry::PixelMask;
use crate::prompt::{option_letter, split_options, Task};
use crate::raster::RgbImage;
use crate::render::{rasterize_cubes, ColorName, Cube, PALETTE};
use crate::scene::{CameraModel, PixelRect, Vec3, CAMERA_LABEL};

/// Depth reported where no object is hit, meters.
pub const BACKGROUND_DEPTH: f32 = 100.0;

pub const ORACLE_BACKGROUND: [u8; 3] = [255, 255, 255];

#[derive(Debug, Clone, PartialEq)]
pub struct TruthObject {
    pub label: String,
    /// Cube center in the camera frame.
    pub position: Vec3,
    /// Frontal direction in the camera frame.
    pub orientation: Vec3,
    pub edge: f64,
}

/// A known layout seen by a pinhole camera.
#[derive(Debug, Clone)]
pub struct OracleScene {
    camera: CameraModel,
    objects: Vec<TruthObject>,
    colors: Vec<ColorName>,
    image: Arc<RgbImage>,
}

impl OracleScene {
    /// Objects get palette colours in order; at most ten.
    pub fn new(camera: CameraModel, objects: Vec<TruthObject>) -> Self {
        assert!(objects.len() <= PALETTE.len(), "oracle scenes hold at most {} objects", PALETTE.len());
        let colors: Vec<ColorName> = PALETTE.iter().copied().take(objects.len()).collect();
        // render helpers only draw objects in front of the camera
        let cubes: Vec<(Vec3, ColorName, f64)> = objects
            .iter()
            .zip(&colors)
            .filter(|(o, _)| o.position.z > o.edge)
            .map(|(o, c)| (o.position, *c, o.edge))
            .collect();
        let image = draw(&camera, &cubes);
        Self {
            camera,
            objects,
            colors,
            image: Arc::new(image),
        }
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn objects(&self) -> &[TruthObject] {
        &self.objects
    }

    pub fn image(&self) -> Arc<RgbImage> {
        self.image.clone()
    }

    pub fn color_of(&self, label: &str) -> Option<ColorName> {
        self.index(label).map(|i| self.colors[i])
    }

    fn index(&self, label: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.label.eq_ignore_ascii_case(label))
    }

    /// Projected bounds of the cube corners, clamped to the image; `None`
    /// when the cube is not fully in front of the camera or off-screen.
    pub fn projected_box(&self, i: usize) -> Option<PixelRect> {
        let o = &self.objects[i];
        let r = cube_bounds(&self.camera, &o.position, o.edge)?.clamp_to(self.camera.width, self.camera.height);
        (r.area() > 0.0).then_some(r)
    }

    /// Analytic z-depth of the nearest cube along each pixel-center ray.
    pub fn depth_map(&self) -> RawDepth {
        let (w, h) = (self.camera.width, self.camera.height);
        let mut values = vec![BACKGROUND_DEPTH; (w * h) as usize];
        for (i, o) in self.objects.iter().enumerate() {
            let Some(b) = self.projected_box(i) else { continue };
            let lo = o.position.add_scalar(-o.edge / 2.0);
            let hi = o.position.add_scalar(o.edge / 2.0);
            let (x0, y0) = (b.x0.floor().max(0.0) as u32, b.y0.floor().max(0.0) as u32);
            let (x1, y1) = ((b.x1.ceil() as u32).min(w), (b.y1.ceil() as u32).min(h));
            for v in y0..y1 {
                for u in x0..x1 {
                    let dir = self.camera.unproject(u, v, 1.0);
                    if let Some(t) = ray_box(&dir, &lo, &hi) {
                        let slot = &mut values[(v * w + u) as usize];
                        if (t as f32) < *slot {
                            *slot = t as f32;
                        }
                    }
                }
            }
        }
        RawDepth {
            width: w,
            height: h,
            values,
        }
    }

    /// Pixels of the input image showing object `i`.
    pub fn silhouette(&self, i: usize) -> PixelMask {
        let shades = self.colors[i].shades();
        PixelMask::new(
            self.image
                .pixels()
                .filter(|(_, _, c)| shades.contains(c))
                .map(|(u, v, _)| (u, v))
                .collect(),
        )
    }
}

/// Unclamped pixel bounds of an axis-aligned cube; `None` if any corner is
/// not in front of the camera.
pub fn cube_bounds(camera: &CameraModel, center: &Vec3, edge: f64) -> Option<PixelRect> {
    let h = edge / 2.0;
    let mut r: Option<PixelRect> = None;
    for bits in 0..8 {
        let c = center
            + Vec3::new(
                if bits & 1 != 0 { h } else { -h },
                if bits & 2 != 0 { h } else { -h },
                if bits & 4 != 0 { h } else { -h },
            );
        let (u, v) = camera.project(&c)?;
        r = Some(match r {
            None => PixelRect::new(u, v, u, v),
            Some(r) => PixelRect::new(r.x0.min(u), r.y0.min(v), r.x1.max(u), r.y1.max(v)),
        });
    }
    r
}

fn draw(camera: &CameraModel, cubes: &[(Vec3, ColorName, f64)]) -> RgbImage {
    // cubes may differ in size, so each gets its own layer, far to near
    let mut image = RgbImage::new(camera.width, camera.height, ORACLE_BACKGROUND);
    let mut order: Vec<usize> = (0..cubes.len()).collect();
    order.sort_by(|&a, &b| cubes[b].0.z.total_cmp(&cubes[a].0.z));
    for i in order {
        let (center, color, edge) = cubes[i];
        let layer = rasterize_cubes(
            &[Cube {
                label: "",
                center,
                color,
            }],
            camera,
            edge,
            ORACLE_BACKGROUND,
        );
        for (u, v, c) in layer.pixels() {
            if c != ORACLE_BACKGROUND {
                image.put(u, v, c);
            }
        }
    }
    image
}

/// Entry distance along `dir` (z component 1) into an axis-aligned box, i.e.
/// the z-depth of the first hit.
fn ray_box(dir: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<f64> {
    let (mut tmin, mut tmax) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if 0.0 < lo[a] || 0.0 > hi[a] {
                return None;
            }
            continue;
        }
        let (t0, t1) = ((lo[a]) / dir[a], (hi[a]) / dir[a]);
        let (t0, t1) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        tmin = tmin.max(t0);
        tmax = tmax.min(t1);
        if tmin > tmax {
            return None;
        }
    }
    (tmin > 0.0).then_some(tmin)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OracleOptions {
    /// Also report every other object as a 0.5-confidence candidate, which
    /// forces the refinement step.
    pub distractors: bool,
    /// Answer final prompts from the camera frame, ignoring the stated
    /// perspective.
    pub egocentric: bool,
}

pub struct OracleVision {
    scene: Arc<OracleScene>,
    options: OracleOptions,
}

impl Detector for OracleVision {
    fn detect(&self, _image: &RgbImage, label: &str) -> Result<Vec<ScoredBox>, ClientError> {
        let Some(target) = self.scene.index(label) else {
            return Ok(Vec::new());
        };
        let mut out = Vec::new();
        for i in 0..self.scene.objects.len() {
            if i != target && !self.options.distractors {
                continue;
            }
            if let Some(rect) = self.scene.projected_box(i) {
                out.push(ScoredBox {
                    rect,
                    confidence: if i == target { 1.0 } else { 0.5 },
                    label: label.to_string(),
                });
            }
        }
        super::sort_by_confidence(&mut out);
        Ok(out)
    }
}

impl Segmenter for OracleVision {
    fn segment(&self, image: &RgbImage, rect: &PixelRect) -> Result<PixelMask, ClientError> {
        if rect.x1 > image.width() as f64 + 1e-9 || rect.y1 > image.height() as f64 + 1e-9 || rect.x0 < 0.0 || rect.y0 < 0.0
        {
            return Err(ClientError::InvalidRequest("box outside the image".into()));
        }
        let best = (0..self.scene.objects.len())
            .filter_map(|i| self.scene.projected_box(i).map(|b| (i, b.iou(rect))))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((i, iou)) if iou > 0.0 => {
                let mask = self.scene.silhouette(i);
                let inside = PixelMask::new(
                    mask.pixels()
                        .iter()
                        .copied()
                        .filter(|&(u, v)| rect.contains_pixel(u, v))
                        .collect(),
                );
                if inside.is_empty() {
                    Err(ClientError::MaskEmpty)
                } else {
                    Ok(inside)
                }
            }
            _ => Err(ClientError::MaskEmpty),
        }
    }
}

impl DepthEstimator for OracleVision {
    fn depth(&self, image: &RgbImage) -> Result<RawDepth, ClientError> {
        if image.width() != self.scene.camera.width || image.height() != self.scene.camera.height {
            return Err(ClientError::InvalidRequest("image does not match the oracle camera".into()));
        }
        Ok(self.scene.depth_map())
    }
}

impl OrientationEstimator for OracleVision {
    fn orient(&self, crop: &RgbImage) -> Result<Vec3, ClientError> {
        let i = dominant_object(&self.scene, crop)
            .ok_or_else(|| ClientError::BadResponse("crop shows no known object".into()))?;
        Ok(self.scene.objects[i].orientation.normalize())
    }
}

fn dominant_object(scene: &OracleScene, image: &RgbImage) -> Option<usize> {
    let mut counts = vec![0usize; scene.objects.len()];
    for (_, _, c) in image.pixels() {
        if let Some(name) = ColorName::from_shade(c) {
            if let Some(i) = scene.colors.iter().position(|x| *x == name) {
                counts[i] += 1;
            }
        }
    }
    let (i, n) = counts.iter().enumerate().max_by_key(|(i, n)| (**n, std::cmp::Reverse(*i)))?;
    (*n > 0).then_some(i)
}

/// The answering VLM of the oracle suite.
pub struct OracleVlm {
    scene: Arc<OracleScene>,
    options: OracleOptions,
}

/// Yes/no judge that accepts an answer naming the target option and no other.
pub struct OracleJudge;

/// Detector, segmenter, depth, orientation, answerer and judge for one
/// layout.
pub fn oracle_suite(scene: Arc<OracleScene>, options: OracleOptions) -> Clients {
    let vision = Arc::new(OracleVision {
        scene: scene.clone(),
        options,
    });
    Clients {
        vlm: Arc::new(OracleVlm { scene, options }),
        judge: Arc::new(OracleJudge),
        detector: vision.clone(),
        segmenter: vision.clone(),
        depth: vision.clone(),
        orient: vision,
    }
}

fn after_last<'t>(text: &'t str, marker: &str) -> Option<&'t str> {
    text.rfind(marker).map(|i| &text[i + marker.len()..])
}

fn mentions(text: &str, label: &str) -> Option<usize> {
    let re = Regex::new(&format!(r"(?i)\b{}\b", regex::escape(label))).ok()?;
    re.find(text).map(|m| m.start())
}

/// Question category from its wording, which survives rephrasing and
/// colour substitution.
pub fn task_of(question: &str) -> Task {
    let q = question.to_lowercase();
    if q.contains("on the left or right") || q.contains("left or right") {
        Task::LeftRight
    } else if q.contains("closer") {
        Task::Closer
    } else if q.contains("visible") {
        Task::Visibility
    } else if q.contains("facing towards") {
        Task::Facing
    } else {
        Task::Other
    }
}

fn letter_for(options: &[String], wanted: &str) -> String {
    match options.iter().position(|o| o.eq_ignore_ascii_case(wanted)) {
        Some(i) => option_letter(i).to_string(),
        None => wanted.to_string(),
    }
}

fn perspective_of(question: &str) -> Option<String> {
    let re = Regex::new(r"(?i)from the (.+?)'s perspective").expect("static regex");
    re.captures(question).map(|c| c[1].to_lowercase())
}

fn strip_perspective(question: &str) -> String {
    let re = Regex::new(r"(?i)^\s*from the .+?'s perspective,\s*").expect("static regex");
    let rest = re.replace(question, "").into_owned();
    let mut chars = rest.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => rest,
    }
}

struct ColorBlob {
    count: usize,
    mean_u: f64,
    mean_v: f64,
    v_extent: u32,
}

fn color_blob(image: &RgbImage, color: ColorName) -> Option<ColorBlob> {
    let shades = color.shades();
    let (mut n, mut su, mut sv, mut vmin, mut vmax) = (0usize, 0.0, 0.0, u32::MAX, 0u32);
    for (u, v, c) in image.pixels() {
        if shades.contains(&c) {
            n += 1;
            su += u as f64 + 0.5;
            sv += v as f64 + 0.5;
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
    }
    (n > 0).then(|| ColorBlob {
        count: n,
        mean_u: su / n as f64,
        mean_v: sv / n as f64,
        v_extent: vmax - vmin + 1,
    })
}

fn color_in(text: &str) -> Option<ColorName> {
    PALETTE
        .iter()
        .filter_map(|c| mentions(text, &format!("{} box", c.name())).map(|at| (at, *c)))
        .min_by_key(|(at, _)| *at)
        .map(|(_, c)| c)
}

impl OracleVlm {
    fn labels_in(&self, text: &str) -> Vec<String> {
        let mut found: Vec<(usize, String)> = self
            .scene
            .objects
            .iter()
            .filter_map(|o| mentions(text, &o.label).map(|at| (at, o.label.to_lowercase())))
            .collect();
        found.sort();
        found.into_iter().map(|(_, l)| l).collect()
    }

    fn reply(&self, request: &ChatRequest) -> String {
        let text = request.text();
        let image = request.parts.iter().find_map(|p| match p {
            ChatPart::Image(i) => Some(i.as_ref()),
            ChatPart::Text(_) => None,
        });
        if text.trim_end().ends_with("[Detect]") {
            let q = after_last(&text, "[Question] ").unwrap_or("").lines().next().unwrap_or("");
            let stem = split_options(q).map(|(s, _)| s).unwrap_or(q);
            return format!("[Detect] [{}]", self.labels_in(stem).join(", "));
        }
        if text.trim_end().ends_with("[Perspective]") {
            let q = after_last(&text, "[Question] ").unwrap_or("").lines().next().unwrap_or("");
            return match perspective_of(q) {
                Some(p) => format!("[Perspective] ++{p}++"),
                None => format!("[Perspective] ++{CAMERA_LABEL}++"),
            };
        }
        if text.trim_end().ends_with("[Output]") {
            let q = after_last(&text, "[Question] ").unwrap_or("").lines().next().unwrap_or("");
            return strip_perspective(q);
        }
        if text.contains("numbered crops") {
            return self.pick_crop(&text, image);
        }
        if self.options.egocentric {
            return self.egocentric(&text);
        }
        if let Some(coords) = after_last(&text, "# Object Coordinates\n") {
            return self.numerical(coords, &text);
        }
        if text.starts_with("This is an image of a 3D scene.") {
            if let Some(img) = image {
                return self.visual(&text, img);
            }
        }
        self.egocentric(&text)
    }

    fn pick_crop(&self, text: &str, grid: Option<&RgbImage>) -> String {
        let label = Regex::new("candidate detection of \"(.+?)\"")
            .expect("static regex")
            .captures(text)
            .map(|c| c[1].to_string());
        let count: u32 = Regex::new(r"shows (\d+) numbered crops")
            .expect("static regex")
            .captures(text)
            .and_then(|c| c[1].parse().ok())
            .unwrap_or(1);
        let (Some(label), Some(grid)) = (label, grid) else {
            return "1".into();
        };
        let Some(color) = self.scene.color_of(&label) else {
            return "1".into();
        };
        let shades = color.shades();
        let cell = (grid.width() / count.max(1)).max(1);
        let mut counts = vec![0usize; count as usize];
        for (u, _, c) in grid.pixels() {
            if shades.contains(&c) {
                let k = ((u / cell) as usize).min(counts.len() - 1);
                counts[k] += 1;
            }
        }
        let best = counts
            .iter()
            .enumerate()
            .max_by_key(|(i, n)| (**n, std::cmp::Reverse(*i)))
            .map(|(i, _)| i + 1)
            .unwrap_or(1);
        best.to_string()
    }

    fn numerical(&self, coords: &str, text: &str) -> String {
        let line = Regex::new(r"^- (.+): \[(-?[\d.]+), (-?[\d.]+), (-?[\d.]+)\]").expect("static regex");
        let mut points: Vec<(String, Vec3)> = Vec::new();
        for l in coords.lines() {
            if let Some(c) = line.captures(l) {
                let p = Vec3::new(c[2].parse().unwrap_or(0.0), c[3].parse().unwrap_or(0.0), c[4].parse().unwrap_or(0.0));
                points.push((c[1].to_lowercase(), p));
            }
        }
        let question = after_last(text, "[Question] ").unwrap_or("");
        let Some((stem, options)) = split_options(question) else {
            return "I cannot tell.".into();
        };
        let find = |name: &str| points.iter().find(|(l, _)| l.eq_ignore_ascii_case(name)).map(|(_, p)| *p);
        let target = || {
            points
                .iter()
                .filter(|(l, _)| mentions(stem, l).is_some())
                .map(|(_, p)| *p)
                .next()
        };
        match task_of(stem) {
            Task::LeftRight => match target() {
                Some(p) => letter_for(&options, if p.x > 0.0 { "right" } else { "left" }),
                None => "I cannot tell.".into(),
            },
            Task::Visibility => match target() {
                Some(p) => letter_for(&options, if p.z > 0.0 { "yes" } else { "no" }),
                None => "I cannot tell.".into(),
            },
            Task::Closer => best_option(&options, |o| find(o).map(|p| -p.norm())),
            Task::Facing => best_option(&options, |o| find(o).map(|p| p.z / p.norm())),
            Task::Other => "I cannot tell.".into(),
        }
    }

    fn visual(&self, text: &str, image: &RgbImage) -> String {
        let question = after_last(text, "please answer the following question.\n\n")
            .and_then(|q| q.split("\n\nPlease only return the answer.").next())
            .unwrap_or("");
        let Some((stem, options)) = split_options(question) else {
            return "I cannot tell.".into();
        };
        let cx = image.width() as f64 / 2.0;
        let cy = image.height() as f64 / 2.0;
        let blob_of = |o: &str| color_in(o).and_then(|c| color_blob(image, c));
        match task_of(stem) {
            Task::LeftRight => match color_in(stem).and_then(|c| color_blob(image, c)) {
                Some(b) => letter_for(&options, if b.mean_u > cx { "right" } else { "left" }),
                None => "I cannot tell.".into(),
            },
            Task::Visibility => match color_in(stem) {
                Some(c) => letter_for(&options, if color_blob(image, c).is_some() { "yes" } else { "no" }),
                None => "I cannot tell.".into(),
            },
            Task::Closer => best_option(&options, |o| blob_of(o).map(|b| b.v_extent as f64 + b.count as f64 * 1e-9)),
            Task::Facing => best_option(&options, |o| {
                blob_of(o).map(|b| -((b.mean_u - cx).powi(2) + (b.mean_v - cy).powi(2)))
            }),
            Task::Other => "I cannot tell.".into(),
        }
    }

    /// Camera-frame reading of the question, whatever perspective it states.
    fn egocentric(&self, text: &str) -> String {
        let question = text.split("\n\nPlease only return the answer.").next().unwrap_or(text);
        let question = after_last(question, "[Question] ").unwrap_or(question);
        let Some((stem, options)) = split_options(question) else {
            return "I cannot tell.".into();
        };
        let pos = |name: &str| self.scene.index(name).map(|i| self.scene.objects[i].position);
        let reference = perspective_of(stem);
        let target = self
            .labels_in(stem)
            .into_iter()
            .find(|l| Some(l) != reference.as_ref());
        match task_of(stem) {
            Task::LeftRight => {
                let origin = reference.as_deref().and_then(pos).unwrap_or_else(Vec3::zeros);
                match target.as_deref().and_then(pos) {
                    Some(p) => letter_for(&options, if p.x - origin.x > 0.0 { "right" } else { "left" }),
                    None => "I cannot tell.".into(),
                }
            }
            Task::Visibility => letter_for(&options, "yes"),
            Task::Closer => best_option(&options, |o| pos(o).map(|p| -p.norm())),
            Task::Facing => best_option(&options, |o| pos(o).map(|p| p.z / p.norm())),
            Task::Other => "I cannot tell.".into(),
        }
    }
}

/// Letter of the option with the highest score; ties keep the first.
fn best_option(options: &[String], score: impl Fn(&str) -> Option<f64>) -> String {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in options.iter().enumerate() {
        if let Some(s) = score(o) {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    match best {
        Some((i, _)) => option_letter(i).to_string(),
        None => "I cannot tell.".into(),
    }
}

impl Vlm for OracleVlm {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        Ok(ChatResponse::text(self.reply(request)))
    }
}

impl Vlm for OracleJudge {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let text = request.text();
        let field = |name: &str| {
            after_last(&text, &format!("[{name}] "))
                .and_then(|s| s.lines().next())
                .unwrap_or("")
                .trim()
                .to_lowercase()
        };
        let answer = field("Model Answer");
        let target = field("Option");
        let options: Vec<String> = field("Options").split(", ").map(str::to_string).collect();
        let names_target = !target.is_empty() && mentions(&answer, &target).is_some();
        let names_other = options
            .iter()
            .filter(|o| **o != target && !o.is_empty())
            .any(|o| mentions(&answer, o).is_some());
        Ok(ChatResponse::text(if names_target && !names_other { "yes" } else { "no" }))
    }
}
