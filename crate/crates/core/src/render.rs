//! Abstract visual prompt rendering.
//!
//! A viewer-frame scene is turned into an image of equal-sized, uniquely
//! coloured cubes seen from the viewer (origin, looking down +z, +y up).
//! Cubes are drawn back to front (painter's algorithm) with flat shading:
//! faces normal to z keep the base colour, x faces are darkened 12% and y
//! faces 25%.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Rgb, RgbImage};
use crate::scene::{CameraModel, Frame, ObjectAbstraction, SceneAbstraction, SceneError, Vec3};

/// Objects closer than this (scene units) cannot be projected.
pub const NEAR_PLANE: f64 = 1e-3;

/// Per-face darkening, indexed by the face normal axis (x, y, z).
pub const FACE_DARKENING: [f64; 3] = [0.12, 0.25, 0.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("scene is not viewer-egocentric")]
    WrongFrame,
    #[error("no object lies in front of the viewer")]
    NothingVisible,
    #[error("{0} objects exceed the {n}-colour palette", n = PALETTE.len())]
    PaletteExhausted(usize),
    #[error("object {0:?} has no colour assigned")]
    MissingColor(String),
    #[error("cube {0:?} is behind the near plane")]
    ProjectionError(String),
    #[error("invalid render settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Cyan,
    Magenta,
    Brown,
    Gray,
}

/// Assignment order.
pub const PALETTE: [ColorName; 10] = [
    ColorName::Red,
    ColorName::Green,
    ColorName::Blue,
    ColorName::Yellow,
    ColorName::Purple,
    ColorName::Orange,
    ColorName::Cyan,
    ColorName::Magenta,
    ColorName::Brown,
    ColorName::Gray,
];

impl ColorName {
    pub fn name(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::Purple => "purple",
            ColorName::Orange => "orange",
            ColorName::Cyan => "cyan",
            ColorName::Magenta => "magenta",
            ColorName::Brown => "brown",
            ColorName::Gray => "gray",
        }
    }

    pub fn rgb(self) -> Rgb {
        match self {
            ColorName::Red => [220, 30, 30],
            ColorName::Green => [30, 170, 50],
            ColorName::Blue => [30, 70, 220],
            ColorName::Yellow => [245, 215, 30],
            ColorName::Purple => [130, 50, 170],
            ColorName::Orange => [250, 140, 20],
            ColorName::Cyan => [20, 200, 210],
            ColorName::Magenta => [235, 40, 190],
            ColorName::Brown => [125, 80, 40],
            ColorName::Gray => [128, 128, 128],
        }
    }

    pub fn from_name(name: &str) -> Option<ColorName> {
        PALETTE.into_iter().find(|c| c.name().eq_ignore_ascii_case(name))
    }

    /// The colours a cube of this colour can show on screen.
    pub fn shades(self) -> [Rgb; 3] {
        let base = self.rgb();
        let mut out = [base; 3];
        for (axis, k) in FACE_DARKENING.iter().enumerate() {
            out[axis] = shade(base, *k);
        }
        out
    }

    pub fn from_shade(rgb: Rgb) -> Option<ColorName> {
        PALETTE.into_iter().find(|c| c.shades().contains(&rgb))
    }
}

fn shade(c: Rgb, k: f64) -> Rgb {
    c.map(|v| (v as f64 * (1.0 - k)).round() as u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorEntry {
    pub label: String,
    pub color: ColorName,
    pub rgb: Rgb,
}

/// Object label to colour, in assignment order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColorMap {
    entries: Vec<ColorEntry>,
}

impl ColorMap {
    pub fn entries(&self) -> &[ColorEntry] {
        &self.entries
    }

    pub fn get(&self, label: &str) -> Option<ColorName> {
        self.entries.iter().find(|e| e.label == label).map(|e| e.color)
    }

    pub fn label_of(&self, color: ColorName) -> Option<&str> {
        self.entries.iter().find(|e| e.color == color).map(|e| e.label.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// "red box: dog" lines, used as a legend in reports.
    pub fn legend(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} box: {}", e.color.name(), e.label))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub width: u32,
    pub height: u32,
    pub vfov_deg: f64,
    pub cube_edge: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub d_star: f64,
    pub margin: f64,
    pub background: Rgb,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            vfov_deg: 60.0,
            cube_edge: 1.0,
            z_min: 4.0,
            z_max: 10.0,
            d_star: 2.0,
            margin: 0.5,
            background: [255, 255, 255],
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: &str| Err(RenderError::InvalidSettings(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be non-zero");
        }
        if !(self.z_min > 0.0 && self.z_max > self.z_min) {
            return bad("need 0 < z_min < z_max");
        }
        if !(self.d_star > 0.0) {
            return bad("d_star must be positive");
        }
        if !(self.cube_edge > 0.0) {
            return bad("cube edge must be positive");
        }
        if !(self.vfov_deg > 0.0 && self.vfov_deg < 180.0) {
            return bad("vertical fov must be in (0, 180)");
        }
        if PALETTE.iter().any(|c| c.shades().contains(&self.background)) {
            return bad("background collides with a palette shade");
        }
        Ok(())
    }

    pub fn camera(&self) -> CameraModel {
        CameraModel::from_vertical_fov(self.width, self.height, self.vfov_deg)
            .expect("validated settings give valid intrinsics")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedLabel {
    pub label: String,
    /// Pinhole projection of the cube center, continuous pixel coordinates.
    pub centroid: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbstractImage {
    pub image: RgbImage,
    pub colors: ColorMap,
    pub rendered: Vec<RenderedLabel>,
}

fn is_renderable(o: &ObjectAbstraction, reference: &str) -> bool {
    !o.is_camera && o.label != reference
}

fn viewer_reference(scene: &SceneAbstraction) -> Result<&str, RenderError> {
    match scene.frame() {
        Frame::ViewerEgocentric(r) => Ok(r.as_str()),
        Frame::CameraEgocentric => Err(RenderError::WrongFrame),
    }
}

/// Labels of objects in front of the viewer (z > 0), in scene order. The
/// camera and the reference itself never count.
pub fn visible_set(scene: &SceneAbstraction) -> Result<Vec<String>, RenderError> {
    let reference = viewer_reference(scene)?;
    Ok(scene
        .objects()
        .iter()
        .filter(|o| is_renderable(o, reference) && o.position.z > 0.0)
        .map(|o| o.label.clone())
        .collect())
}

/// Rescale the layout so visible cubes land in `[z_min, z_max]` along z and
/// within `[-d_star, d_star]` in x and y.
///
/// The z map is affine over visible objects (a lone object goes to the
/// middle of the range); objects at `z <= 0` keep their z so they stay out
/// of view. x and y share one scale factor. The reference stays at the
/// origin.
pub fn normalize_layout(scene: &SceneAbstraction, settings: &RenderSettings) -> Result<SceneAbstraction, RenderError> {
    let reference = viewer_reference(scene)?.to_string();
    let visible: Vec<&ObjectAbstraction> = scene
        .objects()
        .iter()
        .filter(|o| is_renderable(o, &reference) && o.position.z > 0.0)
        .collect();
    if visible.is_empty() {
        return Err(RenderError::NothingVisible);
    }
    let (zlo, zhi) = visible
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), o| (lo.min(o.position.z), hi.max(o.position.z)));
    let map_z = |z: f64| {
        if z <= 0.0 {
            z
        } else if zhi - zlo <= f64::EPSILON * zhi.abs().max(1.0) {
            0.5 * (settings.z_min + settings.z_max)
        } else {
            settings.z_min + (z - zlo) * (settings.z_max - settings.z_min) / (zhi - zlo)
        }
    };
    let extent = visible
        .iter()
        .fold(0.0f64, |m, o| m.max(o.position.x.abs()).max(o.position.y.abs()));
    let scale = if extent > 0.0 { settings.d_star / extent } else { 1.0 };
    let objects = scene
        .objects()
        .iter()
        .map(|o| {
            if o.label == reference {
                return o.clone();
            }
            let p = o.position;
            ObjectAbstraction {
                position: Vec3::new(p.x * scale, p.y * scale, map_z(p.z)),
                ..o.clone()
            }
        })
        .collect();
    Ok(SceneAbstraction::new(objects, scene.frame().clone())?)
}

/// Forward shift that puts every non-camera, non-reference object at
/// `z >= margin`: `max(0, margin - min z)`.
pub fn backward_shift_amount(scene: &SceneAbstraction, margin: f64) -> Result<f64, RenderError> {
    let reference = viewer_reference(scene)?;
    let min_z = scene
        .objects()
        .iter()
        .filter(|o| is_renderable(o, reference))
        .map(|o| o.position.z)
        .fold(f64::INFINITY, f64::min);
    Ok(if min_z.is_finite() { (margin - min_z).max(0.0) } else { 0.0 })
}

/// Move the render camera back along -z, i.e. add the shift to every
/// object's z. The reference stays at the origin.
pub fn backward_shift(scene: &SceneAbstraction, margin: f64) -> Result<SceneAbstraction, RenderError> {
    let delta = backward_shift_amount(scene, margin)?;
    if delta == 0.0 {
        return Ok(scene.clone());
    }
    let reference = viewer_reference(scene)?;
    let objects = scene
        .objects()
        .iter()
        .map(|o| {
            let mut o = o.clone();
            if o.label != reference {
                o.position.z += delta;
            }
            o
        })
        .collect();
    Ok(SceneAbstraction::new(objects, scene.frame().clone())?)
}

/// Palette colours in scene order for every non-camera, non-reference
/// object.
pub fn assign_colors(scene: &SceneAbstraction) -> Result<ColorMap, RenderError> {
    let reference = scene.reference().unwrap_or("");
    let labels: Vec<&str> = scene
        .objects()
        .iter()
        .filter(|o| is_renderable(o, reference))
        .map(|o| o.label.as_str())
        .collect();
    if labels.len() > PALETTE.len() {
        return Err(RenderError::PaletteExhausted(labels.len()));
    }
    Ok(ColorMap {
        entries: labels
            .into_iter()
            .zip(PALETTE)
            .map(|(label, color)| ColorEntry {
                label: label.to_string(),
                color,
                rgb: color.rgb(),
            })
            .collect(),
    })
}

/// Render every visible object as a cube of edge `settings.cube_edge`.
pub fn render_cubes(
    scene: &SceneAbstraction,
    colors: &ColorMap,
    settings: &RenderSettings,
) -> Result<AbstractImage, RenderError> {
    settings.validate()?;
    let reference = viewer_reference(scene)?;
    let mut cubes = Vec::new();
    for o in scene.objects().iter().filter(|o| is_renderable(o, reference) && o.position.z > 0.0) {
        let color = colors.get(&o.label).ok_or_else(|| RenderError::MissingColor(o.label.clone()))?;
        if o.position.z <= NEAR_PLANE {
            return Err(RenderError::ProjectionError(o.label.clone()));
        }
        cubes.push(Cube {
            label: &o.label,
            center: o.position,
            color,
        });
    }
    if cubes.is_empty() {
        return Err(RenderError::NothingVisible);
    }
    let camera = settings.camera();
    let image = rasterize_cubes(&cubes, &camera, settings.cube_edge, settings.background);
    let rendered = cubes
        .iter()
        .map(|c| {
            let (u, v) = camera.project(&c.center).expect("center is in front of the near plane");
            RenderedLabel {
                label: c.label.to_string(),
                centroid: [u, v],
            }
        })
        .collect();
    Ok(AbstractImage {
        image,
        colors: colors.clone(),
        rendered,
    })
}

/// Background-only image, used when nothing lies in front of the viewer.
pub fn render_empty(colors: &ColorMap, settings: &RenderSettings) -> Result<AbstractImage, RenderError> {
    settings.validate()?;
    Ok(AbstractImage {
        image: RgbImage::new(settings.width, settings.height, settings.background),
        colors: colors.clone(),
        rendered: Vec::new(),
    })
}

pub(crate) struct Cube<'a> {
    pub label: &'a str,
    pub center: Vec3,
    pub color: ColorName,
}

// (normal axis, normal sign, corner indices); corner bit i set => +half along axis i
const FACES: [(usize, f64, [usize; 4]); 6] = [
    (0, -1.0, [0, 2, 6, 4]),
    (0, 1.0, [1, 5, 7, 3]),
    (1, -1.0, [0, 4, 5, 1]),
    (1, 1.0, [2, 3, 7, 6]),
    (2, -1.0, [0, 1, 3, 2]),
    (2, 1.0, [4, 6, 7, 5]),
];

/// Painter's algorithm over axis-aligned cubes; farthest center first, ties
/// in input order.
pub(crate) fn rasterize_cubes(cubes: &[Cube<'_>], camera: &CameraModel, edge: f64, background: Rgb) -> RgbImage {
    let mut image = RgbImage::new(camera.width, camera.height, background);
    let mut order: Vec<usize> = (0..cubes.len()).collect();
    order.sort_by(|&a, &b| cubes[b].center.z.total_cmp(&cubes[a].center.z));
    let h = edge / 2.0;
    for i in order {
        let cube = &cubes[i];
        let corners: Vec<Vec3> = (0..8)
            .map(|bits| {
                cube.center
                    + Vec3::new(
                        if bits & 1 != 0 { h } else { -h },
                        if bits & 2 != 0 { h } else { -h },
                        if bits & 4 != 0 { h } else { -h },
                    )
            })
            .collect();
        let shades = cube.color.shades();
        for (axis, sign, idx) in FACES {
            let face_center = cube.center[axis] + sign * h;
            // outward normal points away from the eye at the origin => hidden
            if sign * face_center >= 0.0 {
                continue;
            }
            let poly: Vec<Vec3> = idx.iter().map(|&k| corners[k]).collect();
            let clipped = clip_near(&poly, NEAR_PLANE);
            if clipped.len() < 3 {
                continue;
            }
            let projected: Vec<(f64, f64)> = clipped
                .iter()
                .map(|p| camera.project(p).expect("clipped to the near plane"))
                .collect();
            image.fill_convex(&projected, shades[axis]);
        }
    }
    image
}

/// Sutherland-Hodgman clip of a polygon against `z >= near`.
fn clip_near(poly: &[Vec3], near: f64) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (ina, inb) = (a.z >= near, b.z >= near);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (near - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ObjectAbstraction;
    use std::collections::HashSet;

    fn viewer_scene(points: &[(&str, [f64; 3])]) -> SceneAbstraction {
        let mut objects = vec![
            ObjectAbstraction {
                label: "camera".into(),
                position: Vec3::new(0.0, 0.0, -3.0),
                orientation: Vec3::z(),
                bbox: None,
                is_camera: true,
            },
            ObjectAbstraction::new("viewer", Vec3::zeros(), Vec3::z()),
        ];
        for (l, p) in points {
            objects.push(ObjectAbstraction::new(*l, Vec3::from(*p), Vec3::x()));
        }
        SceneAbstraction::new(objects, Frame::ViewerEgocentric("viewer".into())).unwrap()
    }

    #[test]
    fn palette_shades_are_unique() {
        let mut seen = HashSet::new();
        for c in PALETTE {
            for s in c.shades() {
                assert!(seen.insert(s), "{c:?} shade {s:?} collides");
            }
        }
        RenderSettings::default().validate().unwrap();
    }

    #[test]
    fn visibility_is_strict() {
        let s = viewer_scene(&[("a", [0.0, 0.0, 1.0]), ("b", [0.0, 0.0, -1.0]), ("c", [1.0, 0.0, 3.0])]);
        assert_eq!(visible_set(&s).unwrap(), vec!["a", "c"]);
        let s = viewer_scene(&[("a", [0.0, 0.0, 0.0]), ("b", [1.0, 0.0, -2.0])]);
        assert!(visible_set(&s).unwrap().is_empty());
    }

    #[test]
    fn camera_frame_is_rejected() {
        let s = SceneAbstraction::new(vec![ObjectAbstraction::camera()], Frame::CameraEgocentric).unwrap();
        assert_eq!(visible_set(&s), Err(RenderError::WrongFrame));
    }

    fn settings_2_8() -> RenderSettings {
        RenderSettings {
            z_min: 2.0,
            z_max: 8.0,
            d_star: 3.0,
            ..RenderSettings::default()
        }
    }

    #[test]
    fn normalization_examples() {
        let st = settings_2_8();
        let s = normalize_layout(&viewer_scene(&[("a", [0.0, 0.0, 5.0])]), &st).unwrap();
        assert_eq!(s.object("a").unwrap().position.z, 5.0);

        let s = normalize_layout(&viewer_scene(&[("a", [-1.0, 0.0, 1.0]), ("b", [2.0, 0.0, 3.0])]), &st).unwrap();
        assert_eq!(s.object("a").unwrap().position, Vec3::new(-1.5, 0.0, 2.0));
        assert_eq!(s.object("b").unwrap().position, Vec3::new(3.0, 0.0, 8.0));

        let hidden = viewer_scene(&[("a", [0.0, 0.0, 1.0]), ("b", [0.0, 0.0, 3.0]), ("c", [1.0, 0.0, -0.2])]);
        let s = normalize_layout(&hidden, &st).unwrap();
        assert_eq!(s.object("c").unwrap().position.z, -0.2);
        assert_eq!(visible_set(&s).unwrap(), vec!["a", "b"]);

        let none = viewer_scene(&[("a", [0.0, 0.0, -1.0])]);
        assert_eq!(normalize_layout(&none, &st), Err(RenderError::NothingVisible));
    }

    #[test]
    fn shift_examples() {
        let s = viewer_scene(&[("a", [0.0, 0.0, -2.0]), ("b", [1.0, 0.0, 3.0])]);
        assert_eq!(backward_shift_amount(&s, 0.5).unwrap(), 2.5);
        let shifted = backward_shift(&s, 0.5).unwrap();
        assert_eq!(shifted.object("a").unwrap().position.z, 0.5);
        assert_eq!(shifted.object("b").unwrap().position.z, 5.5);
        assert_eq!(shifted.object("viewer").unwrap().position, Vec3::zeros());

        let s = viewer_scene(&[("a", [0.0, 0.0, 1.0])]);
        assert_eq!(backward_shift(&s, 0.5).unwrap(), s);

        let s = viewer_scene(&[("a", [0.0, 0.0, 0.0]), ("b", [0.0, 1.0, 2.0])]);
        let shifted = backward_shift(&s, 0.5).unwrap();
        assert_eq!(shifted.object("a").unwrap().position.z, 0.5);
        assert_eq!(shifted.object("b").unwrap().position.z, 2.5);
    }

    #[test]
    fn colors_follow_palette_order() {
        let s = viewer_scene(&[("dog", [0.0, 0.0, 1.0]), ("cat", [0.0, 0.0, 2.0])]);
        let m = assign_colors(&s).unwrap();
        assert_eq!(m.get("dog"), Some(ColorName::Red));
        assert_eq!(m.get("cat"), Some(ColorName::Green));
        assert_eq!(m.get("viewer"), None);
        assert_eq!(m.get("camera"), None);
        assert_eq!(assign_colors(&s).unwrap(), m);

        let many: Vec<(String, [f64; 3])> = (0..11).map(|i| (format!("o{i}"), [0.0, 0.0, 1.0 + i as f64])).collect();
        let refs: Vec<(&str, [f64; 3])> = many.iter().map(|(l, p)| (l.as_str(), *p)).collect();
        assert_eq!(assign_colors(&viewer_scene(&refs)), Err(RenderError::PaletteExhausted(11)));
    }

    #[test]
    fn on_axis_cube_projects_to_center() {
        let s = viewer_scene(&[("a", [0.0, 0.0, 6.0])]);
        let st = RenderSettings::default();
        let img = render_cubes(&s, &assign_colors(&s).unwrap(), &st).unwrap();
        let [u, v] = img.rendered[0].centroid;
        assert!((u - 256.0).abs() <= 1.0 && (v - 256.0).abs() <= 1.0);
        assert_eq!(img.image.get(256, 256), ColorName::Red.rgb());
    }

    #[test]
    fn left_cube_is_left() {
        let s = viewer_scene(&[("l", [-1.0, 0.0, 6.0]), ("r", [1.0, 0.0, 6.0])]);
        let img = render_cubes(&s, &assign_colors(&s).unwrap(), &RenderSettings::default()).unwrap();
        assert!(img.rendered[0].centroid[0] < img.rendered[1].centroid[0]);
    }

    #[test]
    fn nearer_cube_wins_overlap() {
        // both on the optical axis; the nearer one (scene order second) must cover the center pixel
        let s = viewer_scene(&[("far", [0.0, 0.0, 9.0]), ("near", [0.0, 0.0, 5.0])]);
        let colors = assign_colors(&s).unwrap();
        let img = render_cubes(&s, &colors, &RenderSettings::default()).unwrap();
        assert_eq!(img.image.get(256, 256), ColorName::Green.rgb());
        // and the far cube is hidden entirely behind the near one
        assert!(!img.image.pixels().any(|p| ColorName::from_shade(p.2) == Some(ColorName::Red)));
        // order in the scene does not matter
        let s = viewer_scene(&[("near", [0.0, 0.0, 5.0]), ("far", [0.0, 0.0, 9.0])]);
        let img = render_cubes(&s, &assign_colors(&s).unwrap(), &RenderSettings::default()).unwrap();
        assert_eq!(img.image.get(256, 256), ColorName::Red.rgb());
    }

    #[test]
    fn off_axis_cube_shows_shaded_side() {
        let s = viewer_scene(&[("a", [2.0, 1.5, 5.0])]);
        let img = render_cubes(&s, &assign_colors(&s).unwrap(), &RenderSettings::default()).unwrap();
        let shades: HashSet<Rgb> = img.image.pixels().map(|p| p.2).collect();
        for s in ColorName::Red.shades() {
            assert!(shades.contains(&s), "missing shade {s:?}");
        }
    }

    #[test]
    fn near_plane_clipping_keeps_render_finite() {
        // straddles the near plane: only the clipped side face remains
        let s = viewer_scene(&[("a", [0.8, 0.0, 0.2])]);
        let img = render_cubes(&s, &assign_colors(&s).unwrap(), &RenderSettings::default()).unwrap();
        let side = ColorName::Red.shades()[0];
        let count = img.image.pixels().filter(|p| p.2 == side).count();
        assert!(count > 1000, "{count}");
    }

    #[test]
    fn render_errors() {
        let s = viewer_scene(&[("a", [0.0, 0.0, -1.0])]);
        assert_eq!(
            render_cubes(&s, &assign_colors(&s).unwrap(), &RenderSettings::default()).unwrap_err(),
            RenderError::NothingVisible
        );
        let s = viewer_scene(&[("a", [0.0, 0.0, 1e-4])]);
        assert_eq!(
            render_cubes(&s, &assign_colors(&s).unwrap(), &RenderSettings::default()).unwrap_err(),
            RenderError::ProjectionError("a".into())
        );
        let s = viewer_scene(&[("a", [0.0, 0.0, 1.0])]);
        assert_eq!(
            render_cubes(&s, &ColorMap::default(), &RenderSettings::default()).unwrap_err(),
            RenderError::MissingColor("a".into())
        );
    }
}
