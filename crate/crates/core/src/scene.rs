//! Scene abstraction data model.
//!
//! A scene is a small set of labelled objects, each reduced to a 3D position
//! and a unit frontal direction. The camera is stored as one of those objects
//! (flagged with `is_camera`) so frame changes can treat it like any other
//! entry. Scenes are validated on construction and immutable afterwards.

use std::collections::HashSet;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Label used for the camera pseudo-object.
pub const CAMERA_LABEL: &str = "camera";

/// Orientation vectors whose norm is within this distance of 1 are
/// renormalized on load.
pub const ORIENTATION_INPUT_TOLERANCE: f64 = 1e-3;

/// Tolerance used by the in-memory invariants.
pub const ORIENTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// Axis-aligned pixel rectangle `[x0, y0, x1, y1]` with `x0 <= x1`, `y0 <= y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct PixelRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelRect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            x0: x0.min(x1),
            y0: y0.min(y1),
            x1: x0.max(x1),
            y1: y0.max(y1),
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersection(&self, other: &PixelRect) -> Option<PixelRect> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x1 > x0 && y1 > y0).then_some(PixelRect { x0, y0, x1, y1 })
    }

    pub fn iou(&self, other: &PixelRect) -> f64 {
        let inter = self.intersection(other).map_or(0.0, |r| r.area());
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clamp to `[0, width] x [0, height]`.
    pub fn clamp_to(&self, width: u32, height: u32) -> PixelRect {
        let (w, h) = (width as f64, height as f64);
        PixelRect {
            x0: self.x0.clamp(0.0, w),
            y0: self.y0.clamp(0.0, h),
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
        }
    }

    pub fn contains_pixel(&self, u: u32, v: u32) -> bool {
        let (cu, cv) = (u as f64 + 0.5, v as f64 + 0.5);
        cu >= self.x0 && cu <= self.x1 && cv >= self.y0 && cv <= self.y1
    }
}

impl From<[f64; 4]> for PixelRect {
    fn from(v: [f64; 4]) -> Self {
        PixelRect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<PixelRect> for [f64; 4] {
    fn from(r: PixelRect) -> Self {
        [r.x0, r.y0, r.x1, r.y1]
    }
}

/// Pinhole intrinsics in pixels. Pixel `(u, v)` covers `[u, u+1) x [v, v+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, SceneError> {
        let ok = fx > 0.0
            && fy > 0.0
            && cx > 0.0
            && cy > 0.0
            && cx < width as f64
            && cy < height as f64
            && fx.is_finite()
            && fy.is_finite();
        if !ok {
            return Err(SceneError::Invariant(format!(
                "invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy} for {width}x{height}"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Square pixels, principal point at the image center.
    pub fn from_vertical_fov(width: u32, height: u32, vfov_deg: f64) -> Result<Self, SceneError> {
        if !(vfov_deg > 0.0 && vfov_deg < 180.0) {
            return Err(SceneError::Invariant(format!("vertical fov {vfov_deg} out of (0, 180)")));
        }
        let f = (height as f64 / 2.0) / (vfov_deg.to_radians() / 2.0).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    /// Continuous image coordinates of a camera-frame point (x right, y up,
    /// z forward). `None` when the point is not in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.cx + self.fx * p.x / p.z, self.cy - self.fy * p.y / p.z))
    }

    /// Back-project the center of pixel `(u, v)` at depth `d`.
    pub fn unproject(&self, u: u32, v: u32, d: f64) -> Vec3 {
        Vec3::new(
            d * (u as f64 + 0.5 - self.cx) / self.fx,
            -d * (v as f64 + 0.5 - self.cy) / self.fy,
            d,
        )
    }
}

/// One object of interest: label, position and frontal direction in the
/// owning scene's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAbstraction {
    pub label: String,
    pub position: Vec3,
    pub orientation: Vec3,
    pub bbox: Option<PixelRect>,
    pub is_camera: bool,
}

impl ObjectAbstraction {
    pub fn new(label: impl Into<String>, position: Vec3, orientation: Vec3) -> Self {
        Self {
            label: label.into(),
            position,
            orientation,
            bbox: None,
            is_camera: false,
        }
    }

    /// The camera entry of a camera-egocentric scene.
    pub fn camera() -> Self {
        Self {
            label: CAMERA_LABEL.to_string(),
            position: Vec3::zeros(),
            orientation: Vec3::z(),
            bbox: None,
            is_camera: true,
        }
    }

    pub fn with_bbox(mut self, bbox: PixelRect) -> Self {
        self.bbox = Some(bbox);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Frame {
    CameraEgocentric,
    ViewerEgocentric(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneAbstraction {
    objects: Vec<ObjectAbstraction>,
    frame: Frame,
}

fn near(a: &Vec3, b: &Vec3, tol: f64) -> bool {
    (a - b).amax() <= tol
}

impl SceneAbstraction {
    pub fn new(objects: Vec<ObjectAbstraction>, frame: Frame) -> Result<Self, SceneError> {
        let inv = |m: String| Err(SceneError::Invariant(m));
        let mut seen = HashSet::new();
        let mut cameras = 0;
        for o in &objects {
            if o.label.trim().is_empty() {
                return inv("empty object label".into());
            }
            if !seen.insert(o.label.as_str()) {
                return inv(format!("duplicate label {:?}", o.label));
            }
            if !o.position.iter().all(|c| c.is_finite()) {
                return inv(format!("non-finite position for {:?}", o.label));
            }
            if (o.orientation.norm() - 1.0).abs() > ORIENTATION_TOLERANCE {
                return inv(format!(
                    "orientation of {:?} has norm {} (expected 1)",
                    o.label,
                    o.orientation.norm()
                ));
            }
            if o.is_camera {
                cameras += 1;
                if frame == Frame::CameraEgocentric
                    && !(near(&o.position, &Vec3::zeros(), ORIENTATION_TOLERANCE)
                        && near(&o.orientation, &Vec3::z(), ORIENTATION_TOLERANCE))
                {
                    return inv("camera entry must sit at the origin facing +z in the camera frame".into());
                }
            }
        }
        if cameras != 1 {
            return inv(format!("expected exactly one camera entry, found {cameras}"));
        }
        if let Frame::ViewerEgocentric(reference) = &frame {
            let Some(r) = objects.iter().find(|o| &o.label == reference) else {
                return inv(format!("reference {reference:?} not in scene"));
            };
            if !(near(&r.position, &Vec3::zeros(), ORIENTATION_TOLERANCE)
                && near(&r.orientation, &Vec3::z(), ORIENTATION_TOLERANCE))
            {
                return inv(format!("reference {reference:?} must sit at the origin facing +z"));
            }
        }
        Ok(Self { objects, frame })
    }

    pub fn objects(&self) -> &[ObjectAbstraction] {
        &self.objects
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn object(&self, label: &str) -> Option<&ObjectAbstraction> {
        self.objects.iter().find(|o| o.label == label)
    }

    pub fn camera(&self) -> &ObjectAbstraction {
        self.objects.iter().find(|o| o.is_camera).expect("validated scene has a camera")
    }

    /// Label of the reference viewer, if the scene is viewer-egocentric.
    pub fn reference(&self) -> Option<&str> {
        match &self.frame {
            Frame::ViewerEgocentric(r) => Some(r.as_str()),
            Frame::CameraEgocentric => None,
        }
    }

    pub fn into_objects(self) -> Vec<ObjectAbstraction> {
        self.objects
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDocument {
    units: String,
    frame: FrameDocument,
    objects: Vec<ObjectDocument>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FrameDocument {
    Tag(String),
    Viewer { viewer: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDocument {
    label: String,
    position: [f64; 3],
    orientation: [f64; 3],
    bbox: Option<[f64; 4]>,
    is_camera: bool,
}

/// Parse a scene document and validate it.
pub fn load_scene(document: &str) -> Result<SceneAbstraction, SceneError> {
    let doc: SceneDocument =
        serde_json::from_str(document).map_err(|e| SceneError::Schema(e.to_string()))?;
    if doc.units != "m" {
        return Err(SceneError::Schema(format!("unsupported units {:?}", doc.units)));
    }
    let frame = match doc.frame {
        FrameDocument::Tag(t) if t == "camera" => Frame::CameraEgocentric,
        FrameDocument::Tag(t) => return Err(SceneError::Schema(format!("unknown frame tag {t:?}"))),
        FrameDocument::Viewer { viewer } => Frame::ViewerEgocentric(viewer),
    };
    let mut objects = Vec::with_capacity(doc.objects.len());
    for o in doc.objects {
        let mut orientation = Vec3::from(o.orientation);
        let norm = orientation.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > ORIENTATION_INPUT_TOLERANCE {
            return Err(SceneError::Invariant(format!(
                "orientation of {:?} has norm {norm}, not normalizable",
                o.label
            )));
        }
        if norm != 1.0 {
            orientation /= norm;
        }
        objects.push(ObjectAbstraction {
            label: o.label,
            position: Vec3::from(o.position),
            orientation,
            bbox: o.bbox.map(PixelRect::from),
            is_camera: o.is_camera,
        });
    }
    SceneAbstraction::new(objects, frame)
}

/// Serialize a scene to its JSON document form.
pub fn save_scene(scene: &SceneAbstraction) -> String {
    let doc = SceneDocument {
        units: "m".to_string(),
        frame: match scene.frame() {
            Frame::CameraEgocentric => FrameDocument::Tag("camera".into()),
            Frame::ViewerEgocentric(r) => FrameDocument::Viewer { viewer: r.clone() },
        },
        objects: scene
            .objects()
            .iter()
            .map(|o| ObjectDocument {
                label: o.label.clone(),
                position: o.position.into(),
                orientation: o.orientation.into(),
                bbox: o.bbox.map(Into::into),
                is_camera: o.is_camera,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("scene documents always serialize")
}

impl Serialize for SceneAbstraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let v: serde_json::Value = serde_json::from_str(&save_scene(self)).map_err(serde::ser::Error::custom)?;
        v.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SceneAbstraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        load_scene(&v.to_string()).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "units": "m",
        "frame": "camera",
        "objects": [
            {"label": "camera", "position": [0,0,0], "orientation": [0,0,1], "bbox": null, "is_camera": true},
            {"label": "dog", "position": [1,0,2], "orientation": [0,0,-1], "bbox": [10,20,30,40], "is_camera": false}
        ]
    }"#;

    #[test]
    fn minimal_scene_loads() {
        let s = load_scene(MINIMAL).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.frame(), &Frame::CameraEgocentric);
        assert_eq!(s.object("dog").unwrap().position, Vec3::new(1.0, 0.0, 2.0));
        assert_eq!(s.object("dog").unwrap().bbox, Some(PixelRect::new(10.0, 20.0, 30.0, 40.0)));
    }

    #[test]
    fn non_normalizable_orientation_is_rejected() {
        let doc = MINIMAL.replace("[0,0,-1]", "[0,0,2]");
        assert!(matches!(load_scene(&doc), Err(SceneError::Invariant(_))));
    }

    #[test]
    fn slightly_off_orientation_is_renormalized() {
        let doc = MINIMAL.replace("[0,0,-1]", "[0,0,-1.0005]");
        let s = load_scene(&doc).unwrap();
        assert!((s.object("dog").unwrap().orientation.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_labels_are_rejected() {
        let doc = MINIMAL.replace(r#""label": "camera""#, r#""label": "dog""#);
        assert!(matches!(load_scene(&doc), Err(SceneError::Invariant(_))));
    }

    #[test]
    fn missing_camera_is_rejected() {
        let doc = MINIMAL.replace(r#""is_camera": true"#, r#""is_camera": false"#);
        assert!(matches!(load_scene(&doc), Err(SceneError::Invariant(_))));
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(load_scene("{}"), Err(SceneError::Schema(_))));
        let doc = MINIMAL.replace("[1,0,2]", "[1,0]");
        assert!(matches!(load_scene(&doc), Err(SceneError::Schema(_))));
        let doc = MINIMAL.replace(r#""units": "m""#, r#""units": "ft""#);
        assert!(matches!(load_scene(&doc), Err(SceneError::Schema(_))));
        let doc = MINIMAL.replace(r#""frame": "camera""#, r#""frame": "world""#);
        assert!(matches!(load_scene(&doc), Err(SceneError::Schema(_))));
    }

    #[test]
    fn minimal_round_trip() {
        let s = load_scene(MINIMAL).unwrap();
        assert_eq!(load_scene(&save_scene(&s)).unwrap(), s);
    }

    #[test]
    fn viewer_frame_tag_is_preserved() {
        let objects = vec![
            ObjectAbstraction {
                label: "camera".into(),
                position: Vec3::new(0.0, 0.0, -4.0),
                orientation: Vec3::new(0.0, 0.0, -1.0),
                bbox: None,
                is_camera: true,
            },
            ObjectAbstraction::new("car", Vec3::zeros(), Vec3::z()),
        ];
        let s = SceneAbstraction::new(objects, Frame::ViewerEgocentric("car".into())).unwrap();
        let doc = save_scene(&s);
        assert!(doc.contains(r#""viewer": "car""#));
        let back = load_scene(&doc).unwrap();
        assert_eq!(back.frame(), &Frame::ViewerEgocentric("car".into()));
        assert_eq!(back, s);
    }

    #[test]
    fn viewer_frame_requires_reference_at_origin() {
        let objects = vec![
            ObjectAbstraction::camera(),
            ObjectAbstraction::new("car", Vec3::new(0.0, 0.0, 1.0), Vec3::z()),
        ];
        assert!(SceneAbstraction::new(objects, Frame::ViewerEgocentric("car".into())).is_err());
    }

    #[test]
    fn camera_projection_inverts_unprojection() {
        let cam = CameraModel::from_vertical_fov(64, 48, 60.0).unwrap();
        let p = cam.unproject(10, 30, 2.5);
        let (u, v) = cam.project(&p).unwrap();
        assert!((u - 10.5).abs() < 1e-9 && (v - 30.5).abs() < 1e-9);
        assert!(cam.project(&Vec3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn invalid_intrinsics() {
        assert!(CameraModel::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraModel::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }
}
