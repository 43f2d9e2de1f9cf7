//! Numeric geometry: mask unprojection, depth-mode outlier rejection,
//! per-axis median centroids, viewer frames and scene transforms.
//!
//! Camera-frame convention throughout: x right, y up, z forward. Image `v`
//! grows downward, hence the sign flip on y during unprojection.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::Matrix3;
use thiserror::Error;

use crate::scene::{CameraModel, Frame, ObjectAbstraction, SceneAbstraction, SceneError, Vec3};

/// Default bin width for [`mode_depth`], meters.
pub const DEFAULT_DEPTH_BIN: f64 = 0.05;

/// Relative half-width of the depth window kept by [`filter_by_depth`].
pub const DEPTH_WINDOW: f64 = 0.1;

/// Minimum angle (radians) between a forward vector and the up axis.
pub const PARALLEL_TOLERANCE_RAD: f64 = 1e-4;

const TRANSFORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("empty mask")]
    EmptyMask,
    #[error("pixel ({0}, {1}) outside the depth map")]
    OutOfBounds(u32, u32),
    #[error("empty input")]
    EmptyInput,
    #[error("bin width must be positive, got {0}")]
    InvalidBinWidth(f64),
    #[error("no point survived the depth window around {0} m")]
    AllFiltered(f64),
    #[error("viewer forward is parallel to the up axis")]
    DegenerateUp,
    #[error("unknown reference {0:?}")]
    UnknownReference(String),
    #[error("scene is not in the expected frame")]
    WrongFrame,
    #[error("forward vector is parallel to the up axis; no ground-plane projection")]
    DegenerateProjection,
    #[error("invalid depth map: {0}")]
    InvalidDepthMap(String),
    #[error("rotation is not orthonormal with det +1")]
    InvalidRotation,
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Metric depth per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    camera: CameraModel,
    values: Vec<f32>,
}

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

impl DepthMap {
    pub fn new(camera: CameraModel, values: Vec<f32>) -> Result<Self, GeometryError> {
        let expected = camera.width as usize * camera.height as usize;
        if values.len() != expected {
            return Err(GeometryError::InvalidDepthMap(format!(
                "{} values for a {}x{} grid",
                values.len(),
                camera.width,
                camera.height
            )));
        }
        if let Some(bad) = values.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(GeometryError::InvalidDepthMap(format!("depth value {bad} is not finite and positive")));
        }
        Ok(Self { camera, values })
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn width(&self) -> u32 {
        self.camera.width
    }

    pub fn height(&self) -> u32 {
        self.camera.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, u: u32, v: u32) -> Option<f32> {
        (u < self.width() && v < self.height()).then(|| self.values[(v * self.width() + u) as usize])
    }

    /// Binary form: `"DPTH"`, u32 width, u32 height, u32 reserved, then
    /// row-major little-endian f32 values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(DEPTH_MAGIC)?;
        w.write_all(&self.width().to_le_bytes())?;
        w.write_all(&self.height().to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for d in &self.values {
            w.write_all(&d.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read the binary form. The file carries no intrinsics, so the caller
    /// supplies the camera; its size must match the header.
    pub fn read_binary<R: Read>(mut r: R, camera: CameraModel) -> Result<Self, GeometryError> {
        let io = |e: std::io::Error| GeometryError::InvalidDepthMap(e.to_string());
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(io)?;
        if &header[0..4] != DEPTH_MAGIC {
            return Err(GeometryError::InvalidDepthMap("bad magic".into()));
        }
        let width = u32::from_le_bytes(header[4..8].try_into().unwrap());
        let height = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if width != camera.width || height != camera.height {
            return Err(GeometryError::InvalidDepthMap(format!(
                "header {width}x{height} does not match camera {}x{}",
                camera.width, camera.height
            )));
        }
        let mut bytes = vec![0u8; width as usize * height as usize * 4];
        r.read_exact(&mut bytes).map_err(io)?;
        Self::new(camera, f32_from_le_bytes(&bytes))
    }
}

pub(crate) fn f32_from_le_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Set of integer pixel coordinates `(u, v)`, kept in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PixelMask {
    pixels: Vec<(u32, u32)>,
}

impl PixelMask {
    pub fn new(mut pixels: Vec<(u32, u32)>) -> Self {
        pixels.sort_by_key(|&(u, v)| (v, u));
        pixels.dedup();
        Self { pixels }
    }

    pub fn pixels(&self) -> &[(u32, u32)] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Rotation followed by translation: `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho > TRANSFORM_TOLERANCE || (rotation.determinant() - 1.0).abs() > TRANSFORM_TOLERANCE {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_direction(&self, d: &Vec3) -> Vec3 {
        self.rotation * d
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Back-project every mask pixel through its center using the depth at
/// that pixel. Output follows the mask's row-major order.
pub fn unproject_mask(depth: &DepthMap, mask: &PixelMask) -> Result<Vec<Vec3>, GeometryError> {
    if mask.is_empty() {
        return Err(GeometryError::EmptyMask);
    }
    mask.pixels()
        .iter()
        .map(|&(u, v)| {
            let d = depth.get(u, v).ok_or(GeometryError::OutOfBounds(u, v))?;
            Ok(depth.camera().unproject(u, v, d as f64))
        })
        .collect()
}

/// Center of the most populated bin `[k w, (k+1) w)`. Ties go to the nearer
/// (smaller-depth) bin.
pub fn mode_depth(depths: &[f64], bin_width: f64) -> Result<f64, GeometryError> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(GeometryError::InvalidBinWidth(bin_width));
    }
    if depths.is_empty() {
        return Err(GeometryError::EmptyInput);
    }
    let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
    for d in depths {
        *bins.entry((d / bin_width).floor() as i64).or_default() += 1;
    }
    // BTreeMap iterates nearest bin first; strict `>` keeps the first maximum.
    let mut best = (i64::MIN, 0usize);
    for (&k, &n) in &bins {
        if n > best.1 {
            best = (k, n);
        }
    }
    Ok((best.0 as f64 + 0.5) * bin_width)
}

/// Keep points with `0.9 d <= z <= 1.1 d`, preserving order.
pub fn filter_by_depth(points: &[Vec3], d_mode: f64) -> Result<Vec<Vec3>, GeometryError> {
    let (lo, hi) = ((1.0 - DEPTH_WINDOW) * d_mode, (1.0 + DEPTH_WINDOW) * d_mode);
    let kept: Vec<Vec3> = points.iter().filter(|p| p.z >= lo && p.z <= hi).copied().collect();
    if kept.is_empty() {
        return Err(GeometryError::AllFiltered(d_mode));
    }
    Ok(kept)
}

/// Per-axis median. Even counts take the lower of the two middle values.
pub fn centroid_median(points: &[Vec3]) -> Result<Vec3, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyInput);
    }
    let mid = (points.len() - 1) / 2;
    let mut out = Vec3::zeros();
    let mut axis = Vec::with_capacity(points.len());
    for i in 0..3 {
        axis.clear();
        axis.extend(points.iter().map(|p| p[i]));
        let (_, m, _) = axis.select_nth_unstable_by(mid, f64::total_cmp);
        out[i] = *m;
    }
    Ok(out)
}

/// World-to-viewer transform: the viewer lands at the origin looking down +z
/// with `world_up` (orthogonalized) as +y and `up x forward` as +x.
pub fn viewer_frame(position: &Vec3, orientation: &Vec3, world_up: &Vec3) -> Result<RigidTransform, GeometryError> {
    let f = orientation.normalize();
    let up = world_up.normalize();
    if f.cross(&up).norm() < PARALLEL_TOLERANCE_RAD.sin() {
        return Err(GeometryError::DegenerateUp);
    }
    let u = (up - up.dot(&f) * f).normalize();
    let r = u.cross(&f);
    let rotation = Matrix3::from_rows(&[r.transpose(), u.transpose(), f.transpose()]);
    let translation = -(rotation * position);
    RigidTransform::new(rotation, translation)
}

/// Up axes tried, in order, when building a viewer frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpAxes {
    pub world_up: Vec3,
    pub fallback_up: Vec3,
}

impl Default for UpAxes {
    fn default() -> Self {
        Self {
            world_up: Vec3::y(),
            fallback_up: Vec3::z(),
        }
    }
}

/// Re-express a camera-egocentric scene in the reference object's frame.
pub fn transform_scene(scene: &SceneAbstraction, reference: &str) -> Result<SceneAbstraction, GeometryError> {
    transform_scene_with(scene, reference, &UpAxes::default())
}

pub fn transform_scene_with(
    scene: &SceneAbstraction,
    reference: &str,
    axes: &UpAxes,
) -> Result<SceneAbstraction, GeometryError> {
    if scene.frame() != &Frame::CameraEgocentric {
        return Err(GeometryError::WrongFrame);
    }
    let viewer = scene
        .object(reference)
        .ok_or_else(|| GeometryError::UnknownReference(reference.to_string()))?;
    let transform = match viewer_frame(&viewer.position, &viewer.orientation, &axes.world_up) {
        Err(GeometryError::DegenerateUp) => viewer_frame(&viewer.position, &viewer.orientation, &axes.fallback_up)?,
        other => other?,
    };
    let objects = scene
        .objects()
        .iter()
        .map(|o| {
            let (position, orientation) = if o.label == reference {
                (Vec3::zeros(), Vec3::z())
            } else {
                let mut p = transform.apply_direction(&o.orientation);
                if (p.norm() - 1.0).abs() > TRANSFORM_TOLERANCE {
                    p.normalize_mut();
                }
                (transform.apply_point(&o.position), p)
            };
            ObjectAbstraction {
                position,
                orientation,
                ..o.clone()
            }
        })
        .collect();
    Ok(SceneAbstraction::new(objects, Frame::ViewerEgocentric(reference.to_string()))?)
}

/// Signed ground-plane angle in degrees from `camera_forward` to
/// `viewer_forward`, counter-clockwise seen from `+up`, in (-180, 180].
pub fn angular_offset(camera_forward: &Vec3, viewer_forward: &Vec3, up: &Vec3) -> Result<f64, GeometryError> {
    let up = up.normalize();
    let flat = |v: &Vec3| -> Result<Vec3, GeometryError> {
        let p = v - v.dot(&up) * up;
        if p.norm() < PARALLEL_TOLERANCE_RAD.sin() {
            Err(GeometryError::DegenerateProjection)
        } else {
            Ok(p.normalize())
        }
    };
    let (a, b) = (flat(camera_forward)?, flat(viewer_forward)?);
    let theta = a.cross(&b).dot(&up).atan2(a.dot(&b)).to_degrees();
    Ok(if theta <= -180.0 { theta + 360.0 } else { theta })
}
