//! JSON bodies of the vision service endpoints.
//!
//! ```text
//! POST /detect  {image_b64, label}  -> {boxes: [{xyxy, score}]}
//! POST /segment {image_b64, box}    -> {mask_rle: {height, width, counts}}
//! POST /depth   {image_b64}         -> {width, height, depth_f32_b64}
//! POST /orient  {image_b64}         -> {dir: [x, y, z]}
//! ```
//!
//! Masks are run-length encoded row-major; `counts` alternates runs of 0 and
//! 1 and always starts with a (possibly empty) run of zeros.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{ClientError, RawDepth, ScoredBox};
use crate::geometry::{f32_from_le_bytes, PixelMask};
use crate::raster::RgbImage;
use crate::scene::{PixelRect, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub image_b64: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireBox {
    pub xyxy: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub boxes: Vec<WireBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image_b64: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask_rle: MaskRle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRequest {
    pub image_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthResponse {
    pub width: u32,
    pub height: u32,
    pub depth_f32_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientResponse {
    pub dir: [f64; 3],
}

fn bad(msg: impl Into<String>) -> ClientError {
    ClientError::BadResponse(msg.into())
}

pub fn encode_image(image: &RgbImage) -> String {
    B64.encode(image.encode_for_wire().0)
}

pub fn decode_image(b64: &str) -> Result<RgbImage, ClientError> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| ClientError::InvalidRequest(format!("image_b64: {e}")))?;
    if bytes.starts_with(b"P6") {
        return RgbImage::read_ppm(bytes.as_slice()).map_err(|e| ClientError::InvalidRequest(e.to_string()));
    }
    #[cfg(feature = "png")]
    {
        RgbImage::from_png(&bytes).map_err(|e| ClientError::InvalidRequest(e.to_string()))
    }
    #[cfg(not(feature = "png"))]
    Err(ClientError::InvalidRequest("unsupported image encoding".into()))
}

pub fn rect_to_xyxy(r: &PixelRect) -> [f64; 4] {
    [r.x0, r.y0, r.x1, r.y1]
}

impl DetectResponse {
    pub fn from_boxes(boxes: &[ScoredBox]) -> Self {
        Self {
            boxes: boxes
                .iter()
                .map(|b| WireBox {
                    xyxy: rect_to_xyxy(&b.rect),
                    score: b.confidence,
                })
                .collect(),
        }
    }

    /// Validated candidates clamped to the image, highest score first.
    pub fn into_boxes(self, label: &str, width: u32, height: u32) -> Result<Vec<ScoredBox>, ClientError> {
        let mut out = Vec::with_capacity(self.boxes.len());
        for b in self.boxes {
            let [x0, y0, x1, y1] = b.xyxy;
            if !(b.score.is_finite() && (0.0..=1.0).contains(&b.score)) {
                return Err(bad(format!("score {} outside [0, 1]", b.score)));
            }
            if !b.xyxy.iter().all(|v| v.is_finite()) || x1 < x0 || y1 < y0 {
                return Err(bad(format!("malformed box {:?}", b.xyxy)));
            }
            out.push(ScoredBox {
                rect: PixelRect::new(x0, y0, x1, y1).clamp_to(width, height),
                confidence: b.score,
                label: label.to_string(),
            });
        }
        super::sort_by_confidence(&mut out);
        Ok(out)
    }
}

impl MaskRle {
    pub fn encode(mask: &PixelMask, width: u32, height: u32) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        let mut next = 0u64;
        let total = width as u64 * height as u64;
        for &(u, v) in mask.pixels() {
            let idx = v as u64 * width as u64 + u as u64;
            if current && idx == next {
                run += 1;
                next += 1;
                continue;
            }
            if current {
                counts.push(run);
            }
            // zeros between the previous run and idx
            counts.push(idx - next);
            current = true;
            run = 1;
            next = idx + 1;
        }
        if current {
            counts.push(run);
        }
        if total > next || counts.is_empty() {
            counts.push(total - next);
        }
        Self { height, width, counts }
    }

    pub fn decode(&self) -> Result<PixelMask, ClientError> {
        let total = self.width as u64 * self.height as u64;
        let sum: u64 = self.counts.iter().sum();
        if sum != total {
            return Err(bad(format!("rle covers {sum} pixels, mask has {total}")));
        }
        let mut pixels = Vec::new();
        let mut idx = 0u64;
        for (k, &c) in self.counts.iter().enumerate() {
            if k % 2 == 1 {
                for i in idx..idx + c {
                    pixels.push(((i % self.width as u64) as u32, (i / self.width as u64) as u32));
                }
            }
            idx += c;
        }
        Ok(PixelMask::new(pixels))
    }
}

impl SegmentResponse {
    pub fn into_mask(self, width: u32, height: u32) -> Result<PixelMask, ClientError> {
        if self.mask_rle.width != width || self.mask_rle.height != height {
            return Err(bad(format!(
                "mask is {}x{}, image is {width}x{height}",
                self.mask_rle.width, self.mask_rle.height
            )));
        }
        let mask = self.mask_rle.decode()?;
        if mask.is_empty() {
            return Err(ClientError::MaskEmpty);
        }
        Ok(mask)
    }
}

impl DepthResponse {
    pub fn from_raw(depth: &RawDepth) -> Self {
        let bytes: Vec<u8> = depth.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            width: depth.width,
            height: depth.height,
            depth_f32_b64: B64.encode(bytes),
        }
    }

    pub fn into_raw(self) -> Result<RawDepth, ClientError> {
        let bytes = B64
            .decode(&self.depth_f32_b64)
            .map_err(|e| bad(format!("depth_f32_b64: {e}")))?;
        let expected = self.width as usize * self.height as usize * 4;
        if bytes.len() != expected {
            return Err(bad(format!("depth payload is {} bytes, expected {expected}", bytes.len())));
        }
        let values = f32_from_le_bytes(&bytes);
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(bad(format!("depth value {v} is not positive")));
        }
        Ok(RawDepth {
            width: self.width,
            height: self.height,
            values,
        })
    }
}

impl OrientResponse {
    pub fn into_direction(self) -> Result<Vec3, ClientError> {
        let d = Vec3::from(self.dir);
        let n = d.norm();
        if !n.is_finite() || n < 1e-9 {
            return Err(bad(format!("direction {:?} has no length", self.dir)));
        }
        Ok(d / n)
    }
}
