//! Detection refinement: when several candidates clear the confidence
//! threshold, their crops are tiled into one image and the VLM picks one.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ClientError, ScoredBox, Session, Stage};
use crate::prompt::{parse_index, refine_prompt};
use crate::raster::{RasterError, RgbImage};
use crate::scene::PixelRect;

pub const DEFAULT_THRESHOLD: f64 = 0.15;
pub const DEFAULT_TOP_K: usize = 5;

pub const GRID_GUTTER: u32 = 8;
pub const GRID_CELL: u32 = 128;
const DIGIT_SCALE: u32 = 3;
const HEADER: u32 = 5 * DIGIT_SCALE + GRID_GUTTER;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineSettings {
    /// Candidates need confidence strictly above this.
    pub threshold: f64,
    pub top_k: usize,
}

impl Default for RefineSettings {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            top_k: DEFAULT_TOP_K,
        }
    }
}

/// Candidates that survive the threshold, best first, at most `top_k`.
pub fn survivors(candidates: &[ScoredBox], settings: &RefineSettings) -> Vec<ScoredBox> {
    let mut kept: Vec<ScoredBox> = candidates
        .iter()
        .filter(|c| c.confidence > settings.threshold)
        .cloned()
        .collect();
    super::sort_by_confidence(&mut kept);
    kept.truncate(settings.top_k);
    kept
}

/// One row of crops on white, each scaled to fit a square cell, with its
/// 1-based index drawn above it.
pub fn build_grid(image: &RgbImage, rects: &[PixelRect]) -> Result<RgbImage, RasterError> {
    let n = rects.len() as u32;
    let width = n * GRID_CELL + (n + 1) * GRID_GUTTER;
    let height = GRID_GUTTER + HEADER + GRID_CELL + GRID_GUTTER;
    let mut grid = RgbImage::new(width, height, [255, 255, 255]);
    for (i, rect) in rects.iter().enumerate() {
        let crop = image.crop(rect)?;
        let scale = GRID_CELL as f64 / crop.width().max(crop.height()) as f64;
        let w = ((crop.width() as f64 * scale).round() as u32).clamp(1, GRID_CELL);
        let h = ((crop.height() as f64 * scale).round() as u32).clamp(1, GRID_CELL);
        let x0 = GRID_GUTTER + i as u32 * (GRID_CELL + GRID_GUTTER);
        let y0 = GRID_GUTTER + HEADER;
        grid.blit(&crop.resize_nearest(w, h), x0 + (GRID_CELL - w) / 2, y0 + (GRID_CELL - h) / 2);
        let label = i as u32 + 1;
        let digits = label.to_string().len() as u32;
        let text_w = digits * 4 * DIGIT_SCALE - DIGIT_SCALE;
        grid.draw_number(label, x0 + (GRID_CELL - text_w) / 2, GRID_GUTTER, DIGIT_SCALE, [0, 0, 0]);
    }
    Ok(grid)
}

/// Pick one detection for `label`. A single survivor is returned without a
/// VLM call; an unparseable or out-of-range reply falls back to the most
/// confident survivor and logs a warning.
pub fn refine_detection(
    session: &mut Session<'_>,
    image: &RgbImage,
    label: &str,
    candidates: &[ScoredBox],
    settings: &RefineSettings,
) -> Result<ScoredBox, ClientError> {
    let mut kept = survivors(candidates, settings);
    match kept.len() {
        0 => return Err(ClientError::NoDetection(label.to_string())),
        1 => return Ok(kept.remove(0)),
        _ => {}
    }
    let rects: Vec<PixelRect> = kept.iter().map(|c| c.rect).collect();
    let grid = build_grid(image, &rects).map_err(|e| ClientError::InvalidRequest(format!("refine grid: {e}")))?;
    let reply = session.chat(Stage::Refine, &refine_prompt(label, kept.len()), Some(Arc::new(grid)))?;
    match parse_index(&reply) {
        Some(i) if (1..=kept.len()).contains(&i) => Ok(kept.swap_remove(i - 1)),
        _ => {
            session.warn(
                Stage::Refine,
                format!("could not read a crop index from {reply:?}; keeping the top candidate"),
            );
            Ok(kept.remove(0))
        }
    }
}
