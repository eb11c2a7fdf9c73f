//! Digital surface model: top-down max-height raster over the xz plane.

use std::path::Path;

use nalgebra::Point3;
use serde::Serialize;

use super::EvalError;
use crate::partition::GridAxis;
use crate::pfm::FloatImage;

pub const DSM_NO_DATA: f64 = -9999.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dsm {
    /// Lower x and z of the raster.
    pub origin: [f64; 2],
    pub cell: f64,
    /// Columns run along x.
    pub cols: usize,
    /// Rows run along z.
    pub rows: usize,
    #[serde(skip)]
    pub heights: Vec<f64>,
}

impl Dsm {
    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        let v = self.heights[row * self.cols + col];
        (v != DSM_NO_DATA).then_some(v)
    }

    pub fn filled_cells(&self) -> usize {
        self.heights.iter().filter(|&&v| v != DSM_NO_DATA).count()
    }

    /// Single-channel float raster, row 0 at the lowest z.
    pub fn to_pfm(&self) -> FloatImage {
        FloatImage {
            width: self.cols,
            height: self.rows,
            channels: 1,
            data: self.heights.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Colour-ramped preview; no-data cells are black.
    pub fn to_png(&self) -> image::RgbImage {
        let valid: Vec<f64> = self.heights.iter().copied().filter(|&v| v != DSM_NO_DATA).collect();
        let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        image::RgbImage::from_fn(self.cols as u32, self.rows as u32, |x, y| {
            let v = self.heights[y as usize * self.cols + x as usize];
            if v == DSM_NO_DATA {
                return image::Rgb([0, 0, 0]);
            }
            image::Rgb(ramp((v - lo) / span))
        })
    }

    pub fn write(&self, pfm_path: &Path, png_path: Option<&Path>) -> Result<(), EvalError> {
        self.to_pfm()
            .write(pfm_path)
            .map_err(|e| EvalError::Io(e.to_string()))?;
        if let Some(p) = png_path {
            self.to_png().save(p).map_err(|e| EvalError::Io(e.to_string()))?;
        }
        Ok(())
    }
}

/// Blue to cyan to yellow to red.
fn ramp(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 255.0], [0.0, 255.0, 255.0], [255.0, 255.0, 0.0], [255.0, 0.0, 0.0]];
    let s = t * 3.0;
    let i = (s.floor() as usize).min(2);
    let f = s - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (stops[i][c] + (stops[i + 1][c] - stops[i][c]) * f).round() as u8;
    }
    out
}

/// Rasterizes the maximum `y` per xz cell over the points' bounding box.
pub fn generate_dsm(points: &[Point3<f64>], cell: f64) -> Result<Dsm, EvalError> {
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(EvalError::InvalidConfig(format!("DSM cell must be positive, got {cell}")));
    }
    if points.is_empty() {
        return Ok(Dsm {
            origin: [0.0, 0.0],
            cell,
            cols: 0,
            rows: 0,
            heights: Vec::new(),
        });
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for (k, a) in [0usize, 2].into_iter().enumerate() {
            lo[k] = lo[k].min(p[a]);
            hi[k] = hi[k].max(p[a]);
        }
    }
    let count = |k: usize| (((hi[k] - lo[k]) / cell).ceil() as usize).max(1);
    let (cols, rows) = (count(0), count(1));
    let ax = GridAxis::new(lo[0], lo[0] + cols as f64 * cell, cols);
    let az = GridAxis::new(lo[1], lo[1] + rows as f64 * cell, rows);
    let mut heights = vec![DSM_NO_DATA; cols * rows];
    for p in points {
        let (Some(r), Some(c)) = (az.cell_of(p.z), ax.cell_of(p.x)) else {
            continue;
        };
        let i = r * cols + c;
        if heights[i] == DSM_NO_DATA || p.y > heights[i] {
            heights[i] = p.y;
        }
    }
    Ok(Dsm {
        origin: lo,
        cell,
        cols,
        rows,
        heights,
    })
}
