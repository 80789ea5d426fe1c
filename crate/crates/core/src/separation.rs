//! Projection of RGB tiles onto a slide's stain basis.

use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::od_color::{od_of, OdImage, RgbImage};
use crate::stain_model::{percentile_in_place, StainBasis};

/// Percentile of raw concentration used as the "maximum".
pub const NORM_PERCENTILE: f64 = 0.99;
/// The percentile concentration maps to this value after normalization.
pub const NORM_TARGET: f64 = 0.5;
const MIN_NORM_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stain {
    H,
    E,
}

/// Unclamped per-pixel stain concentrations; the residual coordinate is dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConcentrations {
    pub width: usize,
    pub height: usize,
    pub h: Vec<f64>,
    pub e: Vec<f64>,
}

/// Normalized single-stain image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub stain: Stain,
    /// Slide whose basis produced these values.
    pub slide_id: String,
}

impl ConcentrationImage {
    pub fn new(width: usize, height: usize, values: Vec<f32>, stain: Stain, slide_id: impl Into<String>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "concentration image {width}x{height} with {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(format!(
                "concentration {} at index {i} outside [0, 1]",
                values[i]
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            stain,
            slide_id: slide_id.into(),
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Writes a 16-bit grayscale PNG (1.0 maps to 65535).
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(x as usize, y as usize) as f64;
            Luma([(v * 65535.0).round().clamp(0.0, 65535.0) as u16])
        });
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn separate_od(od: &OdImage, basis: &StainBasis) -> RawConcentrations {
    let m = &basis.rgb_to_heres_od;
    let n = od.pixels().len();
    let mut h = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    for p in od.pixels() {
        h.push(linalg::dot(&m[0], p));
        e.push(linalg::dot(&m[1], p));
    }
    RawConcentrations {
        width: od.width(),
        height: od.height(),
        h,
        e,
    }
}

pub fn separate_concentrations(img: &RgbImage, basis: &StainBasis) -> RawConcentrations {
    let m = &basis.rgb_to_heres_od;
    let i0 = img.i0();
    let floor = basis.params.intensity_floor;
    let n = img.pixels().len();
    let mut h = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    for p in img.pixels() {
        let od = [od_of(p[0], i0[0], floor), od_of(p[1], i0[1], floor), od_of(p[2], i0[2], floor)];
        h.push(linalg::dot(&m[0], &od));
        e.push(linalg::dot(&m[1], &od));
    }
    RawConcentrations {
        width: img.width(),
        height: img.height(),
        h,
        e,
    }
}

#[inline]
pub fn normalize_value(raw: f64, norm: f64) -> f64 {
    (raw * NORM_TARGET / norm).clamp(0.0, 1.0)
}

pub fn normalize_concentrations(
    raw: &[f64],
    width: usize,
    height: usize,
    norm: f64,
    stain: Stain,
    slide_id: &str,
) -> Result<ConcentrationImage> {
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidBasis(format!("normalization constant must be positive, got {norm}")));
    }
    let values = raw.iter().map(|&r| normalize_value(r, norm) as f32).collect();
    ConcentrationImage::new(width, height, values, stain, slide_id)
}

/// Exact 99th percentile with linear interpolation between order statistics.
pub fn compute_norm(values: &[f64]) -> Result<f64> {
    if values.len() < MIN_NORM_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_NORM_SAMPLES} values for the normalization percentile, got {}",
            values.len()
        )));
    }
    let mut scratch = values.to_vec();
    percentile_in_place(&mut scratch, NORM_PERCENTILE)
        .ok_or_else(|| Error::InvalidInput("empty concentration pool".into()))
}

/// Separation plus per-slide normalization of one tile.
pub fn separate_tile(img: &RgbImage, basis: &StainBasis) -> Result<(ConcentrationImage, ConcentrationImage)> {
    let raw = separate_concentrations(img, basis);
    let h = normalize_concentrations(&raw.h, raw.width, raw.height, basis.norm_h()?, Stain::H, &basis.slide_id)?;
    let e = normalize_concentrations(&raw.e, raw.width, raw.height, basis.norm_e()?, Stain::E, &basis.slide_id)?;
    Ok((h, e))
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: RgbImage,
    /// The concentrations came from a different slide than the basis.
    pub cross_basis: bool,
}

/// Recomposes RGB from H and E with a zero residual.
pub fn reconstruct_rgb(h: &ConcentrationImage, e: &ConcentrationImage, basis: &StainBasis) -> Result<Reconstruction> {
    if h.width != e.width || h.height != e.height {
        return Err(Error::InvalidInput(format!(
            "H is {}x{} but E is {}x{}",
            h.width, h.height, e.width, e.height
        )));
    }
    let scale_h = basis.norm_h()? / NORM_TARGET;
    let scale_e = basis.norm_e()? / NORM_TARGET;
    let raw_h: Vec<f64> = h.values.iter().map(|&v| v as f64 * scale_h).collect();
    let raw_e: Vec<f64> = e.values.iter().map(|&v| v as f64 * scale_e).collect();
    let image = reconstruct_from_raw(&raw_h, &raw_e, h.width, h.height, basis)?;
    let cross_basis = h.slide_id != basis.slide_id || e.slide_id != basis.slide_id;
    Ok(Reconstruction { image, cross_basis })
}

/// RGB from raw (un-normalized) concentrations.
pub fn reconstruct_from_raw(raw_h: &[f64], raw_e: &[f64], width: usize, height: usize, basis: &StainBasis) -> Result<RgbImage> {
    let i0 = basis.params.i0;
    let (vh, ve) = (basis.v_h, basis.v_e);
    RgbImage::from_fn(width, height, i0, |x, y| {
        let i = y * width + x;
        let od = linalg::add(&linalg::scale(&vh, raw_h[i].max(0.0)), &linalg::scale(&ve, raw_e[i].max(0.0)));
        [
            i0[0] * 10f64.powf(-od[0]),
            i0[1] * 10f64.powf(-od[1]),
            i0[2] * 10f64.powf(-od[2]),
        ]
    })
}
