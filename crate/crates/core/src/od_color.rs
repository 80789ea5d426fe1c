//! Beer-Lambert conversion between RGB transmitted intensities and optical density.
//!
//! Intensities are kept in double precision. `OD_c = log10(I0_c / max(I_c, floor))`.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};

pub const DEFAULT_I0: f64 = 255.0;
pub const DEFAULT_INTENSITY_FLOOR: f64 = 1.0;

/// RGB intensities in `[0, I0]` per channel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
    i0: [f64; 3],
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>, i0: [f64; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                pixels.len()
            )));
        }
        if i0.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "background intensity must be positive and finite, got {i0:?}"
            )));
        }
        for (idx, px) in pixels.iter().enumerate() {
            for c in 0..3 {
                let v = px[c];
                if !(0.0..=i0[c]).contains(&v) {
                    return Err(Error::InvalidInput(format!(
                        "pixel {idx} channel {c} intensity {v} outside [0, {}]",
                        i0[c]
                    )));
                }
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
            i0,
        })
    }

    /// Builds an image by evaluating `f(x, y)`; values are clamped into `[0, I0]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        i0: [f64; 3],
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let p = f(x, y);
                pixels.push([
                    p[0].clamp(0.0, i0[0]),
                    p[1].clamp(0.0, i0[1]),
                    p[2].clamp(0.0, i0[2]),
                ]);
            }
        }
        Self::new(width, height, pixels, i0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn i0(&self) -> [f64; 3] {
        self.i0
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    /// Applies `f` to every pixel and clamps the result back into `[0, I0]`.
    pub fn map_pixels(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> RgbImage {
        let i0 = self.i0;
        let pixels = self
            .pixels
            .iter()
            .map(|&p| {
                let q = f(p);
                [
                    q[0].clamp(0.0, i0[0]),
                    q[1].clamp(0.0, i0[1]),
                    q[2].clamp(0.0, i0[2]),
                ]
            })
            .collect();
        RgbImage {
            width: self.width,
            height: self.height,
            pixels,
            i0,
        }
    }

    /// Copies the `w`x`h` window with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<RgbImage> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidInput(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let row = y * self.width;
            pixels.extend_from_slice(&self.pixels[row + x0..row + x0 + w]);
        }
        Ok(RgbImage {
            width: w,
            height: h,
            pixels,
            i0: self.i0,
        })
    }

    /// Quantizes to 8 bits, mapping `I0` to 255.
    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let mut out = ImageBuffer::new(self.width as u32, self.height as u32);
        for (i, px) in out.pixels_mut().enumerate() {
            let p = self.pixels[i];
            let q = |c: usize| (p[c] / self.i0[c] * 255.0).round().clamp(0.0, 255.0) as u8;
            *px = Rgb([q(0), q(1), q(2)]);
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Optical densities per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl OdImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "OD image {width}x{height} with {} pixels",
                pixels.len()
            )));
        }
        if let Some(idx) = pixels
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite() || *v < 0.0))
        {
            return Err(Error::InvalidInput(format!(
                "OD pixel {idx} is negative or non-finite: {:?}",
                pixels[idx]
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }
}

#[inline]
pub fn od_of(intensity: f64, i0: f64, intensity_floor: f64) -> f64 {
    // I <= I0 keeps this non-negative; the max() only guards against I == 0.
    (i0 / intensity.max(intensity_floor)).log10().max(0.0)
}

#[inline]
pub fn od_norm(od: &[f64; 3]) -> f64 {
    (od[0] * od[0] + od[1] * od[1] + od[2] * od[2]).sqrt()
}

pub fn rgb_to_od(img: &RgbImage, intensity_floor: f64) -> Result<OdImage> {
    if !(intensity_floor > 0.0) || !intensity_floor.is_finite() {
        return Err(Error::InvalidInput(format!(
            "intensity floor must be positive, got {intensity_floor}"
        )));
    }
    let i0 = img.i0;
    let pixels = img
        .pixels
        .iter()
        .map(|p| {
            [
                od_of(p[0], i0[0], intensity_floor),
                od_of(p[1], i0[1], intensity_floor),
                od_of(p[2], i0[2], intensity_floor),
            ]
        })
        .collect();
    Ok(OdImage {
        width: img.width,
        height: img.height,
        pixels,
    })
}

pub fn od_to_rgb(od: &OdImage, i0: [f64; 3]) -> Result<RgbImage> {
    let pixels = od
        .pixels
        .iter()
        .map(|p| {
            [
                i0[0] * 10f64.powf(-p[0]),
                i0[1] * 10f64.powf(-p[1]),
                i0[2] * 10f64.powf(-p[2]),
            ]
        })
        .collect();
    RgbImage::new(od.width, od.height, pixels, i0)
}

/// Reads an 8- or 16-bit PNG/TIFF. 16-bit data is rescaled so the file's white
/// point (65535) maps to `i0`; 8-bit white (255) likewise.
pub fn load_rgb(path: &Path, i0: [f64; 3]) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    from_dynamic(&img, i0)
}

pub fn from_dynamic(img: &DynamicImage, i0: [f64; 3]) -> Result<RgbImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<[f64; 3]> = match img {
        DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_) => img
            .to_rgb16()
            .pixels()
            .map(|p| {
                [
                    p[0] as f64 / 65535.0 * i0[0],
                    p[1] as f64 / 65535.0 * i0[1],
                    p[2] as f64 / 65535.0 * i0[2],
                ]
            })
            .collect(),
        _ => img
            .to_rgb8()
            .pixels()
            .map(|p| {
                [
                    p[0] as f64 / 255.0 * i0[0],
                    p[1] as f64 / 255.0 * i0[1],
                    p[2] as f64 / 255.0 * i0[2],
                ]
            })
            .collect(),
    };
    RgbImage::new(w, h, pixels, i0)
}
