//! Two-stage augmentation: color jitter on the RGB tile before separation,
//! then independent geometric and brightness augmentation of the H and E images.
//!
//! Every function takes its random stream explicitly. Draws happen in a fixed
//! order whether or not the corresponding operation is enabled, so toggling one
//! option never shifts the draws of another.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::od_color::RgbImage;
use crate::separation::ConcentrationImage;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Rotation {
    None,
    /// Multiples of 90 degrees; no resampling.
    RightAngle,
    /// Uniform angle in `[-max_degrees, max_degrees]`, bilinear with reflect padding.
    Continuous { max_degrees: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub rgb_brightness_jitter: f64,
    pub rgb_contrast_jitter: f64,
    pub rgb_saturation_jitter: f64,
    pub crop_size: usize,
    pub rotation: Rotation,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub he_brightness_jitter: f64,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            rgb_brightness_jitter: 0.15,
            rgb_contrast_jitter: 0.15,
            rgb_saturation_jitter: 0.15,
            crop_size: 256,
            rotation: Rotation::RightAngle,
            flip_horizontal: true,
            flip_vertical: true,
            he_brightness_jitter: 0.15,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// No jitter, no rotation or flips; crops the full tile.
    pub fn identity(crop_size: usize) -> Self {
        Self {
            rgb_brightness_jitter: 0.0,
            rgb_contrast_jitter: 0.0,
            rgb_saturation_jitter: 0.0,
            crop_size,
            rotation: Rotation::None,
            flip_horizontal: false,
            flip_vertical: false,
            he_brightness_jitter: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let jitters = [
            ("rgb_brightness_jitter", self.rgb_brightness_jitter),
            ("rgb_contrast_jitter", self.rgb_contrast_jitter),
            ("rgb_saturation_jitter", self.rgb_saturation_jitter),
            ("he_brightness_jitter", self.he_brightness_jitter),
        ];
        for (name, v) in jitters {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.crop_size == 0 {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        if let Rotation::Continuous { max_degrees } = self.rotation {
            if !(0.0..=180.0).contains(&max_degrees) {
                return Err(Error::Config(format!("max_degrees must lie in [0, 180], got {max_degrees}")));
            }
        }
        Ok(())
    }

    pub fn has_rgb_jitter(&self) -> bool {
        self.rgb_brightness_jitter > 0.0 || self.rgb_contrast_jitter > 0.0 || self.rgb_saturation_jitter > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl JitterFactors {
    pub const IDENTITY: JitterFactors = JitterFactors {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };
}

fn factor(rng: &mut impl Rng, magnitude: f64) -> f64 {
    let u: f64 = rng.random();
    if magnitude == 0.0 {
        1.0
    } else {
        1.0 + magnitude * (2.0 * u - 1.0)
    }
}

/// Brightness, then contrast, then saturation; each clamps to `[0, I0]`.
/// A factor of exactly 1 leaves the image untouched.
pub fn apply_rgb_jitter(img: &RgbImage, f: &JitterFactors) -> RgbImage {
    let mut out = img.clone();
    if f.brightness != 1.0 {
        let b = f.brightness;
        out = out.map_pixels(|p| [p[0] * b, p[1] * b, p[2] * b]);
    }
    if f.contrast != 1.0 {
        let n = out.pixels().len() as f64;
        let mean = out.pixels().iter().map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).sum::<f64>() / n;
        let c = f.contrast;
        out = out.map_pixels(|p| [mean + c * (p[0] - mean), mean + c * (p[1] - mean), mean + c * (p[2] - mean)]);
    }
    if f.saturation != 1.0 {
        let s = f.saturation;
        out = out.map_pixels(|p| {
            let l = LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2];
            [l + s * (p[0] - l), l + s * (p[1] - l), l + s * (p[2] - l)]
        });
    }
    out
}

pub fn jitter_rgb(img: &RgbImage, policy: &AugmentPolicy, rng: &mut impl Rng) -> (RgbImage, JitterFactors) {
    let factors = JitterFactors {
        brightness: factor(rng, policy.rgb_brightness_jitter),
        contrast: factor(rng, policy.rgb_contrast_jitter),
        saturation: factor(rng, policy.rgb_saturation_jitter),
    };
    (apply_rgb_jitter(img, &factors), factors)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelDraws {
    /// Counter-clockwise quarter turns (right-angle mode).
    pub quarter_turns: u8,
    /// Rotation angle in degrees (continuous mode).
    pub angle_deg: f64,
    pub crop_x: usize,
    pub crop_y: usize,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub brightness: f64,
}

/// Every random draw made for one augmented sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawLog {
    pub rgb: Option<JitterFactors>,
    pub h: ChannelDraws,
    pub e: ChannelDraws,
}

impl DrawLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("draw log serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub h: ConcentrationImage,
    pub e: ConcentrationImage,
    pub draw_log: DrawLog,
}

/// Plain single-channel raster used internally.
#[derive(Debug, Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f32>,
}

impl Plane {
    fn at(&self, x: usize, y: usize) -> f32 {
        self.v[y * self.w + x]
    }
}

fn rotate_quarter(p: &Plane, turns: u8) -> Plane {
    match turns % 4 {
        0 => p.clone(),
        // 90 deg counter-clockwise: out(x, y) = in(w-1-y, x)
        1 => {
            let (w, h) = (p.h, p.w);
            let mut v = Vec::with_capacity(w * h);
            for y in 0..h {
                for x in 0..w {
                    v.push(p.at(p.w - 1 - y, x));
                }
            }
            Plane { w, h, v }
        }
        2 => {
            let v = p.v.iter().rev().copied().collect();
            Plane { w: p.w, h: p.h, v }
        }
        _ => {
            let (w, h) = (p.h, p.w);
            let mut v = Vec::with_capacity(w * h);
            for y in 0..h {
                for x in 0..w {
                    v.push(p.at(y, p.h - 1 - x));
                }
            }
            Plane { w, h, v }
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn rotate_continuous(p: &Plane, angle_deg: f64) -> Plane {
    if angle_deg == 0.0 {
        return p.clone();
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    let cx = (p.w as f64 - 1.0) / 2.0;
    let cy = (p.h as f64 - 1.0) / 2.0;
    let mut v = Vec::with_capacity(p.w * p.h);
    for y in 0..p.h {
        for x in 0..p.w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // inverse mapping
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let g = |xx: isize, yy: isize| p.at(reflect(xx, p.w), reflect(yy, p.h)) as f64;
            let top = g(x0, y0) * (1.0 - fx) + g(x0 + 1, y0) * fx;
            let bottom = g(x0, y0 + 1) * (1.0 - fx) + g(x0 + 1, y0 + 1) * fx;
            v.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32);
        }
    }
    Plane { w: p.w, h: p.h, v }
}

fn crop_plane(p: &Plane, x0: usize, y0: usize, size: usize) -> Plane {
    let mut v = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        v.extend_from_slice(&p.v[y * p.w + x0..y * p.w + x0 + size]);
    }
    Plane { w: size, h: size, v }
}

fn augment_channel(img: &ConcentrationImage, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<(ConcentrationImage, ChannelDraws)> {
    let crop = policy.crop_size;
    let min_side = img.width.min(img.height);
    let needs = match policy.rotation {
        Rotation::RightAngle => crop <= min_side,
        _ => crop <= img.width && crop <= img.height,
    };
    if !needs {
        return Err(Error::InvalidInput(format!(
            "tile {}x{} is smaller than crop size {crop}",
            img.width, img.height
        )));
    }
    // Fixed draw order: rotation, crop x, crop y, flips, brightness.
    let rot_u: f64 = rng.random();
    let crop_u: (f64, f64) = (rng.random(), rng.random());
    let flip_u: (f64, f64) = (rng.random(), rng.random());
    let bright = factor(rng, policy.he_brightness_jitter);

    let mut draws = ChannelDraws {
        quarter_turns: 0,
        angle_deg: 0.0,
        crop_x: 0,
        crop_y: 0,
        flip_horizontal: policy.flip_horizontal && flip_u.0 < 0.5,
        flip_vertical: policy.flip_vertical && flip_u.1 < 0.5,
        brightness: bright,
    };
    let plane = Plane {
        w: img.width,
        h: img.height,
        v: img.values.clone(),
    };
    let rotated = match policy.rotation {
        Rotation::None => plane,
        Rotation::RightAngle => {
            draws.quarter_turns = ((rot_u * 4.0) as u8).min(3);
            rotate_quarter(&plane, draws.quarter_turns)
        }
        Rotation::Continuous { max_degrees } => {
            draws.angle_deg = max_degrees * (2.0 * rot_u - 1.0);
            rotate_continuous(&plane, draws.angle_deg)
        }
    };
    let span_x = rotated.w - crop;
    let span_y = rotated.h - crop;
    draws.crop_x = ((crop_u.0 * (span_x + 1) as f64) as usize).min(span_x);
    draws.crop_y = ((crop_u.1 * (span_y + 1) as f64) as usize).min(span_y);
    let mut out = crop_plane(&rotated, draws.crop_x, draws.crop_y, crop);
    if draws.flip_horizontal {
        for row in out.v.chunks_exact_mut(crop) {
            row.reverse();
        }
    }
    if draws.flip_vertical {
        let rows: Vec<Vec<f32>> = out.v.chunks_exact(crop).rev().map(|r| r.to_vec()).collect();
        out.v = rows.concat();
    }
    if bright != 1.0 {
        for v in &mut out.v {
            *v = (*v as f64 * bright).clamp(0.0, 1.0) as f32;
        }
    }
    let result = ConcentrationImage::new(crop, crop, out.v, img.stain, img.slide_id.clone())?;
    Ok((result, draws))
}

/// Augments H and E independently: rotate, crop, flip, brightness.
pub fn augment_he_pair(
    h_full: &ConcentrationImage,
    e_full: &ConcentrationImage,
    policy: &AugmentPolicy,
    rng_h: &mut impl Rng,
    rng_e: &mut impl Rng,
) -> Result<AugmentedPair> {
    let (h, h_draws) = augment_channel(h_full, policy, rng_h)?;
    let (e, e_draws) = augment_channel(e_full, policy, rng_e)?;
    Ok(AugmentedPair {
        h,
        e,
        draw_log: DrawLog {
            rgb: None,
            h: h_draws,
            e: e_draws,
        },
    })
}

/// Deterministic center crop used for evaluation.
pub fn center_crop(img: &ConcentrationImage, size: usize) -> Result<ConcentrationImage> {
    if size == 0 || size > img.width || size > img.height {
        return Err(Error::InvalidInput(format!(
            "cannot center-crop {}x{} to {size}",
            img.width, img.height
        )));
    }
    let x0 = (img.width - size) / 2;
    let y0 = (img.height - size) / 2;
    let plane = Plane {
        w: img.width,
        h: img.height,
        v: img.values.clone(),
    };
    let out = crop_plane(&plane, x0, y0, size);
    ConcentrationImage::new(size, size, out.v, img.stain, img.slide_id.clone())
}
