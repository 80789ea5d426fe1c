//! Procedural two-stain images with known ground truth.
//!
//! Used by the test suites, the desk-scale experiment and `classm synth`.
//! Tiles are rendered as H and E concentration fields and pushed through the
//! Beer-Lambert model with a chosen stain basis, so the generating vectors and
//! concentrations are known exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, Vec3};
use crate::od_color::{OdImage, RgbImage, DEFAULT_I0};

/// Unit-normalized H and E reference absorption directions.
pub fn reference_stains() -> (Vec3, Vec3) {
    let vh = linalg::normalize(&[0.651, 0.701, 0.290]).expect("non-zero");
    let ve = linalg::normalize(&[0.092, 0.954, 0.283]).expect("non-zero");
    (vh, ve)
}

/// Reference stains rotated by a few degrees, mimicking slide-to-slide
/// staining variation.
pub fn perturbed_stains(rng: &mut impl Rng, max_deg: f64) -> (Vec3, Vec3) {
    let (vh, ve) = reference_stains();
    let mut jitter = |v: Vec3| -> Vec3 {
        loop {
            let d = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let step = max_deg.to_radians() * rng.random_range(0.0..1.0);
            let cand = linalg::normalize(&linalg::add(&v, &linalg::scale(&d, step))).expect("non-zero");
            if cand.iter().all(|c| *c > 0.0) && linalg::angle_deg(&cand, &v) <= max_deg {
                return cand;
            }
        }
    };
    (jitter(vh), jitter(ve))
}

pub struct SyntheticSlide {
    pub rgb: RgbImage,
    pub od: OdImage,
    pub conc_h: Vec<f64>,
    pub conc_e: Vec<f64>,
}

/// Composes concentrations into OD and RGB (no quantization).
pub fn compose(width: usize, height: usize, conc_h: Vec<f64>, conc_e: Vec<f64>, vh: Vec3, ve: Vec3) -> SyntheticSlide {
    let od_px: Vec<[f64; 3]> = conc_h
        .iter()
        .zip(&conc_e)
        .map(|(&a, &b)| linalg::add(&linalg::scale(&vh, a), &linalg::scale(&ve, b)))
        .collect();
    let od = OdImage::new(width, height, od_px).expect("non-negative concentrations");
    let rgb = crate::od_color::od_to_rgb(&od, [DEFAULT_I0; 3]).expect("valid OD");
    SyntheticSlide { rgb, od, conc_h, conc_e }
}

/// Independent uniform concentrations in `[0, max_conc)` for both stains.
pub fn uniform_two_stain_slide(width: usize, height: usize, vh: Vec3, ve: Vec3, max_conc: f64, seed: u64) -> SyntheticSlide {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = width * height;
    let mut conc_h = Vec::with_capacity(n);
    let mut conc_e = Vec::with_capacity(n);
    for _ in 0..n {
        conc_h.push(rng.random_range(0.0..max_conc));
        conc_e.push(rng.random_range(0.0..max_conc));
    }
    compose(width, height, conc_h, conc_e, vh, ve)
}

/// Per-class texture statistics. Classes differ in nucleus density, size and
/// elongation (H) and in cytoplasm texture (E).
#[derive(Debug, Clone, Copy)]
struct ClassTexture {
    nuclei_per_kpx: f64,
    radius: f64,
    elongation: f64,
    eosin_level: f64,
    speckle: f64,
    stripes: f64,
}

const CLASS_TEXTURES: [ClassTexture; 4] = [
    ClassTexture { nuclei_per_kpx: 2.0, radius: 1.6, elongation: 1.0, eosin_level: 0.45, speckle: 0.05, stripes: 0.0 },
    ClassTexture { nuclei_per_kpx: 5.5, radius: 2.2, elongation: 1.0, eosin_level: 0.30, speckle: 0.25, stripes: 0.0 },
    ClassTexture { nuclei_per_kpx: 3.5, radius: 1.8, elongation: 2.6, eosin_level: 0.38, speckle: 0.05, stripes: 0.30 },
    ClassTexture { nuclei_per_kpx: 1.0, radius: 3.0, elongation: 1.4, eosin_level: 0.20, speckle: 0.35, stripes: 0.10 },
];

pub const MAX_TEXTURE_CLASSES: usize = CLASS_TEXTURES.len();

/// How class identity is encoded in the texture.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureStyle {
    /// Each class has its own nucleus density, size, elongation and
    /// cytoplasm statistics, varied per tile around the class mean.
    #[default]
    Statistics,
    /// Nucleus size (and with it density) and cytoplasm staining level
    /// follow interleaved spiral arms, one arm per class.
    Interleaved,
}

#[derive(Debug, Clone, Copy)]
pub struct TextureOptions {
    /// 0 keeps classes fully distinct; 1 makes them identical. For the
    /// interleaved style this scales the spread around each arm.
    pub overlap: f64,
    /// Std. dev. of additive per-pixel concentration noise.
    pub noise: f64,
    /// Magnification factor applied to nucleus size, spacing and stripe period.
    pub scale: f64,
    pub style: TextureStyle,
}

impl Default for TextureOptions {
    fn default() -> Self {
        Self { overlap: 0.4, noise: 0.04, scale: 1.0, style: TextureStyle::Statistics }
    }
}

fn blend(class: &ClassTexture, mean: &ClassTexture, t: f64) -> ClassTexture {
    let m = |a: f64, b: f64| a + (b - a) * t;
    ClassTexture {
        nuclei_per_kpx: m(class.nuclei_per_kpx, mean.nuclei_per_kpx),
        radius: m(class.radius, mean.radius),
        elongation: m(class.elongation, mean.elongation),
        eosin_level: m(class.eosin_level, mean.eosin_level),
        speckle: m(class.speckle, mean.speckle),
        stripes: m(class.stripes, mean.stripes),
    }
}

/// Concrete parameters of one rendered tile.
struct TileParams {
    count: usize,
    radius: f64,
    /// Relative per-nucleus spread of the radius.
    radius_spread: f64,
    elongation: f64,
    elongation_spread: f64,
    eosin_level: f64,
    stripes: f64,
    speckle: f64,
    scale: f64,
}

fn vary(rng: &mut impl Rng, v: f64, rel: f64) -> f64 {
    v * (1.0 + rel * (rng.random::<f64>() * 2.0 - 1.0))
}

fn render(size: usize, p: &TileParams, noise_sd: f64, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let n = size * size;
    let mut h = vec![0.04; n];
    let mut nucleus_mask = vec![0.0f64; n];
    let orientation = rng.random_range(0.0..std::f64::consts::PI);
    for _ in 0..p.count {
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let r = vary(rng, p.radius, p.radius_spread).max(0.6);
        let elong = vary(rng, p.elongation, p.elongation_spread).max(1.0);
        let (a, b) = (r * elong.sqrt(), r / elong.sqrt());
        let phi = orientation + rng.random_range(-0.3..0.3);
        let (cs, sn) = (phi.cos(), phi.sin());
        let amp = rng.random_range(0.6..1.0);
        let reach = a.max(b) * 1.6 + 1.0;
        let (x0, x1) = ((cx - reach).floor().max(0.0) as usize, ((cx + reach).ceil() as usize).min(size));
        let (y0, y1) = ((cy - reach).floor().max(0.0) as usize, ((cy + reach).ceil() as usize).min(size));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (dx * cs + dy * sn) / a;
                let v = (-dx * sn + dy * cs) / b;
                let d2 = u * u + v * v;
                let w = (-(d2 * d2)).exp();
                let i = y * size + x;
                h[i] += amp * w;
                nucleus_mask[i] = nucleus_mask[i].max(w);
            }
        }
    }

    let freq = rng.random_range(0.12..0.2) / p.scale;
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());
    let noise = Normal::new(0.0, 1.0).expect("valid");
    let raw: Vec<f64> = (0..n).map(|_| noise.sample(rng)).collect();
    // 3x3 box blur gives grain a couple of pixels wide.
    let mut speckle = vec![0.0; n];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(size) {
                for xx in x.saturating_sub(1)..(x + 2).min(size) {
                    acc += raw[yy * size + xx];
                    cnt += 1.0;
                }
            }
            speckle[y * size + x] = acc / cnt * 1.8;
        }
    }
    let mut e = vec![0.0; n];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let s = (std::f64::consts::TAU * freq * (x as f64 * ct + y as f64 * st) + phase).sin();
            let tex_v = 1.0 + p.stripes * s + p.speckle * speckle[i];
            e[i] = p.eosin_level * tex_v * (1.0 - 0.6 * nucleus_mask[i]);
        }
    }
    for i in 0..n {
        h[i] = (h[i] + noise_sd * noise.sample(rng)).max(0.0);
        e[i] = (e[i] + noise_sd * noise.sample(rng)).max(0.0);
    }
    (h, e)
}

/// Fraction of a full turn covered by each interleaved arm.
const ARM_TURN: f64 = 0.5;

/// Point `(u, v)` in the unit square on the arm of `class`, at arm position `t`.
pub fn arm_point(class: usize, num_classes: usize, t: f64) -> (f64, f64) {
    let theta = std::f64::consts::TAU * (class as f64 / num_classes as f64 + ARM_TURN * t);
    let rho = 0.15 + 0.8 * t;
    (0.5 + 0.5 * rho * theta.cos(), 0.5 + 0.5 * rho * theta.sin())
}

fn interleaved_params(class: usize, num_classes: usize, size: usize, opts: &TextureOptions, rng: &mut impl Rng) -> TileParams {
    let jitter = Normal::new(0.0, 0.05 * opts.overlap + 1e-9).expect("valid");
    let t: f64 = rng.random();
    let (u, v) = arm_point(class, num_classes, t);
    let (u, v) = ((u + jitter.sample(rng)).clamp(0.0, 1.0), (v + jitter.sample(rng)).clamp(0.0, 1.0));
    let radius = (1.2 + 1.8 * u) * opts.scale;
    let eosin_level = 0.15 + 0.45 * v;
    // Roughly constant nuclear coverage, so nucleus count carries the size signal only.
    let coverage = rng.random_range(0.15..0.3);
    let count = (coverage * (size * size) as f64 / (std::f64::consts::PI * radius * radius)).round() as usize;
    TileParams {
        count,
        radius,
        radius_spread: 0.08,
        elongation: rng.random_range(1.0..2.5),
        elongation_spread: 0.1,
        eosin_level,
        stripes: rng.random_range(0.0..0.3),
        speckle: rng.random_range(0.05..0.3),
        scale: opts.scale,
    }
}

fn statistics_params(class: usize, num_classes: usize, size: usize, opts: &TextureOptions, rng: &mut impl Rng) -> TileParams {
    let used = &CLASS_TEXTURES[..num_classes];
    let k = num_classes as f64;
    let mean = ClassTexture {
        nuclei_per_kpx: used.iter().map(|c| c.nuclei_per_kpx).sum::<f64>() / k,
        radius: used.iter().map(|c| c.radius).sum::<f64>() / k,
        elongation: used.iter().map(|c| c.elongation).sum::<f64>() / k,
        eosin_level: used.iter().map(|c| c.eosin_level).sum::<f64>() / k,
        speckle: used.iter().map(|c| c.speckle).sum::<f64>() / k,
        stripes: used.iter().map(|c| c.stripes).sum::<f64>() / k,
    };
    let tex = blend(&used[class], &mean, opts.overlap);
    let area = (size * size) as f64 / 1000.0 / (opts.scale * opts.scale);
    TileParams {
        count: vary(rng, tex.nuclei_per_kpx * area, 0.35).round().max(0.0) as usize,
        radius: tex.radius * opts.scale,
        radius_spread: 0.3,
        elongation: tex.elongation,
        elongation_spread: 0.2,
        eosin_level: vary(rng, tex.eosin_level, 0.25),
        stripes: tex.stripes,
        speckle: tex.speckle,
        scale: opts.scale,
    }
}

/// H and E concentration fields (row-major) for one tile of class `class`.
pub fn class_texture(class: usize, num_classes: usize, size: usize, opts: &TextureOptions, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    assert!(class < num_classes && num_classes <= MAX_TEXTURE_CLASSES);
    let params = match opts.style {
        TextureStyle::Statistics => statistics_params(class, num_classes, size, opts, rng),
        TextureStyle::Interleaved => interleaved_params(class, num_classes, size, opts, rng),
    };
    render(size, &params, opts.noise, rng)
}

/// One RGB tile of the given class rendered with stains `(vh, ve)`.
pub fn class_tile(class: usize, num_classes: usize, size: usize, stains: (Vec3, Vec3), opts: &TextureOptions, rng: &mut impl Rng) -> RgbImage {
    let (h, e) = class_texture(class, num_classes, size, opts, rng);
    compose(size, size, h, e, stains.0, stains.1).rgb
}
