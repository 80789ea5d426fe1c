//! Per-slide estimation of Hematoxylin/Eosin stain vectors.
//!
//! The pipeline is: OD conversion, plane fit through the origin (leading two
//! eigenvectors of the OD second-moment matrix), robust angle percentiles on
//! that plane, and finally the HERes basis matrix and its inverse. The 99th
//! percentile concentrations of the same pixel pool are frozen into the basis
//! so every tile of a slide is normalized identically.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, RwLock};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Vec3};
use crate::od_color::{self, od_norm, OdImage, RgbImage};
use crate::rng;
use crate::separation;

pub const MIN_FOREGROUND_PIXELS: usize = 100;
pub const MAX_BASIS_PIXELS: usize = 2_000_000;
const MIN_ANGULAR_SPREAD_DEG: f64 = 1.0;
const COLLINEAR_COS: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StainParams {
    pub outlier_fraction: f64,
    pub min_od_norm: f64,
    pub intensity_floor: f64,
    pub i0: [f64; 3],
    pub seed: u64,
    /// Fit the plane to the mean-centered covariance instead of the raw
    /// second moment. Off by default: the stain mixture is linear, not affine.
    #[serde(default, skip_serializing)]
    pub centered: bool,
}

impl Default for StainParams {
    fn default() -> Self {
        Self {
            outlier_fraction: 0.01,
            min_od_norm: 0.1,
            intensity_floor: od_color::DEFAULT_INTENSITY_FLOOR,
            i0: [od_color::DEFAULT_I0; 3],
            seed: 0,
            centered: false,
        }
    }
}

impl StainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.outlier_fraction > 0.0 && self.outlier_fraction < 0.5) {
            return Err(Error::InvalidInput(format!(
                "outlier fraction must lie in (0, 0.5), got {}",
                self.outlier_fraction
            )));
        }
        if !(self.min_od_norm >= 0.0) || !self.min_od_norm.is_finite() {
            return Err(Error::InvalidInput(format!(
                "min OD norm must be non-negative, got {}",
                self.min_od_norm
            )));
        }
        if !(self.intensity_floor > 0.0) {
            return Err(Error::InvalidInput(format!(
                "intensity floor must be positive, got {}",
                self.intensity_floor
            )));
        }
        if self.i0.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "background intensity must be positive, got {:?}",
                self.i0
            )));
        }
        Ok(())
    }
}

/// The leading PCA plane of a slide's foreground OD pixels.
#[derive(Debug, Clone)]
pub struct PlaneProjection {
    pub basis_x: Vec3,
    pub basis_y: Vec3,
    /// Third eigenvector, orthogonal to the plane.
    pub residual: Vec3,
    /// Non-increasing.
    pub eigenvalues: [f64; 3],
    /// Plane coordinates of each retained pixel.
    pub coords: Vec<[f64; 2]>,
    /// Full 3D OD norm of each retained pixel.
    pub od_norms: Vec<f64>,
}

/// Stain directions plus their polar angles in the (oriented) plane frame.
#[derive(Debug, Clone, Copy)]
pub struct StainVectors {
    pub v_h: Vec3,
    pub v_e: Vec3,
    pub theta_h: f64,
    pub theta_e: f64,
    /// Plane y-axis after orientation (H in quadrant IV, E in quadrant I).
    pub basis_y: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StainBasis {
    pub slide_id: String,
    pub v_h: Vec3,
    pub v_e: Vec3,
    pub v_residual: Vec3,
    /// Columns `[v_h, v_e, v_residual]`.
    pub heres_to_rgb_od: Mat3,
    pub rgb_to_heres_od: Mat3,
    pub norm_h: Option<f64>,
    pub norm_e: Option<f64>,
    pub params: StainParams,
}

/// Linear-interpolated percentile (`q` in `[0, 1]`) via selection. Reorders `values`.
pub fn percentile_in_place(values: &mut [f64], q: f64) -> Option<f64> {
    let n = values.len();
    if n == 0 || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut lo_val, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return Some(lo_val);
    }
    let hi_val = upper.iter().copied().min_by(f64::total_cmp).unwrap_or(lo_val);
    Some(lo_val + frac * (hi_val - lo_val))
}

pub fn estimate_plane(od: &OdImage, min_od_norm: f64, centered: bool, slide_id: &str) -> Result<PlaneProjection> {
    let retained: Vec<([f64; 3], f64)> = od
        .pixels()
        .iter()
        .filter_map(|p| {
            let n = od_norm(p);
            (n >= min_od_norm).then_some((*p, n))
        })
        .collect();
    if retained.len() < MIN_FOREGROUND_PIXELS {
        return Err(Error::InsufficientTissue {
            slide_id: slide_id.to_string(),
            found: retained.len(),
            required: MIN_FOREGROUND_PIXELS,
        });
    }
    let count = retained.len() as f64;
    let mut mean = [0.0; 3];
    if centered {
        for (p, _) in &retained {
            for c in 0..3 {
                mean[c] += p[c];
            }
        }
        mean = linalg::scale(&mean, 1.0 / count);
    }
    let mut moment = [[0.0; 3]; 3];
    for (p, _) in &retained {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for i in 0..3 {
            for j in i..3 {
                moment[i][j] += d[i] * d[j];
            }
        }
    }
    for i in 0..3 {
        for j in i..3 {
            moment[i][j] /= count;
            moment[j][i] = moment[i][j];
        }
    }
    let (eigenvalues, vectors) = linalg::symmetric_eigen(&moment);
    let mut basis_x = vectors[0];
    let basis_y = vectors[1];
    let residual = vectors[2];

    let mean_x: f64 = retained.iter().map(|(p, _)| linalg::dot(p, &basis_x)).sum::<f64>();
    if mean_x < 0.0 {
        basis_x = linalg::scale(&basis_x, -1.0);
    }
    let coords = retained
        .iter()
        .map(|(p, _)| [linalg::dot(p, &basis_x), linalg::dot(p, &basis_y)])
        .collect();
    let od_norms = retained.iter().map(|(_, n)| *n).collect();
    Ok(PlaneProjection {
        basis_x,
        basis_y,
        residual,
        eigenvalues,
        coords,
        od_norms,
    })
}

fn plane_vector(proj_x: &Vec3, proj_y: &Vec3, theta: f64) -> Vec3 {
    linalg::add(&linalg::scale(proj_x, theta.cos()), &linalg::scale(proj_y, theta.sin()))
}

pub fn extract_stain_vectors(
    proj: &PlaneProjection,
    outlier_fraction: f64,
    min_od_norm: f64,
    slide_id: &str,
) -> Result<StainVectors> {
    if !(outlier_fraction > 0.0 && outlier_fraction < 0.5) {
        return Err(Error::InvalidInput(format!(
            "outlier fraction must lie in (0, 0.5), got {outlier_fraction}"
        )));
    }
    let mut angles: Vec<f64> = proj
        .coords
        .iter()
        .zip(&proj.od_norms)
        .filter(|(_, &n)| n >= min_od_norm)
        .map(|(c, _)| c[1].atan2(c[0]))
        .collect();
    if angles.len() < MIN_FOREGROUND_PIXELS {
        return Err(Error::InsufficientTissue {
            slide_id: slide_id.to_string(),
            found: angles.len(),
            required: MIN_FOREGROUND_PIXELS,
        });
    }
    let lo = percentile_in_place(&mut angles, outlier_fraction).expect("non-empty");
    let hi = percentile_in_place(&mut angles, 1.0 - outlier_fraction).expect("non-empty");
    let spread_deg = (hi - lo).to_degrees();
    if !(spread_deg >= MIN_ANGULAR_SPREAD_DEG) {
        return Err(Error::DegenerateStain {
            slide_id: slide_id.to_string(),
            spread_deg,
        });
    }
    let orient = |v: Vec3| if v.iter().sum::<f64>() < 0.0 { linalg::scale(&v, -1.0) } else { v };
    let v_lo = orient(plane_vector(&proj.basis_x, &proj.basis_y, lo));
    let v_hi = orient(plane_vector(&proj.basis_x, &proj.basis_y, hi));

    // Hematoxylin absorbs red light most strongly.
    let (v_h, v_e) = if v_lo[0] >= v_hi[0] { (v_lo, v_hi) } else { (v_hi, v_lo) };
    let mut basis_y = proj.basis_y;
    if linalg::dot(&v_h, &basis_y) > 0.0 {
        basis_y = linalg::scale(&basis_y, -1.0);
    }
    let theta = |v: &Vec3| linalg::dot(v, &basis_y).atan2(linalg::dot(v, &proj.basis_x));
    Ok(StainVectors {
        v_h,
        v_e,
        theta_h: theta(&v_h),
        theta_e: theta(&v_e),
        basis_y,
    })
}

/// Builds the HERes basis. Norms are left unset.
pub fn build_basis(v_h: Vec3, v_e: Vec3, v_residual_hint: Option<Vec3>) -> Result<StainBasis> {
    let v_h = linalg::normalize(&v_h)
        .ok_or_else(|| Error::InvalidBasis("zero hematoxylin vector".into()))?;
    let v_e =
        linalg::normalize(&v_e).ok_or_else(|| Error::InvalidBasis("zero eosin vector".into()))?;
    let cos = linalg::dot(&v_h, &v_e);
    if !(cos.abs() < COLLINEAR_COS) {
        return Err(Error::Conditioning { cos: cos.abs() });
    }
    let mut v_residual =
        linalg::normalize(&linalg::cross(&v_h, &v_e)).ok_or(Error::Conditioning { cos: cos.abs() })?;
    let flip = match v_residual_hint {
        Some(hint) => linalg::dot(&v_residual, &hint) < 0.0,
        None => v_residual.iter().sum::<f64>() < 0.0,
    };
    if flip {
        v_residual = linalg::scale(&v_residual, -1.0);
    }
    let forward = linalg::mat_from_columns(&v_h, &v_e, &v_residual);
    let inverse = linalg::inverse(&forward).ok_or(Error::Conditioning { cos: cos.abs() })?;
    let product = linalg::mat_mul(&forward, &inverse);
    for (i, row) in product.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let expected = if i == j { 1.0 } else { 0.0 };
            if (v - expected).abs() > 1e-8 {
                return Err(Error::Conditioning { cos: cos.abs() });
            }
        }
    }
    Ok(StainBasis {
        slide_id: String::new(),
        v_h,
        v_e,
        v_residual,
        heres_to_rgb_od: forward,
        rgb_to_heres_od: inverse,
        norm_h: None,
        norm_e: None,
        params: StainParams::default(),
    })
}

/// Uniform seeded subsample of at most `max` pixels, in original order.
fn pixel_pool(img: &RgbImage, max: usize, seed: u64) -> Result<RgbImage> {
    let n = img.pixels().len();
    if n <= max {
        return Ok(img.clone());
    }
    let mut rng = rng::stream(seed, &[rng::op::SUBSAMPLE]);
    let mut picked = index::sample(&mut rng, n, max).into_vec();
    picked.sort_unstable();
    let pixels = picked.into_iter().map(|i| img.pixels()[i]).collect();
    RgbImage::new(max, 1, pixels, img.i0())
}

pub fn estimate_basis_for_slide(img: &RgbImage, slide_id: &str, params: &StainParams) -> Result<StainBasis> {
    estimate_basis_with_limit(img, slide_id, params, MAX_BASIS_PIXELS)
}

pub fn estimate_basis_with_limit(
    img: &RgbImage,
    slide_id: &str,
    params: &StainParams,
    max_pixels: usize,
) -> Result<StainBasis> {
    params.validate()?;
    let with_ctx = |e: Error| e.context(format!("estimating stain basis for slide `{slide_id}`"));
    let pool = pixel_pool(img, max_pixels, params.seed)?;
    let od = od_color::rgb_to_od(&pool, params.intensity_floor)?;
    let proj = estimate_plane(&od, params.min_od_norm, params.centered, slide_id).map_err(with_ctx)?;
    let vectors =
        extract_stain_vectors(&proj, params.outlier_fraction, params.min_od_norm, slide_id).map_err(with_ctx)?;
    let mut basis = build_basis(vectors.v_h, vectors.v_e, Some(proj.residual)).map_err(with_ctx)?;
    basis.slide_id = slide_id.to_string();
    basis.params = *params;

    let raw = separation::separate_od(&od, &basis);
    let norm_h = separation::compute_norm(&raw.h).map_err(with_ctx)?;
    let norm_e = separation::compute_norm(&raw.e).map_err(with_ctx)?;
    if !(norm_h > 0.0 && norm_e > 0.0) {
        return Err(with_ctx(Error::InvalidBasis(format!(
            "non-positive 99th percentile concentration (h={norm_h}, e={norm_e})"
        ))));
    }
    basis.norm_h = Some(norm_h);
    basis.norm_e = Some(norm_e);
    Ok(basis)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisJson {
    slide_id: String,
    v_h: [f64; 3],
    v_e: [f64; 3],
    v_residual: [f64; 3],
    mat_heres_to_rgb_od: [f64; 9],
    mat_rgb_to_heres_od: [f64; 9],
    norm_h: Option<f64>,
    norm_e: Option<f64>,
    params: StainParams,
}

/// 17 significant digits, enough for a lossless f64 round trip.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn num_list(vs: &[f64]) -> String {
    let parts: Vec<String> = vs.iter().map(|&v| num(v)).collect();
    format!("[{}]", parts.join(", "))
}

impl StainBasis {
    pub fn norm_h(&self) -> Result<f64> {
        self.norm_h
            .filter(|n| *n > 0.0)
            .ok_or_else(|| Error::InvalidBasis(format!("slide `{}`: hematoxylin norm unset", self.slide_id)))
    }

    pub fn norm_e(&self) -> Result<f64> {
        self.norm_e
            .filter(|n| *n > 0.0)
            .ok_or_else(|| Error::InvalidBasis(format!("slide `{}`: eosin norm unset", self.slide_id)))
    }

    pub fn with_norms(mut self, norm_h: f64, norm_e: f64) -> Result<Self> {
        if !(norm_h > 0.0 && norm_e > 0.0) {
            return Err(Error::InvalidBasis(format!(
                "norms must be positive (h={norm_h}, e={norm_e})"
            )));
        }
        self.norm_h = Some(norm_h);
        self.norm_e = Some(norm_e);
        Ok(self)
    }

    /// Checks the structural invariants (unit vectors, mutually inverse matrices).
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("v_h", &self.v_h), ("v_e", &self.v_e), ("v_residual", &self.v_residual)] {
            if (linalg::norm(v) - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidBasis(format!("{name} is not a unit vector")));
            }
        }
        if !(linalg::dot(&self.v_h, &self.v_e).abs() < COLLINEAR_COS) {
            return Err(Error::InvalidBasis("v_h and v_e are collinear".into()));
        }
        let product = linalg::mat_mul(&self.heres_to_rgb_od, &self.rgb_to_heres_od);
        for (i, row) in product.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (v - expected).abs() > 1e-8 {
                    return Err(Error::InvalidBasis("conversion matrices are not mutually inverse".into()));
                }
            }
        }
        for n in [self.norm_h, self.norm_e].into_iter().flatten() {
            if !(n > 0.0) {
                return Err(Error::InvalidBasis(format!("non-positive norm {n}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let opt = |v: Option<f64>| v.map(num).unwrap_or_else(|| "null".into());
        let p = &self.params;
        let mut s = String::new();
        s.push_str("{\n");
        let _ = writeln!(s, "  \"slide_id\": {},", serde_json::to_string(&self.slide_id).expect("string"));
        let _ = writeln!(s, "  \"v_h\": {},", num_list(&self.v_h));
        let _ = writeln!(s, "  \"v_e\": {},", num_list(&self.v_e));
        let _ = writeln!(s, "  \"v_residual\": {},", num_list(&self.v_residual));
        let _ = writeln!(s, "  \"mat_heres_to_rgb_od\": {},", num_list(&linalg::flatten(&self.heres_to_rgb_od)));
        let _ = writeln!(s, "  \"mat_rgb_to_heres_od\": {},", num_list(&linalg::flatten(&self.rgb_to_heres_od)));
        let _ = writeln!(s, "  \"norm_h\": {},", opt(self.norm_h));
        let _ = writeln!(s, "  \"norm_e\": {},", opt(self.norm_e));
        let _ = writeln!(
            s,
            "  \"params\": {{\"outlier_fraction\": {}, \"min_od_norm\": {}, \"intensity_floor\": {}, \"i0\": {}, \"seed\": {}}}",
            num(p.outlier_fraction),
            num(p.min_od_norm),
            num(p.intensity_floor),
            num_list(&p.i0),
            p.seed
        );
        s.push_str("}\n");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BasisJson = serde_json::from_str(text)?;
        let basis = StainBasis {
            slide_id: raw.slide_id,
            v_h: raw.v_h,
            v_e: raw.v_e,
            v_residual: raw.v_residual,
            heres_to_rgb_od: linalg::unflatten(&raw.mat_heres_to_rgb_od),
            rgb_to_heres_od: linalg::unflatten(&raw.mat_rgb_to_heres_od),
            norm_h: raw.norm_h,
            norm_e: raw.norm_e,
            params: raw.params,
        };
        basis.validate()?;
        Ok(basis)
    }
}

/// Slide-keyed basis cache: concurrent reads, exclusive writes.
#[derive(Debug, Default)]
pub struct BasisCache {
    inner: RwLock<HashMap<String, Arc<StainBasis>>>,
}

impl BasisCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, slide_id: &str) -> Option<Arc<StainBasis>> {
        self.inner.read().expect("basis cache poisoned").get(slide_id).cloned()
    }

    pub fn insert(&self, basis: StainBasis) -> Arc<StainBasis> {
        let basis = Arc::new(basis);
        self.inner
            .write()
            .expect("basis cache poisoned")
            .insert(basis.slide_id.clone(), Arc::clone(&basis));
        basis
    }

    pub fn get_or_try_insert_with(
        &self,
        slide_id: &str,
        f: impl FnOnce() -> Result<StainBasis>,
    ) -> Result<Arc<StainBasis>> {
        if let Some(b) = self.get(slide_id) {
            return Ok(b);
        }
        let basis = f()?;
        let mut map = self.inner.write().expect("basis cache poisoned");
        Ok(Arc::clone(map.entry(slide_id.to_string()).or_insert_with(|| Arc::new(basis))))
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("basis cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
