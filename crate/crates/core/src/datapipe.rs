//! Tiling of polygon-annotated rasters, foreground filtering, dataset
//! assembly, the class-balanced batch sampler and confusion-matrix metrics.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::od_color::{self, od_norm, RgbImage, DEFAULT_I0};
use crate::rng;
use crate::separation::{separate_tile, ConcentrationImage};
use crate::stain_model::{estimate_basis_for_slide, StainBasis, StainParams};
use crate::synthetic::{self, TextureOptions, TextureStyle};

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolygonAnnotation {
    pub label: String,
    pub points: Vec<Point>,
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    orient(a, b, p) == 0.0
        && p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

/// Closed-segment intersection test (touching counts).
fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    on_segment(c, d, a) || on_segment(c, d, b) || on_segment(a, b, c) || on_segment(a, b, d)
}

/// Even-odd rule; points on an edge or vertex count as inside.
pub fn point_in_polygon(p: Point, vertices: &[Point]) -> bool {
    let n = vertices.len();
    let mut inside = false;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        if on_segment(a, b, p) {
            return true;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x_cross = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

impl PolygonAnnotation {
    /// Vertices without a repeated closing point.
    pub fn vertices(&self) -> &[Point] {
        let pts = &self.points;
        if pts.len() > 1 && pts.first() == pts.last() {
            &pts[..pts.len() - 1]
        } else {
            pts
        }
    }

    pub fn signed_area(&self) -> f64 {
        let v = self.vertices();
        let n = v.len();
        (0..n).map(|i| v[i][0] * v[(i + 1) % n][1] - v[(i + 1) % n][0] * v[i][1]).sum::<f64>() / 2.0
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let err = |reason: String| Error::Annotation { index, reason };
        let v = self.vertices();
        let n = v.len();
        if n < 3 {
            return Err(err(format!("polygon `{}` has {n} distinct vertices, need at least 3", self.label)));
        }
        if v.iter().flatten().any(|c| !c.is_finite()) {
            return Err(err("non-finite vertex coordinate".into()));
        }
        if self.signed_area() == 0.0 {
            return Err(err("polygon has zero area".into()));
        }
        for i in 0..n {
            let (a, b) = (v[i], v[(i + 1) % n]);
            if a == b {
                return Err(err(format!("repeated vertex at position {i}")));
            }
            for j in i + 1..n {
                let (c, d) = (v[j], v[(j + 1) % n]);
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    // Shared endpoint; reject only if the edges fold back onto each other.
                    let (shared, p, q) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                    let folds = orient(shared, p, q) == 0.0
                        && (p[0] - shared[0]) * (q[0] - shared[0]) + (p[1] - shared[1]) * (q[1] - shared[1]) > 0.0;
                    if folds {
                        return Err(err(format!("edges {i} and {j} overlap")));
                    }
                } else if segments_intersect(a, b, c, d) {
                    return Err(err(format!("self-intersection between edges {i} and {j}")));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: Point) -> bool {
        point_in_polygon(p, self.vertices())
    }

    /// Whether the polygon touches the closed rectangle `[x0, x1] x [y0, y1]`.
    pub fn touches_rect(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
        let v = self.vertices();
        if v.iter().any(|p| p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1) {
            return true;
        }
        let corners = [[x0, y0], [x1, y0], [x1, y1], [x0, y1]];
        if corners.iter().any(|c| self.contains(*c)) {
            return true;
        }
        let n = v.len();
        (0..n).any(|i| (0..4).any(|k| segments_intersect(v[i], v[(i + 1) % n], corners[k], corners[(k + 1) % 4])))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub slide_id: String,
    pub width: usize,
    pub height: usize,
    pub polygons: Vec<PolygonAnnotation>,
}

impl AnnotationFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: AnnotationFile = serde_json::from_str(text).map_err(|e| Error::AnnotationFile(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("annotations {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.polygons.iter().enumerate() {
            p.validate(i)?;
        }
        Ok(())
    }

    /// Sorted distinct labels.
    pub fn labels(&self) -> Vec<String> {
        self.polygons.iter().map(|p| p.label.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainLabeled,
    TrainUnlabeled,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSample {
    pub slide_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub label: Option<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileGrid {
    pub tile_size: usize,
    pub stride: usize,
    pub unlabeled_stride: usize,
}

impl Default for TileGrid {
    fn default() -> Self {
        Self {
            tile_size: 400,
            stride: 200,
            unlabeled_stride: 400,
        }
    }
}

impl TileGrid {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || self.stride == 0 || self.unlabeled_stride == 0 {
            return Err(Error::Config("tile size and strides must be at least 1".into()));
        }
        Ok(())
    }
}

fn grid(extent: usize, size: usize, stride: usize) -> impl Iterator<Item = usize> {
    (0..).step_by(stride).take_while(move |p| p + size <= extent)
}

/// Labeled tiles (all four corners and the center inside exactly one
/// polygon) on the labeled stride, then tiles touching no polygon on the
/// unlabeled stride. Each group is in row-major order.
pub fn extract_tiles(
    slide_id: &str,
    width: usize,
    height: usize,
    polygons: &[PolygonAnnotation],
    classes: &[String],
    grid_spec: &TileGrid,
) -> Result<Vec<TileSample>> {
    grid_spec.validate()?;
    let mut class_of = Vec::with_capacity(polygons.len());
    for (i, p) in polygons.iter().enumerate() {
        p.validate(i)?;
        let c = classes.iter().position(|c| *c == p.label).ok_or_else(|| Error::Annotation {
            index: i,
            reason: format!("unknown class label `{}`", p.label),
        })?;
        class_of.push(c);
    }
    let s = grid_spec.tile_size;
    let mut out = Vec::new();
    if !polygons.is_empty() {
        for y in grid(height, s, grid_spec.stride) {
            for x in grid(width, s, grid_spec.stride) {
                let (x0, y0, x1, y1) = (x as f64, y as f64, (x + s) as f64, (y + s) as f64);
                let probes = [[x0, y0], [x1, y0], [x0, y1], [x1, y1], [(x0 + x1) / 2.0, (y0 + y1) / 2.0]];
                let mut hits = polygons.iter().enumerate().filter(|(_, p)| probes.iter().all(|q| p.contains(*q)));
                if let (Some((i, _)), None) = (hits.next(), hits.next()) {
                    out.push(TileSample {
                        slide_id: slide_id.to_string(),
                        x,
                        y,
                        size: s,
                        label: Some(class_of[i]),
                        split: Split::TrainLabeled,
                    });
                }
            }
        }
    }
    for y in grid(height, s, grid_spec.unlabeled_stride) {
        for x in grid(width, s, grid_spec.unlabeled_stride) {
            let (x0, y0, x1, y1) = (x as f64, y as f64, (x + s) as f64, (y + s) as f64);
            if polygons.iter().all(|p| !p.touches_rect(x0, y0, x1, y1)) {
                out.push(TileSample {
                    slide_id: slide_id.to_string(),
                    x,
                    y,
                    size: s,
                    label: None,
                    split: Split::TrainUnlabeled,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForegroundParams {
    pub od_threshold: f64,
    pub min_tissue_fraction: f64,
}

impl Default for ForegroundParams {
    fn default() -> Self {
        Self {
            od_threshold: 0.15,
            min_tissue_fraction: 0.25,
        }
    }
}

impl ForegroundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.od_threshold >= 0.0) || !(0.0..=1.0).contains(&self.min_tissue_fraction) {
            return Err(Error::Config(format!("invalid foreground thresholds: {self:?}")));
        }
        Ok(())
    }
}

/// Fraction of pixels whose OD norm reaches `od_threshold`.
pub fn tissue_fraction(img: &RgbImage, od_threshold: f64, intensity_floor: f64) -> f64 {
    let i0 = img.i0();
    let n = img.pixels().len();
    if n == 0 {
        return 0.0;
    }
    let tissue = img
        .pixels()
        .iter()
        .filter(|p| {
            let od = [
                od_color::od_of(p[0], i0[0], intensity_floor),
                od_color::od_of(p[1], i0[1], intensity_floor),
                od_color::od_of(p[2], i0[2], intensity_floor),
            ];
            od_norm(&od) >= od_threshold
        })
        .count();
    tissue as f64 / n as f64
}

pub fn foreground_filter(img: &RgbImage, params: &ForegroundParams) -> bool {
    tissue_fraction(img, params.od_threshold, od_color::DEFAULT_INTENSITY_FLOOR) >= params.min_tissue_fraction
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchComposition {
    pub per_class_labeled: Vec<usize>,
    pub unlabeled_count: usize,
}

impl Default for BatchComposition {
    fn default() -> Self {
        Self::four_class()
    }
}

impl BatchComposition {
    /// 8 labeled per class for 4 classes plus 32 unlabeled.
    pub fn four_class() -> Self {
        Self {
            per_class_labeled: vec![8; 4],
            unlabeled_count: 32,
        }
    }

    /// 11 labeled per class for 3 classes plus 31 unlabeled.
    pub fn three_class() -> Self {
        Self {
            per_class_labeled: vec![11; 3],
            unlabeled_count: 31,
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.per_class_labeled.iter().sum()
    }

    pub fn batch_size(&self) -> usize {
        self.labeled_count() + self.unlabeled_count
    }

    pub fn num_classes(&self) -> usize {
        self.per_class_labeled.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class_labeled.len() < 2 {
            return Err(Error::Config("batch composition needs at least 2 classes".into()));
        }
        if self.per_class_labeled.iter().any(|c| *c == 0) {
            return Err(Error::Config("every class needs at least one labeled sample per batch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// `(pool index, class)`, grouped by class in class order.
    pub labeled: Vec<(usize, usize)>,
    pub unlabeled: Vec<usize>,
}

/// Class-balanced sampler. Each pool is consumed in rounds; every round is a
/// fresh seeded permutation of the pool, so small pools repeat. Batches are
/// computed from their global index, which makes the sampler random-access
/// and independent of consumption history.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    labeled: Vec<Vec<usize>>,
    unlabeled: Vec<usize>,
    comp: BatchComposition,
    seed: u64,
}

impl BalancedSampler {
    pub fn new(labeled: Vec<Vec<usize>>, unlabeled: Vec<usize>, comp: BatchComposition, seed: u64, class_names: &[String]) -> Result<Self> {
        comp.validate()?;
        if labeled.len() != comp.num_classes() {
            return Err(Error::Config(format!(
                "batch composition has {} classes but {} labeled pools were given",
                comp.num_classes(),
                labeled.len()
            )));
        }
        for (c, pool) in labeled.iter().enumerate() {
            if pool.is_empty() {
                let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
                return Err(Error::Config(format!("labeled pool for class `{name}` is empty")));
            }
        }
        if comp.unlabeled_count > 0 && unlabeled.is_empty() {
            return Err(Error::Config("unlabeled pool is empty but the batch composition asks for unlabeled samples".into()));
        }
        Ok(Self { labeled, unlabeled, comp, seed })
    }

    pub fn composition(&self) -> &BatchComposition {
        &self.comp
    }

    fn draw(&self, pool: &[usize], tag: u64, per_batch: usize, batch: u64) -> Vec<usize> {
        let n = pool.len() as u64;
        let start = batch * per_batch as u64;
        let mut out = Vec::with_capacity(per_batch);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for pos in start..start + per_batch as u64 {
            let round = pos / n;
            if cached.as_ref().map(|(r, _)| *r) != Some(round) {
                let mut perm: Vec<usize> = pool.to_vec();
                perm.shuffle(&mut rng::stream(self.seed, &[rng::op::SAMPLER, tag, round]));
                cached = Some((round, perm));
            }
            out.push(cached.as_ref().expect("set above").1[(pos % n) as usize]);
        }
        out
    }

    pub fn batch(&self, index: u64) -> Batch {
        let mut labeled = Vec::with_capacity(self.comp.labeled_count());
        for (c, (pool, &k)) in self.labeled.iter().zip(&self.comp.per_class_labeled).enumerate() {
            labeled.extend(self.draw(pool, c as u64, k, index).into_iter().map(|i| (i, c)));
        }
        let unlabeled = if self.comp.unlabeled_count == 0 {
            Vec::new()
        } else {
            self.draw(&self.unlabeled, u64::MAX, self.comp.unlabeled_count, index)
        };
        Batch { labeled, unlabeled }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn metrics(&self) -> Result<EvalMetrics> {
        let c = self.num_classes();
        let balanced_accuracy = balanced_accuracy(&self.counts)?;
        let total: u64 = self.counts.iter().flatten().sum();
        let correct: u64 = (0..c).map(|i| self.counts[i][i]).sum();
        let per_class = (0..c)
            .map(|i| {
                let support: u64 = self.counts[i].iter().sum();
                let predicted: u64 = (0..c).map(|r| self.counts[r][i]).sum();
                let tp = self.counts[i][i] as f64;
                let recall = tp / support as f64;
                let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
                let f1 = if recall + precision == 0.0 { 0.0 } else { 2.0 * recall * precision / (recall + precision) };
                ClassMetrics { recall, precision, f1, support }
            })
            .collect();
        Ok(EvalMetrics {
            balanced_accuracy,
            accuracy: correct as f64 / total as f64,
            per_class,
            confusion: self.clone(),
        })
    }
}

/// Mean per-class recall of a square `counts[true][predicted]` matrix.
pub fn balanced_accuracy(confusion: &[Vec<u64>]) -> Result<f64> {
    let c = confusion.len();
    if c == 0 {
        return Err(Error::Evaluation("empty confusion matrix".into()));
    }
    let mut sum = 0.0;
    for (i, row) in confusion.iter().enumerate() {
        if row.len() != c {
            return Err(Error::Evaluation(format!("confusion row {i} has {} entries, expected {c}", row.len())));
        }
        let support: u64 = row.iter().sum();
        if support == 0 {
            return Err(Error::Evaluation(format!("class {i} has no samples")));
        }
        sum += row[i] as f64 / support as f64;
    }
    Ok(sum / c as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlideSplit {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideEntry {
    pub slide_id: String,
    pub image: PathBuf,
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    pub split: SlideSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    #[serde(default)]
    pub tiles: TileGrid,
    #[serde(default)]
    pub foreground: ForegroundParams,
    #[serde(default)]
    pub stain: StainParams,
    pub slides: Vec<SlideEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("dataset manifest {}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    /// Checks class names and that every slide belongs to exactly one split.
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("dataset needs at least 2 classes".into()));
        }
        let mut names = HashSet::new();
        for c in &self.classes {
            if !names.insert(c) {
                return Err(Error::Config(format!("duplicate class name `{c}`")));
            }
        }
        let mut seen = HashSet::new();
        for s in &self.slides {
            if !seen.insert(&s.slide_id) {
                return Err(Error::Config(format!(
                    "slide `{}` is listed more than once; a slide must belong to exactly one split",
                    s.slide_id
                )));
            }
        }
        self.tiles.validate()?;
        self.foreground.validate()?;
        self.stain.validate()
    }
}

/// One tile with its source pixels, slide basis and normalized H/E images.
#[derive(Debug, Clone)]
pub struct TileData {
    pub slide_id: String,
    pub x: usize,
    pub y: usize,
    pub label: Option<usize>,
    pub rgb: RgbImage,
    pub basis: Arc<StainBasis>,
    pub h: ConcentrationImage,
    pub e: ConcentrationImage,
}

impl TileData {
    pub fn new(slide_id: &str, x: usize, y: usize, label: Option<usize>, rgb: RgbImage, basis: Arc<StainBasis>) -> Result<Self> {
        let (h, e) = separate_tile(&rgb, &basis)?;
        Ok(Self {
            slide_id: slide_id.to_string(),
            x,
            y,
            label,
            rgb,
            basis,
            h,
            e,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train_labeled: Vec<TileData>,
    pub train_unlabeled: Vec<TileData>,
    pub val: Vec<TileData>,
    pub test: Vec<TileData>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[TileData] {
        match split {
            Split::TrainLabeled => &self.train_labeled,
            Split::TrainUnlabeled => &self.train_unlabeled,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Indices of `train_labeled` grouped by class.
    pub fn labeled_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.classes.len()];
        for (i, t) in self.train_labeled.iter().enumerate() {
            if let Some(c) = t.label {
                pools[c].push(i);
            }
        }
        pools
    }

    /// Loads every slide of a manifest. Paths are relative to `base_dir`.
    /// Slides without annotations contribute unlabeled tiles (train split
    /// only). Only `splits` are materialized.
    pub fn from_manifest(manifest: &DatasetManifest, base_dir: &Path, splits: &[Split]) -> Result<Self> {
        manifest.validate()?;
        let wanted = |s: Split| splits.contains(&s);
        let per_slide: Vec<Result<Vec<(Split, TileData)>>> = manifest
            .slides
            .par_iter()
            .map(|entry| -> Result<Vec<(Split, TileData)>> {
                let needed = match entry.split {
                    SlideSplit::Train => wanted(Split::TrainLabeled) || wanted(Split::TrainUnlabeled),
                    SlideSplit::Val => wanted(Split::Val),
                    SlideSplit::Test => wanted(Split::Test),
                };
                if !needed {
                    return Ok(Vec::new());
                }
                load_slide(manifest, base_dir, entry, &wanted).map_err(|e| e.context(format!("slide `{}`", entry.slide_id)))
            })
            .collect();
        let mut ds = Dataset {
            classes: manifest.classes.clone(),
            ..Default::default()
        };
        for tiles in per_slide {
            for (split, t) in tiles? {
                match split {
                    Split::TrainLabeled => ds.train_labeled.push(t),
                    Split::TrainUnlabeled => ds.train_unlabeled.push(t),
                    Split::Val => ds.val.push(t),
                    Split::Test => ds.test.push(t),
                }
            }
        }
        Ok(ds)
    }
}

fn load_slide(manifest: &DatasetManifest, base_dir: &Path, entry: &SlideEntry, wanted: &dyn Fn(Split) -> bool) -> Result<Vec<(Split, TileData)>> {
    let image = od_color::load_rgb(&base_dir.join(&entry.image), manifest.stain.i0)?;
    let polygons = match &entry.annotations {
        Some(p) => {
            let ann = AnnotationFile::load(&base_dir.join(p))?;
            if ann.slide_id != entry.slide_id || ann.width != image.width() || ann.height != image.height() {
                return Err(Error::Config(format!(
                    "annotation header ({} {}x{}) does not match slide `{}` ({}x{})",
                    ann.slide_id,
                    ann.width,
                    ann.height,
                    entry.slide_id,
                    image.width(),
                    image.height()
                )));
            }
            ann.polygons
        }
        None => Vec::new(),
    };
    let basis = Arc::new(estimate_basis_for_slide(&image, &entry.slide_id, &manifest.stain)?);
    let samples = extract_tiles(&entry.slide_id, image.width(), image.height(), &polygons, &manifest.classes, &manifest.tiles)?;
    let mut out = Vec::new();
    for s in samples {
        let split = match (entry.split, s.label) {
            (SlideSplit::Train, Some(_)) => Split::TrainLabeled,
            (SlideSplit::Train, None) => Split::TrainUnlabeled,
            (SlideSplit::Val, Some(_)) => Split::Val,
            (SlideSplit::Test, Some(_)) => Split::Test,
            _ => continue,
        };
        if !wanted(split) {
            continue;
        }
        let rgb = image.crop(s.x, s.y, s.size, s.size)?;
        if !foreground_filter(&rgb, &manifest.foreground) {
            continue;
        }
        out.push((split, TileData::new(&entry.slide_id, s.x, s.y, s.label, rgb, basis.clone())?));
    }
    Ok(out)
}

/// Procedurally generated dataset of class-textured two-stain tiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDataset {
    pub num_classes: usize,
    pub labeled_per_class: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub test: usize,
    pub tile_size: usize,
    /// Tiles are grouped into slides of at most this many tiles, each with
    /// its own perturbed stain vectors and estimated basis.
    pub tiles_per_slide: usize,
    pub stain_jitter_deg: f64,
    pub class_overlap: f64,
    pub noise: f64,
    /// Per-slide magnification is drawn log-uniformly from `[1/(1+j), 1+j]`.
    pub slide_scale_jitter: f64,
    pub style: TextureStyle,
    pub seed: u64,
}

impl Default for SyntheticDataset {
    fn default() -> Self {
        Self {
            num_classes: 3,
            labeled_per_class: 20,
            unlabeled: 2000,
            val: 300,
            test: 300,
            tile_size: 32,
            tiles_per_slide: 100,
            stain_jitter_deg: 4.0,
            class_overlap: 0.4,
            noise: 0.04,
            slide_scale_jitter: 0.0,
            style: TextureStyle::Statistics,
            seed: 0,
        }
    }
}

impl SyntheticDataset {
    pub fn validate(&self) -> Result<()> {
        if !(2..=synthetic::MAX_TEXTURE_CLASSES).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "synthetic data supports 2..={} classes",
                synthetic::MAX_TEXTURE_CLASSES
            )));
        }
        if self.labeled_per_class == 0 || self.tile_size < 8 || self.tiles_per_slide == 0 {
            return Err(Error::Config("synthetic dataset sizes must be positive (tile_size >= 8)".into()));
        }
        if !(0.0..=1.0).contains(&self.class_overlap) || self.noise < 0.0 || self.stain_jitter_deg < 0.0 || !(self.slide_scale_jitter >= 0.0) {
            return Err(Error::Config("invalid synthetic texture parameters".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("class{c}")).collect()
    }

    /// Renders the dataset. Labels are balanced (round-robin) in every split;
    /// unlabeled tiles keep no label.
    pub fn build(&self) -> Result<Dataset> {
        self.validate()?;
        let c = self.num_classes;
        let groups: [(Split, usize); 4] = [
            (Split::TrainLabeled, self.labeled_per_class * c),
            (Split::TrainUnlabeled, self.unlabeled),
            (Split::Val, self.val),
            (Split::Test, self.test),
        ];
        let mut jobs = Vec::new();
        for (g, &(split, count)) in groups.iter().enumerate() {
            let slides = count.div_ceil(self.tiles_per_slide);
            for s in 0..slides {
                let first = s * self.tiles_per_slide;
                let n = self.tiles_per_slide.min(count - first);
                jobs.push((g, split, s, first, n));
            }
        }
        let rendered: Vec<Result<(Split, Vec<TileData>)>> = jobs
            .par_iter()
            .map(|&(g, split, s, first, n)| self.render_slide(g as u64, split, s, first, n).map(|t| (split, t)))
            .collect();
        let mut ds = Dataset {
            classes: self.class_names(),
            ..Default::default()
        };
        for r in rendered {
            let (split, tiles) = r?;
            match split {
                Split::TrainLabeled => ds.train_labeled.extend(tiles),
                Split::TrainUnlabeled => ds.train_unlabeled.extend(tiles),
                Split::Val => ds.val.extend(tiles),
                Split::Test => ds.test.extend(tiles),
            }
        }
        Ok(ds)
    }

    fn render_slide(&self, group: u64, split: Split, slide: usize, first: usize, n: usize) -> Result<Vec<TileData>> {
        let mut rng = rng::stream(self.seed, &[rng::op::SYNTH, group, slide as u64]);
        let stains = synthetic::perturbed_stains(&mut rng, self.stain_jitter_deg);
        let scale = if self.slide_scale_jitter > 0.0 {
            let l = self.slide_scale_jitter.ln_1p();
            rng.random_range(-l..=l).exp()
        } else {
            1.0
        };
        let opts = TextureOptions {
            overlap: self.class_overlap,
            noise: self.noise,
            scale,
            style: self.style,
        };
        let size = self.tile_size;
        let tiles: Vec<(usize, RgbImage)> = (first..first + n)
            .map(|i| {
                let class = i % self.num_classes;
                let img = synthetic::class_tile(class, self.num_classes, size, stains, &opts, &mut rng);
                // 8-bit quantization, as in scanned images.
                (class, img.map_pixels(|p| p.map(|v| v.round())))
            })
            .collect();
        let slide_id = format!("synth-{}-{slide}", split_name(split));
        let cols = (n as f64).sqrt().ceil() as usize;
        let rows = n.div_ceil(cols);
        let mosaic = RgbImage::from_fn(cols * size, rows * size, [DEFAULT_I0; 3], |x, y| {
            let t = (y / size) * cols + x / size;
            match tiles.get(t) {
                Some((_, img)) => img.pixel(x % size, y % size),
                None => [DEFAULT_I0; 3],
            }
        })?;
        let params = StainParams {
            seed: self.seed,
            ..Default::default()
        };
        let basis = Arc::new(estimate_basis_for_slide(&mosaic, &slide_id, &params)?);
        let labeled = split != Split::TrainUnlabeled;
        tiles
            .into_iter()
            .enumerate()
            .map(|(k, (class, img))| {
                let t = (first + k) % cols;
                TileData::new(&slide_id, t * size, (first + k) / cols * size, labeled.then_some(class), img, basis.clone())
            })
            .collect()
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::TrainLabeled => "labeled",
        Split::TrainUnlabeled => "unlabeled",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Uniform random convex-ish polygon used by property tests and demos.
pub fn random_polygon(rng: &mut impl Rng, n: usize, cx: f64, cy: f64, radius: f64) -> PolygonAnnotation {
    let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    let points = angles
        .into_iter()
        .map(|a| {
            let r = radius * rng.random_range(0.3..1.0);
            [cx + r * a.cos(), cy + r * a.sin()]
        })
        .collect();
    PolygonAnnotation {
        label: "region".into(),
        points,
    }
}
