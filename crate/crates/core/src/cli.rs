//! `classm` command-line interface.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 insufficient tissue,
//! 3 degenerate or ill-conditioned stain, 4 invalid basis or basis/image
//! mismatch, 5 malformed annotations, 6 configuration error, 7 numeric
//! fault during training, 8 evaluation error, 64 command-line usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::datapipe::{extract_tiles, foreground_filter, AnnotationFile, Dataset, DatasetManifest, ForegroundParams, Split, TileGrid};
use crate::error::{Error, Result};
use crate::od_color::{self, DEFAULT_I0};
use crate::separation::{reconstruct_rgb, separate_tile};
use crate::stain_model::{estimate_basis_for_slide, StainBasis, StainParams};
use crate::trainer::{evaluate_tiles, heatmap, Checkpoint, HeatmapOptions, TrainConfig, Trainer};

pub const EXIT_USAGE: i32 = 64;

pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::InsufficientTissue { .. } => 2,
        Error::DegenerateStain { .. } | Error::Conditioning { .. } => 3,
        Error::InvalidBasis(_) | Error::BasisMismatch(_) => 4,
        Error::Annotation { .. } | Error::AnnotationFile(_) => 5,
        Error::Config(_) => 6,
        Error::NumericFault { .. } => 7,
        Error::Evaluation(_) => 8,
        _ => 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "classm", version, about = "Stain separation, tiling and semi-supervised H&E tile classification")]
pub struct Cli {
    /// Print failures to stderr as a single JSON object.
    #[arg(long, global = true)]
    pub json_errors: bool,
    /// Allow overwriting existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Seed for every random stream (drawn from system entropy when absent).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data and batch parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    /// Sequential, fixed-order processing.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate a slide's stain basis.
    StainEstimate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        outlier_fraction: f64,
        #[arg(long, default_value_t = 0.1)]
        min_od_norm: f64,
        /// Defaults to the input file stem.
        #[arg(long)]
        slide_id: Option<String>,
    },
    /// Separate an image into normalized H and E concentration images.
    Separate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        out_h: PathBuf,
        #[arg(long)]
        out_e: PathBuf,
        /// Also write the RGB image recomposed from H and E.
        #[arg(long)]
        reconstruct: Option<PathBuf>,
        /// Require the basis to belong to this slide.
        #[arg(long)]
        slide_id: Option<String>,
    },
    /// Cut labeled and unlabeled tiles from an annotated image.
    Tile {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 400)]
        size: usize,
        #[arg(long, default_value_t = 200)]
        stride: usize,
        #[arg(long, default_value_t = 400)]
        unlabeled_stride: usize,
        #[arg(long)]
        out: PathBuf,
        /// Keep tiles that fail the foreground filter.
        #[arg(long)]
        keep_background: bool,
        #[arg(long, default_value_t = 0.15)]
        od_threshold: f64,
        #[arg(long, default_value_t = 0.25)]
        min_tissue_fraction: f64,
    },
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest; defaults to the data section of the checkpoint config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render tile predictions over an image as an RGBA overlay.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        tile_size: usize,
        /// Defaults to the tile size.
        #[arg(long)]
        stride: Option<usize>,
        /// Class drawn transparent; defaults to classes named normal or benign.
        #[arg(long)]
        transparent_class: Vec<String>,
    },
    /// Write a synthetic annotated two-stain slide for demos and tests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Tiles per side of the square slide.
        #[arg(long, default_value_t = 4)]
        grid: usize,
        #[arg(long, default_value_t = 64)]
        tile_size: usize,
    },
}

#[derive(Debug, Serialize)]
struct InputRecord {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    seed_source: &'static str,
    deterministic: bool,
    workers: usize,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

struct Ctx {
    force: bool,
    seed_flag: Option<u64>,
    workers: usize,
    deterministic: bool,
}

impl Ctx {
    /// `(seed, source)`; draws from system entropy when no seed was given.
    fn seed(&self) -> (u64, &'static str) {
        match self.seed_flag {
            Some(s) => (s, "flag"),
            None => (rand::random(), "entropy"),
        }
    }

    fn check_file_output(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            return Err(Error::InvalidInput(format!("{} already exists; pass --force to overwrite", path.display())));
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(())
    }

    fn check_dir_output(&self, dir: &Path) -> Result<()> {
        if dir.exists() {
            let non_empty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
            if non_empty && !self.force {
                return Err(Error::InvalidInput(format!("{} is not empty; pass --force to overwrite", dir.display())));
            }
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }

    #[allow(clippy::too_many_arguments)]
    fn write_manifest(&self, at: &Path, command: &str, config: serde_json::Value, seed: Option<(u64, &'static str)>, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputRecord {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            tool: "classm",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config,
            seed: seed.map(|s| s.0),
            seed_source: seed.map_or("unused", |s| s.1),
            deterministic: self.deterministic,
            workers: self.workers,
            inputs,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        write_text(at, &serde_json::to_string_pretty(&manifest)?)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `<file>.manifest.json` next to a single-file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "slide".into())
}

fn load_basis(path: &Path) -> Result<StainBasis> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    StainBasis::from_json(&text).map_err(|e| e.context(format!("basis {}", path.display())))
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let json_errors = cli.json_errors;
    match execute(cli) {
        Ok(()) => 0,
        Err(err) => {
            let code = exit_code(&err);
            if json_errors {
                let body = serde_json::json!({
                    "error": err.kind(),
                    "exit_code": code,
                    "message": err.to_string(),
                });
                eprintln!("{body}");
            } else {
                eprintln!("error: {err}");
            }
            code
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        force: cli.force,
        seed_flag: cli.seed,
        workers: if cli.deterministic { 1 } else { cli.workers },
        deterministic: cli.deterministic,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| dispatch(&ctx, cli.command))
}

fn dispatch(ctx: &Ctx, command: Command) -> Result<()> {
    match command {
        Command::StainEstimate {
            input,
            out,
            outlier_fraction,
            min_od_norm,
            slide_id,
        } => stain_estimate(ctx, &input, &out, outlier_fraction, min_od_norm, slide_id),
        Command::Separate {
            input,
            basis,
            out_h,
            out_e,
            reconstruct,
            slide_id,
        } => separate(ctx, &input, &basis, &out_h, &out_e, reconstruct.as_deref(), slide_id),
        Command::Tile {
            image,
            annotations,
            size,
            stride,
            unlabeled_stride,
            out,
            keep_background,
            od_threshold,
            min_tissue_fraction,
        } => {
            let grid = TileGrid {
                tile_size: size,
                stride,
                unlabeled_stride,
            };
            let fg = (!keep_background).then_some(ForegroundParams {
                od_threshold,
                min_tissue_fraction,
            });
            tile(ctx, &image, &annotations, &grid, &out, fg)
        }
        Command::Train { config, out, resume } => train(ctx, &config, &out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            out,
        } => eval(ctx, &checkpoint, manifest.as_deref(), &split, out.as_deref()),
        Command::Heatmap {
            checkpoint,
            image,
            basis,
            out,
            tile_size,
            stride,
            transparent_class,
        } => heatmap_cmd(ctx, &checkpoint, &image, &basis, &out, tile_size, stride.unwrap_or(tile_size), &transparent_class),
        Command::Synth {
            out,
            classes,
            grid,
            tile_size,
        } => synth(ctx, &out, classes, grid, tile_size),
    }
}

fn stain_estimate(ctx: &Ctx, input: &Path, out: &Path, outlier_fraction: f64, min_od_norm: f64, slide_id: Option<String>) -> Result<()> {
    ctx.check_file_output(out)?;
    let seed = ctx.seed();
    let params = StainParams {
        outlier_fraction,
        min_od_norm,
        seed: seed.0,
        ..Default::default()
    };
    params.validate()?;
    let slide_id = slide_id.unwrap_or_else(|| file_stem(input));
    let img = od_color::load_rgb(input, params.i0)?;
    let basis = estimate_basis_for_slide(&img, &slide_id, &params)?;
    write_text(out, &basis.to_json())?;
    ctx.write_manifest(
        &sidecar(out),
        "stain-estimate",
        serde_json::json!({"slide_id": slide_id, "params": params}),
        Some(seed),
        &[input],
        &[out],
    )?;
    println!("{}: v_h = {:?}, v_e = {:?}", slide_id, basis.v_h, basis.v_e);
    Ok(())
}

fn separate(ctx: &Ctx, input: &Path, basis_path: &Path, out_h: &Path, out_e: &Path, reconstruct: Option<&Path>, slide_id: Option<String>) -> Result<()> {
    let basis = load_basis(basis_path)?;
    if let Some(id) = &slide_id {
        if *id != basis.slide_id {
            return Err(Error::BasisMismatch(format!(
                "basis {} was estimated on slide `{}`, not `{id}`",
                basis_path.display(),
                basis.slide_id
            )));
        }
    }
    for p in [Some(out_h), Some(out_e), reconstruct].into_iter().flatten() {
        ctx.check_file_output(p)?;
    }
    let img = od_color::load_rgb(input, basis.params.i0)?;
    let (h, e) = separate_tile(&img, &basis)?;
    h.save_png16(out_h)?;
    e.save_png16(out_e)?;
    let mut outputs = vec![out_h, out_e];
    if let Some(r) = reconstruct {
        reconstruct_rgb(&h, &e, &basis)?.image.save_png(r)?;
        outputs.push(r);
    }
    ctx.write_manifest(
        &sidecar(out_h),
        "separate",
        serde_json::json!({"basis_slide_id": basis.slide_id}),
        None,
        &[input, basis_path],
        &outputs,
    )
}

#[derive(Debug, Serialize)]
struct TileIndexEntry {
    file: String,
    x: usize,
    y: usize,
    label: Option<String>,
}

#[derive(Debug, Serialize)]
struct TileIndex {
    slide_id: String,
    classes: Vec<String>,
    grid: TileGrid,
    tiles: Vec<TileIndexEntry>,
}

fn tile(ctx: &Ctx, image: &Path, annotations: &Path, grid: &TileGrid, out: &Path, fg: Option<ForegroundParams>) -> Result<()> {
    let ann = AnnotationFile::load(annotations)?;
    let img = od_color::load_rgb(image, [DEFAULT_I0; 3])?;
    if ann.width != img.width() || ann.height != img.height() {
        return Err(Error::AnnotationFile(format!(
            "annotations are for a {}x{} image but {} is {}x{}",
            ann.width,
            ann.height,
            image.display(),
            img.width(),
            img.height()
        )));
    }
    if let Some(f) = &fg {
        f.validate()?;
    }
    let classes = ann.labels();
    let samples = extract_tiles(&ann.slide_id, img.width(), img.height(), &ann.polygons, &classes, grid)?;
    ctx.check_dir_output(out)?;
    let mut counts: BTreeMap<String, usize> = classes.iter().map(|c| (c.clone(), 0)).collect();
    let mut unlabeled = 0;
    let mut entries = Vec::new();
    let mut written: Vec<PathBuf> = Vec::new();
    for s in samples {
        let crop = img.crop(s.x, s.y, s.size, s.size)?;
        if let Some(f) = &fg {
            if !foreground_filter(&crop, f) {
                continue;
            }
        }
        let file = format!("{}_{}_{}.png", ann.slide_id, s.x, s.y);
        let path = out.join(&file);
        // labeled and unlabeled grids can share a position; write once
        if !written.contains(&path) {
            crop.save_png(&path)?;
            written.push(path);
        }
        let label = s.label.map(|c| classes[c].clone());
        match &label {
            Some(l) => *counts.get_mut(l).expect("known class") += 1,
            None => unlabeled += 1,
        }
        entries.push(TileIndexEntry { file, x: s.x, y: s.y, label });
    }
    let index = TileIndex {
        slide_id: ann.slide_id.clone(),
        classes,
        grid: *grid,
        tiles: entries,
    };
    let index_path = out.join("index.json");
    write_text(&index_path, &serde_json::to_string_pretty(&index)?)?;
    ctx.write_manifest(
        &out.join("manifest.json"),
        "tile",
        serde_json::json!({"grid": grid, "foreground": fg}),
        None,
        &[image, annotations],
        &[&index_path],
    )?;
    for (c, n) in &counts {
        println!("{c}: {n}");
    }
    println!("unlabeled: {unlabeled}");
    println!("total: {}", index.tiles.len());
    Ok(())
}

fn config_has_seed(path: &Path) -> Result<bool> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(table.contains_key("seed"))
}

fn load_dataset(config: &TrainConfig, base_dir: &Path, manifest_override: Option<&Path>, splits: &[Split]) -> Result<Dataset> {
    if let Some(m) = manifest_override {
        let manifest = DatasetManifest::load(m)?;
        return Dataset::from_manifest(&manifest, m.parent().unwrap_or(Path::new(".")), splits);
    }
    match (&config.data.manifest, &config.data.synthetic) {
        (Some(m), _) => {
            let path = base_dir.join(m);
            let manifest = DatasetManifest::load(&path)?;
            Dataset::from_manifest(&manifest, path.parent().unwrap_or(Path::new(".")), splits)
        }
        (None, Some(s)) => s.build(),
        (None, None) => Err(Error::Config("no dataset: set [data] manifest or [data.synthetic]".into())),
    }
}

fn train(ctx: &Ctx, config_path: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let mut config = TrainConfig::load(config_path)?;
    let seed = match ctx.seed_flag {
        Some(s) => (s, "flag"),
        None if config_has_seed(config_path)? => (config.seed, "config"),
        None => ctx.seed(),
    };
    config.seed = seed.0;
    config.deterministic |= ctx.deterministic;
    let base = config_path.parent().unwrap_or(Path::new("."));
    if resume.is_none() {
        ctx.check_dir_output(out)?;
    } else {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let data = load_dataset(&config, base, None, &[Split::TrainLabeled, Split::TrainUnlabeled, Split::Val, Split::Test])?;
    let checkpoint = resume.map(Checkpoint::load).transpose()?;
    let mut trainer = match &checkpoint {
        Some(c) => Trainer::from_checkpoint(c, &data)?,
        None => Trainer::new(config.clone(), &data)?,
    };
    let config_echo = out.join("config.toml");
    write_text(&config_echo, &trainer.config().to_toml())?;
    let mut inputs = vec![config_path];
    if let Some(r) = resume {
        inputs.push(r);
    }
    ctx.write_manifest(
        &out.join("manifest.json"),
        "train",
        serde_json::to_value(trainer.config())?,
        Some(seed),
        &inputs,
        &[&out.join("report.json"), &out.join("checkpoint_best.json"), &out.join("checkpoint_last.json"), &out.join("train_log.jsonl")],
    )?;
    let report = trainer.fit(Some(out))?;
    println!(
        "stopped: {}; best epoch {:?}; best val balanced accuracy {:.4}",
        report.stop_reason,
        report.best_epoch,
        report.best_val.as_ref().map_or(f64::NAN, |m| m.balanced_accuracy)
    );
    if let Some(t) = &report.test {
        println!("test balanced accuracy {:.4}", t.balanced_accuracy);
    }
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "test" => Ok(Split::Test),
        "val" => Ok(Split::Val),
        "train" | "train_labeled" => Ok(Split::TrainLabeled),
        other => Err(Error::Config(format!("unknown split `{other}` (expected test, val or train)"))),
    }
}

fn eval(ctx: &Ctx, checkpoint: &Path, manifest: Option<&Path>, split: &str, out: Option<&Path>) -> Result<()> {
    let split = parse_split(split)?;
    if let Some(o) = out {
        ctx.check_file_output(o)?;
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.best_or_current()?;
    let base = checkpoint.parent().unwrap_or(Path::new("."));
    let data = load_dataset(&ckpt.config, base, manifest, &[split])?;
    if data.classes != ckpt.classes {
        return Err(Error::Config(format!("dataset classes {:?} differ from checkpoint classes {:?}", data.classes, ckpt.classes)));
    }
    let crop = ckpt.config.eval_center_crop.then_some(ckpt.config.augment.crop_size);
    let metrics = evaluate_tiles(&model, data.split(split), crop, ctx.deterministic)?;
    let text = serde_json::to_string_pretty(&metrics)?;
    println!("{text}");
    if let Some(o) = out {
        write_text(o, &text)?;
        let mut inputs = vec![checkpoint];
        if let Some(m) = manifest {
            inputs.push(m);
        }
        ctx.write_manifest(&sidecar(o), "eval", serde_json::json!({"split": split}), None, &inputs, &[o])?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn heatmap_cmd(ctx: &Ctx, checkpoint: &Path, image: &Path, basis_path: &Path, out: &Path, tile_size: usize, stride: usize, transparent: &[String]) -> Result<()> {
    ctx.check_file_output(out)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.best_or_current()?;
    let basis = load_basis(basis_path)?;
    let img = od_color::load_rgb(image, basis.params.i0)?;
    let transparent_classes: Vec<usize> = if transparent.is_empty() {
        ckpt.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                let c = c.to_lowercase();
                c == "normal" || c == "benign" || c == "normal/benign"
            })
            .map(|(i, _)| i)
            .collect()
    } else {
        transparent
            .iter()
            .map(|name| ckpt.classes.iter().position(|c| c == name).ok_or_else(|| Error::Config(format!("unknown class `{name}`"))))
            .collect::<Result<_>>()?
    };
    let center_crop = ckpt.config.eval_center_crop.then_some(ckpt.config.augment.crop_size.min(tile_size));
    let opts = HeatmapOptions {
        tile_size,
        stride,
        center_crop,
        foreground: ForegroundParams::default(),
        transparent_classes,
    };
    let (overlay, preds) = heatmap(&model, &img, &basis, &opts)?;
    overlay.save(out).map_err(|source| Error::Image {
        path: out.to_path_buf(),
        source,
    })?;
    ctx.write_manifest(
        &sidecar(out),
        "heatmap",
        serde_json::json!({"options": opts, "foreground_tiles": preds.len()}),
        None,
        &[checkpoint, image, basis_path],
        &[out],
    )?;
    println!("{} foreground tiles classified", preds.len());
    Ok(())
}

fn synth(ctx: &Ctx, out: &Path, classes: usize, grid: usize, tile_size: usize) -> Result<()> {
    use crate::datapipe::PolygonAnnotation;
    use crate::synthetic::{self, TextureOptions};
    if !(2..=synthetic::MAX_TEXTURE_CLASSES).contains(&classes) || grid == 0 || tile_size < 8 {
        return Err(Error::Config(format!(
            "synth needs 2..={} classes, grid >= 1 and tile size >= 8",
            synthetic::MAX_TEXTURE_CLASSES
        )));
    }
    ctx.check_dir_output(out)?;
    let seed = ctx.seed();
    let mut rng = crate::rng::stream(seed.0, &[crate::rng::op::SYNTH]);
    let stains = synthetic::perturbed_stains(&mut rng, 4.0);
    let opts = TextureOptions::default();
    let side = grid * tile_size;
    let mut h = vec![0.0; side * side];
    let mut e = vec![0.0; side * side];
    let mut polygons = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let class = (gy * grid + gx) % classes;
            let (th, te) = synthetic::class_texture(class, classes, tile_size, &opts, &mut rng);
            for y in 0..tile_size {
                for x in 0..tile_size {
                    let i = (gy * tile_size + y) * side + gx * tile_size + x;
                    h[i] = th[y * tile_size + x];
                    e[i] = te[y * tile_size + x];
                }
            }
            let (x0, y0) = ((gx * tile_size) as f64, (gy * tile_size) as f64);
            let (x1, y1) = (x0 + tile_size as f64, y0 + tile_size as f64);
            polygons.push(PolygonAnnotation {
                label: format!("class{class}"),
                points: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
            });
        }
    }
    let slide = synthetic::compose(side, side, h, e, stains.0, stains.1);
    let rgb = slide.rgb.map_pixels(|p| p.map(|v| v.round()));
    let image_path = out.join("slide.png");
    rgb.save_png(&image_path)?;
    let ann = AnnotationFile {
        slide_id: "slide".into(),
        width: side,
        height: side,
        polygons,
    };
    let ann_path = out.join("annotations.json");
    write_text(&ann_path, &serde_json::to_string_pretty(&ann)?)?;
    let truth_path = out.join("stains.json");
    write_text(&truth_path, &serde_json::to_string_pretty(&serde_json::json!({"v_h": stains.0, "v_e": stains.1}))?)?;
    ctx.write_manifest(
        &out.join("manifest.json"),
        "synth",
        serde_json::json!({"classes": classes, "grid": grid, "tile_size": tile_size}),
        Some(seed),
        &[],
        &[&image_path, &ann_path, &truth_path],
    )?;
    println!("wrote {}x{} slide with {} annotated regions", side, side, grid * grid);
    Ok(())
}
