//! The semi-supervised training loop: pseudo-labels from K augmentations,
//! MixUp, dual-encoder forward/backward with the contrastive term,
//! validation with early stopping, checkpoints and sliding-window heatmaps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{Rgba, RgbaImage};
use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_he_pair, center_crop, jitter_rgb, AugmentPolicy, DrawLog};
use crate::datapipe::{foreground_filter, BalancedSampler, BatchComposition, ConfusionMatrix, Dataset, EvalMetrics, ForegroundParams, Split, SyntheticDataset, TileData};
use crate::dual_encoder::{DualEncoder, DualForward, DualGrads, EncoderSpec, ModelState, OptimizerConfig, RmsProp};
use crate::error::{Error, Result};
use crate::od_color::RgbImage;
use crate::plot;
use crate::rng;
use crate::separation::{separate_tile, ConcentrationImage};
use crate::ssl_losses::{average_predictions, contrastive_loss_grad, mixup, sharpen, total_loss_grad, HeSample, LabelDistribution, Scored, SslHyperParams};
use crate::stain_model::StainBasis;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Samples per gradient-reduction chunk. Chunks are summed in index order,
/// so gradients do not depend on the number of worker threads.
const GRAD_CHUNK: usize = 8;

/// Above this many cached activations per step, the backward pass recomputes
/// forward activations chunk by chunk instead of keeping them all.
const CACHE_BUDGET_FLOATS: usize = 96 << 20;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest, relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticDataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Process samples sequentially. Results are bitwise identical either
    /// way; this only removes thread scheduling from the picture.
    pub deterministic: bool,
    pub iterations_per_epoch: u64,
    pub patience_epochs: u64,
    pub max_epochs: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u64>,
    pub mixup: bool,
    /// Linear warm-up of the unlabeled and contrastive weights over this
    /// many iterations (0 = full weight from the start).
    pub rampup_iterations: u64,
    /// Use K augmented copies of every labeled sample instead of one.
    pub labeled_k_fold: bool,
    /// Evaluate on a center crop of `augment.crop_size` (else the full tile).
    pub eval_center_crop: bool,
    pub ssl: SslHyperParams,
    pub augment: AugmentPolicy,
    pub batch: BatchComposition,
    pub optimizer: OptimizerConfig,
    pub encoder: EncoderSpec,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            iterations_per_epoch: 1000,
            patience_epochs: 100,
            max_epochs: 500,
            max_iterations: None,
            mixup: true,
            rampup_iterations: 0,
            labeled_k_fold: false,
            eval_center_crop: true,
            ssl: SslHyperParams::default(),
            augment: AugmentPolicy::default(),
            batch: BatchComposition::default(),
            optimizer: OptimizerConfig::default(),
            encoder: EncoderSpec::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.ssl.validate()?;
        self.augment.validate()?;
        self.batch.validate()?;
        self.optimizer.validate()?;
        self.encoder.validate()?;
        if self.iterations_per_epoch == 0 || self.max_epochs == 0 {
            return Err(Error::Config("iterations_per_epoch and max_epochs must be at least 1".into()));
        }
        if self.data.manifest.is_some() && self.data.synthetic.is_some() {
            return Err(Error::Config("[data] takes either `manifest` or `synthetic`, not both".into()));
        }
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: u64,
    /// Completed iterations over the whole run.
    pub iteration: u64,
    pub best_val_accuracy: Option<f64>,
    pub best_epoch: Option<u64>,
    pub epochs_since_best: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub classes: Vec<String>,
    pub config: TrainConfig,
    pub model: ModelState,
    pub optimizer: RmsProp,
    pub state: TrainState,
    /// Parameters of the best validation epoch so far.
    pub best_model: Option<ModelState>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::from(e).context(format!("checkpoint {}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// The best-validation model if one was recorded, else the current one.
    pub fn best_or_current(&self) -> Result<DualEncoder> {
        DualEncoder::from_state(self.best_model.as_ref().unwrap_or(&self.model))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: u64,
    pub iteration: u64,
    pub lr: f64,
    pub ce: f64,
    pub l2: f64,
    pub contrastive: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lr: f64,
    pub mean_total_loss: f64,
    pub val_balanced_accuracy: f64,
    pub improved: bool,
    pub epochs_since_best: u64,
    pub val: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub classes: Vec<String>,
    pub seed: u64,
    pub stop_reason: String,
    pub epochs_completed: u64,
    pub iterations: u64,
    pub best_epoch: Option<u64>,
    pub best_val: Option<EvalMetrics>,
    /// Test metrics of the best-validation model.
    pub test: Option<EvalMetrics>,
    pub epochs: Vec<EpochRecord>,
    pub loss_curve: Vec<StepRecord>,
    pub config: TrainConfig,
}

/// Gradients and losses of one step, before the optimizer update.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub record: StepRecord,
    pub grads: DualGrads,
    pub num_mixed: usize,
    pub num_mixed_labeled: usize,
    /// Sharpened pseudo-label targets of the unlabeled samples.
    pub pseudo_labels: Vec<LabelDistribution>,
}

fn to_sample(h: &ConcentrationImage, e: &ConcentrationImage) -> HeSample {
    HeSample {
        width: h.width,
        height: h.height,
        h: h.values.iter().map(|&v| v as f64).collect(),
        e: e.values.iter().map(|&v| v as f64).collect(),
    }
}

/// One stochastic view of a tile: RGB jitter, separation with the tile's
/// slide basis, then independent H and E augmentation. Streams are keyed by
/// `seed` and `path`.
pub fn augment_tile(tile: &TileData, policy: &AugmentPolicy, seed: u64, path: &[u64]) -> Result<(HeSample, DrawLog)> {
    let sub = |tail: [u64; 2]| {
        let mut p = path.to_vec();
        p.extend_from_slice(&tail);
        rng::stream(seed, &p)
    };
    let (jittered, rgb_log) = if policy.has_rgb_jitter() {
        let (img, f) = jitter_rgb(&tile.rgb, policy, &mut sub([rng::channel::RGB, rng::op::RGB_JITTER]));
        let (h, e) = separate_tile(&img, &tile.basis)?;
        (Some((h, e)), Some(f))
    } else {
        (None, None)
    };
    let (h_full, e_full) = match &jittered {
        Some((h, e)) => (h, e),
        None => (&tile.h, &tile.e),
    };
    let mut rng_h = sub([rng::channel::H, rng::op::HE_AUGMENT]);
    let mut rng_e = sub([rng::channel::E, rng::op::HE_AUGMENT]);
    let pair = augment_he_pair(h_full, e_full, policy, &mut rng_h, &mut rng_e)?;
    let mut log = pair.draw_log;
    log.rgb = rgb_log;
    Ok((to_sample(&pair.h, &pair.e), log))
}

/// Deterministic evaluation input for a tile.
pub fn eval_sample(tile: &TileData, crop: Option<usize>) -> Result<HeSample> {
    eval_sample_from(&tile.h, &tile.e, crop)
}

fn eval_sample_from(h: &ConcentrationImage, e: &ConcentrationImage, crop: Option<usize>) -> Result<HeSample> {
    match crop {
        Some(c) => Ok(to_sample(&center_crop(h, c)?, &center_crop(e, c)?)),
        None => Ok(to_sample(h, e)),
    }
}

fn map_in_order<T: Sync, U: Send>(deterministic: bool, items: &[T], f: impl Fn(usize, &T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
    if deterministic {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    } else {
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Predicted class distribution for every tile.
pub fn predict_tiles(model: &DualEncoder, tiles: &[TileData], crop: Option<usize>, deterministic: bool) -> Result<Vec<LabelDistribution>> {
    map_in_order(deterministic, tiles, |_, t| Ok(model.predict(&eval_sample(t, crop)?)?.1))
}

/// Balanced accuracy and per-class metrics over labeled tiles.
pub fn evaluate_tiles(model: &DualEncoder, tiles: &[TileData], crop: Option<usize>, deterministic: bool) -> Result<EvalMetrics> {
    let preds = predict_tiles(model, tiles, crop, deterministic)?;
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for (t, p) in tiles.iter().zip(&preds) {
        let truth = t.label.ok_or_else(|| Error::Evaluation(format!("tile {}@({}, {}) has no label", t.slide_id, t.x, t.y)))?;
        cm.add(truth, p.argmax());
    }
    cm.metrics()
}

fn activation_floats(spec: &EncoderSpec, h: usize, w: usize) -> usize {
    let mut total = h * w * (1 + spec.stem_width);
    let (mut h, mut w) = (h, w);
    for &c in &spec.stage_widths {
        h = h.div_ceil(2);
        w = w.div_ceil(2);
        total += 2 * c * h * w;
    }
    2 * total
}

/// Gradients of the full objective for iteration `iteration` (no update).
pub fn step_gradients(model: &DualEncoder, data: &Dataset, sampler: &BalancedSampler, config: &TrainConfig, epoch: u64, iteration: u64) -> Result<StepOutput> {
    let seed = config.seed;
    let policy = &config.augment;
    let ramp = if config.rampup_iterations == 0 {
        1.0
    } else {
        (iteration as f64 / config.rampup_iterations as f64).min(1.0)
    };
    let ssl = &SslHyperParams {
        lambda_u: config.ssl.lambda_u * ramp,
        lambda_c: config.ssl.lambda_c * ramp,
        ..config.ssl
    };
    let c = model.num_classes();
    let batch = sampler.batch(iteration);
    let det = config.deterministic;

    // (b) labeled views with one-hot targets
    let copies = if config.labeled_k_fold { ssl.k } else { 1 };
    let labeled_jobs: Vec<(usize, usize, usize, usize)> = batch
        .labeled
        .iter()
        .enumerate()
        .flat_map(|(j, &(idx, class))| (0..copies).map(move |k| (j, k, idx, class)))
        .collect();
    let labeled: Vec<(HeSample, LabelDistribution)> = map_in_order(det, &labeled_jobs, |_, &(j, k, idx, class)| {
        let (x, _) = augment_tile(&data.train_labeled[idx], policy, seed, &[iteration, 0, j as u64, k as u64])?;
        Ok((x, LabelDistribution::one_hot(class, c)))
    })?;

    // (a) K views per unlabeled sample -> averaged, sharpened targets
    let unlabeled: Vec<(HeSample, LabelDistribution)> = map_in_order(det, &batch.unlabeled, |j, &idx| {
        let tile = &data.train_unlabeled[idx];
        let mut views = Vec::with_capacity(ssl.k);
        let mut preds = Vec::with_capacity(ssl.k);
        for k in 0..ssl.k {
            let (x, _) = augment_tile(tile, policy, seed, &[iteration, 1, j as u64, k as u64])?;
            preds.push(model.predict(&x)?.1);
            views.push(x);
        }
        let target = sharpen(&average_predictions(&preds)?, ssl.temperature)?;
        Ok((views.swap_remove(0), target))
    })?;
    let pseudo_labels: Vec<LabelDistribution> = unlabeled.iter().map(|(_, y)| y.clone()).collect();

    // (c) MixUp over a seeded shuffle of L and U
    let n_l = labeled.len();
    let pool: Vec<(HeSample, LabelDistribution)> = labeled.into_iter().chain(unlabeled).collect();
    let n = pool.len();
    let mixed: Vec<(HeSample, LabelDistribution)> = if config.mixup {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(seed, &[rng::op::MIX_PERMUTATION, iteration]));
        let beta = Beta::new(ssl.alpha, ssl.alpha).map_err(|e| Error::Config(format!("beta({}): {e}", ssl.alpha)))?;
        (0..n)
            .map(|i| {
                let lam = beta.sample(&mut rng::stream(seed, &[rng::op::MIX_LAMBDA, iteration, i as u64]));
                let (xi, yi) = &pool[i];
                let (xj, yj) = &pool[perm[i]];
                let m = mixup(xi, xj, yi, yj, lam, i < n_l)?;
                Ok((m.x, m.y))
            })
            .collect::<Result<_>>()?
    } else {
        pool
    };

    // (d) forward
    let budget_ok = n * activation_floats(model.spec(), mixed[0].0.height, mixed[0].0.width) <= CACHE_BUDGET_FLOATS;
    let forwards: Vec<DualForward> = map_in_order(det, &mixed, |_, (x, _)| model.forward(x))?;

    // (e) contrastive terms with shift-by-one negatives
    let d = model.spec().feature_dim;
    let mut d_fh = vec![vec![0.0; d]; n];
    let mut d_fe = vec![vec![0.0; d]; n];
    let mut terms = Vec::with_capacity(n);
    if n >= 2 {
        for i in 0..n {
            let k = (i + 1) % n;
            let g = contrastive_loss_grad(&forwards[i].pair, &forwards[k].pair.f_e, ssl.margin)?;
            terms.push(g.loss);
            for t in 0..d {
                d_fh[i][t] += ssl.lambda_c * g.d_f_h_i[t];
                d_fe[i][t] += ssl.lambda_c * g.d_f_e_i[t];
                d_fe[k][t] += ssl.lambda_c * g.d_f_e_k[t];
            }
        }
    }

    // (f) total loss
    let scored: Vec<Scored> = forwards.iter().zip(&mixed).map(|(f, (_, y))| (f.pred.clone(), y.clone())).collect();
    let (lab, unl) = scored.split_at(n_l);
    let tg = total_loss_grad(lab, unl, &terms, ssl)?;
    let d_pred: Vec<&Vec<f64>> = tg.d_labeled.iter().chain(&tg.d_unlabeled).collect();

    // (g) backward, reduced in fixed chunk order
    let chunks: Vec<std::ops::Range<usize>> = (0..n).step_by(GRAD_CHUNK).map(|s| s..(s + GRAD_CHUNK).min(n)).collect();
    let forwards = if budget_ok { Some(forwards) } else { None };
    let partial: Vec<DualGrads> = map_in_order(det, &chunks, |_, range| {
        let mut g = DualGrads::zeros_for(model);
        for i in range.clone() {
            match &forwards {
                Some(f) => model.backward(&f[i], d_pred[i], &d_fh[i], &d_fe[i], &mut g),
                None => {
                    let f = model.forward(&mixed[i].0)?;
                    model.backward(&f, d_pred[i], &d_fh[i], &d_fe[i], &mut g);
                }
            }
        }
        Ok(g)
    })?;
    let mut grads = DualGrads::zeros_for(model);
    for g in &partial {
        grads.add_assign(g);
    }
    let b = tg.breakdown;
    if !grads.all_finite() || ![b.ce, b.l2, b.contrastive, b.total].iter().all(|v| v.is_finite()) {
        return Err(Error::NumericFault { layer: "loss/gradients".into() });
    }
    Ok(StepOutput {
        record: StepRecord {
            epoch,
            iteration,
            lr: config.optimizer.lr_at_epoch(epoch),
            ce: b.ce,
            l2: b.l2,
            contrastive: b.contrastive,
            total: b.total,
        },
        grads,
        num_mixed: n,
        num_mixed_labeled: n_l,
        pseudo_labels,
    })
}

pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a Dataset,
    sampler: BalancedSampler,
    pub model: DualEncoder,
    optimizer: RmsProp,
    pub state: TrainState,
    best_model: Option<ModelState>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let model = DualEncoder::new(&config.encoder, data.classes.len(), config.seed)?;
        let optimizer = RmsProp::new(config.optimizer, &model);
        Self::assemble(config, data, model, optimizer, TrainState::default(), None)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, data: &'a Dataset) -> Result<Self> {
        if ckpt.classes != data.classes {
            return Err(Error::Config(format!(
                "checkpoint classes {:?} differ from dataset classes {:?}",
                ckpt.classes, data.classes
            )));
        }
        let model = DualEncoder::from_state(&ckpt.model)?;
        Self::assemble(ckpt.config.clone(), data, model, ckpt.optimizer.clone(), ckpt.state.clone(), ckpt.best_model.clone())
    }

    fn assemble(config: TrainConfig, data: &'a Dataset, model: DualEncoder, optimizer: RmsProp, state: TrainState, best_model: Option<ModelState>) -> Result<Self> {
        if config.batch.num_classes() != data.classes.len() {
            return Err(Error::Config(format!(
                "batch composition has {} classes, dataset has {}",
                config.batch.num_classes(),
                data.classes.len()
            )));
        }
        let sampler = BalancedSampler::new(data.labeled_pools(), (0..data.train_unlabeled.len()).collect(), config.batch.clone(), config.seed, &data.classes)?;
        Ok(Self {
            config,
            data,
            sampler,
            model,
            optimizer,
            state,
            best_model,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn eval_crop(&self) -> Option<usize> {
        self.config.eval_center_crop.then_some(self.config.augment.crop_size)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            classes: self.data.classes.clone(),
            config: self.config.clone(),
            model: self.model.state(),
            optimizer: self.optimizer.clone(),
            state: self.state.clone(),
            best_model: self.best_model.clone(),
        }
    }

    /// One optimization step. On error the model is left untouched.
    pub fn step(&mut self) -> Result<StepRecord> {
        let out = step_gradients(&self.model, self.data, &self.sampler, &self.config, self.state.epoch, self.state.iteration)?;
        self.optimizer.step(&mut self.model, &out.grads, out.record.lr);
        self.state.iteration += 1;
        Ok(out.record)
    }

    pub fn evaluate(&self, split: Split) -> Result<EvalMetrics> {
        evaluate_tiles(&self.model, self.data.split(split), self.eval_crop(), self.config.deterministic)
    }

    /// Validation at the end of an epoch; tracks the best model.
    pub fn end_epoch(&mut self, mean_total_loss: f64) -> Result<EpochRecord> {
        let val = self.evaluate(Split::Val)?;
        let lr = self.config.optimizer.lr_at_epoch(self.state.epoch);
        let epoch = self.state.epoch;
        self.state.epoch += 1;
        let acc = val.balanced_accuracy;
        let improved = self.state.best_val_accuracy.is_none_or(|b| acc > b);
        if improved {
            self.state.best_val_accuracy = Some(acc);
            self.state.best_epoch = Some(epoch);
            self.state.epochs_since_best = 0;
            self.best_model = Some(self.model.state());
        } else {
            self.state.epochs_since_best += 1;
        }
        Ok(EpochRecord {
            epoch,
            lr,
            mean_total_loss,
            val_balanced_accuracy: acc,
            improved,
            epochs_since_best: self.state.epochs_since_best,
            val,
        })
    }

    fn stop_reason(&self) -> Option<String> {
        if self.state.epochs_since_best > self.config.patience_epochs {
            return Some(format!("no validation improvement for {} epochs", self.state.epochs_since_best));
        }
        if self.state.epoch >= self.config.max_epochs {
            return Some(format!("reached max_epochs = {}", self.config.max_epochs));
        }
        if let Some(m) = self.config.max_iterations {
            if self.state.iteration >= m {
                return Some(format!("reached max_iterations = {m}"));
            }
        }
        None
    }

    /// Runs to completion. With `out_dir`, writes the JSONL log, last and
    /// best checkpoints, the report and curve plots there.
    pub fn fit(&mut self, out_dir: Option<&Path>) -> Result<FitReport> {
        let mut log = match out_dir {
            Some(dir) => {
                let path = dir.join("train_log.jsonl");
                let f = File::options().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
                Some((BufWriter::new(f), path))
            }
            None => None,
        };
        let mut write_log = |value: serde_json::Value| -> Result<()> {
            if let Some((w, path)) = log.as_mut() {
                writeln!(w, "{value}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            Ok(())
        };
        let ipe = self.config.iterations_per_epoch;
        let mut curve = Vec::new();
        let mut epochs = Vec::new();
        let stop_reason = loop {
            if let Some(reason) = self.stop_reason() {
                break reason;
            }
            let epoch_end = (self.state.epoch + 1) * ipe;
            let mut sum = 0.0;
            let mut count = 0u64;
            while self.state.iteration < epoch_end && self.config.max_iterations.is_none_or(|m| self.state.iteration < m) {
                let rec = match self.step() {
                    Ok(r) => r,
                    Err(e) => {
                        if let Some(dir) = out_dir {
                            self.checkpoint().save(&dir.join("checkpoint_last.json"))?;
                        }
                        return Err(e.context(format!("iteration {}", self.state.iteration)));
                    }
                };
                sum += rec.total;
                count += 1;
                write_log(serde_json::json!({"kind": "iteration", "record": rec}))?;
                curve.push(rec);
            }
            if self.state.iteration < epoch_end {
                // iteration cap hit mid-epoch
                continue;
            }
            let rec = self.end_epoch(if count > 0 { sum / count as f64 } else { f64::NAN })?;
            write_log(serde_json::json!({"kind": "epoch", "record": rec}))?;
            if let Some(dir) = out_dir {
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join("checkpoint_last.json"))?;
                if rec.improved {
                    Checkpoint {
                        model: self.model.state(),
                        ..ckpt
                    }
                    .save(&dir.join("checkpoint_best.json"))?;
                }
            }
            epochs.push(rec);
        };
        if self.best_model.is_none() {
            // stopped before any epoch finished: validate the current model
            let val = self.evaluate(Split::Val)?;
            self.state.best_val_accuracy = Some(val.balanced_accuracy);
            self.best_model = Some(self.model.state());
            if let Some(dir) = out_dir {
                self.checkpoint().save(&dir.join("checkpoint_last.json"))?;
                Checkpoint {
                    model: self.model.state(),
                    ..self.checkpoint()
                }
                .save(&dir.join("checkpoint_best.json"))?;
            }
        }
        if let Some((w, path)) = log.as_mut() {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        let best = DualEncoder::from_state(self.best_model.as_ref().expect("set above"))?;
        let best_val = Some(evaluate_tiles(&best, &self.data.val, self.eval_crop(), self.config.deterministic)?);
        let test = if self.data.test.is_empty() {
            None
        } else {
            Some(evaluate_tiles(&best, &self.data.test, self.eval_crop(), self.config.deterministic)?)
        };
        let report = FitReport {
            classes: self.data.classes.clone(),
            seed: self.config.seed,
            stop_reason,
            epochs_completed: self.state.epoch,
            iterations: self.state.iteration,
            best_epoch: self.state.best_epoch,
            best_val,
            test,
            epochs,
            loss_curve: curve,
            config: self.config.clone(),
        };
        if let Some(dir) = out_dir {
            write_report(dir, &report)?;
        }
        Ok(report)
    }
}

fn write_report(dir: &Path, report: &FitReport) -> Result<()> {
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&path, e))?;
    let pick = |f: fn(&StepRecord) -> f64| report.loss_curve.iter().map(f).collect::<Vec<f64>>();
    let (total, ce, l2) = (pick(|r| r.total), pick(|r| r.ce), pick(|r| r.l2));
    plot::save_line_chart(
        &dir.join("loss.png"),
        &[
            plot::Series { values: &total, color: [30, 30, 30] },
            plot::Series { values: &ce, color: [200, 40, 40] },
            plot::Series { values: &l2, color: [40, 90, 200] },
        ],
    )?;
    let acc: Vec<f64> = report.epochs.iter().map(|e| e.val_balanced_accuracy).collect();
    plot::save_line_chart(&dir.join("val_accuracy.png"), &[plot::Series { values: &acc, color: [20, 140, 60] }])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapOptions {
    pub tile_size: usize,
    pub stride: usize,
    pub center_crop: Option<usize>,
    pub foreground: ForegroundParams,
    /// Classes drawn fully transparent (e.g. normal/benign).
    pub transparent_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePrediction {
    pub x: usize,
    pub y: usize,
    pub class: usize,
    pub confidence: f64,
}

/// Fully saturated color for class `c` of `n`, evenly spaced in hue.
pub fn class_color(c: usize, n: usize) -> [u8; 3] {
    let h = 6.0 * c as f64 / n.max(1) as f64;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0f64).round() as u8, (g * 255.0f64).round() as u8, (b * 255.0f64).round() as u8]
}

/// Sliding-window predictions over foreground tiles, drawn as an RGBA
/// overlay: hue is the class, opacity the max softmax probability.
pub fn heatmap(model: &DualEncoder, image: &RgbImage, basis: &StainBasis, opts: &HeatmapOptions) -> Result<(RgbaImage, Vec<TilePrediction>)> {
    if opts.tile_size == 0 || opts.stride == 0 {
        return Err(Error::Config("heatmap tile size and stride must be positive".into()));
    }
    let (w, h) = (image.width(), image.height());
    let positions: Vec<(usize, usize)> = (0..)
        .step_by(opts.stride)
        .take_while(|y| y + opts.tile_size <= h)
        .flat_map(|y| (0..).step_by(opts.stride).take_while(|x| x + opts.tile_size <= w).map(move |x| (x, y)))
        .collect();
    let preds: Vec<Option<TilePrediction>> = positions
        .par_iter()
        .map(|&(x, y)| {
            let tile = image.crop(x, y, opts.tile_size, opts.tile_size)?;
            if !foreground_filter(&tile, &opts.foreground) {
                return Ok(None);
            }
            let (th, te) = separate_tile(&tile, basis)?;
            let (_, pred) = model.predict(&eval_sample_from(&th, &te, opts.center_crop)?)?;
            let class = pred.argmax();
            Ok(Some(TilePrediction {
                x,
                y,
                class,
                confidence: pred.probs()[class],
            }))
        })
        .collect::<Result<_>>()?;
    let mut overlay = RgbaImage::new(w as u32, h as u32);
    let preds: Vec<TilePrediction> = preds.into_iter().flatten().collect();
    for p in &preds {
        if opts.transparent_classes.contains(&p.class) {
            continue;
        }
        let [r, g, b] = class_color(p.class, model.num_classes());
        let a = (p.confidence * 255.0).round() as u8;
        for y in p.y..p.y + opts.tile_size {
            for x in p.x..p.x + opts.tile_size {
                overlay.put_pixel(x as u32, y as u32, Rgba([r, g, b, a]));
            }
        }
    }
    Ok((overlay, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Rotation;

    fn tiny_data() -> Dataset {
        SyntheticDataset {
            labeled_per_class: 4,
            unlabeled: 12,
            val: 6,
            test: 6,
            tile_size: 16,
            tiles_per_slide: 12,
            ..Default::default()
        }
        .build()
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            seed: 3,
            iterations_per_epoch: 3,
            patience_epochs: 1,
            max_epochs: 3,
            ssl: SslHyperParams { margin: 1.0, ..Default::default() },
            augment: AugmentPolicy {
                crop_size: 12,
                ..Default::default()
            },
            batch: BatchComposition {
                per_class_labeled: vec![2, 2, 2],
                unlabeled_count: 4,
            },
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                ..Default::default()
            },
            encoder: EncoderSpec {
                input_channels: 1,
                stem_width: 4,
                stage_widths: vec![4, 8],
                feature_dim: 8,
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_toml_round_trip_and_unknown_keys() {
        let mut cfg = tiny_config();
        cfg.augment.rotation = Rotation::Continuous { max_degrees: 10.0 };
        cfg.data.synthetic = Some(SyntheticDataset::default());
        let text = cfg.to_toml();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        let bad = format!("{text}\nlearning_rat = 3\n");
        assert!(matches!(TrainConfig::from_toml(&bad), Err(Error::Config(_))));
        let nested = "[ssl]\nmargn = 2.0\n";
        assert!(TrainConfig::from_toml(nested).is_err());
    }

    #[test]
    fn mixed_counts_match_batch() {
        let data = tiny_data();
        let cfg = tiny_config();
        let t = Trainer::new(cfg.clone(), &data).unwrap();
        let out = step_gradients(&t.model, &data, &t.sampler, &cfg, 0, 0).unwrap();
        assert_eq!(out.num_mixed, 10);
        assert_eq!(out.num_mixed_labeled, 6);
        assert_eq!(out.pseudo_labels.len(), 4);
        // targets are a pure function of (model, iteration)
        let again = step_gradients(&t.model, &data, &t.sampler, &cfg, 0, 0).unwrap();
        assert_eq!(out.pseudo_labels, again.pseudo_labels);
        assert_eq!(out.grads, again.grads);
    }

    #[test]
    fn parallel_and_sequential_steps_agree_bitwise() {
        let data = tiny_data();
        let mut cfg = tiny_config();
        let t = Trainer::new(cfg.clone(), &data).unwrap();
        let par = step_gradients(&t.model, &data, &t.sampler, &cfg, 0, 4).unwrap();
        cfg.deterministic = true;
        let seq = step_gradients(&t.model, &data, &t.sampler, &cfg, 0, 4).unwrap();
        assert_eq!(par.grads, seq.grads);
        assert_eq!(par.record, seq.record);
    }

    #[test]
    fn supervised_config_is_plain_cross_entropy() {
        let data = tiny_data();
        let mut cfg = tiny_config();
        cfg.ssl.lambda_u = 0.0;
        cfg.ssl.lambda_c = 0.0;
        cfg.mixup = false;
        cfg.batch.unlabeled_count = 0;
        let t = Trainer::new(cfg.clone(), &data).unwrap();
        let out = step_gradients(&t.model, &data, &t.sampler, &cfg, 0, 0).unwrap();
        assert_eq!(out.record.total, out.record.ce);
        assert_eq!(out.num_mixed, 6);
        // the unlabeled pool is never read
        let mut other = data.clone();
        other.train_unlabeled.truncate(1);
        let t2 = Trainer::new(cfg.clone(), &other).unwrap();
        let out2 = step_gradients(&t2.model, &other, &t2.sampler, &cfg, 0, 0).unwrap();
        assert_eq!(out.record, out2.record);
    }

    #[test]
    fn early_stop_with_zero_patience() {
        let data = tiny_data();
        let mut cfg = tiny_config();
        cfg.patience_epochs = 0;
        cfg.max_epochs = 50;
        cfg.optimizer.learning_rate = 1e-9;
        let mut t = Trainer::new(cfg, &data).unwrap();
        let report = t.fit(None).unwrap();
        // stops after the first epoch that fails to improve
        let first_bad = report.epochs.iter().position(|e| !e.improved).unwrap();
        assert_eq!(report.epochs.len(), first_bad + 1);
        assert_eq!(report.epochs.last().unwrap().epochs_since_best, 1);
    }

    #[test]
    fn checkpoint_resume_continues_trajectory() {
        let data = tiny_data();
        let cfg = tiny_config();
        let mut a = Trainer::new(cfg.clone(), &data).unwrap();
        for _ in 0..4 {
            a.step().unwrap();
        }
        let json = serde_json::to_string(&a.checkpoint()).unwrap();
        let ckpt: Checkpoint = serde_json::from_str(&json).unwrap();
        let mut b = Trainer::from_checkpoint(&ckpt, &data).unwrap();
        for _ in 0..5 {
            let ra = a.step().unwrap();
            let rb = b.step().unwrap();
            assert!((ra.total - rb.total).abs() <= 1e-12);
        }
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn fit_writes_artifacts_and_reports_best_checkpoint() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny_config(), &data).unwrap();
        let report = t.fit(Some(dir.path())).unwrap();
        for f in ["train_log.jsonl", "checkpoint_last.json", "checkpoint_best.json", "report.json", "loss.png", "val_accuracy.png"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let best = Checkpoint::load(&dir.path().join("checkpoint_best.json")).unwrap();
        let model = DualEncoder::from_state(&best.model).unwrap();
        let test = evaluate_tiles(&model, &data.test, Some(12), false).unwrap();
        assert_eq!(Some(test), report.test);
        let val = evaluate_tiles(&model, &data.val, Some(12), false).unwrap();
        assert_eq!(Some(val.balanced_accuracy), t.state.best_val_accuracy);
    }

    #[test]
    fn constant_model_has_chance_balanced_accuracy() {
        let data = tiny_data();
        let mut model = DualEncoder::new(&tiny_config().encoder, 3, 0).unwrap();
        let c = model.num_classes();
        let fd = model.spec().feature_dim;
        model.head.params.iter_mut().for_each(|p| *p = 0.0);
        model.head.params[fd * c + 1] = 5.0;
        let m = evaluate_tiles(&model, &data.val, Some(12), true).unwrap();
        assert!((m.balanced_accuracy - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn blank_image_heatmap_is_transparent() {
        let model = DualEncoder::new(&tiny_config().encoder, 3, 0).unwrap();
        let img = RgbImage::new(40, 40, vec![[255.0; 3]; 1600], [255.0; 3]).unwrap();
        let basis = crate::stain_model::build_basis(crate::synthetic::reference_stains().0, crate::synthetic::reference_stains().1, None)
            .unwrap()
            .with_norms(1.0, 1.0)
            .unwrap();
        let opts = HeatmapOptions {
            tile_size: 16,
            stride: 16,
            center_crop: None,
            foreground: ForegroundParams::default(),
            transparent_classes: vec![],
        };
        let (overlay, preds) = heatmap(&model, &img, &basis, &opts).unwrap();
        assert!(preds.is_empty());
        assert!(overlay.pixels().all(|p| p.0[3] == 0));
    }

    #[test]
    fn class_colors_are_distinct() {
        let c: Vec<[u8; 3]> = (0..4).map(|i| class_color(i, 4)).collect();
        assert_eq!(c[0], [255, 0, 0]);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(c[i], c[j]);
            }
        }
    }
}
