//! Two-phase trainer: pre-training on portraits, fine-tuning on projected maps.

mod adam;
mod batch;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{load_pair, read_manifest, CorpusManifest, Split, TrainingPair};
use crate::error::{Error, Result};
use crate::metrics::psnr_2d;
use crate::model::{enhance, Architecture, EnhanceOptions, LdcUnetConfig, ModelHandle};
use crate::nn::{Grads, Tensor};

pub use adam::Adam;
pub use batch::{sample_crop, Crop};

/// Key under which a checkpoint records the last phase it was trained in.
pub const TRAINED_PHASE_KEY: &str = "trained_phase";

fn contract(msg: impl Into<String>) -> Error {
    Error::contract("training", msg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseConfig {
    pub phase: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub crop: usize,
    pub seed: u64,
    pub augment: bool,
    /// Restrict the loss to occupied pixels.
    pub masked_loss: bool,
    /// Minimum occupied fraction of a training crop.
    pub min_crop_occupancy: f64,
    /// Network built when phase 1 starts without an initial checkpoint.
    pub architecture: Architecture,
    pub enhance: EnhanceOptions,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig::phase1()
    }
}

impl PhaseConfig {
    pub fn phase1() -> Self {
        PhaseConfig {
            phase: 1,
            epochs: 30,
            batch_size: 30,
            learning_rate: 1e-4,
            crop: 128,
            seed: 0,
            augment: true,
            masked_loss: true,
            min_crop_occupancy: 0.1,
            architecture: Architecture::LdcUnet(LdcUnetConfig::default()),
            enhance: EnhanceOptions::default(),
        }
    }

    pub fn phase2() -> Self {
        PhaseConfig {
            phase: 2,
            epochs: 10,
            learning_rate: 5e-5,
            crop: 256,
            ..PhaseConfig::phase1()
        }
    }

    pub fn for_phase(phase: u8) -> Result<Self> {
        match phase {
            1 => Ok(Self::phase1()),
            2 => Ok(Self::phase2()),
            p => Err(contract(format!("phase must be 1 or 2, got {p}"))),
        }
    }

    pub fn validate(&self, size_multiple: usize) -> Result<()> {
        if !(self.phase == 1 || self.phase == 2) {
            return Err(contract(format!("phase must be 1 or 2, got {}", self.phase)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(contract("epochs and batch size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(contract("learning rate must be positive"));
        }
        if self.crop == 0 || !self.crop.is_multiple_of(size_multiple) {
            return Err(contract(format!("crop {} must be a positive multiple of {size_multiple}", self.crop)));
        }
        if !(0.0..=1.0).contains(&self.min_crop_occupancy) {
            return Err(contract("minimum crop occupancy must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `Σ|pred − target|·mask / (Σmask · C)`; 0 for an empty mask.
pub fn masked_l1(pred: &Tensor<f32>, target: &Tensor<f32>, mask: &Tensor<f32>) -> Result<f64> {
    Ok(masked_l1_parts(pred, target, mask, false)?.0)
}

/// Loss and its gradient with respect to `pred`.
pub fn masked_l1_grad(pred: &Tensor<f32>, target: &Tensor<f32>, mask: &Tensor<f32>) -> Result<(f64, Tensor<f32>)> {
    let (loss, g) = masked_l1_parts(pred, target, mask, true)?;
    Ok((loss, g.expect("gradient requested")))
}

fn masked_l1_parts(pred: &Tensor<f32>, target: &Tensor<f32>, mask: &Tensor<f32>, want_grad: bool) -> Result<(f64, Option<Tensor<f32>>)> {
    if pred.shape() != target.shape() {
        return Err(contract(format!("prediction {:?} and target {:?} differ", pred.shape(), target.shape())));
    }
    let [n, c, h, w] = pred.shape();
    if mask.n != n || mask.h != h || mask.w != w || !(mask.c == 1 || mask.c == c) {
        return Err(contract(format!("mask {:?} does not broadcast over {:?}", mask.shape(), pred.shape())));
    }
    let hw = h * w;
    let (sum, weight) = abs_sums(pred, target, mask);
    let per_channel_mask = mask.c == 1;
    let denom = if per_channel_mask { weight * c as f64 } else { weight };
    if denom == 0.0 {
        log::warn!("masked L1 over an empty mask");
        return Ok((0.0, want_grad.then(|| Tensor::zeros(n, c, h, w))));
    }
    let grad = want_grad.then(|| {
        let mut g = Tensor::zeros(n, c, h, w);
        let scale = (1.0 / denom) as f32;
        for i in 0..n {
            for ch in 0..c {
                let mc = if per_channel_mask { 0 } else { ch };
                let base = (i * c + ch) * hw;
                let mb = (i * mask.c + mc) * hw;
                for k in 0..hw {
                    let d = pred.data[base + k] - target.data[base + k];
                    let s = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
                    g.data[base + k] = s * mask.data[mb + k] * scale;
                }
            }
        }
        g
    });
    Ok((sum / denom, grad))
}

/// (Σ|d|·m, Σm) with the mask counted once per pixel.
fn abs_sums(pred: &Tensor<f32>, target: &Tensor<f32>, mask: &Tensor<f32>) -> (f64, f64) {
    let [n, c, h, w] = pred.shape();
    let hw = h * w;
    let mut sum = 0.0;
    for i in 0..n {
        for ch in 0..c {
            let mc = if mask.c == 1 { 0 } else { ch };
            let base = (i * c + ch) * hw;
            let mb = (i * mask.c + mc) * hw;
            for k in 0..hw {
                sum += ((pred.data[base + k] - target.data[base + k]).abs() * mask.data[mb + k]) as f64;
            }
        }
    }
    let weight: f64 = mask.data.iter().map(|&v| v as f64).sum();
    (sum, weight)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_psnr: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: u8,
    pub config: PhaseConfig,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub val_psnr_noisy: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_psnr: f64,
    pub best_checkpoint: Option<String>,
    pub aborted: Option<String>,
}

impl TrainReport {
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_psnr,wall_seconds\n");
        for e in &self.epochs {
            let tl = e.train_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
            let psnr = if e.val_psnr.is_infinite() { "inf".into() } else { format!("{:.4}", e.val_psnr) };
            writeln!(s, "{},{tl},{:.6},{psnr},{:.3}", e.epoch, e.val_loss, e.wall_seconds).unwrap();
        }
        s
    }

    /// Writes `report.json` and `curves.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        let body = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("curves.csv");
        fs::write(&csv, self.curves_csv()).map_err(|e| Error::io(&csv, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub qp: i32,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean_before: f64,
    pub mean_after: f64,
    /// Mean masked L1 (in [0, 1] units) of the enhanced maps.
    pub mean_loss: f64,
    pub rows: Vec<EvalRow>,
}

fn raster_tensor(r: &crate::raster::Raster) -> Tensor<f32> {
    let (w, h) = (r.width, r.height);
    let mut t = Tensor::zeros(1, 3, h, w);
    for (k, px) in r.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            t.data[c * h * w + k] = px[c] as f32 / 255.0;
        }
    }
    t
}

fn mask_tensor(m: &crate::raster::Mask) -> Tensor<f32> {
    Tensor::from_vec([1, 1, m.height, m.width], m.data.iter().map(|&b| b as u8 as f32).collect())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Masked Y-PSNR of the pairs before and after enhancement.
pub fn evaluate_pairs(model: &ModelHandle, pairs: &[(String, TrainingPair)], opts: &EnhanceOptions) -> Result<Evaluation> {
    let rows: Vec<(EvalRow, f64)> = pairs
        .par_iter()
        .map(|(id, p)| {
            let out = enhance(model, &p.noisy, &p.mask, opts)?;
            let loss = masked_l1(&raster_tensor(&out), &raster_tensor(&p.clean), &mask_tensor(&p.mask))?;
            Ok((
                EvalRow {
                    id: id.clone(),
                    qp: p.meta.qp,
                    before: psnr_2d(&p.clean, &p.noisy, &p.mask)?,
                    after: psnr_2d(&p.clean, &out, &p.mask)?,
                },
                loss,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        mean_before: mean(rows.iter().map(|r| r.0.before)),
        mean_after: mean(rows.iter().map(|r| r.0.after)),
        mean_loss: mean(rows.iter().map(|r| r.1)),
        rows: rows.into_iter().map(|r| r.0).collect(),
    })
}

fn load_split(root: &Path, m: &CorpusManifest, split: Split) -> Result<Vec<(String, TrainingPair)>> {
    let phase = m.kind.phase();
    m.split(split).map(|e| Ok((e.id.clone(), load_pair(root, e, phase)?))).collect()
}

/// Evaluates `model` on one split of the corpus at `root`.
pub fn evaluate_checkpoint(model: &ModelHandle, root: &Path, split: Split, opts: &EnhanceOptions) -> Result<Evaluation> {
    let m = read_manifest(root)?;
    let pairs = load_split(root, &m, split)?;
    if pairs.is_empty() {
        return Err(contract(format!("corpus has no {} pairs", split.dir())));
    }
    evaluate_pairs(model, &pairs, opts)
}

/// Checkpoint locations inside a training output directory.
pub fn best_checkpoint_path(out: &Path) -> PathBuf {
    out.join("best.ckpt")
}

pub fn last_checkpoint_path(out: &Path) -> PathBuf {
    out.join("last.ckpt")
}

/// Model to start a phase from: a fresh build for phase 1 without `init`, the
/// given checkpoint otherwise. Phase 2 insists on a trained checkpoint.
pub fn initial_model(cfg: &PhaseConfig, init: Option<&Path>) -> Result<ModelHandle> {
    match (cfg.phase, init) {
        (_, Some(path)) => {
            let m = ModelHandle::load(path)?;
            if cfg.phase == 2 && !m.metadata().contains_key(TRAINED_PHASE_KEY) {
                return Err(contract(format!("{} is not a trained checkpoint", path.display())));
            }
            Ok(m)
        }
        (1, None) => ModelHandle::build(cfg.architecture.clone(), cfg.seed),
        _ => Err(contract("phase 2 needs a phase-1 checkpoint to warm start from")),
    }
}

/// One optimizer step worth of gradients, summed over samples in order.
fn batch_gradients(model: &ModelHandle, batch: &[Crop]) -> Result<(f64, f64, Grads<f32>)> {
    let parts: Vec<(f64, f64, Grads<f32>)> = batch
        .par_iter()
        .map(|crop| {
            let (y, cache) = model.forward_train(model.params(), &crop.input)?;
            let (sum, weight) = abs_sums(&y, &crop.target, &crop.mask);
            let c = y.c as f64;
            // gradient of the unnormalized sum; scaled once the batch total is known
            let (_, mut gy) = masked_l1_grad(&y, &crop.target, &crop.mask)?;
            let renorm = (weight * c) as f32;
            gy.data.iter_mut().for_each(|v| *v *= renorm);
            let mut g = model.params().zeros_like();
            model.backward(model.params(), &cache, &gy, &mut g);
            Ok((sum, weight * c, g))
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut sum, mut denom, mut total) = iter.next().ok_or_else(|| contract("empty batch"))?;
    for (s, d, g) in iter {
        sum += s;
        denom += d;
        total.add_assign(&g);
    }
    if denom > 0.0 {
        total.scale((1.0 / denom) as f32);
        Ok((sum / denom, denom, total))
    } else {
        total.scale(0.0);
        Ok((0.0, 0.0, total))
    }
}

/// Trains one phase on the corpus at `root`. With `out`, checkpoints and the
/// report are written there. Returns the best model by validation PSNR.
pub fn train_phase(model: ModelHandle, root: &Path, cfg: &PhaseConfig, out: Option<&Path>) -> Result<(ModelHandle, TrainReport)> {
    let mut model = model;
    cfg.validate(model.size_multiple())?;
    if model.architecture().in_channels() < 3 || model.architecture().out_channels() != 3 {
        return Err(contract("training needs an RGB(+mask) to RGB model"));
    }
    if cfg.phase == 2 && !model.metadata().contains_key(TRAINED_PHASE_KEY) {
        return Err(contract("phase 2 needs a phase-1 checkpoint to warm start from"));
    }
    let manifest = read_manifest(root)?;
    let train = load_split(root, &manifest, Split::Train)?;
    if train.is_empty() {
        return Err(contract("corpus has no training pairs"));
    }
    let mut val = load_split(root, &manifest, Split::Val)?;
    if val.is_empty() {
        log::warn!("corpus has no validation split; validating on the training pairs");
        val = train.clone();
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let start = Instant::now();
    let with_mask = model.architecture().in_channels() == 4;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg.learning_rate);

    let initial = evaluate_pairs(&model, &val, &cfg.enhance)?;
    let mut report = TrainReport {
        phase: cfg.phase,
        config: cfg.clone(),
        train_pairs: train.len(),
        val_pairs: val.len(),
        val_psnr_noisy: initial.mean_before,
        epochs: vec![EpochRecord {
            epoch: 0,
            train_loss: None,
            val_loss: initial.mean_loss,
            val_psnr: initial.mean_after,
            wall_seconds: start.elapsed().as_secs_f64(),
        }],
        best_epoch: 0,
        best_val_psnr: initial.mean_after,
        best_checkpoint: None,
        aborted: None,
    };
    model.metadata_mut().insert(TRAINED_PHASE_KEY.into(), cfg.phase.to_string());
    model.metadata_mut().insert("epoch".into(), "0".into());
    let mut best = model.params().clone();
    let save_best = |m: &ModelHandle, report: &mut TrainReport| -> Result<()> {
        if let Some(dir) = out {
            let p = best_checkpoint_path(dir);
            m.save(&p)?;
            report.best_checkpoint = Some(p.to_string_lossy().into_owned());
        }
        Ok(())
    };
    save_best(&model, &mut report)?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_weight) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Crop> = chunk
                .iter()
                .map(|&i| sample_crop(&train[i].1, cfg, with_mask, &mut rng))
                .collect();
            let (loss, weight, grads) = batch_gradients(&model, &batch)?;
            if !loss.is_finite() || !grads.all_finite() {
                report.aborted = Some(format!("non-finite loss or gradient in epoch {epoch}"));
                break 'epochs;
            }
            adam.step(model.params_mut(), &grads);
            if !model.params().all_finite() {
                report.aborted = Some(format!("non-finite weights in epoch {epoch}"));
                break 'epochs;
            }
            loss_sum += loss * weight;
            loss_weight += weight;
        }
        let ev = evaluate_pairs(&model, &val, &cfg.enhance)?;
        let train_loss = if loss_weight > 0.0 { loss_sum / loss_weight } else { 0.0 };
        log::info!("phase {} epoch {epoch}: train loss {train_loss:.5}, val {:.4} dB", cfg.phase, ev.mean_after);
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: Some(train_loss),
            val_loss: ev.mean_loss,
            val_psnr: ev.mean_after,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if ev.mean_after > report.best_val_psnr {
            report.best_val_psnr = ev.mean_after;
            report.best_epoch = epoch;
            best = model.params().clone();
            model.metadata_mut().insert("epoch".into(), epoch.to_string());
            save_best(&model, &mut report)?;
        }
    }

    if let Some(dir) = out {
        if report.aborted.is_none() {
            model.metadata_mut().insert("epoch".into(), (report.epochs.len() - 1).to_string());
            model.save(&last_checkpoint_path(dir))?;
        }
        report.write(dir)?;
    }
    *model.params_mut() = best;
    model.metadata_mut().insert("epoch".into(), report.best_epoch.to_string());
    if let Some(reason) = &report.aborted {
        return Err(Error::Diverged(reason.clone()));
    }
    Ok((model, report))
}
