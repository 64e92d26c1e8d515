//! Mini-batch training: AdamW, cosine schedule, global-norm clipping,
//! periodic density refits and VOS negatives.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::datasets::{stratified_split, Dataset};
use crate::error::{contract, GemError, Result};
use crate::metrics::{calibration_report, CalibrationReport};
use crate::model::{Frozen, GemModel, LossBreakdown, Mode};
use crate::networks::{Graph, ParamStore};
use crate::rng::{substream, substream_seed, Rng};

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// `p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != store.len() {
            return Err(contract("one gradient per parameter is required"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.value.shape() != g.shape() {
                return Err(contract(format!("gradient shape mismatch for `{}`", p.name)));
            }
            let pd = p.value.data_mut();
            #[allow(clippy::needless_range_loop)]
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / c1;
                let vhat = v.data()[i] / c2;
                pd[i] -= lr * self.weight_decay * pd[i] + lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `base · ½(1 + cos(π·step/total))`; constant `base` when `total == 0`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    pub grad_clip: f64,
    pub val_fraction: f64,
    pub density_refit_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            base_lr: 5e-4,
            weight_decay: 1e-4,
            cosine: true,
            grad_clip: 1.0,
            val_fraction: 0.1,
            density_refit_every: 5,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str| Err(GemError::Config(format!("schedule.{k} is out of range")));
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction");
        }
        if self.density_refit_every == 0 {
            return bad("density_refit_every");
        }
        Ok(())
    }
}

/// Per-epoch means of the loss components plus validation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub pred: f64,
    pub kl: f64,
    pub fi: f64,
    pub ebm: f64,
    pub unc: f64,
    pub total: f64,
    pub val_acc: f64,
    pub val_ece: f64,
    pub val_nll: f64,
    pub skipped_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub steps: usize,
    pub skipped_steps: usize,
}

pub const HISTORY_HEADER: &str = "epoch,lr,pred,kl,fi,ebm,unc,total,val_acc,val_ece,val_nll,skipped_steps";

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{HISTORY_HEADER}")?;
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch, r.lr, r.pred, r.kl, r.fi, r.ebm, r.unc, r.total, r.val_acc, r.val_ece, r.val_nll, r.skipped_steps
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Validation metrics of `model` on `data`.
pub fn evaluate_split(model: &GemModel, data: &Dataset) -> Result<CalibrationReport> {
    let d = model.predict(&data.x)?;
    calibration_report(&d.p_hat, &data.y)
}

/// Feature-space outliers for one epoch: per class, `per_class` points from
/// the low-likelihood tail of the class Gaussian.
fn vos_pool(model: &GemModel, per_class: usize, rng: &mut Rng) -> Result<Vec<Option<Tensor>>> {
    let Some(state) = model.density.as_ref() else {
        return Err(contract("VOS needs fitted class Gaussians"));
    };
    let tail = model.config.vos.tail_quantile;
    (0..model.classes())
        .map(|c| match state.classes.means.get(c) {
            Some(Some(_)) => Ok(Some(state.classes.vos_sample(c, per_class, tail, rng)?.points)),
            _ => Ok(None),
        })
        .collect()
}

fn batch_negatives(pool: &[Option<Tensor>], per_class: usize, batch: usize) -> Result<Option<Tensor>> {
    let mut data = vec![];
    let mut dim = 0;
    for p in pool.iter().flatten() {
        dim = p.cols();
        for r in batch * per_class..(batch + 1) * per_class {
            data.extend_from_slice(p.row(r));
        }
    }
    if data.is_empty() {
        return Ok(None);
    }
    Ok(Some(Tensor::new(data.len() / dim, dim, data)?))
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.pred += b.pred;
    acc.kl += b.kl;
    acc.fi += b.fi;
    acc.ebm += b.ebm;
    acc.unc += b.unc;
    acc.total += b.total;
}

/// Trains `model` on `data` (labels in `0..classes`). A stratified slice of
/// `val_fraction` is held out for per-epoch validation. Density models are
/// fitted before epoch 1, refitted every `density_refit_every` epochs and once
/// more after the last epoch; the energy calibration is fitted at the end.
pub fn fit(model: &mut GemModel, data: &Dataset, schedule: &TrainSchedule, seed: u64) -> Result<History> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(contract("training set is empty"));
    }
    if data.dim() != model.config.arch.input_dim {
        return Err(contract(format!(
            "input dimension {} does not match the architecture ({})",
            data.dim(),
            model.config.arch.input_dim
        )));
    }
    if data.y.iter().any(|y| *y >= model.classes()) {
        return Err(contract("training labels must lie in 0..classes"));
    }
    let mut split_rng = substream(seed, "data/split");
    let (train_idx, val_idx) = stratified_split(&data.y, model.classes(), schedule.val_fraction, &mut split_rng);
    let train = data.select(&train_idx);
    let val = data.select(&val_idx);

    let cfg = model.config.clone();
    let wants_density = cfg.needs_density() || cfg.needs_negatives();
    let density_seed = substream_seed(seed, "density");
    let mut shuffle_rng = substream(seed, "data/shuffle");
    let mut dropout_rng = substream(seed, "dropout");
    let mut vos_rng = substream(seed, "vos");

    let batches = train.len().div_ceil(schedule.batch_size);
    let total_steps = schedule.epochs * batches;
    let mut opt = AdamW::new(&model.nets.store, schedule.weight_decay);
    let mut history = History {
        train_indices: train_idx,
        val_indices: val_idx,
        ..History::default()
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let neg_per_class = schedule.batch_size.div_ceil(model.classes());

    for epoch in 1..=schedule.epochs {
        if wants_density && (epoch - 1) % schedule.density_refit_every == 0 {
            model.fit_density(&train.x, &train.y, density_seed.wrapping_add(epoch as u64))?;
        }
        let pool = if cfg.needs_negatives() && epoch > cfg.vos.warmup_epochs {
            Some(vos_pool(model, neg_per_class * batches, &mut vos_rng)?)
        } else {
            None
        };
        order.shuffle(&mut shuffle_rng);
        let epoch_lr = if schedule.cosine {
            cosine_lr(schedule.base_lr, history.steps, total_steps)
        } else {
            schedule.base_lr
        };
        let mut acc = LossBreakdown::default();
        let mut skipped = 0;
        for (b, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let lr = if schedule.cosine {
                cosine_lr(schedule.base_lr, history.steps, total_steps)
            } else {
                schedule.base_lr
            };
            model.nets.power_iterate(1);
            let x = train.x.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.y[i]).collect();
            let negatives = match &pool {
                Some(p) => batch_negatives(p, neg_per_class, b)?,
                None => None,
            };
            let mut tape = Tape::new();
            let drop = Rng::seed_from_u64(dropout_rng.random());
            let (breakdown, mut grads) = {
                let mut g = Graph::new(&mut tape, &model.nets.store, true, Some(drop));
                let (id, neg) = model.forward(&mut g, &x, Some(&y), negatives.as_ref(), Mode::Train, &Frozen::default())?;
                let (loss, breakdown) = model.total_objective(g.tape, &id, neg.as_ref(), &y)?;
                if !breakdown.total.is_finite() {
                    return Err(GemError::Diverged {
                        epoch,
                        step: history.steps,
                        detail: serde_json::to_string(&breakdown)?,
                    });
                }
                g.tape.backward(loss)?;
                (breakdown, g.param_grads())
            };
            history.steps += 1;
            accumulate(&mut acc, &breakdown);
            let norm = clip_global_norm(&mut grads, schedule.grad_clip);
            if !norm.is_finite() {
                skipped += 1;
                log::warn!("epoch {epoch} step {}: non-finite gradient, step skipped", history.steps);
                continue;
            }
            opt.update(&mut model.nets.store, &grads, lr)?;
        }
        let nb = batches as f64;
        let report = if val.is_empty() { None } else { Some(evaluate_split(model, &val)?) };
        let rec = EpochRecord {
            epoch,
            lr: epoch_lr,
            pred: acc.pred / nb,
            kl: acc.kl / nb,
            fi: acc.fi / nb,
            ebm: acc.ebm / nb,
            unc: acc.unc / nb,
            total: acc.total / nb,
            val_acc: report.as_ref().map_or(f64::NAN, |r| r.accuracy),
            val_ece: report.as_ref().map_or(f64::NAN, |r| r.ece),
            val_nll: report.as_ref().map_or(f64::NAN, |r| r.nll),
            skipped_steps: skipped,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val_acc {:.4} val_ece {:.4}",
            rec.total,
            rec.val_acc,
            rec.val_ece
        );
        history.skipped_steps += skipped;
        history.epochs.push(rec);
    }
    if wants_density {
        model.fit_density(&train.x, &train.y, density_seed)?;
    }
    model.fit_energy_calibration(&train.x)?;
    Ok(history)
}
