//! Training recipe: Adam, linear warmup into cosine annealing, Mixup then
//! Freq-MixStyle, soft-label cross-entropy.

pub mod augment;
pub mod data;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::autodiff::Gradients;
use crate::bundle::Bundle;
use crate::error::{Error, Result};
use crate::network::{argmax_rows, NetConfig, TfSepNet};
use crate::nn::{apply_staged, Ctx, Module};
use crate::tensor::Tensor;

pub use augment::{freq_mixstyle, freq_mixstyle_with, mixup, mixup_with, sample_beta};
pub use data::{generate_toy_dataset, load_wav_folder, Batch, Dataset, ToyDatasetSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_epochs: f64,
    pub adam: AdamConfig,
    /// `0` disables Mixup.
    pub mixup_alpha: f64,
    /// `0` disables Freq-MixStyle.
    pub fms_alpha: f64,
    pub fms_p: f64,
    /// Floor on the standard deviation Freq-MixStyle divides by.
    pub fms_eps: f64,
    pub seed: u64,
    /// Stop once held-out accuracy reaches this value.
    pub early_stop_val_acc: Option<f64>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            peak_lr: 0.01,
            warmup_epochs: 5.0,
            adam: AdamConfig::default(),
            mixup_alpha: 0.3,
            fms_alpha: 0.3,
            fms_p: 0.7,
            fms_eps: 1e-6,
            seed: 0,
            early_stop_val_acc: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            return bad(format!("warmup_epochs {} must be in [0, epochs)", self.warmup_epochs));
        }
        if !(self.peak_lr > 0.0) {
            return bad("peak_lr must be positive".into());
        }
        if !(self.mixup_alpha >= 0.0 && self.fms_alpha >= 0.0) {
            return bad("augmentation alphas must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.fms_p) {
            return bad(format!("fms_p {} not in [0, 1]", self.fms_p));
        }
        if !(self.fms_eps > 0.0) {
            return bad("fms_eps must be positive".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive".into());
        }
        if let Some(v) = self.early_stop_val_acc {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("early_stop_val_acc {v} not in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Learning rate at a (fractional) epoch: linear warmup to `peak_lr`, then
/// cosine annealing to zero at `epochs`.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.epochs as f64;
    if !(epoch >= 0.0 && epoch <= total + 1e-9) {
        return Err(Error::Invalid(format!("epoch {epoch} outside [0, {total}]")));
    }
    let w = cfg.warmup_epochs;
    if epoch < w {
        return Ok(cfg.peak_lr * epoch / w);
    }
    let progress = ((epoch - w) / (total - w)).min(1.0);
    Ok(cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adam without weight decay; moment estimates are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    /// Completed steps.
    pub t: u64,
    state: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update of every learned parameter that received a gradient.
    pub fn step<M: Module<f32> + ?Sized>(&mut self, model: &mut M, ctx: &Ctx<f32>, grads: &Gradients<f32>, lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let state = &mut self.state;
        model.visit_params_mut("", &mut |name, p| {
            if !p.is_learned() {
                return;
            }
            let Some(g) = ctx.param_grad(grads, p) else { return };
            let (m, v) = state
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                let m_new = c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi;
                let v_new = c.beta2 * *vi as f64 + (1.0 - c.beta2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + c.eps);
                *w = (*w as f64 - update) as f32;
            }
        });
    }

    fn write_into(&self, b: &mut Bundle) -> Result<()> {
        for (name, (m, v)) in &self.state {
            let s = crate::tensor::Shape::new(1, 1, 1, m.len());
            b.insert(format!("adam.m.{name}"), &Tensor::from_vec(s, m.clone())?);
            b.insert(format!("adam.v.{name}"), &Tensor::from_vec(s, v.clone())?);
        }
        Ok(())
    }

    fn read_from(b: &Bundle, cfg: AdamConfig, t: u64) -> Self {
        let mut state = BTreeMap::new();
        for name in b.names() {
            if let Some(p) = name.strip_prefix("adam.m.") {
                if let (Some(m), Some(v)) = (b.get(name), b.get(&format!("adam.v.{p}"))) {
                    state.insert(p.to_string(), (m.data().to_vec(), v.data().to_vec()));
                }
            }
        }
        Adam { cfg, t, state }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    /// Agreement of predictions with the (possibly mixed) labels' argmax.
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub steps: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,train_acc,val_loss,val_acc\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.8},{:.6},{:.6},{},{}",
                r.epoch,
                r.lr,
                r.train_loss,
                r.train_acc,
                opt(r.val_loss),
                opt(r.val_acc)
            );
        }
        out
    }

    pub fn best_val_acc(&self) -> Option<f64> {
        self.records.iter().filter_map(|r| r.val_acc).reduce(f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

/// Top-1 accuracy and mean cross-entropy in eval mode, without
/// augmentation. Shards are evaluated in parallel.
pub fn evaluate<M: Module<f32> + ?Sized>(model: &M, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let shards: Vec<(usize, f64)> = idx
        .par_chunks(batch_size.max(1))
        .map(|chunk| -> Result<(usize, f64)> {
            let b = data.batch(chunk)?;
            let mut ctx = Ctx::eval();
            let x = ctx.input(&b.inputs);
            let logits = model.forward(&mut ctx, x)?;
            let loss = ctx.tape.soft_cross_entropy(logits, &b.labels)?;
            let pred = argmax_rows(ctx.value(logits));
            let correct = pred.iter().zip(chunk).filter(|(p, &i)| **p == data.labels[i]).count();
            Ok((correct, ctx.value(loss).data()[0] as f64 * chunk.len() as f64))
        })
        .collect::<Result<_>>()?;
    let correct: usize = shards.iter().map(|s| s.0).sum();
    let loss: f64 = shards.iter().map(|s| s.1).sum::<f64>() / data.len() as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        loss,
        correct,
        total: data.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

/// Optimizer state, augmentation RNG and step counter for one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub adam: Adam,
    rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            adam: Adam::new(cfg.adam),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            cfg,
        })
    }

    /// Mixup, then Freq-MixStyle; either is skipped when its alpha is 0
    /// or the batch has a single example.
    pub fn augment(&mut self, batch: &Batch) -> Result<Batch> {
        if batch.len() < 2 {
            return Ok(batch.clone());
        }
        let mut b = if self.cfg.mixup_alpha > 0.0 {
            mixup(batch, self.cfg.mixup_alpha, &mut self.rng)?
        } else {
            batch.clone()
        };
        if self.cfg.fms_alpha > 0.0 && self.cfg.fms_p > 0.0 {
            b = freq_mixstyle(&b, self.cfg.fms_alpha, self.cfg.fms_p, self.cfg.fms_eps, &mut self.rng)?;
        }
        Ok(b)
    }

    /// Forward, backward and one Adam update on an already augmented batch.
    pub fn train_step<M: Module<f32> + ?Sized>(&mut self, model: &mut M, batch: &Batch, lr: f64) -> Result<StepStats> {
        let mut ctx = Ctx::train();
        let x = ctx.input(&batch.inputs);
        let logits = model.forward(&mut ctx, x)?;
        let loss_var = ctx.tape.soft_cross_entropy(logits, &batch.labels)?;
        let loss = ctx.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                lr,
                loss,
            });
        }
        let pred = argmax_rows(ctx.value(logits));
        let correct = pred.iter().zip(batch.hard_labels()).filter(|(p, l)| **p == *l).count();
        let grads = ctx.tape.backward(loss_var).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged {
                step: self.step,
                lr,
                loss,
            },
            other => other,
        })?;
        self.adam.step(model, &ctx, &grads, lr);
        let staged = ctx.take_staged();
        apply_staged(model, staged);
        self.step += 1;
        Ok(StepStats { loss, correct })
    }

    /// Runs the full schedule, evaluating on `val` after every epoch.
    pub fn fit<M: Module<f32> + ?Sized>(
        &mut self,
        model: &mut M,
        train: &Dataset,
        val: Option<&Dataset>,
    ) -> Result<History> {
        if train.is_empty() {
            return Err(Error::Invalid("empty training set".into()));
        }
        let bs = self.cfg.batch_size.min(train.len());
        let mut order: Vec<usize> = (0..train.len()).collect();
        // A trailing single example cannot be mixed; fold it away.
        let usable = if train.len() > 1 && train.len() % bs == 1 { train.len() - 1 } else { train.len() };
        let steps_per_epoch = usable.div_ceil(bs);
        let mut history = History::default();
        'epochs: for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut self.rng);
            let (mut loss_sum, mut correct, mut seen, mut lr) = (0.0, 0usize, 0usize, 0.0);
            for (i, chunk) in order[..usable].chunks(bs).enumerate() {
                lr = lr_at(epoch as f64 + i as f64 / steps_per_epoch as f64, &self.cfg)?;
                let batch = train.batch(chunk)?;
                let batch = self.augment(&batch)?;
                let s = self.train_step(model, &batch, lr)?;
                loss_sum += s.loss * chunk.len() as f64;
                correct += s.correct;
                seen += chunk.len();
                if self.cfg.max_steps.is_some_and(|m| self.step >= m) {
                    break;
                }
            }
            let ev = match val {
                Some(v) if !v.is_empty() => Some(evaluate(model, v, 64)?),
                _ => None,
            };
            let rec = EpochRecord {
                epoch: epoch + 1,
                lr,
                train_loss: loss_sum / seen.max(1) as f64,
                train_acc: correct as f64 / seen.max(1) as f64,
                val_loss: ev.map(|e| e.loss),
                val_acc: ev.map(|e| e.accuracy),
            };
            log::info!(
                "epoch {} lr {:.5} loss {:.4} acc {:.3} val_acc {}",
                rec.epoch,
                rec.lr,
                rec.train_loss,
                rec.train_acc,
                rec.val_acc.map_or("-".into(), |a| format!("{a:.3}"))
            );
            history.records.push(rec);
            history.steps = self.step;
            let reached = matches!((self.cfg.early_stop_val_acc, rec.val_acc), (Some(t), Some(a)) if a >= t);
            if reached || self.cfg.max_steps.is_some_and(|m| self.step >= m) {
                break 'epochs;
            }
        }
        Ok(history)
    }
}

/// Short hash of a network and training configuration.
pub fn config_fingerprint(net: &NetConfig, train: &TrainConfig) -> String {
    let text = format!(
        "{}|{}",
        serde_json::to_string(net).expect("serializable"),
        serde_json::to_string(train).expect("serializable")
    );
    Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Everything in a checkpoint besides tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub fingerprint: String,
    pub step: usize,
    pub class_names: Vec<String>,
}

/// Model weights, Adam moments and configuration in one bundle.
pub fn save_checkpoint(path: &Path, model: &TfSepNet<f32>, trainer: &Trainer, class_names: &[String]) -> Result<()> {
    let meta = CheckpointMeta {
        net: *model.config(),
        train: trainer.cfg.clone(),
        fingerprint: config_fingerprint(model.config(), &trainer.cfg),
        step: trainer.step,
        class_names: class_names.to_vec(),
    };
    let mut b = Bundle::from_module(model, json!({ "checkpoint": meta, "adam_t": trainer.adam.t }));
    trainer.adam.write_into(&mut b)?;
    b.save(path)
}

pub struct Checkpoint {
    pub model: TfSepNet<f32>,
    pub meta: CheckpointMeta,
    pub adam: Adam,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let b = Bundle::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(
        b.metadata
            .get("checkpoint")
            .cloned()
            .ok_or_else(|| Error::Bundle("no checkpoint metadata".into()))?,
    )?;
    if config_fingerprint(&meta.net, &meta.train) != meta.fingerprint {
        return Err(Error::Bundle("configuration fingerprint mismatch".into()));
    }
    let t = b.metadata.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(0);
    let mut model = TfSepNet::new(meta.net, &mut ChaCha8Rng::seed_from_u64(0))?;
    b.load_into(&mut model, "adam.")?;
    let adam = Adam::read_from(&b, meta.train.adam, t);
    Ok(Checkpoint { model, meta, adam })
}
