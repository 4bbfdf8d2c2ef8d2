//! Loss, schedule, inference decoding and the optimization loop.

pub mod pit;

use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;

use mff_tensor::checkpoint::save_checkpoint;
use mff_tensor::nn::{Ctx, ParamStore};
use mff_tensor::optim::{AdamW, AdamWConfig};
use mff_tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, Profile, TrainConfig};
use crate::dataset::{Dataset, Sample};
use crate::error::{Result, SeldError};
use crate::labels::{norm, EventFrame};
use crate::metrics::{Accumulator, MetricsConfig, MetricsReport};
use crate::network::Einv2;
pub use pit::{pit_loss, LossWeights, PitOutput, Targets};

/// Step schedule: the initial rate until the drop epoch (0-based), then the
/// reduced rate.
pub fn lr_at(epoch: usize, t: &TrainConfig) -> f64 {
    let drop = if t.lr_drop_epoch > 0 {
        t.lr_drop_epoch
    } else {
        match t.profile {
            Profile::Starss22 => 80,
            Profile::Starss23 => 60,
        }
    };
    if epoch >= drop {
        t.lr_drop
    } else {
        t.lr
    }
}

/// Stacks segment features into `[B, 7, T, F]`.
pub fn batch_features<T: Scalar>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let first = samples.first().ok_or_else(|| SeldError::data("empty batch"))?;
    let shape = first.features.data.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.features.data.numel());
    for s in samples {
        if s.features.data.shape() != shape.as_slice() {
            return Err(SeldError::data(format!("{}: feature shape differs within batch", s.id)));
        }
        data.extend(s.features.data.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    let mut full = vec![samples.len()];
    full.extend(&shape);
    Ok(Tensor::new(&full, data)?)
}

/// Track-wise outputs to events: a track is active when its most probable
/// slot is not the inactive one (index `classes`).
pub fn decode<T: Scalar>(sed: &Tensor<T>, doa: &Tensor<T>, classes: usize) -> Vec<Vec<EventFrame>> {
    let s = sed.shape();
    let (b, l, n, k) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![Vec::new(); b];
    for (bi, events) in out.iter_mut().enumerate() {
        for t in 0..l {
            for p in 0..n {
                let o = (bi * l + t) * n + p;
                let row = &sed.data()[o * k..(o + 1) * k];
                let arg = (0..k).max_by(|&x, &y| row[x].partial_cmp(&row[y]).unwrap_or(std::cmp::Ordering::Equal));
                let Some(class) = arg.filter(|&c| c < classes) else {
                    continue;
                };
                let v: [f64; 3] = std::array::from_fn(|j| Scalar::to_f64(doa.data()[o * 3 + j]));
                let n = norm(v);
                let doa = if n > 1e-12 {
                    [v[0] / n, v[1] / n, v[2] / n]
                } else {
                    [1.0, 0.0, 0.0]
                };
                events.push(EventFrame { frame: t, class, doa });
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub sed_loss: f64,
    pub doa_loss: f64,
    /// Mean global gradient norm before clipping.
    pub grad_norm: f64,
    pub val: Option<MetricsReport>,
}

impl EpochRecord {
    /// `epoch, lr, train_loss, val_ER, val_F, val_LE, val_LR, val_SELD`, tab separated.
    pub fn tsv(&self) -> String {
        let val = match &self.val {
            Some(r) => format!("{:.6}\t{:.4}\t{:.4}\t{:.4}\t{:.6}", r.er, r.f, r.le, r.lr, r.seld_score),
            None => "-\t-\t-\t-\t-".into(),
        };
        format!("{}\t{:e}\t{:.6}\t{val}", self.epoch, self.lr, self.train_loss)
    }
}

pub const LOG_HEADER: &str = "epoch\tlr\ttrain_loss\tval_ER\tval_F\tval_LE\tval_LR\tval_SELD";

pub struct Trainer<T: Scalar> {
    pub cfg: Config,
    pub net: Einv2,
    pub store: ParamStore<T>,
    opt: AdamW<T>,
    rng: ChaCha8Rng,
    steps: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &Config) -> Result<Self> {
        let (net, store) = Einv2::init::<T>(cfg, cfg.train.seed)?;
        Ok(Self::with_params(cfg, net, store))
    }

    pub fn with_params(cfg: &Config, net: Einv2, store: ParamStore<T>) -> Self {
        let opt = AdamW::new(AdamWConfig {
            weight_decay: cfg.train.weight_decay,
            ..AdamWConfig::default()
        });
        Self {
            cfg: cfg.clone(),
            net,
            store,
            opt,
            rng: ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5EED_0F_DA7A),
            steps: 0,
        }
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            sed: self.cfg.train.sed_weight,
            doa: self.cfg.train.doa_weight,
        }
    }

    fn targets(&self, batch: &[&Sample]) -> Result<Targets> {
        let labels: Vec<_> = batch.iter().map(|s| &s.labels).collect();
        Targets::from_labels(&labels, self.cfg.model.tracks, self.cfg.model.classes)
    }

    /// Mean PIT loss over a dataset in evaluation mode, without updates.
    pub fn loss(&self, data: &Dataset) -> Result<f64> {
        let mut total = 0.0;
        for chunk in data.samples.chunks(self.cfg.train.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().collect();
            let ctx = Ctx::new(&self.store, false, false, 0);
            let x = ctx.graph().input(batch_features::<T>(&batch)?);
            let out = self.net.forward(&ctx, x)?;
            let tgt = self.targets(&batch)?;
            let pit = pit_loss(
                ctx.graph(),
                out.sed_logits,
                out.doa,
                &tgt,
                self.weights(),
                self.cfg.train.pit,
            )?;
            total += Scalar::to_f64(ctx.graph().value(pit.loss).item()) * batch.len() as f64;
        }
        Ok(total / data.len().max(1) as f64)
    }

    /// One pass over shuffled training data. Returns the epoch record
    /// without validation results.
    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(SeldError::data("training set is empty"));
        }
        let lr = lr_at(epoch, &self.cfg.train);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss, mut sed, mut doa, mut gn) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.train.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let seed = self
                .cfg
                .train
                .seed
                .wrapping_add(self.steps)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let ctx = Ctx::new(&self.store, true, true, seed);
            let x = ctx.graph().input(batch_features::<T>(&batch)?);
            let out = self.net.forward(&ctx, x)?;
            let tgt = self.targets(&batch)?;
            let pit = pit_loss(
                ctx.graph(),
                out.sed_logits,
                out.doa,
                &tgt,
                self.weights(),
                self.cfg.train.pit,
            )
            .map_err(|e| match e {
                SeldError::NonFinite(m) => SeldError::NonFinite(format!("epoch {epoch}, step {}: {m}", self.steps)),
                other => other,
            })?;
            let value = Scalar::to_f64(ctx.graph().value(pit.loss).item());
            let (mut grads, _, stats) = ctx.backward(pit.loss)?;
            let norm = if self.cfg.train.grad_clip > 0.0 {
                grads.clip_global_norm(self.cfg.train.grad_clip)
            } else {
                grads.global_norm()
            };
            if !norm.is_finite() {
                return Err(SeldError::NonFinite(format!(
                    "epoch {epoch}, step {}: gradient norm is {norm}",
                    self.steps
                )));
            }
            self.opt.step(&mut self.store, &grads, lr)?;
            self.store.apply_stat_updates(&stats, self.cfg.model.bn_momentum)?;
            if let Some((_, name, _, _)) = self.store.iter().find(|e| !e.2.is_finite()) {
                return Err(SeldError::NonFinite(format!(
                    "epoch {epoch}, step {}: parameter {name} became non-finite",
                    self.steps
                )));
            }
            self.steps += 1;
            let w = batch.len() as f64;
            loss += value * w;
            sed += pit.sed_loss * w;
            doa += pit.doa_loss * w;
            gn += norm;
            batches += 1;
        }
        let n = data.len() as f64;
        Ok(EpochRecord {
            epoch,
            lr,
            train_loss: loss / n,
            sed_loss: sed / n,
            doa_loss: doa / n,
            grad_norm: gn / batches as f64,
            val: None,
        })
    }

    /// Predicted events per sample, evaluation mode.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<Vec<EventFrame>>> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.samples.chunks(self.cfg.train.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().collect();
            let ctx = Ctx::new(&self.store, false, false, 0);
            let x = ctx.graph().input(batch_features::<T>(&batch)?);
            let o = self.net.forward(&ctx, x)?;
            let g = ctx.graph();
            out.extend(decode(&g.value(o.sed), &g.value(o.doa), self.cfg.model.classes));
        }
        Ok(out)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<MetricsReport> {
        let preds = self.predict(data)?;
        let mut acc = Accumulator::new(metrics_config(&self.cfg));
        for (s, p) in data.samples.iter().zip(&preds) {
            acc.add_clip(&s.events, p)?;
        }
        Ok(acc.report())
    }

    /// Trains for `train.epochs` epochs, validating every `train.eval_every`
    /// epochs on `val` (or on the training set when absent). Writes one log
    /// line per epoch and saves the best checkpoint by validation SELD score.
    /// `on_epoch` may stop training early.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        log: &mut dyn Write,
        best_checkpoint: Option<&Path>,
        on_epoch: &mut dyn FnMut(&EpochRecord) -> ControlFlow<()>,
    ) -> Result<Vec<EpochRecord>> {
        let io = |e| SeldError::io("<training log>", e);
        writeln!(log, "{LOG_HEADER}").map_err(io)?;
        let mut best = f64::INFINITY;
        let mut history = Vec::new();
        for epoch in 0..self.cfg.train.epochs {
            let mut rec = self.train_epoch(train, epoch)?;
            let last = epoch + 1 == self.cfg.train.epochs;
            if (epoch + 1) % self.cfg.train.eval_every == 0 || last {
                let report = self.evaluate(val.unwrap_or(train))?;
                if report.seld_score < best {
                    best = report.seld_score;
                    if let Some(p) = best_checkpoint {
                        save_checkpoint(&self.store, p)?;
                    }
                }
                rec.val = Some(report);
            }
            writeln!(log, "{}", rec.tsv()).map_err(io)?;
            log.flush().map_err(io)?;
            let flow = on_epoch(&rec);
            history.push(rec);
            if flow.is_break() {
                break;
            }
        }
        Ok(history)
    }
}

pub fn metrics_config(cfg: &Config) -> MetricsConfig {
    MetricsConfig {
        classes: cfg.model.classes,
        segment_frames: cfg.eval.segment_frames,
        threshold_deg: cfg.eval.threshold_deg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_profiles() {
        let mut t = Config::default().train;
        assert_eq!(lr_at(0, &t), 3e-4);
        assert_eq!(lr_at(79, &t), 3e-4);
        assert_eq!(lr_at(81, &t), 3e-5);
        t.profile = Profile::Starss23;
        assert_eq!(lr_at(59, &t), 3e-4);
        assert_eq!(lr_at(61, &t), 3e-5);
        t.lr_drop_epoch = 5;
        assert_eq!(lr_at(5, &t), 3e-5);
    }

    #[test]
    fn decode_skips_inactive_slot() {
        let mut sed = vec![0.0f64; 3 * 14];
        sed[13] = 1.0;
        sed[14 + 4] = 0.9;
        sed[28 + 13] = 0.6;
        let sed = Tensor::new(&[1, 1, 3, 14], sed).unwrap();
        let doa = Tensor::new(&[1, 1, 3, 3], vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let ev = decode(&sed, &doa, 13);
        assert_eq!(
            ev[0],
            [EventFrame {
                frame: 0,
                class: 4,
                doa: [0.0, 1.0, 0.0]
            }]
        );
    }
}
