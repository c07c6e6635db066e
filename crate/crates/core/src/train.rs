//! ADAM with step learning-rate decay, seeded minibatching and
//! validation-based model selection.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, SampleWindow, WindowSet};
use crate::error::{Error, Result};
use crate::graph::HopNeighborhoods;
use crate::model::{Batch, SstGnn};
use crate::numcore::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_rate: f64,
    pub decay_every: usize,
    pub epochs: usize,
    /// Windows per minibatch; 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Keep the lowest-validation-MSE weights instead of the last ones.
    pub select_best: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            decay_rate: 0.5,
            decay_every: 7,
            epochs: 500,
            batch_size: 32,
            seed: 0,
            shuffle: true,
            select_best: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("train.lr0 must be > 0, got {}", self.lr0)));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("train.decay_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("ADAM betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// `lr0 · decay_rate^⌊epoch / decay_every⌋`
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let exponent = (epoch / self.decay_every) as i32;
        self.lr0 * self.decay_rate.powi(exponent)
    }
}

/// Bias-corrected ADAM moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |_| store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    pub fn for_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.beta1, cfg.beta2, cfg.eps)
    }

    /// Applies one update in store order, then zeroes every gradient.
    ///
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "ADAM state tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in parameter {}",
                p.name()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
}

impl LossHistory {
    /// `epoch,train_mse,val_mse,lr`; an empty validation cell means no validation split.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse,lr\n");
        for r in &self.records {
            let val = r.val_mse.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_mse, val, r.lr);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Everything a training run reads besides the model.
pub struct TrainData<'a> {
    pub hops: &'a HopNeighborhoods,
    pub normalizer: &'a Normalizer,
    pub train: &'a WindowSet,
    pub val: Option<&'a WindowSet>,
}

/// Weights retained by model selection.
#[derive(Clone, Debug)]
pub struct Selected {
    pub epoch: Option<usize>,
    pub score: f64,
    pub params: ParamStore,
}

/// Resumable optimizer state: the model, its ADAM moments, and the selection so far.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: SstGnn,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Next epoch to run.
    pub epoch: usize,
    pub best: Option<Selected>,
    pub history: LossHistory,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights picked by validation (or the last ones when selection is off).
    pub selected: ParamStore,
    pub history: LossHistory,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

fn seed_for_epoch(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mean MSE over all windows, evaluated in chunks of `chunk` windows.
pub fn evaluate_mse(
    model: &SstGnn,
    windows: &WindowSet,
    hops: &HopNeighborhoods,
    norm: &Normalizer,
    chunk: usize,
) -> Result<f64> {
    let chunk = chunk.max(1);
    let mut sum = 0.0;
    let mut count = 0usize;
    let idx: Vec<usize> = (0..windows.len()).collect();
    for part in idx.chunks(chunk) {
        let ws: Vec<SampleWindow> = part.iter().map(|&i| windows.get(i)).collect();
        let batch = Batch::from_windows(&ws, norm)?;
        let n = batch.target.len();
        sum += model.loss(&batch, hops)? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Contract("evaluate_mse on an empty window set".into()));
    }
    Ok(sum / count as f64)
}

impl Trainer {
    pub fn new(model: SstGnn, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::for_config(model.params(), &config);
        Ok(Self {
            model,
            adam,
            config,
            epoch: 0,
            best: None,
            history: LossHistory::default(),
        })
    }

    /// Runs one epoch and records it; returns the record.
    pub fn run_epoch(&mut self, data: &TrainData<'_>) -> Result<EpochRecord> {
        if data.train.is_empty() {
            return Err(Error::Config("training split has no windows".into()));
        }
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        if self.config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_for_epoch(self.config.seed, epoch));
            order.shuffle(&mut rng);
        }
        let bs = if self.config.batch_size == 0 {
            order.len()
        } else {
            self.config.batch_size
        };
        let mut sum = 0.0;
        let mut count = 0usize;
        for part in order.chunks(bs) {
            let ws: Vec<SampleWindow> = part.iter().map(|&i| data.train.get(i)).collect();
            let batch = Batch::from_windows(&ws, data.normalizer)?;
            let loss = self.model.loss_and_grad(&batch, data.hops)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training loss became {loss} in epoch {epoch}"
                )));
            }
            self.adam.step(self.model.params_mut(), lr)?;
            sum += loss * batch.target.len() as f64;
            count += batch.target.len();
        }
        let train_mse = sum / count as f64;
        let val_mse = match data.val {
            Some(v) if !v.is_empty() => Some(evaluate_mse(
                &self.model,
                v,
                data.hops,
                data.normalizer,
                bs.max(64),
            )?),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            train_mse,
            val_mse,
            lr,
        };
        let score = val_mse.unwrap_or(train_mse);
        let better = self.best.as_ref().is_none_or(|b| score < b.score);
        if !self.config.select_best || better {
            self.best = Some(Selected {
                epoch: Some(epoch),
                score,
                params: self.model.params().clone(),
            });
        }
        self.history.records.push(record);
        self.epoch += 1;
        Ok(record)
    }

    /// Runs the remaining epochs up to `config.epochs`.
    ///
    /// Divergence stops the loop but keeps the last good selection.
    pub fn run(&mut self, data: &TrainData<'_>) -> Result<TrainOutcome> {
        self.run_with(data, |_| Ok(()))
    }

    /// Like [`Trainer::run`], calling `after_epoch` once each epoch completes.
    pub fn run_with<F>(&mut self, data: &TrainData<'_>, mut after_epoch: F) -> Result<TrainOutcome>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        let mut diverged = None;
        while self.epoch < self.config.epochs {
            let snapshot = (self.model.clone(), self.adam.clone());
            match self.run_epoch(data) {
                Ok(r) => {
                    log::info!(
                        "epoch {} train_mse {:.6} val_mse {} lr {}",
                        r.epoch,
                        r.train_mse,
                        r.val_mse.map_or("-".to_string(), |v| format!("{v:.6}")),
                        r.lr
                    );
                    after_epoch(self)?;
                }
                Err(Error::Numerical(msg)) => {
                    log::error!("{msg}; keeping last good weights");
                    (self.model, self.adam) = snapshot;
                    diverged = Some(msg);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let selected = match &self.best {
            Some(b) => b.params.clone(),
            None => self.model.params().clone(),
        };
        Ok(TrainOutcome {
            selected,
            history: self.history.clone(),
            diverged,
        })
    }
}

/// Trains a fresh trainer for `cfg.epochs` epochs.
pub fn train_loop(model: SstGnn, data: &TrainData<'_>, cfg: TrainConfig) -> Result<(Trainer, TrainOutcome)> {
    let mut trainer = Trainer::new(model, cfg)?;
    let outcome = trainer.run(data)?;
    Ok((trainer, outcome))
}
