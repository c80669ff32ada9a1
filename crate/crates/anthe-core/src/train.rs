//! Training harness: bias-corrected Adam, the epoch loop with
//! patience-based early stopping on validation loss, and evaluation.
//!
//! The loop is strictly sequential and deterministic under a fixed seed:
//! one dropout stream drives every epoch, batches are visited in order, and
//! parameters update after each batch. Validation runs once per epoch; the
//! parameters that achieved the best validation loss are restored when the
//! loop stops. Any non-finite loss or gradient aborts with an error naming
//! the offending tensor, after restoring the last finished epoch's
//! parameters.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{loss, Mode, Model};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3.16e-5,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("learning rate must be finite and positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config("eps must be finite and positive"));
        }
        if self.max_epochs < 1 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        Ok(())
    }
}

/// Bias-corrected Adam over a fixed list of parameter tensors.
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array<T>>,
    v: Vec<Array<T>>,
    pub step_count: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: &TrainConfig, params: &[Array<T>]) -> Adam<T> {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            step_count: 0,
        }
    }

    /// Applies one update. `grads[i] = None` is treated as an all-zero
    /// gradient. A non-finite gradient entry aborts, naming the tensor.
    pub fn step(
        &mut self,
        params: &mut [Array<T>],
        grads: &[Option<Array<T>>],
        names: &[String],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::contract(
                "optimizer state, parameters, and gradients must align",
            ));
        }
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            if grad.shape() != params[i].shape() {
                return Err(Error::contract(format!(
                    "gradient shape mismatch for tensor {name}"
                )));
            }
            if grad.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::data(format!("non-finite gradient in tensor {name}")));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        for i in 0..params.len() {
            let g: Option<&[T]> = grads[i].as_ref().map(|a| a.data());
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.map_or_else(T::zero, |s| s[j]);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One epoch's log row.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ppl: f64,
    pub elapsed_s: f64,
}

impl EpochStats {
    /// Canonical log line: `epoch train_loss val_loss val_ppl elapsed_s`.
    pub fn log_line(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.3}",
            self.epoch, self.train_loss, self.val_loss, self.val_ppl, self.elapsed_s
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Token-weighted mean loss and perplexity over `batches`, with dropout
/// disabled.
pub fn evaluate<T: Scalar>(model: &Model<T>, batches: &[TokenBatch]) -> Result<(f64, f64)> {
    if batches.is_empty() {
        return Err(Error::data("evaluation needs at least one batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut weighted = 0.0;
    let mut tokens = 0usize;
    for batch in batches {
        let n = batch.target_tokens();
        if n == 0 {
            continue;
        }
        let mut g = Graph::new();
        let ids = model.register_frozen(&mut g);
        let (l, _) = loss(&mut g, &model.plan, &ids, batch, Mode::Eval, &mut rng)?;
        weighted += g.scalar_value(l).into_f64() * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::data("evaluation set has no unmasked tokens"));
    }
    let mean = weighted / tokens as f64;
    Ok((mean, mean.exp()))
}

/// Runs the training loop, mutating `model` in place. `on_epoch` receives
/// each epoch's stats as they finish (for logging).
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    train: &[TokenBatch],
    val: &[TokenBatch],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::data("training needs at least one batch"));
    }
    let names: Vec<String> = model.plan.tensors.iter().map(|t| t.name.clone()).collect();
    let mut adam = Adam::new(cfg, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut best_params: Vec<Array<T>> = model.params.clone();
    let mut bad_epochs = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let epoch_start_params = model.params.clone();
        let mut weighted = 0.0;
        let mut tokens = 0usize;
        for batch in train {
            let n = batch.target_tokens();
            if n == 0 {
                continue;
            }
            let mut g = Graph::new();
            let ids = model.register(&mut g);
            let (l, _) = loss(&mut g, &model.plan, &ids, batch, Mode::Train, &mut rng)?;
            let l_val = g.scalar_value(l).into_f64();
            if !l_val.is_finite() {
                model.params = epoch_start_params;
                return Err(Error::data(format!(
                    "non-finite training loss in epoch {epoch}; restored parameters from the last finished epoch"
                )));
            }
            g.backward(l)?;
            let grads: Vec<Option<Array<T>>> =
                ids.iter().map(|&id| g.grad(id).cloned()).collect();
            drop(g);
            if let Err(e) = adam.step(&mut model.params, &grads, &names) {
                model.params = epoch_start_params;
                return Err(e);
            }
            weighted += l_val * n as f64;
            tokens += n;
        }
        if tokens == 0 {
            return Err(Error::data("training set has no unmasked tokens"));
        }
        let train_loss = weighted / tokens as f64;
        let (val_loss, val_ppl) = evaluate(model, val)?;
        let stats = EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_ppl,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        report.epochs.push(stats);

        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
            best_params = model.params.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    model.params = best_params;
    Ok(report)
}
