use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::models::ModelParams;
use crate::scalar::Real;

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. Every gradient is checked before anything is written, so
    /// a non-finite gradient leaves parameters and state untouched.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &BTreeMap<String, Vec<T>>,
        lr: f64,
    ) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no gradient for parameter '{name}'")))?;
            if g.len() != p.numel() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter '{name}'")));
            }
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (one, lr, eps) = (T::one(), T::lit(lr), T::lit(self.epsilon));
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for (((theta, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Adam<U> {
        let conv = |m: &BTreeMap<String, Vec<T>>| {
            m.iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| U::lit(x.as_f64())).collect()))
                .collect()
        };
        Adam {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            t: self.t,
            m: conv(&self.m),
            v: conv(&self.v),
        }
    }
}

/// Reduce-on-plateau: after more than `patience` consecutive epochs without
/// an improvement larger than `min_delta`, multiply the rate by `factor`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    bad: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_delta,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Feeds one validation loss; returns the rate for the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.bad = 0;
        } else {
            self.bad += 1;
            if self.bad > self.patience {
                self.lr *= self.factor;
                self.bad = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once `patience` consecutive epochs fail to beat the best loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    best_epoch: Option<usize>,
    bad: usize,
}

impl EarlyStop {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: None,
            bad: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        if self.bad >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}
