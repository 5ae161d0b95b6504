use rayon::prelude::*;

use super::scalar::Scalar;
use super::transformer::{Example, Seq2SeqModel};
use crate::error::{Error, Result};
use crate::seed;

/// Adam with linear warmup and global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    /// Clip the global gradient norm to this value; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 100,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Adam {
            config,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [T], grads: &[T]) {
        self.t += 1;
        let c = &self.config;
        let norm = grads
            .iter()
            .map(|g| {
                let g = g.to_f64_lossy();
                g * g
            })
            .sum::<f64>()
            .sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let warm = if c.warmup_steps == 0 {
            1.0
        } else {
            (self.t as f64 / c.warmup_steps as f64).min(1.0)
        };
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = T::from_f64_lossy(c.lr * warm * bc2.sqrt() / bc1);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let eps = T::from_f64_lossy(c.eps * bc2.sqrt());
        let clip = T::from_f64_lossy(clip);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = g * clip;
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

/// Single-writer training loop state.
pub struct Trainer<T: Scalar> {
    pub model: Seq2SeqModel<T>,
    pub optimizer: Adam<T>,
    /// Examples per independently computed gradient shard. Fixed, so the
    /// reduction order (and thus the result) does not depend on threads.
    pub shard: usize,
    pub seed: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Seq2SeqModel<T>, config: AdamConfig, seed: u64) -> Self {
        let n = model.num_params();
        Trainer {
            model,
            optimizer: Adam::new(config, n),
            shard: 8,
            seed,
        }
    }

    /// One optimizer step on `batch`; returns the mean token cross-entropy
    /// before the update.
    pub fn train_step(&mut self, batch: &[Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Validation("empty training batch".into()));
        }
        let step = self.model.step();
        let model = &self.model;
        let seed = self.seed;
        let dropout = model.config().dropout > 0.0;
        let parts: Vec<Result<(f64, usize, Vec<T>)>> = batch
            .par_chunks(self.shard.max(1))
            .enumerate()
            .map(|(i, chunk)| {
                let s = dropout.then(|| seed::derive(seed, &[step, i as u64]));
                model.loss_and_grad(chunk, s)
            })
            .collect();
        let mut loss = 0.0;
        let mut count = 0;
        let mut grads: Option<Vec<T>> = None;
        for part in parts {
            let (l, c, g) = part?;
            loss += l;
            count += c;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            }
        }
        let mut grads = grads.expect("non-empty batch");
        let mean = loss / count as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step} is {mean}")));
        }
        let inv = T::from_f64_lossy(1.0 / count as f64);
        grads.iter_mut().for_each(|g| *g *= inv);
        self.optimizer.update(self.model.params_mut(), &grads);
        self.model.set_step(step + 1);
        debug_assert!(self.model.all_finite(), "non-finite parameter after step {step}");
        Ok(mean)
    }
}
