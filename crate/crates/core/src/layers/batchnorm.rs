use super::{Parameterized, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Batch normalization over feature channels of an `R x C` row block.
///
/// In training mode every row of the block (all output points of all batch
/// items) contributes to the per-channel statistics. Running averages follow
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// Saved state of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var_unbiased: Vec<T>,
}

impl<T: Real> BatchNormLayer<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self::with_config(channels, Self::DEFAULT_MOMENTUM, Self::DEFAULT_EPS)
    }

    pub fn with_config(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Tensor::filled("gamma", &[channels], T::one()),
            beta: Tensor::zeros("beta", &[channels]),
            running_mean: Tensor::zeros("running_mean", &[channels]),
            running_var: Tensor::filled("running_var", &[channels], T::one()),
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &[T]) -> Result<usize> {
        let c = self.channels();
        if c == 0 || x.len() % c != 0 || x.is_empty() {
            return Err(Error::mismatch("batch-norm channel count", c, x.len()));
        }
        Ok(x.len() / c)
    }

    /// Normalize with batch statistics.
    pub fn forward_train(&self, x: &[T]) -> Result<(Vec<T>, BatchNormCache<T>)> {
        let rows = self.check(x)?;
        let c = self.channels();
        let inv_rows = T::one() / T::of(rows as f64);
        let mut mean = vec![T::zero(); c];
        for row in x.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_rows);
        let mut var = vec![T::zero(); c];
        for row in x.chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let unbiased: Vec<T> = if rows > 1 {
            let f = T::one() / T::of((rows - 1) as f64);
            var.iter().map(|&s| s * f).collect()
        } else {
            var.clone()
        };
        var.iter_mut().for_each(|s| *s *= inv_rows);
        let eps = T::of(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut normalized = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(c) {
            for ch in 0..c {
                let n = (row[ch] - mean[ch]) * inv_std[ch];
                normalized.push(n);
                out.push(self.gamma.data[ch] * n + self.beta.data[ch]);
            }
        }
        Ok((
            out,
            BatchNormCache {
                normalized,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: unbiased,
            },
        ))
    }

    /// Normalize with running statistics.
    pub fn forward_eval(&self, x: &[T]) -> Result<Vec<T>> {
        self.check(x)?;
        let c = self.channels();
        let eps = T::of(self.eps);
        let scale: Vec<T> = (0..c)
            .map(|ch| self.gamma.data[ch] / (self.running_var.data[ch] + eps).sqrt())
            .collect();
        Ok(x
            .chunks(c)
            .flat_map(|row| {
                (0..c).map(|ch| (row[ch] - self.running_mean.data[ch]) * scale[ch] + self.beta.data[ch])
                    .collect::<Vec<_>>()
            })
            .collect())
    }

    pub fn update_running(&mut self, cache: &BatchNormCache<T>) {
        self.blend_running(cache, 1.0 - self.momentum);
    }

    /// `running = (1 - w) * running + w * batch`.
    pub fn blend_running(&mut self, cache: &BatchNormCache<T>, w: f64) {
        let keep = T::of(1.0 - w);
        let w = T::of(w);
        for ch in 0..self.channels() {
            self.running_mean.data[ch] = keep * self.running_mean.data[ch] + w * cache.batch_mean[ch];
            self.running_var.data[ch] = keep * self.running_var.data[ch] + w * cache.batch_var_unbiased[ch];
        }
    }

    /// Returns `([d gamma, d beta], d x)` for a training-mode forward.
    pub fn backward(&self, cache: &BatchNormCache<T>, upstream: &[T]) -> Result<(Vec<Vec<T>>, Vec<T>)> {
        let c = self.channels();
        if upstream.len() != cache.normalized.len() {
            return Err(Error::mismatch("batch-norm upstream size", cache.normalized.len(), upstream.len()));
        }
        let rows = upstream.len() / c;
        let mut g_gamma = vec![T::zero(); c];
        let mut g_beta = vec![T::zero(); c];
        for (g, n) in upstream.chunks(c).zip(cache.normalized.chunks(c)) {
            for ch in 0..c {
                g_beta[ch] += g[ch];
                g_gamma[ch] += g[ch] * n[ch];
            }
        }
        // dx = gamma * inv_std / R * (R g - sum g - xhat * sum(g xhat))
        let inv_rows = T::one() / T::of(rows as f64);
        let mut gx = Vec::with_capacity(upstream.len());
        for (g, n) in upstream.chunks(c).zip(cache.normalized.chunks(c)) {
            for ch in 0..c {
                let k = self.gamma.data[ch] * cache.inv_std[ch];
                gx.push(k * (g[ch] - (g_beta[ch] + n[ch] * g_gamma[ch]) * inv_rows));
            }
        }
        Ok((vec![g_gamma, g_beta], gx))
    }

    /// Running statistics (not learnable, but serialized with checkpoints).
    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        vec![&self.running_mean, &self.running_var]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

impl<T: Real> Parameterized<T> for BatchNormLayer<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
