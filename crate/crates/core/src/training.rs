//! Losses, the Adam optimizer and the mini-batch training loop.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::layers::{Accumulation, Parameterized, Tensor};
use crate::network::{argmax, Network};
use crate::real::{Precision, Real};
use crate::rng::{self, stream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Dsvdd,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Dsvdd => "dsvdd",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "dsvdd" => Ok(LossKind::Dsvdd),
            other => Err(Error::InvalidArgument(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub precision: Precision,
    /// `Sorted` makes window accumulation independent of neighbor order.
    pub accumulation: Accumulation,
    /// Embedding noise for the Deep SVDD loss (0 disables).
    pub noise_sigma: f64,
    /// Where to write the `epoch,loss,accuracy` CSV, if anywhere.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss_kind: LossKind::CrossEntropy,
            precision: Precision::F64,
            accumulation: Accumulation::Fast,
            noise_sigma: 0.01,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `B x C` logits; gradient `(softmax - onehot) / B`.
pub fn cross_entropy_loss<T: Real>(logits: &[T], labels: &[usize], classes: usize) -> Result<(f64, Vec<T>)> {
    let b = labels.len();
    if classes == 0 || logits.len() != b * classes {
        return Err(Error::mismatch("logit count", b * classes, logits.len()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.chunks(classes).zip(labels) {
        if label >= classes {
            return Err(Error::InvalidArgument(format!("label {label} out of range for {classes} classes")));
        }
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        loss += total.ln() + max - row[label].as_f64();
        for (c, e) in exps.iter().enumerate() {
            let onehot = if c == label { 1.0 } else { 0.0 };
            grad.push(T::of((e / total - onehot) / b as f64));
        }
    }
    Ok((loss / b as f64, grad))
}

/// Mean of `|z + eps - C|^2` over the batch, `eps ~ N(0, noise_sigma^2 I)`.
pub fn dsvdd_loss<T: Real>(embeddings: &[T], center: &[f64], noise_sigma: f64, rng: &mut StreamRng) -> Result<(f64, Vec<T>)> {
    let d = center.len();
    if d == 0 || embeddings.is_empty() || embeddings.len() % d != 0 {
        return Err(Error::mismatch("embedding size", d, embeddings.len()));
    }
    let b = embeddings.len() / d;
    let noise = (noise_sigma > 0.0).then(|| Normal::new(0.0, noise_sigma).expect("valid std"));
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(embeddings.len());
    for row in embeddings.chunks(d) {
        for (z, c) in row.iter().zip(center) {
            let e = noise.as_ref().map_or(0.0, |n| n.sample(rng));
            let r = z.as_f64() + e - c;
            loss += r * r;
            grad.push(T::of(2.0 * r / b as f64));
        }
    }
    Ok((loss / b as f64, grad))
}

/// Bias-corrected Adam with f64 moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<T: Real>(params: &[&Tensor<T>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            first: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            second: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn for_model<T: Real, P: Parameterized<T>>(model: &P, config: &TrainConfig) -> Self {
        Self::new(&model.params(), config.lr, config.beta1, config.beta2, config.adam_eps)
    }
}

/// One Adam update. Gradients are checked for finiteness before any
/// parameter changes.
pub fn adam_step<T: Real>(state: &mut AdamState, mut params: Vec<&mut Tensor<T>>, grads: &[Vec<T>]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::mismatch("parameter tensor count", state.first.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::mismatch("gradient size", p.len(), g.len()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.first.iter_mut().zip(state.second.iter_mut())) {
        for e in 0..g.len() {
            let gv = g[e].as_f64();
            m[e] = state.beta1 * m[e] + (1.0 - state.beta1) * gv;
            v[e] = state.beta2 * v[e] + (1.0 - state.beta2) * gv * gv;
            let mhat = m[e] / c1;
            let vhat = v[e] / c2;
            let updated = p.data[e].as_f64() - state.lr * mhat / (vhat.sqrt() + state.eps);
            p.data[e] = T::of(updated);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Training accuracy (classification only).
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,accuracy\n");
        for e in &self.epochs {
            let acc = e.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{:.9},{}\n", e.epoch, e.loss, acc));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Result of [`train`]: the epoch log and, for Deep SVDD, the fixed center.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: TrainLog,
    pub center: Option<Vec<f64>>,
}

/// Split `n` shuffled indices into batches, folding a trailing single item
/// into the previous batch (batch norm needs two rows in the final stage).
fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Deep SVDD center: mean embedding of the untrained network over `clouds`
/// (training-mode statistics, running averages untouched), with coordinates
/// closer than 0.1 to zero pushed to +-0.1.
pub fn dsvdd_center<T: Real>(net: &Network<T>, clouds: &[PointCloud], batch_size: usize, seed: u64) -> Result<Vec<f64>> {
    if clouds.is_empty() {
        return Err(Error::InvalidArgument("cannot compute a center from an empty training set".into()));
    }
    let d = net.out_dim();
    let mut sum = vec![0.0; d];
    let order: Vec<usize> = (0..clouds.len()).collect();
    for (k, batch) in batches(&order, batch_size.max(2)).iter().enumerate() {
        let items: Vec<PointCloud> = batch.iter().map(|&i| clouds[i].clone()).collect();
        let (out, _) = net.forward_train(&items, rng::derive_seed(seed, "center", k as u64))?;
        for row in out.chunks(d) {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v.as_f64();
            }
        }
    }
    Ok(sum
        .into_iter()
        .map(|s| {
            let c = s / clouds.len() as f64;
            if c.abs() < 0.1 {
                if c < 0.0 {
                    -0.1
                } else {
                    0.1
                }
            } else {
                c
            }
        })
        .collect())
}

/// Replace the batch-norm running statistics with the average batch
/// statistics of the current weights over one shuffled pass of `clouds`.
pub fn refresh_bn_statistics<T: Real>(net: &mut Network<T>, clouds: &[&PointCloud], batch_size: usize, seed: u64) -> Result<()> {
    let mut order: Vec<usize> = (0..clouds.len()).collect();
    order.shuffle(&mut rng::substream(seed, "bn_refresh"));
    for (k, batch) in batches(&order, batch_size.max(2)).iter().enumerate() {
        if batch.len() < 2 {
            continue;
        }
        let items: Vec<PointCloud> = batch.iter().map(|&i| clouds[i].clone()).collect();
        let (_, tape) = net.forward_train(&items, rng::derive_seed(seed, "bn_refresh", k as u64))?;
        net.blend_running_stats(&tape, 1.0 / (k + 1) as f64);
    }
    Ok(())
}

/// Train in place. Epoch `e` shuffles with the `shuffle` substream indexed
/// by `e`; each batch draws its own sampling seed. After the last epoch the
/// batch-norm running statistics are recomputed for the final weights.
pub fn train<T: Real>(net: &mut Network<T>, dataset: &LabeledDataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    net.set_accumulation(config.accumulation);
    let labels = dataset.labels();
    if config.loss_kind == LossKind::CrossEntropy {
        if let Some(&bad) = labels.iter().find(|&&l| l >= net.out_dim()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} does not fit a network with {} outputs",
                net.out_dim()
            )));
        }
    }
    let clouds = dataset.clouds();
    let center = match config.loss_kind {
        LossKind::Dsvdd if config.epochs > 0 => {
            let owned: Vec<PointCloud> = clouds.iter().map(|&c| c.clone()).collect();
            Some(dsvdd_center(net, &owned, config.batch_size, config.seed)?)
        }
        _ => None,
    };
    let mut adam = AdamState::for_model(net, config);
    let mut noise_rng = rng::substream(config.seed, stream::NOISE);
    let mut log = TrainLog::default();
    let classes = net.out_dim();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng::substream_indexed(config.seed, stream::SHUFFLE, epoch as u64));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (k, batch) in batches(&order, config.batch_size).iter().enumerate() {
            let items: Vec<PointCloud> = batch.iter().map(|&i| clouds[i].clone()).collect();
            let seed = rng::derive_seed(config.seed, stream::SAMPLING, ((epoch as u64) << 32) | k as u64);
            let (out, tape) = net.forward_train(&items, seed)?;
            let (loss, grad) = match config.loss_kind {
                LossKind::CrossEntropy => {
                    let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                    correct += out.chunks(classes).zip(&y).filter(|(row, &l)| argmax(row) == l).count();
                    cross_entropy_loss(&out, &y, classes)?
                }
                LossKind::Dsvdd => dsvdd_loss(&out, center.as_ref().expect("center"), config.noise_sigma, &mut noise_rng)?,
            };
            if !loss.is_finite() {
                return Err(Error::Diverged("loss".into()));
            }
            let grads = net.backward(&tape, &grad)?;
            adam_step(&mut adam, net.params_mut(), &grads)?;
            net.commit_running_stats(&tape);
            loss_sum += loss * batch.len() as f64;
        }
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / dataset.len() as f64,
            accuracy: (config.loss_kind == LossKind::CrossEntropy).then(|| correct as f64 / dataset.len() as f64),
        });
    }
    if config.epochs > 0 {
        refresh_bn_statistics(net, &clouds, config.batch_size, config.seed)?;
    }
    if let Some(path) = &config.log_path {
        log.write_csv(path)?;
    }
    Ok(TrainReport { log, center })
}

/// Class predictions with evaluation-mode inference.
pub fn predict<T: Real>(net: &Network<T>, clouds: &[&PointCloud], seed: u64) -> Result<Vec<usize>> {
    clouds
        .iter()
        .map(|&c| Ok(argmax(&net.forward_eval(std::slice::from_ref(c), seed)?)))
        .collect()
}
