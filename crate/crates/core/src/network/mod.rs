//! CompositeNet architectures assembled from point layers.
//!
//! A network is a stack of point-layer stages, each followed by batch norm
//! and ReLU applied to the features only, and a final dense layer fed with
//! the feature vector of the single point left by the last stage. The
//! network emits raw logits (or embeddings); softmax lives in the loss and
//! scoring code.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{self, knn_rows, neighbors_from_graph, Point, PointCloud, WindowOptions, WindowSet};
use crate::layers::{
    relu_backward, relu_forward, Accumulation, AggrCache, AggrCompositeLayer, BaselineCache,
    BaselinePointConvLayer, BatchNormCache, BatchNormLayer, ConvCache, ConvCompositeLayer, DenseLayer,
    LayerGrads, Parameterized, PointLayer, Tensor,
};
use crate::real::Real;
use crate::rng::{self, stream};

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Which point layer every stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    ConvComposite,
    AggrComposite,
    Baseline,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::ConvComposite => "conv_composite",
            LayerKind::AggrComposite => "aggr_composite",
            LayerKind::Baseline => "baseline",
        }
    }

    pub(crate) fn code(&self) -> u8 {
        match self {
            LayerKind::ConvComposite => 0,
            LayerKind::AggrComposite => 1,
            LayerKind::Baseline => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LayerKind::ConvComposite),
            1 => Some(LayerKind::AggrComposite),
            2 => Some(LayerKind::Baseline),
            _ => None,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" | "conv_composite" => Ok(LayerKind::ConvComposite),
            "aggr" | "aggr_composite" | "aggregate" => Ok(LayerKind::AggrComposite),
            "baseline" | "pointconv" => Ok(LayerKind::Baseline),
            other => Err(Error::InvalidArgument(format!(
                "unknown layer kind `{other}` (expected conv_composite, aggr_composite or baseline)"
            ))),
        }
    }
}

/// One stage: output feature count `J`, window size `|X_y|`, output points `|Q|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub out_features: usize,
    pub window_size: usize,
    pub output_count: usize,
}

impl StageSpec {
    pub const fn new(out_features: usize, window_size: usize, output_count: usize) -> Self {
        Self {
            out_features,
            window_size,
            output_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layer_kind: LayerKind,
    pub stages: Vec<StageSpec>,
    pub j0: usize,
    /// RBF centers per spatial function (or correlation centers for the baseline).
    pub m: usize,
    /// Spatial function output size (unused by the baseline kind).
    pub k: usize,
    /// Width of the dense output: class count or latent dimension.
    pub out_dim: usize,
    pub input_features: usize,
    pub sigma: f64,
    pub dense_bias: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Output-point sampler attenuation factor.
    pub attenuation: f64,
    pub exclude_center: bool,
}

impl NetworkSpec {
    pub const DEFAULT_SIGMA: f64 = 0.3;

    fn base(kind: LayerKind, stages: Vec<StageSpec>, j0: usize, m: usize, k: usize, out_dim: usize) -> Self {
        Self {
            layer_kind: kind,
            stages,
            j0,
            m,
            k,
            out_dim,
            input_features: 1,
            sigma: Self::DEFAULT_SIGMA,
            dense_bias: true,
            bn_momentum: BatchNormLayer::<f64>::DEFAULT_MOMENTUM,
            bn_eps: BatchNormLayer::<f64>::DEFAULT_EPS,
            attenuation: geometry::SamplerConfig::default().attenuation,
            exclude_center: false,
        }
    }

    /// Five-stage classification CompositeNet:
    /// `(J0,32,1024) (2J0,32,256) (4J0,16,64) (4J0,16,16) (8J0,16,1)` + dense.
    pub fn classification(kind: LayerKind, j0: usize, m: usize, k: usize, num_classes: usize) -> Self {
        let stages = vec![
            StageSpec::new(j0, 32, 1024),
            StageSpec::new(2 * j0, 32, 256),
            StageSpec::new(4 * j0, 16, 64),
            StageSpec::new(4 * j0, 16, 16),
            StageSpec::new(8 * j0, 16, 1),
        ];
        Self::base(kind, stages, j0, m, k, num_classes)
    }

    /// Three-stage Deep SVDD CompositeNet:
    /// `(J0,32,128) (3J0,32,32) (6J0,32,1)` + bias-free dense to the latent space.
    pub fn dsvdd(kind: LayerKind, j0: usize, m: usize, k: usize, latent_dim: usize) -> Self {
        let stages = vec![
            StageSpec::new(j0, 32, 128),
            StageSpec::new(3 * j0, 32, 32),
            StageSpec::new(6 * j0, 32, 1),
        ];
        let mut spec = Self::base(kind, stages, j0, m, k, latent_dim);
        spec.dense_bias = false;
        spec
    }

    /// Arbitrary stage list (miniature networks, experiments).
    pub fn custom(kind: LayerKind, stages: Vec<StageSpec>, m: usize, k: usize, out_dim: usize) -> Self {
        let j0 = stages.first().map(|s| s.out_features).unwrap_or(0);
        Self::base(kind, stages, j0, m, k, out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.stages.is_empty() {
            return bad("network needs at least one stage".into());
        }
        if self.stages.last().map(|s| s.output_count) != Some(1) {
            return bad("final stage must produce exactly one output point".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_features == 0 || s.window_size == 0 || s.output_count == 0 {
                return bad(format!("stage {i}: J, window size and output count must be positive"));
            }
            if self.layer_kind == LayerKind::AggrComposite && s.window_size < 2 {
                return bad(format!("stage {i}: aggregate layers need window size >= 2"));
            }
        }
        if self.m == 0 || self.out_dim == 0 || self.input_features == 0 {
            return bad("M, output width and input feature width must be positive".into());
        }
        if self.layer_kind != LayerKind::Baseline && self.k == 0 {
            return bad("K must be positive".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.attenuation) {
            return bad(format!("attenuation must lie in [0, 1], got {}", self.attenuation));
        }
        Ok(())
    }

    /// Stage output widths `J`.
    pub fn widths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.out_features).collect()
    }

    /// Learnable parameter count from the closed-form layer formulas.
    pub fn parameter_count(&self) -> usize {
        let (m, k) = (self.m, self.k);
        let mut total = 0;
        let mut i = self.input_features;
        for s in &self.stages {
            let j = s.out_features;
            total += match self.layer_kind {
                LayerKind::ConvComposite => j * i * k + k * m + 3 * m,
                LayerKind::AggrComposite => j * (2 * i) * (2 * k) + k * m + 3 * m,
                LayerKind::Baseline => j * i * m + 3 * m,
            };
            total += 2 * j;
            i = j;
        }
        total + i * self.out_dim + if self.dense_bias { self.out_dim } else { 0 }
    }
}

/// One point layer of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum PointConv<T> {
    Conv(ConvCompositeLayer<T>),
    Aggr(AggrCompositeLayer<T>),
    Baseline(BaselinePointConvLayer<T>),
}

enum PointCache<T> {
    Conv(ConvCache<T>),
    Aggr(AggrCache<T>),
    Baseline(BaselineCache<T>),
}

impl<T: Real> PointConv<T> {
    fn build<R: rand::Rng + ?Sized>(spec: &NetworkSpec, i: usize, j: usize, rng: &mut R) -> Result<Self> {
        Ok(match spec.layer_kind {
            LayerKind::ConvComposite => PointConv::Conv(ConvCompositeLayer::new(i, j, spec.m, spec.k, spec.sigma, rng)?),
            LayerKind::AggrComposite => PointConv::Aggr(AggrCompositeLayer::new(i, j, spec.m, spec.k, spec.sigma, rng)?),
            LayerKind::Baseline => PointConv::Baseline(BaselinePointConvLayer::new(i, j, spec.m, spec.sigma, rng)?),
        })
    }

    fn forward(&self, cloud: &PointCloud<T>, windows: &WindowSet) -> Result<(Vec<T>, PointCache<T>)> {
        Ok(match self {
            PointConv::Conv(l) => {
                let (o, c) = l.forward(cloud, windows)?;
                (o, PointCache::Conv(c))
            }
            PointConv::Aggr(l) => {
                let (o, c) = l.forward(cloud, windows)?;
                (o, PointCache::Aggr(c))
            }
            PointConv::Baseline(l) => {
                let (o, c) = l.forward(cloud, windows)?;
                (o, PointCache::Baseline(c))
            }
        })
    }

    fn backward(&self, cloud: &PointCloud<T>, windows: &WindowSet, cache: &PointCache<T>, up: &[T]) -> Result<LayerGrads<T>> {
        match (self, cache) {
            (PointConv::Conv(l), PointCache::Conv(c)) => l.backward(cloud, windows, c, up),
            (PointConv::Aggr(l), PointCache::Aggr(c)) => l.backward(cloud, windows, c, up),
            (PointConv::Baseline(l), PointCache::Baseline(c)) => l.backward(cloud, windows, c, up),
            _ => Err(Error::InvalidArgument("cache does not belong to this layer".into())),
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            PointConv::Conv(l) => l.out_features(),
            PointConv::Aggr(l) => l.out_features(),
            PointConv::Baseline(l) => l.out_features(),
        }
    }
}

impl<T: Real> Parameterized<T> for PointConv<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            PointConv::Conv(l) => l.params(),
            PointConv::Aggr(l) => l.params(),
            PointConv::Baseline(l) => l.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            PointConv::Conv(l) => l.params_mut(),
            PointConv::Aggr(l) => l.params_mut(),
            PointConv::Baseline(l) => l.params_mut(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T> {
    pub conv: PointConv<T>,
    pub bn: BatchNormLayer<T>,
}

/// How a forward pass samples output points and normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; per-item, per-stage sampling seeds derived from `seed`.
    Train { seed: u64 },
    /// Running statistics; every instance uses the same sampling seed.
    Eval { seed: u64 },
}

struct StageTape<T> {
    inputs: Vec<PointCloud<T>>,
    windows: Vec<WindowSet>,
    caches: Vec<PointCache<T>>,
    bn: Option<BatchNormCache<T>>,
    /// Post-ReLU rows of all items, concatenated.
    activated: Vec<T>,
}

/// Everything a backward pass needs from a training-mode forward.
pub struct Tape<T> {
    stages: Vec<StageTape<T>>,
    dense_input: Vec<T>,
    batch: usize,
}

impl<T: Real> Tape<T> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Output points chosen at each stage for each batch item.
    pub fn stage_outputs(&self, stage: usize) -> Vec<&[Point]> {
        self.stages[stage].windows.iter().map(|w| w.outputs()).collect()
    }
}

pub struct Network<T> {
    spec: NetworkSpec,
    stages: Vec<Stage<T>>,
    dense: DenseLayer<T>,
    seed: u64,
    accumulation: Accumulation,
}

impl<T: Real> Clone for Network<T> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            stages: self.stages.clone(),
            dense: self.dense.clone(),
            seed: self.seed,
            accumulation: self.accumulation,
        }
    }
}

impl<T: Real> fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("parameters", &self.num_parameters())
            .field("precision", &T::NAME)
            .finish()
    }
}

/// Classification CompositeNet (five stages + dense).
pub fn build_classification_net<T: Real>(
    kind: LayerKind,
    j0: usize,
    m: usize,
    k: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Network<T>> {
    Network::new(NetworkSpec::classification(kind, j0, m, k, num_classes), seed)
}

/// Deep SVDD CompositeNet (three stages + dense to the latent space).
pub fn build_dsvdd_net<T: Real>(
    kind: LayerKind,
    j0: usize,
    m: usize,
    k: usize,
    latent_dim: usize,
    seed: u64,
) -> Result<Network<T>> {
    Network::new(NetworkSpec::dsvdd(kind, j0, m, k, latent_dim), seed)
}

/// Total learnable scalars (point layers, batch-norm affine, dense).
pub fn count_parameters<T: Real>(net: &Network<T>) -> usize {
    net.num_parameters()
}

impl<T: Real> Network<T> {
    /// Build with parameters initialized from the `init` substream of `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::substream(seed, stream::INIT);
        let mut stages = Vec::with_capacity(spec.stages.len());
        let mut width = spec.input_features;
        for (s, st) in spec.stages.iter().enumerate() {
            let mut conv = PointConv::build(&spec, width, st.out_features, &mut rng)?;
            conv.rename_params(&format!("stage{s}.conv"));
            let mut bn = BatchNormLayer::with_config(st.out_features, spec.bn_momentum, spec.bn_eps);
            bn.rename_params(&format!("stage{s}.bn"));
            for b in bn.buffers_mut() {
                b.name = format!("stage{s}.bn.{}", b.name);
            }
            stages.push(Stage { conv, bn });
            width = st.out_features;
        }
        let mut dense = DenseLayer::new(width, spec.out_dim, spec.dense_bias, &mut rng);
        dense.rename_params("dense");
        Ok(Self {
            spec,
            stages,
            dense,
            seed,
            accumulation: Accumulation::default(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stages(&self) -> &[Stage<T>] {
        &self.stages
    }

    pub fn dense(&self) -> &DenseLayer<T> {
        &self.dense
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    pub fn accumulation(&self) -> Accumulation {
        self.accumulation
    }

    pub fn set_accumulation(&mut self, acc: Accumulation) {
        self.accumulation = acc;
    }

    /// Batch-norm running statistics of every stage, in order.
    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        self.stages.iter().flat_map(|s| s.bn.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.stages.iter_mut().flat_map(|s| s.bn.buffers_mut()).collect()
    }

    fn sampler_seed(mode: Mode, item: usize, stage: usize) -> u64 {
        match mode {
            Mode::Train { seed } => rng::derive_seed(seed, stream::SAMPLING, ((item as u64) << 8) | stage as u64),
            Mode::Eval { seed } => rng::derive_seed(seed, stream::SAMPLING, stage as u64),
        }
    }

    /// Sample output points and build windows for one stage input.
    fn stage_windows(&self, cloud: &PointCloud<T>, st: &StageSpec, seed: u64) -> Result<WindowSet> {
        let points = cloud.points();
        let n = points.len();
        let take = geometry::SamplerConfig::default().neighbors;
        let graph_k = st.window_size.max(take + 1);
        let mut rng = rng::substream(seed, stream::SAMPLING);
        if self.spec.exclude_center {
            let gk = (take + 1).min(n);
            let graph = knn_rows(points, points, gk, WindowOptions::default())?;
            let idx = geometry::sample_indices_with_graph(
                n,
                &|i| neighbors_from_graph(&graph, gk, i, take),
                st.output_count,
                self.spec.attenuation,
                &mut rng,
            );
            let outputs: Vec<Point> = idx.iter().map(|&i| points[i]).collect();
            let rows = knn_rows(points, &outputs, st.window_size, WindowOptions { exclude_center: true })?;
            return WindowSet::new(outputs, rows, st.window_size);
        }
        // Output points are input points, so the window of output `i` is the
        // KNN row of input `i`; one self-join serves sampler and windows.
        let graph = knn_rows(points, points, graph_k, WindowOptions::default())?;
        let idx = geometry::sample_indices_with_graph(
            n,
            &|i| neighbors_from_graph(&graph, graph_k, i, take),
            st.output_count,
            self.spec.attenuation,
            &mut rng,
        );
        let mut rows = Vec::with_capacity(idx.len() * st.window_size);
        let mut outputs = Vec::with_capacity(idx.len());
        for &i in &idx {
            outputs.push(points[i]);
            rows.extend_from_slice(&graph[i * graph_k..i * graph_k + st.window_size]);
        }
        WindowSet::new(outputs, rows, st.window_size)
    }

    fn check_batch(&self, batch: &[PointCloud]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for c in batch {
            if c.feature_width() != self.spec.input_features {
                return Err(Error::mismatch("input feature width I", self.spec.input_features, c.feature_width()));
            }
        }
        Ok(())
    }

    fn run(&self, batch: &[PointCloud], mode: Mode) -> Result<(Vec<T>, Tape<T>)> {
        self.check_batch(batch)?;
        let mut current: Vec<PointCloud<T>> = batch.iter().map(|c| c.cast::<T>()).collect();
        let mut tapes = Vec::with_capacity(self.stages.len());
        for (s, (stage, st)) in self.stages.iter().zip(&self.spec.stages).enumerate() {
            let results: Vec<Result<(WindowSet, Vec<T>, PointCache<T>)>> = current
                .par_iter()
                .enumerate()
                .map(|(b, cloud)| {
                    let windows = self.stage_windows(cloud, st, Self::sampler_seed(mode, b, s))?;
                    let windows = self.accumulation.prepare(&windows).into_owned();
                    let (out, cache) = stage.conv.forward(cloud, &windows)?;
                    Ok((windows, out, cache))
                })
                .collect();
            let mut windows = Vec::with_capacity(results.len());
            let mut caches = Vec::with_capacity(results.len());
            let mut rows = Vec::new();
            for r in results {
                let (w, out, cache) = r?;
                rows.extend_from_slice(&out);
                windows.push(w);
                caches.push(cache);
            }
            let (mut activated, bn) = match mode {
                Mode::Train { .. } => {
                    let (y, cache) = stage.bn.forward_train(&rows)?;
                    (y, Some(cache))
                }
                Mode::Eval { .. } => (stage.bn.forward_eval(&rows)?, None),
            };
            relu_forward(&mut activated);
            let j = st.out_features;
            let mut next = Vec::with_capacity(current.len());
            let mut offset = 0;
            for w in &windows {
                let len = w.len() * j;
                next.push(PointCloud::from_parts_unchecked(
                    w.outputs().to_vec(),
                    activated[offset..offset + len].to_vec(),
                    j,
                ));
                offset += len;
            }
            let inputs = std::mem::replace(&mut current, next);
            tapes.push(StageTape {
                inputs,
                windows,
                caches,
                bn,
                activated,
            });
        }
        let dense_input: Vec<T> = current.iter().flat_map(|c| c.features().iter().copied()).collect();
        let logits = self.dense.forward(&dense_input)?;
        Ok((
            logits,
            Tape {
                stages: tapes,
                dense_input,
                batch: batch.len(),
            },
        ))
    }

    /// Training-mode forward: returns `B x out_dim` outputs and the tape.
    /// Batch-norm running statistics are not touched; see [`Network::commit_running_stats`].
    pub fn forward_train(&self, batch: &[PointCloud], seed: u64) -> Result<(Vec<T>, Tape<T>)> {
        self.run(batch, Mode::Train { seed })
    }

    /// Fold the batch statistics of a training forward into the running averages.
    pub fn commit_running_stats(&mut self, tape: &Tape<T>) {
        for (stage, t) in self.stages.iter_mut().zip(&tape.stages) {
            if let Some(cache) = &t.bn {
                stage.bn.update_running(cache);
            }
        }
    }

    /// Blend the batch statistics of a training forward into the running
    /// averages with weight `w` for the batch.
    pub fn blend_running_stats(&mut self, tape: &Tape<T>, w: f64) {
        for (stage, t) in self.stages.iter_mut().zip(&tape.stages) {
            if let Some(cache) = &t.bn {
                stage.bn.blend_running(cache, w);
            }
        }
    }

    /// Inference with running statistics and a fixed sampling seed.
    pub fn forward_eval(&self, batch: &[PointCloud], seed: u64) -> Result<Vec<T>> {
        Ok(self.run(batch, Mode::Eval { seed })?.0)
    }

    /// Per-instance inference: one `out_dim` row per cloud, independent of batching.
    pub fn infer(&self, clouds: &[PointCloud], seed: u64) -> Result<Vec<Vec<T>>> {
        clouds
            .iter()
            .map(|c| self.forward_eval(std::slice::from_ref(c), seed))
            .collect()
    }

    /// Gradients of a scalar loss w.r.t. every parameter (in `params()`
    /// order) given `d loss / d outputs` for a training-mode tape.
    pub fn backward(&self, tape: &Tape<T>, upstream: &[T]) -> Result<Vec<Vec<T>>> {
        if upstream.len() != tape.batch * self.spec.out_dim {
            return Err(Error::mismatch("output gradient size", tape.batch * self.spec.out_dim, upstream.len()));
        }
        let (dense_grads, mut grad_rows) = self.dense.backward(&tape.dense_input, upstream)?;
        let mut per_stage: Vec<Vec<Vec<T>>> = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate().rev() {
            let t = &tape.stages[s];
            let bn_cache = t.bn.as_ref().ok_or_else(|| {
                Error::InvalidArgument("backward needs a training-mode forward".into())
            })?;
            relu_backward(&t.activated, &mut grad_rows);
            let (bn_grads, conv_up) = stage.bn.backward(bn_cache, &grad_rows)?;
            let j = stage.conv.out_features();
            let mut offsets = Vec::with_capacity(t.windows.len());
            let mut o = 0;
            for w in &t.windows {
                offsets.push(o);
                o += w.len() * j;
            }
            let results: Vec<Result<LayerGrads<T>>> = (0..t.windows.len())
                .into_par_iter()
                .map(|b| {
                    let len = t.windows[b].len() * j;
                    stage.conv.backward(&t.inputs[b], &t.windows[b], &t.caches[b], &conv_up[offsets[b]..offsets[b] + len])
                })
                .collect();
            let mut conv_grads: Option<Vec<Vec<T>>> = None;
            let mut input_rows = Vec::new();
            for r in results {
                let g = r?;
                match conv_grads.as_mut() {
                    None => conv_grads = Some(g.params),
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g.params) {
                            for (x, y) in a.iter_mut().zip(v) {
                                *x += y;
                            }
                        }
                    }
                }
                input_rows.extend(g.input);
            }
            let mut grads = conv_grads.unwrap_or_default();
            grads.extend(bn_grads);
            per_stage.push(grads);
            grad_rows = input_rows;
        }
        per_stage.reverse();
        let mut all: Vec<Vec<T>> = per_stage.into_iter().flatten().collect();
        all.extend(dense_grads);
        Ok(all)
    }
}

impl<T: Real> Parameterized<T> for Network<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        for s in &self.stages {
            v.extend(s.conv.params());
            v.extend(s.bn.params());
        }
        v.extend(self.dense.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for s in &mut self.stages {
            v.extend(s.conv.params_mut());
            v.extend(s.bn.params_mut());
        }
        v.extend(self.dense.params_mut());
        v
    }
}

/// Numerically stable softmax of one logit row.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry (first on ties).
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
