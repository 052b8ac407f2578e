//! Differentiable layers with analytic forward and backward passes.
//!
//! Point layers consume a [`PointCloud`] plus a [`WindowSet`] and produce one
//! feature row per output point. Gradients flow to every learnable parameter
//! (including RBF centers) and to the input features, never to coordinates.

use std::borrow::Cow;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::geometry::{Point, PointCloud, WindowSet};
use crate::real::Real;

mod aggregate;
mod baseline;
mod batchnorm;
mod conv;
mod dense;
mod rbf;

pub use aggregate::{AggrCache, AggrCompositeLayer};
pub use baseline::{BaselineCache, BaselinePointConvLayer};
pub use batchnorm::{BatchNormCache, BatchNormLayer};
pub use conv::{ConvCache, ConvCompositeLayer};
pub use dense::DenseLayer;
pub use rbf::RbfSpatialFn;

/// A named, shaped block of learnable (or buffered) scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(name, shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    /// Zero-mean Gaussian entries with standard deviation `1/sqrt(fan_in)`.
    pub fn gaussian<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut t = Self::zeros(name, shape);
        t.data.iter_mut().for_each(|v| *v = T::of(normal.sample(rng)));
        t
    }

    pub fn uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        low: f64,
        high: f64,
        rng: &mut R,
    ) -> Self {
        let mut t = Self::zeros(name, shape);
        t.data
            .iter_mut()
            .for_each(|v| *v = T::of(rng.gen_range(low..high)));
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Anything owning learnable tensors.
pub trait Parameterized<T: Real> {
    fn params(&self) -> Vec<&Tensor<T>>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Prefix every parameter name (used when nesting layers in a network).
    fn rename_params(&mut self, prefix: &str) {
        for t in self.params_mut() {
            let base = t.name.rsplit('.').next().unwrap_or(&t.name).to_string();
            t.name = format!("{prefix}.{base}");
        }
    }
}

/// Gradients of a point layer: one vector per parameter (same order as
/// `params()`) and the gradient w.r.t. the input feature matrix.
#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub params: Vec<Vec<T>>,
    pub input: Vec<T>,
}

/// Order in which window contributions are accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulation {
    /// Window order as produced by the neighbor search.
    #[default]
    Fast,
    /// Every window visited in ascending input-index order; results do not
    /// depend on the order of points inside a window.
    Sorted,
}

impl std::str::FromStr for Accumulation {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "fast" => Ok(Accumulation::Fast),
            "sorted" => Ok(Accumulation::Sorted),
            other => Err(crate::Error::InvalidArgument(format!(
                "unknown accumulation `{other}` (expected fast or sorted)"
            ))),
        }
    }
}

impl std::fmt::Display for Accumulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Accumulation::Fast => "fast",
            Accumulation::Sorted => "sorted",
        })
    }
}

impl Accumulation {
    pub fn prepare<'a>(&self, windows: &'a WindowSet) -> Cow<'a, WindowSet> {
        match self {
            Accumulation::Fast => Cow::Borrowed(windows),
            Accumulation::Sorted => Cow::Owned(windows.sorted()),
        }
    }
}

/// A layer mapping `(P, phi)` to `(Q, psi)` over convolution windows.
pub trait PointLayer<T: Real>: Parameterized<T> {
    type Cache: Send + Sync;

    fn in_features(&self) -> usize;

    fn out_features(&self) -> usize;

    /// Output features, `windows.len() x out_features`, row-major.
    fn forward(&self, cloud: &PointCloud<T>, windows: &WindowSet) -> Result<(Vec<T>, Self::Cache)>;

    fn backward(
        &self,
        cloud: &PointCloud<T>,
        windows: &WindowSet,
        cache: &Self::Cache,
        upstream: &[T],
    ) -> Result<LayerGrads<T>>;

    /// Forward returning the output point cloud `(Q, psi)`.
    fn apply(&self, cloud: &PointCloud<T>, windows: &WindowSet) -> Result<PointCloud<T>> {
        let (features, _) = self.forward(cloud, windows)?;
        PointCloud::new(windows.outputs().to_vec(), features, self.out_features())
    }
}

pub(crate) fn check_inputs<T: Real>(
    cloud: &PointCloud<T>,
    windows: &WindowSet,
    in_features: usize,
) -> Result<()> {
    if cloud.feature_width() != in_features {
        return Err(crate::Error::mismatch(
            "input feature width I",
            in_features,
            cloud.feature_width(),
        ));
    }
    windows.validate_for(cloud.len())
}

pub(crate) fn check_upstream(len: usize, windows: &WindowSet, out_features: usize) -> Result<()> {
    if len != windows.len() * out_features {
        return Err(crate::Error::mismatch(
            "upstream gradient size",
            windows.len() * out_features,
            len,
        ));
    }
    Ok(())
}

#[inline]
pub(crate) fn offset<T: Real>(x: &Point, y: &Point) -> [T; 3] {
    [T::of(x[0] - y[0]), T::of(x[1] - y[1]), T::of(x[2] - y[2])]
}

/// Element-wise `max(0, x)`.
pub fn relu_forward<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through ReLU given its output.
pub fn relu_backward<T: Real>(output: &[T], upstream: &mut [T]) {
    for (g, &o) in upstream.iter_mut().zip(output) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}
