use rand::Rng;

use super::{check_inputs, check_upstream, offset, LayerGrads, Parameterized, PointLayer, RbfSpatialFn, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, WindowSet};
use crate::real::Real;

/// Weight-tensor point convolution with Gaussian correlation functions:
///
/// `psi_j(y) = sum_{x in X_y} sum_i phi_i(x) g_ij(x - y)`,
/// `g_ij(d) = sum_m wt_ijm H_m(d)`, `H_m(d) = exp(-|d - c_m|^2 / (2 sigma^2))`.
///
/// This is the reference the composite layers are compared against: its
/// weight tensor grows linearly with the number of centers `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselinePointConvLayer<T> {
    /// `M x 3`; the Gaussian evaluation reuses [`RbfSpatialFn`] with an empty mixing matrix.
    correlation: RbfSpatialFn<T>,
    /// `J x I x M`.
    pub weights_wtilde: Tensor<T>,
    in_features: usize,
    out_features: usize,
}

/// Per-output contractions `B_im = sum_x phi_i(x) H_m(x - y)` (`Q x I x M`).
#[derive(Debug, Clone)]
pub struct BaselineCache<T> {
    contracted: Vec<T>,
}

impl<T: Real> BaselinePointConvLayer<T> {
    pub fn new<R: Rng + ?Sized>(
        in_features: usize,
        out_features: usize,
        m: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let centers = Tensor::uniform("centers", &[m, 3], -0.5, 0.5, rng);
        let wt = Tensor::gaussian("weights_wtilde", &[out_features, in_features, m], in_features * m, rng);
        Self::from_parts(centers, wt, sigma)
    }

    pub fn from_parts(centers: Tensor<T>, weights_wtilde: Tensor<T>, sigma: f64) -> Result<Self> {
        let m = centers.shape.first().copied().unwrap_or(0);
        let correlation = RbfSpatialFn::from_tensors(centers, Tensor::zeros("weights_v", &[0, m]), sigma)?;
        if weights_wtilde.shape.len() != 3 {
            return Err(Error::InvalidArgument("weights_wtilde must be J x I x M".into()));
        }
        if weights_wtilde.shape[2] != m {
            return Err(Error::mismatch("weights_wtilde M", m, weights_wtilde.shape[2]));
        }
        Ok(Self {
            in_features: weights_wtilde.shape[1],
            out_features: weights_wtilde.shape[0],
            correlation,
            weights_wtilde,
        })
    }

    pub fn centers(&self) -> &Tensor<T> {
        &self.correlation.centers
    }

    pub fn sigma(&self) -> f64 {
        self.correlation.sigma()
    }

    pub fn num_centers(&self) -> usize {
        self.correlation.num_centers()
    }
}

impl<T: Real> Parameterized<T> for BaselinePointConvLayer<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.correlation.centers, &self.weights_wtilde]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.correlation.centers, &mut self.weights_wtilde]
    }
}

impl<T: Real> PointLayer<T> for BaselinePointConvLayer<T> {
    type Cache = BaselineCache<T>;

    fn in_features(&self) -> usize {
        self.in_features
    }

    fn out_features(&self) -> usize {
        self.out_features
    }

    fn forward(&self, cloud: &PointCloud<T>, windows: &WindowSet) -> Result<(Vec<T>, BaselineCache<T>)> {
        check_inputs(cloud, windows, self.in_features)?;
        let (i_dim, j_dim, m) = (self.in_features, self.out_features, self.num_centers());
        let im = i_dim * m;
        let mut h = vec![T::zero(); m];
        let mut contracted = vec![T::zero(); windows.len() * im];
        let mut out = vec![T::zero(); windows.len() * j_dim];
        let points = cloud.points();
        for q in 0..windows.len() {
            let y = &windows.outputs()[q];
            let b = &mut contracted[q * im..(q + 1) * im];
            for &n in windows.row(q) {
                let n = n as usize;
                let d = offset::<T>(&points[n], y);
                self.correlation.responses(&d, &mut h);
                for (i, &phi) in cloud.feature_row(n).iter().enumerate() {
                    for (bv, &hv) in b[i * m..(i + 1) * m].iter_mut().zip(&h) {
                        *bv += phi * hv;
                    }
                }
            }
            for (j, o) in out[q * j_dim..(q + 1) * j_dim].iter_mut().enumerate() {
                let wj = &self.weights_wtilde.data[j * im..(j + 1) * im];
                *o = wj.iter().zip(b.iter()).map(|(&w, &v)| w * v).sum();
            }
        }
        Ok((out, BaselineCache { contracted }))
    }

    fn backward(
        &self,
        cloud: &PointCloud<T>,
        windows: &WindowSet,
        cache: &BaselineCache<T>,
        upstream: &[T],
    ) -> Result<LayerGrads<T>> {
        check_inputs(cloud, windows, self.in_features)?;
        check_upstream(upstream.len(), windows, self.out_features)?;
        let (i_dim, j_dim, m) = (self.in_features, self.out_features, self.num_centers());
        let im = i_dim * m;
        if cache.contracted.len() != windows.len() * im {
            return Err(Error::mismatch("cached contraction size", windows.len() * im, cache.contracted.len()));
        }
        let mut g_centers = vec![T::zero(); m * 3];
        let mut g_w = vec![T::zero(); j_dim * im];
        let mut g_input = vec![T::zero(); cloud.features().len()];
        let mut d_b = vec![T::zero(); im];
        let mut h = vec![T::zero(); m];
        let mut dh = vec![T::zero(); m];
        let points = cloud.points();
        for q in 0..windows.len() {
            let g = &upstream[q * j_dim..(q + 1) * j_dim];
            if g.iter().all(|&v| v == T::zero()) {
                continue;
            }
            let b = &cache.contracted[q * im..(q + 1) * im];
            d_b.iter_mut().for_each(|v| *v = T::zero());
            for (j, &gj) in g.iter().enumerate() {
                let wj = &self.weights_wtilde.data[j * im..(j + 1) * im];
                let gwj = &mut g_w[j * im..(j + 1) * im];
                for e in 0..im {
                    gwj[e] += gj * b[e];
                    d_b[e] += gj * wj[e];
                }
            }
            let y = &windows.outputs()[q];
            for &n in windows.row(q) {
                let n = n as usize;
                let d = offset::<T>(&points[n], y);
                self.correlation.responses(&d, &mut h);
                let phi = cloud.feature_row(n);
                dh.iter_mut().for_each(|v| *v = T::zero());
                let gphi = &mut g_input[n * i_dim..(n + 1) * i_dim];
                for i in 0..i_dim {
                    let row = &d_b[i * m..(i + 1) * m];
                    let mut acc = T::zero();
                    for mm in 0..m {
                        acc += row[mm] * h[mm];
                        dh[mm] += row[mm] * phi[i];
                    }
                    gphi[i] += acc;
                }
                self.correlation.accumulate_center_grad(&d, &h, &dh, &mut g_centers);
            }
        }
        Ok(LayerGrads {
            params: vec![g_centers, g_w],
            input: g_input,
        })
    }
}
