use rand::Rng;

use super::{Parameterized, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Radial basis function network mapping an offset `x - y` to `K` values:
///
/// `s_k(d) = sum_m v_km * exp(-|d - c_m|^2 / (2 sigma^2))`
///
/// Centers `c_m` and mixing weights `v_km` are learnable; `sigma` is fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfSpatialFn<T> {
    /// `M x 3`.
    pub centers: Tensor<T>,
    /// `K x M`.
    pub weights_v: Tensor<T>,
    sigma: f64,
    neg_half_inv_sigma2: T,
    inv_sigma2: T,
}

impl<T: Real> RbfSpatialFn<T> {
    pub fn new<R: Rng + ?Sized>(m: usize, k: usize, sigma: f64, rng: &mut R) -> Result<Self> {
        let centers = Tensor::uniform("centers", &[m, 3], -0.5, 0.5, rng);
        let weights_v = Tensor::gaussian("weights_v", &[k, m], m, rng);
        Self::from_tensors(centers, weights_v, sigma)
    }

    pub fn from_tensors(centers: Tensor<T>, weights_v: Tensor<T>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        if centers.shape.len() != 2 || centers.shape[1] != 3 {
            return Err(Error::InvalidArgument("centers must be M x 3".into()));
        }
        let m = centers.shape[0];
        if weights_v.shape.len() != 2 || weights_v.shape[1] != m {
            return Err(Error::mismatch("RBF weight columns (M)", m, *weights_v.shape.get(1).unwrap_or(&0)));
        }
        Ok(Self {
            centers,
            weights_v,
            sigma,
            neg_half_inv_sigma2: T::of(-0.5 / (sigma * sigma)),
            inv_sigma2: T::of(1.0 / (sigma * sigma)),
        })
    }

    pub fn num_centers(&self) -> usize {
        self.centers.shape[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights_v.shape[0]
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Gaussian responses `h_m(d)` for all centers.
    #[inline]
    pub(crate) fn responses(&self, d: &[T; 3], h: &mut [T]) {
        let c = &self.centers.data;
        for (m, hm) in h.iter_mut().enumerate() {
            let a = d[0] - c[3 * m];
            let b = d[1] - c[3 * m + 1];
            let e = d[2] - c[3 * m + 2];
            *hm = ((a * a + b * b + e * e) * self.neg_half_inv_sigma2).exp();
        }
    }

    /// `s = V h`.
    #[inline]
    pub(crate) fn mix(&self, h: &[T], s: &mut [T]) {
        let m = h.len();
        for (k, sk) in s.iter_mut().enumerate() {
            let row = &self.weights_v.data[k * m..(k + 1) * m];
            let mut acc = T::zero();
            for (v, hv) in row.iter().zip(h) {
                acc += *v * *hv;
            }
            *sk = acc;
        }
    }

    /// Accumulate parameter gradients for one offset given `ds = dL/ds(d)`.
    /// `h` must hold the responses at `d`; `dh` is scratch of length `M`.
    #[inline]
    pub(crate) fn accumulate_grad(
        &self,
        d: &[T; 3],
        h: &[T],
        ds: &[T],
        dh: &mut [T],
        grad_centers: &mut [T],
        grad_v: &mut [T],
    ) {
        let m = h.len();
        dh.iter_mut().for_each(|v| *v = T::zero());
        for (k, &g) in ds.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let row = &self.weights_v.data[k * m..(k + 1) * m];
            let grow = &mut grad_v[k * m..(k + 1) * m];
            for j in 0..m {
                grow[j] += g * h[j];
                dh[j] += g * row[j];
            }
        }
        self.accumulate_center_grad(d, h, dh, grad_centers);
    }

    /// Center gradients from `dh = dL/dh(d)`: `dh_m * h_m * (d - c_m) / sigma^2`.
    #[inline]
    pub(crate) fn accumulate_center_grad(&self, d: &[T; 3], h: &[T], dh: &[T], grad_centers: &mut [T]) {
        let c = &self.centers.data;
        for m in 0..h.len() {
            let f = dh[m] * h[m] * self.inv_sigma2;
            if f == T::zero() {
                continue;
            }
            for a in 0..3 {
                grad_centers[3 * m + a] += f * (d[a] - c[3 * m + a]);
            }
        }
    }

    /// Evaluate on a batch of offsets; returns `offsets.len() x K`.
    pub fn forward(&self, offsets: &[[T; 3]]) -> Vec<T> {
        let (m, k) = (self.num_centers(), self.out_dim());
        let mut h = vec![T::zero(); m];
        let mut out = vec![T::zero(); offsets.len() * k];
        for (d, s) in offsets.iter().zip(out.chunks_mut(k)) {
            self.responses(d, &mut h);
            self.mix(&h, s);
        }
        out
    }

    /// Gradients `(d centers, d weights_v)` for upstream `offsets.len() x K`.
    pub fn backward(&self, offsets: &[[T; 3]], upstream: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let (m, k) = (self.num_centers(), self.out_dim());
        if upstream.len() != offsets.len() * k {
            return Err(Error::mismatch("upstream gradient size", offsets.len() * k, upstream.len()));
        }
        let mut gc = vec![T::zero(); m * 3];
        let mut gv = vec![T::zero(); k * m];
        let mut h = vec![T::zero(); m];
        let mut dh = vec![T::zero(); m];
        for (d, ds) in offsets.iter().zip(upstream.chunks(k)) {
            self.responses(d, &mut h);
            self.accumulate_grad(d, &h, ds, &mut dh, &mut gc, &mut gv);
        }
        Ok((gc, gv))
    }
}

impl<T: Real> Parameterized<T> for RbfSpatialFn<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.centers, &self.weights_v]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.centers, &mut self.weights_v]
    }
}
