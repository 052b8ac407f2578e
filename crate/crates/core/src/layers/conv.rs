use rand::Rng;

use super::{check_inputs, check_upstream, offset, LayerGrads, Parameterized, PointLayer, RbfSpatialFn, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, WindowSet};
use crate::real::Real;

/// Convolutional composite layer:
///
/// `psi_j(y) = sum_{x in X_y} sum_i phi_i(x) sum_k w_ijk s_k(x - y)`
///
/// The window sum is contracted first into `A_ik(y) = sum_x phi_i(x) s_k(x - y)`
/// so each output costs `O(|X_y| (M K + I K) + J I K)`. When the input is
/// narrow it is cheaper to contract against the raw Gaussian responses,
/// `B_im(y) = sum_x phi_i(x) H_m(x - y)`, and mix once: `A = B V^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvCompositeLayer<T> {
    pub spatial: RbfSpatialFn<T>,
    /// `J x I x K`.
    pub weights_w: Tensor<T>,
    in_features: usize,
    out_features: usize,
}

/// Per-output `A_ik` contractions (`Q x I x K`).
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    contracted: Vec<T>,
}

impl<T: Real> ConvCompositeLayer<T> {
    pub fn new<R: Rng + ?Sized>(
        in_features: usize,
        out_features: usize,
        m: usize,
        k: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let spatial = RbfSpatialFn::new(m, k, sigma, rng)?;
        let weights_w = Tensor::gaussian("weights_w", &[out_features, in_features, k], in_features * k, rng);
        Self::from_parts(spatial, weights_w)
    }

    pub fn from_parts(spatial: RbfSpatialFn<T>, weights_w: Tensor<T>) -> Result<Self> {
        if weights_w.shape.len() != 3 {
            return Err(Error::InvalidArgument("weights_w must be J x I x K".into()));
        }
        if weights_w.shape[2] != spatial.out_dim() {
            return Err(Error::mismatch("weights_w K", spatial.out_dim(), weights_w.shape[2]));
        }
        Ok(Self {
            in_features: weights_w.shape[1],
            out_features: weights_w.shape[0],
            spatial,
            weights_w,
        })
    }

    /// Whether contracting against raw responses is cheaper for windows of `w` points.
    fn responses_first(&self, w: usize) -> bool {
        let (i, m, k) = (self.in_features, self.spatial.num_centers(), self.spatial.out_dim());
        w * i * m + i * m * k < w * (m * k + i * k)
    }

    pub(crate) fn forward_route(
        &self,
        cloud: &PointCloud<T>,
        windows: &WindowSet,
        responses_first: bool,
    ) -> Result<(Vec<T>, ConvCache<T>)> {
        check_inputs(cloud, windows, self.in_features)?;
        if responses_first {
            self.forward_responses(cloud, windows)
        } else {
            self.forward_mixed(cloud, windows)
        }
    }

    pub(crate) fn backward_route(
        &self,
        cloud: &PointCloud<T>,
        windows: &WindowSet,
        cache: &ConvCache<T>,
        upstream: &[T],
        responses_first: bool,
    ) -> Result<LayerGrads<T>> {
        check_inputs(cloud, windows, self.in_features)?;
        check_upstream(upstream.len(), windows, self.out_features)?;
        let ik = self.in_features * self.spatial.out_dim();
        if cache.contracted.len() != windows.len() * ik {
            return Err(Error::mismatch("cached contraction size", windows.len() * ik, cache.contracted.len()));
        }
        if responses_first {
            self.backward_responses(cloud, windows, cache, upstream)
        } else {
            self.backward_mixed(cloud, windows, cache, upstream)
        }
    }

    fn project(&self, a: &[T], out: &mut [T]) {
        let ik = a.len();
        for (j, o) in out.iter_mut().enumerate() {
            let wj = &self.weights_w.data[j * ik..(j + 1) * ik];
            *o = wj.iter().zip(a).map(|(&w, &v)| w * v).sum();
        }
    }

    fn forward_responses(&self, cloud: &PointCloud<T>, windows: &WindowSet) -> Result<(Vec<T>, ConvCache<T>)> {
        let (i_dim, j_dim) = (self.in_features, self.out_features);
        let (m, k) = (self.spatial.num_centers(), self.spatial.out_dim());
        let (ik, im) = (i_dim * k, i_dim * m);
        let v = &self.spatial.weights_v.data;
        let mut h = vec![T::zero(); m];
        let mut b = vec![T::zero(); im];
        let mut contracted = vec![T::zero(); windows.len() * ik];
        let mut out = vec![T::zero(); windows.len() * j_dim];
        let points = cloud.points();
        for q in 0..windows.len() {
            let y = &windows.outputs()[q];
            b.iter_mut().for_each(|e| *e = T::zero());
            for &n in windows.row(q) {
                let n = n as usize;
                self.spatial.responses(&offset::<T>(&points[n], y), &mut h);
                for (i, &phi) in cloud.feature_row(n).iter().enumerate() {
                    for (bv, &hv) in b[i * m..(i + 1) * m].iter_mut().zip(&h) {
                        *bv += phi * hv;
                    }
                }
            }
            let a = &mut contracted[q * ik..(q + 1) * ik];
            for i in 0..i_dim {
                let brow = &b[i * m..(i + 1) * m];
                for kk in 0..k {
                    a[i * k + kk] = v[kk * m..(kk + 1) * m].iter().zip(brow).map(|(&x, &y)| x * y).sum();
                }
            }
            self.project(a, &mut out[q * j_dim..(q + 1) * j_dim]);
        }
        Ok((out, ConvCache { contracted }))
    }

    fn backward_responses(
        &self,
        cloud: &PointCloud<T>,
        windows: &WindowSet,
        cache: &ConvCache<T>,
        upstream: &[T],
    ) -> Result<LayerGrads<T>> {
        let (i_dim, j_dim) = (self.in_features, self.out_features);
        let (m, k) = (self.spatial.num_centers(), self.spatial.out_dim());
        let (ik, im) = (i_dim * k, i_dim * m);
        let v = &self.spatial.weights_v.data;
        let mut g_centers = vec![T::zero(); m * 3];
        let mut g_v = vec![T::zero(); k * m];
        let mut g_w = vec![T::zero(); j_dim * ik];
        let mut g_input = vec![T::zero(); cloud.features().len()];
        let mut d_a = vec![T::zero(); ik];
        let mut d_b = vec![T::zero(); im];
        let mut b = vec![T::zero(); im];
        let mut h = vec![T::zero(); m];
        let mut dh = vec![T::zero(); m];
        let points = cloud.points();
        for q in 0..windows.len() {
            let g = &upstream[q * j_dim..(q + 1) * j_dim];
            if g.iter().all(|&x| x == T::zero()) {
                continue;
            }
            let a = &cache.contracted[q * ik..(q + 1) * ik];
            d_a.iter_mut().for_each(|x| *x = T::zero());
            for (j, &gj) in g.iter().enumerate() {
                let wj = &self.weights_w.data[j * ik..(j + 1) * ik];
                let gwj = &mut g_w[j * ik..(j + 1) * ik];
                for e in 0..ik {
                    gwj[e] += gj * a[e];
                    d_a[e] += gj * wj[e];
                }
            }
            // dB = dA V
            d_b.iter_mut().for_each(|x| *x = T::zero());
            for i in 0..i_dim {
                let dbrow = &mut d_b[i * m..(i + 1) * m];
                for kk in 0..k {
                    let da = d_a[i * k + kk];
                    for (db, &vv) in dbrow.iter_mut().zip(&v[kk * m..(kk + 1) * m]) {
                        *db += da * vv;
                    }
                }
            }
            b.iter_mut().for_each(|x| *x = T::zero());
            let y = &windows.outputs()[q];
            for &n in windows.row(q) {
                let n = n as usize;
                let d = offset::<T>(&points[n], y);
                self.spatial.responses(&d, &mut h);
                let phi = cloud.feature_row(n);
                dh.iter_mut().for_each(|x| *x = T::zero());
                let gphi = &mut g_input[n * i_dim..(n + 1) * i_dim];
                for i in 0..i_dim {
                    let dbrow = &d_b[i * m..(i + 1) * m];
                    let brow = &mut b[i * m..(i + 1) * m];
                    let mut acc = T::zero();
                    for mm in 0..m {
                        acc += dbrow[mm] * h[mm];
                        dh[mm] += dbrow[mm] * phi[i];
                        brow[mm] += phi[i] * h[mm];
                    }
                    gphi[i] += acc;
                }
                self.spatial.accumulate_center_grad(&d, &h, &dh, &mut g_centers);
            }
            // dV_km += sum_i dA_ik B_im
            for kk in 0..k {
                let gvrow = &mut g_v[kk * m..(kk + 1) * m];
                for i in 0..i_dim {
                    let da = d_a[i * k + kk];
                    for (gv, &bv) in gvrow.iter_mut().zip(&b[i * m..(i + 1) * m]) {
                        *gv += da * bv;
                    }
                }
            }
        }
        Ok(LayerGrads {
            params: vec![g_centers, g_v, g_w],
            input: g_input,
        })
    }

    fn forward_mixed(&self, cloud: &PointCloud<T>, windows: &WindowSet) -> Result<(Vec<T>, ConvCache<T>)> {
        let (i_dim, j_dim) = (self.in_features, self.out_features);
        let (m, k) = (self.spatial.num_centers(), self.spatial.out_dim());
        let ik = i_dim * k;
        let mut h = vec![T::zero(); m];
        let mut s = vec![T::zero(); k];
        let mut contracted = vec![T::zero(); windows.len() * ik];
        let mut out = vec![T::zero(); windows.len() * j_dim];
        let points = cloud.points();
        for q in 0..windows.len() {
            let y = &windows.outputs()[q];
            let a = &mut contracted[q * ik..(q + 1) * ik];
            for &n in windows.row(q) {
                let n = n as usize;
                let d = offset::<T>(&points[n], y);
                self.spatial.responses(&d, &mut h);
                self.spatial.mix(&h, &mut s);
                for (i, &phi) in cloud.feature_row(n).iter().enumerate() {
                    let arow = &mut a[i * k..(i + 1) * k];
                    for (av, &sv) in arow.iter_mut().zip(&s) {
                        *av += phi * sv;
                    }
                }
            }
            self.project(a, &mut out[q * j_dim..(q + 1) * j_dim]);
        }
        Ok((out, ConvCache { contracted }))
    }

    fn backward_mixed(
        &self,
        cloud: &PointCloud<T>,
        windows: &WindowSet,
        cache: &ConvCache<T>,
        upstream: &[T],
    ) -> Result<LayerGrads<T>> {
        let (i_dim, j_dim) = (self.in_features, self.out_features);
        let (m, k) = (self.spatial.num_centers(), self.spatial.out_dim());
        let ik = i_dim * k;
        let mut g_centers = vec![T::zero(); m * 3];
        let mut g_v = vec![T::zero(); k * m];
        let mut g_w = vec![T::zero(); j_dim * ik];
        let mut g_input = vec![T::zero(); cloud.features().len()];
        let mut d_a = vec![T::zero(); ik];
        let mut h = vec![T::zero(); m];
        let mut dh = vec![T::zero(); m];
        let mut s = vec![T::zero(); k];
        let mut ds = vec![T::zero(); k];
        let points = cloud.points();
        for q in 0..windows.len() {
            let g = &upstream[q * j_dim..(q + 1) * j_dim];
            if g.iter().all(|&v| v == T::zero()) {
                continue;
            }
            let a = &cache.contracted[q * ik..(q + 1) * ik];
            d_a.iter_mut().for_each(|v| *v = T::zero());
            for (j, &gj) in g.iter().enumerate() {
                let wj = &self.weights_w.data[j * ik..(j + 1) * ik];
                let gwj = &mut g_w[j * ik..(j + 1) * ik];
                for e in 0..ik {
                    gwj[e] += gj * a[e];
                    d_a[e] += gj * wj[e];
                }
            }
            let y = &windows.outputs()[q];
            for &n in windows.row(q) {
                let n = n as usize;
                let d = offset::<T>(&points[n], y);
                self.spatial.responses(&d, &mut h);
                self.spatial.mix(&h, &mut s);
                let phi = cloud.feature_row(n);
                ds.iter_mut().for_each(|v| *v = T::zero());
                let gphi = &mut g_input[n * i_dim..(n + 1) * i_dim];
                for i in 0..i_dim {
                    let da_row = &d_a[i * k..(i + 1) * k];
                    let mut acc = T::zero();
                    for kk in 0..k {
                        acc += da_row[kk] * s[kk];
                        ds[kk] += da_row[kk] * phi[i];
                    }
                    gphi[i] += acc;
                }
                self.spatial.accumulate_grad(&d, &h, &ds, &mut dh, &mut g_centers, &mut g_v);
            }
        }
        Ok(LayerGrads {
            params: vec![g_centers, g_v, g_w],
            input: g_input,
        })
    }
}

impl<T: Real> Parameterized<T> for ConvCompositeLayer<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.spatial.centers, &self.spatial.weights_v, &self.weights_w]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.spatial.centers, &mut self.spatial.weights_v, &mut self.weights_w]
    }
}

impl<T: Real> PointLayer<T> for ConvCompositeLayer<T> {
    type Cache = ConvCache<T>;

    fn in_features(&self) -> usize {
        self.in_features
    }

    fn out_features(&self) -> usize {
        self.out_features
    }

    fn forward(&self, cloud: &PointCloud<T>, windows: &WindowSet) -> Result<(Vec<T>, ConvCache<T>)> {
        self.forward_route(cloud, windows, self.responses_first(windows.window_size()))
    }

    fn backward(
        &self,
        cloud: &PointCloud<T>,
        windows: &WindowSet,
        cache: &ConvCache<T>,
        upstream: &[T],
    ) -> Result<LayerGrads<T>> {
        self.backward_route(cloud, windows, cache, upstream, self.responses_first(windows.window_size()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::knn_windows;
    use crate::layers::testutil::*;

    /// Direct quadruple loop over window points, i, j, k.
    fn oracle(layer: &ConvCompositeLayer<f64>, cloud: &PointCloud<f64>, windows: &WindowSet) -> Vec<f64> {
        let (i_dim, j_dim, k_dim, m_dim) =
            (layer.in_features, layer.out_features, layer.spatial.out_dim(), layer.spatial.num_centers());
        let sigma = layer.spatial.sigma();
        let mut out = vec![0.0; windows.len() * j_dim];
        for q in 0..windows.len() {
            let y = windows.outputs()[q];
            for j in 0..j_dim {
                let mut psi = 0.0;
                for &n in windows.row(q) {
                    let x = cloud.points()[n as usize];
                    for i in 0..i_dim {
                        let mut g = 0.0;
                        for k in 0..k_dim {
                            let mut s = 0.0;
                            for m in 0..m_dim {
                                let c = &layer.spatial.centers.data[3 * m..3 * m + 3];
                                let r2: f64 = (0..3).map(|a| (x[a] - y[a] - c[a]).powi(2)).sum();
                                s += layer.spatial.weights_v.data[k * m_dim + m] * (-r2 / (2.0 * sigma * sigma)).exp();
                            }
                            g += layer.weights_w.data[(j * i_dim + i) * k_dim + k] * s;
                        }
                        psi += cloud.feature_row(n as usize)[i] * g;
                    }
                }
                out[q * j_dim + j] = psi;
            }
        }
        out
    }

    #[test]
    fn sums_ones_over_window() {
        let spatial = RbfSpatialFn::from_tensors(
            Tensor { name: "c".into(), shape: vec![1, 3], data: vec![0.0; 3] },
            Tensor { name: "v".into(), shape: vec![1, 1], data: vec![1.0] },
            0.3,
        )
        .unwrap();
        let w = Tensor { name: "w".into(), shape: vec![1, 1, 1], data: vec![1.0] };
        let layer = ConvCompositeLayer::from_parts(spatial, w).unwrap();
        let cloud = PointCloud::with_constant_features(vec![[0.2, 0.1, 0.0]; 5]).unwrap();
        let windows = knn_windows(&cloud, &[[0.2, 0.1, 0.0]], 5).unwrap();
        let out = layer.apply(&cloud, &windows).unwrap();
        assert_eq!(out.features(), &[5.0]);
        assert_eq!(out.points(), &[[0.2, 0.1, 0.0]]);
    }

    #[test]
    fn zero_features_give_zero_output() {
        let layer = ConvCompositeLayer::<f64>::new(2, 3, 4, 2, 0.3, &mut rng(1)).unwrap();
        let cloud = random_cloud(12, 2, 2);
        let zero = cloud.with_features(vec![0.0; 24], 2).unwrap();
        let windows = random_windows(&cloud, 4, 5, 3);
        assert!(layer.forward(&zero, &windows).unwrap().0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_loop_oracle() {
        for seed in 0..5 {
            let layer = ConvCompositeLayer::<f64>::new(2, 3, 2, 2, 0.4, &mut rng(seed)).unwrap();
            let cloud = random_cloud(10, 2, seed + 10);
            let windows = random_windows(&cloud, 3, 4, seed + 20);
            let fast = layer.forward(&cloud, &windows).unwrap().0;
            let slow = oracle(&layer, &cloud, &windows);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_wrong_feature_width() {
        let layer = ConvCompositeLayer::<f64>::new(2, 3, 2, 2, 0.4, &mut rng(0)).unwrap();
        let cloud = random_cloud(10, 3, 0);
        let windows = random_windows(&cloud, 3, 4, 0);
        let err = layer.forward(&cloud, &windows).unwrap_err();
        assert!(err.to_string().contains("expected 2, got 3"), "{err}");
    }

    #[test]
    fn weight_gradient_is_feature_times_spatial() {
        // Single window: dpsi_j/dw_ijk = sum_x phi_i(x) s_k(x - y).
        let layer = ConvCompositeLayer::<f64>::new(2, 2, 3, 2, 0.5, &mut rng(4)).unwrap();
        let cloud = random_cloud(6, 2, 5);
        let windows = random_windows(&cloud, 1, 6, 6);
        let (_, cache) = layer.forward(&cloud, &windows).unwrap();
        let grads = layer.backward(&cloud, &windows, &cache, &[1.0, 0.0]).unwrap();
        let y = windows.outputs()[0];
        for i in 0..2 {
            for k in 0..2 {
                let mut expect = 0.0;
                for &n in windows.row(0) {
                    let x = cloud.points()[n as usize];
                    let s = layer.spatial.forward(&[[x[0] - y[0], x[1] - y[1], x[2] - y[2]]]);
                    expect += cloud.feature_row(n as usize)[i] * s[k];
                }
                assert!((grads.params[2][i * 2 + k] - expect).abs() < 1e-12);
                assert_eq!(grads.params[2][4 + i * 2 + k], 0.0);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let layer = ConvCompositeLayer::<f64>::new(2, 3, 2, 2, 0.4, &mut rng(3)).unwrap();
        let cloud = random_cloud(10, 2, 3);
        let windows = random_windows(&cloud, 3, 4, 3);
        let (_, cache) = layer.forward(&cloud, &windows).unwrap();
        let g = layer.backward(&cloud, &windows, &cache, &[0.0; 9]).unwrap();
        assert!(g.params.iter().flatten().chain(&g.input).all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let layer = ConvCompositeLayer::<f64>::new(3, 2, 4, 3, 0.5, &mut rng(seed)).unwrap();
            let cloud = random_cloud(9, 3, seed + 1);
            let windows = random_windows(&cloud, 3, 4, seed + 2);
            assert!(gradcheck(&layer, &cloud, &windows, seed) < 1e-4);
        }
    }

    #[test]
    fn contraction_routes_agree() {
        for (seed, i_dim) in [(0u64, 1usize), (1, 2), (2, 5)] {
            let layer = ConvCompositeLayer::<f64>::new(i_dim, 3, 4, 3, 0.5, &mut rng(seed)).unwrap();
            let cloud = random_cloud(12, i_dim, seed + 30);
            let windows = random_windows(&cloud, 4, 5, seed + 31);
            let (oa, ca) = layer.forward_route(&cloud, &windows, false).unwrap();
            let (ob, cb) = layer.forward_route(&cloud, &windows, true).unwrap();
            let slow = oracle(&layer, &cloud, &windows);
            for ((a, b), c) in oa.iter().zip(&ob).zip(&slow) {
                assert!((a - c).abs() < 1e-12 && (b - c).abs() < 1e-12);
            }
            let up: Vec<f64> = (0..oa.len()).map(|e| (e as f64 * 0.37).sin()).collect();
            let ga = layer.backward_route(&cloud, &windows, &ca, &up, false).unwrap();
            let gb = layer.backward_route(&cloud, &windows, &cb, &up, true).unwrap();
            for (x, y) in ga.params.iter().flatten().chain(&ga.input).zip(gb.params.iter().flatten().chain(&gb.input)) {
                assert!(rel_err(*x, *y) < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn narrow_input_gradients_match_finite_differences() {
        let layer = ConvCompositeLayer::<f64>::new(1, 3, 4, 3, 0.5, &mut rng(8)).unwrap();
        assert!(layer.responses_first(4));
        let cloud = random_cloud(9, 1, 9);
        let windows = random_windows(&cloud, 3, 4, 10);
        assert!(gradcheck(&layer, &cloud, &windows, 8) < 1e-4);
    }

    #[test]
    fn parameter_count_formula() {
        let layer = ConvCompositeLayer::<f64>::new(64, 128, 64, 16, 0.3, &mut rng(0)).unwrap();
        assert_eq!(layer.num_parameters(), 128 * 64 * 16 + 16 * 64 + 3 * 64);
        assert_eq!(layer.num_parameters(), 132_288);
    }
}
