use rand::Rng;

use super::{check_inputs, check_upstream, offset, LayerGrads, Parameterized, PointLayer, RbfSpatialFn, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, WindowSet};
use crate::real::Real;

/// Aggregate composite layer.
///
/// Pools the spatial-function outputs and the input features of each window
/// into their component-wise mean and standard deviation (denominator
/// `|X_y| - 1`), `theta = [M_s; S_s]` and `eta = [M_phi; S_phi]`, then
/// combines them through a bilinear form per output channel:
/// `psi_j = theta^T W_j eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggrCompositeLayer<T> {
    pub spatial: RbfSpatialFn<T>,
    /// `J x 2I x 2K`.
    pub weights_w: Tensor<T>,
    in_features: usize,
    out_features: usize,
}

/// Pooled statistics per output: `theta` (`Q x 2K`) and `eta` (`Q x 2I`).
#[derive(Debug, Clone)]
pub struct AggrCache<T> {
    theta: Vec<T>,
    eta: Vec<T>,
}

impl<T: Real> AggrCache<T> {
    pub fn theta(&self) -> &[T] {
        &self.theta
    }

    pub fn eta(&self) -> &[T] {
        &self.eta
    }
}

/// Mean and `(n - 1)`-denominator standard deviation of the columns of an
/// `n x width` row-major block.
fn column_stats<T: Real>(rows: &[T], width: usize, mean: &mut [T], std: &mut [T]) {
    let n = rows.len() / width;
    let inv_n = T::one() / T::of(n as f64);
    let inv_nm1 = T::one() / T::of((n - 1) as f64);
    mean.iter_mut().for_each(|v| *v = T::zero());
    for row in rows.chunks(width) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|v| *v *= inv_n);
    std.iter_mut().for_each(|v| *v = T::zero());
    for row in rows.chunks(width) {
        for ((s, &v), &m) in std.iter_mut().zip(row).zip(mean.iter()) {
            let c = v - m;
            *s += c * c;
        }
    }
    std.iter_mut().for_each(|v| *v = (*v * inv_nm1).sqrt());
}

/// Gradient of one pooled row w.r.t. one window row:
/// `dmean / n + dstd * (v - mean) / ((n - 1) std)`; zero spread contributes
/// no standard-deviation gradient.
#[inline]
fn pooled_row_grad<T: Real>(
    value: T,
    mean: T,
    std: T,
    dmean: T,
    dstd: T,
    inv_n: T,
    inv_nm1: T,
) -> T {
    let mut g = dmean * inv_n;
    if std > T::zero() {
        g += dstd * (value - mean) * inv_nm1 / std;
    }
    g
}

impl<T: Real> AggrCompositeLayer<T> {
    pub fn new<R: Rng + ?Sized>(
        in_features: usize,
        out_features: usize,
        m: usize,
        k: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let spatial = RbfSpatialFn::new(m, k, sigma, rng)?;
        let weights_w = Tensor::gaussian(
            "weights_w",
            &[out_features, 2 * in_features, 2 * k],
            4 * in_features * k,
            rng,
        );
        Self::from_parts(spatial, weights_w)
    }

    pub fn from_parts(spatial: RbfSpatialFn<T>, weights_w: Tensor<T>) -> Result<Self> {
        if weights_w.shape.len() != 3 || weights_w.shape[1] % 2 != 0 {
            return Err(Error::InvalidArgument("weights_w must be J x 2I x 2K".into()));
        }
        if weights_w.shape[2] != 2 * spatial.out_dim() {
            return Err(Error::mismatch("weights_w 2K", 2 * spatial.out_dim(), weights_w.shape[2]));
        }
        Ok(Self {
            in_features: weights_w.shape[1] / 2,
            out_features: weights_w.shape[0],
            spatial,
            weights_w,
        })
    }

    fn check_window(&self, windows: &WindowSet) -> Result<()> {
        if windows.window_size() < 2 {
            return Err(Error::InvalidArgument(
                "aggregate layer needs windows of at least 2 points (standard deviation undefined)".into(),
            ));
        }
        Ok(())
    }
}

impl<T: Real> Parameterized<T> for AggrCompositeLayer<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.spatial.centers, &self.spatial.weights_v, &self.weights_w]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.spatial.centers, &mut self.spatial.weights_v, &mut self.weights_w]
    }
}

impl<T: Real> PointLayer<T> for AggrCompositeLayer<T> {
    type Cache = AggrCache<T>;

    fn in_features(&self) -> usize {
        self.in_features
    }

    fn out_features(&self) -> usize {
        self.out_features
    }

    fn forward(&self, cloud: &PointCloud<T>, windows: &WindowSet) -> Result<(Vec<T>, AggrCache<T>)> {
        check_inputs(cloud, windows, self.in_features)?;
        self.check_window(windows)?;
        let (i_dim, j_dim) = (self.in_features, self.out_features);
        let (m, k) = (self.spatial.num_centers(), self.spatial.out_dim());
        let w = windows.window_size();
        let (ti, tk) = (2 * i_dim, 2 * k);
        let mut h = vec![T::zero(); m];
        let mut s_rows = vec![T::zero(); w * k];
        let mut phi_rows = vec![T::zero(); w * i_dim];
        let mut theta = vec![T::zero(); windows.len() * tk];
        let mut eta = vec![T::zero(); windows.len() * ti];
        let mut out = vec![T::zero(); windows.len() * j_dim];
        let mut t = vec![T::zero(); ti];
        let points = cloud.points();
        for q in 0..windows.len() {
            let y = &windows.outputs()[q];
            for (r, &n) in windows.row(q).iter().enumerate() {
                let n = n as usize;
                let d = offset::<T>(&points[n], y);
                self.spatial.responses(&d, &mut h);
                self.spatial.mix(&h, &mut s_rows[r * k..(r + 1) * k]);
                phi_rows[r * i_dim..(r + 1) * i_dim].copy_from_slice(cloud.feature_row(n));
            }
            let th = &mut theta[q * tk..(q + 1) * tk];
            let (ms, ss) = th.split_at_mut(k);
            column_stats(&s_rows, k, ms, ss);
            let et = &mut eta[q * ti..(q + 1) * ti];
            let (mp, sp) = et.split_at_mut(i_dim);
            column_stats(&phi_rows, i_dim, mp, sp);
            let (th, et) = (&theta[q * tk..(q + 1) * tk], &eta[q * ti..(q + 1) * ti]);
            for (j, o) in out[q * j_dim..(q + 1) * j_dim].iter_mut().enumerate() {
                let wj = &self.weights_w.data[j * ti * tk..(j + 1) * ti * tk];
                for (i, ti_v) in t.iter_mut().enumerate() {
                    let row = &wj[i * tk..(i + 1) * tk];
                    *ti_v = row.iter().zip(th).map(|(&a, &b)| a * b).sum();
                }
                *o = t.iter().zip(et).map(|(&a, &b)| a * b).sum();
            }
        }
        Ok((out, AggrCache { theta, eta }))
    }

    fn backward(
        &self,
        cloud: &PointCloud<T>,
        windows: &WindowSet,
        cache: &AggrCache<T>,
        upstream: &[T],
    ) -> Result<LayerGrads<T>> {
        check_inputs(cloud, windows, self.in_features)?;
        self.check_window(windows)?;
        check_upstream(upstream.len(), windows, self.out_features)?;
        let (i_dim, j_dim) = (self.in_features, self.out_features);
        let (m, k) = (self.spatial.num_centers(), self.spatial.out_dim());
        let w = windows.window_size();
        let (ti, tk) = (2 * i_dim, 2 * k);
        if cache.theta.len() != windows.len() * tk || cache.eta.len() != windows.len() * ti {
            return Err(Error::mismatch("cached pooled statistics size", windows.len() * (tk + ti), cache.theta.len() + cache.eta.len()));
        }
        let inv_n = T::one() / T::of(w as f64);
        let inv_nm1 = T::one() / T::of((w - 1) as f64);
        let mut g_centers = vec![T::zero(); m * 3];
        let mut g_v = vec![T::zero(); k * m];
        let mut g_w = vec![T::zero(); j_dim * ti * tk];
        let mut g_input = vec![T::zero(); cloud.features().len()];
        let mut d_theta = vec![T::zero(); tk];
        let mut d_eta = vec![T::zero(); ti];
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
            let th = &cache.theta[q * tk..(q + 1) * tk];
            let et = &cache.eta[q * ti..(q + 1) * ti];
            d_theta.iter_mut().for_each(|v| *v = T::zero());
            d_eta.iter_mut().for_each(|v| *v = T::zero());
            for (j, &gj) in g.iter().enumerate() {
                let wj = &self.weights_w.data[j * ti * tk..(j + 1) * ti * tk];
                let gwj = &mut g_w[j * ti * tk..(j + 1) * ti * tk];
                for i in 0..ti {
                    let row = &wj[i * tk..(i + 1) * tk];
                    let grow = &mut gwj[i * tk..(i + 1) * tk];
                    let ge = gj * et[i];
                    let mut acc = T::zero();
                    for kk in 0..tk {
                        grow[kk] += ge * th[kk];
                        d_theta[kk] += ge * row[kk];
                        acc += row[kk] * th[kk];
                    }
                    d_eta[i] += gj * acc;
                }
            }
            let (ms, ss) = th.split_at(k);
            let (dms, dss) = d_theta.split_at(k);
            let (mp, sp) = et.split_at(i_dim);
            let (dmp, dsp) = d_eta.split_at(i_dim);
            let y = &windows.outputs()[q];
            for &n in windows.row(q) {
                let n = n as usize;
                let d = offset::<T>(&points[n], y);
                self.spatial.responses(&d, &mut h);
                self.spatial.mix(&h, &mut s);
                for kk in 0..k {
                    ds[kk] = pooled_row_grad(s[kk], ms[kk], ss[kk], dms[kk], dss[kk], inv_n, inv_nm1);
                }
                self.spatial.accumulate_grad(&d, &h, &ds, &mut dh, &mut g_centers, &mut g_v);
                let phi = cloud.feature_row(n);
                let gphi = &mut g_input[n * i_dim..(n + 1) * i_dim];
                for i in 0..i_dim {
                    gphi[i] += pooled_row_grad(phi[i], mp[i], sp[i], dmp[i], dsp[i], inv_n, inv_nm1);
                }
            }
        }
        Ok(LayerGrads {
            params: vec![g_centers, g_v, g_w],
            input: g_input,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::knn_windows;
    use crate::layers::testutil::*;

    fn oracle(layer: &AggrCompositeLayer<f64>, cloud: &PointCloud<f64>, windows: &WindowSet) -> Vec<f64> {
        let (i_dim, j_dim, k_dim) = (layer.in_features, layer.out_features, layer.spatial.out_dim());
        let w = windows.window_size() as f64;
        let mut out = vec![0.0; windows.len() * j_dim];
        for q in 0..windows.len() {
            let y = windows.outputs()[q];
            let svals: Vec<Vec<f64>> = windows
                .row(q)
                .iter()
                .map(|&n| {
                    let x = cloud.points()[n as usize];
                    layer.spatial.forward(&[[x[0] - y[0], x[1] - y[1], x[2] - y[2]]])
                })
                .collect();
            let fvals: Vec<Vec<f64>> =
                windows.row(q).iter().map(|&n| cloud.feature_row(n as usize).to_vec()).collect();
            let stats = |vals: &Vec<Vec<f64>>, dim: usize| -> Vec<f64> {
                let mut v = vec![0.0; 2 * dim];
                for c in 0..dim {
                    let mean = vals.iter().map(|r| r[c]).sum::<f64>() / w;
                    let var = vals.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / (w - 1.0);
                    v[c] = mean;
                    v[dim + c] = var.sqrt();
                }
                v
            };
            let theta = stats(&svals, k_dim);
            let eta = stats(&fvals, i_dim);
            for j in 0..j_dim {
                let mut acc = 0.0;
                for i in 0..2 * i_dim {
                    for k in 0..2 * k_dim {
                        acc += theta[k]
                            * layer.weights_w.data[(j * 2 * i_dim + i) * 2 * k_dim + k]
                            * eta[i];
                    }
                }
                out[q * j_dim + j] = acc;
            }
        }
        out
    }

    fn layer_from(v: Vec<f64>, w: Vec<f64>, k: usize, i: usize, j: usize) -> AggrCompositeLayer<f64> {
        let m = v.len() / k;
        let spatial = RbfSpatialFn::from_tensors(
            Tensor { name: "c".into(), shape: vec![m, 3], data: vec![0.0; 3 * m] },
            Tensor { name: "v".into(), shape: vec![k, m], data: v },
            0.3,
        )
        .unwrap();
        AggrCompositeLayer::from_parts(spatial, Tensor { name: "w".into(), shape: vec![j, 2 * i, 2 * k], data: w })
            .unwrap()
    }

    #[test]
    fn identical_window_has_zero_spread() {
        let layer = AggrCompositeLayer::<f64>::new(2, 2, 3, 2, 0.3, &mut rng(1)).unwrap();
        let cloud = PointCloud::new(vec![[0.1, 0.2, 0.3]; 4], vec![2.5, -1.0, 2.5, -1.0, 2.5, -1.0, 2.5, -1.0], 2)
            .unwrap();
        let windows = knn_windows(&cloud, &[[0.0; 3]], 4).unwrap();
        let (_, cache) = layer.forward(&cloud, &windows).unwrap();
        assert_eq!(&cache.theta()[2..], &[0.0, 0.0]);
        assert_eq!(cache.eta(), &[2.5, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn all_ones_weights_give_rank_one_product() {
        // K = I = 1, W_j all ones: psi = (a + b)(p + q).
        let layer = layer_from(vec![1.0], vec![1.0; 4], 1, 1, 1);
        let cloud = PointCloud::new(
            vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.2, 0.0]],
            vec![1.0, 2.0, 4.0],
            1,
        )
        .unwrap();
        let windows = knn_windows(&cloud, &[[0.0; 3]], 3).unwrap();
        let (out, cache) = layer.forward(&cloud, &windows).unwrap();
        let (a, b) = (cache.theta()[0], cache.theta()[1]);
        let (p, q) = (cache.eta()[0], cache.eta()[1]);
        assert!((out[0] - (a + b) * (p + q)).abs() < 1e-12);
        assert!((p - 7.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn matches_loop_oracle() {
        for seed in 0..5 {
            let layer = AggrCompositeLayer::<f64>::new(2, 2, 3, 2, 0.4, &mut rng(seed)).unwrap();
            let cloud = random_cloud(12, 2, seed + 3);
            let windows = random_windows(&cloud, 3, 5, seed + 4);
            let fast = layer.forward(&cloud, &windows).unwrap().0;
            let slow = oracle(&layer, &cloud, &windows);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_single_point_windows() {
        let layer = AggrCompositeLayer::<f64>::new(1, 1, 2, 1, 0.4, &mut rng(0)).unwrap();
        let cloud = random_cloud(4, 1, 0);
        let windows = random_windows(&cloud, 2, 1, 0);
        assert!(layer.forward(&cloud, &windows).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let layer = AggrCompositeLayer::<f64>::new(2, 3, 4, 2, 0.5, &mut rng(seed)).unwrap();
            let cloud = random_cloud(9, 2, seed + 7);
            let windows = random_windows(&cloud, 3, 5, seed + 8);
            assert!(gradcheck(&layer, &cloud, &windows, seed) < 1e-4);
        }
    }

    #[test]
    fn parameter_count_formula() {
        let layer = AggrCompositeLayer::<f64>::new(64, 128, 64, 16, 0.3, &mut rng(0)).unwrap();
        assert_eq!(layer.num_parameters(), 128 * 128 * 32 + 16 * 64 + 3 * 64);
    }
}
