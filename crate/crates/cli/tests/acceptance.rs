//! Acceptance suite: one `[PASS]` / `[FAIL]` line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the criteria execute in
//! order with their own timing budgets. Exits non-zero if any criterion
//! fails. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 3 8`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use compositenet_core::anomaly::{self, rotate, DetectConfig, DetectorKind, TransformationSet};
use compositenet_core::baselines::{good_describe, DEFAULT_BINS};
use compositenet_core::datasets::{Instance, LabeledDataset, ShapeKind, Split, SyntheticRecipe};
use compositenet_core::eval::{class_ranks, roc_auc, wilcoxon_one_sided, MethodResults};
use compositenet_core::geometry::{dist2, knn_windows, Point};
use compositenet_core::layers::{
    Accumulation, AggrCompositeLayer, BaselinePointConvLayer, BatchNormLayer, ConvCompositeLayer, DenseLayer,
    Parameterized, PointLayer, RbfSpatialFn,
};
use compositenet_core::network::{count_parameters, softmax, LayerKind, Network, NetworkSpec, StageSpec};
use compositenet_core::rng::StreamRng;
use compositenet_core::training::{self, cross_entropy_loss, LossKind, TrainConfig};
use compositenet_core::{PointCloud, Precision, WindowSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

fn rng(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < budget, || format!("runtime {:.1}s exceeds {:.0}s", took.as_secs_f64(), budget.as_secs_f64()))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_cloud(r: &mut StreamRng, n: usize, width: usize) -> PointCloud {
    let points = (0..n)
        .map(|_| [r.gen_range(-0.6..0.6), r.gen_range(-0.6..0.6), r.gen_range(-0.6..0.6)])
        .collect();
    let features = (0..n * width).map(|_| r.gen_range(-1.0..1.0)).collect();
    PointCloud::new(points, features, width).unwrap()
}

fn random_windows(r: &mut StreamRng, cloud: &PointCloud, q: usize, w: usize) -> WindowSet {
    let outputs: Vec<Point> = (0..q).map(|_| cloud.points()[r.gen_range(0..cloud.len())]).collect();
    knn_windows(cloud, &outputs, w).unwrap()
}

fn offset(x: &Point, y: &Point) -> [f64; 3] {
    [x[0] - y[0], x[1] - y[1], x[2] - y[2]]
}

// ---------------------------------------------------------------------------
// Loop oracles

fn gaussian(d: [f64; 3], c: &[f64], sigma: f64) -> f64 {
    let r2: f64 = (0..3).map(|a| (d[a] - c[a]).powi(2)).sum();
    (-r2 / (2.0 * sigma * sigma)).exp()
}

fn oracle_rbf(f: &RbfSpatialFn<f64>, offsets: &[[f64; 3]]) -> Vec<f64> {
    let (m, k) = (f.num_centers(), f.out_dim());
    let mut out = Vec::new();
    for d in offsets {
        for kk in 0..k {
            let mut s = 0.0;
            for mm in 0..m {
                s += f.weights_v.data[kk * m + mm] * gaussian(*d, &f.centers.data[3 * mm..3 * mm + 3], f.sigma());
            }
            out.push(s);
        }
    }
    out
}

fn oracle_conv(l: &ConvCompositeLayer<f64>, cloud: &PointCloud, w: &WindowSet) -> Vec<f64> {
    let (i_dim, j_dim, k_dim) = (l.in_features(), l.out_features(), l.spatial.out_dim());
    let mut out = Vec::new();
    for q in 0..w.len() {
        let y = w.outputs()[q];
        for j in 0..j_dim {
            let mut psi = 0.0;
            for &n in w.row(q) {
                let s = oracle_rbf(&l.spatial, &[offset(&cloud.points()[n as usize], &y)]);
                for i in 0..i_dim {
                    for k in 0..k_dim {
                        psi += cloud.feature_row(n as usize)[i] * l.weights_w.data[(j * i_dim + i) * k_dim + k] * s[k];
                    }
                }
            }
            out.push(psi);
        }
    }
    out
}

fn mean_std(rows: &[Vec<f64>], c: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn oracle_aggr(l: &AggrCompositeLayer<f64>, cloud: &PointCloud, w: &WindowSet) -> Vec<f64> {
    let (i_dim, j_dim, k_dim) = (l.in_features(), l.out_features(), l.spatial.out_dim());
    let mut out = Vec::new();
    for q in 0..w.len() {
        let y = w.outputs()[q];
        let s: Vec<Vec<f64>> = w
            .row(q)
            .iter()
            .map(|&n| oracle_rbf(&l.spatial, &[offset(&cloud.points()[n as usize], &y)]))
            .collect();
        let phi: Vec<Vec<f64>> = w.row(q).iter().map(|&n| cloud.feature_row(n as usize).to_vec()).collect();
        let mut theta = vec![0.0; 2 * k_dim];
        for k in 0..k_dim {
            (theta[k], theta[k_dim + k]) = mean_std(&s, k);
        }
        let mut eta = vec![0.0; 2 * i_dim];
        for i in 0..i_dim {
            (eta[i], eta[i_dim + i]) = mean_std(&phi, i);
        }
        for j in 0..j_dim {
            let mut psi = 0.0;
            for k in 0..2 * k_dim {
                for i in 0..2 * i_dim {
                    psi += theta[k] * l.weights_w.data[(j * 2 * i_dim + i) * 2 * k_dim + k] * eta[i];
                }
            }
            out.push(psi);
        }
    }
    out
}

fn oracle_baseline(l: &BaselinePointConvLayer<f64>, cloud: &PointCloud, w: &WindowSet) -> Vec<f64> {
    let (i_dim, j_dim, m_dim) = (l.in_features(), l.out_features(), l.num_centers());
    let mut out = Vec::new();
    for q in 0..w.len() {
        let y = w.outputs()[q];
        for j in 0..j_dim {
            let mut psi = 0.0;
            for &n in w.row(q) {
                let d = offset(&cloud.points()[n as usize], &y);
                for i in 0..i_dim {
                    let mut g = 0.0;
                    for m in 0..m_dim {
                        g += l.weights_wtilde.data[(j * i_dim + i) * m_dim + m]
                            * gaussian(d, &l.centers().data[3 * m..3 * m + 3], l.sigma());
                    }
                    psi += cloud.feature_row(n as usize)[i] * g;
                }
            }
            out.push(psi);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Finite differences

const FD_H: f64 = 1e-5;

/// Worst relative error between `analytic` and central differences of
/// `f` over every entry of every parameter tensor of `model`.
fn fd_params<M: Parameterized<f64> + Clone>(model: &M, analytic: &[Vec<f64>], f: impl Fn(&M) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for p in 0..model.params().len() {
        for e in 0..model.params()[p].len() {
            let mut plus = model.clone();
            plus.params_mut()[p].data[e] += FD_H;
            let mut minus = model.clone();
            minus.params_mut()[p].data[e] -= FD_H;
            worst = worst.max(rel_err(analytic[p][e], (f(&plus) - f(&minus)) / (2.0 * FD_H)));
        }
    }
    worst
}

fn fd_vector(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for e in 0..x.len() {
        let mut plus = x.to_vec();
        plus[e] += FD_H;
        let mut minus = x.to_vec();
        minus[e] -= FD_H;
        worst = worst.max(rel_err(analytic[e], (f(&plus) - f(&minus)) / (2.0 * FD_H)));
    }
    worst
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gradcheck_point_layer<L: PointLayer<f64> + Clone>(layer: &L, cloud: &PointCloud, w: &WindowSet, r: &mut StreamRng) -> f64 {
    let (out, cache) = layer.forward(cloud, w).unwrap();
    let coeffs: Vec<f64> = (0..out.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let grads = layer.backward(cloud, w, &cache, &coeffs).unwrap();
    let by_params = fd_params(layer, &grads.params, |l| dot(&l.forward(cloud, w).unwrap().0, &coeffs));
    let by_input = fd_vector(cloud.features(), &grads.input, |f| {
        let c = cloud.with_features(f.to_vec(), cloud.feature_width()).unwrap();
        dot(&layer.forward(&c, w).unwrap().0, &coeffs)
    });
    by_params.max(by_input)
}

fn mini_spec(kind: LayerKind) -> NetworkSpec {
    let mut spec = NetworkSpec::custom(kind, vec![StageSpec::new(3, 5, 4), StageSpec::new(4, 4, 1)], 3, 2, 3);
    spec.sigma = 0.5;
    spec
}

// ---------------------------------------------------------------------------
// Criteria

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut layer_worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, e: f64| match layer_worst.iter_mut().find(|(n, _)| n == name) {
        Some(x) => x.1 = x.1.max(e),
        None => layer_worst.push((name.to_string(), e)),
    };
    for trial in 0..4 {
        let (i, j, m, k) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
        let w = r.gen_range(2..=6);
        let cloud = random_cloud(&mut r, 10, i);
        let windows = random_windows(&mut r, &cloud, 3, w);
        let sigma = 0.4;

        let rbf = RbfSpatialFn::<f64>::new(m, k, sigma, &mut r).unwrap();
        let offsets: Vec<[f64; 3]> = (0..w).map(|_| [r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5)]).collect();
        let coeffs: Vec<f64> = (0..w * k).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (gc, gv) = rbf.backward(&offsets, &coeffs).unwrap();
        record("rbf", fd_params(&rbf, &[gc, gv], |f| dot(&f.forward(&offsets), &coeffs)));

        let conv = ConvCompositeLayer::<f64>::new(i, j, m, k, sigma, &mut r).unwrap();
        record("conv", gradcheck_point_layer(&conv, &cloud, &windows, &mut r));
        let aggr = AggrCompositeLayer::<f64>::new(i, j, m, k, sigma, &mut r).unwrap();
        record("aggr", gradcheck_point_layer(&aggr, &cloud, &windows, &mut r));
        let base = BaselinePointConvLayer::<f64>::new(i, j, m, sigma, &mut r).unwrap();
        record("baseline", gradcheck_point_layer(&base, &cloud, &windows, &mut r));

        let dense = DenseLayer::<f64>::new(i, j, true, &mut r);
        let x: Vec<f64> = (0..3 * i).map(|_| r.gen_range(-1.0..1.0)).collect();
        let coeffs: Vec<f64> = (0..3 * j).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (gp, gx) = dense.backward(&x, &coeffs).unwrap();
        record("dense", fd_params(&dense, &gp, |d| dot(&d.forward(&x).unwrap(), &coeffs)));
        record("dense", fd_vector(&x, &gx, |x| dot(&dense.forward(x).unwrap(), &coeffs)));

        let mut bn = BatchNormLayer::<f64>::new(i);
        for t in bn.params_mut() {
            for v in t.data.iter_mut() {
                *v += r.gen_range(-0.5..0.5);
            }
        }
        let x: Vec<f64> = (0..(4 + trial) * i).map(|_| r.gen_range(-1.0..1.0)).collect();
        let coeffs: Vec<f64> = (0..x.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (_, cache) = bn.forward_train(&x).unwrap();
        let (gp, gx) = bn.backward(&cache, &coeffs).unwrap();
        record("batchnorm", fd_params(&bn, &gp, |b| dot(&b.forward_train(&x).unwrap().0, &coeffs)));
        record("batchnorm", fd_vector(&x, &gx, |x| dot(&bn.forward_train(x).unwrap().0, &coeffs)));
    }

    let mut net_worst: f64 = 0.0;
    for (s, kind) in [LayerKind::ConvComposite, LayerKind::AggrComposite, LayerKind::Baseline].into_iter().enumerate() {
        let net = Network::<f64>::new(mini_spec(kind), 10 + s as u64).unwrap();
        let clouds: Vec<PointCloud> = (0..3)
            .map(|_| {
                let c = random_cloud(&mut r, 9, 1);
                c.with_features(vec![1.0; 9], 1).unwrap()
            })
            .collect();
        let labels = [0, 2, 1];
        let loss = |n: &Network<f64>| {
            let (logits, _) = n.forward_train(&clouds, 5).unwrap();
            cross_entropy_loss(&logits, &labels, 3).unwrap().0
        };
        let (logits, tape) = net.forward_train(&clouds, 5).unwrap();
        let (_, up) = cross_entropy_loss(&logits, &labels, 3).unwrap();
        let grads = net.backward(&tape, &up).unwrap();
        net_worst = net_worst.max(fd_params(&net, &grads, loss));
    }

    let layer_max = layer_worst.iter().map(|x| x.1).fold(0.0, f64::max);
    let detail = layer_worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(layer_max < 1e-4, || format!("layer gradient error {layer_max:.2e} >= 1e-4 ({detail})"))?;
    ensure(net_worst < 1e-3, || format!("end-to-end gradient error {net_worst:.2e} >= 1e-3"))?;
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!("max rel err layers {layer_max:.1e} ({detail}); network {net_worst:.1e}"))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let count = |kind: LayerKind, m: usize| -> Result<usize, String> {
        let spec = NetworkSpec::classification(kind, 64, m, 16, 40);
        let net = Network::<f32>::new(spec.clone(), 0).map_err(|e| e.to_string())?;
        let n = count_parameters(&net);
        ensure(n == spec.parameter_count(), || format!("{kind} M={m}: introspected {n} != closed form {}", spec.parameter_count()))?;
        Ok(n)
    };
    let mut notes = Vec::new();
    for kind in [LayerKind::ConvComposite, LayerKind::AggrComposite] {
        let (lo, hi) = (count(kind, 8)?, count(kind, 256)?);
        ensure(hi > lo, || format!("{kind}: count does not grow with M"))?;
        let growth = (hi - lo) as f64 / lo as f64;
        ensure(growth < 0.01, || format!("{kind}: growth {:.3}% from M=8 to M=256", growth * 100.0))?;
        notes.push(format!("{kind} {lo}->{hi} (+{:.3}%)", growth * 100.0));
    }
    let mut ratios = Vec::new();
    let mut prev = count(LayerKind::Baseline, 8)?;
    for m in [16, 32, 64] {
        let cur = count(LayerKind::Baseline, m)?;
        let ratio = cur as f64 / prev as f64;
        ensure((1.9..=2.1).contains(&ratio), || format!("baseline M={m}: ratio {ratio:.3}"))?;
        ratios.push(format!("{ratio:.3}"));
        prev = cur;
    }
    notes.push(format!("baseline doubling ratios {}", ratios.join("/")));
    within_budget(start, Duration::from_secs(1))?;
    Ok(notes.join("; "))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut r = rng(3);
    let mut worst = [0.0f64; 4];
    for _ in 0..50 {
        let (i, j, m, k) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=5), r.gen_range(1..=4));
        let w = r.gen_range(2..=8);
        let n = r.gen_range(4..=14);
        let cloud = random_cloud(&mut r, n, i);
        let q = r.gen_range(1..=5);
        let windows = random_windows(&mut r, &cloud, q, w);
        let sigma = r.gen_range(0.2..0.6);

        let rbf = RbfSpatialFn::<f64>::new(m, k, sigma, &mut r).unwrap();
        let offsets: Vec<[f64; 3]> = (0..w).map(|_| [r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5)]).collect();
        worst[0] = worst[0].max(max_abs_diff(&rbf.forward(&offsets), &oracle_rbf(&rbf, &offsets)));
        let conv = ConvCompositeLayer::<f64>::new(i, j, m, k, sigma, &mut r).unwrap();
        worst[1] = worst[1].max(max_abs_diff(&conv.forward(&cloud, &windows).unwrap().0, &oracle_conv(&conv, &cloud, &windows)));
        let aggr = AggrCompositeLayer::<f64>::new(i, j, m, k, sigma, &mut r).unwrap();
        worst[2] = worst[2].max(max_abs_diff(&aggr.forward(&cloud, &windows).unwrap().0, &oracle_aggr(&aggr, &cloud, &windows)));
        let base = BaselinePointConvLayer::<f64>::new(i, j, m, sigma, &mut r).unwrap();
        worst[3] = worst[3].max(max_abs_diff(&base.forward(&cloud, &windows).unwrap().0, &oracle_baseline(&base, &cloud, &windows)));
    }
    let names = ["rbf", "conv", "aggr", "baseline"];
    for (n, w) in names.iter().zip(worst) {
        ensure(w < 1e-12, || format!("{n}: max deviation {w:.2e} from loop oracle"))?;
    }
    within_budget(start, Duration::from_secs(10))?;
    Ok(format!(
        "50 instances; max |diff| {}",
        names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ")
    ))
}

#[derive(Clone)]
enum AnyLayer {
    Conv(ConvCompositeLayer<f64>),
    Aggr(AggrCompositeLayer<f64>),
    Base(BaselinePointConvLayer<f64>),
}

impl AnyLayer {
    fn forward(&self, c: &PointCloud, w: &WindowSet) -> Vec<f64> {
        match self {
            AnyLayer::Conv(l) => l.forward(c, w).unwrap().0,
            AnyLayer::Aggr(l) => l.forward(c, w).unwrap().0,
            AnyLayer::Base(l) => l.forward(c, w).unwrap().0,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            AnyLayer::Conv(_) => "conv",
            AnyLayer::Aggr(_) => "aggr",
            AnyLayer::Base(_) => "baseline",
        }
    }
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut r = rng(4);
    let (mut trans, mut perm, mut lin, mut iso, mut soft) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let i = r.gen_range(1..=3);
        let cloud = random_cloud(&mut r, 16, i);
        let w = r.gen_range(3..=8);
        let windows = random_windows(&mut r, &cloud, 4, w);
        let layers = [
            AnyLayer::Conv(ConvCompositeLayer::new(i, 3, 4, 3, 0.3, &mut r).unwrap()),
            AnyLayer::Aggr(AggrCompositeLayer::new(i, 3, 4, 3, 0.3, &mut r).unwrap()),
            AnyLayer::Base(BaselinePointConvLayer::new(i, 3, 4, 0.3, &mut r).unwrap()),
        ];

        let t = [r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0)];
        let shift = |p: &Point| [p[0] + t[0], p[1] + t[1], p[2] + t[2]];
        let moved = cloud.with_points(cloud.points().iter().map(shift).collect()).unwrap();
        let moved_w = WindowSet::new(windows.outputs().iter().map(shift).collect(), windows.indices().to_vec(), windows.window_size()).unwrap();

        let mut shuffled = windows.indices().to_vec();
        for row in shuffled.chunks_mut(windows.window_size()) {
            row.shuffle(&mut r);
        }
        let shuffled = WindowSet::new(windows.outputs().to_vec(), shuffled, windows.window_size()).unwrap();
        let sorted_a = Accumulation::Sorted.prepare(&windows);
        let sorted_b = Accumulation::Sorted.prepare(&shuffled);

        let alpha = r.gen_range(-2.0..2.0);
        let f1: Vec<f64> = (0..cloud.features().len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let f2: Vec<f64> = (0..cloud.features().len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| alpha * a + b).collect();
        let c1 = cloud.with_features(f1, i).unwrap();
        let c2 = cloud.with_features(f2, i).unwrap();
        let cm = cloud.with_features(mix, i).unwrap();

        for l in &layers {
            trans = trans.max(max_abs_diff(&l.forward(&cloud, &windows), &l.forward(&moved, &moved_w)));
            perm = perm.max(max_abs_diff(&l.forward(&cloud, &sorted_a), &l.forward(&cloud, &sorted_b)));
            if !matches!(l, AnyLayer::Aggr(_)) {
                let lhs = l.forward(&cm, &windows);
                let rhs: Vec<f64> =
                    l.forward(&c1, &windows).iter().zip(l.forward(&c2, &windows)).map(|(a, b)| alpha * a + b).collect();
                lin = lin.max(max_abs_diff(&lhs, &rhs));
            }
            let _ = l.name();
        }

        let axis = {
            let v: [f64; 3] = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            let n = dist2(&v, &[0.0; 3]).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        };
        let rotated = rotate(&cloud, r.gen_range(-360.0..360.0), axis).map_err(|e| e.to_string())?;
        for a in 0..cloud.len() {
            for b in 0..cloud.len() {
                let before = dist2(&cloud.points()[a], &cloud.points()[b]).sqrt();
                let after = dist2(&rotated.points()[a], &rotated.points()[b]).sqrt();
                iso = iso.max((before - after).abs());
            }
            let before = dist2(&cloud.points()[a], &[0.0; 3]).sqrt();
            let after = dist2(&rotated.points()[a], &[0.0; 3]).sqrt();
            iso = iso.max((before - after).abs());
        }

        let scale = 10f64.powi(r.gen_range(-2..=3));
        let logits: Vec<f64> = (0..r.gen_range(2..=40)).map(|_| r.gen_range(-1.0..1.0) * scale).collect();
        soft = soft.max((softmax(&logits).iter().sum::<f64>() - 1.0).abs());
    }
    let net = Network::<f64>::new(mini_spec(LayerKind::AggrComposite), 4).unwrap();
    let clouds: Vec<PointCloud> = (0..5).map(|_| random_cloud(&mut r, 12, 1).with_features(vec![1.0; 12], 1).unwrap()).collect();
    for row in net.forward_eval(&clouds, 1).unwrap().chunks(3) {
        let p = softmax(row);
        soft = soft.max((p.iter().sum::<f64>() - 1.0).abs());
        ensure(p.iter().all(|v| (0.0..=1.0).contains(v)), || "softmax entry outside [0, 1]".into())?;
    }

    ensure(trans < 1e-9, || format!("translation deviation {trans:.2e}"))?;
    ensure(perm < 1e-12, || format!("window permutation deviation {perm:.2e}"))?;
    ensure(lin < 1e-10, || format!("feature linearity deviation {lin:.2e}"))?;
    ensure(iso < 1e-9, || format!("rotation isometry deviation {iso:.2e}"))?;
    ensure(soft < 1e-9, || format!("softmax normalization deviation {soft:.2e}"))?;
    within_budget(start, Duration::from_secs(10))?;
    Ok(format!(
        "translation {trans:.1e}, permutation {perm:.1e}, linearity {lin:.1e}, isometry {iso:.1e}, softmax {soft:.1e}"
    ))
}

/// `counts[c]` instances of class `c` from a balanced recipe, keeping ids.
fn take_per_class(ds: &LabeledDataset, counts: &[usize], split: Split) -> LabeledDataset {
    let mut seen = vec![0; counts.len()];
    let instances: Vec<Instance> = ds
        .instances()
        .iter()
        .filter(|inst| {
            seen[inst.label] += 1;
            seen[inst.label] <= counts[inst.label]
        })
        .cloned()
        .collect();
    LabeledDataset::new(instances, ds.class_names().to_vec(), Some(split)).unwrap()
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let kinds = vec![ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Cylinder];
    let recipe = |per_class| SyntheticRecipe { kinds: kinds.clone(), per_class, n_points: 1024, jitter: 0.01, seed: 0 };
    let train_set = take_per_class(&recipe(67).build_offset(0).map_err(|e| e.to_string())?, &[67, 67, 66], Split::Train);
    let test_set = take_per_class(&recipe(34).build_offset(67).map_err(|e| e.to_string())?, &[34, 33, 33], Split::Test);
    ensure(train_set.len() == 200 && test_set.len() == 100, || "dataset sizes".into())?;

    let seed = 0;
    let spec = NetworkSpec::classification(LayerKind::ConvComposite, 8, 16, 8, 3);
    let mut net = Network::<f32>::new(spec, seed).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: 30, seed, loss_kind: LossKind::CrossEntropy, precision: Precision::F32, ..TrainConfig::default() };
    let report = training::train(&mut net, &train_set, &cfg).map_err(|e| e.to_string())?;
    let mut correct = 0;
    for inst in test_set.instances() {
        let logits = net.forward_eval(std::slice::from_ref(&inst.cloud), anomaly::eval_seed(seed, &inst.id)).map_err(|e| e.to_string())?;
        if compositenet_core::network::argmax(&logits) == inst.label {
            correct += 1;
        }
    }
    let oa = correct as f64 / test_set.len() as f64;
    let last = report.log.epochs.last().map(|e| e.loss).unwrap_or(f64::NAN);
    ensure(oa >= 0.90, || format!("OA {oa:.3} < 0.90 (final loss {last:.4})"))?;
    within_budget(start, Duration::from_secs(600))?;
    Ok(format!("conv J0=8 M=16 K=8, 30 epochs: OA {oa:.3}, final loss {last:.4}, {:.0}s", start.elapsed().as_secs_f64()))
}

/// Epochs for the self-supervised run: the most that fit the runtime
/// budget on a single core.
const C6_EPOCHS: usize = 10;

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let seed = 0;
    let recipe = |kind, per_class| SyntheticRecipe { kinds: vec![kind], per_class, n_points: 1024, jitter: 0.01, seed };
    let train = recipe(ShapeKind::Sphere, 200).build_offset(0).map_err(|e| e.to_string())?;
    let mut instances = recipe(ShapeKind::Sphere, 50).build_offset(200).map_err(|e| e.to_string())?.instances().to_vec();
    instances.extend(
        recipe(ShapeKind::Cube, 50)
            .build_offset(0)
            .map_err(|e| e.to_string())?
            .instances()
            .iter()
            .map(|i| Instance { label: 1, ..i.clone() }),
    );
    let test = LabeledDataset::new(instances, vec!["sphere".into(), "cube".into()], Some(Split::Test)).map_err(|e| e.to_string())?;

    let mut cfg = DetectConfig::new(DetectorKind::SelfSupervised);
    cfg.layer_kind = LayerKind::AggrComposite;
    (cfg.j0, cfg.m, cfg.k) = (8, 32, 8);
    cfg.transformations = TransformationSet::default();
    cfg.epochs = C6_EPOCHS;
    cfg.seed = seed;
    ensure(cfg.transformations.len() == 8, || "expected 8 rotations".into())?;
    let ss = anomaly::detect(&train, &test, &cfg).map_err(|e| e.to_string())?;
    let ss_auc = ss.scores.auc().map_err(|e| e.to_string())?;

    let mut good = DetectConfig::new(DetectorKind::GoodIfor);
    good.seed = seed;
    let gi = anomaly::detect(&train, &test, &good).map_err(|e| e.to_string())?;
    let gi_auc = gi.scores.auc().map_err(|e| e.to_string())?;

    let detail = format!(
        "self-supervised aggr J0=8 M=32 K=8 N=8, {C6_EPOCHS} epochs: AUC {ss_auc:.3}; GOOD+IFOR AUC {gi_auc:.3}; {:.0}s",
        start.elapsed().as_secs_f64()
    );
    ensure(ss_auc >= 0.85, || format!("{detail} (self-supervised AUC below 0.85)"))?;
    ensure(gi_auc > 0.5, || format!("{detail} (GOOD+IFOR AUC not above 0.5)"))?;
    within_budget(start, Duration::from_secs(1200))?;
    Ok(detail)
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut r = rng(7);
    let ts = TransformationSet::default();
    let (mut lo, mut hi, mut dev) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    let mut evaluations = 0;
    for net_seed in 0..10 {
        let spec = NetworkSpec::custom(
            LayerKind::AggrComposite,
            vec![StageSpec::new(4, 8, 12), StageSpec::new(6, 8, 1)],
            6,
            3,
            ts.len(),
        );
        let net = Network::<f64>::new(spec, net_seed).unwrap();
        for _ in 0..100 {
            let cloud = random_cloud(&mut r, 40, 1).with_features(vec![1.0; 40], 1).unwrap();
            let seed = r.gen();
            let s = anomaly::normality_score(&net, &cloud, &ts, seed).map_err(|e| e.to_string())?;
            let mut total = 0.0;
            for n in 0..ts.len() {
                let logits = net.forward_eval(&[ts.apply(n, &cloud).unwrap()], seed).unwrap();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                total += (logits[n] - m).exp() / z;
            }
            dev = dev.max((s - total / ts.len() as f64).abs());
            lo = lo.min(s);
            hi = hi.max(s);
            evaluations += 1;
        }
    }
    ensure(lo >= 0.0 && hi <= 1.0, || format!("score range [{lo}, {hi}] leaves [0, 1]"))?;
    ensure(dev < 1e-12, || format!("deviation from loop oracle {dev:.2e}"))?;
    Ok(format!(
        "{evaluations} evaluations in [{lo:.4}, {hi:.4}], oracle deviation {dev:.1e}, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let mut r = rng(8);
    for trial in 0..100 {
        let n = r.gen_range(2..=50);
        let levels = if trial % 2 == 0 { 6 } else { 1000 };
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 / 4.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let (mut twice, mut pairs) = (0u64, 0u64);
        for (sa, _) in scores.iter().zip(&labels).filter(|x| *x.1) {
            for (sn, _) in scores.iter().zip(&labels).filter(|x| !*x.1) {
                twice += if sa > sn { 2 } else if sa == sn { 1 } else { 0 };
                pairs += 1;
            }
        }
        let brute = twice as f64 / (2 * pairs) as f64;
        let auc = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        ensure(auc == brute, || format!("trial {trial}: AUC {auc} != brute force {brute}"))?;
    }

    let a = [0.9, 0.8, 0.85, 0.7, 0.95];
    let b = [0.5, 0.6, 0.4, 0.65, 0.3];
    let w = wilcoxon_one_sided(&a, &b).map_err(|e| e.to_string())?;
    ensure(w.p_value == 0.03125, || format!("Wilcoxon p {} != 0.03125", w.p_value))?;

    for _ in 0..50 {
        let m = r.gen_range(2..=7);
        let c = r.gen_range(1..=10);
        let classes: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
        let results: Vec<MethodResults> = (0..m)
            .map(|j| MethodResults::new(format!("m{j}"), classes.clone(), (0..c).map(|_| r.gen_range(0..4) as f64 / 4.0).collect()).unwrap())
            .collect();
        let ranks = class_ranks(&results).map_err(|e| e.to_string())?;
        let want = (m * (m + 1)) as f64 / 2.0;
        for row in ranks {
            let sum: f64 = row.iter().sum();
            ensure(sum == want, || format!("rank sum {sum} != {want}"))?;
        }
    }
    within_budget(start, Duration::from_secs(5))?;
    Ok("100 AUC sets exact; n=5 p = 0.03125; rank sums exact on 50 tables".into())
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let mut r = rng(9);
    for trial in 0..100 {
        let n = r.gen_range(20..300);
        let stretch = [r.gen_range(0.5..2.0), r.gen_range(0.5..2.0), r.gen_range(0.5..2.0)];
        let points: Vec<Point> = (0..n)
            .map(|_| [r.gen_range(-1.0..1.0) * stretch[0], r.gen_range(-1.0..1.0) * stretch[1], r.gen_range(-1.0..1.0) * stretch[2]])
            .collect();
        let cloud = PointCloud::<f64>::with_constant_features(points.clone()).unwrap();
        let d = good_describe(&cloud, DEFAULT_BINS).map_err(|e| e.to_string())?;
        ensure(d.vector.len() == 75, || format!("descriptor length {}", d.vector.len()))?;
        for p in 0..3 {
            let total: f64 = d.plane(p).iter().sum();
            ensure(total == n as f64, || format!("trial {trial}: plane {p} sums to {total}, expected {n}"))?;
        }
        let t = [r.gen_range(-10.0..10.0), r.gen_range(-10.0..10.0), r.gen_range(-10.0..10.0)];
        let s = r.gen_range(0.1..10.0);
        let moved = PointCloud::<f64>::with_constant_features(points.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect()).unwrap();
        let scaled = PointCloud::<f64>::with_constant_features(points.iter().map(|p| [p[0] * s, p[1] * s, p[2] * s]).collect()).unwrap();
        ensure(good_describe(&moved, DEFAULT_BINS).unwrap() == d, || format!("trial {trial}: translation changed the descriptor"))?;
        ensure(good_describe(&scaled, DEFAULT_BINS).unwrap() == d, || format!("trial {trial}: scaling changed the descriptor"))?;
    }
    within_budget(start, Duration::from_secs(5))?;
    Ok("100 clouds: length 75, plane sums |P|, translation and scale invariant".into())
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_compositenet"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
}

fn compare_dirs(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let other = std::fs::read_dir(b).map_err(|e| e.to_string())?.count();
    ensure(names.len() == other, || format!("{} vs {other} output files", names.len()))?;
    for n in &names {
        let x = std::fs::read(a.join(n)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(n)).map_err(|e| e.to_string())?;
        ensure(x == y, || format!("{} differs between runs", n.to_string_lossy()))?;
    }
    Ok(names.len())
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let common = ["--seed", "10", "--accumulation", "sorted", "--points", "128", "--output_dir", "out"];
    let runs: [(&str, Vec<&str>); 3] = [
        (
            "train",
            vec!["train", "--j0", "4", "--m", "4", "--k", "4", "--epochs", "2", "--shapes", "sphere,cube", "--train_per_class", "6", "--test_per_class", "3"],
        ),
        (
            "detect",
            vec!["detect", "--j0", "4", "--m", "4", "--k", "4", "--epochs", "1", "--angles", "0,90,180,270", "--train_count", "8", "--test_normal", "4", "--test_anomalous", "4"],
        ),
        (
            "detect_good",
            vec!["detect", "--detector", "good_ifor", "--train_count", "30", "--test_normal", "10", "--test_anomalous", "10"],
        ),
    ];
    let mut files = 0;
    for (name, args) in &runs {
        let args: Vec<&str> = args.iter().chain(common.iter()).copied().collect();
        let a = tmp.path().join(format!("{name}_a"));
        let b = tmp.path().join(format!("{name}_b"));
        run_cli(&a, &args)?;
        run_cli(&b, &args)?;
        files += compare_dirs(&a.join("out"), &b.join("out"))?;
    }
    Ok(format!("train, detect and GOOD+IFOR runs repeated: {files} files byte-identical"))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "gradient correctness", criterion_1),
        (2, "parameter counts", criterion_2),
        (3, "loop-oracle equivalence", criterion_3),
        (4, "invariance suite", criterion_4),
        (5, "desk-scale classification", criterion_5),
        (6, "desk-scale anomaly detection", criterion_6),
        (7, "normality-score contract", criterion_7),
        (8, "evaluation oracles", criterion_8),
        (9, "GOOD invariants", criterion_9),
        (10, "determinism", criterion_10),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        match run() {
            Ok(detail) => println!("[PASS] {id}. {name}: {detail}"),
            Err(why) => {
                failures += 1;
                println!("[FAIL] {id}. {name}: {why}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
