//! GOOD global descriptor and Isolation Forest, the shallow anomaly
//! detection baseline.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::real::Real;
use crate::rng::{self, stream, StreamRng};

pub const DEFAULT_BINS: usize = 5;
pub const DEFAULT_TREES: usize = 100;
pub const DEFAULT_SUBSAMPLE: usize = 256;

/// Occupancy histograms of a cloud projected onto the three planes of its
/// PCA frame: `3 * bins^2` counts, planes in the order (1-2), (1-3), (2-3),
/// each grid row-major with rows along the plane's first axis. A grid starts
/// at the lower corner of the projected bounding box and its square cells
/// span the box's longer side, so the aspect ratio of the shape is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct GoodDescriptor {
    pub bins: usize,
    pub vector: Vec<f64>,
}

impl GoodDescriptor {
    pub fn plane(&self, p: usize) -> &[f64] {
        let b = self.bins * self.bins;
        &self.vector[p * b..(p + 1) * b]
    }
}

/// Coordinates of `points` in their PCA frame: centered, axes by descending
/// eigenvalue, each axis oriented so the third moment is non-negative.
pub fn pca_frame(points: &[Point]) -> Result<Vec<[f64; 3]>> {
    if points.len() < 3 {
        return Err(Error::DegeneratePca);
    }
    let n = points.len() as f64;
    let mut mean = Vector3::zeros();
    for p in points {
        mean += Vector3::from(*p);
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::from(*p) - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    if !(top > 0.0) || eig.eigenvalues[order[1]] <= 1e-12 * top {
        return Err(Error::DegeneratePca);
    }
    let axes: Vec<Vector3<f64>> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    let mut coords: Vec<[f64; 3]> = points
        .iter()
        .map(|p| {
            let d = Vector3::from(*p) - mean;
            [axes[0].dot(&d), axes[1].dot(&d), axes[2].dot(&d)]
        })
        .collect();
    for a in 0..3 {
        let m3: f64 = coords.iter().map(|c| c[a].powi(3)).sum();
        if m3 < 0.0 {
            for c in &mut coords {
                c[a] = -c[a];
            }
        }
    }
    Ok(coords)
}

fn bin_of(x: f64, lo: f64, width: f64, bins: usize) -> usize {
    if width <= 0.0 {
        return 0;
    }
    (((x - lo) / width * bins as f64) as usize).min(bins - 1)
}

/// GOOD descriptor with an `n x n` grid per plane.
pub fn good_describe<T: Real>(cloud: &PointCloud<T>, bins: usize) -> Result<GoodDescriptor> {
    if bins == 0 {
        return Err(Error::InvalidArgument("GOOD needs at least one bin per axis".into()));
    }
    let coords = pca_frame(cloud.points())?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in &coords {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let nn = bins * bins;
    let mut vector = vec![0.0; 3 * nn];
    for (p, (u, v)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
        // Square cells sized by the longer side of the plane's bounding box,
        // widened slightly so the extreme point bins inside.
        let side = (hi[u] - lo[u]).max(hi[v] - lo[v]) * (1.0 + 1e-9);
        for c in &coords {
            vector[p * nn + bin_of(c[u], lo[u], side, bins) * bins + bin_of(c[v], lo[v], side, bins)] += 1.0;
        }
    }
    Ok(GoodDescriptor { bins, vector })
}

/// Descriptors as CSV: `instance_id,d0,...`.
pub fn descriptors_csv(rows: &[(&str, &GoodDescriptor)]) -> String {
    let dims = rows.first().map_or(0, |(_, d)| d.vector.len());
    let mut out = String::from("instance_id");
    for i in 0..dims {
        let _ = write!(out, ",d{i}");
    }
    out.push('\n');
    for (id, d) in rows {
        out.push_str(id);
        for v in &d.vector {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_descriptors_csv(path: &Path, rows: &[(&str, &GoodDescriptor)]) -> Result<()> {
    std::fs::write(path, descriptors_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Harmonic number H(k); summed exactly for small k.
fn harmonic(k: usize) -> f64 {
    if k <= 4096 {
        (1..=k).rev().map(|i| 1.0 / i as f64).sum()
    } else {
        let x = k as f64;
        x.ln() + 0.577_215_664_901_532_9 + 1.0 / (2.0 * x) - 1.0 / (12.0 * x * x)
    }
}

/// Mean path length of an unsuccessful search in a binary search tree of
/// `m` items: c(m) = 2 H(m-1) - 2 (m-1) / m, with c(0) = c(1) = 0.
pub fn average_path_length(m: usize) -> f64 {
    if m <= 1 {
        return 0.0;
    }
    2.0 * harmonic(m - 1) - 2.0 * (m - 1) as f64 / m as f64
}

/// s = 2^(-E[h] / c(psi)).
pub fn anomaly_score(mean_path: f64, subsample: usize) -> f64 {
    let c = average_path_length(subsample);
    if c == 0.0 {
        return 0.5;
    }
    2f64.powf(-mean_path / c)
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf { size: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// One isolation tree, nodes stored in an arena with the root at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolationTree {
    nodes: Vec<Node>,
}

impl IsolationTree {
    fn grow(data: &[Vec<f64>], rows: Vec<usize>, height_limit: usize, rng: &mut StreamRng) -> Self {
        let mut tree = IsolationTree { nodes: Vec::new() };
        tree.build(data, rows, 0, height_limit, rng);
        tree
    }

    fn build(&mut self, data: &[Vec<f64>], rows: Vec<usize>, depth: usize, limit: usize, rng: &mut StreamRng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { size: rows.len() });
        if depth >= limit || rows.len() <= 1 {
            return id;
        }
        let dims = data[rows[0]].len();
        let ranges: Vec<(usize, f64, f64)> = (0..dims)
            .filter_map(|f| {
                let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                    (lo.min(data[r][f]), hi.max(data[r][f]))
                });
                (hi > lo).then_some((f, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return id;
        }
        let (feature, lo, hi) = ranges[rng.gen_range(0..ranges.len())];
        let threshold = rng.gen_range(lo..hi);
        let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| data[i][feature] < threshold);
        let left = self.build(data, l, depth + 1, limit, rng);
        let right = self.build(data, r, depth + 1, limit, rng);
        self.nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }

    /// Path length of `x`: edges traversed plus c(size) at the leaf.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[node] {
                Node::Leaf { size } => return depth + average_path_length(size),
                Node::Split { feature, threshold, left, right } => {
                    node = if x[feature] < threshold { left } else { right };
                    depth += 1.0;
                }
            }
        }
    }

    pub fn height(&self) -> usize {
        fn walk(nodes: &[Node], n: usize) -> usize {
            match nodes[n] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn is_leaf(&self) -> bool {
        self.nodes.len() == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IforConfig {
    pub trees: usize,
    /// Capped at the number of training vectors.
    pub subsample: usize,
    pub seed: u64,
}

impl Default for IforConfig {
    fn default() -> Self {
        Self {
            trees: DEFAULT_TREES,
            subsample: DEFAULT_SUBSAMPLE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationForest {
    trees: Vec<IsolationTree>,
    subsample: usize,
    dims: usize,
}

impl IsolationForest {
    pub fn trees(&self) -> &[IsolationTree] {
        &self.trees
    }

    pub fn subsample(&self) -> usize {
        self.subsample
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Height limit ceil(log2 psi).
    pub fn height_limit(&self) -> usize {
        height_limit(self.subsample)
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        ifor_score(self, x)
    }
}

fn height_limit(psi: usize) -> usize {
    (psi as f64).log2().ceil() as usize
}

/// Fit `trees` isolation trees, each on its own `subsample`-point draw
/// without replacement. Tree `t` uses the `ifor` substream indexed by `t`.
pub fn ifor_fit(vectors: &[Vec<f64>], config: &IforConfig) -> Result<IsolationForest> {
    if vectors.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "isolation forest needs at least 2 vectors, got {}",
            vectors.len()
        )));
    }
    if config.trees == 0 || config.subsample < 2 {
        return Err(Error::InvalidArgument("isolation forest needs trees >= 1 and subsample >= 2".into()));
    }
    let dims = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dims) {
        return Err(Error::mismatch("vector dimension", dims, v.len()));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("isolation forest input"));
    }
    let psi = config.subsample.min(vectors.len());
    let limit = height_limit(psi);
    let trees = (0..config.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::substream_indexed(config.seed, stream::IFOR, t as u64);
            let rows = index::sample(&mut rng, vectors.len(), psi).into_vec();
            IsolationTree::grow(vectors, rows, limit, &mut rng)
        })
        .collect();
    Ok(IsolationForest { trees, subsample: psi, dims })
}

/// Anomaly score in (0, 1); higher is more anomalous.
pub fn ifor_score(forest: &IsolationForest, x: &[f64]) -> Result<f64> {
    if x.len() != forest.dims {
        return Err(Error::mismatch("vector dimension", forest.dims, x.len()));
    }
    let mean = forest.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / forest.trees.len() as f64;
    Ok(anomaly_score(mean, forest.subsample))
}

/// GOOD descriptors of a training set of normal clouds fed to an
/// Isolation Forest.
#[derive(Debug, Clone)]
pub struct GoodIfor {
    pub bins: usize,
    pub forest: IsolationForest,
}

impl GoodIfor {
    pub fn fit<T: Real>(normals: &[&PointCloud<T>], bins: usize, config: &IforConfig) -> Result<Self> {
        let descs = normals
            .par_iter()
            .map(|c| good_describe(*c, bins).map(|d| d.vector))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            bins,
            forest: ifor_fit(&descs, config)?,
        })
    }

    pub fn score<T: Real>(&self, cloud: &PointCloud<T>) -> Result<f64> {
        ifor_score(&self.forest, &good_describe(cloud, self.bins)?.vector)
    }
}
