//! Point clouds, nearest-neighbor windows and output-point sampling.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{self, StreamRng};

pub type Point = [f64; 3];

/// `N` points in 3D with an `N x I` feature matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T = f64> {
    points: Vec<Point>,
    features: Vec<T>,
    feature_width: usize,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Point>, features: Vec<T>, feature_width: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if features.len() != points.len() * feature_width {
            return Err(Error::mismatch(
                "feature matrix size",
                points.len() * feature_width,
                features.len(),
            ));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point coordinates"));
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("point features"));
        }
        Ok(Self {
            points,
            features,
            feature_width,
        })
    }

    /// Cloud with the constant feature `1` on every point.
    pub fn with_constant_features(points: Vec<Point>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![T::one(); n], 1)
    }

    pub(crate) fn from_parts_unchecked(
        points: Vec<Point>,
        features: Vec<T>,
        feature_width: usize,
    ) -> Self {
        debug_assert_eq!(features.len(), points.len() * feature_width);
        Self {
            points,
            features,
            feature_width,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn feature_row(&self, i: usize) -> &[T] {
        &self.features[i * self.feature_width..(i + 1) * self.feature_width]
    }

    pub fn into_parts(self) -> (Vec<Point>, Vec<T>, usize) {
        (self.points, self.features, self.feature_width)
    }

    /// Same cloud with features replaced.
    pub fn with_features(&self, features: Vec<T>, feature_width: usize) -> Result<Self> {
        Self::new(self.points.clone(), features, feature_width)
    }

    /// Same cloud with points replaced (features untouched).
    pub fn with_points(&self, points: Vec<Point>) -> Result<Self> {
        if points.len() != self.points.len() {
            return Err(Error::mismatch("point count", self.points.len(), points.len()));
        }
        Self::new(points, self.features.clone(), self.feature_width)
    }

    /// Convert the feature matrix to another scalar type.
    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        PointCloud {
            points: self.points.clone(),
            features: self.features.iter().map(|&f| U::of(f.as_f64())).collect(),
            feature_width: self.feature_width,
        }
    }

    pub fn centroid(&self) -> Point {
        centroid(&self.points)
    }
}

pub(crate) fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for d in 0..3 {
            c[d] += p[d];
        }
    }
    c.map(|v| v / n)
}

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// For each output point, the indices of its `window_size` nearest input points.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    outputs: Vec<Point>,
    neighbor_indices: Vec<u32>,
    window_size: usize,
}

impl WindowSet {
    pub fn new(outputs: Vec<Point>, neighbor_indices: Vec<u32>, window_size: usize) -> Result<Self> {
        if outputs.is_empty() {
            return Err(Error::InvalidArgument("window set needs at least one output".into()));
        }
        if window_size == 0 {
            return Err(Error::InvalidArgument("window_size must be positive".into()));
        }
        if neighbor_indices.len() != outputs.len() * window_size {
            return Err(Error::mismatch(
                "window index matrix size",
                outputs.len() * window_size,
                neighbor_indices.len(),
            ));
        }
        Ok(Self {
            outputs,
            neighbor_indices,
            window_size,
        })
    }

    pub fn outputs(&self) -> &[Point] {
        &self.outputs
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn row(&self, q: usize) -> &[u32] {
        &self.neighbor_indices[q * self.window_size..(q + 1) * self.window_size]
    }

    pub fn indices(&self) -> &[u32] {
        &self.neighbor_indices
    }

    /// Check that every index addresses a point of a cloud of size `n`.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        match self.neighbor_indices.iter().find(|&&i| i as usize >= n) {
            Some(&bad) => Err(Error::InvalidArgument(format!(
                "window index {bad} out of range for cloud of {n} points"
            ))),
            None => Ok(()),
        }
    }

    /// Copy with every window row sorted by input index.
    pub fn sorted(&self) -> WindowSet {
        let mut idx = self.neighbor_indices.clone();
        for row in idx.chunks_mut(self.window_size) {
            row.sort_unstable();
        }
        WindowSet {
            outputs: self.outputs.clone(),
            neighbor_indices: idx,
            window_size: self.window_size,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WindowOptions {
    /// Drop the input point coinciding with the output point (distance 0).
    pub exclude_center: bool,
}

/// Keeps the `cap` smallest `(dist2, index)` pairs in ascending order.
struct NearestBuffer {
    cap: usize,
    items: Vec<(f64, u32)>,
}

impl NearestBuffer {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            items: Vec::with_capacity(cap + 1),
        }
    }

    fn clear(&mut self) {
        self.items.clear();
    }

    /// Ordered by distance, then index, so the result does not depend on
    /// the order candidates are offered in.
    #[inline]
    fn offer(&mut self, d: f64, idx: u32) {
        if self.items.len() == self.cap {
            let last = self.items[self.cap - 1];
            if (d, idx) >= last {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|&e| e < (d, idx));
        self.items.insert(pos, (d, idx));
    }

    fn full(&self) -> bool {
        self.items.len() == self.cap
    }

    fn worst(&self) -> f64 {
        self.items.last().map_or(f64::INFINITY, |e| e.0)
    }
}

/// Clouds smaller than this are searched by a plain scan.
const GRID_MIN_POINTS: usize = 256;

/// Uniform bucket grid over the bounding box for exact KNN queries.
struct Grid {
    lo: Point,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    order: Vec<u32>,
}

impl Grid {
    fn build(points: &[Point]) -> Option<Grid> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        if !(extent > 0.0 && extent.is_finite()) {
            return None;
        }
        let per_axis = ((points.len() as f64 / 2.0).cbrt().ceil() as usize).max(1);
        let cell = extent / per_axis as f64;
        let mut dims = [1; 3];
        for a in 0..3 {
            dims[a] = ((hi[a] - lo[a]) / cell).floor() as usize + 1;
        }
        let mut grid = Grid {
            lo,
            cell,
            dims,
            starts: vec![0; dims[0] * dims[1] * dims[2] + 1],
            order: vec![0; points.len()],
        };
        let ids: Vec<usize> = points.iter().map(|p| grid.flat(grid.coords(p))).collect();
        for &c in &ids {
            grid.starts[c + 1] += 1;
        }
        for c in 0..grid.starts.len() - 1 {
            grid.starts[c + 1] += grid.starts[c];
        }
        let mut fill = grid.starts.clone();
        for (i, &c) in ids.iter().enumerate() {
            grid.order[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        Some(grid)
    }

    fn coords(&self, p: &Point) -> [usize; 3] {
        let mut c = [0; 3];
        for a in 0..3 {
            let v = ((p[a] - self.lo[a]) / self.cell).floor();
            c[a] = if v <= 0.0 { 0 } else { (v as usize).min(self.dims[a] - 1) };
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// Offer points ring by ring around the query cell until no unvisited
    /// cell can hold a point closer than the current worst candidate.
    fn query(&self, points: &[Point], y: &Point, buf: &mut NearestBuffer) {
        let c = self.coords(y);
        let max_r = (0..3).map(|a| c[a].max(self.dims[a] - 1 - c[a])).max().unwrap_or(0);
        for r in 0..=max_r {
            let lo: Vec<usize> = (0..3).map(|a| c[a].saturating_sub(r)).collect();
            let hi: Vec<usize> = (0..3).map(|a| (c[a] + r).min(self.dims[a] - 1)).collect();
            for x in lo[0]..=hi[0] {
                for yy in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        let ring = x.abs_diff(c[0]).max(yy.abs_diff(c[1])).max(z.abs_diff(c[2]));
                        if ring != r {
                            continue;
                        }
                        let f = self.flat([x, yy, z]);
                        for &i in &self.order[self.starts[f] as usize..self.starts[f + 1] as usize] {
                            buf.offer(dist2(&points[i as usize], y), i);
                        }
                    }
                }
            }
            if buf.full() {
                // Distance from y to the nearest cell outside the searched block.
                let mut bound = f64::INFINITY;
                for a in 0..3 {
                    if c[a] >= r + 1 {
                        bound = bound.min(y[a] - (self.lo[a] + (c[a] - r) as f64 * self.cell));
                    }
                    if c[a] + r + 1 < self.dims[a] {
                        bound = bound.min(self.lo[a] + (c[a] + r + 1) as f64 * self.cell - y[a]);
                    }
                }
                if bound > 0.0 && buf.worst() < bound * bound {
                    return;
                }
            }
        }
    }
}

/// Nearest-neighbor rows (`queries.len() x k`) of `queries` among `points`.
pub(crate) fn knn_rows(
    points: &[Point],
    queries: &[Point],
    k: usize,
    options: WindowOptions,
) -> Result<Vec<u32>> {
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("window_size must be positive".into()));
    }
    if options.exclude_center && points.len() == 1 {
        return Err(Error::InvalidArgument(
            "cannot exclude the center from a single-point cloud".into(),
        ));
    }
    let extra = usize::from(options.exclude_center);
    let cap = (k + extra).min(points.len());
    let grid = if points.len() >= GRID_MIN_POINTS && cap < points.len() {
        Grid::build(points)
    } else {
        None
    };
    let mut buf = NearestBuffer::new(cap);
    let mut rows = Vec::with_capacity(queries.len() * k);
    for y in queries {
        if !y.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("output point coordinates"));
        }
        buf.clear();
        match &grid {
            Some(g) => g.query(points, y, &mut buf),
            None => {
                for (i, p) in points.iter().enumerate() {
                    buf.offer(dist2(p, y), i as u32);
                }
            }
        }
        emit_row(&buf.items, k, options, &mut rows);
    }
    Ok(rows)
}

/// Plain scan over every point; the reference the grid search must match.
#[cfg(test)]
pub(crate) fn knn_rows_scan(points: &[Point], queries: &[Point], k: usize, options: WindowOptions) -> Vec<u32> {
    let extra = usize::from(options.exclude_center);
    let mut buf = NearestBuffer::new((k + extra).min(points.len()));
    let mut rows = Vec::new();
    for y in queries {
        buf.clear();
        for (i, p) in points.iter().enumerate() {
            buf.offer(dist2(p, y), i as u32);
        }
        emit_row(&buf.items, k, options, &mut rows);
    }
    rows
}

fn emit_row(found: &[(f64, u32)], k: usize, options: WindowOptions, rows: &mut Vec<u32>) {
    let start = rows.len();
    if options.exclude_center {
        let centre = found.iter().position(|&(d, _)| d == 0.0);
        let dropped = centre.unwrap_or(found.len() - 1);
        rows.extend(
            found
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != dropped)
                .map(|(_, &(_, i))| i),
        );
    } else {
        rows.extend(found.iter().take(k).map(|&(_, i)| i));
    }
    let got = rows.len() - start;
    fill_cyclic(rows, start, got, k);
}

fn fill_cyclic(rows: &mut Vec<u32>, start: usize, got: usize, k: usize) {
    rows.truncate(start + got.min(k));
    for j in got..k {
        let v = rows[start + j % got];
        rows.push(v);
    }
}

/// Windows of the `window_size` nearest cloud points to each output point.
///
/// Ties on distance go to the lower input index. When the cloud holds fewer
/// than `window_size` points, the nearest-first order repeats cyclically.
pub fn knn_windows<T: Real>(
    cloud: &PointCloud<T>,
    outputs: &[Point],
    window_size: usize,
) -> Result<WindowSet> {
    knn_windows_with(cloud, outputs, window_size, WindowOptions::default())
}

pub fn knn_windows_with<T: Real>(
    cloud: &PointCloud<T>,
    outputs: &[Point],
    window_size: usize,
    options: WindowOptions,
) -> Result<WindowSet> {
    let rows = knn_rows(cloud.points(), outputs, window_size, options)?;
    WindowSet::new(outputs.to_vec(), rows, window_size)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Multiplier applied to the selection weight of a drawn point and its neighbors.
    pub attenuation: f64,
    /// Number of nearest neighbors attenuated together with the drawn point.
    pub neighbors: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            attenuation: 0.25,
            neighbors: 8,
        }
    }
}

/// Fenwick tree over non-negative selection weights.
struct WeightTree {
    tree: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightTree {
    fn uniform(n: usize) -> Self {
        let mut t = Self {
            tree: vec![0.0; n + 1],
            weights: vec![1.0; n],
        };
        t.rebuild();
        t
    }

    fn rebuild(&mut self) {
        let n = self.weights.len();
        self.tree.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let mut j = i + 1;
            while j <= n {
                self.tree[j] += self.weights[i];
                j += j & j.wrapping_neg();
            }
        }
    }

    fn prefix_total(&self) -> f64 {
        let mut i = self.weights.len();
        let mut acc = 0.0;
        while i > 0 {
            acc += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        acc
    }

    fn scale(&mut self, i: usize, factor: f64) {
        let old = self.weights[i];
        let new = old * factor;
        self.weights[i] = new;
        let delta = new - old;
        let n = self.weights.len();
        let mut j = i + 1;
        while j <= n {
            self.tree[j] += delta;
            j += j & j.wrapping_neg();
        }
    }

    /// Smallest index whose prefix sum exceeds `target`.
    fn find(&self, mut target: f64) -> usize {
        let n = self.weights.len();
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= target {
                pos = next;
                target -= self.tree[next];
            }
            step >>= 1;
        }
        pos.min(n - 1)
    }
}

/// Draw `count` point indices with replacement, attenuating each drawn
/// point and its nearest neighbors so later draws favour unvisited regions.
///
/// `neighbors[i]` lists the neighbors attenuated together with point `i`.
/// When every weight has decayed to zero the weights reset to one.
pub(crate) fn sample_indices_with_graph(
    n: usize,
    neighbors: &dyn Fn(usize) -> Vec<usize>,
    count: usize,
    attenuation: f64,
    rng: &mut StreamRng,
) -> Vec<usize> {
    let mut weights = WeightTree::uniform(n);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let total = weights.prefix_total();
        if total <= 0.0 {
            weights = WeightTree::uniform(n);
            continue;
        }
        let u: f64 = rng.gen::<f64>() * total;
        let pick = weights.find(u);
        if weights.weights[pick] <= 0.0 {
            // Rounding drift in the partial sums; rebuild them exactly and redraw.
            weights.rebuild();
            if weights.weights.iter().all(|&w| w <= 0.0) {
                weights = WeightTree::uniform(n);
            }
            continue;
        }
        out.push(pick);
        weights.scale(pick, attenuation);
        for j in neighbors(pick) {
            weights.scale(j, attenuation);
        }
    }
    out
}

/// Neighbor lists (excluding the point itself) derived from a self-inclusive
/// KNN graph with rows of width `k`.
pub(crate) fn neighbors_from_graph(graph: &[u32], k: usize, i: usize, take: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(take);
    for &j in &graph[i * k..(i + 1) * k] {
        let j = j as usize;
        if j != i && !out.contains(&j) {
            out.push(j);
            if out.len() == take {
                break;
            }
        }
    }
    out
}

/// Indices (into the cloud) of `count` sampled output points.
pub fn sample_output_indices<T: Real>(
    cloud: &PointCloud<T>,
    count: usize,
    rng: &mut StreamRng,
    config: &SamplerConfig,
) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if count == 0 {
        return Err(Error::InvalidArgument("output count must be positive".into()));
    }
    let n = cloud.len();
    let k = (config.neighbors + 1).min(n);
    let graph = knn_rows(cloud.points(), cloud.points(), k, WindowOptions::default())?;
    let take = config.neighbors;
    Ok(sample_indices_with_graph(
        n,
        &|i| neighbors_from_graph(&graph, k, i, take),
        count,
        config.attenuation,
        rng,
    ))
}

/// Sample `count` output points from the cloud (deterministic for a seed).
pub fn sample_output_points<T: Real>(
    cloud: &PointCloud<T>,
    count: usize,
    rng_seed: u64,
    config: &SamplerConfig,
) -> Result<Vec<Point>> {
    let mut rng = rng::substream(rng_seed, rng::stream::SAMPLING);
    let idx = sample_output_indices(cloud, count, &mut rng, config)?;
    Ok(idx.into_iter().map(|i| cloud.points()[i]).collect())
}

/// Translate to the centroid and scale so the farthest point lies at distance 1.
pub fn normalize<T: Real>(cloud: &PointCloud<T>) -> PointCloud<T> {
    let mut points = cloud.points().to_vec();
    normalize_points(&mut points);
    PointCloud::from_parts_unchecked(points, cloud.features().to_vec(), cloud.feature_width())
}

pub fn normalize_points(points: &mut [Point]) {
    if points.is_empty() {
        return;
    }
    let c = centroid(points);
    let mut max_r2: f64 = 0.0;
    for p in points.iter_mut() {
        for d in 0..3 {
            p[d] -= c[d];
        }
        max_r2 = max_r2.max(dist2(p, &[0.0; 3]));
    }
    if max_r2 > 0.0 {
        let r = max_r2.sqrt();
        for p in points.iter_mut() {
            for v in p.iter_mut() {
                *v /= r;
            }
        }
    }
}

/// Parse the whitespace-separated `x y z [f1 .. fI]` text format.
///
/// Rows with fewer features than the widest row are padded with `1`; a file
/// without features gets the constant feature `1`.
pub fn parse_cloud(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if values.len() < 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected at least 3 coordinates, found {}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "non-finite value".into(),
            });
        }
        points.push([values[0], values[1], values[2]]);
        rows.push(values[3..].to_vec());
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let width = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut features = Vec::with_capacity(points.len() * width);
    for row in &rows {
        features.extend_from_slice(row);
        features.extend(std::iter::repeat_n(1.0, width - row.len()));
    }
    PointCloud::new(points, features, width)
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cloud(&text, path)
}

pub fn format_cloud<T: Real>(cloud: &PointCloud<T>) -> String {
    let mut s = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        s.push_str(&format!("{} {} {}", p[0], p[1], p[2]));
        for f in cloud.feature_row(i) {
            s.push_str(&format!(" {f}"));
        }
        s.push('\n');
    }
    s
}

pub fn save_cloud<T: Real>(cloud: &PointCloud<T>, path: &Path) -> Result<()> {
    std::fs::write(path, format_cloud(cloud)).map_err(|e| Error::io(path, e))
}
