//! Anomaly detection on point clouds: the self-supervised rotation
//! classifier, Deep SVDD, and the GOOD + Isolation Forest baseline behind a
//! single `detect` entry point. Every detector reports scores where higher
//! means more anomalous.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::baselines::{GoodIfor, IforConfig, DEFAULT_BINS, DEFAULT_SUBSAMPLE, DEFAULT_TREES};
use crate::datasets::{Instance, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::geometry::{Point, PointCloud};
use crate::network::{softmax, LayerKind, Network, NetworkSpec};
use crate::real::{Precision, Real};
use crate::rng;
use crate::layers::Accumulation;
use crate::training::{self, LossKind, TrainConfig, TrainLog};

/// Rotation angles in degrees of the default transformation set.
pub const DEFAULT_ANGLES: [f64; 8] = [0.0, 45.0, 90.0, 135.0, 210.0, 240.0, 300.0, 330.0];

/// Width of the Deep SVDD embedding.
pub const DEFAULT_LATENT_DIM: usize = 32;

/// Rotate every point about `axis` (through the origin) by `angle_deg`,
/// right-handed. Features are copied unchanged.
pub fn rotate<T: Real>(cloud: &PointCloud<T>, angle_deg: f64, axis: Point) -> Result<PointCloud<T>> {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::InvalidArgument("rotation axis must be nonzero".into()));
    }
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("rotation axis must have unit length, got {norm}")));
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    let k = axis;
    let points = cloud
        .points()
        .iter()
        .map(|v| {
            let cross = [k[1] * v[2] - k[2] * v[1], k[2] * v[0] - k[0] * v[2], k[0] * v[1] - k[1] * v[0]];
            let dot = k[0] * v[0] + k[1] * v[1] + k[2] * v[2];
            let mut out = [0.0; 3];
            for a in 0..3 {
                out[a] = v[a] * c + cross[a] * s + k[a] * dot * (1.0 - c);
            }
            out
        })
        .collect();
    cloud.with_points(points)
}

/// Ordered rotations about one horizontal axis; transformation `n` rotates
/// by `angles[n]` degrees and transformation 0 is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformationSet {
    angles: Vec<f64>,
    axis: Point,
}

impl Default for TransformationSet {
    fn default() -> Self {
        Self {
            angles: DEFAULT_ANGLES.to_vec(),
            axis: [1.0, 0.0, 0.0],
        }
    }
}

impl TransformationSet {
    pub fn new(angles: Vec<f64>, axis: Point) -> Result<Self> {
        if angles.first() != Some(&0.0) {
            return Err(Error::InvalidArgument("the first transformation must be the identity (angle 0)".into()));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("rotation angles"));
        }
        let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("rotation axis must have unit length, got {norm}")));
        }
        if axis[2].abs() > 1e-9 {
            return Err(Error::InvalidArgument("rotation axis must be horizontal (zero z component)".into()));
        }
        Ok(Self { angles, axis })
    }

    /// Rotations about the x-axis.
    pub fn about_x(angles: Vec<f64>) -> Result<Self> {
        Self::new(angles, [1.0, 0.0, 0.0])
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn axis(&self) -> Point {
        self.axis
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn apply<T: Real>(&self, n: usize, cloud: &PointCloud<T>) -> Result<PointCloud<T>> {
        let angle = *self
            .angles
            .get(n)
            .ok_or_else(|| Error::InvalidArgument(format!("no transformation with index {n}")))?;
        rotate(cloud, angle, self.axis)
    }

    /// All transformed copies, in order.
    pub fn apply_all<T: Real>(&self, cloud: &PointCloud<T>) -> Result<Vec<PointCloud<T>>> {
        (0..self.len()).map(|n| self.apply(n, cloud)).collect()
    }
}

/// Every normal cloud under every transformation, labeled by the
/// transformation index. Item `i * N + n` is `T_n(normals[i])`.
pub fn build_surrogate_dataset(normals: &[&PointCloud], ts: &TransformationSet) -> Result<LabeledDataset> {
    if normals.is_empty() {
        return Err(Error::InvalidArgument("surrogate dataset needs at least one normal cloud".into()));
    }
    let instances = normals
        .par_iter()
        .enumerate()
        .map(|(i, cloud)| {
            (0..ts.len())
                .map(|n| {
                    Ok(Instance {
                        cloud: ts.apply(n, *cloud)?,
                        label: n,
                        id: format!("{i:05}_t{n}"),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let names = ts.angles.iter().map(|a| format!("rot{a}")).collect();
    LabeledDataset::new(instances, names, Some(Split::Train))
}

/// Anything that assigns class posteriors to a batch of clouds.
pub trait TransformClassifier {
    fn num_classes(&self) -> usize;

    /// One probability row per cloud.
    fn posteriors(&self, batch: &[PointCloud], seed: u64) -> Result<Vec<Vec<f64>>>;
}

impl<T: Real> TransformClassifier for Network<T> {
    fn num_classes(&self) -> usize {
        self.out_dim()
    }

    fn posteriors(&self, batch: &[PointCloud], seed: u64) -> Result<Vec<Vec<f64>>> {
        let logits = self.forward_eval(batch, seed)?;
        Ok(logits.chunks(self.out_dim()).map(softmax).collect())
    }
}

/// S(P): mean posterior of the applied transformation over all N
/// transformed copies of `cloud`. In [0, 1]; high for normal clouds.
pub fn normality_score<C: TransformClassifier + ?Sized>(
    net: &C,
    cloud: &PointCloud,
    ts: &TransformationSet,
    seed: u64,
) -> Result<f64> {
    if net.num_classes() != ts.len() {
        return Err(Error::mismatch("classifier outputs", ts.len(), net.num_classes()));
    }
    let copies = ts.apply_all(cloud)?;
    let post = net.posteriors(&copies, seed)?;
    if post.len() != ts.len() {
        return Err(Error::mismatch("posterior rows", ts.len(), post.len()));
    }
    let mut total = 0.0;
    for (n, row) in post.iter().enumerate() {
        if row.len() != ts.len() {
            return Err(Error::mismatch("posterior width", ts.len(), row.len()));
        }
        total += row[n];
    }
    Ok(total / ts.len() as f64)
}

/// ||embedding - center||^2.
pub fn squared_distance<T: Real>(embedding: &[T], center: &[f64]) -> Result<f64> {
    if embedding.len() != center.len() {
        return Err(Error::mismatch("embedding dimension", center.len(), embedding.len()));
    }
    Ok(embedding
        .iter()
        .zip(center)
        .map(|(e, c)| (e.as_f64() - c).powi(2))
        .sum())
}

/// Deep SVDD anomaly score of one cloud.
pub fn dsvdd_score<T: Real>(net: &Network<T>, center: &[f64], cloud: &PointCloud, seed: u64) -> Result<f64> {
    let emb = net.forward_eval(std::slice::from_ref(cloud), seed)?;
    squared_distance(&emb, center)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorKind {
    SelfSupervised,
    Dsvdd,
    GoodIfor,
}

impl DetectorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DetectorKind::SelfSupervised => "self_supervised",
            DetectorKind::Dsvdd => "dsvdd",
            DetectorKind::GoodIfor => "good_ifor",
        }
    }

    /// Architecture defaults (J0, M, K) for the network-based detectors.
    pub fn default_architecture(&self) -> (usize, usize, usize) {
        match self {
            DetectorKind::Dsvdd => (8, 128, 96),
            _ => (32, 256, 32),
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self_supervised" | "selfsup" | "rotation" => Ok(DetectorKind::SelfSupervised),
            "dsvdd" | "deep_svdd" => Ok(DetectorKind::Dsvdd),
            "good_ifor" | "ifor" => Ok(DetectorKind::GoodIfor),
            other => Err(Error::InvalidArgument(format!(
                "unknown detector `{other}` (expected self_supervised, dsvdd or good_ifor)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    pub detector: DetectorKind,
    pub layer_kind: LayerKind,
    pub j0: usize,
    pub m: usize,
    pub k: usize,
    pub sigma: f64,
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub precision: Precision,
    pub accumulation: Accumulation,
    pub transformations: TransformationSet,
    pub good_bins: usize,
    pub ifor_trees: usize,
    pub ifor_subsample: usize,
    pub log_path: Option<PathBuf>,
}

impl DetectConfig {
    pub fn new(detector: DetectorKind) -> Self {
        let (j0, m, k) = detector.default_architecture();
        let train = TrainConfig::default();
        Self {
            detector,
            layer_kind: LayerKind::AggrComposite,
            j0,
            m,
            k,
            sigma: NetworkSpec::DEFAULT_SIGMA,
            latent_dim: DEFAULT_LATENT_DIM,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.lr,
            seed: 0,
            precision: Precision::F32,
            accumulation: Accumulation::Fast,
            transformations: TransformationSet::default(),
            good_bins: DEFAULT_BINS,
            ifor_trees: DEFAULT_TREES,
            ifor_subsample: DEFAULT_SUBSAMPLE,
            log_path: None,
        }
    }

    /// Network architecture for the configured detector.
    pub fn network_spec(&self) -> NetworkSpec {
        let mut spec = match self.detector {
            DetectorKind::Dsvdd => NetworkSpec::dsvdd(self.layer_kind, self.j0, self.m, self.k, self.latent_dim),
            _ => NetworkSpec::classification(self.layer_kind, self.j0, self.m, self.k, self.transformations.len()),
        };
        spec.sigma = self.sigma;
        spec
    }

    fn train_config(&self, loss_kind: LossKind) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            loss_kind,
            precision: self.precision,
            accumulation: self.accumulation,
            log_path: self.log_path.clone(),
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreLabel {
    Normal,
    Anomalous,
}

impl ScoreLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreLabel::Normal => "normal",
            ScoreLabel::Anomalous => "anomalous",
        }
    }
}

/// Anomaly scores (higher = more anomalous) with ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDataset {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<ScoreLabel>,
}

impl ScoredDataset {
    pub fn new(ids: Vec<String>, scores: Vec<f64>, labels: Vec<ScoreLabel>) -> Result<Self> {
        if scores.len() != labels.len() || ids.len() != labels.len() {
            return Err(Error::mismatch("scored dataset columns", labels.len(), scores.len().min(ids.len())));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("anomaly scores"));
        }
        Ok(Self { ids, scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn anomalous(&self) -> Vec<bool> {
        self.labels.iter().map(|l| *l == ScoreLabel::Anomalous).collect()
    }

    /// ROC AUC of anomalous versus normal.
    pub fn auc(&self) -> Result<f64> {
        roc_auc(&self.scores, &self.anomalous())
    }

    /// `instance_id,score,label` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance_id,score,label\n");
        for ((id, s), l) in self.ids.iter().zip(&self.scores).zip(&self.labels) {
            out.push_str(&format!("{id},{s},{}\n", l.as_str()));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Parse the CSV written by [`ScoredDataset::to_csv`].
    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let mut ids = Vec::new();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(err(i + 1, format!("expected 3 columns, found {}", cols.len())));
            }
            let score: f64 = cols[1].trim().parse().map_err(|_| err(i + 1, format!("bad score `{}`", cols[1])))?;
            let label = match cols[2].trim() {
                "normal" | "0" => ScoreLabel::Normal,
                "anomalous" | "1" => ScoreLabel::Anomalous,
                other => return Err(err(i + 1, format!("bad label `{other}`"))),
            };
            ids.push(cols[0].to_string());
            scores.push(score);
            labels.push(label);
        }
        Self::new(ids, scores, labels)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }
}

/// Scores plus, for the network detectors, the training log.
#[derive(Debug, Clone)]
pub struct Detection {
    pub scores: ScoredDataset,
    pub log: Option<TrainLog>,
}

/// Sampling seed used when scoring instance `id`.
pub fn eval_seed(seed: u64, id: &str) -> u64 {
    rng::derive_seed(seed, &format!("eval/{id}"), 0)
}

/// Train the configured detector on `train` (one normal class) and score
/// `test`. Test instances whose class name matches the training class are
/// labeled normal, everything else anomalous.
pub fn detect(train: &LabeledDataset, test: &LabeledDataset, config: &DetectConfig) -> Result<Detection> {
    let first = train
        .instances()
        .first()
        .ok_or_else(|| Error::InvalidArgument("training set is empty".into()))?;
    if train.instances().iter().any(|i| i.label != first.label) {
        return Err(Error::InvalidArgument("training set must contain a single normal class".into()));
    }
    let normal = &train.class_names()[first.label];
    let labels: Vec<ScoreLabel> = test
        .instances()
        .iter()
        .map(|i| {
            if &test.class_names()[i.label] == normal {
                ScoreLabel::Normal
            } else {
                ScoreLabel::Anomalous
            }
        })
        .collect();
    let ids: Vec<String> = test.instances().iter().map(|i| i.id.clone()).collect();
    let normals = train.clouds();
    let tests = test.clouds();
    let (scores, log) = match (config.detector, config.precision) {
        (DetectorKind::GoodIfor, _) => (good_ifor_scores(&normals, &tests, config)?, None),
        (_, Precision::F32) => network_scores::<f32>(&normals, &tests, &ids, config)?,
        (_, Precision::F64) => network_scores::<f64>(&normals, &tests, &ids, config)?,
    };
    Ok(Detection {
        scores: ScoredDataset::new(ids, scores, labels)?,
        log,
    })
}

fn good_ifor_scores(normals: &[&PointCloud], tests: &[&PointCloud], config: &DetectConfig) -> Result<Vec<f64>> {
    let ifor = IforConfig {
        trees: config.ifor_trees,
        subsample: config.ifor_subsample,
        seed: config.seed,
    };
    let det = GoodIfor::fit(normals, config.good_bins, &ifor)?;
    tests.par_iter().map(|c| det.score(*c)).collect()
}

fn network_scores<T: Real>(
    normals: &[&PointCloud],
    tests: &[&PointCloud],
    ids: &[String],
    config: &DetectConfig,
) -> Result<(Vec<f64>, Option<TrainLog>)> {
    match config.detector {
        DetectorKind::SelfSupervised => {
            let ts = &config.transformations;
            if ts.len() < 2 {
                return Err(Error::InvalidArgument("self-supervised detection needs at least 2 transformations".into()));
            }
            let surrogate = build_surrogate_dataset(normals, ts)?;
            let mut net: Network<T> = Network::new(config.network_spec(), config.seed)?;
            let report = training::train(&mut net, &surrogate, &config.train_config(LossKind::CrossEntropy))?;
            let scores = tests
                .par_iter()
                .zip(ids)
                .map(|(c, id)| Ok(-normality_score(&net, c, ts, eval_seed(config.seed, id))?))
                .collect::<Result<Vec<_>>>()?;
            Ok((scores, Some(report.log)))
        }
        DetectorKind::Dsvdd => {
            let mut net: Network<T> = Network::new(config.network_spec(), config.seed)?;
            let owned: Vec<Instance> = normals
                .iter()
                .enumerate()
                .map(|(i, c)| Instance {
                    cloud: (*c).clone(),
                    label: 0,
                    id: format!("{i:05}"),
                })
                .collect();
            let ds = LabeledDataset::new(owned, vec!["normal".into()], Some(Split::Train))?;
            let report = training::train(&mut net, &ds, &config.train_config(LossKind::Dsvdd))?;
            let center = report
                .center
                .ok_or_else(|| Error::InvalidArgument("Deep SVDD needs at least one training epoch".into()))?;
            let scores = tests
                .par_iter()
                .zip(ids)
                .map(|(c, id)| dsvdd_score(&net, &center, c, eval_seed(config.seed, id)))
                .collect::<Result<Vec<_>>>()?;
            Ok((scores, Some(report.log)))
        }
        DetectorKind::GoodIfor => unreachable!("handled without a network"),
    }
}
