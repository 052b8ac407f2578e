//! Labeled point-cloud datasets: synthetic shapes, directory ingestion and
//! stratified splits.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{self, Point, PointCloud};
use crate::rng::{self, stream, StreamRng};

/// Points per instance after loading.
pub const CLOUD_POINTS: usize = 1024;

/// Default synthetic jitter (standard deviation, in units of the shape scale).
pub const DEFAULT_JITTER: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub cloud: PointCloud,
    pub label: usize,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    instances: Vec<Instance>,
    class_names: Vec<String>,
    split: Option<Split>,
}

impl LabeledDataset {
    pub fn new(instances: Vec<Instance>, class_names: Vec<String>, split: Option<Split>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(instances.len());
        for inst in &instances {
            if inst.label >= class_names.len() {
                return Err(Error::InvalidArgument(format!(
                    "instance `{}` has class id {} but only {} classes exist",
                    inst.id,
                    inst.label,
                    class_names.len()
                )));
            }
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate instance id `{}`", inst.id)));
            }
        }
        Ok(Self {
            instances,
            class_names,
            split,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self) -> Option<Split> {
        self.split
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn clouds(&self) -> Vec<&PointCloud> {
        self.instances.iter().map(|i| &i.cloud).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for i in &self.instances {
            counts[i.label] += 1;
        }
        counts
    }

    /// Instances of one class, relabeled as class 0 of a single-class set.
    pub fn only_class(&self, label: usize) -> Result<LabeledDataset> {
        let name = self
            .class_names
            .get(label)
            .ok_or_else(|| Error::InvalidArgument(format!("no class with id {label}")))?
            .clone();
        let instances = self
            .instances
            .iter()
            .filter(|i| i.label == label)
            .map(|i| Instance { label: 0, ..i.clone() })
            .collect();
        LabeledDataset::new(instances, vec![name], self.split)
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Concatenate two datasets sharing the same class list.
    pub fn concat(mut self, other: LabeledDataset) -> Result<LabeledDataset> {
        if self.class_names != other.class_names {
            return Err(Error::InvalidArgument("datasets have different class lists".into()));
        }
        let split = if self.split == other.split { self.split } else { None };
        self.instances.extend(other.instances);
        LabeledDataset::new(self.instances, self.class_names, split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Torus,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownShape(s.to_string()))
    }
}

const TORUS_MAJOR: f64 = 1.0;
const TORUS_MINOR: f64 = 0.35;

/// Uniform (area-weighted) samples on the raw surface, before jitter and
/// normalization. Sphere: unit radius. Cube: half-extent 1. Cylinder and
/// cone: radius 1, height 2 along z (cone apex at z = 1). Torus: radii 1 and
/// 0.35 around z.
pub fn sample_surface(kind: ShapeKind, n_points: usize, rng: &mut StreamRng) -> Vec<Point> {
    (0..n_points).map(|_| surface_point(kind, rng)).collect()
}

fn disk_point(rng: &mut StreamRng) -> (f64, f64) {
    let r = rng.gen::<f64>().sqrt();
    let t = rng.gen_range(0.0..std::f64::consts::TAU);
    (r * t.cos(), r * t.sin())
}

fn surface_point(kind: ShapeKind, rng: &mut StreamRng) -> Point {
    use std::f64::consts::{PI, TAU};
    match kind {
        ShapeKind::Sphere => loop {
            let v: [f64; 3] = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-12 {
                return [v[0] / n, v[1] / n, v[2] / n];
            }
        },
        ShapeKind::Cube => {
            let face = rng.gen_range(0..6);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
            p[axis] = sign;
            p
        }
        ShapeKind::Cylinder => {
            // side 4 pi, each cap pi
            let u = rng.gen::<f64>() * 6.0 * PI;
            if u < 4.0 * PI {
                let t = rng.gen_range(0.0..TAU);
                [t.cos(), t.sin(), rng.gen_range(-1.0..=1.0)]
            } else {
                let (x, y) = disk_point(rng);
                [x, y, if u < 5.0 * PI { 1.0 } else { -1.0 }]
            }
        }
        ShapeKind::Cone => {
            let lateral = PI * 5f64.sqrt();
            if rng.gen::<f64>() * (lateral + PI) < lateral {
                let s = rng.gen::<f64>().sqrt();
                let t = rng.gen_range(0.0..TAU);
                [s * t.cos(), s * t.sin(), 1.0 - 2.0 * s]
            } else {
                let (x, y) = disk_point(rng);
                [x, y, -1.0]
            }
        }
        ShapeKind::Torus => {
            let theta = loop {
                let th = rng.gen_range(0.0..TAU);
                let accept = (TORUS_MAJOR + TORUS_MINOR * th.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                if rng.gen::<f64>() <= accept {
                    break th;
                }
            };
            let phi = rng.gen_range(0.0..TAU);
            let ring = TORUS_MAJOR + TORUS_MINOR * theta.cos();
            [ring * phi.cos(), ring * phi.sin(), TORUS_MINOR * theta.sin()]
        }
    }
}

/// A normalized synthetic shape with constant unit features.
pub fn generate_shape(kind: ShapeKind, n_points: usize, jitter: f64, seed: u64) -> Result<PointCloud> {
    if n_points < 8 {
        return Err(Error::InvalidArgument(format!("need at least 8 points, got {n_points}")));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::InvalidArgument(format!("jitter must be a finite non-negative std, got {jitter}")));
    }
    let mut rng = rng::substream(seed, stream::DATA);
    let mut points = sample_surface(kind, n_points, &mut rng);
    if jitter > 0.0 {
        let noise = Normal::new(0.0, jitter).expect("valid std");
        for p in &mut points {
            for c in p.iter_mut() {
                *c += noise.sample(&mut rng);
            }
        }
    }
    geometry::normalize_points(&mut points);
    PointCloud::with_constant_features(points)
}

/// Recipe for a balanced synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecipe {
    pub kinds: Vec<ShapeKind>,
    pub per_class: usize,
    pub n_points: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl SyntheticRecipe {
    pub fn new(kinds: Vec<ShapeKind>, per_class: usize, seed: u64) -> Self {
        Self {
            kinds,
            per_class,
            n_points: CLOUD_POINTS,
            jitter: DEFAULT_JITTER,
            seed,
        }
    }

    /// Build with instance ids `<kind>_<index>`; class ids follow `kinds` order.
    pub fn build(&self) -> Result<LabeledDataset> {
        self.build_offset(0)
    }

    /// Same as [`SyntheticRecipe::build`] but starting instance numbering at
    /// `first`, so disjoint sets can be drawn from one seed.
    pub fn build_offset(&self, first: usize) -> Result<LabeledDataset> {
        if self.kinds.is_empty() {
            return Err(Error::InvalidArgument("synthetic recipe needs at least one shape kind".into()));
        }
        let jobs: Vec<(usize, ShapeKind, usize)> = self
            .kinds
            .iter()
            .enumerate()
            .flat_map(|(label, &kind)| (first..first + self.per_class).map(move |i| (label, kind, i)))
            .collect();
        let instances = jobs
            .par_iter()
            .map(|&(label, kind, i)| {
                let seed = rng::derive_seed(self.seed, kind.name(), i as u64);
                Ok(Instance {
                    cloud: generate_shape(kind, self.n_points, self.jitter, seed)?,
                    label,
                    id: format!("{}_{i:04}", kind.name()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let names = self.kinds.iter().map(|k| k.name().to_string()).collect();
        LabeledDataset::new(instances, names, None)
    }
}

/// Draw exactly `count` points: without replacement when the cloud is large
/// enough, otherwise every point once plus random duplicates.
pub fn resample(cloud: &PointCloud, count: usize, rng: &mut StreamRng) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = cloud.len();
    let idx: Vec<usize> = if n >= count {
        rand::seq::index::sample(rng, n, count).into_vec()
    } else {
        let mut v: Vec<usize> = (0..n).collect();
        v.extend((0..count - n).map(|_| rng.gen_range(0..n)));
        v
    };
    let w = cloud.feature_width();
    let points = idx.iter().map(|&i| cloud.points()[i]).collect();
    let features = idx.iter().flat_map(|&i| cloud.feature_row(i).iter().copied()).collect();
    PointCloud::new(points, features, w)
}

/// Load `root/<class>/<instance>` point files with [`CLOUD_POINTS`] points each.
pub fn load_directory(root: &Path) -> Result<LabeledDataset> {
    load_directory_with(root, CLOUD_POINTS, 0)
}

/// Class ids follow sorted directory names; clouds are resampled to
/// `points` points with a per-file seed and normalized.
pub fn load_directory_with(root: &Path, points: usize, seed: u64) -> Result<LabeledDataset> {
    let mut classes: Vec<(String, PathBuf)> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    classes.sort();
    let mut jobs = Vec::new();
    for (label, (name, dir)) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            jobs.push((label, format!("{name}/{stem}"), f));
        }
    }
    if jobs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no point-cloud files found under {}",
            root.display()
        )));
    }
    let instances = jobs
        .par_iter()
        .enumerate()
        .map(|(k, (label, id, path))| {
            let raw = geometry::load_cloud(path)?;
            let mut rng = rng::substream_indexed(seed, stream::DATA, k as u64);
            let cloud = geometry::normalize(&resample(&raw, points, &mut rng)?);
            Ok(Instance {
                cloud,
                label: *label,
                id: id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(instances, classes.into_iter().map(|c| c.0).collect(), None)
}

/// Stratified split: per class, a seeded shuffle then the first
/// `round(fraction * count)` instances go to the training side.
pub fn split(dataset: &LabeledDataset, train_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = rng::substream(seed, stream::SHUFFLE);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..dataset.num_classes() {
        let mut members: Vec<&Instance> = dataset.instances.iter().filter(|i| i.label == c).collect();
        members.shuffle(&mut rng);
        let cut = (train_fraction * members.len() as f64).round() as usize;
        train.extend(members[..cut].iter().map(|&i| i.clone()));
        test.extend(members[cut..].iter().map(|&i| i.clone()));
    }
    Ok((
        LabeledDataset::new(train, dataset.class_names.clone(), Some(Split::Train))?,
        LabeledDataset::new(test, dataset.class_names.clone(), Some(Split::Test))?,
    ))
}
