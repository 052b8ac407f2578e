//! The `train`, `detect`, `paramcount`, `eval` and `bench` commands.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use compositenet_core::anomaly::{self, DetectConfig, DetectorKind, ScoredDataset, TransformationSet};
use compositenet_core::datasets::{self, Instance, LabeledDataset, ShapeKind, SyntheticRecipe};
use compositenet_core::eval::{self, ComparisonTable, MethodResults};
use compositenet_core::layers::Accumulation;
use compositenet_core::network::{argmax, save_checkpoint, LayerKind, Network, NetworkSpec};
use compositenet_core::training::{self, LossKind, TrainConfig};
use compositenet_core::{Error, PointCloud, Precision, Real};
use rayon::prelude::*;

use crate::config::{key, optional, required, KeySpec, RunConfig};
use crate::CliError;

pub static TRAIN_KEYS: &[KeySpec] = &[
    key("seed", "0", "master seed for data, init, sampling and shuffling"),
    key("precision", "f32", "arithmetic precision (f32 or f64)"),
    key("accumulation", "fast", "window accumulation order (fast or sorted)"),
    key("layer_kind", "conv", "point layer (conv, aggr or baseline)"),
    required("j0", "first-stage feature count J0"),
    required("m", "RBF centers M"),
    required("k", "spatial function outputs K"),
    key("sigma", "0.3", "RBF width"),
    key("epochs", "200", "training epochs"),
    key("batch_size", "16", "mini-batch size"),
    key("lr", "0.001", "Adam learning rate"),
    optional("train_root", "training directory with one subdirectory per class"),
    optional("test_root", "test directory with the same classes"),
    key("shapes", "sphere,cube,cylinder", "synthetic classes when no train_root is given"),
    key("train_per_class", "64", "synthetic training instances per class"),
    key("test_per_class", "32", "synthetic test instances per class"),
    key("points", "1024", "points per cloud"),
    key("jitter", "0.01", "synthetic Gaussian jitter"),
    key("output_dir", "train_out", "directory for the checkpoint, logs and metrics"),
];

pub static DETECT_KEYS: &[KeySpec] = &[
    key("seed", "0", "master seed"),
    key("precision", "f32", "arithmetic precision (f32 or f64)"),
    key("accumulation", "fast", "window accumulation order (fast or sorted)"),
    key("detector", "self_supervised", "self_supervised, dsvdd or good_ifor"),
    key("layer_kind", "aggr", "point layer (conv, aggr or baseline)"),
    optional("j0", "first-stage feature count (detector default if unset)"),
    optional("m", "RBF centers (detector default if unset)"),
    optional("k", "spatial function outputs (detector default if unset)"),
    key("sigma", "0.3", "RBF width"),
    key("latent_dim", "32", "Deep SVDD embedding width"),
    key("angles", "0,45,90,135,210,240,300,330", "rotation angles in degrees about the x-axis"),
    key("epochs", "200", "training epochs"),
    key("batch_size", "16", "mini-batch size"),
    key("lr", "0.001", "Adam learning rate"),
    optional("train_root", "directory with a single subdirectory of normal clouds"),
    optional("test_root", "test directory; the class named like the normal one is normal"),
    key("normal_shape", "sphere", "synthetic normal class"),
    key("anomaly_shapes", "cube", "synthetic anomalous classes"),
    key("train_count", "200", "synthetic normal training instances"),
    key("test_normal", "50", "synthetic normal test instances"),
    key("test_anomalous", "50", "synthetic anomalous test instances per anomalous class"),
    key("points", "1024", "points per cloud"),
    key("jitter", "0.01", "synthetic Gaussian jitter"),
    key("good_bins", "5", "GOOD grid bins per axis"),
    key("ifor_trees", "100", "isolation trees"),
    key("ifor_subsample", "256", "isolation forest subsample size"),
    key("output_dir", "detect_out", "directory for scores and logs"),
];

pub static PARAMCOUNT_KEYS: &[KeySpec] = &[
    key("kinds", "conv,aggr,baseline", "layer kinds to count"),
    key("m_values", "8,16,32,64,128,256", "M sweep"),
    key("j0", "64", "first-stage feature count"),
    key("k", "16", "spatial function outputs"),
    key("classes", "40", "output classes"),
    optional("output", "also write the CSV here"),
];

pub static EVAL_KEYS: &[KeySpec] = &[
    key("mode", "auc", "classification, auc or compare"),
    optional("predictions", "classification: CSV instance_id,prediction,label"),
    optional("scores", "auc: comma-separated score CSV files"),
    optional("runs", "compare: CSV method,class,scores_path"),
    optional("table", "compare: CSV class,<method>,... of per-class values"),
    optional("output", "also write the result CSV here"),
];

pub static BENCH_KEYS: &[KeySpec] = &[
    key("kinds", "conv,aggr,baseline", "layer kinds to time"),
    key("m_values", "8,16,32,64,128,256", "M sweep"),
    key("j0", "16", "first-stage feature count"),
    key("k", "16", "spatial function outputs"),
    key("classes", "40", "output classes"),
    key("points", "1024", "points per cloud"),
    key("repeats", "3", "timed repetitions per setting"),
    key("seed", "0", "master seed"),
    key("precision", "f32", "arithmetic precision (f32 or f64)"),
    optional("output", "also write the CSV here"),
];

fn out_err(e: std::io::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn config_err(e: Error) -> CliError {
    CliError::Config(e.to_string())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn prepare_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(cfg.str("output_dir")?);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    write_file(&dir.join("config.txt"), &cfg.dump())?;
    Ok(dir)
}

fn synthetic(kinds: Vec<ShapeKind>, per_class: usize, cfg: &RunConfig) -> Result<SyntheticRecipe, CliError> {
    Ok(SyntheticRecipe {
        kinds,
        per_class,
        n_points: cfg.positive("points")?,
        jitter: cfg.parse("jitter")?,
        seed: cfg.parse("seed")?,
    })
}

fn train_data(cfg: &RunConfig) -> Result<(LabeledDataset, Option<LabeledDataset>), CliError> {
    let points = cfg.positive("points")?;
    let seed: u64 = cfg.parse("seed")?;
    if let Some(root) = cfg.opt_path("train_root") {
        let train = datasets::load_directory_with(&root, points, seed)?;
        let test = match cfg.opt_path("test_root") {
            Some(t) => {
                let test = datasets::load_directory_with(&t, points, seed)?;
                if test.class_names() != train.class_names() {
                    return Err(CliError::Config("test_root must contain the same classes as train_root".into()));
                }
                Some(test)
            }
            None => None,
        };
        return Ok((train, test));
    }
    let kinds: Vec<ShapeKind> = cfg.list("shapes")?;
    if kinds.is_empty() {
        return Err(CliError::Config("`shapes` must list at least one shape".into()));
    }
    let per_train = cfg.positive("train_per_class")?;
    let per_test: usize = cfg.parse("test_per_class")?;
    let train = synthetic(kinds.clone(), per_train, cfg)?.build_offset(0)?;
    let test = if per_test > 0 {
        Some(synthetic(kinds, per_test, cfg)?.build_offset(per_train)?)
    } else {
        None
    };
    Ok((train, test))
}

/// `train`: fit a classification CompositeNet and write `model.cpnt`,
/// `train_log.csv`, and for a test set `predictions.csv` and `metrics.csv`.
pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let kind: LayerKind = cfg.parse("layer_kind")?;
    let seed: u64 = cfg.parse("seed")?;
    let precision: Precision = cfg.parse("precision")?;
    let tc = TrainConfig {
        epochs: cfg.parse("epochs")?,
        batch_size: cfg.positive("batch_size")?,
        lr: cfg.positive_f64("lr")?,
        seed,
        loss_kind: LossKind::CrossEntropy,
        precision,
        accumulation: cfg.parse("accumulation")?,
        ..TrainConfig::default()
    };
    tc.validate().map_err(config_err)?;
    let (j0, m, k) = (cfg.positive("j0")?, cfg.positive("m")?, cfg.positive("k")?);
    let sigma = cfg.positive_f64("sigma")?;
    let (train_set, test_set) = train_data(cfg)?;
    let mut spec = NetworkSpec::classification(kind, j0, m, k, train_set.num_classes());
    spec.sigma = sigma;
    spec.validate().map_err(config_err)?;
    let dir = prepare_dir(cfg)?;
    let tc = TrainConfig {
        log_path: Some(dir.join("train_log.csv")),
        ..tc
    };
    match precision {
        Precision::F32 => train_typed::<f32>(spec, &tc, &train_set, test_set.as_ref(), &dir, out),
        Precision::F64 => train_typed::<f64>(spec, &tc, &train_set, test_set.as_ref(), &dir, out),
    }
}

fn train_typed<T: Real>(
    spec: NetworkSpec,
    tc: &TrainConfig,
    train_set: &LabeledDataset,
    test_set: Option<&LabeledDataset>,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mut net = Network::<T>::new(spec, tc.seed)?;
    writeln!(
        out,
        "training {} ({} parameters) on {} clouds, {} classes",
        net.spec().layer_kind,
        compositenet_core::network::count_parameters(&net),
        train_set.len(),
        train_set.num_classes()
    )
    .map_err(out_err)?;
    let report = training::train(&mut net, train_set, tc)?;
    save_checkpoint(&net, &dir.join("model.cpnt"))?;
    if let Some(last) = report.log.epochs.last() {
        writeln!(
            out,
            "epoch {}: loss {:.6} train accuracy {:.4}",
            last.epoch,
            last.loss,
            last.accuracy.unwrap_or(f64::NAN)
        )
        .map_err(out_err)?;
    }
    if let Some(test) = test_set {
        let preds = predict(&net, test, tc.seed)?;
        let labels = test.labels();
        let oa = eval::overall_accuracy(&preds, &labels)?;
        let aa = eval::average_accuracy(&preds, &labels)?;
        let mut csv = String::from("instance_id,prediction,label\n");
        for ((inst, p), l) in test.instances().iter().zip(&preds).zip(&labels) {
            csv.push_str(&format!("{},{p},{l}\n", inst.id));
        }
        write_file(&dir.join("predictions.csv"), &csv)?;
        write_file(
            &dir.join("metrics.csv"),
            &format!("metric,value\noverall_accuracy,{oa:.6}\naverage_accuracy,{aa:.6}\n"),
        )?;
        writeln!(out, "test OA {oa:.4} AA {aa:.4} ({} clouds)", test.len()).map_err(out_err)?;
    }
    Ok(())
}

/// Evaluation-mode class predictions with per-instance sampling seeds.
pub fn predict<T: Real>(net: &Network<T>, data: &LabeledDataset, seed: u64) -> Result<Vec<usize>, CliError> {
    Ok(data
        .instances()
        .par_iter()
        .map(|inst| {
            let logits = net.forward_eval(std::slice::from_ref(&inst.cloud), anomaly::eval_seed(seed, &inst.id))?;
            Ok(argmax(&logits))
        })
        .collect::<Result<Vec<_>, Error>>()?)
}

fn detect_config(cfg: &RunConfig) -> Result<DetectConfig, CliError> {
    let detector: DetectorKind = cfg.parse("detector")?;
    let mut dc = DetectConfig::new(detector);
    dc.layer_kind = cfg.parse("layer_kind")?;
    if cfg.has("j0") {
        dc.j0 = cfg.positive("j0")?;
    }
    if cfg.has("m") {
        dc.m = cfg.positive("m")?;
    }
    if cfg.has("k") {
        dc.k = cfg.positive("k")?;
    }
    dc.sigma = cfg.positive_f64("sigma")?;
    dc.latent_dim = cfg.positive("latent_dim")?;
    dc.epochs = cfg.parse("epochs")?;
    dc.batch_size = cfg.positive("batch_size")?;
    dc.lr = cfg.positive_f64("lr")?;
    dc.seed = cfg.parse("seed")?;
    dc.precision = cfg.parse("precision")?;
    dc.accumulation = cfg.parse::<Accumulation>("accumulation")?;
    dc.transformations = TransformationSet::about_x(cfg.list("angles")?).map_err(config_err)?;
    dc.good_bins = cfg.positive("good_bins")?;
    dc.ifor_trees = cfg.positive("ifor_trees")?;
    dc.ifor_subsample = cfg.positive("ifor_subsample")?;
    if detector != DetectorKind::GoodIfor {
        if dc.transformations.len() < 2 && detector == DetectorKind::SelfSupervised {
            return Err(CliError::Config("`angles` needs at least two rotations".into()));
        }
        dc.network_spec().validate().map_err(config_err)?;
    }
    Ok(dc)
}

fn detect_data(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset), CliError> {
    let points = cfg.positive("points")?;
    let seed: u64 = cfg.parse("seed")?;
    match (cfg.opt_path("train_root"), cfg.opt_path("test_root")) {
        (Some(train), Some(test)) => {
            let train = datasets::load_directory_with(&train, points, seed)?;
            if train.num_classes() != 1 {
                return Err(CliError::Config("train_root must contain exactly one (normal) class".into()));
            }
            Ok((train, datasets::load_directory_with(&test, points, seed)?))
        }
        (None, None) => {
            let normal: ShapeKind = cfg.parse("normal_shape")?;
            let anomalies: Vec<ShapeKind> = cfg.list("anomaly_shapes")?;
            if anomalies.contains(&normal) {
                return Err(CliError::Config("anomaly_shapes must not contain normal_shape".into()));
            }
            let train_count = cfg.positive("train_count")?;
            let train = synthetic(vec![normal], train_count, cfg)?.build_offset(0)?;
            let mut instances: Vec<Instance> = synthetic(vec![normal], cfg.parse("test_normal")?, cfg)?
                .build_offset(train_count)?
                .instances()
                .to_vec();
            if !anomalies.is_empty() {
                let anom = synthetic(anomalies.clone(), cfg.parse("test_anomalous")?, cfg)?.build_offset(0)?;
                instances.extend(anom.instances().iter().map(|i| Instance {
                    label: i.label + 1,
                    ..i.clone()
                }));
            }
            let names = std::iter::once(normal)
                .chain(anomalies)
                .map(|k| k.name().to_string())
                .collect();
            Ok((train, LabeledDataset::new(instances, names, None)?))
        }
        _ => Err(CliError::Config("give both train_root and test_root, or neither".into())),
    }
}

/// `detect`: train the configured detector, write `scores.csv` and print
/// the AUC.
pub fn detect(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let mut dc = detect_config(cfg)?;
    let (train, test) = detect_data(cfg)?;
    let dir = prepare_dir(cfg)?;
    if dc.detector != DetectorKind::GoodIfor {
        dc.log_path = Some(dir.join("train_log.csv"));
    }
    writeln!(
        out,
        "detector {} on {} normal training clouds, {} test clouds",
        dc.detector,
        train.len(),
        test.len()
    )
    .map_err(out_err)?;
    let result = anomaly::detect(&train, &test, &dc)?;
    result.scores.write_csv(&dir.join("scores.csv"))?;
    let auc = result.scores.auc()?;
    writeln!(out, "AUC {auc:.3}").map_err(out_err)?;
    Ok(())
}

/// Parameter counts over the M sweep, as CSV `layer_kind,m,parameters`.
pub fn paramcount_csv(cfg: &RunConfig) -> Result<String, CliError> {
    let kinds: Vec<LayerKind> = cfg.list("kinds")?;
    let ms: Vec<usize> = cfg.list("m_values")?;
    let (j0, k, classes) = (cfg.positive("j0")?, cfg.positive("k")?, cfg.positive("classes")?);
    let mut csv = String::from("layer_kind,m,parameters\n");
    for kind in kinds {
        for &m in &ms {
            let spec = NetworkSpec::classification(kind, j0, m, k, classes);
            spec.validate().map_err(config_err)?;
            csv.push_str(&format!("{kind},{m},{}\n", spec.parameter_count()));
        }
    }
    Ok(csv)
}

pub fn paramcount(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let csv = paramcount_csv(cfg)?;
    if let Some(path) = cfg.opt_path("output") {
        write_file(&path, &csv)?;
    }
    out.write_all(csv.as_bytes()).map_err(out_err)
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn csv_rows(path: &Path) -> Result<Vec<Vec<String>>, CliError> {
    Ok(read(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|c| c.trim().to_string()).collect())
        .collect())
}

fn parse_cell<T: std::str::FromStr>(path: &Path, line: usize, cell: &str) -> Result<T, CliError> {
    cell.parse()
        .map_err(|_| CliError::Data(format!("{}:{line}: cannot parse `{cell}`", path.display())))
}

/// `eval`: accuracy from predictions, AUC from score files, or a
/// comparison table with average ranks and Wilcoxon p-values.
pub fn evaluate(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let mode = cfg.str("mode")?;
    let csv = match mode {
        "classification" => {
            let path = cfg
                .opt_path("predictions")
                .ok_or_else(|| CliError::Config("mode=classification needs `predictions`".into()))?;
            let rows = csv_rows(&path)?;
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            for (i, r) in rows.iter().enumerate().skip(1) {
                if r.len() != 3 {
                    return Err(CliError::Data(format!("{}:{}: expected 3 columns", path.display(), i + 1)));
                }
                preds.push(parse_cell::<usize>(&path, i + 1, &r[1])?);
                labels.push(parse_cell::<usize>(&path, i + 1, &r[2])?);
            }
            let oa = eval::overall_accuracy(&preds, &labels)?;
            let aa = eval::average_accuracy(&preds, &labels)?;
            writeln!(out, "OA {oa:.4}\nAA {aa:.4}").map_err(out_err)?;
            format!("metric,value\noverall_accuracy,{oa:.6}\naverage_accuracy,{aa:.6}\n")
        }
        "auc" => {
            let files: Vec<PathBuf> = cfg
                .opt_str("scores")
                .ok_or_else(|| CliError::Config("mode=auc needs `scores`".into()))?
                .split(',')
                .map(|s| PathBuf::from(s.trim()))
                .collect();
            let mut csv = String::from("file,auc\n");
            for f in files {
                let auc = ScoredDataset::read_csv(&f)?.auc()?;
                writeln!(out, "{} AUC {auc:.3}", f.display()).map_err(out_err)?;
                csv.push_str(&format!("{},{auc:.6}\n", f.display()));
            }
            csv
        }
        "compare" => {
            let results = match (cfg.opt_path("runs"), cfg.opt_path("table")) {
                (Some(runs), None) => results_from_runs(&runs)?,
                (None, Some(table)) => results_from_table(&table)?,
                _ => return Err(CliError::Config("mode=compare needs exactly one of `runs` or `table`".into())),
            };
            let table = ComparisonTable::build(&results)?;
            out.write_all(table.to_text().as_bytes()).map_err(out_err)?;
            table.to_csv()
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown mode `{other}` (expected classification, auc or compare)"
            )))
        }
    };
    if let Some(path) = cfg.opt_path("output") {
        write_file(&path, &csv)?;
    }
    Ok(())
}

/// Per-method AUCs from a manifest of `method,class,scores_path` rows.
/// Relative paths resolve against the manifest's directory.
fn results_from_runs(path: &Path) -> Result<Vec<MethodResults>, CliError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut methods: Vec<String> = Vec::new();
    let mut classes: Vec<String> = Vec::new();
    let mut cells: Vec<(String, String, f64)> = Vec::new();
    for (i, r) in csv_rows(path)?.iter().enumerate() {
        if i == 0 && r.first().map(|s| s.as_str()) == Some("method") {
            continue;
        }
        if r.len() != 3 {
            return Err(CliError::Data(format!("{}:{}: expected method,class,scores_path", path.display(), i + 1)));
        }
        let auc = ScoredDataset::read_csv(&base.join(&r[2]))?.auc()?;
        if !methods.contains(&r[0]) {
            methods.push(r[0].clone());
        }
        if !classes.contains(&r[1]) {
            classes.push(r[1].clone());
        }
        cells.push((r[0].clone(), r[1].clone(), auc));
    }
    methods
        .iter()
        .map(|m| {
            let values = classes
                .iter()
                .map(|c| {
                    cells
                        .iter()
                        .find(|(mm, cc, _)| mm == m && cc == c)
                        .map(|x| x.2)
                        .ok_or_else(|| CliError::Data(format!("no run for method `{m}` on class `{c}`")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(MethodResults::new(m.clone(), classes.clone(), values)?)
        })
        .collect()
}

/// Per-method values from a `class,<method>,...` table.
fn results_from_table(path: &Path) -> Result<Vec<MethodResults>, CliError> {
    let rows = csv_rows(path)?;
    let header = rows
        .first()
        .ok_or_else(|| CliError::Data(format!("{}: empty table", path.display())))?;
    let classes: Vec<String> = rows.iter().skip(1).map(|r| r[0].clone()).collect();
    (1..header.len())
        .map(|c| {
            let values = rows
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, r)| {
                    let cell = r
                        .get(c)
                        .ok_or_else(|| CliError::Data(format!("{}:{}: missing column", path.display(), i + 1)))?;
                    parse_cell::<f64>(path, i + 1, cell)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(MethodResults::new(header[c].clone(), classes.clone(), values)?)
        })
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// `bench`: wall time per cloud for inference and for one training step,
/// per layer kind and M.
pub fn bench(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let precision: Precision = cfg.parse("precision")?;
    let csv = match precision {
        Precision::F32 => bench_typed::<f32>(cfg, out)?,
        Precision::F64 => bench_typed::<f64>(cfg, out)?,
    };
    if let Some(path) = cfg.opt_path("output") {
        write_file(&path, &csv)?;
    }
    Ok(())
}

fn bench_typed<T: Real>(cfg: &RunConfig, out: &mut dyn Write) -> Result<String, CliError> {
    let kinds: Vec<LayerKind> = cfg.list("kinds")?;
    let ms: Vec<usize> = cfg.list("m_values")?;
    let (j0, k, classes) = (cfg.positive("j0")?, cfg.positive("k")?, cfg.positive("classes")?);
    let points = cfg.positive("points")?;
    let repeats = cfg.positive("repeats")?;
    let seed: u64 = cfg.parse("seed")?;
    let clouds: Vec<PointCloud> = (0..2)
        .map(|i| datasets::generate_shape(ShapeKind::ALL[i], points, datasets::DEFAULT_JITTER, seed + i as u64))
        .collect::<Result<_, _>>()?;
    let header = "layer_kind,m,parameters,forward_mean_ms,forward_std_ms,train_step_mean_ms,train_step_std_ms\n";
    out.write_all(header.as_bytes()).map_err(out_err)?;
    let mut csv = String::from(header);
    for kind in kinds {
        for &m in &ms {
            let spec = NetworkSpec::classification(kind, j0, m, k, classes);
            spec.validate().map_err(config_err)?;
            let net = Network::<T>::new(spec, seed)?;
            let mut fwd = Vec::with_capacity(repeats);
            let mut step = Vec::with_capacity(repeats);
            for r in 0..repeats {
                let t = Instant::now();
                net.forward_eval(&clouds[..1], seed)?;
                fwd.push(t.elapsed().as_secs_f64() * 1e3);
                // Batch norm needs two clouds; time is reported per cloud.
                let t = Instant::now();
                let (outp, tape) = net.forward_train(&clouds, seed + r as u64)?;
                let (_, grad) = training::cross_entropy_loss(&outp, &[0, 1 % classes], classes)?;
                net.backward(&tape, &grad)?;
                step.push(t.elapsed().as_secs_f64() * 1e3 / clouds.len() as f64);
            }
            let (fm, fs) = mean_std(&fwd);
            let (sm, ss) = mean_std(&step);
            let line = format!(
                "{kind},{m},{},{fm:.3},{fs:.3},{sm:.3},{ss:.3}\n",
                compositenet_core::network::count_parameters(&net)
            );
            out.write_all(line.as_bytes()).map_err(out_err)?;
            csv.push_str(&line);
        }
    }
    Ok(csv)
}
