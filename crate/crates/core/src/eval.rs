//! Figures of merit: accuracy, ROC AUC, average rank and the one-sided
//! Wilcoxon signed-rank test, plus the comparison table that combines them.

use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest number of nonzero differences handled by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 20;

/// Fewest nonzero differences the signed-rank test accepts.
pub const WILCOXON_MIN_N: usize = 5;

fn check_pairs(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::mismatch("prediction count", labels.len(), preds.len()));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy needs at least one instance".into()));
    }
    Ok(())
}

/// Fraction of correct predictions.
pub fn overall_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Unweighted mean of per-class recall over the classes present in `labels`.
pub fn average_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = vec![0usize; classes];
    let mut hit = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        total[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    let present: Vec<f64> = total
        .iter()
        .zip(&hit)
        .filter(|(&t, _)| t > 0)
        .map(|(&t, &h)| h as f64 / t as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Ranks in ascending order, doubled so that mid-ranks stay integral.
/// `same` decides whether two adjacent sorted values tie.
fn doubled_midranks(values: &[f64], same: impl Fn(f64, f64) -> bool) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && same(values[order[i]], values[order[j + 1]]) {
            j += 1;
        }
        // Positions i..=j share rank ((i+1) + (j+1)) / 2.
        let r = (i + j + 2) as u64;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve for "higher score = anomalous"; `anomalous[i]`
/// marks the positive instances. Ties count one half.
pub fn roc_auc(scores: &[f64], anomalous: &[bool]) -> Result<f64> {
    if scores.len() != anomalous.len() {
        return Err(Error::mismatch("label count", scores.len(), anomalous.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let pos = anomalous.iter().filter(|&&a| a).count() as u64;
    let neg = scores.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::AucUndefined);
    }
    let ranks = doubled_midranks(scores, |a, b| a == b);
    let rank_sum: u64 = ranks.iter().zip(anomalous).filter(|(_, &a)| a).map(|(r, _)| r).sum();
    // Twice the Mann-Whitney U of the positives.
    let u2 = rank_sum - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// Per-class metric values of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResults {
    pub method: String,
    pub classes: Vec<String>,
    pub values: Vec<f64>,
}

impl MethodResults {
    pub fn new(method: impl Into<String>, classes: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if classes.len() != values.len() {
            return Err(Error::mismatch("value count", classes.len(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("method results"));
        }
        Ok(Self {
            method: method.into(),
            classes,
            values,
        })
    }
}

fn check_table(results: &[MethodResults]) -> Result<()> {
    if results.len() < 2 {
        return Err(Error::InvalidArgument("ranking needs at least two methods".into()));
    }
    let classes = &results[0].classes;
    if classes.is_empty() {
        return Err(Error::InvalidArgument("ranking needs at least one class".into()));
    }
    for r in results {
        if &r.classes != classes {
            return Err(Error::InvalidArgument(format!(
                "method `{}` covers a different class list than `{}`",
                r.method, results[0].method
            )));
        }
        if r.values.len() != classes.len() || r.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("method `{}` has malformed values", r.method)));
        }
    }
    Ok(())
}

/// Per-class ranks (1 = highest value, ties share the mean rank),
/// indexed `[class][method]`.
pub fn class_ranks(results: &[MethodResults]) -> Result<Vec<Vec<f64>>> {
    check_table(results)?;
    Ok((0..results[0].classes.len())
        .map(|c| {
            let negated: Vec<f64> = results.iter().map(|r| -r.values[c]).collect();
            doubled_midranks(&negated, |a, b| a == b)
                .into_iter()
                .map(|r| r as f64 / 2.0)
                .collect()
        })
        .collect())
}

/// Mean rank of each method over the classes.
pub fn average_rank(results: &[MethodResults]) -> Result<Vec<f64>> {
    let ranks = class_ranks(results)?;
    let mut avg = vec![0.0; results.len()];
    for row in &ranks {
        for (a, r) in avg.iter_mut().zip(row) {
            *a += r;
        }
    }
    Ok(avg.into_iter().map(|s| s / ranks.len() as f64).collect())
}

/// Outcome of a one-sided signed-rank test of H1: a > b.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wilcoxon {
    /// Number of nonzero differences.
    pub n: usize,
    /// Sum of the ranks of positive differences.
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Differences are compared with a relative tolerance so that values
/// printed to a few decimals tie the way they read.
fn nearly_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

struct SignedRanks {
    doubled: Vec<u64>,
    positive: Vec<bool>,
}

fn signed_ranks(a: &[f64], b: &[f64]) -> Result<SignedRanks> {
    if a.len() != b.len() {
        return Err(Error::mismatch("paired sample length", a.len(), b.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired samples"));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| !nearly_equal(**x, **y))
        .map(|(x, y)| x - y)
        .collect();
    if diffs.is_empty() {
        return Err(Error::NoInformation);
    }
    if diffs.len() < WILCOXON_MIN_N {
        return Err(Error::InvalidArgument(format!(
            "signed-rank test needs at least {WILCOXON_MIN_N} nonzero differences, got {}",
            diffs.len()
        )));
    }
    let mags: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    Ok(SignedRanks {
        doubled: doubled_midranks(&mags, nearly_equal),
        positive: diffs.iter().map(|&d| d > 0.0).collect(),
    })
}

impl SignedRanks {
    fn doubled_statistic(&self) -> u64 {
        self.doubled.iter().zip(&self.positive).filter(|(_, &p)| p).map(|(r, _)| r).sum()
    }
}

/// Exact p-value P(W+ >= observed) under random signs, counted over all
/// 2^n sign assignments by dynamic programming on the doubled rank sum.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    let sr = signed_ranks(a, b)?;
    let n = sr.doubled.len();
    if n > 63 {
        return Err(Error::InvalidArgument(format!("exact signed-rank test supports n <= 63, got {n}")));
    }
    let total: u64 = sr.doubled.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in &sr.doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w = sr.doubled_statistic();
    let tail: u64 = counts[w as usize..].iter().sum();
    Ok(Wilcoxon {
        n,
        statistic: w as f64 / 2.0,
        p_value: tail as f64 / (1u64 << n) as f64,
        exact: true,
    })
}

/// Normal approximation with tie-corrected variance and a 0.5 continuity
/// correction.
pub fn wilcoxon_normal_approx(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    let sr = signed_ranks(a, b)?;
    let n = sr.doubled.len() as f64;
    let w = sr.doubled_statistic() as f64 / 2.0;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = sr.doubled.clone();
    sorted.sort_unstable();
    let ties: f64 = sorted
        .chunk_by(|x, y| x == y)
        .map(|g| {
            let t = g.len() as f64;
            t * t * t - t
        })
        .sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
    let z = (w - mean - 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(Wilcoxon {
        n: sr.doubled.len(),
        statistic: w,
        p_value: normal.sf(z),
        exact: false,
    })
}

/// One-sided test of H1: a > b. Exact for up to 20 nonzero differences,
/// normal approximation above.
pub fn wilcoxon_one_sided(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    let n = a.iter().zip(b).filter(|(x, y)| !nearly_equal(**x, **y)).count();
    if a.len() == b.len() && n > WILCOXON_EXACT_MAX {
        wilcoxon_normal_approx(a, b)
    } else {
        wilcoxon_exact(a, b)
    }
}

/// Per-class results of several methods with average-rank and Wilcoxon
/// footer rows. The Wilcoxon row tests the best-ranked method against each
/// other method.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub classes: Vec<String>,
    pub methods: Vec<String>,
    /// `[class][method]`.
    pub values: Vec<Vec<f64>>,
    pub avg_rank: Vec<f64>,
    pub best: usize,
    /// `None` for the best method or when the test is not applicable.
    pub wilcoxon_p: Vec<Option<f64>>,
}

impl ComparisonTable {
    pub fn build(results: &[MethodResults]) -> Result<Self> {
        let avg_rank = average_rank(results)?;
        let best = avg_rank
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("at least two methods");
        let wilcoxon_p = results
            .iter()
            .enumerate()
            .map(|(m, r)| {
                if m == best {
                    return None;
                }
                wilcoxon_one_sided(&results[best].values, &r.values).ok().map(|w| w.p_value)
            })
            .collect();
        let classes = results[0].classes.clone();
        let values = (0..classes.len())
            .map(|c| results.iter().map(|r| r.values[c]).collect())
            .collect();
        Ok(Self {
            classes,
            methods: results.iter().map(|r| r.method.clone()).collect(),
            values,
            avg_rank,
            best,
            wilcoxon_p,
        })
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let mut rows = vec![std::iter::once("Class".to_string()).chain(self.methods.iter().cloned()).collect()];
        for (class, vals) in self.classes.iter().zip(&self.values) {
            rows.push(
                std::iter::once(class.clone())
                    .chain(vals.iter().map(|v| format!("{v:.3}")))
                    .collect(),
            );
        }
        rows.push(
            std::iter::once("Avg. Rank".to_string())
                .chain(self.avg_rank.iter().map(|r| format!("{r:.3}")))
                .collect(),
        );
        rows.push(
            std::iter::once("Wilcoxon-p".to_string())
                .chain(self.wilcoxon_p.iter().map(|p| match p {
                    Some(p) => format_p(*p),
                    None => "--".to_string(),
                }))
                .collect(),
        );
        rows
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, &w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 || i == self.classes.len() {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.rows() {
            let cells: Vec<String> = row.iter().map(|c| csv_cell(c)).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

fn format_p(p: f64) -> String {
    if p < 0.01 {
        format!("{p:.2e}")
    } else {
        format!("{p:.3}")
    }
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
