//! ΔRMSD summaries: mean with standard error by initial-RMSD category,
//! histograms, and (initial RMSD, ΔRMSD) scatter rows.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::molecule::ConformationDof;
use crate::optimizer::{OptimizationResult, Termination};
use crate::sampling::{label_pose, LabelThresholds, PoseLabel, PoseRecord};

/// One optimized pose, as persisted and as consumed by the reports. Records
/// produced by external programs only need the ids and the two RMSDs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub target_id: String,
    pub pose_index: usize,
    pub initial_rmsd: f64,
    pub final_rmsd: f64,
    pub delta_rmsd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination: Option<Termination>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_exits: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_dof: Option<ConformationDof>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_dof: Option<ConformationDof>,
}

impl ResultRecord {
    pub fn from_optimization(pose: &PoseRecord, result: &OptimizationResult) -> Self {
        Self {
            target_id: pose.target_id.clone(),
            pose_index: pose.pose_index,
            initial_rmsd: result.initial_rmsd,
            final_rmsd: result.final_rmsd,
            delta_rmsd: result.delta_rmsd,
            initial_score: Some(result.initial_score),
            final_score: Some(result.final_score),
            steps: Some(result.steps),
            termination: Some(result.termination),
            grid_exits: Some(result.grid_exits),
            initial_dof: Some(result.initial_dof.clone()),
            final_dof: Some(result.final_dof.clone()),
        }
    }

    pub fn pose_id(&self) -> String {
        format!("{}/{}", self.target_id, self.pose_index)
    }
}

pub fn write_results<W: Write>(records: &[ResultRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_results<R: BufRead>(r: R) -> Result<Vec<ResultRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ResultRecord = serde_json::from_str(&line)
            .map_err(|e| Error::FormatAtLine { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    All,
    Binding,
    Ambiguous,
    NonBinding,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::All, Category::Binding, Category::Ambiguous, Category::NonBinding];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::All => "all",
            Category::Binding => "binding",
            Category::Ambiguous => "ambiguous",
            Category::NonBinding => "non-binding",
        }
    }

    fn of(label: PoseLabel) -> Self {
        match label {
            PoseLabel::Binding => Category::Binding,
            PoseLabel::Ambiguous => Category::Ambiguous,
            PoseLabel::NonBinding => Category::NonBinding,
        }
    }
}

/// Summary of ΔRMSD over one category. Statistics that need more samples
/// than are available are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: Category,
    pub n: usize,
    pub mean: Option<f64>,
    /// Standard error of the mean, `sigma / sqrt(n)`.
    pub sem: Option<f64>,
    /// Sample standard deviation (n - 1 denominator).
    pub sigma: Option<f64>,
}

impl CategoryStats {
    pub fn from_values(category: Category, values: &[f64]) -> Self {
        let n = values.len();
        let mean = (n > 0).then(|| values.iter().sum::<f64>() / n as f64);
        let sigma = match (n, mean) {
            (2.., Some(m)) => {
                Some((values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
            }
            _ => None,
        };
        let sem = sigma.map(|s| s / (n as f64).sqrt());
        Self { category, n, mean, sem, sigma }
    }
}

/// Per-category ΔRMSD statistics for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub method: String,
    pub rows: Vec<CategoryStats>,
}

impl IterationReport {
    pub fn row(&self, category: Category) -> &CategoryStats {
        self.rows.iter().find(|r| r.category == category).expect("all categories present")
    }
}

/// Categories are assigned by initial RMSD.
pub fn delta_rmsd_stats(method: &str, results: &[ResultRecord], thresholds: &LabelThresholds) -> Result<IterationReport> {
    let mut buckets: [Vec<f64>; 4] = Default::default();
    for r in results {
        let cat = Category::of(label_pose(r.initial_rmsd, thresholds)?);
        buckets[0].push(r.delta_rmsd);
        let i = Category::ALL.iter().position(|c| *c == cat).unwrap();
        buckets[i].push(r.delta_rmsd);
    }
    let rows = Category::ALL
        .iter()
        .zip(&buckets)
        .map(|(c, v)| CategoryStats::from_values(*c, v))
        .collect();
    Ok(IterationReport { method: method.to_string(), rows })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Fixed-width bins spanning the values, aligned to multiples of `width`.
pub fn histogram(values: &[f64], width: f64) -> Result<Vec<HistogramBin>> {
    histogram_over(values, values, width)
}

/// Bins spanning `range_values` (so several series can share edges), counting `values`.
pub fn histogram_over(values: &[f64], range_values: &[f64], width: f64) -> Result<Vec<HistogramBin>> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(contract(format!("bin width must be positive, got {width}")));
    }
    if values.iter().chain(range_values).any(|v| !v.is_finite()) {
        return Err(contract("histogram values must be finite"));
    }
    if range_values.is_empty() {
        return Ok(Vec::new());
    }
    let min = range_values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = range_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = (min / width).floor();
    let bins = (((max / width).floor() - start) as usize + 1).max(1);
    let mut counts = vec![0usize; bins];
    for v in values {
        let k = ((v / width).floor() - start).clamp(0.0, (bins - 1) as f64) as usize;
        counts[k] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            lo: (start + k as f64) * width,
            hi: (start + k as f64 + 1.0) * width,
            count,
        })
        .collect())
}

/// Combined report for several methods optimizing the same initial poses.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodComparison {
    pub reports: Vec<IterationReport>,
    pub report_csv: String,
    pub histogram_csv: String,
    pub scatter_csv: String,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Table-layout report plus ΔRMSD histogram and scatter CSVs.
/// Every set must cover exactly the same pose ids.
pub fn compare_methods(
    sets: &[(String, Vec<ResultRecord>)],
    thresholds: &LabelThresholds,
    bin_width: f64,
) -> Result<MethodComparison> {
    let id_sets: Vec<BTreeSet<String>> = sets
        .iter()
        .map(|(_, rs)| rs.iter().map(ResultRecord::pose_id).collect())
        .collect();
    let union: BTreeSet<String> = id_sets.iter().flatten().cloned().collect();
    let mut missing = Vec::new();
    for ((name, _), ids) in sets.iter().zip(&id_sets) {
        missing.extend(union.difference(ids).map(|id| format!("{name}:{id}")));
    }
    if !missing.is_empty() {
        return Err(Error::Alignment { missing });
    }

    let mut reports = Vec::with_capacity(sets.len());
    let mut report_csv = String::from("method,category,n,mean_delta_rmsd,sem,sigma\n");
    for (name, rs) in sets {
        let rep = delta_rmsd_stats(name, rs, thresholds)?;
        for row in &rep.rows {
            writeln!(
                report_csv,
                "{},{},{},{},{},{}",
                name,
                row.category.as_str(),
                row.n,
                opt(row.mean),
                opt(row.sem),
                opt(row.sigma)
            )
            .unwrap();
        }
        reports.push(rep);
    }

    let all_deltas: Vec<f64> = sets.iter().flat_map(|(_, rs)| rs.iter().map(|r| r.delta_rmsd)).collect();
    let mut histogram_csv = String::from("method,bin_lo,bin_hi,count\n");
    let mut scatter_csv = String::from("method,pose_id,initial_rmsd,delta_rmsd\n");
    for (name, rs) in sets {
        let deltas: Vec<f64> = rs.iter().map(|r| r.delta_rmsd).collect();
        for bin in histogram_over(&deltas, &all_deltas, bin_width)? {
            writeln!(histogram_csv, "{},{},{},{}", name, bin.lo, bin.hi, bin.count).unwrap();
        }
        let mut sorted: Vec<&ResultRecord> = rs.iter().collect();
        sorted.sort_by(|a, b| (&a.target_id, a.pose_index).cmp(&(&b.target_id, b.pose_index)));
        for r in sorted {
            writeln!(scatter_csv, "{},{},{},{}", name, r.pose_id(), r.initial_rmsd, r.delta_rmsd).unwrap();
        }
    }
    Ok(MethodComparison { reports, report_csv, histogram_csv, scatter_csv })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(index: usize, initial: f64, delta: f64) -> ResultRecord {
        ResultRecord {
            target_id: "t".into(),
            pose_index: index,
            initial_rmsd: initial,
            final_rmsd: initial + delta,
            delta_rmsd: delta,
            initial_score: None,
            final_score: None,
            steps: None,
            termination: None,
            grid_exits: None,
            initial_dof: None,
            final_dof: None,
        }
    }

    #[test]
    fn sample_statistics() {
        let s = CategoryStats::from_values(Category::All, &[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, Some(2.0));
        assert_eq!(s.sigma, Some(1.0));
        assert!((s.sem.unwrap() - 0.5773502691896258).abs() < 1e-15);

        let s = CategoryStats::from_values(Category::All, &[4.5]);
        assert_eq!((s.mean, s.sem, s.sigma), (Some(4.5), None, None));
        let s = CategoryStats::from_values(Category::All, &[]);
        assert_eq!((s.n, s.mean), (0, None));
    }

    #[test]
    fn histogram_conserves_counts() {
        let v = [-1.2, -0.1, 0.0, 0.49, 0.5, 3.0];
        let h = histogram(&v, 0.5).unwrap();
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), v.len());
        assert_eq!(h[0].lo, -1.5);
        assert_eq!(h.last().unwrap().hi, 3.5);
        assert!(histogram(&[], 0.5).unwrap().is_empty());
    }

    #[test]
    fn misaligned_sets_list_missing_ids() {
        let a = vec![rec(0, 1.0, 0.1), rec(1, 3.0, 0.2)];
        let b = vec![rec(0, 1.0, 0.1)];
        let err = compare_methods(&[("a".into(), a), ("b".into(), b)], &LabelThresholds::default(), 0.5)
            .unwrap_err();
        match err {
            Error::Alignment { missing } => assert_eq!(missing, vec!["b:t/1".to_string()]),
            other => panic!("{other}"),
        }
    }
}
