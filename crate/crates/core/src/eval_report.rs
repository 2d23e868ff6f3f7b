//! Screening metrics and the CSV report tables.
//!
//! The reference label of a sample is its majority grader vote. Undefined
//! rates are `None` and are written as `NA`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::SampleRecord;
use crate::error::{Error, Result};
use crate::label_model::{majority_label, max_uncertainty};
use crate::streams::{AblationLevel, ScreeningDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    WholeSet,
    HardOnly,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::WholeSet => "whole",
            Group::HardOnly => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn add(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }
}

/// `matrix[true][predicted]` counts plus the referable collapse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub matrix: Vec<Vec<u64>>,
    pub binary: BinaryCounts,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            matrix: vec![vec![0; num_classes]; num_classes],
            binary: BinaryCounts::default(),
        }
    }

    pub fn from_matrix(matrix: Vec<Vec<u64>>) -> Result<Self> {
        let k = matrix.len();
        if k == 0 || matrix.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion matrix must be square and nonempty"));
        }
        Ok(Self {
            matrix,
            binary: BinaryCounts::default(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.matrix[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.matrix[i][i]).sum()
    }

    /// `trace / N`; `None` for an empty matrix.
    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.trace() as f64 / n as f64)
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.binary.tp += other.binary.tp;
        self.binary.fp += other.binary.fp;
        self.binary.tn += other.binary.tn;
        self.binary.fn_ += other.binary.fn_;
    }
}

/// Per-class F1; 0 where precision + recall is 0 or undefined.
pub fn f1_per_class(conf: &ConfusionCounts) -> Vec<f64> {
    let k = conf.num_classes();
    (0..k)
        .map(|c| {
            let tp = conf.matrix[c][c] as f64;
            let predicted: u64 = (0..k).map(|t| conf.matrix[t][c]).sum();
            let actual: u64 = conf.matrix[c].iter().sum();
            // 2PR/(P+R) simplifies to 2TP/(predicted + actual).
            let denom = (predicted + actual) as f64;
            if denom == 0.0 || tp == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .collect()
}

pub fn sensitivity_specificity(b: &BinaryCounts) -> (Option<f64>, Option<f64>) {
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    (ratio(b.tp, b.tp + b.fn_), ratio(b.tn, b.tn + b.fp))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Lowest score counted as positive at this point; `inf` for the origin.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Sweeps thresholds from the highest score down, one point per
    /// distinct score.
    pub fn new(scores: &[(f64, bool)]) -> Result<Self> {
        let pos = scores.iter().filter(|s| s.1).count();
        let neg = scores.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::InvalidArgument(
                "ROC needs at least one positive and one negative".into(),
            ));
        }
        if scores.iter().any(|s| s.0.is_nan()) {
            return Err(Error::Numerical("NaN screening score".into()));
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut points = vec![RocPoint {
            threshold: f64::INFINITY,
            fpr: 0.0,
            tpr: 0.0,
        }];
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut i = 0;
        while i < sorted.len() {
            let s = sorted[i].0;
            while i < sorted.len() && sorted[i].0 == s {
                if sorted[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            points.push(RocPoint {
                threshold: s,
                fpr: fp as f64 / neg as f64,
                tpr: tp as f64 / pos as f64,
            });
        }
        Ok(Self { points })
    }

    /// Trapezoidal area.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }
}

pub fn auc(scores: &[(f64, bool)]) -> Result<f64> {
    Ok(RocCurve::new(scores)?.area())
}

/// `{0, 0.25, 0.5, 0.75, log_b K}`, dropping interior edges at or above the
/// maximum uncertainty.
pub fn default_bucket_edges(num_classes: usize, log_base: f64) -> Vec<f64> {
    let max = max_uncertainty(num_classes, log_base);
    let mut edges: Vec<f64> = [0.0, 0.25, 0.5, 0.75].into_iter().filter(|&e| e < max).collect();
    edges.push(max);
    edges
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument(
            "bucket edges must be strictly increasing with at least two entries".into(),
        ));
    }
    Ok(())
}

/// Bucket `i` holds `edges[i] <= u < edges[i+1]`; the last bucket is closed
/// and values outside the range go to the nearest end bucket.
pub fn bucket_index(u: f64, edges: &[f64]) -> usize {
    let last = edges.len() - 2;
    (0..=last).find(|&i| u < edges[i + 1]).unwrap_or(last)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

pub fn bucket_accuracy(correct: &[bool], u: &[f64], edges: &[f64]) -> Result<Vec<BucketRow>> {
    check_edges(edges)?;
    if correct.len() != u.len() {
        return Err(Error::shape(format!(
            "{} outcomes for {} uncertainties",
            correct.len(),
            u.len()
        )));
    }
    let mut rows: Vec<BucketRow> = edges
        .windows(2)
        .map(|w| BucketRow {
            lo: w[0],
            hi: w[1],
            count: 0,
            correct: 0,
            accuracy: None,
        })
        .collect();
    for (&ok, &ui) in correct.iter().zip(u) {
        let r = &mut rows[bucket_index(ui, edges)];
        r.count += 1;
        r.correct += usize::from(ok);
    }
    for r in &mut rows {
        r.accuracy = (r.count > 0).then(|| r.correct as f64 / r.count as f64);
    }
    Ok(rows)
}

/// Counts per (uncertainty bucket, class).
pub fn severity_uncertainty(
    classes: &[usize],
    u: &[f64],
    edges: &[f64],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    check_edges(edges)?;
    if classes.len() != u.len() {
        return Err(Error::shape(format!(
            "{} classes for {} uncertainties",
            classes.len(),
            u.len()
        )));
    }
    let mut table = vec![vec![0; num_classes]; edges.len() - 1];
    for (&c, &ui) in classes.iter().zip(u) {
        if c >= num_classes {
            return Err(Error::InvalidArgument(format!("class {c} out of range")));
        }
        table[bucket_index(ui, edges)][c] += 1;
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub group: Group,
    pub n: usize,
    pub confusion: ConfusionCounts,
    pub f1: Vec<f64>,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
    pub edges: Vec<f64>,
    pub buckets: Vec<BucketRow>,
    /// Rows are uncertainty buckets, columns classes.
    pub severity: Vec<Vec<usize>>,
    pub roc: Option<RocCurve>,
}

/// What the evaluator needs to know about the screening setup.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSetup {
    pub num_classes: usize,
    pub referable: Vec<bool>,
    /// Simple/hard cut-off on the empirical uncertainty, in units of `log_base`.
    pub u_threshold: f64,
    pub log_base: f64,
    pub edges: Vec<f64>,
}

/// Scores `decisions[i]` against `records[i]` for one group. Hard-only keeps
/// the records whose empirical uncertainty exceeds the threshold.
pub fn evaluate(
    records: &[&SampleRecord],
    decisions: &[ScreeningDecision],
    group: Group,
    setup: &EvalSetup,
) -> Result<EvalReport> {
    if records.len() != decisions.len() {
        return Err(Error::shape(format!(
            "{} decisions for {} records",
            decisions.len(),
            records.len()
        )));
    }
    let k = setup.num_classes;
    let scale = setup.log_base.ln();
    let mut conf = ConfusionCounts::new(k);
    let mut correct = Vec::new();
    let mut us = Vec::new();
    let mut classes = Vec::new();
    let mut scores = Vec::new();
    for (r, d) in records.iter().zip(decisions) {
        let u = r.u.0 / scale;
        if group == Group::HardOnly && !(u > setup.u_threshold) {
            continue;
        }
        let truth = majority_label(&r.votes).class_index;
        if d.predicted_class >= k || truth >= k {
            return Err(Error::InvalidArgument(format!("class index out of range for {}", r.id)));
        }
        conf.add(truth, d.predicted_class);
        let truth_ref = setup.referable[truth];
        conf.binary.add(truth_ref, d.referable);
        correct.push(truth == d.predicted_class);
        us.push(u);
        classes.push(truth);
        scores.push((d.referable_score, truth_ref));
    }
    let (sensitivity, specificity) = sensitivity_specificity(&conf.binary);
    let roc = RocCurve::new(&scores).ok();
    Ok(EvalReport {
        group,
        n: correct.len(),
        f1: f1_per_class(&conf),
        accuracy: conf.accuracy(),
        sensitivity,
        specificity,
        auc: roc.as_ref().map(RocCurve::area),
        buckets: bucket_accuracy(&correct, &us, &setup.edges)?,
        severity: severity_uncertainty(&classes, &us, &setup.edges, k)?,
        edges: setup.edges.clone(),
        confusion: conf,
        roc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub level: AblationLevel,
    pub f1: Vec<f64>,
    pub overall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub group: Group,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Per-class F1 columns plus the overall accuracy.
    pub fn num_columns(&self) -> usize {
        self.rows.first().map_or(0, |r| r.f1.len() + 1)
    }

    pub fn row(&self, level: AblationLevel) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.level == level)
    }
}

/// One row per entry of `levels`; each must have a result for `group`.
pub fn ablation_table(
    results: &[(AblationLevel, EvalReport)],
    group: Group,
    levels: &[AblationLevel],
) -> Result<AblationTable> {
    let rows = levels
        .iter()
        .map(|&level| {
            results
                .iter()
                .find(|(l, r)| *l == level && r.group == group)
                .map(|(_, r)| AblationRow {
                    level,
                    f1: r.f1.clone(),
                    overall: r.accuracy,
                })
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("ablation variant {level} missing for group {}", group.name()))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { group, rows })
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), num)
}

fn class_cols(prefix: &str, k: usize) -> String {
    (0..k).map(|c| format!(",{prefix}{c}")).collect()
}

pub fn report_csv(reports: &[EvalReport]) -> String {
    let k = reports.first().map_or(0, |r| r.f1.len());
    let mut s = format!("group,n,accuracy,se,sp,auc{},tp,fp,tn,fn\n", class_cols("f1_class", k));
    for r in reports {
        let b = &r.confusion.binary;
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            r.group.name(),
            r.n,
            opt(r.accuracy),
            opt(r.sensitivity),
            opt(r.specificity),
            opt(r.auc)
        );
        for f in &r.f1 {
            s.push(',');
            s.push_str(&num(*f));
        }
        let _ = writeln!(s, ",{},{},{},{}", b.tp, b.fp, b.tn, b.fn_);
    }
    s
}

pub fn buckets_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("group,u_lo,u_hi,count,accuracy\n");
    for r in reports {
        for b in &r.buckets {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.group.name(),
                num(b.lo),
                num(b.hi),
                b.count,
                opt(b.accuracy)
            );
        }
    }
    s
}

pub fn severity_csv(reports: &[EvalReport]) -> String {
    let k = reports.first().map_or(0, |r| r.f1.len());
    let mut s = format!("group,u_lo,u_hi{}\n", class_cols("class", k));
    for r in reports {
        for (row, w) in r.severity.iter().zip(r.edges.windows(2)) {
            let _ = write!(s, "{},{},{}", r.group.name(), num(w[0]), num(w[1]));
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn roc_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("group,threshold,fpr,tpr\n");
    for r in reports {
        let Some(roc) = &r.roc else { continue };
        for p in &roc.points {
            let t = if p.threshold.is_finite() {
                num(p.threshold)
            } else {
                "inf".into()
            };
            let _ = writeln!(s, "{},{},{},{}", r.group.name(), t, num(p.fpr), num(p.tpr));
        }
    }
    s
}

pub fn ablation_csv(tables: &[AblationTable]) -> String {
    let k = tables.first().map_or(0, |t| t.num_columns().saturating_sub(1));
    let mut s = format!("group,variant{},overall\n", class_cols("f1_class", k));
    for t in tables {
        for row in &t.rows {
            let _ = write!(s, "{},{}", t.group.name(), row.level);
            for f in &row.f1 {
                s.push(',');
                s.push_str(&num(*f));
            }
            let _ = writeln!(s, ",{}", opt(row.overall));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mann_whitney(scores: &[(f64, bool)]) -> f64 {
        let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
        let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
        let mut c = 0.0;
        for p in &pos {
            for n in &neg {
                c += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        c / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn f1_examples() {
        let c = ConfusionCounts::from_matrix(vec![vec![2, 1], vec![1, 2]]).unwrap();
        for f in f1_per_class(&c) {
            assert!((f - 2.0 / 3.0).abs() < 1e-12);
        }
        let c = ConfusionCounts::from_matrix(vec![vec![3, 0, 0], vec![0, 4, 0], vec![0, 0, 0]]).unwrap();
        assert_eq!(f1_per_class(&c), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn f1_permutes_with_labels() {
        let m = vec![vec![5, 1, 2], vec![0, 3, 4], vec![1, 1, 6]];
        let perm = [2, 0, 1];
        let mut pm = vec![vec![0; 3]; 3];
        for t in 0..3 {
            for p in 0..3 {
                pm[perm[t]][perm[p]] = m[t][p];
            }
        }
        let f = f1_per_class(&ConfusionCounts::from_matrix(m).unwrap());
        let g = f1_per_class(&ConfusionCounts::from_matrix(pm).unwrap());
        for c in 0..3 {
            assert!((f[c] - g[perm[c]]).abs() < 1e-15);
        }
    }

    #[test]
    fn sensitivity_specificity_examples() {
        let b = BinaryCounts {
            tp: 9,
            fn_: 1,
            tn: 8,
            fp: 2,
        };
        let (se, sp) = sensitivity_specificity(&b);
        assert!((se.unwrap() - 0.9).abs() < 1e-15);
        assert!((sp.unwrap() - 0.8).abs() < 1e-15);
        let (se, sp) = sensitivity_specificity(&BinaryCounts {
            tp: 0,
            fn_: 0,
            tn: 3,
            fp: 1,
        });
        assert_eq!(se, None);
        assert_eq!(sp, Some(0.75));
        let (se, sp) = sensitivity_specificity(&BinaryCounts {
            tp: 4,
            fn_: 0,
            tn: 3,
            fp: 0,
        });
        assert_eq!((se, sp), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[(0.9, true), (0.8, true), (0.1, false)]).unwrap(), 1.0);
        assert_eq!(auc(&[(0.5, true), (0.5, false)]).unwrap(), 0.5);
        let s = [(0.9, true), (0.6, true), (0.7, false), (0.2, false)];
        assert!((auc(&s).unwrap() - 0.75).abs() < 1e-15);
        assert!((mann_whitney(&s) - 0.75).abs() < 1e-15);
        assert!(auc(&[(0.3, true), (0.4, true)]).is_err());
    }

    #[test]
    fn roc_points_are_monotone() {
        let s = [
            (0.3, true),
            (0.3, false),
            (0.9, true),
            (0.1, false),
            (0.5, false),
            (0.5, true),
        ];
        let roc = RocCurve::new(&s).unwrap();
        for w in roc.points.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            assert!(w[1].threshold < w[0].threshold);
        }
        let last = roc.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!((roc.area() - mann_whitney(&s)).abs() < 1e-12);
    }

    #[test]
    fn buckets_cover_and_count() {
        let edges = default_bucket_edges(3, std::f64::consts::E);
        assert_eq!(edges, vec![0.0, 0.25, 0.5, 0.75, 3f64.ln()]);
        let rows = bucket_accuracy(&[true, true], &[0.1, 0.2], &edges).unwrap();
        assert_eq!(rows[0].accuracy, Some(1.0));
        assert!(rows[1..].iter().all(|r| r.accuracy.is_none() && r.count == 0));
        let rows = bucket_accuracy(&[true, true, false], &[0.0, 0.1, 0.6], &edges).unwrap();
        assert_eq!(rows[0].accuracy, Some(1.0));
        assert_eq!(rows[2].accuracy, Some(0.0));
        // the maximum itself lands in the last bucket
        assert_eq!(bucket_index(3f64.ln(), &edges), 3);
        assert_eq!(bucket_index(0.25, &edges), 1);
        assert!(bucket_accuracy(&[true], &[0.1], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn default_edges_for_two_classes_stay_increasing() {
        let e = default_bucket_edges(2, std::f64::consts::E);
        assert_eq!(e, vec![0.0, 0.25, 0.5, 2f64.ln()]);
        let e = default_bucket_edges(3, 2.0);
        assert!((e.last().unwrap() - 3f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn severity_histogram_counts() {
        let edges = [0.0, 0.5, 1.0];
        let t = severity_uncertainty(&[0, 1, 1, 2], &[0.0, 0.7, 0.2, 0.9], &edges, 3).unwrap();
        assert_eq!(t, vec![vec![1, 1, 0], vec![0, 1, 1]]);
    }

    fn report(group: Group, acc: f64) -> EvalReport {
        EvalReport {
            group,
            n: 1,
            confusion: ConfusionCounts::new(3),
            f1: vec![0.5, 0.25, 0.125],
            accuracy: Some(acc),
            sensitivity: None,
            specificity: Some(1.0),
            auc: None,
            edges: vec![0.0, 1.0],
            buckets: vec![],
            severity: vec![vec![0, 0, 0]],
            roc: None,
        }
    }

    #[test]
    fn ablation_table_structure() {
        let results: Vec<_> = AblationLevel::ALL
            .iter()
            .flat_map(|&l| [(l, report(Group::WholeSet, 0.8)), (l, report(Group::HardOnly, 0.6))])
            .collect();
        let t = ablation_table(&results, Group::HardOnly, &AblationLevel::ALL).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.num_columns(), 4);
        assert!(t
            .rows
            .windows(2)
            .all(|w| w[0].f1 == w[1].f1 && w[0].overall == w[1].overall));
        let missing: Vec<_> = results.into_iter().filter(|(l, _)| *l != AblationLevel::M3).collect();
        assert!(ablation_table(&missing, Group::WholeSet, &AblationLevel::ALL).is_err());
        assert_eq!(
            ablation_table(&missing, Group::WholeSet, &[AblationLevel::M2])
                .unwrap()
                .rows
                .len(),
            1
        );
    }

    #[test]
    fn csv_uses_six_decimals_and_na() {
        let s = report_csv(&[report(Group::WholeSet, 0.8)]);
        let line = s.lines().nth(1).unwrap();
        assert!(line.starts_with("whole,1,0.800000,NA,1.000000,NA,0.500000,0.250000,0.125000"));
    }
}
