//! CSV report tables.

use std::path::Path;

use seqens_core::analysis::{FourCaseTable, MetricsReport, SimilarityMatrix};
use seqens_core::calibration::CalibrationReport;
use seqens_core::training::TrainHistory;

use crate::error::{LabError, Result};

/// Reals are written with six digits after the decimal point.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    let s = format!("{:.6}", x);
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: Table) {
        assert_eq!(self.header, other.header, "table headers differ");
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(LabError::io(dir))?;
        }
        std::fs::write(path, self.to_csv()).map_err(LabError::io(path))
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Identifies one row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsKey<'a> {
    pub run_id: &'a str,
    pub mode: &'a str,
    pub member: String,
    pub n: usize,
    pub strategy: &'a str,
    pub temperature: f64,
}

pub fn metrics_table(num_classes: usize) -> Table {
    let mut h: Vec<String> = ["run_id", "mode", "member_or_generation", "N", "strategy", "T", "miou", "pixel_acc"].map(String::from).to_vec();
    h.extend((0..num_classes).map(|c| format!("iou_{}", c)));
    Table::new(h)
}

pub fn push_metrics(t: &mut Table, key: MetricsKey<'_>, m: &MetricsReport) {
    let mut row = vec![
        key.run_id.to_string(),
        key.mode.to_string(),
        key.member,
        key.n.to_string(),
        key.strategy.to_string(),
        num(key.temperature),
        num(m.miou),
        num(m.pixel_accuracy),
    ];
    row.extend(m.per_class_iou.iter().map(|v| v.map_or(String::new(), num)));
    t.push(row);
}

pub fn calibration_table(report: &CalibrationReport, num_bins: usize) -> Table {
    let mut h = vec!["T".to_string(), "ece".to_string()];
    for b in 0..num_bins {
        h.extend([format!("bin{}_count", b), format!("bin{}_conf", b), format!("bin{}_acc", b)]);
    }
    let mut t = Table::new(h);
    for r in &report.rows {
        let mut row = vec![num(r.temperature), num(r.ece)];
        for b in &r.bins {
            row.extend([b.count.to_string(), num(b.mean_confidence), num(b.accuracy)]);
        }
        t.push(row);
    }
    t
}

pub fn diversity_table(pred: &SimilarityMatrix, param: Option<&SimilarityMatrix>) -> Table {
    let mut t = Table::new(["i", "j", "pred_cosine", "param_cosine"]);
    for i in 0..pred.len() {
        for j in 0..pred.len() {
            t.push(vec![i.to_string(), j.to_string(), num(pred.get(i, j)), param.map_or("nan".into(), |p| num(p.get(i, j)))]);
        }
    }
    t
}

pub const FOUR_CASES: [&str; 4] = ["g0_correct_g1_correct", "g0_correct_g1_wrong", "g0_wrong_g1_correct", "g0_wrong_g1_wrong"];

pub fn fourcase_table() -> Table {
    Table::new(["run_id", "case", "count", "fraction"])
}

pub fn push_fourcase(t: &mut Table, run_id: &str, f: &FourCaseTable) {
    for ((name, count), frac) in FOUR_CASES.iter().zip(f.counts()).zip(f.fractions()) {
        t.push(vec![run_id.into(), name.to_string(), count.to_string(), num(frac)]);
    }
}

pub fn history_table() -> Table {
    Table::new(["run_id", "kind", "index", "value"])
}

pub fn push_history(t: &mut Table, run_id: &str, h: &TrainHistory) {
    for (i, l) in h.step_loss.iter().enumerate() {
        t.push(vec![run_id.into(), "loss".into(), i.to_string(), num(*l)]);
    }
    for (e, m) in &h.val_miou {
        t.push(vec![run_id.into(), "val_miou".into(), e.to_string(), num(*m)]);
    }
    t.push(vec![run_id.into(), "final_lr".into(), h.step_loss.len().to_string(), num(h.final_lr)]);
}

pub fn histogram_table() -> Table {
    Table::new(["run_id", "bin", "lower", "upper", "correct", "incorrect"])
}

pub fn push_histogram(t: &mut Table, run_id: &str, correct: &[u64], incorrect: &[u64]) {
    let m = correct.len();
    for b in 0..m {
        t.push(vec![
            run_id.into(),
            b.to_string(),
            num(b as f64 / m as f64),
            num((b + 1) as f64 / m as f64),
            correct[b].to_string(),
            incorrect[b].to_string(),
        ]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_format() {
        assert_eq!(num(1.0), "1.000000");
        assert_eq!(num(7.0 / 12.0), "0.583333");
        assert_eq!(num(-0.0), "0.000000");
    }

    #[test]
    fn csv_has_header() {
        let mut t = Table::new(["a", "b"]);
        t.push(vec!["1".into(), "x".into()]);
        assert_eq!(t.to_csv(), "a,b\n1,x\n");
    }
}
