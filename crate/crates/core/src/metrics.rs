//! Confusion matrices, accuracy and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::LabelSet;
use crate::error::{Error, Result};

/// Rows are true labels, columns predicted labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: LabelSet,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: LabelSet) -> Self {
        let n = labels.len();
        Self { labels, counts: vec![vec![0; n]; n] }
    }

    pub fn from_counts(labels: LabelSet, counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = labels.len();
        if counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!("confusion matrix must be {n}x{n}")));
        }
        Ok(Self { labels, counts })
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let n = self.labels.len();
        for idx in [truth, predicted] {
            if idx >= n {
                return Err(Error::LabelOutOfRange { label: idx, classes: n });
            }
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    /// `trace / total`.
    pub fn overall_accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::EmptyMatrix),
            total => Ok(self.trace() as f64 / total as f64),
        }
    }

    /// Recall per class; `None` for classes without support.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.counts.len())
            .map(|i| match self.support(i) {
                0 => None,
                s => Some(self.counts[i][i] as f64 / s as f64),
            })
            .collect()
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.labels != other.labels {
            return Err(Error::LabelMismatch {
                expected: self.labels.names().to_vec(),
                found: other.labels.names().to_vec(),
            });
        }
        let counts = self
            .counts
            .iter()
            .zip(&other.counts)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        Ok(Self { labels: self.labels.clone(), counts })
    }

    pub fn merge_all<'a>(labels: &LabelSet, shards: impl IntoIterator<Item = &'a Self>) -> Result<Self> {
        shards.into_iter().try_fold(Self::zeros(labels.clone()), |acc, m| acc.merge(m))
    }

    /// Header row and first column carry label names; the corner cell is
    /// `true\predicted`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in self.labels.names() {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (label, row) in self.labels.names().iter().zip(&self.counts) {
            out.push_str(label);
            for c in row {
                write!(out, ",{c}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty confusion CSV".into()))?;
        let labels = LabelSet::new(header.split(',').skip(1).map(str::trim))?;
        let mut counts = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut cells = line.split(',').map(str::trim);
            let row_label = cells.next().unwrap_or_default();
            if labels.names().get(i).map(String::as_str) != Some(row_label) {
                return Err(Error::Parse(format!("row {} label {row_label:?} does not match header", i + 1)));
            }
            let row = cells
                .map(|c| c.parse::<u64>().map_err(|_| Error::Parse(format!("bad count {c:?} in row {row_label}"))))
                .collect::<Result<Vec<_>>>()?;
            counts.push(row);
        }
        Self::from_counts(labels, counts)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

/// Percentage with two decimals, as shown in human-facing output.
pub fn percent(fraction: f64) -> String {
    format!("{:.2}%", fraction * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_accuracy\n");
    for r in history {
        writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_accuracy).expect("string write");
    }
    out
}

/// Line chart of validation accuracy (and loss scaled to its own maximum)
/// against epoch. `None` for an empty history.
pub fn history_svg(history: &[EpochRecord]) -> Option<String> {
    if history.is_empty() {
        return None;
    }
    let (w, h, m) = (640.0, 400.0, 50.0);
    let first = history[0].epoch as f64;
    let span = (history[history.len() - 1].epoch as f64 - first).max(1.0);
    let x = |e: usize| m + (e as f64 - first) / span * (w - 2.0 * m);
    let y = |v: f64| h - m - v.clamp(0.0, 1.0) * (h - 2.0 * m);
    let max_loss = history.iter().map(|r| r.train_loss).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let poly = |f: &dyn Fn(&EpochRecord) -> f64| {
        history.iter().map(|r| format!("{:.2},{:.2}", x(r.epoch), y(f(r)))).collect::<Vec<_>>().join(" ")
    };
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m).unwrap();
    writeln!(svg, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m).unwrap();
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        writeln!(svg, r#"<text x="{}" y="{:.2}" font-size="11" text-anchor="end">{:.2}</text>"#, m - 6.0, y(v) + 4.0, v).unwrap();
    }
    writeln!(svg, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">epoch</text>"#, w / 2.0, h - 12.0).unwrap();
    writeln!(svg, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, m, h - m + 16.0, history[0].epoch).unwrap();
    writeln!(svg, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#, w - m, h - m + 16.0, history[history.len() - 1].epoch).unwrap();
    writeln!(svg, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, poly(&|r| r.val_accuracy)).unwrap();
    writeln!(svg, r#"<polyline fill="none" stroke="firebrick" stroke-width="1" stroke-dasharray="4 3" points="{}"/>"#, poly(&|r| r.train_loss / max_loss)).unwrap();
    writeln!(svg, r#"<text x="{}" y="{}" font-size="12" fill="steelblue">val accuracy</text>"#, w - m - 150.0, m - 20.0).unwrap();
    writeln!(svg, r#"<text x="{}" y="{}" font-size="12" fill="firebrick">train loss / {:.4}</text>"#, w - m - 150.0, m - 6.0, max_loss).unwrap();
    svg.push_str("</svg>\n");
    Some(svg)
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_JSON: &str = "report.json";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const HISTORY_CSV: &str = "history.csv";
pub const HISTORY_SVG: &str = "training_curve.svg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassAccuracy {
    pub label: String,
    pub support: u64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub labels: Vec<String>,
    pub confusion_matrix: Vec<Vec<u64>>,
    pub total: u64,
    pub overall_accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub history: Vec<EpochRecord>,
}

impl Report {
    pub fn new(cm: &ConfusionMatrix, history: &[EpochRecord]) -> Result<Self> {
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            labels: cm.labels.names().to_vec(),
            confusion_matrix: cm.counts.clone(),
            total: cm.total(),
            overall_accuracy: cm.overall_accuracy()?,
            per_class: cm
                .labels
                .names()
                .iter()
                .zip(cm.per_class_accuracy())
                .enumerate()
                .map(|(i, (label, accuracy))| ClassAccuracy { label: label.clone(), support: cm.support(i), accuracy })
                .collect(),
            history: history.to_vec(),
        })
    }

    /// Parses a report and checks it against the schema: known version,
    /// no extra fields, and numbers consistent with the matrix.
    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        let bad = |m: String| Err(Error::Parse(format!("report: {m}")));
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", report.schema_version));
        }
        let cm = ConfusionMatrix::from_counts(LabelSet::new(report.labels.clone())?, report.confusion_matrix.clone())?;
        if cm.total() != report.total {
            return bad("total disagrees with the matrix".into());
        }
        if cm.overall_accuracy()? != report.overall_accuracy {
            return bad("overall_accuracy disagrees with the matrix".into());
        }
        let expected = Report::new(&cm, &report.history)?;
        if expected.per_class != report.per_class {
            return bad("per_class disagrees with the matrix".into());
        }
        if report.history.iter().any(|r| !(0.0..=1.0).contains(&r.val_accuracy)) {
            return bad("val_accuracy outside [0, 1]".into());
        }
        Ok(report)
    }
}

/// Writes the JSON report and CSV matrix, plus the history CSV and SVG
/// curve when `history` is non-empty. Returns the written paths.
pub fn report(cm: &ConfusionMatrix, history: &[EpochRecord], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, contents: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, contents)?;
        written.push(path);
        Ok(())
    };
    let mut json = serde_json::to_string_pretty(&Report::new(cm, history)?)?;
    json.push('\n');
    put(REPORT_JSON, json)?;
    put(CONFUSION_CSV, cm.to_csv())?;
    if let Some(svg) = history_svg(history) {
        put(HISTORY_CSV, history_csv(history))?;
        put(HISTORY_SVG, svg)?;
    }
    Ok(written)
}

/// One-line-per-class text summary with two-decimal percentages.
pub fn summary_text(cm: &ConfusionMatrix) -> Result<String> {
    let mut out = String::new();
    for (i, (label, acc)) in cm.labels.names().iter().zip(cm.per_class_accuracy()).enumerate() {
        let shown = acc.map_or_else(|| "undefined".to_string(), percent);
        writeln!(out, "{label:<12} {shown:>9}  (n={})", cm.support(i)).expect("string write");
    }
    writeln!(out, "{:<12} {:>9}  (n={})", "overall", percent(cm.overall_accuracy()?), cm.total()).expect("string write");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(n: usize) -> LabelSet {
        LabelSet::new((0..n).map(|i| format!("c{i}"))).unwrap()
    }

    #[test]
    fn identity_is_perfect() {
        let cm = ConfusionMatrix::from_counts(labels(3), vec![vec![4, 0, 0], vec![0, 2, 0], vec![0, 0, 9]]).unwrap();
        assert_eq!(cm.overall_accuracy().unwrap(), 1.0);
        assert!(cm.per_class_accuracy().iter().all(|a| *a == Some(1.0)));
    }

    #[test]
    fn empty_matrix_errors_and_zero_support_is_undefined() {
        let cm = ConfusionMatrix::zeros(labels(2));
        assert!(matches!(cm.overall_accuracy(), Err(Error::EmptyMatrix)));
        let cm = ConfusionMatrix::from_counts(labels(2), vec![vec![0, 3], vec![0, 0]]).unwrap();
        assert_eq!(cm.per_class_accuracy(), vec![Some(0.0), None]);
    }

    #[test]
    fn record_and_bounds() {
        let mut cm = ConfusionMatrix::zeros(labels(2));
        cm.record(0, 1).unwrap();
        cm.record(1, 1).unwrap();
        assert_eq!(cm.counts(), &[vec![0, 1], vec![0, 1]]);
        assert!(cm.record(2, 0).is_err());
        assert!(ConfusionMatrix::from_counts(labels(2), vec![vec![1, 2]]).is_err());
    }

    #[test]
    fn merge_rules() {
        let a = ConfusionMatrix::from_counts(labels(2), vec![vec![1, 2], vec![3, 4]]).unwrap();
        assert_eq!(a.merge(&ConfusionMatrix::zeros(labels(2))).unwrap(), a);
        assert!(a.merge(&ConfusionMatrix::zeros(labels(3))).is_err());
        let other = LabelSet::new(["x", "y"]).unwrap();
        assert!(a.merge(&ConfusionMatrix::zeros(other)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let cm = ConfusionMatrix::from_counts(LabelSet::new(["anger", "sadness"]).unwrap(), vec![vec![7, 1], vec![0, 5]]).unwrap();
        let csv = cm.to_csv();
        assert_eq!(csv, "true\\predicted,anger,sadness\nanger,7,1\nsadness,0,5\n");
        assert_eq!(ConfusionMatrix::from_csv(&csv).unwrap(), cm);
        assert!(ConfusionMatrix::from_csv("x,a,b\nb,1,2\na,3,4\n").is_err());
        assert!(ConfusionMatrix::from_csv("x,a,b\na,1,-2\nb,3,4\n").is_err());
        assert!(ConfusionMatrix::from_csv("x,a,b\na,1,2\n").is_err());
    }

    #[test]
    fn report_files_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let cm = ConfusionMatrix::from_counts(labels(2), vec![vec![3, 1], vec![0, 0]]).unwrap();
        let written = report(&cm, &[], dir.path()).unwrap();
        assert_eq!(written.len(), 2);
        assert!(!dir.path().join(HISTORY_SVG).exists());
        let text = fs::read_to_string(dir.path().join(REPORT_JSON)).unwrap();
        let parsed = Report::from_json(&text).unwrap();
        assert_eq!(parsed.overall_accuracy, 0.75);
        assert_eq!(parsed.per_class[1].accuracy, None);

        let history = [
            EpochRecord { epoch: 1, train_loss: 1.2, val_accuracy: 0.5 },
            EpochRecord { epoch: 2, train_loss: 0.4, val_accuracy: 0.9 },
        ];
        let other = tempfile::tempdir().unwrap();
        assert_eq!(report(&cm, &history, other.path()).unwrap().len(), 4);
        let again = tempfile::tempdir().unwrap();
        report(&cm, &history, again.path()).unwrap();
        for name in [REPORT_JSON, CONFUSION_CSV, HISTORY_CSV, HISTORY_SVG] {
            assert_eq!(fs::read(other.path().join(name)).unwrap(), fs::read(again.path().join(name)).unwrap());
        }
    }

    #[test]
    fn schema_violations_rejected() {
        let cm = ConfusionMatrix::from_counts(labels(2), vec![vec![3, 1], vec![0, 2]]).unwrap();
        let good = serde_json::to_value(Report::new(&cm, &[]).unwrap()).unwrap();
        let mut extra = good.clone();
        extra["surprise"] = serde_json::json!(1);
        let mut wrong_total = good.clone();
        wrong_total["total"] = serde_json::json!(99);
        let mut wrong_version = good.clone();
        wrong_version["schema_version"] = serde_json::json!(7);
        let mut missing = good.clone();
        missing.as_object_mut().unwrap().remove("overall_accuracy");
        for bad in [extra, wrong_total, wrong_version, missing] {
            assert!(Report::from_json(&bad.to_string()).is_err(), "{bad}");
        }
        assert!(Report::from_json(&good.to_string()).is_ok());
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(percent(469.0 / 1129.0), "41.54%");
        assert_eq!(percent(1.0), "100.00%");
    }

    fn matrix(n: usize) -> impl Strategy<Value = Vec<Vec<u64>>> {
        prop::collection::vec(prop::collection::vec(0u64..50, n), n)
    }

    proptest! {
        #[test]
        fn merge_commutes((a, b) in (2usize..6).prop_flat_map(|n| (matrix(n), matrix(n)))) {
            let n = a.len();
            let a = ConfusionMatrix::from_counts(labels(n), a).unwrap();
            let b = ConfusionMatrix::from_counts(labels(n), b).unwrap();
            prop_assert_eq!(a.merge(&b).unwrap(), b.merge(&a).unwrap());
        }

        #[test]
        fn overall_is_support_weighted_mean(m in (2usize..6).prop_flat_map(matrix)) {
            let cm = ConfusionMatrix::from_counts(labels(m.len()), m).unwrap();
            prop_assume!(cm.total() > 0);
            let weighted: f64 = cm.per_class_accuracy().iter().enumerate()
                .filter_map(|(i, a)| a.map(|a| a * cm.support(i) as f64)).sum();
            let overall = cm.overall_accuracy().unwrap();
            prop_assert!((weighted / cm.total() as f64 - overall).abs() < 1e-12);
            for a in cm.per_class_accuracy().into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}
