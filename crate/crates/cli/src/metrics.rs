//! Classification metrics with macro (unweighted) averaging over classes.
//!
//! For class `c` with `tp` correct predictions, `fp` sequences of other
//! classes predicted as `c` and `fn` sequences of `c` predicted as something
//! else (including "unclassifiable"):
//!
//! * precision = `tp / (tp + fp)`, taken as 0 when nothing was predicted `c`
//! * recall (per-class accuracy) = `tp / count`
//! * F1 = `2 tp / (2 tp + fp + fn)`, taken as 0 when the denominator is 0
//!
//! Macro precision and macro F1 are plain means over classes.

use std::fmt::Write as _;
use std::path::Path;

use genhmm::checkpoint::write_atomic;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Sequences of each class that every model scored as impossible.
    pub unclassified: Vec<usize>,
    /// `(key, value)` pairs describing the run, emitted verbatim.
    pub metadata: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        MetricsReport {
            classes,
            confusion: vec![vec![0; n]; n],
            unclassified: vec![0; n],
            metadata: Vec::new(),
        }
    }

    pub fn from_confusion(classes: Vec<String>, confusion: Vec<Vec<usize>>) -> Self {
        let n = classes.len();
        assert!(confusion.len() == n && confusion.iter().all(|r| r.len() == n), "confusion must be square");
        MetricsReport {
            classes,
            confusion,
            unclassified: vec![0; n],
            metadata: Vec::new(),
        }
    }

    pub fn record(&mut self, truth: usize, predicted: Option<usize>) {
        match predicted {
            Some(p) => self.confusion[truth][p] += 1,
            None => self.unclassified[truth] += 1,
        }
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.push((key.into(), value.to_string()));
    }

    pub fn count(&self, class: usize) -> usize {
        self.confusion[class].iter().sum::<usize>() + self.unclassified[class]
    }

    pub fn total(&self) -> usize {
        (0..self.classes.len()).map(|c| self.count(c)).sum()
    }

    fn true_positives(&self, c: usize) -> usize {
        self.confusion[c][c]
    }

    fn predicted(&self, c: usize) -> usize {
        self.confusion.iter().map(|row| row[c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: usize = (0..self.classes.len()).map(|c| self.true_positives(c)).sum();
        trace as f64 / total as f64
    }

    pub fn class_accuracy(&self, c: usize) -> f64 {
        let n = self.count(c);
        if n == 0 {
            0.0
        } else {
            self.true_positives(c) as f64 / n as f64
        }
    }

    pub fn precision(&self, c: usize) -> f64 {
        let p = self.predicted(c);
        if p == 0 {
            0.0
        } else {
            self.true_positives(c) as f64 / p as f64
        }
    }

    pub fn f1(&self, c: usize) -> f64 {
        let tp = self.true_positives(c);
        let fp = self.predicted(c) - tp;
        let fn_ = self.count(c) - tp;
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    }

    fn macro_mean(&self, f: impl Fn(usize) -> f64) -> f64 {
        let n = self.classes.len();
        if n == 0 {
            return 0.0;
        }
        (0..n).map(f).sum::<f64>() / n as f64
    }

    pub fn macro_precision(&self) -> f64 {
        self.macro_mean(|c| self.precision(c))
    }

    pub fn macro_f1(&self) -> f64 {
        self.macro_mean(|c| self.f1(c))
    }

    /// Line-delimited `key=value` document.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
        kv("accuracy", format!("{:.6}", self.accuracy()));
        kv("macro_precision", format!("{:.6}", self.macro_precision()));
        kv("macro_f1", format!("{:.6}", self.macro_f1()));
        kv("total", self.total().to_string());
        kv("unclassified", self.unclassified.iter().sum::<usize>().to_string());
        kv("classes", self.classes.len().to_string());
        for (c, label) in self.classes.iter().enumerate() {
            kv(&format!("class.{c}.label"), label.clone());
            kv(&format!("class.{c}.count"), self.count(c).to_string());
            kv(&format!("class.{c}.accuracy"), format!("{:.6}", self.class_accuracy(c)));
            kv(&format!("class.{c}.precision"), format!("{:.6}", self.precision(c)));
            kv(&format!("class.{c}.f1"), format!("{:.6}", self.f1(c)));
            kv(&format!("class.{c}.unclassified"), self.unclassified[c].to_string());
            let row: Vec<String> = self.confusion[c].iter().map(|v| v.to_string()).collect();
            kv(&format!("confusion.{c}"), row.join(" "));
        }
        for (k, v) in &self.metadata {
            kv(k, v.clone());
        }
        out
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let width = self.classes.iter().map(|c| c.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        write!(out, "{:>width$}", "true\\pred").unwrap();
        for c in &self.classes {
            write!(out, " {c:>width$}").unwrap();
        }
        writeln!(out, " {:>7} {:>8} {:>9} {:>6}", "uncls", "accuracy", "precision", "f1").unwrap();
        for (i, label) in self.classes.iter().enumerate() {
            write!(out, "{label:>width$}").unwrap();
            for v in &self.confusion[i] {
                write!(out, " {v:>width$}").unwrap();
            }
            writeln!(
                out,
                " {:>7} {:>8.4} {:>9.4} {:>6.4}",
                self.unclassified[i],
                self.class_accuracy(i),
                self.precision(i),
                self.f1(i)
            )
            .unwrap();
        }
        writeln!(
            out,
            "accuracy {:.4}  macro precision {:.4}  macro F1 {:.4}  ({} sequences)",
            self.accuracy(),
            self.macro_precision(),
            self.macro_f1(),
            self.total()
        )
        .unwrap();
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_atomic(path, &self.to_kv()).map_err(CliError::from)
    }
}
