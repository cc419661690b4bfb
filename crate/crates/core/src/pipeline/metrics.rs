use std::fmt::Write as _;

use crate::classifier::{DrClass, NUM_CLASSES};
use crate::error::{Error, Result};

/// Rows are true labels, columns predictions, both in [`DrClass`] order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn record(&mut self, truth: DrClass, predicted: DrClass) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn counts(&self) -> &[[u64; NUM_CLASSES]; NUM_CLASSES] {
        &self.counts
    }

    pub fn get(&self, truth: DrClass, predicted: DrClass) -> u64 {
        self.counts[truth.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, class: DrClass) -> u64 {
        self.counts[class.index()].iter().sum()
    }

    pub fn predicted(&self, class: DrClass) -> u64 {
        self.counts.iter().map(|row| row[class.index()]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for c in DrClass::ALL {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for c in DrClass::ALL {
            write!(out, "{c}").unwrap();
            for v in self.counts[c.index()] {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses the layout written by [`ConfusionMatrix::to_csv`]. Rows and
    /// columns are matched by class name, so any class order is accepted.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Data(format!("confusion matrix csv: {msg}"));
        let parse_class = |name: &str| {
            DrClass::ALL
                .into_iter()
                .find(|c| c.name() == name.trim())
                .ok_or_else(|| bad(format!("unknown class `{name}`")))
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty input".into()))?;
        let columns = header.split(',').skip(1).map(parse_class).collect::<Result<Vec<_>>>()?;
        let mut cm = ConfusionMatrix::new();
        let mut seen_rows = Vec::new();
        for line in lines {
            let mut fields = line.split(',');
            let truth = parse_class(fields.next().unwrap_or_default())?;
            let values: Vec<&str> = fields.collect();
            if values.len() != columns.len() {
                return Err(bad(format!("row {truth} has {} values, expected {}", values.len(), columns.len())));
            }
            for (col, v) in columns.iter().zip(values) {
                cm.counts[truth.index()][col.index()] =
                    v.trim().parse().map_err(|_| bad(format!("bad count `{v}`")))?;
            }
            seen_rows.push(truth);
        }
        for set in [&columns, &seen_rows] {
            let mut sorted = set.clone();
            sorted.sort();
            if sorted != DrClass::ALL {
                return Err(bad("every class must appear exactly once as a row and a column".into()));
            }
        }
        Ok(cm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub classes: [ClassMetrics; NUM_CLASSES],
    pub accuracy: f64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest precision, recall and F1 per class; zero denominators give 0.
pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("classification report of an empty confusion matrix".into()));
    }
    let classes = DrClass::ALL.map(|c| {
        let tp = cm.get(c, c);
        let precision = ratio(tp, cm.predicted(c));
        let recall = ratio(tp, cm.support(c));
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        ClassMetrics { precision, recall, f1, support: cm.support(c) }
    });
    Ok(ClassReport { classes, accuracy: ratio(cm.trace(), total), total })
}

impl ClassReport {
    pub fn class(&self, c: DrClass) -> &ClassMetrics {
        &self.classes[c.index()]
    }

    pub fn to_text(&self) -> String {
        let mut out =
            format!("{:<15}{:>10}{:>10}{:>10}{:>10}\n", "class", "precision", "recall", "f1-score", "support");
        for c in DrClass::ALL {
            let m = self.class(c);
            writeln!(out, "{:<15}{:>10.3}{:>10.3}{:>10.3}{:>10}", c.name(), m.precision, m.recall, m.f1, m.support)
                .unwrap();
        }
        writeln!(out, "{:<15}{:>10}{:>10}{:>10.3}{:>10}", "accuracy", "", "", self.accuracy, self.total).unwrap();
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for c in DrClass::ALL {
            let m = self.class(c);
            writeln!(out, "{},{},{},{},{}", c.name(), m.precision, m.recall, m.f1, m.support).unwrap();
        }
        writeln!(out, "accuracy,,,{},{}", self.accuracy, self.total).unwrap();
        out
    }
}
