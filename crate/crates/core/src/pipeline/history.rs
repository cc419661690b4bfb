use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn push(&mut self, record: EpochRecord) {
        self.epochs.push(record);
    }

    pub fn lr_column(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.lr).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.val_loss).collect()
    }
}

const HEADER: [&str; 5] = ["epoch", "train_loss", "val_loss", "lr", "seconds"];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Floats are written in shortest round-trip form, so reading back is exact.
pub fn export_history(history: &TrainHistory, path: &Path) -> Result<()> {
    if history.is_empty() {
        return Err(Error::invalid("cannot export an empty history"));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(HEADER).map_err(|e| csv_err(path, e))?;
    for r in &history.epochs {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.lr.to_string(),
            r.seconds.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<TrainHistory> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    if r.headers().map_err(|e| csv_err(path, e))?.iter().ne(HEADER) {
        return Err(Error::Data(format!("{}: expected header {}", path.display(), HEADER.join(","))));
    }
    let mut history = TrainHistory::default();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let field = |k: usize| -> Result<f64> {
            row.get(k)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Data(format!("{} row {}: bad `{}`", path.display(), i + 2, HEADER[k])))
        };
        history.push(EpochRecord {
            epoch: field(0)? as usize,
            train_loss: field(1)?,
            val_loss: field(2)?,
            lr: field(3)?,
            seconds: field(4)?,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::lr_schedule;

    fn sample(n: usize) -> TrainHistory {
        TrainHistory {
            epochs: (0..n)
                .map(|e| EpochRecord {
                    epoch: e,
                    train_loss: 1.0 / (e as f64 + 1.0) + 1e-9,
                    val_loss: std::f64::consts::PI / (e as f64 + 2.0),
                    lr: lr_schedule(0.001, e),
                    seconds: 0.1234567 * e as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn three_epochs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out/history.csv");
        let h = sample(3);
        export_history(&h, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("epoch,train_loss,val_loss,lr,seconds\n"));
        assert_eq!(read_history(&path).unwrap(), h);
    }

    #[test]
    fn lr_column_is_exact_after_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        export_history(&sample(30), &path).unwrap();
        let lr = read_history(&path).unwrap().lr_column();
        assert!(lr[..10].iter().all(|&v| v == 0.001));
        assert!(lr[10..20].iter().all(|&v| v == 0.0001));
        assert!(lr[20..].iter().all(|&v| v == 1e-5));
    }

    #[test]
    fn empty_history_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export_history(&TrainHistory::default(), &dir.path().join("h.csv")).is_err());
        std::fs::write(dir.path().join("bad.csv"), "a,b\n1,2\n").unwrap();
        assert!(read_history(&dir.path().join("bad.csv")).is_err());
    }
}
