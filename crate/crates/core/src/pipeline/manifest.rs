use std::path::{Path, PathBuf};

use crate::classifier::{DrClass, NUM_CLASSES};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
/// Per-class image counts of the full fundus corpus.
pub const FUNDUS_COUNTS: [usize; NUM_CLASSES] = [25810, 2443, 5292, 873, 708];

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub label: DrClass,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    records: Vec<Record>,
}

impl DatasetManifest {
    /// Records are sorted by path.
    pub fn from_records(root: impl Into<PathBuf>, mut records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("dataset manifest is empty".into()));
        }
        records.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(DatasetManifest { root: root.into(), records })
    }

    /// Placeholder paths `{class dir}/{i:06}.png`; for split and statistics
    /// work that never reads pixels.
    pub fn synthetic(counts: [usize; NUM_CLASSES]) -> Result<Self> {
        let records = DrClass::ALL
            .into_iter()
            .flat_map(|c| {
                (0..counts[c.index()])
                    .map(move |i| Record { path: Path::new(c.dir_name()).join(format!("{i:06}.png")), label: c })
            })
            .collect();
        Self::from_records(".", records)
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        self.records.iter().for_each(|r| counts[r.label.index()] += 1);
        counts
    }

    pub fn full_path(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Reads `root/manifest.csv` (`path,label`) if present, else one
/// subdirectory per class named `0_no_dr` … `4_proliferative`.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let csv_path = root.join(MANIFEST_FILE);
    if csv_path.is_file() {
        return load_csv(root, &csv_path);
    }
    let mut records = Vec::new();
    for entry in list_dir(root)? {
        if !entry.is_dir() {
            continue;
        }
        let name = entry.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name.starts_with('.') {
            continue;
        }
        let label = DrClass::from_dir_name(&name)
            .ok_or_else(|| Error::Data(format!("unknown class directory {}", entry.display())))?;
        for file in list_dir(&entry)? {
            if file.is_file() && is_image(&file) {
                let rel = file.strip_prefix(root).expect("listed under root").to_path_buf();
                records.push(Record { path: rel, label });
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no images found under {}", root.display())));
    }
    DatasetManifest::from_records(root, records)
}

fn load_csv(root: &Path, csv_path: &Path) -> Result<DatasetManifest> {
    let mut reader =
        csv::Reader::from_path(csv_path).map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
    let headers = reader.headers().map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label"] {
        return Err(Error::Data(format!("{}: expected header `path,label`", csv_path.display())));
    }
    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
        let label: usize = row[1]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("{} row {}: bad label `{}`", csv_path.display(), line + 2, &row[1])))?;
        let path = PathBuf::from(row[0].trim());
        if !root.join(&path).is_file() {
            return Err(Error::Data(format!(
                "{} row {}: missing file {}",
                csv_path.display(),
                line + 2,
                path.display()
            )));
        }
        records.push(Record { path, label: DrClass::from_index(label)? });
    }
    DatasetManifest::from_records(root, records)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub counts: [usize; NUM_CLASSES],
    pub fractions: [f64; NUM_CLASSES],
    pub total: usize,
}

pub fn class_stats(manifest: &DatasetManifest) -> Result<ClassStats> {
    let counts = manifest.counts();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Data("class statistics of an empty manifest".into()));
    }
    Ok(ClassStats { counts, fractions: counts.map(|c| c as f64 / total as f64), total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, b"").unwrap();
    }

    #[test]
    fn class_directories() {
        let dir = tempfile::tempdir().unwrap();
        for c in DrClass::ALL {
            for i in 0..10 {
                touch(&dir.path().join(c.dir_name()).join(format!("{i}.png")));
            }
        }
        touch(&dir.path().join("0_no_dr/notes.txt"));
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.counts(), [10; 5]);
        assert!(m.records().windows(2).all(|w| w[0].path < w[1].path));

        std::fs::create_dir(dir.path().join("5_unknown")).unwrap();
        assert!(load_manifest(dir.path()).is_err());
    }

    #[test]
    fn manifest_csv() {
        let dir = tempfile::tempdir().unwrap();
        touch(&dir.path().join("imgs/a.png"));
        touch(&dir.path().join("imgs/b.png"));
        std::fs::write(dir.path().join(MANIFEST_FILE), "path,label\nimgs/b.png,4\nimgs/a.png,0\n").unwrap();
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.records()[0], Record { path: "imgs/a.png".into(), label: DrClass::NoDR });
        assert_eq!(m.counts(), [1, 0, 0, 0, 1]);

        std::fs::write(dir.path().join(MANIFEST_FILE), "path,label\nimgs/a.png,7\n").unwrap();
        assert!(load_manifest(dir.path()).is_err());
        std::fs::write(dir.path().join(MANIFEST_FILE), "path,label\nimgs/zzz.png,1\n").unwrap();
        assert!(load_manifest(dir.path()).is_err());
    }

    #[test]
    fn empty_root_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_manifest(dir.path()).is_err());
        assert!(load_manifest(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn full_dataset_counts_and_stats() {
        let m = DatasetManifest::synthetic(FUNDUS_COUNTS).unwrap();
        assert_eq!(m.len(), 35126);
        let s = class_stats(&m).unwrap();
        assert!((s.fractions[0] - 25810.0 / 35126.0).abs() < 1e-12);
        assert_eq!((s.fractions[0] * 1e4).floor(), 7347.0);
        assert!((s.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let single = class_stats(&DatasetManifest::synthetic([0, 0, 7, 0, 0]).unwrap()).unwrap();
        assert_eq!(single.fractions[2], 1.0);
    }
}
