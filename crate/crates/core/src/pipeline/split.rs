use crate::classifier::{DrClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::RngStream;

use super::DatasetManifest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subset {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.8, val: 0.1, test: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    pub seed: u64,
    /// Parallel to the manifest's records.
    pub subsets: Vec<Subset>,
}

impl SplitAssignment {
    pub fn indices(&self, subset: Subset) -> Vec<usize> {
        self.subsets.iter().enumerate().filter(|(_, s)| **s == subset).map(|(i, _)| i).collect()
    }

    pub fn len(&self, subset: Subset) -> usize {
        self.subsets.iter().filter(|s| **s == subset).count()
    }
}

/// Splits `round(fraction · total)` across classes by largest remainder:
/// each class gets the floor of its exact share, and leftover units go to the
/// largest fractional parts, ties to the lower class index.
pub fn apportion(counts: [usize; NUM_CLASSES], fraction: f64) -> [usize; NUM_CLASSES] {
    let total: usize = counts.iter().sum();
    let target = (fraction * total as f64).round() as usize;
    let exact = counts.map(|c| c as f64 * fraction);
    let mut out = exact.map(|e| e.floor() as usize);
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let assigned: usize = out.iter().sum();
    for &i in order.iter().cycle().take(target.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Per-class seeded shuffle, then test, val and train slices in that order.
pub fn stratified_split(manifest: &DatasetManifest, fractions: SplitFractions, seed: u64) -> Result<SplitAssignment> {
    let SplitFractions { train, val, test } = fractions;
    if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f)) || ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {train}/{val}/{test} must be in [0, 1] and sum to 1")));
    }
    let counts = manifest.counts();
    if let Some(c) = DrClass::ALL.into_iter().find(|c| (1..3).contains(&counts[c.index()])) {
        return Err(Error::Data(format!("class {c} has {} images; at least 3 are needed", counts[c.index()])));
    }
    let n_test = apportion(counts, test);
    let n_val = apportion(counts, val);
    let mut subsets = vec![Subset::Train; manifest.len()];
    for c in DrClass::ALL {
        let mut members: Vec<usize> =
            manifest.records().iter().enumerate().filter(|(_, r)| r.label == c).map(|(i, _)| i).collect();
        RngStream::derive(seed, &[0x5B11, c.index() as u64]).shuffle(&mut members);
        let (t, v) = (n_test[c.index()], n_val[c.index()]);
        if t + v > members.len() {
            return Err(Error::Data(format!("class {c} is too small for the requested split")));
        }
        members[..t].iter().for_each(|&i| subsets[i] = Subset::Test);
        members[t..t + v].iter().for_each(|&i| subsets[i] = Subset::Val);
    }
    Ok(SplitAssignment { seed, subsets })
}

#[cfg(test)]
mod tests {
    use super::super::manifest::FUNDUS_COUNTS;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_dataset_counts_give_3513_test_images() {
        let m = DatasetManifest::synthetic(FUNDUS_COUNTS).unwrap();
        let split = stratified_split(&m, SplitFractions::default(), 7).unwrap();
        assert_eq!(split.len(Subset::Test), 3513);
        assert_eq!(split.len(Subset::Val), 3513);
        assert_eq!(split, stratified_split(&m, SplitFractions::default(), 7).unwrap());
        assert_ne!(split, stratified_split(&m, SplitFractions::default(), 8).unwrap());
    }

    #[test]
    fn ten_images_split_8_1_1() {
        let m = DatasetManifest::synthetic([10, 10, 10, 10, 10]).unwrap();
        let split = stratified_split(&m, SplitFractions::default(), 1).unwrap();
        for c in DrClass::ALL {
            let count = |s| split.indices(s).iter().filter(|&&i| m.records()[i].label == c).count();
            assert_eq!((count(Subset::Train), count(Subset::Val), count(Subset::Test)), (8, 1, 1));
        }
    }

    #[test]
    fn tiny_class_is_an_error() {
        let m = DatasetManifest::synthetic([10, 2, 10, 10, 10]).unwrap();
        assert!(stratified_split(&m, SplitFractions::default(), 1).is_err());
        let bad = SplitFractions { train: 0.5, val: 0.1, test: 0.1 };
        assert!(stratified_split(&DatasetManifest::synthetic([10; 5]).unwrap(), bad, 1).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_stratified_partition(counts in prop::array::uniform5(3usize..400), seed in 0u64..1000) {
            let m = DatasetManifest::synthetic(counts).unwrap();
            let split = stratified_split(&m, SplitFractions::default(), seed).unwrap();
            prop_assert_eq!(split.subsets.len(), m.len());
            let total: usize = counts.iter().sum();
            prop_assert_eq!(split.len(Subset::Test), (0.1 * total as f64).round() as usize);
            for c in DrClass::ALL {
                for s in [Subset::Test, Subset::Val] {
                    let k = split.indices(s).iter().filter(|&&i| m.records()[i].label == c).count();
                    prop_assert!((k as f64 - 0.1 * counts[c.index()] as f64).abs() <= 1.0);
                }
            }
        }
    }
}
