//! Labelled grayscale image datasets and the set operations the experiments
//! are built from.
//!
//! Every [`Sample`] carries a [`SampleId`] made of the contributing
//! individual and a per-individual sequence number assigned at ingestion.
//! Identity is what partition disjointness, grouping dedup, and the leakage
//! audit compare.

mod pds;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use pds::{load_png_directory, read_pds, read_pds_file, write_pds, write_pds_file, PDS_MAGIC};

/// Individual id marking samples that only exist in the global dataset.
pub const GLOBAL_ONLY_ID: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub individual: u32,
    pub seq: u32,
}

impl SampleId {
    pub fn new(individual: u32, seq: u32) -> Self {
        Self { individual, seq }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: SampleId,
    pub label: u16,
    /// Row-major 8-bit intensities.
    pub pixels: Vec<u8>,
}

impl Sample {
    pub fn individual(&self) -> u32 {
        self.id.individual
    }
}

/// An ordered collection of samples sharing image size and class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    samples: Vec<Sample>,
    n_classes: usize,
    height: usize,
    width: usize,
}

impl Dataset {
    pub fn empty(n_classes: usize, height: usize, width: usize) -> Self {
        Self { samples: Vec::new(), n_classes, height, width }
    }

    /// Builds a dataset from already-identified samples, validating labels and
    /// pixel dimensions.
    pub fn from_samples(
        n_classes: usize,
        height: usize,
        width: usize,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let mut ds = Self::empty(n_classes, height, width);
        ds.samples.reserve(samples.len());
        for s in samples {
            ds.push(s)?;
        }
        Ok(ds)
    }

    /// Ingests raw `(individual_id, label, pixels)` records, assigning each
    /// sample the next sequence number of its individual.
    pub fn ingest<I>(n_classes: usize, height: usize, width: usize, records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, u16, Vec<u8>)>,
    {
        let mut next_seq: BTreeMap<u32, u32> = BTreeMap::new();
        let mut ds = Self::empty(n_classes, height, width);
        for (individual, label, pixels) in records {
            let seq = next_seq.entry(individual).or_insert(0);
            ds.push(Sample { id: SampleId::new(individual, *seq), label, pixels })?;
            *seq += 1;
        }
        Ok(ds)
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if usize::from(sample.label) >= self.n_classes {
            return Err(Error::ClassOutOfRange {
                class: sample.label.into(),
                n_classes: self.n_classes,
            });
        }
        if sample.pixels.len() != self.height * self.width {
            return Err(Error::DatasetMismatch(format!(
                "sample has {} pixels, expected {}x{}",
                sample.pixels.len(),
                self.height,
                self.width
            )));
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, idx: usize) -> &Sample {
        &self.samples[idx]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.iter().map(|s| usize::from(s.label))
    }

    pub fn ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.samples.iter().map(|s| s.id)
    }

    pub fn id_set(&self) -> BTreeSet<SampleId> {
        self.ids().collect()
    }

    /// Distinct individual ids in first-appearance order.
    pub fn individuals(&self) -> Vec<u32> {
        let mut seen = BTreeSet::new();
        self.samples
            .iter()
            .filter_map(|s| seen.insert(s.individual()).then_some(s.individual()))
            .collect()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            n_classes: self.n_classes,
            height: self.height,
            width: self.width,
        }
    }

    pub fn filter<F: Fn(&Sample) -> bool>(&self, keep: F) -> Self {
        Self {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            n_classes: self.n_classes,
            height: self.height,
            width: self.width,
        }
    }

    /// Splits the dataset by contributing individual, in first-appearance order.
    pub fn split_by_individual(&self) -> Vec<(u32, Dataset)> {
        let order = self.individuals();
        let mut parts: BTreeMap<u32, Dataset> = order
            .iter()
            .map(|&id| (id, Self::empty(self.n_classes, self.height, self.width)))
            .collect();
        for s in &self.samples {
            parts.get_mut(&s.individual()).expect("known individual").samples.push(s.clone());
        }
        order.into_iter().map(|id| (id, parts.remove(&id).expect("present"))).collect()
    }

    pub fn compatible_with(&self, other: &Dataset) -> Result<()> {
        if self.dims() != other.dims() || self.n_classes != other.n_classes {
            return Err(Error::DatasetMismatch(format!(
                "({}x{}, {} classes) vs ({}x{}, {} classes)",
                self.height, self.width, self.n_classes, other.height, other.width, other.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionedDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub validation: Option<Dataset>,
    /// Set when one side of the split came out empty.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionOptions {
    /// Split each class separately instead of the whole dataset at once.
    pub stratified: bool,
}

/// Seeded uniform train/test split with `round(train_fraction * len)` training
/// samples. Both halves keep the original sample order.
pub fn partition_dataset(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<PartitionedDataset> {
    partition_dataset_with(ds, train_fraction, seed, PartitionOptions::default())
}

pub fn partition_dataset_with(
    ds: &Dataset,
    train_fraction: f64,
    seed: u64,
    opts: PartitionOptions,
) -> Result<PartitionedDataset> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidFraction(train_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_mask = vec![false; ds.len()];
    if opts.stratified {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes()];
        for (i, label) in ds.labels().enumerate() {
            by_class[label].push(i);
        }
        for mut members in by_class {
            members.shuffle(&mut rng);
            let take = (train_fraction * members.len() as f64).round() as usize;
            for &i in &members[..take] {
                train_mask[i] = true;
            }
        }
    } else {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        let take = (train_fraction * ds.len() as f64).round() as usize;
        for &i in &order[..take] {
            train_mask[i] = true;
        }
    }
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| train_mask[i]);
    let degenerate = train_idx.is_empty() || test_idx.is_empty();
    if degenerate {
        log::warn!(
            "degenerate partition of {} samples: train {}, test {}",
            ds.len(),
            train_idx.len(),
            test_idx.len()
        );
    }
    Ok(PartitionedDataset {
        train: ds.subset(&train_idx),
        test: ds.subset(&test_idx),
        validation: None,
        degenerate,
    })
}

/// Number of samples per class, indexed by label.
pub fn class_histogram(ds: &Dataset) -> Vec<usize> {
    let mut counts = vec![0; ds.n_classes()];
    for label in ds.labels() {
        counts[label] += 1;
    }
    counts
}

/// Concatenation of `a` followed by `b`. No deduplication is performed.
pub fn union_datasets(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    a.compatible_with(b)?;
    let mut samples = Vec::with_capacity(a.len() + b.len());
    samples.extend_from_slice(a.samples());
    samples.extend_from_slice(b.samples());
    Ok(Dataset { samples, n_classes: a.n_classes, height: a.height, width: a.width })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, n_classes: usize, individual: u32) -> Dataset {
        Dataset::ingest(
            n_classes,
            2,
            2,
            (0..n).map(|i| (individual, (i % n_classes) as u16, vec![i as u8; 4])),
        )
        .unwrap()
    }

    #[test]
    fn partition_sizes_follow_rounding() {
        let p = partition_dataset(&toy(10, 3, 0), 0.7, 1).unwrap();
        assert_eq!((p.train.len(), p.test.len()), (7, 3));
        assert!(!p.degenerate);

        let p = partition_dataset(&toy(300, 30, 0), 0.7, 9).unwrap();
        assert_eq!((p.train.len(), p.test.len()), (210, 90));
    }

    #[test]
    fn single_sample_partition_is_degenerate() {
        let p = partition_dataset(&toy(1, 2, 0), 0.7, 3).unwrap();
        assert_eq!((p.train.len(), p.test.len()), (1, 0));
        assert!(p.degenerate);
    }

    #[test]
    fn partition_rejects_bad_input() {
        assert!(matches!(
            partition_dataset(&Dataset::empty(2, 2, 2), 0.7, 0),
            Err(Error::EmptyDataset)
        ));
        for f in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(matches!(partition_dataset(&toy(5, 2, 0), f, 0), Err(Error::InvalidFraction(_))));
        }
    }

    #[test]
    fn partition_is_disjoint_and_covering() {
        let ds = toy(57, 4, 3);
        let p = partition_dataset(&ds, 0.7, 42).unwrap();
        let train = p.train.id_set();
        let test = p.test.id_set();
        assert!(train.is_disjoint(&test));
        let all: BTreeSet<_> = train.union(&test).copied().collect();
        assert_eq!(all, ds.id_set());
        assert_eq!(p, partition_dataset(&ds, 0.7, 42).unwrap());
    }

    #[test]
    fn stratified_partition_splits_each_class() {
        let ds = toy(40, 4, 0);
        let p = partition_dataset_with(&ds, 0.5, 5, PartitionOptions { stratified: true }).unwrap();
        assert_eq!(class_histogram(&p.train), vec![5, 5, 5, 5]);
    }

    #[test]
    fn histogram_examples() {
        let ds = Dataset::ingest(3, 1, 1, [(0, 0, vec![0]), (0, 0, vec![0]), (0, 1, vec![0])]).unwrap();
        assert_eq!(class_histogram(&ds), vec![2, 1, 0]);
        assert_eq!(class_histogram(&Dataset::empty(2, 1, 1)), vec![0, 0]);
    }

    #[test]
    fn union_examples() {
        let a = toy(3, 2, 1);
        let b = toy(2, 2, 2);
        let u = union_datasets(&a, &b).unwrap();
        assert_eq!(u.len(), 5);
        assert_eq!(u.individuals(), vec![1, 2]);
        let e = Dataset::empty(2, 2, 2);
        assert_eq!(union_datasets(&e, &b).unwrap(), b);
        assert_eq!(union_datasets(&b, &e).unwrap(), b);
        assert!(union_datasets(&a, &Dataset::empty(3, 2, 2)).is_err());
        assert!(union_datasets(&a, &Dataset::empty(2, 3, 2)).is_err());
    }

    #[test]
    fn ingest_assigns_per_individual_sequence_numbers() {
        let ds = Dataset::ingest(2, 1, 1, [(4, 0, vec![1]), (7, 1, vec![2]), (4, 1, vec![3])]).unwrap();
        let ids: Vec<_> = ds.ids().collect();
        assert_eq!(ids, vec![SampleId::new(4, 0), SampleId::new(7, 0), SampleId::new(4, 1)]);
    }

    #[test]
    fn push_validates_invariants() {
        let mut ds = Dataset::empty(2, 2, 2);
        let bad_label = Sample { id: SampleId::new(0, 0), label: 2, pixels: vec![0; 4] };
        assert!(matches!(ds.push(bad_label), Err(Error::ClassOutOfRange { .. })));
        let bad_dims = Sample { id: SampleId::new(0, 0), label: 0, pixels: vec![0; 3] };
        assert!(ds.push(bad_dims).is_err());
    }
}
