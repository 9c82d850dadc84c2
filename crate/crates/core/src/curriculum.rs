//! Shaping schedules: which dataset every training batch is drawn from.
//!
//! A schedule has three phases. Early shaping trains on the individual's data
//! for `early_iters` batches, the main phase runs `epochs * n_iter` batches
//! that interleave individual and global batches according to the weighing
//! ratio, and the transfer phase fine-tunes on the individual's data for
//! `transfer_iters` batches with a frozen layer prefix.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleId};
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::nn::{train_step, AdamConfig, AdamState, Batch, Mode, Network, Targets, Tensor};
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    /// Batches on the individual's data before main training.
    pub early_iters: usize,
    /// Interleave ratio during main training; `None` trains on global data only.
    pub weigh_ratio: Option<f64>,
    /// Batches on the individual's data after main training.
    pub transfer_iters: usize,
    /// Parameterized layers frozen during the transfer phase.
    pub frozen_prefix: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Use an exact accumulator for non-integer ratios instead of rounding.
    #[serde(default)]
    pub exact_ratio: bool,
    /// Reset Adam moments when the transfer phase begins.
    #[serde(default)]
    pub reset_optimizer: bool,
}

impl ScheduleSpec {
    pub fn baseline(epochs: usize, batch_size: usize) -> Self {
        Self {
            early_iters: 0,
            weigh_ratio: None,
            transfer_iters: 0,
            frozen_prefix: 0,
            epochs,
            batch_size,
            exact_ratio: false,
            reset_optimizer: false,
        }
    }

    pub fn early(self, iters: usize) -> Self {
        Self { early_iters: iters, ..self }
    }

    pub fn weighed(self, ratio: f64) -> Self {
        Self { weigh_ratio: Some(ratio), ..self }
    }

    pub fn transfer(self, iters: usize, frozen_prefix: usize) -> Self {
        Self { transfer_iters: iters, frozen_prefix, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if let Some(r) = self.weigh_ratio {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::InvalidConfig(format!("weigh ratio {r} must be positive and finite")));
            }
        }
        Ok(())
    }

    /// True when any shaping is active; all-off is the baseline.
    pub fn is_personalizing(&self) -> bool {
        self.early_iters > 0 || self.weigh_ratio.is_some() || self.transfer_iters > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BatchSource {
    Individual,
    Global,
}

impl fmt::Display for BatchSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Individual => "INDIVIDUAL",
            Self::Global => "GLOBAL",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Early,
    Main,
    Transfer,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Early => "early",
            Self::Main => "main",
            Self::Transfer => "transfer",
        })
    }
}

/// Batches needed to visit every global sample once.
pub fn iters_per_epoch(global_size: usize, batch_size: usize) -> usize {
    global_size.div_ceil(batch_size)
}

/// Source of main-phase step `t` (1-based).
fn main_source(ratio: Option<f64>, exact: bool, t: usize) -> BatchSource {
    use BatchSource::{Global, Individual};
    let Some(r) = ratio else { return Global };
    if exact {
        // Steps where floor(t / r) (or floor(t * r)) advances.
        let crosses = |x: f64| (t as f64 * x).floor() > ((t - 1) as f64 * x).floor();
        return if r >= 1.0 {
            if crosses(1.0 / r) {
                Individual
            } else {
                Global
            }
        } else if crosses(r) {
            Global
        } else {
            Individual
        };
    }
    if r >= 1.0 {
        let every = (r.round() as usize).max(1);
        if t % every == 0 {
            Individual
        } else {
            Global
        }
    } else {
        let every = ((1.0 / r).round() as usize).max(1);
        if t % every == 0 {
            Global
        } else {
            Individual
        }
    }
}

/// Phase and source of every training step, in order.
pub fn schedule_steps(spec: &ScheduleSpec, n_iter: usize) -> Vec<(Phase, BatchSource)> {
    let main_len = spec.epochs * n_iter;
    let mut steps = Vec::with_capacity(spec.early_iters + main_len + spec.transfer_iters);
    steps.extend(std::iter::repeat((Phase::Early, BatchSource::Individual)).take(spec.early_iters));
    steps.extend((1..=main_len).map(|t| (Phase::Main, main_source(spec.weigh_ratio, spec.exact_ratio, t))));
    steps.extend(std::iter::repeat((Phase::Transfer, BatchSource::Individual)).take(spec.transfer_iters));
    steps
}

pub fn batch_source_sequence(spec: &ScheduleSpec, n_iter: usize) -> Vec<BatchSource> {
    schedule_steps(spec, n_iter).into_iter().map(|(_, s)| s).collect()
}

/// Walks seeded permutations of a dataset, reshuffling whenever one is used up.
#[derive(Debug, Clone)]
pub struct DataCursor<'a> {
    dataset: &'a Dataset,
    permutation: Vec<usize>,
    position: usize,
    cycle: u64,
    seed: u64,
}

impl<'a> DataCursor<'a> {
    pub fn new(dataset: &'a Dataset, seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::NoIndividualData);
        }
        let mut cursor = Self { dataset, permutation: (0..dataset.len()).collect(), position: 0, cycle: 0, seed };
        cursor.shuffle();
        Ok(cursor)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, self.cycle]));
        self.permutation.sort_unstable();
        self.permutation.shuffle(&mut rng);
        self.position = 0;
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    /// Indices of the next `batch_size` samples.
    pub fn next_indices(&mut self, batch_size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            if self.position == self.permutation.len() {
                self.cycle += 1;
                self.shuffle();
            }
            let take = (batch_size - out.len()).min(self.permutation.len() - self.position);
            out.extend_from_slice(&self.permutation[self.position..self.position + take]);
            self.position += take;
        }
        out
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Batch<f32> {
        let idx = self.next_indices(batch_size);
        classification_batch(self.dataset, &idx)
    }
}

/// Pixels scaled to `[0, 1]`, shaped `[B, 1, H, W]`.
pub fn image_tensor(ds: &Dataset, indices: &[usize]) -> Tensor<f32> {
    let (h, w) = ds.dims();
    let mut data = Vec::with_capacity(indices.len() * h * w);
    for &i in indices {
        data.extend(ds.get(i).pixels.iter().map(|&p| f32::from(p) / 255.0));
    }
    Tensor::new(vec![indices.len(), 1, h, w], data)
}

pub fn classification_batch(ds: &Dataset, indices: &[usize]) -> Batch<f32> {
    Batch {
        inputs: image_tensor(ds, indices),
        targets: Targets::Labels(indices.iter().map(|&i| usize::from(ds.get(i).label)).collect()),
    }
}

pub fn reconstruction_batch(ds: &Dataset, indices: &[usize]) -> Batch<f32> {
    let x = image_tensor(ds, indices);
    Batch { inputs: x.clone(), targets: Targets::Images(x) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub phase: Phase,
    pub source: BatchSource,
    pub loss: f64,
    #[serde(skip)]
    pub sample_ids: Option<Vec<SampleId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorPoint {
    pub step: u64,
    pub individual_accuracy: f64,
    pub global_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
    pub monitor: Vec<MonitorPoint>,
}

impl TrainingLog {
    /// Writes `step,phase,source,loss` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "phase", "source", "loss"])?;
        for e in &self.entries {
            out.write_record([e.step.to_string(), e.phase.to_string(), e.source.to_string(), e.loss.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn count(&self, source: BatchSource) -> usize {
        self.entries.iter().filter(|e| e.source == source).count()
    }
}

/// Held-out sets evaluated every `every` steps during training.
#[derive(Debug, Clone, Copy)]
pub struct Monitor<'a> {
    pub individual: &'a Dataset,
    pub global: &'a Dataset,
    pub every: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions<'a> {
    pub adam: AdamConfig,
    pub seed: u64,
    /// Keep the sample ids of every batch in the log.
    pub record_ids: bool,
    pub monitor: Option<Monitor<'a>>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), seed: 0, record_ids: false, monitor: None }
    }
}

/// Optimizer state and log carried from the main phases into the transfer phase.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: AdamState<f32>,
    pub log: TrainingLog,
}

/// Runs the whole shaping schedule on `net`, drawing individual batches from
/// `individual` and global batches from `global`.
pub fn train_with_schedule(
    net: &mut Network<f32>,
    individual: &Dataset,
    global: &Dataset,
    spec: &ScheduleSpec,
    opts: &TrainOptions<'_>,
) -> Result<TrainingLog> {
    let state = train_main_phases(net, individual, global, spec, opts)?;
    train_transfer_phase(net, state, individual, spec, opts)
}

/// Early shaping followed by main training. When neither phase touches the
/// individual's data the result depends on `global` and `opts.seed` only, so
/// it can be shared by the transfer phases of many individuals.
pub fn train_main_phases(
    net: &mut Network<f32>,
    individual: &Dataset,
    global: &Dataset,
    spec: &ScheduleSpec,
    opts: &TrainOptions<'_>,
) -> Result<TrainState> {
    spec.validate()?;
    if global.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_iter = iters_per_epoch(global.len(), spec.batch_size);
    let steps: Vec<_> = schedule_steps(spec, n_iter).into_iter().filter(|(p, _)| *p != Phase::Transfer).collect();
    let needs_individual = steps.iter().any(|(_, s)| *s == BatchSource::Individual);
    if needs_individual && !individual.is_empty() {
        individual.compatible_with(global)?;
    }
    let mut global_cursor = DataCursor::new(global, derive_seed(&[opts.seed, 2]))?;
    let mut individual_cursor =
        if needs_individual { Some(DataCursor::new(individual, derive_seed(&[opts.seed, 1]))?) } else { None };

    net.set_mode(Mode::Train);
    net.reseed(derive_seed(&[opts.seed, 3]));
    let mut state = TrainState { adam: AdamState::new(net, opts.adam), log: TrainingLog::default() };
    for (phase, source) in steps {
        let cursor = match source {
            BatchSource::Individual => individual_cursor.as_mut().expect("individual cursor"),
            BatchSource::Global => &mut global_cursor,
        };
        run_step(net, &mut state, cursor, phase, source, spec.batch_size, opts)?;
    }
    net.set_mode(Mode::Eval);
    Ok(state)
}

/// Fine-tunes on `individual` for `spec.transfer_iters` batches with the
/// first `spec.frozen_prefix` parameterized layers frozen. The individual
/// cursor and the dropout stream are seeded from `opts.seed`.
pub fn train_transfer_phase(
    net: &mut Network<f32>,
    mut state: TrainState,
    individual: &Dataset,
    spec: &ScheduleSpec,
    opts: &TrainOptions<'_>,
) -> Result<TrainingLog> {
    if spec.transfer_iters == 0 {
        return Ok(state.log);
    }
    let mut cursor = DataCursor::new(individual, derive_seed(&[opts.seed, 4]))?;
    net.set_trainable(spec.frozen_prefix)?;
    if spec.reset_optimizer {
        state.adam.reset();
    }
    net.set_mode(Mode::Train);
    net.reseed(derive_seed(&[opts.seed, 5]));
    for _ in 0..spec.transfer_iters {
        run_step(net, &mut state, &mut cursor, Phase::Transfer, BatchSource::Individual, spec.batch_size, opts)?;
    }
    net.set_mode(Mode::Eval);
    Ok(state.log)
}

fn run_step(
    net: &mut Network<f32>,
    state: &mut TrainState,
    cursor: &mut DataCursor<'_>,
    phase: Phase,
    source: BatchSource,
    batch_size: usize,
    opts: &TrainOptions<'_>,
) -> Result<()> {
    let ds = cursor.dataset();
    let idx = cursor.next_indices(batch_size);
    let loss = train_step(net, &mut state.adam, &classification_batch(ds, &idx))?;
    let step = state.log.entries.len() as u64 + 1;
    state.log.entries.push(LogEntry {
        step,
        phase,
        source,
        loss,
        sample_ids: opts.record_ids.then(|| idx.iter().map(|&j| ds.get(j).id).collect()),
    });
    if let Some(m) = &opts.monitor {
        if m.every > 0 && step % m.every as u64 == 0 {
            let individual_accuracy = if m.individual.is_empty() { f64::NAN } else { accuracy(net, m.individual)? };
            state.log.monitor.push(MonitorPoint { step, individual_accuracy, global_accuracy: accuracy(net, m.global)? });
        }
    }
    Ok(())
}

/// Plain training on `global` for `epochs * n_iter` batches, with the same
/// seed derivation as [`train_with_schedule`].
pub fn train_plain(
    net: &mut Network<f32>,
    global: &Dataset,
    epochs: usize,
    batch_size: usize,
    opts: &TrainOptions<'_>,
) -> Result<Vec<f64>> {
    let mut cursor = DataCursor::new(global, derive_seed(&[opts.seed, 2]))?;
    net.set_mode(Mode::Train);
    net.reseed(derive_seed(&[opts.seed, 3]));
    let mut adam = AdamState::new(net, opts.adam);
    let steps = epochs * iters_per_epoch(global.len(), batch_size);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        losses.push(train_step(net, &mut adam, &cursor.next_batch(batch_size))?);
    }
    net.set_mode(Mode::Eval);
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use BatchSource::{Global as G, Individual as I};

    fn spec() -> ScheduleSpec {
        ScheduleSpec::baseline(1, 4)
    }

    #[test]
    fn iters_per_epoch_examples() {
        assert_eq!(iters_per_epoch(30000, 128), 235);
        assert_eq!(iters_per_epoch(128, 128), 1);
        assert_eq!(iters_per_epoch(129, 128), 2);
    }

    #[test]
    fn sequence_examples() {
        assert_eq!(batch_source_sequence(&spec().weighed(2.0), 6), vec![G, I, G, I, G, I]);
        assert_eq!(batch_source_sequence(&spec().weighed(0.5), 6), vec![I, G, I, G, I, G]);
        assert_eq!(batch_source_sequence(&spec().early(3), 4), vec![I, I, I, G, G, G, G]);
        assert_eq!(batch_source_sequence(&spec().transfer(2, 0), 3), vec![G, G, G, I, I]);
    }

    #[test]
    fn non_integer_ratio_rounds_by_default() {
        assert_eq!(batch_source_sequence(&spec().weighed(2.4), 4), batch_source_sequence(&spec().weighed(2.0), 4));
        assert_eq!(batch_source_sequence(&spec().weighed(0.3), 6), vec![I, I, G, I, I, G]);
    }

    #[test]
    fn exact_ratio_spreads_individual_batches() {
        let s = ScheduleSpec { exact_ratio: true, ..spec().weighed(2.5) };
        let seq = batch_source_sequence(&s, 10);
        assert_eq!(seq.iter().filter(|x| **x == I).count(), 4);
        let s = ScheduleSpec { exact_ratio: true, ..spec().weighed(2.0) };
        assert_eq!(batch_source_sequence(&s, 6), vec![G, I, G, I, G, I]);
    }

    #[test]
    fn phases_are_labelled() {
        let steps = schedule_steps(&spec().early(1).transfer(1, 0), 1);
        let phases: Vec<_> = steps.iter().map(|s| s.0).collect();
        assert_eq!(phases, vec![Phase::Early, Phase::Main, Phase::Transfer]);
    }

    #[test]
    fn validation() {
        assert!(ScheduleSpec { weigh_ratio: Some(0.0), ..spec() }.validate().is_err());
        assert!(ScheduleSpec { epochs: 0, ..spec() }.validate().is_err());
        assert!(spec().validate().is_ok());
        assert!(!spec().is_personalizing());
        assert!(spec().transfer(1, 0).is_personalizing());
    }

    fn ds(n: usize) -> Dataset {
        Dataset::ingest(2, 1, 1, (0..n).map(|i| (9, (i % 2) as u16, vec![i as u8]))).unwrap()
    }

    #[test]
    fn cursor_consumes_a_permutation_before_reshuffling() {
        let d = ds(5);
        let mut c = DataCursor::new(&d, 3).unwrap();
        let a = c.next_indices(2);
        let b = c.next_indices(2);
        let first_four: BTreeSet<_> = a.iter().chain(&b).collect();
        assert_eq!(first_four.len(), 4);
        let third = c.next_indices(2);
        let first_cycle: BTreeSet<_> = a.iter().chain(&b).chain(&third[..1]).copied().collect();
        assert_eq!(first_cycle, (0..5).collect());
        assert_eq!(c.cycle(), 1);
        assert_eq!(c.position(), 1);
    }

    #[test]
    fn cursor_wraps_with_a_fresh_permutation() {
        let d = ds(210);
        let mut c = DataCursor::new(&d, 11).unwrap();
        let first = c.next_indices(128);
        let second = c.next_indices(128);
        let mut seen: BTreeSet<usize> = first.iter().copied().collect();
        for &i in &second[..82] {
            assert!(seen.insert(i), "repeat within the first cycle");
        }
        assert_eq!(seen.len(), 210);
        assert_eq!(c.cycle(), 1);
        assert_eq!(c.position(), 46);
        let tail: BTreeSet<_> = second[82..].iter().collect();
        assert_eq!(tail.len(), 46);
    }

    #[test]
    fn cursor_is_deterministic_and_rejects_empty_data() {
        let d = ds(7);
        let mut a = DataCursor::new(&d, 5).unwrap();
        let mut b = DataCursor::new(&d, 5).unwrap();
        for _ in 0..6 {
            assert_eq!(a.next_indices(3), b.next_indices(3));
        }
        let empty = Dataset::empty(2, 1, 1);
        assert!(matches!(DataCursor::new(&empty, 0), Err(Error::NoIndividualData)));
    }

    #[test]
    fn batches_larger_than_the_dataset_cycle() {
        let d = ds(3);
        let mut c = DataCursor::new(&d, 0).unwrap();
        let idx = c.next_indices(7);
        assert_eq!(idx.len(), 7);
        let first: BTreeSet<_> = idx[..3].iter().collect();
        assert_eq!(first.len(), 3);
    }

    #[test]
    fn log_csv_layout() {
        let log = TrainingLog {
            entries: vec![LogEntry { step: 1, phase: Phase::Early, source: I, loss: 0.5, sample_ids: None }],
            monitor: vec![],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,phase,source,loss\n1,early,INDIVIDUAL,0.5\n");
    }
}
