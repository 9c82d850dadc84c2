//! End-to-end experiments: data preparation, the shared auto-encoder,
//! per-individual training under every method, evaluation and reporting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::{
    iters_per_epoch, reconstruction_batch, schedule_steps, train_main_phases, train_transfer_phase,
    train_with_schedule, BatchSource, DataCursor, Monitor, Phase, ScheduleSpec, TrainOptions, TrainState,
    TrainingLog,
};
use crate::data::{partition_dataset, read_pds_file, union_datasets, write_pds_file, Dataset, SampleId};
use crate::error::{Error, Result};
use crate::grouping::{
    build_grouped_dataset, class_means, encode_dataset, individual_group_ig, random_group_baseline,
    read_lat_file, sample_group_sg, signature_from_latents, write_lat_file, GroupMethod, IndividualSignature,
    LatentCache, LatentVector,
};
use crate::metrics::{accuracy, build_report, emit_report, MethodResult, ReportOptions, ReportTable, SdKind};
use crate::nn::{
    build_autoencoder, build_classifier, checkpoint, loss_l2, train_step, AdamConfig, AdamState, Mode, Network,
};
use crate::synth::{gen_population, PopulationConfig};
use crate::util::{derive_seed, fnv1a};

const SPLIT_TAG: u64 = 0x5B11;
const GLOBAL_SPLIT_TAG: u64 = u64::MAX;
const INIT_TAG: u64 = 0x1417;
const SHARED_TAG: u64 = 0x5A4E;
const RANDOM_GROUP_TAG: u64 = 0x4A4D;
const AE_TAG: u64 = 0xAE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Generate the population with the glyph generator.
    Synthetic { population: PopulationConfig },
    /// `PDS1` files: the global dataset and one file holding every individual.
    Files { global: PathBuf, individuals: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodSpec {
    /// Trained on the global data joined with the next individual's training
    /// data (individuals form a ring) and tested on the individual itself.
    Baseline {
        #[serde(default)]
        name: Option<String>,
    },
    Shaping {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        early_iters: usize,
        #[serde(default)]
        weigh_ratio: Option<f64>,
        #[serde(default)]
        transfer_iters: usize,
        #[serde(default)]
        frozen_prefix: usize,
        #[serde(default)]
        exact_ratio: bool,
        #[serde(default)]
        reset_optimizer: bool,
    },
    /// Training on the individual's data enlarged by grouping, interleaved
    /// with global batches at `weigh_ratio`.
    Grouping {
        #[serde(default)]
        name: Option<String>,
        method: GroupMethod,
        /// `n` for SG and RANDOM, `k` for IG.
        size: usize,
        #[serde(default = "default_group_ratio")]
        weigh_ratio: f64,
    },
}

fn default_group_ratio() -> f64 {
    2.0
}

fn ratio_label(r: f64) -> String {
    if r.fract() == 0.0 {
        format!("{}", r as i64)
    } else {
        format!("{r}")
    }
}

impl MethodSpec {
    pub fn baseline() -> Self {
        Self::Baseline { name: None }
    }

    pub fn early(iters: usize) -> Self {
        Self::shaping(iters, None, 0)
    }

    pub fn weighed(ratio: f64) -> Self {
        Self::shaping(0, Some(ratio), 0)
    }

    pub fn transfer(iters: usize) -> Self {
        Self::shaping(0, None, iters)
    }

    pub fn shaping(early_iters: usize, weigh_ratio: Option<f64>, transfer_iters: usize) -> Self {
        Self::Shaping {
            name: None,
            early_iters,
            weigh_ratio,
            transfer_iters,
            frozen_prefix: 0,
            exact_ratio: false,
            reset_optimizer: false,
        }
    }

    pub fn grouping(method: GroupMethod, size: usize) -> Self {
        Self::Grouping { name: None, method, size, weigh_ratio: default_group_ratio() }
    }

    /// Display name in the style `EarlyShape-ES-n-400`.
    pub fn name(&self) -> String {
        match self {
            Self::Baseline { name } => name.clone().unwrap_or_else(|| "BaseLine".into()),
            Self::Shaping { name: Some(n), .. } | Self::Grouping { name: Some(n), .. } => n.clone(),
            Self::Shaping { early_iters, weigh_ratio, transfer_iters, frozen_prefix, .. } => {
                let mut parts = Vec::new();
                if *early_iters > 0 {
                    parts.push(format!("ES-{early_iters}"));
                }
                if let Some(r) = weigh_ratio {
                    parts.push(format!("SW-{}", ratio_label(*r)));
                }
                if *transfer_iters > 0 {
                    let frozen = if *frozen_prefix > 0 { format!("-F{frozen_prefix}") } else { String::new() };
                    parts.push(format!("TL-{transfer_iters}{frozen}"));
                }
                match (parts.len(), *early_iters > 0, weigh_ratio.is_some()) {
                    (1, true, _) => format!("EarlyShape-ES-n-{early_iters}"),
                    (1, _, true) => format!("SampleWeigh-SW-n-{}", ratio_label(weigh_ratio.unwrap_or(1.0))),
                    (1, _, _) => format!("TransferL-{}", parts[0].replacen("TL-", "TL-n-", 1)),
                    _ => format!("Shaping-{}", parts.join("-")),
                }
            }
            Self::Grouping { method, size, .. } => match method {
                GroupMethod::Sg => format!("SingleSa.Group-SG-n-{size}"),
                GroupMethod::Ig => format!("Individ.Group-IG-k-{size}"),
                GroupMethod::Random => format!("RandomGroup-RND-n-{size}"),
            },
        }
    }

    pub fn schedule(&self, epochs: usize, batch_size: usize) -> ScheduleSpec {
        let base = ScheduleSpec::baseline(epochs, batch_size);
        match self {
            Self::Baseline { .. } => base,
            Self::Shaping { early_iters, weigh_ratio, transfer_iters, frozen_prefix, exact_ratio, reset_optimizer, .. } => {
                ScheduleSpec {
                    early_iters: *early_iters,
                    weigh_ratio: *weigh_ratio,
                    transfer_iters: *transfer_iters,
                    frozen_prefix: *frozen_prefix,
                    exact_ratio: *exact_ratio,
                    reset_optimizer: *reset_optimizer,
                    ..base
                }
            }
            Self::Grouping { weigh_ratio, .. } => base.weighed(*weigh_ratio),
        }
    }

    /// Transfer-only shaping: everything before the transfer phase uses global
    /// data only and is trained once per seed for all individuals.
    pub fn shares_main_phases(&self) -> bool {
        matches!(self, Self::Shaping { early_iters: 0, weigh_ratio: None, transfer_iters, .. } if *transfer_iters > 0)
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self, Self::Baseline { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Fraction of every individual's data and of the global data used for
    /// training; the rest is the test split.
    pub train_fraction: f64,
    pub methods: Vec<MethodSpec>,
    pub width_multiplier: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub adam: AdamConfig,
    pub latent_dim: usize,
    pub ae_epochs: usize,
    pub save_checkpoints: bool,
    /// Held-out accuracy is logged every this many steps; 0 disables it.
    pub monitor_every: usize,
    /// Method the significance tests compare against.
    pub reference: Option<String>,
    pub sd_kind: SdKind,
    pub paper_format: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic {
                population: PopulationConfig { global_individuals: Some(20), ..PopulationConfig::default() },
            },
            train_fraction: 0.7,
            methods: Self::desk_grid(),
            width_multiplier: 0.25,
            epochs: 5,
            batch_size: 32,
            seeds: (0..5).collect(),
            master_seed: 0,
            out_dir: PathBuf::from("perso-out"),
            workers: 1,
            adam: AdamConfig { alpha: 3e-3, ..AdamConfig::default() },
            latent_dim: 16,
            ae_epochs: 5,
            save_checkpoints: true,
            monitor_every: 50,
            reference: Some("BaseLine".into()),
            sd_kind: SdKind::Population,
            paper_format: false,
        }
    }
}

impl ExperimentConfig {
    /// The method grid scaled to the desk-size population.
    pub fn desk_grid() -> Vec<MethodSpec> {
        vec![
            MethodSpec::baseline(),
            MethodSpec::early(10),
            MethodSpec::early(80),
            MethodSpec::weighed(2.0),
            MethodSpec::weighed(12.0),
            MethodSpec::transfer(5),
            MethodSpec::transfer(60),
            MethodSpec::grouping(GroupMethod::Sg, 100),
            MethodSpec::grouping(GroupMethod::Sg, 400),
            MethodSpec::grouping(GroupMethod::Ig, 1),
            MethodSpec::grouping(GroupMethod::Ig, 3),
            MethodSpec::grouping(GroupMethod::Random, 100),
        ]
    }

    /// The grid of the full-scale study.
    pub fn full_scale_grid() -> Vec<MethodSpec> {
        vec![
            MethodSpec::baseline(),
            MethodSpec::early(40),
            MethodSpec::early(400),
            MethodSpec::weighed(2.0),
            MethodSpec::weighed(12.0),
            MethodSpec::transfer(10),
            MethodSpec::transfer(300),
            MethodSpec::grouping(GroupMethod::Sg, 1500),
            MethodSpec::grouping(GroupMethod::Sg, 6500),
            MethodSpec::grouping(GroupMethod::Ig, 5),
            MethodSpec::grouping(GroupMethod::Ig, 21),
            MethodSpec::grouping(GroupMethod::Random, 1500),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidFraction(self.train_fraction));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.workers == 0 || self.latent_dim == 0 {
            return bad("epochs, batch_size, workers and latent_dim must be positive".into());
        }
        let names: Vec<String> = self.methods.iter().map(MethodSpec::name).collect();
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return bad(format!("method names must be unique: {names:?}"));
        }
        let seeds: BTreeSet<_> = self.seeds.iter().collect();
        if seeds.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if let Some(r) = &self.reference {
            if !names.contains(r) {
                return bad(format!("reference method {r} is not in the grid"));
            }
        }
        for m in &self.methods {
            m.schedule(self.epochs, self.batch_size).validate()?;
        }
        if let DataSource::Synthetic { population } = &self.data {
            population.validate()?;
        }
        Ok(())
    }

    pub fn needs_autoencoder(&self) -> bool {
        self.methods.iter().any(|m| matches!(m, MethodSpec::Grouping { method: GroupMethod::Sg | GroupMethod::Ig, .. }))
    }

    pub fn method(&self, name: &str) -> Result<&MethodSpec> {
        self.methods
            .iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {name}")))
    }

    /// Seed of one training run; independent of scheduling order.
    pub fn run_seed(&self, method: &str, individual: u32, seed: u64) -> u64 {
        derive_seed(&[self.master_seed, fnv1a(method.as_bytes()), u64::from(individual), seed])
    }

    fn shared_seed(&self, method: &str, seed: u64) -> u64 {
        derive_seed(&[self.master_seed, fnv1a(method.as_bytes()), SHARED_TAG, seed])
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn ae_dir(&self) -> PathBuf {
        self.out_dir.join("ae")
    }

    pub fn latent_dir(&self) -> PathBuf {
        self.out_dir.join("latents")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out_dir.join("runs")
    }

    pub fn record_path(&self, method: &str, individual: u32, seed: u64) -> PathBuf {
        self.runs_dir().join(slug(method)).join(format!("i{individual}_s{seed}.json"))
    }
}

/// File-system friendly version of a method name.
pub fn slug(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndividualSplit {
    pub id: u32,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub global_train: Dataset,
    pub global_test: Dataset,
    pub individuals: Vec<IndividualSplit>,
}

impl PreparedData {
    pub fn individual_ids(&self) -> Vec<u32> {
        self.individuals.iter().map(|s| s.id).collect()
    }

    pub fn individual(&self, id: u32) -> Result<&IndividualSplit> {
        self.individuals
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown individual {id}")))
    }

    pub fn test_ids(&self) -> BTreeSet<SampleId> {
        let mut ids = self.global_test.id_set();
        for s in &self.individuals {
            ids.extend(s.test.ids());
        }
        ids
    }

    pub fn train_ids(&self) -> BTreeSet<SampleId> {
        let mut ids = self.global_train.id_set();
        for s in &self.individuals {
            ids.extend(s.train.ids());
        }
        ids
    }

    fn joined(&self, pick: impl Fn(&IndividualSplit) -> &Dataset) -> Result<Dataset> {
        let (h, w) = self.global_train.dims();
        let mut all = Dataset::empty(self.global_train.n_classes(), h, w);
        for s in &self.individuals {
            all = union_datasets(&all, pick(s))?;
        }
        Ok(all)
    }

    pub fn individuals_train(&self) -> Result<Dataset> {
        self.joined(|s| &s.train)
    }

    pub fn individuals_test(&self) -> Result<Dataset> {
        self.joined(|s| &s.test)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_pds_file(&self.global_train, dir.join("global_train.pds"))?;
        write_pds_file(&self.global_test, dir.join("global_test.pds"))?;
        write_pds_file(&self.individuals_train()?, dir.join("individuals_train.pds"))?;
        write_pds_file(&self.individuals_test()?, dir.join("individuals_test.pds"))?;
        Ok(())
    }
}

/// Generates or reads the raw data and splits every dataset into train and test.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (global, individuals) = match &cfg.data {
        DataSource::Synthetic { population } => {
            let pop = gen_population(population)?;
            (pop.global, pop.individuals)
        }
        DataSource::Files { global, individuals } => {
            let global = read_pds_file(global)?;
            let individuals = read_pds_file(individuals)?;
            global.compatible_with(&individuals)?;
            let background = global.individuals();
            let shared: Vec<u32> = individuals.individuals().into_iter().filter(|id| background.contains(id)).collect();
            if !shared.is_empty() {
                return Err(Error::DatasetMismatch(format!("individuals {shared:?} occur in the global data too")));
            }
            (global, individuals.split_by_individual())
        }
    };
    if individuals.is_empty() {
        return Err(Error::NoIndividualData);
    }
    let g = partition_dataset(&global, cfg.train_fraction, derive_seed(&[cfg.master_seed, SPLIT_TAG, GLOBAL_SPLIT_TAG]))?;
    if g.degenerate {
        return Err(Error::InvalidConfig("global dataset too small to split".into()));
    }
    let mut splits = Vec::with_capacity(individuals.len());
    for (id, ds) in individuals {
        let p = partition_dataset(&ds, cfg.train_fraction, derive_seed(&[cfg.master_seed, SPLIT_TAG, u64::from(id)]))?;
        if p.degenerate {
            return Err(Error::InvalidConfig(format!("individual {id} has too few samples to split")));
        }
        splits.push(IndividualSplit { id, train: p.train, test: p.test });
    }
    Ok(PreparedData { global_train: g.train, global_test: g.test, individuals: splits })
}

/// Prepares the splits and writes them to the output directory.
///
/// `PDS1` files carry no sequence numbers, so the saved splits are an export
/// only: sample identities are always rebuilt from the source, which the
/// seeded split reproduces exactly.
pub fn load_or_prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let data = prepare_data(cfg)?;
    data.save(cfg.data_dir())?;
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderSummary {
    pub steps: usize,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    /// Reconstruction loss on the global test split before and after training.
    pub heldout_loss_before: f64,
    pub heldout_loss_after: f64,
    pub latent_dim: usize,
}

/// Encoder and the latents of every prepared dataset.
#[derive(Debug, Clone)]
pub struct LatentSpace {
    pub encoder: Network<f32>,
    pub global_train: Vec<LatentVector>,
    pub global_test: Vec<LatentVector>,
    /// Per individual, in [`PreparedData::individuals`] order.
    pub individuals_train: Vec<Vec<LatentVector>>,
    pub individuals_test: Vec<Vec<LatentVector>>,
    pub summary: Option<AutoencoderSummary>,
}

fn reconstruction_loss(net: &Network<f32>, ds: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(256) {
        let b = reconstruction_batch(ds, chunk);
        let out = net.predict(&b.inputs)?;
        total += loss_l2(&out, &b.inputs) * chunk.len() as f64;
    }
    Ok(total / ds.len().max(1) as f64)
}

const LATENT_FILES: [&str; 4] = ["global_train", "global_test", "individuals_train", "individuals_test"];

/// Trains the auto-encoder on the global and all individual training data,
/// then writes its checkpoints and the latent caches.
pub fn train_shared_autoencoder(cfg: &ExperimentConfig, data: &PreparedData) -> Result<LatentSpace> {
    let all = union_datasets(&data.global_train, &data.individuals_train()?)?;
    let (h, w) = all.dims();
    let seed = derive_seed(&[cfg.master_seed, AE_TAG]);
    let (encoder, decoder) = build_autoencoder::<f32>(cfg.width_multiplier, cfg.latent_dim, (h, w), seed)?;
    let split = encoder.layers().len();
    let mut net = Network::chain(encoder, decoder)?;
    let heldout_loss_before = reconstruction_loss(&net, &data.global_test)?;
    let mut adam = AdamState::new(&net, cfg.adam);
    let mut cursor = DataCursor::new(&all, derive_seed(&[seed, 2]))?;
    let n_iter = iters_per_epoch(all.len(), cfg.batch_size);
    net.set_mode(Mode::Train);
    net.reseed(derive_seed(&[seed, 3]));
    let mut losses = Vec::with_capacity(cfg.ae_epochs * n_iter);
    for _ in 0..cfg.ae_epochs * n_iter {
        let idx = cursor.next_indices(cfg.batch_size);
        losses.push(train_step(&mut net, &mut adam, &reconstruction_batch(&all, &idx))?);
    }
    net.set_mode(Mode::Eval);
    let epoch_mean = |e: usize| losses[e * n_iter..(e + 1) * n_iter].iter().sum::<f64>() / n_iter as f64;
    let summary = AutoencoderSummary {
        steps: losses.len(),
        first_epoch_loss: if cfg.ae_epochs > 0 { epoch_mean(0) } else { f64::NAN },
        last_epoch_loss: if cfg.ae_epochs > 0 { epoch_mean(cfg.ae_epochs - 1) } else { f64::NAN },
        heldout_loss_before,
        heldout_loss_after: reconstruction_loss(&net, &data.global_test)?,
        latent_dim: cfg.latent_dim,
    };
    let dir = cfg.ae_dir();
    std::fs::create_dir_all(&dir)?;
    checkpoint::save_checkpoint(&net, &adam, dir.join("autoencoder.pck"))?;
    let (encoder, _) = net.split_at(split);
    checkpoint::save_network(&encoder, dir.join("encoder.pck"))?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let mut log = csv::Writer::from_path(dir.join("training_log.csv"))?;
    log.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        log.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    log.flush()?;
    info!(
        "auto-encoder: {} steps, held-out loss {:.5} -> {:.5}",
        summary.steps, summary.heldout_loss_before, summary.heldout_loss_after
    );
    let mut space = encode_all(encoder, data)?;
    space.summary = Some(summary);
    space.write_caches(&cfg.latent_dir(), data)?;
    Ok(space)
}

fn encode_all(encoder: Network<f32>, data: &PreparedData) -> Result<LatentSpace> {
    let per = |pick: fn(&IndividualSplit) -> &Dataset| -> Result<Vec<Vec<LatentVector>>> {
        data.individuals.iter().map(|s| encode_dataset(&encoder, pick(s))).collect()
    };
    Ok(LatentSpace {
        global_train: encode_dataset(&encoder, &data.global_train)?,
        global_test: encode_dataset(&encoder, &data.global_test)?,
        individuals_train: per(|s| &s.train)?,
        individuals_test: per(|s| &s.test)?,
        encoder,
        summary: None,
    })
}

impl LatentSpace {
    fn caches(&self, data: &PreparedData) -> Result<Vec<LatentCache>> {
        let flat = |v: &[Vec<LatentVector>]| v.iter().flatten().cloned().collect::<Vec<_>>();
        Ok(vec![
            LatentCache::from_dataset(&data.global_train, self.global_train.clone())?,
            LatentCache::from_dataset(&data.global_test, self.global_test.clone())?,
            LatentCache::from_dataset(&data.individuals_train()?, flat(&self.individuals_train))?,
            LatentCache::from_dataset(&data.individuals_test()?, flat(&self.individuals_test))?,
        ])
    }

    pub fn write_caches(&self, dir: &Path, data: &PreparedData) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, cache) in LATENT_FILES.iter().zip(self.caches(data)?) {
            write_lat_file(&cache, dir.join(format!("{name}.lat")))?;
        }
        Ok(())
    }

    /// Loads the encoder checkpoint and the latent caches written by
    /// [`train_shared_autoencoder`].
    pub fn load(cfg: &ExperimentConfig, data: &PreparedData) -> Result<Self> {
        let (h, w) = data.global_train.dims();
        let (mut encoder, _) = build_autoencoder::<f32>(cfg.width_multiplier, cfg.latent_dim, (h, w), 0)?;
        checkpoint::load_network(&mut encoder, cfg.ae_dir().join("encoder.pck"))?;
        let mut by_id: HashMap<SampleId, LatentVector> = HashMap::new();
        for name in LATENT_FILES {
            let cache = read_lat_file(cfg.latent_dir().join(format!("{name}.lat")))?;
            if cache.latent_dim != cfg.latent_dim {
                return Err(Error::Format(format!("{name}.lat has latent dimension {}", cache.latent_dim)));
            }
            by_id.extend(cache.entries.into_iter().map(|e| (e.id, e.values)));
        }
        let lookup = |ds: &Dataset| -> Result<Vec<LatentVector>> {
            ds.ids()
                .map(|id| by_id.get(&id).cloned().ok_or_else(|| Error::Format(format!("no cached latent for {id:?}"))))
                .collect()
        };
        let summary = std::fs::read_to_string(cfg.ae_dir().join("summary.json"))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok());
        Ok(Self {
            global_train: lookup(&data.global_train)?,
            global_test: lookup(&data.global_test)?,
            individuals_train: data.individuals.iter().map(|s| lookup(&s.train)).collect::<Result<_>>()?,
            individuals_test: data.individuals.iter().map(|s| lookup(&s.test)).collect::<Result<_>>()?,
            encoder,
            summary,
        })
    }

    pub fn available(cfg: &ExperimentConfig) -> bool {
        cfg.ae_dir().join("encoder.pck").exists()
            && LATENT_FILES.iter().all(|n| cfg.latent_dir().join(format!("{n}.lat")).exists())
    }
}

pub fn load_or_train_autoencoder(cfg: &ExperimentConfig, data: &PreparedData) -> Result<LatentSpace> {
    if LatentSpace::available(cfg) {
        return LatentSpace::load(cfg, data);
    }
    train_shared_autoencoder(cfg, data)
}

/// Similarity structure needed by the grouping methods.
#[derive(Debug, Clone)]
pub struct GroupingContext {
    pub latents: LatentSpace,
    pub global_means: Vec<Vec<f64>>,
    /// Signatures of the individuals contributing to the global training data.
    pub candidates: Vec<IndividualSignature>,
    pub targets: Vec<IndividualSignature>,
}

impl GroupingContext {
    pub fn new(latents: LatentSpace, data: &PreparedData) -> Result<Self> {
        let n_classes = data.global_train.n_classes();
        let mut all_latents = latents.global_train.clone();
        let mut all_labels: Vec<usize> = data.global_train.labels().collect();
        for (s, z) in data.individuals.iter().zip(&latents.individuals_train) {
            all_latents.extend(z.iter().cloned());
            all_labels.extend(s.train.labels());
        }
        let (global_means, _) = class_means(&all_latents, &all_labels, n_classes)?;
        let mut candidates = Vec::new();
        for id in data.global_train.individuals() {
            let idx: Vec<usize> = (0..data.global_train.len()).filter(|&i| data.global_train.get(i).individual() == id).collect();
            let z: Vec<LatentVector> = idx.iter().map(|&i| latents.global_train[i].clone()).collect();
            let y: Vec<usize> = idx.iter().map(|&i| usize::from(data.global_train.get(i).label)).collect();
            candidates.push(signature_from_latents(id, &z, &y, &global_means)?);
        }
        let targets = data
            .individuals
            .iter()
            .zip(&latents.individuals_train)
            .map(|(s, z)| signature_from_latents(s.id, z, &s.train.labels().collect::<Vec<_>>(), &global_means))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { latents, global_means, candidates, targets })
    }

    /// Samples borrowed by individual `index` under a grouping method.
    pub fn augmentation(
        &self,
        data: &PreparedData,
        index: usize,
        method: GroupMethod,
        size: usize,
        seed: u64,
    ) -> Result<Dataset> {
        let g = &data.global_train;
        Ok(match method {
            GroupMethod::Sg => {
                g.subset(&sample_group_sg(&self.latents.individuals_train[index], &self.latents.global_train, size)?)
            }
            GroupMethod::Ig => {
                let target = &self.targets[index];
                let pool: Vec<IndividualSignature> =
                    self.candidates.iter().filter(|c| c.individual != target.individual).cloned().collect();
                let chosen: BTreeSet<u32> = individual_group_ig(target, &pool, size)?.into_iter().collect();
                g.filter(|s| chosen.contains(&s.individual()))
            }
            GroupMethod::Random => g.subset(&random_group_baseline(g, size, derive_seed(&[seed, RANDOM_GROUP_TAG]))?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub individual_id: u32,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub log_path: PathBuf,
    /// Accuracy on the individual's test split; `None` when training diverged.
    pub individual_accuracy: Option<f64>,
    /// Accuracy on the global test split.
    pub global_accuracy: Option<f64>,
    pub wall_clock_secs: f64,
    pub steps: usize,
    pub individual_steps: usize,
    /// Size of the individual batch source (with any grouped samples).
    pub individual_train_size: usize,
    pub augmentation_size: usize,
    /// No test sample appeared in any training batch.
    pub leakage_free: bool,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none() && self.individual_accuracy.is_some() && self.global_accuracy.is_some()
    }
}

fn write_json_atomic<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_record(path: impl AsRef<Path>) -> Result<RunRecord> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Shared state of an experiment: configuration, data and optional latents.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub data: PreparedData,
    pub grouping: Option<GroupingContext>,
    test_ids: BTreeSet<SampleId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunKey {
    pub method: usize,
    pub individual: usize,
    pub seed: u64,
}

impl Experiment {
    /// Loads or creates the data splits and, when grouping needs it, the
    /// shared auto-encoder.
    pub fn setup(cfg: ExperimentConfig) -> Result<Self> {
        let needs = cfg.needs_autoencoder();
        Self::open(cfg, needs)
    }

    /// Like [`Experiment::setup`], but the auto-encoder is only loaded or
    /// trained when `with_grouping` is set.
    pub fn open(cfg: ExperimentConfig, with_grouping: bool) -> Result<Self> {
        cfg.validate()?;
        let data = load_or_prepare_data(&cfg)?;
        if cfg.methods.iter().any(MethodSpec::is_baseline) && data.individuals.len() < 2 {
            return Err(Error::InvalidConfig("the baseline needs at least two individuals".into()));
        }
        let grouping = if with_grouping {
            Some(GroupingContext::new(load_or_train_autoencoder(&cfg, &data)?, &data)?)
        } else {
            None
        };
        let test_ids = data.test_ids();
        Ok(Self { cfg, data, grouping, test_ids })
    }

    pub fn all_runs(&self) -> Vec<RunKey> {
        let mut keys = Vec::new();
        for method in 0..self.cfg.methods.len() {
            for individual in 0..self.data.individuals.len() {
                for &seed in &self.cfg.seeds {
                    keys.push(RunKey { method, individual, seed });
                }
            }
        }
        keys
    }

    fn key_path(&self, key: RunKey) -> PathBuf {
        let m = self.cfg.methods[key.method].name();
        self.cfg.record_path(&m, self.data.individuals[key.individual].id, key.seed)
    }

    /// Runs without a readable record on disk.
    pub fn pending_runs(&self) -> Vec<RunKey> {
        self.all_runs().into_iter().filter(|k| read_record(self.key_path(*k)).is_err()).collect()
    }

    fn classifier(&self, seed: u64) -> Result<Network<f32>> {
        let (h, w) = self.data.global_train.dims();
        build_classifier(self.cfg.width_multiplier, self.data.global_train.n_classes(), (h, w), seed)
    }

    /// Main phases of a transfer-only method, trained once per seed.
    pub fn shared_main_phases(&self, method: usize, seed: u64) -> Result<(Network<f32>, TrainState)> {
        let spec_m = &self.cfg.methods[method];
        let shared = self.cfg.shared_seed(&spec_m.name(), seed);
        let mut net = self.classifier(derive_seed(&[shared, INIT_TAG]))?;
        let spec = spec_m.schedule(self.cfg.epochs, self.cfg.batch_size);
        let opts = TrainOptions { adam: self.cfg.adam, seed: shared, record_ids: true, monitor: None };
        let empty = Dataset::empty(self.data.global_train.n_classes(), self.data.global_train.height(), self.data.global_train.width());
        let state = train_main_phases(&mut net, &empty, &self.data.global_train, &spec, &opts)?;
        Ok((net, state))
    }

    /// Trains and evaluates one model and writes its record and artifacts.
    pub fn execute(&self, key: RunKey, shared: Option<&(Network<f32>, TrainState)>) -> Result<RunRecord> {
        let started = Instant::now();
        let cfg = &self.cfg;
        let method = &cfg.methods[key.method];
        let name = method.name();
        let me = &self.data.individuals[key.individual];
        let run_seed = cfg.run_seed(&name, me.id, key.seed);
        let record_path = self.key_path(key);
        let stem = record_path.with_extension("");
        let log_path = stem.with_extension("csv");
        let spec = method.schedule(cfg.epochs, cfg.batch_size);
        let monitor = (cfg.monitor_every > 0).then_some(Monitor {
            individual: &me.test,
            global: &self.data.global_test,
            every: cfg.monitor_every,
        });
        let opts = TrainOptions { adam: cfg.adam, seed: run_seed, record_ids: true, monitor };

        let mut augmentation_size = 0;
        let mut individual_train_size = me.train.len();
        let (mut net, outcome) = match method {
            MethodSpec::Baseline { .. } => {
                let partner = &self.data.individuals[(key.individual + 1) % self.data.individuals.len()];
                let union = union_datasets(&self.data.global_train, &partner.train)?;
                let mut net = self.classifier(derive_seed(&[run_seed, INIT_TAG]))?;
                let out = train_with_schedule(&mut net, &me.train, &union, &spec, &opts);
                individual_train_size = 0;
                (net, out)
            }
            MethodSpec::Shaping { .. } if method.shares_main_phases() => {
                let (net, state) = shared.cloned().map(Ok).unwrap_or_else(|| self.shared_main_phases(key.method, key.seed))?;
                let mut net = net;
                let out = train_transfer_phase(&mut net, state, &me.train, &spec, &opts);
                (net, out)
            }
            MethodSpec::Shaping { .. } => {
                let mut net = self.classifier(derive_seed(&[run_seed, INIT_TAG]))?;
                let out = train_with_schedule(&mut net, &me.train, &self.data.global_train, &spec, &opts);
                (net, out)
            }
            MethodSpec::Grouping { method: group, size, .. } => {
                let ctx = self.grouping.as_ref();
                let aug = match (group, ctx) {
                    (GroupMethod::Random, _) => {
                        let g = &self.data.global_train;
                        g.subset(&random_group_baseline(g, *size, derive_seed(&[run_seed, RANDOM_GROUP_TAG]))?)
                    }
                    (_, Some(ctx)) => ctx.augmentation(&self.data, key.individual, *group, *size, run_seed)?,
                    (_, None) => return Err(Error::InvalidConfig("grouping needs the auto-encoder latents".into())),
                };
                let grouped = build_grouped_dataset(&me.train, aug, *group, *size)?;
                augmentation_size = grouped.augmentation.len();
                let train = grouped.training_set()?;
                individual_train_size = train.len();
                let mut net = self.classifier(derive_seed(&[run_seed, INIT_TAG]))?;
                let out = train_with_schedule(&mut net, &train, &self.data.global_train, &spec, &opts);
                (net, out)
            }
        };

        let mut record = RunRecord {
            method: name.clone(),
            individual_id: me.id,
            seed: key.seed,
            checkpoint: None,
            log_path: log_path.clone(),
            individual_accuracy: None,
            global_accuracy: None,
            wall_clock_secs: 0.0,
            steps: 0,
            individual_steps: 0,
            individual_train_size,
            augmentation_size,
            leakage_free: true,
            error: None,
        };
        if let Some(dir) = log_path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        match outcome {
            Ok(log) => {
                record.leakage_free = self.leak_free(&log);
                record.steps = log.entries.len();
                record.individual_steps = log.count(BatchSource::Individual);
                log.write_csv_file(&log_path)?;
                if !log.monitor.is_empty() {
                    write_monitor(&log, &stem.with_extension("monitor.csv"))?;
                }
                net.set_mode(Mode::Eval);
                record.individual_accuracy = Some(accuracy(&net, &me.test)?);
                record.global_accuracy = Some(accuracy(&net, &self.data.global_test)?);
                if cfg.save_checkpoints {
                    let path = stem.with_extension("pck");
                    checkpoint::save_network(&net, &path)?;
                    record.checkpoint = Some(path);
                }
            }
            Err(Error::Divergence { step }) => {
                warn!("{name} individual {} seed {}: diverged at step {step}", me.id, key.seed);
                TrainingLog::default().write_csv_file(&log_path)?;
                record.error = Some(format!("divergence at step {step}"));
            }
            Err(e) => return Err(e),
        }
        record.wall_clock_secs = started.elapsed().as_secs_f64();
        write_json_atomic(&record, &record_path)?;
        Ok(record)
    }

    fn leak_free(&self, log: &TrainingLog) -> bool {
        log.entries.iter().flat_map(|e| e.sample_ids.iter().flatten()).all(|id| !self.test_ids.contains(id))
    }

    /// Executes every pending run on `cfg.workers` threads.
    pub fn run_pending(&self) -> Result<Vec<RunRecord>> {
        let pending = self.pending_runs();
        let total = pending.len();
        if total == 0 {
            return Ok(Vec::new());
        }
        info!("{total} runs pending ({} already recorded)", self.all_runs().len() - total);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        pool.install(|| {
            let shared_keys: BTreeSet<(usize, u64)> = pending
                .iter()
                .filter(|k| self.cfg.methods[k.method].shares_main_phases())
                .map(|k| (k.method, k.seed))
                .collect();
            let shared: BTreeMap<(usize, u64), (Network<f32>, TrainState)> = shared_keys
                .into_par_iter()
                .map(|(m, s)| self.shared_main_phases(m, s).map(|v| ((m, s), v)))
                .collect::<Result<_>>()?;
            let done = std::sync::atomic::AtomicUsize::new(0);
            pending
                .par_iter()
                .map(|&key| {
                    let rec = self.execute(key, shared.get(&(key.method, key.seed)))?;
                    let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                    info!(
                        "[{n}/{total}] {} individual {} seed {}: acc(D_I) {:?}, acc(D_G) {:?} in {:.1}s",
                        rec.method,
                        rec.individual_id,
                        rec.seed,
                        rec.individual_accuracy,
                        rec.global_accuracy,
                        rec.wall_clock_secs
                    );
                    Ok(rec)
                })
                .collect()
        })
    }

    /// Every record of the configured grid that exists on disk.
    pub fn records(&self) -> Result<Vec<RunRecord>> {
        let mut out = Vec::new();
        for key in self.all_runs() {
            let path = self.key_path(key);
            if path.exists() {
                out.push(read_record(&path)?);
            }
        }
        Ok(out)
    }

    /// Fraction of the global training data seen per epoch by each method.
    pub fn coverage_notes(&self) -> Vec<String> {
        let n_global = self.data.global_train.len();
        let n_iter = iters_per_epoch(n_global, self.cfg.batch_size);
        let mut notes = vec![
            "Early-shaping and transfer batches are added to the epochs x n_iter main batches.".to_string(),
            format!("Global training data per epoch: {n_global} samples, n_iter = {n_iter}."),
        ];
        for m in &self.cfg.methods {
            if m.is_baseline() {
                continue;
            }
            let steps = schedule_steps(&m.schedule(self.cfg.epochs, self.cfg.batch_size), n_iter);
            let global = steps.iter().filter(|(p, s)| *p == Phase::Main && *s == BatchSource::Global).count();
            let coverage = (global * self.cfg.batch_size) as f64 / (self.cfg.epochs * n_global) as f64;
            notes.push(format!("Effective D_G coverage per epoch, {}: {:.0}%", m.name(), 100.0 * coverage.min(1.0)));
        }
        notes
    }
}

fn write_monitor(log: &TrainingLog, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "individual_accuracy", "global_accuracy"])?;
    for m in &log.monitor {
        w.write_record([m.step.to_string(), m.individual_accuracy.to_string(), m.global_accuracy.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-method results from run records. Individuals without a successful run
/// under some method are dropped from every method so rows stay paired.
pub fn aggregate(records: &[RunRecord], methods: &[String], individuals: &[u32], seeds: &[u64]) -> Vec<MethodResult> {
    let mut per: BTreeMap<(&str, u32), Vec<&RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.succeeded()) {
        per.entry((r.method.as_str(), r.individual_id)).or_default().push(r);
    }
    let complete: Vec<u32> = individuals
        .iter()
        .copied()
        .filter(|id| {
            let ok = methods.iter().all(|m| per.contains_key(&(m.as_str(), *id)));
            if !ok {
                warn!("individual {id} lacks successful runs for some method and is left out of the report");
            }
            ok
        })
        .collect();
    methods
        .iter()
        .map(|m| {
            let mut individual_accuracies = Vec::with_capacity(complete.len());
            let mut global_accuracies = Vec::new();
            for id in &complete {
                let runs = &per[&(m.as_str(), *id)];
                let accs: Vec<f64> = runs.iter().filter_map(|r| r.individual_accuracy).collect();
                individual_accuracies.push(accs.iter().sum::<f64>() / accs.len() as f64);
                global_accuracies.extend(runs.iter().filter_map(|r| r.global_accuracy));
            }
            MethodResult {
                method: m.clone(),
                individual_ids: complete.clone(),
                individual_accuracies,
                global_accuracies,
                seeds: seeds.to_vec(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub runs: usize,
    pub diverged: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks split disjointness, test-set leakage, accuracy ranges and that the
/// files referenced by every record exist.
pub fn audit(data: &PreparedData, records: &[RunRecord]) -> AuditReport {
    let mut report = AuditReport { runs: records.len(), ..Default::default() };
    let overlap = data.train_ids().intersection(&data.test_ids()).count();
    if overlap > 0 {
        report.violations.push(format!("{overlap} sample identities occur in both a train and a test split"));
    }
    for r in records {
        let tag = format!("{} individual {} seed {}", r.method, r.individual_id, r.seed);
        if r.error.is_some() {
            report.diverged += 1;
        }
        if !r.leakage_free {
            report.violations.push(format!("{tag}: a test sample was used for training"));
        }
        for acc in [r.individual_accuracy, r.global_accuracy].into_iter().flatten() {
            if !(0.0..=1.0).contains(&acc) {
                report.violations.push(format!("{tag}: accuracy {acc} outside [0, 1]"));
            }
        }
        if !r.log_path.exists() {
            report.violations.push(format!("{tag}: missing training log {}", r.log_path.display()));
        }
        if let Some(c) = &r.checkpoint {
            if !c.exists() {
                report.violations.push(format!("{tag}: missing checkpoint {}", c.display()));
            }
        }
    }
    report
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub results: Vec<MethodResult>,
    pub records: Vec<RunRecord>,
    pub report: ReportTable,
    pub audit: AuditReport,
    pub autoencoder: Option<AutoencoderSummary>,
}

impl Experiment {
    /// Aggregates the records on disk, writes `results.json`, the report files
    /// and `audit.json`.
    pub fn finish(&self) -> Result<ExperimentOutcome> {
        let records = self.records()?;
        let names: Vec<String> = self.cfg.methods.iter().map(MethodSpec::name).collect();
        let results = aggregate(&records, &names, &self.data.individual_ids(), &self.cfg.seeds);
        let opts = ReportOptions {
            sd_kind: self.cfg.sd_kind,
            paper_format: self.cfg.paper_format,
            reference: self.cfg.reference.clone(),
            notes: self.coverage_notes(),
        };
        let report = build_report(&results, &opts)?;
        emit_report(&report, &self.cfg.out_dir, self.cfg.paper_format, true)?;
        write_json_atomic(&results, &self.cfg.out_dir.join("results.json"))?;
        let audit = audit(&self.data, &records);
        write_json_atomic(&audit, &self.cfg.out_dir.join("audit.json"))?;
        Ok(ExperimentOutcome {
            results,
            records,
            report,
            audit,
            autoencoder: self.grouping.as_ref().and_then(|g| g.latents.summary.clone()),
        })
    }
}

impl Experiment {
    /// Writes one selection manifest per individual for a grouping method and
    /// returns their paths.
    pub fn write_group_manifests(&self, method: GroupMethod, size: usize) -> Result<Vec<PathBuf>> {
        let dir = self.cfg.out_dir.join("groups").join(format!("{method}-{size}"));
        std::fs::create_dir_all(&dir)?;
        let mut paths = Vec::with_capacity(self.data.individuals.len());
        for (index, me) in self.data.individuals.iter().enumerate() {
            let seed = self.cfg.run_seed(&MethodSpec::grouping(method, size).name(), me.id, 0);
            let aug = match (&self.grouping, method) {
                (_, GroupMethod::Random) => {
                    let g = &self.data.global_train;
                    g.subset(&random_group_baseline(g, size, derive_seed(&[seed, RANDOM_GROUP_TAG]))?)
                }
                (Some(ctx), _) => ctx.augmentation(&self.data, index, method, size, seed)?,
                (None, _) => return Err(Error::InvalidConfig("grouping needs the auto-encoder latents".into())),
            };
            let path = dir.join(format!("indiv_{}.csv", me.id));
            let ids: Vec<SampleId> = aug.ids().collect();
            crate::grouping::write_selection_csv(&ids, std::fs::File::create(&path)?)?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Reloads every recorded checkpoint and recomputes its accuracies.
    /// Returns the records whose stored values differ from the recomputed ones.
    pub fn reevaluate(&self) -> Result<Vec<(RunRecord, f64, f64)>> {
        let mut mismatches = Vec::new();
        for r in self.records()? {
            let Some(path) = &r.checkpoint else { continue };
            let mut net = self.classifier(0)?;
            checkpoint::load_network(&mut net, path)?;
            let me = self.data.individual(r.individual_id)?;
            let ind = accuracy(&net, &me.test)?;
            let glob = accuracy(&net, &self.data.global_test)?;
            if r.individual_accuracy != Some(ind) || r.global_accuracy != Some(glob) {
                mismatches.push((r, ind, glob));
            }
        }
        Ok(mismatches)
    }

    /// Accuracy of a saved classifier on a dataset file.
    pub fn evaluate_checkpoint(&self, checkpoint_path: &Path, data: &Dataset) -> Result<f64> {
        let mut net = self.classifier(0)?;
        checkpoint::load_network(&mut net, checkpoint_path)?;
        accuracy(&net, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub global: PathBuf,
    pub individuals: Vec<(u32, PathBuf)>,
    pub global_individuals: Vec<u32>,
    pub variation_mode: crate::synth::VariationMode,
    pub config: PopulationConfig,
}

/// Generates a population and writes `global.pds`, one `indiv_<id>.pds` per
/// individual and `manifest.json` into `dir`.
pub fn generate_files(cfg: &PopulationConfig, dir: impl AsRef<Path>) -> Result<GenerationManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let pop = gen_population(cfg)?;
    let global = dir.join("global.pds");
    write_pds_file(&pop.global, &global)?;
    let mut individuals = Vec::with_capacity(pop.individuals.len());
    for (id, ds) in &pop.individuals {
        let path = dir.join(format!("indiv_{id}.pds"));
        write_pds_file(ds, &path)?;
        individuals.push((*id, path));
    }
    let manifest = GenerationManifest {
        global,
        individuals,
        global_individuals: pop.global.individuals(),
        variation_mode: cfg.variation_mode,
        config: cfg.clone(),
    };
    write_json_atomic(&manifest, &dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Runs the whole protocol; completed runs found on disk are reused.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let exp = Experiment::setup(cfg.clone())?;
    exp.run_pending()?;
    exp.finish()
}
