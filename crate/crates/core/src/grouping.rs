//! Latent-space similarity and data grouping.
//!
//! Sample grouping (SG) enlarges an individual's data with the global samples
//! closest to each of its samples. Individual grouping (IG) adds the whole
//! datasets of the individuals whose per-class latent means are closest.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::image_tensor;
use crate::data::{union_datasets, Dataset, SampleId};
use crate::error::{Error, Result};
use crate::nn::Network;

pub const LAT_MAGIC: &[u8; 4] = b"LAT1";

const ENCODE_BATCH: usize = 256;

pub type LatentVector = Vec<f32>;

/// Encoder outputs in dataset order.
pub fn encode_dataset(encoder: &Network<f32>, ds: &Dataset) -> Result<Vec<LatentVector>> {
    let (h, w) = ds.dims();
    if encoder.input_shape() != [1, h, w] {
        return Err(Error::DatasetMismatch(format!(
            "encoder expects {:?}, dataset images are 1x{h}x{w}",
            encoder.input_shape()
        )));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(ENCODE_BATCH) {
        let z = encoder.predict(&image_tensor(ds, chunk))?;
        for r in 0..chunk.len() {
            let row = z.row(r);
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::Format(format!("non-finite latent for sample {:?}", ds.get(chunk[r]).id)));
            }
            out.push(row.to_vec());
        }
    }
    Ok(out)
}

/// Squared Euclidean distance accumulated in double precision.
pub fn squared_distance<A: Copy + Into<f64>, B: Copy + Into<f64>>(a: &[A], b: &[B]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((*x).into() - (*y).into()).powi(2)).sum()
}

fn by_distance(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Selects `n` distinct global samples. Individual samples take turns in
/// order; on its turn a sample claims its nearest global sample that has not
/// been claimed yet, distance ties going to the lower index. The result is in
/// selection order, so a smaller budget yields a prefix of a larger one.
pub fn sample_group_sg(individual: &[LatentVector], global: &[LatentVector], n: usize) -> Result<Vec<usize>> {
    if n > global.len() {
        return Err(Error::InsufficientGlobalData { requested: n, available: global.len() });
    }
    if individual.is_empty() {
        return Err(Error::NoIndividualData);
    }
    let ranked: Vec<Vec<usize>> = individual
        .iter()
        .map(|z| {
            let mut d: Vec<(f64, usize)> = global.iter().enumerate().map(|(j, g)| (squared_distance(z, g), j)).collect();
            d.sort_unstable_by(by_distance);
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    let mut taken = vec![false; global.len()];
    let mut cursor = vec![0usize; individual.len()];
    let mut out = Vec::with_capacity(n);
    for turn in 0..n {
        let owner = turn % individual.len();
        let list = &ranked[owner];
        while taken[list[cursor[owner]]] {
            cursor[owner] += 1;
        }
        let j = list[cursor[owner]];
        taken[j] = true;
        out.push(j);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualSignature {
    pub individual: u32,
    /// Per-class mean latents, concatenated in class order.
    pub values: Vec<f64>,
    /// Whether the class occurs in the individual's data.
    pub present: Vec<bool>,
}

impl IndividualSignature {
    pub fn latent_dim(&self) -> usize {
        self.values.len() / self.present.len().max(1)
    }

    pub fn class_slice(&self, class: usize) -> &[f64] {
        let d = self.latent_dim();
        &self.values[class * d..(class + 1) * d]
    }

    pub fn distance(&self, other: &Self) -> f64 {
        squared_distance(&self.values, &other.values).sqrt()
    }
}

/// Mean latent of every class; classes without samples get zeros and `false`.
pub fn class_means(latents: &[LatentVector], labels: &[usize], n_classes: usize) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    if latents.len() != labels.len() {
        return Err(Error::LengthMismatch(latents.len(), labels.len()));
    }
    let dim = latents.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (z, &y) in latents.iter().zip(labels) {
        if y >= n_classes {
            return Err(Error::ClassOutOfRange { class: y, n_classes });
        }
        if z.len() != dim {
            return Err(Error::LengthMismatch(z.len(), dim));
        }
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(z) {
            *s += f64::from(*v);
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    Ok((sums, counts.iter().map(|&c| c > 0).collect()))
}

/// Signature from precomputed latents; absent classes take `global_means`.
pub fn signature_from_latents(
    individual: u32,
    latents: &[LatentVector],
    labels: &[usize],
    global_means: &[Vec<f64>],
) -> Result<IndividualSignature> {
    if latents.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (means, present) = class_means(latents, labels, global_means.len())?;
    let mut values = Vec::with_capacity(global_means.len() * latents[0].len());
    for ((mean, &here), fallback) in means.iter().zip(&present).zip(global_means) {
        if fallback.len() != mean.len() {
            return Err(Error::LengthMismatch(fallback.len(), mean.len()));
        }
        values.extend_from_slice(if here { mean } else { fallback });
    }
    Ok(IndividualSignature { individual, values, present })
}

/// Encodes `ds` and summarizes it per class. The signature is attributed to
/// the individual of the first sample.
pub fn individual_signature(
    encoder: &Network<f32>,
    ds: &Dataset,
    global_means: &[Vec<f64>],
) -> Result<IndividualSignature> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let latents = encode_dataset(encoder, ds)?;
    let labels: Vec<usize> = ds.labels().collect();
    signature_from_latents(ds.get(0).individual(), &latents, &labels, global_means)
}

/// The `k` pool members closest to `target`, nearest first, ties by id.
pub fn individual_group_ig(target: &IndividualSignature, pool: &[IndividualSignature], k: usize) -> Result<Vec<u32>> {
    if pool.iter().any(|s| s.individual == target.individual) {
        return Err(Error::InvalidConfig(format!("individual {} is in its own candidate pool", target.individual)));
    }
    if k > pool.len() {
        return Err(Error::PoolTooSmall { requested: k, available: pool.len() });
    }
    let mut d: Vec<(f64, u32)> = pool.iter().map(|s| (target.distance(s), s.individual)).collect();
    d.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(d.into_iter().take(k).map(|(_, id)| id).collect())
}

/// `n` distinct indices drawn uniformly without replacement, ascending.
pub fn random_group_baseline(global: &Dataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > global.len() {
        return Err(Error::InsufficientGlobalData { requested: n, available: global.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, global.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GroupMethod {
    Sg,
    Ig,
    Random,
}

impl std::fmt::Display for GroupMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sg => "SG",
            Self::Ig => "IG",
            Self::Random => "RANDOM",
        })
    }
}

/// An individual's training data enlarged with borrowed samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub base: Dataset,
    pub augmentation: Dataset,
    pub method: GroupMethod,
    /// `n` for SG and RANDOM, `k` for IG.
    pub parameter: usize,
}

impl GroupedDataset {
    /// Base followed by augmentation; used as the individual batch source.
    pub fn training_set(&self) -> Result<Dataset> {
        union_datasets(&self.base, &self.augmentation)
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.augmentation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_grouped_dataset(
    base: &Dataset,
    augmentation: Dataset,
    method: GroupMethod,
    parameter: usize,
) -> Result<GroupedDataset> {
    if !augmentation.is_empty() {
        base.compatible_with(&augmentation)?;
    }
    let base_ids = base.id_set();
    let mut seen = BTreeSet::new();
    for id in augmentation.ids() {
        if base_ids.contains(&id) {
            return Err(Error::IdentityCollision { individual: id.individual, seq: id.seq });
        }
        if !seen.insert(id) {
            return Err(Error::DuplicateIdentity { individual: id.individual, seq: id.seq });
        }
    }
    Ok(GroupedDataset { base: base.clone(), augmentation, method, parameter })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentEntry {
    pub id: SampleId,
    pub values: LatentVector,
}

/// Latent vectors keyed by sample identity.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCache {
    pub latent_dim: usize,
    pub entries: Vec<LatentEntry>,
}

impl LatentCache {
    pub fn from_dataset(ds: &Dataset, latents: Vec<LatentVector>) -> Result<Self> {
        if ds.len() != latents.len() {
            return Err(Error::LengthMismatch(ds.len(), latents.len()));
        }
        let latent_dim = latents.first().map_or(0, Vec::len);
        let entries = ds.ids().zip(latents).map(|(id, values)| LatentEntry { id, values }).collect();
        Ok(Self { latent_dim, entries })
    }

    pub fn latents(&self) -> Vec<LatentVector> {
        self.entries.iter().map(|e| e.values.clone()).collect()
    }
}

pub fn write_lat<W: Write>(cache: &LatentCache, mut w: W) -> Result<()> {
    let dim = u16::try_from(cache.latent_dim).map_err(|_| Error::Format("latent dimension above u16".into()))?;
    w.write_all(LAT_MAGIC)?;
    w.write_u32::<LittleEndian>(cache.entries.len() as u32)?;
    w.write_u16::<LittleEndian>(dim)?;
    for e in &cache.entries {
        if e.values.len() != cache.latent_dim {
            return Err(Error::LengthMismatch(e.values.len(), cache.latent_dim));
        }
        w.write_u32::<LittleEndian>(e.id.individual)?;
        w.write_u32::<LittleEndian>(e.id.seq)?;
        for &v in &e.values {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_lat<R: Read>(mut r: R) -> Result<LatentCache> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != LAT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected LAT1")));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let latent_dim = r.read_u16::<LittleEndian>()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let individual = r.read_u32::<LittleEndian>()?;
        let seq = r.read_u32::<LittleEndian>()?;
        let mut values = vec![0f32; latent_dim];
        r.read_f32_into::<LittleEndian>(&mut values)?;
        entries.push(LatentEntry { id: SampleId::new(individual, seq), values });
    }
    Ok(LatentCache { latent_dim, entries })
}

pub fn write_lat_file(cache: &LatentCache, path: impl AsRef<Path>) -> Result<()> {
    write_lat(cache, BufWriter::new(File::create(path)?))
}

pub fn read_lat_file(path: impl AsRef<Path>) -> Result<LatentCache> {
    read_lat(BufReader::new(File::open(path)?))
}

/// Selection manifest: one `individual_id,seq` row per chosen sample.
pub fn write_selection_csv<W: Write>(ids: &[SampleId], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["individual_id", "seq"])?;
    for id in ids {
        out.write_record([id.individual.to_string(), id.seq.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_selection_csv<R: Read>(r: R) -> Result<Vec<SampleId>> {
    let mut reader = csv::Reader::from_reader(r);
    reader
        .deserialize::<(u32, u32)>()
        .map(|row| row.map(|(i, s)| SampleId::new(i, s)).map_err(Error::from))
        .collect()
}
