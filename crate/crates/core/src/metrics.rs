//! Accuracy, dispersion statistics, ranking, significance and the results table.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::image_tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;

/// Samples per forward pass during evaluation.
const EVAL_BATCH: usize = 256;

/// Largest number of pairs for which all sign flips are enumerated.
pub const EXACT_LIMIT: usize = 20;

/// Random sign flips drawn when there are more than [`EXACT_LIMIT`] pairs.
pub const RESAMPLES: usize = 100_000;

/// Seed of the resampling test when none is given.
pub const DEFAULT_TEST_SEED: u64 = 0x5EED;

/// Arg-max class of every sample, evaluated batch-wise with inference semantics.
pub fn predict_labels(net: &Network<f32>, ds: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let probs = net.predict(&image_tensor(ds, chunk))?;
        for r in 0..chunk.len() {
            let row = probs.row(r);
            let best = row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            out.push(best);
        }
    }
    Ok(out)
}

/// Fraction of samples whose predicted class equals the label.
pub fn accuracy(net: &Network<f32>, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let predicted = predict_labels(net, ds)?;
    let correct = predicted.iter().zip(ds.samples()).filter(|(p, s)| **p == usize::from(s.label)).count();
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdKind {
    /// Divide by `n`.
    #[default]
    Population,
    /// Divide by `n - 1`.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessStats {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub spread: f64,
}

pub fn population_metrics(accs: &[f64]) -> Result<FairnessStats> {
    population_metrics_with(accs, SdKind::Population)
}

pub fn population_metrics_with(accs: &[f64], kind: SdKind) -> Result<FairnessStats> {
    if accs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let ss: f64 = accs.iter().map(|a| (a - mean).powi(2)).sum();
    let denom = match kind {
        SdKind::Population => n,
        SdKind::Sample if accs.len() > 1 => n - 1.0,
        SdKind::Sample => 1.0,
    };
    let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(FairnessStats { mean, sd: (ss / denom).sqrt(), min, max, spread: max - min })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

/// Competition ranking: rank 1 is best, ties share the lower number and the
/// following rank is skipped.
pub fn rank_methods(values: &[f64], direction: Direction) -> Vec<usize> {
    values
        .iter()
        .map(|v| {
            let better = values
                .iter()
                .filter(|o| match direction {
                    Direction::HigherIsBetter => *o > v,
                    Direction::LowerIsBetter => *o < v,
                })
                .count();
            better + 1
        })
        .collect()
}

/// One-sided paired sign-flip permutation test of `H1: mean(a - b) > 0`.
///
/// Enumerates all `2^n` flips for `n <= EXACT_LIMIT`; larger inputs use
/// [`RESAMPLES`] seeded random flips and the `(count + 1) / (R + 1)` estimate.
pub fn significance_test(a: &[f64], b: &[f64]) -> Result<f64> {
    significance_test_seeded(a, b, DEFAULT_TEST_SEED)
}

pub fn significance_test_seeded(a: &[f64], b: &[f64], seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed: f64 = d.iter().sum();
    // Flipped sums that equal the observed sum up to rounding count as ties.
    let tol = 1e-9 * d.iter().map(|x| x.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
    let n = d.len();
    if n <= EXACT_LIMIT {
        // Gray-code walk: consecutive flip patterns differ in one sign.
        let mut sum = observed;
        let mut signs = vec![1.0; n];
        let mut count: u64 = u64::from(sum >= observed - tol);
        for i in 1u64..(1u64 << n) {
            let bit = i.trailing_zeros() as usize;
            signs[bit] = -signs[bit];
            sum += 2.0 * signs[bit] * d[bit];
            if sum >= observed - tol {
                count += 1;
            }
        }
        return Ok(count as f64 / (1u64 << n) as f64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0usize;
    for _ in 0..RESAMPLES {
        let sum: f64 = d.iter().map(|x| if rng.gen::<bool>() { *x } else { -*x }).sum();
        if sum >= observed - tol {
            count += 1;
        }
    }
    Ok((count + 1) as f64 / (RESAMPLES + 1) as f64)
}

/// Evaluation outcome of one method over the whole population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    /// Method name and parameters, e.g. `SampleWeigh-SW-nI-2`.
    pub method: String,
    pub individual_ids: Vec<u32>,
    /// Accuracy on each individual's test split, averaged over seeds.
    pub individual_accuracies: Vec<f64>,
    /// Accuracy on the global test split of every trained model.
    pub global_accuracies: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl MethodResult {
    pub fn validate(&self) -> Result<()> {
        if self.individual_ids.len() != self.individual_accuracies.len() {
            return Err(Error::LengthMismatch(self.individual_ids.len(), self.individual_accuracies.len()));
        }
        let in_range = |v: &f64| (0.0..=1.0).contains(v);
        if !self.individual_accuracies.iter().chain(&self.global_accuracies).all(in_range) {
            return Err(Error::InvalidConfig(format!("{}: accuracy outside [0, 1]", self.method)));
        }
        Ok(())
    }

    /// Accuracies reordered to follow `ids`.
    pub fn aligned(&self, ids: &[u32]) -> Result<Vec<f64>> {
        ids.iter()
            .map(|id| {
                self.individual_ids
                    .iter()
                    .position(|x| x == id)
                    .map(|i| self.individual_accuracies[i])
                    .ok_or_else(|| Error::DatasetMismatch(format!("{} lacks individual {id}", self.method)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub individual: FairnessStats,
    pub individual_rank: usize,
    pub global: FairnessStats,
    pub global_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
    /// Method compared against in the significance column, if any.
    pub reference: Option<String>,
    /// One-sided p-value of each method against the reference, in row order.
    pub p_values: Vec<Option<f64>>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub sd_kind: SdKind,
    /// Round to three decimals without leading zeros in text renderings.
    pub paper_format: bool,
    /// Method used as the reference of the significance tests.
    pub reference: Option<String>,
    pub notes: Vec<String>,
}

pub const REPORT_HEADER: [&str; 11] =
    ["Method", "Acc on D_I", "Rank", "sd", "min", "max", "Acc on D_G", "Rank", "sd", "min", "max"];

pub fn build_report(results: &[MethodResult], opts: &ReportOptions) -> Result<ReportTable> {
    let first = results.first().ok_or(Error::EmptyInput)?;
    let mut ids = first.individual_ids.clone();
    ids.sort_unstable();
    for r in results {
        r.validate()?;
        let mut other = r.individual_ids.clone();
        other.sort_unstable();
        if other != ids {
            return Err(Error::DatasetMismatch(format!("{} was evaluated on a different set of individuals", r.method)));
        }
    }
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(ReportRow {
            method: r.method.clone(),
            individual: population_metrics_with(&r.individual_accuracies, opts.sd_kind)?,
            individual_rank: 0,
            global: population_metrics_with(&r.global_accuracies, opts.sd_kind)?,
            global_rank: 0,
        });
    }
    let ind: Vec<f64> = rows.iter().map(|r| r.individual.mean).collect();
    let glob: Vec<f64> = rows.iter().map(|r| r.global.mean).collect();
    for ((row, ri), rg) in rows
        .iter_mut()
        .zip(rank_methods(&ind, Direction::HigherIsBetter))
        .zip(rank_methods(&glob, Direction::HigherIsBetter))
    {
        row.individual_rank = ri;
        row.global_rank = rg;
    }
    let mut p_values = vec![None; rows.len()];
    if let Some(name) = &opts.reference {
        let base = results
            .iter()
            .find(|r| &r.method == name)
            .ok_or_else(|| Error::InvalidConfig(format!("reference method {name} not among the results")))?;
        let base_accs = base.aligned(&ids)?;
        for (p, r) in p_values.iter_mut().zip(results) {
            if &r.method != name {
                *p = Some(significance_test(&r.aligned(&ids)?, &base_accs)?);
            }
        }
    }
    Ok(ReportTable { rows, reference: opts.reference.clone(), p_values, notes: opts.notes.clone() })
}

/// Three decimals, trailing zeros and the leading zero removed: `.98`, `1.0`.
pub fn table_number(v: f64) -> String {
    let mut s = format!("{v:.3}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.push('0');
    }
    if let Some(rest) = s.strip_prefix("0.") {
        s = format!(".{rest}");
    } else if let Some(rest) = s.strip_prefix("-0.") {
        s = format!("-.{rest}");
    }
    s
}

impl ReportTable {
    fn cells(&self, row: &ReportRow, paper: bool) -> Vec<String> {
        let num = |v: f64| if paper { table_number(v) } else { format!("{v:.4}") };
        vec![
            row.method.clone(),
            num(row.individual.mean),
            row.individual_rank.to_string(),
            num(row.individual.sd),
            num(row.individual.min),
            num(row.individual.max),
            num(row.global.mean),
            row.global_rank.to_string(),
            num(row.global.sd),
            num(row.global.min),
            num(row.global.max),
        ]
    }

    pub fn footer(&self) -> Vec<String> {
        let mut lines = vec![
            "Acc on D_I: mean over individuals of the accuracy on each individual's test split (seed-averaged).".to_string(),
            "Acc on D_G: mean accuracy on the global test split; its sd/min/max range over all per-individual models."
                .to_string(),
            "sd: standard deviation over the listed values. Rank: competition ranking, 1 = best.".to_string(),
            format!(
                "Significance: one-sided paired sign-flip permutation test on per-individual accuracies \
                 (exact for up to {EXACT_LIMIT} individuals, otherwise {RESAMPLES} seeded resamples)."
            ),
        ];
        if let Some(reference) = &self.reference {
            for (row, p) in self.rows.iter().zip(&self.p_values) {
                if let Some(p) = p {
                    lines.push(format!("p({} > {reference}) = {p:.4}", row.method));
                }
            }
        }
        lines.extend(self.notes.iter().cloned());
        lines
    }

    /// Exact values so that [`parse_report_csv`] recovers them bit for bit.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            let (i, g) = (&r.individual, &r.global);
            out.write_record([
                r.method.clone(),
                i.mean.to_string(),
                r.individual_rank.to_string(),
                i.sd.to_string(),
                i.min.to_string(),
                i.max.to_string(),
                g.mean.to_string(),
                r.global_rank.to_string(),
                g.sd.to_string(),
                g.min.to_string(),
                g.max.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Column-aligned plain text with the footer below the table.
    pub fn render_text(&self, paper: bool) -> String {
        let mut rows: Vec<Vec<String>> = vec![REPORT_HEADER.iter().map(|s| s.to_string()).collect()];
        rows.extend(self.rows.iter().map(|r| self.cells(r, paper)));
        let widths: Vec<usize> =
            (0..REPORT_HEADER.len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join(" | ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
            }
        }
        out.push('\n');
        for line in self.footer() {
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn render_markdown(&self, paper: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| {} |", REPORT_HEADER.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(REPORT_HEADER.len()));
        for r in &self.rows {
            let _ = writeln!(out, "| {} |", self.cells(r, paper).join(" | "));
        }
        out.push('\n');
        for line in self.footer() {
            let _ = writeln!(out, "{line}  ");
        }
        out
    }
}

/// Writes `report.csv`, `report.txt` and optionally `report.md` into `dir`.
pub fn emit_report(table: &ReportTable, dir: impl AsRef<Path>, paper: bool, markdown: bool) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join("report.csv");
    table.write_csv(std::io::BufWriter::new(std::fs::File::create(&csv_path)?))?;
    let txt_path = dir.join("report.txt");
    std::fs::write(&txt_path, table.render_text(paper))?;
    let mut paths = vec![csv_path, txt_path];
    if markdown {
        let md_path = dir.join("report.md");
        std::fs::write(&md_path, table.render_markdown(paper))?;
        paths.push(md_path);
    }
    Ok(paths)
}

/// Reads the rows written by [`ReportTable::write_csv`]; spread is recomputed.
pub fn parse_report_csv<R: Read>(r: R) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_HEADER {
        return Err(Error::Format(format!("unexpected report header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|e| Error::Format(format!("column {}: {e}", REPORT_HEADER[i])))
        };
        let u = |i: usize| -> Result<usize> {
            rec[i].parse().map_err(|e| Error::Format(format!("column {}: {e}", REPORT_HEADER[i])))
        };
        let stats = |m: f64, sd: f64, min: f64, max: f64| FairnessStats { mean: m, sd, min, max, spread: max - min };
        rows.push(ReportRow {
            method: rec[0].to_string(),
            individual: stats(f(1)?, f(3)?, f(4)?, f(5)?),
            individual_rank: u(2)?,
            global: stats(f(6)?, f(8)?, f(9)?, f(10)?),
            global_rank: u(7)?,
        });
    }
    Ok(rows)
}
