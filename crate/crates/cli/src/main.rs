use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde_json::Value;

use perso_core::data::read_pds_file;
use perso_core::grouping::{encode_dataset, write_lat_file, GroupMethod, LatentCache};
use perso_core::harness::{
    generate_files, load_or_prepare_data, train_shared_autoencoder, DataSource, Experiment, ExperimentConfig,
    RunKey,
};
use perso_core::nn::{build_autoencoder, checkpoint};

#[derive(Debug, Parser)]
#[command(name = "perso", version, about = "Personalized training of small image classifiers")]
struct Cli {
    /// JSON experiment configuration; missing fields take desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (also seeds the synthetic population).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    width_mult: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic population as PDS1 files.
    Generate {
        /// Target directory; defaults to `<out-dir>/generated`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Train the shared auto-encoder and write the latent caches.
    TrainAe,
    /// Encode a PDS1 file with a saved encoder into a LAT1 cache.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Encoder checkpoint; defaults to `<out-dir>/ae/encoder.pck`.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Write the grouping selection manifest of every individual.
    Group {
        #[arg(long, value_parser = parse_group_method)]
        method: GroupMethod,
        /// Sample budget for SG and RANDOM, number of individuals for IG.
        #[arg(long)]
        size: usize,
    },
    /// Train the pending runs, optionally restricted to one method or individual.
    Train {
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        individual: Option<u32>,
    },
    /// Evaluate a checkpoint on a dataset, or re-check every recorded run.
    Evaluate {
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Aggregate the recorded runs into the report and run the audit.
    Report,
    /// Run the complete protocol.
    RunAll,
}

fn parse_group_method(s: &str) -> Result<GroupMethod, String> {
    serde_json::from_value(Value::String(s.to_ascii_uppercase())).map_err(|_| format!("unknown grouping method {s}"))
}

/// Splits `--key=value` overrides of configuration fields from the arguments
/// handled by clap. A key names a top-level configuration field, possibly
/// followed by dotted sub-fields; hyphens count as underscores.
fn split_overrides(args: Vec<String>, fields: &[String]) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let parsed = arg.strip_prefix("--").and_then(|a| a.split_once('=')).map(|(k, v)| (k.replace('-', "_"), v));
        match parsed {
            Some((key, value)) if fields.iter().any(|f| key.split('.').next() == Some(f.as_str())) => {
                overrides.push((key, value.to_string()))
            }
            _ => rest.push(arg),
        }
    }
    (rest, overrides)
}

/// Sets `path` inside `root`, creating objects on the way. The value is read
/// as JSON when possible and as a string otherwise.
fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            Value::Array(items) => {
                let idx: usize = part.parse().with_context(|| format!("{path}: {part} is not an index"))?;
                let len = items.len();
                let item = items.get_mut(idx).with_context(|| format!("{path}: index {idx} out of {len}"))?;
                if i + 1 == parts.len() {
                    *item = value;
                    return Ok(());
                }
                node = item;
                continue;
            }
            _ => bail!("{path}: {part} is not inside an object"),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn load_config(cli: &Cli, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut value = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg: ExperimentConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            serde_json::to_value(cfg)?
        }
        None => serde_json::to_value(ExperimentConfig::default())?,
    };
    for (key, raw) in overrides {
        apply_override(&mut value, key, raw)?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value).context("invalid configuration override")?;
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
        if let DataSource::Synthetic { population } = &mut cfg.data {
            population.seed = seed;
        }
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(m) = cli.width_mult {
        cfg.width_multiplier = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved_config(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

fn finish(exp: &Experiment) -> Result<bool> {
    let outcome = exp.finish()?;
    println!("{}", outcome.report.render_text(exp.cfg.paper_format));
    if let Some(ae) = &outcome.autoencoder {
        println!(
            "auto-encoder held-out loss: {:.5} before, {:.5} after training",
            ae.heldout_loss_before, ae.heldout_loss_after
        );
    }
    println!(
        "audit: {} runs, {} diverged, {} violations",
        outcome.audit.runs,
        outcome.audit.diverged,
        outcome.audit.violations.len()
    );
    for v in &outcome.audit.violations {
        println!("  violation: {v}");
    }
    Ok(outcome.audit.passed())
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<bool> {
    let cfg = load_config(&cli, &overrides)?;
    write_resolved_config(&cfg)?;
    match cli.command {
        Command::Generate { dir } => {
            let DataSource::Synthetic { population } = &cfg.data else {
                bail!("generate needs a synthetic data source");
            };
            let dir = dir.unwrap_or_else(|| cfg.out_dir.join("generated"));
            let manifest = generate_files(population, &dir)?;
            println!("wrote {} individual files and {}", manifest.individuals.len(), manifest.global.display());
        }
        Command::TrainAe => {
            let data = load_or_prepare_data(&cfg)?;
            let space = train_shared_autoencoder(&cfg, &data)?;
            if let Some(s) = space.summary {
                println!("held-out reconstruction loss {:.5} -> {:.5}", s.heldout_loss_before, s.heldout_loss_after);
            }
        }
        Command::Encode { input, output, encoder } => encode(&cfg, &input, &output, encoder)?,
        Command::Group { method, size } => {
            let exp = Experiment::open(cfg, method != GroupMethod::Random)?;
            let paths = exp.write_group_manifests(method, size)?;
            println!("wrote {} selection manifests", paths.len());
        }
        Command::Train { method, individual } => {
            let exp = Experiment::setup(cfg)?;
            if let Some(m) = &method {
                exp.cfg.method(m)?;
            }
            let ids = exp.data.individual_ids();
            let keep = |k: &RunKey| {
                method.as_ref().map_or(true, |m| exp.cfg.methods[k.method].name() == *m)
                    && individual.map_or(true, |id| ids[k.individual] == id)
            };
            let pending: Vec<RunKey> = exp.pending_runs().into_iter().filter(keep).collect();
            info!("{} runs to train", pending.len());
            for key in pending {
                let rec = exp.execute(key, None)?;
                println!(
                    "{} individual {} seed {}: acc(D_I) {:?}, acc(D_G) {:?}",
                    rec.method, rec.individual_id, rec.seed, rec.individual_accuracy, rec.global_accuracy
                );
            }
        }
        Command::Evaluate { checkpoint: Some(path), data: Some(data) } => {
            let exp = Experiment::open(cfg, false)?;
            let ds = read_pds_file(&data)?;
            println!("accuracy {:.6}", exp.evaluate_checkpoint(&path, &ds)?);
        }
        Command::Evaluate { .. } => {
            let exp = Experiment::open(cfg, false)?;
            let mismatches = exp.reevaluate()?;
            for (r, ind, glob) in &mismatches {
                println!(
                    "{} individual {} seed {}: recorded {:?}/{:?}, recomputed {ind}/{glob}",
                    r.method, r.individual_id, r.seed, r.individual_accuracy, r.global_accuracy
                );
            }
            println!("{} recorded runs disagree with their checkpoints", mismatches.len());
            return Ok(mismatches.is_empty());
        }
        Command::Report => return finish(&Experiment::open(cfg, false)?),
        Command::RunAll => {
            let exp = Experiment::setup(cfg)?;
            exp.run_pending()?;
            return finish(&exp);
        }
    }
    Ok(true)
}

fn encode(cfg: &ExperimentConfig, input: &Path, output: &Path, encoder: Option<PathBuf>) -> Result<()> {
    let ds = read_pds_file(input)?;
    let (mut net, _) = build_autoencoder::<f32>(cfg.width_multiplier, cfg.latent_dim, ds.dims(), 0)?;
    let path = encoder.unwrap_or_else(|| cfg.ae_dir().join("encoder.pck"));
    checkpoint::load_network(&mut net, &path).with_context(|| format!("loading {}", path.display()))?;
    let latents = encode_dataset(&net, &ds)?;
    write_lat_file(&LatentCache::from_dataset(&ds, latents)?, output)?;
    println!("encoded {} samples into {}", ds.len(), output.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let fields: Vec<String> = match serde_json::to_value(ExperimentConfig::default()) {
        Ok(Value::Object(map)) => map.keys().cloned().collect(),
        _ => Vec::new(),
    };
    let (args, overrides) = split_overrides(std::env::args().collect(), &fields);
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
