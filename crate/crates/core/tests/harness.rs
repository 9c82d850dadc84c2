use std::fs;
use std::path::Path;

use perso_core::grouping::{encode_dataset, GroupMethod};
use perso_core::harness::{
    run_experiment, DataSource, Experiment, ExperimentConfig, LatentSpace, MethodSpec,
};
use perso_core::synth::PopulationConfig;

fn small_config(out_dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Synthetic {
            population: PopulationConfig {
                n_individuals: 4,
                samples_per_individual: 60,
                global_size: 400,
                global_individuals: Some(8),
                ..PopulationConfig::default()
            },
        },
        methods: vec![
            MethodSpec::baseline(),
            MethodSpec::early(3),
            MethodSpec::weighed(2.0),
            MethodSpec::transfer(4),
            MethodSpec::grouping(GroupMethod::Sg, 50),
            MethodSpec::grouping(GroupMethod::Ig, 2),
            MethodSpec::grouping(GroupMethod::Random, 50),
        ],
        epochs: 1,
        batch_size: 32,
        seeds: vec![0, 1],
        ae_epochs: 2,
        monitor_every: 5,
        out_dir: out_dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn report_bytes(dir: &Path) -> Vec<u8> {
    fs::read(dir.join("report.csv")).unwrap()
}

#[test]
fn desk_population_two_methods_one_seed_gives_forty_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        methods: vec![MethodSpec::baseline(), MethodSpec::weighed(2.0)],
        seeds: vec![0],
        epochs: 1,
        monitor_every: 0,
        save_checkpoints: false,
        out_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let outcome = run_experiment(&cfg).unwrap();
    assert_eq!(outcome.records.len(), 40);
    assert!(outcome.records.iter().all(|r| r.succeeded() && r.leakage_free));
    assert!(outcome.audit.passed(), "{:?}", outcome.audit.violations);
    assert_eq!(outcome.report.rows.len(), 2);
    assert!(outcome.results.iter().all(|r| r.individual_ids.len() == 20));
    for name in ["report.csv", "report.txt", "report.md", "results.json", "audit.json"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
}

#[test]
fn resume_determinism_and_worker_count() {
    let first = tempfile::tempdir().unwrap();
    let cfg = small_config(first.path());
    let outcome = run_experiment(&cfg).unwrap();
    assert_eq!(outcome.records.len(), 7 * 4 * 2);
    assert!(outcome.audit.passed(), "{:?}", outcome.audit.violations);
    let report = report_bytes(first.path());

    // Removing one record retrains exactly that run.
    let victim = cfg.record_path("SampleWeigh-SW-n-2", outcome.records[0].individual_id, 1);
    fs::remove_file(&victim).unwrap();
    let exp = Experiment::setup(cfg.clone()).unwrap();
    let pending = exp.pending_runs();
    assert_eq!(pending.len(), 1);
    let retrained = exp.run_pending().unwrap();
    assert_eq!(retrained.len(), 1);
    assert!(victim.exists());
    exp.finish().unwrap();
    assert_eq!(report_bytes(first.path()), report);

    // A fresh directory with more workers reproduces the report.
    let second = tempfile::tempdir().unwrap();
    let parallel = ExperimentConfig { workers: 3, ..small_config(second.path()) };
    run_experiment(&parallel).unwrap();
    assert_eq!(report_bytes(second.path()), report);
}

#[test]
fn autoencoder_improves_and_caches_match_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        methods: vec![MethodSpec::grouping(GroupMethod::Sg, 20)],
        seeds: vec![0],
        reference: None,
        ..small_config(dir.path())
    };
    let exp = Experiment::setup(cfg.clone()).unwrap();
    let latents = &exp.grouping.as_ref().expect("grouping context").latents;
    let summary = latents.summary.as_ref().expect("fresh training has a summary");
    assert_eq!(summary.latent_dim, 16);
    assert!(summary.heldout_loss_after < summary.heldout_loss_before, "{summary:?}");
    assert!(latents.global_train.iter().all(|v| v.len() == 16));

    let cached = LatentSpace::load(&cfg, &exp.data).unwrap();
    let bits = |vs: &[Vec<f32>]| vs.iter().map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
    let fresh = encode_dataset(&cached.encoder, &exp.data.global_train).unwrap();
    assert_eq!(bits(&fresh), bits(&cached.global_train));
    for (split, stored) in exp.data.individuals.iter().zip(&cached.individuals_test) {
        assert_eq!(bits(&encode_dataset(&cached.encoder, &split.test).unwrap()), bits(stored));
    }

    let manifests = exp.write_group_manifests(GroupMethod::Sg, 20).unwrap();
    assert_eq!(manifests.len(), exp.data.individuals.len());
}
