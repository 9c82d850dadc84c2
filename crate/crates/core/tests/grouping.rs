mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use common::{ig_oracle, random_latents, random_signature, rng, sg_oracle, toy_dataset};
use perso_core::grouping::{
    build_grouped_dataset, individual_group_ig, random_group_baseline, sample_group_sg, GroupMethod,
    IndividualSignature,
};
use perso_core::Error;

#[test]
fn sg_matches_brute_force_on_random_instances() {
    let mut r = rng(31);
    for instance in 0..100 {
        let coarse = instance % 2 == 0;
        let dim = r.gen_range(1..=8);
        let global = random_latents(r.gen_range(1..=200), dim, coarse, &mut r);
        let individual = random_latents(r.gen_range(1..=20), dim, coarse, &mut r);
        let n = r.gen_range(0..=50.min(global.len()));
        let expected = sg_oracle(&individual, &global, n).expect("valid instance");
        assert_eq!(sample_group_sg(&individual, &global, n).unwrap(), expected, "instance {instance}");
    }
}

#[test]
fn ig_matches_brute_force_on_random_instances() {
    let mut r = rng(32);
    for instance in 0..100 {
        let coarse = instance % 2 == 0;
        let (classes, dim) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let pool_size = r.gen_range(1..=30);
        let mut ids: Vec<u32> = (1..=200).collect();
        ids.shuffle(&mut r);
        let pool: Vec<IndividualSignature> =
            ids[..pool_size].iter().map(|&id| random_signature(id, classes, dim, coarse, &mut r)).collect();
        let target = random_signature(0, classes, dim, coarse, &mut r);
        let k = r.gen_range(0..=10.min(pool_size));
        let expected = ig_oracle(&target, &pool, k).expect("valid instance");
        assert_eq!(individual_group_ig(&target, &pool, k).unwrap(), expected, "instance {instance}");
    }
}

#[test]
fn sg_rejects_budget_beyond_global_data() {
    let mut r = rng(1);
    let global = random_latents(5, 2, false, &mut r);
    let individual = random_latents(2, 2, false, &mut r);
    assert!(matches!(
        sample_group_sg(&individual, &global, 6),
        Err(Error::InsufficientGlobalData { requested: 6, available: 5 })
    ));
    assert!(matches!(sample_group_sg(&[], &global, 1), Err(Error::NoIndividualData)));
}

#[test]
fn ig_rejects_oversized_k_and_self_membership() {
    let mut r = rng(2);
    let pool: Vec<_> = (1..=3).map(|id| random_signature(id, 2, 2, false, &mut r)).collect();
    let target = random_signature(9, 2, 2, false, &mut r);
    assert!(matches!(individual_group_ig(&target, &pool, 4), Err(Error::PoolTooSmall { .. })));
    let inside = pool[0].clone();
    assert!(individual_group_ig(&inside, &pool, 1).is_err());
}

#[test]
fn grouped_training_set_never_contains_test_samples() {
    let individual = toy_dataset(&[0], 30, 4, 8, 1);
    let global = toy_dataset(&[10, 11, 12], 40, 4, 8, 2);
    let split = perso_core::data::partition_dataset(&individual, 0.7, 3).unwrap();
    let augmentation = global.subset(&random_group_baseline(&global, 25, 4).unwrap());
    let grouped = build_grouped_dataset(&split.train, augmentation, GroupMethod::Random, 25).unwrap();
    let train_ids = grouped.training_set().unwrap().id_set();
    assert!(train_ids.is_disjoint(&split.test.id_set()));
    assert_eq!(train_ids.len(), split.train.len() + 25);
    let collision = split.train.subset(&[0]);
    assert!(matches!(
        build_grouped_dataset(&split.train, collision, GroupMethod::Random, 1),
        Err(Error::IdentityCollision { .. })
    ));
}

fn latents_strategy() -> impl Strategy<Value = (Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    (1usize..5).prop_flat_map(|dim| {
        (
            prop::collection::vec(prop::collection::vec(-3i8..3, dim).prop_map(to_f32), 1..8),
            prop::collection::vec(prop::collection::vec(-3i8..3, dim).prop_map(to_f32), 1..40),
        )
    })
}

fn to_f32(v: Vec<i8>) -> Vec<f32> {
    v.into_iter().map(f32::from).collect()
}

fn signature_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 6)
}

fn sig(id: u32, values: Vec<f64>) -> IndividualSignature {
    IndividualSignature { individual: id, values, present: vec![true; 3] }
}

proptest! {
    #[test]
    fn sg_output_is_duplicate_free((individual, global) in latents_strategy(), frac in 0.0f64..=1.0) {
        let n = (frac * global.len() as f64) as usize;
        let chosen = sample_group_sg(&individual, &global, n).unwrap();
        prop_assert_eq!(chosen.len(), n);
        prop_assert_eq!(chosen.iter().collect::<BTreeSet<_>>().len(), n);
        prop_assert!(chosen.iter().all(|&j| j < global.len()));
    }

    #[test]
    fn sg_budget_growth_only_adds((individual, global) in latents_strategy(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = sample_group_sg(&individual, &global, (lo * global.len() as f64) as usize).unwrap();
        let large = sample_group_sg(&individual, &global, (hi * global.len() as f64) as usize).unwrap();
        prop_assert_eq!(&large[..small.len()], &small[..]);
    }

    #[test]
    fn signature_distance_is_a_metric(a in signature_strategy(), b in signature_strategy(), c in signature_strategy()) {
        let (x, y, z) = (sig(1, a), sig(2, b), sig(3, c));
        prop_assert_eq!(x.distance(&x), 0.0);
        prop_assert_eq!(x.distance(&y), y.distance(&x));
        prop_assert!(x.distance(&y) >= 0.0);
        prop_assert!(x.distance(&z) <= x.distance(&y) + y.distance(&z) + 1e-12);
    }

    #[test]
    fn random_baseline_is_sorted_distinct_and_seeded(n in 0usize..60, seed in any::<u64>()) {
        let global = toy_dataset(&[5, 6], 30, 3, 8, 0);
        let pick = random_group_baseline(&global, n, seed).unwrap();
        prop_assert_eq!(pick.len(), n);
        prop_assert!(pick.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(pick, random_group_baseline(&global, n, seed).unwrap());
    }
}
