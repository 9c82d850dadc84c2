mod common;

use proptest::prelude::*;

use perso_core::data::{read_pds, write_pds, Dataset, Sample, SampleId};
use perso_core::grouping::{read_lat, read_selection_csv, write_lat, write_selection_csv, LatentCache, LatentEntry};
use perso_core::nn::checkpoint::{load_checkpoint, read_pck, save_checkpoint, write_pck, NamedTensor};
use perso_core::nn::{train_step, AdamConfig, AdamState, Batch, LayerSpec, Mode, Network, Targets, Tensor};
use perso_core::Error;

const SIDE: usize = 4;

fn small_net(seed: u64) -> Network<f32> {
    let specs = vec![
        LayerSpec::conv(3, 1, 2),
        LayerSpec::ReLU,
        LayerSpec::Flatten,
        LayerSpec::Dense { in_dim: 32, out_dim: 3 },
        LayerSpec::SoftmaxClassifier,
    ];
    Network::new(vec![1, SIDE, SIDE], specs, seed).unwrap()
}

fn batch(offset: usize) -> Batch<f32> {
    let inputs: Vec<f32> = (0..2 * SIDE * SIDE).map(|i| ((i + offset) % 7) as f32 / 7.0).collect();
    Batch { inputs: Tensor::new(vec![2, 1, SIDE, SIDE], inputs), targets: Targets::Labels(vec![offset % 3, (offset + 1) % 3]) }
}

fn bits(values: &[f32]) -> Vec<u32> {
    values.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn checkpoint_resumes_training_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.pck");
    let mut net = small_net(1);
    net.set_mode(Mode::Train);
    let mut adam = AdamState::new(&net, AdamConfig::default());
    for step in 0..5 {
        train_step(&mut net, &mut adam, &batch(step)).unwrap();
    }
    save_checkpoint(&net, &adam, &path).unwrap();
    assert!(dir.path().join("net.pck.adam").exists());

    let mut restored = small_net(99);
    restored.set_mode(Mode::Train);
    let mut restored_adam = AdamState::new(&restored, AdamConfig::default());
    load_checkpoint(&mut restored, &mut restored_adam, &path).unwrap();
    assert_eq!(restored_adam.t(), adam.t());
    for (a, b) in net.params().zip(restored.params()) {
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    let (m, v) = adam.moments();
    let (rm, rv) = restored_adam.moments();
    assert!(m.iter().zip(rm).all(|(a, b)| bits(a) == bits(b)));
    assert!(v.iter().zip(rv).all(|(a, b)| bits(a) == bits(b)));
    for step in 5..8 {
        let x = train_step(&mut net, &mut adam, &batch(step)).unwrap();
        let y = train_step(&mut restored, &mut restored_adam, &batch(step)).unwrap();
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn corrupt_headers_are_rejected() {
    assert!(matches!(read_pds(&b"PDS2\0\0\0\0"[..]), Err(Error::Format(_))));
    assert!(matches!(read_pck(&b"XXXX\0\0\0\0"[..]), Err(Error::Format(_))));
    assert!(matches!(read_lat(&b"LAT0\0\0\0\0\0\0"[..]), Err(Error::Format(_))));
    let bad = NamedTensor { name: "w".into(), dims: vec![2, 2], values: vec![0.0; 3] };
    assert!(write_pck(&[bad], Vec::new()).is_err());
}

fn records_strategy() -> impl Strategy<Value = Vec<(u32, u16, Vec<u8>)>> {
    prop::collection::vec((0u32..6, 0u16..5, prop::collection::vec(any::<u8>(), SIDE * SIDE)), 0..40)
}

fn tensor_strategy() -> impl Strategy<Value = NamedTensor> {
    ("[a-z_.0-9]{1,12}", prop::collection::vec(1u32..5, 0..4)).prop_flat_map(|(name, dims)| {
        let len = dims.iter().product::<u32>() as usize;
        prop::collection::vec(any::<u32>().prop_map(f32::from_bits), len)
            .prop_map(move |values| NamedTensor { name: name.clone(), dims: dims.clone(), values })
    })
}

fn lat_strategy() -> impl Strategy<Value = LatentCache> {
    (0usize..20).prop_flat_map(|dim| {
        prop::collection::vec((any::<u32>(), any::<u32>(), prop::collection::vec(any::<u32>(), dim)), 0..30).prop_map(
            move |rows| LatentCache {
                latent_dim: dim,
                entries: rows
                    .into_iter()
                    .map(|(i, s, v)| LatentEntry { id: SampleId::new(i, s), values: v.into_iter().map(f32::from_bits).collect() })
                    .collect(),
            },
        )
    })
}

proptest! {
    #[test]
    fn pds_round_trip(records in records_strategy()) {
        let ds = Dataset::ingest(5, SIDE, SIDE, records).unwrap();
        let mut buf = Vec::new();
        write_pds(&ds, &mut buf).unwrap();
        prop_assert_eq!(buf.len(), 14 + ds.len() * (6 + SIDE * SIDE));
        let back = read_pds(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &ds);
        let mut again = Vec::new();
        write_pds(&back, &mut again).unwrap();
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn pds_keeps_content_when_sequence_numbers_are_sparse(records in records_strategy(), gap in 1u32..9) {
        let samples: Vec<Sample> = records
            .into_iter()
            .enumerate()
            .map(|(i, (ind, label, pixels))| Sample { id: SampleId::new(ind, gap * i as u32), label, pixels })
            .collect();
        let ds = Dataset::from_samples(5, SIDE, SIDE, samples).unwrap();
        let mut buf = Vec::new();
        write_pds(&ds, &mut buf).unwrap();
        let back = read_pds(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples().iter().zip(back.samples()) {
            prop_assert_eq!((a.id.individual, a.label, &a.pixels), (b.id.individual, b.label, &b.pixels));
        }
    }

    #[test]
    fn pck_round_trip_is_bit_exact(tensors in prop::collection::vec(tensor_strategy(), 0..6)) {
        let mut buf = Vec::new();
        write_pck(&tensors, &mut buf).unwrap();
        let back = read_pck(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for (a, b) in tensors.iter().zip(&back) {
            prop_assert_eq!((&a.name, &a.dims), (&b.name, &b.dims));
            prop_assert_eq!(bits(&a.values), bits(&b.values));
        }
    }

    #[test]
    fn lat_round_trip_is_bit_exact(cache in lat_strategy()) {
        let mut buf = Vec::new();
        write_lat(&cache, &mut buf).unwrap();
        prop_assert_eq!(buf.len(), 10 + cache.entries.len() * (8 + 4 * cache.latent_dim));
        let back = read_lat(buf.as_slice()).unwrap();
        prop_assert_eq!(back.latent_dim, cache.latent_dim);
        prop_assert_eq!(back.entries.len(), cache.entries.len());
        for (a, b) in cache.entries.iter().zip(&back.entries) {
            prop_assert_eq!(a.id, b.id);
            prop_assert_eq!(bits(&a.values), bits(&b.values));
        }
    }

    #[test]
    fn selection_csv_round_trip(ids in prop::collection::vec((any::<u32>(), any::<u32>()), 0..50)) {
        let ids: Vec<SampleId> = ids.into_iter().map(|(i, s)| SampleId::new(i, s)).collect();
        let mut buf = Vec::new();
        write_selection_csv(&ids, &mut buf).unwrap();
        prop_assert!(String::from_utf8(buf.clone()).unwrap().starts_with("individual_id,seq\n"));
        prop_assert_eq!(read_selection_csv(buf.as_slice()).unwrap(), ids);
    }
}
