use std::collections::BTreeMap;
use std::fs;

use conv_compress::container::*;
use conv_compress::data_opt::{sample_patches, MapPair};
use conv_compress::decomp::{cp_als, spatial_svd_ordered, tt_svd, tucker_hooi, weight_svd, CpOptions};
use conv_compress::gates::{Gate, GateVector, HardConcreteGate, VibGate};
use conv_compress::rank_select::{greedy_energy_select, EnergyLayer};
use conv_compress::{FeatureMap, Kernel4D, SpatialOrder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

fn f32_exact(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-1.0f32..1.0) as f64
}

fn kernel(rng: &mut ChaCha8Rng, t: usize, s: usize, k: usize) -> Kernel4D {
    Kernel4D::from_fn(t, s, k, |_, _, _, _| f32_exact(rng)).unwrap()
}

fn round_trip(c: &Container) -> Container {
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.json");
    write_container(c, &path).unwrap();
    let back = read_container(&path).unwrap();
    assert_eq!(fs::read(blob_path(&path)).unwrap(), c.blob());
    back
}

#[test]
fn empty_container_round_trips() {
    let c = Container::new();
    assert_eq!(round_trip(&c), c);
}

#[test]
fn kernel_round_trip_is_bit_exact() {
    let w = Kernel4D::new(2, 2, 1, vec![0.1f32 as f64, -2.5, 3.0, 1e-3f32 as f64])
        .unwrap()
        .with_bias(vec![0.5, -0.25])
        .unwrap();
    let mut c = Container::new();
    put_kernel(&mut c, "conv1", &w).unwrap();
    let back = round_trip(&c);
    assert_eq!(back, c);
    assert_eq!(get_kernel(&back, "conv1").unwrap(), w);
}

#[test]
fn second_write_is_byte_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut c = Container::new();
    put_kernel(&mut c, "a", &kernel(&mut rng, 3, 2, 3)).unwrap();
    let dir = tempdir().unwrap();
    let (p1, p2) = (dir.path().join("one.json"), dir.path().join("two.json"));
    write_container(&c, &p1).unwrap();
    write_container(&read_container(&p1).unwrap(), &p2).unwrap();
    assert_eq!(fs::read(blob_path(&p1)).unwrap(), fs::read(blob_path(&p2)).unwrap());
    let m1 = fs::read_to_string(&p1).unwrap().replace("one.bin", "");
    let m2 = fs::read_to_string(&p2).unwrap().replace("two.bin", "");
    assert_eq!(m1, m2);
}

#[test]
fn every_layer_kind_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = kernel(&mut rng, 4, 3, 3).with_bias(vec![0.5, 0.25, -1.0, 2.0]).unwrap();
    let layers = vec![
        weight_svd(&w, 2).unwrap(),
        spatial_svd_ordered(&w, 3, SpatialOrder::VerticalFirst).unwrap(),
        cp_als(&w, 3, CpOptions::default()).unwrap(),
        tucker_hooi(&w, 2, 3, 20, 1e-10).unwrap(),
        tt_svd(&w, 2, 3, 2).unwrap(),
    ];
    let mut c = Container::new();
    for (i, l) in layers.iter().enumerate() {
        put_layer(&mut c, &format!("layer{i}"), l).unwrap();
    }
    let back = round_trip(&c);
    assert_eq!(layer_names(&back).len(), layers.len());
    for (i, l) in layers.iter().enumerate() {
        let got = get_layer(&back, &format!("layer{i}")).unwrap();
        assert_eq!(got.factors.method(), l.factors.method());
        assert_eq!(got.ranks, l.ranks);
        assert_eq!(got.metadata, l.metadata);
        assert_eq!(got.source_dims, l.source_dims);
        for ((na, fa), (nb, fb)) in got.factors.named().iter().zip(l.factors.named()) {
            assert_eq!(*na, nb);
            assert_eq!(fa.shape(), fb.shape());
            for (x, y) in fa.data().iter().zip(fb.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }
}

#[test]
fn batch_gates_and_plan_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = kernel(&mut rng, 2, 2, 3);
    let maps: Vec<MapPair> = (0..2)
        .map(|_| MapPair::same(FeatureMap::from_fn(2, 4, 4, |_, _, _| f32_exact(&mut rng)).unwrap()))
        .collect();
    let raw = sample_patches(&maps, 5, 3, 7).unwrap();
    let batch = raw.clone().with_outputs(&w).unwrap();
    let l0 = GateVector {
        gates: vec![Gate::HardConcrete(HardConcreteGate::new(0.75)), Gate::HardConcrete(HardConcreteGate::new(-2.0))],
        lambda_reg: 0.1,
    };
    let vib = GateVector {
        gates: vec![Gate::Vib(VibGate::new(0.5, 0.25).unwrap())],
        lambda_reg: 0.3,
    };
    let plan = greedy_energy_select(
        &[EnergyLayer {
            singular_values: vec![3.0, 1.0],
            macs_per_rank: 10,
            original_macs: 30,
        }],
        0.5,
    )
    .unwrap();
    let mut c = Container::new();
    put_batch(&mut c, "raw", &raw).unwrap();
    put_batch(&mut c, "full", &batch).unwrap();
    put_gates(&mut c, "g0", &l0).unwrap();
    put_gates(&mut c, "g1", &vib).unwrap();
    put_plan(&mut c, "plan", &plan).unwrap();
    let back = round_trip(&c);
    assert_eq!(get_batch(&back, "raw").unwrap(), raw);
    let got = get_batch(&back, "full").unwrap();
    assert_eq!(got.locations, batch.locations);
    assert_eq!(got.inputs, batch.inputs);
    assert!(got.ref_outputs.sub(&batch.ref_outputs).max_abs() < 1e-6);
    let g0 = get_gates(&back, "g0").unwrap();
    assert_eq!(g0.lambda_reg, 0.1);
    match g0.gates[0] {
        Gate::HardConcrete(h) => assert_eq!(h.log_alpha, 0.75),
        _ => panic!("kind changed"),
    }
    assert_eq!(get_gates(&back, "g1").unwrap(), vib);
    assert_eq!(get_plan(&back, "plan").unwrap(), plan);
    let mixed = GateVector {
        gates: vec![l0.gates[0], vib.gates[0]],
        lambda_reg: 0.0,
    };
    assert!(put_gates(&mut Container::new(), "m", &mixed).is_err());
}

fn entry(name: &str, shape: Vec<usize>, off: u64, len: u64) -> Entry {
    Entry {
        name: name.into(),
        kind: EntryKind::Kernel,
        dtype: "f32".into(),
        shape,
        byte_offset: off,
        byte_length: len,
        metadata: BTreeMap::new(),
    }
}

#[test]
fn corrupted_layouts_give_distinct_errors() {
    let blob = vec![0u8; 32];
    assert!(Container::from_parts(vec![entry("a", vec![2, 2], 0, 16), entry("b", vec![4], 16, 16)], blob.clone()).is_ok());
    assert!(matches!(
        Container::from_parts(vec![entry("a", vec![2, 2], 0, 16), entry("b", vec![4], 8, 16)], blob.clone()),
        Err(ContainerError::Overlap { .. })
    ));
    assert!(matches!(
        Container::from_parts(vec![entry("a", vec![2, 2], 24, 16)], blob.clone()),
        Err(ContainerError::Truncated { .. })
    ));
    assert!(matches!(
        Container::from_parts(vec![entry("a", vec![3, 2], 0, 16)], blob.clone()),
        Err(ContainerError::ShapeMismatch { .. })
    ));
    assert!(matches!(
        Container::from_parts(vec![entry("a", vec![2], 0, 8), entry("a", vec![2], 8, 8)], blob),
        Err(ContainerError::Duplicate(_))
    ));
}

#[test]
fn corrupted_files_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut c = Container::new();
    put_kernel(&mut c, "a", &kernel(&mut rng, 2, 2, 1)).unwrap();
    put_kernel(&mut c, "b", &kernel(&mut rng, 2, 2, 1)).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.json");
    write_container(&c, &path).unwrap();

    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replace("\"byte_offset\": 16", "\"byte_offset\": 8")).unwrap();
    assert!(matches!(read_container(&path), Err(ContainerError::Overlap { .. })));

    fs::write(&path, &text).unwrap();
    let blob = fs::read(blob_path(&path)).unwrap();
    fs::write(blob_path(&path), &blob[..20]).unwrap();
    assert!(matches!(read_container(&path), Err(ContainerError::Truncated { .. })));

    fs::write(&path, "{ not json").unwrap();
    assert!(matches!(read_container(&path), Err(ContainerError::Manifest(_))));
    assert!(matches!(read_container(&dir.path().join("missing.json")), Err(ContainerError::Io { .. })));
}
