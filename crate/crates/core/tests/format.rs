mod common;

use std::fs;
use std::path::PathBuf;

use common::RefRng;
use sha2::{Digest, Sha256};
use viewagg_core::store::{
    decode, encode, encode_prompts, encode_views, l2_normalize_rows, read_container,
    write_container, Container, Dataset, FeatureSet, Manifest, PromptBank, ShapeRecord,
};
use viewagg_core::{Error, Tensor};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn offset_of(err: Error) -> u64 {
    match err {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other:?}"),
    }
}

fn one_shape() -> FeatureSet {
    FeatureSet {
        shapes: vec![ShapeRecord {
            shape_id: "lamp_0001".into(),
            label: 0,
            views: Tensor::from_rows(&[[0.5, 0.25, -1.0, 0.0], [0.75, -0.125, 2.0, 1.0]]).unwrap(),
        }],
        dim: 4,
        backbone_tag: String::new(),
        normalized: false,
    }
}

#[test]
fn single_shape_round_trip_keeps_payload_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.pevf");
    write_container(&Container::Views(one_shape()), &path).unwrap();
    let first = fs::read(&path).unwrap();
    let Container::Views(back) = read_container(&path).unwrap() else {
        panic!("kind changed")
    };
    assert_eq!(back, one_shape());
    write_container(&Container::Views(back), &path).unwrap();
    assert_eq!(fs::read(&path).unwrap(), first);
}

#[test]
fn same_set_written_twice_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.pevf"), dir.path().join("b.pevf"));
    write_container(&Container::Views(one_shape()), &a).unwrap();
    write_container(&Container::Views(one_shape()), &b).unwrap();
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn wrong_magic_is_rejected_at_offset_zero() {
    let mut bytes = encode_views(&one_shape()).unwrap();
    bytes[0] = b'X';
    assert_eq!(offset_of(decode(&bytes).unwrap_err()), 0);
}

#[test]
fn header_damage_reports_its_offset() {
    let good = encode_views(&one_shape()).unwrap();
    let mut bad_version = good.clone();
    bad_version[4] = 2;
    assert_eq!(offset_of(decode(&bad_version).unwrap_err()), 4);
    let mut bad_kind = good.clone();
    bad_kind[8] = 9;
    assert_eq!(offset_of(decode(&bad_kind).unwrap_err()), 8);
    let mut trailing = good.clone();
    trailing.push(0);
    assert_eq!(offset_of(decode(&trailing).unwrap_err()), good.len() as u64);
}

#[test]
fn every_truncation_is_a_format_error_within_bounds() {
    let good = encode_views(&one_shape()).unwrap();
    for len in 0..good.len() {
        let off = offset_of(decode(&good[..len]).unwrap_err());
        assert!(off <= len as u64, "len {len} offset {off}");
    }
}

#[test]
fn huge_view_count_is_an_extent_error() {
    let mut bytes = encode_views(&one_shape()).unwrap();
    // Header (17) + id length (4) + "lamp_0001" (9) + label (4) puts M at 34.
    bytes[34..38].copy_from_slice(&u32::MAX.to_le_bytes());
    assert_eq!(offset_of(decode(&bytes).unwrap_err()), 38);
}

#[test]
fn empty_set_cannot_be_written() {
    let empty = FeatureSet {
        shapes: vec![],
        ..one_shape()
    };
    assert!(matches!(encode_views(&empty), Err(Error::Format { .. })));
    let no_views = FeatureSet {
        shapes: vec![ShapeRecord {
            shape_id: "x".into(),
            label: 0,
            views: Tensor::zeros(&[0, 4]),
        }],
        ..one_shape()
    };
    assert!(encode_views(&no_views).is_err());
}

#[test]
fn forty_class_prompt_header() {
    let mut rng = RefRng::new(40);
    let features = Tensor::from_rows(&rng.unit_rows(40, 768)).unwrap();
    let bank = PromptBank::new((0..40).map(|i| format!("c{i}")).collect(), String::new(), features).unwrap();
    let bytes = encode_prompts(&bank).unwrap();
    assert_eq!(&bytes[..4], b"PEVF");
    assert_eq!(bytes[8], 2);
    assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 768);
    assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 40);
}

#[test]
fn random_containers_round_trip_byte_identically() {
    let mut rng = RefRng::new(100);
    for _ in 0..100 {
        for c in common::random_containers(&mut rng) {
            let bytes = encode(&c).unwrap();
            let back = decode(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(encode(&back).unwrap(), bytes);
        }
    }
}

#[test]
fn normalize_examples() {
    let n = l2_normalize_rows(&Tensor::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
    assert!((n.get(0, 0) - 0.6).abs() < 1e-15 && (n.get(0, 1) - 0.8).abs() < 1e-15);

    let mut rng = RefRng::new(5);
    let raw = Tensor::from_rows(&rng.matrix(5, 8)).unwrap();
    let once = l2_normalize_rows(&raw).unwrap();
    for row in once.row_iter() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);
    }
    assert!(l2_normalize_rows(&once).unwrap().max_abs_diff(&once) <= 1e-7);

    let zero = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
    match l2_normalize_rows(&zero) {
        Err(e @ Error::DegenerateRow { row: 1 }) => assert!(e.to_string().contains('1')),
        other => panic!("{other:?}"),
    }
}

#[test]
fn exporter_fixture_loads_with_matching_payload_hash() {
    let bytes = fs::read(fixture("exporter_views.pevf")).unwrap();
    let Container::Views(set) = decode(&bytes).unwrap() else {
        panic!("not a views container")
    };
    assert_eq!(set.len(), 200);
    assert_eq!(set.dim, 16);
    let mut hash = Sha256::new();
    for s in &set.shapes {
        for &v in s.views.data() {
            hash.update((v as f32).to_le_bytes());
        }
    }
    let want = fs::read_to_string(fixture("exporter_views.sha256")).unwrap();
    let got: String = hash.finalize().iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(got, want.trim());
    assert_eq!(encode_views(&set).unwrap(), bytes);
    let order: Vec<String> = (0..200).map(|i| format!("shape_{i:04}")).collect();
    let ids: Vec<String> = set.shapes.iter().map(|s| s.shape_id.clone()).collect();
    assert_eq!(ids, order);
}

#[test]
fn exporter_manifest_opens_as_a_dataset() {
    let ds = Dataset::open(fixture("exporter_manifest.json")).unwrap();
    assert_eq!(ds.prompts.len(), 5);
    assert!(ds.prompts.template.contains("{CLASS}"));
    let test = ds.load_split("test").unwrap();
    assert_eq!(test.len(), 200);
    assert_eq!(test.backbone_tag, "fixture");
    assert!(ds.load_split("train").is_err());
}

#[test]
fn raw_features_are_normalized_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let raw = FeatureSet {
        shapes: vec![ShapeRecord {
            shape_id: "s".into(),
            label: 1,
            views: Tensor::from_rows(&[[3.0, 4.0], [0.0, -2.0]]).unwrap(),
        }],
        dim: 2,
        backbone_tag: String::new(),
        normalized: false,
    };
    let bank = PromptBank::new(
        vec!["a".into(), "b".into()],
        String::new(),
        Tensor::from_rows(&[[2.0, 0.0], [1.0, 1.0]]).unwrap(),
    )
    .unwrap();
    write_container(&Container::Views(raw), dir.path().join("v.pevf")).unwrap();
    write_container(&Container::Prompts(bank), dir.path().join("p.pevf")).unwrap();
    let manifest = Manifest {
        categories: vec!["a".into(), "b".into()],
        template: "{CLASS}".into(),
        splits: [("test".to_string(), PathBuf::from("v.pevf"))].into_iter().collect(),
        prompts: PathBuf::from("p.pevf"),
        backbone: None,
        normalized: false,
        train: None,
    };
    manifest.write(dir.path().join("m.json")).unwrap();
    assert_eq!(Manifest::read(dir.path().join("m.json")).unwrap(), manifest);

    let ds = Dataset::open(dir.path().join("m.json")).unwrap();
    assert_eq!(ds.prompts.features.row(0), &[1.0, 0.0]);
    let set = ds.load_split("test").unwrap();
    assert_eq!(set.shapes[0].views.row(0), &[0.6, 0.8]);
    assert_eq!(set.shapes[0].views.row(1), &[0.0, -1.0]);
}

#[test]
fn mismatched_categories_are_rejected() {
    let mut m = Manifest::read(fixture("exporter_manifest.json")).unwrap();
    m.categories.swap(0, 1);
    let dir = tempfile::tempdir().unwrap();
    for f in ["exporter_views.pevf", "exporter_prompts.pevf"] {
        fs::copy(fixture(f), dir.path().join(f)).unwrap();
    }
    m.write(dir.path().join("m.json")).unwrap();
    assert!(matches!(Dataset::open(dir.path().join("m.json")), Err(Error::Data(_))));
}
