use std::fs;

use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shefu_core::dataset::io::{self, FEATURES_FILE, MANIFEST_FILE};
use shefu_core::dataset::{audit, balance, generate_synthetic, iou, BBox, Split, SynthConfig};
use shefu_core::ShefuError;

fn small(seed: u64, noise: f32) -> SynthConfig {
    SynthConfig {
        n_scenes: 120,
        split_sizes: [300, 60, 60],
        context_slots: 4,
        d_f: 40,
        noise_sigma: noise,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn save_then_load_is_lossless() {
    let data = generate_synthetic(&small(1, 0.3), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    io::save(dir.path(), &data).unwrap();
    assert_eq!(io::load(dir.path()).unwrap(), data);
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    io::save(a.path(), &generate_synthetic(&small(7, 0.3), None).unwrap()).unwrap();
    io::save(b.path(), &generate_synthetic(&small(7, 0.3), None).unwrap()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 7);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
    let other = generate_synthetic(&small(8, 0.3), None).unwrap();
    assert_ne!(io::load(a.path()).unwrap(), other);
}

#[test]
fn truncated_blob_names_the_record() {
    let data = generate_synthetic(&small(2, 0.0), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    io::save(dir.path(), &data).unwrap();
    let path = dir.path().join(FEATURES_FILE);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    match io::load(dir.path()) {
        Err(ShefuError::Schema(m)) => assert!(m.contains("record") && m.contains("region id"), "{m}"),
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn header_width_disagreeing_with_manifest_is_a_schema_error() {
    let data = generate_synthetic(&small(3, 0.0), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    io::save(dir.path(), &data).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap().replace("\"d_f\": 40", "\"d_f\": 41");
    fs::write(&path, text).unwrap();
    assert!(matches!(io::load(dir.path()), Err(ShefuError::Schema(_))));
}

#[test]
fn blob_width_disagreeing_with_vectors_is_a_schema_error() {
    let data = generate_synthetic(&small(3, 0.0), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    io::save(dir.path(), &data).unwrap();
    let path = dir.path().join(FEATURES_FILE);
    let mut bytes = fs::read(&path).unwrap();
    // header D_f lives at bytes 12..16
    bytes[12..16].copy_from_slice(&39u32.to_le_bytes());
    fs::write(&path, bytes).unwrap();
    assert!(matches!(io::load(dir.path()), Err(ShefuError::Schema(_))));
}

#[test]
fn malformed_index_line_reports_its_number() {
    let data = generate_synthetic(&small(4, 0.0), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    io::save(dir.path(), &data).unwrap();
    let path = dir.path().join("val.jsonl");
    let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    lines[2] = "{\"id\": 1, \"instruction\": ".into();
    fs::write(&path, lines.join("\n")).unwrap();
    match io::load(dir.path()) {
        Err(ShefuError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn generated_set_obeys_the_sampling_rules() {
    let data = generate_synthetic(&small(5, 0.3), None).unwrap();
    let a = audit(&data).unwrap();
    assert!(a.max_imbalance() <= 1, "{a:?}");
    assert!(a.min_positive_iou >= 0.7, "{a:?}");
    assert!(a.max_swapped_iou <= 0.3, "{a:?}");
    assert_eq!(a.swaps_without_swapped_side, 0);
    assert!(a.negatives_by_method.values().sum::<usize>() >= 200);
    assert!(a.min_method_share() >= 0.1, "{a:?}");
}

#[test]
fn default_split_sizes() {
    let data = generate_synthetic(&SynthConfig::default(), None).unwrap();
    let sizes: Vec<usize> = Split::ALL.iter().map(|&s| data.split(s).len()).collect();
    assert_eq!(sizes, vec![4420, 642, 686]);
    let a = audit(&data).unwrap();
    assert!(a.max_imbalance() <= 1);
    assert!(a.negatives_by_method.values().sum::<usize>() >= 300);
    assert!(a.min_method_share() >= 0.1);
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0u16..600, 0u16..440, 1u16..40, 1u16..40).prop_map(|(x, y, w, h)| BBox {
        x1: x as f32,
        y1: y as f32,
        x2: (x + w) as f32,
        y2: (y + h) as f32,
        width: 640.0,
        height: 480.0,
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, rng_seed: RngSeed::Fixed(0x5EED), ..ProptestConfig::default() })]

    #[test]
    fn iou_is_a_symmetric_ratio(a in bbox(), b in bbox()) {
        let x = iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x.to_bits(), iou(&b, &a).unwrap().to_bits());
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn balance_leaves_classes_within_one(pos in 1usize..60, neg in 1usize..60, seed: u64) {
        let items: Vec<(usize, bool)> = (0..pos + neg).map(|i| (i, i < pos)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = balance(items.clone(), |x| x.1, &mut rng).unwrap();
        let p = out.iter().filter(|x| x.1).count();
        prop_assert!(p.abs_diff(out.len() - p) <= 1);
        prop_assert_eq!(p, pos.min(neg));
        prop_assert_eq!(out.len(), 2 * pos.min(neg));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(balance(items, |x| x.1, &mut rng).unwrap(), out);
    }
}
