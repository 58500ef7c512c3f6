use acanet::data::{
    compute_bbox, generate_synthetic_fixture, load_samples, mask_to_png, encode_mask, read_mask, DatasetManifest,
    Split,
};
use acanet::trainer::mask_targets;
use acanet::types::{ARM, CONTAIN, GRASPABLE, NUM_CLASSES, OBJECT_CLASSES};

#[test]
fn fixture_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let written = generate_synthetic_fixture(dir.path(), 20, 64, 7).unwrap();
    let read = DatasetManifest::read(&dir.path().join("manifest.toml")).unwrap();
    assert_eq!(read.records, written.records);
    assert_eq!(read.normalization, written.normalization);

    let counts: Vec<usize> = Split::ALL
        .iter()
        .map(|&s| DatasetManifest::read(&dir.path().join(format!("{s}.toml"))).unwrap().len())
        .collect();
    assert_eq!(counts, [14, 3, 3]);

    for r in &read.records {
        let mask = read_mask(&read.resolve(&r.mask_path)).unwrap();
        assert_eq!(mask.class_set().len(), NUM_CLASSES);
        assert_eq!(r.bbox, Some(compute_bbox(&mask, &OBJECT_CLASSES).unwrap()));
        assert_eq!(encode_mask(&mask_to_png(&mask)).unwrap(), mask);
    }
}

#[test]
fn fixtures_are_reproducible_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic_fixture(a.path(), 4, 32, 7).unwrap();
    generate_synthetic_fixture(b.path(), 4, 32, 7).unwrap();
    for rel in ["manifest.toml", "images/0003.png", "masks/0003.png", "train.toml"] {
        assert_eq!(
            std::fs::read(a.path().join(rel)).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn binary_targets_match_the_annotation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_fixture(dir.path(), 5, 64, 2).unwrap();
    let samples = load_samples(&manifest, 32).unwrap();
    let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    let (object, arm) = mask_targets::<f64>(&masks).unwrap();
    for (n, m) in masks.iter().enumerate() {
        for y in 0..m.height() {
            for x in 0..m.width() {
                let c = m.get(x, y);
                assert_eq!(object.at(n, 0, y, x) == 1.0, c == GRASPABLE || c == CONTAIN);
                assert_eq!(arm.at(n, 0, y, x) == 1.0, c == ARM);
            }
        }
    }
}

#[test]
fn cropped_samples_keep_class_sets() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_fixture(dir.path(), 6, 64, 9).unwrap();
    for window in [32, 48, 96] {
        for (s, r) in load_samples(&manifest, window).unwrap().iter().zip(&manifest.records) {
            assert_eq!((s.mask.width(), s.mask.height()), (window, window));
            let source = read_mask(&manifest.resolve(&r.mask_path)).unwrap().class_set();
            assert!(s.mask.class_set().iter().all(|c| source.contains(c)));
        }
    }
}
