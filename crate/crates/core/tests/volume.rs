use std::path::PathBuf;

use patchseg::volume::{load_labels, load_volume, save_labels, save_volume};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[test]
fn scripted_intensity_file() {
    let v = load_volume(data("golden_2x2x2.mrv")).unwrap();
    assert_eq!(v.dims().as_array(), [2, 2, 2]);
    assert_eq!(v.spacing(), [1.0, 1.5, 2.0]);
    assert_eq!(v.data(), &[0.0, 1.5, -2.25, 3.0, 0.125, -7.5, 100.0, 0.5]);
    assert_eq!(v.get([1, 0, 0]), 1.5);
    assert_eq!(v.get([0, 1, 0]), -2.25);
    assert_eq!(v.get([0, 0, 1]), 0.125);

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("copy.mrv");
    save_volume(&out, &v).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(data("golden_2x2x2.mrv")).unwrap());
}

#[test]
fn scripted_label_file() {
    let l = load_labels(data("golden_labels_2x2x2.mrv")).unwrap();
    assert_eq!(l.num_classes(), 4);
    assert_eq!(l.labels(), &[0, 1, 2, 3, 3, 2, 1, 0]);
    assert_eq!(l.histogram(), vec![2, 2, 2, 2]);

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("copy.mrv");
    save_labels(&out, &l).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(data("golden_labels_2x2x2.mrv")).unwrap());
    assert!(load_volume(data("golden_labels_2x2x2.mrv")).is_err());
}
