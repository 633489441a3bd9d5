use std::collections::HashSet;
use std::fs;

use ldct_core::container::{read_image, read_sinogram};
use ldct_core::dataset::{build_dataset, DatasetManifest, DatasetSpec, Split, MANIFEST_FILE};
use ldct_core::phantom::EllipsePhantomSpec;
use ldct_core::{Projector, ScanGeometry};
use tempfile::TempDir;

fn spec(count: usize) -> DatasetSpec {
    DatasetSpec {
        count,
        phantom: EllipsePhantomSpec {
            width: 16,
            seed: 5,
            ..Default::default()
        },
        doses: vec![1e5, 5e3],
        electronic_variance: 10.0,
        noise_seed: 6,
    }
}

fn geometry() -> ScanGeometry {
    ScanGeometry::preset("desk_small").unwrap()
}

#[test]
fn ten_phantoms_with_exact_split() {
    let dir = TempDir::new().unwrap();
    let m = build_dataset(&spec(10), &geometry(), dir.path()).unwrap();
    let images: HashSet<&str> = m.samples.iter().map(|s| s.image.as_str()).collect();
    assert_eq!(images.len(), 10);
    assert_eq!(fs::read_dir(dir.path().join("images")).unwrap().count(), 10);
    assert_eq!(m.samples.len(), 20);

    let test: HashSet<u64> = m.records(1e5, Split::Test).map(|s| s.index).collect();
    let train: HashSet<u64> = m.records(1e5, Split::Train).map(|s| s.index).collect();
    assert!(test.is_disjoint(&train));
    assert_eq!(test.len() + train.len(), 10);
    assert!((test.len() as f64 - 2.0).abs() <= 1.0);
    let test_low: HashSet<u64> = m.records(5e3, Split::Test).map(|s| s.index).collect();
    assert_eq!(test, test_low);

    m.verify(dir.path()).unwrap();
    assert_eq!(DatasetManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
}

#[test]
fn rebuild_gives_identical_files() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let ma = build_dataset(&spec(4), &geometry(), a.path()).unwrap();
    let mb = build_dataset(&spec(4), &geometry(), b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(
        fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
    let other = DatasetSpec {
        noise_seed: 7,
        ..spec(4)
    };
    let c = TempDir::new().unwrap();
    let mc = build_dataset(&other, &geometry(), c.path()).unwrap();
    for (x, y) in ma.samples.iter().zip(&mc.samples) {
        assert_eq!(x.image_sha256, y.image_sha256);
        assert_ne!(x.sinogram_sha256, y.sinogram_sha256);
    }
}

#[test]
fn stored_payloads_round_trip() {
    let dir = TempDir::new().unwrap();
    let s = spec(3);
    let g = geometry();
    let m = build_dataset(&s, &g, dir.path()).unwrap();
    let projector = Projector::new(g, s.phantom.shape());
    for rec in &m.samples {
        let x = read_image(&dir.path().join(&rec.image)).unwrap();
        assert_eq!(x, s.phantom.generate(rec.index));
        let y = read_sinogram(&dir.path().join(&rec.sinogram)).unwrap();
        let clean = projector.forward(&x).unwrap();
        assert_eq!((y.n_views(), y.n_bins()), (clean.n_views(), clean.n_bins()));
        assert!(y.values().iter().all(|v| v.is_finite()));
    }
    let pairs = m.load_pairs(dir.path(), 5e3, Split::Train).unwrap();
    assert_eq!(pairs.len(), m.records(5e3, Split::Train).count());
}

#[test]
fn tampering_and_bad_targets_are_detected() {
    let dir = TempDir::new().unwrap();
    let m = build_dataset(&spec(3), &geometry(), dir.path()).unwrap();
    let victim = dir.path().join(&m.samples[0].sinogram);
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&victim, bytes).unwrap();
    assert!(m.verify(dir.path()).is_err());

    let missing = dir.path().join("nope");
    assert!(build_dataset(&spec(1), &geometry(), &missing).is_err());
    let no_dose = DatasetSpec {
        doses: vec![],
        ..spec(1)
    };
    assert!(build_dataset(&no_dose, &geometry(), dir.path()).is_err());
}
