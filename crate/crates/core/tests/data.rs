use std::fs;
use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use icn_core::data::{load_idx, normalize, Normalization};
use icn_core::Error;

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [0x803u32, n, rows, cols] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [0x801u32, labels.len() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(labels);
    out
}

fn write(path: &Path, bytes: &[u8]) {
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(fs::File::create(path).unwrap(), Compression::default());
        enc.write_all(bytes).unwrap();
        enc.finish().unwrap();
    } else {
        fs::write(path, bytes).unwrap();
    }
}

#[test]
fn reads_plain_and_gzipped_idx() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..12).map(|i| i * 20).collect();
    for ext in ["", ".gz"] {
        let (im, lb) = (dir.path().join(format!("im{ext}")), dir.path().join(format!("lb{ext}")));
        write(&im, &idx_images(2, 2, 3, &pixels));
        write(&lb, &idx_labels(&[7, 2]));
        let d = load_idx(&im, &lb).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![7, 2]);
        assert_eq!(d.samples[1].shape(), &[1, 2, 3]);
        assert_eq!(d.samples[1].data(), &[120.0, 140.0, 160.0, 180.0, 200.0, 220.0]);
        let n = normalize(&d, Normalization::ZeroCenteredUnitRange);
        assert_eq!(n.samples[0].data()[0], -1.0);
    }
}

#[test]
fn malformed_idx_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (im, lb) = (dir.path().join("im"), dir.path().join("lb"));
    write(&lb, &idx_labels(&[1, 2]));

    write(&im, &idx_labels(&[1, 2]));
    assert!(matches!(load_idx(&im, &lb), Err(Error::BadMagic { .. })));

    write(&im, &idx_images(3, 1, 1, &[0, 0, 0]));
    assert!(matches!(load_idx(&im, &lb), Err(Error::CountMismatch { images: 3, labels: 2 })));

    write(&im, &idx_images(2, 2, 2, &[0; 5]));
    assert!(matches!(load_idx(&im, &lb), Err(Error::Truncated { .. })));

    write(&im, &[0, 0, 8]);
    assert!(matches!(load_idx(&im, &lb), Err(Error::Truncated { .. })));

    assert!(load_idx(&dir.path().join("absent"), &lb).is_err());
}

#[test]
fn bundled_mnist_files_parse_when_present() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let (im, lb) = (dir.join("t10k-images-idx3-ubyte.gz"), dir.join("t10k-labels-idx1-ubyte.gz"));
    if !im.exists() {
        eprintln!("skipping: {} not found", im.display());
        return;
    }
    let d = load_idx(&im, &lb).unwrap();
    assert!(d.len() > 1000);
    assert_eq!(d.class_count, 10);
    assert!(d.samples.iter().all(|s| s.shape() == [1, 28, 28]));
    assert!(d.class_counts().iter().all(|&c| c > 0));
}
