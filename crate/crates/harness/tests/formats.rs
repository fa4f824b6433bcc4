use sadag_autodiff::Array;
use sadag_core::synthesis::Provenance;
use sadag_harness::config::ExperimentConfig;
use sadag_harness::error::FormatError;
use sadag_harness::format::*;
use sadag_harness::pipeline::{data_provenance, make_toy_dataset, save_labeled};

fn prov() -> Provenance {
    Provenance { seed: 7, config_hash: 0x0123_4567_89ab_cdef, warmup_only: false, fallback_warning: true }
}

fn tensors() -> Vec<(String, Array)> {
    vec![
        ("a".into(), Array::new(vec![2, 3], vec![1.0, -2.5, 3.0e-7, 1.0 / 3.0, 1e10, -0.0]).unwrap()),
        ("scalarish".into(), Array::from_vec(vec![std::f64::consts::PI])),
        ("conv.weight".into(), Array::new(vec![1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap()),
    ]
}

#[test]
fn checkpoint_resave_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.sadg");
    let p2 = dir.path().join("b.sadg");
    save_checkpoint(&p1, &tensors(), &prov()).unwrap();
    let (named, pv) = load_checkpoint(&p1).unwrap();
    assert_eq!(pv, prov());
    save_checkpoint(&p2, &named, &pv).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn checkpoint_values_keep_binary32_precision() {
    let bytes = encode_checkpoint(&tensors(), &prov()).unwrap();
    let (named, _) = decode_checkpoint(&bytes).unwrap();
    for ((n0, a0), (n1, a1)) in tensors().iter().zip(&named) {
        assert_eq!(n0, n1);
        assert_eq!(a0.shape(), a1.shape());
        for (x, y) in a0.data().iter().zip(a1.data()) {
            assert!((x - y).abs() <= 1e-6 * x.abs(), "{x} vs {y}");
        }
    }
}

#[test]
fn checkpoint_header_layout() {
    let bytes = encode_checkpoint(&tensors(), &prov()).unwrap();
    assert_eq!(&bytes[..4], b"SADG");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
    assert_eq!(bytes[16], b'a');
    assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 2);
}

#[test]
fn corrupt_checkpoints_are_rejected_with_offsets() {
    let good = encode_checkpoint(&tensors(), &prov()).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(FormatError::BadMagic { offset: 0, .. })));

    let mut bad = good.clone();
    bad[4] = 9;
    assert!(matches!(decode_checkpoint(&bad), Err(FormatError::Version { .. })));

    for cut in [0, 3, 10, 20, good.len() - 1] {
        let e = decode_checkpoint(&good[..cut]).unwrap_err();
        assert!(matches!(e, FormatError::Truncated { .. }), "cut {cut}: {e}");
    }

    // Rank 2 with dims u32::MAX x u32::MAX: the element count overflows.
    let mut bad = good.clone();
    bad[21..25].copy_from_slice(&u32::MAX.to_le_bytes());
    bad[25..29].copy_from_slice(&u32::MAX.to_le_bytes());
    let e = decode_checkpoint(&bad).unwrap_err();
    assert!(matches!(e, FormatError::DimOverflow { offset: 21 } | FormatError::Truncated { .. }), "{e}");

    let mut bad = good.clone();
    bad.push(0);
    assert!(matches!(decode_checkpoint(&bad), Err(FormatError::Trailing { .. })));
}

#[test]
fn dataset_round_trip_preserves_provenance_and_labels() {
    let images = Array::new(vec![2, 1, 2, 2], vec![0.5, -1.0, 0.25, 0.0, 1.0, -0.5, 0.125, 0.75]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for labels in [None, Some(vec![3, 0])] {
        let ds = DatasetFile { images: images.clone(), labels, provenance: prov() };
        let p = dir.path().join("d.sadd");
        save_dataset(&p, &ds).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), ds);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"SADD");
        let dims: Vec<u32> =
            (0..4).map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap())).collect();
        assert_eq!(dims, vec![2, 1, 2, 2]);
        let label_at = 24 + 8 * 4;
        let l0 = u16::from_le_bytes(bytes[label_at..label_at + 2].try_into().unwrap());
        assert_eq!(l0, if ds.labels.is_some() { 3 } else { UNLABELED });
    }
}

#[test]
fn empty_path_is_rejected() {
    let ds = DatasetFile { images: Array::zeros(vec![1, 1, 1, 1]), labels: None, provenance: prov() };
    assert!(matches!(save_dataset(std::path::Path::new(""), &ds), Err(FormatError::EmptyPath)));
    assert!(matches!(load_dataset(std::path::Path::new("")), Err(FormatError::EmptyPath)));
}

#[test]
fn missing_file_error_names_path() {
    let e = load_checkpoint(std::path::Path::new("/nonexistent/x.sadg")).unwrap_err();
    assert!(e.to_string().contains("/nonexistent/x.sadg"), "{e}");
}

#[test]
fn toy_dataset_files_are_deterministic_balanced_and_disjoint() {
    let cfg = ExperimentConfig { train_size: 203, val_size: 101, ..ExperimentConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for run in 0..2 {
        let (train, val) = make_toy_dataset(&cfg).unwrap();
        let pt = dir.path().join(format!("train{run}.sadd"));
        let pv = dir.path().join(format!("val{run}.sadd"));
        save_labeled(&pt, &train, data_provenance(&cfg)).unwrap();
        save_labeled(&pv, &val, data_provenance(&cfg)).unwrap();
        files.push((std::fs::read(pt).unwrap(), std::fs::read(pv).unwrap()));

        for ds in [&train, &val] {
            let mut hist = vec![0usize; cfg.classes];
            ds.labels.iter().for_each(|&l| hist[l] += 1);
            let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
            assert!(hi - lo <= 1, "{hist:?}");
        }
        let row = |a: &Array, i: usize| {
            let n = a.numel() / a.shape()[0];
            a.data()[i * n..(i + 1) * n].iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        let train_rows: std::collections::HashSet<_> = (0..train.len()).map(|i| row(&train.images, i)).collect();
        assert!((0..val.len()).all(|i| !train_rows.contains(&row(&val.images, i))));
    }
    assert!(files[0] == files[1]);
}
