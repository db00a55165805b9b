use std::fs;

use ssmlab::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
use ssmlab::data::{load_idx, read_idx_images, read_idx_labels, save_idx, synth_dataset};
use ssmlab::model::{Arch, Model, ModelConfig};
use ssmlab::report::{merge, Format, Metadata, Report, Row};
use ssmlab::Error;

fn model() -> Model {
    Model::build(ModelConfig {
        arch: Arch::VssmHier,
        image_size: 8,
        patch_size: 2,
        in_channels: 3,
        depths: vec![1, 1],
        dims: vec![4, 6],
        n_state: 2,
        n_classes: 3,
        window: 2,
        seed: 5,
    })
    .unwrap()
}

fn idx_header(magic: u32, dims: &[u32]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out
}

fn idx_images(n: u32, side: u32, fill: u8) -> Vec<u8> {
    let mut out = idx_header(0x0803, &[n, side, side]);
    out.extend(std::iter::repeat_n(fill, (n * side * side) as usize));
    out
}

#[test]
fn all_255_image_scales_to_one() {
    let images = read_idx_images(&idx_images(1, 28, 255)).unwrap();
    assert_eq!(images.shape(), &[1, 28, 28, 1]);
    assert!(images.data().iter().all(|&v| v == 1.0));
}

#[test]
fn idx_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(12, 8, 3, 4);
    let (img, lab) = (dir.path().join("x.idx"), dir.path().join("y.idx"));
    save_idx(&data, &img, &lab).unwrap();
    let back = load_idx(&img, &lab, 3).unwrap();
    assert_eq!(back.labels(), data.labels());
    let quantized = data.images().map(|v| (v * 255.0).round() / 255.0);
    let err = back.images().max_abs_diff(&quantized).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn malformed_idx_files_are_rejected_specifically() {
    let good_images = idx_images(10, 4, 7);
    let mut labels = idx_header(0x0801, &[10]);
    labels.extend(0..10u8);

    let mut nine = idx_header(0x0803, &[10, 4, 4]);
    nine.extend(std::iter::repeat_n(0u8, 9 * 16));
    let mut trailing = good_images.clone();
    trailing.push(1);
    let cases: Vec<(&str, Vec<u8>, fn(&Error) -> bool)> = vec![
        ("empty", vec![], |e| matches!(e, Error::IdxTruncated { .. })),
        ("three bytes", vec![0, 0, 8], |e| matches!(e, Error::IdxTruncated { .. })),
        ("label magic", idx_header(0x0801, &[1]), |e| matches!(e, Error::IdxMagic { .. })),
        ("float magic", idx_header(0x0D03, &[1, 1, 1]), |e| matches!(e, Error::IdxMagic { .. })),
        ("little endian magic", 0x0803u32.to_le_bytes().to_vec(), |e| matches!(e, Error::IdxMagic { .. })),
        ("header cut", idx_header(0x0803, &[10, 4]), |e| matches!(e, Error::IdxTruncated { .. })),
        ("nine of ten", nine, |e| matches!(e, Error::IdxTruncated { .. })),
        ("trailing byte", trailing, |e| matches!(e, Error::IdxTrailing { .. })),
        ("zero count", idx_header(0x0803, &[0, 4, 4]), |e| matches!(e, Error::IdxHeader(_))),
        ("zero side", idx_header(0x0803, &[1, 0, 4]), |e| matches!(e, Error::IdxHeader(_))),
        ("huge dims", idx_header(0x0803, &[u32::MAX, u32::MAX, u32::MAX]), |e| {
            matches!(e, Error::IdxHeader(_) | Error::IdxTruncated { .. })
        }),
    ];
    for (name, bytes, check) in &cases {
        let err = read_idx_images(bytes).expect_err(name);
        assert!(check(&err), "{name}: unexpected {err:?}");
    }

    let label_cases: Vec<(&str, Vec<u8>, fn(&Error) -> bool)> = vec![
        ("image magic", idx_images(1, 2, 0), |e| matches!(e, Error::IdxMagic { .. })),
        ("short labels", {
            let mut b = idx_header(0x0801, &[10]);
            b.extend(0..9u8);
            b
        }, |e| matches!(e, Error::IdxTruncated { .. })),
        ("labels header cut", vec![0, 0, 8, 1, 0, 0], |e| matches!(e, Error::IdxTruncated { .. })),
    ];
    for (name, bytes, check) in &label_cases {
        let err = read_idx_labels(bytes).expect_err(name);
        assert!(check(&err), "{name}: unexpected {err:?}");
    }

    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        p
    };
    let img = write("img", &good_images);
    let lab = write("lab", &labels);
    let err = load_idx(&img, &lab, 5).unwrap_err();
    assert!(matches!(err, Error::LabelRange { label: 5, .. }), "{err:?}");
    let mut twelve = idx_header(0x0801, &[1]);
    twelve.push(12);
    let one_image = idx_images(1, 4, 0);
    let err = load_idx(write("one", &one_image), write("twelve", &twelve), 10).unwrap_err();
    assert!(matches!(err, Error::LabelRange { label: 12, .. }), "{err:?}");
    let err = load_idx(write("one2", &one_image), &lab, 10).unwrap_err();
    assert!(matches!(err, Error::IdxCountMismatch { images: 1, labels: 10 }), "{err:?}");
    let err = load_idx(dir.path().join("missing"), &lab, 10).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(!err.is_validation());
}

#[test]
fn malformed_checkpoints_are_rejected_specifically() {
    let m = model();
    let good = to_bytes(&m);
    let config_len = u32::from_le_bytes(good[6..10].try_into().unwrap()) as usize;
    let table = 10 + config_len;

    let mut cases: Vec<(&str, Vec<u8>, fn(&Error) -> bool)> = vec![
        ("empty", vec![], |e| matches!(e, Error::CheckpointTruncated("magic"))),
        ("magic only", b"SSMR".to_vec(), |e| matches!(e, Error::CheckpointTruncated("version"))),
        ("wrong magic", b"SSMX\x01\x00".to_vec(), |e| matches!(e, Error::CheckpointMagic(_))),
        ("idx file", idx_images(1, 2, 0), |e| matches!(e, Error::CheckpointMagic(_))),
        ("future version", b"SSMR\x02\x00".to_vec(), |e| {
            matches!(e, Error::CheckpointVersion { found: 2, .. })
        }),
        ("no config length", b"SSMR\x01\x00\x05".to_vec(), |e| {
            matches!(e, Error::CheckpointTruncated("config length"))
        }),
        ("header only", good[..table].to_vec(), |e| matches!(e, Error::CheckpointTruncated("tensor count"))),
        ("half a tensor", good[..good.len() / 2].to_vec(), |e| matches!(e, Error::CheckpointTruncated(_))),
        ("last byte missing", good[..good.len() - 1].to_vec(), |e| {
            matches!(e, Error::CheckpointTruncated("tensor data"))
        }),
    ];
    let mut with = |name: &'static str, f: &dyn Fn(&mut Vec<u8>), check: fn(&Error) -> bool| {
        let mut b = good.clone();
        f(&mut b);
        cases.push((name, b, check));
    };
    with("trailing byte", &|b| b.push(0), |e| matches!(e, Error::CheckpointContent(_)));
    with("config not utf8", &|b| b[10] = 0xff, |e| matches!(e, Error::CheckpointContent(_)));
    with("config garbage", &|b| b[10..14].copy_from_slice(b"zzzz"), |e| {
        matches!(e, Error::CheckpointContent(_))
    });
    with("config length too large", &|b| b[6..10].copy_from_slice(&u32::MAX.to_le_bytes()), |e| {
        matches!(e, Error::CheckpointTruncated("config block"))
    });
    with("no tensors", &|b| {
        b.truncate(table);
        b.extend_from_slice(&0u32.to_le_bytes());
    }, |e| matches!(e, Error::CheckpointContent(m) if m.contains("missing tensor")));
    with("tensor count too large", &|b| {
        let n = u32::from_le_bytes(b[table..table + 4].try_into().unwrap());
        b[table..table + 4].copy_from_slice(&(n + 1).to_le_bytes());
    }, |e| matches!(e, Error::CheckpointTruncated(_)));
    with("name not utf8", &|b| b[table + 6] = 0xfe, |e| matches!(e, Error::CheckpointContent(_)));
    with("renamed tensor", &|b| b[table + 6] = b'Z', |e| {
        matches!(e, Error::CheckpointContent(m) if m.contains("tensor"))
    });
    with("rank bumped", &|b| {
        let name_len = u16::from_le_bytes([b[table + 4], b[table + 5]]) as usize;
        b[table + 6 + name_len] += 1;
    }, |e| matches!(e, Error::CheckpointTruncated(_) | Error::CheckpointContent(_)));
    with("dim overflow", &|b| {
        let name_len = u16::from_le_bytes([b[table + 4], b[table + 5]]) as usize;
        let at = table + 7 + name_len;
        b[at..at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
    }, |e| matches!(e, Error::CheckpointTruncated(_) | Error::CheckpointContent(_)));
    with("shape changed", &|b| {
        let name_len = u16::from_le_bytes([b[table + 4], b[table + 5]]) as usize;
        let at = table + 7 + name_len;
        let d = u32::from_le_bytes(b[at..at + 4].try_into().unwrap());
        b[at..at + 4].copy_from_slice(&(d - 1).to_le_bytes());
    }, |e| matches!(e, Error::CheckpointTruncated(_) | Error::CheckpointContent(_)));
    with("n_classes edited", &|b| {
        let text = std::str::from_utf8(&b[10..table]).unwrap().replace("n_classes=3", "n_classes=4");
        b.splice(10..table, text.into_bytes());
    }, |e| matches!(e, Error::CheckpointContent(m) if m.contains("shape")));
    with("nan weight", &|b| {
        let n = b.len();
        b[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    }, |e| matches!(e, Error::CheckpointContent(m) if m.contains("non-finite")));

    assert!(cases.len() >= 20, "corpus has {} cases", cases.len());
    for (name, bytes, check) in &cases {
        match from_bytes(bytes) {
            Ok(_) => panic!("{name}: accepted"),
            Err(e) => assert!(check(&e), "{name}: unexpected {e:?}"),
        }
    }
}

#[test]
fn checkpoint_files_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let m = model();
    let p = dir.path().join("m.ssmr");
    save_checkpoint(&m, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(fs::read(&p).unwrap(), to_bytes(&back));
}

#[test]
fn reports_round_trip_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = Report::new(Metadata::new(7, "kind = whitebox").note("attack", "pgd eps=0.031"));
    r.push(Row::new("vssm", "clean", "accuracy", 0.9375));
    r.push(Row::new("vssm", "pgd", "accuracy", 0.125));
    for (format, name) in [(Format::Csv, "r.csv"), (Format::Json, "r.json")] {
        let p = dir.path().join(name);
        r.emit(format, &p).unwrap();
        assert_eq!(Report::load(&p).unwrap(), r);
    }
    let merged = merge(&[r.clone()]).unwrap();
    assert_eq!(merged.rows, r.rows);
}
