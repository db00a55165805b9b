use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_ssmlab");

const TRAIN: &str = "\
[model]
image_size = 8
patch_size = 2
depths = 1, 1
dims = 6, 8
n_state = 2
n_classes = 3
seed = 4

[data]
train_n = 48
test_n = 24

[train]
epochs = 2
batch_size = 8

[output]
checkpoint = tiny.ssmr
";

fn ssmlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn trained(dir: &Path) {
    fs::write(dir.join("train.cfg"), TRAIN).unwrap();
    let out = ssmlab(dir, &["train", "--config", "train.cfg"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn training_is_deterministic_and_writes_a_curve() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let first = fs::read(dir.path().join("tiny.ssmr")).unwrap();
    let curve = fs::read_to_string(dir.path().join("tiny.curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,loss,train_accuracy,test_accuracy\n"));
    assert_eq!(curve.lines().count(), 3);
    let out = ssmlab(dir.path(), &["train", "--config", "train.cfg", "--out", "again.ssmr"]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(dir.path().join("again.ssmr")).unwrap(), first);
    let out = ssmlab(dir.path(), &["train", "--config", "train.cfg", "--out", "other.ssmr", "--seed", "9"]);
    assert_eq!(code(&out), 0);
    assert_ne!(fs::read(dir.path().join("other.ssmr")).unwrap(), first);
}

#[test]
fn runs_are_byte_identical_and_state_their_constants() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    fs::write(
        d.join("masked.cfg"),
        "[experiment]\nkind = masked\ncheckpoints = tiny.ssmr\nsamples = 6\nseed = 3\n[attack]\nepsilon = 8/255\nstep_size = 2/255\n",
    )
    .unwrap();
    for (out, format) in [("a.csv", "csv"), ("b.csv", "csv"), ("a.json", "json"), ("b.json", "json")] {
        let o = ssmlab(d, &["run", "--spec", "masked.cfg", "--out", out, "--format", format]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a.csv.meta.json"), read("b.csv.meta.json"));
    assert_eq!(read("a.json"), read("b.json"));
    let json = String::from_utf8(read("a.json")).unwrap();
    assert!(json.contains("\"config_hash\""));
    assert!(json.contains("\"seed\": 3"));
    assert!(json.contains("eps=0.031373"), "{json}");
    let csv = String::from_utf8(read("a.csv")).unwrap();
    for cond in ["pgd", "w/o A", "w/o B", "w/o C", "w/o Delta"] {
        assert!(csv.contains(&format!("tiny,{cond},robust_accuracy,")), "{cond} missing in\n{csv}");
    }

    let o = ssmlab(d, &["run", "--spec", "masked.cfg", "--out", "c.csv", "--epsilon", "2/255", "--seed", "4"]);
    assert_eq!(code(&o), 0);
    let meta = String::from_utf8(read("c.csv.meta.json")).unwrap();
    assert!(meta.contains("eps=0.007843") && meta.contains("\"seed\": 4"), "{meta}");
    assert_ne!(read("c.csv.meta.json"), read("a.csv.meta.json"));

    let o = ssmlab(d, &["report", "a.csv", "c.csv", "--out", "merged.csv"]);
    assert_eq!(code(&o), 1, "duplicate keys must clash");
    let o = ssmlab(d, &["report", "a.csv", "--out", "merged.csv"]);
    assert_eq!(code(&o), 0);
    assert_eq!(read("merged.csv"), read("a.csv"));
}

#[test]
fn exit_codes_separate_bad_input_from_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let write = |name: &str, text: &str| fs::write(d.join(name), text).unwrap();

    assert_eq!(code(&ssmlab(d, &["frobnicate"])), 1);
    assert_eq!(code(&ssmlab(d, &["run", "--spec", "x.cfg"])), 1, "missing --out");
    assert_eq!(code(&ssmlab(d, &["--help"])), 0);

    write("bad.cfg", "[model]\nimage_size = 8\nbogus line\n");
    let out = ssmlab(d, &["train", "--config", "bad.cfg"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.cfg:3:"));

    write("typo.cfg", "[train]\nepochs = 2\nepoch = 3\n");
    let out = ssmlab(d, &["train", "--config", "typo.cfg"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("typo.cfg:3:"));

    write("transfer.cfg", "[experiment]\nkind = transfer\ncheckpoints = one.ssmr\n");
    let out = ssmlab(d, &["run", "--spec", "transfer.cfg", "--out", "t.csv"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 2"));

    write("missing.cfg", "[experiment]\nkind = whitebox\ncheckpoints = absent.ssmr\n");
    let out = ssmlab(d, &["run", "--spec", "missing.cfg", "--out", "m.csv"]);
    assert_eq!(code(&out), 2);

    write("junk.ssmr", "not a checkpoint");
    write("junk.cfg", "[experiment]\nkind = whitebox\ncheckpoints = junk.ssmr\n");
    let out = ssmlab(d, &["run", "--spec", "junk.cfg", "--out", "j.csv"]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.contains("junk") && err.contains("bad magic"), "{err}");
}

#[test]
fn class_count_mismatch_with_idx_data_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut images = vec![0, 0, 8, 4, 0, 0, 0, 2, 0, 0, 0, 8, 0, 0, 0, 8, 0, 0, 0, 3];
    images.extend(std::iter::repeat_n(128u8, 2 * 8 * 8 * 3));
    let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 1, 4];
    fs::write(d.join("x.idx"), &images).unwrap();
    fs::write(d.join("y.idx"), &labels).unwrap();
    let cfg = TRAIN.replace(
        "train_n = 48\ntest_n = 24",
        "source = idx\ntrain_images = x.idx\ntrain_labels = y.idx\ntest_images = x.idx\ntest_labels = y.idx",
    );
    fs::write(d.join("idx.cfg"), cfg).unwrap();
    let out = ssmlab(d, &["train", "--config", "idx.cfg"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("label 4"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn oracle_command_reports_each_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = ssmlab(dir.path(), &["oracle", "--samples", "10", "--out", "o.json", "--format", "json"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS recurrence_vs_convolution"));
    assert!(text.contains("PASS zoh_vs_integration"));
    let json = fs::read_to_string(dir.path().join("o.json")).unwrap();
    assert!(json.contains("max_error"));
}
