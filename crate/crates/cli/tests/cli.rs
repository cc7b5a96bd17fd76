use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gfef_cli::service::ClassifyResponse;

fn gfef(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfef"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 8] = [
    "--set",
    "dataset.synthetic.n_per_class=4",
    "--set",
    "train.epochs=1",
    "--set",
    "train.batch=6",
    "--set",
    "train.seeds=[3]",
];

#[test]
fn generate_train_evaluate_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let mut gen = vec!["generate", "--out", "train.csv", "--test-out", "test.tsv"];
    gen.extend(&SMALL[..2]);
    ok(gfef(d, &gen));
    let csv = fs::read_to_string(d.join("train.csv")).unwrap();
    assert_eq!(csv.lines().count(), 12);
    assert!(csv.lines().all(|l| l.split(',').count() == 102));

    let mut train = vec!["train", "--out", "m.ckpt"];
    train.extend(SMALL);
    let status = ok(gfef(d, &train));
    assert!(status.contains("test accuracy"), "{status}");
    let log = fs::read_to_string(d.join("m.ckpt.log.tsv")).unwrap();
    assert!(log.starts_with("seed\t"), "{log}");
    assert_eq!(log.lines().count(), 2);

    let eval = ["evaluate", "--checkpoint", "m.ckpt", "--data", "test.tsv"];
    let first = ok(gfef(d, &eval));
    let acc: f64 = first
        .lines()
        .find_map(|l| l.strip_prefix("accuracy\t"))
        .unwrap_or_else(|| panic!("no accuracy line in {first}"))
        .trim()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(first, ok(gfef(d, &eval)));
    // Without --data the held-out split comes from the checkpoint's config.
    assert_eq!(first, ok(gfef(d, &["evaluate", "--checkpoint", "m.ckpt"])));

    let test = fs::read_to_string(d.join("test.tsv")).unwrap();
    let rows: Vec<&str> = test.lines().take(3).map(|l| l.split_once('\t').unwrap().1).collect();
    fs::write(d.join("series.txt"), rows.join("\n")).unwrap();
    let pred = ok(gfef(d, &["predict", "--checkpoint", "m.ckpt", "--input", "series.txt"]));
    let model = gfef_core::checkpoint::load(&d.join("m.ckpt")).unwrap();
    let lines: Vec<&str> = pred.lines().collect();
    assert_eq!(lines.len(), 3);
    for (line, row) in lines.iter().zip(&rows) {
        let got: ClassifyResponse = serde_json::from_str(line).unwrap();
        let series: Vec<f64> = row.split('\t').map(|v| v.parse().unwrap()).collect();
        assert_eq!(got, gfef_cli::service::classify_one(&model, &series).unwrap());
    }

    let table = ok(gfef(d, &["hyperedges", "--checkpoint", "m.ckpt"]));
    assert!(table.lines().last().unwrap().starts_with("mean\t"), "{table}");
}

#[test]
fn unknown_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = gfef(dir.path(), &["generate", "--out", "x.tsv", "--set", "model.topk=3"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("topk") && err.contains("top_k"), "{err}");
}

#[test]
fn invariant_violation_stops_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = gfef(dir.path(), &["train", "--out", "m.ckpt", "--set", "model.patch_len=4"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("patch_len"), "{err}");
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn gradcheck_command_passes_on_a_module() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(gfef(dir.path(), &["gradcheck", "--select", "final", "--trials", "8"]));
    assert!(out.contains("status\tpass"), "{out}");
}
