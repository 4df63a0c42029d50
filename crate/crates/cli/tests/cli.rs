use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn strelay(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_strelay"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["synth", "--out", p(&out)];
    args.extend_from_slice(extra);
    let o = strelay(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn small_synth(dir: &Path, name: &str) -> PathBuf {
    synth(
        dir,
        name,
        &["--users", "4", "--events", "60", "--seed", "3"],
    )
}

fn train(dataset: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        p(dataset),
        "--out",
        p(out),
        "--d",
        "4",
        "--epochs",
        "2",
    ];
    args.extend_from_slice(extra);
    strelay(&args)
}

/// Mean epoch losses printed by `train`.
fn losses(o: &Output) -> Vec<f64> {
    stdout(o)
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn ingest_writes_canonical_dataset_and_idmap() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("raw.tsv");
    fs::write(
        &input,
        "alice\t2012-04-03T18:00:00Z\t40.7\t-74.0\tcafe\n\
         alice\t2012-04-03T19:00:00Z\t40.8\t-74.1\tbar\n\
         bob\t2012-04-04T08:00:00Z\t40.7\t-74.0\tcafe\n",
    )
    .unwrap();
    let out = dir.path().join("ds.tsv");
    let o = strelay(&["ingest", p(&input), "--out", p(&out), "--min-checkins", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("users\t2") && stdout(&o).contains("checkins\t3"));
    let rows = fs::read_to_string(&out).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert!(rows.lines().all(|l| l.split('\t').count() == 5));
    let idmap = fs::read_to_string(dir.path().join("ds.tsv.idmap.tsv")).unwrap();
    assert!(idmap.contains("alice\t0") && idmap.contains("bob\t1"));

    // filtering drops bob
    let o = strelay(&["ingest", p(&input), "--out", p(&out), "--min-checkins", "2"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("users\t1"));
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("bad.tsv");
    fs::write(
        &input,
        "u\t1333324800\t1.0\t1.0\tp\nu\tnot-a-time\t1.0\t1.0\tp\n",
    )
    .unwrap();
    let o = strelay(&["ingest", p(&input), "--out", p(&dir.path().join("o.tsv"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn entropy_on_noise_free_synthetic_data() {
    let dir = TempDir::new().unwrap();
    let ds = synth(
        dir.path(),
        "s.tsv",
        &["--noise", "0", "--users", "4", "--events", "200"],
    );
    let csv = dir.path().join("e.csv");
    let o = strelay(&["entropy", p(&ds), "--out", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mean = |col: &str| -> f64 {
        stdout(&o)
            .lines()
            .find(|l| l.split_whitespace().next() == Some(col))
            .and_then(|l| l.split_whitespace().nth(1))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(mean("E_st") < mean("E"));
    assert_eq!(mean("E_st"), 0.0);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 5);
}

#[test]
fn entropy_of_a_single_place_is_zero() {
    let dir = TempDir::new().unwrap();
    let ds = dir.path().join("one.tsv");
    fs::write(
        &ds,
        "0\t1333324800\t1.0\t1.0\t0\n0\t1333328400\t1.0\t1.0\t0\n0\t1333332000\t1.0\t1.0\t0\n",
    )
    .unwrap();
    let csv = dir.path().join("e.csv");
    let o = strelay(&["entropy", p(&ds), "--out", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(
        row.split(',')
            .skip(1)
            .all(|v| v.parse::<f64>().unwrap() == 0.0),
        "{row}"
    );
}

#[test]
fn missing_dataset_is_a_data_error() {
    let o = strelay(&["entropy", "/nonexistent/data.tsv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/data.tsv"));
}

#[test]
fn training_loss_decreases_over_the_first_epochs() {
    let dir = TempDir::new().unwrap();
    let ds = synth(dir.path(), "s.tsv", &[]);
    let ckpt = dir.path().join("m.ckpt");
    let o = strelay(&["train", p(&ds), "--out", p(&ckpt), "--epochs", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("epoch\tmean_loss\n"));
    let l = losses(&o);
    assert_eq!(l.len(), 5);
    assert!(l.windows(2).all(|w| w[1] < w[0]), "{l:?}");
    assert!(ckpt.exists());
}

#[test]
fn no_spatial_checkpoint_lacks_spatial_tensors() {
    let dir = TempDir::new().unwrap();
    let ds = small_synth(dir.path(), "s.tsv");
    let ckpt = dir.path().join("m.ckpt");
    let o = train(&ds, &ckpt, &["--variant", "no_spatial"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let bytes = String::from_utf8_lossy(&fs::read(&ckpt).unwrap()).into_owned();
    assert!(!bytes.contains("spatial.candidates"));
    assert!(bytes.contains("temporal.candidates"));
}

#[test]
fn repeated_seed_gives_identical_checkpoints() {
    let dir = TempDir::new().unwrap();
    let ds = small_synth(dir.path(), "s.tsv");
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    for (path, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        assert_eq!(code(&train(&ds, path, &["--seed", seed])), 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn config_file_flags_and_unknown_keys() {
    let dir = TempDir::new().unwrap();
    let ds = small_synth(dir.path(), "s.tsv");
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "epochs=1\nseed=2\nencoder=flashback\nM=12\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = strelay(&[
        "train",
        p(&ds),
        "--config",
        p(&cfg),
        "--out",
        p(&a),
        "--d",
        "4",
        "--epochs",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(losses(&o).len(), 3, "flag beats file");
    assert!(stderr(&o).contains("flashback"));

    let json = dir.path().join("run.json");
    fs::write(
        &json,
        r#"{"epochs": 3, "seed": 2, "d": 4, "encoder": {"kind": "flashback"}, "spec": {"M": 12}}"#,
    )
    .unwrap();
    let o = strelay(&["train", p(&ds), "--config", p(&json), "--out", p(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    fs::write(&cfg, "epochs=1\nlearning_rate=0.1\n").unwrap();
    let o = strelay(&["train", p(&ds), "--config", p(&cfg), "--out", p(&a)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&strelay(&["train"])), 1);
    assert_eq!(code(&strelay(&["frobnicate"])), 1);
    assert_eq!(code(&strelay(&["gradcheck", "--variant", "sideways"])), 1);
    assert_eq!(code(&strelay(&["--help"])), 0);
}

#[test]
fn eval_groups_by_radius_of_gyration() {
    let dir = TempDir::new().unwrap();
    let ds = small_synth(dir.path(), "s.tsv");
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(code(&train(&ds, &ckpt, &[])), 0);
    let csv = dir.path().join("m.csv");
    let o = strelay(&[
        "eval",
        p(&ckpt),
        p(&ds),
        "--group",
        "rog_median",
        "--out",
        p(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let groups: std::collections::BTreeSet<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(
        groups.into_iter().collect::<Vec<_>>(),
        ["all", "long", "short"]
    );
    assert!(text.starts_with("metric,group,value,n\nacc@1,all,"));
}

#[test]
fn eval_groups_by_label_file() {
    let dir = TempDir::new().unwrap();
    let ds = small_synth(dir.path(), "s.tsv");
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(code(&train(&ds, &ckpt, &[])), 0);
    let labels = dir.path().join("labels.tsv");
    fs::write(&labels, "user\t0\tcity\nuser\t1\tcity\nuser\t2\tsuburb\n").unwrap();
    let group = format!("labels:{}", p(&labels));
    let o = strelay(&["eval", p(&ckpt), p(&ds), "--group", &group]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for g in ["all", "city", "suburb", "unlabeled"] {
        assert!(
            stdout(&o).lines().any(|l| l.starts_with(g)),
            "{g}: {}",
            stdout(&o)
        );
    }
    let o = strelay(&["eval", p(&ckpt), p(&ds), "--group", "by_city"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_rejects_a_mismatched_vocabulary() {
    let dir = TempDir::new().unwrap();
    let ds = small_synth(dir.path(), "s.tsv");
    let other = synth(dir.path(), "o.tsv", &["--users", "5", "--events", "60"]);
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(code(&train(&ds, &ckpt, &[])), 0);
    let o = strelay(&["eval", p(&ckpt), p(&other)]);
    assert_eq!(code(&o), 2);
    assert!(!stderr(&o).contains("panicked"), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let ds = small_synth(dir.path(), "s.tsv");
    let ckpt = dir.path().join("m.ckpt");
    fs::write(&ckpt, b"STRL\x01\x00").unwrap();
    let o = strelay(&["eval", p(&ckpt), p(&ds)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("byte"), "{}", stderr(&o));
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let a = synth(dir.path(), "a.tsv", &["--seed", "7"]);
    let b = synth(dir.path(), "b.tsv", &["--seed", "7"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a.tsv.rules.tsv")).unwrap(),
        fs::read(dir.path().join("b.tsv.rules.tsv")).unwrap()
    );
    let c = synth(dir.path(), "c.tsv", &["--seed", "8"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn gradcheck_passes_on_default_and_degenerate_shapes() {
    for args in [
        vec!["gradcheck"],
        vec!["gradcheck", "--d", "1", "--M", "1", "--N", "1"],
        vec![
            "gradcheck",
            "--encoder",
            "flashback",
            "--variant",
            "no_relaying",
        ],
    ] {
        let o = strelay(&args);
        assert_eq!(code(&o), 0, "{args:?}: {}{}", stdout(&o), stderr(&o));
        let err: f64 = stdout(&o)
            .lines()
            .find_map(|l| l.strip_prefix("max_rel_err\t"))
            .unwrap()
            .parse()
            .unwrap();
        assert!(err < 1e-4);
    }
}
