use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
loss.rule = droploss
synth.num_categories = 12
synth.feature_dim = 8
synth.dataset_size = 8000
schedule.iterations = 120
schedule.batch_size = 128
model.hidden_units = 16
eval.per_category = 10
eval.background_samples = 400
train.snapshot_every = 40
";

const RUN_FILES: &[&str] = &[
    "config.cfg",
    "counts.csv",
    "train_log.csv",
    "eval.csv",
    "grad_origin.csv",
    "bg_scores.csv",
    "ledger.csv",
    "ledger_snapshots.csv",
    "params.csv",
    "early_params.csv",
    "drop_audit.csv",
];

fn droploss(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_droploss"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, extra: &str) {
    fs::write(dir.join(name), format!("{SMALL}{extra}")).unwrap();
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(dir: &Path, file: &str) -> Vec<u8> {
    fs::read(dir.join(file)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(file).display()))
}

#[test]
fn train_writes_every_output() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "run.cfg", "output.dir = out\n");
    let out = droploss(&["train", "--config", "run.cfg"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for f in RUN_FILES {
        assert!(tmp.path().join("out").join(f).is_file(), "missing {f}");
    }
    let log = String::from_utf8(read(&tmp.path().join("out"), "train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 121);
}

#[test]
fn deterministic_rules_write_no_drop_audit() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.cfg"), SMALL.replace("droploss", "eql")).unwrap();
    let out = droploss(&["train", "--config", "run.cfg", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(!tmp.path().join("o/drop_audit.csv").exists());
    let log = String::from_utf8(read(&tmp.path().join("o"), "train_log.csv")).unwrap();
    assert!(log.lines().nth(1).unwrap().ends_with(",,,,,,,,,,,"));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "run.cfg", "");
    for dir in ["a", "b"] {
        let out = droploss(
            &["train", "--config", "run.cfg", "--seed", "7", "--out", dir],
            tmp.path(),
        );
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    for f in RUN_FILES {
        assert_eq!(
            read(&tmp.path().join("a"), f),
            read(&tmp.path().join("b"), f),
            "{f}"
        );
    }
    let out = droploss(
        &["train", "--config", "run.cfg", "--seed", "8", "--out", "c"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert_ne!(
        read(&tmp.path().join("a"), "params.csv"),
        read(&tmp.path().join("c"), "params.csv")
    );
}

#[test]
fn diagnose_reproduces_the_run_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "run.cfg", "");
    let out = droploss(
        &[
            "train", "--config", "run.cfg", "--seed", "2", "--out", "run",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = droploss(&["diagnose", "run", "--out", "again"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for f in [
        "grad_origin.csv",
        "bg_scores.csv",
        "eval.csv",
        "drop_audit.csv",
    ] {
        assert_eq!(
            read(&tmp.path().join("run"), f),
            read(&tmp.path().join("again"), f),
            "{f}"
        );
    }
}

#[test]
fn exported_pool_imports_back_to_the_same_run() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "export.cfg", "output.export_pool = true\n");
    let out = droploss(
        &["train", "--config", "export.cfg", "--out", "first"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    write_config(
        tmp.path(),
        "import.cfg",
        "synth.train_pool = first/train_pool.csv\n",
    );
    let out = droploss(
        &["train", "--config", "import.cfg", "--out", "second"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for f in ["counts.csv", "train_log.csv", "params.csv", "eval.csv"] {
        assert_eq!(
            read(&tmp.path().join("first"), f),
            read(&tmp.path().join("second"), f),
            "{f}"
        );
    }
}

#[test]
fn explicit_counts_profile() {
    let tmp = tempfile::tempdir().unwrap();
    let counts: String = (0..12).map(|j| format!("{j},{}\n", 3 + 20 * j)).collect();
    fs::write(
        tmp.path().join("counts_in.csv"),
        format!("category_id,count\n{counts}"),
    )
    .unwrap();
    write_config(
        tmp.path(),
        "run.cfg",
        "synth.profile = file\nsynth.counts_file = counts_in.csv\n",
    );
    let out = droploss(&["train", "--config", "run.cfg", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let written = String::from_utf8(read(&tmp.path().join("o"), "counts.csv")).unwrap();
    assert_eq!(written, format!("category_id,count\n{counts}"));
    let out = droploss(&["diagnose", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_2_with_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "bad.cfg", "synth.colour = red\n");
    let out = droploss(&["train", "--config", "bad.cfg", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("bad.cfg:11: unknown key `synth.colour`"),
        "{}",
        stderr(&out)
    );

    write_config(tmp.path(), "neg.cfg", "schedule.base_lr = -0.1\n");
    let out = droploss(&["train", "--config", "neg.cfg", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("neg.cfg:11:"), "{}", stderr(&out));

    let out = droploss(
        &["train", "--config", "missing.cfg", "--out", "o"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_sweep_grid_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "run.cfg", "");
    let out = droploss(
        &[
            "sweep", "--config", "run.cfg", "--family", "beql", "--grid", "", "--out", "s",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = droploss(
        &[
            "sweep",
            "--config",
            "run.cfg",
            "--family",
            "fixed_drop",
            "--out",
            "s",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn sweep_output_does_not_depend_on_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "run.cfg", "seeds = 1,2\n");
    for (dir, jobs) in [("one", "1"), ("three", "3")] {
        let out = droploss(
            &[
                "sweep",
                "--config",
                "run.cfg",
                "--family",
                "fixed_drop,droploss",
                "--grid",
                "0.25,1",
                "--jobs",
                jobs,
                "--out",
                dir,
            ],
            tmp.path(),
        );
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    for f in ["pareto.csv", "sweep_runs.csv"] {
        assert_eq!(
            read(&tmp.path().join("one"), f),
            read(&tmp.path().join("three"), f),
            "{f}"
        );
    }
    let pareto = String::from_utf8(read(&tmp.path().join("one"), "pareto.csv")).unwrap();
    assert_eq!(pareto.lines().count(), 4);
    let runs = String::from_utf8(read(&tmp.path().join("one"), "sweep_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 7);
}

#[test]
fn diverging_training_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "run.cfg", "schedule.base_lr = 1e300\n");
    let out = droploss(&["train", "--config", "run.cfg", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite loss at iteration"));
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = droploss(&["gradcheck"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = String::from_utf8(out.stdout).unwrap();
    for v in ["bce", "softmax", "eql", "beql", "droploss", "fixed_drop"] {
        assert!(table.contains(v), "{table}");
    }
    let out = droploss(&["gradcheck", "--perturb", "1e-3"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("gradcheck failed"),
        "{}",
        stderr(&out)
    );
}
