use std::path::Path;
use std::process::{Command, Output};

fn dualview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualview"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dualview(args);
    assert!(
        out.status.success(),
        "dualview {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "
[train]
epochs = 2
batch_size = 2
split_fraction = 0.75

[train.patch]
target_shape = [16, 16, 16]

[train.network]
base_width = 2

[train.critic]
base_width = 2
";

#[test]
fn synth_train_infer_evaluate_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let preds = dir.path().join("preds");
    let eval = dir.path().join("eval");
    let config = dir.path().join("run.toml");
    std::fs::write(&config, TINY).unwrap();

    ok(&["synth", "--n", "8", "--size", "32", "--seed", "3", "--out", p(&data)]);
    assert!(data.join("manifest.json").exists());
    assert!(data.join("phantom_007_image.nii.gz").exists());

    ok(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&run)]);
    for name in ["checkpoint_last.json", "training_log.csv", "split.json", "effective_config.toml"] {
        assert!(run.join(name).exists(), "{name} missing");
    }
    let log = std::fs::read_to_string(run.join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");

    ok(&["infer", "--checkpoint", p(&run.join("checkpoint_last.json")), "--in", p(&data), "--out", p(&preds)]);
    assert!(preds.join("phantom_000_pred.nii.gz").exists());

    ok(&["evaluate", "--pred", p(&preds), "--gt", p(&data), "--out", p(&eval)]);
    let per_case = std::fs::read_to_string(eval.join("per_case.csv")).unwrap();
    assert_eq!(per_case.lines().count(), 1 + 8 * 3, "{per_case}");
    let summary = std::fs::read_to_string(eval.join("summary.csv")).unwrap();
    assert!(summary.starts_with("cases,dsc"), "{summary}");
}

#[test]
fn help_lists_defaults() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["[default: 300]", "[default: 0.01]", "[default: 0.0001]", "[default: 0.3]", "[default: 0.2]", "[default: 0.76]"] {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }
    let top = ok(&["--help"]);
    let text = String::from_utf8_lossy(&top.stdout);
    for sub in ["synth", "augment", "train", "infer", "evaluate"] {
        assert!(text.contains(sub), "missing {sub}");
    }
}

#[test]
fn evaluating_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let eval = dir.path().join("eval");
    ok(&["synth", "--n", "2", "--size", "32", "--out", p(&data)]);
    ok(&["evaluate", "--pred", p(&data), "--gt", p(&data), "--out", p(&eval)]);
    let mut rows = csv::Reader::from_path(eval.join("per_case.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let mut n = 0;
    for row in rows.records() {
        let row = row.unwrap();
        assert_eq!(row[col("dsc")].parse::<f64>().unwrap(), 1.0);
        for m in ["hd", "hd95", "assd", "rve"] {
            assert_eq!(row[col(m)].parse::<f64>().unwrap(), 0.0, "{m}");
        }
        n += 1;
    }
    assert_eq!(n, 2 * 3);
}

#[test]
fn augment_writes_views_and_differences() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("aug");
    ok(&["synth", "--n", "1", "--size", "32", "--out", p(&data)]);
    ok(&["augment", "--in", p(&data), "--cutoff", "0.2", "--geometry", "cubic", "--diff", "--out", p(&out)]);
    assert!(out.join("phantom_000_hf.nii.gz").exists());
    assert!(out.join("phantom_000_diff.nii.gz").exists());

    let bad = dualview(&["augment", "--in", p(&data), "--cutoff", "0.2", "--keep-dc", "--out", p(&out)]);
    assert_eq!(bad.status.code(), Some(5));
}

#[test]
fn config_errors_name_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[train]\nepochs = 3\n\nlerning_rate = 0.1\n").unwrap();
    let out = dualview(&["train", "--config", p(&config), "--data", p(dir.path()), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(5));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4") && err.contains("lerning_rate"), "{err}");
}

#[test]
fn missing_inputs_exit_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualview(&[
        "infer",
        "--checkpoint",
        p(&dir.path().join("absent.json")),
        "--in",
        p(dir.path()),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn reruns_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    ok(&["synth", "--n", "2", "--size", "32", "--seed", "9", "--out", p(&a)]);
    let first = std::fs::read(a.join("phantom_001_image.nii.gz")).unwrap();
    let manifest = std::fs::read(a.join("manifest.json")).unwrap();
    ok(&["synth", "--n", "2", "--size", "32", "--seed", "9", "--out", p(&a)]);
    assert_eq!(std::fs::read(a.join("phantom_001_image.nii.gz")).unwrap(), first);
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), manifest);
}
