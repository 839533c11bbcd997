use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spectral"));
    c.env_remove("SPECTRAL_CORE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data rows of a CSV file, skipping `#` comments and the header.
fn data_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn header(text: &str) -> &str {
    text.lines().find(|l| !l.starts_with('#')).unwrap()
}

const SMALL: &str = r#"
seed = 3

[train]
epochs = 4
eval_every = 2
batch_size_spectral = 60
batch_size_standard = 100

[sweep]
h = [4, 6]
trials = 2
train_size = 300
test_size = 100
"#;

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p
}

fn sweep_into(dir: &Path, out: &str) -> PathBuf {
    let cfg = small_config(dir);
    let out = dir.join(out);
    let o = run(&["sweep", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn gen_teacher_is_reproducible_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["gen-teacher", "--seed", "5", "--out", path_str(out)]);
        assert_eq!(code(&o), 0);
    }
    let ta = read(a.join("teacher.model.json"));
    assert_eq!(ta, read(b.join("teacher.model.json")));
    let model: Value = serde_json::from_str(&ta).unwrap();
    assert_eq!(model["dims"], serde_json::json!([10, 20, 20, 1]));

    let manifest: Value = serde_json::from_str(&read(a.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "gen-teacher");
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["outputs"]["teacher.model.json"].as_str().unwrap().len() == 64);
    assert!(a.join("effective_config.toml").exists());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[teacher]\nhidden = [20, 0]\n").unwrap();
    let o = run(&["gen-teacher", "--config", path_str(&bad), "--out", path_str(&dir.path().join("c"))]);
    assert_eq!(code(&o), 1);

    std::fs::write(&bad, "[teacher]\nhiden = [20]\n").unwrap();
    let o = run(&["gen-teacher", "--config", path_str(&bad), "--out", path_str(&dir.path().join("c"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["sweep", "--trials", "many"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn sweep_writes_tables_and_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let a = sweep_into(dir.path(), "a");
    let b = sweep_into(dir.path(), "b");

    let summary = read(a.join("sweep_summary.csv"));
    assert_eq!(header(&summary), "h,parametrization,trial,train_mse,test_mse,core_size");
    let rows = data_rows(&summary);
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert_eq!(rows[0][..3], ["4", "standard", "0"]);
    assert_eq!(rows[1][..3], ["4", "standard", "1"]);
    assert_eq!(rows[2][..3], ["4", "spectral", "0"]);

    let hist = read(a.join("histograms.csv"));
    assert_eq!(header(&hist), "h,parametrization,bin_lo,bin_hi,count");
    assert_eq!(data_rows(&hist).len(), 2 * 2 * 50);

    let history = read(a.join("history/h4_spectral_t1.csv"));
    assert_eq!(header(&history), "epoch,train_loss,test_mse");
    let hrows = data_rows(&history);
    assert_eq!(hrows.len(), 4);
    assert_eq!(hrows[0][2], "");
    assert!(!hrows[1][2].is_empty());
    assert!(!a.join(".partial").exists());

    for rel in [
        "sweep_summary.csv",
        "histograms.csv",
        "teacher.model.json",
        "models/h6_standard_t1.model.json",
        "models/h6_spectral_t0.model.json",
        "history/h4_standard_t0.csv",
        "effective_config.toml",
    ] {
        assert_eq!(read(a.join(rel)), read(b.join(rel)), "{rel} differs between runs");
    }

    // Thread count does not change results.
    let cfg = small_config(dir.path());
    let c = dir.path().join("c");
    let o = bin()
        .args(["sweep", "--config", path_str(&cfg), "--out", path_str(&c)])
        .env("SPECTRAL_CORE_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(summary, read(c.join("sweep_summary.csv")));

    // The effective config reproduces the run.
    let d = dir.path().join("d");
    let o = run(&["sweep", "--config", path_str(&a.join("effective_config.toml")), "--out", path_str(&d)]);
    assert_eq!(code(&o), 0);
    assert_eq!(summary, read(d.join("sweep_summary.csv")));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("o");
    let o = run(&[
        "sweep", "--config", path_str(&cfg), "--h", "3", "--trials", "1", "--epochs", "2", "--alpha-lambda", "0.01",
        "--out", path_str(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data_rows(&read(out.join("sweep_summary.csv"))).len(), 2);
    let effective = read(out.join("effective_config.toml"));
    assert!(effective.contains("alpha_lambda = 0.01"), "{effective}");
    assert!(effective.contains("h = [3]"), "{effective}");
}

#[test]
fn saved_models_reload_exactly() {
    // Pruning recomputes the held-out MSE from the saved file; it must match
    // the sweep's in-memory value to the last bit.
    let dir = tempfile::tempdir().unwrap();
    let out = sweep_into(dir.path(), "s");
    let summary = data_rows(&read(out.join("sweep_summary.csv")));
    for (h, p, t) in [("6", "spectral", "0"), ("6", "standard", "1")] {
        let row = summary.iter().find(|r| r[0] == h && r[1] == p && r[2] == t).unwrap();
        let pdir = dir.path().join(format!("p_{p}"));
        let o = run(&[
            "prune",
            "--config",
            path_str(&small_config(dir.path())),
            "--model",
            path_str(&out.join(format!("models/h{h}_{p}_t{t}.model.json"))),
            "--teacher",
            path_str(&out.join("teacher.model.json")),
            "--out",
            path_str(&pdir),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let text = read(pdir.join("prune_curve.csv"));
        let comment = text.lines().next().unwrap();
        let full = comment.split(' ').find_map(|kv| kv.strip_prefix("full_mse=")).unwrap();
        assert_eq!(full.parse::<f64>().unwrap().to_bits(), row[4].parse::<f64>().unwrap().to_bits());
        assert!(comment.contains(&format!(" trial={t} ")), "{comment}");
    }
}

#[test]
fn prune_reports_one_point_per_removal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let s = dir.path().join("s");
    let o = run(&["sweep", "--config", path_str(&cfg), "--h", "100", "--trials", "1", "--epochs", "2", "--out", path_str(&s)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let p = dir.path().join("p");
    let o = run(&[
        "prune",
        "--config",
        path_str(&cfg),
        "--model",
        path_str(&s.join("models/h100_spectral_t0.model.json")),
        "--teacher",
        path_str(&s.join("teacher.model.json")),
        "--write-pruned",
        "--out",
        path_str(&p),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(p.join("prune_curve.csv"));
    let comment = text.lines().next().unwrap();
    assert!(comment.starts_with("# model="), "{comment}");
    assert!(comment.contains(" core_size="), "{comment}");
    assert!(comment.contains(" n_teacher=20"), "{comment}");
    assert_eq!(header(&text), "h,trial,n_lambda,n_teacher,delta_mse");
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 99);
    assert_eq!(rows[0][2], "99");
    assert_eq!(rows[98][2], "1");
    assert!(p.join("pruned/h100_spectral_t0.model.json").exists());
}

#[test]
fn paths_of_a_model_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let s = sweep_into(dir.path(), "s");
    let m = s.join("models/h6_spectral_t0.model.json");
    let p = dir.path().join("p");
    let o = run(&["paths", path_str(&m), path_str(&m), "--out", path_str(&p)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("spectrum_distance = 0e0"), "{}", stdout(&o));
    let manifest: Value = serde_json::from_str(&read(p.join("manifest.json"))).unwrap();
    assert_eq!(manifest["results"]["spectrum_distance"], 0.0);

    let text = read(p.join("paths.csv"));
    assert_eq!(header(&text), "network_id,frac_index,gamma_value");
    // Two spectra of 10·6·20 paths each.
    assert_eq!(data_rows(&text).len(), 2 * 10 * 6 * 20);

    let t = s.join("teacher.model.json");
    let o = run(&["paths", path_str(&m), path_str(&t), "--prune-a", "--out", path_str(&p)]);
    assert_eq!(code(&o), 0);
}

#[test]
fn grad_check_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["grad-check", "--out", path_str(&dir.path().join("g"))]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for act in ["tanh", "erf", "relu", "identity"] {
        assert!(text.contains(act), "{text}");
    }
    let manifest: Value = serde_json::from_str(&read(dir.path().join("g/manifest.json"))).unwrap();
    assert!(manifest["results"]["max_rel_error"].as_f64().unwrap() < 1e-6);

    let cfg = dir.path().join("identity.toml");
    std::fs::write(&cfg, "[grad_check]\nactivations = [\"identity\"]\n").unwrap();
    let o = run(&["grad-check", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("i"))]);
    assert_eq!(code(&o), 0);
    let manifest: Value = serde_json::from_str(&read(dir.path().join("i/manifest.json"))).unwrap();
    assert!(manifest["results"]["max_rel_error"].as_f64().unwrap() < 1e-8);

    let o = run(&["grad-check", "--corrupt", "--seed", "2", "--out", path_str(&dir.path().join("c"))]);
    assert_eq!(code(&o), 2, "{}", stdout(&o));
}

#[test]
fn conv_demo_checks_all_forms() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["conv-demo", "--toeplitz-csv", "--out", path_str(&dir.path().join("a"))]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let manifest: Value = serde_json::from_str(&read(dir.path().join("a/manifest.json"))).unwrap();
    assert!(manifest["results"]["max_error"].as_f64().unwrap() < 1e-12);
    // 4x4 input, 2x2 filter: 9 outputs, 16 inputs.
    let t = read(dir.path().join("a/toeplitz.csv"));
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines.len(), 1 + 9);
    assert!(lines[0].starts_with("x0,x1,"));
    assert!(lines.iter().all(|l| l.split(',').count() == 16));

    let o = run(&["conv-demo", "--stride", "2", "--out", path_str(&dir.path().join("b"))]);
    assert_eq!(code(&o), 0);

    let o = run(&["conv-demo", "--relevance", "0.5", "--out", path_str(&dir.path().join("c"))]);
    assert_eq!(code(&o), 0);
    let manifest: Value = serde_json::from_str(&read(dir.path().join("c/manifest.json"))).unwrap();
    assert_eq!(manifest["results"]["relevance_error"], 0.0);
}
