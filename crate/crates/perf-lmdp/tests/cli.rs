use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use perf_lmdp::config::{parse_config_str, Driver, InstanceConfig, LambdaSetting};
use perf_lmdp::csvio;
use perf_lmdp::output::{RunDir, TraceWriter};
use perf_lmdp::CliError;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_perf-lmdp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn kv(path: &Path) -> Vec<(String, String)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).map(|x| (x[0].to_string(), x[1].to_string())).collect()
}

fn value(rows: &[(String, String)], key: &str) -> f64 {
    rows.iter().find(|(k, _)| k == key).map(|(_, v)| v.parse().unwrap()).unwrap()
}

#[test]
fn minimal_certify_config_parses_with_auto() {
    let cfg = parse_config_str("driver = \"certify\"\nlambda = \"auto\"\n", Path::new(".")).unwrap();
    assert_eq!(cfg.driver, Some(Driver::Certify));
    assert_eq!(cfg.lambda, LambdaSetting::default());
    assert_eq!(cfg.instance, InstanceConfig::Reference);
}

#[test]
fn discount_one_is_rejected() {
    let text = "\
driver = \"retrain-exact\"

[instance]
source = \"random\"
states = 2
actions = 2
discount = 1.0
eps_theta = 0.01
eps_mu = 0.0
";
    let err = parse_config_str(text, Path::new(".")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("discount must be < 1"), "{}", msg);
    assert!(msg.contains("line 7"), "{}", msg);
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn config_round_trip() {
    let text = "\
driver = \"retrain-finite\"
seed = 17
lambda = 0.25

[instance]
source = \"random\"
states = 3
actions = 2
discount = 0.8
eps_theta = 0.02
eps_mu = 0.0001
kind = \"policy-factored\"

[finite]
m_schedule = [100, 200, 400]
sigma = \"estimated\"

[pd]
t_inner = 10
k = 5
eta_pi = 0.5
";
    let a = parse_config_str(text, Path::new(".")).unwrap();
    let b = parse_config_str(&a.to_toml(), Path::new(".")).unwrap();
    assert_eq!(a, b);
    assert_eq!(b.to_toml(), a.to_toml());
}

#[test]
fn unknown_keys_are_errors() {
    let err = parse_config_str("sede = 3\n", Path::new(".")).unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
}

#[test]
fn several_problems_are_listed_together() {
    let text = "lambda = -1.0\n[retrain]\nmax_rounds = 0\n[diagnose]\ngrid = 2.0\n";
    match parse_config_str(text, Path::new(".")).unwrap_err() {
        CliError::ConfigList(v) => {
            assert_eq!(v.len(), 3, "{:?}", v);
            assert!(v[0].starts_with("line 1:"));
        }
        e => panic!("expected a list, got {}", e),
    }
}

#[test]
fn certify_reference_reports_rate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["certify", "--lambda", "0.1", "--out", path_arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = kv(&out.join("summary.csv"));
    assert!((value(&rows, "r") - 0.39528).abs() < 1e-5);
    assert!((value(&rows, "lambda_min") - 0.03125).abs() < 1e-12);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["driver"], "certify");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    for rel in manifest["outputs"].as_array().unwrap() {
        assert!(out.join(rel.as_str().unwrap()).exists(), "{}", rel);
    }
}

#[test]
fn instance_snapshot_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    assert!(run(&["certify", "--lambda", "0.1", "--out", path_arg(&first)]).status.success());
    let second = dir.path().join("b");
    let snap = first.join("instance/instance.toml");
    let o = run(&["certify", "--config", path_arg(&snap), "--lambda", "0.1", "--out", path_arg(&second)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = kv(&first.join("summary.csv"));
    let b = kv(&second.join("summary.csv"));
    assert_eq!(a, b);
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn identical_runs_give_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "finite.toml",
        "driver = \"retrain-finite\"\nseed = 5\nlambda = 0.1\n[retrain]\nmax_rounds = 4\n[finite]\nm_schedule = 500\nsave_datasets = true\n",
    );
    let mut traces = Vec::new();
    for name in ["x", "y"] {
        let out = dir.path().join(name);
        let o = run(&["run", "--config", path_arg(&cfg), "--out", path_arg(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        traces.push((
            fs::read(out.join("trace.jsonl")).unwrap(),
            fs::read(out.join("summary.csv")).unwrap(),
            fs::read(out.join("manifest.json")).unwrap(),
            fs::read(out.join("datasets/round_0004.csv")).unwrap(),
        ));
    }
    assert_eq!(traces[0], traces[1]);
    let text = String::from_utf8(traces[0].0.clone()).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn saved_dataset_matches_round_digest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["retrain-finite", "--lambda", "0.1", "--rounds", "2", "--m-schedule", "300", "--save-datasets", "--out", path_arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let data = csvio::read_dataset(&out.join("datasets/round_0002.csv")).unwrap();
    assert_eq!(data.len(), 300);
    let line = fs::read_to_string(out.join("trace.jsonl")).unwrap().lines().nth(1).unwrap().to_string();
    let rec: serde_json::Value = serde_json::from_str(&line).unwrap();
    let digest = u64::from_str_radix(rec["rng_digest"].as_str().unwrap(), 16).unwrap();
    assert_eq!(perf_lmdp_core::sampling::data_digest(&data), digest);
}

#[test]
fn missing_response_file_exits_one_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "files.toml",
        "\
driver = \"retrain-exact\"

[instance]
source = \"files\"

[instance.spec]
states = 2
actions = 2
discount = 0.9
start_dist = [0.5, 0.5]

[instance.response]
kind = \"constant\"
theta = \"theta.csv\"
mu = \"mu.csv\"
",
    );
    let out = dir.path().join("out");
    let o = run(&["run", "--config", path_arg(&cfg), "--out", path_arg(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("theta file not found"), "{}", err);
    assert!(!out.exists());
}

#[test]
fn bad_matrix_file_exits_one_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("theta.csv"), "# rows=4 cols=1 name=theta\n1\n0\n0\n").unwrap();
    fs::write(dir.path().join("mu.csv"), "# rows=2 cols=4 name=mu\n1,1,0,0\n0,0,1,1\n").unwrap();
    let cfg = write_config(
        dir.path(),
        "files.toml",
        "\
[instance]
source = \"files\"

[instance.spec]
states = 2
actions = 2
discount = 0.9
start_dist = [0.5, 0.5]

[instance.response]
kind = \"constant\"
theta = \"theta.csv\"
mu = \"mu.csv\"
",
    );
    let out = dir.path().join("out");
    let o = run(&["solve", "--config", path_arg(&cfg), "--out", path_arg(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("header says 4 rows, found 3"));
    assert!(!out.exists());
}

#[test]
fn files_instance_solves() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("theta.csv"), "# rows=2 cols=1 name=theta\n1\n0\n").unwrap();
    fs::write(dir.path().join("mu.csv"), "# rows=1 cols=2 name=mu\n1,1\n").unwrap();
    let cfg = write_config(
        dir.path(),
        "two.toml",
        "\
lambda = 1.0

[instance]
source = \"files\"

[instance.spec]
states = 1
actions = 2
discount = 0.5
start_dist = [1.0]

[instance.response]
kind = \"constant\"
theta = \"theta.csv\"
mu = \"mu.csv\"
",
    );
    let out = dir.path().join("out");
    let o = run(&["solve", "--config", path_arg(&cfg), "--out", path_arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d = csvio::read_vector(&out.join("d.csv")).unwrap();
    assert!((d[0] - 1.5).abs() < 1e-6 && (d[1] - 0.5).abs() < 1e-6, "{}", d);
}

#[test]
fn run_without_driver_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "empty.toml", "seed = 1\n");
    let o = run(&["run", "--config", path_arg(&cfg), "--out", path_arg(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn several_configs_get_their_own_directories() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.toml", "driver = \"certify\"\nlambda = 0.1\n");
    let b = write_config(dir.path(), "b.toml", "driver = \"solve\"\ninstance = { source = \"two-action\" }\nlambda = 1.0\n");
    let out = dir.path().join("out");
    let o = bin()
        .args(["run", "--config", path_arg(&a), "--config", path_arg(&b), "--out", path_arg(&out)])
        .env("PERF_LMDP_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("a/summary.csv").is_file());
    assert!(out.join("b/d.csv").is_file());
}

#[test]
fn exit_code_is_the_worst_over_configs() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), "good.toml", "driver = \"certify\"\nlambda = 0.1\n");
    let bad = write_config(dir.path(), "bad.toml", "driver = \"certify\"\nlambda = -2.0\n");
    let o = run(&["run", "--config", path_arg(&good), "--config", path_arg(&bad), "--out", path_arg(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn trace_line_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["retrain-exact", "--lambda", "0.1", "--rounds", "3", "--out", path_arg(&out), "--trace", "t/custom.jsonl"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("t/custom.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["d"].as_array().unwrap().len() == 4);
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
}

#[test]
fn empty_trace_is_a_valid_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = perf_lmdp::output::Manifest::new(&Default::default(), Driver::RetrainExact, vec![]);
    let run_dir = RunDir::create(dir.path(), &manifest).unwrap();
    let w = TraceWriter::create(&run_dir.path("trace.jsonl")).unwrap();
    assert_eq!(w.lines(), 0);
    drop(w);
    assert_eq!(fs::read(run_dir.path("trace.jsonl")).unwrap().len(), 0);
}

#[test]
fn output_names_cannot_escape() {
    let o = run(&["retrain-exact", "--summary", "../x.csv", "--out", "/tmp/never-created-perf-lmdp"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!Path::new("/tmp/never-created-perf-lmdp").exists());
}

#[test]
fn auto_lambda_without_certificate_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("features.csv"), "# rows=4 cols=1 name=features\n1\n1\n1\n1\n").unwrap();
    fs::write(dir.path().join("theta.csv"), "# rows=1 cols=1 name=theta\n0.5\n").unwrap();
    fs::write(dir.path().join("mu.csv"), "# rows=2 cols=1 name=mu\n0.5\n0.5\n").unwrap();
    fs::write(dir.path().join("at.csv"), "# rows=1 cols=4 name=a\n0,0,0,0\n").unwrap();
    fs::write(dir.path().join("am.csv"), "# rows=2 cols=4 name=a\n0,0,0,0\n0,0,0,0\n").unwrap();
    let cfg = write_config(
        dir.path(),
        "k0.toml",
        "\
[instance]
source = \"files\"
[instance.spec]
states = 2
actions = 2
discount = 0.9
start_dist = [0.5, 0.5]
features = \"features.csv\"
[instance.response]
kind = \"affine\"
eps_theta = 0.01
theta = \"theta.csv\"
mu = \"mu.csv\"
a_theta = \"at.csv\"
a_mu = \"am.csv\"
",
    );
    let out = dir.path().join("o");
    let o = run(&["retrain-exact", "--config", path_arg(&cfg), "--out", path_arg(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}
