use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
[field]
mode = "generate"
width = 5
height = 5
cell_size = 0.05
seed = 3

[gp]
prior_mean = 0.0
signal_variance = 1.0
noise_variance = 1e-5
length_scales = [0.2236, 0.2236]

[planner]
policies = ["epsilon_gpp", "anytime", "greedy_ucb"]
horizon = 2
epsilon = 1.0
reward = { kind = "ucb", params = { beta = 0.0 } }
budget = { mode = "capped", n_max = 12 }
stop = { max_nodes = 500 }

[run]
steps = 2
seeds = 1
"#;

fn gpp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpp"))
        .args(args)
        .env_remove("GPP_WORKERS")
        .output()
        .expect("spawn gpp")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn minimal_run_writes_two_rows_per_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let o = gpp(&["run", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for policy in ["epsilon_gpp", "anytime", "greedy_ucb"] {
        let text = fs::read_to_string(out.join(format!("results_{policy}.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "seed,step,x,y,z,reward,reward_normalized,cum_reward,max_reward,tree_nodes,wall_ms"
        );
        assert_eq!(lines.count(), 2, "{policy}");
        assert!(out.join(format!("summary_{policy}.csv")).exists());
    }
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["schema_version"], 1);
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
    assert!((meta["lambda"].as_f64().unwrap() - 1.0 / 6.0).abs() < 1e-15);
    assert!(meta["policies"][0]["max_n"].as_u64().unwrap() <= 12);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["complete"], true);
    assert!(!out.join("trace_anytime.csv").exists());
}

#[test]
fn rerun_is_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("seeds = 1", "seeds = 3"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(gpp(&["run", s(&cfg), "--out", s(&a)]).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_gpp"))
        .args(["run", s(&cfg), "--out", s(&b)])
        .env("GPP_WORKERS", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    for name in ["results_epsilon_gpp.csv", "results_anytime.csv", "summary_greedy_ucb.csv", "metadata.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn trace_flag_writes_anytime_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    assert!(gpp(&["run", s(&cfg), "--out", s(&out), "--trace"]).status.success());
    let text = fs::read_to_string(out.join("trace_anytime.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let mut count = 0;
    for row in rows.records() {
        let row = row.unwrap();
        let upper: f64 = row[4].parse().unwrap();
        let lower: f64 = row[5].parse().unwrap();
        assert!(lower <= upper);
        count += 1;
    }
    assert!(count >= 2);
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write_config(dir.path(), &CONFIG.replace("epsilon = 1.0", "epsilon = 1.0\nepslion = 2.0"));
    assert_eq!(gpp(&["run", s(&typo)]).status.code(), Some(2));
    let negative = write_config(dir.path(), &CONFIG.replace("epsilon = 1.0", "epsilon = -1.0"));
    assert_eq!(gpp(&["run", s(&negative)]).status.code(), Some(2));
    let missing = dir.path().join("nope.toml");
    assert_eq!(gpp(&["run", s(&missing)]).status.code(), Some(2));
}

#[test]
fn runtime_failure_keeps_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    // 4^12 paths exceeds the lookup-table enumeration limit.
    let body = CONFIG
        .replace("width = 5", "width = 40")
        .replace("height = 5", "height = 40")
        .replace("horizon = 2", "horizon = 12")
        .replace("steps = 2", "steps = 12")
        .replace("policies = [\"epsilon_gpp\", \"anytime\", \"greedy_ucb\"]", "policies = [\"greedy_ucb\", \"epsilon_gpp\"]");
    let cfg = write_config(dir.path(), &body);
    let out = dir.path().join("out");
    let o = gpp(&["run", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["complete"], false);
    assert_eq!(manifest["failures"][0]["policy"], "epsilon_gpp");
    let greedy = fs::read_to_string(out.join("results_greedy_ucb.csv")).unwrap();
    assert_eq!(greedy.lines().count(), 13);
}

#[test]
fn gen_field_writes_grid_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let field = dir.path().join("field.csv");
    let o = gpp(&["gen-field", s(&cfg), s(&field), "--seed", "2"]);
    assert!(o.status.success());
    let text = fs::read_to_string(&field).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.starts_with("5,5,0.05,"));
}

#[test]
fn verify_passes_on_fresh_checkout() {
    let o = gpp(&["verify", "--instances", "6"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 7);
    assert!(!stdout.contains("FAIL"));
}
