use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
seed = 5
n = 4
d = 12
steps = 300
runs = 2
test_size = 50

[methods.GD]
family = "identity"

[methods.AM1]
family = "diag-adagrad"
window = "unbounded"
eta = 0.5
"#;

fn precond(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_precond"))
        .args(args)
        .current_dir(dir)
        .env_remove("PRECOND_SEED")
        .output()
        .expect("binary runs")
}

fn with_config(text: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("run.toml"), text).unwrap();
    dir
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn bound_curve_samples_every_t() {
    let dir = TempDir::new().unwrap();
    let out = precond(
        &[
            "bound-curve",
            "--a",
            "1",
            "--b",
            "0.7",
            "--c",
            "0.1",
            "--alpha",
            "1.5",
            "--beta",
            "1",
            "--T",
            "1000",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("o/bound_curve.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config-sha256: "));
    assert_eq!(lines.next().unwrap(), "# seed: 0");
    assert_eq!(lines.next().unwrap(), "T,value");
    let rows: Vec<(u64, f64)> = lines
        .map(|l| {
            let (t, v) = l.split_once(',').unwrap();
            (t.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 1001);
    assert_eq!(rows[0].0, 0);
    assert!((rows[0].1 - (1.0 + 0.7 * (1.0 - 0.1 / 1.5))).abs() < 1e-12);
    // Saturates at a from above.
    assert!(rows.windows(2).all(|w| w[1].1 <= w[0].1));
    assert!(rows[1000].1 > 1.0 && rows[1000].1 < 1.001);
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let out = precond(&["simulate", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = precond(&[], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let out = precond(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));

    let out = precond(
        &["bound-curve", "--a", "1", "--b", "1", "--c", "1", "--alpha", "0.5", "--beta", "0.5", "--T", "3"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_configs_exit_one() {
    for text in [
        "seed = ",
        "sede = 4",
        "[methods.X]\nfamily = \"adamax\"",
        "[methods.X]\nfamily = \"identity\"\neta = -1.0",
        "[methods.X]\nfamily = \"identity\"\nwindow = \"0\"",
        "steps = 0",
        "init = \"uniform\"",
        "data_x = \"missing.csv\"",
    ] {
        let dir = with_config(text);
        let out = precond(&["simulate", "--config", "run.toml", "--out", "o"], dir.path());
        assert_eq!(out.status.code(), Some(1), "config {text:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!String::from_utf8_lossy(&out.stderr).contains("panicked"));
    }
    let dir = TempDir::new().unwrap();
    let out = precond(&["simulate", "--config", "absent.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergence_exits_two_with_json_record() {
    let dir = with_config("n = 4\nd = 12\nsteps = 500\n[methods.HOT]\nfamily = \"identity\"\neta_scale = 50.0\n");
    let out = precond(&["simulate", "--config", "run.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let rec: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(rec["error"], "numerical");
    assert_eq!(rec["kind"], "Diverged");
    assert_eq!(rec["method"], "HOT");
}

#[test]
fn simulate_writes_trajectories_and_summary() {
    let dir = with_config(SMALL);
    let out = precond(&["simulate", "--config", "run.toml", "--out", "runs"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = dir.path().join("runs");
    for name in ["trajectory_GD.csv", "trajectory_AM1.csv"] {
        let text = fs::read_to_string(runs.join(name)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# config-sha256: ") && lines[0].len() == "# config-sha256: ".len() + 64);
        assert_eq!(lines[1], "# seed: 5");
        assert_eq!(lines[2], "t,loss,e1,out_drift,d2_norm");
        assert_eq!(lines.len(), 3 + 301);
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(runs.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 5);
    assert_eq!(summary["methods"].as_array().unwrap().len(), 2);
    // GD started at zero never leaves the row space.
    let gd = summary["methods"].as_array().unwrap().iter().find(|m| m["method"] == "GD").unwrap();
    assert!(gd["final_out_drift"].as_f64().unwrap() < 1e-10);
}

#[test]
fn reruns_are_byte_identical() {
    let commands: [&[&str]; 7] = [
        &["simulate"],
        &["closed-form-check"],
        &["fixed-point"],
        &["table-gaussian"],
        &["table-margin"],
        &["decay"],
        &["sweep"],
    ];
    let dir = with_config(&format!("etas = [0.01, 0.1]\nmomenta = [0.0, 0.5]\n{SMALL}"));
    for cmd in commands {
        let mut outputs = Vec::new();
        for (run, jobs) in [(0, "1"), (1, "3")] {
            let out_dir = format!("out{run}");
            let mut args = cmd.to_vec();
            args.extend(["--config", "run.toml", "--out", &out_dir, "--jobs", jobs]);
            let out = precond(&args, dir.path());
            assert!(out.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&out.stderr));
            outputs.push(read_dir_sorted(&dir.path().join(&out_dir)));
            fs::remove_dir_all(dir.path().join(&out_dir)).unwrap();
        }
        assert!(!outputs[0].is_empty());
        assert_eq!(outputs[0], outputs[1], "{cmd:?} differs between reruns");
        for (name, bytes) in &outputs[0] {
            let text = String::from_utf8_lossy(bytes);
            assert!(
                (text.contains("config-sha256") || text.contains("config_sha256")) && text.contains("seed"),
                "{name} lacks a header"
            );
        }
    }
}

#[test]
fn seed_precedence() {
    let dir = with_config(SMALL);
    let run = |extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_precond"));
        cmd.args(["fixed-point", "--config", "run.toml", "--out", "o"]).args(extra).current_dir(dir.path());
        match env {
            Some(v) => cmd.env("PRECOND_SEED", v),
            None => cmd.env_remove("PRECOND_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        fs::read_to_string(dir.path().join("o/fixed_point.csv")).unwrap()
    };
    assert!(run(&[], None).contains("# seed: 5\n"));
    let from_env = run(&[], Some("11"));
    assert!(from_env.contains("# seed: 11\n"));
    let from_flag = run(&["--seed", "12"], Some("11"));
    assert!(from_flag.contains("# seed: 12\n"));
    assert_ne!(from_env, from_flag);

    let mut cmd = Command::new(env!("CARGO_BIN_EXE_precond"));
    let out =
        cmd.args(["fixed-point", "--out", "o"]).env("PRECOND_SEED", "x").current_dir(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn reads_data_from_csv() {
    let dir = with_config("data_x = \"x.csv\"\ndata_y = \"y.csv\"\nsteps = 400\n[methods.GD]\nfamily = \"identity\"\n");
    fs::write(dir.path().join("x.csv"), "1,0,0,1\n0,1,1,0\n").unwrap();
    fs::write(dir.path().join("y.csv"), "2\n-1\n").unwrap();
    let out = precond(&["fixed-point", "--config", "run.toml", "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("o/fixed_point.json")).unwrap()).unwrap();
    assert_eq!(report["rank"], 2);
    assert!(report["methods"][0]["in_span_error"].as_f64().unwrap() < 1e-10);
}
