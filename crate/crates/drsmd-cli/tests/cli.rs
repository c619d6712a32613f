use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drsmd::estimators::drsmd_estimate;
use drsmd::kernel::{kernel_matrix, KernelSpec};
use drsmd::model::{build_design, Dataset, ModelSpec};
use drsmd::nuisance::{fit_orthogonal_correction, robinson_residualize, LearnerConfig};
use drsmd::simulation::{generate_benchmark, replication_rng, DgpConfig};
use serde_json::Value;

fn drsmd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drsmd"))
        .args(args)
        .current_dir(dir)
        .env_remove("DRSMD_THREADS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const MODEL: &str = r#"
[model]
outcome = "y"
treatment = "W"
interaction_covariates = ["X1"]
controls = ["X1", "X2", "X3"]
instruments = ["Z1"]
"#;

fn benchmark_csv(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let sample = generate_benchmark(&DgpConfig::benchmark(n, 3), &mut replication_rng(seed, 0)).unwrap();
    let data = sample.to_dataset();
    let path = dir.join("data.csv");
    let mut w = csv::Writer::from_path(&path).unwrap();
    w.write_record(data.names()).unwrap();
    let cols: Vec<&[f64]> = data.columns().map(|(_, c)| c).collect();
    for i in 0..data.n() {
        w.write_record(cols.iter().map(|c| c[i].to_string())).unwrap();
    }
    w.flush().unwrap();
    path
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn estimate_table_has_two_finite_rows() {
    let dir = tempfile::tempdir().unwrap();
    benchmark_csv(dir.path(), 600, 1);
    write(dir.path(), "c.toml", &format!("seed = 3\ninput = \"data.csv\"\n{MODEL}"));
    let out = drsmd(&["estimate", "--config", "c.toml", "--output", "r.txt"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("r.txt")).unwrap();
    assert!(text.contains("W:X1") && text.contains("verdict"));
    let v = json(&dir.path().join("r.json"));
    let rows = v["coefficients"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let se = r["se"].as_f64().unwrap();
        assert!(se.is_finite() && se > 0.0);
    }
}

#[test]
fn homogeneous_specification_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    benchmark_csv(dir.path(), 400, 2);
    let model = MODEL.replace("interaction_covariates = [\"X1\"]\n", "");
    write(dir.path(), "c.toml", &format!("input = \"data.csv\"\n{model}"));
    let out = drsmd(&["estimate", "--config", "c.toml", "--format", "json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["coefficients"].as_array().unwrap().len(), 1);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    benchmark_csv(dir.path(), 500, 3);
    write(dir.path(), "c.toml", &format!("seed = 9\ninput = \"data.csv\"\n{MODEL}"));
    for name in ["a.csv", "b.csv"] {
        let out = drsmd(&["estimate", "--config", "c.toml", "--format", "csv", "--output", name], dir.path());
        assert!(out.status.success());
    }
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a.json"), read("b.json"));
}

#[test]
fn csv_round_trip_matches_in_memory_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let n = 500;
    let seed = 4;
    benchmark_csv(dir.path(), n, seed);
    write(
        dir.path(),
        "c.toml",
        &format!("seed = 11\ninput = \"data.csv\"\n{MODEL}\n[kernel]\nstandardize_instruments = false\n"),
    );
    let out = drsmd(&["estimate", "--config", "c.toml", "--format", "json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();

    let sample = generate_benchmark(&DgpConfig::benchmark(n, 3), &mut replication_rng(seed, 0)).unwrap();
    let data: Dataset = sample.to_dataset();
    let spec: ModelSpec = toml::from_str::<toml::Table>(MODEL).unwrap()["model"].clone().try_into().unwrap();
    let design = build_design(&data, &spec).unwrap();
    let learner = LearnerConfig::lasso(5).with_seed(11);
    let fits = robinson_residualize(&design, &learner).unwrap();
    let k = kernel_matrix(&design.z, &KernelSpec::unit(false)).unwrap();
    let corr = fit_orthogonal_correction(&fits, &k, &design.x, &learner).unwrap();
    let direct = drsmd_estimate(&fits, &corr, &k).unwrap();

    let rows = v["coefficients"].as_array().unwrap();
    for (k, r) in rows.iter().enumerate() {
        assert!((r["estimate"].as_f64().unwrap() - direct.theta[k]).abs() < 1e-12);
        assert!((r["se"].as_f64().unwrap() - direct.se[k]).abs() < 1e-12);
    }
}

#[test]
fn catalog_model1_is_flagged_for_three_seeds() {
    let dir = tempfile::tempdir().unwrap();
    for seed in ["1", "2", "3"] {
        let out = drsmd(&["identify", "--catalog", "model1", "--seed", seed, "--format", "json"], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        let verdict = v["identification"][0]["verdict"].as_str().unwrap().to_string();
        assert!(verdict == "NearSingular" || verdict == "Singular", "{verdict}");
    }
}

#[test]
fn healthy_scalar_data_is_identified() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = String::from("y,W,Z,X\n");
    let mut s: u64 = 17;
    let mut unif = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    for _ in 0..300 {
        let (z, x, e) = (unif(), unif(), unif());
        let w = z + 0.3 * x + 0.2 * e;
        body.push_str(&format!("{},{w},{z},{x}\n", 1.5 * w + x + e));
    }
    write(dir.path(), "d.csv", &body);
    write(
        dir.path(),
        "c.toml",
        "input = \"d.csv\"\n[model]\noutcome = \"y\"\ntreatment = \"W\"\ncontrols = [\"X\"]\ninstruments = [\"Z\"]\n[[estimators]]\ntag = \"SMD\"\n",
    );
    let out = drsmd(&["identify", "--config", "c.toml", "--format", "json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["identification"][0]["verdict"], "Identified");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(drsmd(&["estimate", "--config", "missing.toml"], d).status.code(), Some(2));
    write(d, "bad.toml", "seeed = 1\n");
    assert_eq!(drsmd(&["simulate", "--config", "bad.toml"], d).status.code(), Some(2));
    write(d, "tag.toml", &format!("input = \"x.csv\"\n{MODEL}\n[[estimators]]\ntag = \"forest\"\n"));
    write(d, "x.csv", "y,W,X1,X2,X3,Z1\n1,2,3,4,5,6\n2,1,3,4,5,7\n3,2,1,4,5,8\n4,5,6,7,8,9\n");
    assert_eq!(drsmd(&["estimate", "--config", "tag.toml"], d).status.code(), Some(2));

    write(d, "text.csv", "y,W,X1,X2,X3,Z1\n1,2,3,4,5,oops\n");
    write(d, "c.toml", &format!("input = \"text.csv\"\n{MODEL}"));
    assert_eq!(drsmd(&["estimate", "--config", "c.toml"], d).status.code(), Some(3));

    // W * X1 duplicates W when X1 is identically one.
    let mut body = String::from("y,W,X1,X2,X3,Z1\n");
    for i in 0..60 {
        let z = (i % 2) as f64;
        let w = z + ((i * 7) % 5) as f64 * 0.1;
        body.push_str(&format!("{},{w},1,{},{},{z}\n", 2.0 * w + (i % 3) as f64, (i % 4) as f64, ((i * 3) % 7) as f64));
    }
    write(d, "dup.csv", &body);
    write(d, "dup.toml", &format!("input = \"dup.csv\"\n{MODEL}\n[[estimators]]\ntag = \"SMD\"\n"));
    let out = drsmd(&["estimate", "--config", "dup.toml"], d);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn thread_flag_wins_over_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, args: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_drsmd"));
        c.args(args).current_dir(dir.path()).env_remove("DRSMD_THREADS");
        if let Some(v) = env {
            c.env("DRSMD_THREADS", v);
        }
        c.output().unwrap()
    };
    let base = ["identify", "--catalog", "model1", "--format", "json"];
    assert_eq!(run(Some("many"), &base).status.code(), Some(2));
    let mut flagged = base.to_vec();
    flagged.extend(["--threads", "1"]);
    assert!(run(Some("many"), &flagged).status.success());
    assert!(run(Some("2"), &base).status.success());
}

#[test]
fn simulation_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "s.toml",
        "seed = 21\n[simulation]\nn = 300\nq_x = 2\n[[estimators]]\ntag = \"D-RSMD\"\ninstruments = [\"Z1\"]\n[[estimators]]\ntag = \"R-GMM\"\ninstruments = [\"Z1, Z1X1\"]\n",
    );
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = drsmd(&["simulate", "--config", "s.toml", "--reps", "4", "--threads", threads, "--format", "csv"], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(out.stdout);
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs.pop().unwrap()).unwrap();
    assert_eq!(text.lines().count(), 5);
}
