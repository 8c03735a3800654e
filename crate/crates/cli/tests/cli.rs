use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const P1: &str = r#"{"testbed": {"n": 1, "degrees": [1, 1], "k": 4}}"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p
}

fn run(sub: &str, config: &Path, out: &Path, sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ckequant"));
    cmd.arg(sub).arg("--config").arg(config).arg("--out").arg(out);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().unwrap()
}

fn artifact(out: &Path, sub: &str, ext: &str) -> PathBuf {
    fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            name.starts_with(&format!("{sub}_")) && name.ends_with(ext)
        })
        .unwrap_or_else(|| panic!("no {sub} {ext} artifact in {}", out.display()))
}

fn error_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&o.stderr)))
}

#[test]
fn balance_converges() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), P1);
    let out = dir.path().join("out");
    let o = run("balance", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(artifact(&out, "balance", ".csv")).unwrap();
    assert!(csv.starts_with("iter,t,residual,ding_q,am_q_1,am_q_2,dist_step,sup_bergman_dev\n"));
    let last = csv.lines().last().unwrap();
    let residual: f64 = last.split(',').nth(2).unwrap().parse().unwrap();
    assert!(residual < 1e-10, "{residual}");
    let report: Value = serde_json::from_str(&fs::read_to_string(artifact(&out, "balance", ".json")).unwrap()).unwrap();
    assert_eq!(report["converged"], true);
    assert_eq!(report["grams"].as_array().unwrap().len(), 2);
}

#[test]
fn invalid_degrees_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"testbed": {"n": 1, "degrees": [1, 2], "k": 4}}"#);
    let o = run("balance", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["error"]["code"], "SPEC_INVALID");
    assert_eq!(e["error"]["exit"], 2);
}

#[test]
fn config_problems_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), P1);
    let out = dir.path().join("out");
    let o = run("balance", &cfg, &out, &["solver.tol_rez=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["code"], "SPEC_INVALID");
    let o = run("balance", &dir.path().join("missing.json"), &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["code"], "CONFIG_READ");
    let o = run("spectrum", &cfg, &out, &["testbed.n=2", "testbed.degrees=[1,2]"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn not_converged_exit_4_keeps_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), P1);
    let out = dir.path().join("out");
    let o = run("balance", &cfg, &out, &["solver.max_iter=2", "start.perturb=true"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_json(&o)["error"]["code"], "NOT_CONVERGED");
    let csv = fs::read_to_string(artifact(&out, "balance", ".csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn obstruction_chow_is_exactly_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), P1);
    let out = dir.path().join("out");
    let o = run("obstruction", &cfg, &out, &["obstruction.action.weights=[0,1]"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(artifact(&out, "obstruction", ".json")).unwrap()).unwrap();
    assert_eq!(r["chow"], "0/1");
    assert!(r["F_c"].as_array().unwrap().iter().all(|x| x == "0/1"));
    assert!(r["a"].is_array() && r["e"].is_array() && r["fut_c"].is_number());
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), P1);
    for sub in ["balance", "flow", "spectrum"] {
        let (a, b) = (dir.path().join(format!("{sub}_a")), dir.path().join(format!("{sub}_b")));
        let sets = ["start.perturb=true", "seed=7", "continuum.n=128"];
        assert_eq!(run(sub, &cfg, &a, &sets).status.code(), Some(0));
        assert_eq!(run(sub, &cfg, &b, &sets).status.code(), Some(0));
        let (pa, pb) = (artifact(&a, sub, ".csv"), artifact(&b, sub, ".csv"));
        assert_eq!(pa.file_name(), pb.file_name());
        assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
    }
    // A different seed is a different experiment.
    let c = dir.path().join("c");
    run("balance", &cfg, &c, &["start.perturb=true", "seed=8", "continuum.n=128"]);
    assert_ne!(
        fs::read(artifact(&c, "balance", ".csv")).unwrap(),
        fs::read(artifact(&dir.path().join("balance_a"), "balance", ".csv")).unwrap()
    );
}

#[test]
fn manifest_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), P1);
    let first = dir.path().join("first");
    assert_eq!(run("flow", &cfg, &first, &["start.perturb=true", "seed=3", "solver.step_h=0.1"]).status.code(), Some(0));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "flow");
    let replay = dir.path().join("replay.json");
    fs::write(&replay, serde_json::to_string(&manifest["config"]).unwrap()).unwrap();
    let second = dir.path().join("second");
    assert_eq!(run("flow", &replay, &second, &[]).status.code(), Some(0));
    let (a, b) = (artifact(&first, "flow", ".csv"), artifact(&second, "flow", ".csv"));
    assert_eq!(a.file_name(), b.file_name());
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    let m2: Value = serde_json::from_str(&fs::read_to_string(second.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m2["hash"], manifest["hash"]);
}

#[test]
fn balanced_grams_restart_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), P1);
    let out = dir.path().join("out");
    assert_eq!(run("balance", &cfg, &out, &["start.perturb=true"]).status.code(), Some(0));
    let r: Value = serde_json::from_str(&fs::read_to_string(artifact(&out, "balance", ".json")).unwrap()).unwrap();
    let grams = dir.path().join("grams.json");
    fs::write(&grams, serde_json::to_string(&r["grams"]).unwrap()).unwrap();
    let again = dir.path().join("again");
    let set = format!("start.grams_file={}", grams.display());
    let o = run("balance", &cfg, &again, &[&set]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(artifact(&again, "balance", ".csv")).unwrap();
    assert!(csv.lines().count() <= 3, "{csv}");

    fs::write(&grams, "[{\"basis_tag\": \"P1-deg4\", \"dim\": 2, \"entries\": [1.0, 1.0]}]").unwrap();
    let o = run("balance", &cfg, &again, &[&set]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn continuum_subcommands_write_declared_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), P1);
    let out = dir.path().join("out");
    let sets = ["continuum.n=128", "cflow.t_end=0.5", "bergman.k_list=[4,8]"];
    for (sub, header) in [
        ("spectrum", "eig_index,eigenvalue"),
        ("cflow", "t,sup_phi,ding,mass_err"),
        ("bergman", "k,factor,sup_bar_dev,sup_leading_dev,b_over_kn"),
    ] {
        let o = run(sub, &cfg, &out, &sets);
        assert_eq!(o.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
        let csv = fs::read_to_string(artifact(&out, sub, ".csv")).unwrap();
        assert_eq!(csv.lines().next(), Some(header));
    }
    let spec: Value = serde_json::from_str(&fs::read_to_string(artifact(&out, "spectrum", ".json")).unwrap()).unwrap();
    assert_eq!(spec["zero_count"], 3);
}
