use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn robanom(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robanom"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = robanom(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn two_step_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["simulate", "--d", "30", "--n", "200", "--seed", "4", "--delta", "3", "--out", "y.csv", "--truth", "t.csv"]);
    ok(dir, &["fit", "--panel", "y.csv", "--subsets", "50", "--out-residuals", "r.csv", "--out-coeffs", "c.csv"]);
    ok(dir, &["scatter", "--method", "ogk", "--residuals", "r.csv", "--out-sigma", "s.csv", "--diag", "dg.csv"]);
    ok(dir, &["detect", "--method", "ogk", "--residuals", "r.csv", "--sigma", "dg.csv", "--out", "rep.csv"]);
    ok(dir, &["classify", "--report", "rep.csv", "--panel", "y.csv", "--residuals", "r.csv", "--subsets", "50", "--out", "cl.csv"]);
    ok(dir, &["cluster", "--residuals", "r.csv", "--coeffs", "c.csv", "--k", "3", "--restarts", "4", "--flags", "ogk=rep.csv", "--out", "lab.csv", "--report", "ov.csv", "--elbow", "el.csv", "--elbow-max", "4"]);

    assert_eq!(lines(&dir.join("s.csv")).len(), 30);
    let report = lines(&dir.join("rep.csv"));
    assert!(report[0].starts_with("series_id,date,score,level,kappa"));
    assert!(report.len() > 1);
    let truth = lines(&dir.join("t.csv"));
    let truth_date = truth[1].split(',').nth(2).unwrap().to_string();
    assert!(report.iter().any(|l| l.contains(&truth_date)), "no flag on the outlier date");
    assert!(lines(&dir.join("cl.csv"))[1..].iter().all(|l| !l.ends_with(",,")));
    assert_eq!(lines(&dir.join("lab.csv")).len(), 31);
    assert_eq!(lines(&dir.join("ov.csv")).len(), 4);
    assert_eq!(lines(&dir.join("el.csv")).len(), 5);
}

#[test]
fn forecast_and_realtime() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["simulate", "--d", "20", "--n", "150", "--seed", "2", "--out", "y.csv"]);
    ok(dir, &["fit", "--panel", "y.csv", "--subsets", "30", "--out-residuals", "r.csv"]);
    ok(dir, &["forecast-detect", "--residuals", "r.csv", "--model", "robhar", "--out", "f.csv"]);
    assert!(lines(&dir.join("f.csv")).len() > 1);

    ok(dir, &["realtime", "--fit", "y.csv", "--subsets", "30", "--state-out", "s0.json"]);
    let last = lines(&dir.join("y.csv")).last().unwrap().split(',').next().unwrap().to_string();
    assert_eq!(last, "2021-08-28");
    fs::write(dir.join("obs.csv"), "date,series_id,value\n2021-08-29,s0,1e6\n2021-08-29,s1,\n").unwrap();
    ok(dir, &["realtime", "--state-in", "s0.json", "--observations", "obs.csv", "--state-out", "s1.json", "--out", "flags.csv"]);
    let flags = lines(&dir.join("flags.csv"));
    assert_eq!(flags[0], "series_id,date,level,score,kappa");
    assert!(flags[1..].iter().any(|l| l.starts_with("s0,2021-08-29,raw")));
    assert_ne!(fs::read(dir.join("s0.json")).unwrap(), fs::read(dir.join("s1.json")).unwrap());
}

#[test]
fn pipeline_caches_on_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("run.toml"),
        "seed = 9\noutput_dir = \"out\"\n[simulate]\nd = 30\nn = 200\n[lte]\nn_subsets = 40\n",
    )
    .unwrap();
    let first = robanom(dir, &["pipeline", "--config", "run.toml"]);
    assert!(first.status.success());
    assert!(String::from_utf8_lossy(&first.stderr).contains("detect: Ran"));
    let second = robanom(dir, &["pipeline", "--config", "run.toml"]);
    let log = String::from_utf8_lossy(&second.stderr);
    assert!(!log.contains("Ran"), "{log}");
    assert!(dir.join("out/manifest.json").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(robanom(dir, &["detect", "--method", "bogus", "--residuals", "r.csv", "--out", "o.csv"]).status.code(), Some(1));
    assert_eq!(robanom(dir, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(robanom(dir, &["detect", "--method", "com", "--residuals", "missing.csv", "--out", "o.csv"]).status.code(), Some(2));
    fs::write(dir.join("bad.csv"), "date,a\n2021-01-01,1\n2021-01-03,2\n").unwrap();
    assert_eq!(robanom(dir, &["fit", "--panel", "bad.csv", "--out-residuals", "r.csv"]).status.code(), Some(2));
    assert_eq!(robanom(dir, &["--help"]).status.code(), Some(0));
}
