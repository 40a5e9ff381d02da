use std::process::Command;

const RLAB: &str = env!("CARGO_BIN_EXE_rlab");

fn rlab(args: &[&str]) -> std::process::Output {
    Command::new(RLAB).args(args).output().unwrap()
}

#[test]
fn simulate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = rlab(&["simulate", "--preset", "two_arm", "--method", "linucb", "--horizon", "300", "--seed", "1,2", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["chart.svg", "summary.json", "run_meta.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn checkpoint_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("run.ckpt");
    let out = dir.path().join("out");
    let o = rlab(&[
        "simulate", "--method", "static_ab", "--horizon", "200", "--out", out.to_str().unwrap(),
        "--checkpoint", ck.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let o = rlab(&["simulate", "--resume", ck.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("step 200"));
}

#[test]
fn exit_codes_separate_config_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "horizon = 0\n").unwrap();
    assert_eq!(rlab(&["simulate", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint at all, just some bytes padding it out to length....").unwrap();
    assert_eq!(rlab(&["simulate", "--resume", garbage.to_str().unwrap()]).status.code(), Some(3));

    let tsv = dir.path().join("bad.tsv");
    std::fs::write(&tsv, "x\n").unwrap();
    let o = rlab(&["replay", "--input", tsv.to_str().unwrap(), "--strict-parse", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(rlab(&["replay", "--input", tsv.to_str().unwrap(), "--report-every", "0"]).status.code(), Some(2));
}

#[test]
fn report_rerenders_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("a.csv");
    std::fs::write(&csv, "step,impressions,clicks,ctr,ci_low,ci_high,oracle_ctr\n10,10,3,0.3,0.1,0.6,\n").unwrap();
    let out = dir.path().join("chart");
    let o = rlab(&["report", dir.path().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("chart.svg").exists());
}

#[test]
fn selftest_passes() {
    let o = rlab(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
}
