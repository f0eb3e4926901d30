use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn misscon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_misscon")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("grid.toml");
    fs::write(
        &path,
        format!(
            r#"
scenarios = ["X1/Y1.1/M1.1"]
n = 500
replicates = 3
estimators = ["CC", "IPW"]
estimands = ["clogOR", "mlogOR", "mlogRR", "mRD"]
seed = 5
truth_draws = 100000
output = "{}"
{extra}
"#,
            dir.join("out").display()
        ),
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn simulate_summarize_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = misscon(&["simulate", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let records = fs::read_to_string(out.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 3 * 2 * 4);
    assert!(out.join("manifest.json").exists());

    let summary = dir.path().join("s.csv");
    let o = misscon(&[
        "summarize",
        "--records",
        out.join("records.csv").to_str().unwrap(),
        "--truth",
        out.join("truth.csv").to_str().unwrap(),
        "--out",
        summary.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&summary).unwrap(), fs::read_to_string(out.join("summary.csv")).unwrap());

    let rep = dir.path().join("report");
    let o = misscon(&["report", "--summary", summary.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(rep.join("report.txt").exists());
    assert!(rep.join("panel-mRD-oracle.svg").exists());
}

#[test]
fn seed_override_changes_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(misscon(&["simulate", "--config", &cfg, "--output", a.to_str().unwrap()]).status.success());
    assert!(misscon(&["simulate", "--config", &cfg, "--output", b.to_str().unwrap(), "--seed", "6", "--jobs", "2"]).status.success());
    assert_ne!(fs::read(a.join("records.csv")).unwrap(), fs::read(b.join("records.csv")).unwrap());
}

#[test]
fn invalid_configs_fail_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap().replace("\"IPW\"", "\"T-MTO\"")).unwrap();
    let o = misscon(&["simulate", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("T-MTO"));
    assert!(!dir.path().join("out").exists());

    fs::write(&cfg, fs::read_to_string(&cfg).unwrap().replace("X1/Y1.1/M1.1", "X1/Y7/M1.1")).unwrap();
    assert!(!misscon(&["simulate", "--config", &cfg]).status.success());
}

#[test]
fn truth_subcommand_prints_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = misscon(&["truth", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("X1/Y1.1 clogOR oracle 0.405465"));
    assert_eq!(text.lines().count(), 8);
}

#[test]
fn plasmode_generate_masks_phq_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.csv");
    let ideal = dir.path().join("i.csv");
    let o = misscon(&[
        "plasmode-generate",
        "--horizon",
        "1yr",
        "--n",
        "400",
        "--cohort-size",
        "1000",
        "--out",
        out.to_str().unwrap(),
        "--ideal",
        ideal.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let r = header.iter().position(|h| *h == "r").unwrap();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        for (h, c) in header.iter().zip(&cells) {
            let phq = *h == "phq8" || *h == "phq9";
            if c.is_empty() || *c == "NA" {
                assert!(phq && cells[r] == "0", "{h} missing in {line}");
            }
        }
    }
    assert!(!misscon(&["plasmode-generate", "--horizon", "2yr", "--n", "10", "--out", out.to_str().unwrap()]).status.success());
}
