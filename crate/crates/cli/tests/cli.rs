use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hhsim(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hhsim"))
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("hhsim runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn version_and_help() {
    let dir = tempfile::tempdir().unwrap();
    let o = hhsim(dir.path(), &["--version"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains(env!("CARGO_PKG_VERSION")));
    assert_eq!(hhsim(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(hhsim(dir.path(), &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn stages_in_order_and_grouped_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for args in [
        &["--seed", "4", "synth", "--households", "30"][..],
        &["ingest"],
        &["typology"],
        &["calibrate"],
        &["baseline"],
        &["simulate"],
        &["report", "--group-by", "specialization"],
    ] {
        let o = hhsim(out, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    }
    let reports = out.join("reports/specialization");
    for name in ["baseline", "Abol", "Univ", "Cibl"] {
        let table = fs::read_to_string(reports.join(format!("{name}_indicators.csv"))).unwrap();
        assert!(table.lines().next().unwrap().starts_with("group_by,group,"), "{table}");
    }
    let cb = fs::read_to_string(reports.join("cost_benefit.json")).unwrap();
    assert!(cb.contains("Univ"));
}

#[test]
fn calibrate_before_ingest_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(hhsim(out, &["synth", "--households", "10"]).status.code(), Some(0));
    let o = hhsim(out, &["calibrate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run ingest first"), "{}", stderr(&o));
}

#[test]
fn missing_survey_column_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(hhsim(out, &["synth", "--households", "10"]).status.code(), Some(0));
    let plots = out.join("survey/plots.csv");
    let text = fs::read_to_string(&plots).unwrap();
    let col = text.lines().next().unwrap().split(',').position(|h| h == "area_ha").unwrap();
    let trimmed: Vec<String> = text
        .lines()
        .map(|l| {
            let mut cells: Vec<&str> = l.split(',').collect();
            cells.remove(col);
            cells.join(",")
        })
        .collect();
    fs::write(&plots, trimmed.join("\n") + "\n").unwrap();
    let o = hhsim(out, &["ingest"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("area_ha"), "{}", stderr(&o));
}

#[test]
fn bad_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    fs::write(&config, "practice_clusters = 0\n").unwrap();
    let o = hhsim(dir.path(), &["--config", config.to_str().unwrap(), "synth"]);
    assert_eq!(o.status.code(), Some(1));
    fs::write(&config, "no_such_key = 1\n").unwrap();
    let o = hhsim(dir.path(), &["--config", config.to_str().unwrap(), "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(hhsim(dir.path(), &["--jobs", "0", "synth"]).status.code(), Some(1));
}
