use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SWEEP: &str = r#"
name = "cli-sweep"
protocol = "coinba"
trials = 2
seed = 5
sweep = [32, 64]
inputs = "random"

[adversary]
kind = "static_byzantine"
fraction = 0.2

[coinba]
degree = 8
rounds = 5
"#;

fn baxsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_baxsim")).args(args).output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn run_then_verify_traces() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("sweep.toml");
    fs::write(&sc, SWEEP).unwrap();
    let out = dir.path().join("out");
    let o = baxsim(&["run", p(&sc), "-o", p(&out), "--trace"]);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["report.json", "trials.csv", "scaling.csv", "traces/n64-trial00001.trace"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let o = baxsim(&["verify-traces", p(&out)]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("4 trials"), "{}", text(&o));

    let o = baxsim(&["compare-scaling", p(&out), "--csv", p(&dir.path().join("merged.csv"))]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("growth exponent"));
    let merged = fs::read_to_string(dir.path().join("merged.csv")).unwrap();
    assert_eq!(merged.lines().count(), 3);

    let trace = out.join("traces/n32-trial00000.trace");
    let mut body = fs::read_to_string(&trace).unwrap();
    let line = body.lines().find(|l| l.split(' ').nth(2) == Some("votes")).unwrap().to_string();
    let mut fields: Vec<String> = line.split(' ').map(String::from).collect();
    fields[5] = (fields[5].parse::<u64>().unwrap() + 1000).to_string();
    body = body.replacen(&line, &fields.join(" "), 1);
    fs::write(&trace, body).unwrap();
    let o = baxsim(&["verify-traces", p(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("MISMATCH"));
}

#[test]
fn flags_override_the_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("s.toml");
    fs::write(&sc, SWEEP).unwrap();
    let out = dir.path().join("o");
    let o = baxsim(&["run", p(&sc), "-o", p(&out), "--seed", "100", "--trials", "1"]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(out.join("trials.csv")).unwrap();
    let seeds: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(seeds, ["100", "100"]);
    assert!(!out.join("traces").exists());
}

#[test]
fn malformed_scenarios_report_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("bad.toml");
    fs::write(&sc, "name = \"x\"\nprotocol = \"aeba\"\nn = 64\n[params]\nq = \"four\"\n").unwrap();
    let o = baxsim(&["run", p(&sc), "-o", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let msg = text(&o);
    assert!(msg.contains("line 5") && msg.contains("params.q"), "{msg}");
    let o = baxsim(&["run", p(&dir.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn print_params_applies_overrides() {
    let o = baxsim(&["print-params", "-n", "256", "--set", "epsilon=0.04"]);
    assert!(o.status.success(), "{}", text(&o));
    let s = text(&o);
    assert!(s.contains("n = 256"), "{s}");
    assert!(s.contains("epsilon = 0.04"), "{s}");
    let o = baxsim(&["print-params", "-n", "256", "--set", "epsilon"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bundled_scenarios_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ba_core::harness::Scenario::load(&path).unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
