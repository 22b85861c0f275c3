use std::fs;
use std::path::PathBuf;

use ringsim::lotr::canonical_system;
use ringsim::scenario::{apply_config, parse_scenario, run_scenario, Scenario};
use ringsim::verifier::{verify, Requirement};

fn repo_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn load(rel: &str) -> Scenario {
    let path = repo_file(rel);
    let text = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    parse_scenario(&text).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn shipped_scenarios() -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(repo_file("scenarios"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".scn"))
        .collect();
    names.sort();
    assert!(!names.is_empty());
    names
}

#[test]
fn shipped_scenarios_pass_without_leaks() {
    for name in shipped_scenarios() {
        let report = run_scenario(&load(&format!("scenarios/{name}")));
        assert!(report.passed(), "{name}:\n{report}");
        assert_eq!(report.leak_count(), 0, "{name}:\n{report}");
    }
}

#[test]
fn reports_are_deterministic() {
    for name in shipped_scenarios() {
        let scn = load(&format!("scenarios/{name}"));
        assert_eq!(run_scenario(&scn).to_string(), run_scenario(&scn).to_string(), "{name}");
    }
}

fn failing(rel: &str) -> Vec<Requirement> {
    let (report, m, h) = apply_config(&load(rel));
    assert!(report.passed(), "{rel}:\n{report}");
    verify(&m, &h).verdicts.iter().filter(|v| !v.holds).map(|v| v.requirement).collect()
}

#[test]
fn config_verdicts() {
    assert!(failing("configs/canonical.cfg").is_empty());
    assert_eq!(failing("configs/broken_msr1.cfg"), vec![Requirement::Msr1]);
    assert_eq!(failing("configs/broken_p2.cfg"), vec![Requirement::CtSr, Requirement::P2]);
    assert_eq!(failing("configs/broken_p1.cfg"), vec![Requirement::CtSr, Requirement::P1, Requirement::P2]);
}

#[test]
fn failing_verdicts_carry_replayable_witnesses() {
    for rel in ["configs/broken_msr1.cfg", "configs/broken_p2.cfg", "configs/broken_p1.cfg"] {
        let (_, m, h) = apply_config(&load(rel));
        for v in verify(&m, &h).verdicts.iter().filter(|v| !v.holds) {
            let w = v.witness.as_ref().unwrap_or_else(|| panic!("{rel}: {v}"));
            assert!(!w.is_empty(), "{rel}: {v}");
            assert!(w.replay(&m), "{rel}: {v}");
        }
    }
}

#[test]
fn canonical_system_verifies() {
    let (m, h) = canonical_system();
    let report = verify(&m, &h);
    assert!(report.all_hold(), "{report}");
    assert!(report.all_detected(), "{report}");
    assert_eq!(report.mutations.len(), 6);
}
