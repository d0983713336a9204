use dcmg::harness::{self, table::strip_footer, Command, Scenario};

fn body(rep: &harness::Report, name: &str) -> String {
    let t = rep.tables.iter().find(|t| t.name == name).unwrap();
    t.body().unwrap()
}

#[test]
fn train_dump_feeds_estimate() {
    let sc = Scenario::reference(3);
    let dir = tempfile::tempdir().unwrap();
    let train = harness::run(&Command::Train, &sc, 1).unwrap();
    harness::write_report(dir.path(), &Command::Train, &sc, &train).unwrap();
    assert!(dir.path().join("plan.json").exists());
    assert!(dir.path().join("manifest.json").exists());

    let direct = harness::run(&Command::Estimate { input: None }, &sc, 1).unwrap();
    let from_disk = harness::run(&Command::Estimate { input: Some(dir.path().to_path_buf()) }, &sc, 1).unwrap();
    assert_eq!(body(&direct, "theta_hat"), body(&from_disk, "theta_hat"));
    assert_eq!(body(&direct, "v_hat"), body(&from_disk, "v_hat"));
}

#[test]
fn written_tables_carry_provenance() {
    let sc = Scenario::reference(2);
    let dir = tempfile::tempdir().unwrap();
    let rep = harness::run(&Command::Solve, &sc, 1).unwrap();
    let files = harness::write_report(dir.path(), &Command::Solve, &sc, &rep).unwrap();
    let text = std::fs::read_to_string(&files[0]).unwrap();
    let footer = text.lines().last().unwrap();
    assert!(footer.starts_with(&format!("# scenario_sha256={}", sc.hash())));
    assert!(footer.contains("seed=1"));
    assert_eq!(strip_footer(&text), rep.tables[0].body().unwrap());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "solve");
    assert_eq!(manifest["scenario_sha256"], sc.hash());
}

#[test]
fn seed_changes_results_and_threads_do_not() {
    let mut sc = Scenario::reference(3);
    sc.trials = 6;
    sc.sweep.sqrt_pi = vec![8.0];
    let a = harness::run(&Command::SweepRrmse, &sc, 1).unwrap();
    let b = harness::run(&Command::SweepRrmse, &sc, 3).unwrap();
    assert_eq!(body(&a, "sweep_rrmse"), body(&b, "sweep_rrmse"));
    sc.seed = 2;
    let c = harness::run(&Command::SweepRrmse, &sc, 1).unwrap();
    assert_ne!(body(&a, "sweep_rrmse"), body(&c, "sweep_rrmse"));
}

#[test]
fn invalid_scenario_is_rejected_before_running() {
    let mut sc = Scenario::reference(3);
    sc.trials = 0;
    let err = harness::run(&Command::SweepRrmse, &sc, 1).unwrap_err();
    assert!(!err.is_numerical());
}
