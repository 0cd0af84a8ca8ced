use std::path::PathBuf;

use ecmarket::scenario::{bundled_reference_case, load_scenario, ScenarioConfig, ScenarioError};

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn shipped_reference_matches_bundled_case() {
    let file = load_scenario(shipped("reference.toml")).unwrap();
    assert_eq!(file, bundled_reference_case());
    assert_eq!(load_scenario("ref").unwrap(), file);
}

#[test]
fn round_trip_through_toml() {
    let cfg = bundled_reference_case();
    let again = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
    assert_eq!(again, cfg);
}

fn invalid_path(text: &str) -> String {
    match ScenarioConfig::from_toml_str(text) {
        Err(ScenarioError::Invalid { path, .. }) => path,
        other => panic!("expected a field error, got {other:?}"),
    }
}

#[test]
fn field_errors_name_the_offending_path() {
    let base = bundled_reference_case().to_toml_string();
    let bad_sigma = base.replacen("sigma = 0.935", "sigma = -0.935", 1);
    assert_eq!(invalid_path(&bad_sigma), "cg[1].sigma");
    let bad_eps = base.replacen("epsilon = 0.05", "epsilon = 0.7", 1);
    assert_eq!(invalid_path(&bad_eps), "cg[0].epsilon");
    let bad_pen = base.replacen("gamma = 1.0", "gamma = 0.0", 1);
    assert_eq!(invalid_path(&bad_pen), "algorithm.penalties.gamma");
}

#[test]
fn unknown_fields_and_missing_files_are_rejected() {
    let text = bundled_reference_case().to_toml_string().replacen("flexibility = true", "flexibility = true\nflexiblity = 1", 1);
    assert!(matches!(ScenarioConfig::from_toml_str(&text), Err(ScenarioError::Parse(_))));
    assert!(matches!(load_scenario("/nonexistent/x.toml"), Err(ScenarioError::Io { .. })));
}

#[test]
fn constant_profiles_and_min_fraction_expand() {
    let cfg = ScenarioConfig::from_toml_str(
        r#"
name = "expand"
hours = 3
[prices]
r_e = 0.05
r_c_sell = 0.003
[[cg]]
name = "G"
c0 = 1.0
c1 = 0.04
c2 = 0.0003
p_max = 100.0
sigma = 0.8
[[user]]
name = "U"
d1 = 0.08
d2 = -0.0002
p_max = [10.0, 20.0, 30.0]
p_min_fraction = 0.5
psi0 = 50.0
"#,
    )
    .unwrap();
    assert_eq!(cfg.cgs[0].p_max, vec![100.0; 3]);
    assert_eq!(cfg.users[0].p_min, vec![5.0, 10.0, 15.0]);
    assert_eq!(cfg.prices.r_e, vec![0.05; 3]);
}
