#![allow(dead_code)]

use ecmarket::scenario::ScenarioConfig;

/// One user buying from one generator for one hour. Optional RES block
/// appended verbatim.
pub fn toy_toml(user_p_max: f64, res: Option<(f64, f64)>) -> String {
    let mut s = format!(
        r#"
name = "toy"
hours = 1
[prices]
r_e = 0.06
r_c_sell = 0.002
[[cg]]
name = "G1"
c0 = 0.5
c1 = 0.04
c2 = 0.0004
p_max = 60.0
sigma = 0.5
[[user]]
name = "U1"
d1 = 0.09
d2 = -0.0004
p_max = {user_p_max}
psi0 = 100.0
"#
    );
    if let Some((forecast, sigma_rel)) = res {
        s.push_str(&format!("[[res]]\nname = \"PV1\"\nforecast = {forecast}\nsigma_rel = {sigma_rel}\n"));
    }
    s
}

pub fn toy(user_p_max: f64, res: Option<(f64, f64)>) -> ScenarioConfig {
    ScenarioConfig::from_toml_str(&toy_toml(user_p_max, res)).unwrap()
}

/// Two users, one generator, one PV unit, two hours.
pub fn small() -> ScenarioConfig {
    ScenarioConfig::from_toml_str(
        r#"
name = "small"
hours = 2
[prices]
r_e = 0.06
r_c_sell = 0.003
[[cg]]
name = "G1"
c0 = 0.5
c1 = 0.045
c2 = 0.0004
p_max = [60.0, 70.0]
sigma = 0.9
[[user]]
name = "U1"
d1 = 0.09
d2 = -0.0004
p_max = [30.0, 40.0]
p_min_fraction = 0.4
psi0 = 80.0
[[user]]
name = "U2"
d1 = 0.06
d2 = -0.0003
p_max = [25.0, 20.0]
p_min_fraction = 0.4
psi0 = 10.0
[[res]]
name = "PV1"
forecast = [15.0, 25.0]
sigma_rel = 0.1
"#,
    )
    .unwrap()
}
