//! Scenario configuration, the three reference experiments, Monte-Carlo
//! orchestration, RMSE aggregation, and CSV emission.

mod csv;
mod runner;

pub use csv::emit_csv;
pub use runner::{run_scenario, RunMetrics};

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::AgentKind;
use crate::control::Scheme;
use crate::error::{Error, Result};

/// Which layers cooperate: `Cc` full estimation and control cooperation,
/// `Nc` anchor-only estimation with the information-seeking controller,
/// `Cn` cooperative estimation with fixed random headings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Cc,
    Nc,
    Cn,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CC" => Ok(Mode::Cc),
            "NC" => Ok(Mode::Nc),
            "CN" => Ok(Mode::Cn),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected CC, NC, or CN)"
            ))),
        }
    }
}

pub fn parse_scheme(s: &str) -> Result<Scheme> {
    match s.to_ascii_lowercase().as_str() {
        "flooding" => Ok(Scheme::Flooding),
        "consensus" => Ok(Scheme::Consensus),
        other => Err(Error::Config(format!(
            "unknown scheme '{other}' (expected flooding or consensus)"
        ))),
    }
}

/// How a mobile CA picks its per-step displacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControllerKind {
    /// Gradient ascent on the information objective.
    InfoSeeking,
    /// One random heading per run, held for the whole run.
    FixedHeading,
}

/// One agent of a scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: u32,
    pub kind: AgentKind,
    /// Initial true state: `[x, y]` for CAs, `[x, y, vx, vy]` for targets.
    pub start: Vec<f64>,
    pub u_max: f64,
    /// Knee distance of this CA's measurement noise law.
    pub d0: f64,
    pub controller: ControllerKind,
}

/// Full description of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub mode: Mode,
    pub scheme: Scheme,
    pub agents: Vec<AgentSpec>,
    pub sigma0_2: f64,
    pub kappa: f64,
    pub sigma_q2: f64,
    pub target_sigma_q2: f64,
    /// Estimation-layer sample count.
    pub j_est: usize,
    /// Control-layer joint-state sample count (selected from `j_est`).
    pub j_ctl: usize,
    /// Future-measurement draws per joint sample.
    pub j_prime: usize,
    /// Message passing iterations `P`.
    pub bp_iters: usize,
    /// Average-consensus iterations `R`.
    pub consensus_iters: usize,
    pub n_steps: u32,
    pub n_runs: u32,
    pub seed: u64,
    pub prior_min: [f64; 2],
    pub prior_max: [f64; 2],
    pub target_vel_prior_mean: [f64; 2],
    pub target_vel_prior_var: f64,
    /// Run Monte-Carlo runs on the rayon pool; results are identical to the
    /// serial order either way.
    pub parallel: bool,
}

fn base_config(name: &str, mode: Mode) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        mode,
        scheme: Scheme::Flooding,
        agents: Vec::new(),
        sigma0_2: 50.0,
        kappa: 2.0,
        sigma_q2: 1e-3,
        target_sigma_q2: 1e-5,
        j_est: 1200,
        j_ctl: 400,
        j_prime: 5,
        bp_iters: 2,
        consensus_iters: 1,
        n_steps: 300,
        n_runs: 20,
        seed: 1,
        prior_min: [-200.0, -200.0],
        prior_max: [200.0, 200.0],
        target_vel_prior_mean: [0.0, 0.0],
        target_vel_prior_var: 0.1,
        parallel: true,
    }
}

fn anchor(id: u32, x: f64, y: f64) -> AgentSpec {
    AgentSpec {
        id,
        kind: AgentKind::AnchorCa,
        start: vec![x, y],
        u_max: 0.0,
        d0: 50.0,
        controller: ControllerKind::FixedHeading,
    }
}

fn mobile(id: u32, x: f64, y: f64, u_max: f64, d0: f64, controller: ControllerKind) -> AgentSpec {
    AgentSpec {
        id,
        kind: AgentKind::MobileCa,
        start: vec![x, y],
        u_max,
        d0,
        controller,
    }
}

/// Four mobile CAs self-localize from anchor distance measurements only;
/// CA 5 is uncontrolled.
pub fn noncoop(paper_scale: bool) -> ScenarioConfig {
    let mut cfg = base_config("noncoop", Mode::Nc);
    cfg.agents = vec![
        anchor(1, 0.0, 0.0),
        mobile(2, 100.0, 0.0, 1.0, 20.0, ControllerKind::InfoSeeking),
        mobile(3, 100.0, 0.0, 1.0, 50.0, ControllerKind::InfoSeeking),
        mobile(4, 100.0, 0.0, 1.0, 100.0, ControllerKind::InfoSeeking),
        mobile(5, 100.0, 0.0, 1.0, 100.0, ControllerKind::FixedHeading),
    ];
    if paper_scale {
        apply_paper_scale(&mut cfg);
    }
    cfg
}

/// Three mobile CAs with different speeds cooperate to self-localize.
pub fn coop(paper_scale: bool) -> ScenarioConfig {
    let mut cfg = base_config("coop", Mode::Cc);
    cfg.n_steps = 250;
    cfg.agents = vec![
        anchor(1, -60.0, 0.0),
        mobile(2, -50.0, 0.0, 1.0, 50.0, ControllerKind::InfoSeeking),
        mobile(3, 0.0, -50.0, 0.3, 50.0, ControllerKind::InfoSeeking),
        mobile(4, 0.0, 70.0, 0.1, 50.0, ControllerKind::InfoSeeking),
    ];
    if paper_scale {
        apply_paper_scale(&mut cfg);
    }
    cfg
}

/// Two mobile CAs cooperatively self-localize and track one
/// constant-velocity target.
pub fn coslat(paper_scale: bool) -> ScenarioConfig {
    let mut cfg = base_config("coslat", Mode::Cc);
    cfg.n_steps = 400;
    cfg.n_runs = 10;
    cfg.j_est = 1600;
    cfg.agents = vec![
        anchor(1, -50.0, 0.0),
        mobile(2, 20.0, 20.0, 1.0, 50.0, ControllerKind::InfoSeeking),
        mobile(3, -10.0, -10.0, 1.0, 50.0, ControllerKind::InfoSeeking),
        AgentSpec {
            id: 4,
            kind: AgentKind::Target,
            start: vec![50.0, 0.0, 0.05, 0.05],
            u_max: 0.0,
            d0: 50.0,
            controller: ControllerKind::FixedHeading,
        },
    ];
    if paper_scale {
        apply_paper_scale(&mut cfg);
        cfg.j_est = 120_000;
        cfg.j_ctl = 1200;
        cfg.j_prime = 5;
        cfg.n_runs = 100;
    }
    cfg
}

fn apply_paper_scale(cfg: &mut ScenarioConfig) {
    cfg.j_est = 3600;
    cfg.j_ctl = 1200;
    cfg.j_prime = 50;
    cfg.n_runs = 300;
}

pub fn by_name(name: &str, paper_scale: bool) -> Result<ScenarioConfig> {
    match name {
        "noncoop" => Ok(noncoop(paper_scale)),
        "coop" => Ok(coop(paper_scale)),
        "coslat" => Ok(coslat(paper_scale)),
        other => Err(Error::Config(format!(
            "unknown scenario '{other}' (expected noncoop, coop, or coslat)"
        ))),
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("j_est", self.j_est),
            ("j_ctl", self.j_ctl),
            ("j_prime", self.j_prime),
            ("bp_iters", self.bp_iters),
            ("n_steps", self.n_steps as usize),
            ("n_runs", self.n_runs as usize),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{field} must be positive")));
            }
        }
        if self.j_ctl > self.j_est {
            return Err(Error::Config(format!(
                "j_ctl ({}) must not exceed j_est ({})",
                self.j_ctl, self.j_est
            )));
        }
        if !(self.sigma0_2 > 0.0) {
            return Err(Error::Config("sigma0_2 must be positive".into()));
        }
        if self.kappa < 0.0 {
            return Err(Error::Config("kappa must be nonnegative".into()));
        }
        if !(self.prior_max[0] > self.prior_min[0] && self.prior_max[1] > self.prior_min[1]) {
            return Err(Error::Config("prior box is degenerate".into()));
        }
        if self.agents.is_empty() {
            return Err(Error::Config("agents must not be empty".into()));
        }
        let mut ids = BTreeSet::new();
        for a in &self.agents {
            if !ids.insert(a.id) {
                return Err(Error::Config(format!("duplicate agent id {}", a.id)));
            }
            let want_dim = match a.kind {
                AgentKind::Target => 4,
                _ => 2,
            };
            if a.start.len() != want_dim {
                return Err(Error::Config(format!(
                    "agent {}: start must have {} entries, got {}",
                    a.id,
                    want_dim,
                    a.start.len()
                )));
            }
            if a.kind == AgentKind::MobileCa {
                if !(a.u_max > 0.0) {
                    return Err(Error::Config(format!(
                        "agent {}: u_max must be positive for mobile CAs",
                        a.id
                    )));
                }
                if !(a.d0 > 0.0) {
                    return Err(Error::Config(format!("agent {}: d0 must be positive", a.id)));
                }
            }
        }
        if !self.agents.iter().any(|a| a.kind == AgentKind::MobileCa) {
            return Err(Error::Config("at least one mobile CA is required".into()));
        }
        Ok(())
    }
}

/// Key-value config file contents; every field but `scenario` is optional
/// and falls back to the named scenario's defaults.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scenario: String,
    mode: Option<String>,
    scheme: Option<String>,
    runs: Option<u32>,
    steps: Option<u32>,
    seed: Option<u64>,
    j_est: Option<i64>,
    j_ctl: Option<i64>,
    j_prime: Option<i64>,
    bp_iters: Option<usize>,
    consensus_iters: Option<usize>,
    paper_scale: Option<bool>,
    sigma0_2: Option<f64>,
    kappa: Option<f64>,
    sigma_q2: Option<f64>,
    target_sigma_q2: Option<f64>,
    parallel: Option<bool>,
}

/// Loads a scenario config from a TOML file, filling defaults from the
/// named scenario and validating the result.
pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)?;
    let raw: RawConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = by_name(&raw.scenario, raw.paper_scale.unwrap_or(false))?;
    if let Some(m) = raw.mode {
        cfg.mode = Mode::parse(&m)?;
    }
    if let Some(s) = raw.scheme {
        cfg.scheme = parse_scheme(&s)?;
    }
    if let Some(v) = raw.runs {
        cfg.n_runs = v;
    }
    if let Some(v) = raw.steps {
        cfg.n_steps = v;
    }
    if let Some(v) = raw.seed {
        cfg.seed = v;
    }
    for (field, raw_v, slot) in [
        ("j_est", raw.j_est, &mut cfg.j_est),
        ("j_ctl", raw.j_ctl, &mut cfg.j_ctl),
        ("j_prime", raw.j_prime, &mut cfg.j_prime),
    ] {
        if let Some(v) = raw_v {
            if v <= 0 {
                return Err(Error::Config(format!("{field} must be positive, got {v}")));
            }
            *slot = v as usize;
        }
    }
    if let Some(v) = raw.bp_iters {
        cfg.bp_iters = v;
    }
    if let Some(v) = raw.consensus_iters {
        cfg.consensus_iters = v;
    }
    if let Some(v) = raw.sigma0_2 {
        cfg.sigma0_2 = v;
    }
    if let Some(v) = raw.kappa {
        cfg.kappa = v;
    }
    if let Some(v) = raw.sigma_q2 {
        cfg.sigma_q2 = v;
    }
    if let Some(v) = raw.target_sigma_q2 {
        cfg.target_sigma_q2 = v;
    }
    if let Some(v) = raw.parallel {
        cfg.parallel = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use std::path::PathBuf;

    struct TempFile(PathBuf);

    impl Drop for TempFile {
        fn drop(&mut self) {
            let _ = std::fs::remove_file(&self.0);
        }
    }

    fn write_tmp(tag: &str, contents: &str) -> TempFile {
        let mut path = std::env::temp_dir();
        path.push(format!("locnet-cfg-{}-{tag}.toml", std::process::id()));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        TempFile(path)
    }

    #[test]
    fn minimal_file_fills_paper_defaults() {
        let tmp = write_tmp("minimal", "scenario = \"noncoop\"\n");
        let cfg = load_config(&tmp.0).unwrap();
        assert_eq!(cfg.sigma0_2, 50.0);
        assert_eq!(cfg.kappa, 2.0);
        assert_eq!(cfg.sigma_q2, 1e-3);
        assert_eq!(cfg.agents.len(), 5);
        assert_eq!(cfg.mode, Mode::Nc);
    }

    #[test]
    fn negative_sample_count_rejected() {
        let tmp = write_tmp("negj", "scenario = \"coop\"\nj_est = -5\n");
        let err = load_config(&tmp.0).unwrap_err();
        assert!(err.to_string().contains("j_est"), "{err}");
    }

    #[test]
    fn unknown_mode_lists_options() {
        let tmp = write_tmp("badmode", "scenario = \"coop\"\nmode = \"XX\"\n");
        let err = load_config(&tmp.0).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("CC") && msg.contains("NC") && msg.contains("CN"),
            "{msg}"
        );
    }

    #[test]
    fn parse_error_carries_location() {
        let tmp = write_tmp("syntax", "scenario = \"coop\"\nj_est = = 3\n");
        let err = load_config(&tmp.0).unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn scenario_defaults_validate() {
        for cfg in [noncoop(false), coop(false), coslat(false)] {
            cfg.validate().unwrap();
        }
        for cfg in [noncoop(true), coop(true), coslat(true)] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn jctl_must_not_exceed_jest() {
        let mut cfg = coop(false);
        cfg.j_ctl = cfg.j_est + 1;
        assert!(cfg.validate().is_err());
    }
}
