//! Experiment configuration files.
//!
//! A config is a TOML document; relative paths inside it resolve against the
//! directory holding the file. Every section has defaults, so an empty file
//! runs the built-in reference instance.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Driver {
    Certify,
    Solve,
    RetrainExact,
    RetrainFinite,
    PrimalDual,
    Stackelberg,
    Diagnose,
}

impl Driver {
    pub fn as_str(&self) -> &'static str {
        match self {
            Driver::Certify => "certify",
            Driver::Solve => "solve",
            Driver::RetrainExact => "retrain-exact",
            Driver::RetrainFinite => "retrain-finite",
            Driver::PrimalDual => "primal-dual",
            Driver::Stackelberg => "stackelberg",
            Driver::Diagnose => "diagnose",
        }
    }
}

impl fmt::Display for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoWord {
    #[serde(rename = "auto")]
    Auto,
}

/// `lambda = 0.1` or `lambda = "auto"` (`1.25 λ_min`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSetting {
    Fixed(f64),
    Auto(AutoWord),
}

impl Default for LambdaSetting {
    fn default() -> Self {
        LambdaSetting::Auto(AutoWord::Auto)
    }
}

impl LambdaSetting {
    pub fn fixed(&self) -> Option<f64> {
        match self {
            LambdaSetting::Fixed(x) => Some(*x),
            LambdaSetting::Auto(_) => None,
        }
    }

    /// Parses a command-line value.
    pub fn parse(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(LambdaSetting::Auto(AutoWord::Auto));
        }
        s.parse::<f64>()
            .map(LambdaSetting::Fixed)
            .map_err(|_| format!("expected a number or \"auto\", got {:?}", s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomInstance {
    pub states: usize,
    pub actions: usize,
    pub discount: f64,
    pub eps_theta: f64,
    pub eps_mu: f64,
    #[serde(default = "yes")]
    pub tabular: bool,
    #[serde(default = "affine_kind")]
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecTable {
    pub states: usize,
    pub actions: usize,
    pub discount: f64,
    pub start_dist: Vec<f64>,
    /// `S·A × D` feature matrix; identity features when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseTable {
    pub kind: String,
    #[serde(default)]
    pub eps_theta: f64,
    #[serde(default)]
    pub eps_mu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_theta: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_mu: Option<PathBuf>,
    /// Game file for `kind = "stackelberg"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub game: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileInstance {
    pub spec: SpecTable,
    pub response: ResponseTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameInstance {
    pub game: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum InstanceConfig {
    /// Tabular `S = A = 2`, `γ = 0.9`, `ε_θ = 0.01`, `ε_μ = 0`.
    Reference,
    /// `S = 1`, `A = 2`, `γ = 0.5`, `θ = (1, 0)`, constant response.
    TwoAction,
    Random(RandomInstance),
    Files(FileInstance),
    /// Leader's view of a Stackelberg game with tabular features.
    Game(GameInstance),
}

impl Default for InstanceConfig {
    fn default() -> Self {
        InstanceConfig::Reference
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainSection {
    pub max_rounds: usize,
    pub stop_delta: f64,
    /// Track the distance to a high-accuracy stable point.
    pub reference: bool,
}

impl Default for RetrainSection {
    fn default() -> Self {
        RetrainSection {
            max_rounds: 100,
            stop_delta: 1e-10,
            reference: true,
        }
    }
}

/// `m_schedule = 20000`, `[5000, 10000]`, `"infinite"` or a file with one
/// size per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MSetting {
    Size(usize),
    List(Vec<usize>),
    Word(String),
}

impl MSetting {
    pub fn parse(s: &str) -> MSetting {
        match s.parse::<usize>() {
            Ok(m) => MSetting::Size(m),
            Err(_) => MSetting::Word(s.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    ExactSaddle,
    PrimalDual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaKind {
    Exact,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiniteSection {
    pub m_schedule: MSetting,
    pub solver: SolverKind,
    pub sigma: SigmaKind,
    pub ridge: f64,
    pub reward_noise: f64,
    pub save_datasets: bool,
    pub stability_gap: bool,
}

impl Default for FiniteSection {
    fn default() -> Self {
        FiniteSection {
            m_schedule: MSetting::Size(20_000),
            solver: SolverKind::ExactSaddle,
            sigma: SigmaKind::Exact,
            ridge: 1e-6,
            reward_noise: 0.0,
            save_datasets: false,
            stability_gap: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdSection {
    pub t_inner: usize,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_omega: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_pi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_cov: Option<f64>,
    /// Dataset CSV; otherwise data is drawn at the uniform policy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Sample size when no dataset is given; enumerated exactly when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
}

impl Default for PdSection {
    fn default() -> Self {
        PdSection {
            t_inner: 200,
            k: 50,
            eta_omega: None,
            eta_pi: None,
            b_cov: None,
            dataset: None,
            m: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    pub tol: f64,
    /// Directory with `theta.csv` and `mu.csv` replacing the base parameters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
}

impl Default for SolveSection {
    fn default() -> Self {
        SolveSection { tol: 1e-9, params: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackelbergSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub game: Option<PathBuf>,
    /// Random leader-policy pairs for the sensitivity check.
    pub pairs: usize,
    /// Random kernel pairs for the occupancy perturbation check.
    pub kernel_pairs: usize,
    /// Also run exact retraining on the induced response map.
    pub retrain: bool,
}

impl Default for StackelbergSection {
    fn default() -> Self {
        StackelbergSection {
            game: None,
            pairs: 200,
            kernel_pairs: 100,
            retrain: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub probes: usize,
    pub grid: f64,
    pub brute_force: bool,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        DiagnoseSection {
            probes: 200,
            grid: 0.05,
            brute_force: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub driver: Option<Driver>,
    pub seed: u64,
    pub lambda: LambdaSetting,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub instance: InstanceConfig,
    pub retrain: RetrainSection,
    pub finite: FiniteSection,
    pub pd: PdSection,
    pub solve: SolveSection,
    pub stackelberg: StackelbergSection,
    pub diagnose: DiagnoseSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn yes() -> bool {
    true
}

fn affine_kind() -> String {
    String::from("affine")
}

/// 1-based line of the first `key = …` assignment in `source`.
fn line_of(source: &str, key: &str) -> Option<usize> {
    source.lines().position(|l| {
        let t = l.trim_start();
        t.strip_prefix(key)
            .map(|rest| rest.trim_start().starts_with('='))
            .unwrap_or(false)
    })
    .map(|i| i + 1)
}

struct Problems<'a> {
    source: &'a str,
    list: Vec<String>,
}

impl Problems<'_> {
    fn push(&mut self, key: &str, msg: String) {
        match line_of(self.source, key) {
            Some(n) => self.list.push(format!("line {}: {}", n, msg)),
            None => self.list.push(msg),
        }
    }

    fn check(&mut self, ok: bool, key: &str, msg: impl FnOnce() -> String) {
        if !ok {
            self.push(key, msg());
        }
    }
}

fn check_discount(p: &mut Problems, gamma: f64) {
    p.check(gamma < 1.0, "discount", || format!("discount must be < 1 (got {})", gamma));
    p.check(gamma >= 0.0, "discount", || format!("discount must be >= 0 (got {})", gamma));
}

impl ExperimentConfig {
    /// Resolves a path from the config against its directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Range checks and file existence; `source` supplies line numbers.
    pub fn validate(&self, source: &str) -> Result<(), CliError> {
        let mut p = Problems {
            source,
            list: Vec::new(),
        };
        if let LambdaSetting::Fixed(l) = self.lambda {
            p.check(l > 0.0 && l.is_finite(), "lambda", || format!("lambda must be positive (got {})", l));
        }
        match &self.instance {
            InstanceConfig::Reference | InstanceConfig::TwoAction => {}
            InstanceConfig::Random(r) => {
                check_discount(&mut p, r.discount);
                p.check(r.states > 0 && r.actions > 0, "states", || String::from("states and actions must be positive"));
                p.check(r.eps_theta >= 0.0, "eps_theta", || format!("eps_theta must be >= 0 (got {})", r.eps_theta));
                p.check(r.eps_mu >= 0.0, "eps_mu", || format!("eps_mu must be >= 0 (got {})", r.eps_mu));
                p.check(
                    perf_lmdp_core::ResponseKind::parse(&r.kind).is_some(),
                    "kind",
                    || format!("unknown response kind {:?}", r.kind),
                );
            }
            InstanceConfig::Files(f) => {
                check_discount(&mut p, f.spec.discount);
                p.check(f.spec.start_dist.len() == f.spec.states, "start_dist", || {
                    format!("start_dist has {} entries for {} states", f.spec.start_dist.len(), f.spec.states)
                });
                p.check(f.response.eps_theta >= 0.0, "eps_theta", || String::from("eps_theta must be >= 0"));
                p.check(f.response.eps_mu >= 0.0, "eps_mu", || String::from("eps_mu must be >= 0"));
                let kind = perf_lmdp_core::ResponseKind::parse(&f.response.kind);
                p.check(kind.is_some(), "kind", || format!("unknown response kind {:?}", f.response.kind));
                let files: Vec<(&str, &Option<PathBuf>)> = match kind {
                    Some(perf_lmdp_core::ResponseKind::StackelbergInduced) => vec![("game", &f.response.game)],
                    Some(perf_lmdp_core::ResponseKind::Constant) => vec![("theta", &f.response.theta), ("mu", &f.response.mu)],
                    _ => vec![
                        ("theta", &f.response.theta),
                        ("mu", &f.response.mu),
                        ("a_theta", &f.response.a_theta),
                        ("a_mu", &f.response.a_mu),
                    ],
                };
                for (key, file) in files {
                    match file {
                        None => p.push("kind", format!("response kind {:?} needs `{}`", f.response.kind, key)),
                        Some(path) => self.check_file(&mut p, key, path),
                    }
                }
                if let Some(phi) = &f.spec.features {
                    self.check_file(&mut p, "features", phi);
                }
            }
            InstanceConfig::Game(g) => self.check_file(&mut p, "game", &g.game),
        }
        let r = &self.retrain;
        p.check(r.max_rounds >= 1, "max_rounds", || String::from("max_rounds must be >= 1"));
        p.check(r.stop_delta >= 0.0, "stop_delta", || format!("stop_delta must be >= 0 (got {})", r.stop_delta));
        let f = &self.finite;
        match &f.m_schedule {
            MSetting::Size(m) => p.check(*m > 0, "m_schedule", || String::from("m_schedule must be positive")),
            MSetting::List(v) => p.check(!v.is_empty() && v.iter().all(|&m| m > 0), "m_schedule", || {
                String::from("m_schedule entries must be positive")
            }),
            MSetting::Word(w) if w == "infinite" => {}
            MSetting::Word(w) => self.check_file(&mut p, "m_schedule", Path::new(w)),
        }
        p.check(f.ridge > 0.0, "ridge", || format!("ridge must be positive (got {})", f.ridge));
        p.check(f.reward_noise >= 0.0, "reward_noise", || String::from("reward_noise must be >= 0"));
        let pd = &self.pd;
        p.check(pd.t_inner > 0 && pd.k > 0, "t_inner", || String::from("t_inner and k must be positive"));
        for (key, v) in [("eta_omega", pd.eta_omega), ("eta_pi", pd.eta_pi), ("b_cov", pd.b_cov)] {
            if let Some(x) = v {
                p.check(x > 0.0, key, || format!("{} must be positive (got {})", key, x));
            }
        }
        if let Some(m) = pd.m {
            p.check(m > 0, "m", || String::from("pd.m must be positive"));
        }
        if let Some(d) = &pd.dataset {
            self.check_file(&mut p, "dataset", d);
        }
        p.check(self.solve.tol > 0.0, "tol", || String::from("tol must be positive"));
        if let Some(dir) = &self.solve.params {
            self.check_file(&mut p, "params", &dir.join("theta.csv"));
            self.check_file(&mut p, "params", &dir.join("mu.csv"));
        }
        if let Some(g) = &self.stackelberg.game {
            self.check_file(&mut p, "game", g);
        }
        let d = &self.diagnose;
        p.check(d.grid > 0.0 && d.grid <= 1.0, "grid", || format!("grid must be in (0, 1] (got {})", d.grid));
        if p.list.is_empty() {
            Ok(())
        } else {
            Err(CliError::ConfigList(p.list))
        }
    }

    fn check_file(&self, p: &mut Problems, key: &str, path: &Path) {
        let full = self.resolve(path);
        if !full.is_file() {
            p.push(key, format!("{} file not found: {}", key, full.display()));
        }
    }
}

/// Parses and validates a config held in memory.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<ExperimentConfig, CliError> {
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.base_dir = base_dir.to_path_buf();
    cfg.validate(text)?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config_str(&text, &base).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {}", path.display(), m)),
        CliError::ConfigList(v) => CliError::ConfigList(v.into_iter().map(|m| format!("{}: {}", path.display(), m)).collect()),
        e => e,
    })
}
