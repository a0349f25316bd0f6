//! Building instances from configs and writing them back out as files.

use std::fs;
use std::path::{Path, PathBuf};

use perf_lmdp_core::instances::{self, CertifiedConfig, CertifiedInstance};
use perf_lmdp_core::mdp::{LinearMdpSpec, MdpParams};
use perf_lmdp_core::rng::{ModuleId, StreamRng};
use perf_lmdp_core::stackelberg::stackelberg_response_map;
use perf_lmdp_core::{ResponseKind, ResponseMap};

use crate::config::{ExperimentConfig, FileInstance, InstanceConfig, LambdaSetting, ResponseTable, SpecTable};
use crate::csvio;
use crate::error::CliError;
use crate::game_io;

#[derive(Debug, Clone)]
pub struct LoadedInstance {
    pub spec: LinearMdpSpec,
    pub response: ResponseMap,
}

impl LoadedInstance {
    /// Spectral constants and the convergence certificate at `lambda`.
    pub fn certify(&self, lambda: LambdaSetting) -> Result<CertifiedInstance, CliError> {
        instances::certify_instance(self.spec.clone(), self.response.clone(), lambda.fixed()).map_err(CliError::load)
    }
}

fn instance_rng(seed: u64) -> StreamRng {
    StreamRng::new(seed, ModuleId::Instances, 0)
}

fn spec_from_table(cfg: &ExperimentConfig, t: &SpecTable) -> Result<LinearMdpSpec, CliError> {
    let spec = match &t.features {
        None => LinearMdpSpec::tabular(t.states, t.actions, t.discount, t.start_dist.clone()),
        Some(p) => {
            let phi = csvio::read_matrix(&cfg.resolve(p))?.matrix;
            LinearMdpSpec::new(t.states, t.actions, t.discount, t.start_dist.clone(), phi)
        }
    };
    spec.map_err(CliError::load)
}

/// Base parameters from `theta.csv`-style files.
pub fn read_params(theta: &Path, mu: &Path, spec: &LinearMdpSpec) -> Result<MdpParams, CliError> {
    let theta = csvio::read_vector(theta)?;
    let mu = csvio::read_matrix(mu)?.matrix;
    MdpParams::new(theta, mu, spec).map_err(CliError::load)
}

fn required(cfg: &ExperimentConfig, p: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
    p.as_ref()
        .map(|p| cfg.resolve(p))
        .ok_or_else(|| CliError::Config(format!("response table needs `{}`", key)))
}

fn response_from_table(cfg: &ExperimentConfig, t: &ResponseTable, spec: &LinearMdpSpec) -> Result<ResponseMap, CliError> {
    let kind = ResponseKind::parse(&t.kind).ok_or_else(|| CliError::Config(format!("unknown response kind {:?}", t.kind)))?;
    if kind == ResponseKind::StackelbergInduced {
        let game = game_io::read_game(&required(cfg, &t.game, "game")?)?;
        return stackelberg_response_map(&game, spec).map_err(CliError::load);
    }
    let base = read_params(&required(cfg, &t.theta, "theta")?, &required(cfg, &t.mu, "mu")?, spec)?;
    if kind == ResponseKind::Constant {
        return Ok(ResponseMap::constant(base));
    }
    let a_theta = csvio::read_matrix(&required(cfg, &t.a_theta, "a_theta")?)?.matrix;
    let a_mu = csvio::read_matrix(&required(cfg, &t.a_mu, "a_mu")?)?.matrix;
    let map = match kind {
        ResponseKind::PolicyFactored => ResponseMap::policy_factored(base, a_theta, a_mu, t.eps_theta, t.eps_mu, spec),
        _ => ResponseMap::affine(base, a_theta, a_mu, t.eps_theta, t.eps_mu, spec),
    };
    map.map_err(CliError::load)
}

pub fn load_instance(cfg: &ExperimentConfig) -> Result<LoadedInstance, CliError> {
    match &cfg.instance {
        InstanceConfig::Reference => {
            let inst = instances::reference_instance(&mut instance_rng(cfg.seed)).map_err(CliError::load)?;
            Ok(LoadedInstance {
                spec: inst.spec,
                response: inst.response,
            })
        }
        InstanceConfig::TwoAction => {
            let (spec, params) = instances::two_action_params().map_err(CliError::load)?;
            Ok(LoadedInstance {
                spec,
                response: ResponseMap::constant(params),
            })
        }
        InstanceConfig::Random(r) => {
            let kind = ResponseKind::parse(&r.kind).ok_or_else(|| CliError::Config(format!("unknown response kind {:?}", r.kind)))?;
            let cc = CertifiedConfig {
                tabular: r.tabular,
                kind,
                ..CertifiedConfig::tabular(r.states, r.actions, r.discount, r.eps_theta, r.eps_mu)
            };
            let inst = instances::random_certified_instance(&cc, &mut instance_rng(cfg.seed)).map_err(CliError::load)?;
            Ok(LoadedInstance {
                spec: inst.spec,
                response: inst.response,
            })
        }
        InstanceConfig::Files(f) => {
            let spec = spec_from_table(cfg, &f.spec)?;
            let response = response_from_table(cfg, &f.response, &spec)?;
            Ok(LoadedInstance { spec, response })
        }
        InstanceConfig::Game(g) => {
            let game = game_io::read_game(&cfg.resolve(&g.game))?;
            let spec = LinearMdpSpec::tabular(game.num_states, game.num_leader_actions, game.gamma, game.rho.clone())
                .map_err(CliError::load)?;
            let response = stackelberg_response_map(&game, &spec).map_err(CliError::load)?;
            Ok(LoadedInstance { spec, response })
        }
    }
}

/// Writes `spec` and `response` as CSV files under `dir` and returns the
/// matching `[instance]` table with paths relative to `dir`.
pub fn save_instance(dir: &Path, spec: &LinearMdpSpec, response: &ResponseMap) -> Result<FileInstance, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let features = if spec.is_tabular() {
        None
    } else {
        csvio::write_matrix(&dir.join("features.csv"), "features", spec.features())?;
        Some(PathBuf::from("features.csv"))
    };
    let table = SpecTable {
        states: spec.num_states(),
        actions: spec.num_actions(),
        discount: spec.discount(),
        start_dist: spec.start_dist().iter().copied().collect(),
        features,
    };
    let mut resp = ResponseTable {
        kind: response.kind().as_str().to_string(),
        eps_theta: response.eps_theta(),
        eps_mu: response.eps_mu(),
        theta: None,
        mu: None,
        a_theta: None,
        a_mu: None,
        game: None,
    };
    if let Some(g) = response.game() {
        let path = game_io::write_game(&dir.join("game"), g.game())?;
        resp.game = path.strip_prefix(dir).ok().map(Path::to_path_buf);
    } else {
        let base = response.base_params();
        csvio::write_vector(&dir.join("theta.csv"), "theta", base.theta())?;
        csvio::write_matrix(&dir.join("mu.csv"), "mu", base.mu())?;
        resp.theta = Some(PathBuf::from("theta.csv"));
        resp.mu = Some(PathBuf::from("mu.csv"));
        if let Some((at, am)) = response.affine_matrices() {
            csvio::write_matrix(&dir.join("a_theta.csv"), "a_theta", at)?;
            csvio::write_matrix(&dir.join("a_mu.csv"), "a_mu", am)?;
            resp.a_theta = Some(PathBuf::from("a_theta.csv"));
            resp.a_mu = Some(PathBuf::from("a_mu.csv"));
        }
    }
    Ok(FileInstance { spec: table, response: resp })
}

/// Writes `θ` and `μ` of `params` as `<prefix>theta.csv` and `<prefix>mu.csv`.
pub fn write_params(dir: &Path, prefix: &str, params: &MdpParams) -> Result<(), CliError> {
    csvio::write_vector(&dir.join(format!("{}theta.csv", prefix)), "theta", params.theta())?;
    csvio::write_matrix(&dir.join(format!("{}mu.csv", prefix)), "mu", params.mu())
}

