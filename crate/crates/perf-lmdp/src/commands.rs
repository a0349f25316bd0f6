//! Drivers.
//!
//! A run has two phases. [`prepare`] reads and checks every input; its
//! errors exit with status 1 and leave no files behind. [`execute`] writes
//! the manifest, then computes and streams results; its errors exit with
//! status 2.

use std::path::{Path, PathBuf};
use std::time::Instant;

use perf_lmdp_core::instances::{self, CertifiedInstance};
use perf_lmdp_core::mdp::{self, LinearMdpSpec, MdpParams, OccupancyMeasure, Policy};
use perf_lmdp_core::primal_dual::{self, PdConfig, DEFAULT_B_COV};
use perf_lmdp_core::retraining::{self, RetrainOptions, RoundRecord, Trace};
use perf_lmdp_core::rng::{ModuleId, StreamRng};
use perf_lmdp_core::sampling::{self, CovarianceEstimate, Dataset, FiniteOptions, FiniteSolver, MSchedule, SigmaMode};
use perf_lmdp_core::solver;
use perf_lmdp_core::stackelberg::{self, StackelbergGame};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Driver, ExperimentConfig, InstanceConfig, LambdaSetting, MSetting, SigmaKind, SolverKind};
use crate::csvio;
use crate::error::CliError;
use crate::game_io;
use crate::instance::{self, LoadedInstance};
use crate::output::{self, KeyValues, Manifest, RunDir, TraceWriter};

/// File names inside the run directory that can be changed from the
/// command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputNames {
    pub trace: String,
    pub summary: String,
}

impl Default for OutputNames {
    fn default() -> Self {
        OutputNames {
            trace: String::from("trace.jsonl"),
            summary: String::from("summary.csv"),
        }
    }
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub outputs: Vec<String>,
}

/// Starting occupancy shared by every driver.
fn start(spec: &LinearMdpSpec) -> OccupancyMeasure {
    retraining::uniform_start(spec)
}

/// `λ` and, when the instance admits one, its certificate.
struct Resolved {
    lambda: f64,
    cert: Option<CertifiedInstance>,
}

impl Resolved {
    fn contracts(&self) -> bool {
        self.cert.as_ref().map(|c| c.certificate.contracts()).unwrap_or(false)
    }
}

fn resolve_lambda(loaded: &LoadedInstance, setting: LambdaSetting) -> Result<Resolved, CliError> {
    match loaded.certify(setting) {
        Ok(c) => Ok(Resolved {
            lambda: c.lambda,
            cert: Some(c),
        }),
        Err(e) => match setting.fixed() {
            Some(lambda) => {
                log::warn!("no certificate for this instance ({}); running uncertified", e);
                Ok(Resolved { lambda, cert: None })
            }
            None => Err(CliError::Config(format!("lambda = \"auto\" needs a certificate: {}", e))),
        },
    }
}

fn schedule_from(cfg: &ExperimentConfig) -> Result<MSchedule, CliError> {
    Ok(match &cfg.finite.m_schedule {
        MSetting::Size(m) => MSchedule::Constant(*m),
        MSetting::List(v) => MSchedule::List(v.clone()),
        MSetting::Word(w) if w == "infinite" => MSchedule::Infinite,
        MSetting::Word(w) => {
            let path = cfg.resolve(Path::new(w));
            let v = csvio::read_int_list(&path)?;
            if v.is_empty() || v.contains(&0) {
                return Err(CliError::Config(format!("{}: sizes must be positive and non-empty", path.display())));
            }
            MSchedule::List(v)
        }
    })
}

fn pd_config(cfg: &ExperimentConfig, spec: &LinearMdpSpec, lambda: f64, b_cov: f64) -> Result<PdConfig, CliError> {
    let mut pd = PdConfig::with_defaults(spec, lambda, cfg.pd.t_inner, cfg.pd.k, b_cov);
    if let Some(x) = cfg.pd.eta_omega {
        pd.eta_omega = x;
    }
    if let Some(x) = cfg.pd.eta_pi {
        pd.eta_pi = x;
    }
    pd.validate().map_err(CliError::load)?;
    Ok(pd)
}

struct RetrainPlan {
    loaded: LoadedInstance,
    resolved: Resolved,
    reference: bool,
}

struct FinitePlan {
    retrain: RetrainPlan,
    schedule: MSchedule,
    options: FiniteOptions,
}

/// How primal-dual data and its covariance are obtained.
enum PdData {
    File { data: Dataset, ridge: f64 },
    Behavior { m: Option<usize>, sigma: SigmaKind, ridge: f64 },
}

struct PdPlan {
    loaded: LoadedInstance,
    lambda: f64,
    data: PdData,
}

struct StackelbergPlan {
    game: StackelbergGame,
    retrain: Option<RetrainPlan>,
}

struct DiagnosePlan {
    loaded: LoadedInstance,
    resolved: Resolved,
    grid_steps: usize,
    brute_force: bool,
}

enum Plan {
    Certify { loaded: LoadedInstance, cert: CertifiedInstance },
    Solve { loaded: LoadedInstance, params: MdpParams, lambda: f64 },
    RetrainExact(RetrainPlan),
    RetrainFinite(FinitePlan),
    PrimalDual(PdPlan),
    Stackelberg(StackelbergPlan),
    Diagnose(DiagnosePlan),
}

/// A checked run, ready to write outputs.
pub struct Prepared {
    cfg: ExperimentConfig,
    driver: Driver,
    names: OutputNames,
    plan: Plan,
}

fn check_name(name: &str) -> Result<(), CliError> {
    let p = Path::new(name);
    if name.is_empty() || p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(CliError::Config(format!("output name {:?} must be a relative path inside the run directory", name)));
    }
    Ok(())
}

/// Loads every input of `driver`; nothing is written.
pub fn prepare(cfg: &ExperimentConfig, driver: Driver, names: &OutputNames) -> Result<Prepared, CliError> {
    check_name(&names.trace)?;
    check_name(&names.summary)?;
    let plan = match driver {
        Driver::Certify => {
            let loaded = instance::load_instance(cfg)?;
            let cert = loaded.certify(cfg.lambda)?;
            Plan::Certify { loaded, cert }
        }
        Driver::Solve => {
            let loaded = instance::load_instance(cfg)?;
            let params = match &cfg.solve.params {
                Some(dir) => {
                    let dir = cfg.resolve(dir);
                    instance::read_params(&dir.join("theta.csv"), &dir.join("mu.csv"), &loaded.spec)?
                }
                None => loaded.response.base_params().clone(),
            };
            let lambda = resolve_lambda(&loaded, cfg.lambda)?.lambda;
            Plan::Solve { loaded, params, lambda }
        }
        Driver::RetrainExact => Plan::RetrainExact(retrain_plan(cfg, instance::load_instance(cfg)?)?),
        Driver::RetrainFinite => {
            let retrain = retrain_plan(cfg, instance::load_instance(cfg)?)?;
            let schedule = schedule_from(cfg)?;
            let f = &cfg.finite;
            let sigma = match f.sigma {
                SigmaKind::Exact => SigmaMode::Exact,
                SigmaKind::Estimated => SigmaMode::Estimated { ridge: f.ridge },
            };
            let solver = match f.solver {
                SolverKind::ExactSaddle => FiniteSolver::ExactSaddle,
                SolverKind::PrimalDual => {
                    let b = cfg.pd.b_cov.unwrap_or(DEFAULT_B_COV);
                    FiniteSolver::PrimalDual(pd_config(cfg, &retrain.loaded.spec, retrain.resolved.lambda, b)?)
                }
            };
            let options = FiniteOptions {
                sigma,
                solver,
                reward_noise: f.reward_noise,
                stability_gap: f.stability_gap,
                ..FiniteOptions::default()
            };
            Plan::RetrainFinite(FinitePlan {
                retrain,
                schedule,
                options,
            })
        }
        Driver::PrimalDual => {
            let loaded = instance::load_instance(cfg)?;
            let lambda = resolve_lambda(&loaded, cfg.lambda)?.lambda;
            let data = match &cfg.pd.dataset {
                Some(p) => {
                    let path = cfg.resolve(p);
                    let data = csvio::read_dataset(&path)?;
                    data.check(&loaded.spec)
                        .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
                    PdData::File {
                        data,
                        ridge: cfg.finite.ridge,
                    }
                }
                None => PdData::Behavior {
                    m: cfg.pd.m,
                    sigma: cfg.finite.sigma,
                    ridge: cfg.finite.ridge,
                },
            };
            // Step sizes are checked here so bad settings exit as config errors.
            pd_config(cfg, &loaded.spec, lambda, cfg.pd.b_cov.unwrap_or(DEFAULT_B_COV))?;
            Plan::PrimalDual(PdPlan { loaded, lambda, data })
        }
        Driver::Stackelberg => {
            let game = match (&cfg.stackelberg.game, &cfg.instance) {
                (Some(p), _) => game_io::read_game(&cfg.resolve(p))?,
                (None, InstanceConfig::Game(g)) => game_io::read_game(&cfg.resolve(&g.game))?,
                (None, _) => {
                    let mut rng = StreamRng::new(cfg.seed, ModuleId::Instances, 0);
                    stackelberg::random_game(2, 2, 2, 0.9, 0.1, &mut rng)
                }
            };
            let retrain = if cfg.stackelberg.retrain {
                let spec = LinearMdpSpec::tabular(game.num_states, game.num_leader_actions, game.gamma, game.rho.clone())
                    .map_err(CliError::load)?;
                let response = stackelberg::stackelberg_response_map(&game, &spec).map_err(CliError::load)?;
                Some(retrain_plan(cfg, LoadedInstance { spec, response })?)
            } else {
                None
            };
            Plan::Stackelberg(StackelbergPlan { game, retrain })
        }
        Driver::Diagnose => {
            let loaded = instance::load_instance(cfg)?;
            let resolved = resolve_lambda(&loaded, cfg.lambda)?;
            let grid_steps = retraining::grid_steps(cfg.diagnose.grid).map_err(CliError::load)?;
            let brute_force = cfg.diagnose.brute_force && retraining::check_brute_force_size(&loaded.spec).is_ok();
            if cfg.diagnose.brute_force && !brute_force {
                log::warn!("instance too large for the brute-force search; skipping it");
            }
            Plan::Diagnose(DiagnosePlan {
                loaded,
                resolved,
                grid_steps,
                brute_force,
            })
        }
    };
    Ok(Prepared {
        cfg: cfg.clone(),
        driver,
        names: names.clone(),
        plan,
    })
}

fn retrain_plan(cfg: &ExperimentConfig, loaded: LoadedInstance) -> Result<RetrainPlan, CliError> {
    let resolved = resolve_lambda(&loaded, cfg.lambda)?;
    let reference = cfg.retrain.reference && resolved.contracts();
    if cfg.retrain.reference && !reference {
        log::warn!("certificate does not contract at lambda = {}; no reference point", resolved.lambda);
    }
    Ok(RetrainPlan {
        loaded,
        resolved,
        reference,
    })
}

const INSTANCE_FILES: &str = "instance/instance.toml";

impl Prepared {
    /// Every file the run writes besides `manifest.json` and `timing.json`,
    /// relative to the run directory.
    pub fn outputs(&self) -> Vec<String> {
        let n = &self.names;
        let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let retrain_outputs = |p: &RetrainPlan| {
            let mut v = vec![INSTANCE_FILES.to_string(), n.trace.clone(), n.summary.clone(), "result.csv".to_string()];
            v.extend(strs(&["final/d.csv", "final/policy.csv", "final/theta.csv", "final/mu.csv"]));
            if p.reference {
                v.push("reference_d.csv".to_string());
            }
            v
        };
        match &self.plan {
            Plan::Certify { .. } => vec![INSTANCE_FILES.to_string(), n.summary.clone()],
            Plan::Solve { .. } => {
                let mut v = vec![INSTANCE_FILES.to_string(), n.summary.clone()];
                v.extend(strs(&["d.csv", "nu.csv", "h.csv", "g.csv", "policy.csv"]));
                v
            }
            Plan::RetrainExact(p) => retrain_outputs(p),
            Plan::RetrainFinite(p) => {
                let mut v = retrain_outputs(&p.retrain);
                if self.cfg.finite.save_datasets && p.schedule != MSchedule::Infinite {
                    v.push("datasets/".to_string());
                }
                v
            }
            Plan::PrimalDual(_) => {
                let mut v = vec![INSTANCE_FILES.to_string(), n.summary.clone()];
                v.extend(strs(&["policies.csv", "selected_policy.csv", "nu_tilde.csv", "objective_history.csv"]));
                v
            }
            Plan::Stackelberg(p) => {
                let mut v = strs(&["game/game.toml", "lemma1.csv", "l1_check.csv"]);
                v.push(n.summary.clone());
                if let Some(r) = &p.retrain {
                    v.extend(retrain_outputs(r).into_iter().filter(|x| x != &n.summary));
                }
                v
            }
            Plan::Diagnose(p) => {
                let mut v = vec![INSTANCE_FILES.to_string(), n.summary.clone()];
                if p.brute_force {
                    v.push("brute_force_policy.csv".to_string());
                }
                v
            }
        }
    }
}

/// Prepares, writes the manifest and executes; timing goes to its own file.
pub fn run(cfg: &ExperimentConfig, driver: Driver, out: &Path, names: &OutputNames) -> Result<RunReport, CliError> {
    let prepared = prepare(cfg, driver, names)?;
    execute(prepared, out)
}

pub fn execute(prepared: Prepared, out: &Path) -> Result<RunReport, CliError> {
    let outputs = prepared.outputs();
    let manifest = Manifest::new(&prepared.cfg, prepared.driver, outputs.clone());
    let dir = RunDir::create(out, &manifest)?;
    let clock = Instant::now();
    log::info!("{} -> {}", prepared.driver, out.display());
    let Prepared { cfg, names, plan, .. } = prepared;
    let ctx = Ctx {
        cfg: &cfg,
        dir: &dir,
        names: &names,
    };
    match plan {
        Plan::Certify { loaded, cert } => ctx.certify(&loaded, &cert)?,
        Plan::Solve { loaded, params, lambda } => ctx.solve(&loaded, &params, lambda)?,
        Plan::RetrainExact(p) => ctx.retrain_exact(&p)?,
        Plan::RetrainFinite(p) => ctx.retrain_finite(&p)?,
        Plan::PrimalDual(p) => ctx.primal_dual(&p)?,
        Plan::Stackelberg(p) => ctx.stackelberg(&p)?,
        Plan::Diagnose(p) => ctx.diagnose(&p)?,
    }
    output::write_timing(&dir, clock.elapsed().as_secs_f64())?;
    Ok(RunReport {
        out_dir: out.to_path_buf(),
        outputs,
    })
}

#[derive(Serialize)]
struct InstanceSnapshot {
    instance: InstanceConfig,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    dir: &'a RunDir,
    names: &'a OutputNames,
}

/// Runs `body` with an observer that streams each record to `path` and
/// then hands it to `extra`. An output failure stops the run and wins over
/// whatever error the aborted computation reports.
fn traced<T>(
    path: &Path,
    mut extra: impl FnMut(&RoundRecord) -> Result<(), CliError>,
    body: impl FnOnce(&mut dyn FnMut(&RoundRecord) -> perf_lmdp_core::Result<()>) -> perf_lmdp_core::Result<T>,
) -> Result<T, CliError> {
    let mut writer = TraceWriter::create(path)?;
    let mut failure: Option<CliError> = None;
    let out = {
        let mut observer = |rec: &RoundRecord| -> perf_lmdp_core::Result<()> {
            match writer.append(rec).and_then(|_| extra(rec)) {
                Ok(()) => Ok(()),
                Err(e) => {
                    let msg = e.to_string();
                    failure = Some(e);
                    Err(perf_lmdp_core::Error::InvalidArgument(msg))
                }
            }
        };
        body(&mut observer)
    };
    match (out, failure) {
        (_, Some(e)) => Err(e),
        (Ok(v), None) => Ok(v),
        (Err(e), None) => Err(e.into()),
    }
}

fn write_policy(path: &Path, pi: &Policy) -> Result<(), CliError> {
    csvio::write_matrix(path, "policy", pi.matrix())
}

impl Ctx<'_> {
    fn summary_path(&self) -> PathBuf {
        self.dir.path(&self.names.summary)
    }

    fn ensure_parent(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.dir.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        Ok(p)
    }

    fn snapshot(&self, loaded: &LoadedInstance) -> Result<(), CliError> {
        let dir = self.dir.subdir("instance")?;
        let files = instance::save_instance(&dir, &loaded.spec, &loaded.response)?;
        let text = toml::to_string(&InstanceSnapshot {
            instance: InstanceConfig::Files(files),
        })
        .expect("snapshot serializes");
        self.dir.write(INSTANCE_FILES, text)
    }

    fn certify(&self, loaded: &LoadedInstance, inst: &CertifiedInstance) -> Result<(), CliError> {
        self.snapshot(loaded)?;
        let (spec, c, cert) = (&inst.spec, &inst.constants, &inst.certificate);
        let (et, em) = (inst.response.eps_theta(), inst.response.eps_mu());
        let mut kv = KeyValues::new();
        kv.text("response_kind", inst.response.kind().as_str())
            .text("heuristic_sensitivity", inst.response.is_heuristic())
            .num("eps_theta", et)
            .num("eps_mu", em)
            .num("lambda", inst.lambda)
            .num("lambda_min", cert.lambda_min)
            .num("r", cert.rate_value)
            .text("contracts", cert.contracts())
            .num("beta", cert.beta_recurrence)
            .num("eps_mu_max", cert.eps_mu_max)
            .num("kappa", c.kappa)
            .num("big_m", c.big_m)
            .num("alpha", c.alpha)
            .num("m_pinv_norm", c.m_pinv_norm)
            .text("m_pinv_within_alpha", c.m_pinv_within_alpha())
            .num("dual_norm_bound", solver::dual_norm_bound(inst.lambda, c, spec));
        match cert.iters_to_delta(1e-4) {
            Some(n) => kv.text("iters_to_1e-4", n),
            None => kv.text("iters_to_1e-4", ""),
        };
        if c.kappa > 0.0 {
            kv.num("auto_lambda", retraining::auto_lambda(et, em, c, spec)?)
                .num("theorem2_bound", retraining::theorem2_bound(et, em, c, spec)?)
                .num("theorem3_bound", retraining::theorem3_bound(et, em, c, spec)?);
        }
        kv.write(&self.summary_path())
    }

    fn solve(&self, loaded: &LoadedInstance, params: &MdpParams, lambda: f64) -> Result<(), CliError> {
        self.snapshot(loaded)?;
        let spec = &loaded.spec;
        let sol = solver::solve_regularized(params, spec, lambda, self.cfg.solve.tol)?;
        csvio::write_vector(&self.dir.path("d.csv"), "d", sol.d.as_vector())?;
        csvio::write_vector(&self.dir.path("nu.csv"), "nu", &sol.nu)?;
        csvio::write_vector(&self.dir.path("h.csv"), "h", &sol.h)?;
        csvio::write_vector(&self.dir.path("g.csv"), "g", &sol.g)?;
        let pi = mdp::policy_from_occupancy(&sol.d, spec);
        write_policy(&self.dir.path("policy.csv"), &pi)?;
        let mut kv = KeyValues::new();
        kv.num("lambda", lambda)
            .num("primal_objective", sol.primal_objective)
            .num("dual_objective", sol.dual_objective)
            .num("duality_gap", sol.duality_gap())
            .num("kkt_stationarity", sol.kkt_residuals.stationarity)
            .num("kkt_feasibility", sol.kkt_residuals.feasibility)
            .num("kkt_complementarity", sol.kkt_residuals.complementarity)
            .num("value", mdp::value_of_policy(&pi, params, spec)?)
            .text("iterations", sol.iterations);
        kv.write(&self.summary_path())
    }

    fn reference_point(&self, p: &RetrainPlan) -> Result<Option<OccupancyMeasure>, CliError> {
        if !p.reference {
            return Ok(None);
        }
        let cert = p.resolved.cert.as_ref().expect("reference implies a certificate");
        let d = retraining::reference_stable_point(&p.loaded.response, &p.loaded.spec, &cert.certificate, &start(&p.loaded.spec), 1e-12)?;
        csvio::write_vector(&self.dir.path("reference_d.csv"), "d", d.as_vector())?;
        Ok(Some(d))
    }

    fn finish_retrain(&self, p: &RetrainPlan, trace: &Trace, summary: Option<&str>) -> Result<(), CliError> {
        let spec = &p.loaded.spec;
        if let Some(name) = summary {
            output::write_round_summary(&self.ensure_parent(name)?, &trace.records)?;
        }
        let final_d = trace.final_d().cloned().unwrap_or_else(|| start(spec));
        let pi = mdp::policy_from_occupancy(&final_d, spec);
        let params = p.loaded.response.apply(&final_d, spec)?;
        self.dir.subdir("final")?;
        csvio::write_vector(&self.dir.path("final/d.csv"), "d", final_d.as_vector())?;
        write_policy(&self.dir.path("final/policy.csv"), &pi)?;
        instance::write_params(&self.dir.path("final"), "", &params)?;
        let mut kv = KeyValues::new();
        kv.num("lambda", trace.lambda)
            .text("response_kind", trace.response_kind.as_str())
            .text("rounds", trace.records.len())
            .text("converged", trace.converged);
        if let Some(c) = &p.resolved.cert {
            kv.num("r", c.certificate.rate_value).text("contracts", c.certificate.contracts());
        }
        if let Some(last) = trace.records.last() {
            kv.num("final_step_norm", last.step_norm).num("final_perf_value", last.perf_value);
            if let Some(x) = last.dist_to_ref {
                kv.num("final_dist_to_ref", x);
            }
        }
        kv.write(&self.dir.path("result.csv"))
    }

    fn run_exact(&self, p: &RetrainPlan, summary: Option<&str>) -> Result<(), CliError> {
        self.snapshot(&p.loaded)?;
        let reference = self.reference_point(p)?;
        let opts = RetrainOptions {
            reference,
            ..RetrainOptions::default()
        };
        let (spec, response) = (&p.loaded.spec, &p.loaded.response);
        let r = &self.cfg.retrain;
        let trace_path = self.ensure_parent(&self.names.trace)?;
        let trace = traced(&trace_path, |_| Ok(()), |obs| {
            retraining::run_repeated_optimization_with(response, spec, p.resolved.lambda, &start(spec), r.max_rounds, r.stop_delta, &opts, obs)
        })?;
        self.finish_retrain(p, &trace, summary)
    }

    fn retrain_exact(&self, p: &RetrainPlan) -> Result<(), CliError> {
        self.run_exact(p, Some(&self.names.summary))
    }

    fn retrain_finite(&self, p: &FinitePlan) -> Result<(), CliError> {
        let rp = &p.retrain;
        self.snapshot(&rp.loaded)?;
        let mut opts = p.options.clone();
        opts.reference = self.reference_point(rp)?;
        let (spec, response) = (&rp.loaded.spec, &rp.loaded.response);
        let save = self.cfg.finite.save_datasets && p.schedule != MSchedule::Infinite;
        if save {
            self.dir.subdir("datasets")?;
        }
        let seed = self.cfg.seed;
        let noise = opts.reward_noise;
        let mut prev = start(spec);
        let trace_path = self.ensure_parent(&self.names.trace)?;
        let trace = traced(
            &trace_path,
            |rec| {
                if save {
                    let pi = mdp::policy_from_occupancy(&prev, spec);
                    let dep = sampling::deploy_round(response, spec, &prev, &pi, &p.schedule, rec.round, seed, noise)?;
                    if let Some(data) = dep.data {
                        if sampling::data_digest(&data) != rec.rng_digest {
                            return Err(CliError::Io(format!("dataset of round {} could not be reproduced", rec.round)));
                        }
                        let rel = format!("datasets/round_{:04}.csv", rec.round);
                        csvio::write_dataset(&self.dir.path(&rel), &data)?;
                    }
                }
                prev = rec.d.clone();
                Ok(())
            },
            |obs| {
                sampling::run_finite_sample_retraining(
                    response,
                    spec,
                    rp.resolved.lambda,
                    &start(spec),
                    &p.schedule,
                    self.cfg.retrain.max_rounds,
                    seed,
                    &opts,
                    obs,
                )
            },
        )?;
        self.finish_retrain(rp, &trace, Some(&self.names.summary))
    }

    fn primal_dual(&self, p: &PdPlan) -> Result<(), CliError> {
        self.snapshot(&p.loaded)?;
        let spec = &p.loaded.spec;
        let base = p.loaded.response.base_params();
        let seed = self.cfg.seed;
        let (data, sigma, b_cov): (Dataset, CovarianceEstimate, f64) = match &p.data {
            PdData::File { data, ridge } => {
                let sigma = sampling::estimated_covariance(data, spec, *ridge)?;
                (data.clone(), sigma, self.cfg.pd.b_cov.unwrap_or(DEFAULT_B_COV))
            }
            PdData::Behavior { m, sigma, ridge } => {
                let behavior = mdp::occupancy_from_policy(&Policy::uniform(spec.num_states(), spec.num_actions()), base, spec)?;
                let data = match m {
                    Some(m) => sampling::sample_dataset(&behavior, base, spec, *m, seed)?,
                    None => sampling::enumerate_dataset(&behavior, base, spec)?,
                };
                let cov = match sigma {
                    SigmaKind::Exact => sampling::expected_covariance(&behavior, spec)?,
                    SigmaKind::Estimated => sampling::estimated_covariance(&data, spec, *ridge)?,
                };
                let b = match self.cfg.pd.b_cov {
                    Some(b) => b,
                    None => sampling::coverage_bound_in(&behavior, base, spec)?.max(1.0),
                };
                (data, cov, b)
            }
        };
        let cfg = pd_config(self.cfg, spec, p.lambda, b_cov)?;
        let res = primal_dual::run_offline_primal_dual(&data, &sigma, spec, &cfg, seed)?;
        let mut rows = Vec::new();
        for (l, pi) in res.policies.iter().enumerate() {
            for s in 0..spec.num_states() {
                for a in 0..spec.num_actions() {
                    rows.push(vec![(l + 1).to_string(), s.to_string(), a.to_string(), csvio::fmt_f64(pi.prob(s, a))]);
                }
            }
        }
        output::write_table(&self.dir.path("policies.csv"), &["iteration", "state", "action", "prob"], &rows)?;
        write_policy(&self.dir.path("selected_policy.csv"), &res.selected_policy)?;
        csvio::write_vector(&self.dir.path("nu_tilde.csv"), "nu_tilde", &res.nu_tilde)?;
        let rows: Vec<Vec<String>> = res
            .objective_history
            .iter()
            .enumerate()
            .map(|(l, x)| vec![(l + 1).to_string(), csvio::fmt_f64(*x)])
            .collect();
        output::write_table(&self.dir.path("objective_history.csv"), &["iteration", "objective"], &rows)?;
        let (_, mixture) = primal_dual::mixture_average_feature(&res, base, spec, p.lambda)?;
        let best = solver::solve_regularized(base, spec, p.lambda, solver::DEFAULT_KKT_TOL)?;
        let selected_d = mdp::occupancy_from_policy(&res.selected_policy, base, spec)?;
        let mut kv = KeyValues::new();
        kv.num("lambda", p.lambda)
            .text("samples", data.len())
            .num("b_cov", cfg.b_cov)
            .text("t_inner", cfg.t_inner)
            .text("k", cfg.k)
            .num("eta_omega", cfg.eta_omega)
            .num("eta_pi", cfg.eta_pi)
            .text("selected_index", res.selected_index + 1)
            .num("mixture_objective", mixture)
            .num("selected_objective", solver::regularized_objective(&selected_d, base, spec, p.lambda))
            .num("optimal_objective", best.primal_objective)
            .num("mixture_gap", best.primal_objective - mixture);
        kv.write(&self.summary_path())
    }

    fn stackelberg(&self, p: &StackelbergPlan) -> Result<(), CliError> {
        let game = &p.game;
        game_io::write_game(&self.dir.subdir("game")?, game)?;
        let (s_n, a1) = (game.num_states, game.num_leader_actions);
        let mut rng = StreamRng::new(self.cfg.seed, ModuleId::Instances, 1);
        let mut rows = Vec::new();
        let mut lemma1_fail = 0usize;
        for i in 0..self.cfg.stackelberg.pairs {
            let pi = instances::random_policy(s_n, a1, &mut rng);
            let pt = instances::random_policy(s_n, a1, &mut rng);
            let rep = stackelberg::lemma1_sensitivity_check(game, &pi, &pt)?;
            lemma1_fail += usize::from(!rep.pass());
            rows.push(vec![
                (i + 1).to_string(),
                csvio::fmt_f64(rep.delta),
                csvio::fmt_f64(rep.reward_dev),
                csvio::fmt_f64(rep.reward_bound),
                csvio::fmt_f64(rep.transition_dev),
                csvio::fmt_f64(rep.transition_bound),
                rep.pass().to_string(),
            ]);
        }
        output::write_table(
            &self.dir.path("lemma1.csv"),
            &["pair", "delta", "reward_dev", "reward_bound", "transition_dev", "transition_bound", "pass"],
            &rows,
        )?;
        let rho = perf_lmdp_core::DVector::from_vec(game.rho.clone());
        let mut rows = Vec::new();
        let mut l1_fail = 0usize;
        for i in 0..self.cfg.stackelberg.kernel_pairs {
            let k1 = instances::random_interior_kernel(s_n, s_n * a1, 0.0, &mut rng)?;
            let k2 = instances::random_interior_kernel(s_n, s_n * a1, 0.0, &mut rng)?;
            let pi = instances::random_policy(s_n, a1, &mut rng);
            let rep = stackelberg::occupancy_l1_perturbation_check(&k1, &k2, &pi, &rho, game.gamma)?;
            l1_fail += usize::from(!rep.pass);
            rows.push(vec![
                (i + 1).to_string(),
                csvio::fmt_f64(rep.kernel_dev),
                csvio::fmt_f64(rep.distance),
                csvio::fmt_f64(rep.bound),
                rep.pass.to_string(),
            ]);
        }
        output::write_table(&self.dir.path("l1_check.csv"), &["pair", "kernel_dev", "distance", "bound", "pass"], &rows)?;
        let (cr, cp) = stackelberg::lemma1_constants(game);
        let mut kv = KeyValues::new();
        kv.num("softmax_beta", game.softmax_beta)
            .num("reward_constant", cr)
            .num("transition_constant", cp)
            .text("lemma1_pairs", self.cfg.stackelberg.pairs)
            .text("lemma1_failures", lemma1_fail)
            .text("l1_pairs", self.cfg.stackelberg.kernel_pairs)
            .text("l1_failures", l1_fail);
        if let Some(r) = &p.retrain {
            kv.num("eps_theta", r.loaded.response.eps_theta())
                .num("eps_mu", r.loaded.response.eps_mu())
                .num("lambda", r.resolved.lambda);
        }
        kv.write(&self.summary_path())?;
        if let Some(r) = &p.retrain {
            self.run_exact(r, None)?;
        }
        Ok(())
    }

    fn diagnose(&self, p: &DiagnosePlan) -> Result<(), CliError> {
        self.snapshot(&p.loaded)?;
        let (spec, response) = (&p.loaded.spec, &p.loaded.response);
        let base = response.base_params();
        let lambda = p.resolved.lambda;
        let constants = solver::spectral_constants(spec, base);
        let mut kv = KeyValues::new();
        kv.num("lambda", lambda)
            .num("kappa", constants.kappa)
            .num("big_m", constants.big_m)
            .num("alpha", constants.alpha)
            .num("m_pinv_norm", constants.m_pinv_norm)
            .text("m_pinv_within_alpha", constants.m_pinv_within_alpha());
        let sol = solver::solve_regularized(base, spec, lambda, solver::DEFAULT_KKT_TOL)?;
        let h = solver::minimum_norm_dual(&sol, base, spec, lambda)?;
        let bound = solver::dual_norm_bound(lambda, &constants, spec);
        kv.num("min_norm_dual", h.norm())
            .num("dual_norm_bound", bound)
            .text("dual_norm_within_bound", h.norm() <= bound);
        let uniform = Policy::uniform(spec.num_states(), spec.num_actions());
        kv.num("coverage_uniform", sampling::coverage_bound(&uniform, response, spec)?);

        let mut rng = StreamRng::new(self.cfg.seed, ModuleId::Instances, 2);
        let mut pairs = Vec::with_capacity(self.cfg.diagnose.probes);
        for _ in 0..self.cfg.diagnose.probes {
            let p1 = instances::random_policy(spec.num_states(), spec.num_actions(), &mut rng);
            let p2 = instances::random_policy(spec.num_states(), spec.num_actions(), &mut rng);
            pairs.push((mdp::occupancy_from_policy(&p1, base, spec)?, mdp::occupancy_from_policy(&p2, base, spec)?));
        }
        if !pairs.is_empty() {
            let (mt, mm) = perf_lmdp_core::response::measure_sensitivity(response, spec, &pairs)?;
            kv.num("declared_eps_theta", response.eps_theta())
                .num("declared_eps_mu", response.eps_mu())
                .num("measured_eps_theta", mt)
                .num("measured_eps_mu", mm);
        }

        let trace = retraining::run_repeated_optimization(response, spec, lambda, &start(spec), self.cfg.retrain.max_rounds, self.cfg.retrain.stop_delta)?;
        let stable = trace.final_d().cloned().unwrap_or_else(|| start(spec));
        let gap = retraining::stability_gap(&stable, response, spec, lambda)?;
        let stable_value = mdp::performative_value(&stable, response, spec)?;
        kv.text("retrain_rounds", trace.records.len())
            .num("stability_gap_regularized", gap.regularized)
            .num("stability_gap_unregularized", gap.unregularized)
            .num("stable_performative_value", stable_value);
        let bounds = if constants.kappa > 0.0 {
            let (et, em) = (response.eps_theta(), response.eps_mu());
            Some((
                retraining::theorem2_bound(et, em, &constants, spec)?,
                retraining::theorem3_bound(et, em, &constants, spec)?,
            ))
        } else {
            None
        };
        if let Some((b2, _)) = bounds {
            kv.num("stability_gap_bound", b2);
        }

        if p.brute_force {
            let policies = retraining::grid_policies(spec, p.grid_steps);
            let outcomes = policies
                .into_par_iter()
                .map(|pi| retraining::self_consistent_occupancy(&pi, response, spec).map(|o| (pi, o)))
                .collect::<perf_lmdp_core::Result<Vec<_>>>()?;
            let best = retraining::merge_brute_force(outcomes)?;
            write_policy(&self.dir.path("brute_force_policy.csv"), &best.policy)?;
            let slack = retraining::grid_value_slack(spec, self.cfg.diagnose.grid);
            kv.text("grid_points", best.evaluated)
                .text("grid_diverged", best.diverged)
                .num("brute_force_value", best.value)
                .num("optimality_gap", best.value - stable_value)
                .num("grid_slack", slack);
            if let Some((_, b3)) = bounds {
                kv.num("optimality_gap_bound", b3)
                    .text("optimality_gap_within_bound", best.value - stable_value <= b3 + slack);
            }
        }
        kv.write(&self.summary_path())
    }
}
