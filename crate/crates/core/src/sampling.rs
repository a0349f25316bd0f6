//! Data generation, the true and empirical Lagrangians, and finite-sample
//! retraining.
//!
//! Tuples are `(s0, s, a, r, s')` with `s0 ∼ ρ`, `(s,a) ∼ (1−γ)d`,
//! `s' ∼ P(·|s,a)` and `r = φ(s,a)ᵀθ` (plus optional uniform noise).

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::mdp::{self, LinearMdpSpec, MdpParams, OccupancyMeasure, Policy};
use crate::primal_dual::{self, PdConfig};
use crate::qp::{self, QpProblem, QpSettings, QpStatus};
use crate::response::ResponseMap;
use crate::retraining::{self, RoundRecord, Trace};
use crate::rng::{self, ModuleId, StreamRng};
use crate::solver::{self, SolverOptions};

/// Ridge added when the exact covariance is numerically singular.
pub const EXACT_RIDGE: f64 = 1e-6;
/// Default ridge for estimated covariances.
pub const DEFAULT_ESTIMATED_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s0: usize,
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tuples: Vec<Transition>,
    /// Probability weights for enumerated datasets; `None` means uniform.
    pub weights: Option<Vec<f64>>,
    pub round: u64,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Normalized weight of tuple `j`.
    pub fn weight(&self, j: usize) -> f64 {
        match &self.weights {
            Some(w) => w[j],
            None => 1.0 / self.tuples.len() as f64,
        }
    }

    pub fn check(&self, spec: &LinearMdpSpec) -> Result<()> {
        let (s_n, a_n) = (spec.num_states(), spec.num_actions());
        let bound = math::sqrt(spec.feature_dim() as f64);
        for (j, t) in self.tuples.iter().enumerate() {
            if t.s0 >= s_n || t.s >= s_n || t.s_next >= s_n || t.a >= a_n {
                return Err(Error::InvalidArgument(format!("tuple {} has an index out of range", j)));
            }
            if !t.r.is_finite() {
                return Err(Error::InvalidArgument(format!("tuple {} has a non-finite reward", j)));
            }
            if math::abs(t.r) > bound + 1e-9 {
                return Err(Error::InvalidArgument(format!("tuple {} has |r| = {} > sqrt(D)", j, math::abs(t.r))));
            }
        }
        if let Some(w) = &self.weights {
            if w.len() != self.tuples.len() {
                return Err(Error::DimensionMismatch {
                    what: "dataset weights",
                    expected: self.tuples.len(),
                    got: w.len(),
                });
            }
        }
        Ok(())
    }
}

fn sampling_distribution(d: &OccupancyMeasure, spec: &LinearMdpSpec) -> Result<Vec<f64>> {
    let g1 = 1.0 - spec.discount();
    let probs: Vec<f64> = d.as_vector().iter().map(|&x| g1 * x.max(0.0)).collect();
    let total: f64 = probs.iter().sum();
    if math::abs(total - 1.0) > 1e-6 {
        return Err(Error::InvalidDistribution(format!("(1-gamma) d sums to {}", total)));
    }
    Ok(probs)
}

pub fn sample_dataset(d: &OccupancyMeasure, params: &MdpParams, spec: &LinearMdpSpec, m: usize, seed: u64) -> Result<Dataset> {
    sample_dataset_with(d, params, spec, m, seed, 0, 0.0)
}

/// Draws `m` tuples from the stream `(seed, Sampling, round)`; reward noise
/// of half-width `reward_noise` uses the separate `RewardNoise` stream.
pub fn sample_dataset_with(
    d: &OccupancyMeasure,
    params: &MdpParams,
    spec: &LinearMdpSpec,
    m: usize,
    seed: u64,
    round: u64,
    reward_noise: f64,
) -> Result<Dataset> {
    if m == 0 {
        return Err(Error::EmptyInput("dataset size m"));
    }
    let probs = sampling_distribution(d, spec)?;
    let (reward, transition) = mdp::reconstruct_dynamics(params, spec)?;
    let a_n = spec.num_actions();
    let rho_cdf = rng::cumulative(spec.start_dist().as_slice());
    let pair_cdf = rng::cumulative(&probs);
    let next_cdf: Vec<Vec<f64>> = (0..spec.num_pairs())
        .map(|c| rng::cumulative(transition.column(c).as_slice()))
        .collect();
    let mut stream = StreamRng::new(seed, ModuleId::Sampling, round);
    let mut noise = StreamRng::new(seed, ModuleId::RewardNoise, round);
    let mut tuples = Vec::with_capacity(m);
    for _ in 0..m {
        let s0 = stream.categorical(&rho_cdf);
        let pair = stream.categorical(&pair_cdf);
        let s_next = stream.categorical(&next_cdf[pair]);
        let mut r = reward[pair];
        if reward_noise > 0.0 {
            r += reward_noise * (2.0 * noise.uniform() - 1.0);
        }
        tuples.push(Transition {
            s0,
            s: pair / a_n,
            a: pair % a_n,
            r,
            s_next,
        });
    }
    Ok(Dataset {
        tuples,
        weights: None,
        round,
        seed,
    })
}

/// Every tuple with positive probability, weighted by that probability.
pub fn enumerate_dataset(d: &OccupancyMeasure, params: &MdpParams, spec: &LinearMdpSpec) -> Result<Dataset> {
    let probs = sampling_distribution(d, spec)?;
    let (reward, transition) = mdp::reconstruct_dynamics(params, spec)?;
    let (s_n, a_n) = (spec.num_states(), spec.num_actions());
    let total: f64 = probs.iter().sum();
    let mut tuples = Vec::new();
    let mut weights = Vec::new();
    for s0 in 0..s_n {
        let w0 = spec.start_dist()[s0];
        if w0 <= 0.0 {
            continue;
        }
        for pair in 0..spec.num_pairs() {
            let w1 = probs[pair] / total;
            if w1 <= 0.0 {
                continue;
            }
            for s_next in 0..s_n {
                let w2 = transition[(s_next, pair)];
                if w2 <= 0.0 {
                    continue;
                }
                tuples.push(Transition {
                    s0,
                    s: pair / a_n,
                    a: pair % a_n,
                    r: reward[pair],
                    s_next,
                });
                weights.push(w0 * w1 * w2);
            }
        }
    }
    if tuples.is_empty() {
        return Err(Error::EmptyInput("enumerated dataset"));
    }
    Ok(Dataset {
        tuples,
        weights: Some(weights),
        round: 0,
        seed: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceSource {
    Exact,
    Estimated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub sigma: DMatrix<f64>,
    pub source: CovarianceSource,
    pub ridge: f64,
}

impl CovarianceEstimate {
    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        linalg::spd_inverse(&self.sigma).ok_or(Error::SingularSigma)
    }
}

/// `Σ = Σ_{s,a} (1−γ)d(s,a) φφᵀ`, with a `1e-6` ridge when `λ_min < 1e-10`.
pub fn expected_covariance(d: &OccupancyMeasure, spec: &LinearMdpSpec) -> Result<CovarianceEstimate> {
    if !(d.mass() > 0.0) {
        return Err(Error::InvalidOccupancy(format!("mass {} is not positive", d.mass())));
    }
    let phi = spec.features();
    let g1 = 1.0 - spec.discount();
    let w = d.as_vector().map(|x| g1 * x.max(0.0));
    let mut sigma = phi.transpose() * DMatrix::from_diagonal(&w) * phi;
    sigma = (&sigma + sigma.transpose()) * 0.5;
    let (lo, _) = linalg::sym_eig_extremes(&sigma);
    let ridge = if lo < 1e-10 { EXACT_RIDGE } else { 0.0 };
    if ridge > 0.0 {
        for i in 0..sigma.nrows() {
            sigma[(i, i)] += ridge;
        }
    }
    Ok(CovarianceEstimate {
        sigma,
        source: CovarianceSource::Exact,
        ridge,
    })
}

/// `(1/m) Σ_j φ_j φ_jᵀ` (weighted for enumerated datasets).
pub fn empirical_second_moment(dataset: &Dataset, spec: &LinearMdpSpec) -> DMatrix<f64> {
    let dim = spec.feature_dim();
    let mut m = DMatrix::zeros(dim, dim);
    for (j, t) in dataset.tuples.iter().enumerate() {
        let f = spec.phi(t.s, t.a);
        m += (&f * f.transpose()) * dataset.weight(j);
    }
    m
}

/// Sample second moment plus `ridge · I`.
pub fn estimated_covariance(dataset: &Dataset, spec: &LinearMdpSpec, ridge: f64) -> Result<CovarianceEstimate> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let mut sigma = empirical_second_moment(dataset, spec);
    for i in 0..sigma.nrows() {
        sigma[(i, i)] += ridge;
    }
    Ok(CovarianceEstimate {
        sigma: (&sigma + sigma.transpose()) * 0.5,
        source: CovarianceSource::Estimated,
        ridge,
    })
}

/// `νᵀ(θ + γμᵀg − ω) − (λ/2)‖ν‖² + ⟨g,ρ⟩ + ⟨d, Φω − Bᵀg⟩`.
#[allow(clippy::too_many_arguments)]
pub fn true_lagrangian(
    d: &DVector<f64>,
    nu: &DVector<f64>,
    g: &DVector<f64>,
    omega: &DVector<f64>,
    params: &MdpParams,
    spec: &LinearMdpSpec,
    lambda: f64,
) -> f64 {
    let inner = params.theta() + params.mu().transpose() * g * spec.discount() - omega;
    nu.dot(&inner) - 0.5 * lambda * nu.norm_squared() + g.dot(spec.start_dist()) + coupling(d, g, omega, spec)
}

fn coupling(d: &DVector<f64>, g: &DVector<f64>, omega: &DVector<f64>, spec: &LinearMdpSpec) -> f64 {
    let v = spec.features() * omega - spec.flow_matrix().transpose() * g;
    d.dot(&v)
}

/// Sample version of the Lagrangian with `Σ⁻¹` from `sigma`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_lagrangian(
    dataset: &Dataset,
    sigma: &CovarianceEstimate,
    d: &DVector<f64>,
    nu: &DVector<f64>,
    g: &DVector<f64>,
    omega: &DVector<f64>,
    spec: &LinearMdpSpec,
    lambda: f64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let sinv = sigma.inverse()?;
    let gamma = spec.discount();
    let mut acc = DVector::zeros(spec.feature_dim());
    let mut start = 0.0;
    for (j, t) in dataset.tuples.iter().enumerate() {
        let w = dataset.weight(j);
        let f = spec.phi(t.s, t.a);
        let target = t.r + gamma * g[t.s_next] - f.dot(omega);
        acc += f * (w * target);
        start += w * g[t.s0];
    }
    Ok(nu.dot(&(sinv * acc)) - 0.5 * lambda * nu.norm_squared() + start + coupling(d, g, omega, spec))
}

/// Largest `|νᵀΣ⁻¹φ(s,a)(r(s,a) + γg(s') − φᵀω)| + |g(s0)|` over all
/// tuples; the per-sample range used in Hoeffding envelopes.
pub fn lagrangian_sample_bound(
    sigma: &CovarianceEstimate,
    nu: &DVector<f64>,
    g: &DVector<f64>,
    omega: &DVector<f64>,
    params: &MdpParams,
    spec: &LinearMdpSpec,
) -> Result<f64> {
    let sinv = sigma.inverse()?;
    let v = sinv * nu;
    let reward = params.reward(spec);
    let gmax = g.iter().fold(0.0f64, |m, &x| m.max(math::abs(x)));
    let mut best = 0.0f64;
    for s in 0..spec.num_states() {
        for a in 0..spec.num_actions() {
            let f = spec.phi(s, a);
            let lead = v.dot(&f);
            let base = reward[spec.pair(s, a)] - f.dot(omega);
            for sp in 0..spec.num_states() {
                best = best.max(math::abs(lead * (base + spec.discount() * g[sp])));
            }
        }
    }
    Ok(best + gmax)
}

/// `E_{d⋆}[φ]ᵀ Σ_π⁻² E_{d⋆}[φ]` where `d_π` is the self-consistent occupancy
/// of `policy` and `d⋆` the optimal occupancy of `response(d_π)`.
pub fn coverage_bound(policy: &Policy, response: &ResponseMap, spec: &LinearMdpSpec) -> Result<f64> {
    let fp = retraining::self_consistent_occupancy(policy, response, spec)?;
    let params = response.apply(&fp.d, spec)?;
    coverage_bound_in(&fp.d, &params, spec)
}

/// Coverage quadratic form for data from `d_pi` in the fixed model `params`.
pub fn coverage_bound_in(d_pi: &OccupancyMeasure, params: &MdpParams, spec: &LinearMdpSpec) -> Result<f64> {
    let sigma = expected_covariance(d_pi, spec)?;
    let best = solver::solve_regularized(params, spec, retraining::LP_LAMBDA, solver::DEFAULT_KKT_TOL)?;
    let e = spec.features().transpose() * best.d.as_vector() * (1.0 - spec.discount());
    let sinv = sigma.inverse()?;
    let v = &sinv * e;
    Ok(v.norm_squared())
}

/// Plug-in quantities of the empirical Lagrangian.
///
/// Collecting terms, the sample Lagrangian equals the Lagrangian of
///
/// ```text
/// max_{d ≥ 0, ν}  νᵀθ̂ − (λ/2)‖ν‖²   s.t.  Bd − γμ̂ν = ρ̂,  Φᵀd = Ŵᵀν
/// ```
///
/// with `θ̂ = Σ⁻¹Ê[φr]`, `μ̂ᵀ = Σ⁻¹Ê[φ e_{s'}ᵀ]`, `ρ̂ = Ê[e_{s0}]` and
/// `Ŵ = Σ⁻¹Ê[φφᵀ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalModel {
    pub theta_hat: DVector<f64>,
    /// `S × D`.
    pub mu_hat: DMatrix<f64>,
    pub rho_hat: DVector<f64>,
    pub w_hat: DMatrix<f64>,
}

impl EmpiricalModel {
    pub fn from_dataset(dataset: &Dataset, sigma: &CovarianceEstimate, spec: &LinearMdpSpec) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        let sinv = sigma.inverse()?;
        let (s_n, dim) = (spec.num_states(), spec.feature_dim());
        let mut phi_r = DVector::zeros(dim);
        let mut phi_next = DMatrix::zeros(dim, s_n);
        let mut rho_hat = DVector::zeros(s_n);
        for (j, t) in dataset.tuples.iter().enumerate() {
            let w = dataset.weight(j);
            let f = spec.phi(t.s, t.a);
            phi_r += &f * (w * t.r);
            let mut col = phi_next.column_mut(t.s_next);
            col += &f * w;
            rho_hat[t.s0] += w;
        }
        let second = empirical_second_moment(dataset, spec);
        Ok(EmpiricalModel {
            theta_hat: &sinv * phi_r,
            mu_hat: (&sinv * phi_next).transpose(),
            rho_hat,
            w_hat: &sinv * second,
        })
    }

    /// Infinite-sample limit: the true model with `Ŵ = I`.
    pub fn exact(params: &MdpParams, spec: &LinearMdpSpec) -> Self {
        EmpiricalModel {
            theta_hat: params.theta().clone(),
            mu_hat: params.mu().clone(),
            rho_hat: spec.start_dist().clone(),
            w_hat: DMatrix::identity(spec.feature_dim(), spec.feature_dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleSolution {
    pub d: OccupancyMeasure,
    pub nu: DVector<f64>,
    pub g: DVector<f64>,
    pub omega: DVector<f64>,
    /// `ν̂ᵀθ̂ − (λ/2)‖ν̂‖²`, the saddle value.
    pub objective: f64,
    pub iterations: usize,
}

/// Saddle point of the empirical Lagrangian via its primal program.
pub fn solve_saddle(model: &EmpiricalModel, spec: &LinearMdpSpec, lambda: f64, tol: f64) -> Result<SaddleSolution> {
    if !(lambda > 0.0) {
        return Err(Error::NonPositiveLambda(lambda));
    }
    let (s_n, n, dim) = (spec.num_states(), spec.num_pairs(), spec.feature_dim());
    let nv = n + dim;
    let scale = 1.0 / (1.0f64).max(lambda).max(linalg::inf_norm(&model.theta_hat));
    let mut p = DMatrix::zeros(nv, nv);
    for i in 0..dim {
        p[(n + i, n + i)] = lambda * scale;
    }
    let mut q = DVector::zeros(nv);
    for i in 0..dim {
        q[n + i] = -model.theta_hat[i] * scale;
    }
    let rows = s_n + dim + n;
    let mut a = DMatrix::zeros(rows, nv);
    a.view_mut((0, 0), (s_n, n)).copy_from(&spec.flow_matrix());
    a.view_mut((0, n), (s_n, dim)).copy_from(&(&model.mu_hat * (-spec.discount())));
    a.view_mut((s_n, 0), (dim, n)).copy_from(&spec.features().transpose());
    a.view_mut((s_n, n), (dim, dim)).copy_from(&(-model.w_hat.transpose()));
    a.view_mut((s_n + dim, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    let mut l = DVector::zeros(rows);
    let mut u = DVector::from_element(rows, f64::INFINITY);
    for s in 0..s_n {
        l[s] = model.rho_hat[s];
        u[s] = model.rho_hat[s];
    }
    for i in 0..dim {
        u[s_n + i] = 0.0;
    }
    let prob = QpProblem { p, q, a, l, u };
    let settings = QpSettings {
        eps_abs: 1e-2 * tol * scale,
        eps_rel: 0.0,
        ..QpSettings::default()
    };
    let sol = qp::solve_qp(&prob, &settings, None);
    match sol.status {
        QpStatus::Solved | QpStatus::Polished => {}
        QpStatus::PrimalInfeasible => return Err(Error::InfeasibleModel),
        QpStatus::MaxIterations => {
            return Err(Error::NonConvergence(format!(
                "empirical saddle point (primal residual {:.3e}, dual residual {:.3e})",
                sol.prim_res, sol.dual_res
            )))
        }
    }
    let d = OccupancyMeasure::from_clamped(sol.x.rows(0, n).into_owned());
    let nu: DVector<f64> = sol.x.rows(n, dim).into_owned();
    let g = sol.y.rows(0, s_n) / scale;
    let omega = -sol.y.rows(s_n, dim) / scale;
    let objective = nu.dot(&model.theta_hat) - 0.5 * lambda * nu.norm_squared();
    Ok(SaddleSolution {
        d,
        nu,
        g,
        omega,
        objective,
        iterations: sol.iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum MSchedule {
    Constant(usize),
    /// Per-round sizes; rounds past the end reuse the last entry.
    List(Vec<usize>),
    /// Exact expectations instead of samples.
    Infinite,
}

impl MSchedule {
    /// Sample size of round `t` (1-based); `None` for the infinite surrogate.
    pub fn at(&self, t: usize) -> Option<usize> {
        match self {
            MSchedule::Constant(m) => Some(*m),
            MSchedule::List(v) => v.get(t.saturating_sub(1)).or(v.last()).copied(),
            MSchedule::Infinite => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    Exact,
    Estimated { ridge: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum FiniteSolver {
    ExactSaddle,
    PrimalDual(PdConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteOptions {
    pub sigma: SigmaMode,
    pub solver: FiniteSolver,
    pub reward_noise: f64,
    pub tol: f64,
    pub reference: Option<OccupancyMeasure>,
    /// Compute the regularized stability gap of each round (one extra solve).
    pub stability_gap: bool,
}

impl Default for FiniteOptions {
    fn default() -> Self {
        FiniteOptions {
            sigma: SigmaMode::Exact,
            solver: FiniteSolver::ExactSaddle,
            reward_noise: 0.0,
            tol: solver::DEFAULT_KKT_TOL,
            reference: None,
            stability_gap: false,
        }
    }
}

/// Retraining from fresh samples each round.
///
/// Round `t` deploys `π_t` in `M_t = response(d̂_{t−1})`, samples from its
/// occupancy there, solves the empirical saddle point and sets
/// `π_{t+1} = π^{d̂_t}`. `d0` plays the role of `d̂_0`.
#[allow(clippy::too_many_arguments)]
pub fn run_finite_sample_retraining(
    response: &ResponseMap,
    spec: &LinearMdpSpec,
    lambda: f64,
    d0: &OccupancyMeasure,
    schedule: &MSchedule,
    max_rounds: usize,
    seed: u64,
    opts: &FiniteOptions,
    observer: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<Trace> {
    if !(lambda > 0.0) {
        return Err(Error::NonPositiveLambda(lambda));
    }
    let mut records = Vec::new();
    let mut prev = d0.clone();
    let mut policy = mdp::policy_from_occupancy(d0, spec);
    for t in 1..=max_rounds {
        let rec = finite_round(response, spec, lambda, &prev, &policy, schedule, t, seed, opts).map_err(|e| e.in_round(t))?;
        observer(&rec)?;
        policy = rec.policy.clone();
        prev = rec.d.clone();
        records.push(rec);
    }
    Ok(Trace {
        records,
        lambda,
        response_kind: response.kind(),
        converged: false,
    })
}

/// What round `t` of finite-sample retraining deploys and observes.
#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    /// `response(d̂_{t−1})`.
    pub params: MdpParams,
    /// Occupancy of `π_t` in `params`.
    pub deployed: OccupancyMeasure,
    /// `None` for the infinite surrogate.
    pub data: Option<Dataset>,
}

/// Rebuilds the environment and dataset of round `t` from `d̂_{t−1}` and
/// `π_t`; the draws depend only on `(seed, t)`.
#[allow(clippy::too_many_arguments)]
pub fn deploy_round(
    response: &ResponseMap,
    spec: &LinearMdpSpec,
    prev: &OccupancyMeasure,
    policy: &Policy,
    schedule: &MSchedule,
    t: usize,
    seed: u64,
    reward_noise: f64,
) -> Result<Deployment> {
    let params = response.apply(prev, spec)?;
    let deployed = mdp::occupancy_from_policy(policy, &params, spec)?;
    let data = match schedule.at(t) {
        None => None,
        Some(m) => Some(sample_dataset_with(&deployed, &params, spec, m, seed, t as u64, reward_noise)?),
    };
    Ok(Deployment { params, deployed, data })
}

#[allow(clippy::too_many_arguments)]
fn finite_round(
    response: &ResponseMap,
    spec: &LinearMdpSpec,
    lambda: f64,
    prev: &OccupancyMeasure,
    policy: &Policy,
    schedule: &MSchedule,
    t: usize,
    seed: u64,
    opts: &FiniteOptions,
) -> Result<RoundRecord> {
    let deployment = deploy_round(response, spec, prev, policy, schedule, t, seed, opts.reward_noise)?;
    let (params, deployed) = (deployment.params, deployment.deployed);
    let (d_hat, objective, digest) = match deployment.data {
        None => {
            let model = EmpiricalModel::exact(&params, spec);
            let sol = solve_saddle(&model, spec, lambda, opts.tol)?;
            (sol.d, sol.objective, 0)
        }
        Some(data) => {
            let digest = data_digest(&data);
            let sigma = match opts.sigma {
                SigmaMode::Exact => expected_covariance(&deployed, spec)?,
                SigmaMode::Estimated { ridge } => estimated_covariance(&data, spec, ridge)?,
            };
            match &opts.solver {
                FiniteSolver::ExactSaddle => {
                    let model = EmpiricalModel::from_dataset(&data, &sigma, spec)?;
                    let sol = solve_saddle(&model, spec, lambda, opts.tol)?;
                    (sol.d, sol.objective, digest)
                }
                FiniteSolver::PrimalDual(cfg) => {
                    let pd_seed = seed ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                    let res = primal_dual::run_offline_primal_dual(&data, &sigma, spec, cfg, pd_seed)?;
                    let d = mdp::occupancy_from_policy(&res.selected_policy, &params, spec)?;
                    let obj = res.objective_history.last().copied().unwrap_or(0.0);
                    (d, obj, digest)
                }
            }
        }
    };
    let next_policy = mdp::policy_from_occupancy(&d_hat, spec);
    let now = response.apply(&d_hat, spec)?;
    let perf_value = mdp::value_of_policy(&next_policy, &now, spec)?;
    let stability_gap = if opts.stability_gap {
        let best = solver::solve_regularized_with(&now, spec, lambda, &SolverOptions::default(), Some(&d_hat))?;
        best.primal_objective - solver::regularized_objective(&d_hat, &now, spec, lambda)
    } else {
        f64::NAN
    };
    Ok(RoundRecord {
        round: t,
        step_norm: d_hat.distance(prev),
        dist_to_ref: opts.reference.as_ref().map(|r| d_hat.distance(r)),
        d: d_hat,
        policy: next_policy,
        reg_objective: objective,
        perf_value,
        stability_gap,
        rng_digest: digest,
    })
}

/// Order-sensitive digest of the sampled indices.
pub fn data_digest(data: &Dataset) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in &data.tuples {
        for x in [t.s0, t.s, t.a, t.s_next] {
            h ^= x as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= t.r.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
