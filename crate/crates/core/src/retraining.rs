//! Repeated regularized retraining and its diagnostics.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::math;
use crate::mdp::{self, LinearMdpSpec, OccupancyMeasure, Policy};
use crate::response::{ResponseKind, ResponseMap};
use crate::solver::{self, RegularizedSolution, SolverOptions, SpectralConstants};

/// Regularization used for the unregularized (LP) re-evaluation.
pub const LP_LAMBDA: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceCertificate {
    pub lambda: f64,
    /// `25(ε_θ + αγ√D ε_μ) / (8√κ)`.
    pub lambda_min: f64,
    /// `5/4 · √beta_recurrence`, whether or not it contracts.
    pub rate_value: f64,
    /// Coefficient of the two-step recurrence on `‖d_t − d_S‖`.
    pub beta_recurrence: f64,
    /// `2√κ / (25γα²)`.
    pub eps_mu_max: f64,
    pub discount: f64,
    contracts: bool,
}

impl ConvergenceCertificate {
    /// `Some(r)` when `λ > λ_min` and `ε_μ < eps_mu_max`, else `None`.
    pub fn rate_r(&self) -> Option<f64> {
        if self.contracts {
            Some(self.rate_value)
        } else {
            None
        }
    }

    pub fn contracts(&self) -> bool {
        self.contracts
    }

    /// `⌈ln(2/(δ(1−γ))) / ln(1/r)⌉`, or `None` without contraction.
    pub fn iters_to_delta(&self, delta: f64) -> Option<usize> {
        let r = self.rate_r()?;
        if r == 0.0 {
            return Some(0);
        }
        let n = math::ln(2.0 / (delta * (1.0 - self.discount))) / math::ln(1.0 / r);
        Some(math::ceil(n.max(0.0)) as usize)
    }
}

fn sensitivity_sum(eps_theta: f64, eps_mu: f64, constants: &SpectralConstants, spec: &LinearMdpSpec) -> f64 {
    eps_theta + constants.alpha * spec.discount() * math::sqrt(spec.feature_dim() as f64) * eps_mu
}

fn require_kappa(constants: &SpectralConstants) -> Result<f64> {
    if constants.kappa > 0.0 {
        Ok(math::sqrt(constants.kappa))
    } else {
        Err(Error::KappaZero)
    }
}

/// `25(ε_θ + αγ√D ε_μ) / (8√κ)`.
pub fn lambda_min(eps_theta: f64, eps_mu: f64, constants: &SpectralConstants, spec: &LinearMdpSpec) -> Result<f64> {
    let sk = require_kappa(constants)?;
    Ok(25.0 * sensitivity_sum(eps_theta, eps_mu, constants, spec) / (8.0 * sk))
}

/// `1.25 · λ_min`; undefined when the sensitivities vanish.
pub fn auto_lambda(eps_theta: f64, eps_mu: f64, constants: &SpectralConstants, spec: &LinearMdpSpec) -> Result<f64> {
    let lm = lambda_min(eps_theta, eps_mu, constants, spec)?;
    if lm <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lambda = \"auto\" needs a positive threshold, but lambda_min = {}",
            lm
        )));
    }
    Ok(1.25 * lm)
}

pub fn certify(
    eps_theta: f64,
    eps_mu: f64,
    constants: &SpectralConstants,
    spec: &LinearMdpSpec,
    lambda: f64,
) -> Result<ConvergenceCertificate> {
    if !(lambda > 0.0) {
        return Err(Error::NonPositiveLambda(lambda));
    }
    let sk = require_kappa(constants)?;
    let gamma = spec.discount();
    let a2 = constants.alpha * constants.alpha;
    let c = sensitivity_sum(eps_theta, eps_mu, constants, spec);
    let lambda_min = 25.0 * c / (8.0 * sk);
    let beta = c / (lambda * sk) + 4.0 * gamma * eps_mu * a2 / sk;
    let eps_mu_max = if gamma > 0.0 {
        2.0 * sk / (25.0 * gamma * a2)
    } else {
        f64::INFINITY
    };
    Ok(ConvergenceCertificate {
        lambda,
        lambda_min,
        rate_value: 1.25 * math::sqrt(beta),
        beta_recurrence: beta,
        eps_mu_max,
        discount: gamma,
        contracts: lambda > lambda_min && eps_mu < eps_mu_max,
    })
}

/// `25𝔐(ε_θ + αγ√D ε_μ) / (16√κ(1−γ)²)`.
pub fn theorem2_bound(eps_theta: f64, eps_mu: f64, constants: &SpectralConstants, spec: &LinearMdpSpec) -> Result<f64> {
    let sk = require_kappa(constants)?;
    let g1 = 1.0 - spec.discount();
    Ok(25.0 * constants.big_m * sensitivity_sum(eps_theta, eps_mu, constants, spec) / (16.0 * sk * g1 * g1))
}

/// Performative-optimality gap bound of the stable point at `λ₀`.
pub fn theorem3_bound(eps_theta: f64, eps_mu: f64, constants: &SpectralConstants, spec: &LinearMdpSpec) -> Result<f64> {
    let sk = require_kappa(constants)?;
    let g1 = 1.0 - spec.discount();
    let m = constants.big_m;
    let delta = 3.0 * spec.discount() * eps_mu * m * math::sqrt(spec.feature_dim() as f64) / (g1 * g1)
        + eps_theta * math::sqrt(m);
    let lambda0 = 25.0 * sensitivity_sum(eps_theta, eps_mu, constants, spec) / (8.0 * sk);
    let scale = m / (g1 * g1);
    Ok(4.0 * math::sqrt((1.0 + delta) * delta / constants.kappa * scale) + lambda0 * scale)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub d: OccupancyMeasure,
    pub policy: Policy,
    /// `‖d_t − d_{t−1}‖₂`.
    pub step_norm: f64,
    pub dist_to_ref: Option<f64>,
    pub reg_objective: f64,
    /// `V^{π_t}_{π_t}(ρ)`.
    pub perf_value: f64,
    /// Regularized stability gap of `d_t` in `response(d_t)`.
    pub stability_gap: f64,
    /// Digest of the random stream used in the round (0 when none is used).
    pub rng_digest: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub records: Vec<RoundRecord>,
    pub lambda: f64,
    pub response_kind: ResponseKind,
    pub converged: bool,
}

impl Trace {
    pub fn final_d(&self) -> Option<&OccupancyMeasure> {
        self.records.last().map(|r| &r.d)
    }

    pub fn step_norms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.step_norm).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RetrainOptions {
    pub solver: SolverOptions,
    /// Reference point for `dist_to_ref`.
    pub reference: Option<OccupancyMeasure>,
}

pub fn run_repeated_optimization(
    response: &ResponseMap,
    spec: &LinearMdpSpec,
    lambda: f64,
    d0: &OccupancyMeasure,
    max_rounds: usize,
    stop_delta: f64,
) -> Result<Trace> {
    run_repeated_optimization_with(response, spec, lambda, d0, max_rounds, stop_delta, &RetrainOptions::default(), &mut |_| Ok(()))
}

/// Algorithm loop with a per-round observer (used for streaming traces).
///
/// The solve for round `t+1` happens eagerly in round `t`, because its
/// optimum also gives the stability gap of `d_t`.
#[allow(clippy::too_many_arguments)]
pub fn run_repeated_optimization_with(
    response: &ResponseMap,
    spec: &LinearMdpSpec,
    lambda: f64,
    d0: &OccupancyMeasure,
    max_rounds: usize,
    stop_delta: f64,
    opts: &RetrainOptions,
    observer: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<Trace> {
    if !(lambda > 0.0) {
        return Err(Error::NonPositiveLambda(lambda));
    }
    if d0.len() != spec.num_pairs() {
        return Err(Error::DimensionMismatch {
            what: "initial occupancy",
            expected: spec.num_pairs(),
            got: d0.len(),
        });
    }
    let mut records = Vec::new();
    let mut prev = d0.clone();
    let mut converged = false;
    let mut next = solve_round(response, spec, lambda, &prev, &opts.solver).map_err(|e| e.in_round(1))?;
    for t in 1..=max_rounds {
        let sol = next;
        let d = sol.d.clone();
        let after = solve_round(response, spec, lambda, &d, &opts.solver).map_err(|e| e.in_round(t + 1))?;
        let params_now = response.apply(&d, spec).map_err(|e| e.in_round(t))?;
        let gap = after.primal_objective - solver::regularized_objective(&d, &params_now, spec, lambda);
        let policy = mdp::policy_from_occupancy(&d, spec);
        let perf_value = mdp::value_of_policy(&policy, &params_now, spec).map_err(|e| e.in_round(t))?;
        let step_norm = d.distance(&prev);
        let rec = RoundRecord {
            round: t,
            dist_to_ref: opts.reference.as_ref().map(|r| d.distance(r)),
            d: d.clone(),
            policy,
            step_norm,
            reg_objective: sol.primal_objective,
            perf_value,
            stability_gap: gap,
            rng_digest: 0,
        };
        observer(&rec)?;
        records.push(rec);
        prev = d;
        next = after;
        if step_norm <= stop_delta {
            converged = true;
            break;
        }
    }
    Ok(Trace {
        records,
        lambda,
        response_kind: response.kind(),
        converged,
    })
}

fn solve_round(
    response: &ResponseMap,
    spec: &LinearMdpSpec,
    lambda: f64,
    prev: &OccupancyMeasure,
    opts: &SolverOptions,
) -> Result<RegularizedSolution> {
    let params = response.apply(prev, spec)?;
    solver::solve_regularized_with(&params, spec, lambda, opts, Some(prev))
}

/// Long-run proxy for the stable point: five times the certified round count
/// for `stop_delta`, stopping at `stop_delta / 100`.
pub fn reference_stable_point(
    response: &ResponseMap,
    spec: &LinearMdpSpec,
    cert: &ConvergenceCertificate,
    d0: &OccupancyMeasure,
    stop_delta: f64,
) -> Result<OccupancyMeasure> {
    let rounds = cert
        .iters_to_delta(stop_delta)
        .ok_or_else(|| Error::InvalidArgument(format!("no contraction at lambda = {}", cert.lambda)))?;
    let opts = RetrainOptions {
        solver: SolverOptions {
            kkt_tol: 1e-10,
            ..SolverOptions::default()
        },
        reference: None,
    };
    let trace = run_repeated_optimization_with(
        response,
        spec,
        cert.lambda,
        d0,
        (5 * rounds).max(10),
        stop_delta / 100.0,
        &opts,
        &mut |_| Ok(()),
    )?;
    Ok(trace.final_d().cloned().unwrap_or_else(|| d0.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityGap {
    pub regularized: f64,
    /// Gap of the plain return `dᵀΦθ` (LP solved as `λ = 1e-9`).
    pub unregularized: f64,
}

pub fn stability_gap(d: &OccupancyMeasure, response: &ResponseMap, spec: &LinearMdpSpec, lambda: f64) -> Result<StabilityGap> {
    let params = response.apply(d, spec)?;
    let best = solver::solve_regularized(&params, spec, lambda, solver::DEFAULT_KKT_TOL)?;
    let regularized = best.primal_objective - solver::regularized_objective(d, &params, spec, lambda);
    let lp = solver::solve_regularized(&params, spec, LP_LAMBDA, solver::DEFAULT_KKT_TOL)?;
    let r = params.reward(spec);
    let unregularized = lp.d.as_vector().dot(&r) - d.as_vector().dot(&r);
    Ok(StabilityGap {
        regularized,
        unregularized,
    })
}

/// Largest `S·A` accepted by the brute-force oracle.
pub const BRUTE_FORCE_MAX_PAIRS: usize = 6;
const FIXED_POINT_MAX_ITER: usize = 500;
const FIXED_POINT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointOutcome {
    pub d: OccupancyMeasure,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Occupancy of `policy` that is consistent with its own response, found by
/// iterating `d ← d^π(response(d))`; damping 0.5 kicks in once a step grows.
pub fn self_consistent_occupancy(policy: &Policy, response: &ResponseMap, spec: &LinearMdpSpec) -> Result<FixedPointOutcome> {
    let mut d = mdp::occupancy_from_policy(policy, response.base_params(), spec)?;
    let mut damping = false;
    let mut last_step = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for k in 0..FIXED_POINT_MAX_ITER {
        let params = response.apply(&d, spec)?;
        let fresh = mdp::occupancy_from_policy(policy, &params, spec)?;
        let next = if damping {
            OccupancyMeasure::from_clamped((d.as_vector() + fresh.as_vector()) * 0.5)
        } else {
            fresh
        };
        let step = next.distance(&d);
        d = next;
        iterations = k + 1;
        if step <= FIXED_POINT_TOL * (1.0 + d.as_vector().norm()) {
            converged = true;
            break;
        }
        if step > last_step {
            damping = true;
        }
        last_step = step;
    }
    let params = response.apply(&d, spec)?;
    let value = d.as_vector().dot(&params.reward(spec));
    Ok(FixedPointOutcome {
        d,
        value,
        iterations,
        converged,
    })
}

/// Grid steps per unit for a resolution such as `0.05`.
pub fn grid_steps(grid_resolution: f64) -> Result<usize> {
    if !(grid_resolution > 0.0) || grid_resolution > 1.0 {
        return Err(Error::InvalidArgument(format!("grid resolution {} not in (0, 1]", grid_resolution)));
    }
    let n = math::round(1.0 / grid_resolution);
    if math::abs(n * grid_resolution - 1.0) > 1e-9 {
        return Err(Error::InvalidArgument(format!("grid resolution {} does not divide 1", grid_resolution)));
    }
    Ok(n as usize)
}

/// Probability vectors over `num_actions` with entries in multiples of
/// `1/steps`, in lexicographic order of the integer counts.
pub fn simplex_grid(num_actions: usize, steps: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut counts = alloc::vec![0usize; num_actions];
    fn rec(i: usize, left: usize, counts: &mut Vec<usize>, steps: usize, out: &mut Vec<Vec<f64>>) {
        let last = counts.len() - 1;
        if i == last {
            counts[i] = left;
            out.push(counts.iter().map(|&c| c as f64 / steps as f64).collect());
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            rec(i + 1, left - c, counts, steps, out);
        }
    }
    rec(0, steps, &mut counts, steps, &mut out);
    out
}

/// Every grid policy, ordered lexicographically by state then action.
pub fn grid_policies(spec: &LinearMdpSpec, steps: usize) -> Vec<Policy> {
    let (s_n, a_n) = (spec.num_states(), spec.num_actions());
    let rows = simplex_grid(a_n, steps);
    let total = rows.len().pow(s_n as u32);
    let mut out = Vec::with_capacity(total);
    for mut idx in 0..total {
        let mut pi = nalgebra::DMatrix::zeros(s_n, a_n);
        for s in (0..s_n).rev() {
            let row = &rows[idx % rows.len()];
            idx /= rows.len();
            for a in 0..a_n {
                pi[(s, a)] = row[a];
            }
        }
        out.push(Policy::from_weights(pi));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub d: OccupancyMeasure,
    pub policy: Policy,
    pub value: f64,
    pub evaluated: usize,
    /// Grid points whose fixed-point iteration did not settle.
    pub diverged: usize,
}

/// Merge rule shared by sequential and parallel evaluation: strictly larger
/// values win, so ties keep the lexicographically first grid point.
pub fn merge_brute_force(outcomes: Vec<(Policy, FixedPointOutcome)>) -> Result<BruteForceResult> {
    let evaluated = outcomes.len();
    let diverged = outcomes.iter().filter(|(_, o)| !o.converged).count();
    let mut best: Option<(Policy, FixedPointOutcome)> = None;
    for (pi, o) in outcomes {
        let better = match &best {
            None => true,
            Some((_, b)) => o.value > b.value,
        };
        if better {
            best = Some((pi, o));
        }
    }
    let (policy, o) = best.ok_or(Error::EmptyInput("policy grid"))?;
    Ok(BruteForceResult {
        d: o.d,
        policy,
        value: o.value,
        evaluated,
        diverged,
    })
}

pub fn check_brute_force_size(spec: &LinearMdpSpec) -> Result<()> {
    if spec.num_pairs() > BRUTE_FORCE_MAX_PAIRS {
        return Err(Error::SizeLimit(format!(
            "brute force needs S*A <= {}, got {}",
            BRUTE_FORCE_MAX_PAIRS,
            spec.num_pairs()
        )));
    }
    Ok(())
}

/// Grid search for the policy maximizing `V^π_π(ρ)`.
pub fn brute_force_performative_optimum(response: &ResponseMap, spec: &LinearMdpSpec, grid_resolution: f64) -> Result<BruteForceResult> {
    check_brute_force_size(spec)?;
    let steps = grid_steps(grid_resolution)?;
    let mut outcomes = Vec::new();
    for pi in grid_policies(spec, steps) {
        let o = self_consistent_occupancy(&pi, response, spec)?;
        outcomes.push((pi, o));
    }
    merge_brute_force(outcomes)
}

/// Value slack of a policy grid: moving each row by at most `h·A/2` in L1
/// changes the return of a fixed MDP by at most `h·A·R/(2(1−γ)²)` with
/// `R = √D` the largest possible reward.
pub fn grid_value_slack(spec: &LinearMdpSpec, grid_resolution: f64) -> f64 {
    let g1 = 1.0 - spec.discount();
    grid_resolution * spec.num_actions() as f64 * math::sqrt(spec.feature_dim() as f64) / (2.0 * g1 * g1)
}

/// Residual `‖solve(response(d)).d − d‖₂` of the fixed-point equation.
pub fn fixed_point_residual(d: &OccupancyMeasure, response: &ResponseMap, spec: &LinearMdpSpec, lambda: f64) -> Result<f64> {
    let params = response.apply(d, spec)?;
    let sol = solver::solve_regularized(&params, spec, lambda, solver::DEFAULT_KKT_TOL)?;
    Ok(sol.d.distance(d))
}

/// Empirical ratios `‖d_{t+1} − ref‖ / ‖d_t − ref‖` for rounds where the
/// denominator is above `floor`.
pub fn contraction_ratios(trace: &Trace, reference: &OccupancyMeasure, floor: f64) -> Vec<(usize, f64)> {
    let dists: Vec<f64> = trace.records.iter().map(|r| r.d.distance(reference)).collect();
    let mut out = Vec::new();
    for i in 0..dists.len().saturating_sub(1) {
        if dists[i] > floor && dists[i + 1] > floor {
            out.push((trace.records[i].round, dists[i + 1] / dists[i]));
        }
    }
    out
}

/// Uniform occupancy of mass `1/(1−γ)`; a neutral starting point.
pub fn uniform_start(spec: &LinearMdpSpec) -> OccupancyMeasure {
    let n = spec.num_pairs();
    OccupancyMeasure::from_clamped(DVector::from_element(n, spec.occupancy_mass() / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn reference_constants() -> (LinearMdpSpec, SpectralConstants) {
        let spec = LinearMdpSpec::tabular(2, 2, 0.9, vec![0.5, 0.5]).unwrap();
        let c = SpectralConstants {
            kappa: 1.0,
            big_m: 1.0,
            alpha: solver::alpha(&spec),
            m_pinv_norm: 0.0,
        };
        (spec, c)
    }

    #[test]
    fn reference_certificate() {
        let (spec, c) = reference_constants();
        let cert = certify(0.01, 0.0, &c, &spec, 0.1).unwrap();
        assert!((cert.lambda_min - 0.03125).abs() < 1e-12);
        assert!((cert.rate_r().unwrap() - 0.395_284_707_521_047_2).abs() < 1e-9);
        assert!(certify(0.01, 0.0, &c, &spec, 0.02).unwrap().rate_r().is_none());
        let free = certify(0.0, 0.0, &c, &spec, 0.5).unwrap();
        assert_eq!(free.rate_r(), Some(0.0));
        assert_eq!(free.iters_to_delta(1e-9), Some(0));
    }

    #[test]
    fn reference_bounds() {
        let (spec, c) = reference_constants();
        assert!((theorem2_bound(0.01, 0.0, &c, &spec).unwrap() - 1.5625).abs() < 1e-12);
        assert!((theorem3_bound(0.01, 0.0, &c, &spec).unwrap() - 7.1449).abs() < 1e-3);
        assert_eq!(theorem3_bound(0.0, 0.0, &c, &spec).unwrap(), 0.0);
    }

    #[test]
    fn kappa_zero_refused() {
        let (spec, mut c) = reference_constants();
        c.kappa = 0.0;
        assert!(matches!(certify(0.01, 0.0, &c, &spec, 0.1), Err(Error::KappaZero)));
    }

    #[test]
    fn grid_is_lexicographic() {
        let g = simplex_grid(2, 2);
        assert_eq!(g, vec![vec![0.0, 1.0], vec![0.5, 0.5], vec![1.0, 0.0]]);
        assert_eq!(simplex_grid(3, 20).len(), 231);
    }
}
