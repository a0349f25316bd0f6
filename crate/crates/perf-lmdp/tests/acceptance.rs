//! Acceptance suite: one line per criterion, `criterion N: PASS|FAIL: detail`.
//!
//! Run with `cargo test -p perf-lmdp --test acceptance -- --nocapture`.
//!
//! Two criteria cannot pass as stated and print FAIL. The test still
//! succeeds for those only when the failure is the known one, checked
//! numerically:
//! - 6: `‖M†‖₂ ≤ α` is violated by construction for full-rank features,
//!   because the all-ones state vector forces `σ_min(M) ≤ √A(1−γ)/√κ`.
//!   The dual-norm bound inherits those violations, and also fails at
//!   vertex optima where every dual solution needs a nonzero multiplier on
//!   `d ≥ 0`.
//! - 8: the prescribed `K·T` inner steps exceed the suite's time budget by
//!   orders of magnitude, measured from the throughput of a short run.
//!
//! Any other failure fails the test.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use perf_lmdp_core::instances::{
    certify_instance, random_certified_instance, random_interior_kernel, random_policy, random_tiny_instance, reference_instance,
    two_action_params, CertifiedConfig, CertifiedInstance,
};
use perf_lmdp_core::mdp::{self, LinearMdpSpec, MdpParams, OccupancyMeasure, Policy};
use perf_lmdp_core::primal_dual::{self, PdConfig};
use perf_lmdp_core::retraining::{self, RetrainOptions};
use perf_lmdp_core::rng::{ModuleId, StreamRng};
use perf_lmdp_core::sampling::{self, FiniteOptions, MSchedule};
use perf_lmdp_core::solver::{self, oracle::oracle_solve_small, SolverOptions};
use perf_lmdp_core::stackelberg::{lemma1_sensitivity_check, occupancy_l1_perturbation_check, random_game, stackelberg_response_map};
use perf_lmdp_core::{DMatrix, DVector, ResponseMap};

/// Wall-clock budget for the whole suite on one core.
const SUITE_BUDGET_SECS: f64 = 600.0;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    /// Set only when a failure has been checked to be the documented one.
    known_gap: Option<String>,
}

impl Outcome {
    fn new(id: u32, name: &'static str, pass: bool, detail: String) -> Self {
        Outcome {
            id,
            name,
            pass,
            detail,
            known_gap: None,
        }
    }
}

fn rng(seed: u64) -> StreamRng {
    StreamRng::new(seed, ModuleId::Instances, 0)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn tight() -> RetrainOptions {
    RetrainOptions {
        solver: SolverOptions {
            kkt_tol: 1e-10,
            ..SolverOptions::default()
        },
        reference: None,
    }
}

fn retrain(inst: &CertifiedInstance, lambda: f64, rounds: usize, stop: f64) -> retraining::Trace {
    let d0 = retraining::uniform_start(&inst.spec);
    retraining::run_repeated_optimization_with(&inst.response, &inst.spec, lambda, &d0, rounds, stop, &tight(), &mut |_| Ok(()))
        .unwrap()
}

// ---------------------------------------------------------------------------
// Test-side oracles, written against the model definitions only.

/// `P_π(s'|s) = Σ_a π(a|s) P(s'|s,a)` and `r_π(s) = Σ_a π(a|s) r(s,a)`.
fn policy_chain(reward: &DVector<f64>, kernel: &DMatrix<f64>, pi: &Policy) -> (DMatrix<f64>, DVector<f64>) {
    let (s_n, a_n) = (pi.num_states(), pi.num_actions());
    let mut p = DMatrix::zeros(s_n, s_n);
    let mut r = DVector::zeros(s_n);
    for s in 0..s_n {
        for a in 0..a_n {
            let w = pi.prob(s, a);
            r[s] += w * reward[s * a_n + a];
            for t in 0..s_n {
                p[(s, t)] += w * kernel[(t, s * a_n + a)];
            }
        }
    }
    (p, r)
}

/// `V^π = (I − γP_π)⁻¹ r_π` by LU.
fn policy_values(reward: &DVector<f64>, kernel: &DMatrix<f64>, pi: &Policy, gamma: f64) -> DVector<f64> {
    let (p, r) = policy_chain(reward, kernel, pi);
    let n = p.nrows();
    let sys = DMatrix::identity(n, n) - p * gamma;
    sys.lu().solve(&r).expect("nonsingular policy evaluation")
}

/// Optimal start value `ρᵀV*` by value iteration.
fn optimal_value(reward: &DVector<f64>, kernel: &DMatrix<f64>, rho: &DVector<f64>, a_n: usize, gamma: f64) -> f64 {
    let s_n = rho.len();
    let mut v = DVector::<f64>::zeros(s_n);
    for _ in 0..200_000 {
        let next = DVector::from_fn(s_n, |s, _| {
            (0..a_n)
                .map(|a| reward[s * a_n + a] + gamma * (0..s_n).map(|t| kernel[(t, s * a_n + a)] * v[t]).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        });
        let change = (&next - &v).amax();
        v = next;
        if change <= 1e-14 {
            break;
        }
    }
    rho.dot(&v)
}

/// Extreme squared singular values of `Φ`: `(κ, 𝔐)`, with `κ = 0` when
/// `D < S·A`.
fn feature_spectrum(phi: &DMatrix<f64>) -> (f64, f64) {
    let sv = phi.clone().svd(false, false).singular_values;
    let hi = sv.max();
    let lo = if phi.nrows() > phi.ncols() { 0.0 } else { sv.min() };
    (lo * lo, hi * hi)
}

fn alpha_of(spec: &LinearMdpSpec, big_m: f64) -> f64 {
    big_m.sqrt() / ((spec.num_actions() as f64).sqrt() * (1.0 - spec.discount()))
}

/// `B(s, (s',a)) = 1{s = s'}`.
fn flow_matrix(spec: &LinearMdpSpec) -> DMatrix<f64> {
    let a_n = spec.num_actions();
    DMatrix::from_fn(spec.num_states(), spec.num_pairs(), |s, i| if i / a_n == s { 1.0 } else { 0.0 })
}

/// Lagrangian of the reparametrized program, term by term.
#[allow(clippy::too_many_arguments)]
fn lagrangian_oracle(
    d: &DVector<f64>,
    nu: &DVector<f64>,
    g: &DVector<f64>,
    omega: &DVector<f64>,
    params: &MdpParams,
    spec: &LinearMdpSpec,
    lambda: f64,
) -> f64 {
    let (s_n, a_n, dim) = (spec.num_states(), spec.num_actions(), spec.feature_dim());
    let gamma = spec.discount();
    let mu = params.mu();
    let mut total = 0.0;
    for k in 0..dim {
        let mut mu_g = 0.0;
        for s in 0..s_n {
            mu_g += mu[(s, k)] * g[s];
        }
        total += nu[k] * (params.theta()[k] + gamma * mu_g - omega[k]);
    }
    total -= 0.5 * lambda * nu.iter().map(|x| x * x).sum::<f64>();
    for s in 0..s_n {
        total += g[s] * spec.start_dist()[s];
        for a in 0..a_n {
            let f = spec.phi(s, a);
            total += d[s * a_n + a] * (f.dot(omega) - g[s]);
        }
    }
    total
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let (spec, params) = two_action_params().unwrap();
    let lambda = 1.0;
    // One state, two actions, θ = (1, 0): mass d₁ + d₂ = 1/(1−γ), and the
    // stationary point of d₁ − (λ/2)(d₁² + d₂²) on that line.
    let mass = 1.0 / (1.0 - spec.discount());
    let d1 = ((1.0 + lambda * mass) / (2.0 * lambda)).clamp(0.0, mass);
    let closed = [d1, mass - d1];
    let sol = solver::solve_regularized(&params, &spec, lambda, 1e-10).unwrap();
    let closed_err = (0..2).map(|i| (sol.d.as_vector()[i] - closed[i]).abs()).fold(0.0, f64::max);
    let mut worst_gap = sol.duality_gap();
    let mut worst_diff: f64 = 0.0;
    let mut r = rng(101);
    for _ in 0..25 {
        let (spec, params, lambda) = random_tiny_instance(8, &mut r).unwrap();
        let sol = solver::solve_regularized(&params, &spec, lambda, 1e-10).unwrap();
        let o = oracle_solve_small(&params, &spec, lambda).unwrap();
        worst_diff = worst_diff.max((sol.d.as_vector() - o.d.as_vector()).amax());
        worst_gap = worst_gap.max(sol.duality_gap());
    }
    let pass = (closed[0] - 1.5).abs() < 1e-15 && closed_err <= 1e-6 && worst_diff <= 1e-5 && worst_gap <= 1e-6;
    Outcome::new(
        1,
        "solver correctness",
        pass,
        format!(
            "closed form ({:.6}, {:.6}) err {:.2e}; oracle max diff {:.2e} over 25; max duality gap {:.2e}",
            closed[0], closed[1], closed_err, worst_diff, worst_gap
        ),
    )
}

fn criterion_2() -> Outcome {
    let inst = reference_instance(&mut rng(4)).unwrap();
    let cert = &inst.certificate;
    let spec = &inst.spec;
    let (kappa, big_m) = feature_spectrum(spec.features());
    let alpha = alpha_of(spec, big_m);
    let gamma = spec.discount();
    let (et, em) = (0.01, 0.0);
    let c = et + alpha * gamma * (spec.feature_dim() as f64).sqrt() * em;
    let lambda_min = 25.0 * c / (8.0 * kappa.sqrt());
    let lambda = 0.1;
    let beta = c / (lambda * kappa.sqrt()) + 4.0 * gamma * em * alpha * alpha / kappa.sqrt();
    let r_formula = 1.25 * beta.sqrt();
    let r = cert.rate_r().unwrap_or(f64::NAN);
    let pass = (r - 0.39528).abs() <= 1e-5
        && (cert.lambda_min - 0.03125).abs() <= 1e-12
        && (r - r_formula).abs() <= 1e-12
        && (cert.lambda_min - lambda_min).abs() <= 1e-12
        && (kappa - 1.0).abs() <= 1e-12
        && (big_m - 1.0).abs() <= 1e-12;
    Outcome::new(
        2,
        "rate and lambda_min formulas",
        pass,
        format!("r {:.9} (test formula {:.9}), lambda_min {:.6}, kappa {} M {}", r, r_formula, cert.lambda_min, kappa, big_m),
    )
}

fn criterion_3() -> Outcome {
    let inst = reference_instance(&mut rng(4)).unwrap();
    let r = inst.certificate.rate_r().unwrap();
    let long = retrain(&inst, inst.lambda, 200, 0.0);
    let d_star = long.final_d().unwrap().clone();
    let worst_ratio = retraining::contraction_ratios(&long, &d_star, 1e-7)
        .into_iter()
        .filter(|(round, _)| *round >= 3)
        .map(|(_, x)| x)
        .fold(0.0f64, f64::max);
    let k = inst.certificate.iters_to_delta(1e-4).unwrap();
    let dist_k = long.records[k - 1].d.distance(&d_star);

    let control = ResponseMap::constant(inst.response.base_params().clone());
    let d0 = retraining::uniform_start(&inst.spec);
    let ctrl = retraining::run_repeated_optimization(&control, &inst.spec, inst.lambda, &d0, 10, 1e-8).unwrap();
    let ctrl_ok = ctrl.converged && ctrl.records.len() == 2 && ctrl.records[1].step_norm <= 1e-8;

    let pass = worst_ratio <= r + 0.05 && dist_k <= 1e-4 && ctrl_ok;
    Outcome::new(
        3,
        "last-iterate convergence",
        pass,
        format!(
            "long run of {} rounds; max ratio {:.4} vs r + 0.05 = {:.4}; dist at round {} = {:.2e}; constant control settled in {} solves",
            long.records.len(),
            worst_ratio,
            r + 0.05,
            k,
            dist_k,
            ctrl.records.len() - 1
        ),
    )
}

fn certified_cfg(seed: u64) -> CertifiedConfig {
    let mut r = rng(seed ^ 0xabc);
    let s = 1 + r.index(3);
    let a = 2 + r.index(2);
    CertifiedConfig {
        tabular: r.uniform() < 0.5,
        ..CertifiedConfig::tabular(s, a, 0.6 + 0.3 * r.uniform(), 0.005 + 0.05 * r.uniform(), 2e-4 * r.uniform())
    }
}

fn criterion_4() -> Outcome {
    let mut worst_ratio: f64 = 0.0;
    let mut worst_oracle_diff: f64 = 0.0;
    let mut all_ok = true;
    for seed in 0..10u64 {
        let mut inst = random_certified_instance(&certified_cfg(1000 + seed), &mut rng(1000 + seed)).unwrap();
        inst.lambda = inst.certificate.lambda_min;
        let trace = retrain(&inst, inst.lambda, 400, 1e-9);
        let d = trace.final_d().unwrap();
        let spec = &inst.spec;
        let params = inst.response.apply(d, spec).unwrap();
        let (reward, kernel) = mdp::reconstruct_dynamics(&params, spec).unwrap();
        let best = optimal_value(&reward, &kernel, spec.start_dist(), spec.num_actions(), spec.discount());
        let gap = best - d.as_vector().dot(&reward);
        let lib = retraining::stability_gap(d, &inst.response, spec, inst.lambda).unwrap();
        worst_oracle_diff = worst_oracle_diff.max((gap - lib.unregularized).abs());

        let (kappa, big_m) = feature_spectrum(spec.features());
        let alpha = alpha_of(spec, big_m);
        let g1 = 1.0 - spec.discount();
        let c = inst.response.eps_theta() + alpha * spec.discount() * (spec.feature_dim() as f64).sqrt() * inst.response.eps_mu();
        let bound = 25.0 * big_m * c / (16.0 * kappa.sqrt() * g1 * g1);
        let lib_bound = retraining::theorem2_bound(inst.response.eps_theta(), inst.response.eps_mu(), &inst.constants, spec).unwrap();
        all_ok &= trace.converged && gap <= bound && gap >= -1e-6 && (bound - lib_bound).abs() <= 1e-9 * bound.max(1.0);
        worst_ratio = worst_ratio.max(gap / bound);
    }
    let pass = all_ok && worst_oracle_diff <= 1e-5;
    Outcome::new(
        4,
        "stability gap bound at lambda_min",
        pass,
        format!(
            "10 instances, max gap/bound {:.3e}; value-iteration oracle vs library gap max diff {:.2e}",
            worst_ratio, worst_oracle_diff
        ),
    )
}

fn tiny_certified(seed: u64) -> CertifiedInstance {
    let mut r = rng(seed ^ 0x77);
    let (s, a) = [(1, 2), (1, 3), (2, 2), (3, 2), (2, 3)][r.index(5)];
    let cfg = CertifiedConfig::tabular(s, a, 0.5 + 0.4 * r.uniform(), 0.01 + 0.05 * r.uniform(), 1e-4 * r.uniform());
    random_certified_instance(&cfg, &mut r).unwrap()
}

fn criterion_5() -> Outcome {
    let grid = 0.05;
    let mut details = Vec::new();
    let mut pass = true;
    for seed in 0..4u64 {
        let mut inst = tiny_certified(500 + seed);
        inst.lambda = inst.certificate.lambda_min;
        let trace = retrain(&inst, inst.lambda, 400, 1e-9);
        let d_s = trace.final_d().unwrap();
        let v_s = mdp::performative_value(d_s, &inst.response, &inst.spec).unwrap();
        let bf = retraining::brute_force_performative_optimum(&inst.response, &inst.spec, grid).unwrap();
        let bound = retraining::theorem3_bound(inst.response.eps_theta(), inst.response.eps_mu(), &inst.constants, &inst.spec).unwrap();
        let slack = retraining::grid_value_slack(&inst.spec, grid);
        let gap = bf.value - v_s;
        pass &= inst.spec.num_pairs() <= 6 && bf.diverged == 0 && gap <= bound + slack;
        details.push(format!("{:.3}<={:.3}", gap, bound + slack));
    }
    Outcome::new(5, "performative optimality gap", pass, format!("gap vs bound+slack: {}", details.join(", ")))
}

fn criterion_6() -> Outcome {
    let mut lemma3_fail = 0usize;
    let mut lemma3_forced = true;
    let mut worst_l3: f64 = 0.0;
    let mut lemma4_ok = true;
    let mut lemma4_inherited = true;
    let mut lemma4_fail = 0usize;
    let mut cross_ok = true;
    let mut worst_l4: f64 = 0.0;
    let mut dual_err: f64 = 0.0;
    let mut svd_route_err: f64 = 0.0;
    let mut svd_route_count = 0usize;
    for seed in 0..50u64 {
        let inst = random_certified_instance(&certified_cfg(6000 + seed), &mut rng(6000 + seed)).unwrap();
        let spec = &inst.spec;
        let params = inst.response.base_params();
        let phi = spec.features();
        let gamma = spec.discount();
        let (kappa, big_m) = feature_spectrum(phi);
        let alpha = alpha_of(spec, big_m);
        let s_n = spec.num_states();

        // Pseudoinverse bound through an independent SVD of M = Φ†Bᵀ − γμᵀ.
        let b = flow_matrix(spec);
        let phi_pinv = phi.clone().pseudo_inverse(1e-12).unwrap();
        let m = &phi_pinv * b.transpose() - params.mu().transpose() * gamma;
        let sv = m.clone().svd(false, false).singular_values;
        let cutoff = 1e-10 * sv.max();
        let smin = sv.iter().copied().filter(|&x| x > cutoff).fold(f64::INFINITY, f64::min);
        let m_pinv = 1.0 / smin;
        cross_ok &= (m_pinv - inst.constants.m_pinv_norm).abs() <= 1e-8 * m_pinv;
        worst_l3 = worst_l3.max(m_pinv / alpha);
        if m_pinv > alpha + 1e-9 {
            lemma3_fail += 1;
            // The all-ones direction: ‖M1‖/‖1‖ ≥ σ_min(M).
            let ones = DVector::from_element(s_n, 1.0);
            let witness = (&m * &ones).norm() / (s_n as f64).sqrt();
            let forced = (1.0 - gamma) * (spec.num_actions() as f64).sqrt() / kappa.sqrt();
            lemma3_forced &= witness <= forced * (1.0 + 1e-9) && (kappa - big_m).abs() <= 1e-9 * big_m;
        }

        // Minimum-norm dual against α(λα + √D).
        let lambda = inst.lambda;
        let sol = solver::solve_regularized(params, spec, lambda, 1e-10).unwrap();
        let h = solver::minimum_norm_dual(&sol, params, spec, lambda).unwrap();
        let d = sol.d.as_vector();
        let w = (phi * (phi.transpose() * d)) * lambda - phi * params.theta();
        let c = &b - params.mu() * phi.transpose() * gamma;
        let ch = c.transpose() * &h;
        for i in 0..spec.num_pairs() {
            let e = if d[i] > 1e-9 { (ch[i] - w[i]).abs() } else { (ch[i] - w[i]).max(0.0) };
            dual_err = dual_err.max(e);
        }
        if d.iter().all(|&x| x > 1e-9) {
            // Full support pins Cᵀh = w, so the least-norm h is (Cᵀ)†w.
            let ls = c.transpose().pseudo_inverse(1e-12).unwrap() * &w;
            svd_route_err = svd_route_err.max((&ls - &h).amax());
            svd_route_count += 1;
        }
        let bound = alpha * (lambda * alpha + (spec.feature_dim() as f64).sqrt());
        worst_l4 = worst_l4.max(h.norm() / bound);
        if h.norm() > bound * (1.0 + 1e-9) {
            lemma4_ok = false;
            lemma4_fail += 1;
            // Same chain of inequalities with the measured ‖M†‖ in place of α.
            let measured = m_pinv * (lambda * m_pinv * spec.start_dist().norm() + params.theta().norm());
            let inherited = m_pinv > alpha && h.norm() <= measured * (1.0 + 1e-9);
            // The chain assumes a dual optimum with g = 0, i.e. Cᵀh = w solvable.
            let ct = c.transpose();
            let fit = &ct * (ct.clone().pseudo_inverse(1e-12).unwrap() * &w);
            let needs_g = (&fit - &w).amax() > 1e-8;
            lemma4_inherited &= inherited || needs_g;
        }
    }
    let checks_ok = cross_ok && dual_err <= 1e-6 && svd_route_err <= 1e-6;
    let pass = checks_ok && lemma3_fail == 0 && lemma4_ok;
    let detail = format!(
        "M-pinv bound violated on {}/50 (max ratio to alpha {:.4}); min-norm dual bound violated on {}/50 (max ratio {:.3}, dual residual {:.1e}, SVD route diff {:.1e} on {} full-support)",
        lemma3_fail,
        worst_l3,
        lemma4_fail,
        worst_l4,
        dual_err,
        svd_route_err,
        svd_route_count
    );
    let mut out = Outcome::new(6, "pseudoinverse and dual norm bounds", pass, detail);
    if !pass && checks_ok && lemma3_forced && lemma4_inherited {
        out.known_gap = Some(String::from(
            "every M-pinv violation is forced by sigma_min(M) <= sqrt(A)(1-gamma)/sqrt(kappa) along the all-ones direction; \
             every dual-bound violation either disappears once the measured M-pinv norm replaces alpha \
             or sits at a vertex optimum where no dual solution has g = 0",
        ));
    }
    out
}

fn random_vec(n: usize, scale: f64, r: &mut StreamRng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * (2.0 * r.uniform() - 1.0))
}

fn lagrangian_setup(seed: u64) -> (LinearMdpSpec, MdpParams, OccupancyMeasure) {
    let mut r = rng(seed);
    let spec = if seed % 2 == 0 {
        perf_lmdp_core::instances::random_tabular_spec(2, 2, 0.8, &mut r).unwrap()
    } else {
        perf_lmdp_core::instances::random_orthogonal_spec(2, 2, 0.8, &mut r).unwrap()
    };
    let params = perf_lmdp_core::instances::random_params(&spec, 1.5, 0.0, &mut r).unwrap();
    let d = mdp::occupancy_from_policy(&random_policy(2, 2, &mut r), &params, &spec).unwrap();
    (spec, params, d)
}

/// Independent `Σ = (1−γ) Σ d(s,a) φφᵀ`.
fn covariance_oracle(d: &OccupancyMeasure, spec: &LinearMdpSpec) -> DMatrix<f64> {
    let mut sigma = DMatrix::zeros(spec.feature_dim(), spec.feature_dim());
    for s in 0..spec.num_states() {
        for a in 0..spec.num_actions() {
            let f = spec.phi(s, a);
            sigma += &f * f.transpose() * (d.as_vector()[spec.pair(s, a)] * (1.0 - spec.discount()));
        }
    }
    sigma
}

fn criterion_7() -> Outcome {
    let mut worst_enum: f64 = 0.0;
    let mut worst_mc: f64 = 0.0;
    let m = 100_000;
    for k in 0..20u64 {
        let (spec, params, d) = lagrangian_setup(7000 + k);
        let mut r = rng(7100 + k);
        let sigma = sampling::expected_covariance(&d, &spec).unwrap();
        let sigma_oracle = covariance_oracle(&d, &spec);
        assert!((&sigma.sigma - &sigma_oracle).amax() <= 1e-12 || sigma.ridge > 0.0);
        let dv = random_vec(spec.num_pairs(), 2.0, &mut r);
        let nu = random_vec(spec.feature_dim(), 1.0, &mut r);
        let g = random_vec(spec.num_states(), 2.0, &mut r);
        let omega = random_vec(spec.feature_dim(), 1.0, &mut r);
        let lambda = 0.7;
        let truth = lagrangian_oracle(&dv, &nu, &g, &omega, &params, &spec, lambda);
        let data = sampling::enumerate_dataset(&d, &params, &spec).unwrap();
        let emp = sampling::empirical_lagrangian(&data, &sigma, &dv, &nu, &g, &omega, &spec, lambda).unwrap();
        worst_enum = worst_enum.max((emp - truth).abs());

        // Hoeffding range of one sample term, computed here from the model.
        let v = sigma.inverse().unwrap() * &nu;
        let reward = params.reward(&spec);
        let mut c: f64 = 0.0;
        for s in 0..spec.num_states() {
            for a in 0..spec.num_actions() {
                let f = spec.phi(s, a);
                for sp in 0..spec.num_states() {
                    let term = v.dot(&f) * (reward[spec.pair(s, a)] + spec.discount() * g[sp] - f.dot(&omega));
                    c = c.max(term.abs());
                }
            }
        }
        c += g.amax();
        let sampled = sampling::sample_dataset(&d, &params, &spec, m, 7200 + k).unwrap();
        let mc = sampling::empirical_lagrangian(&sampled, &sigma, &dv, &nu, &g, &omega, &spec, lambda).unwrap();
        worst_mc = worst_mc.max((mc - truth).abs() / (5.0 * c / (m as f64).sqrt()));
    }
    let pass = worst_enum <= 1e-12 && worst_mc <= 1.0;
    Outcome::new(
        7,
        "empirical Lagrangian",
        pass,
        format!("enumeration max error {:.2e}; Monte Carlo max deviation / envelope {:.3} at m = {}", worst_enum, worst_mc, m),
    )
}

fn criterion_8() -> Outcome {
    let (spec, params) = two_action_params().unwrap();
    let lambda = 1.0;
    let eps = 0.05;
    let behavior = mdp::occupancy_from_policy(&Policy::uniform(1, 2), &params, &spec).unwrap();
    let data = sampling::enumerate_dataset(&behavior, &params, &spec).unwrap();
    let sigma = sampling::expected_covariance(&behavior, &spec).unwrap();
    let b_cov = sampling::coverage_bound_in(&behavior, &params, &spec).unwrap().max(1.0);
    let (k_req, t_req) = primal_dual::theorem5_sizes(eps, &spec, b_cov);
    let best = solver::solve_regularized(&params, &spec, lambda, 1e-10).unwrap().primal_objective;

    // Inner-step throughput from a short run dominated by the ω loop.
    let (t_probe, k_probe) = (20usize, 20_000usize);
    let cfg = PdConfig::with_defaults(&spec, lambda, t_probe, k_probe, b_cov);
    let start = Instant::now();
    primal_dual::run_offline_primal_dual(&data, &sigma, &spec, &cfg, 0).unwrap();
    let per_step = start.elapsed().as_secs_f64() / (t_probe * k_probe) as f64;
    let projected = per_step * k_req as f64 * t_req as f64 * 5.0;

    // What is affordable, for the record.
    let (t_small, k_small) = (800usize, 20usize);
    let gaps: Vec<f64> = (0..5u64)
        .map(|seed| {
            let cfg = PdConfig::with_defaults(&spec, lambda, t_small, k_small, b_cov);
            let res = primal_dual::run_offline_primal_dual(&data, &sigma, &spec, &cfg, seed).unwrap();
            best - primal_dual::mixture_average_feature(&res, &params, &spec, lambda).unwrap().1
        })
        .collect();
    let reduced = median(gaps);

    let affordable = projected <= SUITE_BUDGET_SECS;
    let detail = format!(
        "K = {}, T = {} at eps {} with B = {:.3}; 5 seeds need about {:.2e} s at {:.2e} s per inner step (budget {} s); informational median gap at T = {}, K = {}: {:.4}",
        k_req, t_req, eps, b_cov, projected, per_step, SUITE_BUDGET_SECS, t_small, k_small, reduced
    );
    let mut out = Outcome::new(8, "offline primal-dual at prescribed sizes", false, detail);
    if affordable {
        // Only reachable on a machine roughly 10^4 times faster.
        let gaps: Vec<f64> = (0..5u64)
            .map(|seed| {
                let cfg = PdConfig::with_defaults(&spec, lambda, t_req as usize, k_req as usize, b_cov);
                let res = primal_dual::run_offline_primal_dual(&data, &sigma, &spec, &cfg, seed).unwrap();
                best - primal_dual::mixture_average_feature(&res, &params, &spec, lambda).unwrap().1
            })
            .collect();
        out.pass = median(gaps) <= eps;
    } else {
        out.known_gap = Some(format!("prescribed run exceeds the time budget by a factor {:.1e}", projected / SUITE_BUDGET_SECS));
    }
    out
}

fn criterion_9() -> Outcome {
    let cfg = CertifiedConfig {
        lambda: None,
        ..CertifiedConfig::tabular(2, 2, 0.8, 0.03, 2e-4)
    };
    let inst = random_certified_instance(&cfg, &mut rng(11)).unwrap();
    let d0 = retraining::uniform_start(&inst.spec);
    let d_star = retraining::reference_stable_point(&inst.response, &inst.spec, &inst.certificate, &d0, 1e-6).unwrap();
    let terminal = |m: usize| -> f64 {
        let finals = (0..5u64)
            .map(|seed| {
                let tr = sampling::run_finite_sample_retraining(
                    &inst.response,
                    &inst.spec,
                    inst.lambda,
                    &d0,
                    &MSchedule::Constant(m),
                    30,
                    seed,
                    &FiniteOptions::default(),
                    &mut |_| Ok(()),
                )
                .unwrap();
                assert_eq!(tr.records.len(), 30);
                tr.records.last().unwrap().d.distance(&d_star)
            })
            .collect();
        median(finals)
    };
    let e20 = terminal(20_000);
    let e5 = terminal(5_000);
    let pass = e20 <= 0.05 && e20 <= e5;
    Outcome::new(
        9,
        "finite-sample retraining",
        pass,
        format!("median error at t = 30: {:.4} (m = 20000), {:.4} (m = 5000)", e20, e5),
    )
}

fn criterion_10() -> Outcome {
    let mut lemma1_ok = true;
    let mut checked = 0usize;
    for k in 0..3u64 {
        let g = random_game(3, 2, 3, 0.9, 0.5 + k as f64, &mut rng(10_000 + k));
        let mut r = rng(10_100 + k);
        for _ in 0..200 {
            let rep = lemma1_sensitivity_check(&g, &random_policy(3, 2, &mut r), &random_policy(3, 2, &mut r)).unwrap();
            lemma1_ok &= rep.pass();
            checked += 1;
        }
    }
    let mut l1_ok = true;
    let mut worst_l1: f64 = 0.0;
    let mut r = rng(10_200);
    for _ in 0..100 {
        let p = random_interior_kernel(3, 6, 0.0, &mut r).unwrap();
        let q = random_interior_kernel(3, 6, 0.0, &mut r).unwrap();
        let pi = random_policy(3, 2, &mut r);
        let rho = DVector::from_vec(vec![1.0 / 3.0; 3]);
        let rep = occupancy_l1_perturbation_check(&p, &q, &pi, &rho, 0.9).unwrap();
        l1_ok &= rep.pass;
        worst_l1 = worst_l1.max(rep.distance / rep.bound);
    }
    let g = random_game(2, 2, 2, 0.8, 0.1, &mut rng(12));
    let spec = LinearMdpSpec::tabular(2, 2, g.gamma, g.rho.clone()).unwrap();
    let map = stackelberg_response_map(&g, &spec).unwrap();
    let inst = certify_instance(spec, map, None).unwrap();
    let d0 = retraining::uniform_start(&inst.spec);
    let trace = retraining::run_repeated_optimization(&inst.response, &inst.spec, inst.lambda, &d0, 40, 0.0).unwrap();
    let first_small = trace.records.iter().skip(1).find(|rec| rec.step_norm <= 1e-5).map(|rec| rec.round);
    let pass = lemma1_ok && l1_ok && first_small.is_some();
    Outcome::new(
        10,
        "Stackelberg sensitivity and retraining",
        pass,
        format!(
            "two-agent bounds {} on {} pairs; L1 occupancy bound {} on 100 kernel pairs (max ratio {:.3}); step <= 1e-5 at round {}",
            if lemma1_ok { "hold" } else { "fail" },
            checked,
            if l1_ok { "holds" } else { "fails" },
            worst_l1,
            first_small.map(|x| x.to_string()).unwrap_or_else(|| String::from("none"))
        ),
    )
}

fn criterion_11() -> Outcome {
    let mut worst_d: f64 = 0.0;
    let mut worst_g: f64 = 0.0;
    for seed in 0..20u64 {
        let mut r = rng(11_000 + seed);
        let (s_n, a_n) = (2 + r.index(2), 2 + r.index(2));
        let spec = if seed % 2 == 0 {
            perf_lmdp_core::instances::random_tabular_spec(s_n, a_n, 0.8, &mut r).unwrap()
        } else {
            perf_lmdp_core::instances::random_orthogonal_spec(s_n, a_n, 0.8, &mut r).unwrap()
        };
        let params = perf_lmdp_core::instances::random_params(&spec, 1.5, 0.0, &mut r).unwrap();
        let behavior = mdp::occupancy_from_policy(&random_policy(s_n, a_n, &mut r), &params, &spec).unwrap();
        let data = sampling::enumerate_dataset(&behavior, &params, &spec).unwrap();
        let sinv = sampling::expected_covariance(&behavior, &spec).unwrap().inverse().unwrap();
        let pi = random_policy(s_n, a_n, &mut r);
        let nu = random_vec(spec.feature_dim(), 1.0, &mut r);

        let mut mean = DVector::zeros(spec.num_pairs());
        for (j, t) in data.tuples.iter().enumerate() {
            mean += primal_dual::d_estimator(t, &pi, &nu, &sinv, &spec) * data.weight(j);
        }
        // d^{π,ν}(s,a) = π(a|s)(ρ(s) + γ Σ_k μ(s,k) ν_k).
        let want = DVector::from_fn(spec.num_pairs(), |i, _| {
            let (s, a) = (i / a_n, i % a_n);
            let mu_nu: f64 = (0..spec.feature_dim()).map(|k| params.mu()[(s, k)] * nu[k]).sum();
            pi.prob(s, a) * (spec.start_dist()[s] + spec.discount() * mu_nu)
        });
        worst_d = worst_d.max((&mean - &want).amax() / want.amax().max(1.0));

        // ω⋆ = θ + γμᵀV^π makes g^{π,ω⋆} the state values of π.
        let (reward, kernel) = mdp::reconstruct_dynamics(&params, &spec).unwrap();
        let v = policy_values(&reward, &kernel, &pi, spec.discount());
        let omega_star = params.theta() + params.mu().transpose() * &v * spec.discount();
        let g = primal_dual::g_value(&pi, &omega_star, &spec);
        worst_g = worst_g.max((&g - &v).amax());
    }
    let pass = worst_d <= 1e-8 && worst_g <= 1e-8;
    Outcome::new(
        11,
        "estimator identities",
        pass,
        format!("occupancy estimator bias {:.2e}; value identity error {:.2e}; 20 instances", worst_d, worst_g),
    )
}

fn criterion_12() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("repro.toml");
    fs::write(
        &cfg,
        "driver = \"retrain-finite\"\nseed = 2024\nlambda = \"auto\"\n\n[instance]\nsource = \"random\"\nstates = 3\nactions = 2\ndiscount = 0.8\neps_theta = 0.02\neps_mu = 0.0001\n\n[retrain]\nmax_rounds = 6\n\n[finite]\nm_schedule = 2000\n",
    )
    .unwrap();
    let run = |name: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_perf-lmdp"))
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(String::from_utf8_lossy(&o.stderr).into_owned());
        }
        let read = |p: &Path| fs::read(p).map_err(|e| e.to_string());
        Ok((read(&out.join("trace.jsonl"))?, read(&out.join("summary.csv"))?))
    };
    match (run("first"), run("second")) {
        (Ok(a), Ok(b)) => {
            let lines = String::from_utf8_lossy(&a.0).lines().count();
            let pass = a == b && lines == 6;
            Outcome::new(
                12,
                "reproducibility",
                pass,
                format!("{} trace lines, {} bytes; traces {}", lines, a.0.len(), if a == b { "identical" } else { "differ" }),
            )
        }
        (a, b) => Outcome::new(
            12,
            "reproducibility",
            false,
            format!("run failed: {:?} / {:?}", a.err(), b.err()),
        ),
    }
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let criteria: [fn() -> Outcome; 12] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
        criterion_10,
        criterion_11,
        criterion_12,
    ];
    let mut outcomes = Vec::new();
    for f in criteria {
        let t = Instant::now();
        let o = f();
        println!(
            "criterion {} ({}): {}: {} [{:.1}s]",
            o.id,
            o.name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if let Some(reason) = &o.known_gap {
            println!("criterion {}: known gap: {}", o.id, reason);
        }
        outcomes.push(o);
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("acceptance: {}/12 PASS in {:.1}s", passed, start.elapsed().as_secs_f64());
    let unexplained: Vec<u32> = outcomes.iter().filter(|o| !o.pass && o.known_gap.is_none()).map(|o| o.id).collect();
    assert!(unexplained.is_empty(), "criteria failed without a known cause: {:?}", unexplained);
}
