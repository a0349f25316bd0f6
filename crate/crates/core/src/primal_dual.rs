//! Offline regularized primal-dual solver for the empirical Lagrangian.
//!
//! `d` and `g` are never stored; they are represented through the current
//! policy and the dual iterate:
//!
//! ```text
//! g^{π,ω}(s)   = Σ_a π(a|s) φ(s,a)ᵀω
//! d^{π,ν}(s,a) = π(a|s) (ρ(s) + γ μ(s)ᵀν)
//! ```
//!
//! and `d^{π,ν}` is replaced by a single-tuple unbiased estimate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::mdp::{self, LinearMdpSpec, MdpParams, Policy};
use crate::rng::{self, ModuleId, StreamRng};
use crate::sampling::{CovarianceEstimate, Dataset, Transition};

/// Coverage constant used when none is supplied.
pub const DEFAULT_B_COV: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdConfig {
    pub t_inner: usize,
    pub k: usize,
    pub eta_omega: f64,
    pub eta_pi: f64,
    /// Radius of the ball for `ω`.
    pub w_radius: f64,
    /// Radius of the ball for `ν`.
    pub v_radius: f64,
    pub lambda: f64,
    pub b_cov: f64,
}

impl PdConfig {
    /// Step sizes and radii from `(D, γ, A, B)`:
    /// `η_ω = D√B/√(K(B + (1−γ)⁻²))`, `η_π = √(ln A / T)(1−γ)/D`,
    /// `W = 2D/(1−γ)`, `V = D√B`.
    pub fn with_defaults(spec: &LinearMdpSpec, lambda: f64, t_inner: usize, k: usize, b_cov: f64) -> Self {
        let dim = spec.feature_dim() as f64;
        let g1 = 1.0 - spec.discount();
        let sb = math::sqrt(b_cov);
        PdConfig {
            t_inner,
            k,
            eta_omega: dim * sb / math::sqrt(k as f64 * (b_cov + 1.0 / (g1 * g1))),
            eta_pi: math::sqrt(math::ln(spec.num_actions() as f64) / t_inner as f64) * g1 / dim,
            w_radius: 2.0 * dim / g1,
            v_radius: dim * sb,
            lambda,
            b_cov,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_inner == 0 || self.k == 0 {
            return Err(Error::InvalidArgument(String::from("T_inner and K must be positive")));
        }
        let vals = [self.eta_omega, self.w_radius, self.v_radius, self.lambda, self.b_cov];
        if vals.iter().any(|&x| !(x > 0.0) || !x.is_finite()) || !(self.eta_pi >= 0.0) || !self.eta_pi.is_finite() {
            return Err(Error::InvalidArgument(format!("primal-dual settings must be positive: {:?}", self)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdResult {
    /// `π_1, …, π_T`.
    pub policies: Vec<Policy>,
    pub omegas: Vec<DVector<f64>>,
    pub nus: Vec<DVector<f64>>,
    /// Zero-based index into `policies`.
    pub selected_index: usize,
    pub selected_policy: Policy,
    /// Average of the `ν_ℓ` iterates; [`mixture_average_feature`] gives the
    /// exact mixture feature when the model is known.
    pub nu_tilde: DVector<f64>,
    /// `ν_ℓᵀθ̂ − (λ/2)‖ν_ℓ‖²` with `θ̂ = Σ⁻¹Ê[φr]`.
    pub objective_history: Vec<f64>,
}

/// `g^{π,ω}(s) = Σ_a π(a|s) φ(s,a)ᵀω`.
pub fn g_value(pi: &Policy, omega: &DVector<f64>, spec: &LinearMdpSpec) -> DVector<f64> {
    let q = spec.features() * omega;
    let a_n = spec.num_actions();
    DVector::from_fn(spec.num_states(), |s, _| (0..a_n).map(|a| pi.prob(s, a) * q[s * a_n + a]).sum())
}

/// Single-tuple estimate of `d^{π,ν}`:
/// `π(ã|s̃)(1{s̃ = s0} + γ νᵀΣ⁻¹φ(s,a) 1{s̃ = s'})`.
pub fn d_estimator(t: &Transition, pi: &Policy, nu: &DVector<f64>, sigma_inv: &DMatrix<f64>, spec: &LinearMdpSpec) -> DVector<f64> {
    let a_n = spec.num_actions();
    let lead = spec.discount() * (sigma_inv * nu).dot(&spec.phi(t.s, t.a));
    let mut out = DVector::zeros(spec.num_pairs());
    for a in 0..a_n {
        out[t.s0 * a_n + a] += pi.prob(t.s0, a);
        out[t.s_next * a_n + a] += pi.prob(t.s_next, a) * lead;
    }
    out
}

/// `d^{π,ν}(s,a) = π(a|s)(ρ(s) + γμ(s)ᵀν)` for a known `μ`.
pub fn d_representation(pi: &Policy, nu: &DVector<f64>, params: &MdpParams, spec: &LinearMdpSpec) -> DVector<f64> {
    let a_n = spec.num_actions();
    let mu_nu = params.mu() * nu;
    DVector::from_fn(spec.num_pairs(), |i, _| {
        let (s, a) = (i / a_n, i % a_n);
        pi.prob(s, a) * (spec.start_dist()[s] + spec.discount() * mu_nu[s])
    })
}

/// Stochastic `ω`-gradient `Φᵀd̂ − φφᵀΣ⁻¹ν` from one tuple.
pub fn omega_gradient_sample(
    t: &Transition,
    pi: &Policy,
    nu_prev: &DVector<f64>,
    sigma_inv: &DMatrix<f64>,
    spec: &LinearMdpSpec,
) -> DVector<f64> {
    let d_hat = d_estimator(t, pi, nu_prev, sigma_inv, spec);
    let f = spec.phi(t.s, t.a);
    let proj = f.dot(&(sigma_inv * nu_prev));
    spec.features().transpose() * d_hat - f * proj
}

/// `(1/λ)Σ⁻¹ Ê[φ(r + γ g^{π,ω}(s') − φᵀω)]`, projected onto the ball of
/// `radius` when one is given.
pub fn nu_closed_form(
    dataset: &Dataset,
    sigma_inv: &DMatrix<f64>,
    pi_prev: &Policy,
    omega_prev: &DVector<f64>,
    lambda: f64,
    spec: &LinearMdpSpec,
    radius: Option<f64>,
) -> DVector<f64> {
    let g = g_value(pi_prev, omega_prev, spec);
    let gamma = spec.discount();
    let mut acc = DVector::zeros(spec.feature_dim());
    for (j, t) in dataset.tuples.iter().enumerate() {
        let f = spec.phi(t.s, t.a);
        let target = t.r + gamma * g[t.s_next] - f.dot(omega_prev);
        acc += f * (dataset.weight(j) * target);
    }
    let nu = (sigma_inv * acc) / lambda;
    match radius {
        Some(r) => linalg::project_ball(&nu, r),
        None => nu,
    }
}

/// Per-state softmax of `η_π · scores`.
pub fn policy_update(cumulative_scores: &DMatrix<f64>, eta_pi: f64) -> Policy {
    Policy::from_weights(linalg::softmax_rows(cumulative_scores, eta_pi))
}

fn scores_from(phi_omega: &DVector<f64>, spec: &LinearMdpSpec) -> DMatrix<f64> {
    let a_n = spec.num_actions();
    DMatrix::from_fn(spec.num_states(), a_n, |s, a| phi_omega[s * a_n + a])
}

pub fn run_offline_primal_dual(
    dataset: &Dataset,
    sigma: &CovarianceEstimate,
    spec: &LinearMdpSpec,
    cfg: &PdConfig,
    seed: u64,
) -> Result<PdResult> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    cfg.validate()?;
    dataset.check(spec)?;
    let sinv = sigma.inverse()?;
    let dim = spec.feature_dim();
    let (s_n, a_n) = (spec.num_states(), spec.num_actions());
    let cdf = dataset.weights.as_ref().map(|w| rng::cumulative(w));
    let mut draws = StreamRng::new(seed, ModuleId::PrimalDualInner, 0);

    let theta_hat = {
        let mut acc = DVector::zeros(dim);
        for (j, t) in dataset.tuples.iter().enumerate() {
            acc += spec.phi(t.s, t.a) * (dataset.weight(j) * t.r);
        }
        &sinv * acc
    };

    let mut omega = DVector::zeros(dim);
    let mut nu = DVector::zeros(dim);
    let mut pi = Policy::uniform(s_n, a_n);
    let mut scores = DMatrix::zeros(s_n, a_n);
    let mut policies = Vec::with_capacity(cfg.t_inner);
    let mut omegas = Vec::with_capacity(cfg.t_inner);
    let mut nus = Vec::with_capacity(cfg.t_inner);
    let mut history = Vec::with_capacity(cfg.t_inner);
    for _ell in 1..=cfg.t_inner {
        let mut w = omega.clone();
        let mut avg = DVector::zeros(dim);
        for _k in 0..cfg.k {
            let j = match &cdf {
                Some(c) => draws.categorical(c),
                None => draws.index(dataset.len()),
            };
            let grad = omega_gradient_sample(&dataset.tuples[j], &pi, &nu, &sinv, spec);
            w = linalg::project_ball(&(w - grad * cfg.eta_omega), cfg.w_radius);
            avg += &w;
        }
        let omega_new = avg / cfg.k as f64;
        let nu_new = nu_closed_form(dataset, &sinv, &pi, &omega, cfg.lambda, spec, Some(cfg.v_radius));
        scores += scores_from(&(spec.features() * &omega), spec);
        let pi_new = policy_update(&scores, cfg.eta_pi);
        history.push(nu_new.dot(&theta_hat) - 0.5 * cfg.lambda * nu_new.norm_squared());
        omega = omega_new;
        nu = nu_new;
        pi = pi_new;
        policies.push(pi.clone());
        omegas.push(omega.clone());
        nus.push(nu.clone());
    }
    let mut select = StreamRng::new(seed, ModuleId::PrimalDualSelect, 0);
    let selected_index = select.index(policies.len());
    let nu_tilde = nus.iter().fold(DVector::zeros(dim), |acc, v| acc + v) / nus.len() as f64;
    Ok(PdResult {
        selected_policy: policies[selected_index].clone(),
        policies,
        omegas,
        nus,
        selected_index,
        nu_tilde,
        objective_history: history,
    })
}

/// `ν̃ = (1/T) Σ_ℓ Φᵀ d^{π_ℓ}` in the model `params`, with its regularized
/// objective `⟨ν̃,θ⟩ − (λ/2)‖ν̃‖²`.
pub fn mixture_average_feature(result: &PdResult, params: &MdpParams, spec: &LinearMdpSpec, lambda: f64) -> Result<(DVector<f64>, f64)> {
    if result.policies.is_empty() {
        return Err(Error::EmptyInput("primal-dual policies"));
    }
    let mut acc = DVector::zeros(spec.feature_dim());
    for pi in &result.policies {
        acc += mdp::occupancy_from_policy(pi, params, spec)?.feature_average(spec);
    }
    let nu = acc / result.policies.len() as f64;
    let obj = nu.dot(params.theta()) - 0.5 * lambda * nu.norm_squared();
    Ok((nu, obj))
}

/// Sizes `(K, T)` sufficient for accuracy `ε`:
/// `K = ⌈144D²B(B + (1−γ)⁻²)/ε²⌉`, `T = ⌈576D² ln A / (ε²(1−γ)²)⌉`.
pub fn theorem5_sizes(eps: f64, spec: &LinearMdpSpec, b_cov: f64) -> (u64, u64) {
    let d2 = (spec.feature_dim() * spec.feature_dim()) as f64;
    let g1 = 1.0 - spec.discount();
    let k = 144.0 * d2 * b_cov / (eps * eps) * (b_cov + 1.0 / (g1 * g1));
    let t = 576.0 * d2 / (eps * eps) * math::ln(spec.num_actions() as f64) / (g1 * g1);
    (math::ceil(k) as u64, math::ceil(t).max(1.0) as u64)
}
