//! Random and reference instances.
//!
//! Certified generators keep every response inside the feasible parameter
//! set, so the projection in `ResponseMap::apply` never activates:
//! `‖θ₀‖ + ε_θ/(1−γ) ≤ √D`, `‖μ₀‖_F + ε_μ/(1−γ) ≤ √D`, and every base
//! kernel entry exceeds the largest possible entrywise kernel shift.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::mdp::{LinearMdpSpec, MdpParams, Policy};
use crate::response::{random_affine_matrices, ResponseKind, ResponseMap};
use crate::retraining::{self, ConvergenceCertificate};
use crate::rng::StreamRng;
use crate::solver::{self, SpectralConstants};

/// Random probability vector with all entries bounded away from zero.
pub fn random_distribution(n: usize, rng: &mut StreamRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Random row-stochastic policy.
pub fn random_policy(num_states: usize, num_actions: usize, rng: &mut StreamRng) -> Policy {
    let mut pi = DMatrix::zeros(num_states, num_actions);
    for s in 0..num_states {
        for (a, p) in random_distribution(num_actions, rng).into_iter().enumerate() {
            pi[(s, a)] = p;
        }
    }
    Policy::from_weights(pi)
}

/// `S × cols` column-stochastic matrix with every entry at least `min_entry`.
pub fn random_interior_kernel(num_states: usize, cols: usize, min_entry: f64, rng: &mut StreamRng) -> Result<DMatrix<f64>> {
    let free = 1.0 - num_states as f64 * min_entry;
    if !(free >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "min entry {} infeasible for {} states",
            min_entry, num_states
        )));
    }
    let mut p = DMatrix::zeros(num_states, cols);
    for c in 0..cols {
        for (s, w) in random_distribution(num_states, rng).into_iter().enumerate() {
            p[(s, c)] = min_entry + free * w;
        }
    }
    Ok(p)
}

/// Uniform point of the Euclidean ball of the given radius (direction
/// uniform, radius scaled by a uniform draw).
pub fn random_in_ball(dim: usize, radius: f64, rng: &mut StreamRng) -> DVector<f64> {
    let v = DVector::from_fn(dim, |_, _| 2.0 * rng.uniform() - 1.0);
    let n = v.norm();
    if n == 0.0 {
        return v;
    }
    v * (radius * rng.uniform() / n)
}

/// Random orthogonal `n × n` matrix (QR of a uniform matrix, signs fixed so
/// that `R` has a positive diagonal).
pub fn random_orthogonal(n: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    loop {
        let m = DMatrix::from_fn(n, n, |_, _| 2.0 * rng.uniform() - 1.0);
        let qr = m.qr();
        let r = qr.r();
        if (0..n).any(|i| math::abs(r[(i, i)]) < 1e-6) {
            continue;
        }
        let mut q = qr.q();
        for j in 0..n {
            if r[(j, j)] < 0.0 {
                let mut col = q.column_mut(j);
                col *= -1.0;
            }
        }
        return q;
    }
}

/// `S·A × D` features whose rows are probability vectors. Such features
/// admit valid kernels for any `μ` with column-stochastic columns.
pub fn random_simplex_features(num_pairs: usize, dim: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    let mut phi = DMatrix::zeros(num_pairs, dim);
    for i in 0..num_pairs {
        for (k, w) in random_distribution(dim, rng).into_iter().enumerate() {
            phi[(i, k)] = w;
        }
    }
    phi
}

pub fn uniform_start(num_states: usize) -> Vec<f64> {
    vec![1.0 / num_states as f64; num_states]
}

pub fn random_tabular_spec(num_states: usize, num_actions: usize, discount: f64, rng: &mut StreamRng) -> Result<LinearMdpSpec> {
    LinearMdpSpec::tabular(num_states, num_actions, discount, random_distribution(num_states, rng))
}

/// Square orthogonal features: `κ = 𝔐 = 1` but not tabular.
pub fn random_orthogonal_spec(num_states: usize, num_actions: usize, discount: f64, rng: &mut StreamRng) -> Result<LinearMdpSpec> {
    let n = num_states * num_actions;
    let phi = random_orthogonal(n, rng);
    LinearMdpSpec::new(num_states, num_actions, discount, random_distribution(num_states, rng), phi)
}

/// Low-rank features (`D < S·A` allowed) with simplex rows.
pub fn random_simplex_spec(
    num_states: usize,
    num_actions: usize,
    dim: usize,
    discount: f64,
    rng: &mut StreamRng,
) -> Result<LinearMdpSpec> {
    let phi = random_simplex_features(num_states * num_actions, dim, rng);
    LinearMdpSpec::new(num_states, num_actions, discount, random_distribution(num_states, rng), phi)
}

fn has_simplex_rows(phi: &DMatrix<f64>) -> bool {
    (0..phi.nrows()).all(|i| {
        let row = phi.row(i);
        row.iter().all(|&x| x >= 0.0) && math::abs(row.sum() - 1.0) <= 1e-12
    })
}

/// Random `(θ, μ)` for `spec` with `‖θ‖ ≤ theta_radius`.
///
/// With full-rank square features the kernel `P₀` is drawn first (entries at
/// least `min_entry`) and `μ₀ = P₀ (Φᵀ)⁻¹`; with simplex-row features the
/// columns of `μ` are drawn as distributions directly.
pub fn random_params(spec: &LinearMdpSpec, theta_radius: f64, min_entry: f64, rng: &mut StreamRng) -> Result<MdpParams> {
    let (s_n, d_n, n) = (spec.num_states(), spec.feature_dim(), spec.num_pairs());
    let phi = spec.features();
    let theta = random_in_ball(d_n, theta_radius, rng);
    let mu = if d_n == n && linalg::rank(phi) == n {
        let p0 = random_interior_kernel(s_n, n, min_entry, rng)?;
        p0 * linalg::pinv(phi).transpose()
    } else if has_simplex_rows(phi) {
        random_interior_kernel(s_n, d_n, min_entry, rng)?
    } else {
        return Err(Error::InvalidArgument(String::from(
            "random params need full-rank square or simplex-row features",
        )));
    };
    MdpParams::new(theta, mu, spec)
}

/// Largest entrywise kernel shift an affine response can cause:
/// `ε_μ/(1−γ) · max_i ‖φ_i‖₂`.
pub fn max_kernel_shift(spec: &LinearMdpSpec, eps_mu: f64) -> f64 {
    let phi = spec.features();
    let row_max = (0..phi.nrows()).map(|i| phi.row(i).norm()).fold(0.0f64, f64::max);
    eps_mu * spec.occupancy_mass() * row_max
}

/// Everything needed to run a certified retraining experiment.
#[derive(Debug, Clone)]
pub struct CertifiedInstance {
    pub spec: LinearMdpSpec,
    pub response: ResponseMap,
    pub constants: SpectralConstants,
    pub lambda: f64,
    pub certificate: ConvergenceCertificate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifiedConfig {
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    pub eps_theta: f64,
    pub eps_mu: f64,
    /// Tabular features when true, random orthogonal features otherwise.
    pub tabular: bool,
    pub kind: ResponseKind,
    /// `None` picks `1.25 λ_min`, or 1 when both sensitivities vanish.
    pub lambda: Option<f64>,
}

impl CertifiedConfig {
    pub fn tabular(num_states: usize, num_actions: usize, discount: f64, eps_theta: f64, eps_mu: f64) -> Self {
        CertifiedConfig {
            num_states,
            num_actions,
            discount,
            eps_theta,
            eps_mu,
            tabular: true,
            kind: ResponseKind::AffineInOccupancy,
            lambda: None,
        }
    }
}

/// Random instance whose certificate contracts, with the projection
/// guaranteed inactive.
pub fn random_certified_instance(cfg: &CertifiedConfig, rng: &mut StreamRng) -> Result<CertifiedInstance> {
    let spec = if cfg.tabular {
        random_tabular_spec(cfg.num_states, cfg.num_actions, cfg.discount, rng)?
    } else {
        random_orthogonal_spec(cfg.num_states, cfg.num_actions, cfg.discount, rng)?
    };
    let root_d = math::sqrt(spec.feature_dim() as f64);
    let mass = spec.occupancy_mass();
    let theta_radius = root_d - cfg.eps_theta * mass;
    if !(theta_radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps_theta {} too large for an inactive projection",
            cfg.eps_theta
        )));
    }
    let shift = max_kernel_shift(&spec, cfg.eps_mu);
    let s_n = cfg.num_states as f64;
    let min_entry = if cfg.num_states > 1 { 2.0 * shift + 0.02 / s_n } else { 0.0 };
    if s_n * min_entry >= 1.0 {
        return Err(Error::InvalidArgument(format!("eps_mu {} too large for an interior kernel", cfg.eps_mu)));
    }
    let base = random_params(&spec, theta_radius, min_entry, rng)?;
    if cfg.num_states > 1 && base.mu().norm() + cfg.eps_mu * mass > root_d {
        return Err(Error::InvalidArgument(String::from("mu too close to the norm bound")));
    }
    let (a_theta, a_mu) = random_affine_matrices(&spec, rng);
    let response = match cfg.kind {
        ResponseKind::AffineInOccupancy => ResponseMap::affine(base, a_theta, a_mu, cfg.eps_theta, cfg.eps_mu, &spec)?,
        ResponseKind::PolicyFactored => {
            ResponseMap::policy_factored(base, a_theta, a_mu, cfg.eps_theta, cfg.eps_mu, &spec)?
        }
        ResponseKind::Constant => ResponseMap::constant(base),
        ResponseKind::StackelbergInduced => {
            return Err(Error::InvalidArgument(String::from(
                "Stackelberg instances are built from games",
            )))
        }
    };
    certify_instance(spec, response, cfg.lambda)
}

/// Computes constants and the certificate for an existing response.
pub fn certify_instance(spec: LinearMdpSpec, response: ResponseMap, lambda: Option<f64>) -> Result<CertifiedInstance> {
    let constants = solver::spectral_constants(&spec, response.base_params());
    let (et, em) = (response.eps_theta(), response.eps_mu());
    let lambda = match lambda {
        Some(l) => l,
        None if et == 0.0 && em == 0.0 => 1.0,
        None => retraining::auto_lambda(et, em, &constants, &spec)?,
    };
    let certificate = retraining::certify(et, em, &constants, &spec, lambda)?;
    Ok(CertifiedInstance {
        spec,
        response,
        constants,
        lambda,
        certificate,
    })
}

/// Tabular `S = A = 2`, `γ = 0.9`, `ε_θ = 0.01`, `ε_μ = 0`, `λ = 0.1`, with
/// an affine response drawn from `rng`.
pub fn reference_instance(rng: &mut StreamRng) -> Result<CertifiedInstance> {
    let cfg = CertifiedConfig {
        lambda: Some(0.1),
        ..CertifiedConfig::tabular(2, 2, 0.9, 0.01, 0.0)
    };
    let spec = LinearMdpSpec::tabular(2, 2, 0.9, uniform_start(2))?;
    let theta_radius = 2.0 - 0.01 * spec.occupancy_mass();
    let base = random_params(&spec, theta_radius, 0.05, rng)?;
    let (a_theta, a_mu) = random_affine_matrices(&spec, rng);
    let response = ResponseMap::affine(base, a_theta, a_mu, cfg.eps_theta, cfg.eps_mu, &spec)?;
    certify_instance(spec, response, cfg.lambda)
}

/// `S = 1`, `A = 2`, `γ = 0.5`, tabular, `θ = (1, 0)`.
pub fn two_action_params() -> Result<(LinearMdpSpec, MdpParams)> {
    let spec = LinearMdpSpec::tabular(1, 2, 0.5, vec![1.0])?;
    let params = MdpParams::new(
        DVector::from_vec(vec![1.0, 0.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        &spec,
    )?;
    Ok((spec, params))
}

/// Tiny random instance (`S·A ≤ max_pairs`) with tabular or orthogonal
/// features and random `λ ∈ [0.05, 5]`.
pub fn random_tiny_instance(max_pairs: usize, rng: &mut StreamRng) -> Result<(LinearMdpSpec, MdpParams, f64)> {
    let (s, a) = loop {
        let s = 1 + rng.index(3);
        let a = 1 + rng.index(3);
        if s * a <= max_pairs && s * a >= 2 {
            break (s, a);
        }
    };
    let gamma = 0.3 + 0.6 * rng.uniform();
    let spec = if rng.uniform() < 0.5 {
        random_tabular_spec(s, a, gamma, rng)?
    } else {
        random_orthogonal_spec(s, a, gamma, rng)?
    };
    let params = random_params(&spec, math::sqrt(spec.feature_dim() as f64), 0.0, rng)?;
    let lambda = 0.05 * math::powf(100.0, rng.uniform());
    Ok((spec, params, lambda))
}
