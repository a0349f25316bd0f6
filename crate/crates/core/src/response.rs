//! Response maps `d ↦ (θ_d, μ_d)`.
//!
//! Affine maps perturb the base parameters linearly in the occupancy measure:
//!
//! ```text
//! θ_d = proj(θ₀ + ε_θ A_θ d)        vec(μ_d) = proj(vec(μ₀) + ε_μ A_μ d)
//! ```
//!
//! where `vec(μ)` is row-major (`s' * D + k`) and `‖A_θ‖₂, ‖A_μ‖₂ ≤ 1`.
//! Policy-factored maps first replace `d` by the occupancy of `π^d` under the
//! base kernel, so occupancies inducing the same policy get the same output.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::mdp::{self, LinearMdpSpec, MdpParams, OccupancyMeasure};
use crate::rng::StreamRng;
use crate::stackelberg::StackelbergResponse;

/// Column tolerance under which a transition column is left untouched.
const PROJECTION_KEEP_TOL: f64 = 1e-12;
/// Largest acceptable residual of the least-squares refit of `μ`.
pub const REFIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResponseKind {
    Constant,
    AffineInOccupancy,
    PolicyFactored,
    StackelbergInduced,
}

impl ResponseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResponseKind::Constant => "constant",
            ResponseKind::AffineInOccupancy => "affine",
            ResponseKind::PolicyFactored => "policy-factored",
            ResponseKind::StackelbergInduced => "stackelberg",
        }
    }

    pub fn parse(s: &str) -> Option<ResponseKind> {
        match s {
            "constant" => Some(ResponseKind::Constant),
            "affine" | "affine-in-occupancy" => Some(ResponseKind::AffineInOccupancy),
            "policy-factored" => Some(ResponseKind::PolicyFactored),
            "stackelberg" | "stackelberg-induced" => Some(ResponseKind::StackelbergInduced),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
enum Payload {
    None,
    Affine {
        a_theta: DMatrix<f64>,
        a_mu: DMatrix<f64>,
    },
    Game(Box<StackelbergResponse>),
}

#[derive(Debug, Clone)]
pub struct ResponseMap {
    kind: ResponseKind,
    eps_theta: f64,
    eps_mu: f64,
    base: MdpParams,
    payload: Payload,
    heuristic: bool,
}

impl ResponseMap {
    pub fn constant(base: MdpParams) -> Self {
        ResponseMap {
            kind: ResponseKind::Constant,
            eps_theta: 0.0,
            eps_mu: 0.0,
            base,
            payload: Payload::None,
            heuristic: false,
        }
    }

    /// Affine map; `a_theta` is `D × SA`, `a_mu` is `(S·D) × SA`, both with
    /// spectral norm at most one.
    pub fn affine(
        base: MdpParams,
        a_theta: DMatrix<f64>,
        a_mu: DMatrix<f64>,
        eps_theta: f64,
        eps_mu: f64,
        spec: &LinearMdpSpec,
    ) -> Result<Self> {
        Self::affine_kind(ResponseKind::AffineInOccupancy, base, a_theta, a_mu, eps_theta, eps_mu, spec)
    }

    /// Same perturbation as [`ResponseMap::affine`], applied to the canonical
    /// occupancy of `π^d` under the base kernel.
    pub fn policy_factored(
        base: MdpParams,
        a_theta: DMatrix<f64>,
        a_mu: DMatrix<f64>,
        eps_theta: f64,
        eps_mu: f64,
        spec: &LinearMdpSpec,
    ) -> Result<Self> {
        Self::affine_kind(ResponseKind::PolicyFactored, base, a_theta, a_mu, eps_theta, eps_mu, spec)
    }

    fn affine_kind(
        kind: ResponseKind,
        base: MdpParams,
        a_theta: DMatrix<f64>,
        a_mu: DMatrix<f64>,
        eps_theta: f64,
        eps_mu: f64,
        spec: &LinearMdpSpec,
    ) -> Result<Self> {
        let (n, d, s) = (spec.num_pairs(), spec.feature_dim(), spec.num_states());
        if a_theta.nrows() != d || a_theta.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "A_theta (rows*cols)",
                expected: d * n,
                got: a_theta.nrows() * a_theta.ncols(),
            });
        }
        if a_mu.nrows() != s * d || a_mu.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "A_mu (rows*cols)",
                expected: s * d * n,
                got: a_mu.nrows() * a_mu.ncols(),
            });
        }
        if !(eps_theta >= 0.0) || !(eps_mu >= 0.0) || !eps_theta.is_finite() || !eps_mu.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sensitivities must be finite and nonnegative, got ({}, {})",
                eps_theta, eps_mu
            )));
        }
        for (name, m) in [("A_theta", &a_theta), ("A_mu", &a_mu)] {
            let norm = linalg::spectral_norm(m);
            if norm > 1.0 + 1e-9 {
                return Err(Error::InvalidArgument(format!("{} has spectral norm {} > 1", name, norm)));
            }
        }
        Ok(ResponseMap {
            kind,
            eps_theta,
            eps_mu,
            base,
            payload: Payload::Affine { a_theta, a_mu },
            heuristic: false,
        })
    }

    pub(crate) fn from_game(game: StackelbergResponse, eps_theta: f64, eps_mu: f64, heuristic: bool) -> Self {
        let base = game.base_params().clone();
        ResponseMap {
            kind: ResponseKind::StackelbergInduced,
            eps_theta,
            eps_mu,
            base,
            payload: Payload::Game(Box::new(game)),
            heuristic,
        }
    }

    pub fn kind(&self) -> ResponseKind {
        self.kind
    }

    pub fn eps_theta(&self) -> f64 {
        self.eps_theta
    }

    pub fn eps_mu(&self) -> f64 {
        self.eps_mu
    }

    pub fn base_params(&self) -> &MdpParams {
        &self.base
    }

    /// Whether the declared sensitivities are heuristic rather than proven.
    pub fn is_heuristic(&self) -> bool {
        self.heuristic
    }

    /// `(A_θ, A_μ)` for affine and policy-factored maps.
    pub fn affine_matrices(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        match &self.payload {
            Payload::Affine { a_theta, a_mu } => Some((a_theta, a_mu)),
            _ => None,
        }
    }

    pub fn game(&self) -> Option<&StackelbergResponse> {
        match &self.payload {
            Payload::Game(g) => Some(g),
            _ => None,
        }
    }

    pub fn apply(&self, d: &OccupancyMeasure, spec: &LinearMdpSpec) -> Result<MdpParams> {
        if d.len() != spec.num_pairs() {
            return Err(Error::DimensionMismatch {
                what: "occupancy measure",
                expected: spec.num_pairs(),
                got: d.len(),
            });
        }
        match (&self.kind, &self.payload) {
            (ResponseKind::Constant, _) => Ok(self.base.clone()),
            (ResponseKind::AffineInOccupancy, Payload::Affine { a_theta, a_mu }) => {
                self.affine_rule(d.as_vector(), a_theta, a_mu, spec)
            }
            (ResponseKind::PolicyFactored, Payload::Affine { a_theta, a_mu }) => {
                let canonical = self.canonical_occupancy(d, spec)?;
                self.affine_rule(canonical.as_vector(), a_theta, a_mu, spec)
            }
            (ResponseKind::StackelbergInduced, Payload::Game(g)) => g.induced_params(d, spec),
            _ => unreachable!("response payload does not match its kind"),
        }
    }

    /// Occupancy of `π^d` under the base kernel.
    pub fn canonical_occupancy(&self, d: &OccupancyMeasure, spec: &LinearMdpSpec) -> Result<OccupancyMeasure> {
        let pi = mdp::policy_from_occupancy(d, spec);
        mdp::occupancy_from_policy(&pi, &self.base, spec)
    }

    fn affine_rule(&self, d: &DVector<f64>, a_theta: &DMatrix<f64>, a_mu: &DMatrix<f64>, spec: &LinearMdpSpec) -> Result<MdpParams> {
        let theta = self.base.theta() + (a_theta * d) * self.eps_theta;
        let dmu = (a_mu * d) * self.eps_mu;
        let (s_n, d_n) = (spec.num_states(), spec.feature_dim());
        let mu = DMatrix::from_fn(s_n, d_n, |s, k| self.base.mu()[(s, k)] + dmu[s * d_n + k]);
        project_params(&theta, &mu, spec)
    }
}

/// Rescales `θ` into the `√D` ball and makes every transition column a
/// probability vector, refitting `μ` by least squares when a column moved.
pub fn project_params(raw_theta: &DVector<f64>, raw_mu: &DMatrix<f64>, spec: &LinearMdpSpec) -> Result<MdpParams> {
    let bound = math::sqrt(spec.feature_dim() as f64);
    let theta = linalg::project_ball(raw_theta, bound);
    let phi = spec.features();
    let mut p = raw_mu * phi.transpose();
    let mut moved = false;
    for c in 0..p.ncols() {
        let col: Vec<f64> = p.column(c).iter().copied().collect();
        let sum: f64 = col.iter().sum();
        let valid = col.iter().all(|&x| x >= -PROJECTION_KEEP_TOL) && math::abs(sum - 1.0) <= PROJECTION_KEEP_TOL;
        if !valid {
            moved = true;
            let proj = linalg::project_simplex(&col);
            for (r, v) in proj.into_iter().enumerate() {
                p[(r, c)] = v;
            }
        }
    }
    let mu = if moved {
        let mu = &p * linalg::pinv(phi).transpose();
        let residual = (&mu * phi.transpose() - &p).norm();
        if residual > REFIT_TOL {
            return Err(Error::ProjectionInfeasible(format!(
                "refit residual {:.3e} exceeds {:.0e}: the features cannot represent the projected kernel",
                residual, REFIT_TOL
            )));
        }
        mu
    } else {
        raw_mu.clone()
    };
    MdpParams::new(theta, mu, spec).map_err(|e| Error::ProjectionInfeasible(format!("{}", e)))
}

/// Largest observed `‖θ_d − θ_{d'}‖₂ / ‖d − d'‖₂` and the Frobenius analogue
/// for `μ` over the given pairs. Pairs with `d = d'` are skipped.
pub fn measure_sensitivity(
    map: &ResponseMap,
    spec: &LinearMdpSpec,
    pairs: &[(OccupancyMeasure, OccupancyMeasure)],
) -> Result<(f64, f64)> {
    let mut eps_t = 0.0f64;
    let mut eps_m = 0.0f64;
    let mut used = 0usize;
    for (d1, d2) in pairs {
        let dist = d1.distance(d2);
        if dist == 0.0 {
            continue;
        }
        used += 1;
        let p1 = map.apply(d1, spec)?;
        let p2 = map.apply(d2, spec)?;
        eps_t = eps_t.max((p1.theta() - p2.theta()).norm() / dist);
        eps_m = eps_m.max((p1.mu() - p2.mu()).norm() / dist);
    }
    if used == 0 {
        return Err(Error::EmptyInput("sensitivity probe pairs with d != d'"));
    }
    Ok((eps_t, eps_m))
}

/// Random `(A_θ, A_μ)` with unit spectral norm.
///
/// Every column of `A_μ` sums to zero over `s'` for each feature index, so
/// the induced kernel perturbation `Δμ Φᵀ` keeps column sums at one.
pub fn random_affine_matrices(spec: &LinearMdpSpec, rng: &mut StreamRng) -> (DMatrix<f64>, DMatrix<f64>) {
    let (s_n, d_n, n) = (spec.num_states(), spec.feature_dim(), spec.num_pairs());
    let mut a_theta = DMatrix::from_fn(d_n, n, |_, _| 2.0 * rng.uniform() - 1.0);
    normalize_spectral(&mut a_theta);
    let mut a_mu = DMatrix::from_fn(s_n * d_n, n, |_, _| 2.0 * rng.uniform() - 1.0);
    if s_n == 1 {
        a_mu.fill(0.0);
    } else {
        for j in 0..n {
            for k in 0..d_n {
                let mean = (0..s_n).map(|s| a_mu[(s * d_n + k, j)]).sum::<f64>() / s_n as f64;
                for s in 0..s_n {
                    a_mu[(s * d_n + k, j)] -= mean;
                }
            }
        }
        normalize_spectral(&mut a_mu);
    }
    (a_theta, a_mu)
}

fn normalize_spectral(m: &mut DMatrix<f64>) {
    let norm = linalg::spectral_norm(m);
    if norm > 0.0 {
        *m /= norm;
    }
}
