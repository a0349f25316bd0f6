//! The regularized occupancy problem
//!
//! ```text
//! max_d  dᵀΦθ − (λ/2)·dᵀΦΦᵀd   s.t.  d ≥ 0,  Bd = ρ + γμΦᵀd
//! ```
//!
//! its dual `F(h,g) = (1/2λ)‖Mh + Φ†g + θ‖² − hᵀρ` with `M = Φ†Bᵀ − γμᵀ`,
//! and the spectral quantities that bound the dual.

use alloc::boxed::Box;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, inf_norm};
use crate::math;
use crate::mdp::{LinearMdpSpec, MdpParams, OccupancyMeasure};
use crate::qp::{self, QpProblem, QpSettings, QpStatus};

pub const DEFAULT_KKT_TOL: f64 = 1e-8;
pub const DEFAULT_GAP_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub kkt_tol: f64,
    pub gap_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            kkt_tol: DEFAULT_KKT_TOL,
            gap_tol: DEFAULT_GAP_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `‖Φθ − λΦΦᵀd + Cᵀh + g‖∞` with `C = B − γμΦᵀ`.
    pub stationarity: f64,
    /// `max(‖Cd − ρ‖∞, max_i(−d_i, 0), max_i(−g_i, 0))`.
    pub feasibility: f64,
    /// `Σ |d_i g_i|`.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.feasibility).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizedSolution {
    pub d: OccupancyMeasure,
    /// `Φᵀd`.
    pub nu: DVector<f64>,
    pub h: DVector<f64>,
    pub g: DVector<f64>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub kkt_residuals: KktResiduals,
    pub iterations: usize,
}

impl RegularizedSolution {
    pub fn duality_gap(&self) -> f64 {
        math::abs(self.primal_objective - self.dual_objective)
    }
}

/// `C = B − γμΦᵀ`, so the flow constraint reads `Cd = ρ`.
pub fn flow_constraint_matrix(params: &MdpParams, spec: &LinearMdpSpec) -> DMatrix<f64> {
    spec.flow_matrix() - params.raw_transition(spec) * spec.discount()
}

/// `dᵀΦθ − (λ/2)‖Φᵀd‖²`.
pub fn regularized_objective(d: &OccupancyMeasure, params: &MdpParams, spec: &LinearMdpSpec, lambda: f64) -> f64 {
    let nu = d.feature_average(spec);
    nu.dot(params.theta()) - 0.5 * lambda * nu.norm_squared()
}

pub fn kkt_residuals(
    d: &DVector<f64>,
    h: &DVector<f64>,
    g: &DVector<f64>,
    params: &MdpParams,
    spec: &LinearMdpSpec,
    lambda: f64,
) -> KktResiduals {
    let phi = spec.features();
    let c = flow_constraint_matrix(params, spec);
    let st = phi * params.theta() - (phi * (phi.transpose() * d)) * lambda + c.transpose() * h + g;
    let flow = inf_norm(&(&c * d - spec.start_dist()));
    let neg_d = d.iter().fold(0.0f64, |m, &x| m.max(-x));
    let neg_g = g.iter().fold(0.0f64, |m, &x| m.max(-x));
    KktResiduals {
        stationarity: inf_norm(&st),
        feasibility: flow.max(neg_d).max(neg_g),
        complementarity: d.iter().zip(g.iter()).map(|(a, b)| math::abs(a * b)).sum(),
    }
}

/// Solves the regularized problem with default options and KKT tolerance `tol`.
pub fn solve_regularized(params: &MdpParams, spec: &LinearMdpSpec, lambda: f64, tol: f64) -> Result<RegularizedSolution> {
    let opts = SolverOptions {
        kkt_tol: tol,
        ..SolverOptions::default()
    };
    solve_regularized_with(params, spec, lambda, &opts, None)
}

/// Solves the regularized problem, optionally starting from a previous `d`.
pub fn solve_regularized_with(
    params: &MdpParams,
    spec: &LinearMdpSpec,
    lambda: f64,
    opts: &SolverOptions,
    warm: Option<&OccupancyMeasure>,
) -> Result<RegularizedSolution> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::NonPositiveLambda(lambda));
    }
    let phi = spec.features();
    let n = spec.num_pairs();
    let s_n = spec.num_states();
    let c = flow_constraint_matrix(params, spec);
    let reward = phi * params.theta();
    let hess = phi * phi.transpose();
    let big_m = { let n = linalg::spectral_norm(phi); n * n };
    // Objective scaling keeps the ADMM step well conditioned across λ.
    let scale = 1.0 / (1.0f64).max(lambda * big_m).max(inf_norm(&reward));

    let mut a = DMatrix::zeros(s_n + n, n);
    a.view_mut((0, 0), (s_n, n)).copy_from(&c);
    a.view_mut((s_n, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    let mut l = DVector::zeros(s_n + n);
    let mut u = DVector::from_element(s_n + n, f64::INFINITY);
    for s in 0..s_n {
        l[s] = spec.start_dist()[s];
        u[s] = spec.start_dist()[s];
    }
    let prob = QpProblem {
        p: &hess * (lambda * scale),
        q: &reward * (-scale),
        a,
        l,
        u,
    };

    let mut eps = 1e-2 * opts.kkt_tol * scale;
    let mut warm_x = warm.map(|w| w.as_vector().clone());
    let mut total_iter = 0usize;
    let mut best: Option<RegularizedSolution> = None;
    for _attempt in 0..3 {
        let settings = QpSettings {
            eps_abs: eps,
            eps_rel: 0.0,
            max_iter: opts.max_iter.saturating_sub(total_iter).max(1),
            ..QpSettings::default()
        };
        let sol = qp::solve_qp(&prob, &settings, warm_x.as_ref());
        total_iter += sol.iterations;
        if sol.status == QpStatus::PrimalInfeasible {
            return Err(Error::InfeasibleModel);
        }
        let h = -sol.y.rows(0, s_n) / scale;
        let mut g: DVector<f64> = -sol.y.rows(s_n, n) / scale;
        for x in g.iter_mut() {
            if *x < 0.0 && *x >= -1e-9 {
                *x = 0.0;
            }
        }
        let d = OccupancyMeasure::from_clamped(sol.x.clone());
        let candidate = assemble(d, h, g, params, spec, lambda, total_iter);
        let ok = candidate.kkt_residuals.max() <= opts.kkt_tol && candidate.duality_gap() <= opts.gap_tol;
        if ok {
            return Ok(candidate);
        }
        let better = match &best {
            None => true,
            Some(b) => candidate.kkt_residuals.max() < b.kkt_residuals.max(),
        };
        if better {
            best = Some(candidate);
        }
        if sol.status == QpStatus::MaxIterations || total_iter >= opts.max_iter {
            break;
        }
        eps *= 1e-2;
        warm_x = Some(sol.x);
    }
    Err(Error::MaxIterations(Box::new(best.expect("at least one attempt"))))
}

fn assemble(
    d: OccupancyMeasure,
    h: DVector<f64>,
    g: DVector<f64>,
    params: &MdpParams,
    spec: &LinearMdpSpec,
    lambda: f64,
    iterations: usize,
) -> RegularizedSolution {
    let nu = d.feature_average(spec);
    let primal_objective = nu.dot(params.theta()) - 0.5 * lambda * nu.norm_squared();
    let dual = dual_objective(&h, &g, params, spec, lambda);
    let kkt = kkt_residuals(d.as_vector(), &h, &g, params, spec, lambda);
    RegularizedSolution {
        d,
        nu,
        h,
        g,
        primal_objective,
        dual_objective: dual,
        kkt_residuals: kkt,
        iterations,
    }
}

/// `M = Φ†Bᵀ − γμᵀ` (`D × S`).
pub fn dual_matrix(params: &MdpParams, spec: &LinearMdpSpec) -> DMatrix<f64> {
    let phi_pinv = linalg::pinv(spec.features());
    phi_pinv * spec.flow_matrix().transpose() - params.mu().transpose() * spec.discount()
}

/// `F(h,g) = (1/2λ)‖Mh + Φ†g + θ‖² − hᵀρ`.
pub fn dual_objective(h: &DVector<f64>, g: &DVector<f64>, params: &MdpParams, spec: &LinearMdpSpec, lambda: f64) -> f64 {
    let inner = dual_inner(h, g, params, spec);
    inner.norm_squared() / (2.0 * lambda) - h.dot(spec.start_dist())
}

fn dual_inner(h: &DVector<f64>, g: &DVector<f64>, params: &MdpParams, spec: &LinearMdpSpec) -> DVector<f64> {
    let phi_pinv = linalg::pinv(spec.features());
    dual_matrix(params, spec) * h + phi_pinv * g + params.theta()
}

/// `(1/λ)(θ + Mh + Φ†g)`, which equals `Φᵀd*` at a KKT point.
pub fn recover_nu_from_duals(h: &DVector<f64>, g: &DVector<f64>, params: &MdpParams, spec: &LinearMdpSpec, lambda: f64) -> DVector<f64> {
    dual_inner(h, g, params, spec) / lambda
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralConstants {
    /// `λ_min(ΦΦᵀ)`, zero when `D < S·A`.
    pub kappa: f64,
    /// `λ_max(ΦᵀΦ)`.
    pub big_m: f64,
    /// `√𝔐 / (√A (1−γ))`.
    pub alpha: f64,
    /// `‖M†‖₂` from the smallest nonzero singular value of `M`.
    pub m_pinv_norm: f64,
}

impl SpectralConstants {
    /// Whether `‖M†‖₂ ≤ α` holds for this instance.
    pub fn m_pinv_within_alpha(&self) -> bool {
        self.m_pinv_norm <= self.alpha + 1e-9
    }
}

/// `α = √𝔐 / (√A (1−γ))` from the features alone.
pub fn alpha(spec: &LinearMdpSpec) -> f64 {
    let big_m = { let n = linalg::spectral_norm(spec.features()); n * n };
    math::sqrt(big_m) / (math::sqrt(spec.num_actions() as f64) * (1.0 - spec.discount()))
}

pub fn spectral_constants(spec: &LinearMdpSpec, params: &MdpParams) -> SpectralConstants {
    let phi = spec.features();
    let sv = linalg::singular_values(phi);
    let big_m = sv.first().map(|s| s * s).unwrap_or(0.0);
    let kappa = if phi.nrows() > phi.ncols() {
        0.0
    } else {
        let smin = sv.last().copied().unwrap_or(0.0);
        if smin > linalg::SVD_CUTOFF * sv[0] {
            smin * smin
        } else {
            0.0
        }
    };
    let m = dual_matrix(params, spec);
    let m_pinv_norm = linalg::smallest_nonzero_singular_value(&m).map(|s| 1.0 / s).unwrap_or(0.0);
    SpectralConstants {
        kappa,
        big_m,
        alpha: math::sqrt(big_m) / (math::sqrt(spec.num_actions() as f64) * (1.0 - spec.discount())),
        m_pinv_norm,
    }
}

/// `α(λα + √D)`.
pub fn dual_norm_bound(lambda: f64, constants: &SpectralConstants, spec: &LinearMdpSpec) -> f64 {
    constants.alpha * (lambda * constants.alpha + math::sqrt(spec.feature_dim() as f64))
}

/// Minimum-norm `h` over all dual optima paired with the primal solution.
///
/// Dual optimality given `d*` means `Cᵀh + g = λΦΦᵀd* − Φθ` with `g ≥ 0` and
/// `g = 0` on the support of `d*`, so the set of optimal `h` is the polyhedron
/// `{(Cᵀh)_i = w_i on supp(d*), (Cᵀh)_i ≤ w_i elsewhere}`. Its least-norm
/// point is found with the QP engine.
pub fn minimum_norm_dual(sol: &RegularizedSolution, params: &MdpParams, spec: &LinearMdpSpec, lambda: f64) -> Result<DVector<f64>> {
    let phi = spec.features();
    let d = sol.d.as_vector();
    let w = (phi * (phi.transpose() * d)) * lambda - phi * params.theta();
    let c = flow_constraint_matrix(params, spec);
    let s_n = spec.num_states();
    let n = spec.num_pairs();
    let mut l = DVector::from_element(n, f64::NEG_INFINITY);
    let u = w.clone();
    for i in 0..n {
        if d[i] > 1e-9 {
            l[i] = w[i];
        }
    }
    let prob = QpProblem {
        p: DMatrix::identity(s_n, s_n),
        q: DVector::zeros(s_n),
        a: c.transpose(),
        l,
        u,
    };
    let settings = QpSettings {
        eps_abs: 1e-12,
        eps_rel: 0.0,
        ..QpSettings::default()
    };
    let out = qp::solve_qp(&prob, &settings, Some(&sol.h));
    match out.status {
        QpStatus::Solved | QpStatus::Polished => Ok(out.x),
        QpStatus::PrimalInfeasible => Err(Error::InfeasibleModel),
        QpStatus::MaxIterations => Err(Error::NonConvergence(alloc::string::String::from("minimum-norm dual"))),
    }
}

/// Norm bound for optima of `min xᵀAx + bᵀx s.t. Qx ≥ d` with `A ⪰ 0` and
/// `Q` of full row rank:
/// `‖b‖/(2σ*) + ‖A‖‖d‖/(σ* λ_min(QQᵀ))`, where `σ*` is the smallest
/// positive eigenvalue of `A`.
pub fn quadratic_solution_norm_bound(a: &DMatrix<f64>, b: &DVector<f64>, q: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    let ev = sym.clone().symmetric_eigen().eigenvalues;
    let top = ev.iter().copied().fold(0.0f64, f64::max);
    let sigma_star = ev
        .iter()
        .copied()
        .filter(|&e| e > linalg::SVD_CUTOFF * top)
        .fold(f64::INFINITY, f64::min);
    let (qmin, _) = linalg::sym_eig_extremes(&(q * q.transpose()));
    b.norm() / (2.0 * sigma_star) + top * d.norm() / (sigma_star * qmin)
}

pub mod oracle {
    //! Independent reference solver for tiny instances: projected-gradient
    //! ascent with the projection onto the feasible polytope computed by
    //! Dykstra's alternating projections.

    use super::*;

    #[derive(Debug, Clone)]
    pub struct OracleResult {
        pub d: OccupancyMeasure,
        pub iterations: usize,
        pub converged: bool,
    }

    /// Largest `S·A` accepted by [`oracle_solve_small`].
    pub const MAX_PAIRS: usize = 8;
    const MAX_OUTER: usize = 1_000_000;
    const MAX_DYKSTRA: usize = 200_000;

    struct Projector {
        c: DMatrix<f64>,
        rho: DVector<f64>,
        g: DMatrix<f64>,
    }

    impl Projector {
        fn affine(&self, x: &DVector<f64>) -> DVector<f64> {
            x - &self.g * (&self.c * x - &self.rho)
        }

        /// Dykstra's method between `{Cx = ρ}` and `{x ≥ 0}`.
        fn project(&self, y: &DVector<f64>) -> (DVector<f64>, bool) {
            let n = y.len();
            let mut x = y.clone();
            let mut p = DVector::zeros(n);
            let mut q = DVector::zeros(n);
            for _ in 0..MAX_DYKSTRA {
                let a = self.affine(&(&x + &p));
                p = &x + &p - &a;
                let b = (&a + &q).map(|v| v.max(0.0));
                q = &a + &q - &b;
                let moved = inf_norm(&(&b - &x));
                x = b;
                if moved <= 1e-15 * (1.0 + inf_norm(&x)) && inf_norm(&(&self.c * &x - &self.rho)) <= 1e-12 {
                    return (x, true);
                }
            }
            (x, false)
        }
    }

    /// Projected-gradient ascent with step `1/L`, `L = λ·λ_max(ΦΦᵀ)`.
    ///
    /// Stops when an ascent step moves `d` by less than `1e-14` (sup norm) or
    /// after 10⁶ steps. `converged` is false if a projection failed to settle
    /// or the step budget ran out.
    pub fn oracle_solve_small(params: &MdpParams, spec: &LinearMdpSpec, lambda: f64) -> Result<OracleResult> {
        if !(lambda > 0.0) {
            return Err(Error::NonPositiveLambda(lambda));
        }
        let n = spec.num_pairs();
        if n > MAX_PAIRS {
            return Err(Error::SizeLimit(alloc::format!("oracle accepts S*A <= {}, got {}", MAX_PAIRS, n)));
        }
        let c = flow_constraint_matrix(params, spec);
        let cct = &c * c.transpose();
        let cct_inv = linalg::spd_inverse(&cct).ok_or(Error::SingularSystem("oracle projector"))?;
        let proj = Projector {
            g: c.transpose() * cct_inv,
            c,
            rho: spec.start_dist().clone(),
        };
        let phi = spec.features();
        let hess = phi * phi.transpose();
        let lip = lambda * linalg::sym_eig_extremes(&hess).1;
        let step = 1.0 / lip;
        let reward = phi * params.theta();
        let start = DVector::from_element(n, spec.occupancy_mass() / n as f64);
        let (mut d, mut ok) = proj.project(&start);
        let mut iterations = 0;
        let mut settled = false;
        let mut history: Vec<f64> = Vec::new();
        for k in 0..MAX_OUTER {
            let grad = &reward - (&hess * &d) * lambda;
            let (next, pok) = proj.project(&(&d + grad * step));
            ok &= pok;
            let moved = inf_norm(&(&next - &d));
            d = next;
            iterations = k + 1;
            if moved <= 1e-14 * (1.0 + inf_norm(&d)) {
                settled = true;
                break;
            }
            if k % 1000 == 0 {
                history.push(moved);
            }
        }
        Ok(OracleResult {
            d: OccupancyMeasure::from_clamped(d),
            iterations,
            converged: ok && settled,
        })
    }
}
