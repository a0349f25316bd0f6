//! Dense convex QP by operator splitting.
//!
//! Solves `min ½xᵀPx + qᵀx  s.t.  l ≤ Ax ≤ u` with the ADMM scheme of
//! Stellato et al. (OSQP): a factored `P + σI + AᵀRA` system per step,
//! over-relaxation, adaptive step `ρ`, and a final active-set polish that
//! solves the reduced KKT system directly to get solutions accurate to
//! round-off. Multipliers follow the convention `Px + q + Aᵀy = 0`, with
//! `y_i < 0` on active lower bounds and `y_i > 0` on active upper bounds.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::linalg::inf_norm;
use crate::math;

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub polish: bool,
    pub check_every: usize,
    pub eps_pinf: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            eps_abs: 1e-10,
            eps_rel: 1e-10,
            max_iter: 200_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            polish: true,
            check_every: 25,
            eps_pinf: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    /// ADMM residuals met the tolerances.
    Solved,
    /// The active-set polish produced a solution meeting the tolerances.
    Polished,
    MaxIterations,
    PrimalInfeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub iterations: usize,
    pub status: QpStatus,
    pub prim_res: f64,
    pub dual_res: f64,
}

fn clamp(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(v.len(), (0..v.len()).map(|i| v[i].max(l[i]).min(u[i])))
}

struct Residuals {
    prim: f64,
    dual: f64,
    eps_prim: f64,
    eps_dual: f64,
    ax_norm: f64,
    z_norm: f64,
    px_norm: f64,
    aty_norm: f64,
    q_norm: f64,
}

impl Residuals {
    fn new(prob: &QpProblem, s: &QpSettings, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> Self {
        let ax = &prob.a * x;
        let px = &prob.p * x;
        let aty = prob.a.transpose() * y;
        let prim = inf_norm(&(&ax - z));
        let dual = inf_norm(&(&px + &prob.q + &aty));
        let (ax_norm, z_norm) = (inf_norm(&ax), inf_norm(z));
        let (px_norm, aty_norm, q_norm) = (inf_norm(&px), inf_norm(&aty), inf_norm(&prob.q));
        Residuals {
            prim,
            dual,
            eps_prim: s.eps_abs + s.eps_rel * ax_norm.max(z_norm),
            eps_dual: s.eps_abs + s.eps_rel * px_norm.max(aty_norm).max(q_norm),
            ax_norm,
            z_norm,
            px_norm,
            aty_norm,
            q_norm,
        }
    }

    fn converged(&self) -> bool {
        self.prim <= self.eps_prim && self.dual <= self.eps_dual
    }
}

struct Kkt {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn factor(prob: &QpProblem, sigma: f64, r: &DVector<f64>) -> Option<Kkt> {
    let n = prob.p.nrows();
    let mut k = &prob.p + DMatrix::identity(n, n) * sigma;
    let mut ra = prob.a.clone();
    for (i, mut row) in ra.row_iter_mut().enumerate() {
        row *= r[i];
    }
    k += prob.a.transpose() * ra;
    let k = (&k + k.transpose()) * 0.5;
    nalgebra::Cholesky::new(k).map(|chol| Kkt { chol })
}

fn rho_vector(prob: &QpProblem, rho: f64) -> DVector<f64> {
    DVector::from_iterator(
        prob.l.len(),
        (0..prob.l.len()).map(|i| {
            let (l, u) = (prob.l[i], prob.u[i]);
            if l == f64::NEG_INFINITY && u == f64::INFINITY {
                1e-6
            } else if u - l <= 1e-14 * (1.0 + math::abs(l)) {
                1e3 * rho
            } else {
                rho
            }
        }),
    )
}

/// Rows considered active at a bound, given the ADMM iterate.
fn active_set(prob: &QpProblem, z: &DVector<f64>, y: &DVector<f64>) -> Vec<(usize, f64)> {
    let mut act = Vec::new();
    for i in 0..z.len() {
        let (l, u) = (prob.l[i], prob.u[i]);
        if u - l <= 1e-14 * (1.0 + math::abs(l)) {
            act.push((i, l));
        } else if l > f64::NEG_INFINITY && z[i] - l < -y[i] {
            act.push((i, l));
        } else if u < f64::INFINITY && u - z[i] < y[i] {
            act.push((i, u));
        }
    }
    act
}

/// Solves the reduced KKT system on the given active set with iterative refinement.
fn polish(prob: &QpProblem, s: &QpSettings, act: &[(usize, f64)]) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, Residuals)> {
    let n = prob.p.nrows();
    let m = prob.a.nrows();
    let k = act.len();
    let scale = prob.p.iter().chain(prob.a.iter()).fold(1e-300f64, |acc, &v| acc.max(math::abs(v)));
    let delta = 1e-11 * scale;
    let mut kkt0 = DMatrix::zeros(n + k, n + k);
    kkt0.view_mut((0, 0), (n, n)).copy_from(&prob.p);
    for (j, &(i, _)) in act.iter().enumerate() {
        for c in 0..n {
            kkt0[(n + j, c)] = prob.a[(i, c)];
            kkt0[(c, n + j)] = prob.a[(i, c)];
        }
    }
    let mut kkt_d = kkt0.clone();
    for i in 0..n {
        kkt_d[(i, i)] += delta;
    }
    for j in 0..k {
        kkt_d[(n + j, n + j)] -= delta;
    }
    let mut rhs = DVector::zeros(n + k);
    for i in 0..n {
        rhs[i] = -prob.q[i];
    }
    for (j, &(_, b)) in act.iter().enumerate() {
        rhs[n + j] = b;
    }
    let lu = kkt_d.full_piv_lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..25 {
        let r = &rhs - &kkt0 * &sol;
        if inf_norm(&r) <= 1e-15 * (1.0 + inf_norm(&rhs)) {
            break;
        }
        let corr = lu.solve(&r)?;
        sol += corr;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let mut y = DVector::zeros(m);
    for (j, &(i, _)) in act.iter().enumerate() {
        y[i] = sol[n + j];
    }
    let ax = &prob.a * &x;
    let z = clamp(&ax, &prob.l, &prob.u);
    let res = Residuals::new(prob, s, &x, &z, &y);
    let sign_tol = 1e-9 * (1.0 + inf_norm(&y));
    for i in 0..m {
        let (l, u) = (prob.l[i], prob.u[i]);
        let eq = u - l <= 1e-14 * (1.0 + math::abs(l));
        if eq {
            continue;
        }
        let at_l = l > f64::NEG_INFINITY && math::abs(ax[i] - l) <= res.eps_prim.max(1e-12);
        let at_u = u < f64::INFINITY && math::abs(u - ax[i]) <= res.eps_prim.max(1e-12);
        if y[i] < -sign_tol && !at_l {
            return None;
        }
        if y[i] > sign_tol && !at_u {
            return None;
        }
    }
    Some((x, y, z, res))
}

/// Runs ADMM from `warm_x` (or zero) until the residual tolerances are met.
pub fn solve_qp(prob: &QpProblem, s: &QpSettings, warm_x: Option<&DVector<f64>>) -> QpSolution {
    let n = prob.p.nrows();
    let m = prob.a.nrows();
    let mut rho = s.rho;
    let mut r = rho_vector(prob, rho);
    let mut kkt = match factor(prob, s.sigma, &r) {
        Some(k) => k,
        None => {
            return QpSolution {
                x: DVector::zeros(n),
                y: DVector::zeros(m),
                z: DVector::zeros(m),
                iterations: 0,
                status: QpStatus::MaxIterations,
                prim_res: f64::INFINITY,
                dual_res: f64::INFINITY,
            }
        }
    };
    let mut x = warm_x.cloned().unwrap_or_else(|| DVector::zeros(n));
    let mut z = clamp(&(&prob.a * &x), &prob.l, &prob.u);
    let mut y: DVector<f64> = DVector::zeros(m);
    let mut last_polish: Option<Vec<(usize, f64)>> = None;
    let mut last = Residuals::new(prob, s, &x, &z, &y);

    for k in 1..=s.max_iter {
        let rz_minus_y = DVector::from_iterator(m, (0..m).map(|i| r[i] * z[i] - y[i]));
        let rhs = &x * s.sigma - &prob.q + prob.a.transpose() * rz_minus_y;
        let xt = kkt.chol.solve(&rhs);
        let zt = &prob.a * &xt;
        let x_new = &xt * s.alpha + &x * (1.0 - s.alpha);
        let zr = &zt * s.alpha + &z * (1.0 - s.alpha);
        let shifted = DVector::from_iterator(m, (0..m).map(|i| zr[i] + y[i] / r[i]));
        let z_new = clamp(&shifted, &prob.l, &prob.u);
        let y_new = DVector::from_iterator(m, (0..m).map(|i| y[i] + r[i] * (zr[i] - z_new[i])));
        let dy = &y_new - &y;
        x = x_new;
        z = z_new;
        y = y_new;

        if k % s.check_every != 0 && k != s.max_iter {
            continue;
        }
        last = Residuals::new(prob, s, &x, &z, &y);

        if s.polish {
            let act = active_set(prob, &z, &y);
            if last_polish.as_ref() != Some(&act) {
                if let Some((px, py, pz, pres)) = polish(prob, s, &act) {
                    if pres.converged() {
                        return QpSolution {
                            x: px,
                            y: py,
                            z: pz,
                            iterations: k,
                            status: QpStatus::Polished,
                            prim_res: pres.prim,
                            dual_res: pres.dual,
                        };
                    }
                }
                last_polish = Some(act);
            }
        }
        if last.converged() {
            return QpSolution {
                x,
                y,
                z,
                iterations: k,
                status: QpStatus::Solved,
                prim_res: last.prim,
                dual_res: last.dual,
            };
        }

        let dy_norm = inf_norm(&dy);
        if dy_norm > 1e-30 {
            let at_dy = inf_norm(&(prob.a.transpose() * &dy));
            let mut support = 0.0;
            let mut unbounded = false;
            for i in 0..m {
                if dy[i] > s.eps_pinf * dy_norm {
                    if prob.u[i] == f64::INFINITY {
                        unbounded = true;
                    } else {
                        support += prob.u[i] * dy[i];
                    }
                } else if dy[i] < -s.eps_pinf * dy_norm {
                    if prob.l[i] == f64::NEG_INFINITY {
                        unbounded = true;
                    } else {
                        support += prob.l[i] * dy[i];
                    }
                }
            }
            if !unbounded && at_dy <= s.eps_pinf * dy_norm && support < -s.eps_pinf * dy_norm {
                return QpSolution {
                    x,
                    y,
                    z,
                    iterations: k,
                    status: QpStatus::PrimalInfeasible,
                    prim_res: last.prim,
                    dual_res: last.dual,
                };
            }
        }

        let num = last.prim / last.ax_norm.max(last.z_norm).max(1e-30);
        let den = last.dual / last.px_norm.max(last.aty_norm).max(last.q_norm).max(1e-30);
        if num > 0.0 && den > 0.0 {
            let new_rho = (rho * math::sqrt(num / den)).clamp(1e-6, 1e6);
            if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                let new_r = rho_vector(prob, new_rho);
                if let Some(f) = factor(prob, s.sigma, &new_r) {
                    rho = new_rho;
                    r = new_r;
                    kkt = f;
                }
            }
        }
    }
    QpSolution {
        x,
        y,
        z,
        iterations: s.max_iter,
        status: QpStatus::MaxIterations,
        prim_res: last.prim,
        dual_res: last.dual,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_constrained_quadratic() {
        // min ½‖x − (2, −1)‖² s.t. 0 ≤ x ≤ 1 → x = (1, 0)
        let prob = QpProblem {
            p: DMatrix::identity(2, 2),
            q: DVector::from_vec(alloc::vec![-2.0, 1.0]),
            a: DMatrix::identity(2, 2),
            l: DVector::zeros(2),
            u: DVector::from_element(2, 1.0),
        };
        let sol = solve_qp(&prob, &QpSettings::default(), None);
        assert!(matches!(sol.status, QpStatus::Solved | QpStatus::Polished));
        assert!((sol.x[0] - 1.0).abs() < 1e-12 && sol.x[1].abs() < 1e-12);
        assert!((sol.y[0] - 1.0).abs() < 1e-10 && (sol.y[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn equality_constrained_lp_like() {
        // min −x₁ + 1e-9‖x‖² s.t. x₁ + x₂ = 1, x ≥ 0 → (1, 0)
        let prob = QpProblem {
            p: DMatrix::identity(2, 2) * 1e-9,
            q: DVector::from_vec(alloc::vec![-1.0, 0.0]),
            a: DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]),
            l: DVector::from_vec(alloc::vec![1.0, 0.0, 0.0]),
            u: DVector::from_vec(alloc::vec![1.0, f64::INFINITY, f64::INFINITY]),
        };
        let sol = solve_qp(&prob, &QpSettings::default(), None);
        assert!(matches!(sol.status, QpStatus::Solved | QpStatus::Polished), "{:?}", sol.status);
        assert!((sol.x[0] - 1.0).abs() < 1e-9 && sol.x[1].abs() < 1e-9);
    }

    #[test]
    fn detects_infeasibility() {
        // x ≥ 1 and x ≤ −1
        let prob = QpProblem {
            p: DMatrix::identity(1, 1),
            q: DVector::zeros(1),
            a: DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            l: DVector::from_vec(alloc::vec![1.0, f64::NEG_INFINITY]),
            u: DVector::from_vec(alloc::vec![f64::INFINITY, -1.0]),
        };
        let sol = solve_qp(&prob, &QpSettings::default(), None);
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }
}
