//! Linear MDP domain types and exact conversions between parameters,
//! policies, occupancy measures and values.
//!
//! Conventions: `Φ` has one row per flattened pair `s * A + a`; the
//! transition matrix is `S × SA` with column `(s,a)` holding `P(·|s,a)`;
//! `μ` is `S × D` so that `P = μ Φᵀ`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::response::ResponseMap;

/// Row mass at or below this is treated as unvisited in [`policy_from_occupancy`].
pub const ZERO_MASS: f64 = 1e-12;
/// Entrywise tolerance for transition kernels and parameter bounds.
pub const KERNEL_TOL: f64 = 1e-9;

/// List of violated invariants; empty when the input is valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.contains(needle))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        write!(f, "{}", self.violations.join("; "))
    }
}

/// Rounds to ten decimals so that messages read `1.1` rather than `1.1000000000000001`.
fn short(x: f64) -> f64 {
    math::round(x * 1e10) / 1e10
}

/// Unvalidated problem data, as read from a file or built by hand.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecDraft {
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    pub start_dist: Vec<f64>,
    pub features: DMatrix<f64>,
}

impl SpecDraft {
    pub fn build(self) -> Result<LinearMdpSpec> {
        let report = validate_spec(&self);
        if !report.is_empty() {
            return Err(Error::InvalidSpec(report));
        }
        Ok(LinearMdpSpec {
            num_states: self.num_states,
            num_actions: self.num_actions,
            discount: self.discount,
            start_dist: DVector::from_vec(self.start_dist),
            features: self.features,
        })
    }
}

/// Checks every [`LinearMdpSpec`] invariant and lists the violations.
pub fn validate_spec(draft: &SpecDraft) -> ValidationReport {
    let mut v = Vec::new();
    let (s, a) = (draft.num_states, draft.num_actions);
    if s == 0 {
        v.push(String::from("num_states must be positive"));
    }
    if a == 0 {
        v.push(String::from("num_actions must be positive"));
    }
    if !(draft.discount >= 0.0) {
        v.push(format!("discount must be >= 0, got {}", draft.discount));
    } else if !(draft.discount < 1.0) {
        v.push(format!("discount must be < 1, got {}", draft.discount));
    }
    if draft.start_dist.len() != s {
        v.push(format!(
            "start_dist has length {}, expected {}",
            draft.start_dist.len(),
            s
        ));
    }
    if let Some(i) = draft.start_dist.iter().position(|&p| !(p >= 0.0)) {
        v.push(format!("start_dist[{}] = {} is negative", i, draft.start_dist[i]));
    }
    let sum: f64 = draft.start_dist.iter().sum();
    if !(math::abs(sum - 1.0) <= 1e-12) {
        v.push(format!("start_dist sums to {}", short(sum)));
    }
    let phi = &draft.features;
    let d = phi.ncols();
    if d == 0 {
        v.push(String::from("feature_dim must be positive"));
    }
    if phi.nrows() != s * a {
        v.push(format!("features have {} rows, expected S*A = {}", phi.nrows(), s * a));
    }
    if phi.iter().any(|x| !x.is_finite()) {
        v.push(String::from("features contain non-finite entries"));
    } else {
        for r in 0..phi.nrows() {
            let n = phi.row(r).norm();
            if n > 1.0 + 1e-12 {
                v.push(format!(
                    "feature row {} (s={}, a={}) has norm {} > 1",
                    r,
                    r / a.max(1),
                    r % a.max(1),
                    short(n)
                ));
            }
        }
        if d > 0 && phi.nrows() > 0 {
            let rk = linalg::rank(phi);
            if rk != d {
                v.push(format!("features have rank {} but feature_dim is {}", rk, d));
            }
        }
    }
    ValidationReport { violations: v }
}

/// Static problem data `(S, A, γ, ρ, Φ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMdpSpec {
    num_states: usize,
    num_actions: usize,
    discount: f64,
    start_dist: DVector<f64>,
    features: DMatrix<f64>,
}

impl LinearMdpSpec {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        discount: f64,
        start_dist: Vec<f64>,
        features: DMatrix<f64>,
    ) -> Result<Self> {
        SpecDraft {
            num_states,
            num_actions,
            discount,
            start_dist,
            features,
        }
        .build()
    }

    /// Identity features, `D = S·A`.
    pub fn tabular(num_states: usize, num_actions: usize, discount: f64, start_dist: Vec<f64>) -> Result<Self> {
        let n = num_states * num_actions;
        Self::new(num_states, num_actions, discount, start_dist, DMatrix::identity(n, n))
    }

    pub fn to_draft(&self) -> SpecDraft {
        SpecDraft {
            num_states: self.num_states,
            num_actions: self.num_actions,
            discount: self.discount,
            start_dist: self.start_dist.iter().copied().collect(),
            features: self.features.clone(),
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn start_dist(&self) -> &DVector<f64> {
        &self.start_dist
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    pub fn phi(&self, s: usize, a: usize) -> DVector<f64> {
        self.features.row(self.pair(s, a)).transpose()
    }

    pub fn is_tabular(&self) -> bool {
        let n = self.num_pairs();
        self.feature_dim() == n && self.features == DMatrix::identity(n, n)
    }

    /// `B` with `B(s; (s',a')) = 1{s = s'}`.
    pub fn flow_matrix(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.num_states, self.num_pairs());
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                b[(s, self.pair(s, a))] = 1.0;
            }
        }
        b
    }

    /// Total mass `1/(1−γ)` of a feasible occupancy measure.
    pub fn occupancy_mass(&self) -> f64 {
        1.0 / (1.0 - self.discount)
    }
}

/// Response-generated parameters `(θ, μ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpParams {
    theta: DVector<f64>,
    mu: DMatrix<f64>,
}

impl MdpParams {
    /// Validates norms and the induced transition kernel against `spec`.
    pub fn new(theta: DVector<f64>, mu: DMatrix<f64>, spec: &LinearMdpSpec) -> Result<Self> {
        let p = MdpParams { theta, mu };
        p.check(spec)?;
        Ok(p)
    }

    fn check(&self, spec: &LinearMdpSpec) -> Result<()> {
        let d = spec.feature_dim();
        if self.theta.len() != d {
            return Err(Error::DimensionMismatch {
                what: "theta",
                expected: d,
                got: self.theta.len(),
            });
        }
        if self.mu.nrows() != spec.num_states() || self.mu.ncols() != d {
            return Err(Error::DimensionMismatch {
                what: "mu (rows*cols)",
                expected: spec.num_states() * d,
                got: self.mu.nrows() * self.mu.ncols(),
            });
        }
        if self.theta.iter().chain(self.mu.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParams(String::from("non-finite entries")));
        }
        let bound = math::sqrt(d as f64);
        if self.theta.norm() > bound + KERNEL_TOL {
            return Err(Error::InvalidParams(format!(
                "theta norm {} exceeds sqrt(D) = {}",
                self.theta.norm(),
                bound
            )));
        }
        if self.mu.norm() > bound + KERNEL_TOL {
            return Err(Error::InvalidParams(format!(
                "mu Frobenius norm {} exceeds sqrt(D) = {}",
                self.mu.norm(),
                bound
            )));
        }
        let p = self.raw_transition(spec);
        for c in 0..p.ncols() {
            check_column(&p, c)?;
        }
        Ok(())
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn mu(&self) -> &DMatrix<f64> {
        &self.mu
    }

    /// `Φθ`.
    pub fn reward(&self, spec: &LinearMdpSpec) -> DVector<f64> {
        spec.features() * &self.theta
    }

    /// `μΦᵀ` without renormalization.
    pub fn raw_transition(&self, spec: &LinearMdpSpec) -> DMatrix<f64> {
        &self.mu * spec.features().transpose()
    }
}

fn check_column(p: &DMatrix<f64>, c: usize) -> Result<()> {
    let col = p.column(c);
    if let Some(i) = col.iter().position(|&x| x < -KERNEL_TOL) {
        return Err(Error::InvalidKernel {
            column: c,
            detail: format!("entry {} is {}", i, col[i]),
        });
    }
    let sum: f64 = col.iter().sum();
    if math::abs(sum - 1.0) > KERNEL_TOL {
        return Err(Error::InvalidKernel {
            column: c,
            detail: format!("column sums to {}", sum),
        });
    }
    Ok(())
}

/// Discounted state-action visitation `d`, flattened as `s * A + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    d: DVector<f64>,
}

impl OccupancyMeasure {
    /// Accepts entries `≥ −1e-9`.
    pub fn new(d: DVector<f64>) -> Result<Self> {
        if let Some(i) = d.iter().position(|x| !x.is_finite() || *x < -KERNEL_TOL) {
            return Err(Error::InvalidOccupancy(format!("entry {} is {}", i, d[i])));
        }
        Ok(OccupancyMeasure { d })
    }

    pub fn from_slice(d: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(d))
    }

    /// Clamps negative entries to zero.
    pub(crate) fn from_clamped(mut d: DVector<f64>) -> Self {
        for x in d.iter_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        OccupancyMeasure { d }
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.d
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.d.sum()
    }

    /// `Φᵀd`.
    pub fn feature_average(&self, spec: &LinearMdpSpec) -> DVector<f64> {
        spec.features().transpose() * &self.d
    }

    pub fn distance(&self, other: &OccupancyMeasure) -> f64 {
        (&self.d - &other.d).norm()
    }

    pub fn scaled(&self, c: f64) -> OccupancyMeasure {
        OccupancyMeasure { d: &self.d * c.max(0.0) }
    }
}

/// Conditional action probabilities, one row per state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pi: DMatrix<f64>,
}

impl Policy {
    pub fn new(pi: DMatrix<f64>) -> Result<Self> {
        for s in 0..pi.nrows() {
            let row = pi.row(s);
            if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::InvalidPolicy(format!("row {} has a negative entry", s)));
            }
            let sum: f64 = row.iter().sum();
            if math::abs(sum - 1.0) > 1e-12 {
                return Err(Error::InvalidPolicy(format!("row {} sums to {}", s, sum)));
            }
        }
        Ok(Policy { pi })
    }

    /// Normalizes each row exactly after construction from nonnegative weights.
    pub(crate) fn from_weights(mut pi: DMatrix<f64>) -> Self {
        for s in 0..pi.nrows() {
            let sum: f64 = pi.row(s).iter().sum();
            let a = pi.ncols() as f64;
            for x in pi.row_mut(s).iter_mut() {
                *x = if sum > 0.0 { *x / sum } else { 1.0 / a };
            }
        }
        Policy { pi }
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Policy {
            pi: DMatrix::from_element(num_states, num_actions, 1.0 / num_actions as f64),
        }
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], num_actions: usize) -> Self {
        let mut pi = DMatrix::zeros(actions.len(), num_actions);
        for (s, &a) in actions.iter().enumerate() {
            pi[(s, a)] = 1.0;
        }
        Policy { pi }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.pi
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.pi[(s, a)]
    }

    pub fn num_states(&self) -> usize {
        self.pi.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.pi.ncols()
    }

    /// `Π` of size `SA × S` with `Π((s,a), s) = π(a|s)`.
    pub fn lift(&self) -> DMatrix<f64> {
        let (s_n, a_n) = self.pi.shape();
        let mut m = DMatrix::zeros(s_n * a_n, s_n);
        for s in 0..s_n {
            for a in 0..a_n {
                m[(s * a_n + a, s)] = self.pi[(s, a)];
            }
        }
        m
    }

    /// `max_s ‖π(·|s) − π'(·|s)‖₁`.
    pub fn max_l1_distance(&self, other: &Policy) -> f64 {
        (0..self.pi.nrows())
            .map(|s| (self.pi.row(s) - other.pi.row(s)).iter().map(|x| math::abs(*x)).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Mixture `(1−w)π + wπ'`.
    pub fn mix(&self, other: &Policy, w: f64) -> Policy {
        Policy::from_weights(&self.pi * (1.0 - w) + &other.pi * w)
    }
}

/// Reward `Φθ` and transition `μΦᵀ` with every column checked and renormalized.
pub fn reconstruct_dynamics(params: &MdpParams, spec: &LinearMdpSpec) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let reward = params.reward(spec);
    let mut p = params.raw_transition(spec);
    for c in 0..p.ncols() {
        check_column(&p, c)?;
        let mut col = p.column_mut(c);
        for x in col.iter_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        let sum: f64 = col.iter().sum();
        col /= sum;
    }
    Ok((reward, p))
}

/// `π^d(a|s) = d(s,a) / Σ_b d(s,b)`, uniform on rows with mass ≤ 1e-12.
///
/// Negative entries are clamped to zero first.
pub fn policy_from_occupancy(d: &OccupancyMeasure, spec: &LinearMdpSpec) -> Policy {
    let (s_n, a_n) = (spec.num_states(), spec.num_actions());
    let mut pi = DMatrix::zeros(s_n, a_n);
    for s in 0..s_n {
        let row: Vec<f64> = (0..a_n).map(|a| d.d[s * a_n + a].max(0.0)).collect();
        let mass: f64 = row.iter().sum();
        for a in 0..a_n {
            pi[(s, a)] = if mass > ZERO_MASS { row[a] / mass } else { 1.0 / a_n as f64 };
        }
    }
    Policy { pi }
}

/// `d = (I − γΠP)⁻¹Πρ` for an explicit `S × SA` kernel.
pub fn occupancy_from_kernel(
    transition: &DMatrix<f64>,
    policy: &Policy,
    start_dist: &DVector<f64>,
    discount: f64,
) -> Result<OccupancyMeasure> {
    let lift = policy.lift();
    let n = lift.nrows();
    if transition.ncols() != n || transition.nrows() != start_dist.len() {
        return Err(Error::DimensionMismatch {
            what: "transition columns",
            expected: n,
            got: transition.ncols(),
        });
    }
    let system = DMatrix::identity(n, n) - (&lift * transition) * discount;
    let rhs = &lift * start_dist;
    let d = linalg::solve(&system, &rhs).ok_or(Error::SingularSystem("occupancy_from_policy"))?;
    Ok(OccupancyMeasure::from_clamped(d))
}

/// Occupancy measure of `policy` in the MDP `params`.
pub fn occupancy_from_policy(policy: &Policy, params: &MdpParams, spec: &LinearMdpSpec) -> Result<OccupancyMeasure> {
    check_policy_shape(policy, spec)?;
    occupancy_from_kernel(&params.raw_transition(spec), policy, spec.start_dist(), spec.discount())
}

fn check_policy_shape(policy: &Policy, spec: &LinearMdpSpec) -> Result<()> {
    if policy.num_states() != spec.num_states() || policy.num_actions() != spec.num_actions() {
        return Err(Error::DimensionMismatch {
            what: "policy (S*A)",
            expected: spec.num_pairs(),
            got: policy.num_states() * policy.num_actions(),
        });
    }
    Ok(())
}

/// `Bd − ρ − γμΦᵀd`.
pub fn bellman_flow_residual(d: &OccupancyMeasure, params: &MdpParams, spec: &LinearMdpSpec) -> DVector<f64> {
    spec.flow_matrix() * &d.d - spec.start_dist() - (params.raw_transition(spec) * &d.d) * spec.discount()
}

/// `⟨d^π, Φθ⟩`, the discounted return from `ρ`.
pub fn value_of_policy(policy: &Policy, params: &MdpParams, spec: &LinearMdpSpec) -> Result<f64> {
    let d = occupancy_from_policy(policy, params, spec)?;
    Ok(d.d.dot(&params.reward(spec)))
}

/// `V^π_π(ρ)` with `π = π^d` evaluated in the environment `response(d)`.
pub fn performative_value(d: &OccupancyMeasure, response: &ResponseMap, spec: &LinearMdpSpec) -> Result<f64> {
    let policy = policy_from_occupancy(d, spec);
    let params = response.apply(d, spec)?;
    value_of_policy(&policy, &params, spec)
}

/// State values `V^π = (I − γP_π)⁻¹ r_π` for an explicit kernel.
pub fn state_values(
    reward: &DVector<f64>,
    transition: &DMatrix<f64>,
    policy: &Policy,
    discount: f64,
) -> Result<DVector<f64>> {
    let (s_n, a_n) = (policy.num_states(), policy.num_actions());
    let mut p_pi = DMatrix::zeros(s_n, s_n);
    let mut r_pi = DVector::zeros(s_n);
    for s in 0..s_n {
        for a in 0..a_n {
            let w = policy.prob(s, a);
            r_pi[s] += w * reward[s * a_n + a];
            for t in 0..s_n {
                p_pi[(s, t)] += w * transition[(t, s * a_n + a)];
            }
        }
    }
    let system = DMatrix::identity(s_n, s_n) - p_pi * discount;
    linalg::solve(&system, &r_pi).ok_or(Error::SingularSystem("state_values"))
}
