//! Two-agent stochastic Stackelberg games as response maps.
//!
//! The leader plays `π₁`; the follower answers with a Boltzmann policy on
//! its optimal Q-function in the leader-marginalized MDP, which in turn
//! fixes the leader's MDP. Tensors are flattened with `s` major, `a1`
//! middle and `a2` minor; transitions add `s'` as the fastest index.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::mdp::{self, LinearMdpSpec, MdpParams, OccupancyMeasure, Policy};
use crate::response::ResponseMap;
use crate::instances::random_distribution;
use crate::rng::StreamRng;

/// Sup-norm accuracy of value iteration.
pub const VI_TOL: f64 = 1e-10;
const VI_MAX_ITER: usize = 10_000_000;
/// Largest acceptable residual when fitting `(θ, μ)` to the induced MDP.
pub const FIT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct StackelbergGame {
    pub num_states: usize,
    pub num_leader_actions: usize,
    pub num_follower_actions: usize,
    /// Leader reward, index `(s * A1 + a1) * A2 + a2`.
    pub r1: Vec<f64>,
    /// Follower reward, same layout as `r1`.
    pub r2: Vec<f64>,
    /// `P(s'|s,a1,a2)` at `((s * A1 + a1) * A2 + a2) * S + s'`.
    pub transition: Vec<f64>,
    pub gamma: f64,
    pub softmax_beta: f64,
    pub rho: Vec<f64>,
}

impl StackelbergGame {
    pub fn validate(&self) -> Result<()> {
        let (s, a1, a2) = (self.num_states, self.num_leader_actions, self.num_follower_actions);
        if s == 0 || a1 == 0 || a2 == 0 {
            return Err(Error::InvalidArgument(String::from("game sizes must be positive")));
        }
        let n = s * a1 * a2;
        for (what, len, want) in [
            ("r1", self.r1.len(), n),
            ("r2", self.r2.len(), n),
            ("transition", self.transition.len(), n * s),
            ("rho", self.rho.len(), s),
        ] {
            if len != want {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: want,
                    got: len,
                });
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("discount must be < 1, got {}", self.gamma)));
        }
        if !(self.softmax_beta >= 0.0) || !self.softmax_beta.is_finite() {
            return Err(Error::InvalidArgument(format!("softmax_beta must be >= 0, got {}", self.softmax_beta)));
        }
        if self.r1.iter().chain(self.r2.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(String::from("non-finite reward")));
        }
        for k in 0..n {
            let col = &self.transition[k * s..(k + 1) * s];
            let sum: f64 = col.iter().sum();
            if col.iter().any(|&p| p < 0.0) || math::abs(sum - 1.0) > 1e-9 {
                return Err(Error::InvalidKernel {
                    column: k,
                    detail: format!("transition slice sums to {}", sum),
                });
            }
        }
        let rs: f64 = self.rho.iter().sum();
        if self.rho.iter().any(|&p| p < 0.0) || math::abs(rs - 1.0) > 1e-12 {
            return Err(Error::InvalidDistribution(format!("rho sums to {}", rs)));
        }
        Ok(())
    }

    fn idx(&self, s: usize, a1: usize, a2: usize) -> usize {
        (s * self.num_leader_actions + a1) * self.num_follower_actions + a2
    }

    pub fn p(&self, s_next: usize, s: usize, a1: usize, a2: usize) -> f64 {
        self.transition[self.idx(s, a1, a2) * self.num_states + s_next]
    }

    /// `R = max |r_i|` over both agents.
    pub fn reward_scale(&self) -> f64 {
        self.r1.iter().chain(self.r2.iter()).fold(0.0f64, |m, &x| m.max(math::abs(x)))
    }
}

/// Finite MDP with reward indexed `s * A + a` and an `S × (S·A)` kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub reward: DVector<f64>,
    pub transition: DMatrix<f64>,
}

/// Follower MDP with the leader's actions averaged out under `pi1`.
pub fn build_follower_mdp(game: &StackelbergGame, pi1: &Policy) -> TabularMdp {
    let (s_n, a1_n, a2_n) = (game.num_states, game.num_leader_actions, game.num_follower_actions);
    let mut reward = DVector::zeros(s_n * a2_n);
    let mut transition = DMatrix::zeros(s_n, s_n * a2_n);
    for s in 0..s_n {
        for a2 in 0..a2_n {
            let col = s * a2_n + a2;
            for a1 in 0..a1_n {
                let w = pi1.prob(s, a1);
                reward[col] += w * game.r2[game.idx(s, a1, a2)];
                for t in 0..s_n {
                    transition[(t, col)] += w * game.p(t, s, a1, a2);
                }
            }
        }
    }
    TabularMdp {
        num_states: s_n,
        num_actions: a2_n,
        reward,
        transition,
    }
}

/// Leader MDP once the follower plays `pi2`.
pub fn leader_induced_mdp(game: &StackelbergGame, pi2: &Policy) -> TabularMdp {
    let (s_n, a1_n, a2_n) = (game.num_states, game.num_leader_actions, game.num_follower_actions);
    let mut reward = DVector::zeros(s_n * a1_n);
    let mut transition = DMatrix::zeros(s_n, s_n * a1_n);
    for s in 0..s_n {
        for a1 in 0..a1_n {
            let col = s * a1_n + a1;
            for a2 in 0..a2_n {
                let w = pi2.prob(s, a2);
                reward[col] += w * game.r1[game.idx(s, a1, a2)];
                for t in 0..s_n {
                    transition[(t, col)] += w * game.p(t, s, a1, a2);
                }
            }
        }
    }
    TabularMdp {
        num_states: s_n,
        num_actions: a1_n,
        reward,
        transition,
    }
}

/// Optimal Q-function (indexed `s * A + a`) by value iteration, stopped when
/// the a-posteriori bound `γ/(1−γ)·‖Q_{k+1} − Q_k‖∞` drops below `tol`.
/// Also returns the successive update norms.
pub fn value_iteration(mdp: &TabularMdp, gamma: f64, tol: f64) -> Result<(DVector<f64>, Vec<f64>)> {
    let (s_n, a_n) = (mdp.num_states, mdp.num_actions);
    let mut q = DVector::zeros(s_n * a_n);
    let mut updates = Vec::new();
    for _ in 0..VI_MAX_ITER {
        let v = DVector::from_fn(s_n, |s, _| (0..a_n).map(|a| q[s * a_n + a]).fold(f64::NEG_INFINITY, f64::max));
        let next = &mdp.reward + mdp.transition.transpose() * v * gamma;
        let diff = linalg::inf_norm(&(&next - &q));
        q = next;
        updates.push(diff);
        if gamma == 0.0 || diff * gamma / (1.0 - gamma) <= tol {
            return Ok((q, updates));
        }
    }
    Err(Error::NonConvergence(String::from("value iteration")))
}

/// `π₂(a|s) ∝ exp(β Q⋆(s,a))`.
pub fn follower_softmax_response(follower: &TabularMdp, beta: f64, gamma: f64) -> Result<Policy> {
    let (q, _) = value_iteration(follower, gamma, VI_TOL)?;
    let a_n = follower.num_actions;
    let scores = DMatrix::from_fn(follower.num_states, a_n, |s, a| q[s * a_n + a]);
    Ok(Policy::from_weights(linalg::softmax_rows(&scores, beta)))
}

/// Leader MDP induced by the leader policy `pi1`.
pub fn induced_leader_mdp(game: &StackelbergGame, pi1: &Policy) -> Result<TabularMdp> {
    let follower = build_follower_mdp(game, pi1);
    let pi2 = follower_softmax_response(&follower, game.softmax_beta, game.gamma)?;
    Ok(leader_induced_mdp(game, &pi2))
}

/// Payload of a Stackelberg-induced [`ResponseMap`].
#[derive(Debug, Clone)]
pub struct StackelbergResponse {
    game: StackelbergGame,
    phi_pinv: DMatrix<f64>,
    base: MdpParams,
    tabular: bool,
}

impl StackelbergResponse {
    pub fn game(&self) -> &StackelbergGame {
        &self.game
    }

    pub fn base_params(&self) -> &MdpParams {
        &self.base
    }

    pub fn is_tabular(&self) -> bool {
        self.tabular
    }

    /// `(θ, μ)` of the leader MDP induced by `π^d`.
    pub fn induced_params(&self, d: &OccupancyMeasure, spec: &LinearMdpSpec) -> Result<MdpParams> {
        let pi1 = mdp::policy_from_occupancy(d, spec);
        self.params_for_policy(&pi1, spec)
    }

    pub fn params_for_policy(&self, pi1: &Policy, spec: &LinearMdpSpec) -> Result<MdpParams> {
        let leader = induced_leader_mdp(&self.game, pi1)?;
        fit_params(&leader, &self.phi_pinv, spec)
    }
}

fn fit_params(leader: &TabularMdp, phi_pinv: &DMatrix<f64>, spec: &LinearMdpSpec) -> Result<MdpParams> {
    let phi = spec.features();
    let theta = phi_pinv * &leader.reward;
    let mu = &leader.transition * phi_pinv.transpose();
    let res = (phi * &theta - &leader.reward).norm().max((&mu * phi.transpose() - &leader.transition).norm());
    if res > FIT_TOL {
        return Err(Error::FitResidual(res));
    }
    MdpParams::new(theta, mu, spec)
}

/// Per-entry two-agent sensitivity constants `(c_r, c_P)` per unit of L1 policy distance:
/// `2√2 β A₁ A₂^{3/2} R^k / (1−γ)²` with `k = 2` for rewards, `k = 1` for
/// transitions.
pub fn lemma1_constants(game: &StackelbergGame) -> (f64, f64) {
    let g1 = 1.0 - game.gamma;
    let r = game.reward_scale();
    let base = 2.0 * core::f64::consts::SQRT_2 * game.softmax_beta * game.num_leader_actions as f64
        * math::powf(game.num_follower_actions as f64, 1.5)
        / (g1 * g1);
    (base * r * r, base * r)
}

/// L2 bounds on `(‖Δθ‖₂, ‖Δμ‖_F)` for tabular features at L1 policy
/// distance `delta`, summing the per-entry bounds over all entries.
pub fn lemma1_l2_bounds(game: &StackelbergGame, delta: f64) -> (f64, f64) {
    let (cr, cp) = lemma1_constants(game);
    let pairs = (game.num_states * game.num_leader_actions) as f64;
    (
        math::sqrt(pairs) * delta * cr,
        math::sqrt(pairs * game.num_states as f64) * delta * cp,
    )
}

/// Wraps a game as a response map over features `spec`. Declared
/// sensitivities are the two-agent constants; they are marked heuristic unless
/// the features are tabular.
pub fn stackelberg_response_map(game: &StackelbergGame, spec: &LinearMdpSpec) -> Result<ResponseMap> {
    game.validate()?;
    if spec.num_states() != game.num_states || spec.num_actions() != game.num_leader_actions {
        return Err(Error::DimensionMismatch {
            what: "spec pairs vs leader pairs",
            expected: game.num_states * game.num_leader_actions,
            got: spec.num_pairs(),
        });
    }
    if math::abs(spec.discount() - game.gamma) > 0.0 {
        return Err(Error::InvalidArgument(format!(
            "spec discount {} differs from game discount {}",
            spec.discount(),
            game.gamma
        )));
    }
    let phi_pinv = linalg::pinv(spec.features());
    let uniform = Policy::uniform(game.num_states, game.num_leader_actions);
    let leader = induced_leader_mdp(game, &uniform)?;
    let base = fit_params(&leader, &phi_pinv, spec)?;
    let tabular = spec.is_tabular();
    let (cr, cp) = lemma1_constants(game);
    let payload = StackelbergResponse {
        game: game.clone(),
        phi_pinv,
        base,
        tabular,
    };
    Ok(ResponseMap::from_game(payload, cr, cp, !tabular))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma1Report {
    /// `max_s ‖π₁(·|s) − π̃₁(·|s)‖₁`.
    pub delta: f64,
    pub reward_dev: f64,
    pub transition_dev: f64,
    pub reward_bound: f64,
    pub transition_bound: f64,
    pub reward_pass: bool,
    pub transition_pass: bool,
}

impl Lemma1Report {
    pub fn pass(&self) -> bool {
        self.reward_pass && self.transition_pass
    }
}

pub fn lemma1_sensitivity_check(game: &StackelbergGame, pi1: &Policy, pi1_tilde: &Policy) -> Result<Lemma1Report> {
    let delta = pi1.max_l1_distance(pi1_tilde);
    let m1 = induced_leader_mdp(game, pi1)?;
    let m2 = induced_leader_mdp(game, pi1_tilde)?;
    let reward_dev = linalg::inf_norm(&(&m1.reward - &m2.reward));
    let transition_dev = (&m1.transition - &m2.transition).iter().fold(0.0f64, |m, &x| m.max(math::abs(x)));
    let (cr, cp) = lemma1_constants(game);
    let reward_bound = delta * cr;
    let transition_bound = delta * cp;
    Ok(Lemma1Report {
        delta,
        reward_dev,
        transition_dev,
        reward_bound,
        transition_bound,
        reward_pass: reward_dev <= reward_bound + 1e-12,
        transition_pass: transition_dev <= transition_bound + 1e-12,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L1PerturbationReport {
    /// `max_{s,a} ‖P(·|s,a) − P̃(·|s,a)‖₁`.
    pub kernel_dev: f64,
    pub distance: f64,
    /// `kernel_dev · γ / (1−γ)²`.
    pub bound: f64,
    pub pass: bool,
}

pub fn occupancy_l1_perturbation_check(
    p: &DMatrix<f64>,
    p_tilde: &DMatrix<f64>,
    policy: &Policy,
    rho: &DVector<f64>,
    gamma: f64,
) -> Result<L1PerturbationReport> {
    let kernel_dev = (0..p.ncols())
        .map(|c| (p.column(c) - p_tilde.column(c)).iter().map(|x| math::abs(*x)).sum::<f64>())
        .fold(0.0f64, f64::max);
    let d1 = mdp::occupancy_from_kernel(p, policy, rho, gamma)?;
    let d2 = mdp::occupancy_from_kernel(p_tilde, policy, rho, gamma)?;
    let distance: f64 = (d1.as_vector() - d2.as_vector()).iter().map(|x| math::abs(*x)).sum();
    let bound = kernel_dev * gamma / ((1.0 - gamma) * (1.0 - gamma));
    Ok(L1PerturbationReport {
        kernel_dev,
        distance,
        bound,
        pass: distance <= bound + 1e-12,
    })
}

/// Multi-follower constants `3√2 β m A^{3m/2+1} R^k / (1−γ)²` for
/// `(rewards, transitions)`. Only a calculator; no environment implements
/// the welfare-maximizing equilibrium behind them.
pub fn lemma2_bounds(beta: f64, followers: usize, max_actions: usize, reward_scale: f64, gamma: f64) -> (f64, f64) {
    let g1 = 1.0 - gamma;
    let m = followers as f64;
    let base = 3.0 * core::f64::consts::SQRT_2 * beta * m * math::powf(max_actions as f64, 1.5 * m + 1.0) / (g1 * g1);
    (base * reward_scale * reward_scale, base * reward_scale)
}

/// Game with rewards uniform in `[0, 1]` and random kernels.
pub fn random_game(
    num_states: usize,
    a1: usize,
    a2: usize,
    gamma: f64,
    beta: f64,
    rng: &mut StreamRng,
) -> StackelbergGame {
    let n = num_states * a1 * a2;
    let r1 = (0..n).map(|_| rng.uniform()).collect();
    let r2 = (0..n).map(|_| rng.uniform()).collect();
    let mut transition = Vec::with_capacity(n * num_states);
    for _ in 0..n {
        transition.extend(random_distribution(num_states, rng));
    }
    StackelbergGame {
        num_states,
        num_leader_actions: a1,
        num_follower_actions: a2,
        r1,
        r2,
        transition,
        gamma,
        softmax_beta: beta,
        rho: alloc::vec![1.0 / num_states as f64; num_states],
    }
}
