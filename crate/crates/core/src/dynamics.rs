//! Learning dynamics of a factorized single-state game.
//!
//! The dynamical state is the joint vector `x = (q, θ)` of local values and
//! mixer parameters. The objective is the policy-weighted squared error
//!
//! ```text
//! L(x) = Σ_a μ(a | q) (y(a) - Q_tot(a; x))²
//! ```
//!
//! whose gradient splits into a policy term `Σ_a ∇μ(a) r(a)²` (only for
//! value-dependent policies) and a value term `-2 Σ_a μ(a) r(a) ∇Q_tot(a)`.
//! This module integrates the gradient flow `ẋ = -∇L(x)`, estimates Hessian
//! quadratic forms by finite differences and classifies zero-loss points.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::{self, MixerMode, MixerParams, MixingWeights, QVector, StateVector};
use crate::game::{self, GameSpec, JointAction};
use crate::math;
use crate::policy::{self, PolicyKind};

pub const DEFAULT_TEMPERATURE: f64 = 0.05;
/// Singular values above this count toward the normal-subspace rank.
pub const RANK_THRESHOLD: f64 = 1e-8;
pub const FIXED_POINT_GRAD_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub q: QVector,
    pub params: MixerParams,
    pub time: f64,
}

impl FlowState {
    pub fn new(q: QVector, params: MixerParams) -> Self {
        Self { q, params, time: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.q.len() + self.params.len()
    }

    /// `(q, θ)` concatenated.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut x = self.q.entries().to_vec();
        x.extend_from_slice(self.params.data());
        x
    }

    pub fn set_flat(&mut self, x: &[f64]) {
        let nq = self.q.len();
        self.q.entries_mut().copy_from_slice(&x[..nq]);
        self.params.data_mut().copy_from_slice(&x[nq..]);
    }

    pub fn with_flat(&self, x: &[f64]) -> Self {
        let mut s = self.clone();
        s.set_flat(x);
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Attractor,
    Saddle,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipProbe {
    pub agent: usize,
    pub from: usize,
    pub to: usize,
    /// `vᵀHv` for `v = e_{agent,to} - e_{agent,from}` (unnormalized).
    pub quadratic_form: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub point: FlowState,
    pub temperature: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Spectrum of the Hessian compressed onto the span of all probe directions.
    pub eigenvalues: Vec<f64>,
    pub min_eigenvalue: f64,
    /// Rayleigh quotients along each probe direction: the normal-subspace basis
    /// first, then the action flips.
    pub probe_values: Vec<f64>,
    pub flips: Vec<FlipProbe>,
    pub singular_values: Vec<f64>,
    pub manifold_normal_rank: usize,
    pub classification: Classification,
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    pub time: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub greedy: JointAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyEvent {
    pub time: f64,
    pub from: JointAction,
    pub to: JointAction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TimeLimit,
    GradientTolerance,
    LossTolerance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub samples: Vec<FlowSample>,
    pub events: Vec<GreedyEvent>,
    pub final_state: FlowState,
    pub stop: StopReason,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl FlowTrace {
    pub fn final_loss(&self) -> f64 {
        self.samples.last().map_or(f64::NAN, |s| s.loss)
    }

    pub fn final_greedy(&self) -> JointAction {
        factorization::greedy_joint(&self.final_state.q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    /// Stop once `|∇L| < grad_tol` (0 disables).
    pub grad_tol: f64,
    /// Stop once `L < loss_tol` (0 disables).
    pub loss_tol: f64,
    /// Record a sample every this many steps (the first and last step are always recorded).
    pub sample_every: usize,
    /// Step-doubling error control with loss-increase rejection. When off,
    /// every step is a plain RK4 step of size `dt`.
    pub step_control: bool,
}

impl Default for StopRule {
    fn default() -> Self {
        Self { grad_tol: 1e-10, loss_tol: 0.0, sample_every: 100, step_control: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossGradient {
    pub total: Vec<f64>,
    pub policy_term: Vec<f64>,
    pub value_term: Vec<f64>,
}

/// Loss landscape of one game/mixer pair over flat coordinates `(q, θ)`.
#[derive(Clone, Debug)]
pub struct Landscape<'a> {
    game: &'a GameSpec,
    mode: MixerMode,
    template: FlowState,
    state: StateVector,
    inputs_index: Vec<Vec<usize>>,
}

impl<'a> Landscape<'a> {
    pub fn new(game: &'a GameSpec, mode: MixerMode, template: &FlowState) -> Result<Self> {
        if template.q.action_counts() != game.action_counts() {
            return Err(Error::Dimension { what: "q vector", expected: game.q_len(), found: template.q.len() });
        }
        if mode != MixerMode::Additive {
            if template.params.n_agents() != game.n_agents() {
                return Err(Error::Dimension {
                    what: "mixer agent count",
                    expected: game.n_agents(),
                    found: template.params.n_agents(),
                });
            }
            if template.params.state_dim() != 1 {
                return Err(Error::Dimension { what: "state vector", expected: template.params.state_dim(), found: 1 });
            }
        }
        let inputs_index = game
            .joint_actions()
            .map(|a| a.actions().iter().enumerate().map(|(i, &ai)| template.q.coord(i, ai)).collect())
            .collect();
        Ok(Self { game, mode, template: template.clone(), state: StateVector::unit(), inputs_index })
    }

    pub fn dim(&self) -> usize {
        self.template.dim()
    }

    pub fn q_len(&self) -> usize {
        self.template.q.len()
    }

    fn state_at(&self, x: &[f64]) -> FlowState {
        self.template.with_flat(x)
    }

    fn residuals(&self, fs: &FlowState, weights: &MixingWeights) -> Vec<f64> {
        let targets = &self.game.payoffs().values;
        self.inputs_index
            .iter()
            .zip(targets)
            .map(|(idx, &y)| {
                let u: Vec<f64> = idx.iter().map(|&k| fs.q.entries()[k]).collect();
                y - weights.value(&u)
            })
            .collect()
    }

    fn weights(&self, fs: &FlowState) -> MixingWeights {
        MixingWeights::generate(self.mode, &fs.params, &self.state).expect("landscape shapes checked")
    }

    fn policy_weights(&self, q: &QVector, policy: &PolicyKind) -> Result<Vec<f64>> {
        match policy {
            PolicyKind::EpsilonGreedy { .. } => Err(Error::Unsupported("ε-greedy is not differentiable; use softmax or uniform")),
            _ => policy::joint_distribution(policy, q),
        }
    }

    pub fn loss(&self, x: &[f64], policy: &PolicyKind) -> Result<f64> {
        let fs = self.state_at(x);
        let mu = self.policy_weights(&fs.q, policy)?;
        let r = self.residuals(&fs, &self.weights(&fs));
        Ok(mu.iter().zip(&r).map(|(m, r)| m * r * r).sum())
    }

    /// Loss under the deterministic greedy policy: `r(g(q))²`.
    pub fn greedy_loss(&self, x: &[f64]) -> f64 {
        let fs = self.state_at(x);
        let g = factorization::greedy_joint(&fs.q);
        let idx = self.game.index_unchecked(g.actions());
        let r = self.residuals(&fs, &self.weights(&fs));
        r[idx] * r[idx]
    }

    /// `∇L` for a joint-action weighting `mu` with optional policy term.
    fn weighted_gradient(&self, fs: &FlowState, mu: &[f64], policy: &PolicyKind) -> LossGradient {
        let dim = fs.dim();
        let nq = fs.q.len();
        let weights = self.weights(fs);
        let mut value_term = vec![0.0; dim];
        let mut policy_term = vec![0.0; dim];
        let mut du = vec![0.0; self.game.n_agents()];
        let probs = match policy {
            PolicyKind::Softmax { .. } => Some(policy.all_agent_probabilities(&fs.q).expect("validated")),
            _ => None,
        };
        let targets = &self.game.payoffs().values;
        for (a_idx, idx) in self.inputs_index.iter().enumerate() {
            let u: Vec<f64> = idx.iter().map(|&k| fs.q.entries()[k]).collect();
            let trace = weights.forward(&u);
            let r = targets[a_idx] - trace.value;
            if mu[a_idx] != 0.0 {
                let (gq, gp) = value_term.split_at_mut(nq);
                weights.backward(&u, &trace, -2.0 * mu[a_idx] * r, &self.state, &mut du, Some(gp), &fs.params);
                for (&k, d) in idx.iter().zip(&du) {
                    gq[k] += d;
                }
            }
            if let (Some(probs), PolicyKind::Softmax { temperature }) = (&probs, policy) {
                let scale = mu[a_idx] * r * r / temperature;
                if scale != 0.0 {
                    for (i, p) in probs.iter().enumerate() {
                        let o = fs.q.offset(i);
                        let ai = idx[i] - o;
                        for (b, &pb) in p.iter().enumerate() {
                            let ind = if b == ai { 1.0 } else { 0.0 };
                            policy_term[o + b] += scale * (ind - pb);
                        }
                    }
                }
            }
        }
        let total = value_term.iter().zip(&policy_term).map(|(v, p)| v + p).collect();
        LossGradient { total, policy_term, value_term }
    }

    pub fn gradient(&self, x: &[f64], policy: &PolicyKind) -> Result<LossGradient> {
        let fs = self.state_at(x);
        let mu = self.policy_weights(&fs.q, policy)?;
        Ok(self.weighted_gradient(&fs, &mu, policy))
    }

    /// Gradient of [`Landscape::greedy_loss`] (greedy action held fixed).
    pub fn greedy_gradient(&self, x: &[f64]) -> Vec<f64> {
        let fs = self.state_at(x);
        let g = factorization::greedy_joint(&fs.q);
        let mut mu = vec![0.0; self.game.n_joint()];
        mu[self.game.index_unchecked(g.actions())] = 1.0;
        self.weighted_gradient(&fs, &mu, &PolicyKind::Uniform).total
    }

    /// Rows `∇Q_tot(a; x)` for every joint action.
    pub fn constraint_jacobian(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let fs = self.state_at(x);
        let nq = fs.q.len();
        let weights = self.weights(&fs);
        let mut du = vec![0.0; self.game.n_agents()];
        self.inputs_index
            .iter()
            .map(|idx| {
                let u: Vec<f64> = idx.iter().map(|&k| fs.q.entries()[k]).collect();
                let trace = weights.forward(&u);
                let mut row = vec![0.0; fs.dim()];
                weights.backward(&u, &trace, 1.0, &self.state, &mut du, Some(&mut row[nq..]), &fs.params);
                for (&k, d) in idx.iter().zip(&du) {
                    row[k] += d;
                }
                row
            })
            .collect()
    }

    /// `vᵀ H v` by second central differences with two Richardson levels.
    pub fn quadratic_form(&self, x: &[f64], policy: &PolicyKind, v: &[f64]) -> Result<f64> {
        if math::norm(v) == 0.0 {
            return Err(Error::Parameter("probe direction must be nonzero".into()));
        }
        let h0 = 1e-4 * (1.0 + math::norm_inf(x));
        let center = self.loss(x, policy)?;
        let second = |h: f64| -> Result<f64> {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            math::axpy(h, v, &mut xp);
            math::axpy(-h, v, &mut xm);
            Ok((self.loss(&xp, policy)? - 2.0 * center + self.loss(&xm, policy)?) / (h * h))
        };
        let d0 = second(h0)?;
        let d1 = second(h0 / 2.0)?;
        let d2 = second(h0 / 4.0)?;
        let r0 = (4.0 * d1 - d0) / 3.0;
        let r1 = (4.0 * d2 - d1) / 3.0;
        Ok((16.0 * r1 - r0) / 15.0)
    }

    /// Pads a q-space direction with zero parameter components.
    pub fn lift(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() == self.dim() {
            return Ok(v.to_vec());
        }
        if v.len() == self.q_len() {
            let mut out = v.to_vec();
            out.resize(self.dim(), 0.0);
            return Ok(out);
        }
        Err(Error::Dimension { what: "probe direction", expected: self.dim(), found: v.len() })
    }
}

fn check_analysis_policy(policy: &PolicyKind) -> Result<()> {
    policy.validate()?;
    if let PolicyKind::EpsilonGreedy { .. } = policy {
        return Err(Error::Unsupported("ε-greedy is not differentiable; use softmax or uniform"));
    }
    Ok(())
}

fn require_softmax(policy: &PolicyKind) -> Result<f64> {
    policy.validate()?;
    match *policy {
        PolicyKind::Softmax { temperature } => Ok(temperature),
        _ => Err(Error::Unsupported("this probe requires the softmax policy")),
    }
}

/// Expected squared error under `policy`, by exhaustive enumeration.
pub fn expected_loss(
    game: &GameSpec,
    mode: MixerMode,
    params: &MixerParams,
    state: &StateVector,
    q: &QVector,
    policy: &PolicyKind,
) -> Result<f64> {
    check_analysis_policy(policy)?;
    let table = factorization::q_tot_table(mode, params, state, q, game)?;
    let mu = policy::joint_distribution(policy, q)?;
    Ok(mu.iter().zip(table.iter().zip(&game.payoffs().values)).map(|(m, (v, y))| m * (y - v) * (y - v)).sum())
}

/// Gradient of [`expected_loss`] over `(q, θ)` with its policy/value split.
pub fn loss_gradient(
    game: &GameSpec,
    mode: MixerMode,
    params: &MixerParams,
    state: &StateVector,
    q: &QVector,
    policy: &PolicyKind,
) -> Result<LossGradient> {
    check_analysis_policy(policy)?;
    if mode != MixerMode::Additive && state.0 != [1.0] {
        return Err(Error::Dimension { what: "single-state games use the unit state", expected: 1, found: state.len() });
    }
    let point = FlowState::new(q.clone(), params.clone());
    Landscape::new(game, mode, &point)?.gradient(&point.to_flat(), policy)
}

fn rk4_step(land: &Landscape<'_>, x: &[f64], policy: &PolicyKind, dt: f64) -> Vec<f64> {
    let f = |y: &[f64]| -> Vec<f64> { land.gradient(y, policy).expect("validated").total };
    let k1 = f(x);
    let mut y = x.to_vec();
    math::axpy(-0.5 * dt, &k1, &mut y);
    let k2 = f(&y);
    y.copy_from_slice(x);
    math::axpy(-0.5 * dt, &k2, &mut y);
    let k3 = f(&y);
    y.copy_from_slice(x);
    math::axpy(-dt, &k3, &mut y);
    let k4 = f(&y);
    let mut out = x.to_vec();
    for i in 0..out.len() {
        out[i] -= dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// RK4 integration of `ẋ = -∇L(x)` with `dt` as the largest step.
///
/// Every step is checked by step doubling: the step is accepted when the two
/// half steps agree with the full step to `1e-9 (1 + |x|∞)` and the loss does
/// not increase. Otherwise the step is halved. Near zero-loss points the
/// Hessian can be stiff enough that a fixed step of `0.01 τ` leaves the RK4
/// stability region and the iterates run away from a point that the exact
/// flow never leaves.
pub fn integrate_flow(
    game: &GameSpec,
    mode: MixerMode,
    start: &FlowState,
    policy: &PolicyKind,
    dt: f64,
    t_max: f64,
    stop: &StopRule,
) -> Result<FlowTrace> {
    require_softmax(policy)?;
    if !(dt > 0.0) || !(t_max >= 0.0) {
        return Err(Error::Parameter(format!("need dt > 0 and t_max >= 0 (dt = {dt}, t_max = {t_max})")));
    }
    let land = Landscape::new(game, mode, start)?;
    let t_end = start.time + t_max;
    let mut x = start.to_flat();
    let mut time = start.time;
    let mut current = start.clone();
    let mut greedy = factorization::greedy_joint(&start.q);
    let mut samples = Vec::new();
    let mut events = Vec::new();
    let sample_every = stop.sample_every.max(1);
    let mut h = dt;
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut loss = land.loss(&x, policy)?;
    let reason = loop {
        let grad_norm = math::norm(&land.gradient(&x, policy)?.total);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::FlowDivergence { time, last_finite: alloc::boxed::Box::new(current) });
        }
        let reason = if stop.loss_tol > 0.0 && loss < stop.loss_tol {
            Some(StopReason::LossTolerance)
        } else if stop.grad_tol > 0.0 && grad_norm < stop.grad_tol {
            Some(StopReason::GradientTolerance)
        } else if time >= t_end - 1e-12 * dt {
            Some(StopReason::TimeLimit)
        } else {
            None
        };
        if accepted.is_multiple_of(sample_every) || reason.is_some() {
            samples.push(FlowSample { time, loss, grad_norm, greedy: greedy.clone() });
        }
        if let Some(r) = reason {
            break r;
        }
        if !stop.step_control {
            let step = dt.min(t_end - time);
            x = rk4_step(&land, &x, policy, step);
            if !math::is_finite(&x) {
                return Err(Error::FlowDivergence { time, last_finite: alloc::boxed::Box::new(current) });
            }
            loss = land.loss(&x, policy)?;
            time += step;
        }
        if stop.step_control {
            loop {
                let step = h.min(t_end - time);
                let full = rk4_step(&land, &x, policy, step);
                let half = rk4_step(&land, &x, policy, step / 2.0);
                let two_half = rk4_step(&land, &half, policy, step / 2.0);
                let scale = 1e-9 * (1.0 + math::norm_inf(&x));
                let err = full.iter().zip(&two_half).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / 15.0;
                let new_loss = if math::is_finite(&two_half) { land.loss(&two_half, policy)? } else { f64::NAN };
                if err <= scale && new_loss <= loss + 1e-12 * (1.0 + loss) {
                    x = two_half;
                    loss = new_loss;
                    time += step;
                    if err < scale / 64.0 {
                        h = (2.0 * h).min(dt);
                    }
                    break;
                }
                rejected += 1;
                h /= 2.0;
                if h < dt * 1e-12 {
                    return Err(Error::FlowDivergence { time, last_finite: alloc::boxed::Box::new(current) });
                }
            }
        }
        accepted += 1;
        current.set_flat(&x);
        current.time = time;
        let g = factorization::greedy_joint(&current.q);
        if g != greedy {
            events.push(GreedyEvent { time, from: greedy.clone(), to: g.clone() });
            greedy = g;
        }
    };
    Ok(FlowTrace { samples, events, final_state: current, stop: reason, accepted_steps: accepted, rejected_steps: rejected })
}

/// `vᵀ H_τ v` at `point`; `v` may cover only the q-coordinates.
pub fn hessian_quadratic_form(
    game: &GameSpec,
    mode: MixerMode,
    point: &FlowState,
    policy: &PolicyKind,
    v: &[f64],
) -> Result<f64> {
    check_analysis_policy(policy)?;
    let land = Landscape::new(game, mode, point)?;
    let v = land.lift(v)?;
    land.quadratic_form(&point.to_flat(), policy, &v)
}

/// `e_{agent,to} - e_{agent,from}` in q-coordinates.
pub fn flip_direction(q: &QVector, agent: usize, from: usize, to: usize) -> Vec<f64> {
    let mut v = vec![0.0; q.len()];
    v[q.coord(agent, to)] += 1.0;
    v[q.coord(agent, from)] -= 1.0;
    v
}

/// Direction moving the first agent whose greedy action is not optimal toward
/// its optimal action. `None` when the point is IGM-consistent.
pub fn correcting_direction(q: &QVector, game: &GameSpec) -> Result<Option<(usize, Vec<f64>)>> {
    let check = factorization::igm_check(q, game)?;
    let agent = check.greedy.actions().iter().zip(check.optimum.actions()).position(|(g, o)| g != o);
    Ok(agent.map(|i| (i, flip_direction(q, i, check.greedy.actions()[i], check.optimum.actions()[i]))))
}

pub fn classify_fixed_point(
    game: &GameSpec,
    mode: MixerMode,
    point: &FlowState,
    policy: &PolicyKind,
    tol: f64,
) -> Result<StabilityReport> {
    let temperature = require_softmax(policy)?;
    let land = Landscape::new(game, mode, point)?;
    let x = point.to_flat();
    let loss = land.loss(&x, policy)?;
    let grad_norm = math::norm(&land.gradient(&x, policy)?.total);
    if !(grad_norm < FIXED_POINT_GRAD_TOL) {
        return Err(Error::Precondition(format!("gradient norm {grad_norm:e} is not below {FIXED_POINT_GRAD_TOL:e}")));
    }

    // Normal subspace of the zero-loss manifold = row space of the constraint Jacobian.
    let jac = land.constraint_jacobian(&x);
    let m = jac.len();
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let v = math::dot(&jac[i], &jac[j]);
            gram[i * m + j] = v;
            gram[j * m + i] = v;
        }
    }
    let (gvals, gvecs) = math::symmetric_eigen(&gram, m);
    let mut singular_values: Vec<f64> = gvals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    singular_values.reverse();
    let mut normal_basis = Vec::new();
    for (lam, u) in gvals.iter().zip(&gvecs).rev() {
        let sigma = lam.max(0.0).sqrt();
        if sigma > RANK_THRESHOLD {
            let mut v = vec![0.0; x.len()];
            for (c, row) in u.iter().zip(&jac) {
                math::axpy(c / sigma, row, &mut v);
            }
            normal_basis.push(v);
        }
    }
    let rank = normal_basis.len();

    let greedy = factorization::greedy_joint(&point.q);
    let mut flips = Vec::new();
    let mut flip_dirs = Vec::new();
    for (i, &gi) in greedy.actions().iter().enumerate() {
        for b in 0..game.action_counts()[i] {
            if b == gi {
                continue;
            }
            let v = land.lift(&flip_direction(&point.q, i, gi, b))?;
            let qf = land.quadratic_form(&x, policy, &v)?;
            flips.push(FlipProbe { agent: i, from: gi, to: b, quadratic_form: qf });
            flip_dirs.push(v);
        }
    }

    let mut probe_values = Vec::with_capacity(rank + flips.len());
    for v in &normal_basis {
        probe_values.push(land.quadratic_form(&x, policy, v)?);
    }
    for (f, v) in flips.iter().zip(&flip_dirs) {
        probe_values.push(f.quadratic_form / math::dot(v, v));
    }

    // Compressed Hessian on span(normal basis ∪ flips), entries by polarization.
    let mut all = normal_basis.clone();
    all.extend(flip_dirs.iter().cloned());
    let basis = math::orthonormalize(&all, 1e-10);
    let k = basis.len();
    let mut diag = Vec::with_capacity(k);
    for b in &basis {
        diag.push(land.quadratic_form(&x, policy, b)?);
    }
    let mut compressed = vec![0.0; k * k];
    for i in 0..k {
        compressed[i * k + i] = diag[i];
        for j in 0..i {
            let plus: Vec<f64> = basis[i].iter().zip(&basis[j]).map(|(a, b)| a + b).collect();
            let minus: Vec<f64> = basis[i].iter().zip(&basis[j]).map(|(a, b)| a - b).collect();
            let val = (land.quadratic_form(&x, policy, &plus)? - land.quadratic_form(&x, policy, &minus)?) / 4.0;
            compressed[i * k + j] = val;
            compressed[j * k + i] = val;
        }
    }
    let (eigenvalues, _) = math::symmetric_eigen(&compressed, k);
    let min_eigenvalue = eigenvalues.first().copied().unwrap_or(f64::NAN);

    let classification = if probe_values.iter().any(|&p| p < -tol) {
        Classification::Saddle
    } else if probe_values.iter().all(|&p| p > tol) {
        Classification::Attractor
    } else {
        Classification::Inconclusive
    };

    Ok(StabilityReport {
        point: point.clone(),
        temperature,
        loss,
        grad_norm,
        eigenvalues,
        min_eigenvalue,
        probe_values,
        flips,
        singular_values,
        manifold_normal_rank: rank,
        classification,
        tol,
    })
}

/// Gradient gap `|∇L_τ - ∇L_greedy|` along a temperature sequence.
pub fn clarke_limit_probe(game: &GameSpec, mode: MixerMode, point: &FlowState, taus: &[f64]) -> Result<Vec<(f64, f64)>> {
    let margin = factorization::greedy_margin(&point.q);
    if !(margin >= 1e-6) {
        return Err(Error::Precondition(format!("greedy actions are not unique (margin {margin:e})")));
    }
    let land = Landscape::new(game, mode, point)?;
    let x = point.to_flat();
    let greedy = land.greedy_gradient(&x);
    taus.iter()
        .map(|&tau| {
            let g = land.gradient(&x, &PolicyKind::softmax(tau))?.total;
            let diff: Vec<f64> = g.iter().zip(&greedy).map(|(a, b)| a - b).collect();
            Ok((tau, math::norm(&diff)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeOptions {
    /// RK4 step as a multiple of the temperature.
    pub dt_over_tau: f64,
    pub t_max: f64,
    pub final_loss_tol: f64,
}

impl Default for EscapeOptions {
    fn default() -> Self {
        Self { dt_over_tau: 0.01, t_max: 2.0, final_loss_tol: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeOutcome {
    pub final_greedy: JointAction,
    pub final_loss: f64,
    pub escaped: bool,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeStats {
    pub fraction: f64,
    pub outcomes: Vec<EscapeOutcome>,
}

/// Perturbs `saddle` with isotropic Gaussian noise on `(q, θ)` and reports the
/// fraction of flows that end at the optimal greedy action with small loss.
pub fn escape_statistics(
    game: &GameSpec,
    mode: MixerMode,
    saddle: &FlowState,
    policy: &PolicyKind,
    n_trials: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<f64> {
    Ok(escape_statistics_with(game, mode, saddle, policy, n_trials, noise_scale, seed, &EscapeOptions::default())?.fraction)
}

#[allow(clippy::too_many_arguments)]
pub fn escape_statistics_with(
    game: &GameSpec,
    mode: MixerMode,
    saddle: &FlowState,
    policy: &PolicyKind,
    n_trials: usize,
    noise_scale: f64,
    seed: u64,
    opts: &EscapeOptions,
) -> Result<EscapeStats> {
    let tau = require_softmax(policy)?;
    if n_trials == 0 {
        return Ok(EscapeStats { fraction: 0.0, outcomes: Vec::new() });
    }
    let optimum = game::optimal_joint_action(game)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_scale.max(0.0)).map_err(|_| Error::Parameter("bad noise scale".into()))?;
    let base = saddle.to_flat();
    let stop = StopRule { grad_tol: 1e-12, loss_tol: 0.0, sample_every: usize::MAX, step_control: true };
    let mut outcomes = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let x: Vec<f64> = base.iter().map(|&b| b + normal.sample(&mut rng)).collect();
        let start = saddle.with_flat(&x);
        let outcome = match integrate_flow(game, mode, &start, policy, opts.dt_over_tau * tau, opts.t_max, &stop) {
            Ok(trace) => {
                let final_greedy = trace.final_greedy();
                let final_loss = trace.final_loss();
                let escaped = final_greedy == optimum && final_loss < opts.final_loss_tol;
                EscapeOutcome { final_greedy, final_loss, escaped, diverged: false }
            }
            Err(Error::FlowDivergence { last_finite, .. }) => EscapeOutcome {
                final_greedy: factorization::greedy_joint(&last_finite.q),
                final_loss: f64::NAN,
                escaped: false,
                diverged: true,
            },
            Err(e) => return Err(e),
        };
        outcomes.push(outcome);
    }
    let fraction = outcomes.iter().filter(|o| o.escaped).count() as f64 / n_trials as f64;
    Ok(EscapeStats { fraction, outcomes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub temperature: f64,
    pub quadratic_form: f64,
    /// `τ · vᵀHv`.
    pub scaled: f64,
    /// `-2 [y(u*) - y(g)]`.
    pub predicted: f64,
}

/// Correcting-direction curvature across temperatures, next to the
/// low-temperature prediction `-2 [y(u*) - y(g)] / τ`.
pub fn saddle_scaling_probe(game: &GameSpec, mode: MixerMode, point: &FlowState, taus: &[f64]) -> Result<Vec<ScalingRow>> {
    let Some((_, v)) = correcting_direction(&point.q, game)? else {
        return Err(Error::Precondition("point is IGM-consistent; no correcting direction".into()));
    };
    let check = factorization::igm_check(&point.q, game)?;
    let predicted = -2.0 * (game::payoff(game, &check.optimum)? - game::payoff(game, &check.greedy)?);
    taus.iter()
        .map(|&tau| {
            let qf = hessian_quadratic_form(game, mode, point, &PolicyKind::softmax(tau), &v)?;
            Ok(ScalingRow { temperature: tau, quadratic_form: qf, scaled: tau * qf, predicted })
        })
        .collect()
}

/// Local values with the given greedy joint action: the greedy entry is `+1`
/// and the others descend from `-1` in steps of `0.3`.
pub fn witness_pattern(game: &GameSpec, greedy: &JointAction) -> Result<QVector> {
    game.validate(greedy)?;
    let mut entries = Vec::with_capacity(game.q_len());
    for (&g, &count) in greedy.actions().iter().zip(game.action_counts()) {
        let mut rank = 0;
        for b in 0..count {
            if b == g {
                entries.push(1.0);
            } else {
                entries.push(-1.0 - 0.3 * rank as f64);
                rank += 1;
            }
        }
    }
    QVector::new(game.action_counts().to_vec(), entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub greedy: JointAction,
    pub igm_consistent: bool,
    pub point: FlowState,
    pub max_fit_error: f64,
}

/// A zero-loss point whose local greedy action is `greedy`, built by fitting
/// an unconstrained (or the given) mixer to the payoff table.
pub fn zero_loss_witness(game: &GameSpec, mode: MixerMode, greedy: &JointAction, seed: u64) -> Result<Witness> {
    let q = witness_pattern(game, greedy)?;
    let params = factorization::fit_zero_loss(game, &q, mode, 50_000, 1e-3, seed)?;
    let table = factorization::q_tot_table(mode, &params, &StateVector::unit(), &q, game)?;
    let max_fit_error = table.iter().zip(&game.payoffs().values).fold(0.0f64, |m, (v, y)| m.max((v - y).abs()));
    let igm_consistent = *greedy == game::optimal_joint_action(game)?;
    Ok(Witness { greedy: greedy.clone(), igm_consistent, point: FlowState::new(q, params), max_fit_error })
}

pub fn describe_classification(c: Classification) -> String {
    String::from(match c {
        Classification::Attractor => "attractor",
        Classification::Saddle => "saddle",
        Classification::Inconclusive => "inconclusive",
    })
}
