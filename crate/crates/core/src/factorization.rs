//! Value-function factorization: additive, monotonic and unconstrained mixers.
//!
//! The two mixing modes with parameters follow the QMIX layout. Four affine
//! hypernetwork blocks map the global state `s` to the mixing weights
//!
//! ```text
//! W1 = reshape(G_w1 s + c_w1)   (n_agents x hidden)
//! b1 = G_b1 s + c_b1            (hidden)
//! w2 = G_w2 s + c_w2            (hidden)
//! b2 = G_b2 s + c_b2            (scalar)
//! Q_tot = w2 . elu(u W1 + b1) + b2
//! ```
//!
//! where `u` holds each agent's selected local value. Monotonic mode passes
//! `W1` and `w2` through `abs` so that `dQ_tot/du_i >= 0`.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::game::{self, GameSpec, JointAction};
use crate::math;

pub const DEFAULT_HIDDEN: usize = 32;

/// Concatenated local action values `(Q_1(.), ..., Q_N(.))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QVector {
    entries: Vec<f64>,
    action_counts: Vec<usize>,
}

impl QVector {
    pub fn new(action_counts: Vec<usize>, entries: Vec<f64>) -> Result<Self> {
        let len: usize = action_counts.iter().sum();
        if entries.len() != len {
            return Err(Error::Dimension { what: "q vector", expected: len, found: entries.len() });
        }
        if !math::is_finite(&entries) {
            return Err(Error::Parameter("q entries must be finite".into()));
        }
        Ok(Self { entries, action_counts })
    }

    pub fn zeros(action_counts: &[usize]) -> Self {
        let len = action_counts.iter().sum();
        Self { entries: vec![0.0; len], action_counts: action_counts.to_vec() }
    }

    /// Builds from per-agent slices.
    pub fn from_agents(values: &[&[f64]]) -> Result<Self> {
        let counts = values.iter().map(|v| v.len()).collect();
        Self::new(counts, values.iter().flat_map(|v| v.iter().copied()).collect())
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Mutable access for integrators; callers keep the entries finite.
    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    pub fn n_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn offset(&self, agent: usize) -> usize {
        self.action_counts[..agent].iter().sum()
    }

    /// Flat index of coordinate `(agent, action)`.
    pub fn coord(&self, agent: usize, action: usize) -> usize {
        self.offset(agent) + action
    }

    pub fn agent(&self, agent: usize) -> &[f64] {
        let o = self.offset(agent);
        &self.entries[o..o + self.action_counts[agent]]
    }

    pub fn get(&self, agent: usize, action: usize) -> f64 {
        self.entries[self.coord(agent, action)]
    }

    /// Selected local values `u_i = Q_i(a_i)`.
    pub fn select(&self, a: &JointAction) -> Result<Vec<f64>> {
        self.check_action(a)?;
        Ok(a.actions().iter().enumerate().map(|(i, &ai)| self.get(i, ai)).collect())
    }

    pub(crate) fn check_action(&self, a: &JointAction) -> Result<()> {
        if a.len() != self.n_agents() {
            return Err(Error::JointActionLength { expected: self.n_agents(), found: a.len() });
        }
        for (agent, (&action, &limit)) in a.actions().iter().zip(&self.action_counts).enumerate() {
            if action >= limit {
                return Err(Error::InvalidAction { agent, action, limit });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerMode {
    Additive,
    Monotonic,
    Unconstrained,
}

impl MixerMode {
    pub fn name(self) -> &'static str {
        match self {
            MixerMode::Additive => "additive",
            MixerMode::Monotonic => "monotonic",
            MixerMode::Unconstrained => "unconstrained",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "additive" => Ok(Self::Additive),
            "monotonic" => Ok(Self::Monotonic),
            "unconstrained" => Ok(Self::Unconstrained),
            _ => Err(Error::NotFound { kind: "mixer mode", name: name.into() }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    /// The constant state `[1]` used for single-state games.
    pub fn unit() -> Self {
        Self(vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HyperBlock {
    W1,
    B1,
    W2,
    B2,
}

impl HyperBlock {
    pub const ALL: [HyperBlock; 4] = [HyperBlock::W1, HyperBlock::B1, HyperBlock::W2, HyperBlock::B2];

    pub fn name(self) -> &'static str {
        match self {
            HyperBlock::W1 => "hypernet_w1",
            HyperBlock::B1 => "hypernet_b1",
            HyperBlock::W2 => "hypernet_w2",
            HyperBlock::B2 => "hypernet_b2",
        }
    }
}

/// Hypernetwork parameters, stored flat. Each block is an affine map
/// `state_dim -> out` laid out as `out x state_dim` weights followed by `out`
/// biases; blocks appear in [`HyperBlock::ALL`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerParams {
    n_agents: usize,
    hidden_dim: usize,
    state_dim: usize,
    data: Vec<f64>,
}

impl MixerParams {
    pub fn zeros(n_agents: usize, hidden_dim: usize, state_dim: usize) -> Self {
        let len = Self::expected_len(n_agents, hidden_dim, state_dim);
        Self { n_agents, hidden_dim, state_dim, data: vec![0.0; len] }
    }

    pub fn from_data(n_agents: usize, hidden_dim: usize, state_dim: usize, data: Vec<f64>) -> Result<Self> {
        let len = Self::expected_len(n_agents, hidden_dim, state_dim);
        if data.len() != len {
            return Err(Error::Dimension { what: "mixer parameters", expected: len, found: data.len() });
        }
        if !math::is_finite(&data) {
            return Err(Error::Parameter("mixer parameters must be finite".into()));
        }
        Ok(Self { n_agents, hidden_dim, state_dim, data })
    }

    /// Gaussian weights with std `1/sqrt(state_dim)`, zero biases.
    pub fn init<R: Rng + ?Sized>(n_agents: usize, hidden_dim: usize, state_dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(n_agents, hidden_dim, state_dim);
        let normal = Normal::new(0.0, 1.0 / (state_dim as f64).sqrt()).expect("valid std");
        for block in HyperBlock::ALL {
            let (start, out) = p.block_range(block);
            for w in &mut p.data[start..start + out * state_dim] {
                *w = normal.sample(rng);
            }
        }
        p
    }

    pub fn seeded(n_agents: usize, hidden_dim: usize, state_dim: usize, seed: u64) -> Self {
        Self::init(n_agents, hidden_dim, state_dim, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn expected_len(n_agents: usize, hidden_dim: usize, state_dim: usize) -> usize {
        let outs = n_agents * hidden_dim + 2 * hidden_dim + 1;
        outs * (state_dim + 1)
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block_out(&self, block: HyperBlock) -> usize {
        match block {
            HyperBlock::W1 => self.n_agents * self.hidden_dim,
            HyperBlock::B1 | HyperBlock::W2 => self.hidden_dim,
            HyperBlock::B2 => 1,
        }
    }

    /// Start offset and output size of a block.
    pub fn block_range(&self, block: HyperBlock) -> (usize, usize) {
        let mut start = 0;
        for b in HyperBlock::ALL {
            let out = self.block_out(b);
            if b == block {
                return (start, out);
            }
            start += out * (self.state_dim + 1);
        }
        unreachable!()
    }

    /// `(weights, bias)` slices of a block.
    pub fn block(&self, block: HyperBlock) -> (&[f64], &[f64]) {
        let (start, out) = self.block_range(block);
        let w_end = start + out * self.state_dim;
        (&self.data[start..w_end], &self.data[w_end..w_end + out])
    }

    pub fn block_mut(&mut self, block: HyperBlock) -> (&mut [f64], &mut [f64]) {
        let (start, out) = self.block_range(block);
        let w_end = start + out * self.state_dim;
        let (w, rest) = self.data[start..w_end + out].split_at_mut(w_end - start);
        (w, rest)
    }

    fn generate_block(&self, block: HyperBlock, state: &[f64]) -> Vec<f64> {
        let (w, b) = self.block(block);
        let s = self.state_dim;
        b.iter().enumerate().map(|(o, &bias)| bias + math::dot(&w[o * s..(o + 1) * s], state)).collect()
    }
}

/// Mixing weights produced by the hypernetwork for one state.
#[derive(Clone, Debug)]
pub struct MixingWeights {
    mode: MixerMode,
    w1_raw: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2_raw: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    n_agents: usize,
    hidden: usize,
}

/// Forward intermediates needed for the backward pass.
#[derive(Clone, Debug)]
pub struct MixTrace {
    pre: Vec<f64>,
    act: Vec<f64>,
    pub value: f64,
}

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[inline]
fn abs_grad(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

impl MixingWeights {
    pub fn generate(mode: MixerMode, params: &MixerParams, state: &StateVector) -> Result<Self> {
        if mode != MixerMode::Additive && state.len() != params.state_dim {
            return Err(Error::Dimension { what: "state vector", expected: params.state_dim, found: state.len() });
        }
        if mode == MixerMode::Additive {
            return Ok(Self {
                mode,
                w1_raw: Vec::new(),
                w1: Vec::new(),
                b1: Vec::new(),
                w2_raw: Vec::new(),
                w2: Vec::new(),
                b2: 0.0,
                n_agents: params.n_agents,
                hidden: 0,
            });
        }
        let s = &state.0;
        let w1_raw = params.generate_block(HyperBlock::W1, s);
        let b1 = params.generate_block(HyperBlock::B1, s);
        let w2_raw = params.generate_block(HyperBlock::W2, s);
        let b2 = params.generate_block(HyperBlock::B2, s)[0];
        let (w1, w2) = if mode == MixerMode::Monotonic {
            (w1_raw.iter().map(|x| x.abs()).collect(), w2_raw.iter().map(|x| x.abs()).collect())
        } else {
            (w1_raw.clone(), w2_raw.clone())
        };
        Ok(Self { mode, w1_raw, w1, b1, w2_raw, w2, b2, n_agents: params.n_agents, hidden: params.hidden_dim })
    }

    /// Smallest `|raw weight|` in monotonic mode, i.e. how far the weights sit
    /// from the kink of `|·|` where the mixer is not differentiable in θ.
    /// Infinite for the other modes.
    pub fn kink_distance(&self) -> f64 {
        if self.mode != MixerMode::Monotonic {
            return f64::INFINITY;
        }
        self.w1_raw.iter().chain(&self.w2_raw).fold(f64::INFINITY, |m, x| m.min(x.abs()))
    }

    pub fn forward(&self, u: &[f64]) -> MixTrace {
        if self.mode == MixerMode::Additive {
            return MixTrace { pre: Vec::new(), act: Vec::new(), value: u.iter().sum() };
        }
        let h = self.hidden;
        let mut pre = self.b1.clone();
        for (i, &ui) in u.iter().enumerate() {
            math::axpy(ui, &self.w1[i * h..(i + 1) * h], &mut pre);
        }
        let act: Vec<f64> = pre.iter().map(|&z| elu(z)).collect();
        let value = math::dot(&self.w2, &act) + self.b2;
        MixTrace { pre, act, value }
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        self.forward(u).value
    }

    /// Backpropagates `upstream = dL/dQ_tot`. Writes `dL/du` into `du` and
    /// accumulates `dL/dparams` into `dparams` (skipped when `None`).
    pub fn backward(
        &self,
        u: &[f64],
        trace: &MixTrace,
        upstream: f64,
        state: &StateVector,
        du: &mut [f64],
        dparams: Option<&mut [f64]>,
        params: &MixerParams,
    ) {
        if self.mode == MixerMode::Additive {
            for d in du.iter_mut() {
                *d = upstream;
            }
            return;
        }
        let h = self.hidden;
        let delta: Vec<f64> = (0..h).map(|k| upstream * self.w2[k] * elu_grad(trace.pre[k])).collect();
        for (i, d) in du.iter_mut().enumerate() {
            *d = math::dot(&delta, &self.w1[i * h..(i + 1) * h]);
        }
        let Some(dparams) = dparams else { return };
        let monotone = self.mode == MixerMode::Monotonic;
        let s = &state.0;
        let sd = params.state_dim;
        // Gradients w.r.t. the generated (raw) quantities, then through the affine blocks.
        let mut emit = |block: HyperBlock, graw: &mut dyn Iterator<Item = (usize, f64)>| {
            let (start, out) = params.block_range(block);
            let bias_start = start + out * sd;
            for (o, g) in graw {
                if g == 0.0 {
                    continue;
                }
                let row = &mut dparams[start + o * sd..start + (o + 1) * sd];
                math::axpy(g, s, row);
                dparams[bias_start + o] += g;
            }
        };
        let mut w1g = (0..self.n_agents * h).map(|idx| {
            let (i, k) = (idx / h, idx % h);
            let g = delta[k] * u[i];
            (idx, if monotone { g * abs_grad(self.w1_raw[idx]) } else { g })
        });
        emit(HyperBlock::W1, &mut w1g);
        let mut b1g = delta.iter().copied().enumerate();
        emit(HyperBlock::B1, &mut b1g);
        let mut w2g = (0..h).map(|k| {
            let g = upstream * trace.act[k];
            (k, if monotone { g * abs_grad(self.w2_raw[k]) } else { g })
        });
        emit(HyperBlock::W2, &mut w2g);
        let mut b2g = core::iter::once((0usize, upstream));
        emit(HyperBlock::B2, &mut b2g);
    }
}

fn check_params(mode: MixerMode, params: &MixerParams, n_agents: usize) -> Result<()> {
    if mode != MixerMode::Additive && params.n_agents != n_agents {
        return Err(Error::Dimension { what: "mixer agent count", expected: n_agents, found: params.n_agents });
    }
    Ok(())
}

/// `Q_tot(a)` for local values `q` under the given mixer.
pub fn q_tot_forward(
    mode: MixerMode,
    params: &MixerParams,
    state: &StateVector,
    q: &QVector,
    a: &JointAction,
) -> Result<f64> {
    check_params(mode, params, q.n_agents())?;
    let u = q.select(a)?;
    Ok(MixingWeights::generate(mode, params, state)?.value(&u))
}

/// Exact gradients of [`q_tot_forward`] w.r.t. `q` and the mixer parameters.
pub fn q_tot_gradients(
    mode: MixerMode,
    params: &MixerParams,
    state: &StateVector,
    q: &QVector,
    a: &JointAction,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_params(mode, params, q.n_agents())?;
    let u = q.select(a)?;
    let weights = MixingWeights::generate(mode, params, state)?;
    let trace = weights.forward(&u);
    let mut du = vec![0.0; u.len()];
    let mut grad_params = vec![0.0; params.len()];
    weights.backward(&u, &trace, 1.0, state, &mut du, Some(&mut grad_params), params);
    let mut grad_q = vec![0.0; q.len()];
    for (i, &ai) in a.actions().iter().enumerate() {
        grad_q[q.coord(i, ai)] = du[i];
    }
    Ok((grad_q, grad_params))
}

/// Per-agent argmax `g(q)`, ties to the lowest action index.
pub fn greedy_joint(q: &QVector) -> JointAction {
    JointAction::new((0..q.n_agents()).map(|i| math::argmax(q.agent(i))).collect())
}

/// Smallest gap between an agent's best and second-best local value.
pub fn greedy_margin(q: &QVector) -> f64 {
    (0..q.n_agents())
        .map(|i| {
            let v = q.agent(i);
            let best = math::argmax(v);
            v.iter().enumerate().filter(|&(j, _)| j != best).fold(f64::INFINITY, |m, (_, &x)| m.min(v[best] - x))
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgmCheck {
    pub consistent: bool,
    pub greedy: JointAction,
    pub optimum: JointAction,
}

pub fn igm_check(q: &QVector, game: &GameSpec) -> Result<IgmCheck> {
    if q.action_counts() != game.action_counts() {
        return Err(Error::Dimension { what: "q vector", expected: game.q_len(), found: q.len() });
    }
    let greedy = greedy_joint(q);
    let optimum = game::optimal_joint_action(game)?;
    Ok(IgmCheck { consistent: greedy == optimum, greedy, optimum })
}

/// The full `Q_tot` table over all joint actions in storage order.
pub fn q_tot_table(mode: MixerMode, params: &MixerParams, state: &StateVector, q: &QVector, game: &GameSpec) -> Result<Vec<f64>> {
    check_params(mode, params, q.n_agents())?;
    let weights = MixingWeights::generate(mode, params, state)?;
    game.joint_actions().map(|a| Ok(weights.value(&q.select(&a)?))).collect()
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub hidden_dim: usize,
    pub lr: f64,
    pub budget: usize,
    pub tol: f64,
    pub seed: u64,
    /// After reaching `tol`, refine with minimum-norm Gauss-Newton steps
    /// until the residuals reach round-off.
    pub polish: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { hidden_dim: DEFAULT_HIDDEN, lr: 1e-2, budget: 50_000, tol: 1e-3, seed: 0, polish: true }
    }
}

/// Regresses the mixer onto the payoff table with `q_pattern` frozen.
pub fn fit_zero_loss(
    game: &GameSpec,
    q_pattern: &QVector,
    mode: MixerMode,
    budget: usize,
    tol: f64,
    seed: u64,
) -> Result<MixerParams> {
    fit_zero_loss_with(game, q_pattern, mode, &FitOptions { budget, tol, seed, ..FitOptions::default() })
}

pub fn fit_zero_loss_with(game: &GameSpec, q_pattern: &QVector, mode: MixerMode, opts: &FitOptions) -> Result<MixerParams> {
    if q_pattern.action_counts() != game.action_counts() {
        return Err(Error::Dimension { what: "q pattern", expected: game.q_len(), found: q_pattern.len() });
    }
    let state = StateVector::unit();
    let targets = &game.payoffs().values;
    let inputs: Vec<Vec<f64>> = game.joint_actions().map(|a| q_pattern.select(&a)).collect::<Result<_>>()?;
    let mut params = MixerParams::seeded(game.n_agents(), opts.hidden_dim, 1, opts.seed);
    let mut adam = Adam::new(params.len(), opts.lr);
    let n = targets.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut du = vec![0.0; game.n_agents()];
    let mut max_err = f64::INFINITY;
    for _ in 0..opts.budget {
        let weights = MixingWeights::generate(mode, &params, &state)?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        max_err = 0.0;
        for (u, &y) in inputs.iter().zip(targets) {
            let trace = weights.forward(u);
            let r = trace.value - y;
            max_err = max_err.max(r.abs());
            weights.backward(u, &trace, 2.0 * r / n, &state, &mut du, Some(&mut grad), &params);
        }
        if !max_err.is_finite() {
            break;
        }
        if max_err <= opts.tol {
            break;
        }
        adam.step(params.data_mut(), &grad);
    }
    if opts.polish && mode != MixerMode::Additive && max_err.is_finite() {
        polish_fit(mode, &mut params, &inputs, targets);
        max_err = math::norm_inf(&fit_residuals(mode, &params, &inputs, targets));
    }
    if !(max_err <= opts.tol) {
        return Err(Error::FitFailure { max_error: max_err, tol: opts.tol, steps: opts.budget });
    }
    Ok(params)
}

fn fit_residuals(mode: MixerMode, params: &MixerParams, inputs: &[Vec<f64>], targets: &[f64]) -> Vec<f64> {
    let state = StateVector::unit();
    let weights = MixingWeights::generate(mode, params, &state).expect("unit state");
    inputs.iter().zip(targets).map(|(u, &y)| y - weights.value(u)).collect()
}

/// Minimum-norm Gauss-Newton on the interpolation equations `Q_tot(a) = y(a)`.
fn polish_fit(mode: MixerMode, params: &mut MixerParams, inputs: &[Vec<f64>], targets: &[f64]) {
    let state = StateVector::unit();
    let m = inputs.len();
    let mut res = fit_residuals(mode, params, inputs, targets);
    for _ in 0..60 {
        let err = math::norm_inf(&res);
        if err < 1e-13 {
            break;
        }
        let weights = MixingWeights::generate(mode, params, &state).expect("unit state");
        let mut du = vec![0.0; params.n_agents()];
        let jac: Vec<Vec<f64>> = inputs
            .iter()
            .map(|u| {
                let trace = weights.forward(u);
                let mut g = vec![0.0; params.len()];
                weights.backward(u, &trace, 1.0, &state, &mut du, Some(&mut g), params);
                g
            })
            .collect();
        let mut gram = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..=i {
                let v = math::dot(&jac[i], &jac[j]);
                gram[i * m + j] = v;
                gram[j * m + i] = v;
            }
            gram[i * m + i] *= 1.0 + 1e-12;
        }
        let Some(coef) = math::cholesky_solve(&gram, m, &res) else { break };
        // Backtrack: far from the solution a full step can overshoot.
        let mut improved = None;
        let mut scale = 1.0;
        for _ in 0..12 {
            let mut candidate = params.clone();
            for (c, row) in coef.iter().zip(&jac) {
                math::axpy(scale * c, row, candidate.data_mut());
            }
            let new_res = fit_residuals(mode, &candidate, inputs, targets);
            if math::norm_inf(&new_res) < err {
                improved = Some((candidate, new_res));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, new_res)) = improved else { break };
        *params = candidate;
        res = new_res;
    }
}
