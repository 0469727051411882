//! Coordinated capture: a small grid where a stag pays off only when every
//! agent stands on it at once, a lone hunter is penalized, and small prey
//! offer a safe but meagre alternative.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::StateVector;
use crate::game::JointAction;

pub const N_ACTIONS: usize = 5;
pub const ACTION_NAMES: [&str; N_ACTIONS] = ["stay", "up", "down", "left", "right"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    pub n_agents: usize,
    /// Prey count including the stag (prey 0).
    pub n_prey: usize,
    pub episode_limit: usize,
    pub reward_capture: f64,
    pub reward_solo: f64,
    pub reward_small: f64,
    pub step_cost: f64,
    pub obs_radius: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            width: 6,
            height: 6,
            n_agents: 2,
            n_prey: 3,
            episode_limit: 30,
            reward_capture: 12.0,
            reward_solo: -2.0,
            reward_small: 1.0,
            step_cost: 0.0,
            obs_radius: 2,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::Config(format!("grid {}x{} is too small", self.width, self.height)));
        }
        if self.n_agents == 0 || self.n_agents > 4 {
            return Err(Error::Config(format!("n_agents must be in 1..=4 (got {})", self.n_agents)));
        }
        if self.n_prey == 0 {
            return Err(Error::Config("at least the stag must be placed".into()));
        }
        let interior = (self.width - 2) * (self.height - 2);
        if interior < self.n_prey {
            return Err(Error::Config(format!(
                "{}x{} grid has {interior} interior cells for {} prey",
                self.width, self.height, self.n_prey
            )));
        }
        if self.episode_limit == 0 || self.obs_radius == 0 {
            return Err(Error::Config("episode_limit and obs_radius must be positive".into()));
        }
        Ok(())
    }

    pub fn observation_len(&self) -> usize {
        2 + 3 * (self.n_agents - 1 + self.n_prey) + 1
    }

    pub fn state_len(&self) -> usize {
        2 * (self.n_agents + self.n_prey) + 1
    }

    fn corner(&self, i: usize) -> Pos {
        let (w, h) = (self.width - 1, self.height - 1);
        [Pos { x: 0, y: 0 }, Pos { x: w, y: h }, Pos { x: w, y: 0 }, Pos { x: 0, y: h }][i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    fn chebyshev(self, other: Pos) -> usize {
        self.x.abs_diff(other.x).max(self.y.abs_diff(other.y))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridState {
    pub agents: Vec<Pos>,
    /// Prey 0 is the stag.
    pub prey: Vec<Pos>,
    pub consumed: Vec<bool>,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next: GridState,
    pub observations: Vec<Observation>,
    pub reward: f64,
    pub done: bool,
    pub captured: bool,
}

/// Agents start at opposite corners; prey occupy distinct interior cells.
pub fn reset(cfg: &GridConfig, seed: u64) -> Result<(GridState, Vec<Observation>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let iw = cfg.width - 2;
    let cells = index::sample(&mut rng, iw * (cfg.height - 2), cfg.n_prey);
    let prey = cells.iter().map(|c| Pos { x: 1 + c % iw, y: 1 + c / iw }).collect();
    let state = GridState {
        agents: (0..cfg.n_agents).map(|i| cfg.corner(i)).collect(),
        prey,
        consumed: vec![false; cfg.n_prey],
        step: 0,
    };
    let obs = observe(cfg, &state);
    Ok((state, obs))
}

fn move_agent(cfg: &GridConfig, p: Pos, action: usize) -> Pos {
    match action {
        1 => Pos { x: p.x, y: p.y.saturating_sub(1) },
        2 => Pos { x: p.x, y: (p.y + 1).min(cfg.height - 1) },
        3 => Pos { x: p.x.saturating_sub(1), y: p.y },
        4 => Pos { x: (p.x + 1).min(cfg.width - 1), y: p.y },
        _ => p,
    }
}

pub fn step(cfg: &GridConfig, state: &GridState, joint: &JointAction) -> Result<StepOutcome> {
    if joint.len() != cfg.n_agents {
        return Err(Error::JointActionLength { expected: cfg.n_agents, found: joint.len() });
    }
    for (agent, &a) in joint.actions().iter().enumerate() {
        if a >= N_ACTIONS {
            return Err(Error::InvalidAction { agent, action: a, limit: N_ACTIONS });
        }
    }
    let mut next = state.clone();
    for (p, &a) in next.agents.iter_mut().zip(joint.actions()) {
        *p = move_agent(cfg, *p, a);
    }
    next.step += 1;
    let mut reward = cfg.step_cost;
    let stag = next.prey[0];
    let on_stag = next.agents.iter().filter(|&&p| p == stag).count();
    let captured = on_stag == cfg.n_agents;
    if captured {
        reward += cfg.reward_capture;
    } else {
        reward += cfg.reward_solo * on_stag as f64;
    }
    for k in 1..cfg.n_prey {
        if !next.consumed[k] && next.agents.contains(&next.prey[k]) {
            next.consumed[k] = true;
            reward += cfg.reward_small;
        }
    }
    let done = captured || next.step >= cfg.episode_limit;
    let observations = observe(cfg, &next);
    Ok(StepOutcome { next, observations, reward, done, captured })
}

/// Own position, then `(dx/r, dy/r, visible)` for every other agent and
/// every prey (zeros when outside the radius or consumed), then time.
pub fn observe(cfg: &GridConfig, state: &GridState) -> Vec<Observation> {
    let r = cfg.obs_radius as f64;
    let time = state.step as f64 / cfg.episode_limit as f64;
    (0..cfg.n_agents)
        .map(|i| {
            let me = state.agents[i];
            let mut o = Vec::with_capacity(cfg.observation_len());
            o.push(me.x as f64 / (cfg.width - 1) as f64);
            o.push(me.y as f64 / (cfg.height - 1) as f64);
            let others = state.agents.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &p)| (p, true));
            let prey = state.prey.iter().zip(&state.consumed).map(|(&p, &c)| (p, !c));
            for (p, present) in others.chain(prey) {
                if present && me.chebyshev(p) <= cfg.obs_radius {
                    o.push((p.x as f64 - me.x as f64) / r);
                    o.push((p.y as f64 - me.y as f64) / r);
                    o.push(1.0);
                } else {
                    o.extend_from_slice(&[0.0, 0.0, 0.0]);
                }
            }
            o.push(time);
            Observation(o)
        })
        .collect()
}

/// Normalized agent and prey positions (consumed prey at `(-1, -1)`) and time.
pub fn global_state_vector(cfg: &GridConfig, state: &GridState) -> StateVector {
    let sx = (cfg.width - 1) as f64;
    let sy = (cfg.height - 1) as f64;
    let mut v = Vec::with_capacity(cfg.state_len());
    for p in &state.agents {
        v.push(p.x as f64 / sx);
        v.push(p.y as f64 / sy);
    }
    for (p, &c) in state.prey.iter().zip(&state.consumed) {
        if c {
            v.extend_from_slice(&[-1.0, -1.0]);
        } else {
            v.push(p.x as f64 / sx);
            v.push(p.y as f64 / sy);
        }
    }
    v.push(state.step as f64 / cfg.episode_limit as f64);
    StateVector(v)
}
