//! Single-state cooperative matrix games.
//!
//! A game is a dense payoff tensor over joint actions with a unique maximum.
//! Joint actions are stored row-major: the last agent's action varies fastest.
//! Action indices map to letter labels `A = 0`, `B = 1`, `C = 2`, ...

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Payoff range used by [`random_game`].
pub const RANDOM_PAYOFF_RANGE: (f64, f64) = (-10.0, 10.0);
pub const DEFAULT_MARGIN: f64 = 0.5;
pub const REJECTION_BUDGET: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointAction(pub Vec<usize>);

impl JointAction {
    pub fn new(actions: Vec<usize>) -> Self {
        Self(actions)
    }

    pub fn actions(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Letter labels, e.g. `(A,B)`.
    pub fn label(&self) -> String {
        let parts: Vec<String> = self.0.iter().map(|&a| action_label(a)).collect();
        format!("({})", parts.join(","))
    }
}

impl fmt::Display for JointAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// `0 -> "A"`, `1 -> "B"`, ..., `26 -> "a26"` past the alphabet.
pub fn action_label(action: usize) -> String {
    if action < 26 {
        char::from(b'A' + action as u8).to_string()
    } else {
        format!("a{action}")
    }
}

/// Dense payoff tensor; see the module docs for the layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayoffTensor {
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GameSpec {
    name: String,
    action_counts: Vec<usize>,
    payoffs: PayoffTensor,
}

impl GameSpec {
    /// Builds a game, checking shape, finiteness and the unique-optimum invariant.
    pub fn new(name: impl Into<String>, action_counts: Vec<usize>, payoffs: Vec<f64>) -> Result<Self> {
        if action_counts.is_empty() {
            return Err(Error::Parameter("a game needs at least one agent".into()));
        }
        if action_counts.contains(&0) {
            return Err(Error::Parameter("every agent needs at least one action".into()));
        }
        let size: usize = action_counts.iter().product();
        if payoffs.len() != size {
            return Err(Error::Dimension { what: "payoff tensor", expected: size, found: payoffs.len() });
        }
        if payoffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("payoff entries must be finite".into()));
        }
        let game = Self { name: name.into(), action_counts, payoffs: PayoffTensor { values: payoffs } };
        optimal_index(&game.payoffs.values)?;
        Ok(game)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    pub fn payoffs(&self) -> &PayoffTensor {
        &self.payoffs
    }

    /// Number of joint actions.
    pub fn n_joint(&self) -> usize {
        self.payoffs.values.len()
    }

    /// Length of the concatenated local-value vector.
    pub fn q_len(&self) -> usize {
        self.action_counts.iter().sum()
    }

    pub fn validate(&self, a: &JointAction) -> Result<()> {
        if a.len() != self.n_agents() {
            return Err(Error::JointActionLength { expected: self.n_agents(), found: a.len() });
        }
        for (agent, (&action, &limit)) in a.0.iter().zip(&self.action_counts).enumerate() {
            if action >= limit {
                return Err(Error::InvalidAction { agent, action, limit });
            }
        }
        Ok(())
    }

    pub fn index_of(&self, a: &JointAction) -> Result<usize> {
        self.validate(a)?;
        Ok(self.index_unchecked(a.actions()))
    }

    pub(crate) fn index_unchecked(&self, actions: &[usize]) -> usize {
        actions.iter().zip(&self.action_counts).fold(0, |idx, (&a, &c)| idx * c + a)
    }

    pub fn joint_from_index(&self, mut index: usize) -> JointAction {
        let mut actions = vec![0; self.n_agents()];
        for (slot, &c) in actions.iter_mut().zip(&self.action_counts).rev() {
            *slot = index % c;
            index /= c;
        }
        JointAction(actions)
    }

    /// All joint actions in storage order.
    pub fn joint_actions(&self) -> impl Iterator<Item = JointAction> + '_ {
        (0..self.n_joint()).map(|i| self.joint_from_index(i))
    }
}

fn optimal_index(values: &[f64]) -> Result<usize> {
    let best = crate::math::argmax(values);
    if let Some(other) = values.iter().enumerate().position(|(i, &v)| i != best && v == values[best]) {
        return Err(Error::DegenerateGame { first: best.min(other), second: best.max(other) });
    }
    Ok(best)
}

/// Ground-truth reward of joint action `a`.
pub fn payoff(game: &GameSpec, a: &JointAction) -> Result<f64> {
    Ok(game.payoffs.values[game.index_of(a)?])
}

/// Exhaustive argmax over joint actions.
pub fn optimal_joint_action(game: &GameSpec) -> Result<JointAction> {
    Ok(game.joint_from_index(optimal_index(&game.payoffs.values)?))
}

/// Difference between the best and second-best payoff (infinite for a
/// single joint action).
pub fn optimum_margin(game: &GameSpec) -> f64 {
    margin_of(&game.payoffs.values)
}

fn margin_of(values: &[f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in values {
        if v > best {
            second = best;
            best = v;
        } else if v > second {
            second = v;
        }
    }
    best - second
}

/// Game A: the optimum (A,A) is surrounded by heavy miscoordination penalties.
pub fn game_a() -> GameSpec {
    #[rustfmt::skip]
    let payoffs = vec![
        12.0, -12.0, -12.0,
        -12.0, 0.0, 0.0,
        -12.0, 0.0, 0.0,
    ];
    GameSpec::new("game_a", vec![3, 3], payoffs).expect("game A is well formed")
}

/// Game B: a safe plateau of 10 competes with the optimum (A,A) = 12.
pub fn game_b() -> GameSpec {
    #[rustfmt::skip]
    let payoffs = vec![
        12.0, 0.0, 10.0,
        0.0, 0.0, 10.0,
        10.0, 10.0, 10.0,
    ];
    GameSpec::new("game_b", vec![3, 3], payoffs).expect("game B is well formed")
}

pub fn make_game(name: &str) -> Result<GameSpec> {
    match name {
        "game_a" => Ok(game_a()),
        "game_b" => Ok(game_b()),
        _ => Err(Error::NotFound { kind: "game", name: name.into() }),
    }
}

/// Uniform payoffs in [-10, 10], rejection-sampled until the optimum beats
/// the runner-up by at least `margin`.
pub fn random_game(seed: u64, n_agents: usize, n_actions: usize, margin: f64) -> Result<GameSpec> {
    if n_agents == 0 || n_actions < 2 {
        return Err(Error::Parameter("random games need n_agents >= 1 and n_actions >= 2".into()));
    }
    if !(margin > 0.0) {
        return Err(Error::Parameter("margin must be positive".into()));
    }
    let size = n_actions.checked_pow(n_agents as u32).ok_or_else(|| Error::Parameter("game too large".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = RANDOM_PAYOFF_RANGE;
    for _ in 0..REJECTION_BUDGET {
        let values: Vec<f64> = (0..size).map(|_| rng.random_range(lo..=hi)).collect();
        if margin_of(&values) >= margin {
            let name = format!("random_s{seed}_n{n_agents}_a{n_actions}");
            return GameSpec::new(name, vec![n_actions; n_agents], values);
        }
    }
    Err(Error::GenerationFailure { margin, attempts: REJECTION_BUDGET })
}
