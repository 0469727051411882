//! Experiment configuration.
//!
//! A config file is TOML. Command sections (`[matrix]`, `[dynamics]`,
//! `[gridworld]`) are read directly. `[train]` and `[env]` hold overrides
//! that are merged key by key over the command's `TrainConfig` preset and
//! over the default `GridConfig`; a key the preset does not have is an error.
//!
//! ```toml
//! [matrix]
//! seeds = [0, 1, 2]
//!
//! [train]
//! total_steps = 5000
//! epsilon = { start = 0.3, end = 0.3, anneal_steps = 0 }
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vfflab_core::dynamics::DEFAULT_TEMPERATURE;
use vfflab_core::gridworld::GridConfig;
use vfflab_core::training::{TargetKind, TrainConfig};
use vfflab_core::{JointAction, MixerMode};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub mode: MixerMode,
    pub target_kind: TargetKind,
}

impl MethodSpec {
    pub fn label(&self) -> String {
        format!("{}+{}", self.mode.name(), self.target_kind.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSection {
    pub games: Vec<String>,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodSpec>,
}

impl Default for MatrixSection {
    fn default() -> Self {
        Self {
            games: vec!["game_a".into(), "game_b".into()],
            seeds: (0..5).collect(),
            methods: vec![
                MethodSpec { mode: MixerMode::Unconstrained, target_kind: TargetKind::Sarsa },
                MethodSpec { mode: MixerMode::Monotonic, target_kind: TargetKind::QLearning },
                MethodSpec { mode: MixerMode::Additive, target_kind: TargetKind::QLearning },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSection {
    pub games: Vec<String>,
    pub mode: MixerMode,
    /// Greedy joint actions of the witnesses, as letter strings (`"BB"`).
    pub patterns: Vec<String>,
    /// Independent fits per pattern.
    pub witnesses_per_pattern: usize,
    pub fit_seed: u64,
    pub temperature: f64,
    pub classify_tol: f64,
    pub scaling_temperatures: Vec<f64>,
    pub clarke_temperatures: Vec<f64>,
    pub escape_trials: usize,
    pub escape_noise: f64,
    pub escape_t_max: f64,
    pub escape_dt_over_tau: f64,
    pub escape_loss_tol: f64,
    pub escape_seed: u64,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            games: vec!["game_a".into(), "game_b".into()],
            mode: MixerMode::Unconstrained,
            patterns: vec!["AA".into(), "BB".into(), "CC".into()],
            witnesses_per_pattern: 1,
            fit_seed: 0,
            temperature: DEFAULT_TEMPERATURE,
            classify_tol: 1e-8,
            scaling_temperatures: vec![0.1, 0.05, 0.02],
            clarke_temperatures: vec![0.5, 0.25, 0.125, 0.0625],
            escape_trials: 50,
            escape_noise: 0.05,
            escape_t_max: 2.0,
            escape_dt_over_tau: 0.01,
            escape_loss_tol: 1e-3,
            escape_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMethod {
    /// Unconstrained mixer, TD(λ) SARSA targets, novelty bonus.
    Ours,
    /// Monotonic mixer, Q-learning targets, no novelty bonus.
    Qmix,
}

impl GridMethod {
    pub fn name(self) -> &'static str {
        match self {
            GridMethod::Ours => "ours",
            GridMethod::Qmix => "qmix",
        }
    }

    pub fn mode(self) -> MixerMode {
        match self {
            GridMethod::Ours => MixerMode::Unconstrained,
            GridMethod::Qmix => MixerMode::Monotonic,
        }
    }

    pub fn target_kind(self) -> TargetKind {
        match self {
            GridMethod::Ours => TargetKind::TdLambda,
            GridMethod::Qmix => TargetKind::QLearning,
        }
    }

    pub fn rnd(self) -> bool {
        matches!(self, GridMethod::Ours)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridworldSection {
    pub methods: Vec<GridMethod>,
    pub seeds: Vec<u64>,
    /// Greedy episodes exported as JSON traces per run.
    pub trace_episodes: usize,
}

impl Default for GridworldSection {
    fn default() -> Self {
        Self { methods: vec![GridMethod::Ours, GridMethod::Qmix], seeds: (0..5).collect(), trace_episodes: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub matrix: MatrixSection,
    pub dynamics: DynamicsSection,
    pub gridworld: GridworldSection,
    pub train: toml::Table,
    pub env: toml::Table,
}

/// Overlays `over` on `base`, recursing into tables. Keys missing from `base`
/// are rejected.
fn merge(base: &mut toml::Table, over: &toml::Table, path: &str) -> Result<()> {
    for (k, v) in over {
        let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match (base.get_mut(k), v) {
            (None, _) => return Err(Error::Config(format!("unknown key `{here}`"))),
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                // Enum-valued fields are one-key tables; a different variant replaces the whole value.
                let same_shape = o.keys().all(|key| b.contains_key(key));
                if same_shape {
                    merge(b, o, &here)?;
                } else {
                    *b = o.clone();
                }
            }
            (Some(slot), _) => *slot = v.clone(),
        }
    }
    Ok(())
}

fn overlay<T: Serialize + DeserializeOwned>(preset: &T, over: &toml::Table, section: &str) -> Result<T> {
    let mut base = toml::Table::try_from(preset)?;
    merge(&mut base, over, section)?;
    toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| Error::Config(format!("[{section}]: {e}")))
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    /// `[train]` overrides applied to `preset`, then validated.
    pub fn train_config(&self, preset: TrainConfig) -> Result<TrainConfig> {
        let cfg = overlay(&preset, &self.train, "train")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid_config(&self) -> Result<GridConfig> {
        let cfg = overlay(&GridConfig::default(), &self.env, "env")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces every seed list with `[seed]`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.matrix.seeds = vec![seed];
        self.gridworld.seeds = vec![seed];
        self.dynamics.fit_seed = seed;
        self.dynamics.escape_seed = seed;
        self
    }
}

/// `"BB"` or `"B,B"` → `(B,B)`.
pub fn parse_pattern(s: &str) -> Result<JointAction> {
    let actions = s
        .chars()
        .filter(|c| !matches!(c, ',' | '(' | ')' | ' '))
        .map(|c| {
            if c.is_ascii_uppercase() {
                Ok(c as usize - 'A' as usize)
            } else {
                Err(Error::Config(format!("bad action letter `{c}` in pattern `{s}`")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if actions.is_empty() {
        return Err(Error::Config(format!("empty pattern `{s}`")));
    }
    Ok(JointAction::new(actions))
}
