//! On-disk formats.
//!
//! Every JSON document is an envelope `{"schema_version": 1, "kind": ..., "data": ...}`.
//! Floats use shortest round-trip formatting, so finite values read back
//! bit-exactly. Non-finite values have no JSON spelling and are written as
//! `null`; documents that can carry them (reports) round-trip as JSON values
//! rather than as typed records.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use vfflab_core::dynamics::FlowTrace;
use vfflab_core::factorization::HyperBlock;
use vfflab_core::game::action_label;
use vfflab_core::training::{EpisodeMetric, EvalPoint, MatrixStep};
use vfflab_core::{GameSpec, JointAction, MixerMode, MixerParams};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub mod kind {
    pub const GAME: &str = "game";
    pub const MIXER_PARAMS: &str = "mixer_params";
    pub const AGENT_MODEL: &str = "agent_model";
    pub const STABILITY_REPORT: &str = "stability_report";
    pub const FLOW_TRACE: &str = "flow_trace";
    pub const RND_PAIR: &str = "rnd_pair";
    pub const EPISODE_TRACE: &str = "episode_trace";
    pub const MATRIX_SUMMARY: &str = "matrix_summary";
    pub const DYNAMICS_REPORT: &str = "dynamics_report";
    pub const GRIDWORLD_SUMMARY: &str = "gridworld_summary";
    pub const MATRIX_RUN: &str = "matrix_run";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub kind: String,
    pub data: T,
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(kind: &str, data: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&Envelope { schema_version: SCHEMA_VERSION, kind: kind.to_string(), data })?;
    s.push('\n');
    Ok(s)
}

pub fn from_json_str<T: DeserializeOwned>(kind: &str, s: &str) -> Result<T> {
    let env: Envelope<Value> = serde_json::from_str(s)?;
    if env.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!("unsupported schema_version {}", env.schema_version)));
    }
    if env.kind != kind {
        return Err(Error::Format(format!("expected a `{kind}` document, found `{}`", env.kind)));
    }
    Ok(serde_json::from_value(env.data)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, kind: &str, data: &T) -> Result<()> {
    write_text(path, &to_json_string(kind, data)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json_str(kind, &s)
}

// ---------------------------------------------------------------------------
// Games

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameDoc {
    pub name: String,
    pub n_agents: usize,
    pub action_counts: Vec<usize>,
    /// Nested arrays, first agent outermost.
    pub payoffs: Value,
}

fn nest(values: &[f64], counts: &[usize]) -> Value {
    match counts {
        [] => Value::from(values[0]),
        [_] => Value::Array(values.iter().map(|&v| Value::from(v)).collect()),
        [n, rest @ ..] => {
            let stride = values.len() / n;
            Value::Array(values.chunks(stride).map(|c| nest(c, rest)).collect())
        }
    }
}

fn flatten(v: &Value, counts: &[usize], out: &mut Vec<f64>) -> Result<()> {
    match counts {
        [] => out.push(v.as_f64().ok_or_else(|| Error::Format("payoff entry is not a number".into()))?),
        [n, rest @ ..] => {
            let arr = v.as_array().ok_or_else(|| Error::Format("payoffs must be nested arrays".into()))?;
            if arr.len() != *n {
                return Err(Error::Format(format!("payoff axis has {} entries, expected {n}", arr.len())));
            }
            for x in arr {
                flatten(x, rest, out)?;
            }
        }
    }
    Ok(())
}

impl GameDoc {
    pub fn from_game(game: &GameSpec) -> Self {
        Self {
            name: game.name().to_string(),
            n_agents: game.n_agents(),
            action_counts: game.action_counts().to_vec(),
            payoffs: nest(&game.payoffs().values, game.action_counts()),
        }
    }

    pub fn to_game(&self) -> Result<GameSpec> {
        if self.n_agents != self.action_counts.len() {
            return Err(Error::Format(format!("n_agents {} but {} action counts", self.n_agents, self.action_counts.len())));
        }
        let mut values = Vec::new();
        flatten(&self.payoffs, &self.action_counts, &mut values)?;
        Ok(GameSpec::new(self.name.clone(), self.action_counts.clone(), values)?)
    }
}

// ---------------------------------------------------------------------------
// Mixer parameters

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDoc {
    pub name: String,
    /// Output size of the block's affine map.
    pub rows: usize,
    /// State dimension.
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerDoc {
    pub mode: MixerMode,
    pub n_agents: usize,
    pub hidden_dim: usize,
    pub state_dim: usize,
    pub blocks: Vec<BlockDoc>,
}

impl MixerDoc {
    pub fn new(mode: MixerMode, params: &MixerParams) -> Self {
        let blocks = HyperBlock::ALL
            .iter()
            .map(|&b| {
                let (w, bias) = params.block(b);
                BlockDoc {
                    name: b.name().to_string(),
                    rows: params.block_out(b),
                    cols: params.state_dim(),
                    weights: w.to_vec(),
                    bias: bias.to_vec(),
                }
            })
            .collect();
        Self { mode, n_agents: params.n_agents(), hidden_dim: params.hidden_dim(), state_dim: params.state_dim(), blocks }
    }

    pub fn to_params(&self) -> Result<(MixerMode, MixerParams)> {
        let mut params = MixerParams::zeros(self.n_agents, self.hidden_dim, self.state_dim);
        if self.blocks.len() != HyperBlock::ALL.len() {
            return Err(Error::Format(format!("expected {} blocks, found {}", HyperBlock::ALL.len(), self.blocks.len())));
        }
        for (b, doc) in HyperBlock::ALL.iter().zip(&self.blocks) {
            let rows = params.block_out(*b);
            if doc.name != b.name() || doc.rows != rows || doc.cols != self.state_dim {
                return Err(Error::Format(format!(
                    "block `{}` ({}x{}) does not match `{}` ({}x{})",
                    doc.name,
                    doc.rows,
                    doc.cols,
                    b.name(),
                    rows,
                    self.state_dim
                )));
            }
            if doc.weights.len() != rows * self.state_dim || doc.bias.len() != rows {
                return Err(Error::Format(format!("block `{}` has the wrong number of entries", doc.name)));
            }
            let (w, bias) = params.block_mut(*b);
            w.copy_from_slice(&doc.weights);
            bias.copy_from_slice(&doc.bias);
        }
        let data = params.data().to_vec();
        Ok((self.mode, MixerParams::from_data(self.n_agents, self.hidden_dim, self.state_dim, data)?))
    }
}

// ---------------------------------------------------------------------------
// CSV

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn labels(a: &JointAction) -> Vec<String> {
    a.actions().iter().map(|&x| action_label(x)).collect()
}

fn csv_bytes(header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io("<csv buffer>", e))?;
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// `time, loss, grad_norm, greedy_0, ..., greedy_{N-1}`.
pub fn flow_trace_csv(trace: &FlowTrace) -> Result<Vec<u8>> {
    let n = trace.final_state.q.n_agents();
    let mut header = vec!["time".to_string(), "loss".into(), "grad_norm".into()];
    header.extend((0..n).map(|i| format!("greedy_{i}")));
    csv_bytes(
        header,
        trace.samples.iter().map(|s| {
            let mut r = vec![s.time.to_string(), s.loss.to_string(), s.grad_norm.to_string()];
            r.extend(labels(&s.greedy));
            r
        }),
    )
}

pub fn write_flow_trace_csv(path: &Path, trace: &FlowTrace) -> Result<()> {
    write_bytes(path, &flow_trace_csv(trace)?)
}

/// Matrix-game training stream. The `return` of a one-step episode is its reward.
pub fn matrix_steps_csv(steps: &[MatrixStep], n_agents: usize) -> Result<Vec<u8>> {
    let mut header = vec!["step".to_string(), "loss".into(), "return".into()];
    header.extend((0..n_agents).map(|i| format!("action_{i}")));
    header.extend((0..n_agents).map(|i| format!("greedy_{i}")));
    header.extend(["epsilon".to_string(), "beta".into()]);
    csv_bytes(
        header,
        steps.iter().map(|s| {
            let mut r = vec![s.step.to_string(), opt(s.loss), s.reward.to_string()];
            r.extend(labels(&s.joint_action));
            r.extend(labels(&s.greedy));
            r.extend([s.epsilon.to_string(), String::new()]);
            r
        }),
    )
}

pub fn write_matrix_steps_csv(path: &Path, steps: &[MatrixStep], n_agents: usize) -> Result<()> {
    write_bytes(path, &matrix_steps_csv(steps, n_agents)?)
}

pub fn episodes_csv(episodes: &[EpisodeMetric]) -> Result<Vec<u8>> {
    let header = ["episode", "t_env", "loss", "return", "success", "length", "epsilon", "beta", "intrinsic_mean"];
    csv_bytes(
        header.iter().map(|s| s.to_string()).collect(),
        episodes.iter().map(|e| {
            vec![
                e.episode.to_string(),
                e.t_env.to_string(),
                opt(e.loss),
                e.ext_return.to_string(),
                (e.success as u8).to_string(),
                e.length.to_string(),
                e.epsilon.to_string(),
                opt(e.beta),
                opt(e.intrinsic_mean),
            ]
        }),
    )
}

pub fn write_episodes_csv(path: &Path, episodes: &[EpisodeMetric]) -> Result<()> {
    write_bytes(path, &episodes_csv(episodes)?)
}

pub fn evaluations_csv(evals: &[EvalPoint]) -> Result<Vec<u8>> {
    csv_bytes(
        vec!["t_env".into(), "success_rate".into(), "mean_return".into()],
        evals.iter().map(|e| vec![e.t_env.to_string(), e.success_rate.to_string(), e.mean_return.to_string()]),
    )
}

pub fn write_evaluations_csv(path: &Path, evals: &[EvalPoint]) -> Result<()> {
    write_bytes(path, &evaluations_csv(evals)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vfflab_core::game::{game_a, random_game};

    #[test]
    fn game_doc_nests_by_agent() {
        let doc = GameDoc::from_game(&game_a());
        assert_eq!(doc.payoffs[0][0], Value::from(12.0));
        assert_eq!(doc.payoffs[2][1], Value::from(0.0));
        assert_eq!(doc.to_game().unwrap(), game_a());
    }

    #[test]
    fn three_agent_game_round_trips() {
        let g = random_game(4, 3, 2, 0.5).unwrap();
        let s = to_json_string(kind::GAME, &GameDoc::from_game(&g)).unwrap();
        let back: GameDoc = from_json_str(kind::GAME, &s).unwrap();
        assert_eq!(back.to_game().unwrap(), g);
    }

    #[test]
    fn wrong_kind_and_version_rejected() {
        let s = to_json_string(kind::GAME, &GameDoc::from_game(&game_a())).unwrap();
        assert!(from_json_str::<GameDoc>(kind::MIXER_PARAMS, &s).is_err());
        let bumped = s.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(from_json_str::<GameDoc>(kind::GAME, &bumped).is_err());
    }

    #[test]
    fn mixer_doc_rejects_bad_shapes() {
        let p = MixerParams::seeded(2, 4, 3, 0);
        let mut doc = MixerDoc::new(MixerMode::Monotonic, &p);
        assert_eq!(doc.to_params().unwrap(), (MixerMode::Monotonic, p));
        doc.blocks[1].rows = 5;
        assert!(doc.to_params().is_err());
    }
}
