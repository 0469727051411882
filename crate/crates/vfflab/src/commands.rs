//! The four experiment commands. Each writes its files under `out` and
//! returns the summary it wrote, so callers can inspect results directly.
//!
//! Independent runs fan out over the rayon pool; results are collected in
//! job order before anything is written, so outputs never depend on
//! scheduling.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vfflab_core::dynamics::{
    self, Classification, EscapeOptions, FlowState, ScalingRow, StabilityReport, StopRule, Witness,
};
use vfflab_core::factorization::greedy_joint;
use vfflab_core::game::{self, make_game};
use vfflab_core::gridworld::GridConfig;
use vfflab_core::training::{self, GridRun, LearnedModel, MatrixMetrics, TrainConfig};
use vfflab_core::{GameSpec, MixerMode, PolicyKind};

use crate::config::{parse_pattern, ExperimentConfig, GridMethod, MethodSpec};
use crate::error::{Error, Result};
use crate::formats::{self, kind, GameDoc, MixerDoc};
use crate::report::{self, Spread, StabilityRow};

fn games(names: &[String]) -> Result<Vec<GameSpec>> {
    if names.is_empty() {
        return Err(Error::Config("no games configured".into()));
    }
    names.iter().map(|n| Ok(make_game(n)?)).collect()
}

fn write_model(dir: &Path, model: &LearnedModel) -> Result<()> {
    formats::write_json(&dir.join("mixer.json"), kind::MIXER_PARAMS, &MixerDoc::new(model.mode, &model.mixer))?;
    formats::write_json(&dir.join("agents.json"), kind::AGENT_MODEL, &model.agents)
}

// ---------------------------------------------------------------------------
// Matrix games

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRunRecord {
    pub game: String,
    pub method: String,
    pub mode: MixerMode,
    pub seed: u64,
    /// Learned local values, one list per agent.
    pub q: Vec<Vec<f64>>,
    pub q_tot: Vec<f64>,
    /// `q_tot - payoff`, entrywise.
    pub errors: Vec<f64>,
    pub max_abs_error: f64,
    pub greedy: String,
    pub igm_consistent: bool,
    /// Set when training failed; the numeric fields are then empty.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixAggregate {
    pub game: String,
    pub method: String,
    pub runs: usize,
    pub igm_consistent: usize,
    /// Runs with every cell within 0.5 of the payoff.
    pub within_half: usize,
    pub mean_max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSummary {
    pub games: Vec<GameDoc>,
    pub train: TrainConfig,
    pub runs: Vec<MatrixRunRecord>,
    pub aggregates: Vec<MatrixAggregate>,
}

fn matrix_jobs(cfg: &ExperimentConfig) -> Result<(Vec<GameSpec>, Vec<(usize, MethodSpec, u64)>)> {
    if cfg.matrix.seeds.is_empty() {
        return Err(Error::Config("the matrix seed list is empty".into()));
    }
    if cfg.matrix.methods.is_empty() {
        return Err(Error::Config("no matrix methods configured".into()));
    }
    let gs = games(&cfg.matrix.games)?;
    let mut jobs = Vec::new();
    for g in 0..gs.len() {
        for m in &cfg.matrix.methods {
            for &s in &cfg.matrix.seeds {
                jobs.push((g, *m, s));
            }
        }
    }
    Ok((gs, jobs))
}

fn matrix_record(
    game: &GameSpec,
    method: MethodSpec,
    seed: u64,
    out: &std::result::Result<(LearnedModel, MatrixMetrics), vfflab_core::Error>,
) -> MatrixRunRecord {
    let base = MatrixRunRecord {
        game: game.name().to_string(),
        method: method.label(),
        mode: method.mode,
        seed,
        q: Vec::new(),
        q_tot: Vec::new(),
        errors: Vec::new(),
        max_abs_error: f64::NAN,
        greedy: String::new(),
        igm_consistent: false,
        failure: None,
    };
    match out {
        Err(e) => MatrixRunRecord { failure: Some(e.to_string()), ..base },
        Ok((_, metrics)) => {
            let snap = metrics.final_snapshot();
            let errors: Vec<f64> = snap.q_tot.iter().zip(&game.payoffs().values).map(|(v, y)| v - y).collect();
            let max_abs_error = errors.iter().fold(0.0f64, |m, e| m.max(e.abs()));
            let greedy = greedy_joint(&snap.q);
            let igm_consistent = game::optimal_joint_action(game).map(|o| o == greedy).unwrap_or(false);
            MatrixRunRecord {
                q: (0..snap.q.n_agents()).map(|i| snap.q.agent(i).to_vec()).collect(),
                q_tot: snap.q_tot.clone(),
                errors,
                max_abs_error,
                greedy: greedy.label(),
                igm_consistent,
                ..base
            }
        }
    }
}

fn aggregate(runs: &[MatrixRunRecord]) -> Vec<MatrixAggregate> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in runs {
        let k = (r.game.clone(), r.method.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(game, method)| {
            let rs: Vec<&MatrixRunRecord> = runs.iter().filter(|r| r.game == game && r.method == method).collect();
            let ok: Vec<&&MatrixRunRecord> = rs.iter().filter(|r| r.failure.is_none()).collect();
            MatrixAggregate {
                runs: rs.len(),
                igm_consistent: ok.iter().filter(|r| r.igm_consistent).count(),
                within_half: ok.iter().filter(|r| r.max_abs_error <= 0.5).count(),
                mean_max_abs_error: ok.iter().map(|r| r.max_abs_error).sum::<f64>() / ok.len().max(1) as f64,
                game,
                method,
            }
        })
        .collect()
}

fn table_text(runs: &[MatrixRunRecord]) -> String {
    let mut s = String::new();
    for r in runs {
        s.push_str(&format!("{} {} seed {}", r.game, r.method, r.seed));
        match &r.failure {
            Some(f) => s.push_str(&format!(": failed ({f})\n\n")),
            None if r.q.len() == 2 => {
                s.push_str(&format!(": greedy {} max error {:.3}\n", r.greedy, r.max_abs_error));
                s.push_str(&report::render_payoff_table(&r.q[0], &r.q[1], &r.q_tot));
                s.push('\n');
            }
            None => s.push_str(&format!(": greedy {} max error {:.3}\n\n", r.greedy, r.max_abs_error)),
        }
    }
    s
}

/// Trains every configured method on every game and seed and writes
/// `matrix/summary.json` and `matrix/tables.txt`.
pub fn cmd_reproduce_matrix(cfg: &ExperimentConfig, out: &Path) -> Result<MatrixSummary> {
    let train = cfg.train_config(TrainConfig::matrix())?;
    let (gs, jobs) = matrix_jobs(cfg)?;
    let runs: Vec<MatrixRunRecord> = jobs
        .par_iter()
        .map(|&(g, method, seed)| {
            let tc = TrainConfig { seed, target_kind: method.target_kind, ..train.clone() };
            let res = training::run_matrix_training(&gs[g], &tc, method.mode);
            matrix_record(&gs[g], method, seed, &res)
        })
        .collect();
    let summary =
        MatrixSummary { games: gs.iter().map(GameDoc::from_game).collect(), train, aggregates: aggregate(&runs), runs };
    let dir = out.join("matrix");
    formats::write_json(&dir.join("summary.json"), kind::MATRIX_SUMMARY, &summary)?;
    formats::write_text(&dir.join("tables.txt"), &table_text(&summary.runs))?;
    Ok(summary)
}

/// Like [`cmd_reproduce_matrix`] but keeps every run's artifacts:
/// `train_matrix/<game>/<method>/seed<k>/{metrics.csv, mixer.json, agents.json, table.txt}`.
pub fn cmd_train_matrix(cfg: &ExperimentConfig, out: &Path) -> Result<MatrixSummary> {
    let train = cfg.train_config(TrainConfig::matrix())?;
    let (gs, jobs) = matrix_jobs(cfg)?;
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(g, method, seed)| {
            let tc = TrainConfig { seed, target_kind: method.target_kind, ..train.clone() };
            training::run_matrix_training(&gs[g], &tc, method.mode)
        })
        .collect();
    let mut runs = Vec::with_capacity(jobs.len());
    for (&(g, method, seed), res) in jobs.iter().zip(&results) {
        let rec = matrix_record(&gs[g], method, seed, res);
        let dir = out.join("train_matrix").join(gs[g].name()).join(method.label()).join(format!("seed{seed}"));
        if let Ok((model, metrics)) = res {
            formats::write_matrix_steps_csv(&dir.join("metrics.csv"), &metrics.steps, gs[g].n_agents())?;
            write_model(&dir, model)?;
            formats::write_text(&dir.join("table.txt"), &table_text(core::slice::from_ref(&rec)))?;
        }
        runs.push(rec);
    }
    let summary =
        MatrixSummary { games: gs.iter().map(GameDoc::from_game).collect(), train, aggregates: aggregate(&runs), runs };
    formats::write_json(&out.join("train_matrix").join("summary.json"), kind::MATRIX_SUMMARY, &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Dynamics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeSummary {
    pub trials: usize,
    pub fraction: f64,
    pub diverged: usize,
    /// `(final greedy label, count)`, sorted by label.
    pub final_greedy: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WitnessRecord {
    pub game: String,
    pub pattern: String,
    pub fit_seed: u64,
    pub igm_consistent: bool,
    pub max_fit_error: f64,
    /// Set when the witness could not be built; probes were skipped.
    pub failure: Option<String>,
    pub classification: Option<Classification>,
    pub min_eigenvalue: f64,
    pub min_probe_value: f64,
    pub manifold_normal_rank: Option<usize>,
    pub flip_forms: Vec<f64>,
    pub scaling: Vec<ScalingRow>,
    /// `(τ, |∇L_τ − ∇L_greedy|)`.
    pub clarke: Vec<(f64, f64)>,
    pub escape: Option<EscapeSummary>,
    /// Relative path of the stability report, when one was written.
    pub report_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSummary {
    pub games: Vec<GameDoc>,
    pub mode: MixerMode,
    pub temperature: f64,
    pub scaling_temperatures: Vec<f64>,
    pub clarke_temperatures: Vec<f64>,
    pub witnesses: Vec<WitnessRecord>,
}

struct DynamicsItem {
    record: WitnessRecord,
    stability: Option<StabilityReport>,
    flow: Option<dynamics::FlowTrace>,
}

fn probe_witness(cfg: &ExperimentConfig, game: &GameSpec, pattern: &str, fit_seed: u64) -> DynamicsItem {
    let d = &cfg.dynamics;
    let mut record = WitnessRecord {
        game: game.name().to_string(),
        pattern: pattern.to_string(),
        fit_seed,
        igm_consistent: false,
        max_fit_error: f64::NAN,
        failure: None,
        classification: None,
        min_eigenvalue: f64::NAN,
        min_probe_value: f64::NAN,
        manifold_normal_rank: None,
        flip_forms: Vec::new(),
        scaling: Vec::new(),
        clarke: Vec::new(),
        escape: None,
        report_file: None,
    };
    let witness: Witness = match parse_pattern(pattern)
        .map_err(|e| e.to_string())
        .and_then(|g| dynamics::zero_loss_witness(game, d.mode, &g, fit_seed).map_err(|e| e.to_string()))
    {
        Ok(w) => w,
        Err(e) => {
            record.failure = Some(format!("pattern {pattern}: {e}"));
            return DynamicsItem { record, stability: None, flow: None };
        }
    };
    record.igm_consistent = witness.igm_consistent;
    record.max_fit_error = witness.max_fit_error;
    let policy = PolicyKind::softmax(d.temperature);
    let mut failures = Vec::new();
    let stability = match dynamics::classify_fixed_point(game, d.mode, &witness.point, &policy, d.classify_tol) {
        Ok(r) => {
            record.classification = Some(r.classification);
            record.min_eigenvalue = r.min_eigenvalue;
            record.min_probe_value = r.probe_values.iter().copied().fold(f64::INFINITY, f64::min);
            record.manifold_normal_rank = Some(r.manifold_normal_rank);
            record.flip_forms = r.flips.iter().map(|f| f.quadratic_form).collect();
            Some(r)
        }
        Err(e) => {
            failures.push(format!("classify: {e}"));
            None
        }
    };
    match dynamics::clarke_limit_probe(game, d.mode, &witness.point, &d.clarke_temperatures) {
        Ok(c) => record.clarke = c,
        Err(e) => failures.push(format!("clarke: {e}")),
    }
    let mut flow = None;
    if !witness.igm_consistent {
        match dynamics::saddle_scaling_probe(game, d.mode, &witness.point, &d.scaling_temperatures) {
            Ok(rows) => record.scaling = rows,
            Err(e) => failures.push(format!("scaling: {e}")),
        }
        let opts = EscapeOptions { dt_over_tau: d.escape_dt_over_tau, t_max: d.escape_t_max, final_loss_tol: d.escape_loss_tol };
        match dynamics::escape_statistics_with(
            game,
            d.mode,
            &witness.point,
            &policy,
            d.escape_trials,
            d.escape_noise,
            d.escape_seed,
            &opts,
        ) {
            Ok(stats) => {
                let mut counts: Vec<(String, usize)> = Vec::new();
                for o in &stats.outcomes {
                    let l = o.final_greedy.label();
                    match counts.iter_mut().find(|(k, _)| *k == l) {
                        Some(c) => c.1 += 1,
                        None => counts.push((l, 1)),
                    }
                }
                counts.sort();
                record.escape = Some(EscapeSummary {
                    trials: stats.outcomes.len(),
                    fraction: stats.fraction,
                    diverged: stats.outcomes.iter().filter(|o| o.diverged).count(),
                    final_greedy: counts,
                });
            }
            Err(e) => failures.push(format!("escape: {e}")),
        }
        flow = correcting_flow(game, d.mode, &witness.point, &policy, d.escape_dt_over_tau * d.temperature, d.escape_t_max)
            .map_err(|e| failures.push(format!("flow: {e}")))
            .ok();
    }
    if !failures.is_empty() {
        record.failure = Some(failures.join("; "));
    }
    DynamicsItem { record, stability, flow }
}

/// Flow started from `point + 0.05 v` along the correcting direction.
fn correcting_flow(
    game: &GameSpec,
    mode: MixerMode,
    point: &FlowState,
    policy: &PolicyKind,
    dt: f64,
    t_max: f64,
) -> vfflab_core::Result<dynamics::FlowTrace> {
    let Some((_, v)) = dynamics::correcting_direction(&point.q, game)? else {
        return Err(vfflab_core::Error::Precondition("no correcting direction".into()));
    };
    let mut start = point.clone();
    for (q, dv) in start.q.entries_mut().iter_mut().zip(&v) {
        *q += 0.05 * dv;
    }
    dynamics::integrate_flow(game, mode, &start, policy, dt, t_max, &StopRule::default())
}

/// Builds zero-loss witnesses for every configured pattern and probes them.
/// Writes `dynamics/report.json`, `dynamics/stability.txt`, one stability
/// report per witness and a flow trace (JSON and CSV) per saddle candidate.
pub fn cmd_dynamics(cfg: &ExperimentConfig, out: &Path) -> Result<DynamicsSummary> {
    let d = &cfg.dynamics;
    if !(d.temperature > 0.0) {
        return Err(Error::Config("dynamics.temperature must be positive".into()));
    }
    if d.patterns.is_empty() || d.witnesses_per_pattern == 0 {
        return Err(Error::Config("no witness patterns configured".into()));
    }
    let gs = games(&d.games)?;
    let mut jobs = Vec::new();
    for g in 0..gs.len() {
        for p in &d.patterns {
            for k in 0..d.witnesses_per_pattern {
                jobs.push((g, p.clone(), d.fit_seed + k as u64));
            }
        }
    }
    let items: Vec<DynamicsItem> = jobs.par_iter().map(|(g, p, s)| probe_witness(cfg, &gs[*g], p, *s)).collect();
    let dir = out.join("dynamics");
    let mut witnesses = Vec::with_capacity(items.len());
    let mut rows = Vec::with_capacity(items.len());
    for item in items {
        let mut rec = item.record;
        let stem = format!("{}_{}_fit{}", rec.game, rec.pattern, rec.fit_seed);
        if let Some(r) = &item.stability {
            let name = format!("{stem}_stability.json");
            formats::write_json(&dir.join(&name), kind::STABILITY_REPORT, r)?;
            rec.report_file = Some(name);
        }
        if let Some(f) = &item.flow {
            formats::write_json(&dir.join(format!("{stem}_flow.json")), kind::FLOW_TRACE, f)?;
            formats::write_flow_trace_csv(&dir.join(format!("{stem}_flow.csv")), f)?;
        }
        let scaled = rec
            .scaling
            .iter()
            .find(|s| s.temperature == d.temperature)
            .or(rec.scaling.last())
            .map(|s| (s.scaled, s.predicted));
        rows.push(StabilityRow {
            game: rec.game.clone(),
            pattern: rec.pattern.clone(),
            classification: rec
                .classification
                .map(dynamics::describe_classification)
                .unwrap_or_else(|| "failed".into()),
            min_eigenvalue: rec.min_eigenvalue,
            min_probe: rec.min_probe_value,
            scaled_curvature: scaled,
            escape_fraction: rec.escape.as_ref().map(|e| e.fraction),
        });
        witnesses.push(rec);
    }
    for g in &gs {
        formats::write_json(&dir.join(format!("{}.game.json", g.name())), kind::GAME, &GameDoc::from_game(g))?;
    }
    let summary = DynamicsSummary {
        games: gs.iter().map(GameDoc::from_game).collect(),
        mode: d.mode,
        temperature: d.temperature,
        scaling_temperatures: d.scaling_temperatures.clone(),
        clarke_temperatures: d.clarke_temperatures.clone(),
        witnesses,
    };
    formats::write_json(&dir.join("report.json"), kind::DYNAMICS_REPORT, &summary)?;
    let mut text = report::render_stability_table(&rows);
    text.push_str(&format!("\ntemperature {}; tau*vHv at tau = {}\n", d.temperature, d.temperature));
    formats::write_text(&dir.join("stability.txt"), &text)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Gridworld

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRunRecord {
    pub method: String,
    pub seed: u64,
    pub final_success_rate: f64,
    pub final_mean_return: f64,
    pub episodes: usize,
    pub failed: bool,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMethodSummary {
    pub method: String,
    pub label: String,
    pub success_rate: Spread,
    pub mean_return: Spread,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub env: GridConfig,
    pub train: TrainConfig,
    pub runs: Vec<GridRunRecord>,
    pub methods: Vec<GridMethodSummary>,
}

fn run_dir(out: &Path, method: GridMethod, seed: u64) -> PathBuf {
    out.join("gridworld").join(method.name()).join(format!("seed{seed}"))
}

/// One training run per (method, seed). Writes per-run
/// `metrics.csv`, model and novelty-network JSON and greedy episode traces,
/// plus `gridworld/curves.csv`, `gridworld/summary.json` and `summary.txt`.
pub fn cmd_train_gridworld(cfg: &ExperimentConfig, out: &Path) -> Result<GridSummary> {
    let env = cfg.grid_config()?;
    let train = cfg.train_config(TrainConfig::gridworld())?;
    let g = &cfg.gridworld;
    if g.seeds.is_empty() || g.methods.is_empty() {
        return Err(Error::Config("gridworld needs at least one method and one seed".into()));
    }
    let jobs: Vec<(GridMethod, u64)> = g.methods.iter().flat_map(|&m| g.seeds.iter().map(move |&s| (m, s))).collect();
    let results: Vec<vfflab_core::Result<GridRun>> = jobs
        .par_iter()
        .map(|&(m, seed)| {
            let tc = TrainConfig { seed, target_kind: m.target_kind(), ..train.clone() };
            training::run_gridworld_training(&env, &tc, m.mode(), m.rnd())
        })
        .collect();
    let mut runs = Vec::with_capacity(jobs.len());
    let mut curves = vec![vec![
        "method".to_string(),
        "seed".into(),
        "t_env".into(),
        "success_rate".into(),
        "mean_return".into(),
    ]];
    for (&(m, seed), res) in jobs.iter().zip(&results) {
        let dir = run_dir(out, m, seed);
        match res {
            Ok(run) => {
                formats::write_episodes_csv(&dir.join("metrics.csv"), &run.metrics.episodes)?;
                write_model(&dir, &run.model)?;
                if let Some(rnd) = &run.rnd {
                    formats::write_json(&dir.join("rnd.json"), kind::RND_PAIR, rnd)?;
                }
                for k in 0..g.trace_episodes {
                    let trace = training::greedy_episode(&env, &run.model, seed.wrapping_mul(1000).wrapping_add(k as u64))?;
                    formats::write_json(&dir.join(format!("episode{k}.json")), kind::EPISODE_TRACE, &trace)?;
                }
                for e in &run.metrics.evaluations {
                    curves.push(vec![
                        m.name().into(),
                        seed.to_string(),
                        e.t_env.to_string(),
                        e.success_rate.to_string(),
                        e.mean_return.to_string(),
                    ]);
                }
                runs.push(GridRunRecord {
                    method: m.name().into(),
                    seed,
                    final_success_rate: run.metrics.final_success_rate,
                    final_mean_return: run.metrics.final_mean_return,
                    episodes: run.metrics.episodes.len(),
                    failed: false,
                    failure: None,
                });
            }
            Err(e) => runs.push(GridRunRecord {
                method: m.name().into(),
                seed,
                final_success_rate: f64::NAN,
                final_mean_return: f64::NAN,
                episodes: 0,
                failed: true,
                failure: Some(e.to_string()),
            }),
        }
    }
    let mut methods = Vec::new();
    for &m in &g.methods {
        if methods.iter().any(|s: &GridMethodSummary| s.method == m.name()) {
            continue;
        }
        let rs: Vec<&GridRunRecord> = runs.iter().filter(|r| r.method == m.name()).collect();
        methods.push(GridMethodSummary {
            method: m.name().into(),
            label: training::method_label(m.mode(), m.target_kind(), m.rnd()),
            success_rate: report::spread(&rs.iter().map(|r| r.final_success_rate).collect::<Vec<_>>()),
            mean_return: report::spread(&rs.iter().map(|r| r.final_mean_return).collect::<Vec<_>>()),
        });
    }
    let summary = GridSummary { env, train, runs, methods };
    let gdir = out.join("gridworld");
    formats::write_json(&gdir.join("summary.json"), kind::GRIDWORLD_SUMMARY, &summary)?;
    formats::write_text(&gdir.join("curves.csv"), &csv_text(&curves)?)?;
    formats::write_text(&gdir.join("summary.txt"), &grid_text(&summary))?;
    Ok(summary)
}

fn csv_text(rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn grid_text(s: &GridSummary) -> String {
    let mut rows = vec![["method", "seed", "success", "return", "episodes"].map(String::from).to_vec()];
    for r in &s.runs {
        rows.push(vec![
            r.method.clone(),
            r.seed.to_string(),
            if r.failed { "failed".into() } else { format!("{:.2}", r.final_success_rate) },
            if r.failed { "-".into() } else { format!("{:.2}", r.final_mean_return) },
            r.episodes.to_string(),
        ]);
    }
    let mut text = report::align(&rows);
    text.push('\n');
    let mut agg = vec![["method", "label", "success mean", "IQR"].map(String::from).to_vec()];
    for m in &s.methods {
        agg.push(vec![
            m.method.clone(),
            m.label.clone(),
            format!("{:.3}", m.success_rate.mean),
            format!("[{:.3}, {:.3}]", m.success_rate.q25, m.success_rate.q75),
        ]);
    }
    text.push_str(&report::align(&agg));
    text
}
