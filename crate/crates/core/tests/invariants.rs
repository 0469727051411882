//! Structural invariants checked over random inputs through the public API.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vfflab_core::dynamics::{self, FlowState, StopRule};
use vfflab_core::factorization::{self, greedy_joint, q_tot_gradients};
use vfflab_core::game::{self, game_a, game_b};
use vfflab_core::gridworld::{self, GridConfig, N_ACTIONS};
use vfflab_core::policy;
use vfflab_core::rnd::RndPair;
use vfflab_core::training::{lambda_weights, Trajectory, Transition};
use vfflab_core::{math, JointAction, MixerMode, MixerParams, PolicyKind, QVector, StateVector};

fn random_q(rng: &mut ChaCha8Rng, counts: &[usize], scale: f64) -> QVector {
    let n: usize = counts.iter().sum();
    QVector::new(counts.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn small_params(rng: &mut ChaCha8Rng, n_agents: usize, state_dim: usize) -> MixerParams {
    let mut p = MixerParams::init(n_agents, 8, state_dim, rng);
    for v in p.data_mut() {
        *v *= 0.5;
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn monotone_mixer_never_decreases_in_local_values(seed in 0u64..10_000, n_agents in 1usize..4, state_dim in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = vec![3; n_agents];
        let params = MixerParams::init(n_agents, 8, state_dim, &mut rng);
        let state = StateVector((0..state_dim).map(|_| rng.random_range(-2.0..2.0)).collect());
        let q = random_q(&mut rng, &counts, 10.0);
        let a = JointAction::new((0..n_agents).map(|_| rng.random_range(0..3)).collect());
        let (gq, _) = q_tot_gradients(MixerMode::Monotonic, &params, &state, &q, &a).unwrap();
        prop_assert!(gq.iter().all(|&d| d >= -1e-12), "{gq:?}");
    }

    #[test]
    fn greedy_ignores_per_agent_shifts(seed in 0u64..10_000, c in -50.0f64..50.0, agent in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_q(&mut rng, &[3, 4, 2], 5.0);
        let mut shifted = q.clone();
        let o = q.offset(agent);
        for k in 0..q.agent(agent).len() {
            shifted.entries_mut()[o + k] += c;
        }
        prop_assert_eq!(greedy_joint(&q), greedy_joint(&shifted));
    }

    #[test]
    fn softmax_ignores_per_agent_shifts(seed in 0u64..10_000, c in -50.0f64..50.0, tau in 0.05f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_q(&mut rng, &[3, 3], 5.0);
        let mut shifted = q.clone();
        for v in shifted.entries_mut()[..3].iter_mut() {
            *v += c;
        }
        let pol = PolicyKind::softmax(tau);
        let a = policy::joint_distribution(&pol, &q).unwrap();
        let b = policy::joint_distribution(&pol, &shifted).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn generated_games_have_a_unique_optimum(seed in 0u64..10_000, n_agents in 1usize..4, n_actions in 2usize..4) {
        let g = game::random_game(seed, n_agents, n_actions, 0.5).unwrap();
        let best = game::optimal_joint_action(&g).unwrap();
        let top = game::payoff(&g, &best).unwrap();
        let others = g.joint_actions().filter(|a| *a != best).map(|a| game::payoff(&g, &a).unwrap());
        for v in others {
            prop_assert!(top - v >= 0.5 - 1e-12);
        }
    }

    #[test]
    fn lambda_weights_form_a_distribution(lambda in 0.0f64..=1.0, m in 1usize..=10) {
        let w = lambda_weights(lambda, m);
        prop_assert_eq!(w.len(), m);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn only_the_last_transition_may_be_terminal(len in 1usize..8, done_at in 0usize..8) {
        let s = StateVector::unit();
        let ts: Vec<Transition> = (0..len)
            .map(|k| Transition { state: s.clone(), observations: vec![], joint_action: JointAction::new(vec![0]), reward_ext: 1.0, done: k == done_at })
            .collect();
        let ok = Trajectory::new(ts, s.clone(), vec![], Some(JointAction::new(vec![0])));
        prop_assert_eq!(ok.is_ok(), done_at + 1 >= len);
        if let Ok(t) = ok {
            prop_assert_eq!(t.terminated(), done_at + 1 == len);
            prop_assert_eq!(t.next_actions.len(), len);
        }
    }

    #[test]
    fn rnd_target_is_frozen_and_novelty_nonnegative(seed in 0u64..1_000, steps in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pair = RndPair::new(5, seed, 1e-2).unwrap();
        let before = pair.target().params().to_vec();
        let pred_before = pair.predictor().params().to_vec();
        let states: Vec<StateVector> = (0..16).map(|_| StateVector((0..5).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        for _ in 0..steps {
            pair.update_predictor(&states).unwrap();
        }
        prop_assert_eq!(pair.target().params(), &before[..]);
        prop_assert_ne!(pair.predictor().params(), &pred_before[..]);
        for s in &states {
            prop_assert!(pair.intrinsic_reward(s).unwrap() >= 0.0);
        }
    }

    #[test]
    fn gridworld_episodes_stay_in_bounds(seed in 0u64..5_000, w in 4usize..8, h in 4usize..8) {
        let cfg = GridConfig { width: w, height: h, ..GridConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut state, obs) = gridworld::reset(&cfg, seed).unwrap();
        prop_assert!(obs.iter().all(|o| o.0.len() == cfg.observation_len()));
        for (i, p) in state.prey.iter().enumerate() {
            prop_assert!(state.prey[i + 1..].iter().all(|q| q != p));
        }
        loop {
            let a = JointAction::new((0..cfg.n_agents).map(|_| rng.random_range(0..N_ACTIONS)).collect());
            let out = gridworld::step(&cfg, &state, &a).unwrap();
            prop_assert!(out.next.agents.iter().all(|p| p.x < w && p.y < h));
            prop_assert!(out.next.step <= cfg.episode_limit);
            prop_assert!(out.observations.iter().all(|o| o.0.len() == cfg.observation_len() && o.0.iter().all(|v| v.is_finite())));
            prop_assert_eq!(gridworld::global_state_vector(&cfg, &out.next).len(), cfg.state_len());
            // One scalar team reward, bounded by the reward table.
            let lo = cfg.reward_solo * cfg.n_agents as f64;
            let hi = cfg.reward_capture + cfg.reward_small * (cfg.n_prey - 1) as f64;
            prop_assert!(out.reward >= lo && out.reward <= hi, "reward {}", out.reward);
            state = out.next;
            if out.done {
                break;
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn loss_never_increases_along_a_flow(seed in 0u64..10_000, tau in 0.1f64..1.0, b in any::<bool>()) {
        let g = if b { game_a() } else { game_b() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_q(&mut rng, g.action_counts(), 3.0);
        let start = FlowState::new(q, small_params(&mut rng, 2, 1));
        let stop = StopRule { grad_tol: 0.0, loss_tol: 0.0, sample_every: 1, step_control: true };
        let trace = dynamics::integrate_flow(&g, MixerMode::Unconstrained, &start, &PolicyKind::softmax(tau), 0.01 * tau, 0.05, &stop).unwrap();
        for w in trace.samples.windows(2) {
            prop_assert!(w[1].time > w[0].time);
            prop_assert!(w[1].loss <= w[0].loss + 1e-9 * (1.0 + w[0].loss));
        }
    }
}

#[test]
fn zero_loss_points_are_stationary() {
    let s = StateVector::unit();
    let pol = PolicyKind::softmax(0.05);
    for g in [game_a(), game_b()] {
        for (pattern, seed) in [([0, 0], 0), ([1, 1], 1), ([2, 2], 2), ([0, 2], 3)] {
            let w = dynamics::zero_loss_witness(&g, MixerMode::Unconstrained, &JointAction::new(pattern.to_vec()), seed).unwrap();
            assert_eq!(greedy_joint(&w.point.q).actions(), &pattern);
            let table = factorization::q_tot_table(MixerMode::Unconstrained, &w.point.params, &s, &w.point.q, &g).unwrap();
            let max_err = table.iter().zip(&g.payoffs().values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(max_err < 1e-6, "{} {pattern:?}: {max_err}", g.name());
            let grad = dynamics::loss_gradient(&g, MixerMode::Unconstrained, &w.point.params, &s, &w.point.q, &pol).unwrap();
            assert!(math::norm(&grad.total) < 1e-8, "{} {pattern:?}: |grad| {}", g.name(), math::norm(&grad.total));
        }
    }
}
