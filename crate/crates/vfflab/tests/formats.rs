use proptest::prelude::*;
use serde_json::Value;
use vfflab::formats::{self, kind, GameDoc, MixerDoc};
use vfflab_core::dynamics::{integrate_flow, zero_loss_witness, StopRule};
use vfflab_core::game::{game_a, game_b, random_game};
use vfflab_core::rnd::RndPair;
use vfflab_core::{JointAction, MixerMode, MixerParams, PolicyKind};

fn mode_strategy() -> impl Strategy<Value = MixerMode> {
    prop_oneof![Just(MixerMode::Additive), Just(MixerMode::Monotonic), Just(MixerMode::Unconstrained)]
}

proptest! {
    #[test]
    fn mixer_round_trip_is_bit_exact(
        mode in mode_strategy(),
        n in 1usize..4,
        h in 1usize..6,
        s in 1usize..4,
        raw in proptest::collection::vec(any::<f64>(), 0..400),
    ) {
        let len = MixerParams::expected_len(n, h, s);
        let data: Vec<f64> = (0..len).map(|i| {
            let x = raw.get(i % raw.len().max(1)).copied().unwrap_or(0.25);
            if x.is_finite() { x } else { 1e-300 * i as f64 }
        }).collect();
        let p = MixerParams::from_data(n, h, s, data).unwrap();
        let text = formats::to_json_string(kind::MIXER_PARAMS, &MixerDoc::new(mode, &p)).unwrap();
        let back: MixerDoc = formats::from_json_str(kind::MIXER_PARAMS, &text).unwrap();
        let (m2, p2) = back.to_params().unwrap();
        prop_assert_eq!(m2, mode);
        for (a, b) in p.data().iter().zip(p2.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn generated_games_round_trip(seed in 0u64..200, agents in 1usize..4, actions in 2usize..4) {
        let g = random_game(seed, agents, actions, 0.5).unwrap();
        let text = formats::to_json_string(kind::GAME, &GameDoc::from_game(&g)).unwrap();
        let doc: GameDoc = formats::from_json_str(kind::GAME, &text).unwrap();
        prop_assert_eq!(doc.to_game().unwrap(), g);
    }
}

#[test]
fn table_games_serialize_as_nested_arrays() {
    let text = formats::to_json_string(kind::GAME, &GameDoc::from_game(&game_b())).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["data"]["n_agents"], 2);
    assert_eq!(v["data"]["payoffs"][0][0], 12.0);
    assert_eq!(v["data"]["payoffs"][2][2], 10.0);
}

#[test]
fn stability_report_and_flow_trace_serialize() {
    let g = game_a();
    let w = zero_loss_witness(&g, MixerMode::Unconstrained, &JointAction::new(vec![0, 0]), 0).unwrap();
    let policy = PolicyKind::softmax(0.05);
    let report = vfflab_core::dynamics::classify_fixed_point(&g, MixerMode::Unconstrained, &w.point, &policy, 1e-8).unwrap();
    let text = formats::to_json_string(kind::STABILITY_REPORT, &report).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    assert!(v["data"]["manifold_normal_rank"].as_u64().unwrap() >= 2);
    let back: vfflab_core::dynamics::StabilityReport = formats::from_json_str(kind::STABILITY_REPORT, &text).unwrap();
    assert_eq!(back, report);

    let trace = integrate_flow(&g, MixerMode::Unconstrained, &w.point, &policy, 5e-4, 0.01, &StopRule::default()).unwrap();
    let back: vfflab_core::dynamics::FlowTrace =
        formats::from_json_str(kind::FLOW_TRACE, &formats::to_json_string(kind::FLOW_TRACE, &trace).unwrap()).unwrap();
    assert_eq!(back, trace);
    let csv = String::from_utf8(formats::flow_trace_csv(&trace).unwrap()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("time,loss,grad_norm,greedy_0,greedy_1"));
    assert_eq!(lines.count(), trace.samples.len());
    assert!(csv.lines().nth(1).unwrap().ends_with(",A,A"));
}

#[test]
fn rnd_pair_round_trips() {
    let rnd = RndPair::new(11, 42, 5e-4).unwrap();
    let text = formats::to_json_string(kind::RND_PAIR, &rnd).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["data"]["seed"], 42);
    assert_eq!(v["data"]["state_dim"], 11);
    let back: RndPair = formats::from_json_str(kind::RND_PAIR, &text).unwrap();
    assert_eq!(back, rnd);
}
