//! Behaviour policies over joint actions. Every policy here factorizes into
//! independent per-agent distributions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::QVector;
use crate::game::JointAction;
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    Uniform,
    EpsilonGreedy { epsilon: f64 },
    Softmax { temperature: f64 },
}

impl PolicyKind {
    pub fn softmax(temperature: f64) -> Self {
        Self::Softmax { temperature }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PolicyKind::Uniform => Ok(()),
            PolicyKind::EpsilonGreedy { epsilon } if (0.0..=1.0).contains(&epsilon) => Ok(()),
            PolicyKind::EpsilonGreedy { epsilon } => Err(Error::Parameter(format!("epsilon {epsilon} outside [0, 1]"))),
            PolicyKind::Softmax { temperature } if temperature > 0.0 && temperature.is_finite() => Ok(()),
            PolicyKind::Softmax { temperature } => Err(Error::Parameter(format!("temperature {temperature} must be > 0"))),
        }
    }

    /// Per-agent action distribution.
    pub fn agent_probabilities(&self, q: &QVector, agent: usize) -> Result<Vec<f64>> {
        self.validate()?;
        let values = q.agent(agent);
        let n = values.len() as f64;
        Ok(match *self {
            PolicyKind::Uniform => vec![1.0 / n; values.len()],
            PolicyKind::EpsilonGreedy { epsilon } => {
                let best = math::argmax(values);
                (0..values.len()).map(|b| epsilon / n + if b == best { 1.0 - epsilon } else { 0.0 }).collect()
            }
            PolicyKind::Softmax { temperature } => math::softmax(values, temperature),
        })
    }

    pub fn all_agent_probabilities(&self, q: &QVector) -> Result<Vec<Vec<f64>>> {
        (0..q.n_agents()).map(|i| self.agent_probabilities(q, i)).collect()
    }
}

pub fn joint_probability(kind: &PolicyKind, q: &QVector, a: &JointAction) -> Result<f64> {
    q.check_action(a)?;
    let probs = kind.all_agent_probabilities(q)?;
    Ok(a.actions().iter().zip(&probs).map(|(&ai, p)| p[ai]).product())
}

/// Probability of every joint action, in row-major storage order.
pub fn joint_distribution(kind: &PolicyKind, q: &QVector) -> Result<Vec<f64>> {
    let probs = kind.all_agent_probabilities(q)?;
    let mut out = vec![1.0];
    for p in &probs {
        out = out.iter().flat_map(|&acc| p.iter().map(move |&pi| acc * pi)).collect();
    }
    Ok(out)
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws each agent's action independently.
pub fn sample_joint<R: Rng + ?Sized>(kind: &PolicyKind, q: &QVector, rng: &mut R) -> Result<JointAction> {
    kind.validate()?;
    let mut actions = Vec::with_capacity(q.n_agents());
    for i in 0..q.n_agents() {
        let values = q.agent(i);
        let a = match *kind {
            PolicyKind::Uniform => rng.random_range(0..values.len()),
            PolicyKind::EpsilonGreedy { epsilon } => epsilon_greedy(values, epsilon, rng),
            PolicyKind::Softmax { .. } => sample_index(&kind.agent_probabilities(q, i)?, rng),
        };
        actions.push(a);
    }
    Ok(JointAction::new(actions))
}

/// ε-greedy choice over one agent's values; the greedy branch breaks ties low.
pub fn epsilon_greedy<R: Rng + ?Sized>(values: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        rng.random_range(0..values.len())
    } else {
        math::argmax(values)
    }
}

/// `∇_q μ_τ(a | q)` for the product softmax policy.
pub fn policy_gradient(kind: &PolicyKind, q: &QVector, a: &JointAction) -> Result<Vec<f64>> {
    let PolicyKind::Softmax { temperature } = *kind else {
        return Err(Error::Unsupported("policy gradients exist only for the softmax policy"));
    };
    q.check_action(a)?;
    let probs = kind.all_agent_probabilities(q)?;
    let mu: f64 = a.actions().iter().zip(&probs).map(|(&ai, p)| p[ai]).product();
    let mut grad = vec![0.0; q.len()];
    for (i, (&ai, p)) in a.actions().iter().zip(&probs).enumerate() {
        let o = q.offset(i);
        for (b, &pb) in p.iter().enumerate() {
            let indicator = if b == ai { 1.0 } else { 0.0 };
            grad[o + b] = mu * (indicator - pb) / temperature;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ja(a: &[usize]) -> JointAction {
        JointAction::new(a.to_vec())
    }

    fn q33(v: [f64; 6]) -> QVector {
        QVector::new(vec![3, 3], v.to_vec()).unwrap()
    }

    fn random_q(rng: &mut ChaCha8Rng) -> QVector {
        q33(core::array::from_fn(|_| rng.random_range(-3.0..3.0)))
    }

    #[test]
    fn uniform_and_symmetric_softmax() {
        let q = q33([1.0, -2.0, 0.5, 3.0, 0.0, 0.0]);
        for a in [ja(&[0, 0]), ja(&[2, 1])] {
            assert!((joint_probability(&PolicyKind::Uniform, &q, &a).unwrap() - 1.0 / 9.0).abs() < 1e-15);
            let flat = q33([0.7; 6]);
            assert!((joint_probability(&PolicyKind::softmax(1.0), &flat, &a).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let q = q33([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let e = core::f64::consts::E;
        let expected = e / (e + 2.0) / 3.0;
        let p = joint_probability(&PolicyKind::softmax(1.0), &q, &ja(&[0, 0])).unwrap();
        assert!((p - expected).abs() < 1e-15);
        assert!((p - 0.19203).abs() < 1e-5);
    }

    #[test]
    fn bad_parameters() {
        let q = q33([0.0; 6]);
        assert!(matches!(joint_probability(&PolicyKind::softmax(0.0), &q, &ja(&[0, 0])), Err(Error::Parameter(_))));
        assert!(matches!(joint_probability(&PolicyKind::softmax(-1.0), &q, &ja(&[0, 0])), Err(Error::Parameter(_))));
        assert!(PolicyKind::EpsilonGreedy { epsilon: 1.5 }.validate().is_err());
    }

    #[test]
    fn distributions_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let q = random_q(&mut rng);
            for kind in [PolicyKind::Uniform, PolicyKind::EpsilonGreedy { epsilon: 0.3 }, PolicyKind::softmax(0.2)] {
                let total: f64 = joint_distribution(&kind, &q).unwrap().iter().sum();
                assert!((total - 1.0).abs() < 1e-10);
                let by_enum: f64 = (0..9).map(|k| joint_probability(&kind, &q, &ja(&[k / 3, k % 3])).unwrap()).sum();
                assert!((by_enum - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn softmax_concentrates_as_temperature_falls() {
        let q = q33([1.0, 0.2, -0.3, -1.0, 0.5, 0.1]);
        let g = ja(&[0, 1]);
        let p: Vec<f64> = [1.0, 0.1, 0.01].iter().map(|&t| joint_probability(&PolicyKind::softmax(t), &q, &g).unwrap()).collect();
        assert!(p[0] < p[1] && p[1] < p[2]);
        assert!(p[2] > 1.0 - 1e-12);
    }

    #[test]
    fn zero_epsilon_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = q33([0.1, 2.0, 2.0, -1.0, -3.0, 4.0]);
        for _ in 0..100 {
            assert_eq!(sample_joint(&PolicyKind::EpsilonGreedy { epsilon: 0.0 }, &q, &mut rng).unwrap(), ja(&[1, 2]));
        }
    }

    fn frequencies(kind: PolicyKind, q: &QVector, n: usize, seed: u64) -> [f64; 9] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = [0usize; 9];
        for _ in 0..n {
            let a = sample_joint(&kind, q, &mut rng).unwrap();
            counts[a.actions()[0] * 3 + a.actions()[1]] += 1;
        }
        counts.map(|c| c as f64 / n as f64)
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let q = q33([5.0, 1.0, 0.0, 0.0, 2.0, 1.0]);
        for f in frequencies(PolicyKind::Uniform, &q, 100_000, 8) {
            assert!((f - 1.0 / 9.0).abs() < 0.01);
        }
        for f in frequencies(PolicyKind::EpsilonGreedy { epsilon: 1.0 }, &q, 100_000, 9) {
            assert!((f - 1.0 / 9.0).abs() < 0.01);
        }
    }

    #[test]
    fn softmax_sampling_matches_probabilities() {
        let q = q33([1.0, 0.0, -1.0, 0.5, 0.5, 0.0]);
        let kind = PolicyKind::softmax(0.7);
        let expected = joint_distribution(&kind, &q).unwrap();
        for (f, p) in frequencies(kind, &q, 100_000, 10).iter().zip(&expected) {
            assert!((f - p).abs() < 0.01);
        }
    }

    #[test]
    fn gradient_rows_cancel_at_symmetry() {
        let q = q33([0.3; 6]);
        for k in 0..9 {
            let g = policy_gradient(&PolicyKind::softmax(1.0), &q, &ja(&[k / 3, k % 3])).unwrap();
            assert!(g[..3].iter().sum::<f64>().abs() < 1e-12);
            assert!(g[3..].iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kind = PolicyKind::softmax(0.5);
        for _ in 0..100 {
            let q = random_q(&mut rng);
            let a = ja(&[rng.random_range(0..3), rng.random_range(0..3)]);
            let g = policy_gradient(&kind, &q, &a).unwrap();
            for k in 0..6 {
                let h = 1e-5;
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp.entries_mut()[k] += h;
                qm.entries_mut()[k] -= h;
                let fd = (joint_probability(&kind, &qp, &a).unwrap() - joint_probability(&kind, &qm, &a).unwrap()) / (2.0 * h);
                assert!((fd - g[k]).abs() / (1.0 + g[k].abs()) < 1e-5);
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_high_temperature() {
        let q = q33([12.0, -12.0, 0.0, 3.0, 1.0, -7.0]);
        let g = policy_gradient(&PolicyKind::softmax(1e6), &q, &ja(&[0, 2])).unwrap();
        assert!(math::norm(&g) < 1e-5);
    }

    #[test]
    fn non_softmax_gradient_unsupported() {
        let q = q33([0.0; 6]);
        assert!(matches!(policy_gradient(&PolicyKind::Uniform, &q, &ja(&[0, 0])), Err(Error::Unsupported(_))));
        assert!(policy_gradient(&PolicyKind::EpsilonGreedy { epsilon: 0.1 }, &q, &ja(&[0, 0])).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_shift_invariant(vals in proptest::collection::vec(-10.0f64..10.0, 6), c in -20.0f64..20.0, t in 0.05f64..5.0) {
            let q = QVector::new(vec![3, 3], vals.clone()).unwrap();
            let qs = QVector::new(vec![3, 3], vals.iter().enumerate().map(|(k, v)| if k < 3 { v + c } else { *v }).collect()).unwrap();
            let kind = PolicyKind::softmax(t);
            let p = joint_distribution(&kind, &q).unwrap();
            let ps = joint_distribution(&kind, &qs).unwrap();
            for (x, y) in p.iter().zip(&ps) {
                proptest::prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
