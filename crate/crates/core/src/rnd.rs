//! Random network distillation: a frozen random embedding of the global
//! state and a trainable predictor whose error is the novelty bonus.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::factorization::StateVector;
use crate::nn::Mlp;

pub const EMBEDDING_DIM: usize = 32;
pub const HIDDEN_DIM: usize = 64;
pub const DEFAULT_LR: f64 = 5e-4;

/// Linearly annealed weight of the intrinsic reward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self { start: 0.5, end: 0.05, anneal_steps: 100_000 }
    }
}

impl BetaSchedule {
    pub fn beta(&self, step: u64) -> f64 {
        if self.anneal_steps == 0 || step >= self.anneal_steps {
            return self.end;
        }
        let frac = step as f64 / self.anneal_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// `r_ext + β(step) · r_int`.
pub fn total_reward(r_ext: f64, r_int: f64, step: u64, sched: &BetaSchedule) -> f64 {
    if r_int == 0.0 {
        return r_ext;
    }
    r_ext + sched.beta(step) * r_int
}

/// Running mean and variance (Welford).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        self.m2 / (self.count - 1) as f64
    }

    /// `(x - mean) / std`; the raw value until two samples have been seen.
    pub fn standardize(&self, x: f64) -> f64 {
        let sd = num_traits::Float::sqrt(self.variance());
        if sd > 1e-12 {
            (x - self.mean) / sd
        } else {
            x
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RndPair {
    pub seed: u64,
    pub state_dim: usize,
    target: Mlp,
    predictor: Mlp,
    optimizer: Adam,
}

impl RndPair {
    /// Target and predictor are independent draws of a `state_dim → 64 → 32` network.
    pub fn new(state_dim: usize, seed: u64, lr: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = Mlp::new(&[state_dim, HIDDEN_DIM, EMBEDDING_DIM], &mut rng)?;
        let predictor = Mlp::new(&[state_dim, HIDDEN_DIM, EMBEDDING_DIM], &mut rng)?;
        let optimizer = Adam::new(predictor.n_params(), lr);
        Ok(Self { seed, state_dim, target, predictor, optimizer })
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn predictor(&self) -> &Mlp {
        &self.predictor
    }

    /// Makes the predictor an exact copy of the target (zero novelty everywhere).
    pub fn copy_target_into_predictor(&mut self) {
        self.predictor = self.target.clone();
    }

    fn check(&self, s: &StateVector) -> Result<()> {
        if s.len() != self.state_dim {
            return Err(Error::Dimension { what: "RND state", expected: self.state_dim, found: s.len() });
        }
        Ok(())
    }

    /// `½ |ĝ(s) - g(s)|²`.
    pub fn intrinsic_reward(&self, s: &StateVector) -> Result<f64> {
        self.check(s)?;
        let g = self.target.forward(&s.0);
        let p = self.predictor.forward(&s.0);
        Ok(0.5 * p.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
    }

    /// One Adam step on the mean intrinsic reward over `states`; returns the
    /// pre-update mean.
    pub fn update_predictor(&mut self, states: &[StateVector]) -> Result<f64> {
        if states.is_empty() {
            return Err(Error::Precondition("RND update needs a non-empty batch".into()));
        }
        let mut grad = vec![0.0; self.predictor.n_params()];
        let n = states.len() as f64;
        let mut loss = 0.0;
        for s in states {
            self.check(s)?;
            let g = self.target.forward(&s.0);
            let trace = self.predictor.forward_trace(&s.0);
            let diff: Vec<f64> = trace.output().iter().zip(&g).map(|(a, b)| a - b).collect();
            loss += 0.5 * diff.iter().map(|d| d * d).sum::<f64>() / n;
            let d_out: Vec<f64> = diff.iter().map(|d| d / n).collect();
            self.predictor.backward(&trace, &d_out, &mut grad);
        }
        if !loss.is_finite() {
            return Err(Error::TrainingDivergence { step: self.optimizer.t, detail: "non-finite RND loss".into() });
        }
        self.optimizer.step(self.predictor.params_mut(), &grad);
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_state(rng: &mut ChaCha8Rng, dim: usize) -> StateVector {
        StateVector((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn copied_predictor_has_zero_reward() {
        let mut rnd = RndPair::new(5, 3, DEFAULT_LR).unwrap();
        rnd.copy_target_into_predictor();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(rnd.intrinsic_reward(&random_state(&mut rng, 5)).unwrap(), 0.0);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let rnd = RndPair::new(5, 3, DEFAULT_LR).unwrap();
        assert!(matches!(rnd.intrinsic_reward(&StateVector(vec![0.0; 4])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn repeated_state_is_learned() {
        let mut rnd = RndPair::new(11, 7, DEFAULT_LR).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_state(&mut rng, 11);
        let initial = rnd.intrinsic_reward(&s).unwrap();
        assert!(initial > 0.0);
        let target_before = rnd.target().clone();
        for _ in 0..500 {
            rnd.update_predictor(core::slice::from_ref(&s)).unwrap();
        }
        assert_eq!(rnd.target(), &target_before);
        assert!(rnd.intrinsic_reward(&s).unwrap() < 0.01 * initial);
    }

    #[test]
    fn fixed_batch_loss_settles_monotone() {
        let mut rnd = RndPair::new(6, 9, DEFAULT_LR).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<StateVector> = (0..16).map(|_| random_state(&mut rng, 6)).collect();
        let losses: Vec<f64> = (0..100).map(|_| rnd.update_predictor(&batch).unwrap()).collect();
        for w in losses[10..].windows(2) {
            assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let mut rnd = RndPair::new(3, 0, DEFAULT_LR).unwrap();
        assert!(matches!(rnd.update_predictor(&[]), Err(Error::Precondition(_))));
    }

    #[test]
    fn total_reward_examples() {
        let sched = BetaSchedule::default();
        assert!((total_reward(1.0, 0.5, 0, &sched) - 1.25).abs() < 1e-15);
        assert!((total_reward(1.0, 0.5, 100_000, &sched) - 1.025).abs() < 1e-15);
        assert!((total_reward(1.0, 0.5, 5_000_000, &sched) - 1.025).abs() < 1e-15);
        assert_eq!(total_reward(-3.5, 0.0, 17, &sched), -3.5);
    }

    proptest! {
        #[test]
        fn beta_monotone_and_bounded(a in 0u64..300_000, b in 0u64..300_000) {
            let sched = BetaSchedule::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(sched.beta(hi) <= sched.beta(lo));
            prop_assert!(sched.beta(a) >= 0.05 && sched.beta(a) <= 0.5);
        }

        #[test]
        fn reward_nonnegative_and_pure(seed in 0u64..50, x in proptest::collection::vec(-2.0f64..2.0, 4)) {
            let rnd = RndPair::new(4, seed, DEFAULT_LR).unwrap();
            let s = StateVector(x);
            let r = rnd.intrinsic_reward(&s).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert_eq!(r, rnd.intrinsic_reward(&s).unwrap());
        }
    }

    #[test]
    fn running_moments_match_two_pass() {
        let xs = [3.0, -1.0, 4.0, 1.5, 9.0, 2.6];
        let mut m = RunningMoments::default();
        for &x in &xs {
            m.push(x);
        }
        let mean = xs.iter().sum::<f64>() / 6.0;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 5.0;
        assert!((m.mean - mean).abs() < 1e-12);
        assert!((m.variance() - var).abs() < 1e-12);
        assert!((m.standardize(mean + var.sqrt()) - 1.0).abs() < 1e-12);
        assert_eq!(RunningMoments::default().standardize(2.0), 2.0);
    }
}
