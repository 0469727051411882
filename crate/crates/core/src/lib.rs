//! Non-monotonic value-function factorization for cooperative multi-agent
//! Q-learning, together with the numerical machinery used to study its
//! learning dynamics.
//!
//! The crate is `no_std` (with `alloc`). Everything here is pure computation:
//! games, mixers and their gradients, behaviour policies, gradient-flow
//! integration and Hessian probes, replay/TD(λ) training loops, random network
//! distillation and a small coordination gridworld. File formats, the CLI and
//! report writers live in the `vfflab` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adam;
pub mod dynamics;
pub mod error;
pub mod factorization;
pub mod game;
pub mod gridworld;
pub mod math;
pub mod nn;
pub mod policy;
pub mod rnd;
pub mod training;

pub use error::{Error, Result};
pub use factorization::{MixerMode, MixerParams, QVector, StateVector};
pub use game::{GameSpec, JointAction, PayoffTensor};
pub use policy::PolicyKind;
