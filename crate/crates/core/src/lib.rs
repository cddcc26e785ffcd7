//! Desk-scale imitation learning laboratory.
//!
//! The crate reproduces the copycat failure mode of behavioral cloning from
//! observation histories in two small partially observed control environments,
//! implements a residual-action two-stream architecture that avoids it, plus
//! the usual baselines (DAGGER, history dropout, adversarial feature removal,
//! keyframe reweighting) and ablations, and ships two diagnostics
//! (counterfactual-history intervention, previous-action probe) together with
//! an exact verifier of the residual lower bound on discrete joints.
//!
//! Everything is deterministic given a seed: networks run on a per-step
//! reverse-mode tape ([`autodiff`]), randomness flows through named
//! [`rng`] streams, and artifacts round-trip bit-exactly.

pub mod analysis;
pub mod autodiff;
pub mod demos;
pub mod envs;
pub mod methods;
pub mod mibound;
pub mod nn;
pub mod rng;

pub use autodiff::{Tape, Tensor};
pub use demos::{DemoDataset, HistoryWindow, Trajectory};
pub use methods::{MethodConfig, MethodKind, TrainedPolicy};


pub use nn::{Mlp, MlpSpec, ParamSet, ParamTensor};
