//! Nested importance samplers from composable inference combinators.
//!
//! This crate implements a small probabilistic runtime in which inference
//! algorithms are *programs*: primitive models produce weighted, traced
//! evaluations, and four combinators — `propose`, `extend`, `compose`, and
//! `resample` — build samplers out of samplers while preserving proper
//! weighting. On top of the runtime sit variational objectives that train
//! neural proposal kernels through the same interface, including annealed
//! importance samplers with learned transitions.
//!
//! Start with the `examples/` directory: each file is a runnable walkthrough
//! of one capability, from likelihood weighting to training an annealed
//! sampler on a multimodal target.

pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod combinators;
pub mod dist;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trace;

pub use autodiff::{backward, central_difference, Parameter, Tape, Value};
pub use combinators::{Program, Target};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalScope, LossArgs, LossFn, PrimitiveProgram, SampleMode, Session};
pub use objectives::{ess, ess_fraction, log_z_hat, Divergence, NviLoss, RwsLoss, SviLoss};
pub use rng::RandomStream;
pub use trace::{Address, DensityMap, LogWeight, Trace, WeightedEvaluation};
