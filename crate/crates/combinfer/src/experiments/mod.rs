//! End-to-end studies built on the combinator runtime: the annealed sampler
//! with trained kernels on the ring target, and a population Gibbs sweep on a
//! conjugate mixture toy.

pub mod annealing;
pub mod gibbs;
pub mod ring;

pub use annealing::{
    run_annealing, AnnealConfig, AnnealSummary, Annealer, BetaSchedule, EvalReport, Variant,
};
pub use gibbs::{pop_gibbs, run_gibbs, GibbsModel, GibbsSummary, IncrementRecorder};
pub use ring::{log_ring_density, ring_modes, RING_LOG_Z};
