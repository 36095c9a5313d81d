//! Group-sequential clinical trials monitored through a joint model for a
//! longitudinal biomarker and a time-to-event outcome.
//!
//! The library covers the full pipeline:
//!
//! * [`sim`] — draws trials from the joint model: a latent linear biomarker
//!   trajectory per patient, measurements with additive noise on a visit
//!   schedule, an event hazard multiplicative in the current biomarker value
//!   and the treatment arm, exponential loss to follow-up, uniform staggered
//!   entry and administrative censoring at each analysis.
//! * [`trajectory`] — per-patient running least squares on measurement
//!   prefixes: trajectory prediction, its variance inflation factor, and the
//!   pooled residual variance estimate of the measurement-error variance.
//! * [`cscore`] — the conditional-score estimating equations for the
//!   (biomarker, treatment) log-hazard coefficients computed on an analysis
//!   snapshot, their Jacobian, a damped Newton solver, and the cross-analysis
//!   sandwich covariance of the sequence of estimates.
//! * [`coxph`] — a treatment-only Cox partial-likelihood fit used as the
//!   comparator analysis that ignores the biomarker.
//! * [`gst`] — error-spending group-sequential machinery: the canonical
//!   boundary recursion, maximum-information calibration, boundaries built
//!   from the full estimated covariance, and the recombined (efficient)
//!   estimate sequence.
//! * [`verify`] — numerical verifiers for the boundary-ordering inequalities
//!   used to justify monitoring with the canonical distribution.
//! * [`harness`] — Monte Carlo operating characteristics, sample-size search
//!   and the relative-efficiency comparison between the joint-model and
//!   Cox-based monitoring.

pub mod config;
pub mod coxph;
pub mod cscore;
pub mod gst;
pub mod harness;
pub mod linalg;
pub mod mvn;
pub mod sim;
pub mod stats;
pub mod trajectory;
pub mod verify;

pub use config::{Design, ModelParams, RunConfig};
