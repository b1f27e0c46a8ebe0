//! Latent source discovery over sparse longitudinal event logs.
//!
//! The crate turns per-patient event streams into dense daily curves,
//! samples synchronized cross-sections, decomposes them with FastICA into
//! independent sources and their channel signatures, and uses the source
//! expressions as a patient representation for penalized logistic models,
//! evaluation statistics and per-record attribution.
//!
//! Module map:
//!
//! * [`ehr`]: event-log data model, ingestion and channel filtering.
//! * [`curves`]: per-modality dense curve construction.
//! * [`sampler`]: cross-section sampling and standardization.
//! * [`ica`]: FastICA fit, projection and reconstruction.
//! * [`supervised`]: elastic net / adaptive elastic net and the tuning protocol.
//! * [`eval`]: AUROC, DeLong machinery, calibration and bootstrap intervals.
//! * [`explain`]: linear SHAP and root-cause reports.
//! * [`diagram`]: signature description diagrams.
//! * [`synth`]: synthetic cohorts with known ground truth.

pub mod curves;
pub mod diagram;
pub mod ehr;
pub mod error;
pub mod eval;
pub mod explain;
pub mod ica;
pub mod matrix_io;
pub mod sampler;
pub mod seed;
pub mod stats;
pub mod supervised;
pub mod synth;

pub use error::{Error, Result};
