//! Operational surface: configuration, synthetic data, signal files,
//! training, imputation and reports.

pub mod config;
pub mod gradcheck;
pub mod io;
pub mod reports;
pub mod synth;
pub mod train;

pub use config::{Profile, RunConfig};
pub use io::{load_signals, save_signals, SignalFormat};
pub use reports::{compare_kshot, error_report, impute, theorem_check, ErrorSource, Imputation, KshotRow};
pub use synth::{synth_generate, SyntheticConfig};
pub use train::{load_checkpoint, save_checkpoint, train, Sgd, TrainOutcome};
