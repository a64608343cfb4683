//! End-to-end protocol: configuration, metrics, cached pipeline, reports and figures.

pub mod config;
pub mod defenses;
pub mod figures;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use config::{Config, Mode};
pub use metrics::{metric_clean, metric_robust, Cell, Defense};
pub use pipeline::{corpus_fingerprint, Pipeline, OURS, PATCHCLEANSER, UNDEFENDED};
pub use report::{EvaluationReport, SweepAxis, SweepReport};
