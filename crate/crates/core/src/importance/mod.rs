//! Concept coefficients and their variance-based importance.

pub mod nnls;
pub mod scoring;
pub mod sobol;

pub use nnls::NnlsSolver;
pub use scoring::{concept_coefficients, score_concepts, ImportanceScores, ScoringConfig};
pub use sobol::{sobol_total_indices, SobolEstimate};
