//! Concept-guided blurring of likely patch pixels.

pub mod blur;
pub mod defend;
pub mod heatmap;
pub mod library;
pub mod mask;

pub use blur::{gaussian_blur, BlurConfig};
pub use defend::{defend, DefenseConfig, DefenseOutcome, DefensePlan, Selection};
pub use heatmap::{coefficient_maps, concept_heatmap, upsample, ConceptHeatmap, Upsampling};
pub use library::{ClassConcepts, ConceptLibrary};
pub use mask::{top_n_count, top_n_mask, PixelMask};
