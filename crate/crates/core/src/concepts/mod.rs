//! Class-conditioned concept discovery by factorising crop activations.

pub mod bank;
pub mod crops;
pub mod nmf;

pub use bank::{extract_concept_bank, BankMetadata, ConceptBank, ConceptVector, ExtractionConfig};
pub use crops::{crop_activation_matrix, crop_boxes, make_crops, CropActivationMatrix, CropBox, CropPolicy};
pub use nmf::{nmf, NmfConfig, NmfResult};
