//! Corpus ingestion, split manifests and class-conditioned reference sets.

pub mod manifest;
pub mod sets;
pub mod synth;

pub use manifest::{ingest_dataset, DatasetManifest, IngestConfig, ManifestEntry, Split, SplitRatios};
pub use sets::{build_class_conditioned_sets, ClassConditionedSet, DEFAULT_MIN_SET_SIZE};
