#![allow(dead_code)]

use std::path::PathBuf;

use conceptshield::concepts::{BankMetadata, ConceptBank, CropPolicy};
use conceptshield::defense::ConceptLibrary;
use conceptshield::image::{Image, Preprocessing};
use conceptshield::importance::ImportanceScores;
use conceptshield::model::{ClassifierAdapter, Network};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Untrained two-class desk CNN, enough to exercise shapes and plumbing.
pub fn tiny_adapter(classes: usize, seed: u64) -> ClassifierAdapter {
    let net = Network::desk_cnn(classes, [4, 4, 8, 8, 8], 64, seed);
    let names = (0..classes).map(|c| format!("c{c}")).collect();
    ClassifierAdapter::new(net, "block5", Preprocessing::desk(), names).unwrap()
}

pub fn random_image(id: &str, label: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    let px = Array3::from_shape_fn((3, 64, 64), |_| r.gen::<f64>());
    Image::new(id, label, px).unwrap()
}

/// Random non-negative unit-norm banks with random scores for every class.
pub fn random_library(adapter: &ClassifierAdapter, k: usize, seed: u64) -> ConceptLibrary {
    let mut r = rng(seed);
    let channels = adapter.activation_shape().0;
    let mut banks = Vec::new();
    let mut scores = Vec::new();
    for class_id in 0..adapter.num_classes() {
        let mut w = Array2::from_shape_fn((k, channels), |_| r.gen::<f64>());
        for mut row in w.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row /= norm;
        }
        banks.push(ConceptBank {
            metadata: BankMetadata {
                class_id,
                k,
                split_layer: adapter.split_layer().to_string(),
                crop_policy: CropPolicy::for_image_size(64),
                seed,
                max_iters: 0,
                tol: 0.0,
                iters: 0,
                final_error: 0.0,
                recursion_depth: 0,
                n_crops: 0,
                image_ids: Vec::new(),
            },
            w,
            u_summary: Array1::ones(k),
        });
        let raw: Vec<f64> = (0..k).map(|_| r.gen::<f64>()).collect();
        scores.push(ImportanceScores::from_raw(class_id, raw, 0, seed));
    }
    ConceptLibrary::new(banks, scores).unwrap()
}
