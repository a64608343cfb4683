//! Corpus ingestion into a manifest with seeded, stratified splits.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, Image, Preprocessing};
use crate::store;
use crate::util::derive_seed;

pub const MANIFEST_VERSION: u32 = 1;
const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "JPEG", "PNG"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    ConceptBuild,
    AttackEval,
    CleanEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub concept_build: f64,
    pub attack_eval: f64,
    pub clean_eval: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            concept_build: 0.6,
            attack_eval: 0.2,
            clean_eval: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub preprocessing: Preprocessing,
    pub seed: u64,
    #[serde(default)]
    pub splits: SplitRatios,
    /// Class directories that must exist; discovered from the tree when empty.
    #[serde(default)]
    pub classes: Vec<String>,
    /// Fraction of undecodable files tolerated before ingestion fails.
    #[serde(default = "default_max_skip")]
    pub max_skip_fraction: f64,
}

fn default_max_skip() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest root.
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub root: String,
    pub seed: u64,
    pub classes: Vec<String>,
    pub preprocessing: Preprocessing,
    pub splits: SplitRatios,
    pub skipped: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_bytes(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.entries_in(split).count()
    }

    /// Decodes and preprocesses every image of a split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Image>> {
        let entries: Vec<&ManifestEntry> = self.entries_in(split).collect();
        let root = PathBuf::from(&self.root);
        entries
            .par_iter()
            .map(|e| {
                load_image(
                    &root.join(&e.path),
                    &e.id,
                    e.label,
                    self.preprocessing.image_size,
                )
            })
            .collect()
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e))
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Enumerates `<root>/<class>/<image>` and assigns seeded per-class splits.
pub fn ingest_dataset(root: &Path, config: &IngestConfig) -> Result<DatasetManifest> {
    let r = &config.splits;
    let total = r.concept_build + r.attack_eval + r.clean_eval;
    if [r.concept_build, r.attack_eval, r.clean_eval]
        .iter()
        .any(|v| *v < 0.0)
        || (total - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {r:?}"
        )));
    }
    if !root.is_dir() {
        return Err(Error::Config(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let classes: Vec<String> = if config.classes.is_empty() {
        sorted_dir(root)?
            .into_iter()
            .filter(|p| p.is_dir())
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect()
    } else {
        for c in &config.classes {
            if !root.join(c).is_dir() {
                return Err(Error::Config(format!(
                    "class directory {} is missing",
                    root.join(c).display()
                )));
            }
        }
        config.classes.clone()
    };
    if classes.is_empty() {
        return Err(Error::Config(format!(
            "no class directories under {}",
            root.display()
        )));
    }

    let mut candidates = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        for path in sorted_dir(&root.join(class))? {
            if path.is_file() && is_image(&path) {
                candidates.push((label, path));
            }
        }
    }
    let decodable: Vec<bool> = candidates
        .par_iter()
        .map(|(_, p)| image::open(p).is_ok())
        .collect();
    let mut skipped = Vec::new();
    let mut per_class: Vec<Vec<(String, String)>> = vec![Vec::new(); classes.len()];
    for ((label, path), ok) in candidates.iter().zip(&decodable) {
        let rel = path
            .strip_prefix(root)
            .expect("under root")
            .to_string_lossy()
            .replace('\\', "/");
        if !ok {
            log::warn!("skipping undecodable image {rel}");
            skipped.push(rel);
            continue;
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
        per_class[*label].push((format!("{}/{stem}", classes[*label]), rel));
    }
    if !candidates.is_empty()
        && skipped.len() as f64 > config.max_skip_fraction * candidates.len() as f64
    {
        return Err(Error::Input(format!(
            "{} of {} images could not be decoded (limit {:.1}%)",
            skipped.len(),
            candidates.len(),
            config.max_skip_fraction * 100.0
        )));
    }

    let mut entries = Vec::new();
    for (label, items) in per_class.into_iter().enumerate() {
        let n = items.len();
        let n_concept = (n as f64 * r.concept_build).round() as usize;
        let n_attack = ((n as f64 * r.attack_eval).round() as usize).min(n - n_concept);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, label as u64, 0x5EED));
        order.shuffle(&mut rng);
        let mut split_of = vec![Split::CleanEval; n];
        for (rank, &i) in order.iter().enumerate() {
            split_of[i] = if rank < n_concept {
                Split::ConceptBuild
            } else if rank < n_concept + n_attack {
                Split::AttackEval
            } else {
                Split::CleanEval
            };
        }
        for ((id, path), split) in items.into_iter().zip(split_of) {
            entries.push(ManifestEntry {
                id,
                path,
                label,
                split,
            });
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));

    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        root: root.to_string_lossy().into_owned(),
        seed: config.seed,
        classes,
        preprocessing: config.preprocessing.clone(),
        splits: config.splits.clone(),
        skipped,
        entries,
    })
}
