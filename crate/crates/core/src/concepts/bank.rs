//! Per-class concept banks and their on-disk form.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::crops::{crop_activation_matrix, CropPolicy};
use super::nmf::{nmf, NmfConfig};
use crate::data::ClassConditionedSet;
use crate::error::{Error, Result};
use crate::importance::NnlsSolver;
use crate::model::ClassifierAdapter;
use crate::store::ArrayFile;

/// Two concepts closer than this in cosine similarity count as duplicates.
pub const DUPLICATE_COSINE: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub k: usize,
    pub crop_policy: CropPolicy,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// 0 = plain NMF; 1 = re-factorise the dominant concept into two.
    pub recursion_depth: u32,
}

impl ExtractionConfig {
    pub fn new(k: usize, image_size: usize, seed: u64) -> Self {
        ExtractionConfig {
            k,
            crop_policy: CropPolicy::for_image_size(image_size),
            max_iters: 200,
            tol: 1e-5,
            seed,
            recursion_depth: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVector {
    pub class_id: usize,
    pub index: usize,
    pub weights: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMetadata {
    pub class_id: usize,
    pub k: usize,
    pub split_layer: String,
    pub crop_policy: CropPolicy,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Multiplicative-update iterations of the main factorisation.
    pub iters: usize,
    /// `‖A − UW‖_F / ‖A‖_F` of the final bank with refitted coefficients.
    pub final_error: f64,
    pub recursion_depth: u32,
    pub n_crops: usize,
    pub image_ids: Vec<String>,
}

impl BankMetadata {
    pub fn extraction_config(&self) -> ExtractionConfig {
        ExtractionConfig {
            k: self.k,
            crop_policy: self.crop_policy,
            max_iters: self.max_iters,
            tol: self.tol,
            seed: self.seed,
            recursion_depth: self.recursion_depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    pub metadata: BankMetadata,
    /// `(k, C)`, unit-norm rows.
    pub w: Array2<f64>,
    /// Mean coefficient of each concept over the crops.
    pub u_summary: Array1<f64>,
}

impl ConceptBank {
    pub fn class_id(&self) -> usize {
        self.metadata.class_id
    }

    pub fn k(&self) -> usize {
        self.w.nrows()
    }

    pub fn channels(&self) -> usize {
        self.w.ncols()
    }

    pub fn vectors(&self) -> Vec<ConceptVector> {
        self.w
            .rows()
            .into_iter()
            .enumerate()
            .map(|(index, row)| ConceptVector {
                class_id: self.class_id(),
                index,
                weights: row.to_owned(),
            })
            .collect()
    }

    pub fn solver(&self) -> NnlsSolver {
        NnlsSolver::new(self.w.view())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = ArrayFile::new(self.metadata.clone());
        f.insert("W", self.w.view());
        f.insert("U_summary", self.u_summary.view());
        f.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: ArrayFile<BankMetadata> = ArrayFile::load(path)?;
        let w: Array2<f64> = f.get("W")?;
        let u_summary = f.get("U_summary")?;
        if w.nrows() != f.metadata.k {
            return Err(Error::Input(format!(
                "{}: bank declares k = {} but stores {} vectors",
                path.display(),
                f.metadata.k,
                w.nrows()
            )));
        }
        Ok(ConceptBank {
            metadata: f.metadata,
            w,
            u_summary,
        })
    }

    pub fn file_name(class_id: usize) -> String {
        format!("bank_{class_id:03}.json")
    }
}

/// Rejects zero vectors and near-duplicate pairs.
pub fn check_distinct(w: &Array2<f64>) -> Result<()> {
    let norms: Vec<f64> = w.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(j) = norms.iter().position(|n| *n == 0.0) {
        return Err(Error::Degenerate(format!("concept {j} has zero norm")));
    }
    for i in 0..w.nrows() {
        for j in i + 1..w.nrows() {
            let cos = w.row(i).dot(&w.row(j)) / (norms[i] * norms[j]);
            if cos > DUPLICATE_COSINE {
                return Err(Error::Degenerate(format!(
                    "concepts {i} and {j} are near-duplicates (cosine {cos:.6})"
                )));
            }
        }
    }
    Ok(())
}

/// Factorises `a` into `cfg.k` unit-norm concepts, optionally splitting the
/// dominant one. Returns `(W, U, main iterations)` with `U` refitted by NNLS.
pub fn factorize(a: &Array2<f64>, cfg: &ExtractionConfig) -> Result<(Array2<f64>, Array2<f64>, usize)> {
    let k = cfg.k;
    let nmf_cfg = |rank, seed| NmfConfig {
        rank,
        max_iters: cfg.max_iters,
        tol: cfg.tol,
        seed,
    };
    let (w, iters) = match cfg.recursion_depth {
        0 => {
            let r = nmf(a, &nmf_cfg(k, cfg.seed))?;
            (r.w, r.iterations)
        }
        1 => {
            if k < 2 {
                return Err(Error::Config("recursive extraction needs k >= 2".into()));
            }
            let main = nmf(a, &nmf_cfg(k - 1, cfg.seed))?;
            let mass = main.u.sum_axis(Axis(0));
            let dominant = (0..k - 1)
                .max_by(|&i, &j| mass[i].total_cmp(&mass[j]).then(j.cmp(&i)))
                .expect("k >= 2");
            let column = main.u.column(dominant);
            let mut sorted: Vec<f64> = column.to_vec();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            let rows: Vec<usize> = (0..a.nrows()).filter(|&i| column[i] >= median).collect();
            let sub_a = a.select(Axis(0), &rows);
            let sub = nmf(&sub_a, &nmf_cfg(2, cfg.seed.wrapping_add(1)))?;
            let mut w = Array2::zeros((k, a.ncols()));
            let mut next = 0;
            for j in 0..k - 1 {
                if j == dominant {
                    w.row_mut(next).assign(&sub.w.row(0));
                    w.row_mut(next + 1).assign(&sub.w.row(1));
                    next += 2;
                } else {
                    w.row_mut(next).assign(&main.w.row(j));
                    next += 1;
                }
            }
            (w, main.iterations)
        }
        d => return Err(Error::Config(format!("recursion depth {d} is not supported (use 0 or 1)"))),
    };
    check_distinct(&w)?;
    let solver = NnlsSolver::new(w.view());
    let mut u = Array2::zeros((a.nrows(), k));
    for (i, row) in a.rows().into_iter().enumerate() {
        u.row_mut(i).assign(&solver.solve(row));
    }
    Ok((w, u, iters))
}

pub fn extract_concept_bank(
    set: &ClassConditionedSet,
    adapter: &ClassifierAdapter,
    cfg: &ExtractionConfig,
) -> Result<ConceptBank> {
    let a = crop_activation_matrix(set, adapter, cfg.crop_policy)?;
    let (w, u, iters) = factorize(&a.values, cfg)?;
    let norm_a = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let final_error = super::nmf::frobenius_error(&a.values, &u, &w) / norm_a;
    log::info!(
        "class {}: {} crops, k = {}, relative error {final_error:.4}",
        set.class_id,
        a.values.nrows(),
        cfg.k
    );
    Ok(ConceptBank {
        metadata: BankMetadata {
            class_id: set.class_id,
            k: cfg.k,
            split_layer: adapter.split_layer().to_string(),
            crop_policy: cfg.crop_policy,
            seed: cfg.seed,
            max_iters: cfg.max_iters,
            tol: cfg.tol,
            iters,
            final_error,
            recursion_depth: cfg.recursion_depth,
            n_crops: a.values.nrows(),
            image_ids: set.images.iter().map(|i| i.id().to_string()).collect(),
        },
        u_summary: u.mean_axis(Axis(0)).expect("non-empty crops"),
        w,
    })
}
