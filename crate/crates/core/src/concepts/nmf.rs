//! Non-negative matrix factorisation `A ≈ U W` by Lee–Seung multiplicative updates.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmfConfig {
    pub rank: usize,
    pub max_iters: usize,
    /// Stop once the relative error improvement of one iteration drops below this.
    pub tol: f64,
    pub seed: u64,
}

impl NmfConfig {
    pub fn new(rank: usize, seed: u64) -> Self {
        NmfConfig {
            rank,
            max_iters: 200,
            tol: 1e-5,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmfResult {
    /// `(N, k)` coefficients.
    pub u: Array2<f64>,
    /// `(k, C)` basis with unit-norm rows.
    pub w: Array2<f64>,
    /// `‖A − UW‖_F` before the first update and after every iteration.
    pub history: Vec<f64>,
    pub iterations: usize,
    /// Final `‖A − UW‖_F / ‖A‖_F`.
    pub relative_error: f64,
}

const DENOM_EPS: f64 = 1e-12;

pub fn frobenius_error(a: &Array2<f64>, u: &Array2<f64>, w: &Array2<f64>) -> f64 {
    let recon = u.dot(w);
    Zip::from(a)
        .and(&recon)
        .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
        .sqrt()
}

pub fn nmf(a: &Array2<f64>, cfg: &NmfConfig) -> Result<NmfResult> {
    let (n, c) = a.dim();
    let k = cfg.rank;
    if k == 0 || k > n.min(c) {
        return Err(Error::Config(format!(
            "NMF rank {k} must be between 1 and min({n}, {c})"
        )));
    }
    if let Some(v) = a.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::Input(format!("NMF input has invalid entry {v}")));
    }
    let norm_a = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_a == 0.0 {
        return Err(Error::Degenerate("NMF input is all zeros".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mean = a.mean().expect("non-empty");
    let scale = 2.0 * (mean / k as f64).sqrt();
    let mut u = Array2::from_shape_fn((n, k), |_| scale * rng.gen_range(0.01..1.0));
    let mut w = Array2::from_shape_fn((k, c), |_| scale * rng.gen_range(0.01..1.0));

    let mut history = vec![frobenius_error(a, &u, &w)];
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let num_u = a.dot(&w.t());
        let den_u = u.dot(&w.dot(&w.t()));
        Zip::from(&mut u)
            .and(&num_u)
            .and(&den_u)
            .for_each(|x, &p, &q| *x *= p / (q + DENOM_EPS));
        let num_w = u.t().dot(a);
        let den_w = u.t().dot(&u).dot(&w);
        Zip::from(&mut w)
            .and(&num_w)
            .and(&den_w)
            .for_each(|x, &p, &q| *x *= p / (q + DENOM_EPS));
        iterations += 1;
        let err = frobenius_error(a, &u, &w);
        let prev = *history.last().expect("non-empty");
        history.push(err);
        if err == 0.0 || (prev - err) / norm_a < cfg.tol {
            break;
        }
    }

    for j in 0..k {
        let norm = w.row(j).dot(&w.row(j)).sqrt();
        if norm > 0.0 {
            w.row_mut(j).mapv_inplace(|v| v / norm);
            u.column_mut(j).mapv_inplace(|v| v * norm);
        }
    }
    let relative_error = frobenius_error(a, &u, &w) / norm_a;
    Ok(NmfResult {
        u,
        w,
        history,
        iterations,
        relative_error,
    })
}
