//! Total Sobol indices with the Jansen estimator on a scrambled Sobol design.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of factors: the design uses `2k` Sobol dimensions.
pub const MAX_FACTORS: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolEstimate {
    pub totals: Vec<f64>,
    pub variance: f64,
    /// Set when the output variance vanished and every total was defined as 0.
    pub degenerate: bool,
}

/// Two independent `(N, k)` designs `A` and `B` in `[0,1)^k`.
pub fn design(n: usize, k: usize, seed: u32) -> Result<(Array2<f64>, Array2<f64>)> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Config(format!("design size {n} must be a power of two")));
    }
    if k == 0 || k > MAX_FACTORS {
        return Err(Error::Config(format!("factor count {k} must be in 1..={MAX_FACTORS}")));
    }
    let point = |i: usize, d: usize| f64::from(sobol_burley::sample(i as u32, d as u32, seed));
    let a = Array2::from_shape_fn((n, k), |(i, j)| point(i, j));
    let b = Array2::from_shape_fn((n, k), |(i, j)| point(i, k + j));
    Ok((a, b))
}

/// `S_T(j) = E[(f(A) − f(A_B^j))²] / (2 Var f)` where `A_B^j` is `A` with
/// column `j` taken from `B`; the variance is estimated over `f(A) ∪ f(B)`.
pub fn sobol_total_indices<F>(value_fn: F, n: usize, k: usize, seed: u32) -> Result<SobolEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let (a, b) = design(n, k, seed)?;
    let eval = |m: &Array2<f64>| -> Vec<f64> {
        (0..n)
            .into_par_iter()
            .map(|i| value_fn(m.row(i).as_slice().expect("standard layout")))
            .collect()
    };
    let fa = eval(&a);
    let fb = eval(&b);
    let all = fa.iter().chain(&fb);
    let mean = all.clone().sum::<f64>() / (2 * n) as f64;
    let variance = all.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (2 * n) as f64;
    if !variance.is_finite() {
        return Err(Error::Degenerate("value function produced non-finite outputs".into()));
    }
    if variance <= 1e-20 * mean * mean || variance == 0.0 {
        return Ok(SobolEstimate {
            totals: vec![0.0; k],
            variance,
            degenerate: true,
        });
    }
    let totals = (0..k)
        .map(|j| {
            let mut ab = a.clone();
            ab.column_mut(j).assign(&b.column(j));
            let fab = eval(&ab);
            let sq: f64 = fa.iter().zip(&fab).map(|(x, y)| (x - y) * (x - y)).sum();
            sq / n as f64 / (2.0 * variance)
        })
        .collect();
    Ok(SobolEstimate {
        totals,
        variance,
        degenerate: false,
    })
}
