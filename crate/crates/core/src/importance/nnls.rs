//! Non-negative coefficient recovery against a fixed concept basis.
//!
//! Solves `min_u ‖a − Wᵀu‖²` subject to `u ≥ 0` with the Lawson–Hanson active
//! set method applied to the normal equations, so the `k × k` Gram matrix is
//! factored once per basis and reused for every query vector.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

#[derive(Debug, Clone)]
pub struct NnlsSolver {
    basis: Array2<f64>,
    gram: Array2<f64>,
}

impl NnlsSolver {
    /// `basis` is `(k, C)`: one row per concept.
    pub fn new(basis: ArrayView2<'_, f64>) -> Self {
        let basis = basis.to_owned();
        let gram = basis.dot(&basis.t());
        NnlsSolver { basis, gram }
    }

    pub fn rank(&self) -> usize {
        self.basis.nrows()
    }

    pub fn solve(&self, a: ArrayView1<'_, f64>) -> Array1<f64> {
        let b = self.basis.dot(&a);
        solve_normal_equations(&self.gram, &b)
    }
}

/// Minimises `½ xᵀGx − bᵀx` over `x ≥ 0` for symmetric positive semidefinite `G`.
pub fn solve_normal_equations(gram: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let k = b.len();
    let mut x = Array1::<f64>::zeros(k);
    let mut passive = vec![false; k];
    let scale = 1.0 + b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale * (1.0 + gram.diag().iter().fold(0.0f64, |m, v| m.max(*v)));
    for _ in 0..(3 * k + 3) {
        let grad = b - &gram.dot(&x);
        let entering = (0..k)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| grad[i].total_cmp(&grad[j]).then(j.cmp(&i)));
        match entering {
            Some(j) if grad[j] > tol => passive[j] = true,
            _ => break,
        }
        loop {
            let z = solve_passive(gram, b, &passive);
            if (0..k).filter(|&j| passive[j]).all(|j| z[j] > 0.0) {
                x = z;
                break;
            }
            // Step towards z until the first passive coordinate hits zero.
            let mut alpha = f64::INFINITY;
            let mut blocking = usize::MAX;
            for j in (0..k).filter(|&j| passive[j] && z[j] <= 0.0) {
                let denom = x[j] - z[j];
                let a = if denom > 0.0 { x[j] / denom } else { 0.0 };
                if a < alpha {
                    alpha = a;
                    blocking = j;
                }
            }
            x = &x + &((&z - &x) * alpha);
            x[blocking] = 0.0;
            passive[blocking] = false;
            for j in 0..k {
                if passive[j] && x[j] <= 1e-14 * scale {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
            if !passive.iter().any(|p| *p) {
                break;
            }
        }
    }
    x.mapv_inplace(|v| v.max(0.0));
    x
}

/// Unconstrained solution on the passive set, zero elsewhere.
fn solve_passive(gram: &Array2<f64>, b: &Array1<f64>, passive: &[bool]) -> Array1<f64> {
    let idx: Vec<usize> = (0..b.len()).filter(|&j| passive[j]).collect();
    let n = idx.len();
    let sub = Array2::from_shape_fn((n, n), |(r, c)| gram[[idx[r], idx[c]]]);
    let rhs = Array1::from_iter(idx.iter().map(|&j| b[j]));
    let sol = cholesky_solve(&sub, &rhs);
    let mut out = Array1::zeros(b.len());
    for (r, &j) in idx.iter().enumerate() {
        out[j] = sol[r];
    }
    out
}

/// Cholesky solve with a growing diagonal jitter for (near-)singular systems.
pub fn cholesky_solve(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = b.len();
    let trace = a.diag().sum().max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    loop {
        if let Some(l) = cholesky(a, jitter) {
            let mut y = Array1::<f64>::zeros(n);
            for i in 0..n {
                let s: f64 = (0..i).map(|j| l[[i, j]] * y[j]).sum();
                y[i] = (b[i] - s) / l[[i, i]];
            }
            let mut x = Array1::<f64>::zeros(n);
            for i in (0..n).rev() {
                let s: f64 = (i + 1..n).map(|j| l[[j, i]] * x[j]).sum();
                x[i] = (y[i] - s) / l[[i, i]];
            }
            return x;
        }
        jitter = if jitter == 0.0 { 1e-14 * trace } else { jitter * 100.0 };
    }
}

fn cholesky(a: &Array2<f64>, jitter: f64) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|p| l[[i, p]] * l[[j, p]]).sum();
            if i == j {
                let d = a[[i, i]] + jitter - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[[i, i]] = d.sqrt();
            } else {
                l[[i, j]] = (a[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    Some(l)
}
