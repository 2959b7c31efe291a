//! Small dense linear algebra helpers used by the solvers and variance
//! estimators. All systems in this crate are tiny (a handful of coefficients),
//! so a partial-pivot LU with a reciprocal-condition estimate is sufficient.

use ndarray::{Array1, Array2};

/// LU factorization with partial pivoting of a square matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Array2<f64>,
    perm: Vec<usize>,
    /// Sign-free product of pivot magnitudes, used for singularity checks.
    min_pivot: f64,
    max_pivot: f64,
}

impl Lu {
    pub fn factor(a: &Array2<f64>) -> Option<Lu> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "LU requires a square matrix");
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut min_pivot = f64::INFINITY;
        let mut max_pivot = 0.0f64;
        for col in 0..n {
            // pivot search
            let mut p = col;
            let mut best = lu[(col, col)].abs();
            for r in col + 1..n {
                let v = lu[(r, col)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return None;
            }
            if p != col {
                perm.swap(p, col);
                for c in 0..n {
                    let tmp = lu[(col, c)];
                    lu[(col, c)] = lu[(p, c)];
                    lu[(p, c)] = tmp;
                }
            }
            let pivot = lu[(col, col)];
            min_pivot = min_pivot.min(pivot.abs());
            max_pivot = max_pivot.max(pivot.abs());
            for r in col + 1..n {
                let m = lu[(r, col)] / pivot;
                lu[(r, col)] = m;
                for c in col + 1..n {
                    lu[(r, c)] -= m * lu[(col, c)];
                }
            }
        }
        Some(Lu { lu, perm, min_pivot, max_pivot })
    }

    /// Crude condition estimate: ratio of the largest to smallest pivot.
    /// Overestimates conditioning quality only rarely and is cheap, which is
    /// all the singularity guards here need.
    pub fn condition_estimate(&self) -> f64 {
        if self.min_pivot == 0.0 {
            f64::INFINITY
        } else {
            self.max_pivot / self.min_pivot
        }
    }

    pub fn solve(&self, b: &Array1<f64>) -> Array1<f64> {
        let n = self.lu.nrows();
        let mut x = Array1::zeros(n);
        for i in 0..n {
            x[i] = b[self.perm[i]];
        }
        // forward substitution (unit lower triangle)
        for i in 1..n {
            for j in 0..i {
                let adj = self.lu[(i, j)] * x[j];
                x[i] -= adj;
            }
        }
        // back substitution
        for i in (0..n).rev() {
            for j in i + 1..n {
                let adj = self.lu[(i, j)] * x[j];
                x[i] -= adj;
            }
            x[i] /= self.lu[(i, i)];
        }
        x
    }

    pub fn inverse(&self) -> Array2<f64> {
        let n = self.lu.nrows();
        let mut inv = Array2::zeros((n, n));
        for col in 0..n {
            let mut e = Array1::zeros(n);
            e[col] = 1.0;
            let x = self.solve(&e);
            for row in 0..n {
                inv[(row, col)] = x[row];
            }
        }
        inv
    }
}

/// Solves `a x = b`, returning `None` when the pivot-based condition estimate
/// exceeds `cond_limit`.
pub fn solve_checked(a: &Array2<f64>, b: &Array1<f64>, cond_limit: f64) -> Option<Array1<f64>> {
    let lu = Lu::factor(a)?;
    if lu.condition_estimate() > cond_limit {
        return None;
    }
    Some(lu.solve(b))
}

/// Inverse with the same conditioning guard as [`solve_checked`].
pub fn inverse_checked(a: &Array2<f64>, cond_limit: f64) -> Option<Array2<f64>> {
    let lu = Lu::factor(a)?;
    if lu.condition_estimate() > cond_limit {
        return None;
    }
    Some(lu.inverse())
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l: Array2<f64> = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Symmetric eigenvalues by the cyclic Jacobi method. Used only for the
/// positive-semidefiniteness assertions on variance matrices.
pub fn symmetric_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[(i, i)]).collect()
}
