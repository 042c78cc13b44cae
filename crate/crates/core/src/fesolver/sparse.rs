//! Compressed sparse row matrices and Jacobi-preconditioned conjugate
//! gradients, sized for the tangent systems this solver produces.

/// Square CSR matrix with a fixed sparsity pattern and mutable values.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds the pattern from per-row column lists. Rows are deduplicated
    /// and sorted; values start at zero.
    pub fn from_pattern(rows: Vec<Vec<usize>>) -> CsrMatrix {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut cols in rows {
            cols.sort_unstable();
            cols.dedup();
            debug_assert!(cols.iter().all(|&c| c < n));
            col_idx.extend_from_slice(&cols);
            row_ptr.push(col_idx.len());
        }
        let values = vec![0.0; col_idx.len()];
        CsrMatrix { n, row_ptr, col_idx, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn reset_values(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adds `v` at `(r, c)`; the entry must exist in the pattern.
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        match self.col_idx[lo..hi].binary_search(&c) {
            Ok(k) => self.values[lo + k] += v,
            Err(_) => panic!("entry ({r},{c}) outside the assembled pattern"),
        }
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(out.len(), self.n);
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            out[r] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.col_idx[k] == r {
                    d[r] = self.values[k];
                }
            }
        }
        d
    }
}

pub struct PcgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when a non-positive curvature direction stopped the iteration
    /// early; `x` is still a usable descent update for a Newton step.
    pub truncated: bool,
}

/// Jacobi-preconditioned conjugate gradients from a zero initial guess,
/// stopping at `||r|| <= rel_tol * ||b||`.
pub fn solve_pcg(a: &CsrMatrix, b: &[f64], rel_tol: f64, max_iterations: usize) -> PcgOutcome {
    let n = a.n();
    debug_assert_eq!(b.len(), n);
    let norm_b = dot(b, b).sqrt();
    if norm_b == 0.0 {
        return PcgOutcome { x: vec![0.0; n], iterations: 0, converged: true, truncated: false };
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .into_iter()
        .map(|d| if d.abs() > f64::MIN_POSITIVE { 1.0 / d } else { 1.0 })
        .collect();

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rho = dot(&r, &z);
    let mut q = vec![0.0; n];
    let threshold = rel_tol * norm_b;

    for it in 0..max_iterations {
        a.matvec(&p, &mut q);
        let curvature = dot(&p, &q);
        if curvature <= 0.0 {
            if it == 0 {
                // Fall back to the preconditioned gradient direction.
                x.copy_from_slice(&z);
            }
            return PcgOutcome { x, iterations: it, converged: false, truncated: true };
        }
        let alpha = rho / curvature;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        if dot(&r, &r).sqrt() <= threshold {
            return PcgOutcome { x, iterations: it + 1, converged: true, truncated: false };
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rho_next = dot(&r, &z);
        let beta = rho_next / rho;
        rho = rho_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    PcgOutcome { x, iterations: max_iterations, converged: false, truncated: false }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 1-D Laplacian chain: tridiagonal (-1, 2, -1), SPD.
    fn laplacian(n: usize) -> CsrMatrix {
        let rows: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut cols = vec![i];
                if i > 0 {
                    cols.push(i - 1);
                }
                if i + 1 < n {
                    cols.push(i + 1);
                }
                cols
            })
            .collect();
        let mut a = CsrMatrix::from_pattern(rows);
        for i in 0..n {
            a.add(i, i, 2.0);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                a.add(i, i + 1, -1.0);
            }
        }
        a
    }

    #[test]
    fn pcg_solves_spd_system_to_relative_tolerance() {
        let n = 50;
        let a = laplacian(n);
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut b = vec![0.0; n];
        a.matvec(&x_true, &mut b);
        let out = solve_pcg(&a, &b, 1e-10, 10 * n);
        assert!(out.converged, "pcg failed after {} iterations", out.iterations);
        let mut r = vec![0.0; n];
        a.matvec(&out.x, &mut r);
        let res: f64 = r.iter().zip(&b).map(|(ri, bi)| (ri - bi) * (ri - bi)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(res <= 1e-9 * nb, "residual {res:.3e} vs {nb:.3e}");
    }

    #[test]
    fn pcg_zero_rhs_returns_zero_immediately() {
        let a = laplacian(10);
        let out = solve_pcg(&a, &vec![0.0; 10], 1e-10, 100);
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
        assert!(out.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pcg_flags_nonpositive_curvature() {
        // Negative definite matrix.
        let mut a = CsrMatrix::from_pattern(vec![vec![0], vec![1]]);
        a.add(0, 0, -1.0);
        a.add(1, 1, -2.0);
        let out = solve_pcg(&a, &[1.0, 1.0], 1e-10, 100);
        assert!(out.truncated);
        assert!(!out.converged);
    }

    #[test]
    #[should_panic(expected = "outside the assembled pattern")]
    fn adding_outside_pattern_panics() {
        let mut a = CsrMatrix::from_pattern(vec![vec![0], vec![1]]);
        a.add(0, 1, 1.0);
    }
}
