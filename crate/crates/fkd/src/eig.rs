//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Deterministic by construction: fixed (p, q) sweep order, eigenvalues
//! sorted ascending with index-stable ties, and each eigenvector's sign fixed
//! so its largest-magnitude entry is positive.

use crate::error::{FkdError, Result};
use crate::mat::Mat;

/// Off-diagonal Frobenius norm threshold for convergence.
const OFF_DIAG_TOL: f64 = 1e-12;
/// Sweep cap before reporting non-convergence.
const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix. Eigenvectors are the *rows* of `u`, so
/// `u^T * diag(lambda) * u` reconstructs the input and `u * h` is the
/// spectral transform of a signal `h`.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub u: Mat,
    pub lambda: Vec<f64>,
}

impl SpectralDecomposition {
    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    /// `u^T * diag(lambda) * u`.
    pub fn reconstruct(&self) -> Mat {
        let scaled = self.u.scale_rows(&self.lambda);
        self.u.t_matmul(&scaled)
    }

    /// `u^T * diag(f(lambda)) * u` — a spectral function of the input.
    pub fn spectral_matrix(&self, multipliers: &[f64]) -> Mat {
        assert_eq!(multipliers.len(), self.lambda.len());
        let scaled = self.u.scale_rows(multipliers);
        self.u.t_matmul(&scaled)
    }
}

fn off_diag_norm(a: &Mat) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for p in 0..n {
        for q in 0..n {
            if p != q {
                let v = a.get(p, q);
                s += v * v;
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// The input must be symmetric to 1e-10 entrywise; asymmetry beyond that is a
/// caller bug and panics in debug builds.
pub fn symmetric_eig(m: &Mat) -> Result<SpectralDecomposition> {
    let n = m.rows();
    assert_eq!(n, m.cols(), "symmetric_eig needs a square matrix");
    debug_assert!(
        m.max_abs_diff(&m.transpose()) <= 1e-10,
        "input not symmetric"
    );

    let mut a = m.clone();
    a.symmetrize();
    // v accumulates rotations column-wise: columns of v are eigenvectors.
    let mut v = Mat::identity(n);

    let mut sweeps = 0;
    while off_diag_norm(&a) > OFF_DIAG_TOL {
        if sweeps >= MAX_SWEEPS {
            return Err(FkdError::EigNoConvergence {
                sweeps,
                off: off_diag_norm(&a),
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // A <- J^T A J with J the (p,q) rotation.
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    // Sort ascending; stable in the original column index on ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(i, i)
            .partial_cmp(&a.get(j, j))
            .unwrap()
            .then(i.cmp(&j))
    });

    let lambda: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut u = Mat::zeros(n, n);
    for (row, &col) in order.iter().enumerate() {
        // Sign: largest-magnitude entry positive; first index wins ties.
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for k in 0..n {
            let av = v.get(k, col).abs();
            if av > best_abs {
                best_abs = av;
                best = k;
            }
        }
        let flip = if v.get(best, col) < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            u.set(row, k, flip * v.get(k, col));
        }
    }

    Ok(SpectralDecomposition { u, lambda })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_node_laplacian_spectrum() {
        // Normalized Laplacian of a single edge on two nodes.
        let l = Mat::from_vec(2, 2, vec![0.5, -0.5, -0.5, 0.5]);
        let d = symmetric_eig(&l).unwrap();
        assert!((d.lambda[0] - 0.0).abs() < 1e-12);
        assert!((d.lambda[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_input() {
        let d = symmetric_eig(&Mat::identity(5)).unwrap();
        for l in &d.lambda {
            assert!((l - 1.0).abs() < 1e-14);
        }
        // U is a signed permutation of I; with the sign rule it is exactly I
        // up to row order, and reconstruction is exact.
        assert!(d.reconstruct().max_abs_diff(&Mat::identity(5)) < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let d = symmetric_eig(&Mat::zeros(4, 4)).unwrap();
        for l in &d.lambda {
            assert_eq!(*l, 0.0);
        }
    }

    #[test]
    fn reconstruction_and_orthogonality() {
        let mut m = Mat::from_fn(12, 12, |i, j| ((i * 5 + j * 3) as f64).sin());
        m.symmetrize();
        let d = symmetric_eig(&m).unwrap();
        assert!(d.reconstruct().max_abs_diff(&m) < 1e-9, "reconstruction");
        let uut = d.u.matmul_t(&d.u);
        assert!(uut.max_abs_diff(&Mat::identity(12)) < 1e-9, "orthogonality");
        for w in d.lambda.windows(2) {
            assert!(w[0] <= w[1], "ascending eigenvalues");
        }
    }

    #[test]
    fn deterministic_across_calls() {
        let mut m = Mat::from_fn(9, 9, |i, j| ((i + 2 * j) as f64).cos());
        m.symmetrize();
        let d1 = symmetric_eig(&m).unwrap();
        let d2 = symmetric_eig(&m).unwrap();
        assert_eq!(d1.u.data(), d2.u.data());
        assert_eq!(d1.lambda, d2.lambda);
    }

    #[test]
    fn sign_convention_largest_entry_positive() {
        let mut m = Mat::from_fn(7, 7, |i, j| ((i * j) as f64 * 0.3).sin());
        m.symmetrize();
        let d = symmetric_eig(&m).unwrap();
        for i in 0..7 {
            let row = d.u.row(i);
            let mut best = 0;
            let mut best_abs = -1.0;
            for (k, v) in row.iter().enumerate() {
                if v.abs() > best_abs {
                    best_abs = v.abs();
                    best = k;
                }
            }
            assert!(row[best] > 0.0);
        }
    }
}
