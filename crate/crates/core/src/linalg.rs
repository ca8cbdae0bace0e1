//! Small dense linear algebra: partially pivoted LU with a Hager/Higham
//! 1-norm condition estimate, and the closed-form symmetric 2x2 eigensystem.

use crate::error::{Error, Result};

/// Row-major square matrix factored as `P A = L U`.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    norm1: f64,
}

impl Lu {
    /// Factors `a` (row-major, `n x n`). Fails only on an exactly zero pivot;
    /// near-singularity is reported by [`Lu::rcond`].
    pub fn factor(n: usize, a: &[f64]) -> Result<Self> {
        assert_eq!(a.len(), n * n);
        let norm1 = (0..n)
            .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (piv, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax == 0.0 {
                return Err(Error::Numeric(format!("zero pivot in column {k}")));
            }
            if piv != k {
                for j in 0..n {
                    lu.swap(k * n + j, piv * n + j);
                }
                perm.swap(k, piv);
            }
            let d = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / d;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm, norm1 })
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        x
    }

    /// Solves `A^T x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        // U^T z = b
        let mut z = b.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for j in 0..i {
                s -= self.lu[j * n + i] * z[j];
            }
            z[i] = s / self.lu[i * n + i];
        }
        // L^T w = z
        for i in (0..n).rev() {
            let mut s = z[i];
            for j in i + 1..n {
                s -= self.lu[j * n + i] * z[j];
            }
            z[i] = s;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = z[i];
        }
        x
    }

    /// Reciprocal 1-norm condition number, with `||A^-1||_1` estimated by
    /// Hager's method.
    pub fn rcond(&self) -> f64 {
        let n = self.n;
        if n == 0 || self.norm1 == 0.0 {
            return 0.0;
        }
        let mut x = vec![1.0 / n as f64; n];
        let mut estimate = 0.0;
        for _ in 0..5 {
            let y = self.solve(&x);
            estimate = y.iter().map(|v| v.abs()).sum::<f64>();
            let sign: Vec<f64> = y
                .iter()
                .map(|&v| if v >= 0.0 { 1.0 } else { -1.0 })
                .collect();
            let z = self.solve_transpose(&sign);
            let (jmax, zmax) = z
                .iter()
                .enumerate()
                .map(|(i, v)| (i, v.abs()))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
            if zmax <= ztx {
                break;
            }
            x = vec![0.0; n];
            x[jmax] = 1.0;
        }
        if !estimate.is_finite() || estimate == 0.0 {
            return 0.0;
        }
        1.0 / (self.norm1 * estimate)
    }
}

/// Eigen-decomposition of the symmetric matrix `[[a, b], [b, d]]`.
///
/// Returns eigenvalues in descending order and the matching unit eigenvectors
/// as the columns of `vecs` (`vecs[row][col]`). Each column is flipped so its
/// largest-magnitude entry is positive. When the matrix is isotropic to within
/// rounding the basis is the identity.
pub fn sym2_eigen(a: f64, b: f64, d: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let trace = a + d;
    let half_gap = 0.5 * (a - d);
    let radius = half_gap.hypot(b);
    let l1 = 0.5 * trace + radius;
    let l2 = 0.5 * trace - radius;
    let tol = 1e-12 * (a.abs() + d.abs() + b.abs()).max(f64::MIN_POSITIVE);
    let (c, s) = if radius <= tol {
        (1.0, 0.0)
    } else {
        let theta = 0.5 * (2.0 * b).atan2(a - d);
        (theta.cos(), theta.sin())
    };
    // Columns: e1 = (c, s) for l1, e2 = (-s, c) for l2.
    let mut e1 = [c, s];
    let mut e2 = [-s, c];
    canonical_sign(&mut e1);
    canonical_sign(&mut e2);
    ([l1, l2], [[e1[0], e2[0]], [e1[1], e2[1]]])
}

fn canonical_sign(v: &mut [f64; 2]) {
    let lead = if v[0].abs() >= v[1].abs() { v[0] } else { v[1] };
    if lead < 0.0 {
        v[0] = -v[0];
        v[1] = -v[1];
    }
}

pub fn inv2(m: [[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ])
}

pub fn mul2(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

pub fn apply2(m: [[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lu_solves_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..12 {
            let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum())
                .collect();
            let bt: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| a[j * n + i] * x[j]).sum())
                .collect();
            let lu = Lu::factor(n, &a).unwrap();
            for (u, v) in lu.solve(&b).iter().zip(&x) {
                assert!((u - v).abs() < 1e-9);
            }
            for (u, v) in lu.solve_transpose(&bt).iter().zip(&x) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rcond_flags_near_singular() {
        let lu = Lu::factor(2, &[1.0, 1.0, 1.0, 1.0 + 1e-15]).unwrap();
        assert!(lu.rcond() < 1e-12);
        let lu = Lu::factor(2, &[2.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((lu.rcond() - 0.5).abs() < 1e-12);
        assert!(Lu::factor(2, &[0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn eigen_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let (a, b, d) = (rng.gen_range(0.0..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(0.0..1.0));
            let (l, v) = sym2_eigen(a, b, d);
            assert!(l[0] >= l[1]);
            let rec = |r: usize, c: usize| l[0] * v[r][0] * v[c][0] + l[1] * v[r][1] * v[c][1];
            assert!((rec(0, 0) - a).abs() < 1e-14);
            assert!((rec(0, 1) - b).abs() < 1e-14);
            assert!((rec(1, 1) - d).abs() < 1e-14);
        }
    }

    #[test]
    fn isotropic_basis_is_identity() {
        let (l, v) = sym2_eigen(0.04, 1e-20, 0.04 + 1e-18);
        assert_eq!(v, [[1.0, 0.0], [0.0, 1.0]]);
        assert!((l[0] - 0.04).abs() < 1e-15);
    }
}
