//! Symmetric eigensolver (cyclic Jacobi rotations).

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

/// The `k` smallest eigenpairs of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// `n×k`, column `c` pairs with `values[c]`.
    pub vectors: Tensor,
}

/// Eigenpairs of the `k` smallest eigenvalues of symmetric `mat`.
///
/// Vectors are orthonormal and sign-canonical: the first component with
/// magnitude above `1e-12` is positive. Fails if `mat` is not symmetric
/// within `1e-10` (scaled by its largest entry) or if the residual
/// `‖mat·v − λv‖` exceeds `1e-8·max(1, ‖mat‖_F)` after the sweep cap.
pub fn sym_eigen(mat: &Tensor, k: usize) -> Result<Eigen> {
    let n = match *mat.shape() {
        [r, c] if r == c => r,
        _ => return Err(Error::Contract(format!("sym_eigen needs a square matrix, got {:?}", mat.shape()))),
    };
    if k == 0 || k > n {
        return Err(Error::Contract(format!("sym_eigen needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let src = mat.data();
    let scale = src.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in i + 1..n {
            if (src[i * n + j] - src[j * n + i]).abs() > 1e-10 * scale {
                return Err(Error::Contract(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    let frob = mat.norm();
    let tol = 1e-8 * frob.max(1.0);

    let mut a = src.to_vec();
    let mut v = Tensor::eye(n).into_data();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if libm::sqrt(off) <= 1e-13 * frob {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut a, &mut v, n, p, q);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[x * n + x].total_cmp(&a[y * n + y]).then(x.cmp(&y)));
    let values: Vec<f64> = order[..k].iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Tensor::zeros(&[n, k]);
    for (c, &col) in order[..k].iter().enumerate() {
        let sign =
            (0..n).map(|r| v[r * n + col]).find(|x| x.abs() > 1e-12).map_or(1.0, |x| if x < 0.0 { -1.0 } else { 1.0 });
        for r in 0..n {
            vectors.set(&[r, c], sign * v[r * n + col]);
        }
    }

    let residual = max_residual(src, n, &values, &vectors);
    if !converged || residual > tol {
        return Err(Error::Numeric {
            detail: format!("Jacobi eigensolve on {n}x{n} did not reach tolerance {tol:e}"),
            residual,
        });
    }
    Ok(Eigen { values, vectors })
}

/// Annihilates `a[p][q]` with a plane rotation and accumulates it into `v`.
fn rotate(a: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize) {
    let apq = a[p * n + q];
    if apq == 0.0 {
        return;
    }
    let app = a[p * n + p];
    let aqq = a[q * n + q];
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
    let c = 1.0 / libm::sqrt(t * t + 1.0);
    let s = t * c;

    for r in 0..n {
        let arp = a[r * n + p];
        let arq = a[r * n + q];
        a[r * n + p] = c * arp - s * arq;
        a[r * n + q] = s * arp + c * arq;
    }
    for r in 0..n {
        let apr = a[p * n + r];
        let aqr = a[q * n + r];
        a[p * n + r] = c * apr - s * aqr;
        a[q * n + r] = s * apr + c * aqr;
    }
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;
    for r in 0..n {
        let vrp = v[r * n + p];
        let vrq = v[r * n + q];
        v[r * n + p] = c * vrp - s * vrq;
        v[r * n + q] = s * vrp + c * vrq;
    }
}

/// Largest `‖mat·v − λv‖₂` over the returned pairs.
pub fn max_residual(mat: &[f64], n: usize, values: &[f64], vectors: &Tensor) -> f64 {
    let mut worst = 0.0f64;
    for (c, &lambda) in values.iter().enumerate() {
        let mut sq = 0.0;
        for r in 0..n {
            let mv: f64 = (0..n).map(|j| mat[r * n + j] * vectors.get(&[j, c])).sum();
            let d = mv - lambda * vectors.get(&[r, c]);
            sq += d * d;
        }
        worst = worst.max(libm::sqrt(sq));
    }
    worst
}
