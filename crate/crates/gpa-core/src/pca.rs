//! Principal-component projection with a self-contained symmetric
//! eigensolver (cyclic Jacobi), enough for the small covariance matrices
//! this crate produces.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Axis};

/// Eigendecomposition of a symmetric matrix. Returns `(values, vectors)`
/// sorted by descending eigenvalue; column `k` of `vectors` pairs with
/// `values[k]`.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-9 * (1.0 + a[[i, j]].abs()) {
                return Err(Error::InvalidInput(format!(
                    "matrix not symmetric at ({i},{j})"
                )));
            }
        }
    }

    let mut m = a.clone();
    let mut v: Array2<f64> = Array2::eye(n);
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);

    for _sweep in 0..100 {
        let off: f64 = {
            let mut s = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    s += m[[i, j]] * m[[i, j]];
                }
            }
            s.sqrt()
        };
        if off < 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[[k, p]], m[[k, q]]);
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[[p, k]], m[[q, k]]);
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).expect("finite eigenvalues"));
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    Ok((values, vectors))
}

/// Fitted principal components.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// `d x k`, one component per column, sign-fixed so each component's
    /// largest-magnitude loading is positive.
    pub components: Array2<f64>,
    /// All `d` eigenvalues of the covariance, descending.
    pub eigenvalues: Array1<f64>,
}

impl Pca {
    pub fn transform(&self, data: &Array2<f64>) -> Array2<f64> {
        let centered = data - &self.mean;
        centered.dot(&self.components)
    }
}

/// Fit the top-`k` principal components of row-major data.
pub fn fit_pca(data: &Array2<f64>, k: usize) -> Result<Pca> {
    let (n, d) = (data.nrows(), data.ncols());
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 rows to fit a projection, got {n}"
        )));
    }
    if k > d {
        return Err(Error::InvalidInput(format!(
            "cannot extract {k} components from {d}-dimensional data"
        )));
    }
    let mean = data.mean_axis(Axis(0)).expect("n >= 2");
    let centered = data - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let (eigenvalues, vectors) = symmetric_eigen(&cov)?;

    let mut components = Array2::zeros((d, k));
    for c in 0..k {
        let col = vectors.column(c);
        // deterministic sign: largest-magnitude loading positive, first
        // index wins ties
        let mut pivot = 0;
        for i in 1..d {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[[i, c]] = sign * col[i];
        }
    }
    Ok(Pca {
        mean,
        components,
        eigenvalues,
    })
}

/// Project rows onto the top two principal components.
pub fn pca_project(data: &Array2<f64>) -> Result<Array2<f64>> {
    if data.ncols() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 feature dimensions, got {}",
            data.ncols()
        )));
    }
    let pca = fit_pca(data, 2)?;
    Ok(pca.transform(data))
}
