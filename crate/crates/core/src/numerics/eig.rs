//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-6;
/// Eigenvalues below this fraction of the largest are clamped.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Dense symmetric matrix held in `f64` for the rotation sweeps.
#[derive(Debug, Clone)]
pub(crate) struct SymMat {
    pub n: usize,
    pub a: Vec<f64>,
}

impl SymMat {
    pub fn from_tensor(m: &Tensor) -> Result<Self> {
        let (r, c) = m.dims2()?;
        ensure!(r == c, Dimension, "expected a square matrix, got {r}x{c}");
        let a: Vec<f64> = m.data().iter().map(|&v| f64::from(v)).collect();
        let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
        for i in 0..r {
            for j in i + 1..r {
                let d = (a[i * r + j] - a[j * r + i]).abs();
                ensure!(
                    d <= SYMMETRY_TOL * scale,
                    Validation,
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    a[i * r + j],
                    a[j * r + i]
                );
            }
        }
        // Symmetrize exactly so the rotations see a symmetric input.
        let mut s = SymMat { n: r, a };
        for i in 0..r {
            for j in i + 1..r {
                let v = 0.5 * (s.a[i * r + j] + s.a[j * r + i]);
                s.a[i * r + j] = v;
                s.a[j * r + i] = v;
            }
        }
        Ok(s)
    }
}

/// Eigenpairs in `f64`: ascending values and column eigenvectors (row-major).
#[derive(Debug, Clone)]
pub(crate) struct Eigen64 {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
}

pub(crate) fn jacobi(mut m: SymMat) -> Result<Eigen64> {
    let n = m.n;
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm = m.a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let a = &mut m.a;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= OFF_DIAGONAL_TOL * norm {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0f64; n * n];
    for (newc, &oldc) in order.iter().enumerate() {
        // Deterministic sign: largest-magnitude component positive.
        let mut best = 0;
        for k in 0..n {
            if v[k * n + oldc].abs() > v[best * n + oldc].abs() {
                best = k;
            }
        }
        let sgn = if v[best * n + oldc] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[k * n + newc] = sgn * v[k * n + oldc];
        }
    }
    Ok(Eigen64 { values, vectors })
}

/// Eigenvalues (ascending) and orthonormal eigenvectors (columns) of a
/// symmetric matrix.
pub fn sym_eig(m: &Tensor) -> Result<(Tensor, Tensor)> {
    let e = jacobi(SymMat::from_tensor(m)?)?;
    let n = e.values.len();
    let vals = Tensor::from_parts(vec![n], e.values.iter().map(|&v| v as f32).collect())?;
    let vecs = Tensor::from_parts(vec![n, n], e.vectors.iter().map(|&v| v as f32).collect())?;
    Ok((vals, vecs))
}

/// Inverse square root of a PSD matrix plus the number of clamped eigenvalues.
#[derive(Debug, Clone)]
pub struct InvSqrt {
    pub matrix: Tensor,
    pub clamped: usize,
}

pub fn inv_sqrt_psd_report(m: &Tensor) -> Result<InvSqrt> {
    let e = jacobi(SymMat::from_tensor(m)?)?;
    let n = e.values.len();
    let max = e.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ensure!(
        max > 0.0 && max.is_finite(),
        Numeric,
        "matrix has no positive eigenvalue (max {max})"
    );
    let floor = EIGEN_FLOOR * max;
    let mut clamped = 0;
    let scales: Vec<f64> = e
        .values
        .iter()
        .map(|&l| {
            let l = if l < floor {
                clamped += 1;
                floor
            } else {
                l
            };
            1.0 / l.sqrt()
        })
        .collect();
    if clamped > 0 {
        log::warn!("inv_sqrt_psd: clamped {clamped} of {n} eigenvalues to {floor:e}");
    }
    let mut w = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let s: f64 = (0..n)
                .map(|k| e.vectors[i * n + k] * scales[k] * e.vectors[j * n + k])
                .sum();
            w[i * n + j] = s as f32;
        }
    }
    Ok(InvSqrt {
        matrix: Tensor::from_parts(vec![n, n], w)?,
        clamped,
    })
}

/// `m^{-1/2}` for a symmetric positive semi-definite matrix.
pub fn inv_sqrt_psd(m: &Tensor) -> Result<Tensor> {
    inv_sqrt_psd_report(m).map(|r| r.matrix)
}
