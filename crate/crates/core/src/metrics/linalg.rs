//! Small dense symmetric linear algebra in `f64`.
//!
//! Metric statistics are computed in `f64` regardless of the model's
//! element type; the dimensions involved (at most a few hundred) make a
//! simple cyclic Jacobi eigensolver both adequate and dependency-free.

use crate::error::{Error, Result};

/// Maximum absolute asymmetry tolerated before a matrix is rejected as
/// non-symmetric (it is symmetrized internally below this bound).
const SYMMETRY_TOL: f64 = 1e-8;

/// Eigenvalues this far below zero are treated as rounding noise and
/// clamped; anything lower is a hard error.
const PSD_EIG_TOL: f64 = -1e-8;

/// Row-major `d x d` matrix product.
pub(crate) fn mat_mul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * d..(k + 1) * d];
            let orow = &mut out[i * d..(i + 1) * d];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    out
}

pub(crate) fn trace(a: &[f64], d: usize) -> f64 {
    (0..d).map(|i| a[i * d + i]).sum()
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Validate near-symmetry and return the exactly symmetric average
/// `(A + A^T) / 2`.
fn symmetrize(op: &'static str, a: &[f64], d: usize) -> Result<Vec<f64>> {
    if a.len() != d * d {
        return Err(Error::shape(op, format!("expected {0}x{0} matrix", d)));
    }
    let mut out = a.to_vec();
    for i in 0..d {
        for j in (i + 1)..d {
            let diff = (a[i * d + j] - a[j * d + i]).abs();
            if diff > SYMMETRY_TOL {
                return Err(Error::Numerical(format!(
                    "{}: matrix asymmetry {:.3e} exceeds tolerance {:.0e}",
                    op, diff, SYMMETRY_TOL
                )));
            }
            let avg = 0.5 * (a[i * d + j] + a[j * d + i]);
            out[i * d + j] = avg;
            out[j * d + i] = avg;
        }
    }
    Ok(out)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, V)` with `V` row-major and its columns the
/// eigenvectors, so `A = V diag(eigenvalues) V^T`. Robust and simple for
/// the dimensions used here (d up to a few hundred).
pub fn jacobi_eigen(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut m = symmetrize("jacobi_eigen", a, d)?;
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    if d <= 1 {
        return Ok(((0..d).map(|i| m[i * d + i]).collect(), v));
    }
    let norm = frobenius(&m);
    if norm == 0.0 {
        return Ok((vec![0.0; d], v));
    }
    let tol = norm * f64::EPSILON * d as f64;

    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += 2.0 * m[p * d + q] * m[p * d + q];
            }
        }
        if off.sqrt() <= tol {
            return Ok(((0..d).map(|i| m[i * d + i]).collect(), v));
        }
        for p in 0..(d - 1) {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() <= tol / (d * d) as f64 {
                    continue;
                }
                let tau = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // M <- J^T M J with the rotation in the (p, q) plane.
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Numerical(
        "jacobi_eigen: did not converge within 100 sweeps".into(),
    ))
}

/// Eigenvalues of a symmetric PSD matrix, clamped at zero. Returns the
/// clamp count alongside; an eigenvalue below the PSD tolerance is an
/// error rather than a clamp.
fn psd_eigenvalues(op: &'static str, a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let (mut vals, vecs) = jacobi_eigen(a, d)?;
    // Rank floor: eigenvalues of a rank-deficient PSD matrix come back as
    // rounding noise around zero, and the square root amplifies a +O(eps)
    // perturbation to O(sqrt(eps)). Treating everything below the floor as
    // an exact zero keeps traces of square roots accurate.
    let lmax = vals.iter().cloned().fold(0.0, f64::max);
    let floor = lmax * d as f64 * f64::EPSILON;
    let mut clamped = 0;
    for v in &mut vals {
        if *v < PSD_EIG_TOL {
            return Err(Error::Numerical(format!(
                "{}: eigenvalue {:.3e} below PSD tolerance {:.0e}",
                op, *v, PSD_EIG_TOL
            )));
        }
        if *v < 0.0 {
            clamped += 1;
        }
        if *v < floor {
            *v = 0.0;
        }
    }
    Ok((vals, vecs, clamped))
}

/// Principal square root of a symmetric positive-semidefinite matrix,
/// with slightly negative eigenvalues clamped to zero. Returns the matrix
/// and the number of clamped eigenvalues.
pub fn matrix_sqrt_psd(a: &[f64], d: usize) -> Result<(Vec<f64>, usize)> {
    let (vals, vecs, clamped) = psd_eigenvalues("matrix_sqrt_psd", a, d)?;
    // S = V diag(sqrt(vals)) V^T
    let mut scaled = vec![0.0; d * d]; // V * diag(sqrt)
    for i in 0..d {
        for j in 0..d {
            scaled[i * d + j] = vecs[i * d + j] * vals[j].sqrt();
        }
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += scaled[i * d + k] * vecs[j * d + k];
            }
            out[i * d + j] = acc;
        }
    }
    Ok((out, clamped))
}

/// Trace of the principal square root of a symmetric PSD matrix: the sum
/// of the square roots of its (clamped) eigenvalues.
pub(crate) fn trace_sqrt_psd(op: &'static str, a: &[f64], d: usize) -> Result<(f64, usize)> {
    let (vals, _, clamped) = psd_eigenvalues(op, a, d)?;
    Ok((vals.iter().map(|v| v.sqrt()).sum(), clamped))
}
