//! Thin singular value decomposition via one-sided Jacobi rotations.
//!
//! Internals run in f64 and the factors are emitted as f32; for the matrix
//! sizes this crate works with (a few dozen rows), Jacobi converges in a
//! handful of sweeps and is accurate to storage precision.

use crate::error::{Error, Result};
use crate::numkernel::DenseMatrix;

/// Thin SVD: `a ~= u * diag(s) * vt` with `k = min(rows, cols)` columns.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Left singular vectors, `rows x k`, orthonormal columns.
    pub u: DenseMatrix,
    /// Singular values in descending order, length `k`, non-negative.
    pub s: Vec<f32>,
    /// Right singular vectors transposed, `k x cols`, orthonormal rows.
    pub vt: DenseMatrix,
}

const MAX_SWEEPS: usize = 64;

/// Computes the thin SVD of `a`.
///
/// Fails on empty or non-finite input. The returned singular values are
/// sorted descending and the factorization reconstructs `a` to roughly f32
/// storage precision.
pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    if a.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite entry in svd input".into()));
    }
    let m = a.rows();
    let n = a.cols();
    let k = m.min(n);

    // Column-major f64 working copy of A; V accumulates the right rotations.
    let mut b: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| f64::from(a.get(i, j))).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = 1e-14;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut app, mut aqq, mut apq) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..m {
                    app += b[p][i] * b[p][i];
                    aqq += b[q][i] * b[q][i];
                    apq += b[p][i] * b[q][i];
                }
                if apq.abs() <= tol * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let bp = b[p][i];
                    let bq = b[q][i];
                    b[p][i] = c * bp - s * bq;
                    b[q][i] = s * bp + c * bq;
                }
                for i in 0..n {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Column norms are the singular values; sort descending.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> =
        b.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut s_vals: Vec<f64> = Vec::with_capacity(k);
    let mut vt_rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    let max_norm = norms.iter().cloned().fold(0.0f64, f64::max);
    for &j in order.iter().take(k) {
        s_vals.push(norms[j]);
        if norms[j] > max_norm * 1e-300 && norms[j] > 0.0 {
            u_cols.push(b[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(vec![0.0; m]); // placeholder, completed below
        }
        vt_rows.push(v[j].clone());
    }

    complete_orthonormal(&mut u_cols, &s_vals, max_norm);

    let u = DenseMatrix::from_fn(m, k, |r, c| u_cols[c][r] as f32);
    let vt = DenseMatrix::from_fn(k, n, |r, c| vt_rows[r][c] as f32);
    let s = s_vals.iter().map(|x| *x as f32).collect();
    Ok(SvdResult { u, s, vt })
}

/// Replaces placeholder columns (zero singular value) with vectors orthonormal
/// to the already-filled columns, so `u` always has orthonormal columns.
fn complete_orthonormal(u_cols: &mut [Vec<f64>], s_vals: &[f64], max_norm: f64) {
    let m = u_cols.first().map_or(0, Vec::len);
    let threshold = max_norm * 1e-300;
    for j in 0..u_cols.len() {
        if s_vals[j] > threshold && s_vals[j] > 0.0 {
            continue;
        }
        // Try canonical basis vectors, Gram-Schmidt against filled columns.
        'basis: for e in 0..m {
            let mut cand = vec![0.0f64; m];
            cand[e] = 1.0;
            for (jj, col) in u_cols.iter().enumerate() {
                if jj == j || (s_vals[jj] <= threshold && jj > j) {
                    continue;
                }
                let dot: f64 = cand.iter().zip(col).map(|(a, b)| a * b).sum();
                for (c, u) in cand.iter_mut().zip(col) {
                    *c -= dot * u;
                }
            }
            let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for c in cand.iter_mut() {
                    *c /= norm;
                }
                u_cols[j] = cand;
                break 'basis;
            }
        }
    }
}

/// Splits a rank-truncated SVD into low-rank factors.
///
/// `down` is `rank x cols` (rows of `vt` scaled by `sqrt(s)`), `up` is
/// `rows x rank` (columns of `u` scaled by `sqrt(s)`), so `up * down`
/// reconstructs the best rank-`rank` approximation.
pub fn truncate(svd: &SvdResult, rank: usize) -> Result<(DenseMatrix, DenseMatrix)> {
    if rank == 0 {
        return Err(Error::InvalidInput("rank must be at least 1".into()));
    }
    if rank > svd.s.len() {
        return Err(Error::RankTooLarge { rank, max: svd.s.len() });
    }
    let cols = svd.vt.cols();
    let rows = svd.u.rows();
    let down = DenseMatrix::from_fn(rank, cols, |r, c| {
        (f64::from(svd.s[r]).sqrt() * f64::from(svd.vt.get(r, c))) as f32
    });
    let up = DenseMatrix::from_fn(rows, rank, |r, c| {
        (f64::from(svd.u.get(r, c)) * f64::from(svd.s[c]).sqrt()) as f32
    });
    Ok((down, up))
}

/// Reconstructs `u[.., ..rank] * diag(s[..rank]) * vt[..rank, ..]` in f64.
pub fn reconstruct(svd: &SvdResult, rank: usize) -> DenseMatrix {
    let rows = svd.u.rows();
    let cols = svd.vt.cols();
    DenseMatrix::from_fn(rows, cols, |i, j| {
        let mut acc = 0.0f64;
        for r in 0..rank.min(svd.s.len()) {
            acc += f64::from(svd.u.get(i, r))
                * f64::from(svd.s[r])
                * f64::from(svd.vt.get(r, j));
        }
        acc as f32
    })
}
