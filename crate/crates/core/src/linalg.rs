//! Small dense linear-algebra helpers: Householder QR least squares and a
//! Cholesky positive-definiteness probe.
//!
//! The fitting paths in this crate deal with at most a few hundred rows and a
//! few dozen columns, so a compact textbook implementation beats pulling in a
//! full linear-algebra stack — and it keeps the core crate `no_std`-clean.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Columns whose R-diagonal collapsed during factorization, i.e. directions
/// the data does not determine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct RankDeficiency {
    pub columns: Vec<usize>,
}

/// Solves `min ‖X·β − y‖₂` by Householder QR without pivoting.
///
/// `x` is row-major with `cols` entries per row and `rows >= cols` is
/// required. A column whose R-diagonal magnitude falls at or below `rcond`
/// times the largest diagonal is reported as deficient instead of silently
/// amplifying noise into the solution.
pub(crate) fn least_squares(
    x: &[f64],
    rows: usize,
    cols: usize,
    y: &[f64],
    rcond: f64,
) -> Result<Vec<f64>, RankDeficiency> {
    assert_eq!(x.len(), rows * cols, "design matrix shape mismatch");
    assert_eq!(y.len(), rows, "target length mismatch");
    assert!(rows >= cols, "least_squares needs at least as many rows as columns");

    // Column-major working copy; reflections update it in place.
    let mut a = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            a[c * rows + r] = x[r * cols + c];
        }
    }
    let mut b = y.to_vec();
    let mut diag = vec![0.0; cols];
    let mut v = vec![0.0; rows];

    for k in 0..cols {
        let mut norm = 0.0;
        for i in k..rows {
            let t = a[k * rows + i];
            norm += t * t;
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            diag[k] = 0.0;
            continue; // flagged as deficient below
        }
        let head = a[k * rows + k];
        let alpha = if head >= 0.0 { -norm } else { norm };
        let m = rows - k;
        v[0] = head - alpha;
        for i in 1..m {
            v[i] = a[k * rows + k + i];
        }
        let vnorm2: f64 = v[..m].iter().map(|t| t * t).sum();
        diag[k] = alpha;
        a[k * rows + k] = alpha;
        for i in 1..m {
            a[k * rows + k + i] = 0.0;
        }
        if vnorm2 == 0.0 {
            continue;
        }
        for c in (k + 1)..cols {
            let col = &mut a[c * rows..(c + 1) * rows];
            let mut dot = 0.0;
            for i in 0..m {
                dot += v[i] * col[k + i];
            }
            let scale = 2.0 * dot / vnorm2;
            for i in 0..m {
                col[k + i] -= scale * v[i];
            }
        }
        let mut dot = 0.0;
        for i in 0..m {
            dot += v[i] * b[k + i];
        }
        let scale = 2.0 * dot / vnorm2;
        for i in 0..m {
            b[k + i] -= scale * v[i];
        }
    }

    let dmax = diag.iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
    let deficient: Vec<usize> = (0..cols)
        .filter(|&k| dmax == 0.0 || diag[k].abs() <= rcond * dmax)
        .collect();
    if !deficient.is_empty() {
        return Err(RankDeficiency { columns: deficient });
    }

    let mut beta = vec![0.0; cols];
    for k in (0..cols).rev() {
        let mut s = b[k];
        for c in (k + 1)..cols {
            s -= a[c * rows + k] * beta[c];
        }
        beta[k] = s / diag[k];
    }
    Ok(beta)
}

/// Returns true when the symmetric matrix `m` (row-major, `n × n`) is
/// positive definite, by attempting a Cholesky factorization.
pub(crate) fn is_positive_definite(m: &[f64], n: usize) -> bool {
    assert_eq!(m.len(), n * n, "matrix shape mismatch");
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return false;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    true
}
