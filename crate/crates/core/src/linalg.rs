//! Small dense helpers on flat row-major buffers.
//!
//! The flow integrator walks many tiny systems (state dimension ≤ ~6) per
//! Monte Carlo sample; these routines keep that loop free of allocations.
//! Matrices are `n×m` slices in row-major order: entry `(i, j)` at `i*m + j`.

/// y = A x for a flat row-major `n×m` matrix.
#[inline]
pub fn matvec(a: &[f64], x: &[f64], y: &mut [f64], n: usize, m: usize) {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(x.len(), m);
    debug_assert_eq!(y.len(), n);
    for i in 0..n {
        let row = &a[i * m..(i + 1) * m];
        let mut acc = 0.0;
        for j in 0..m {
            acc += row[j] * x[j];
        }
        y[i] = acc;
    }
}

/// C = A B with A `n×k`, B `k×m`, C `n×m`, all flat row-major.
#[inline]
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        crow.fill(0.0);
        for (l, &ail) in arow.iter().enumerate() {
            if ail == 0.0 {
                continue;
            }
            let brow = &b[l * m..(l + 1) * m];
            for j in 0..m {
                crow[j] += ail * brow[j];
            }
        }
    }
}

/// Invert an `n×n` matrix in place of `out` by Gauss–Jordan elimination with
/// partial pivoting. Returns `false` when a pivot falls below `tol`.
///
/// `scratch` must hold `n * 2n` elements.
pub fn invert(a: &[f64], out: &mut [f64], scratch: &mut [f64], n: usize, tol: f64) -> bool {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(out.len(), n * n);
    debug_assert!(scratch.len() >= n * 2 * n);
    let w = 2 * n;
    // augmented [A | I]
    for i in 0..n {
        for j in 0..n {
            scratch[i * w + j] = a[i * n + j];
            scratch[i * w + n + j] = if i == j { 1.0 } else { 0.0 };
        }
    }
    for col in 0..n {
        // pivot
        let mut p = col;
        let mut best = scratch[col * w + col].abs();
        for r in col + 1..n {
            let v = scratch[r * w + col].abs();
            if v > best {
                best = v;
                p = r;
            }
        }
        if best <= tol {
            return false;
        }
        if p != col {
            for j in 0..w {
                scratch.swap(col * w + j, p * w + j);
            }
        }
        let piv = scratch[col * w + col];
        if piv != 1.0 {
            let inv = 1.0 / piv;
            for j in 0..w {
                scratch[col * w + j] *= inv;
            }
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = scratch[r * w + col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..w {
                scratch[r * w + j] -= factor * scratch[col * w + j];
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = scratch[i * w + n + j];
        }
    }
    true
}

/// Euclidean norm.
#[inline]
pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Run `f` with a zeroed thread-local buffer of length `len`.
///
/// Coefficient closures sit inside the per-substep integration loop; this
/// pool keeps them allocation-free. Nested use is fine (the pool is a stack).
pub(crate) fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    use std::cell::RefCell;
    thread_local! {
        static POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
    }
    let mut buf = POOL.with(|p| p.borrow_mut().pop()).unwrap_or_default();
    buf.clear();
    buf.resize(len, 0.0);
    let out = f(&mut buf);
    POOL.with(|p| p.borrow_mut().push(buf));
    out
}

/// Frobenius norm of a flat matrix.
#[inline]
pub fn frobenius(a: &[f64]) -> f64 {
    norm(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invert_identity_is_exact() {
        let n = 4;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        let mut out = vec![0.0; n * n];
        let mut scratch = vec![0.0; n * 2 * n];
        assert!(invert(&a, &mut out, &mut scratch, n, 1e-14));
        assert_eq!(a, out);
    }

    #[test]
    fn invert_roundtrip() {
        let n = 3;
        let a = vec![2.0, 1.0, 0.5, -1.0, 3.0, 0.0, 0.25, -0.5, 1.5];
        let mut inv = vec![0.0; n * n];
        let mut scratch = vec![0.0; n * 2 * n];
        assert!(invert(&a, &mut inv, &mut scratch, n, 1e-14));
        let mut prod = vec![0.0; n * n];
        matmul(&a, &inv, &mut prod, n, n, n);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_detected() {
        let n = 2;
        let a = vec![1.0, 2.0, 2.0, 4.0];
        let mut inv = vec![0.0; n * n];
        let mut scratch = vec![0.0; n * 2 * n];
        assert!(!invert(&a, &mut inv, &mut scratch, n, 1e-12));
    }
}
