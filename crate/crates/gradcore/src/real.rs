use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Dot products longer than this are accumulated in `f64` chunks.
pub const WIDE_ACCUMULATION_THRESHOLD: usize = 4096;

/// Element type of the engine. Training runs in `f32`; gradient checks run in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `true` when long reductions should be split and summed in `f64`.
    const NARROW: bool;

    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`: every strided index reached
    /// through `m`, `k`, `n` and the strides must be in bounds of its buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite float converts to f64")
    }
}

impl Real for f32 {
    const NARROW: bool = true;

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const NARROW: bool = false;

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Storage order of a gemm operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    /// Operand stored row-major with its logical shape.
    No,
    /// Operand stored row-major as its transpose.
    Yes,
}

fn strides(t: Trans, rows: usize, cols: usize) -> (isize, isize) {
    match t {
        Trans::No => (cols as isize, 1),
        Trans::Yes => (1, rows as isize),
    }
}

/// `c[m,n] = op(a)[m,k] · op(b)[k,n] + (accumulate ? c : 0)`, all row-major.
///
/// For `f32`, inner dimensions above [`WIDE_ACCUMULATION_THRESHOLD`] are split
/// into chunks whose partial products are summed in `f64`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Trans,
    b: &[T],
    tb: Trans,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs buffer too small");
    assert!(b.len() >= k * n, "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = strides(ta, m, k);
    let (rsb, csb) = strides(tb, k, n);
    if !T::NARROW || k <= WIDE_ACCUMULATION_THRESHOLD {
        let beta = if accumulate { T::one() } else { T::zero() };
        // SAFETY: buffer sizes asserted above; strides describe dense row-major storage.
        unsafe {
            T::raw_gemm(
                m,
                k,
                n,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }

    let mut wide: Vec<f64> = if accumulate {
        c[..m * n].iter().map(|v| v.f64()).collect()
    } else {
        vec![0.0; m * n]
    };
    let mut part = vec![T::zero(); m * n];
    let mut start = 0;
    while start < k {
        let len = WIDE_ACCUMULATION_THRESHOLD.min(k - start);
        // SAFETY: the chunk [start, start+len) of the inner dimension is in bounds
        // for both operands; offsets follow the same strides as above.
        unsafe {
            T::raw_gemm(
                m,
                len,
                n,
                a.as_ptr().offset(start as isize * csa),
                rsa,
                csa,
                b.as_ptr().offset(start as isize * rsb),
                rsb,
                csb,
                T::zero(),
                part.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        for (w, p) in wide.iter_mut().zip(&part) {
            *w += p.f64();
        }
        start += len;
    }
    for (dst, w) in c[..m * n].iter_mut().zip(wide) {
        *dst = T::of(w);
    }
}

/// Sum of a slice accumulated in `f64`.
pub fn wide_sum<T: Real>(xs: &[T]) -> f64 {
    xs.iter().map(|v| v.f64()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn transposed_operands_match_naive_product() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let want = naive(m, k, n, &a, &b);

        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, Trans::No), (&at, Trans::Yes)] {
            for (bb, tb) in [(&b, Trans::No), (&bt, Trans::Yes)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn long_f32_reductions_use_wide_chunks() {
        let k = 3 * WIDE_ACCUMULATION_THRESHOLD + 17;
        let a = vec![0.1f32; k];
        let b = vec![1.0f32; k];
        let mut c = vec![5.0f32; 1];
        gemm(1, k, 1, &a, Trans::No, &b, Trans::No, &mut c, true);
        let want = 5.0 + 0.1f32 as f64 * k as f64;
        assert!((c[0] as f64 - want).abs() < 1e-2, "{} vs {}", c[0], want);
    }
}
