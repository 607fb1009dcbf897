//! Strided matrix views and a bounds-checked product on top of
//! [`Scalar::gemm`].

use crate::scalar::Scalar;

#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    /// Row-major `rows x cols` view over the leading part of `data`.
    pub(crate) fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub(crate) fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `out = a * b` (or `out += a * b` when `accumulate`), with `out` row-major.
pub(crate) fn matmul<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n, "output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data,
        a.rs as isize,
        a.cs as isize,
        b.data,
        b.rs as isize,
        b.cs as isize,
        beta,
        out,
        n as isize,
        1,
    );
}
