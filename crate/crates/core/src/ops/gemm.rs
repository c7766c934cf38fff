//! Strided single-precision GEMM.
//!
//! Thin safe wrapper over `matrixmultiply::sgemm`, which accumulates in
//! registers with a fixed blocking order and is deterministic for a given
//! input.

/// A strided read-only matrix view into a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `c = alpha·a·b + beta·c` with `c` row-major `a.rows × b.cols` at the given row stride.
pub(crate) fn gemm(alpha: f32, a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: &mut [f32], c_row_stride: usize) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimensions");
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * c_row_stride + n <= c.len(), "gemm output slice too short");
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_offset() < a.data.len(), "gemm lhs slice too short");
    assert!(b.max_offset() < b.data.len(), "gemm rhs slice too short");
    // SAFETY: every index touched by sgemm lies within the bounds asserted
    // above, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

/// `a·b` accumulated in double precision and rounded once, for small
/// products whose results feed an exponential.
pub(crate) fn gemm_wide(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f32], c_row_stride: usize) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimensions");
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * c_row_stride + n <= c.len(), "gemm output slice too short");
    let widen = |v: MatRef<'_>| -> Vec<f64> {
        let mut out = Vec::with_capacity(v.rows * v.cols);
        for r in 0..v.rows {
            for col in 0..v.cols {
                out.push(v.data[r * v.row_stride + col * v.col_stride] as f64);
            }
        }
        out
    };
    let (wa, wb) = (widen(a), widen(b));
    let mut wc = vec![0f64; m * n];
    if k > 0 {
        // SAFETY: all three buffers are dense row-major with the stated dimensions.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                wa.as_ptr(),
                k as isize,
                1,
                wb.as_ptr(),
                n as isize,
                1,
                0.0,
                wc.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    for r in 0..m {
        for col in 0..n {
            c[r * c_row_stride + col] = wc[r * n + col] as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_views() {
        // a = [[1,2],[3,4]], computes aᵀ·a = [[10,14],[14,20]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let m = MatRef::row_major(&a, 2, 2);
        let mut c = [0.0; 4];
        gemm(1.0, m.t(), m, 0.0, &mut c, 2);
        assert_eq!(c, [10.0, 14.0, 14.0, 20.0]);
        let mut w = [0.0; 4];
        gemm_wide(m.t(), m, &mut w, 2);
        assert_eq!(w, c);
    }

    #[test]
    fn wide_rounds_once() {
        // 1 + 1e-8 − 1 is lost in single precision but kept in double.
        let a = [1.0f32, 1e-8, -1.0];
        let b = [1.0f32, 1.0, 1.0];
        let mut c = [0.0; 1];
        gemm_wide(MatRef::row_major(&a, 1, 3), MatRef::row_major(&b, 3, 1), &mut c, 1);
        assert_eq!(c[0], 1e-8);
    }
}
