//! Strided single-precision GEMM used by the tape's matrix products.

/// A read-only strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn dense(data: &'a [f32], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        let r = (self.rows - 1) as isize * self.row_stride;
        let c = (self.cols - 1) as isize * self.col_stride;
        (self.offset as isize + r.max(0) + c.max(0)) as usize
    }
}

/// Mutable strided destination for a GEMM.
pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f32],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
}

impl<'a> MatMut<'a> {
    pub fn dense(data: &'a mut [f32], rows: usize, cols: usize) -> Self {
        MatMut {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols as isize,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm(alpha: f32, a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    assert!(a.last_index() < a.data.len());
    assert!(b.last_index() < b.data.len());
    assert!(
        c.offset + (c.rows - 1) * c.row_stride as usize + c.cols - 1 < c.data.len(),
        "gemm output out of bounds"
    );
    // SAFETY: every index touched by the kernel lies inside the slices, checked above;
    // `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr().add(b.offset),
            b.row_stride,
            b.col_stride,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride,
            1,
        );
    }
}
