//! Strided matrix views over `matrixmultiply::dgemm`.

#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> View<'a> {
    pub(crate) fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self::strided(data, rows, cols, cols, 1)
    }

    /// The transpose of a row-major `rows×cols` buffer, without copying.
    pub(crate) fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self::strided(data, cols, rows, 1, cols)
    }

    /// Columns `start..start + width` of a row-major matrix with `stride`
    /// columns.
    pub(crate) fn columns(data: &'a [f64], stride: usize, start: usize, width: usize) -> Self {
        let rows = data.len() / stride;
        Self::strided(&data[start..], rows, width, stride, 1)
    }

    pub(crate) fn t(self) -> Self {
        Self::strided(
            self.data,
            self.cols,
            self.rows,
            self.col_stride,
            self.row_stride,
        )
    }

    fn strided(
        data: &'a [f64],
        rows: usize,
        cols: usize,
        row_stride: usize,
        col_stride: usize,
    ) -> Self {
        assert!(
            rows == 0
                || cols == 0
                || (rows - 1) * row_stride + (cols - 1) * col_stride < data.len(),
            "view exceeds its buffer"
        );
        Self {
            data,
            rows,
            cols,
            row_stride,
            col_stride,
        }
    }
}

/// `out (+)= a · b`, with `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: View<'_>, b: View<'_>, out: &mut [f64], accumulate: bool) {
    assert_eq!(out.len(), a.rows * b.cols, "gemm output size");
    gemm_strided(a, b, out, b.cols, accumulate);
}

/// Like [`gemm`], but rows of `out` are `out_stride` elements apart, so the
/// product can land in a column block of a wider matrix.
pub(crate) fn gemm_strided(
    a: View<'_>,
    b: View<'_>,
    out: &mut [f64],
    out_stride: usize,
    accumulate: bool,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(out_stride >= b.cols, "gemm output stride");
    assert!(
        a.rows == 0 || b.cols == 0 || (a.rows - 1) * out_stride + b.cols <= out.len(),
        "gemm output exceeds its buffer"
    );
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every view was checked on construction to address only
    // elements inside its slice, and the assertions above bound the largest
    // output offset, (a.rows-1)*out_stride + b.cols-1, by `out.len()`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            out_stride as isize,
            1,
        );
    }
}
