//! Thin safe wrapper over `matrixmultiply::sgemm` with explicit strides.

/// Row and column strides of a matrix view, in elements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    /// Row-major matrix with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self { row: 1, col: cols }
    }
}

fn extent(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * s.row + (cols - 1) * s.col + 1
    }
}

/// `c = alpha * a·b + beta * c` where `a` is m×k, `b` is k×n and `c` is m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    sa: Strides,
    b: &[f32],
    sb: Strides,
    beta: f32,
    c: &mut [f32],
    sc: Strides,
) {
    assert!(a.len() >= extent(m, k, sa), "gemm: lhs view out of bounds");
    assert!(b.len() >= extent(k, n, sb), "gemm: rhs view out of bounds");
    assert!(c.len() >= extent(m, n, sc), "gemm: output view out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the borrowed slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            sc.row as isize,
            sc.col as isize,
        );
    }
}
