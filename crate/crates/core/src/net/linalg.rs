//! Row-major dense helpers over `matrixmultiply`.

/// Strided view description for one gemm operand.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Plain row-major `rows x cols` at `offset`.
    pub fn rm(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: cols,
            cs: 1,
        }
    }

    /// Transpose of a row-major matrix whose rows have `cols` entries.
    pub fn t(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: 1,
            cs: cols,
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c(m x n)` over strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(av.last(m, k) < a.len().max(1) || k == 0, "gemm: a out of bounds");
    assert!(bv.last(k, n) < b.len().max(1) || k == 0, "gemm: b out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm: c out of bounds");
    // SAFETY: every index touched lies within the slices, checked above; `c`
    // is uniquely borrowed and cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// `out(m x n) = x(m x k) * w(k x n)`
pub(crate) fn matmul(x: &[f64], w: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, x, View::rm(0, k), w, View::rm(0, n), 0.0, &mut out, View::rm(0, n));
    out
}

/// `dw(k x n) += x(m x k)^T * dy(m x n)`
pub(crate) fn acc_xt_dy(dw: &mut [f64], x: &[f64], dy: &[f64], m: usize, k: usize, n: usize) {
    gemm(k, m, n, 1.0, x, View::t(0, k), dy, View::rm(0, n), 1.0, dw, View::rm(0, n));
}

/// `dx(m x k) (+)= dy(m x n) * w(k x n)^T`
pub(crate) fn dy_wt(dx: &mut [f64], dy: &[f64], w: &[f64], m: usize, k: usize, n: usize, acc: bool) {
    let beta = if acc { 1.0 } else { 0.0 };
    gemm(m, n, k, 1.0, dy, View::rm(0, n), w, View::t(0, n), beta, dx, View::rm(0, k));
}

pub(crate) fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn acc_colsum(db: &mut [f64], dy: &[f64]) {
    for row in dy.chunks_exact(db.len()) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
}

/// Dense row-major matrix of logits or activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows `range` as a new matrix.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Matrix {
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    /// `max |a - b| / max |b|`, with `b` the reference.
    pub fn max_rel_diff(&self, reference: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (reference.rows, reference.cols));
        let scale = reference.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        diff / scale
    }
}
