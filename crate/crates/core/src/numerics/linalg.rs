//! Matrix products and the affine (linear) layer.

use super::tensor::Tensor;
use crate::error::{PdsError, Result};

/// Strided view of a row-major matrix slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Contiguous `rows x cols` matrix.
    pub fn dense(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transpose of a contiguous matrix whose stored row length is `cols`.
    pub fn dense_t(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: 1,
            col_stride: cols,
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    pub fn t(self) -> Self {
        Self {
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, with `c` written through its own strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |mr: &MatRef<'_>, rows: usize, cols: usize| {
        mr.offset
            + (rows.saturating_sub(1)) * mr.row_stride
            + (cols.saturating_sub(1)) * mr.col_stride
    };
    if k > 0 {
        assert!(last(&a, m, k) < a.data.len(), "gemm: a out of bounds");
        assert!(last(&b, k, n) < b.data.len(), "gemm: b out of bounds");
    }
    assert!(
        c_offset + (m - 1) * c_row_stride + n - 1 < c.len(),
        "gemm: c out of bounds"
    );
    // SAFETY: all index extents were bounds-checked above and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_row_stride as isize,
            1,
        );
    }
}

/// Rows processed per block by [`feed_forward_forward`].
const FFN_BLOCK_ROWS: usize = 256;

/// `act(x W1 + b1) W2 + b2` computed in row blocks so the hidden activations
/// never exist for the whole input at once.
pub fn feed_forward_forward(
    x: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    act: super::activation::Activation,
    w2: &Tensor,
    b2: &Tensor,
) -> Result<Tensor> {
    let (rows, d_in, hidden) = linear_dims(x, w1, Some(b1))?;
    let &[h2, d_out] = w2.shape() else {
        return Err(PdsError::config("linear weight must be (in, out)"));
    };
    if h2 != hidden || b2.shape() != [d_out] {
        return Err(PdsError::config(format!(
            "feed-forward widths disagree: hidden {hidden}, second layer {:?}",
            w2.shape()
        )));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    let mut out = vec![0.0; rows * d_out];
    for row in out.chunks_exact_mut(d_out) {
        row.copy_from_slice(b2.data());
    }
    let mut h = vec![0.0; FFN_BLOCK_ROWS.min(rows) * hidden];
    let mut start = 0;
    while start < rows {
        let n = FFN_BLOCK_ROWS.min(rows - start);
        let hb = &mut h[..n * hidden];
        for row in hb.chunks_exact_mut(hidden) {
            row.copy_from_slice(b1.data());
        }
        gemm(
            n,
            d_in,
            hidden,
            1.0,
            MatRef::dense(x.data(), d_in).at(start * d_in),
            MatRef::dense(w1.data(), hidden),
            1.0,
            hb,
            0,
            hidden,
        );
        act.apply_in_place(hb);
        gemm(
            n,
            hidden,
            d_out,
            1.0,
            MatRef::dense(hb, hidden),
            MatRef::dense(w2.data(), d_out),
            1.0,
            &mut out,
            start * d_out,
            d_out,
        );
        start += n;
    }
    Tensor::new(shape, out)
}

/// Plain matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(PdsError::config("matmul expects rank-2 operands"));
    };
    if k != k2 {
        return Err(PdsError::config(format!(
            "matmul inner extents {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        MatRef::dense(a.data(), k),
        MatRef::dense(b.data(), n),
        0.0,
        &mut out,
        0,
        n,
    );
    Tensor::new(vec![m, n], out)
}

fn linear_dims(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    let &[d_in, d_out] = w.shape() else {
        return Err(PdsError::config("linear weight must be (in, out)"));
    };
    if x.last_dim() != d_in || x.rank() == 0 {
        return Err(PdsError::config(format!(
            "linear expects last extent {d_in}, got shape {:?}",
            x.shape()
        )));
    }
    if let Some(b) = b {
        if b.shape() != [d_out] {
            return Err(PdsError::config(format!(
                "linear bias must have shape [{d_out}]"
            )));
        }
    }
    Ok((x.len() / d_in, d_in, d_out))
}

/// `y = x W + b` over the last axis.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (rows, d_in, d_out) = linear_dims(x, w, b)?;
    let mut out = vec![0.0; rows * d_out];
    if let Some(b) = b {
        for row in out.chunks_exact_mut(d_out) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { 1.0 } else { 0.0 };
    gemm(
        rows,
        d_in,
        d_out,
        1.0,
        MatRef::dense(x.data(), d_in),
        MatRef::dense(w.data(), d_out),
        beta,
        &mut out,
        0,
        d_out,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(shape, out)
}

/// Gradients of [`linear_forward`] with respect to `(x, w, b)`.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let d_in = w.dim(0);
    let d_out = w.dim(1);
    let rows = x.len() / d_in;
    let mut dx = vec![0.0; rows * d_in];
    gemm(
        rows,
        d_out,
        d_in,
        1.0,
        MatRef::dense(grad_out.data(), d_out),
        MatRef::dense_t(w.data(), d_out),
        0.0,
        &mut dx,
        0,
        d_in,
    );
    let mut dw = vec![0.0; d_in * d_out];
    gemm(
        d_in,
        rows,
        d_out,
        1.0,
        MatRef::dense_t(x.data(), d_in),
        MatRef::dense(grad_out.data(), d_out),
        0.0,
        &mut dw,
        0,
        d_out,
    );
    let db = has_bias.then(|| {
        let mut db = vec![0.0; d_out];
        for row in grad_out.data().chunks_exact(d_out) {
            for (acc, g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }
        Tensor::new(vec![d_out], db).unwrap()
    });
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![d_in, d_out], dw).unwrap(),
        db,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn linear_applies_bias_per_row() {
        let x = Tensor::new(vec![1, 2, 2], vec![1., 0., 0., 1.]).unwrap();
        let w = Tensor::new(vec![2, 1], vec![2., 3.]).unwrap();
        let b = Tensor::new(vec![1], vec![0.5]).unwrap();
        let y = linear_forward(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1]);
        assert_eq!(y.data(), &[2.5, 3.5]);
    }

    #[test]
    fn linear_rejects_mismatch() {
        let x = Tensor::zeros(vec![2, 3]);
        let w = Tensor::zeros(vec![4, 2]);
        assert!(linear_forward(&x, &w, None).is_err());
    }
}
