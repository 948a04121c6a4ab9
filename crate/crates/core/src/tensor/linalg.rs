use crate::error::{expect_dim, Result};

use super::Tensor;

/// Borrowed strided matrix view for GEMM calls.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a·b + beta * c` with `c` dense row-major `a.rows × b.cols`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views were bounds-checked at construction and `c` holds m×n
    // elements; strides describe row-major or transposed row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.rc()?;
    let (k2, n) = b.rc()?;
    expect_dim("inner", k, k2)?;
    let mut out = vec![0.0; m * n];
    gemm(
        1.0,
        MatRef::new(a.data(), m, k),
        MatRef::new(b.data(), k2, n),
        0.0,
        &mut out,
    );
    Ok(Tensor::from_parts(&[m, n], out))
}

/// `x·W + b` for `x: n×in`, `W: in×out`, `b: out`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, din) = x.rc()?;
    let (win, dout) = w.rc()?;
    expect_dim("linear input features", win, din)?;
    let mut out = vec![0.0; n * dout];
    if let Some(b) = b {
        expect_dim("linear bias", dout, b.len())?;
        for row in out.chunks_exact_mut(dout) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(
        1.0,
        MatRef::new(x.data(), n, din),
        MatRef::new(w.data(), din, dout),
        1.0,
        &mut out,
    );
    Ok(Tensor::from_parts(&[n, dout], out))
}

pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Backward of [`linear`]. Weight and bias gradients are only formed when
/// `param_grads` is set, which lets frozen layers skip that work.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    param_grads: bool,
) -> Result<LinearGrads> {
    let (n, din) = x.rc()?;
    let (_, dout) = w.rc()?;
    let (gn, gd) = grad_out.rc()?;
    expect_dim("linear grad rows", n, gn)?;
    expect_dim("linear grad cols", dout, gd)?;
    let mut gx = vec![0.0; n * din];
    gemm(
        1.0,
        MatRef::new(grad_out.data(), n, dout),
        MatRef::new(w.data(), din, dout).t(),
        0.0,
        &mut gx,
    );
    let (weight, bias) = if param_grads {
        let mut gw = vec![0.0; din * dout];
        gemm(
            1.0,
            MatRef::new(x.data(), n, din).t(),
            MatRef::new(grad_out.data(), n, dout),
            0.0,
            &mut gw,
        );
        let mut gb = vec![0.0; dout];
        for row in grad_out.data().chunks_exact(dout) {
            for (g, r) in gb.iter_mut().zip(row) {
                *g += r;
            }
        }
        (
            Some(Tensor::from_parts(&[din, dout], gw)),
            Some(Tensor::from_parts(&[dout], gb)),
        )
    } else {
        (None, None)
    };
    Ok(LinearGrads {
        input: Tensor::from_parts(&[n, din], gx),
        weight,
        bias,
    })
}
