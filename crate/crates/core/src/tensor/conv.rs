use crate::error::{expect_dim, Error, Result};

use super::linalg::{gemm, MatRef};
use super::Tensor;

fn out_extent(extent: usize, k: usize, stride: usize, padding: usize) -> usize {
    (extent + 2 * padding - k) / stride + 1
}

struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (h, w, cin) = input.hwc()?;
        let [cout, kcin, kh, kw] = kernel.shape()[..] else {
            return Err(Error::InvalidShape(format!(
                "conv kernel must be Cout×Cin×k×k, got {:?}",
                kernel.shape()
            )));
        };
        expect_dim("input channels", kcin, cin)?;
        expect_dim("kernel width", kh, kw)?;
        if stride == 0 {
            return Err(Error::InvalidShape("stride must be at least 1".into()));
        }
        if h + 2 * padding < kh {
            return Err(Error::ShapeMismatch {
                axis: "height",
                expected: kh,
                actual: h + 2 * padding,
            });
        }
        if w + 2 * padding < kh {
            return Err(Error::ShapeMismatch {
                axis: "width",
                expected: kh,
                actual: w + 2 * padding,
            });
        }
        Ok(Self {
            h,
            w,
            cin,
            cout,
            k: kh,
            stride,
            padding,
            ho: out_extent(h, kh, stride, padding),
            wo: out_extent(w, kh, stride, padding),
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Source pixel for output `(oy, ox)` and tap `(ky, kx)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kx).checked_sub(self.padding)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let pl = self.patch_len();
        let mut cols = vec![0.0; self.ho * self.wo * pl];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * pl..][..pl];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                            let src = &input[(iy * self.w + ix) * self.cin..][..self.cin];
                            for (ci, &v) in src.iter().enumerate() {
                                row[(ci * self.k + ky) * self.k + kx] = v;
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let pl = self.patch_len();
        let mut out = vec![0.0; self.h * self.w * self.cin];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * pl..][..pl];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                            let dst = &mut out[(iy * self.w + ix) * self.cin..][..self.cin];
                            for (ci, d) in dst.iter_mut().enumerate() {
                                *d += row[(ci * self.k + ky) * self.k + kx];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// 2-D convolution of an H×W×Cin map with a Cout×Cin×k×k kernel.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, stride, padding)?;
    let cols = g.im2col(input.data());
    let p = g.ho * g.wo;
    let mut out = vec![0.0; p * g.cout];
    if let Some(b) = bias {
        expect_dim("conv bias", g.cout, b.len())?;
        for row in out.chunks_exact_mut(g.cout) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(
        1.0,
        MatRef::new(&cols, p, g.patch_len()),
        MatRef::new(kernel.data(), g.cout, g.patch_len()).t(),
        1.0,
        &mut out,
    );
    Ok(Tensor::from_parts(&[g.ho, g.wo, g.cout], out))
}

pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
    param_grads: bool,
) -> Result<Conv2dGrads> {
    let g = ConvGeometry::new(input, kernel, stride, padding)?;
    let p = g.ho * g.wo;
    let pl = g.patch_len();
    expect_dim("grad elements", p * g.cout, grad_out.len())?;
    let mut dcols = vec![0.0; p * pl];
    gemm(
        1.0,
        MatRef::new(grad_out.data(), p, g.cout),
        MatRef::new(kernel.data(), g.cout, pl),
        0.0,
        &mut dcols,
    );
    let dinput = g.col2im(&dcols);
    let (dk, db) = if param_grads {
        let cols = g.im2col(input.data());
        let mut dk = vec![0.0; g.cout * pl];
        gemm(
            1.0,
            MatRef::new(grad_out.data(), p, g.cout).t(),
            MatRef::new(&cols, p, pl),
            0.0,
            &mut dk,
        );
        let mut db = vec![0.0; g.cout];
        for row in grad_out.data().chunks_exact(g.cout) {
            for (d, r) in db.iter_mut().zip(row) {
                *d += r;
            }
        }
        (
            Some(Tensor::from_parts(kernel.shape(), dk)),
            Some(Tensor::from_parts(&[g.cout], db)),
        )
    } else {
        (None, None)
    };
    Ok(Conv2dGrads {
        input: Tensor::from_parts(input.shape(), dinput),
        kernel: dk,
        bias: db,
    })
}

fn depthwise_geometry(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (h, w, c) = input.hwc()?;
    let [kc, kh, kw] = kernel.shape()[..] else {
        return Err(Error::InvalidShape(format!(
            "depthwise kernel must be C×k×k, got {:?}",
            kernel.shape()
        )));
    };
    expect_dim("channels", c, kc)?;
    expect_dim("kernel width", kh, kw)?;
    if h + 2 * padding < kh || w + 2 * padding < kh {
        return Err(Error::InvalidShape(format!(
            "padded input {}×{} smaller than kernel {kh}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok((h, w, c, kh, h + 2 * padding - kh + 1, w + 2 * padding - kh + 1))
}

/// Per-channel (depthwise) stride-1 convolution with a C×k×k kernel.
pub fn depthwise_conv2d(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<Tensor> {
    let (h, w, c, k, ho, wo) = depthwise_geometry(input, kernel, padding)?;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let dst = &mut out[(oy * wo + ox) * c..][..c];
            for ky in 0..k {
                let Some(iy) = (oy + ky).checked_sub(padding).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (ox + kx).checked_sub(padding).filter(|&v| v < w) else {
                        continue;
                    };
                    let src = &x[(iy * w + ix) * c..][..c];
                    for ch in 0..c {
                        dst[ch] += src[ch] * kd[(ch * k + ky) * k + kx];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[ho, wo, c], out))
}

/// Returns `(grad_input, grad_kernel)`.
pub fn depthwise_conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (h, w, c, k, ho, wo) = depthwise_geometry(input, kernel, padding)?;
    expect_dim("grad elements", ho * wo * c, grad_out.len())?;
    let x = input.data();
    let kd = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; h * w * c];
    let mut gk = vec![0.0; c * k * k];
    for oy in 0..ho {
        for ox in 0..wo {
            let g = &go[(oy * wo + ox) * c..][..c];
            for ky in 0..k {
                let Some(iy) = (oy + ky).checked_sub(padding).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (ox + kx).checked_sub(padding).filter(|&v| v < w) else {
                        continue;
                    };
                    let base = (iy * w + ix) * c;
                    for ch in 0..c {
                        let kidx = (ch * k + ky) * k + kx;
                        gx[base + ch] += g[ch] * kd[kidx];
                        gk[kidx] += g[ch] * x[base + ch];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(input.shape(), gx),
        Tensor::from_parts(kernel.shape(), gk),
    ))
}

/// Non-overlapping `window`×`window` average pooling.
pub fn avg_pool(input: &Tensor, window: usize) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::InvalidShape(format!(
            "{h}×{w} map is not divisible by pool window {window}"
        )));
    }
    let (ho, wo) = (h / window, w / window);
    let norm = 1.0 / (window * window) as f64;
    let x = input.data();
    let mut out = vec![0.0; ho * wo * c];
    for y in 0..h {
        for xx in 0..w {
            let dst = &mut out[((y / window) * wo + xx / window) * c..][..c];
            for (d, s) in dst.iter_mut().zip(&x[(y * w + xx) * c..][..c]) {
                *d += s * norm;
            }
        }
    }
    Ok(Tensor::from_parts(&[ho, wo, c], out))
}

pub fn avg_pool_backward(input_shape: &[usize], window: usize, grad_out: &Tensor) -> Tensor {
    let (_, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let wo = w / window;
    let norm = 1.0 / (window * window) as f64;
    let g = grad_out.data();
    Tensor::from_fn(input_shape, |idx| {
        let ch = idx % c;
        let p = idx / c;
        let (y, x) = (p / w, p % w);
        g[((y / window) * wo + x / window) * c + ch] * norm
    })
}
