use crate::error::{expect_dim, Error, Result};

use super::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Saved statistics for [`layer_norm_backward`].
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Layer normalisation over the last axis of an `n×d` matrix.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let (n, d) = x.rc()?;
    expect_dim("layer norm gamma", d, gamma.len())?;
    expect_dim("layer norm beta", d, beta.len())?;
    let mut xhat = vec![0.0; n * d];
    let mut out = vec![0.0; n * d];
    let mut inv_std = Vec::with_capacity(n);
    for r in 0..n {
        let row = &x.data()[r * d..][..d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((
        Tensor::from_parts(&[n, d], out),
        LayerNormCache {
            xhat: Tensor::from_parts(&[n, d], xhat),
            inv_std,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (cache.xhat.shape()[0], cache.xhat.shape()[1]);
    let mut gx = vec![0.0; n * d];
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let xh = &cache.xhat.data()[r * d..][..d];
        let go = &grad_out.data()[r * d..][..d];
        for j in 0..d {
            gg[j] += go[j] * xh[j];
            gb[j] += go[j];
            dxhat[j] = go[j] * gamma.data()[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            gx[r * d + j] = cache.inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    (
        Tensor::from_parts(&[n, d], gx),
        Tensor::from_parts(&[d], gg),
        Tensor::from_parts(&[d], gb),
    )
}

/// Unit-L2 rescaling of a whole tensor. Returns the normalised tensor and the
/// original norm; zero input is rejected.
pub fn l2_normalize(x: &Tensor) -> Result<(Tensor, f64)> {
    let norm = x.sq_norm().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateDescriptor);
    }
    Ok((x.scale(1.0 / norm), norm))
}

/// Backward of [`l2_normalize`] given its output `y` and the input norm.
pub fn l2_normalize_backward(y: &Tensor, norm: f64, grad_out: &Tensor) -> Tensor {
    let proj = y.dot(grad_out);
    Tensor::from_parts(
        y.shape(),
        y.data()
            .iter()
            .zip(grad_out.data())
            .map(|(&yv, &g)| (g - yv * proj) / norm)
            .collect(),
    )
}
