//! Frequency-spatial adapter.
//!
//! Patch tokens are reshaped to a `G×G×D` map and projected down to `Cr`
//! channels. A spatial branch (depthwise 3×3 + GELU) and a frequency branch
//! (per-bin gain on the DFT amplitude, phase kept) run side by side; their
//! outputs are concatenated, projected back to `D` and scaled by a learnable
//! residual factor. The class-token row of the residual is always zero.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{expect_dim, Error, Result};
use crate::params::impl_parameters;
use crate::tensor::{
    depthwise_conv2d, depthwise_conv2d_backward, dft2d, dft2d_backward, gelu, gelu_backward,
    idft2d_backward, idft2d_complex, linear, linear_backward, ComplexGrid, Tensor,
};

#[derive(Clone, Debug)]
pub struct FsaParams {
    pub down_w: Tensor,
    pub down_b: Tensor,
    pub dw_kernel: Tensor,
    /// Natural log of the amplitude gains, `G×G×Cr`.
    pub log_gain: Tensor,
    pub fuse_w: Tensor,
    pub fuse_b: Tensor,
    pub scale: Tensor,
}
impl_parameters!(FsaParams { down_w, down_b, dw_kernel, log_gain, fuse_w, fuse_b, scale });

impl FsaParams {
    /// No-op at initialisation: the fusion projection starts at zero.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let cr = cfg.adapter_dim();
        let g = cfg.grid();
        let mut dw = Tensor::randn(&[cr, 3, 3], 0.1, rng);
        for c in 0..cr {
            dw.data_mut()[c * 9 + 4] += 1.0;
        }
        Self {
            down_w: Tensor::randn(&[d, cr], 1.0 / (d as f64).sqrt(), rng),
            down_b: Tensor::zeros(&[cr]),
            dw_kernel: dw,
            log_gain: Tensor::zeros(&[g, g, cr]),
            fuse_w: Tensor::zeros(&[2 * cr, d]),
            fuse_b: Tensor::zeros(&[d]),
            scale: Tensor::scalar(cfg.adapter_scale_init),
        }
    }

    pub fn gains(&self) -> Tensor {
        self.log_gain.map(f64::exp)
    }

    pub fn bottleneck(&self) -> usize {
        self.down_w.shape()[1]
    }
}

/// Spatial-branch nonlinearity; `Identity` exposes the branch as a linear map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialActivation {
    Gelu,
    Identity,
}

/// Depthwise 3×3 convolution (padding 1) followed by GELU.
pub fn spatial_branch(map: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    Ok(gelu(&depthwise_conv2d(map, kernel, 1)?))
}

pub struct FrequencyCache {
    spectrum: ComplexGrid,
    gains: Vec<f64>,
}

/// Scale `|X|` by `gains` keeping the phase, through an explicit polar form.
fn modulate(spectrum: &ComplexGrid, gains: &[f64]) -> ComplexGrid {
    let mut out = spectrum.clone();
    for i in 0..gains.len() {
        let (re, im) = (spectrum.re[i], spectrum.im[i]);
        let amp = re.hypot(im);
        let phase = im.atan2(re);
        out.re[i] = gains[i] * amp * phase.cos();
        out.im[i] = gains[i] * amp * phase.sin();
    }
    out
}

fn frequency_forward(map: &Tensor, gains: &Tensor) -> Result<(ComplexGrid, FrequencyCache)> {
    let (h, w, c) = map.hwc()?;
    let (gh, gw, gc) = gains.hwc()?;
    expect_dim("gain height", h, gh)?;
    expect_dim("gain width", w, gw)?;
    expect_dim("gain channels", c, gc)?;
    if gains.data().iter().any(|&g| !(g > 0.0)) {
        return Err(Error::Config("amplitude gains must be positive".into()));
    }
    let spectrum = dft2d(map)?;
    let out = idft2d_complex(&modulate(&spectrum, gains.data()));
    Ok((
        out,
        FrequencyCache {
            spectrum,
            gains: gains.data().to_vec(),
        },
    ))
}

/// Real part of `idft(gain ⊙ |X| · e^{i∠X})` with `X = dft(map)`.
pub fn frequency_branch(map: &Tensor, gains: &Tensor) -> Result<Tensor> {
    let (out, _) = frequency_forward(map, gains)?;
    Ok(Tensor::from_parts(&out.shape, out.re))
}

/// Largest imaginary magnitude left after the inverse transform; it vanishes
/// when the gain field is conjugate-symmetric.
pub fn frequency_residue(map: &Tensor, gains: &Tensor) -> Result<f64> {
    let (out, _) = frequency_forward(map, gains)?;
    Ok(out.im.iter().fold(0.0, |m, v| m.max(v.abs())))
}

/// Returns `(grad_map, grad_gains)` for the real output of the frequency branch.
fn frequency_backward(cache: &FrequencyCache, grad_out: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let g_mod = idft2d_backward(grad_out)?;
    let s = &cache.spectrum;
    let mut g_spec = ComplexGrid::zeros(s.shape[0], s.shape[1], s.shape[2]);
    let mut g_gain = vec![0.0; cache.gains.len()];
    for i in 0..cache.gains.len() {
        let (re, im) = (s.re[i], s.im[i]);
        let amp = re.hypot(im);
        let phase = im.atan2(re);
        let (cp, sp) = (phase.cos(), phase.sin());
        let (gr, gi) = (g_mod.re[i], g_mod.im[i]);
        let radial = gr * cp + gi * sp;
        let tangential = -gr * sp + gi * cp;
        let g = cache.gains[i];
        // d/dA and (d/dφ)/A of the modulated value
        let d_amp = g * radial;
        let d_phase_over_amp = g * tangential;
        g_spec.re[i] = d_amp * cp - d_phase_over_amp * sp;
        g_spec.im[i] = d_amp * sp + d_phase_over_amp * cp;
        g_gain[i] = amp * radial;
    }
    Ok((dft2d_backward(&g_spec), g_gain))
}

/// Gradients of [`frequency_branch`] with respect to the map and the gains.
pub fn frequency_branch_backward(map: &Tensor, gains: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, cache) = frequency_forward(map, gains)?;
    let (g_map, g_gain) = frequency_backward(&cache, grad_out)?;
    Ok((g_map, Tensor::from_parts(gains.shape(), g_gain)))
}

pub struct FsaCache {
    patches: Tensor,
    z: Tensor,
    s_pre: Tensor,
    activation: SpatialActivation,
    freq: FrequencyCache,
    cat: Tensor,
    fused: Tensor,
}

/// Residual term of the adapter for tokens `(1+G²)×D`.
pub fn fsa_forward(tokens: &Tensor, p: &FsaParams, cfg: &ModelConfig) -> Result<Tensor> {
    Ok(fsa_forward_cached(tokens, p, cfg, SpatialActivation::Gelu)?.0)
}

pub fn fsa_forward_cached(
    tokens: &Tensor,
    p: &FsaParams,
    cfg: &ModelConfig,
    activation: SpatialActivation,
) -> Result<(Tensor, FsaCache)> {
    let (n, d) = tokens.rc()?;
    expect_dim("token count", cfg.tokens(), n)?;
    let g = cfg.grid();
    let cr = p.bottleneck();
    let patches = tokens.slice_rows(1, n);
    let z = linear(&patches, &p.down_w, Some(&p.down_b))?.reshape(&[g, g, cr])?;
    let s_pre = depthwise_conv2d(&z, &p.dw_kernel, 1)?;
    let s = match activation {
        SpatialActivation::Gelu => gelu(&s_pre),
        SpatialActivation::Identity => s_pre.clone(),
    };
    let (f, freq) = frequency_forward(&z, &p.gains())?;
    let f = Tensor::from_parts(&f.shape, f.re);
    let cat = Tensor::concat_channels(&s, &f)?.reshape(&[g * g, 2 * cr])?;
    let fused = linear(&cat, &p.fuse_w, Some(&p.fuse_b))?;
    let scale = p.scale.item();
    let mut out = vec![0.0; n * d];
    for (o, v) in out[d..].iter_mut().zip(fused.data()) {
        *o = scale * v;
    }
    Ok((
        Tensor::from_parts(&[n, d], out),
        FsaCache {
            patches,
            z,
            s_pre,
            activation,
            freq,
            cat,
            fused,
        },
    ))
}

/// Backward of the adapter residual; returns the gradient w.r.t. the tokens.
pub fn fsa_backward(p: &FsaParams, cache: &FsaCache, grad_out: &Tensor, grads: &mut FsaParams) -> Result<Tensor> {
    let (n, d) = grad_out.rc()?;
    let scale = p.scale.item();
    let g_res = grad_out.slice_rows(1, n);
    grads.scale.data_mut()[0] += g_res.dot(&cache.fused);
    let g_fused = g_res.scale(scale);
    let lf = linear_backward(&cache.cat, &p.fuse_w, &g_fused, true)?;
    grads.fuse_w.add_assign(lf.weight.as_ref().expect("requested"));
    grads.fuse_b.add_assign(lf.bias.as_ref().expect("requested"));
    let (gh, gw, cr) = cache.z.hwc()?;
    let g_cat = lf.input.reshape(&[gh, gw, 2 * cr])?;
    let (g_s, g_f) = g_cat.split_channels(cr)?;
    let g_spre = match cache.activation {
        SpatialActivation::Gelu => gelu_backward(&cache.s_pre, &g_s),
        SpatialActivation::Identity => g_s,
    };
    let (mut g_z, g_k) = depthwise_conv2d_backward(&cache.z, &p.dw_kernel, 1, &g_spre)?;
    grads.dw_kernel.add_assign(&g_k);
    let (g_zf, g_gain) = frequency_backward(&cache.freq, &g_f)?;
    g_z.add_assign(&g_zf);
    for ((acc, gg), g) in grads.log_gain.data_mut().iter_mut().zip(&g_gain).zip(&cache.freq.gains) {
        *acc += gg * g;
    }
    let g_z = g_z.reshape(&[gh * gw, cr])?;
    let ld = linear_backward(&cache.patches, &p.down_w, &g_z, true)?;
    grads.down_w.add_assign(ld.weight.as_ref().expect("requested"));
    grads.down_b.add_assign(ld.bias.as_ref().expect("requested"));
    let mut g_tokens = vec![0.0; n * d];
    g_tokens[d..].copy_from_slice(ld.input.data());
    Ok(Tensor::from_parts(&[n, d], g_tokens))
}
