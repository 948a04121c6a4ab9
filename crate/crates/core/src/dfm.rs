//! Dynamic feature fusion: a squeeze-excitation style gate over the summed
//! streams decides, per position and channel, how much of each stream to keep.

use rand::Rng;

use crate::config::{DfmMode, ModelConfig};
use crate::error::Result;
use crate::params::impl_parameters;
use crate::tensor::{linear, linear_backward, relu, relu_backward, sigmoid, sigmoid_backward, Tensor};

#[derive(Clone, Debug)]
pub struct DfmParams {
    /// `D × ⌈D/4⌉` channel compression (a 1×1 convolution).
    pub w1: Tensor,
    pub b1: Tensor,
    /// `⌈D/4⌉ × D` channel excitation.
    pub w2: Tensor,
    pub b2: Tensor,
    pub alpha1: Tensor,
    pub alpha2: Tensor,
}
impl_parameters!(DfmParams { w1, b1, w2, b2, alpha1, alpha2 });

impl DfmParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let r = cfg.gate_dim();
        Self {
            w1: Tensor::randn(&[d, r], 1.0 / (d as f64).sqrt(), rng),
            b1: Tensor::zeros(&[r]),
            w2: Tensor::randn(&[r, d], 1.0 / (r as f64).sqrt(), rng),
            b2: Tensor::zeros(&[d]),
            alpha1: Tensor::scalar(1.0),
            alpha2: Tensor::scalar(1.0),
        }
    }
}

pub struct GateCache {
    input: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
    omega: Tensor,
}

fn gate_forward(f: &Tensor, p: &DfmParams) -> Result<(Tensor, GateCache)> {
    let (h, w, d) = f.hwc()?;
    let flat = f.clone().reshape(&[h * w, d])?;
    let hidden_pre = linear(&flat, &p.w1, Some(&p.b1))?;
    let hidden = relu(&hidden_pre);
    let logits = linear(&hidden, &p.w2, Some(&p.b2))?;
    let omega = sigmoid(&logits).reshape(&[h, w, d])?;
    Ok((
        omega.clone(),
        GateCache {
            input: flat,
            hidden_pre,
            hidden,
            omega,
        },
    ))
}

/// `ω = σ(w2·ReLU(w1·F))`, applied independently at every position.
pub fn gate_weights(f: &Tensor, p: &DfmParams) -> Result<Tensor> {
    Ok(gate_forward(f, p)?.0)
}

fn gate_backward(p: &DfmParams, cache: &GateCache, grad_omega: &Tensor, grads: &mut DfmParams) -> Result<Tensor> {
    let rows = cache.hidden.shape()[0];
    let g_logits = sigmoid_backward(&cache.omega, grad_omega).reshape(&[rows, p.w2.shape()[1]])?;
    let l2 = linear_backward(&cache.hidden, &p.w2, &g_logits, true)?;
    let g_pre = relu_backward(&cache.hidden_pre, &l2.input);
    let l1 = linear_backward(&cache.input, &p.w1, &g_pre, true)?;
    grads.w2.add_assign(l2.weight.as_ref().expect("requested"));
    grads.b2.add_assign(l2.bias.as_ref().expect("requested"));
    grads.w1.add_assign(l1.weight.as_ref().expect("requested"));
    grads.b1.add_assign(l1.bias.as_ref().expect("requested"));
    l1.input.reshape(cache.omega.shape())
}

pub struct DfmCache {
    f_vit: Tensor,
    f_res: Tensor,
    gate: GateCache,
    mode: DfmMode,
}

impl DfmCache {
    pub fn omega(&self) -> &Tensor {
        &self.gate.omega
    }
}

pub fn dfm_forward(
    f_vit: &Tensor,
    f_res: &Tensor,
    p: &DfmParams,
    mode: DfmMode,
) -> Result<(Tensor, DfmCache)> {
    let f = f_vit.add(f_res)?;
    let (omega, gate) = gate_forward(&f, p)?;
    let (a1, a2) = (p.alpha1.item(), p.alpha2.item());
    let second = match mode {
        DfmMode::PaperText => f_res,
        DfmMode::VerbatimEq5 => f_vit,
    };
    let out = Tensor::from_parts(
        f.shape(),
        omega
            .data()
            .iter()
            .zip(f_vit.data())
            .zip(second.data())
            .map(|((&w, &v), &s)| a1 * (w * v) + a2 * ((1.0 - w) * s))
            .collect(),
    );
    Ok((
        out,
        DfmCache {
            f_vit: f_vit.clone(),
            f_res: f_res.clone(),
            gate,
            mode,
        },
    ))
}

/// Returns `(grad_f_vit, grad_f_res)`.
pub fn dfm_backward(p: &DfmParams, cache: &DfmCache, grad_out: &Tensor, grads: &mut DfmParams) -> Result<(Tensor, Tensor)> {
    let (a1, a2) = (p.alpha1.item(), p.alpha2.item());
    let omega = cache.gate.omega.data();
    let fv = cache.f_vit.data();
    let second = match cache.mode {
        DfmMode::PaperText => cache.f_res.data(),
        DfmMode::VerbatimEq5 => cache.f_vit.data(),
    };
    let n = omega.len();
    let mut g_vit = vec![0.0; n];
    let mut g_second = vec![0.0; n];
    let mut g_omega = vec![0.0; n];
    let (mut g_a1, mut g_a2) = (0.0, 0.0);
    for i in 0..n {
        let g = grad_out.data()[i];
        g_vit[i] = g * a1 * omega[i];
        g_second[i] = g * a2 * (1.0 - omega[i]);
        g_omega[i] = g * (a1 * fv[i] - a2 * second[i]);
        g_a1 += g * omega[i] * fv[i];
        g_a2 += g * (1.0 - omega[i]) * second[i];
    }
    grads.alpha1.data_mut()[0] += g_a1;
    grads.alpha2.data_mut()[0] += g_a2;
    let shape = cache.f_vit.shape();
    let g_f = gate_backward(p, &cache.gate, &Tensor::from_parts(shape, g_omega), grads)?;
    let mut g_res = g_f.clone();
    let mut g_vit = Tensor::from_parts(shape, g_vit);
    g_vit.add_assign(&g_f);
    match cache.mode {
        DfmMode::PaperText => g_res.add_assign(&Tensor::from_parts(shape, g_second)),
        DfmMode::VerbatimEq5 => g_vit.add_assign(&Tensor::from_parts(shape, g_second)),
    }
    Ok((g_vit, g_res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_gate(d: usize) -> DfmParams {
        let r = d.div_ceil(4);
        DfmParams {
            w1: Tensor::zeros(&[d, r]),
            b1: Tensor::zeros(&[r]),
            w2: Tensor::zeros(&[r, d]),
            b2: Tensor::zeros(&[d]),
            alpha1: Tensor::scalar(1.0),
            alpha2: Tensor::scalar(1.0),
        }
    }

    #[test]
    fn zero_gate_is_one_half() {
        let p = zero_gate(8);
        let w = gate_weights(&Tensor::zeros(&[2, 2, 8]), &p).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn balanced_gate_averages_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let fv = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let fr = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let (out, _) = dfm_forward(&fv, &fr, &zero_gate(8), DfmMode::PaperText).unwrap();
        let want = fv.add(&fr).unwrap().scale(0.5);
        assert!(out.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn per_position_matrix_oracle() {
        let cfg = ModelConfig { embed_dim: 8, ..ModelConfig::micro() };
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let mut p = DfmParams::init(&cfg, &mut rng);
        p.b1 = Tensor::randn(&[2], 0.3, &mut rng);
        p.b2 = Tensor::randn(&[8], 0.3, &mut rng);
        let f = Tensor::randn(&[2, 2, 8], 1.0, &mut rng);
        let w = gate_weights(&f, &p).unwrap();
        for pos in 0..4 {
            let x = &f.data()[pos * 8..(pos + 1) * 8];
            let hidden: Vec<f64> = (0..2)
                .map(|j| (p.b1.data()[j] + (0..8).map(|i| x[i] * p.w1.data()[i * 2 + j]).sum::<f64>()).max(0.0))
                .collect();
            for c in 0..8 {
                let z = p.b2.data()[c] + (0..2).map(|j| hidden[j] * p.w2.data()[j * 8 + c]).sum::<f64>();
                let want = 1.0 / (1.0 + (-z).exp());
                assert!((w.data()[pos * 8 + c] - want).abs() < 1e-12);
            }
        }
        assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn verbatim_mode_reproduces_vit_stream() {
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let p = DfmParams::init(&cfg, &mut rng);
        let fv = Tensor::randn(&[4, 4, 8], 1.0, &mut rng);
        let fr = Tensor::randn(&[4, 4, 8], 1.0, &mut rng);
        let (out, _) = dfm_forward(&fv, &fr, &p, DfmMode::VerbatimEq5).unwrap();
        assert!(out.max_abs_diff(&fv) < 1e-12);
    }

    #[test]
    fn dead_cnn_stream_leaves_gated_vit() {
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(94);
        let mut p = DfmParams::init(&cfg, &mut rng);
        p.alpha1 = Tensor::scalar(1.3);
        let fv = Tensor::randn(&[4, 4, 8], 1.0, &mut rng);
        let (out, _) = dfm_forward(&fv, &Tensor::zeros(&[4, 4, 8]), &p, DfmMode::PaperText).unwrap();
        let want = gate_weights(&fv, &p).unwrap().mul(&fv).unwrap().scale(1.3);
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let p = DfmParams::init(&cfg, &mut rng);
        assert!(dfm_forward(&Tensor::zeros(&[4, 4, 8]), &Tensor::zeros(&[2, 4, 8]), &p, DfmMode::PaperText).is_err());
    }
}
