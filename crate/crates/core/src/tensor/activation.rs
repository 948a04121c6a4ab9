use crate::error::{expect_dim, Result};

use super::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape(),
        x.data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

/// GELU, tanh approximation.
pub fn gelu_scalar(v: f64) -> f64 {
    0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh())
}

pub fn gelu_grad_scalar(v: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape(),
        x.data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| g * gelu_grad_scalar(v))
            .collect(),
    )
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward given the sigmoid *output*.
pub fn sigmoid_backward(out: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor::from_parts(
        out.shape(),
        out.data()
            .iter()
            .zip(grad_out.data())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect(),
    )
}

pub fn softplus_scalar(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

pub fn softplus_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape(),
        x.data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| g * sigmoid_scalar(v))
            .collect(),
    )
}

/// Numerically stable softmax over each row of a `rows×cols` buffer, in place.
pub(crate) fn softmax_rows_inplace(data: &mut [f64], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = 1.0 / s;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// `dS = A ⊙ (dA − rowsum(dA ⊙ A))`, overwriting `grad` in place.
pub(crate) fn softmax_rows_backward_inplace(probs: &[f64], grad: &mut [f64], cols: usize) {
    for (a, g) in probs.chunks_exact(cols).zip(grad.chunks_exact_mut(cols)) {
        let dot: f64 = a.iter().zip(g.iter()).map(|(x, y)| x * y).sum();
        for (gv, &av) in g.iter_mut().zip(a) {
            *gv = av * (*gv - dot);
        }
    }
}

/// Softmax along the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let cols = *x.shape().last().expect("rank ≥ 1");
    let mut out = x.clone();
    softmax_rows_inplace(out.data_mut(), cols);
    out
}

/// Backward of [`softmax`] given its output.
pub fn softmax_backward(out: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    expect_dim("softmax grad", out.len(), grad_out.len())?;
    let cols = *out.shape().last().expect("rank ≥ 1");
    let mut g = grad_out.clone();
    softmax_rows_backward_inplace(out.data(), g.data_mut(), cols);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = Tensor::randn(&[6, 9], 5.0, &mut rng);
        let y = softmax(&x);
        for row in y.data().chunks(9) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = Tensor::new(&[1, 3], vec![1000.0, 999.0, -1000.0]).unwrap();
        assert!(softmax(&x).all_finite());
    }

    #[test]
    fn activations_match_closed_forms() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((gelu_scalar(0.0)).abs() < 1e-15);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-9);
        assert!((softplus_scalar(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(relu(&Tensor::new(&[2], vec![-1.0, 2.0]).unwrap()).data(), &[0.0, 2.0]);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
    }
}
