use crate::error::{Error, Result};

use super::Tensor;

/// Sampling taps along one axis: `(lo, hi, weight_of_hi)`.
///
/// Half-pixel centres (align-corners = false) with source coordinates clamped
/// to the valid range.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape(format!(
            "resize target {out_h}×{out_w} must be positive"
        )));
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let x = input.data();
    let mut out = vec![0.0; out_h * out_w * c];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let dst = &mut out[(oy * out_w + ox) * c..][..c];
            let taps = [
                ((y0 * w + x0) * c, (1.0 - wy) * (1.0 - wx)),
                ((y0 * w + x1) * c, (1.0 - wy) * wx),
                ((y1 * w + x0) * c, wy * (1.0 - wx)),
                ((y1 * w + x1) * c, wy * wx),
            ];
            for (base, weight) in taps {
                for (d, s) in dst.iter_mut().zip(&x[base..base + c]) {
                    *d += weight * s;
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[out_h, out_w, c], out))
}

/// Adjoint of [`bilinear_resize`] for an input of shape `input_shape`.
pub fn bilinear_resize_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let (out_h, out_w, gc) = grad_out.hwc()?;
    crate::error::expect_dim("channels", c, gc)?;
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let g = grad_out.data();
    let mut gx = vec![0.0; h * w * c];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let src = &g[(oy * out_w + ox) * c..][..c];
            let taps = [
                ((y0 * w + x0) * c, (1.0 - wy) * (1.0 - wx)),
                ((y0 * w + x1) * c, (1.0 - wy) * wx),
                ((y1 * w + x0) * c, wy * (1.0 - wx)),
                ((y1 * w + x1) * c, wy * wx),
            ];
            for (base, weight) in taps {
                for (d, s) in gx[base..base + c].iter_mut().zip(src) {
                    *d += weight * s;
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape, gx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_map_stays_constant() {
        let x = Tensor::full(&[3, 5, 2], 7.0);
        for (oh, ow) in [(1, 1), (6, 10), (2, 3), (14, 14)] {
            let y = bilinear_resize(&x, oh, ow).unwrap();
            assert!(y.data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
        }
    }

    #[test]
    fn upsample_two_by_two_clamps_corners() {
        let x = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        assert_eq!(y.at3(0, 0, 0), 0.0);
        assert_eq!(y.at3(0, 3, 0), 1.0);
        assert_eq!(y.at3(3, 0, 0), 2.0);
        assert_eq!(y.at3(3, 3, 0), 3.0);
        assert!(y.data().iter().all(|&v| (0.0..=3.0).contains(&v)));
        // second row/col sample at source 0.25
        assert!((y.at3(0, 1, 0) - 0.25).abs() < 1e-15);
    }

    /// Per-pixel formula written out independently of the tap tables.
    fn reference(x: &Tensor, oh: usize, ow: usize) -> Tensor {
        let (h, w, c) = x.hwc().unwrap();
        Tensor::from_fn(&[oh, ow, c], |idx| {
            let ch = idx % c;
            let (oy, ox) = ((idx / c) / ow, (idx / c) % ow);
            let sy = (((oy as f64) + 0.5) * h as f64 / oh as f64 - 0.5).max(0.0).min((h - 1) as f64);
            let sx = (((ox as f64) + 0.5) * w as f64 / ow as f64 - 0.5).max(0.0).min((w - 1) as f64);
            let (fy, fx) = (sy.floor(), sx.floor());
            let (dy, dx) = (sy - fy, sx - fx);
            let y0 = fy as usize;
            let x0 = fx as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let top = x.at3(y0, x0, ch) * (1.0 - dx) + x.at3(y0, x1, ch) * dx;
            let bot = x.at3(y1, x0, ch) * (1.0 - dx) + x.at3(y1, x1, ch) * dx;
            top * (1.0 - dy) + bot * dy
        })
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(&[7, 7, 3], 1.0, &mut rng);
        for (oh, ow) in [(14, 14), (4, 9), (7, 7)] {
            let got = bilinear_resize(&x, oh, ow).unwrap();
            assert!(got.max_abs_diff(&reference(&x, oh, ow)) < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
        let g = Tensor::randn(&[6, 6, 2], 1.0, &mut rng);
        let y = bilinear_resize(&x, 6, 6).unwrap();
        let gx = bilinear_resize_backward(x.shape(), &g).unwrap();
        assert!((y.dot(&g) - x.dot(&gx)).abs() < 1e-12);
    }

    #[test]
    fn zero_target_rejected() {
        assert!(bilinear_resize(&Tensor::zeros(&[2, 2, 1]), 0, 3).is_err());
    }
}
