//! Direct (non-FFT) 2-D discrete Fourier transforms over H×W×C maps.
//!
//! The transform is applied separably, rows then columns, with exact twiddle
//! tables indexed by `(k·n) mod N`. Forward uses `e^{-2πi(ku/H + lv/W)}`, the
//! inverse carries the `1/(H·W)` factor.

use std::f64::consts::PI;

use crate::error::Result;

use super::{ComplexGrid, Tensor};

struct Twiddles {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddles {
    fn new(n: usize) -> Self {
        let angle = |k: usize| 2.0 * PI * k as f64 / n as f64;
        Self {
            cos: (0..n).map(|k| angle(k).cos()).collect(),
            sin: (0..n).map(|k| angle(k).sin()).collect(),
        }
    }
}

/// One-dimensional DFT along an axis with `n` samples, `stride` elements apart,
/// applied to every line described by `starts`. `sign` is -1 for the forward
/// transform and +1 for the inverse.
fn dft_axis(re: &mut [f64], im: &mut [f64], n: usize, stride: usize, starts: &[usize], sign: f64) {
    let tw = Twiddles::new(n);
    let mut lr = vec![0.0; n];
    let mut li = vec![0.0; n];
    for &s in starts {
        for k in 0..n {
            let (mut ar, mut ai) = (0.0, 0.0);
            for j in 0..n {
                let t = (k * j) % n;
                let (c, si) = (tw.cos[t], sign * tw.sin[t]);
                let (xr, xi) = (re[s + j * stride], im[s + j * stride]);
                ar += xr * c - xi * si;
                ai += xr * si + xi * c;
            }
            lr[k] = ar;
            li[k] = ai;
        }
        for k in 0..n {
            re[s + k * stride] = lr[k];
            im[s + k * stride] = li[k];
        }
    }
}

fn transform(grid: &mut ComplexGrid, sign: f64) {
    let [h, w, c] = grid.shape;
    // along width: lines start at every (y, 0, ch)
    let row_starts: Vec<usize> = (0..h)
        .flat_map(|y| (0..c).map(move |ch| y * w * c + ch))
        .collect();
    dft_axis(&mut grid.re, &mut grid.im, w, c, &row_starts, sign);
    let col_starts: Vec<usize> = (0..w)
        .flat_map(|x| (0..c).map(move |ch| x * c + ch))
        .collect();
    dft_axis(&mut grid.re, &mut grid.im, h, w * c, &col_starts, sign);
}

/// Per-channel 2-D DFT of a real map.
pub fn dft2d(input: &Tensor) -> Result<ComplexGrid> {
    let (h, w, c) = input.hwc()?;
    let mut grid = ComplexGrid {
        shape: [h, w, c],
        re: input.data().to_vec(),
        im: vec![0.0; input.len()],
    };
    transform(&mut grid, -1.0);
    Ok(grid)
}

/// Complex inverse DFT, including the `1/(H·W)` normalisation.
pub fn idft2d_complex(spectrum: &ComplexGrid) -> ComplexGrid {
    let mut grid = spectrum.clone();
    transform(&mut grid, 1.0);
    let [h, w, _] = grid.shape;
    let norm = 1.0 / (h * w) as f64;
    grid.re.iter_mut().for_each(|v| *v *= norm);
    grid.im.iter_mut().for_each(|v| *v *= norm);
    grid
}

/// Real part of the inverse DFT.
pub fn idft2d(spectrum: &ComplexGrid) -> Tensor {
    let out = idft2d_complex(spectrum);
    Tensor::from_parts(&out.shape, out.re)
}

/// Backward of [`dft2d`]: maps gradients on `(re, im)` of the spectrum to the
/// real input, `H·W · Re(idft(g))`.
pub fn dft2d_backward(grad: &ComplexGrid) -> Tensor {
    let [h, w, _] = grad.shape;
    idft2d(grad).scale((h * w) as f64)
}

/// Backward of [`idft2d`] (real part taken): `dft(g) / (H·W)`.
pub fn idft2d_backward(grad_out: &Tensor) -> Result<ComplexGrid> {
    let (h, w, _) = grad_out.hwc()?;
    let mut g = dft2d(grad_out)?;
    let norm = 1.0 / (h * w) as f64;
    g.re.iter_mut().for_each(|v| *v *= norm);
    g.im.iter_mut().for_each(|v| *v *= norm);
    Ok(g)
}
