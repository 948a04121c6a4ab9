//! Per-position response maps of the intermediate streams, rendered as PPM.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::ppm::{quantize, Ppm};
use crate::model::{Lgcn, Streams};
use crate::tensor::Tensor;

/// Anchor colours of the fixed colormap, dark blue through yellow.
const STOPS: [[f64; 3]; 5] = [
    [0.05, 0.03, 0.35],
    [0.15, 0.35, 0.70],
    [0.15, 0.65, 0.55],
    [0.60, 0.85, 0.25],
    [0.99, 0.91, 0.15],
];

/// Maps `v ∈ [0, 1]` (clamped) to RGB by piecewise-linear interpolation.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let pos = v * (STOPS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let t = pos - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [0, 1, 2].map(|c| a[c] + t * (b[c] - a[c]))
}

/// Channel-wise L2 energy at each position of an H×W×C map.
pub fn energy(map: &Tensor) -> Result<Tensor> {
    let (h, w, c) = map.hwc()?;
    Ok(Tensor::from_fn(&[h, w], |i| {
        map.data()[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt()
    }))
}

/// Channel mean at each position.
pub fn channel_mean(map: &Tensor) -> Result<Tensor> {
    let (h, w, c) = map.hwc()?;
    Ok(Tensor::from_fn(&[h, w], |i| {
        map.data()[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64
    }))
}

/// Min-max normalisation to [0, 1]; a flat map becomes all zeros.
pub fn normalize(m: &Tensor) -> Tensor {
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return m.zeros_like();
    }
    m.map(|v| (v - lo) / (hi - lo))
}

/// Colours an H×W map of values in [0, 1] and upsamples it by pixel
/// replication.
pub fn render(m: &Tensor, scale: usize) -> Result<Ppm> {
    let (h, w) = m.rc()?;
    if scale == 0 {
        return Err(Error::Config("heatmap scale must be positive".into()));
    }
    let (oh, ow) = (h * scale, w * scale);
    let mut data = Vec::with_capacity(oh * ow * 3);
    for y in 0..oh {
        for x in 0..ow {
            let rgb = colormap(m.data()[(y / scale) * w + x / scale]);
            data.extend(rgb.iter().map(|&v| quantize(v)));
        }
    }
    Ok(Ppm {
        width: ow,
        height: oh,
        maxval: 255,
        data,
    })
}

/// Named heatmaps of one image. `omega` keeps its absolute (0, 1) scale so
/// maps of different images stay comparable; the others are min-max scaled.
pub fn stream_maps(s: &Streams, scale: usize) -> Result<Vec<(&'static str, Ppm)>> {
    let mut out = vec![("f_vit", render(&normalize(&energy(&s.f_vit)?), scale)?)];
    if let Some(r) = &s.f_res_aligned {
        out.push(("f_res_aligned", render(&normalize(&energy(r)?), scale)?));
    }
    if let Some(o) = &s.omega {
        out.push(("omega", render(&channel_mean(o)?, scale)?));
    }
    out.push(("fused", render(&normalize(&energy(&s.fused)?), scale)?));
    Ok(out)
}

/// Writes `<stem>_<stream>.ppm` files into `dir` and returns their paths.
pub fn write_heatmaps(model: &Lgcn, image: &Tensor, dir: &Path, stem: &str, scale: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let streams = model.streams(image)?;
    let mut paths = Vec::new();
    for (name, ppm) in stream_maps(&streams, scale)? {
        let p = dir.join(format!("{stem}_{name}.ppm"));
        ppm.write(&p)?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints_and_clamping() {
        assert_eq!(colormap(0.0), STOPS[0]);
        assert_eq!(colormap(1.0), STOPS[4]);
        assert_eq!(colormap(-3.0), STOPS[0]);
        assert_eq!(colormap(7.0), STOPS[4]);
    }

    #[test]
    fn flat_map_normalizes_to_zero() {
        let m = Tensor::full(&[3, 3], 2.5);
        assert!(normalize(&m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn render_replicates_pixels() {
        let m = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let p = render(&m, 3).unwrap();
        assert_eq!((p.width, p.height), (6, 3));
        assert_eq!(p.data[0..3], p.data[6..9]);
        assert_ne!(p.data[0..3], p.data[9..12]);
    }

    #[test]
    fn energy_is_channel_norm() {
        let m = Tensor::new(&[1, 1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(energy(&m).unwrap().data(), &[5.0]);
    }
}
