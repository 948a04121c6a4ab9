//! Descriptor head: regional GeM pooling, a cross-image attention layer and
//! L2 normalisation.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{join, Parameters};
use crate::tensor::{l2_normalize, l2_normalize_backward, softplus, softplus_backward, Tensor};
use crate::vit::{mhsa_backward, mhsa_forward, Mhsa, MhsaCache};

/// Pooled regions per image: full map, left half, right half, centre crop.
pub const REGIONS: usize = 4;

/// Unit-norm global image descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor(Vec<f64>);

impl Descriptor {
    /// L2-normalises `values`.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateDescriptor);
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values that are already unit-norm (e.g. read back from a dump).
    pub fn from_unit(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Descriptor) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub attn: Mhsa,
}

impl Parameters for HeadParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.attn.visit(&join(prefix, "attn"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
    }
}

impl HeadParams {
    /// Output projection starts at zero so the layer begins as the identity.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut attn = Mhsa::init(cfg.fused_dim(), rng);
        attn.out_w.fill(0.0);
        Self { attn }
    }
}

/// `(y0, y1, x0, x1)` half-open bounds of each pooled region.
pub fn regions(g: usize) -> [(usize, usize, usize, usize); REGIONS] {
    let half = g / 2;
    let c0 = (g - half) / 2;
    [
        (0, g, 0, g),
        (0, g, 0, half),
        (0, g, half, g),
        (c0, c0 + half, c0, c0 + half),
    ]
}

pub struct PoolCache {
    input: Tensor,
    shifted: Tensor,
    pooled: Tensor,
    p: f64,
}

/// Softplus then GeM with exponent `p` over each region: `R × C`.
pub fn regional_pool(map: &Tensor, p: f64) -> Result<(Tensor, PoolCache)> {
    let (h, w, c) = map.hwc()?;
    if h != w || h % 2 != 0 {
        return Err(Error::InvalidShape(format!("regional pooling needs an even square grid, got {h}×{w}")));
    }
    let shifted = softplus(map);
    let s = shifted.data();
    let mut pooled = vec![0.0; REGIONS * c];
    for (r, &(y0, y1, x0, x1)) in regions(h).iter().enumerate() {
        let n = ((y1 - y0) * (x1 - x0)) as f64;
        let row = &mut pooled[r * c..(r + 1) * c];
        for y in y0..y1 {
            for x in x0..x1 {
                let base = (y * w + x) * c;
                for ch in 0..c {
                    row[ch] += s[base + ch].powf(p);
                }
            }
        }
        for v in row.iter_mut() {
            *v = (*v / n).powf(1.0 / p);
        }
    }
    let pooled = Tensor::from_parts(&[REGIONS, c], pooled);
    Ok((
        pooled.clone(),
        PoolCache {
            input: map.clone(),
            shifted,
            pooled,
            p,
        },
    ))
}

pub fn regional_pool_backward(cache: &PoolCache, grad_out: &Tensor) -> Result<Tensor> {
    let (h, w, c) = cache.input.hwc()?;
    let p = cache.p;
    let s = cache.shifted.data();
    let mut gs = vec![0.0; s.len()];
    for (r, &(y0, y1, x0, x1)) in regions(h).iter().enumerate() {
        let n = ((y1 - y0) * (x1 - x0)) as f64;
        for ch in 0..c {
            let out = cache.pooled.data()[r * c + ch];
            let coef = grad_out.data()[r * c + ch] * out.powf(1.0 - p) / n;
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = (y * w + x) * c + ch;
                    gs[i] += coef * s[i].powf(p - 1.0);
                }
            }
        }
    }
    Ok(softplus_backward(&cache.input, &Tensor::from_parts(cache.input.shape(), gs)))
}

/// One residual attention layer over all `B·R` region tokens of a batch.
pub fn cross_image_correlate(tokens: &Tensor, p: &HeadParams, heads: usize) -> Result<(Tensor, MhsaCache)> {
    let (out, cache) = mhsa_forward(&p.attn, tokens, heads)?;
    Ok((out.add(tokens)?, cache))
}

pub fn cross_image_correlate_backward(
    p: &HeadParams,
    cache: &MhsaCache,
    grad_out: &Tensor,
    grads: Option<&mut HeadParams>,
) -> Result<Tensor> {
    let mut g = mhsa_backward(&p.attn, cache, grad_out, grads.map(|g| &mut g.attn))?;
    g.add_assign(grad_out);
    Ok(g)
}

/// Concatenates each image's `R` rows and L2-normalises.
pub fn finalize(batch: &Tensor, images: usize) -> Result<Vec<Descriptor>> {
    let (rows, _) = batch.rc()?;
    if images == 0 || rows % images != 0 {
        return Err(Error::InvalidShape(format!("{rows} region rows do not split over {images} images")));
    }
    let per = batch.len() / images;
    batch
        .data()
        .chunks(per)
        .map(|chunk| Descriptor::normalized(chunk.to_vec()))
        .collect()
}

pub struct HeadCache {
    pools: Vec<PoolCache>,
    attn: MhsaCache,
    descriptors: Vec<Tensor>,
    norms: Vec<f64>,
}

impl HeadCache {
    pub fn descriptors(&self) -> &[Tensor] {
        &self.descriptors
    }
}

/// Pools every map, correlates the whole batch and normalises per image.
/// Returns one `R·D` unit vector per input map.
pub fn head_forward(maps: &[Tensor], p: &HeadParams, cfg: &ModelConfig) -> Result<(Vec<Tensor>, HeadCache)> {
    if maps.is_empty() {
        return Err(Error::InvalidShape("descriptor head needs at least one map".into()));
    }
    let d = p.attn.dim();
    let mut pools = Vec::with_capacity(maps.len());
    let mut stacked = Vec::with_capacity(maps.len() * REGIONS * d);
    for m in maps {
        let (pooled, cache) = regional_pool(m, cfg.gem_p)?;
        crate::error::expect_dim("fused channels", d, pooled.shape()[1])?;
        stacked.extend_from_slice(pooled.data());
        pools.push(cache);
    }
    let tokens = Tensor::from_parts(&[maps.len() * REGIONS, d], stacked);
    let (mixed, attn) = cross_image_correlate(&tokens, p, cfg.heads)?;
    let per = REGIONS * d;
    let mut descriptors = Vec::with_capacity(maps.len());
    let mut norms = Vec::with_capacity(maps.len());
    for chunk in mixed.data().chunks(per) {
        let (y, n) = l2_normalize(&Tensor::from_parts(&[per], chunk.to_vec()))?;
        descriptors.push(y);
        norms.push(n);
    }
    Ok((
        descriptors.clone(),
        HeadCache {
            pools,
            attn,
            descriptors,
            norms,
        },
    ))
}

pub fn head_backward(
    p: &HeadParams,
    cache: &HeadCache,
    grad_desc: &[Tensor],
    grads: Option<&mut HeadParams>,
) -> Result<Vec<Tensor>> {
    let d = p.attn.dim();
    let per = REGIONS * d;
    let mut g_mixed = Vec::with_capacity(grad_desc.len() * per);
    for ((y, &n), g) in cache.descriptors.iter().zip(&cache.norms).zip(grad_desc) {
        g_mixed.extend_from_slice(l2_normalize_backward(y, n, g).data());
    }
    let g_mixed = Tensor::from_parts(&[grad_desc.len() * REGIONS, d], g_mixed);
    let g_tokens = cross_image_correlate_backward(p, &cache.attn, &g_mixed, grads)?;
    cache
        .pools
        .iter()
        .enumerate()
        .map(|(i, pc)| regional_pool_backward(pc, &g_tokens.slice_rows(i * REGIONS, (i + 1) * REGIONS)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::attention;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn softplus_inv(v: f64) -> f64 {
        (v.exp() - 1.0).ln()
    }

    #[test]
    fn gem_of_constant_is_constant() {
        let map = Tensor::full(&[8, 8, 3], softplus_inv(2.5));
        let (pooled, _) = regional_pool(&map, 3.0).unwrap();
        assert!(pooled.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn gem_p1_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let map = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
        let (pooled, _) = regional_pool(&map, 1.0).unwrap();
        let s = softplus(&map);
        for (r, &(y0, y1, x0, x1)) in regions(4).iter().enumerate() {
            for c in 0..2 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += s.at3(y, x, c);
                        n += 1.0;
                    }
                }
                assert!((pooled.data()[r * 2 + c] - acc / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gem_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let map = Tensor::randn(&[6, 6, 3], 1.0, &mut rng);
        let (pooled, _) = regional_pool(&map, 3.0).unwrap();
        let sp = |v: f64| (1.0 + v.exp()).ln();
        // Centre crop of a 6×6 grid is rows/cols 1..4.
        for c in 0..3 {
            let mut acc = 0.0;
            for y in 1..4 {
                for x in 1..4 {
                    acc += sp(map.at3(y, x, c)).powi(3);
                }
            }
            let want = (acc / 9.0).cbrt();
            assert!((pooled.data()[3 * 3 + c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_grid_rejected() {
        assert!(regional_pool(&Tensor::zeros(&[3, 3, 2]), 3.0).is_err());
    }

    #[test]
    fn single_token_zero_projection_is_identity() {
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let p = HeadParams::init(&cfg, &mut rng);
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let (y, _) = cross_image_correlate(&x, &p, 2).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn duplicate_images_get_identical_outputs() {
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let mut p = HeadParams::init(&cfg, &mut rng);
        p.attn.out_w = Tensor::randn(&[8, 8], 0.3, &mut rng);
        let one = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let mut both = one.data().to_vec();
        both.extend_from_slice(one.data());
        let (y, _) = cross_image_correlate(&Tensor::new(&[8, 8], both).unwrap(), &p, 2).unwrap();
        assert!(y.slice_rows(0, 4).max_abs_diff(&y.slice_rows(4, 8)) < 1e-12);
    }

    #[test]
    fn two_image_batch_matches_scratch_attention() {
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let mut p = HeadParams::init(&cfg, &mut rng);
        p.attn.out_w = Tensor::randn(&[8, 8], 0.3, &mut rng);
        p.attn.qkv_b = Tensor::randn(&[24], 0.1, &mut rng);
        let x = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let (y, _) = cross_image_correlate(&x, &p, 2).unwrap();
        let qkv = crate::tensor::linear(&x, &p.attn.qkv_w, Some(&p.attn.qkv_b)).unwrap();
        let cols = |off: usize| Tensor::from_fn(&[8, 4], |i| qkv.data()[(i / 4) * 24 + off + i % 4]);
        let mut concat = vec![0.0; 64];
        for h in 0..2 {
            let o = attention(&cols(h * 4), &cols(8 + h * 4), &cols(16 + h * 4)).unwrap();
            for r in 0..8 {
                for j in 0..4 {
                    concat[r * 8 + h * 4 + j] = o.data()[r * 4 + j];
                }
            }
        }
        let concat = Tensor::new(&[8, 8], concat).unwrap();
        let want = crate::tensor::linear(&concat, &p.attn.out_w, Some(&p.attn.out_b)).unwrap().add(&x).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn finalize_is_unit_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let x = Tensor::randn(&[8, 5], 1.0, &mut rng);
        let a = finalize(&x, 2).unwrap();
        let b = finalize(&x.scale(10.0), 2).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.dim(), 20);
            assert!((u.dot(u) - 1.0).abs() < 1e-12);
            assert!((u.dot(v) - 1.0).abs() < 1e-12);
            for (p, q) in u.as_slice().iter().zip(v.as_slice()) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_batch_is_degenerate() {
        assert!(matches!(finalize(&Tensor::zeros(&[4, 3]), 1), Err(Error::DegenerateDescriptor)));
    }
}
