//! Toy vision-transformer branch producing the global feature grid `F_ViT`.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{expect_dim, Error, Result};
use crate::fsa::{self, FsaCache, FsaParams};
use crate::params::{impl_parameters, join, Parameters};
use crate::tensor::linalg::{gemm, MatRef};
use crate::tensor::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, LayerNormCache,
    Tensor,
};
use crate::tensor::{softmax_rows_backward_inplace, softmax_rows_inplace};

/// Scaled dot-product attention on raw row-major buffers.
/// `q: n×dk`, `k: m×dk`, `v: m×dv`; returns `(out n×dv, probs n×m)`.
fn attend(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, dk: usize, dv: usize) -> (Vec<f64>, Vec<f64>) {
    let mut probs = vec![0.0; n * m];
    gemm(
        1.0 / (dk as f64).sqrt(),
        MatRef::new(q, n, dk),
        MatRef::new(k, m, dk).t(),
        0.0,
        &mut probs,
    );
    softmax_rows_inplace(&mut probs, m);
    let mut out = vec![0.0; n * dv];
    gemm(1.0, MatRef::new(&probs, n, m), MatRef::new(v, m, dv), 0.0, &mut out);
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
fn attend_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    n: usize,
    m: usize,
    dk: usize,
    dv: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dvv = vec![0.0; m * dv];
    gemm(1.0, MatRef::new(probs, n, m).t(), MatRef::new(dout, n, dv), 0.0, &mut dvv);
    let mut ds = vec![0.0; n * m];
    gemm(1.0, MatRef::new(dout, n, dv), MatRef::new(v, m, dv).t(), 0.0, &mut ds);
    softmax_rows_backward_inplace(probs, &mut ds, m);
    let mut dq = vec![0.0; n * dk];
    gemm(scale, MatRef::new(&ds, n, m), MatRef::new(k, m, dk), 0.0, &mut dq);
    let mut dkk = vec![0.0; m * dk];
    gemm(scale, MatRef::new(&ds, n, m).t(), MatRef::new(q, n, dk), 0.0, &mut dkk);
    (dq, dkk, dvv)
}

/// `softmax(Q·Kᵀ/√d_k)·V`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, dk) = q.rc()?;
    let (m, dk2) = k.rc()?;
    let (m2, dv) = v.rc()?;
    expect_dim("key width", dk, dk2)?;
    expect_dim("value rows", m, m2)?;
    let (out, _) = attend(q.data(), k.data(), v.data(), n, m, dk, dv);
    Ok(Tensor::from_parts(&[n, dv], out))
}

/// Gradients of [`attention`] given the upstream gradient: `(dQ, dK, dV)`.
pub fn attention_backward(q: &Tensor, k: &Tensor, v: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, dk) = q.rc()?;
    let (m, dk2) = k.rc()?;
    let (m2, dv) = v.rc()?;
    expect_dim("key width", dk, dk2)?;
    expect_dim("value rows", m, m2)?;
    expect_dim("gradient rows", n, grad_out.rc()?.0)?;
    let (_, probs) = attend(q.data(), k.data(), v.data(), n, m, dk, dv);
    let (dq, dkk, dvv) = attend_backward(q.data(), k.data(), v.data(), &probs, grad_out.data(), n, m, dk, dv);
    Ok((
        Tensor::from_parts(&[n, dk], dq),
        Tensor::from_parts(&[m, dk], dkk),
        Tensor::from_parts(&[m, dv], dvv),
    ))
}

/// Row-softmax attention weights `softmax(Q·Kᵀ/√d_k)`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (n, dk) = q.rc()?;
    let (m, dk2) = k.rc()?;
    expect_dim("key width", dk, dk2)?;
    let ones = vec![0.0; m];
    let (_, probs) = attend(q.data(), k.data(), &ones, n, m, dk, 1);
    Ok(Tensor::from_parts(&[n, m], probs))
}

/// Multi-head self-attention weights.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}
impl_parameters!(Mhsa { qkv_w, qkv_b, out_w, out_b });

impl Mhsa {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            qkv_w: Tensor::randn(&[dim, 3 * dim], std, rng),
            qkv_b: Tensor::zeros(&[3 * dim]),
            out_w: Tensor::randn(&[dim, dim], std, rng),
            out_b: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.out_w.shape()[0]
    }
}

pub struct MhsaCache {
    x: Tensor,
    heads: usize,
    qkv: Tensor,
    probs: Vec<Vec<f64>>,
    concat: Tensor,
}

impl MhsaCache {
    /// Attention weights of one head, `n×n`.
    pub fn probs(&self, head: usize) -> &[f64] {
        &self.probs[head]
    }
}

/// Columns `[off, off+w)` of an `n×cols` buffer as a contiguous `n×w` block.
fn take_cols(src: &[f64], n: usize, cols: usize, off: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * w);
    for r in 0..n {
        out.extend_from_slice(&src[r * cols + off..r * cols + off + w]);
    }
    out
}

fn put_cols(dst: &mut [f64], block: &[f64], n: usize, cols: usize, off: usize, w: usize) {
    for r in 0..n {
        dst[r * cols + off..r * cols + off + w].copy_from_slice(&block[r * w..(r + 1) * w]);
    }
}

pub fn mhsa_forward(p: &Mhsa, x: &Tensor, heads: usize) -> Result<(Tensor, MhsaCache)> {
    let (n, d) = x.rc()?;
    expect_dim("attention width", p.dim(), d)?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{d} channels do not split into {heads} heads")));
    }
    let dk = d / heads;
    let qkv = linear(x, &p.qkv_w, Some(&p.qkv_b))?;
    let mut concat = vec![0.0; n * d];
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = take_cols(qkv.data(), n, 3 * d, h * dk, dk);
        let k = take_cols(qkv.data(), n, 3 * d, d + h * dk, dk);
        let v = take_cols(qkv.data(), n, 3 * d, 2 * d + h * dk, dk);
        let (o, a) = attend(&q, &k, &v, n, n, dk, dk);
        put_cols(&mut concat, &o, n, d, h * dk, dk);
        probs.push(a);
    }
    let concat = Tensor::from_parts(&[n, d], concat);
    let out = linear(&concat, &p.out_w, Some(&p.out_b))?;
    Ok((
        out,
        MhsaCache {
            x: x.clone(),
            heads,
            qkv,
            probs,
            concat,
        },
    ))
}

/// Backward of [`mhsa_forward`]; parameter gradients accumulate into `grads`
/// when given.
pub fn mhsa_backward(p: &Mhsa, cache: &MhsaCache, grad_out: &Tensor, grads: Option<&mut Mhsa>) -> Result<Tensor> {
    let (n, d) = cache.x.rc()?;
    let dk = d / cache.heads;
    let want = grads.is_some();
    let lo = linear_backward(&cache.concat, &p.out_w, grad_out, want)?;
    let mut dqkv = vec![0.0; n * 3 * d];
    for h in 0..cache.heads {
        let q = take_cols(cache.qkv.data(), n, 3 * d, h * dk, dk);
        let k = take_cols(cache.qkv.data(), n, 3 * d, d + h * dk, dk);
        let v = take_cols(cache.qkv.data(), n, 3 * d, 2 * d + h * dk, dk);
        let dout = take_cols(lo.input.data(), n, d, h * dk, dk);
        let (dq, dkk, dv) = attend_backward(&q, &k, &v, &cache.probs[h], &dout, n, n, dk, dk);
        put_cols(&mut dqkv, &dq, n, 3 * d, h * dk, dk);
        put_cols(&mut dqkv, &dkk, n, 3 * d, d + h * dk, dk);
        put_cols(&mut dqkv, &dv, n, 3 * d, 2 * d + h * dk, dk);
    }
    let dqkv = Tensor::from_parts(&[n, 3 * d], dqkv);
    let li = linear_backward(&cache.x, &p.qkv_w, &dqkv, want)?;
    if let Some(g) = grads {
        g.out_w.add_assign(lo.weight.as_ref().expect("requested"));
        g.out_b.add_assign(lo.bias.as_ref().expect("requested"));
        g.qkv_w.add_assign(li.weight.as_ref().expect("requested"));
        g.qkv_b.add_assign(li.bias.as_ref().expect("requested"));
    }
    Ok(li.input)
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
}
impl_parameters!(PatchEmbed { proj_w, proj_b, cls, pos });

impl PatchEmbed {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let pdim = cfg.patch_size * cfg.patch_size * 3;
        let d = cfg.embed_dim;
        Self {
            proj_w: Tensor::randn(&[pdim, d], 1.0 / (pdim as f64).sqrt(), rng),
            proj_b: Tensor::zeros(&[d]),
            cls: Tensor::randn(&[d], 0.02, rng),
            pos: Tensor::randn(&[cfg.tokens(), d], 0.02, rng),
        }
    }
}

/// Flatten non-overlapping P×P patches of an H×W×3 image, patch-major in
/// raster order, each as `(py, px, c)`.
pub fn patchify(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    expect_dim("image height", cfg.image_size, h)?;
    expect_dim("image width", cfg.image_size, w)?;
    expect_dim("image channels", 3, c)?;
    let p = cfg.patch_size;
    let g = cfg.grid();
    let pdim = p * p * 3;
    let mut out = Vec::with_capacity(g * g * pdim);
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..p {
                let row = (gy * p + py) * w + gx * p;
                out.extend_from_slice(&image.data()[row * 3..(row + p) * 3]);
            }
        }
    }
    Ok(Tensor::from_parts(&[g * g, pdim], out))
}

fn embed_patches(patches: &Tensor, e: &PatchEmbed) -> Result<Tensor> {
    let proj = linear(patches, &e.proj_w, Some(&e.proj_b))?;
    let (np, d) = proj.rc()?;
    expect_dim("positional rows", np + 1, e.pos.shape()[0])?;
    let mut tokens = Vec::with_capacity((np + 1) * d);
    tokens.extend(e.cls.data().iter().zip(&e.pos.data()[..d]).map(|(a, b)| a + b));
    tokens.extend(proj.data().iter().zip(&e.pos.data()[d..]).map(|(a, b)| a + b));
    Ok(Tensor::from_parts(&[np + 1, d], tokens))
}

/// Class token plus `G²` projected patch tokens, with positional embeddings.
pub fn patch_embed(image: &Tensor, e: &PatchEmbed, cfg: &ModelConfig) -> Result<Tensor> {
    embed_patches(&patchify(image, cfg)?, e)
}

fn patch_embed_backward(patches: &Tensor, e: &PatchEmbed, grad_tokens: &Tensor, grads: &mut PatchEmbed) -> Result<()> {
    let d = e.cls.len();
    grads.pos.add_assign(grad_tokens);
    for (g, v) in grads.cls.data_mut().iter_mut().zip(&grad_tokens.data()[..d]) {
        *g += v;
    }
    let gp = grad_tokens.slice_rows(1, grad_tokens.shape()[0]);
    let lb = linear_backward(patches, &e.proj_w, &gp, true)?;
    grads.proj_w.add_assign(lb.weight.as_ref().expect("requested"));
    grads.proj_b.add_assign(lb.bias.as_ref().expect("requested"));
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub attn: Mhsa,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

impl Parameters for Block {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "ln1_g"), &self.ln1_g);
        f(join(prefix, "ln1_b"), &self.ln1_b);
        self.attn.visit(&join(prefix, "attn"), f);
        f(join(prefix, "ln2_g"), &self.ln2_g);
        f(join(prefix, "ln2_b"), &self.ln2_b);
        f(join(prefix, "fc1_w"), &self.fc1_w);
        f(join(prefix, "fc1_b"), &self.fc1_b);
        f(join(prefix, "fc2_w"), &self.fc2_w);
        f(join(prefix, "fc2_b"), &self.fc2_b);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "ln1_g"), &mut self.ln1_g);
        f(join(prefix, "ln1_b"), &mut self.ln1_b);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        f(join(prefix, "ln2_g"), &mut self.ln2_g);
        f(join(prefix, "ln2_b"), &mut self.ln2_b);
        f(join(prefix, "fc1_w"), &mut self.fc1_w);
        f(join(prefix, "fc1_b"), &mut self.fc1_b);
        f(join(prefix, "fc2_w"), &mut self.fc2_w);
        f(join(prefix, "fc2_b"), &mut self.fc2_b);
    }
}

impl Block {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let hidden = d * cfg.ffn_ratio;
        Self {
            ln1_g: Tensor::full(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            attn: Mhsa::init(d, rng),
            ln2_g: Tensor::full(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
            fc1_w: Tensor::randn(&[d, hidden], 1.0 / (d as f64).sqrt(), rng),
            fc1_b: Tensor::zeros(&[hidden]),
            fc2_w: Tensor::randn(&[hidden, d], 1.0 / (hidden as f64).sqrt(), rng),
            fc2_b: Tensor::zeros(&[d]),
        }
    }
}

pub struct BlockCache {
    ln1: LayerNormCache,
    pub attn: MhsaCache,
    ln2: LayerNormCache,
    h2: Tensor,
    fc1_pre: Tensor,
    fc1_act: Tensor,
    fsa: Option<FsaCache>,
}

/// `x ← x + MHSA(LN1(x))`, then `x ← x + FFN(LN2(x)) + FSA(LN2(x))`.
pub fn block_forward(
    b: &Block,
    adapter: Option<&FsaParams>,
    x: &Tensor,
    cfg: &ModelConfig,
) -> Result<(Tensor, BlockCache)> {
    let (h1, ln1) = layer_norm(x, &b.ln1_g, &b.ln1_b)?;
    let (a, attn) = mhsa_forward(&b.attn, &h1, cfg.heads)?;
    let x1 = x.add(&a)?;
    let (h2, ln2) = layer_norm(&x1, &b.ln2_g, &b.ln2_b)?;
    let fc1_pre = linear(&h2, &b.fc1_w, Some(&b.fc1_b))?;
    let fc1_act = gelu(&fc1_pre);
    let ffn = linear(&fc1_act, &b.fc2_w, Some(&b.fc2_b))?;
    let mut out = x1;
    out.add_assign(&ffn);
    let fsa = match adapter {
        Some(p) => {
            let (res, cache) = fsa::fsa_forward_cached(&h2, p, cfg, fsa::SpatialActivation::Gelu)?;
            out.add_assign(&res);
            Some(cache)
        }
        None => None,
    };
    Ok((
        out,
        BlockCache {
            ln1,
            attn,
            ln2,
            h2,
            fc1_pre,
            fc1_act,
            fsa,
        },
    ))
}

pub fn block_backward(
    b: &Block,
    adapter: Option<&FsaParams>,
    cache: &BlockCache,
    grad_out: &Tensor,
    mut grads: Option<&mut Block>,
    adapter_grads: Option<&mut FsaParams>,
) -> Result<Tensor> {
    let want = grads.is_some();
    let l2 = linear_backward(&cache.fc1_act, &b.fc2_w, grad_out, want)?;
    let g_pre = gelu_backward(&cache.fc1_pre, &l2.input);
    let l1 = linear_backward(&cache.h2, &b.fc1_w, &g_pre, want)?;
    let mut g_h2 = l1.input;
    if let (Some(p), Some(fc)) = (adapter, cache.fsa.as_ref()) {
        let mut scratch;
        let ag = match adapter_grads {
            Some(g) => g,
            None => {
                scratch = crate::params::zeros_like(p);
                &mut scratch
            }
        };
        g_h2.add_assign(&fsa::fsa_backward(p, fc, grad_out, ag)?);
    }
    let (g_x1_ln, g_ln2g, g_ln2b) = layer_norm_backward(&cache.ln2, &b.ln2_g, &g_h2);
    let mut g_x1 = grad_out.clone();
    g_x1.add_assign(&g_x1_ln);
    let g_h1 = mhsa_backward(&b.attn, &cache.attn, &g_x1, grads.as_deref_mut().map(|g| &mut g.attn))?;
    let (g_x_ln, g_ln1g, g_ln1b) = layer_norm_backward(&cache.ln1, &b.ln1_g, &g_h1);
    let mut g_x = g_x1;
    g_x.add_assign(&g_x_ln);
    if let Some(g) = grads {
        g.fc2_w.add_assign(l2.weight.as_ref().expect("requested"));
        g.fc2_b.add_assign(l2.bias.as_ref().expect("requested"));
        g.fc1_w.add_assign(l1.weight.as_ref().expect("requested"));
        g.fc1_b.add_assign(l1.bias.as_ref().expect("requested"));
        g.ln2_g.add_assign(&g_ln2g);
        g.ln2_b.add_assign(&g_ln2b);
        g.ln1_g.add_assign(&g_ln1g);
        g.ln1_b.add_assign(&g_ln1b);
    }
    Ok(g_x)
}

#[derive(Clone, Debug)]
pub struct VitParams {
    pub embed: PatchEmbed,
    pub blocks: Vec<Block>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
}

impl Parameters for VitParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.embed.visit(&join(prefix, "embed"), f);
        self.blocks.visit(&join(prefix, "blocks"), f);
        f(join(prefix, "norm_g"), &self.norm_g);
        f(join(prefix, "norm_b"), &self.norm_b);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
        f(join(prefix, "norm_g"), &mut self.norm_g);
        f(join(prefix, "norm_b"), &mut self.norm_b);
    }
}

impl VitParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Self {
            embed: PatchEmbed::init(cfg, rng),
            blocks: (0..cfg.depth).map(|_| Block::init(cfg, rng)).collect(),
            norm_g: Tensor::full(&[d], 1.0),
            norm_b: Tensor::zeros(&[d]),
        }
    }
}

pub struct VitCache {
    patches: Option<Tensor>,
    pub blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

fn check_adapters(vit: &VitParams, adapters: &[FsaParams]) -> Result<()> {
    if !adapters.is_empty() && adapters.len() != vit.blocks.len() {
        return Err(Error::Config(format!(
            "{} adapters for {} transformer blocks",
            adapters.len(),
            vit.blocks.len()
        )));
    }
    Ok(())
}

/// Run the transformer blocks on already-embedded tokens and return the
/// `G×G×D` patch-token map.
pub fn vit_forward_tokens(
    vit: &VitParams,
    adapters: &[FsaParams],
    tokens: &Tensor,
    cfg: &ModelConfig,
) -> Result<(Tensor, VitCache)> {
    check_adapters(vit, adapters)?;
    expect_dim("token count", cfg.tokens(), tokens.shape()[0])?;
    let mut x = tokens.clone();
    let mut caches = Vec::with_capacity(vit.blocks.len());
    for (i, b) in vit.blocks.iter().enumerate() {
        let (y, c) = block_forward(b, adapters.get(i), &x, cfg)?;
        x = y;
        caches.push(c);
    }
    let (normed, norm) = layer_norm(&x, &vit.norm_g, &vit.norm_b)?;
    let g = cfg.grid();
    let map = normed
        .slice_rows(1, cfg.tokens())
        .reshape(&[g, g, cfg.embed_dim])?;
    Ok((
        map,
        VitCache {
            patches: None,
            blocks: caches,
            norm,
        },
    ))
}

pub fn vit_forward(
    vit: &VitParams,
    adapters: &[FsaParams],
    image: &Tensor,
    cfg: &ModelConfig,
) -> Result<(Tensor, VitCache)> {
    let patches = patchify(image, cfg)?;
    let tokens = embed_patches(&patches, &vit.embed)?;
    let (map, mut cache) = vit_forward_tokens(vit, adapters, &tokens, cfg)?;
    cache.patches = Some(patches);
    Ok((map, cache))
}

/// Backward through the ViT branch. `vit_grads = None` freezes the backbone:
/// gradients still flow through it to the adapters but no backbone parameter
/// gradient is formed.
pub fn vit_backward(
    vit: &VitParams,
    adapters: &[FsaParams],
    cache: &VitCache,
    grad_map: &Tensor,
    mut vit_grads: Option<&mut VitParams>,
    mut adapter_grads: Option<&mut [FsaParams]>,
) -> Result<()> {
    let d = vit.norm_g.len();
    let n = grad_map.len() / d + 1;
    let mut g_norm = vec![0.0; n * d];
    g_norm[d..].copy_from_slice(grad_map.data());
    let g_norm = Tensor::from_parts(&[n, d], g_norm);
    let (mut g, gg, gb) = layer_norm_backward(&cache.norm, &vit.norm_g, &g_norm);
    if let Some(vg) = vit_grads.as_deref_mut() {
        vg.norm_g.add_assign(&gg);
        vg.norm_b.add_assign(&gb);
    }
    for i in (0..vit.blocks.len()).rev() {
        let bg = vit_grads.as_deref_mut().map(|vg| &mut vg.blocks[i]);
        let ag = adapter_grads.as_deref_mut().and_then(|a| a.get_mut(i));
        g = block_backward(&vit.blocks[i], adapters.get(i), &cache.blocks[i], &g, bg, ag)?;
    }
    if let (Some(vg), Some(patches)) = (vit_grads, cache.patches.as_ref()) {
        patch_embed_backward(patches, &vit.embed, &g, &mut vg.embed)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_attention_returns_value() {
        let q = Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap();
        let k = Tensor::new(&[1, 2], vec![1.1, 2.0]).unwrap();
        let v = Tensor::new(&[1, 3], vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let q = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let k = Tensor::from_fn(&[4, 3], |i| [0.2, -0.4, 0.9][i % 3]);
        let v = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let out = attention(&q, &k, &v).unwrap();
        for c in 0..2 {
            let mean = (0..4).map(|r| v.data()[r * 2 + c]).sum::<f64>() / 4.0;
            for r in 0..4 {
                assert!((out.data()[r * 2 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn three_token_case_matches_hand_softmax() {
        let q = Tensor::new(&[3, 2], vec![0.5, -1.0, 1.5, 0.25, -0.75, 2.0]).unwrap();
        let k = Tensor::new(&[3, 2], vec![1.0, 0.0, -0.5, 1.0, 0.3, 0.3]).unwrap();
        let v = Tensor::new(&[3, 1], vec![1.0, 2.0, 4.0]).unwrap();
        let out = attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (q.data()[i * 2] * k.data()[j * 2] + q.data()[i * 2 + 1] * k.data()[j * 2 + 1]) / 2f64.sqrt())
                .collect();
            let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let z: f64 = e.iter().sum();
            let want = (e[0] * 1.0 + e[1] * 2.0 + e[2] * 4.0) / z;
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let q = Tensor::randn(&[5, 4], 3.0, &mut rng);
        let k = Tensor::randn(&[7, 4], 3.0, &mut rng);
        let a = attention_weights(&q, &k).unwrap();
        for row in a.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn toy_patch_embed_shapes() {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let e = PatchEmbed::init(&cfg, &mut rng);
        let img = Tensor::uniform(&[64, 64, 3], 0.0, 1.0, &mut rng);
        assert_eq!(patch_embed(&img, &e, &cfg).unwrap().shape(), &[65, 64]);
        let wrong = Tensor::zeros(&[32, 64, 3]);
        assert!(matches!(
            patch_embed(&wrong, &e, &cfg),
            Err(Error::ShapeMismatch { axis: "image height", .. })
        ));
    }

    #[test]
    fn zero_image_gives_positional_embeddings() {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let mut e = PatchEmbed::init(&cfg, &mut rng);
        e.proj_w.fill(0.0);
        let tokens = patch_embed(&Tensor::zeros(&[64, 64, 3]), &e, &cfg).unwrap();
        assert_eq!(tokens.slice_rows(1, 65), e.pos.slice_rows(1, 65));
    }

    #[test]
    fn adapter_count_checked() {
        let cfg = ModelConfig::micro();
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let vit = VitParams::init(&cfg, &mut rng);
        let one = vec![FsaParams::init(&cfg, &mut rng)];
        let img = Tensor::zeros(&[16, 16, 3]);
        assert!(matches!(vit_forward(&vit, &one, &img, &cfg), Err(Error::Config(_))));
    }
}
