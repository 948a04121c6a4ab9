//! Finite-difference checks of every backward pass, grouped by module.
//!
//! Each check contracts the op's output with a fixed random tensor `c`, so
//! the scalar loss is `Σ c ⊙ out` and the upstream gradient is `c`. All
//! checks run on the micro configuration in double precision.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cnn::{align_backward, align_upsample, cnn_backward, cnn_forward, CnnParams};
use crate::config::{Architecture, DfmMode, ModelConfig};
use crate::dfm::{dfm_backward, dfm_forward, DfmParams};
use crate::error::{Error, Result};
use crate::fsa::{fsa_backward, fsa_forward, fsa_forward_cached, frequency_branch, frequency_branch_backward, FsaParams, SpatialActivation};
use crate::head::{
    cross_image_correlate, cross_image_correlate_backward, head_backward, head_forward, regional_pool,
    regional_pool_backward, HeadParams,
};
use crate::model::{is_backbone, Lgcn};
use crate::params::{assign, named, tensors, zeros_like, Parameters};
use crate::tensor::*;
use crate::vit::{
    attention, block_backward, block_forward, mhsa_backward, mhsa_forward, vit_backward, vit_forward, Block, Mhsa,
    VitParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    All,
    Tensor,
    Vit,
    Fsa,
    Cnn,
    Dfm,
    Head,
    E2e,
}

impl Scope {
    pub const NAMES: [&'static str; 8] = ["all", "tensor", "vit", "fsa", "cnn", "dfm", "head", "e2e"];
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Scope::All,
            "tensor" => Scope::Tensor,
            "vit" => Scope::Vit,
            "fsa" => Scope::Fsa,
            "cnn" => Scope::Cnn,
            "dfm" => Scope::Dfm,
            "head" => Scope::Head,
            "e2e" => Scope::E2e,
            other => {
                return Err(Error::Config(format!(
                    "unknown gradcheck scope {other:?}; expected one of {}",
                    Scope::NAMES.join(", ")
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub check: GradCheckOptions,
    /// Doubles every analytic gradient; every check must then fail.
    pub inject_bug: bool,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            check: GradCheckOptions::default(),
            inject_bug: false,
            seed: 1234,
        }
    }
}

struct Ctx {
    rng: ChaCha8Rng,
    opts: SuiteOptions,
    out: Vec<GradCheckReport>,
}

impl Ctx {
    fn randn(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut self.rng)
    }

    /// Random values kept at least 0.05 away from zero, to stay clear of kinks.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor {
        self.randn(shape).map(|v| v + 0.05f64.copysign(v))
    }

    fn check(
        &mut self,
        op: &str,
        params: Vec<(String, Tensor)>,
        mut analytic: Vec<Tensor>,
        f: impl FnMut(&[Tensor]) -> f64,
    ) {
        if self.opts.inject_bug {
            analytic = analytic.iter().map(|t| t.scale(2.0)).collect();
        }
        let report = grad_check(op, &params, &analytic, f, self.opts.check);
        log::info!("{op}: max rel error {:.3e}", report.max_rel_error);
        self.out.push(report);
    }
}

fn p(name: &str, t: &Tensor) -> (String, Tensor) {
    (name.to_string(), t.clone())
}

fn rebuild<P: Parameters + Clone>(template: &P, values: &[Tensor]) -> P {
    let mut q = template.clone();
    assign(&mut q, values);
    q
}

fn grads_of<P: Parameters>(g: &P) -> Vec<Tensor> {
    tensors(g).into_iter().cloned().collect()
}

fn live_adapter(cfg: &ModelConfig, ctx: &mut Ctx) -> FsaParams {
    let mut a = FsaParams::init(cfg, &mut ctx.rng);
    a.fuse_w = Tensor::randn(a.fuse_w.shape(), 0.5, &mut ctx.rng);
    a.fuse_b = Tensor::randn(a.fuse_b.shape(), 0.1, &mut ctx.rng);
    a.down_b = Tensor::randn(a.down_b.shape(), 0.1, &mut ctx.rng);
    a.log_gain = Tensor::randn(a.log_gain.shape(), 0.3, &mut ctx.rng);
    a.scale = Tensor::scalar(0.7);
    a
}

fn live_mhsa(dim: usize, ctx: &mut Ctx) -> Mhsa {
    let mut m = Mhsa::init(dim, &mut ctx.rng);
    m.qkv_b = Tensor::randn(m.qkv_b.shape(), 0.1, &mut ctx.rng);
    m.out_b = Tensor::randn(m.out_b.shape(), 0.1, &mut ctx.rng);
    m
}

fn live_model(cfg: ModelConfig, ctx: &mut Ctx) -> Lgcn {
    let mut m = Lgcn::new(cfg.clone(), ctx.rng.random_range(0..u64::MAX / 2)).expect("valid micro config");
    for a in m.fsa.iter_mut() {
        *a = live_adapter(&cfg, ctx);
    }
    m.head.attn = live_mhsa(cfg.fused_dim(), ctx);
    if let Some(d) = m.dfm.as_mut() {
        d.b1 = Tensor::randn(d.b1.shape(), 0.2, &mut ctx.rng);
        d.alpha1 = Tensor::scalar(1.1);
        d.alpha2 = Tensor::scalar(0.9);
    }
    m
}

pub fn run(scope: Scope, opts: SuiteOptions) -> Vec<GradCheckReport> {
    let mut ctx = Ctx {
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        opts,
        out: Vec::new(),
    };
    let all = scope == Scope::All;
    if all || scope == Scope::Tensor {
        tensor_checks(&mut ctx);
    }
    if all || scope == Scope::Vit {
        vit_checks(&mut ctx);
    }
    if all || scope == Scope::Fsa {
        fsa_checks(&mut ctx);
    }
    if all || scope == Scope::Cnn {
        cnn_checks(&mut ctx);
    }
    if all || scope == Scope::Dfm {
        dfm_checks(&mut ctx);
    }
    if all || scope == Scope::Head {
        head_checks(&mut ctx);
    }
    if all || scope == Scope::E2e {
        e2e_checks(&mut ctx);
    }
    ctx.out
}

fn tensor_checks(ctx: &mut Ctx) {
    // linear
    let (x, w, b) = (ctx.randn(&[5, 4]), ctx.randn(&[4, 3]), ctx.randn(&[3]));
    let c = ctx.randn(&[5, 3]);
    let g = linear_backward(&x, &w, &c, true).unwrap();
    let cc = c.clone();
    ctx.check(
        "linear",
        vec![p("x", &x), p("w", &w), p("b", &b)],
        vec![g.input, g.weight.unwrap(), g.bias.unwrap()],
        move |t| linear(&t[0], &t[1], Some(&t[2])).unwrap().dot(&cc),
    );

    // layer norm
    let (x, gm, bt) = (ctx.randn(&[4, 6]), ctx.randn(&[6]), ctx.randn(&[6]));
    let c = ctx.randn(&[4, 6]);
    let (_, cache) = layer_norm(&x, &gm, &bt).unwrap();
    let (gx, gg, gb) = layer_norm_backward(&cache, &gm, &c);
    let cc = c.clone();
    ctx.check(
        "layer_norm",
        vec![p("x", &x), p("gamma", &gm), p("beta", &bt)],
        vec![gx, gg, gb],
        move |t| layer_norm(&t[0], &t[1], &t[2]).unwrap().0.dot(&cc),
    );

    // pointwise activations
    type Fwd = fn(&Tensor) -> Tensor;
    let acts: [(&str, Fwd, fn(&Tensor, &Tensor, &Tensor) -> Tensor); 4] = [
        ("relu", relu, |x, _, g| relu_backward(x, g)),
        ("gelu", gelu, |x, _, g| gelu_backward(x, g)),
        ("sigmoid", sigmoid, |_, y, g| sigmoid_backward(y, g)),
        ("softplus", softplus, |x, _, g| softplus_backward(x, g)),
    ];
    for (name, fwd, bwd) in acts {
        let x = ctx.off_zero(&[3, 5]);
        let c = ctx.randn(&[3, 5]);
        let gx = bwd(&x, &fwd(&x), &c);
        let cc = c.clone();
        ctx.check(name, vec![p("x", &x)], vec![gx], move |t| fwd(&t[0]).dot(&cc));
    }

    // softmax along the last axis
    let x = ctx.randn(&[3, 5]);
    let c = ctx.randn(&[3, 5]);
    let gx = softmax_backward(&softmax(&x), &c).unwrap();
    let cc = c.clone();
    ctx.check("softmax", vec![p("x", &x)], vec![gx], move |t| softmax(&t[0]).dot(&cc));

    // elementwise add and multiply
    let (a, b) = (ctx.randn(&[2, 3, 2]), ctx.randn(&[2, 3, 2]));
    let c = ctx.randn(&[2, 3, 2]);
    let cc = c.clone();
    ctx.check("add", vec![p("a", &a), p("b", &b)], vec![c.clone(), c.clone()], move |t| {
        t[0].add(&t[1]).unwrap().dot(&cc)
    });
    let cc = c.clone();
    ctx.check(
        "mul",
        vec![p("a", &a), p("b", &b)],
        vec![c.mul(&b).unwrap(), c.mul(&a).unwrap()],
        move |t| t[0].mul(&t[1]).unwrap().dot(&cc),
    );

    // l2 normalisation
    let x = ctx.randn(&[7]);
    let c = ctx.randn(&[7]);
    let (y, n) = l2_normalize(&x).unwrap();
    let gx = l2_normalize_backward(&y, n, &c);
    let cc = c.clone();
    ctx.check("l2_normalize", vec![p("x", &x)], vec![gx], move |t| l2_normalize(&t[0]).unwrap().0.dot(&cc));

    // convolutions
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let (x, k, b) = (ctx.randn(&[6, 5, 2]), ctx.randn(&[3, 2, 3, 3]), ctx.randn(&[3]));
        let out = conv2d(&x, &k, Some(&b), stride, pad).unwrap();
        let c = ctx.randn(out.shape());
        let g = conv2d_backward(&x, &k, stride, pad, &c, true).unwrap();
        let cc = c.clone();
        ctx.check(
            &format!("conv2d[s{stride}p{pad}]"),
            vec![p("x", &x), p("kernel", &k), p("bias", &b)],
            vec![g.input, g.kernel.unwrap(), g.bias.unwrap()],
            move |t| conv2d(&t[0], &t[1], Some(&t[2]), stride, pad).unwrap().dot(&cc),
        );
    }
    let (x, k) = (ctx.randn(&[5, 4, 3]), ctx.randn(&[3, 3, 3]));
    let c = ctx.randn(&[5, 4, 3]);
    let (gx, gk) = depthwise_conv2d_backward(&x, &k, 1, &c).unwrap();
    let cc = c.clone();
    ctx.check("depthwise_conv2d", vec![p("x", &x), p("kernel", &k)], vec![gx, gk], move |t| {
        depthwise_conv2d(&t[0], &t[1], 1).unwrap().dot(&cc)
    });

    // resampling and pooling
    for (oh, ow) in [(7, 5), (2, 3)] {
        let x = ctx.randn(&[4, 3, 2]);
        let c = ctx.randn(&[oh, ow, 2]);
        let gx = bilinear_resize_backward(x.shape(), &c).unwrap();
        let cc = c.clone();
        ctx.check(&format!("bilinear_resize[{oh}x{ow}]"), vec![p("x", &x)], vec![gx], move |t| {
            bilinear_resize(&t[0], oh, ow).unwrap().dot(&cc)
        });
    }
    let x = ctx.randn(&[4, 6, 2]);
    let c = ctx.randn(&[2, 3, 2]);
    let gx = avg_pool_backward(x.shape(), 2, &c);
    let cc = c.clone();
    ctx.check("avg_pool", vec![p("x", &x)], vec![gx], move |t| avg_pool(&t[0], 2).unwrap().dot(&cc));

    // spectral transforms
    let x = ctx.randn(&[4, 3, 2]);
    let (cr, ci) = (ctx.randn(&[4, 3, 2]), ctx.randn(&[4, 3, 2]));
    let gspec = ComplexGrid {
        shape: [4, 3, 2],
        re: cr.data().to_vec(),
        im: ci.data().to_vec(),
    };
    let gx = dft2d_backward(&gspec);
    let (a, b) = (cr.clone(), ci.clone());
    ctx.check("dft2d", vec![p("x", &x)], vec![gx], move |t| {
        let s = dft2d(&t[0]).unwrap();
        s.re.iter().zip(a.data()).map(|(u, v)| u * v).sum::<f64>()
            + s.im.iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>()
    });
    let (sr, si) = (ctx.randn(&[4, 3, 2]), ctx.randn(&[4, 3, 2]));
    let c = ctx.randn(&[4, 3, 2]);
    let g = idft2d_backward(&c).unwrap();
    let cc = c.clone();
    ctx.check(
        "idft2d",
        vec![p("re", &sr), p("im", &si)],
        vec![Tensor::new(&[4, 3, 2], g.re).unwrap(), Tensor::new(&[4, 3, 2], g.im).unwrap()],
        move |t| {
            let s = ComplexGrid {
                shape: [4, 3, 2],
                re: t[0].data().to_vec(),
                im: t[1].data().to_vec(),
            };
            idft2d(&s).dot(&cc)
        },
    );
}

fn vit_checks(ctx: &mut Ctx) {
    let cfg = ModelConfig::micro();
    let d = cfg.embed_dim;

    // scaled dot-product attention via a single-head MHSA with identity maps
    let (q, k, v) = (ctx.randn(&[4, 3]), ctx.randn(&[4, 3]), ctx.randn(&[4, 2]));
    let c = ctx.randn(&[4, 2]);
    let (gq, gk, gv) = crate::vit::attention_backward(&q, &k, &v, &c).unwrap();
    let cc = c.clone();
    ctx.check("attention", vec![p("q", &q), p("k", &k), p("v", &v)], vec![gq, gk, gv], move |t| {
        attention(&t[0], &t[1], &t[2]).unwrap().dot(&cc)
    });

    // multi-head self-attention
    let m = live_mhsa(d, ctx);
    let x = ctx.randn(&[5, d]);
    let c = ctx.randn(&[5, d]);
    let (_, cache) = mhsa_forward(&m, &x, cfg.heads).unwrap();
    let mut gm = zeros_like(&m);
    let gx = mhsa_backward(&m, &cache, &c, Some(&mut gm)).unwrap();
    let mut params = named(&m, "mhsa");
    params.push(p("x", &x));
    let mut analytic = grads_of(&gm);
    analytic.push(gx);
    let n = analytic.len() - 1;
    let (cc, heads) = (c.clone(), cfg.heads);
    ctx.check("mhsa", params, analytic, move |t| {
        mhsa_forward(&rebuild(&m, &t[..n]), &t[n], heads).unwrap().0.dot(&cc)
    });

    // one transformer block with its adapter
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.rng.random());
    let mut b = Block::init(&cfg, &mut rng);
    b.ln1_g = Tensor::randn(b.ln1_g.shape(), 0.1, &mut rng).map(|v| v + 1.0);
    b.fc1_b = Tensor::randn(b.fc1_b.shape(), 0.1, &mut rng);
    b.attn = live_mhsa(d, ctx);
    let a = live_adapter(&cfg, ctx);
    let x = ctx.randn(&[cfg.tokens(), d]);
    let c = ctx.randn(&[cfg.tokens(), d]);
    let (_, cache) = block_forward(&b, Some(&a), &x, &cfg).unwrap();
    let (mut gb, mut ga) = (zeros_like(&b), zeros_like(&a));
    let gx = block_backward(&b, Some(&a), &cache, &c, Some(&mut gb), Some(&mut ga)).unwrap();
    let mut params = named(&b, "block");
    params.extend(named(&a, "block.fsa"));
    params.push(p("x", &x));
    let mut analytic = grads_of(&gb);
    analytic.extend(grads_of(&ga));
    analytic.push(gx);
    let (nb, na) = (tensors(&b).len(), tensors(&a).len());
    let cc = c.clone();
    let cfg2 = cfg.clone();
    ctx.check("vit_block+fsa", params, analytic, move |t| {
        let bb = rebuild(&b, &t[..nb]);
        let aa = rebuild(&a, &t[nb..nb + na]);
        block_forward(&bb, Some(&aa), &t[nb + na], &cfg2).unwrap().0.dot(&cc)
    });

    // the whole two-block transformer with adapters, from pixels
    let vit = VitParams::init(&cfg, &mut ctx.rng);
    let adapters: Vec<FsaParams> = (0..cfg.depth).map(|_| live_adapter(&cfg, ctx)).collect();
    let image = Tensor::uniform(&[cfg.image_size, cfg.image_size, 3], 0.0, 1.0, &mut ctx.rng);
    let g = cfg.grid();
    let c = ctx.randn(&[g, g, d]);
    let (_, cache) = vit_forward(&vit, &adapters, &image, &cfg).unwrap();
    let (mut gv, mut gad) = (zeros_like(&vit), zeros_like(&adapters));
    vit_backward(&vit, &adapters, &cache, &c, Some(&mut gv), Some(&mut gad[..])).unwrap();
    let mut params = named(&vit, "vit");
    params.extend(named(&adapters, "fsa"));
    let mut analytic = grads_of(&gv);
    analytic.extend(grads_of(&gad));
    let nv = tensors(&vit).len();
    let cc = c.clone();
    ctx.check("vit_forward", params, analytic, move |t| {
        let vv = rebuild(&vit, &t[..nv]);
        let aa = rebuild(&adapters, &t[nv..]);
        vit_forward(&vv, &aa, &image, &cfg).unwrap().0.dot(&cc)
    });
}

fn fsa_checks(ctx: &mut Ctx) {
    let cfg = ModelConfig::micro();
    let g = cfg.grid();

    // frequency branch alone: amplitude/phase decomposition and the gains
    let map = ctx.randn(&[g, g, 3]);
    let gains = ctx.randn(&[g, g, 3]).map(|v| (0.3 * v).exp());
    let c = ctx.randn(&[g, g, 3]);
    let (gm, gg) = frequency_branch_backward(&map, &gains, &c).unwrap();
    let cc = c.clone();
    ctx.check("fsa.frequency_branch", vec![p("map", &map), p("gains", &gains)], vec![gm, gg], move |t| {
        frequency_branch(&t[0], &t[1]).unwrap().dot(&cc)
    });

    // full adapter, both spatial activations
    for (label, act) in [("fsa_forward", SpatialActivation::Gelu), ("fsa_forward[linear]", SpatialActivation::Identity)] {
        let a = live_adapter(&cfg, ctx);
        let x = ctx.randn(&[cfg.tokens(), cfg.embed_dim]);
        let c = ctx.randn(&[cfg.tokens(), cfg.embed_dim]);
        let (_, cache) = fsa_forward_cached(&x, &a, &cfg, act).unwrap();
        let mut ga = zeros_like(&a);
        let gx = fsa_backward(&a, &cache, &c, &mut ga).unwrap();
        let mut params = named(&a, "fsa");
        params.push(p("tokens", &x));
        let mut analytic = grads_of(&ga);
        analytic.push(gx);
        let n = analytic.len() - 1;
        let (cc, cfg2) = (c.clone(), cfg.clone());
        ctx.check(label, params, analytic, move |t| {
            let aa = rebuild(&a, &t[..n]);
            fsa_forward_cached(&t[n], &aa, &cfg2, act).unwrap().0.dot(&cc)
        });
    }
    // keep the convenience wrapper honest
    let a = live_adapter(&cfg, ctx);
    let x = ctx.randn(&[cfg.tokens(), cfg.embed_dim]);
    debug_assert_eq!(
        fsa_forward(&x, &a, &cfg).unwrap(),
        fsa_forward_cached(&x, &a, &cfg, SpatialActivation::Gelu).unwrap().0
    );
}

fn cnn_checks(ctx: &mut Ctx) {
    let cfg = ModelConfig::micro();
    let mut cnn = CnnParams::init(&cfg, &mut ctx.rng);
    for s in cnn.stages.iter_mut() {
        s.b = Tensor::randn(s.b.shape(), 0.1, &mut ctx.rng);
    }
    cnn.align.b = Tensor::randn(cnn.align.b.shape(), 0.1, &mut ctx.rng);
    let image = Tensor::uniform(&[cfg.image_size, cfg.image_size, 3], 0.0, 1.0, &mut ctx.rng);
    let g = cfg.grid();
    let c = ctx.randn(&[g, g, cfg.embed_dim]);

    // alignment upsampler on its own, including the input gradient
    let (f_res, ccache) = cnn_forward(&image, &cnn, &cfg).unwrap();
    let (_, acache) = align_upsample(&f_res, &cnn.align, &cfg).unwrap();
    let mut galign = zeros_like(&cnn.align);
    let g_f = align_backward(&cnn.align, &acache, &c, Some(&mut galign)).unwrap();
    let mut params = named(&cnn.align, "cnn.align");
    params.push(p("f_res", &f_res));
    let mut analytic = grads_of(&galign);
    analytic.push(g_f.clone());
    let (cc, cfg2, al) = (c.clone(), cfg.clone(), cnn.align.clone());
    ctx.check("align_upsample", params, analytic, move |t| {
        align_upsample(&t[2], &rebuild(&al, &t[..2]), &cfg2).unwrap().0.dot(&cc)
    });

    // stages then upsampler
    let mut gc = zeros_like(&cnn);
    gc.align = galign;
    cnn_backward(&cnn, &ccache, &g_f, &mut gc).unwrap();
    let (cc, cfg2) = (c.clone(), cfg.clone());
    let tmpl = cnn.clone();
    ctx.check("cnn_forward+align_upsample", named(&cnn, "cnn"), grads_of(&gc), move |t| {
        let q = rebuild(&tmpl, t);
        let (r, _) = cnn_forward(&image, &q, &cfg2).unwrap();
        align_upsample(&r, &q.align, &cfg2).unwrap().0.dot(&cc)
    });
}

fn dfm_checks(ctx: &mut Ctx) {
    let cfg = ModelConfig::micro();
    let g = cfg.grid();
    let d = cfg.embed_dim;
    for (label, mode) in [("dfm[paper-text]", DfmMode::PaperText), ("dfm[verbatim-eq5]", DfmMode::VerbatimEq5)] {
        let mut dp = DfmParams::init(&cfg, &mut ctx.rng);
        dp.b1 = Tensor::randn(dp.b1.shape(), 0.2, &mut ctx.rng);
        dp.b2 = Tensor::randn(dp.b2.shape(), 0.2, &mut ctx.rng);
        dp.alpha1 = Tensor::scalar(1.3);
        dp.alpha2 = Tensor::scalar(0.6);
        let (fv, fr) = (ctx.randn(&[g, g, d]), ctx.randn(&[g, g, d]));
        let c = ctx.randn(&[g, g, d]);
        let (_, cache) = dfm_forward(&fv, &fr, &dp, mode).unwrap();
        let mut gd = zeros_like(&dp);
        let (gv, gr) = dfm_backward(&dp, &cache, &c, &mut gd).unwrap();
        let mut params = named(&dp, "dfm");
        params.push(p("f_vit", &fv));
        params.push(p("f_res", &fr));
        let mut analytic = grads_of(&gd);
        analytic.push(gv);
        analytic.push(gr);
        let n = analytic.len() - 2;
        let cc = c.clone();
        ctx.check(label, params, analytic, move |t| {
            dfm_forward(&t[n], &t[n + 1], &rebuild(&dp, &t[..n]), mode).unwrap().0.dot(&cc)
        });
    }
}

fn head_checks(ctx: &mut Ctx) {
    let cfg = ModelConfig::micro();
    let g = cfg.grid();
    let d = cfg.embed_dim;

    let map = ctx.randn(&[g, g, d]);
    let c = ctx.randn(&[crate::head::REGIONS, d]);
    let (_, cache) = regional_pool(&map, cfg.gem_p).unwrap();
    let gm = regional_pool_backward(&cache, &c).unwrap();
    let (cc, gp) = (c.clone(), cfg.gem_p);
    ctx.check("regional_pool[gem]", vec![p("map", &map)], vec![gm], move |t| {
        regional_pool(&t[0], gp).unwrap().0.dot(&cc)
    });

    let mut hp = HeadParams::init(&cfg, &mut ctx.rng);
    hp.attn = live_mhsa(d, ctx);
    let x = ctx.randn(&[2 * crate::head::REGIONS, d]);
    let c = ctx.randn(x.shape());
    let (_, cache) = cross_image_correlate(&x, &hp, cfg.heads).unwrap();
    let mut gh = zeros_like(&hp);
    let gx = cross_image_correlate_backward(&hp, &cache, &c, Some(&mut gh)).unwrap();
    let mut params = named(&hp, "head");
    params.push(p("tokens", &x));
    let mut analytic = grads_of(&gh);
    analytic.push(gx);
    let n = analytic.len() - 1;
    let (cc, heads, tmpl) = (c.clone(), cfg.heads, hp.clone());
    ctx.check("cross_image_correlate", params, analytic, move |t| {
        cross_image_correlate(&t[n], &rebuild(&tmpl, &t[..n]), heads).unwrap().0.dot(&cc)
    });

    // pooling, batch attention and normalisation over a batch of two maps
    let maps = [ctx.randn(&[g, g, d]), ctx.randn(&[g, g, d])];
    let cs = [ctx.randn(&[cfg.descriptor_dim()]), ctx.randn(&[cfg.descriptor_dim()])];
    let (_, cache) = head_forward(&maps, &hp, &cfg).unwrap();
    let mut gh = zeros_like(&hp);
    let gmaps = head_backward(&hp, &cache, &cs, Some(&mut gh)).unwrap();
    let mut params = named(&hp, "head");
    params.push(p("map0", &maps[0]));
    params.push(p("map1", &maps[1]));
    let mut analytic = grads_of(&gh);
    analytic.extend(gmaps);
    let n = analytic.len() - 2;
    ctx.check("descriptor_head", params, analytic, move |t| {
        let (ds, _) = head_forward(&t[n..], &rebuild(&hp, &t[..n]), &cfg).unwrap();
        ds.iter().zip(&cs).map(|(a, b)| a.dot(b)).sum()
    });
}

fn e2e_loss(m: &Lgcn, images: &[Tensor], cs: &[Tensor], freeze: bool) -> Result<(f64, Lgcn)> {
    let mut fused = Vec::new();
    let mut caches = Vec::new();
    for im in images {
        let (f, c) = m.forward_stem(&m.stem(im, freeze)?)?;
        fused.push(f);
        caches.push(c);
    }
    let (ds, hc) = head_forward(&fused, &m.head, &m.cfg)?;
    let loss = ds.iter().zip(cs).map(|(a, b)| a.dot(b)).sum();
    let mut grads = zeros_like(m);
    let gmaps = head_backward(&m.head, &hc, cs, Some(&mut grads.head))?;
    for (c, gm) in caches.iter().zip(&gmaps) {
        m.backward_stem(c, gm, &mut grads)?;
    }
    Ok((loss, grads))
}

fn e2e_checks(ctx: &mut Ctx) {
    let base = ModelConfig::micro();
    let images: Vec<Tensor> = (0..2)
        .map(|_| Tensor::uniform(&[base.image_size, base.image_size, 3], 0.0, 1.0, &mut ctx.rng))
        .collect();
    let arches = [
        ("e2e[full]", Architecture::full(), false),
        ("e2e[full,frozen]", Architecture::full(), true),
        ("e2e[concat,frozen]", Architecture::cnn_stream_only(), true),
    ];
    for (label, arch, freeze) in arches {
        let m = live_model(base.clone().with_arch(arch), ctx);
        let cs: Vec<Tensor> = (0..2).map(|_| ctx.randn(&[m.cfg.descriptor_dim()])).collect();
        let (_, grads) = e2e_loss(&m, &images, &cs, freeze).unwrap();
        let all = named(&m, "");
        let gall = named(&grads, "");
        let keep: Vec<bool> = all.iter().map(|(n, _)| !(freeze && is_backbone(n))).collect();
        let params: Vec<_> = all.iter().zip(&keep).filter(|(_, &k)| k).map(|(x, _)| x.clone()).collect();
        let analytic: Vec<_> = gall.iter().zip(&keep).filter(|(_, &k)| k).map(|(x, _)| x.1.clone()).collect();
        let full: Vec<Tensor> = all.iter().map(|(_, t)| t.clone()).collect();
        let (imgs, tmpl) = (images.clone(), m.clone());
        ctx.check(label, params, analytic, move |t| {
            let mut vals = full.clone();
            let mut it = t.iter();
            for (v, &k) in vals.iter_mut().zip(&keep) {
                if k {
                    *v = it.next().unwrap().clone();
                }
            }
            let q = rebuild(&tmpl, &vals);
            e2e_loss(&q, &imgs, &cs, freeze).unwrap().0
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_parsing() {
        for n in Scope::NAMES {
            assert!(n.parse::<Scope>().is_ok());
        }
        assert!("nope".parse::<Scope>().is_err());
    }
}
