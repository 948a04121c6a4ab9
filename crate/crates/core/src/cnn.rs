//! Toy convolutional local-feature branch and the alignment upsampler that
//! brings `F_Res` to the ViT grid and width.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{expect_dim, Result};
use crate::params::{impl_parameters, join, Parameters};
use crate::tensor::{
    avg_pool, avg_pool_backward, bilinear_resize, bilinear_resize_backward, conv2d,
    conv2d_backward, relu, relu_backward, Tensor,
};

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub w: Tensor,
    pub b: Tensor,
}
impl_parameters!(ConvLayer { w, b });

impl ConvLayer {
    pub fn init<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = (cin * k * k) as f64;
        Self {
            w: Tensor::randn(&[cout, cin, k, k], gain / fan_in.sqrt(), rng),
            b: Tensor::zeros(&[cout]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CnnParams {
    /// Three stride-2 3×3 stages.
    pub stages: Vec<ConvLayer>,
    /// 3×3 convolution `C_res → D` inside the upsampler.
    pub align: ConvLayer,
}

impl Parameters for CnnParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.stages.visit(&join(prefix, "stages"), f);
        self.align.visit(&join(prefix, "align"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.stages.visit_mut(&join(prefix, "stages"), f);
        self.align.visit_mut(&join(prefix, "align"), f);
    }
}

impl CnnParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut cin = 3;
        let mut stages = Vec::with_capacity(3);
        for &cout in &cfg.cnn_channels {
            stages.push(ConvLayer::init(cin, cout, 3, 2f64.sqrt(), rng));
            cin = cout;
        }
        Self {
            stages,
            align: ConvLayer::init(cfg.cnn_res_channels(), cfg.embed_dim, 3, 1.0, rng),
        }
    }
}

pub struct CnnCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    pool_input_shape: Vec<usize>,
    pool: usize,
}

/// Three conv+ReLU stages and a final average pool: image → `G_res×G_res×C_res`.
pub fn cnn_forward(image: &Tensor, p: &CnnParams, cfg: &ModelConfig) -> Result<(Tensor, CnnCache)> {
    let (h, w, c) = image.hwc()?;
    expect_dim("image height", cfg.image_size, h)?;
    expect_dim("image width", cfg.image_size, w)?;
    expect_dim("image channels", 3, c)?;
    let mut x = image.clone();
    let mut inputs = Vec::with_capacity(p.stages.len());
    let mut pre = Vec::with_capacity(p.stages.len());
    for stage in &p.stages {
        let z = conv2d(&x, &stage.w, Some(&stage.b), 2, 1)?;
        inputs.push(std::mem::replace(&mut x, relu(&z)));
        pre.push(z);
    }
    let pool = cfg.cnn_pool();
    let pool_input_shape = x.shape().to_vec();
    let out = avg_pool(&x, pool)?;
    Ok((
        out,
        CnnCache {
            inputs,
            pre,
            pool_input_shape,
            pool,
        },
    ))
}

/// Accumulates stage gradients; the image gradient is not needed.
pub fn cnn_backward(p: &CnnParams, cache: &CnnCache, grad_out: &Tensor, grads: &mut CnnParams) -> Result<()> {
    let mut g = avg_pool_backward(&cache.pool_input_shape, cache.pool, grad_out);
    for i in (0..p.stages.len()).rev() {
        let gz = relu_backward(&cache.pre[i], &g);
        let cg = conv2d_backward(&cache.inputs[i], &p.stages[i].w, 2, 1, &gz, true)?;
        grads.stages[i].w.add_assign(cg.kernel.as_ref().expect("requested"));
        grads.stages[i].b.add_assign(cg.bias.as_ref().expect("requested"));
        g = cg.input;
    }
    Ok(())
}

pub struct AlignCache {
    input_shape: Vec<usize>,
    mid: Tensor,
    conv_shape: Vec<usize>,
}

impl AlignCache {
    /// Shapes seen on the way: input, after the first resize, after the conv.
    pub fn visited(&self) -> [&[usize]; 3] {
        [&self.input_shape, self.mid.shape(), &self.conv_shape]
    }
}

/// Bilinear to the intermediate side, 3×3 conv to `D` channels, bilinear to `G`.
pub fn align_upsample(f_res: &Tensor, align: &ConvLayer, cfg: &ModelConfig) -> Result<(Tensor, AlignCache)> {
    let (h, w, c) = f_res.hwc()?;
    expect_dim("F_Res height", cfg.cnn_grid, h)?;
    expect_dim("F_Res width", cfg.cnn_grid, w)?;
    expect_dim("F_Res channels", cfg.cnn_res_channels(), c)?;
    cfg.validate()?;
    let mid = bilinear_resize(f_res, cfg.align_mid, cfg.align_mid)?;
    let conv = conv2d(&mid, &align.w, Some(&align.b), 1, 1)?;
    let out = bilinear_resize(&conv, cfg.grid(), cfg.grid())?;
    Ok((
        out,
        AlignCache {
            input_shape: f_res.shape().to_vec(),
            conv_shape: conv.shape().to_vec(),
            mid,
        },
    ))
}

/// Intermediate shapes visited by the upsampler, for shape reporting.
pub fn align_trace(cfg: &ModelConfig) -> [[usize; 3]; 4] {
    let (m, g) = (cfg.align_mid, cfg.grid());
    let (cres, d) = (cfg.cnn_res_channels(), cfg.embed_dim);
    [[cfg.cnn_grid, cfg.cnn_grid, cres], [m, m, cres], [m, m, d], [g, g, d]]
}

pub fn align_backward(
    align: &ConvLayer,
    cache: &AlignCache,
    grad_out: &Tensor,
    grads: Option<&mut ConvLayer>,
) -> Result<Tensor> {
    let g_conv = bilinear_resize_backward(&cache.conv_shape, grad_out)?;
    let cg = conv2d_backward(&cache.mid, &align.w, 1, 1, &g_conv, grads.is_some())?;
    if let Some(g) = grads {
        g.w.add_assign(cg.kernel.as_ref().expect("requested"));
        g.b.add_assign(cg.bias.as_ref().expect("requested"));
    }
    bilinear_resize_backward(&cache.input_shape, &cg.input)
}
