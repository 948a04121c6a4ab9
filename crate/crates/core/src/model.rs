//! The assembled network: ViT stream with adapters, CNN stream with the
//! alignment upsampler, fusion, and the descriptor head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cnn::{align_backward, align_upsample, cnn_backward, cnn_forward, AlignCache, CnnCache, CnnParams};
use crate::config::{Architecture, Fusion, ModelConfig};
use crate::dfm::{dfm_backward, dfm_forward, DfmCache, DfmParams};
use crate::error::{Error, Result};
use crate::fsa::FsaParams;
use crate::head::{head_forward, Descriptor, HeadParams};
use crate::params::{join, Parameters};
use crate::tensor::Tensor;
use crate::vit::{patch_embed, vit_backward, vit_forward, vit_forward_tokens, VitCache, VitParams};

#[derive(Clone, Debug)]
pub struct Lgcn {
    pub cfg: ModelConfig,
    pub vit: VitParams,
    /// One adapter per block, or empty when adapters are disabled.
    pub fsa: Vec<FsaParams>,
    pub cnn: Option<CnnParams>,
    pub dfm: Option<DfmParams>,
    pub head: HeadParams,
}

impl Parameters for Lgcn {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.vit.visit(&join(prefix, "vit"), f);
        self.fsa.visit(&join(prefix, "fsa"), f);
        self.cnn.visit(&join(prefix, "cnn"), f);
        self.dfm.visit(&join(prefix, "dfm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.vit.visit_mut(&join(prefix, "vit"), f);
        self.fsa.visit_mut(&join(prefix, "fsa"), f);
        self.cnn.visit_mut(&join(prefix, "cnn"), f);
        self.dfm.visit_mut(&join(prefix, "dfm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Parameters that stay fixed when the backbone is frozen: the transformer
/// and the CNN stages (the alignment conv trains).
pub fn is_backbone(name: &str) -> bool {
    name.starts_with("vit.") || name.starts_with("cnn.stages.")
}

/// Intermediate maps of one image, for heatmaps and diagnostics.
pub struct Streams {
    pub f_vit: Tensor,
    pub f_res: Option<Tensor>,
    pub f_res_aligned: Option<Tensor>,
    pub omega: Option<Tensor>,
    pub fused: Tensor,
}

/// Precomputed frozen inputs of one training image.
#[derive(Clone, Debug)]
pub enum Stem {
    /// Nothing frozen: run everything from pixels.
    Image(Tensor),
    Frozen {
        /// Embedded tokens when adapters still modify the transformer,
        /// otherwise the final `F_ViT` map.
        vit: FrozenVit,
        f_res: Option<Tensor>,
    },
}

#[derive(Clone, Debug)]
pub enum FrozenVit {
    Tokens(Tensor),
    Map(Tensor),
}

pub struct ImageCache {
    vit: Option<VitCache>,
    cnn: Option<CnnCache>,
    align: Option<AlignCache>,
    dfm: Option<DfmCache>,
    frozen: bool,
}

impl Lgcn {
    /// Seeded initialisation. All randomness flows from `seed` in a fixed order.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vit = VitParams::init(&cfg, &mut rng);
        let cnn = cfg.arch.cnn_stream.then(|| CnnParams::init(&cfg, &mut rng));
        let fsa = if cfg.arch.fsa {
            (0..cfg.depth).map(|_| FsaParams::init(&cfg, &mut rng)).collect()
        } else {
            Vec::new()
        };
        let dfm = cfg.arch.uses_dfm().then(|| DfmParams::init(&cfg, &mut rng));
        let head = HeadParams::init(&cfg, &mut rng);
        Ok(Self {
            cfg,
            vit,
            fsa,
            cnn,
            dfm,
            head,
        })
    }

    /// Switches off components at evaluation time. Parameters of disabled
    /// components are dropped; enabling a component the model was not built
    /// with, or changing the fused width, is an error.
    pub fn with_arch(mut self, arch: Architecture) -> Result<Self> {
        let old = self.cfg.arch;
        if arch.fsa && self.fsa.is_empty() {
            return Err(Error::Config("model has no adapters to enable".into()));
        }
        if arch.cnn_stream && self.cnn.is_none() {
            return Err(Error::Config("model has no CNN stream to enable".into()));
        }
        if arch.uses_dfm() && self.dfm.is_none() {
            return Err(Error::Config("model has no fusion gate to enable".into()));
        }
        let mut cfg = self.cfg.clone();
        cfg.arch = arch;
        if cfg.fused_dim() != self.cfg.fused_dim() {
            return Err(Error::Config(format!(
                "architecture change alters the fused width ({} -> {})",
                self.cfg.fused_dim(),
                cfg.fused_dim()
            )));
        }
        if !arch.fsa {
            self.fsa.clear();
        }
        if !arch.cnn_stream {
            self.cnn = None;
        }
        if !arch.uses_dfm() {
            self.dfm = None;
        }
        log::debug!("architecture {old:?} -> {arch:?}");
        self.cfg = cfg;
        Ok(self)
    }

    fn fuse(&self, f_vit: &Tensor, f_res: Option<&Tensor>) -> Result<(Tensor, Option<DfmCache>)> {
        let Some(f_res) = f_res else {
            return Ok((f_vit.clone(), None));
        };
        match self.cfg.arch.fusion {
            Fusion::Dfm => {
                let p = self.dfm.as_ref().ok_or_else(|| Error::Config("fusion gate missing".into()))?;
                let (out, cache) = dfm_forward(f_vit, f_res, p, self.cfg.arch.dfm_mode)?;
                Ok((out, Some(cache)))
            }
            Fusion::Sum => Ok((f_vit.add(f_res)?, None)),
            Fusion::Concat => Ok((Tensor::concat_channels(f_vit, f_res)?, None)),
        }
    }

    pub fn streams(&self, image: &Tensor) -> Result<Streams> {
        let (f_vit, _) = vit_forward(&self.vit, &self.fsa, image, &self.cfg)?;
        let (f_res, f_res_aligned) = match &self.cnn {
            Some(c) => {
                let (r, _) = cnn_forward(image, c, &self.cfg)?;
                let (a, _) = align_upsample(&r, &c.align, &self.cfg)?;
                (Some(r), Some(a))
            }
            None => (None, None),
        };
        let (fused, dfm) = self.fuse(&f_vit, f_res_aligned.as_ref())?;
        Ok(Streams {
            f_vit,
            f_res,
            f_res_aligned,
            omega: dfm.map(|c| c.omega().clone()),
            fused,
        })
    }

    /// Inference descriptor. The head runs on this image alone, so the
    /// result never depends on what else is being described.
    pub fn describe(&self, image: &Tensor) -> Result<Descriptor> {
        let s = self.streams(image)?;
        let (mut d, _) = head_forward(std::slice::from_ref(&s.fused), &self.head, &self.cfg)?;
        Ok(Descriptor::from_unit(d.remove(0).into_data()))
    }

    /// Describes images in parallel on the current rayon pool; output order
    /// follows input order.
    pub fn describe_all(&self, images: &[Tensor]) -> Result<Vec<Descriptor>> {
        images.par_iter().map(|im| self.describe(im)).collect()
    }

    /// Computes the frozen part of the forward pass once per image.
    pub fn stem(&self, image: &Tensor, freeze_backbone: bool) -> Result<Stem> {
        if !freeze_backbone {
            return Ok(Stem::Image(image.clone()));
        }
        let vit = if self.fsa.is_empty() {
            FrozenVit::Map(vit_forward(&self.vit, &[], image, &self.cfg)?.0)
        } else {
            FrozenVit::Tokens(patch_embed(image, &self.vit.embed, &self.cfg)?)
        };
        let f_res = match &self.cnn {
            Some(c) => Some(cnn_forward(image, c, &self.cfg)?.0),
            None => None,
        };
        Ok(Stem::Frozen { vit, f_res })
    }

    /// Training forward from a stem to the fused map.
    pub fn forward_stem(&self, stem: &Stem) -> Result<(Tensor, ImageCache)> {
        let (f_vit, vit_cache, f_res, cnn_cache) = match stem {
            Stem::Image(image) => {
                let (v, vc) = vit_forward(&self.vit, &self.fsa, image, &self.cfg)?;
                let (r, rc) = match &self.cnn {
                    Some(c) => {
                        let (r, rc) = cnn_forward(image, c, &self.cfg)?;
                        (Some(r), Some(rc))
                    }
                    None => (None, None),
                };
                (v, Some(vc), r, rc)
            }
            Stem::Frozen { vit, f_res } => {
                let (v, vc) = match vit {
                    FrozenVit::Tokens(t) => {
                        let (v, vc) = vit_forward_tokens(&self.vit, &self.fsa, t, &self.cfg)?;
                        (v, Some(vc))
                    }
                    FrozenVit::Map(m) => (m.clone(), None),
                };
                (v, vc, f_res.clone(), None)
            }
        };
        let (aligned, align_cache) = match (&self.cnn, &f_res) {
            (Some(c), Some(r)) => {
                let (a, ac) = align_upsample(r, &c.align, &self.cfg)?;
                (Some(a), Some(ac))
            }
            _ => (None, None),
        };
        let (fused, dfm) = self.fuse(&f_vit, aligned.as_ref())?;
        Ok((
            fused,
            ImageCache {
                vit: vit_cache,
                cnn: cnn_cache,
                align: align_cache,
                dfm,
                frozen: matches!(stem, Stem::Frozen { .. }),
            },
        ))
    }

    /// Backward from the fused map; accumulates into `grads` (same layout as
    /// `self`). Backbone gradients are formed only when the cache came from
    /// an unfrozen stem.
    pub fn backward_stem(&self, cache: &ImageCache, grad_fused: &Tensor, grads: &mut Lgcn) -> Result<()> {
        let d = self.cfg.embed_dim;
        let (g_vit, g_res) = match (&cache.align, self.cfg.arch.fusion) {
            (None, _) => (grad_fused.clone(), None),
            (Some(_), Fusion::Dfm) => {
                let dc = cache.dfm.as_ref().expect("fusion cache present");
                let p = self.dfm.as_ref().expect("fusion gate present");
                let gd = grads.dfm.as_mut().expect("fusion gate gradients present");
                let (a, b) = dfm_backward(p, dc, grad_fused, gd)?;
                (a, Some(b))
            }
            (Some(_), Fusion::Sum) => (grad_fused.clone(), Some(grad_fused.clone())),
            (Some(_), Fusion::Concat) => {
                let (a, b) = grad_fused.split_channels(d)?;
                (a, Some(b))
            }
        };
        if let (Some(ac), Some(g_res), Some(c)) = (&cache.align, g_res, &self.cnn) {
            let gc = grads.cnn.as_mut().expect("cnn gradients present");
            let g_f = align_backward(&c.align, ac, &g_res, Some(&mut gc.align))?;
            if let Some(cc) = &cache.cnn {
                cnn_backward(c, cc, &g_f, gc)?;
            }
        }
        if let Some(vc) = &cache.vit {
            let vit_grads = if cache.frozen { None } else { Some(&mut grads.vit) };
            let adapter_grads = if grads.fsa.is_empty() { None } else { Some(&mut grads.fsa[..]) };
            vit_backward(&self.vit, &self.fsa, vc, &g_vit, vit_grads, adapter_grads)?;
        }
        Ok(())
    }
}
