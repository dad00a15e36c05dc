//! The asymmetric two-branch network: a (usually shared) encoder, a partial
//! decoder on the dominant branch only, image-level projectors on both
//! branches, and a pixel-level projector on the auxiliary branch. The
//! dominant branch consumes downsampled inputs so its decoder output aligns
//! spatially with the auxiliary encoder output.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::augment::{down_nchw, lambda_for_blocks, pool_factor};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{
    concat_channels, join, split_channels, Activation, Conv2d, Conv2dCache, GlobalAvgPool,
    InstanceNorm2d, InstanceNormCache, Linear, LinearCache, MaxPool2d, MaxPoolCache, Param,
    ParamModule, Upsample2x,
};
use crate::real::Real;
use crate::util::{derive_seed, rng_from};

/// Encoder shape contract: spatial halves after every level but the last,
/// channel width doubles per level up to a cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub channel_cap: usize,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return config_err("encoder needs at least 2 levels");
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return config_err("encoder channel counts must be positive");
        }
        if self.channel_cap < self.base_channels {
            return config_err("channel cap below base width");
        }
        Ok(())
    }

    /// Channel width of encoder level `i`.
    pub fn width(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.channel_cap)
    }

    pub fn out_channels(&self) -> usize {
        self.width(self.levels - 1)
    }

    /// Input spatial size must divide this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialDecoderSpec {
    pub blocks: usize,
    pub uses_skips: bool,
}

/// Normalization inside conv blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    None,
}

/// How the auxiliary branch's encoder relates to the dominant one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ConnectionMode {
    /// One parameter set serves both branches.
    Shared,
    /// Two encoders, independently initialized and trained.
    Independent,
    /// Auxiliary encoder is a momentum copy; no gradient flows into it.
    Ema { momentum: f64 },
}

/// Architecture knobs shared by pre-training and fine-tuning models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub channel_cap: usize,
    /// Partial decoder depth N; the downsample scale is 2^-N.
    pub decoder_blocks: usize,
    pub uses_skips: bool,
    /// Channels of the pixel-level projection space.
    pub pixel_channels: usize,
    /// Width of the image-level projection space.
    pub embed_dim: usize,
    pub activation: Activation,
    pub norm: NormKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 16,
            in_channels: 1,
            channel_cap: 512,
            decoder_blocks: 2,
            uses_skips: true,
            pixel_channels: 16,
            embed_dim: 128,
            activation: Activation::LeakyRelu,
            norm: NormKind::Instance,
        }
    }
}

impl ModelConfig {
    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            levels: self.levels,
            base_channels: self.base_channels,
            in_channels: self.in_channels,
            channel_cap: self.channel_cap,
        }
    }

    pub fn decoder_spec(&self) -> PartialDecoderSpec {
        PartialDecoderSpec {
            blocks: self.decoder_blocks,
            uses_skips: self.uses_skips,
        }
    }

    pub fn lambda(&self) -> f64 {
        lambda_for_blocks(self.decoder_blocks)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_spec().validate()?;
        if self.decoder_blocks > self.levels - 1 {
            return config_err(format!(
                "decoder blocks {} exceed levels - 1 = {}",
                self.decoder_blocks,
                self.levels - 1
            ));
        }
        if self.pixel_channels == 0 || self.embed_dim == 0 {
            return config_err("projection widths must be positive");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Conv block: (conv3x3 -> norm -> act) twice.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ConvBlock<F> {
    conv1: Conv2d<F>,
    norm1: Option<InstanceNorm2d<F>>,
    conv2: Conv2d<F>,
    norm2: Option<InstanceNorm2d<F>>,
    act: Activation,
}

#[derive(Debug)]
struct ConvBlockCache<F> {
    c1: Conv2dCache<F>,
    n1: Option<InstanceNormCache<F>>,
    m1: Array4<F>,
    c2: Conv2dCache<F>,
    n2: Option<InstanceNormCache<F>>,
    m2: Array4<F>,
}

impl<F: Real> ConvBlock<F> {
    fn new<R: rand::Rng>(
        in_c: usize,
        out_c: usize,
        act: Activation,
        norm: NormKind,
        rng: &mut R,
    ) -> Self {
        let mk_norm = |c: usize| match norm {
            NormKind::Instance => Some(InstanceNorm2d::new(c)),
            NormKind::None => None,
        };
        Self {
            conv1: Conv2d::new(in_c, out_c, 3, rng),
            norm1: mk_norm(out_c),
            conv2: Conv2d::new(out_c, out_c, 3, rng),
            norm2: mk_norm(out_c),
            act,
        }
    }

    fn forward(&self, x: &Array4<F>) -> Result<(Array4<F>, ConvBlockCache<F>)> {
        let (h1, c1) = self.conv1.forward(x)?;
        let (h1, n1) = match &self.norm1 {
            Some(n) => {
                let (y, c) = n.forward(&h1);
                (y, Some(c))
            }
            None => (h1, None),
        };
        let (h1, m1) = self.act.forward(&h1);
        let (h2, c2) = self.conv2.forward(&h1)?;
        let (h2, n2) = match &self.norm2 {
            Some(n) => {
                let (y, c) = n.forward(&h2);
                (y, Some(c))
            }
            None => (h2, None),
        };
        let (out, m2) = self.act.forward(&h2);
        Ok((out, ConvBlockCache { c1, n1, m1, c2, n2, m2 }))
    }

    fn backward(&mut self, cache: &ConvBlockCache<F>, grad_out: &Array4<F>) -> Array4<F> {
        let g = self.act.backward(&cache.m2, grad_out);
        let g = match (&mut self.norm2, &cache.n2) {
            (Some(n), Some(c)) => n.backward(c, &g),
            _ => g,
        };
        let g = self.conv2.backward(&cache.c2, &g);
        let g = self.act.backward(&cache.m1, &g);
        let g = match (&mut self.norm1, &cache.n1) {
            (Some(n), Some(c)) => n.backward(c, &g),
            _ => g,
        };
        self.conv1.backward(&cache.c1, &g)
    }
}

impl<F: Real> ParamModule<F> for ConvBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        if let Some(n) = &mut self.norm1 {
            n.visit_params(&join(prefix, "norm1"), f);
        }
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        if let Some(n) = &mut self.norm2 {
            n.visit_params(&join(prefix, "norm2"), f);
        }
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.conv1.visit_params_ref(&join(prefix, "conv1"), f);
        if let Some(n) = &self.norm1 {
            n.visit_params_ref(&join(prefix, "norm1"), f);
        }
        self.conv2.visit_params_ref(&join(prefix, "conv2"), f);
        if let Some(n) = &self.norm2 {
            n.visit_params_ref(&join(prefix, "norm2"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Encoder<F> {
    pub spec: EncoderSpec,
    blocks: Vec<ConvBlock<F>>,
    pool: MaxPool2d,
}

#[derive(Debug)]
pub struct EncoderCache<F> {
    block_caches: Vec<ConvBlockCache<F>>,
    pool_caches: Vec<MaxPoolCache>,
}

impl<F: Real> Encoder<F> {
    pub fn init(spec: EncoderSpec, act: Activation, norm: NormKind, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_from(seed);
        let mut blocks = Vec::with_capacity(spec.levels);
        for i in 0..spec.levels {
            let in_c = if i == 0 { spec.in_channels } else { spec.width(i - 1) };
            blocks.push(ConvBlock::new(in_c, spec.width(i), act, norm, &mut rng));
        }
        Ok(Self {
            spec,
            blocks,
            pool: MaxPool2d,
        })
    }

    /// Deepest feature map plus per-level skips (levels 0..L-2, pre-pool).
    pub fn forward(
        &self,
        x: &Array4<F>,
    ) -> Result<(Array4<F>, Vec<Array4<F>>, EncoderCache<F>)> {
        let (_, _, h, w) = x.dim();
        let div = self.spec.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return shape_err(format!(
                "encoder input {h}x{w} not divisible by 2^(L-1) = {div}"
            ));
        }
        let mut skips = Vec::with_capacity(self.spec.levels - 1);
        let mut block_caches = Vec::with_capacity(self.spec.levels);
        let mut pool_caches = Vec::with_capacity(self.spec.levels - 1);
        let mut h = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, cache) = block.forward(&h)?;
            block_caches.push(cache);
            if i + 1 < self.spec.levels {
                skips.push(out.clone());
                let (pooled, pc) = self.pool.forward(&out)?;
                pool_caches.push(pc);
                h = pooled;
            } else {
                h = out;
            }
        }
        Ok((h, skips, EncoderCache { block_caches, pool_caches }))
    }

    /// Backpropagate through the encoder. `d_skips[i]`, when given, is added
    /// to the gradient entering level i's pre-pool output.
    pub fn backward(
        &mut self,
        cache: &EncoderCache<F>,
        d_y: &Array4<F>,
        d_skips: Option<&[Option<Array4<F>>]>,
    ) -> Array4<F> {
        let levels = self.spec.levels;
        let mut g = d_y.clone();
        for i in (0..levels).rev() {
            if i + 1 < levels {
                g = self.pool.backward(&cache.pool_caches[i], &g);
                if let Some(ds) = d_skips {
                    if let Some(extra) = &ds[i] {
                        g += extra;
                    }
                }
            }
            g = self.blocks[i].backward(&cache.block_caches[i], &g);
        }
        g
    }
}

impl<F: Real> ParamModule<F> for Encoder<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("level{i}")), f);
        }
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params_ref(&join(prefix, &format!("level{i}")), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Decoder blocks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct UpBlock<F> {
    up: Upsample2x,
    block: ConvBlock<F>,
    skip_channels: usize,
}

#[derive(Debug)]
struct UpBlockCache<F> {
    block: ConvBlockCache<F>,
    up_channels: usize,
}

impl<F: Real> UpBlock<F> {
    fn new<R: rand::Rng>(
        in_c: usize,
        skip_c: usize,
        out_c: usize,
        act: Activation,
        norm: NormKind,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Upsample2x,
            block: ConvBlock::new(in_c + skip_c, out_c, act, norm, rng),
            skip_channels: skip_c,
        }
    }

    fn forward(
        &self,
        x: &Array4<F>,
        skip: Option<&Array4<F>>,
    ) -> Result<(Array4<F>, UpBlockCache<F>)> {
        let up = self.up.forward(x);
        let up_channels = up.dim().1;
        let merged = match skip {
            Some(s) => {
                if s.dim().2 != up.dim().2 || s.dim().3 != up.dim().3 {
                    return shape_err(format!(
                        "skip {}x{} does not match upsampled {}x{}",
                        s.dim().2,
                        s.dim().3,
                        up.dim().2,
                        up.dim().3
                    ));
                }
                concat_channels(&up, s)
            }
            None => up,
        };
        let (out, bc) = self.block.forward(&merged)?;
        Ok((out, UpBlockCache { block: bc, up_channels }))
    }

    /// Returns (input gradient, skip gradient if this block fuses one).
    fn backward(
        &mut self,
        cache: &UpBlockCache<F>,
        grad_out: &Array4<F>,
    ) -> (Array4<F>, Option<Array4<F>>) {
        let g_merged = self.block.backward(&cache.block, grad_out);
        let (g_up, g_skip) = if self.skip_channels > 0 {
            let (a, b) = split_channels(&g_merged, cache.up_channels);
            (a, Some(b))
        } else {
            (g_merged, None)
        };
        (self.up.backward(&g_up), g_skip)
    }
}

impl<F: Real> ParamModule<F> for UpBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.block.visit_params(prefix, f);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.block.visit_params_ref(prefix, f);
    }
}

/// The first N upsampling blocks of a U-Net decoder plus a pointwise map
/// into the pixel-projection space. With N = 0 the decoder degenerates to
/// the channel map alone.
#[derive(Debug, Clone)]
pub struct PartialDecoder<F> {
    pub spec: PartialDecoderSpec,
    encoder_spec: EncoderSpec,
    blocks: Vec<UpBlock<F>>,
    out_map: Conv2d<F>,
}

#[derive(Debug)]
pub struct PartialDecoderCache<F> {
    block_caches: Vec<UpBlockCache<F>>,
    out_cache: Conv2dCache<F>,
}

impl<F: Real> PartialDecoder<F> {
    pub fn init(
        encoder_spec: EncoderSpec,
        spec: PartialDecoderSpec,
        pixel_channels: usize,
        act: Activation,
        norm: NormKind,
        seed: u64,
    ) -> Result<Self> {
        if spec.blocks > encoder_spec.levels - 1 {
            return config_err(format!(
                "decoder blocks {} exceed levels - 1 = {}",
                spec.blocks,
                encoder_spec.levels - 1
            ));
        }
        let mut rng = rng_from(seed);
        let mut blocks = Vec::with_capacity(spec.blocks);
        for j in 0..spec.blocks {
            let in_c = encoder_spec.width(encoder_spec.levels - 1 - j);
            let out_level = encoder_spec.levels - 2 - j;
            let skip_c = if spec.uses_skips {
                encoder_spec.width(out_level)
            } else {
                0
            };
            blocks.push(UpBlock::new(
                in_c,
                skip_c,
                encoder_spec.width(out_level),
                act,
                norm,
                &mut rng,
            ));
        }
        let final_c = encoder_spec.width(encoder_spec.levels - 1 - spec.blocks);
        Ok(Self {
            spec,
            encoder_spec,
            blocks,
            out_map: Conv2d::new(final_c, pixel_channels, 1, &mut rng),
        })
    }

    pub fn forward(
        &self,
        y: &Array4<F>,
        skips: &[Array4<F>],
    ) -> Result<(Array4<F>, PartialDecoderCache<F>)> {
        if self.spec.uses_skips && self.spec.blocks > skips.len() {
            return shape_err(format!(
                "decoder needs {} skips, encoder provided {}",
                self.spec.blocks,
                skips.len()
            ));
        }
        let mut h = y.clone();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (j, block) in self.blocks.iter().enumerate() {
            let skip = if self.spec.uses_skips {
                Some(&skips[self.encoder_spec.levels - 2 - j])
            } else {
                None
            };
            let (out, cache) = block.forward(&h, skip)?;
            block_caches.push(cache);
            h = out;
        }
        let (zl, out_cache) = self.out_map.forward(&h)?;
        Ok((zl, PartialDecoderCache { block_caches, out_cache }))
    }

    /// Returns the gradient into Y and the per-encoder-level skip gradients.
    pub fn backward(
        &mut self,
        cache: &PartialDecoderCache<F>,
        grad_out: &Array4<F>,
    ) -> (Array4<F>, Vec<Option<Array4<F>>>) {
        let mut d_skips: Vec<Option<Array4<F>>> = vec![None; self.encoder_spec.levels - 1];
        let mut g = self.out_map.backward(&cache.out_cache, grad_out);
        for j in (0..self.blocks.len()).rev() {
            let (gi, gs) = self.blocks[j].backward(&cache.block_caches[j], &g);
            if let Some(gs) = gs {
                d_skips[self.encoder_spec.levels - 2 - j] = Some(gs);
            }
            g = gi;
        }
        (g, d_skips)
    }
}

impl<F: Real> ParamModule<F> for PartialDecoder<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (j, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("block{j}")), f);
        }
        self.out_map.visit_params(&join(prefix, "out_map"), f);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (j, b) in self.blocks.iter().enumerate() {
            b.visit_params_ref(&join(prefix, &format!("block{j}")), f);
        }
        self.out_map.visit_params_ref(&join(prefix, "out_map"), f);
    }
}

// ---------------------------------------------------------------------------
// Projectors
// ---------------------------------------------------------------------------

/// Image-level head: global average pool, then a two-layer perceptron.
/// Output is NOT normalized; cosine similarity normalizes inside the loss.
#[derive(Debug, Clone)]
pub struct ImageProjector<F> {
    gap: GlobalAvgPool,
    fc1: Linear<F>,
    fc2: Linear<F>,
    act: Activation,
}

#[derive(Debug)]
pub struct ImageProjectorCache<F> {
    hw: (usize, usize),
    l1: LinearCache<F>,
    mask: Array2<F>,
    l2: LinearCache<F>,
}

impl<F: Real> ImageProjector<F> {
    pub fn init(in_c: usize, embed_dim: usize, act: Activation, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        Self {
            gap: GlobalAvgPool,
            fc1: Linear::new(in_c, in_c, &mut rng),
            fc2: Linear::new(in_c, embed_dim, &mut rng),
            act,
        }
    }

    pub fn forward(&self, y: &Array4<F>) -> Result<(Array2<F>, ImageProjectorCache<F>)> {
        let (pooled, hw) = self.gap.forward(y);
        let (h, l1) = self.fc1.forward(&pooled)?;
        let (h, mask) = self.act.forward(&h);
        let (z, l2) = self.fc2.forward(&h)?;
        Ok((z, ImageProjectorCache { hw, l1, mask, l2 }))
    }

    pub fn backward(&mut self, cache: &ImageProjectorCache<F>, grad_out: &Array2<F>) -> Array4<F> {
        let g = self.fc2.backward(&cache.l2, grad_out);
        let g = self.act.backward(&cache.mask, &g);
        let g = self.fc1.backward(&cache.l1, &g);
        self.gap.backward(&g, cache.hw)
    }
}

impl<F: Real> ParamModule<F> for ImageProjector<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.fc1.visit_params_ref(&join(prefix, "fc1"), f);
        self.fc2.visit_params_ref(&join(prefix, "fc2"), f);
    }
}

/// Pixel-level head: two pointwise convolutions, spatial size preserved.
#[derive(Debug, Clone)]
pub struct PixelProjector<F> {
    conv1: Conv2d<F>,
    conv2: Conv2d<F>,
    act: Activation,
}

#[derive(Debug)]
pub struct PixelProjectorCache<F> {
    c1: Conv2dCache<F>,
    mask: Array4<F>,
    c2: Conv2dCache<F>,
}

impl<F: Real> PixelProjector<F> {
    pub fn init(in_c: usize, out_c: usize, act: Activation, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        Self {
            conv1: Conv2d::new(in_c, in_c, 1, &mut rng),
            conv2: Conv2d::new(in_c, out_c, 1, &mut rng),
            act,
        }
    }

    pub fn forward(&self, y: &Array4<F>) -> Result<(Array4<F>, PixelProjectorCache<F>)> {
        let (h, c1) = self.conv1.forward(y)?;
        let (h, mask) = self.act.forward(&h);
        let (z, c2) = self.conv2.forward(&h)?;
        Ok((z, PixelProjectorCache { c1, mask, c2 }))
    }

    pub fn backward(&mut self, cache: &PixelProjectorCache<F>, grad_out: &Array4<F>) -> Array4<F> {
        let g = self.conv2.backward(&cache.c2, grad_out);
        let g = self.act.backward(&cache.mask, &g);
        self.conv1.backward(&cache.c1, &g)
    }
}

impl<F: Real> ParamModule<F> for PixelProjector<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.conv1.visit_params_ref(&join(prefix, "conv1"), f);
        self.conv2.visit_params_ref(&join(prefix, "conv2"), f);
    }
}

// ---------------------------------------------------------------------------
// The two-branch model
// ---------------------------------------------------------------------------

/// The six tensors of one forward pass over a 2N-sample batch.
#[derive(Debug, Clone)]
pub struct BranchOutputs<F> {
    /// Dominant feature map e(down(I)).
    pub y: Array4<F>,
    /// Auxiliary feature map e(I).
    pub y_aux: Array4<F>,
    /// Dominant image projection g_ins(e(down(V))).
    pub zg: Array2<F>,
    /// Auxiliary image projection.
    pub zg_aux: Array2<F>,
    /// Dominant pixel projection d(Y).
    pub zl: Array4<F>,
    /// Auxiliary pixel projection.
    pub zl_aux: Array4<F>,
}

/// Gradients of a scalar loss with respect to [`BranchOutputs`].
#[derive(Debug, Clone)]
pub struct BranchGrads<F> {
    pub d_y: Array4<F>,
    pub d_y_aux: Array4<F>,
    pub d_zg: Array2<F>,
    pub d_zg_aux: Array2<F>,
    pub d_zl: Array4<F>,
    pub d_zl_aux: Array4<F>,
}

#[derive(Debug)]
pub struct MaclForwardCache<F> {
    dom_fix: EncoderCache<F>,
    dom_var: EncoderCache<F>,
    aux_fix: EncoderCache<F>,
    aux_var: EncoderCache<F>,
    decoder: PartialDecoderCache<F>,
    proj_img_dom: ImageProjectorCache<F>,
    proj_img_aux: ImageProjectorCache<F>,
    proj_pix_aux: PixelProjectorCache<F>,
}

#[derive(Debug, Clone)]
pub struct MaclModel<F> {
    pub cfg: ModelConfig,
    pub connection: ConnectionMode,
    pub encoder: Encoder<F>,
    /// Present in independent and EMA modes; absent when shared.
    pub encoder_aux: Option<Encoder<F>>,
    pub decoder: PartialDecoder<F>,
    pub proj_img_dom: ImageProjector<F>,
    pub proj_img_aux: ImageProjector<F>,
    pub proj_pix_aux: PixelProjector<F>,
}

impl<F: Real> MaclModel<F> {
    pub fn init(cfg: &ModelConfig, connection: ConnectionMode, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let espec = cfg.encoder_spec();
        let encoder = Encoder::init(espec, cfg.activation, cfg.norm, derive_seed(seed, "init/encoder"))?;
        let encoder_aux = match connection {
            ConnectionMode::Shared => None,
            ConnectionMode::Independent => Some(Encoder::init(
                espec,
                cfg.activation,
                cfg.norm,
                derive_seed(seed, "init/encoder_aux"),
            )?),
            ConnectionMode::Ema { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return config_err("EMA momentum must be in [0, 1)");
                }
                Some(encoder.clone())
            }
        };
        let decoder = PartialDecoder::init(
            espec,
            cfg.decoder_spec(),
            cfg.pixel_channels,
            cfg.activation,
            cfg.norm,
            derive_seed(seed, "init/decoder"),
        )?;
        let c_f = espec.out_channels();
        Ok(Self {
            cfg: cfg.clone(),
            connection,
            encoder,
            encoder_aux,
            decoder,
            proj_img_dom: ImageProjector::init(
                c_f,
                cfg.embed_dim,
                cfg.activation,
                derive_seed(seed, "init/proj_img_dom"),
            ),
            proj_img_aux: ImageProjector::init(
                c_f,
                cfg.embed_dim,
                cfg.activation,
                derive_seed(seed, "init/proj_img_aux"),
            ),
            proj_pix_aux: PixelProjector::init(
                c_f,
                cfg.pixel_channels,
                cfg.activation,
                derive_seed(seed, "init/proj_pix_aux"),
            ),
        })
    }

    fn aux_encoder(&self) -> &Encoder<F> {
        self.encoder_aux.as_ref().unwrap_or(&self.encoder)
    }

    /// Run both branches over the fixed-position batch `xf` and the
    /// spatially-varied batch `xv` (each (2N, C, H, W)). `lambda` must equal
    /// 2^-N for the configured decoder; this is validated before any compute.
    pub fn forward(
        &self,
        xf: &Array4<F>,
        xv: &Array4<F>,
        lambda: f64,
    ) -> Result<(BranchOutputs<F>, MaclForwardCache<F>)> {
        let expected = lambda_for_blocks(self.cfg.decoder_blocks);
        if (lambda - expected).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "alignment: lambda {lambda} does not match 2^-N = {expected} for N = {}",
                self.cfg.decoder_blocks
            )));
        }
        if xf.dim() != xv.dim() {
            return shape_err("fixed and varied batches must share shape".to_string());
        }
        let f = pool_factor(lambda)?;
        let (_, _, h, w) = xf.dim();
        let div = self.cfg.encoder_spec().spatial_divisor() * f;
        if h % div != 0 || w % div != 0 {
            return shape_err(format!(
                "input {h}x{w} must divide 2^(L-1)/lambda = {div}"
            ));
        }

        // Auxiliary branch: full-resolution inputs.
        let aux = self.aux_encoder();
        let (y_aux, _aux_skips, aux_fix) = aux.forward(xf)?;
        let (zl_aux, proj_pix_aux) = self.proj_pix_aux.forward(&y_aux)?;
        let (feat_aux_var, _, aux_var) = aux.forward(xv)?;
        let (zg_aux, proj_img_aux) = self.proj_img_aux.forward(&feat_aux_var)?;

        // Dominant branch: downsampled inputs, then decoder.
        let xf_d = down_nchw(xf, lambda)?;
        let xv_d = down_nchw(xv, lambda)?;
        let (y, skips, dom_fix) = self.encoder.forward(&xf_d)?;
        let (zl, decoder) = self.decoder.forward(&y, &skips)?;
        let (feat_dom_var, _, dom_var) = self.encoder.forward(&xv_d)?;
        let (zg, proj_img_dom) = self.proj_img_dom.forward(&feat_dom_var)?;

        Ok((
            BranchOutputs {
                y,
                y_aux,
                zg,
                zg_aux,
                zl,
                zl_aux,
            },
            MaclForwardCache {
                dom_fix,
                dom_var,
                aux_fix,
                aux_var,
                decoder,
                proj_img_dom,
                proj_img_aux,
                proj_pix_aux,
            },
        ))
    }

    /// Accumulate parameter gradients for one forward pass. In EMA mode no
    /// gradient enters the auxiliary encoder.
    pub fn backward(&mut self, cache: &MaclForwardCache<F>, grads: &BranchGrads<F>) {
        // Dominant image path.
        let d_feat = self.proj_img_dom.backward(&cache.proj_img_dom, &grads.d_zg);
        self.encoder.backward(&cache.dom_var, &d_feat, None);

        // Dominant pixel path plus the feature-level gradient on Y.
        let (d_y_dec, d_skips) = self.decoder.backward(&cache.decoder, &grads.d_zl);
        let d_y_total = &d_y_dec + &grads.d_y;
        self.encoder
            .backward(&cache.dom_fix, &d_y_total, Some(&d_skips));

        // Auxiliary paths: projector gradients always flow; encoder
        // gradients depend on the connection mode.
        let d_y_aux_proj = self.proj_pix_aux.backward(&cache.proj_pix_aux, &grads.d_zl_aux);
        let d_y_aux_total = &d_y_aux_proj + &grads.d_y_aux;
        let d_feat_aux = self.proj_img_aux.backward(&cache.proj_img_aux, &grads.d_zg_aux);
        match self.connection {
            ConnectionMode::Shared => {
                self.encoder.backward(&cache.aux_fix, &d_y_aux_total, None);
                self.encoder.backward(&cache.aux_var, &d_feat_aux, None);
            }
            ConnectionMode::Independent => {
                let aux = self.encoder_aux.as_mut().expect("independent aux encoder");
                aux.backward(&cache.aux_fix, &d_y_aux_total, None);
                aux.backward(&cache.aux_var, &d_feat_aux, None);
            }
            ConnectionMode::Ema { .. } => {}
        }
    }

    /// Momentum update of the auxiliary encoder (EMA mode only).
    pub fn ema_step(&mut self) {
        if let ConnectionMode::Ema { momentum } = self.connection {
            let src = crate::nn::snapshot(&self.encoder);
            let aux = self.encoder_aux.as_mut().expect("ema aux encoder");
            crate::nn::ema_blend(aux, &src, crate::real::c::<F>(momentum));
        }
    }

    /// Component tag of a parameter name, as stored in checkpoints.
    pub fn component_tag(name: &str) -> &'static str {
        match name.split('.').next().unwrap_or("") {
            "encoder" => "encoder",
            "encoder_aux" => "encoder_aux",
            "decoder" => "decoder_partial",
            "proj_img_dom" => "proj_img_dom",
            "proj_img_aux" => "proj_img_aux",
            "proj_pix_aux" => "proj_pix_aux",
            other => panic!("unknown component for parameter {other}"),
        }
    }

    /// Parameter counts of the dominant branch (encoder + decoder + image
    /// head) and the auxiliary branch backbone plus its heads.
    pub fn branch_param_counts(&self) -> (usize, usize) {
        let enc = crate::nn::param_count(&self.encoder);
        let dec = crate::nn::param_count(&self.decoder);
        let img_dom = crate::nn::param_count(&self.proj_img_dom);
        let img_aux = crate::nn::param_count(&self.proj_img_aux);
        let pix_aux = crate::nn::param_count(&self.proj_pix_aux);
        let aux_enc = self
            .encoder_aux
            .as_ref()
            .map_or(enc, crate::nn::param_count);
        (enc + dec + img_dom, aux_enc + img_aux + pix_aux)
    }
}

impl<F: Real> ParamModule<F> for MaclModel<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        if let Some(aux) = &mut self.encoder_aux {
            aux.visit_params(&join(prefix, "encoder_aux"), f);
        }
        self.decoder.visit_params(&join(prefix, "decoder"), f);
        self.proj_img_dom
            .visit_params(&join(prefix, "proj_img_dom"), f);
        self.proj_img_aux
            .visit_params(&join(prefix, "proj_img_aux"), f);
        self.proj_pix_aux
            .visit_params(&join(prefix, "proj_pix_aux"), f);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.encoder.visit_params_ref(&join(prefix, "encoder"), f);
        if let Some(aux) = &self.encoder_aux {
            aux.visit_params_ref(&join(prefix, "encoder_aux"), f);
        }
        self.decoder.visit_params_ref(&join(prefix, "decoder"), f);
        self.proj_img_dom
            .visit_params_ref(&join(prefix, "proj_img_dom"), f);
        self.proj_img_aux
            .visit_params_ref(&join(prefix, "proj_img_aux"), f);
        self.proj_pix_aux
            .visit_params_ref(&join(prefix, "proj_pix_aux"), f);
    }
}

// ---------------------------------------------------------------------------
// Downstream segmentation model: encoder + full decoder + head.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SegModel<F> {
    pub cfg: ModelConfig,
    pub classes: usize,
    pub encoder: Encoder<F>,
    blocks: Vec<UpBlock<F>>,
    head: Conv2d<F>,
}

#[derive(Debug)]
pub struct SegCache<F> {
    encoder: EncoderCache<F>,
    skips_len: usize,
    blocks: Vec<UpBlockCache<F>>,
    head: Conv2dCache<F>,
}

impl<F: Real> SegModel<F> {
    /// Fresh segmentation U-Net with `classes` foreground classes (the head
    /// emits `classes + 1` logits including background).
    pub fn init(cfg: &ModelConfig, classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if classes == 0 {
            return config_err("segmentation needs at least one foreground class");
        }
        let espec = cfg.encoder_spec();
        let encoder = Encoder::init(espec, cfg.activation, cfg.norm, derive_seed(seed, "init/encoder"))?;
        let mut rng = rng_from(derive_seed(seed, "init/seg_decoder"));
        let mut blocks = Vec::with_capacity(espec.levels - 1);
        for j in 0..espec.levels - 1 {
            let in_c = espec.width(espec.levels - 1 - j);
            let out_level = espec.levels - 2 - j;
            let skip_c = if cfg.uses_skips { espec.width(out_level) } else { 0 };
            blocks.push(UpBlock::new(
                in_c,
                skip_c,
                espec.width(out_level),
                cfg.activation,
                cfg.norm,
                &mut rng,
            ));
        }
        let head = Conv2d::new(espec.width(0), classes + 1, 1, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            classes,
            encoder,
            blocks,
            head,
        })
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<(Array4<F>, SegCache<F>)> {
        let (y, skips, ecache) = self.encoder.forward(x)?;
        let mut h = y;
        let mut bcaches = Vec::with_capacity(self.blocks.len());
        let levels = self.cfg.levels;
        for (j, block) in self.blocks.iter().enumerate() {
            let skip = if self.cfg.uses_skips {
                Some(&skips[levels - 2 - j])
            } else {
                None
            };
            let (out, c) = block.forward(&h, skip)?;
            bcaches.push(c);
            h = out;
        }
        let (logits, hcache) = self.head.forward(&h)?;
        Ok((
            logits,
            SegCache {
                encoder: ecache,
                skips_len: skips.len(),
                blocks: bcaches,
                head: hcache,
            },
        ))
    }

    pub fn backward(&mut self, cache: &SegCache<F>, d_logits: &Array4<F>) {
        let mut d_skips: Vec<Option<Array4<F>>> = vec![None; cache.skips_len];
        let mut g = self.head.backward(&cache.head, d_logits);
        let levels = self.cfg.levels;
        for j in (0..self.blocks.len()).rev() {
            let (gi, gs) = self.blocks[j].backward(&cache.blocks[j], &g);
            if let Some(gs) = gs {
                d_skips[levels - 2 - j] = Some(gs);
            }
            g = gi;
        }
        self.encoder.backward(&cache.encoder, &g, Some(&d_skips));
    }
}

impl<F: Real> ParamModule<F> for SegModel<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        for (j, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("decoder.block{j}")), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.encoder.visit_params_ref(&join(prefix, "encoder"), f);
        for (j, b) in self.blocks.iter().enumerate() {
            b.visit_params_ref(&join(prefix, &format!("decoder.block{j}")), f);
        }
        self.head.visit_params_ref(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::down_nchw;
    use crate::util::rng_from;
    use rand::RngExt;

    fn rand_batch(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
        let mut rng = rng_from(seed);
        Array4::from_shape_fn((b, c, h, w), |_| rng.random_range(0.0f64..1.0) as f32)
    }

    fn small_cfg(levels: usize, blocks: usize) -> ModelConfig {
        ModelConfig {
            levels,
            base_channels: 4,
            in_channels: 1,
            channel_cap: 64,
            decoder_blocks: blocks,
            uses_skips: true,
            pixel_channels: 6,
            embed_dim: 8,
            activation: Activation::LeakyRelu,
            norm: NormKind::Instance,
        }
    }

    #[test]
    fn encoder_shapes() {
        let spec = EncoderSpec {
            levels: 5,
            base_channels: 2,
            in_channels: 1,
            channel_cap: 64,
        };
        let enc = Encoder::<f32>::init(spec, Activation::Relu, NormKind::Instance, 1).unwrap();
        let x = rand_batch(3, 1, 64, 64, 2);
        let (y, skips, _) = enc.forward(&x).unwrap();
        assert_eq!(y.dim(), (3, 32, 4, 4));
        assert_eq!(skips.len(), 4);

        let spec2 = EncoderSpec {
            levels: 2,
            base_channels: 2,
            in_channels: 1,
            channel_cap: 64,
        };
        let enc2 = Encoder::<f32>::init(spec2, Activation::Relu, NormKind::Instance, 1).unwrap();
        let (y2, skips2, _) = enc2.forward(&rand_batch(1, 1, 8, 8, 3)).unwrap();
        assert_eq!(y2.dim(), (1, 4, 4, 4));
        assert_eq!(skips2.len(), 1);

        // Indivisible spatial size is a shape error.
        assert!(enc.forward(&rand_batch(1, 1, 24, 24, 4)).is_err());
    }

    #[test]
    fn decoder_shapes_without_skips() {
        // N=2 from 1x1 input: two x2 upsamples reach 4x4.
        let espec = EncoderSpec {
            levels: 3,
            base_channels: 2,
            in_channels: 1,
            channel_cap: 64,
        };
        let dec = PartialDecoder::<f32>::init(
            espec,
            PartialDecoderSpec {
                blocks: 2,
                uses_skips: false,
            },
            5,
            Activation::Relu,
            NormKind::None,
            7,
        )
        .unwrap();
        let y = rand_batch(2, espec.out_channels(), 1, 1, 8);
        let (zl, _) = dec.forward(&y, &[]).unwrap();
        assert_eq!(zl.dim(), (2, 5, 4, 4));
    }

    #[test]
    fn decoder_degenerate_n0_is_channel_map() {
        let espec = EncoderSpec {
            levels: 3,
            base_channels: 2,
            in_channels: 1,
            channel_cap: 64,
        };
        let dec = PartialDecoder::<f32>::init(
            espec,
            PartialDecoderSpec {
                blocks: 0,
                uses_skips: true,
            },
            5,
            Activation::Relu,
            NormKind::None,
            7,
        )
        .unwrap();
        let y = rand_batch(2, espec.out_channels(), 6, 6, 9);
        let (zl, _) = dec.forward(&y, &[]).unwrap();
        assert_eq!(zl.dim(), (2, 5, 6, 6));
    }

    #[test]
    fn decoder_missing_skips_is_shape_error() {
        let espec = EncoderSpec {
            levels: 3,
            base_channels: 2,
            in_channels: 1,
            channel_cap: 64,
        };
        let dec = PartialDecoder::<f32>::init(
            espec,
            PartialDecoderSpec {
                blocks: 2,
                uses_skips: true,
            },
            5,
            Activation::Relu,
            NormKind::None,
            7,
        )
        .unwrap();
        let y = rand_batch(1, espec.out_channels(), 2, 2, 9);
        assert!(dec.forward(&y, &[]).is_err());
    }

    #[test]
    fn image_projector_contracts() {
        let mut proj = ImageProjector::<f32>::init(6, 8, Activation::Relu, 3);
        // Constant feature map pools to the constant in every channel.
        let x = Array4::from_elem((2, 6, 5, 5), 0.37f32);
        let (pooled, _) = GlobalAvgPool.forward(&x);
        for v in pooled.iter() {
            assert!((v - 0.37).abs() < 1e-6);
        }
        let (z, _) = proj.forward(&x).unwrap();
        assert_eq!(z.dim(), (2, 8));
        // Zero weights and biases give the zero vector.
        proj.visit_params("", &mut |_, p| p.data.fill(0.0));
        let (z, _) = proj.forward(&x).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixel_projector_preserves_spatial_size() {
        let proj = PixelProjector::<f32>::init(4, 7, Activation::Relu, 5);
        let x = rand_batch(3, 4, 4, 4, 11);
        let (z, _) = proj.forward(&x).unwrap();
        assert_eq!(z.dim(), (3, 7, 4, 4));
    }

    #[test]
    fn macl_forward_shared_identity_inputs_give_equal_features() {
        // lambda = 1, N = 0, shared encoder, identical branch inputs.
        let cfg = small_cfg(3, 0);
        let model = MaclModel::<f32>::init(&cfg, ConnectionMode::Shared, 42).unwrap();
        let x = rand_batch(4, 1, 16, 16, 13);
        let (out, _) = model.forward(&x, &x, 1.0).unwrap();
        assert_eq!(out.y, out.y_aux);
    }

    #[test]
    fn macl_forward_independent_differs() {
        let cfg = small_cfg(3, 0);
        let model = MaclModel::<f32>::init(&cfg, ConnectionMode::Independent, 42).unwrap();
        let x = rand_batch(4, 1, 16, 16, 13);
        let (out, _) = model.forward(&x, &x, 1.0).unwrap();
        assert_ne!(out.y, out.y_aux);
    }

    #[test]
    fn macl_forward_rejects_misaligned_lambda() {
        let cfg = small_cfg(3, 2);
        let model = MaclModel::<f32>::init(&cfg, ConnectionMode::Shared, 1).unwrap();
        let x = rand_batch(2, 1, 32, 32, 3);
        assert!(matches!(
            model.forward(&x, &x, 0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn alignment_invariant_over_level_block_grid() {
        for levels in 2..=5usize {
            for blocks in 0..=2usize.min(levels - 1) {
                let cfg = ModelConfig {
                    levels,
                    base_channels: 2,
                    channel_cap: 32,
                    decoder_blocks: blocks,
                    pixel_channels: 3,
                    embed_dim: 4,
                    ..small_cfg(levels, blocks)
                };
                let model = MaclModel::<f32>::init(&cfg, ConnectionMode::Shared, 9).unwrap();
                let lambda = cfg.lambda();
                let x = rand_batch(2, 1, 64, 64, levels as u64 * 10 + blocks as u64);
                let (out, _) = model
                    .forward(&x, &x, lambda)
                    .unwrap_or_else(|e| panic!("L={levels} N={blocks}: {e}"));
                assert_eq!(
                    (out.zl.dim().2, out.zl.dim().3),
                    (out.zl_aux.dim().2, out.zl_aux.dim().3),
                    "pixel projections must align at L={levels} N={blocks}"
                );
                let down_aux = down_nchw(&out.y_aux, lambda).unwrap();
                assert_eq!(
                    (out.y.dim().2, out.y.dim().3),
                    (down_aux.dim().2, down_aux.dim().3),
                    "feature maps must align at L={levels} N={blocks}"
                );
            }
        }
    }

    #[test]
    fn dominant_branch_has_more_parameters() {
        let cfg = small_cfg(4, 2);
        let model = MaclModel::<f32>::init(&cfg, ConnectionMode::Shared, 17).unwrap();
        let (dom, aux) = model.branch_param_counts();
        assert!(dom > aux, "dominant {dom} must exceed auxiliary {aux}");
        // The branch difference is exactly the decoder plus the dominant
        // image head, minus the auxiliary heads.
        let dec = crate::nn::param_count(&model.decoder);
        let img_dom = crate::nn::param_count(&model.proj_img_dom);
        let img_aux = crate::nn::param_count(&model.proj_img_aux);
        let pix_aux = crate::nn::param_count(&model.proj_pix_aux);
        assert_eq!(dom - aux, dec + img_dom - img_aux - pix_aux);
    }

    #[test]
    fn shared_mode_updates_are_observed_by_both_branches() {
        let cfg = small_cfg(3, 1);
        let mut model = MaclModel::<f32>::init(&cfg, ConnectionMode::Shared, 5).unwrap();
        let x = rand_batch(2, 1, 16, 16, 6);
        let (before, _) = model.forward(&x, &x, 0.5).unwrap();
        // Perturb the (single) encoder parameter set.
        model.encoder.visit_params("", &mut |_, p| {
            p.data.mapv_inplace(|v| v + 0.05);
        });
        let (after, _) = model.forward(&x, &x, 0.5).unwrap();
        assert_ne!(before.y, after.y);
        assert_ne!(before.y_aux, after.y_aux, "aux branch sees the update");
    }

    #[test]
    fn ema_step_blends_aux_encoder() {
        let cfg = small_cfg(3, 1);
        let mut model =
            MaclModel::<f32>::init(&cfg, ConnectionMode::Ema { momentum: 0.9 }, 5).unwrap();
        // Make dominant and aux diverge, then blend.
        model.encoder.visit_params("", &mut |_, p| p.data.fill(1.0));
        model
            .encoder_aux
            .as_mut()
            .unwrap()
            .visit_params("", &mut |_, p| p.data.fill(0.0));
        model.ema_step();
        model
            .encoder_aux
            .as_ref()
            .unwrap()
            .visit_params_ref("", &mut |_, p| {
                for v in p.data.iter() {
                    assert!((v - 0.1).abs() < 1e-6);
                }
            });
    }

    #[test]
    fn seg_model_shapes_and_batch_dim() {
        let cfg = small_cfg(3, 2);
        let model = SegModel::<f32>::init(&cfg, 3, 21).unwrap();
        let x = rand_batch(4, 1, 16, 16, 22);
        let (logits, _) = model.forward(&x).unwrap();
        assert_eq!(logits.dim(), (4, 4, 16, 16));
    }

    #[test]
    fn component_tags_cover_all_parameters() {
        let cfg = small_cfg(3, 1);
        let model = MaclModel::<f32>::init(&cfg, ConnectionMode::Independent, 2).unwrap();
        let mut tags = std::collections::BTreeSet::new();
        model.visit_params_ref("", &mut |name, _| {
            tags.insert(MaclModel::<f32>::component_tag(name).to_string());
        });
        let expect: std::collections::BTreeSet<String> = [
            "encoder",
            "encoder_aux",
            "decoder_partial",
            "proj_img_dom",
            "proj_img_aux",
            "proj_pix_aux",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        assert_eq!(tags, expect);
    }
}
