//! Shared-encoder / dual-decoder network.
//!
//! ```text
//!            ┌──────────── encoder (shared) ─────────────┐
//! input ──► [BN→conv→ReLU]─pool─►[BN→conv→ReLU]─pool─►[BN→conv→ReLU]─pool──► f3
//!                 │ s1                  │ s2                  │ s3
//! recognition:  f3 ─► conv→ReLU→pool(ceil)→conv1x1(C)→global avg→softmax
//! segmentation: f3 ─► up→cat(s3)→conv ─► up→cat(s2)→conv ─► up→cat(s1)→conv ─► conv1x1(V)
//! ```
//!
//! `s1..s3` are the pre-pool encoder activations used as skip connections.
//! Convolutions use "same" zero padding so spatial size only changes at pools
//! and transposed convolutions. The segmentation decoder has no activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    bn_backward, bn_forward, conv_backward, conv_forward, global_avg_pool_backward,
    global_avg_pool_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward,
    softmax, tconv_backward, tconv_forward, BnCache, BnParams, ConvCache, ConvParams, Mode, Param,
    PoolIndices, ReluCache, TConvCache, TransposedConvParams,
};
use crate::rng::Rng;
use crate::tensor::{zero_pad_asym, Tensor};

/// How a decoder stage merges its upsampled input with the encoder skip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipFusion {
    Concat,
}

/// Topology and hyperparameters. Defaults follow the published setup where
/// it is stated (88x88 input, N(0, 0.01^2) kernels, 0.1 biases, lr 0.001
/// decayed by 0.1 every 5 epochs) and documented guesses elsewhere.
const MAX_EXTENT: usize = 4096;
const MAX_KERNEL: usize = 31;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_size: [usize; 2],
    pub num_classes: usize,
    pub num_seg_classes: usize,
    pub encoder_channels: [usize; 3],
    pub encoder_kernels: [usize; 3],
    pub recognition_channels: usize,
    pub recognition_kernel: usize,
    pub fusion_kernel: usize,
    pub upsample_kernel: usize,
    pub upsample_factor: usize,
    pub skip_fusion: SkipFusion,
    pub lambda_rec: f64,
    pub lambda_seg: f64,
    pub weight_std: f64,
    pub bias_const: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_period: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Random crops drawn from each training chip.
    pub crops_per_chip: usize,
    /// When set, every class is topped up to exactly this many training crops.
    pub class_quota: Option<usize>,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: [88, 88],
            num_classes: 10,
            num_seg_classes: 2,
            encoder_channels: [16, 32, 64],
            encoder_kernels: [5, 5, 3],
            recognition_channels: 128,
            recognition_kernel: 3,
            fusion_kernel: 3,
            upsample_kernel: 2,
            upsample_factor: 2,
            skip_fusion: SkipFusion::Concat,
            lambda_rec: 1.0,
            lambda_seg: 1.0,
            weight_std: 0.01,
            bias_const: 0.1,
            lr: 0.001,
            lr_decay: 0.1,
            lr_decay_period: 5,
            batch_size: 32,
            epochs: 20,
            crops_per_chip: 10,
            class_quota: None,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return bad(format!("input size {h}x{w} must be positive and divisible by 8"));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_seg_classes < 2 || self.num_seg_classes > 256 {
            return bad(format!("num_seg_classes must be in 2..=256, got {}", self.num_seg_classes));
        }
        if self.encoder_channels.contains(&0) || self.recognition_channels == 0 {
            return bad("all channel counts must be >= 1".into());
        }
        // Generous ceilings that keep size arithmetic far from overflow and
        // stop a hostile config from allocating without bound.
        let widest = self.encoder_channels.iter().chain([&self.recognition_channels, &self.num_classes]).max();
        if h > MAX_EXTENT || w > MAX_EXTENT || widest.is_some_and(|&c| c > MAX_EXTENT) {
            return bad(format!("sizes and channel counts are limited to {MAX_EXTENT}"));
        }
        let kernels = self
            .encoder_kernels
            .iter()
            .chain([&self.recognition_kernel, &self.fusion_kernel]);
        for &k in kernels.clone().chain([&self.upsample_kernel]) {
            if k > MAX_KERNEL {
                return bad(format!("kernels are limited to {MAX_KERNEL}, got {k}"));
            }
        }
        for &k in kernels {
            if k == 0 || k % 2 == 0 {
                return bad(format!("conv kernels must be odd for same padding, got {k}"));
            }
        }
        if self.upsample_factor != 2 || self.upsample_kernel < 2 || !self.upsample_kernel.is_multiple_of(2) {
            return bad(format!(
                "decoder stages must exactly double the size: need upsample_factor 2 and an even kernel, got s={} k={}",
                self.upsample_factor, self.upsample_kernel
            ));
        }
        if !(self.lambda_rec >= 0.0 && self.lambda_seg >= 0.0) {
            return bad("loss weights must be >= 0".into());
        }
        if !(self.weight_std >= 0.0) || !self.bias_const.is_finite() {
            return bad("weight_std must be >= 0 and bias_const finite".into());
        }
        if !(self.lr >= 0.0) || !(self.lr_decay > 0.0) || self.lr_decay_period == 0 {
            return bad("lr must be >= 0, lr_decay > 0 and lr_decay_period >= 1".into());
        }
        if self.batch_size == 0 || self.crops_per_chip == 0 {
            return bad("batch_size and crops_per_chip must be >= 1".into());
        }
        Ok(())
    }

    /// Spatial sizes `(encoder stage outputs, decoder stage outputs)`.
    pub fn spatial_plan(&self) -> ([[usize; 2]; 3], [[usize; 2]; 3]) {
        let [h, w] = self.input_size;
        (
            [[h / 2, w / 2], [h / 4, w / 4], [h / 8, w / 8]],
            [[h / 4, w / 4], [h / 2, w / 2], [h, w]],
        )
    }

    /// Number of learnable scalars, from the configured shapes alone.
    pub fn parameter_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let [c1, c2, c3] = self.encoder_channels;
        let uk = self.upsample_kernel;
        let enc = 2 * (1 + c1 + c2)
            + conv(1, c1, self.encoder_kernels[0])
            + conv(c1, c2, self.encoder_kernels[1])
            + conv(c2, c3, self.encoder_kernels[2]);
        let rec = conv(c3, self.recognition_channels, self.recognition_kernel)
            + conv(self.recognition_channels, self.num_classes, 1);
        let fk = self.fusion_kernel;
        let seg = conv(c3, c3, uk)
            + conv(2 * c3, c3, fk)
            + conv(c3, c2, uk)
            + conv(2 * c2, c2, fk)
            + conv(c2, c1, uk)
            + conv(2 * c1, c1, fk)
            + conv(c1, self.num_seg_classes, 1);
        enc + rec + seg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStage {
    pub bn: BnParams,
    pub conv: ConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage {
    pub up: TransposedConvParams,
    pub fuse: ConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlNetwork {
    pub config: NetworkConfig,
    pub encoder: [EncoderStage; 3],
    pub rec_conv: ConvParams,
    pub rec_classifier: ConvParams,
    pub seg_stages: [DecoderStage; 3],
    pub seg_head: ConvParams,
    /// Bumped on every parameter update; forward caches remember it.
    version: u64,
}

struct EncoderCache {
    bn: BnCache,
    conv: ConvCache,
    relu: ReluCache,
    pool: PoolIndices,
}

struct DecoderCache {
    up: TConvCache,
    fuse: ConvCache,
    up_channels: usize,
}

/// Everything `backward` needs from one `forward` call.
pub struct ForwardCache {
    version: u64,
    batch: usize,
    encoder: Vec<EncoderCache>,
    rec_conv: ConvCache,
    rec_relu: ReluCache,
    rec_pad_shape: [usize; 4],
    rec_pool: PoolIndices,
    rec_classifier: ConvCache,
    rec_map_shape: [usize; 4],
    seg: Vec<DecoderCache>,
    seg_head: ConvCache,
}

pub struct ForwardOutput {
    /// Softmax probabilities, shape `(batch, C, 1, 1)`.
    pub class_probs: Tensor,
    /// Pre-softmax class scores, shape `(batch, C, 1, 1)`.
    pub class_logits: Tensor,
    /// Per-pixel segmentation logits, shape `(batch, V, h, w)`.
    pub seg_logits: Tensor,
    pub cache: ForwardCache,
}

/// Shared-encoder features, reusable by both decoders.
pub struct EncoderFeatures {
    /// Pre-pool activations of the three stages (skip sources).
    pub skips: Vec<Tensor>,
    /// Output of the last pool.
    pub pooled: Tensor,
    caches: Vec<EncoderCache>,
}

impl MtlNetwork {
    pub fn build(config: &NetworkConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let std = config.weight_std;
        let bias = config.bias_const;
        let [c1, c2, c3] = config.encoder_channels;
        let ek = config.encoder_kernels;
        let same = |k: usize| k / 2;
        let enc = |cin: usize, cout: usize, k: usize, rng: &mut Rng| -> Result<EncoderStage> {
            Ok(EncoderStage {
                bn: BnParams::new(cin),
                conv: ConvParams::new(cin, cout, k, 1, same(k), std, bias, rng)?,
            })
        };
        let encoder = [enc(1, c1, ek[0], rng)?, enc(c1, c2, ek[1], rng)?, enc(c2, c3, ek[2], rng)?];

        let rk = config.recognition_kernel;
        let rec_conv = ConvParams::new(c3, config.recognition_channels, rk, 1, same(rk), std, bias, rng)?;
        let rec_classifier =
            ConvParams::new(config.recognition_channels, config.num_classes, 1, 1, 0, std, bias, rng)?;

        let (uk, us, fk) = (config.upsample_kernel, config.upsample_factor, config.fusion_kernel);
        let up_pad = (uk - us) / 2;
        let dec = |cin: usize, cout: usize, rng: &mut Rng| -> Result<DecoderStage> {
            Ok(DecoderStage {
                up: TransposedConvParams::new(cin, cout, uk, us, up_pad, std, bias, rng)?,
                fuse: ConvParams::new(2 * cout, cout, fk, 1, same(fk), std, bias, rng)?,
            })
        };
        let seg_stages = [dec(c3, c3, rng)?, dec(c3, c2, rng)?, dec(c2, c1, rng)?];
        let seg_head = ConvParams::new(c1, config.num_seg_classes, 1, 1, 0, std, bias, rng)?;

        let net = Self {
            config: config.clone(),
            encoder,
            rec_conv,
            rec_classifier,
            seg_stages,
            seg_head,
            version: 0,
        };
        net.check_spatial_plan()?;
        Ok(net)
    }

    /// Verifies, by symbolic size arithmetic, that every decoder stage lands
    /// on the size of its skip source and the head on the input size.
    fn check_spatial_plan(&self) -> Result<()> {
        let [h, w] = self.config.input_size;
        let (enc_sizes, dec_sizes) = self.config.spatial_plan();
        let mut size = (h, w);
        for (stage, expect) in self.encoder.iter().zip(enc_sizes) {
            size = stage.conv.output_size(size.0, size.1).ok_or_else(|| {
                Error::InvalidConfig("encoder conv does not fit its input".into())
            })?;
            size = (size.0 / 2, size.1 / 2);
            if [size.0, size.1] != expect {
                return Err(Error::InvalidConfig(format!("encoder produced {size:?}, expected {expect:?}")));
            }
        }
        for (stage, expect) in self.seg_stages.iter().zip(dec_sizes) {
            size = stage.up.output_size(size.0, size.1).ok_or_else(|| {
                Error::InvalidConfig("upsampling produced an empty map".into())
            })?;
            if [size.0, size.1] != expect {
                return Err(Error::InvalidConfig(format!("decoder produced {size:?}, expected {expect:?}")));
            }
        }
        Ok(())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Runs only the shared encoder.
    pub fn encode(&mut self, x: &Tensor, mode: Mode) -> Result<EncoderFeatures> {
        let [h, w] = self.config.input_size;
        if x.c() != 1 || x.h() != h || x.w() != w {
            return Err(Error::shape("network input", &[x.n(), 1, h, w], &x.shape()));
        }
        let mut skips = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        let mut cur = x.clone();
        for stage in self.encoder.iter_mut() {
            let (normed, bn) = bn_forward(&cur, &mut stage.bn, mode)?;
            let (z, conv) = conv_forward(&normed, &stage.conv)?;
            let (a, relu) = relu_forward(&z);
            let (p, pool) = maxpool_forward(&a)?;
            skips.push(a);
            caches.push(EncoderCache { bn, conv, relu, pool });
            cur = p;
        }
        Ok(EncoderFeatures { skips, pooled: cur, caches })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        let feats = self.encode(x, mode)?;
        let (class_logits, class_probs, rec) = self.recognize(&feats.pooled)?;
        let (seg_logits, seg, seg_head) = self.segment(&feats)?;
        let cache = ForwardCache {
            version: self.version,
            batch: x.n(),
            encoder: feats.caches,
            rec_conv: rec.0,
            rec_relu: rec.1,
            rec_pad_shape: rec.2,
            rec_pool: rec.3,
            rec_classifier: rec.4,
            rec_map_shape: rec.5,
            seg,
            seg_head,
        };
        Ok(ForwardOutput {
            class_probs,
            class_logits,
            seg_logits,
            cache,
        })
    }

    #[allow(clippy::type_complexity)]
    fn recognize(
        &self,
        pooled: &Tensor,
    ) -> Result<(Tensor, Tensor, (ConvCache, ReluCache, [usize; 4], PoolIndices, ConvCache, [usize; 4]))> {
        let (z, conv_cache) = conv_forward(pooled, &self.rec_conv)?;
        let (a, relu_cache) = relu_forward(&z);
        // Odd maps get a zero row/column on the bottom/right. Inputs are
        // post-ReLU (>= 0) and ties go to the top-left, so the padding never
        // wins a window: this is ceil-mode pooling.
        let padded = zero_pad_asym(&a, 0, a.h() % 2, 0, a.w() % 2);
        let pad_shape = padded.shape();
        let (p, pool) = maxpool_forward(&padded)?;
        let (map, cls_cache) = conv_forward(&p, &self.rec_classifier)?;
        let map_shape = map.shape();
        let logits = global_avg_pool_forward(&map);
        let mut probs = Tensor::zeros(logits.shape());
        for b in 0..logits.n() {
            probs.sample_mut(b).copy_from_slice(&softmax(logits.sample(b))?);
        }
        Ok((logits, probs, (conv_cache, relu_cache, pad_shape, pool, cls_cache, map_shape)))
    }

    fn segment(&self, feats: &EncoderFeatures) -> Result<(Tensor, Vec<DecoderCache>, ConvCache)> {
        let mut cur = feats.pooled.clone();
        let mut caches = Vec::with_capacity(3);
        for (stage, skip) in self.seg_stages.iter().zip(feats.skips.iter().rev()) {
            let (up, up_cache) = tconv_forward(&cur, &stage.up)?;
            let cat = match self.config.skip_fusion {
                SkipFusion::Concat => Tensor::concat_channels(&up, skip)?,
            };
            let (fused, fuse_cache) = conv_forward(&cat, &stage.fuse)?;
            caches.push(DecoderCache {
                up: up_cache,
                fuse: fuse_cache,
                up_channels: up.c(),
            });
            cur = fused;
        }
        let (logits, head) = conv_forward(&cur, &self.seg_head)?;
        Ok((logits, caches, head))
    }

    /// Class probabilities from the recognition decoder alone.
    pub fn recognition_only(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let feats = self.encode(x, mode)?;
        Ok(self.recognize(&feats.pooled)?.1)
    }

    /// Segmentation logits from the segmentation decoder alone.
    pub fn segmentation_only(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let feats = self.encode(x, mode)?;
        Ok(self.segment(&feats)?.0)
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Back-propagates both heads. Gradients are zeroed first, then every
    /// parameter receives the sum of the contributions that reach it.
    ///
    /// `d_class_logits` is the loss gradient w.r.t. the pre-softmax class
    /// scores; `d_seg_logits` w.r.t. the segmentation logits. `None` drops a
    /// head from the pass entirely.
    pub fn backward(
        &mut self,
        cache: &ForwardCache,
        d_class_logits: Option<&Tensor>,
        d_seg_logits: Option<&Tensor>,
    ) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache(format!(
                "cache from parameter version {} used at version {}",
                cache.version, self.version
            )));
        }
        if cache.encoder.len() != 3 || cache.seg.len() != 3 {
            return Err(Error::StaleCache("incomplete forward cache".into()));
        }
        self.zero_grads();

        let pooled_shape = cache.encoder[2].pool.output_shape;
        let mut d_pooled = Tensor::zeros(pooled_shape);
        let mut d_skips: Vec<Tensor> = cache
            .encoder
            .iter()
            .map(|c| Tensor::zeros(c.pool.input_shape))
            .collect();

        if let Some(dl) = d_class_logits {
            let want = [cache.batch, self.config.num_classes, 1, 1];
            if dl.shape() != want {
                return Err(Error::shape("backward class gradient", &want, &dl.shape()));
            }
            let d_map = global_avg_pool_backward(dl, cache.rec_map_shape)?;
            let d_p = conv_backward(&d_map, &cache.rec_classifier, &mut self.rec_classifier)?;
            let d_padded = maxpool_backward(&d_p, &cache.rec_pool)?;
            let [_, _, ph, pw] = cache.rec_pad_shape;
            let (rh, rw) = (pooled_shape[2], pooled_shape[3]);
            let d_a = if ph != rh || pw != rw { d_padded.crop(0, 0, rh, rw)? } else { d_padded };
            let d_z = relu_backward(&d_a, &cache.rec_relu)?;
            let d_in = conv_backward(&d_z, &cache.rec_conv, &mut self.rec_conv)?;
            d_pooled.add_assign(&d_in)?;
        }

        if let Some(dl) = d_seg_logits {
            let [h, w] = self.config.input_size;
            let want = [cache.batch, self.config.num_seg_classes, h, w];
            if dl.shape() != want {
                return Err(Error::shape("backward segmentation gradient", &want, &dl.shape()));
            }
            let mut d = conv_backward(dl, &cache.seg_head, &mut self.seg_head)?;
            for (i, (stage, sc)) in self.seg_stages.iter_mut().zip(&cache.seg).enumerate().rev() {
                let d_cat = conv_backward(&d, &sc.fuse, &mut stage.fuse)?;
                let (d_up, d_skip) = d_cat.split_channels(sc.up_channels)?;
                d_skips[2 - i].add_assign(&d_skip)?;
                d = tconv_backward(&d_up, &sc.up, &mut stage.up)?;
            }
            d_pooled.add_assign(&d)?;
        }

        let mut d = d_pooled;
        for (i, (stage, ec)) in self.encoder.iter_mut().zip(&cache.encoder).enumerate().rev() {
            let mut d_a = maxpool_backward(&d, &ec.pool)?;
            d_a.add_assign(&d_skips[i])?;
            let d_z = relu_backward(&d_a, &ec.relu)?;
            let d_norm = conv_backward(&d_z, &ec.conv, &mut stage.conv)?;
            d = bn_backward(&d_norm, &ec.bn, &mut stage.bn)?;
        }
        Ok(())
    }

    /// Every learnable tensor with a stable dotted name, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (i, s) in self.encoder.iter().enumerate() {
            let p = format!("enc{}", i + 1);
            out.push((format!("{p}.bn.gamma"), &s.bn.gamma));
            out.push((format!("{p}.bn.beta"), &s.bn.beta));
            out.push((format!("{p}.conv.weight"), &s.conv.weight));
            out.push((format!("{p}.conv.bias"), &s.conv.bias));
        }
        out.push(("rec.conv.weight".into(), &self.rec_conv.weight));
        out.push(("rec.conv.bias".into(), &self.rec_conv.bias));
        out.push(("rec.classifier.weight".into(), &self.rec_classifier.weight));
        out.push(("rec.classifier.bias".into(), &self.rec_classifier.bias));
        for (i, s) in self.seg_stages.iter().enumerate() {
            let p = format!("seg{}", i + 1);
            out.push((format!("{p}.up.weight"), &s.up.weight));
            out.push((format!("{p}.up.bias"), &s.up.bias));
            out.push((format!("{p}.fuse.weight"), &s.fuse.weight));
            out.push((format!("{p}.fuse.bias"), &s.fuse.bias));
        }
        out.push(("seg.head.weight".into(), &self.seg_head.weight));
        out.push(("seg.head.bias".into(), &self.seg_head.bias));
        out
    }

    /// Mutable counterpart of [`MtlNetwork::params`], same order and names.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (i, s) in self.encoder.iter_mut().enumerate() {
            let p = format!("enc{}", i + 1);
            out.push((format!("{p}.bn.gamma"), &mut s.bn.gamma));
            out.push((format!("{p}.bn.beta"), &mut s.bn.beta));
            out.push((format!("{p}.conv.weight"), &mut s.conv.weight));
            out.push((format!("{p}.conv.bias"), &mut s.conv.bias));
        }
        out.push(("rec.conv.weight".into(), &mut self.rec_conv.weight));
        out.push(("rec.conv.bias".into(), &mut self.rec_conv.bias));
        out.push(("rec.classifier.weight".into(), &mut self.rec_classifier.weight));
        out.push(("rec.classifier.bias".into(), &mut self.rec_classifier.bias));
        for (i, s) in self.seg_stages.iter_mut().enumerate() {
            let p = format!("seg{}", i + 1);
            out.push((format!("{p}.up.weight"), &mut s.up.weight));
            out.push((format!("{p}.up.bias"), &mut s.up.bias));
            out.push((format!("{p}.fuse.weight"), &mut s.fuse.weight));
            out.push((format!("{p}.fuse.bias"), &mut s.fuse.bias));
        }
        out.push(("seg.head.weight".into(), &mut self.seg_head.weight));
        out.push(("seg.head.bias".into(), &mut self.seg_head.bias));
        out
    }

    pub fn batch_norms(&self) -> [&BnParams; 3] {
        [&self.encoder[0].bn, &self.encoder[1].bn, &self.encoder[2].bn]
    }

    pub fn batch_norms_mut(&mut self) -> [&mut BnParams; 3] {
        let [a, b, c] = &mut self.encoder;
        [&mut a.bn, &mut b.bn, &mut c.bn]
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}
