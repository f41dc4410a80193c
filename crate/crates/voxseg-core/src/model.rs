//! The attention-fused 3D U-Net: a 4-level convolutional encoder, a wide
//! bottleneck, and a mirrored decoder whose skip connections pass through
//! multi-head cross-attention (decoder queries attend over encoder
//! keys/values) before the usual concatenation. A 1x1x1 softmax head emits
//! 4-class per-voxel probabilities.
//!
//! The attention fusion is residual: its refinement block is added onto the
//! skip feature map, so zero attention weights recover a plain U-Net skip.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{multihead_attention, AttentionWeights};
use crate::rng::Rng;
use crate::tape::{Tape, TapeError, TapeResult, ValueId};
use crate::tensor::{LabelGrid, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    BadConfig(String),
    Tape(TapeError),
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::BadConfig(msg) => write!(f, "bad model config: {msg}"),
            ModelError::Tape(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<TapeError> for ModelError {
    fn from(e: TapeError) -> Self {
        ModelError::Tape(e)
    }
}

/// Architecture hyperparameters. Channel counts double per level starting at
/// `base_filters`; spatial extents halve per level, so `input_extent` must be
/// divisible by `2^levels`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_filters: usize,
    pub levels: usize,
    pub kernel: usize,
    pub heads: usize,
    pub attention_token_limit: usize,
    pub input_extent: [usize; 3],
    /// Learned per-channel scale/shift after each conv block (off by
    /// default; there is no batch normalization in this architecture).
    pub channel_affine: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 4,
            base_filters: 16,
            levels: 4,
            kernel: 3,
            heads: 4,
            attention_token_limit: 512,
            input_extent: [64, 64, 64],
            channel_affine: false,
        }
    }
}

impl ModelConfig {
    /// Filters at encoder level `level` (the bottleneck is `level == levels`).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Attention width at a fusion: half the level's channel count, clamped
    /// to at least `heads` and rounded down to a multiple of `heads`.
    pub fn d_model_at(&self, level: usize) -> usize {
        let half = self.channels_at(level) / 2;
        if half <= self.heads {
            self.heads
        } else {
            half - half % self.heads
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0
            || self.num_classes == 0
            || self.base_filters == 0
            || self.levels == 0
            || self.heads == 0
            || self.attention_token_limit == 0
        {
            return Err(ModelError::BadConfig("zero-valued field".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::BadConfig(format!(
                "kernel {} must be odd",
                self.kernel
            )));
        }
        let stride = 1usize << self.levels;
        for &side in &self.input_extent {
            if side == 0 || side % stride != 0 {
                return Err(ModelError::BadConfig(format!(
                    "input extent {:?} must be positive multiples of 2^levels = {stride}",
                    self.input_extent
                )));
            }
        }
        Ok(())
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Param<E: Real> {
    pub name: String,
    pub tensor: Tensor<E>,
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    w: usize,
    b: usize,
    /// (gamma, beta) parameter slots when the channel-affine hook is on.
    affine: Option<(usize, usize)>,
}

#[derive(Clone, Copy, Debug)]
struct FusionIdx {
    q_reduce: ConvIdx,
    kv_reduce: ConvIdx,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    refine: ConvIdx,
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    conv1: ConvIdx,
    conv2: ConvIdx,
}

#[derive(Clone, Copy, Debug)]
struct DecoderIdx {
    up: ConvIdx,
    fuse: FusionIdx,
    block: BlockIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<BlockIdx>,
    bottleneck: BlockIdx,
    decoder: Vec<DecoderIdx>,
    head: ConvIdx,
}

/// Parameter registry plus the config it was built from. Every parameter is
/// registered exactly once, in a fixed order, so optimizers and checkpoints
/// see a stable sequence.
pub struct UNet3DMHA<E: Real> {
    config: ModelConfig,
    params: Vec<Param<E>>,
    layout: Layout,
}

/// Tape ids of the bound parameters, aligned with the registry order.
pub struct BoundParams {
    ids: Vec<ValueId>,
}

impl BoundParams {
    pub fn ids(&self) -> &[ValueId] {
        &self.ids
    }
}

/// Result of one forward pass: the head's logits, their softmax, and the
/// per-level shape trace.
pub struct ForwardPass {
    pub logits: ValueId,
    pub probs: ValueId,
    pub trace: ForwardTrace,
}

/// Spatial extents and channel counts observed during a forward pass, for
/// shape-telescoping assertions.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    /// (level, channels, extent) leaving each encoder block, before pooling.
    pub encoder: Vec<(usize, usize, [usize; 3])>,
    /// (channels, extent) of the bottleneck output.
    pub bottleneck: (usize, [usize; 3]),
    /// (level, channels, extent) leaving each decoder block.
    pub decoder: Vec<(usize, usize, [usize; 3])>,
}

struct Builder<E: Real> {
    params: Vec<Param<E>>,
    rng: Rng,
    kernel: usize,
    channel_affine: bool,
}

impl<E: Real> Builder<E> {
    /// He-normal conv weight (variance 2 / fan_in) with a zero bias.
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> ConvIdx {
        let fan_in = c_in * k * k * k;
        let std = libm::sqrt(2.0 / fan_in as f64);
        let n = c_out * c_in * k * k * k;
        let data: Vec<E> = (0..n)
            .map(|_| E::from_f64(self.rng.normal() * std))
            .collect();
        let w = self.push(
            format!("{name}.weight"),
            Tensor::from_vec(&[c_out, c_in, k, k, k], data),
        );
        let b = self.push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        ConvIdx { w, b, affine: None }
    }

    fn conv3(&mut self, name: &str, c_out: usize, c_in: usize) -> ConvIdx {
        let mut idx = self.conv(name, c_out, c_in, self.kernel);
        if self.channel_affine {
            let gamma = self.push(
                format!("{name}.gamma"),
                Tensor::filled(&[c_out], E::ONE),
            );
            let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[c_out]));
            idx.affine = Some((gamma, beta));
        }
        idx
    }

    /// Glorot-uniform square projection.
    fn projection(&mut self, name: &str, dim: usize) -> usize {
        let limit = libm::sqrt(6.0 / (2.0 * dim as f64));
        let data: Vec<E> = (0..dim * dim)
            .map(|_| E::from_f64(self.rng.range_f64(-limit, limit)))
            .collect();
        self.push(String::from(name), Tensor::from_vec(&[dim, dim], data))
    }

    fn push(&mut self, name: String, tensor: Tensor<E>) -> usize {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name, tensor });
        self.params.len() - 1
    }
}

impl<E: Real> UNet3DMHA<E> {
    /// Builds and deterministically initializes the parameter registry.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng: Rng::new(seed),
            kernel: config.kernel,
            channel_affine: config.channel_affine,
        };

        let mut encoder = Vec::with_capacity(config.levels);
        let mut c_prev = config.in_channels;
        for level in 0..config.levels {
            let f = config.channels_at(level);
            let conv1 = b.conv3(&format!("enc{level}.conv1"), f, c_prev);
            let conv2 = b.conv3(&format!("enc{level}.conv2"), f, f);
            encoder.push(BlockIdx { conv1, conv2 });
            c_prev = f;
        }

        let f_bottom = config.channels_at(config.levels);
        let bottleneck = BlockIdx {
            conv1: b.conv3("bottleneck.conv1", f_bottom, c_prev),
            conv2: b.conv3("bottleneck.conv2", f_bottom, f_bottom),
        };

        let mut decoder = Vec::with_capacity(config.levels);
        for level in (0..config.levels).rev() {
            let f = config.channels_at(level);
            let dm = config.d_model_at(level);
            let name = format!("dec{level}");
            let up = b.conv3(&format!("{name}.up"), f, 2 * f);
            let fuse = FusionIdx {
                q_reduce: b.conv(&format!("{name}.fuse.q_reduce"), dm, f, 1),
                kv_reduce: b.conv(&format!("{name}.fuse.kv_reduce"), dm, f, 1),
                wq: b.projection(&format!("{name}.fuse.att.wq"), dm),
                wk: b.projection(&format!("{name}.fuse.att.wk"), dm),
                wv: b.projection(&format!("{name}.fuse.att.wv"), dm),
                wo: b.projection(&format!("{name}.fuse.att.wo"), dm),
                refine: b.conv3(&format!("{name}.fuse.refine"), f, dm),
            };
            let block = BlockIdx {
                conv1: b.conv3(&format!("{name}.conv1"), f, 2 * f),
                conv2: b.conv3(&format!("{name}.conv2"), f, f),
            };
            decoder.push(DecoderIdx { up, fuse, block });
        }

        let head = b.conv("head", config.num_classes, config.base_filters, 1);

        Ok(UNet3DMHA {
            config,
            params: b.params,
            layout: Layout {
                encoder,
                bottleneck,
                decoder,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<E>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<E>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Replaces parameter values wholesale (checkpoint restore). Shapes and
    /// names must match the registry.
    pub fn load_params(&mut self, values: &[(String, Tensor<E>)]) -> Result<(), ModelError> {
        if values.len() != self.params.len() {
            return Err(ModelError::BadConfig(format!(
                "checkpoint has {} parameters, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (param, (name, tensor)) in self.params.iter_mut().zip(values) {
            if &param.name != name || param.tensor.shape() != tensor.shape() {
                return Err(ModelError::BadConfig(format!(
                    "checkpoint entry {name:?} {:?} does not match parameter {:?} {:?}",
                    tensor.shape(),
                    param.name,
                    param.tensor.shape()
                )));
            }
            param.tensor = tensor.clone();
        }
        Ok(())
    }

    /// Casts the whole registry to another precision (f64 gradient checks).
    pub fn cast<T: Real>(&self) -> UNet3DMHA<T> {
        UNet3DMHA {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Inserts every parameter onto the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<E>, trainable: bool) -> BoundParams {
        BoundParams {
            ids: self
                .params
                .iter()
                .map(|p| tape.leaf(p.tensor.clone(), trainable))
                .collect(),
        }
    }

    fn conv_block(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams,
        x: ValueId,
        idx: ConvIdx,
    ) -> TapeResult<ValueId> {
        let mut y = tape.conv3d(x, bound.ids[idx.w], bound.ids[idx.b])?;
        if let Some((gamma, beta)) = idx.affine {
            y = tape.channel_affine(y, bound.ids[gamma], bound.ids[beta])?;
        }
        Ok(tape.relu(y))
    }

    /// Full forward pass: `[in_channels, D, H, W]` to per-voxel class
    /// probabilities `[num_classes, D, H, W]`.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams,
        input: ValueId,
    ) -> TapeResult<ValueId> {
        Ok(self.forward_full(tape, bound, input)?.probs)
    }

    /// Forward pass that also records per-level shapes.
    pub fn forward_traced(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams,
        input: ValueId,
    ) -> TapeResult<(ValueId, ForwardTrace)> {
        let pass = self.forward_full(tape, bound, input)?;
        Ok((pass.probs, pass.trace))
    }

    /// Forward pass exposing the pre-softmax head output alongside the
    /// probabilities (training losses that fuse with the softmax consume
    /// the logits).
    pub fn forward_full(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams,
        input: ValueId,
    ) -> TapeResult<ForwardPass> {
        let shape = tape.value(input).shape().to_vec();
        let expect = [
            self.config.in_channels,
            self.config.input_extent[0],
            self.config.input_extent[1],
            self.config.input_extent[2],
        ];
        if shape != expect {
            return Err(TapeError::ShapeMismatch(format!(
                "forward: input {:?}, config expects {:?}",
                shape, expect
            )));
        }

        let mut trace = ForwardTrace::default();
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut x = input;

        for (level, block) in self.layout.encoder.iter().enumerate() {
            x = self.conv_block(tape, bound, x, block.conv1)?;
            x = self.conv_block(tape, bound, x, block.conv2)?;
            let s = tape.value(x).shape().to_vec();
            trace.encoder.push((level, s[0], [s[1], s[2], s[3]]));
            skips.push(x);
            x = tape.maxpool3d(x)?;
        }

        x = self.conv_block(tape, bound, x, self.layout.bottleneck.conv1)?;
        x = self.conv_block(tape, bound, x, self.layout.bottleneck.conv2)?;
        {
            let s = tape.value(x).shape().to_vec();
            trace.bottleneck = (s[0], [s[1], s[2], s[3]]);
        }

        for (i, dec) in self.layout.decoder.iter().enumerate() {
            let level = self.config.levels - 1 - i;
            x = tape.upsample3d(x)?;
            x = self.conv_block(tape, bound, x, dec.up)?;
            let fused = self.fusion_at(tape, bound, x, skips[level], &dec.fuse, level)?;
            x = tape.concat_channels(x, fused)?;
            x = self.conv_block(tape, bound, x, dec.block.conv1)?;
            x = self.conv_block(tape, bound, x, dec.block.conv2)?;
            let s = tape.value(x).shape().to_vec();
            trace.decoder.push((level, s[0], [s[1], s[2], s[3]]));
        }

        let logits = tape.conv3d(x, bound.ids[self.layout.head.w], bound.ids[self.layout.head.b])?;
        let probs = tape.softmax_channels(logits)?;
        Ok(ForwardPass {
            logits,
            probs,
            trace,
        })
    }

    /// Attention fusion of one decoder feature map with its same-level skip.
    pub fn mha_fusion(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams,
        decoder_feat: ValueId,
        skip_feat: ValueId,
        level: usize,
    ) -> TapeResult<ValueId> {
        let i = self.config.levels - 1 - level;
        let fuse = self.layout.decoder[i].fuse;
        self.fusion_at(tape, bound, decoder_feat, skip_feat, &fuse, level)
    }

    /// Attention fusion at one decoder level. Both feature maps are reduced
    /// to `d_model` channels by 1x1x1 convolutions, pooled until at most
    /// `attention_token_limit` voxels remain, flattened to tokens, mixed by
    /// cross-attention (decoder queries, skip keys/values), restored to the
    /// level's resolution, refined by a conv block, and added onto the skip
    /// path as a residual.
    fn fusion_at(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams,
        decoder_feat: ValueId,
        skip_feat: ValueId,
        fuse: &FusionIdx,
        level: usize,
    ) -> TapeResult<ValueId> {
        if tape.value(decoder_feat).shape() != tape.value(skip_feat).shape() {
            return Err(TapeError::ShapeMismatch(format!(
                "fusion: decoder {:?} vs skip {:?}",
                tape.value(decoder_feat).shape(),
                tape.value(skip_feat).shape()
            )));
        }
        let dm = self.config.d_model_at(level);

        let mut q = tape.conv3d(
            decoder_feat,
            bound.ids[fuse.q_reduce.w],
            bound.ids[fuse.q_reduce.b],
        )?;
        let mut kv = tape.conv3d(
            skip_feat,
            bound.ids[fuse.kv_reduce.w],
            bound.ids[fuse.kv_reduce.b],
        )?;

        // Pool by powers of two until the token count fits the limit.
        let mut pool_steps = 0usize;
        loop {
            let s = tape.value(q).shape().to_vec();
            let tokens = s[1] * s[2] * s[3];
            let divisible = s[1] % 2 == 0 && s[2] % 2 == 0 && s[3] % 2 == 0;
            if tokens <= self.config.attention_token_limit || !divisible {
                break;
            }
            q = tape.avgpool3d(q)?;
            kv = tape.avgpool3d(kv)?;
            pool_steps += 1;
        }

        let pooled = tape.value(q).shape().to_vec();
        let tokens = pooled[1] * pooled[2] * pooled[3];

        let q_mat = tape.reshape(q, &[dm, tokens])?;
        let q_tokens = tape.transpose2d(q_mat)?;
        let kv_mat = tape.reshape(kv, &[dm, tokens])?;
        let kv_tokens = tape.transpose2d(kv_mat)?;

        let weights = AttentionWeights {
            w_q: bound.ids[fuse.wq],
            w_k: bound.ids[fuse.wk],
            w_v: bound.ids[fuse.wv],
            w_o: bound.ids[fuse.wo],
        };
        let mixed = multihead_attention(tape, q_tokens, kv_tokens, self.config.heads, weights)?;

        let mixed_t = tape.transpose2d(mixed)?;
        let mut vol = tape.reshape(mixed_t, &[dm, pooled[1], pooled[2], pooled[3]])?;
        for _ in 0..pool_steps {
            vol = tape.upsample3d(vol)?;
        }

        let refined = tape.conv3d(vol, bound.ids[fuse.refine.w], bound.ids[fuse.refine.b])?;
        let refined = tape.relu(refined);
        tape.add(skip_feat, refined)
    }
}

/// Per-voxel argmax over the class axis; ties resolve to the lowest class.
pub fn predict_labels<E: Real>(probs: &Tensor<E>) -> LabelGrid {
    let shape = probs.shape();
    assert_eq!(shape.len(), 4, "expected [K, D, H, W] probabilities");
    let classes = shape[0];
    let voxels: usize = shape[1..].iter().product();
    let data = probs.data();
    let mut labels = Vec::with_capacity(voxels);
    for s in 0..voxels {
        let mut best_k = 0usize;
        let mut best = data[s];
        for k in 1..classes {
            let v = data[k * voxels + s];
            if v > best {
                best = v;
                best_k = k;
            }
        }
        labels.push(best_k as u8);
    }
    LabelGrid::new([shape[1], shape[2], shape[3]], labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            base_filters: 4,
            input_extent: [16, 16, 16],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn builds_are_seed_deterministic() {
        let a: UNet3DMHA<f32> = UNet3DMHA::build(micro_config(), 99).unwrap();
        let b: UNet3DMHA<f32> = UNet3DMHA::build(micro_config(), 99).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor, pb.tensor, "parameter {} differs", pa.name);
        }
        let c: UNet3DMHA<f32> = UNet3DMHA::build(micro_config(), 100).unwrap();
        assert_ne!(a.params[0].tensor, c.params[0].tensor);
    }

    #[test]
    fn filter_ladder_doubles_per_level() {
        let cfg = ModelConfig::default();
        assert_eq!(
            (0..=4).map(|l| cfg.channels_at(l)).collect::<Vec<_>>(),
            vec![16, 32, 64, 128, 256]
        );
    }

    #[test]
    fn d_model_is_divisible_by_heads() {
        for base in [4usize, 6, 16, 64] {
            let cfg = ModelConfig {
                base_filters: base,
                ..ModelConfig::default()
            };
            for level in 0..cfg.levels {
                let dm = cfg.d_model_at(level);
                assert_eq!(dm % cfg.heads, 0, "base {base} level {level}: dm {dm}");
                assert!(dm >= cfg.heads);
            }
        }
    }

    #[test]
    fn parameter_names_are_unique() {
        let m: UNet3DMHA<f32> = UNet3DMHA::build(micro_config(), 1).unwrap();
        for (i, p) in m.params.iter().enumerate() {
            for q in &m.params[i + 1..] {
                assert_ne!(p.name, q.name);
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_extents() {
        let mut cfg = ModelConfig::default();
        cfg.input_extent = [60, 64, 64];
        assert!(matches!(
            UNet3DMHA::<f32>::build(cfg, 0),
            Err(ModelError::BadConfig(_))
        ));
        let mut cfg = ModelConfig::default();
        cfg.kernel = 4;
        assert!(matches!(
            UNet3DMHA::<f32>::build(cfg, 0),
            Err(ModelError::BadConfig(_))
        ));
    }

    #[test]
    fn predict_labels_recovers_one_hot_and_breaks_ties_low() {
        // One-hot probabilities recover the exact class.
        let mut data = vec![0.0f32; 4 * 2];
        data[0] = 1.0; // voxel 0 -> class 0
        data[1 * 2 + 1] = 1.0; // voxel 1 -> class 1
        let probs = Tensor::from_vec(&[4, 1, 1, 2], data);
        let labels = predict_labels(&probs);
        assert_eq!(labels.data(), &[0, 1]);

        // Uniform probabilities give all background.
        let probs = Tensor::from_vec(&[4, 1, 1, 2], vec![0.25f32; 8]);
        assert_eq!(predict_labels(&probs).data(), &[0, 0]);
    }

    #[test]
    fn predict_labels_invariant_under_positive_rescale() {
        let mut rng = crate::rng::Rng::new(5);
        let n = 3 * 3 * 3;
        let data: Vec<f32> = (0..4 * n).map(|_| rng.next_f64() as f32).collect();
        let probs = Tensor::from_vec(&[4, 3, 3, 3], data.clone());
        let scaled = Tensor::from_vec(
            &[4, 3, 3, 3],
            data.iter().map(|&v| v * 3.5).collect(),
        );
        assert_eq!(predict_labels(&probs), predict_labels(&scaled));
    }
}
