//! Miniature 2D encoder-decoder with slice-transformer modules on
//! the skip connections and the bottleneck.
//!
//! The encoder treats the slice axis purely as a batch axis; any
//! cross-slice mixing happens in the per-scale attention modules. With
//! every attention module disabled the network degenerates to a pure
//! per-slice 2D net.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cat_module_forward, AttentionRecord, CatModuleParams, CatModuleVars};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Structural description of the network. Spatial input sizes must be
/// divisible by `2^scales * pool_k`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NetworkConfig {
    /// Number of downsampling steps L; feature scales are 0 (full res) .. L.
    pub scales: usize,
    /// Channel count per scale, `scales + 1` entries.
    pub filters: Vec<usize>,
    /// Slices per volume.
    pub slices: usize,
    pub in_channels: usize,
    pub classes: usize,
    /// Transformer blocks per attention module (N).
    pub transformer_blocks: usize,
    /// Attention heads per block (H).
    pub heads: usize,
    /// Average-pooling size for queries/keys (k).
    pub pool_k: usize,
    /// Scales carrying an attention module, subset of 1..=scales.
    pub cat_layers: BTreeSet<usize>,
    /// Apply the positional-encoding addition.
    pub pe_enabled: bool,
    /// Apply the transformer blocks.
    pub transformer_enabled: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            scales: 3,
            filters: vec![8, 16, 32, 64],
            slices: 12,
            in_channels: 1,
            classes: 3,
            transformer_blocks: 2,
            heads: 3,
            pool_k: 2,
            cat_layers: (1..=3).collect(),
            pe_enabled: true,
            transformer_enabled: true,
        }
    }
}

impl NetworkConfig {
    /// A configuration with every attention module removed.
    pub fn baseline(mut self) -> Self {
        self.cat_layers.clear();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 {
            return Err(Error::config("need at least one downsampling scale"));
        }
        // generous structural caps; full-scale configurations fit comfortably
        if self.scales > 8
            || self.slices > 1024
            || self.heads > 16
            || self.transformer_blocks > 16
            || self.pool_k > 64
            || self.filters.iter().any(|&f| f > 4096)
            || self.in_channels > 64
        {
            return Err(Error::config("network configuration exceeds supported size limits"));
        }
        if self.filters.len() != self.scales + 1 {
            return Err(Error::config(format!(
                "filters must list {} channel counts (scales + 1), got {}",
                self.scales + 1,
                self.filters.len()
            )));
        }
        if self.filters.iter().any(|&f| f == 0) {
            return Err(Error::config("filter counts must be positive"));
        }
        if let Some(&bad) = self.cat_layers.iter().find(|&&s| s == 0 || s > self.scales) {
            return Err(Error::config(format!(
                "cat layer {bad} outside valid range 1..={}",
                self.scales
            )));
        }
        if self.classes != crate::tensor::NUM_CLASSES {
            return Err(Error::config(format!(
                "only {} classes are supported",
                crate::tensor::NUM_CLASSES
            )));
        }
        if self.transformer_blocks < 1 {
            return Err(Error::config("transformer_blocks must be >= 1"));
        }
        if self.heads < 1 {
            return Err(Error::config("heads must be >= 1"));
        }
        if self.pool_k == 0 {
            return Err(Error::config("pool_k must be >= 1"));
        }
        if self.slices < 1 {
            return Err(Error::config("slices must be >= 1"));
        }
        Ok(())
    }

    /// Required divisor of the input height and width.
    pub fn spatial_divisor(&self) -> usize {
        (1usize << self.scales) * self.pool_k
    }

    pub fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4
            || shape[0] != self.slices
            || shape[3] != self.in_channels
        {
            return Err(Error::config(format!(
                "input shape {:?} does not match configured {} slices x {} channels",
                shape, self.slices, self.in_channels
            )));
        }
        let d = self.spatial_divisor();
        if shape[1] % d != 0 || shape[2] % d != 0 {
            return Err(Error::config(format!(
                "input {}x{} not divisible by {d} (2^scales * pool_k)",
                shape[1], shape[2]
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// conv -> instance norm -> leaky ReLU
#[derive(Clone, Debug)]
pub struct ConvBlockParams<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub norm_gain: Tensor<T>,
    pub norm_bias: Tensor<T>,
}

impl<T: Scalar> ConvBlockParams<T> {
    fn init(kh: usize, kw: usize, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        ConvBlockParams {
            kernel: Tensor::he_uniform(&[kh, kw, c_in, c_out], kh * kw * c_in, rng)
                .with_requires_grad(),
            bias: Tensor::zeros(&[c_out]).with_requires_grad(),
            norm_gain: Tensor::full(&[c_out], T::ONE).with_requires_grad(),
            norm_bias: Tensor::zeros(&[c_out]).with_requires_grad(),
        }
    }

    fn bind(&self, tape: &mut Tape<T>) -> ConvBlockVars {
        ConvBlockVars {
            kernel: tape.leaf(self.kernel.clone()),
            bias: tape.leaf(self.bias.clone()),
            norm_gain: tape.leaf(self.norm_gain.clone()),
            norm_bias: tape.leaf(self.norm_bias.clone()),
        }
    }
}

#[derive(Copy, Clone)]
pub struct ConvBlockVars {
    kernel: Var,
    bias: Var,
    norm_gain: Var,
    norm_bias: Var,
}

impl ConvBlockVars {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let conv = tape.conv2d(x, self.kernel, Some(self.bias), stride, pad)?;
        let norm = tape.instance_norm2d(
            conv,
            self.norm_gain,
            self.norm_bias,
            T::from_f64(INSTANCE_NORM_EPS),
        )?;
        Ok(tape.leaky_relu(norm, T::from_f64(LEAKY_SLOPE)))
    }
}

/// nearest-neighbor 2x upsample -> 1x1 conv
#[derive(Clone, Debug)]
pub struct UpsampleParams<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> UpsampleParams<T> {
    fn init(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        UpsampleParams {
            kernel: Tensor::he_uniform(&[1, 1, c_in, c_out], c_in, rng).with_requires_grad(),
            bias: Tensor::zeros(&[c_out]).with_requires_grad(),
        }
    }

    fn bind(&self, tape: &mut Tape<T>) -> UpsampleVars {
        UpsampleVars {
            kernel: tape.leaf(self.kernel.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

#[derive(Copy, Clone)]
pub struct UpsampleVars {
    kernel: Var,
    bias: Var,
}

impl UpsampleVars {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let up = tape.upsample2x(x)?;
        tape.conv2d(up, self.kernel, Some(self.bias), 1, 0)
    }
}

// ---------------------------------------------------------------------------
// Encoder / decoder
// ---------------------------------------------------------------------------

/// Full-resolution stem plus one strided stage per scale.
#[derive(Clone, Debug)]
pub struct EncoderParams<T: Scalar> {
    pub stem: [ConvBlockParams<T>; 2],
    /// `stages[i]` produces scale `i + 1`; first conv has stride 2.
    pub stages: Vec<[ConvBlockParams<T>; 2]>,
}

impl<T: Scalar> EncoderParams<T> {
    fn init(cfg: &NetworkConfig, rng: &mut impl Rng) -> Self {
        let f = &cfg.filters;
        let stem = [
            ConvBlockParams::init(3, 3, cfg.in_channels, f[0], rng),
            ConvBlockParams::init(3, 3, f[0], f[0], rng),
        ];
        let stages = (1..=cfg.scales)
            .map(|i| {
                [
                    ConvBlockParams::init(3, 3, f[i - 1], f[i], rng),
                    ConvBlockParams::init(3, 3, f[i], f[i], rng),
                ]
            })
            .collect();
        EncoderParams { stem, stages }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> EncoderVars {
        EncoderVars {
            stem: [self.stem[0].bind(tape), self.stem[1].bind(tape)],
            stages: self
                .stages
                .iter()
                .map(|s| [s[0].bind(tape), s[1].bind(tape)])
                .collect(),
        }
    }
}

pub struct EncoderVars {
    stem: [ConvBlockVars; 2],
    stages: Vec<[ConvBlockVars; 2]>,
}

/// Runs the encoder; returns the feature stack per scale `1..=L`
/// (index 0 of the result is scale 1).
pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x0: Var,
    enc: &EncoderVars,
) -> Result<Vec<Var>> {
    let mut cur = enc.stem[0].forward(tape, x0, 1, 1)?;
    cur = enc.stem[1].forward(tape, cur, 1, 1)?;
    let mut features = Vec::with_capacity(enc.stages.len());
    for stage in &enc.stages {
        cur = stage[0].forward(tape, cur, 2, 1)?;
        cur = stage[1].forward(tape, cur, 1, 1)?;
        features.push(cur);
    }
    Ok(features)
}

#[derive(Clone, Debug)]
pub struct DecoderStageParams<T: Scalar> {
    pub up: UpsampleParams<T>,
    pub convs: [ConvBlockParams<T>; 2],
}

/// Bottleneck stage, one skip-fusing stage per intermediate scale, a
/// final full-resolution stage without a skip, and the 1x1 classifier.
#[derive(Clone, Debug)]
pub struct DecoderParams<T: Scalar> {
    pub bottleneck: [ConvBlockParams<T>; 2],
    /// Stages for scales `L-1` down to `1`, in that order.
    pub stages: Vec<DecoderStageParams<T>>,
    pub final_up: UpsampleParams<T>,
    pub final_convs: [ConvBlockParams<T>; 2],
    pub head_kernel: Tensor<T>,
    pub head_bias: Tensor<T>,
}

impl<T: Scalar> DecoderParams<T> {
    fn init(cfg: &NetworkConfig, rng: &mut impl Rng) -> Self {
        let f = &cfg.filters;
        let l = cfg.scales;
        let bottleneck = [
            ConvBlockParams::init(3, 3, f[l], f[l], rng),
            ConvBlockParams::init(3, 3, f[l], f[l], rng),
        ];
        let stages = (1..l)
            .rev()
            .map(|i| DecoderStageParams {
                up: UpsampleParams::init(f[i + 1], f[i], rng),
                convs: [
                    ConvBlockParams::init(3, 3, 2 * f[i], f[i], rng),
                    ConvBlockParams::init(3, 3, f[i], f[i], rng),
                ],
            })
            .collect();
        let final_up = UpsampleParams::init(f[1], f[0], rng);
        let final_convs = [
            ConvBlockParams::init(3, 3, f[0], f[0], rng),
            ConvBlockParams::init(3, 3, f[0], f[0], rng),
        ];
        DecoderParams {
            bottleneck,
            stages,
            final_up,
            final_convs,
            head_kernel: Tensor::he_uniform(&[1, 1, f[0], cfg.classes], f[0], rng)
                .with_requires_grad(),
            head_bias: Tensor::zeros(&[cfg.classes]).with_requires_grad(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> DecoderVars {
        DecoderVars {
            bottleneck: [self.bottleneck[0].bind(tape), self.bottleneck[1].bind(tape)],
            stages: self
                .stages
                .iter()
                .map(|s| DecoderStageVars {
                    up: s.up.bind(tape),
                    convs: [s.convs[0].bind(tape), s.convs[1].bind(tape)],
                })
                .collect(),
            final_up: self.final_up.bind(tape),
            final_convs: [self.final_convs[0].bind(tape), self.final_convs[1].bind(tape)],
            head_kernel: tape.leaf(self.head_kernel.clone()),
            head_bias: tape.leaf(self.head_bias.clone()),
        }
    }
}

pub struct DecoderStageVars {
    up: UpsampleVars,
    convs: [ConvBlockVars; 2],
}

pub struct DecoderVars {
    bottleneck: [ConvBlockVars; 2],
    stages: Vec<DecoderStageVars>,
    final_up: UpsampleVars,
    final_convs: [ConvBlockVars; 2],
    head_kernel: Var,
    head_bias: Var,
}

/// Runs the decoder over per-scale features (scales `1..=L`, possibly already
/// passed through their attention modules) and produces per-voxel logits.
pub fn decoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    features: &[Var],
    dec: &DecoderVars,
) -> Result<Var> {
    let scales = features.len();
    if dec.stages.len() + 1 != scales {
        return Err(Error::config(format!(
            "decoder built for {} scales but got {} feature maps",
            dec.stages.len() + 1,
            scales
        )));
    }
    let mut cur = dec.bottleneck[0].forward(tape, features[scales - 1], 1, 1)?;
    cur = dec.bottleneck[1].forward(tape, cur, 1, 1)?;
    // stages run from scale L-1 down to 1
    for (stage, &skip) in dec.stages.iter().zip(features.iter().rev().skip(1)) {
        let up = stage.up.forward(tape, cur)?;
        let fused = tape.concat_channels(&[skip, up])?;
        cur = stage.convs[0].forward(tape, fused, 1, 1)?;
        cur = stage.convs[1].forward(tape, cur, 1, 1)?;
    }
    cur = dec.final_up.forward(tape, cur)?;
    cur = dec.final_convs[0].forward(tape, cur, 1, 1)?;
    cur = dec.final_convs[1].forward(tape, cur, 1, 1)?;
    tape.conv2d(cur, dec.head_kernel, Some(dec.head_bias), 1, 0)
}

// ---------------------------------------------------------------------------
// Full network
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SegNet<T: Scalar> {
    pub config: NetworkConfig,
    pub encoder: EncoderParams<T>,
    /// Attention module per scale `1..=L`; `None` for scales not in `cat_layers`.
    pub cats: Vec<Option<CatModuleParams<T>>>,
    pub decoder: DecoderParams<T>,
}

pub struct SegNetVars {
    pub encoder: EncoderVars,
    pub cats: Vec<Option<CatModuleVars>>,
    pub decoder: DecoderVars,
}

impl<T: Scalar> SegNet<T> {
    pub fn init(config: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::init(&config, rng);
        let cats = (1..=config.scales)
            .map(|i| {
                if config.cat_layers.contains(&i) {
                    CatModuleParams::init(
                        config.slices,
                        config.filters[i],
                        config.transformer_blocks,
                        config.heads,
                        config.pool_k,
                        rng,
                    )
                    .map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = DecoderParams::init(&config, rng);
        Ok(SegNet {
            config,
            encoder,
            cats,
            decoder,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> SegNetVars {
        SegNetVars {
            encoder: self.encoder.bind(tape),
            cats: self
                .cats
                .iter()
                .map(|c| c.as_ref().map(|c| c.bind(tape)))
                .collect(),
            decoder: self.decoder.bind(tape),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.for_each_param(&mut |_, t| total += t.numel());
        total
    }

    /// Visits every parameter as `(name, tensor)` in a stable order.
    pub fn for_each_param(&self, f: &mut impl FnMut(&str, &Tensor<T>)) {
        let visit_block = |f: &mut dyn FnMut(&str, &Tensor<T>), prefix: &str, b: &ConvBlockParams<T>| {
            f(&format!("{prefix}.kernel"), &b.kernel);
            f(&format!("{prefix}.bias"), &b.bias);
            f(&format!("{prefix}.norm_gain"), &b.norm_gain);
            f(&format!("{prefix}.norm_bias"), &b.norm_bias);
        };
        visit_block(f, "encoder.stem.conv0", &self.encoder.stem[0]);
        visit_block(f, "encoder.stem.conv1", &self.encoder.stem[1]);
        for (idx, stage) in self.encoder.stages.iter().enumerate() {
            let scale = idx + 1;
            visit_block(f, &format!("encoder.scale{scale}.conv0"), &stage[0]);
            visit_block(f, &format!("encoder.scale{scale}.conv1"), &stage[1]);
        }
        for (idx, cat) in self.cats.iter().enumerate() {
            let scale = idx + 1;
            if let Some(cat) = cat {
                f(&format!("cat.scale{scale}.pe"), &cat.pe);
                for (bi, block) in cat.blocks.iter().enumerate() {
                    let bp = format!("cat.scale{scale}.block{bi}");
                    for (hi, head) in block.heads.iter().enumerate() {
                        f(&format!("{bp}.head{hi}.w_q"), &head.w_q);
                        f(&format!("{bp}.head{hi}.w_k"), &head.w_k);
                        f(&format!("{bp}.head{hi}.w_v"), &head.w_v);
                    }
                    f(&format!("{bp}.w1"), &block.w1);
                    f(&format!("{bp}.b1"), &block.b1);
                    f(&format!("{bp}.w2"), &block.w2);
                    f(&format!("{bp}.b2"), &block.b2);
                    f(&format!("{bp}.ln1_gain"), &block.ln1_gain);
                    f(&format!("{bp}.ln1_bias"), &block.ln1_bias);
                    f(&format!("{bp}.ln2_gain"), &block.ln2_gain);
                    f(&format!("{bp}.ln2_bias"), &block.ln2_bias);
                }
            }
        }
        visit_block(f, "decoder.bottleneck.conv0", &self.decoder.bottleneck[0]);
        visit_block(f, "decoder.bottleneck.conv1", &self.decoder.bottleneck[1]);
        for (idx, stage) in self.decoder.stages.iter().enumerate() {
            let scale = self.config.scales - 1 - idx;
            let sp = format!("decoder.scale{scale}");
            f(&format!("{sp}.up.kernel"), &stage.up.kernel);
            f(&format!("{sp}.up.bias"), &stage.up.bias);
            visit_block(f, &format!("{sp}.conv0"), &stage.convs[0]);
            visit_block(f, &format!("{sp}.conv1"), &stage.convs[1]);
        }
        f("decoder.scale0.up.kernel", &self.decoder.final_up.kernel);
        f("decoder.scale0.up.bias", &self.decoder.final_up.bias);
        visit_block(f, "decoder.scale0.conv0", &self.decoder.final_convs[0]);
        visit_block(f, "decoder.scale0.conv1", &self.decoder.final_convs[1]);
        f("head.kernel", &self.decoder.head_kernel);
        f("head.bias", &self.decoder.head_bias);
    }

    /// Mutable variant of [`Self::for_each_param`], same order and names.
    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        let visit_block =
            |f: &mut dyn FnMut(&str, &mut Tensor<T>), prefix: &str, b: &mut ConvBlockParams<T>| {
                f(&format!("{prefix}.kernel"), &mut b.kernel);
                f(&format!("{prefix}.bias"), &mut b.bias);
                f(&format!("{prefix}.norm_gain"), &mut b.norm_gain);
                f(&format!("{prefix}.norm_bias"), &mut b.norm_bias);
            };
        visit_block(f, "encoder.stem.conv0", &mut self.encoder.stem[0]);
        visit_block(f, "encoder.stem.conv1", &mut self.encoder.stem[1]);
        for (idx, stage) in self.encoder.stages.iter_mut().enumerate() {
            let scale = idx + 1;
            let (s0, s1) = stage.split_at_mut(1);
            visit_block(f, &format!("encoder.scale{scale}.conv0"), &mut s0[0]);
            visit_block(f, &format!("encoder.scale{scale}.conv1"), &mut s1[0]);
        }
        for (idx, cat) in self.cats.iter_mut().enumerate() {
            let scale = idx + 1;
            if let Some(cat) = cat {
                f(&format!("cat.scale{scale}.pe"), &mut cat.pe);
                for (bi, block) in cat.blocks.iter_mut().enumerate() {
                    let bp = format!("cat.scale{scale}.block{bi}");
                    for (hi, head) in block.heads.iter_mut().enumerate() {
                        f(&format!("{bp}.head{hi}.w_q"), &mut head.w_q);
                        f(&format!("{bp}.head{hi}.w_k"), &mut head.w_k);
                        f(&format!("{bp}.head{hi}.w_v"), &mut head.w_v);
                    }
                    f(&format!("{bp}.w1"), &mut block.w1);
                    f(&format!("{bp}.b1"), &mut block.b1);
                    f(&format!("{bp}.w2"), &mut block.w2);
                    f(&format!("{bp}.b2"), &mut block.b2);
                    f(&format!("{bp}.ln1_gain"), &mut block.ln1_gain);
                    f(&format!("{bp}.ln1_bias"), &mut block.ln1_bias);
                    f(&format!("{bp}.ln2_gain"), &mut block.ln2_gain);
                    f(&format!("{bp}.ln2_bias"), &mut block.ln2_bias);
                }
            }
        }
        visit_block(f, "decoder.bottleneck.conv0", &mut self.decoder.bottleneck[0]);
        visit_block(f, "decoder.bottleneck.conv1", &mut self.decoder.bottleneck[1]);
        let scales = self.config.scales;
        for (idx, stage) in self.decoder.stages.iter_mut().enumerate() {
            let scale = scales - 1 - idx;
            let sp = format!("decoder.scale{scale}");
            f(&format!("{sp}.up.kernel"), &mut stage.up.kernel);
            f(&format!("{sp}.up.bias"), &mut stage.up.bias);
            let (c0, c1) = stage.convs.split_at_mut(1);
            visit_block(f, &format!("{sp}.conv0"), &mut c0[0]);
            visit_block(f, &format!("{sp}.conv1"), &mut c1[0]);
        }
        f("decoder.scale0.up.kernel", &mut self.decoder.final_up.kernel);
        f("decoder.scale0.up.bias", &mut self.decoder.final_up.bias);
        let (fc0, fc1) = self.decoder.final_convs.split_at_mut(1);
        visit_block(f, "decoder.scale0.conv0", &mut fc0[0]);
        visit_block(f, "decoder.scale0.conv1", &mut fc1[0]);
        f("head.kernel", &mut self.decoder.head_kernel);
        f("head.bias", &mut self.decoder.head_bias);
    }
}

/// Collects the tape handles of every parameter, in [`SegNet::for_each_param`]
/// order; used to pair gradients with parameters after a backward pass.
pub fn collect_vars(vars: &SegNetVars) -> Vec<Var> {
    let mut out = Vec::new();
    let push_block = |out: &mut Vec<Var>, b: &ConvBlockVars| {
        out.extend([b.kernel, b.bias, b.norm_gain, b.norm_bias]);
    };
    push_block(&mut out, &vars.encoder.stem[0]);
    push_block(&mut out, &vars.encoder.stem[1]);
    for stage in &vars.encoder.stages {
        push_block(&mut out, &stage[0]);
        push_block(&mut out, &stage[1]);
    }
    for cat in vars.cats.iter().flatten() {
        out.push(cat.pe);
        for block in &cat.blocks {
            for head in &block.heads {
                out.extend([head.w_q, head.w_k, head.w_v]);
            }
            out.extend([
                block.w1, block.b1, block.w2, block.b2, block.ln1_gain, block.ln1_bias,
                block.ln2_gain, block.ln2_bias,
            ]);
        }
    }
    push_block(&mut out, &vars.decoder.bottleneck[0]);
    push_block(&mut out, &vars.decoder.bottleneck[1]);
    for stage in &vars.decoder.stages {
        out.extend([stage.up.kernel, stage.up.bias]);
        push_block(&mut out, &stage.convs[0]);
        push_block(&mut out, &stage.convs[1]);
    }
    out.extend([vars.decoder.final_up.kernel, vars.decoder.final_up.bias]);
    push_block(&mut out, &vars.decoder.final_convs[0]);
    push_block(&mut out, &vars.decoder.final_convs[1]);
    out.extend([vars.decoder.head_kernel, vars.decoder.head_bias]);
    out
}

/// Encoder -> per-scale attention modules -> decoder.
///
/// Attention matrices are materialized into [`AttentionRecord`]s only when
/// `capture` is set.
pub fn catnet_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x0: Var,
    vars: &SegNetVars,
    cfg: &NetworkConfig,
    capture: bool,
) -> Result<(Var, Vec<AttentionRecord<T>>)> {
    cfg.check_input_shape(tape.value(x0).shape())?;
    let features = encoder_forward(tape, x0, &vars.encoder)?;
    let mut records = Vec::new();
    let mut fused = Vec::with_capacity(features.len());
    for (idx, &feat) in features.iter().enumerate() {
        let scale = idx + 1;
        match &vars.cats[idx] {
            Some(cat) => {
                let (z, mats) =
                    cat_module_forward(tape, feat, cat, cfg.pe_enabled, cfg.transformer_enabled)?;
                if capture {
                    for (block, head, a) in mats {
                        records.push(AttentionRecord {
                            scale,
                            block,
                            head,
                            matrix: tape.value(a).clone(),
                        });
                    }
                }
                fused.push(z);
            }
            None => fused.push(feat),
        }
    }
    let logits = decoder_forward(tape, &fused, &vars.decoder)?;
    Ok((logits, records))
}
