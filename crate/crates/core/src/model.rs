//! U-Net family: plain U-Net, attention U-Net, and attention U-Net with an
//! input image pyramid, each optionally deeply supervised.
//!
//! Layout for `depth = D` and `base_channels = B`:
//!
//! * encoder stage `s` (`0..D`) runs two 3x3 conv + ReLU layers with
//!   `B * 2^s` output channels; stages after the first start from a 2x2
//!   max-pool of the previous stage. With the input pyramid, the input
//!   average-pooled to the stage's resolution is concatenated on first.
//! * the last encoder stage is the bottleneck. Decoder scale `s`
//!   (`D-2` down to `0`) upsamples the coarser decoder features
//!   bilinearly, concatenates the skip features of encoder stage `s`
//!   (attention-gated for `s >= 1` in the attention variants) and applies
//!   two 3x3 conv + ReLU layers with `B * 2^s` channels.
//! * output heads are 1x1 conv + sigmoid. Deep supervision puts one on every
//!   decoder scale (`D - 1` heads, coarsest first); otherwise only the
//!   full-resolution scale has one.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Padding, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Unet,
    AttnUnet,
    AttnUnetMultiInput,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::AttnUnet => "attn_unet",
            Variant::AttnUnetMultiInput => "attn_unet_multi_input",
        }
    }

    pub fn gated(self) -> bool {
        !matches!(self, Variant::Unet)
    }

    pub fn pyramid(self) -> bool {
        matches!(self, Variant::AttnUnetMultiInput)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Variant::Unet),
            "attn_unet" | "attn" => Ok(Variant::AttnUnet),
            "attn_unet_multi_input" | "attn_multi" => Ok(Variant::AttnUnetMultiInput),
            _ => Err(Error::InvalidConfig(format!(
                "variant must be unet, attn_unet or attn_unet_multi_input, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Number of encoder stages, bottleneck included.
    pub depth: usize,
    pub base_channels: usize,
    pub deep_supervision: bool,
    pub input_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::AttnUnetMultiInput,
            depth: 4,
            base_channels: 16,
            deep_supervision: true,
            input_channels: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidConfig(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.depth > 12 {
            return Err(Error::InvalidConfig(format!("depth {} is unreasonably large", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be >= 1".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::InvalidConfig("input_channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn head_count(&self) -> usize {
        if self.deep_supervision {
            self.depth - 1
        } else {
            1
        }
    }

    /// Decoder scales carrying an output head, coarsest first.
    pub fn head_scales(&self) -> Vec<usize> {
        if self.deep_supervision {
            (0..self.depth - 1).rev().collect()
        } else {
            vec![0]
        }
    }

    /// `key = value` lines, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.label().to_string()),
            ("depth", self.depth.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("deep_supervision", self.deep_supervision.to_string()),
            ("input_channels", self.input_channels.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in pairs {
            let bad = |_| Error::InvalidConfig(format!("bad value for {k}: {v:?}"));
            match k {
                "variant" => cfg.variant = v.parse()?,
                "depth" => cfg.depth = v.parse().map_err(bad)?,
                "base_channels" => cfg.base_channels = v.parse().map_err(bad)?,
                "deep_supervision" => {
                    cfg.deep_supervision = v.parse().map_err(|_| Error::InvalidConfig(format!("bad value for {k}: {v:?}")))?
                }
                "input_channels" => cfg.input_channels = v.parse().map_err(bad)?,
                "seed" => cfg.seed = v.parse().map_err(|_| Error::InvalidConfig(format!("bad value for {k}: {v:?}")))?,
                _ => return Err(Error::InvalidConfig(format!("unknown model key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct ConvSlot {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct GateSlot {
    w_x: usize,
    w_g: usize,
    b_g: usize,
    psi: usize,
    b_psi: usize,
}

/// Weights of one additive attention gate.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGateParams<T> {
    /// `[F, Cx, 1, 1]` query transform.
    pub w_x: Tensor<T>,
    /// `[F, Cg, 1, 1]` gating transform.
    pub w_g: Tensor<T>,
    /// `[F]`
    pub b_g: Tensor<T>,
    /// `[1, F, 1, 1]`
    pub psi: Tensor<T>,
    /// `[1]`
    pub b_psi: Tensor<T>,
}

/// [`AttentionGateParams`] placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w_x: Var,
    pub w_g: Var,
    pub b_g: Var,
    pub psi: Var,
    pub b_psi: Var,
}

impl<T: Scalar> AttentionGateParams<T> {
    pub fn zeros(query_channels: usize, gating_channels: usize, inter: usize) -> Self {
        AttentionGateParams {
            w_x: Tensor::zeros(vec![inter, query_channels, 1, 1]),
            w_g: Tensor::zeros(vec![inter, gating_channels, 1, 1]),
            b_g: Tensor::zeros(vec![inter]),
            psi: Tensor::zeros(vec![1, inter, 1, 1]),
            b_psi: Tensor::zeros(vec![1]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wx = self.w_x.dims4("attention_gate")?;
        let wg = self.w_g.dims4("attention_gate")?;
        let psi = self.psi.dims4("attention_gate")?;
        let inter = wx[0];
        if wg[0] != inter || self.b_g.shape() != [inter] {
            return Err(Error::shape(
                "attention_gate",
                "W_x, W_g and b_g must share the intermediate channel count",
            ));
        }
        if psi[0] != 1 || psi[1] != inter || self.b_psi.shape() != [1] {
            return Err(Error::shape("attention_gate", "psi must map the intermediate channels to one"));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> GateVars {
        GateVars {
            w_x: tape.leaf(self.w_x.clone()),
            w_g: tape.leaf(self.w_g.clone()),
            b_g: tape.leaf(self.b_g.clone()),
            psi: tape.leaf(self.psi.clone()),
            b_psi: tape.leaf(self.b_psi.clone()),
        }
    }
}

/// Additive attention gate.
///
/// `q = psi^T relu(W_x^T x + up(W_g^T g + b_g)) + b_psi`, `alpha = sigmoid(q)`,
/// `gated = alpha * x` with `alpha` shared by all channels of `x`. The 1x1
/// gating transform runs at the coarse resolution and is then bilinearly
/// upsampled; both are linear and the interpolation weights sum to one, so
/// this equals transforming the upsampled signal.
///
/// Returns `(gated, alpha)`.
pub fn attention_gate<T: Scalar>(tape: &mut Tape<T>, x: Var, g: Var, p: &GateVars) -> Result<(Var, Var)> {
    let [nx, _, hx, wx] = tape.value(x).dims4("attention_gate")?;
    let [ng, _, hg, wg] = tape.value(g).dims4("attention_gate")?;
    if nx != ng || hx != 2 * hg || wx != 2 * wg {
        return Err(Error::shape(
            "attention_gate",
            format!("gating signal {hg}x{wg} must be exactly half of the query {hx}x{wx}"),
        ));
    }
    let theta = tape.conv2d(x, p.w_x, None, Padding::Same)?;
    let phi = tape.conv2d(g, p.w_g, Some(p.b_g), Padding::Same)?;
    let phi_up = tape.upsample_bilinear(phi)?;
    let joined = tape.add(theta, phi_up)?;
    let act = tape.relu(joined);
    let q = tape.conv2d(act, p.psi, Some(p.b_psi), Padding::Same)?;
    let alpha = tape.sigmoid(q);
    let gated = tape.mul(x, alpha)?;
    Ok((gated, alpha))
}

/// Forward results: probability maps (coarsest first) and the attention
/// coefficients of every gate (coarsest first).
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub heads: Vec<Var>,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    encoder: Vec<[ConvSlot; 2]>,
    /// Indexed by decoder scale `0..depth-1`.
    decoder: Vec<[ConvSlot; 2]>,
    gates: Vec<Option<GateSlot>>,
    heads: Vec<(usize, ConvSlot)>,
}

struct Builder<T> {
    params: Vec<Param<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    fn weight(&mut self, name: String, shape: [usize; 4]) -> usize {
        let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(-bound..bound)));
        self.push(name, t)
    }

    fn conv(&mut self, prefix: &str, out: usize, inp: usize, k: usize) -> ConvSlot {
        let weight = self.weight(format!("{prefix}.weight"), [out, inp, k, k]);
        let bias = self.push(format!("{prefix}.bias"), Tensor::zeros(vec![out]));
        ConvSlot { weight, bias }
    }
}

impl<T: Scalar> Model<T> {
    /// Builds a model with freshly initialised weights drawn from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let d = cfg.depth;
        let pyramid = if cfg.variant.pyramid() { cfg.input_channels } else { 0 };

        let mut encoder = Vec::with_capacity(d);
        for s in 0..d {
            let inp = if s == 0 { cfg.input_channels } else { cfg.channels(s - 1) + pyramid };
            let c = cfg.channels(s);
            encoder.push([b.conv(&format!("enc{s}.conv1"), c, inp, 3), b.conv(&format!("enc{s}.conv2"), c, c, 3)]);
        }

        let mut gates = vec![None; d - 1];
        if cfg.variant.gated() {
            for (s, slot) in gates.iter_mut().enumerate().skip(1) {
                let cx = cfg.channels(s);
                let cg = cfg.channels(s + 1);
                let inter = (cx / 2).max(1);
                *slot = Some(GateSlot {
                    w_x: b.weight(format!("gate{s}.w_x"), [inter, cx, 1, 1]),
                    w_g: b.weight(format!("gate{s}.w_g"), [inter, cg, 1, 1]),
                    b_g: b.push(format!("gate{s}.b_g"), Tensor::zeros(vec![inter])),
                    psi: b.weight(format!("gate{s}.psi"), [1, inter, 1, 1]),
                    b_psi: b.push(format!("gate{s}.b_psi"), Tensor::zeros(vec![1])),
                });
            }
        }

        let mut decoder = Vec::with_capacity(d - 1);
        for s in 0..d - 1 {
            let c = cfg.channels(s);
            let inp = cfg.channels(s + 1) + c;
            decoder.push([b.conv(&format!("dec{s}.conv1"), c, inp, 3), b.conv(&format!("dec{s}.conv2"), c, c, 3)]);
        }

        let heads = cfg
            .head_scales()
            .into_iter()
            .map(|s| (s, b.conv(&format!("head{s}"), 1, cfg.channels(s), 1)))
            .collect();

        Ok(Model {
            config: cfg,
            params: b.params,
            encoder,
            decoder,
            gates,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn gate_count(&self) -> usize {
        self.gates.iter().flatten().count()
    }

    /// Gate weights at decoder scale `scale`, if that skip is gated.
    pub fn gate_params(&self, scale: usize) -> Option<AttentionGateParams<T>> {
        let g = self.gates.get(scale).copied().flatten()?;
        Some(AttentionGateParams {
            w_x: self.params[g.w_x].value.clone(),
            w_g: self.params[g.w_g].value.clone(),
            b_g: self.params[g.b_g].value.clone(),
            psi: self.params[g.psi].value.clone(),
            b_psi: self.params[g.b_psi].value.clone(),
        })
    }

    /// Puts every parameter on the tape, as leaves when `trainable` and as
    /// constants otherwise. The result is indexed like [`Model::params`].
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Checks a `[N,C,H,W]` input shape against the configuration.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = match *shape {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::shape("model_forward", format!("input must be [N,C,H,W], got {shape:?}"))),
        };
        if c != self.config.input_channels {
            return Err(Error::shape(
                "model_forward",
                format!("model expects {} input channels, got {c}", self.config.input_channels),
            ));
        }
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::shape(
                "model_forward",
                format!("spatial size {h}x{w} must be a positive multiple of {m}"),
            ));
        }
        Ok(())
    }

    fn conv_relu(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, slot: ConvSlot) -> Result<Var> {
        let y = tape.conv2d(x, vars[slot.weight], Some(vars[slot.bias]), Padding::Same)?;
        Ok(tape.relu(y))
    }

    pub fn forward(&self, tape: &mut Tape<T>, input: Var, vars: &[Var]) -> Result<ModelOutputs> {
        self.check_input(tape.value(input).shape())?;
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "model has {} parameters, {} vars supplied",
                self.params.len(),
                vars.len()
            )));
        }
        let d = self.config.depth;

        let mut pyramid = Vec::new();
        if self.config.variant.pyramid() {
            let mut level = input;
            for _ in 1..d {
                level = tape.avgpool2d(level)?;
                pyramid.push(level);
            }
        }

        let mut features: Vec<Var> = Vec::with_capacity(d);
        for (s, [c1, c2]) in self.encoder.iter().enumerate() {
            let mut h = if s == 0 { input } else { tape.maxpool2d(features[s - 1])? };
            if s > 0 && !pyramid.is_empty() {
                h = tape.concat_channels(h, pyramid[s - 1])?;
            }
            let h = self.conv_relu(tape, vars, h, *c1)?;
            features.push(self.conv_relu(tape, vars, h, *c2)?);
        }

        let mut current = features[d - 1];
        let mut heads = Vec::with_capacity(self.heads.len());
        let mut attention = Vec::new();
        for s in (0..d - 1).rev() {
            let up = tape.upsample_bilinear(current)?;
            let mut skip = features[s];
            if let Some(g) = self.gates[s] {
                let gv = GateVars {
                    w_x: vars[g.w_x],
                    w_g: vars[g.w_g],
                    b_g: vars[g.b_g],
                    psi: vars[g.psi],
                    b_psi: vars[g.b_psi],
                };
                let (gated, alpha) = attention_gate(tape, skip, current, &gv)?;
                skip = gated;
                attention.push(alpha);
            }
            let joined = tape.concat_channels(up, skip)?;
            let [c1, c2] = self.decoder[s];
            let h = self.conv_relu(tape, vars, joined, c1)?;
            current = self.conv_relu(tape, vars, h, c2)?;
            if let Some((_, slot)) = self.heads.iter().find(|(hs, _)| *hs == s) {
                let logits = tape.conv2d(current, vars[slot.weight], Some(vars[slot.bias]), Padding::Same)?;
                heads.push(tape.sigmoid(logits));
            }
        }
        Ok(ModelOutputs { heads, attention })
    }

    /// Inference: head probability maps, coarsest first.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, x, &vars)?;
        Ok(out.heads.iter().map(|&h| tape.value(h).clone()).collect())
    }

    /// Replaces parameter values in order; shapes must match.
    pub fn set_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {} has shape {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = v;
        }
        Ok(())
    }
}

/// Downsamples a binary `[N,1,H,W]` mask by a power-of-two `factor` with
/// repeated 2x2 max pooling, so any lesion pixel survives.
pub fn downsample_mask<T: Scalar>(mask: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [_, c, h, w] = mask.dims4("downsample_mask")?;
    if c != 1 {
        return Err(Error::shape("downsample_mask", format!("mask must have one channel, got {c}")));
    }
    if factor == 0 || !factor.is_power_of_two() || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "factor {factor} must be a power of two dividing {h}x{w}"
        )));
    }
    if let Some(v) = mask.data().iter().find(|v| **v != T::zero() && **v != T::one()) {
        return Err(Error::InvalidArgument(format!("mask value {v} is not binary")));
    }
    let mut out = mask.clone();
    let mut f = factor;
    while f > 1 {
        out = crate::tensor::maxpool2d(&out)?;
        f /= 2;
    }
    Ok(out)
}

/// Targets for each head of `cfg`, coarsest first, from a full-resolution mask.
pub fn head_targets<T: Scalar>(cfg: &ModelConfig, mask: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    cfg.head_scales()
        .into_iter()
        .map(|s| downsample_mask(mask, 1 << s))
        .collect()
}
