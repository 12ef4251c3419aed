//! SE-residual 3D U-Net.
//!
//! Parameters live in a flat [`ParamStore`]; layers only hold [`ParamId`]s.
//! A forward pass first binds every parameter onto the tape
//! ([`UNet3d::bind`]) and then walks the layer graph, so the same structure
//! serves training (parameters as grad leaves), inference (constants) and
//! gradient checks (caller-provided leaves).
//!
//! Encoder level `l` runs a [`ConvBlock`] at `base * 2^l` channels followed
//! by 2x2x2 max pooling (except the deepest level). Each decoder level
//! upsamples trilinearly, halves channels with a 1x1x1 convolution,
//! concatenates the matching encoder output and runs another block. A final
//! 1x1x1 convolution emits one channel of logits.

use alloc::{format, string::String, vec::Vec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SePlacement {
    /// After the second normalization, before the residual addition.
    BeforeAddition,
    /// On the block output, after the final activation.
    AfterActivation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub patch_size: usize,
    pub leaky_slope: f64,
    pub se_reduction: usize,
    pub residual: bool,
    pub se: bool,
    pub se_placement: SePlacement,
    pub norm_eps: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl UNetConfig {
    /// 3 levels, 8 base channels, 16^3 patches.
    pub fn desk() -> Self {
        Self {
            levels: 3,
            base_channels: 8,
            in_channels: 1,
            out_channels: 1,
            patch_size: 16,
            leaky_slope: 0.01,
            se_reduction: 16,
            residual: true,
            se: true,
            se_placement: SePlacement::BeforeAddition,
            norm_eps: 1e-5,
        }
    }

    /// 4 levels, 32 base channels, 128^3 patches.
    pub fn paper() -> Self {
        Self {
            levels: 4,
            base_channels: 32,
            patch_size: 128,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels < 2 {
            return bad(format!("levels must be >= 2, got {}", self.levels));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.se_reduction == 0 {
            return bad("se_reduction must be positive".into());
        }
        let div = 1usize << (self.levels - 1);
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(div) {
            return bad(format!(
                "patch size {} not divisible by 2^(levels-1) = {}",
                self.patch_size, div
            ));
        }
        if self.patch_size / div < 2 {
            return bad(format!(
                "patch size {} too small for {} levels",
                self.patch_size, self.levels
            ));
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn add(&mut self, name: String, t: Tensor<T>) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

/// Squeeze-and-excitation: `S = sigmoid(W2 relu(W1 U))`, `U` the
/// channel-wise spatial mean, output `t * S` per channel.
#[derive(Clone, Copy, Debug)]
pub struct SeBlock {
    pub channels: usize,
    pub hidden: usize,
    w1: ParamId,
    w2: ParamId,
}

/// Two conv3x3 -> instance norm -> LeakyReLU stages, SE recalibration and
/// an optional 1x1x1 residual shortcut.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
    se: Option<SeBlock>,
    shortcut: Option<Conv>,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLevel {
    reduce: Conv,
    block: ConvBlock,
}

/// SE hidden width: `ceil(C / r)`, at least 1.
pub fn se_hidden(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction).max(1)
}

struct Builder<'a, T> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let std = libm::sqrt(2.0 / fan_in as f64);
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(normal.sample(self.rng)))
            .collect();
        self.store
            .add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let weight = self.he(
            format!("{name}.weight"),
            &[cout, cin, k, k, k],
            cin * k * k * k,
        );
        let bias = self
            .store
            .add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv { weight, bias }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self
            .store
            .add(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.store.add(format!("{name}.beta"), Tensor::zeros(&[c]));
        Norm { gamma, beta }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, cfg: &UNetConfig) -> ConvBlock {
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3);
        let norm1 = self.norm(&format!("{name}.norm1"), cout);
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3);
        let norm2 = self.norm(&format!("{name}.norm2"), cout);
        let se = cfg.se.then(|| {
            let hidden = se_hidden(cout, cfg.se_reduction);
            let w1 = self.he(format!("{name}.se.w1"), &[hidden, cout], cout);
            let w2 = self.he(format!("{name}.se.w2"), &[cout, hidden], hidden);
            SeBlock {
                channels: cout,
                hidden,
                w1,
                w2,
            }
        });
        let shortcut = cfg
            .residual
            .then(|| self.conv(&format!("{name}.shortcut"), cin, cout, 1));
        ConvBlock {
            in_channels: cin,
            out_channels: cout,
            conv1,
            norm1,
            conv2,
            norm2,
            se,
            shortcut,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UNet3d<T> {
    config: UNetConfig,
    encoder: Vec<ConvBlock>,
    decoder: Vec<DecoderLevel>,
    head: Conv,
    params: ParamStore<T>,
}

impl<T: Scalar> UNet3d<T> {
    /// Builds the network with seeded He (fan-in) initialization.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let mut encoder = Vec::with_capacity(config.levels);
        let mut cin = config.in_channels;
        for l in 0..config.levels {
            let cout = config.channels_at(l);
            encoder.push(b.block(&format!("enc{l}"), cin, cout, &config));
            cin = cout;
        }
        let mut decoder = Vec::with_capacity(config.levels - 1);
        for l in (0..config.levels - 1).rev() {
            let (deep, here) = (config.channels_at(l + 1), config.channels_at(l));
            let reduce = b.conv(&format!("dec{l}.reduce"), deep, here, 1);
            let block = b.block(&format!("dec{l}"), 2 * here, here, &config);
            decoder.push(DecoderLevel { reduce, block });
        }
        let head = b.conv("head", config.channels_at(0), config.out_channels, 1);
        let params = b.store;
        let net = Self {
            config,
            encoder,
            decoder,
            head,
            params,
        };
        net.check_skip_pairs()?;
        Ok(net)
    }

    /// Rebuilds a network from named parameter tensors (e.g. a checkpoint).
    pub fn from_named(config: UNetConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if named.len() != net.params.len() {
            return Err(Error::Param {
                name: String::from("*"),
                detail: format!("expected {} tensors, got {}", net.params.len(), named.len()),
            });
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != net.params.names[i] {
                return Err(Error::Param {
                    name,
                    detail: format!("expected {}", net.params.names[i]),
                });
            }
            if t.shape() != net.params.tensors[i].shape() {
                return Err(Error::Param {
                    name,
                    detail: format!(
                        "shape {:?}, expected {:?}",
                        t.shape(),
                        net.params.tensors[i].shape()
                    ),
                });
            }
            net.params.tensors[i] = t;
        }
        Ok(net)
    }

    fn check_skip_pairs(&self) -> Result<()> {
        for (i, dec) in self.decoder.iter().enumerate() {
            let l = self.config.levels - 2 - i;
            let skip = self.encoder[l].out_channels;
            if dec.block.in_channels != 2 * skip || dec.block.out_channels != skip {
                return Err(Error::Config(format!(
                    "decoder level {l} does not pair with encoder skip"
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Scalar>(&self) -> UNet3d<U> {
        UNet3d {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head,
            params: self.params.cast(),
        }
    }

    /// Puts every parameter on the tape, as grad leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn encoder_block(&self, level: usize) -> &ConvBlock {
        &self.encoder[level]
    }

    /// Logits for `x (N, in_channels, P, P, P)`.
    pub fn forward(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
        let [_, c, d, h, w] = tape.value(x).dims5("unet_forward")?;
        let div = 1usize << (self.config.levels - 1);
        if c != self.config.in_channels {
            return Err(crate::error::shape_err(
                "unet_forward",
                format!("{c} input channels"),
            ));
        }
        if [d, h, w].iter().any(|s| *s % div != 0 || *s / div < 2) {
            return Err(crate::error::shape_err(
                "unet_forward",
                format!(
                    "spatial dims {:?} must be divisible by {div} with >= 2 voxels at the bottom",
                    [d, h, w]
                ),
            ));
        }
        let cfg = &self.config;
        let mut skips = Vec::with_capacity(cfg.levels);
        let mut cur = x;
        for (l, blk) in self.encoder.iter().enumerate() {
            cur = blk.forward(tape, params, cur, cfg)?;
            if l + 1 < cfg.levels {
                skips.push(cur);
                cur = tape.maxpool3d(cur)?;
            }
        }
        for dec in &self.decoder {
            let up = tape.upsample_trilinear(cur)?;
            let reduced = conv(tape, params, up, dec.reduce)?;
            let skip = skips.pop().expect("one skip per decoder level");
            let joined = tape.concat_channels(reduced, skip)?;
            cur = dec.block.forward(tape, params, joined, cfg)?;
        }
        conv(tape, params, cur, self.head)
    }

    /// Inference helper: logits for a batch, parameters bound as constants.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, xv)?;
        Ok(tape.value(out).clone())
    }
}

fn conv<T: Scalar>(tape: &mut Tape<T>, params: &[Var], x: Var, c: Conv) -> Result<Var> {
    tape.conv3d(x, params[c.weight.0], Some(params[c.bias.0]))
}

fn norm<T: Scalar>(tape: &mut Tape<T>, params: &[Var], x: Var, n: Norm, eps: f64) -> Result<Var> {
    tape.instance_norm(x, params[n.gamma.0], params[n.beta.0], eps)
}

impl SeBlock {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], t: Var) -> Result<Var> {
        let c = tape.value(t).dims5("se_forward")?[1];
        if c != self.channels {
            return Err(crate::error::shape_err(
                "se_forward",
                format!("{c} channels, block has {}", self.channels),
            ));
        }
        let u = tape.global_avg_pool(t)?;
        let z = tape.linear(u, params[self.w1.0], None)?;
        let z = tape.relu(z);
        let s = tape.linear(z, params[self.w2.0], None)?;
        let s = tape.sigmoid(s);
        tape.mul_channelwise(t, s)
    }
}

impl ConvBlock {
    pub fn se(&self) -> Option<&SeBlock> {
        self.se.as_ref()
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        cfg: &UNetConfig,
    ) -> Result<Var> {
        let c = tape.value(x).dims5("conv_block")?[1];
        if c != self.in_channels {
            return Err(crate::error::shape_err(
                "conv_block",
                format!("{c} channels, block expects {}", self.in_channels),
            ));
        }
        let slope = cfg.leaky_slope;
        let y = conv(tape, params, x, self.conv1)?;
        let y = norm(tape, params, y, self.norm1, cfg.norm_eps)?;
        let y = tape.leaky_relu(y, slope);
        let y = conv(tape, params, y, self.conv2)?;
        let mut y = norm(tape, params, y, self.norm2, cfg.norm_eps)?;
        let se_first = cfg.se_placement == SePlacement::BeforeAddition;
        if let (Some(se), true) = (&self.se, se_first) {
            y = se.forward(tape, params, y)?;
        }
        if let Some(sc) = self.shortcut {
            let s = conv(tape, params, x, sc)?;
            y = tape.add(y, s)?;
        }
        let mut out = tape.leaky_relu(y, slope);
        if let (Some(se), false) = (&self.se, se_first) {
            out = se.forward(tape, params, out)?;
        }
        Ok(out)
    }
}
