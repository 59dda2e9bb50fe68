//! Trainable networks: modality generators, registration regressors and
//! patch discriminators, plus the model container that owns all eight.
//!
//! Layer plans (full size):
//!
//! * generator: `C64-D128-D256-R256x9-U128-U64-C1`, instance norm, ReLU, tanh output;
//! * regressor: `D32-D64x6-R64x3-U64x5-U32`, refinement block, 3x3 output conv
//!   initialised to zero so the initial field is the identity;
//! * discriminator: `C64-C128-C256-C512` 4x4 stride-2 blocks and a final
//!   1-channel conv, instance norm except on the first block.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tch::{nn, nn::Module, Device, Kind, Tensor};

use crate::{imaging::Image2D, warp::DeformationField2D, Error, Result};

const INIT_STD: f64 = 0.02;

fn conv_cfg(stride: i64, padding: i64) -> nn::ConvConfig {
    nn::ConvConfig {
        stride,
        padding,
        ws_init: nn::Init::Randn {
            mean: 0.0,
            stdev: INIT_STD,
        },
        bs_init: nn::Init::Const(0.0),
        ..Default::default()
    }
}

fn instance_norm(x: &Tensor) -> Tensor {
    x.instance_norm(
        None::<Tensor>,
        None::<Tensor>,
        None::<Tensor>,
        None::<Tensor>,
        true,
        0.1,
        1e-5,
        false,
    )
}

fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.maximum(&(x * slope))
}

/// Image domain a network belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    /// Source modality.
    X,
    /// Target modality.
    Y,
}

// ---------------------------------------------------------------------------
// Generator

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub in_channels: i64,
    pub base_width: i64,
    pub n_residual_blocks: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 64,
            n_residual_blocks: 9,
        }
    }
}

impl GeneratorSpec {
    pub fn plan(&self) -> String {
        let w = self.base_width;
        format!(
            "C{w}-D{}-D{}-R{}x{}-U{}-U{w}-C{}",
            2 * w,
            4 * w,
            4 * w,
            self.n_residual_blocks,
            2 * w,
            self.in_channels
        )
    }
}

#[derive(Debug)]
struct GenResidualBlock {
    conv1: nn::Conv2D,
    conv2: nn::Conv2D,
}

impl GenResidualBlock {
    fn new(p: nn::Path, channels: i64) -> Self {
        Self {
            conv1: nn::conv2d(&p / "conv1", channels, channels, 3, conv_cfg(1, 0)),
            conv2: nn::conv2d(&p / "conv2", channels, channels, 3, conv_cfg(1, 0)),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let h = instance_norm(&x.reflection_pad2d([1, 1, 1, 1]).apply(&self.conv1)).relu();
        let h = instance_norm(&h.reflection_pad2d([1, 1, 1, 1]).apply(&self.conv2));
        x + h
    }
}

/// Residual encoder/decoder translating one modality into the other.
#[derive(Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    head: nn::Conv2D,
    down: Vec<nn::Conv2D>,
    blocks: Vec<GenResidualBlock>,
    up: Vec<nn::ConvTranspose2D>,
    tail: nn::Conv2D,
}

impl Generator {
    pub fn new(p: nn::Path, spec: &GeneratorSpec) -> Self {
        let w = spec.base_width;
        let c = spec.in_channels;
        let up_cfg = nn::ConvTransposeConfig {
            stride: 2,
            padding: 1,
            output_padding: 1,
            ws_init: nn::Init::Randn {
                mean: 0.0,
                stdev: INIT_STD,
            },
            bs_init: nn::Init::Const(0.0),
            ..Default::default()
        };
        Self {
            spec: spec.clone(),
            head: nn::conv2d(&p / "head", c, w, 7, conv_cfg(1, 0)),
            down: vec![
                nn::conv2d(&p / "down1", w, 2 * w, 3, conv_cfg(2, 1)),
                nn::conv2d(&p / "down2", 2 * w, 4 * w, 3, conv_cfg(2, 1)),
            ],
            blocks: (0..spec.n_residual_blocks)
                .map(|i| GenResidualBlock::new(&p / format!("res{i}"), 4 * w))
                .collect(),
            up: vec![
                nn::conv_transpose2d(&p / "up1", 4 * w, 2 * w, 3, up_cfg),
                nn::conv_transpose2d(&p / "up2", 2 * w, w, 3, up_cfg),
            ],
            tail: nn::conv2d(&p / "tail", w, c, 7, conv_cfg(1, 0)),
        }
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// Checked forward: spatial dims must be divisible by 4 and at least 8.
    pub fn try_forward(&self, x: &Tensor) -> Result<Tensor> {
        let size = x.size();
        let [_, c, h, w] = size[..] else {
            return Err(Error::shape(format!("generator input must be 4-D, got {size:?}")));
        };
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "generator expects {} channels, got {c}",
                self.spec.in_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
            return Err(Error::arg(format!(
                "generator input {h}x{w} must be divisible by 4 and at least 8x8"
            )));
        }
        Ok(self.forward(x))
    }
}

impl Module for Generator {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = instance_norm(&x.reflection_pad2d([3, 3, 3, 3]).apply(&self.head)).relu();
        for conv in &self.down {
            h = instance_norm(&h.apply(conv)).relu();
        }
        for block in &self.blocks {
            h = block.forward(&h);
        }
        for conv in &self.up {
            h = instance_norm(&h.apply(conv)).relu();
        }
        h.reflection_pad2d([3, 3, 3, 3]).apply(&self.tail).tanh()
    }
}

pub fn generator_forward(g: &Generator, image: &Image2D) -> Result<Image2D> {
    let out = tch::no_grad(|| g.try_forward(&image.to_tensor()))?;
    Ok(Image2D::from_tensor(&out)?.with_intensity_scale(image.intensity_scale()))
}

// ---------------------------------------------------------------------------
// Registration regressor

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorSpec {
    /// Moving and fixed images, concatenated in that order.
    pub in_channels: i64,
    /// Width of the first encoder layer and the last decoder layer.
    pub base_width: i64,
    /// Width of every other encoder/decoder layer and the bottleneck.
    pub width: i64,
    pub n_encoder_layers: usize,
    /// Number of 2x max-pool stages between encoder layers; inputs are padded
    /// to a multiple of `2^pool_stages`.
    pub pool_stages: usize,
    pub n_residual_blocks: usize,
    /// Residual block after each encoder conv (ResUNet encoder).
    pub encoder_residual: bool,
}

impl Default for RegressorSpec {
    fn default() -> Self {
        Self {
            in_channels: 2,
            base_width: 32,
            width: 64,
            n_encoder_layers: 7,
            pool_stages: 6,
            n_residual_blocks: 3,
            encoder_residual: true,
        }
    }
}

impl RegressorSpec {
    pub fn plan(&self) -> String {
        let (b, w) = (self.base_width, self.width);
        let n = self.n_encoder_layers;
        format!(
            "D{b}-D{w}x{}-R{w}x{}-U{w}x{}-U{b} + refinement + 3x3 output",
            n - 1,
            self.n_residual_blocks,
            n.saturating_sub(2)
        )
    }

    fn validate(&self) -> Result<()> {
        if self.n_encoder_layers < 2 {
            return Err(Error::Config("regressor needs at least 2 encoder layers".into()));
        }
        if self.pool_stages >= self.n_encoder_layers {
            return Err(Error::Config(format!(
                "regressor pool_stages ({}) must be below n_encoder_layers ({})",
                self.pool_stages, self.n_encoder_layers
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct RegResidualBlock {
    conv1: nn::Conv2D,
    conv2: nn::Conv2D,
}

impl RegResidualBlock {
    fn new(p: nn::Path, channels: i64) -> Self {
        Self {
            conv1: nn::conv2d(&p / "conv1", channels, channels, 3, conv_cfg(1, 1)),
            conv2: nn::conv2d(&p / "conv2", channels, channels, 3, conv_cfg(1, 1)),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        x + leaky_relu(&x.apply(&self.conv1), 0.2).apply(&self.conv2)
    }
}

#[derive(Debug)]
struct EncoderLayer {
    conv: nn::Conv2D,
    residual: Option<RegResidualBlock>,
}

/// ResUNet predicting a dense displacement field from a (moving, fixed) pair.
///
/// The returned field warps `moving` onto `fixed`: `warp(moving, R(moving, fixed)) ~ fixed`.
#[derive(Debug)]
pub struct Regressor {
    spec: RegressorSpec,
    encoders: Vec<EncoderLayer>,
    bottleneck: Vec<RegResidualBlock>,
    decoders: Vec<nn::Conv2D>,
    refine_block: RegResidualBlock,
    refine_conv: nn::Conv2D,
    output: nn::Conv2D,
}

impl Regressor {
    pub fn new(p: nn::Path, spec: &RegressorSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_encoder_layers;
        let enc_width = |i: usize| if i == 0 { spec.base_width } else { spec.width };
        let encoders = (0..n)
            .map(|i| {
                let cin = if i == 0 { spec.in_channels } else { enc_width(i - 1) };
                let lp = &p / format!("enc{i}");
                EncoderLayer {
                    conv: nn::conv2d(&lp / "conv", cin, enc_width(i), 3, conv_cfg(1, 1)),
                    residual: spec
                        .encoder_residual
                        .then(|| RegResidualBlock::new(&lp / "res", enc_width(i))),
                }
            })
            .collect();
        let bottleneck = (0..spec.n_residual_blocks)
            .map(|i| RegResidualBlock::new(&p / format!("bottleneck{i}"), spec.width))
            .collect();
        // decoder k consumes the skip of encoder (n - 2 - k)
        let decoders = (0..n - 1)
            .map(|k| {
                let skip = n - 2 - k;
                let cout = if skip == 0 { spec.base_width } else { spec.width };
                let cin = spec.width + enc_width(skip);
                nn::conv2d(&p / format!("dec{k}"), cin, cout, 3, conv_cfg(1, 1))
            })
            .collect();
        let b = spec.base_width;
        let zero = nn::ConvConfig {
            padding: 1,
            ws_init: nn::Init::Const(0.0),
            bs_init: nn::Init::Const(0.0),
            ..Default::default()
        };
        Ok(Self {
            spec: spec.clone(),
            encoders,
            bottleneck,
            decoders,
            refine_block: RegResidualBlock::new(&p / "refine_res", b),
            refine_conv: nn::conv2d(&p / "refine_conv", b, b, 1, conv_cfg(1, 0)),
            output: nn::conv2d(&p / "output", b, 2, 3, zero),
        })
    }

    pub fn spec(&self) -> &RegressorSpec {
        &self.spec
    }

    /// Field taking `moving` onto `fixed`, both `[N, 1, H, W]`.
    pub fn forward(&self, moving: &Tensor, fixed: &Tensor) -> Result<Tensor> {
        if moving.size() != fixed.size() {
            return Err(Error::shape(format!(
                "moving {:?} and fixed {:?} differ",
                moving.size(),
                fixed.size()
            )));
        }
        let size = moving.size();
        let [_, _, h, w] = size[..] else {
            return Err(Error::shape(format!("regressor input must be 4-D, got {size:?}")));
        };
        let x = Tensor::cat(&[moving, fixed], 1);
        if x.size()[1] != self.spec.in_channels {
            return Err(Error::shape(format!(
                "regressor expects {} stacked channels, got {}",
                self.spec.in_channels,
                x.size()[1]
            )));
        }
        let multiple = 1i64 << self.spec.pool_stages;
        let (ph, pw) = (
            (multiple - h % multiple) % multiple,
            (multiple - w % multiple) % multiple,
        );
        let mut x = if ph == 0 && pw == 0 {
            x
        } else if ph < h && pw < w {
            x.reflection_pad2d([0, pw, 0, ph])
        } else {
            x.replication_pad2d([0, pw, 0, ph])
        };

        let mut skips = Vec::with_capacity(self.encoders.len());
        for (i, enc) in self.encoders.iter().enumerate() {
            if i > 0 && i <= self.spec.pool_stages {
                x = x.max_pool2d([2, 2], [2, 2], [0, 0], [1, 1], false);
            }
            x = leaky_relu(&x.apply(&enc.conv), 0.2);
            if let Some(res) = &enc.residual {
                x = res.forward(&x);
            }
            skips.push(x.shallow_clone());
        }
        skips.pop();
        for block in &self.bottleneck {
            x = block.forward(&x);
        }
        for (dec, skip) in self.decoders.iter().zip(skips.iter().rev()) {
            let s = skip.size();
            if x.size()[2..] != s[2..] {
                x = x.upsample_bilinear2d([s[2], s[3]], false, None, None);
            }
            x = leaky_relu(&Tensor::cat(&[&x, skip], 1).apply(dec), 0.2);
        }
        let x = self.refine_block.forward(&x);
        let x = leaky_relu(&x.apply(&self.refine_conv), 0.2);
        let field = x.apply(&self.output);
        Ok(field.narrow(2, 0, h).narrow(3, 0, w))
    }
}

pub fn regressor_forward(r: &Regressor, moving: &Image2D, fixed: &Image2D) -> Result<DeformationField2D> {
    let out = tch::no_grad(|| r.forward(&moving.to_tensor(), &fixed.to_tensor()))?;
    DeformationField2D::from_tensor(&out)
}

/// Forward and backward regressors of one domain: `forward(a, b)` maps the
/// synthesized image onto the real one, `backward(b, a)` the reverse.
#[derive(Debug)]
pub struct SymmetricAligner {
    pub forward: Regressor,
    pub backward: Regressor,
}

impl SymmetricAligner {
    pub fn new(p: nn::Path, spec: &RegressorSpec) -> Result<Self> {
        Ok(Self {
            forward: Regressor::new(&p / "fwd", spec)?,
            backward: Regressor::new(&p / "bwd", spec)?,
        })
    }

    /// `(synth -> real, real -> synth)` fields.
    pub fn fields(&self, synthesized: &Tensor, real: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((
            self.forward.forward(synthesized, real)?,
            self.backward.forward(real, synthesized)?,
        ))
    }
}

// ---------------------------------------------------------------------------
// Discriminator

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorSpec {
    pub in_channels: i64,
    pub base_width: i64,
    pub n_layers: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 64,
            n_layers: 4,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorSpec {
    pub fn plan(&self) -> String {
        (0..self.n_layers)
            .map(|i| format!("C{}", self.width(i)))
            .collect::<Vec<_>>()
            .join("-")
    }

    fn width(&self, layer: usize) -> i64 {
        self.base_width << layer.min(3)
    }

    pub fn min_input_side(&self) -> i64 {
        1 << self.n_layers
    }
}

/// Anything producing a grid of real/fake logits for one domain.
pub trait PatchCritic {
    fn domain(&self) -> Domain;
    /// `[N, 1, h, w]` logits for `[N, 1, H, W]` images.
    fn logits(&self, images: &Tensor) -> Tensor;
}

/// PatchGAN discriminator.
#[derive(Debug)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    domain: Domain,
    blocks: Vec<nn::Conv2D>,
    out: nn::Conv2D,
}

impl Discriminator {
    pub fn new(p: nn::Path, spec: &DiscriminatorSpec, domain: Domain) -> Self {
        let blocks = (0..spec.n_layers)
            .map(|i| {
                let cin = if i == 0 { spec.in_channels } else { spec.width(i - 1) };
                nn::conv2d(&p / format!("block{i}"), cin, spec.width(i), 4, conv_cfg(2, 1))
            })
            .collect();
        let last = spec.width(spec.n_layers.saturating_sub(1));
        Self {
            spec: spec.clone(),
            domain,
            blocks,
            out: nn::conv2d(&p / "out", last, 1, 3, conv_cfg(1, 1)),
        }
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn try_logits(&self, images: &Tensor) -> Result<Tensor> {
        let size = images.size();
        let [_, _, h, w] = size[..] else {
            return Err(Error::shape(format!("discriminator input must be 4-D, got {size:?}")));
        };
        let min = self.spec.min_input_side();
        if h < min || w < min {
            return Err(Error::arg(format!(
                "discriminator input {h}x{w} is smaller than {min}x{min}"
            )));
        }
        Ok(self.logits(images))
    }
}

impl PatchCritic for Discriminator {
    fn domain(&self) -> Domain {
        self.domain
    }

    fn logits(&self, images: &Tensor) -> Tensor {
        let slope = self.spec.leaky_slope;
        let mut h = images.shallow_clone();
        for (i, conv) in self.blocks.iter().enumerate() {
            h = h.apply(conv);
            if i > 0 {
                h = instance_norm(&h);
            }
            h = leaky_relu(&h, slope);
        }
        h.apply(&self.out)
    }
}

/// Patch logit grid for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub logits: Vec<f32>,
}

pub fn discriminator_forward(d: &Discriminator, image: &Image2D) -> Result<PatchGrid> {
    let out = tch::no_grad(|| d.try_logits(&image.to_tensor()))?;
    let size = out.size();
    Ok(PatchGrid {
        height: size[2] as usize,
        width: size[3] as usize,
        logits: Vec::<f32>::try_from(&out.contiguous().view([-1]))?,
    })
}

// ---------------------------------------------------------------------------
// Full model

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub generator: GeneratorSpec,
    pub regressor: RegressorSpec,
    pub discriminator: DiscriminatorSpec,
    /// Build the four registration regressors. Disabled for Pix2pix-like baselines.
    pub aligners: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorSpec::default(),
            regressor: RegressorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            aligners: true,
        }
    }
}

impl ModelConfig {
    /// Architecture at the published widths and depths.
    pub fn full() -> Self {
        Self::default()
    }

    /// Reduced widths for desk-scale runs on 64x64 images.
    pub fn toy() -> Self {
        Self {
            generator: GeneratorSpec {
                in_channels: 1,
                base_width: 16,
                n_residual_blocks: 3,
            },
            regressor: RegressorSpec {
                in_channels: 2,
                base_width: 8,
                width: 16,
                n_encoder_layers: 5,
                pool_stages: 4,
                n_residual_blocks: 2,
                encoder_residual: true,
            },
            discriminator: DiscriminatorSpec {
                in_channels: 1,
                base_width: 16,
                n_layers: 4,
                leaky_slope: 0.2,
            },
            aligners: true,
        }
    }
}

/// Variable-store prefixes of the individual networks.
pub const GENERATOR_G: &str = "G";
pub const GENERATOR_F: &str = "F";
pub const ALIGNER_Y: &str = "A_y";
pub const ALIGNER_X: &str = "A_x";
pub const DISCRIMINATOR_Y: &str = "D_y";
pub const DISCRIMINATOR_X: &str = "D_x";

/// All networks of one model. Generators and regressors live in `gen_vs`,
/// discriminators in `disc_vs`, so each optimizer owns exactly one store.
pub struct DaGanModel {
    pub config: ModelConfig,
    pub gen_vs: nn::VarStore,
    pub disc_vs: nn::VarStore,
    pub g: Generator,
    pub f: Generator,
    pub aligner_y: Option<SymmetricAligner>,
    pub aligner_x: Option<SymmetricAligner>,
    pub d_y: Discriminator,
    pub d_x: Discriminator,
}

impl std::fmt::Debug for DaGanModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DaGanModel")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl DaGanModel {
    /// Builds every network; initialisation draws from the global torch RNG.
    pub fn new(config: &ModelConfig, device: Device) -> Result<Self> {
        let gen_vs = nn::VarStore::new(device);
        let disc_vs = nn::VarStore::new(device);
        let root = gen_vs.root();
        let g = Generator::new(&root / GENERATOR_G, &config.generator);
        let f = Generator::new(&root / GENERATOR_F, &config.generator);
        let (aligner_y, aligner_x) = if config.aligners {
            (
                Some(SymmetricAligner::new(&root / ALIGNER_Y, &config.regressor)?),
                Some(SymmetricAligner::new(&root / ALIGNER_X, &config.regressor)?),
            )
        } else {
            (None, None)
        };
        let droot = disc_vs.root();
        let d_y = Discriminator::new(&droot / DISCRIMINATOR_Y, &config.discriminator, Domain::Y);
        let d_x = Discriminator::new(&droot / DISCRIMINATOR_X, &config.discriminator, Domain::X);
        Ok(Self {
            config: config.clone(),
            gen_vs,
            disc_vs,
            g,
            f,
            aligner_y,
            aligner_x,
            d_y,
            d_x,
        })
    }

    /// Parameter counts keyed by network name (`G`, `F`, `A_y.fwd`, ..., `D_x`).
    pub fn parameter_counts(&self) -> BTreeMap<String, i64> {
        let mut counts = BTreeMap::new();
        for vs in [&self.gen_vs, &self.disc_vs] {
            for (name, t) in vs.variables() {
                let mut parts = name.split('.');
                let head = parts.next().unwrap_or_default();
                let key = if head == ALIGNER_Y || head == ALIGNER_X {
                    format!("{head}.{}", parts.next().unwrap_or_default())
                } else {
                    head.to_string()
                };
                *counts.entry(key).or_insert(0) += t.numel() as i64;
            }
        }
        counts
    }

    pub fn count_parameters(&self) -> i64 {
        count_parameters(&self.gen_vs) + count_parameters(&self.disc_vs)
    }

    pub fn model_size_bytes(&self) -> i64 {
        model_size_bytes(&self.gen_vs) + model_size_bytes(&self.disc_vs)
    }
}

pub fn count_parameters(vs: &nn::VarStore) -> i64 {
    vs.trainable_variables().iter().map(|t| t.numel() as i64).sum()
}

pub fn model_size_bytes(vs: &nn::VarStore) -> i64 {
    vs.trainable_variables()
        .iter()
        .map(|t| t.numel() as i64 * kind_bytes(t.kind()))
        .sum()
}

fn kind_bytes(kind: Kind) -> i64 {
    match kind {
        Kind::Double | Kind::Int64 => 8,
        Kind::Half | Kind::BFloat16 | Kind::Int16 => 2,
        Kind::Uint8 | Kind::Int8 | Kind::Bool => 1,
        _ => 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_img(h: i64, w: i64) -> Tensor {
        Tensor::rand([1, 1, h, w], (Kind::Float, Device::Cpu)) * 2.0 - 1.0
    }

    #[test]
    fn single_conv_parameter_count() {
        let vs = nn::VarStore::new(Device::Cpu);
        let _conv = nn::conv2d(vs.root() / "c", 1, 8, 3, Default::default());
        assert_eq!(count_parameters(&vs), 80);
        assert_eq!(model_size_bytes(&vs), 320);
    }

    #[test]
    fn plans_match_published_strings() {
        assert_eq!(GeneratorSpec::default().plan(), "C64-D128-D256-R256x9-U128-U64-C1");
        assert_eq!(
            RegressorSpec::default().plan(),
            "D32-D64x6-R64x3-U64x5-U32 + refinement + 3x3 output"
        );
        assert_eq!(DiscriminatorSpec::default().plan(), "C64-C128-C256-C512");
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        tch::manual_seed(0);
        let vs = nn::VarStore::new(Device::Cpu);
        let g = Generator::new(vs.root() / "g", &ModelConfig::toy().generator);
        let x = rand_img(64, 64) * 5.0;
        let y = g.try_forward(&x).unwrap();
        assert_eq!(y.size(), vec![1, 1, 64, 64]);
        let max = f64::try_from(y.abs().max()).unwrap();
        assert!(max <= 1.0 + 1e-6);
        assert!(g.try_forward(&rand_img(30, 32)).is_err());
    }

    #[test]
    fn regressor_starts_at_identity_and_orders_inputs() {
        tch::manual_seed(1);
        let vs = nn::VarStore::new(Device::Cpu);
        let spec = ModelConfig::toy().regressor;
        let r = Regressor::new(vs.root() / "r", &spec).unwrap();
        let a = rand_img(64, 64);
        let b = rand_img(64, 64);
        let field = r.forward(&a, &a).unwrap();
        assert_eq!(field.size(), vec![1, 2, 64, 64]);
        assert_eq!(f64::try_from(field.abs().max()).unwrap(), 0.0);

        // Perturb the output head so the permutation check is informative.
        tch::no_grad(|| {
            for (name, mut t) in vs.variables() {
                if name.contains("output") {
                    t.copy_(&(Tensor::randn_like(&t) * 0.1));
                }
            }
        });
        let ab = r.forward(&a, &b).unwrap();
        let ba = r.forward(&b, &a).unwrap();
        assert!(f64::try_from((ab - ba).abs().max()).unwrap() > 1e-6);
        assert!(r.forward(&a, &rand_img(64, 32)).is_err());
    }

    #[test]
    fn regressor_pads_non_multiple_inputs() {
        let vs = nn::VarStore::new(Device::Cpu);
        let r = Regressor::new(vs.root() / "r", &ModelConfig::toy().regressor).unwrap();
        let a = rand_img(40, 24);
        let field = r.forward(&a, &a).unwrap();
        assert_eq!(field.size(), vec![1, 2, 40, 24]);
    }

    #[test]
    fn discriminator_grid_side_is_input_over_16() {
        let vs = nn::VarStore::new(Device::Cpu);
        let d = Discriminator::new(vs.root() / "d", &ModelConfig::toy().discriminator, Domain::Y);
        let out = d.try_logits(&rand_img(64, 64)).unwrap();
        assert_eq!(out.size(), vec![1, 1, 4, 4]);
        assert!(bool::try_from(out.isfinite().all()).unwrap());
        assert!(d.try_logits(&rand_img(8, 8)).is_err());
    }

    #[test]
    fn forwards_are_deterministic() {
        tch::manual_seed(2);
        let model = DaGanModel::new(&ModelConfig::toy(), Device::Cpu).unwrap();
        let x = rand_img(64, 64);
        let a = model.g.forward(&x);
        let b = model.g.forward(&x);
        assert!(a.equal(&b));
        let la = model.d_y.logits(&x);
        assert!(la.equal(&model.d_y.logits(&x)));
    }

    #[test]
    fn doubling_width_increases_parameters() {
        let small = DaGanModel::new(&ModelConfig::toy(), Device::Cpu).unwrap();
        let mut cfg = ModelConfig::toy();
        cfg.generator.base_width *= 2;
        let big = DaGanModel::new(&cfg, Device::Cpu).unwrap();
        assert!(big.count_parameters() > small.count_parameters());
    }

    #[test]
    fn parameter_counts_cover_all_networks() {
        let model = DaGanModel::new(&ModelConfig::toy(), Device::Cpu).unwrap();
        let counts = model.parameter_counts();
        let keys: Vec<_> = counts.keys().cloned().collect();
        assert_eq!(
            keys,
            ["A_x.bwd", "A_x.fwd", "A_y.bwd", "A_y.fwd", "D_x", "D_y", "F", "G"]
        );
        assert_eq!(counts.values().sum::<i64>(), model.count_parameters());
    }
}
