//! Loss terms over images, fields and discriminator logits.
//!
//! All L1 terms are means over pixels, so weights transfer across resolutions.
//! Field naming follows the aligners:
//!
//! * `y_fwd = R_y_fwd(G(x), y)`, so `warp(G(x), y_fwd) ~ y`
//! * `y_bwd = R_y_bwd(y, G(x))`, so `warp(y, y_bwd) ~ G(x)`
//! * `x_fwd = R_x_fwd(F(y), x)`, so `warp(F(y), x_fwd) ~ x`
//! * `x_bwd = R_x_bwd(x, F(y))`, so `warp(x, x_bwd) ~ F(y)`

use serde::{Deserialize, Serialize};
use tch::{nn::Module, Kind, Tensor};

use crate::{
    networks::{Domain, PatchCritic},
    warp::{chain_warp, spatial_gradient, warp},
    Error, Result,
};

/// Loss weights. Defaults are the published values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_smt: f64,
    pub lambda_ic_reg: f64,
    pub lambda_ic_gen: f64,
    pub lambda_ic_joint: f64,
    pub lambda_adv_da: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reg: 20.0,
            lambda_smt: 10.0,
            lambda_ic_reg: 10.0,
            lambda_ic_gen: 10.0,
            lambda_ic_joint: 10.0,
            lambda_adv_da: 1.0,
        }
    }
}

impl LossWeights {
    pub const NAMES: [&'static str; 6] = [
        "lambda_reg",
        "lambda_smt",
        "lambda_ic_reg",
        "lambda_ic_gen",
        "lambda_ic_joint",
        "lambda_adv_da",
    ];

    pub fn validate(&self) -> Result<()> {
        for name in Self::NAMES {
            let v = self.get(name)?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn slot(&mut self, name: &str) -> Result<&mut f64> {
        Ok(match name {
            "lambda_reg" => &mut self.lambda_reg,
            "lambda_smt" => &mut self.lambda_smt,
            "lambda_ic_reg" => &mut self.lambda_ic_reg,
            "lambda_ic_gen" => &mut self.lambda_ic_gen,
            "lambda_ic_joint" => &mut self.lambda_ic_joint,
            "lambda_adv_da" => &mut self.lambda_adv_da,
            other => return Err(Error::arg(format!("unknown loss weight `{other}`"))),
        })
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        self.clone().slot(name).map(|v| *v)
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        *self.slot(name)? = value;
        Ok(())
    }
}

/// The four aligner fields, each `[N, 2, H, W]`.
#[derive(Debug)]
pub struct FieldSet {
    pub y_fwd: Tensor,
    pub y_bwd: Tensor,
    pub x_fwd: Tensor,
    pub x_bwd: Tensor,
}

impl FieldSet {
    /// Identity fields matching a `[N, C, H, W]` image.
    pub fn zeros_like(image: &Tensor) -> Self {
        let size = image.size();
        let shape = [size[0], 2, size[2], size[3]];
        let z = || Tensor::zeros(shape, (image.kind(), image.device()));
        Self {
            y_fwd: z(),
            y_bwd: z(),
            x_fwd: z(),
            x_bwd: z(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        [&self.y_fwd, &self.y_bwd, &self.x_fwd, &self.x_bwd].into_iter()
    }

    pub fn detached(&self) -> Self {
        Self {
            y_fwd: self.y_fwd.detach(),
            y_bwd: self.y_bwd.detach(),
            x_fwd: self.x_fwd.detach(),
            x_bwd: self.x_bwd.detach(),
        }
    }
}

fn same_shape(tensors: &[&Tensor]) -> Result<()> {
    let first = tensors[0].size();
    if let Some(t) = tensors.iter().find(|t| t.size() != first) {
        return Err(Error::shape(format!("{:?} vs {:?}", t.size(), first)));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(&[a, b])?;
    Ok((a - b).abs().mean(a.kind()))
}

/// Symmetric similarity over both domains with registration.
pub fn sim_loss(x: &Tensor, y: &Tensor, g_out: &Tensor, f_out: &Tensor, fields: &FieldSet) -> Result<Tensor> {
    same_shape(&[x, y, g_out, f_out])?;
    Ok(l1(y, &warp(g_out, &fields.y_fwd)?)?
        + l1(g_out, &warp(y, &fields.y_bwd)?)?
        + l1(x, &warp(f_out, &fields.x_fwd)?)?
        + l1(f_out, &warp(x, &fields.x_bwd)?)?)
}

/// Plain paired L1 without registration (Pix2pix-like baselines).
pub fn unwarped_sim_loss(x: &Tensor, y: &Tensor, g_out: &Tensor, f_out: &Tensor) -> Result<Tensor> {
    Ok(l1(y, g_out)? + l1(x, f_out)?)
}

/// Sum over the four fields of the mean squared spatial-gradient entry.
pub fn smoothness_loss(fields: &FieldSet) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for f in fields.iter() {
        let term = spatial_gradient(f)?.square().mean(f.kind());
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    Ok(total.expect("four fields"))
}

pub fn symmetric_registration_loss(sim: &Tensor, smt: &Tensor, w: &LossWeights) -> Tensor {
    sim * w.lambda_reg + smt * w.lambda_smt
}

/// Registration-level inverse consistency: each real image sent backward then
/// forward must return to itself.
pub fn ic_reg_loss(x: &Tensor, y: &Tensor, fields: &FieldSet) -> Result<Tensor> {
    same_shape(&[x, y])?;
    Ok(l1(&chain_warp(y, &fields.y_bwd, &fields.y_fwd)?, y)? + l1(&chain_warp(x, &fields.x_bwd, &fields.x_fwd)?, x)?)
}

/// Generation-level inverse consistency given precomputed `G(x)` and `F(y)`.
pub fn ic_gen_loss_with(
    x: &Tensor,
    y: &Tensor,
    g_out: &Tensor,
    f_out: &Tensor,
    g: &dyn Module,
    f: &dyn Module,
) -> Result<Tensor> {
    same_shape(&[x, y, g_out, f_out])?;
    Ok(l1(&f.forward(g_out), x)? + l1(&g.forward(f_out), y)?)
}

pub fn ic_gen_loss(x: &Tensor, y: &Tensor, g: &dyn Module, f: &dyn Module) -> Result<Tensor> {
    ic_gen_loss_with(x, y, &g.forward(x), &f.forward(y), g, f)
}

/// Joint inverse consistency through registration and generation.
pub fn ic_joint_loss_with(
    x: &Tensor,
    y: &Tensor,
    g_out: &Tensor,
    f_out: &Tensor,
    g: &dyn Module,
    f: &dyn Module,
    fields: &FieldSet,
) -> Result<Tensor> {
    same_shape(&[x, y, g_out, f_out])?;
    let x_cycle = warp(&f.forward(&warp(g_out, &fields.y_fwd)?), &fields.x_fwd)?;
    let y_cycle = warp(&g.forward(&warp(f_out, &fields.x_fwd)?), &fields.y_fwd)?;
    Ok(l1(&x_cycle, x)? + l1(&y_cycle, y)?)
}

pub fn ic_joint_loss(x: &Tensor, y: &Tensor, g: &dyn Module, f: &dyn Module, fields: &FieldSet) -> Result<Tensor> {
    ic_joint_loss_with(x, y, &g.forward(x), &f.forward(y), g, f, fields)
}

/// Weighted sum of whichever inverse-consistency terms are present.
pub fn mic_loss(
    ic_reg: Option<&Tensor>,
    ic_gen: Option<&Tensor>,
    ic_joint: Option<&Tensor>,
    w: &LossWeights,
) -> Option<Tensor> {
    [
        (ic_reg, w.lambda_ic_reg),
        (ic_gen, w.lambda_ic_gen),
        (ic_joint, w.lambda_ic_joint),
    ]
    .into_iter()
    .filter_map(|(t, lambda)| t.map(|t| t * lambda))
    .reduce(|a, b| a + b)
}

/// `-log(sigmoid(l))`, averaged over patches.
fn bce_real(logits: &Tensor) -> Tensor {
    (-logits).softplus().mean(logits.kind())
}

/// `-log(1 - sigmoid(l))`, averaged over patches.
fn bce_fake(logits: &Tensor) -> Tensor {
    logits.softplus().mean(logits.kind())
}

/// Generator-side adversarial objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorAdvForm {
    /// Minimize `-log D(fake)`; same fixed points as the saturating form.
    #[default]
    NonSaturating,
    /// Minimize `log(1 - D(fake))` literally.
    Saturating,
}

fn check_domain(d: &dyn PatchCritic, expected: Domain) -> Result<()> {
    if d.domain() != expected {
        return Err(Error::arg(format!(
            "discriminator for domain {:?} used on domain {:?}",
            d.domain(),
            expected
        )));
    }
    Ok(())
}

/// Runs `d` once over a batch of same-shaped image groups and splits the logits.
fn batched_logits(d: &dyn PatchCritic, groups: &[&Tensor]) -> Result<Vec<Tensor>> {
    same_shape(groups)?;
    let n = groups[0].size()[0];
    let logits = d.logits(&Tensor::cat(groups, 0));
    Ok(logits.split(n, 0))
}

/// Discriminator side of the deformation-aware adversarial loss (to minimize).
///
/// Real set `{real, warp(real, bwd)}`, fake set `{fake, warp(fake, fwd)}`;
/// four cross-entropy terms, each averaged over patches.
pub fn adv_da_discriminator_loss(
    d: &dyn PatchCritic,
    domain: Domain,
    real: &Tensor,
    fake: &Tensor,
    fwd: &Tensor,
    bwd: &Tensor,
) -> Result<Tensor> {
    check_domain(d, domain)?;
    let real_warped = warp(real, bwd)?;
    let fake_warped = warp(fake, fwd)?;
    let l = batched_logits(d, &[real, &real_warped, fake, &fake_warped])?;
    Ok(bce_real(&l[0]) + bce_real(&l[1]) + bce_fake(&l[2]) + bce_fake(&l[3]))
}

/// Generator/aligner side of the deformation-aware adversarial loss.
pub fn adv_da_generator_loss(
    d: &dyn PatchCritic,
    domain: Domain,
    fake: &Tensor,
    fwd: &Tensor,
    form: GeneratorAdvForm,
) -> Result<Tensor> {
    check_domain(d, domain)?;
    let fake_warped = warp(fake, fwd)?;
    let l = batched_logits(d, &[fake, &fake_warped])?;
    Ok(match form {
        GeneratorAdvForm::NonSaturating => bce_real(&l[0]) + bce_real(&l[1]),
        GeneratorAdvForm::Saturating => -(bce_fake(&l[0]) + bce_fake(&l[1])),
    })
}

/// Standard two-term GAN loss on `{real}` vs `{fake}` (discriminator side).
pub fn conventional_adv_discriminator_loss(
    d: &dyn PatchCritic,
    domain: Domain,
    real: &Tensor,
    fake: &Tensor,
) -> Result<Tensor> {
    check_domain(d, domain)?;
    let l = batched_logits(d, &[real, fake])?;
    Ok(bce_real(&l[0]) + bce_fake(&l[1]))
}

pub fn conventional_adv_generator_loss(
    d: &dyn PatchCritic,
    domain: Domain,
    fake: &Tensor,
    form: GeneratorAdvForm,
) -> Result<Tensor> {
    check_domain(d, domain)?;
    let l = d.logits(fake);
    Ok(match form {
        GeneratorAdvForm::NonSaturating => bce_real(&l),
        GeneratorAdvForm::Saturating => -bce_fake(&l),
    })
}

/// Which adversarial loss is in use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvMode {
    #[default]
    DeformationAware,
    Conventional,
}

impl AdvMode {
    pub fn term_name(self) -> &'static str {
        match self {
            AdvMode::DeformationAware => "adv_da",
            AdvMode::Conventional => "adv",
        }
    }
}

/// Unweighted loss terms of one generator/aligner step; `None` means disabled.
#[derive(Debug, Default)]
pub struct LossComponents {
    pub sim: Option<Tensor>,
    pub smt: Option<Tensor>,
    pub ic_reg: Option<Tensor>,
    pub ic_gen: Option<Tensor>,
    pub ic_joint: Option<Tensor>,
    /// Generator-side adversarial loss summed over both domains.
    pub adv: Option<(AdvMode, Tensor)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// Scalar record of one step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    /// `sum(weight * value)` over `terms`.
    pub total: f64,
    /// Discriminator objective of the same step, when one was computed.
    pub discriminator: Option<f64>,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn names(&self) -> Vec<&str> {
        self.terms.iter().map(|t| t.name.as_str()).collect()
    }

    fn weighted(&self, names: &[&str]) -> f64 {
        self.terms
            .iter()
            .filter(|t| names.contains(&t.name.as_str()))
            .map(|t| t.weight * t.value)
            .sum()
    }

    /// Weighted symmetric-registration part.
    pub fn sr(&self) -> f64 {
        self.weighted(&["sim", "smt"])
    }

    /// Weighted inverse-consistency part.
    pub fn mic(&self) -> f64 {
        self.weighted(&["ic_reg", "ic_gen", "ic_joint"])
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.terms.iter().all(|t| t.value.is_finite())
            && self.discriminator.map_or(true, f64::is_finite)
    }
}

/// Combines active components into the generator/aligner objective.
///
/// Terms whose weight is zero are reported but kept out of the graph, so
/// parameters reachable only through them receive no gradient at all.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> (Option<Tensor>, LossReport) {
    let entries: [(&str, Option<&Tensor>, f64); 6] = [
        ("sim", c.sim.as_ref(), w.lambda_reg),
        ("smt", c.smt.as_ref(), w.lambda_smt),
        ("ic_reg", c.ic_reg.as_ref(), w.lambda_ic_reg),
        ("ic_gen", c.ic_gen.as_ref(), w.lambda_ic_gen),
        ("ic_joint", c.ic_joint.as_ref(), w.lambda_ic_joint),
        (
            c.adv.as_ref().map_or("adv_da", |(m, _)| m.term_name()),
            c.adv.as_ref().map(|(_, t)| t),
            w.lambda_adv_da,
        ),
    ];
    let mut report = LossReport::default();
    let mut objective: Option<Tensor> = None;
    for (name, tensor, weight) in entries {
        let Some(t) = tensor else { continue };
        let value = f64::try_from(t.detach().to_kind(Kind::Double)).unwrap_or(f64::NAN);
        report.terms.push(LossTerm {
            name: name.to_string(),
            value,
            weight,
        });
        report.total += weight * value;
        if weight != 0.0 {
            let weighted = t * weight;
            objective = Some(match objective {
                Some(o) => o + weighted,
                None => weighted,
            });
        }
    }
    (objective, report)
}
