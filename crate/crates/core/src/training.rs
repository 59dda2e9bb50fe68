//! Two-phase adversarial optimization, ablation presets, run directories,
//! validation, inference and hyperparameter sweeps.
//!
//! Each step first updates both discriminators on generator outputs and fields
//! computed without gradient tracking, then updates the generators and
//! regressors with the discriminators frozen.

use std::{
    collections::BTreeMap,
    fmt,
    fs::{self, File, OpenOptions},
    io::{BufWriter, Write},
    path::{Path, PathBuf},
    str::FromStr,
};

use serde::{Deserialize, Serialize};
use tch::{nn, nn::OptimizerConfig, Device, Kind, Tensor};

use crate::{
    checkpoint::{epoch_dir, latest_checkpoint, list_checkpoints, load_into, save_checkpoint, INDEX_FILE},
    config::ExperimentConfig,
    imaging::{
        foreground_mask, write_image, write_panel_strip, DatasetManifest, Image2D, IntensityScale, PairedSample,
    },
    losses::{
        adv_da_discriminator_loss, adv_da_generator_loss, conventional_adv_discriminator_loss,
        conventional_adv_generator_loss, ic_gen_loss_with, ic_joint_loss_with, ic_reg_loss, l1, sim_loss,
        smoothness_loss, total_loss, unwarped_sim_loss, AdvMode, FieldSet, GeneratorAdvForm, LossComponents,
        LossReport, LossWeights,
    },
    metrics::nmae,
    networks::{DaGanModel, Domain},
    rng::derive_seed,
    warp::{spatial_gradient, warp, DeformationField2D},
    Error, Result,
};

/// How generated images are compared with real ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistrationMode {
    /// Four-way registered similarity with both aligners' fields.
    #[default]
    Symmetric,
    /// Only the forward regressors, synthesized onto real.
    Forward,
    /// Plain unwarped L1; no regressors are used.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub ic_reg: bool,
    pub ic_gen: bool,
    pub ic_joint: bool,
    pub adv_mode: AdvMode,
    pub registration: RegistrationMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            ic_reg: true,
            ic_gen: true,
            ic_joint: true,
            adv_mode: AdvMode::DeformationAware,
            registration: RegistrationMode::Symmetric,
        }
    }
}

impl Ablation {
    /// Loss terms a step reports under this setting, in report order.
    pub fn expected_terms(&self) -> Vec<&'static str> {
        let mut terms = vec!["sim"];
        if self.registration != RegistrationMode::None {
            terms.push("smt");
        }
        for (on, name) in [
            (self.ic_reg, "ic_reg"),
            (self.ic_gen, "ic_gen"),
            (self.ic_joint, "ic_joint"),
        ] {
            if on {
                terms.push(name);
            }
        }
        terms.push(self.adv_mode.term_name());
        terms
    }

    fn needs_aligners(&self) -> bool {
        self.registration != RegistrationMode::None || self.ic_reg
    }
}

/// Named training settings. `A`..`G2` are the loss ablation rows; `G2` is the
/// full model. `Pix2pix` and `RegGan` are baselines built from the same parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    A,
    B,
    C,
    D,
    E,
    F,
    G1,
    G2,
    Pix2pix,
    RegGan,
}

impl Preset {
    /// The eight ablation rows in table order.
    pub const ABLATION: [Preset; 8] = [
        Preset::A,
        Preset::B,
        Preset::C,
        Preset::D,
        Preset::E,
        Preset::F,
        Preset::G1,
        Preset::G2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::A => "A",
            Preset::B => "B",
            Preset::C => "C",
            Preset::D => "D",
            Preset::E => "E",
            Preset::F => "F",
            Preset::G1 => "G1",
            Preset::G2 => "G2",
            Preset::Pix2pix => "pix2pix",
            Preset::RegGan => "reggan",
        }
    }

    pub fn ablation(self) -> Ablation {
        let ic = |ic_reg, ic_gen, ic_joint| Ablation {
            ic_reg,
            ic_gen,
            ic_joint,
            ..Ablation::default()
        };
        match self {
            Preset::A => ic(true, false, false),
            Preset::B => ic(false, true, false),
            Preset::C => ic(false, false, true),
            Preset::D => ic(true, true, false),
            Preset::E => ic(true, false, true),
            Preset::F => ic(false, true, true),
            Preset::G1 => Ablation {
                adv_mode: AdvMode::Conventional,
                ..Ablation::default()
            },
            Preset::G2 => Ablation::default(),
            Preset::Pix2pix => Ablation {
                ic_reg: false,
                ic_gen: false,
                ic_joint: false,
                adv_mode: AdvMode::Conventional,
                registration: RegistrationMode::None,
            },
            Preset::RegGan => Ablation {
                ic_reg: false,
                ic_gen: false,
                ic_joint: false,
                adv_mode: AdvMode::Conventional,
                registration: RegistrationMode::Forward,
            },
        }
    }

    pub fn apply(self, config: &mut ExperimentConfig) {
        config.train.ablation = self.ablation();
        config.train.preset = Some(self.name().to_string());
        config.model.aligners = self.ablation().needs_aligners();
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "a" => Preset::A,
            "b" => Preset::B,
            "c" => Preset::C,
            "d" => Preset::D,
            "e" => Preset::E,
            "f" => Preset::F,
            "g1" => Preset::G1,
            "g2" | "full" => Preset::G2,
            "pix2pix" => Preset::Pix2pix,
            "reggan" => Preset::RegGan,
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset `{s}` (A-F, G1, G2, full, pix2pix, reggan)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Coupled L2 weight decay of both optimizers.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops training after this many steps, even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Name of the preset the ablation came from, for the record.
    pub preset: Option<String>,
    pub ablation: Ablation,
    /// Steps between validation scores.
    pub validation_interval: usize,
    /// Upper bound on held-out pairs scored per validation.
    pub validation_samples: usize,
    /// Let the generator-side adversarial loss reach the regressors.
    pub adv_grad_to_regressors: bool,
    pub generator_adv_form: GeneratorAdvForm,
    /// Keep only the newest N checkpoints; 0 keeps all.
    pub keep_checkpoints: usize,
    /// `cpu`, `cuda` or `auto`.
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            weight_decay: 1e-4,
            batch_size: 1,
            epochs: 50,
            max_steps: None,
            seed: 0,
            preset: None,
            ablation: Ablation::default(),
            validation_interval: 500,
            validation_samples: 32,
            adv_grad_to_regressors: true,
            generator_adv_form: GeneratorAdvForm::NonSaturating,
            keep_checkpoints: 0,
            device: "cpu".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("train.{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.validation_interval == 0 {
            return bad("train.batch_size, train.epochs and train.validation_interval must be >= 1".into());
        }
        if let Some(p) = &self.preset {
            p.parse::<Preset>()?;
        }
        self.device()?;
        Ok(())
    }

    pub fn device(&self) -> Result<Device> {
        match self.device.as_str() {
            "cpu" => Ok(Device::Cpu),
            "cuda" => Ok(Device::Cuda(0)),
            "auto" => Ok(Device::cuda_if_available()),
            other => Err(Error::Config(format!(
                "unknown train.device `{other}` (cpu, cuda, auto)"
            ))),
        }
    }
}

/// Stacked `[N, 1, H, W]` source and target images.
#[derive(Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub x: Tensor,
    pub y: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[PairedSample], device: Device) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::arg("empty batch"))?;
        if samples.iter().any(|s| s.source.dims() != first.source.dims()) {
            return Err(Error::shape("batch samples differ in size"));
        }
        let stack = |f: fn(&PairedSample) -> &Image2D| {
            Tensor::cat(&samples.iter().map(|s| f(s).to_tensor()).collect::<Vec<_>>(), 0).to_device(device)
        };
        Ok(Self {
            ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
            x: stack(|s| &s.source),
            y: stack(|s| &s.target),
        })
    }
}

struct Outputs {
    g_out: Tensor,
    f_out: Tensor,
    fields: FieldSet,
}

fn scalar(t: &Tensor) -> f64 {
    f64::try_from(t.detach().to_kind(Kind::Double)).unwrap_or(f64::NAN)
}

/// Model plus optimizers and counters.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: DaGanModel,
    gen_opt: nn::Optimizer,
    disc_opt: nn::Optimizer,
    pub step: usize,
    pub device: Device,
}

impl fmt::Debug for Trainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trainer")
            .field("step", &self.step)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    /// Seeds torch from the `init` stream and builds the model and optimizers.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let ablation = &config.train.ablation;
        if ablation.needs_aligners() && !config.model.aligners {
            return Err(Error::Config(
                "registration or ic_reg is enabled but model.aligners is false".into(),
            ));
        }
        let device = config.train.device()?;
        tch::manual_seed(derive_seed(config.train.seed, "init") as i64);
        let model = DaGanModel::new(&config.model, device)?;
        let adam = nn::Adam {
            beta1: config.train.adam_beta1,
            beta2: config.train.adam_beta2,
            wd: config.train.weight_decay,
            eps: 1e-8,
            amsgrad: false,
        };
        let gen_opt = adam.build(&model.gen_vs, config.train.learning_rate)?;
        let disc_opt = adam.build(&model.disc_vs, config.train.learning_rate)?;
        Ok(Self {
            config: config.clone(),
            model,
            gen_opt,
            disc_opt,
            step: 0,
            device,
        })
    }

    fn weights(&self) -> &LossWeights {
        &self.config.loss_weights
    }

    fn ablation(&self) -> &Ablation {
        &self.config.train.ablation
    }

    fn needs_backward_fields(&self) -> bool {
        let a = self.ablation();
        a.registration == RegistrationMode::Symmetric || a.ic_reg || a.adv_mode == AdvMode::DeformationAware
    }

    fn outputs(&self, batch: &Batch) -> Result<Outputs> {
        let g_out = self.model.g.try_forward(&batch.x)?;
        let f_out = self.model.f.try_forward(&batch.y)?;
        let mut fields = FieldSet::zeros_like(&batch.x);
        if let (Some(ay), Some(ax)) = (&self.model.aligner_y, &self.model.aligner_x) {
            fields.y_fwd = ay.forward.forward(&g_out, &batch.y)?;
            fields.x_fwd = ax.forward.forward(&f_out, &batch.x)?;
            if self.needs_backward_fields() {
                fields.y_bwd = ay.backward.forward(&batch.y, &g_out)?;
                fields.x_bwd = ax.backward.forward(&batch.x, &f_out)?;
            }
        }
        Ok(Outputs { g_out, f_out, fields })
    }

    /// Discriminator objective on detached generator outputs and fields.
    pub fn discriminator_objective(&self, batch: &Batch) -> Result<Tensor> {
        let o = tch::no_grad(|| self.outputs(batch))?;
        let (m, fl) = (&self.model, &o.fields);
        Ok(match self.ablation().adv_mode {
            AdvMode::DeformationAware => {
                adv_da_discriminator_loss(&m.d_y, Domain::Y, &batch.y, &o.g_out, &fl.y_fwd, &fl.y_bwd)?
                    + adv_da_discriminator_loss(&m.d_x, Domain::X, &batch.x, &o.f_out, &fl.x_fwd, &fl.x_bwd)?
            }
            AdvMode::Conventional => {
                conventional_adv_discriminator_loss(&m.d_y, Domain::Y, &batch.y, &o.g_out)?
                    + conventional_adv_discriminator_loss(&m.d_x, Domain::X, &batch.x, &o.f_out)?
            }
        })
    }

    /// Phase 1: one discriminator update. Returns the discriminator loss.
    pub fn discriminator_phase(&mut self, batch: &Batch) -> Result<f64> {
        let loss = self.discriminator_objective(batch)?;
        let value = scalar(&loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("discriminator loss {value}"),
            });
        }
        self.disc_opt.zero_grad();
        loss.backward();
        self.disc_opt.step();
        Ok(value)
    }

    /// Generator/aligner objective and its report, with gradient tracking.
    /// `None` when every active term has weight zero.
    pub fn generator_objective(&self, batch: &Batch) -> Result<(Option<Tensor>, LossReport)> {
        let a = self.ablation().clone();
        let (x, y) = (&batch.x, &batch.y);
        let o = self.outputs(batch)?;
        let fl = &o.fields;
        let m = &self.model;
        let mut c = LossComponents::default();
        match a.registration {
            RegistrationMode::Symmetric => {
                c.sim = Some(sim_loss(x, y, &o.g_out, &o.f_out, fl)?);
                c.smt = Some(smoothness_loss(fl)?);
            }
            RegistrationMode::Forward => {
                c.sim = Some(l1(y, &warp(&o.g_out, &fl.y_fwd)?)? + l1(x, &warp(&o.f_out, &fl.x_fwd)?)?);
                c.smt = Some(
                    spatial_gradient(&fl.y_fwd)?.square().mean(Kind::Float)
                        + spatial_gradient(&fl.x_fwd)?.square().mean(Kind::Float),
                );
            }
            RegistrationMode::None => {
                c.sim = Some(unwarped_sim_loss(x, y, &o.g_out, &o.f_out)?);
            }
        }
        if a.ic_reg {
            c.ic_reg = Some(ic_reg_loss(x, y, fl)?);
        }
        if a.ic_gen {
            c.ic_gen = Some(ic_gen_loss_with(x, y, &o.g_out, &o.f_out, &m.g, &m.f)?);
        }
        if a.ic_joint {
            c.ic_joint = Some(ic_joint_loss_with(x, y, &o.g_out, &o.f_out, &m.g, &m.f, fl)?);
        }
        let form = self.config.train.generator_adv_form;
        let adv = match a.adv_mode {
            AdvMode::DeformationAware => {
                let (fy, fx) = if self.config.train.adv_grad_to_regressors {
                    (fl.y_fwd.shallow_clone(), fl.x_fwd.shallow_clone())
                } else {
                    (fl.y_fwd.detach(), fl.x_fwd.detach())
                };
                adv_da_generator_loss(&m.d_y, Domain::Y, &o.g_out, &fy, form)?
                    + adv_da_generator_loss(&m.d_x, Domain::X, &o.f_out, &fx, form)?
            }
            AdvMode::Conventional => {
                conventional_adv_generator_loss(&m.d_y, Domain::Y, &o.g_out, form)?
                    + conventional_adv_generator_loss(&m.d_x, Domain::X, &o.f_out, form)?
            }
        };
        c.adv = Some((a.adv_mode, adv));
        Ok(total_loss(&c, self.weights()))
    }

    /// Phase 2: one generator/aligner update with the discriminators frozen.
    pub fn generator_phase(&mut self, batch: &Batch) -> Result<LossReport> {
        self.model.disc_vs.freeze();
        let result = (|| {
            let (objective, report) = self.generator_objective(batch)?;
            if !report.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    detail: serde_json::to_string(&report.terms)?,
                });
            }
            if let Some(objective) = objective {
                self.gen_opt.zero_grad();
                objective.backward();
                self.gen_opt.step();
            }
            Ok(report)
        })();
        self.model.disc_vs.unfreeze();
        result
    }

    /// One full step. The discriminator phase is skipped when the adversarial
    /// weight is zero, since nothing downstream reads the discriminators then.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let disc = if self.weights().lambda_adv_da > 0.0 {
            Some(self.discriminator_phase(batch)?)
        } else {
            None
        };
        let mut report = self.generator_phase(batch)?;
        report.discriminator = disc;
        self.step += 1;
        Ok(report)
    }

    /// Mean foreground NMAE of `G(source)` against each sample's reference.
    pub fn validation_nmae(&self, samples: &[PairedSample]) -> Result<f64> {
        validation_nmae(&self.model, samples, &self.config)
    }
}

/// Mean foreground NMAE of `G(source)` against each sample's reference.
pub fn validation_nmae(model: &DaGanModel, samples: &[PairedSample], config: &ExperimentConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Metric("no validation samples".into()));
    }
    let preds = synthesize(model, samples, Direction::XToY)?;
    let mut total = 0.0;
    for (pred, s) in preds.iter().zip(samples) {
        let mask = foreground_mask(
            s.reference(),
            config.eval.background_level,
            config.eval.background_tolerance,
        )?;
        total += nmae(pred, s.reference(), &mask)?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Source to target through `G`.
    XToY,
    /// Target to source through `F`.
    YToX,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x2y" | "x->y" | "xy" => Ok(Direction::XToY),
            "y2x" | "y->x" | "yx" => Ok(Direction::YToX),
            _ => Err(Error::arg(format!("unknown direction `{s}` (x2y, y2x)"))),
        }
    }
}

fn translate(model: &DaGanModel, input: &Image2D, direction: Direction) -> Result<Image2D> {
    let generator = match direction {
        Direction::XToY => &model.g,
        Direction::YToX => &model.f,
    };
    let device = model.gen_vs.device();
    let out = tch::no_grad(|| generator.try_forward(&input.to_tensor().to_device(device)))?;
    Image2D::from_tensor(&out.to_device(Device::Cpu))
}

/// Generator-only inference; predictions are not warped.
pub fn synthesize(model: &DaGanModel, samples: &[PairedSample], direction: Direction) -> Result<Vec<Image2D>> {
    samples
        .iter()
        .map(|s| {
            let (input, counterpart) = match direction {
                Direction::XToY => (&s.source, &s.target),
                Direction::YToX => (&s.target, &s.source),
            };
            Ok(translate(model, input, direction)?.with_intensity_scale(counterpart.intensity_scale()))
        })
        .collect()
}

/// Inference plus the forward field registering each prediction onto its real
/// counterpart, when the model has aligners.
pub fn synthesize_with_fields(
    model: &DaGanModel,
    samples: &[PairedSample],
    direction: Direction,
) -> Result<Vec<(Image2D, Option<DeformationField2D>)>> {
    let preds = synthesize(model, samples, direction)?;
    let aligner = match direction {
        Direction::XToY => model.aligner_y.as_ref(),
        Direction::YToX => model.aligner_x.as_ref(),
    };
    let device = model.gen_vs.device();
    preds
        .into_iter()
        .zip(samples)
        .map(|(pred, s)| {
            let real = match direction {
                Direction::XToY => &s.target,
                Direction::YToX => &s.source,
            };
            let field = match aligner {
                Some(a) => {
                    let f = tch::no_grad(|| {
                        a.forward
                            .forward(&pred.to_tensor().to_device(device), &real.to_tensor().to_device(device))
                    })?;
                    Some(DeformationField2D::from_tensor(&f.to_device(Device::Cpu))?)
                }
                None => None,
            };
            Ok((pred, field))
        })
        .collect()
}

/// Squared L2 norm of the defined gradients per network; networks whose
/// parameters have no gradient report 0.
pub fn grad_norms(model: &DaGanModel) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for vs in [&model.gen_vs, &model.disc_vs] {
        for (name, t) in vs.variables() {
            let g = t.grad();
            let v = if g.defined() {
                scalar(&g.square().sum(Kind::Double))
            } else {
                0.0
            };
            *out.entry(crate::checkpoint::network_of(&name)).or_insert(0.0) += v;
        }
    }
    out
}

/// Run directory file names.
pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const LOSSES_CSV: &str = "losses.csv";
pub const VALIDATION_CSV: &str = "validation.csv";
pub const PARAMS_JSON: &str = "params.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub steps: usize,
    pub epochs: usize,
    pub initial_validation_nmae: Option<f64>,
    pub final_validation_nmae: Option<f64>,
    pub last_checkpoint: Option<PathBuf>,
    pub config_hash: String,
}

struct CsvLog {
    out: BufWriter<File>,
}

impl CsvLog {
    fn open(path: &Path, header: &str, append: bool) -> Result<Self> {
        let fresh = !append || !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(path)?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{header}")?;
        }
        Ok(Self { out })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.out, "{}", fields.join(","))?;
        self.out.flush()?;
        Ok(())
    }
}

fn load_samples(manifest: &DatasetManifest, indices: &[usize]) -> Result<Vec<PairedSample>> {
    indices.iter().map(|&i| manifest.load_pair(i)).collect()
}

fn dump_diagnostics(run_dir: &Path, step: usize, batch: &[PairedSample], err: &Error) -> Result<PathBuf> {
    let dir = run_dir.join("diagnostics").join(format!("step_{step:06}"));
    fs::create_dir_all(&dir)?;
    for s in batch {
        write_image(
            &dir.join(format!("{}_source.f32", s.sample_id)),
            &s.source,
            IntensityScale::UNIT,
        )?;
        write_image(
            &dir.join(format!("{}_target.f32", s.sample_id)),
            &s.target,
            IntensityScale::UNIT,
        )?;
    }
    let info = serde_json::json!({
        "step": step,
        "samples": batch.iter().map(|s| s.sample_id.clone()).collect::<Vec<_>>(),
        "error": err.to_string(),
    });
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&info)?)?;
    Ok(dir)
}

fn write_preview(trainer: &Trainer, sample: &PairedSample, path: &Path) -> Result<()> {
    let pred = translate(&trainer.model, &sample.source, Direction::XToY)?;
    write_panel_strip(
        path,
        &[
            (&sample.source, -1.0, 1.0),
            (&pred, -1.0, 1.0),
            (sample.reference(), -1.0, 1.0),
        ],
    )
}

/// Splits a manifest into training indices and held-out validation samples.
pub fn split_holdout(
    dataset: &DatasetManifest,
    validation: Option<&DatasetManifest>,
    config: &ExperimentConfig,
) -> Result<(Vec<usize>, Vec<PairedSample>)> {
    let n = dataset.len();
    let cap = config.train.validation_samples;
    match validation {
        Some(v) => {
            let k = v.len().min(cap);
            Ok(((0..n).collect(), load_samples(v, &(0..k).collect::<Vec<_>>())?))
        }
        None => {
            let hold = config.data.holdout;
            if hold >= n && n > 0 {
                return Err(Error::Config(format!(
                    "data.holdout {hold} leaves no training pairs out of {n}"
                )));
            }
            let held: Vec<usize> = (n - hold..n).take(cap).collect();
            Ok(((0..n - hold).collect(), load_samples(dataset, &held)?))
        }
    }
}

/// Trains into `run_dir`. With `resume`, continues from that checkpoint
/// directory (or from the newest checkpoint of the run when it is the run
/// directory itself); parameters are restored and optimizer moments restart.
pub fn train(
    config: &ExperimentConfig,
    dataset: &DatasetManifest,
    validation: Option<&DatasetManifest>,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunSummary> {
    if dataset.is_empty() {
        return Err(Error::arg("training dataset is empty"));
    }
    let with_resize = |m: &DatasetManifest| {
        let mut m = m.clone();
        if let Some([h, w]) = config.data.resize {
            m.resize = Some((h, w));
        }
        m
    };
    let dataset = &with_resize(dataset);
    let validation = validation.map(with_resize);
    let validation = validation.as_ref();
    let mut trainer = Trainer::new(config)?;
    let hash = config.hash()?;
    let ckpt_root = run_dir.join("checkpoints");
    let mut start_epoch = 0;
    if let Some(path) = resume {
        let dir = if path.join(INDEX_FILE).is_file() {
            path.to_path_buf()
        } else {
            latest_checkpoint(&path.join("checkpoints"))?
                .ok_or_else(|| Error::Checkpoint(format!("no checkpoint under {}", path.display())))?
        };
        let index = load_into(&mut trainer.model, &dir)?;
        if index.config_hash != hash {
            log::warn!("resuming from a checkpoint written under a different configuration");
        }
        trainer.step = index.step;
        start_epoch = index.epoch;
    }
    fs::create_dir_all(run_dir)?;
    config.write_resolved(&run_dir.join(RESOLVED_CONFIG))?;
    let params = serde_json::json!({
        "total": trainer.model.count_parameters(),
        "size_bytes": trainer.model.model_size_bytes(),
        "networks": trainer.model.parameter_counts(),
    });
    fs::write(run_dir.join(PARAMS_JSON), serde_json::to_string_pretty(&params)?)?;

    let (train_idx, val_samples) = split_holdout(dataset, validation, config)?;
    if train_idx.is_empty() {
        return Err(Error::arg("no training pairs left after the holdout"));
    }
    let terms = config.train.ablation.expected_terms();
    let header = format!("step,epoch,{},total,discriminator", terms.join(","));
    let appending = resume.is_some();
    let mut losses = CsvLog::open(&run_dir.join(LOSSES_CSV), &header, appending)?;
    let mut val_log = CsvLog::open(&run_dir.join(VALIDATION_CSV), "step,nmae", appending)?;

    let mut summary = RunSummary {
        run_dir: run_dir.to_path_buf(),
        steps: trainer.step,
        epochs: start_epoch,
        initial_validation_nmae: None,
        final_validation_nmae: None,
        last_checkpoint: None,
        config_hash: hash.clone(),
    };
    let validate = |trainer: &Trainer, log: &mut CsvLog| -> Result<Option<f64>> {
        if val_samples.is_empty() {
            return Ok(None);
        }
        let v = trainer.validation_nmae(&val_samples)?;
        log.row(&[trainer.step.to_string(), format!("{v:.8}")])?;
        Ok(Some(v))
    };
    let initial = validate(&trainer, &mut val_log)?;
    summary.initial_validation_nmae = initial;
    let mut last_validated = Some(trainer.step);
    let preview_sample = match val_samples.first() {
        Some(s) => s.clone(),
        None => dataset.load_pair(train_idx[0])?,
    };
    let max_steps = config.train.max_steps.unwrap_or(usize::MAX);

    let train_set: std::collections::HashSet<usize> = train_idx.iter().copied().collect();
    let mut epoch = start_epoch;
    while epoch < config.train.epochs && trainer.step < max_steps {
        let order: Vec<usize> = dataset
            .epoch_order(config.train.seed, epoch)
            .into_iter()
            .filter(|i| train_set.contains(i))
            .collect();
        for chunk in order.chunks(config.train.batch_size) {
            if trainer.step >= max_steps {
                break;
            }
            let samples = load_samples(dataset, chunk)?;
            let batch = Batch::from_samples(&samples, trainer.device)?;
            let report = match trainer.train_step(&batch) {
                Ok(r) => r,
                Err(e @ Error::NonFinite { .. }) => {
                    let dir = dump_diagnostics(run_dir, trainer.step, &samples, &e)?;
                    log::error!("non-finite loss; diagnostics in {}", dir.display());
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let mut row = vec![trainer.step.to_string(), (epoch + 1).to_string()];
            for t in &terms {
                row.push(format!("{:.8}", report.get(t).unwrap_or(f64::NAN)));
            }
            row.push(format!("{:.8}", report.total));
            row.push(report.discriminator.map_or(String::new(), |d| format!("{d:.8}")));
            losses.row(&row)?;
            if trainer.step % config.train.validation_interval == 0 {
                summary.final_validation_nmae = validate(&trainer, &mut val_log)?;
                last_validated = Some(trainer.step);
            }
        }
        epoch += 1;
        let dir = epoch_dir(&ckpt_root, epoch);
        save_checkpoint(&trainer.model, &dir, trainer.step, epoch, &hash)?;
        write_preview(
            &trainer,
            &preview_sample,
            &run_dir.join("samples").join(format!("epoch_{epoch:03}.png")),
        )?;
        summary.last_checkpoint = Some(dir);
        if config.train.keep_checkpoints > 0 {
            let all = list_checkpoints(&ckpt_root)?;
            let excess = all.len().saturating_sub(config.train.keep_checkpoints);
            for old in &all[..excess] {
                fs::remove_dir_all(old)?;
            }
        }
    }
    if last_validated != Some(trainer.step) {
        summary.final_validation_nmae = validate(&trainer, &mut val_log)?;
    } else if summary.final_validation_nmae.is_none() {
        summary.final_validation_nmae = initial;
    }
    summary.steps = trainer.step;
    summary.epochs = epoch;
    fs::write(run_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub final_validation_nmae: Option<f64>,
    pub run_dir: PathBuf,
}

/// Trains once per value of one loss weight and tabulates the final
/// validation NMAE, in input order. Writes `sweep.csv` under `out_dir`.
pub fn sensitivity_sweep(
    config: &ExperimentConfig,
    dataset: &DatasetManifest,
    validation: Option<&DatasetManifest>,
    out_dir: &Path,
    parameter: &str,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    config.loss_weights.get(parameter)?;
    let mut rows = Vec::with_capacity(values.len());
    for (i, &value) in values.iter().enumerate() {
        let mut c = config.clone();
        c.loss_weights.set(parameter, value)?;
        c.validate()?;
        let run_dir = out_dir.join(format!("{i:02}_{parameter}_{value}"));
        let s = train(&c, dataset, validation, &run_dir, None)?;
        rows.push(SweepRow {
            parameter: parameter.to_string(),
            value,
            final_validation_nmae: s.final_validation_nmae,
            run_dir,
        });
    }
    let mut csv = String::from("parameter,value,final_validation_nmae\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            r.parameter,
            r.value,
            r.final_validation_nmae.map_or(String::new(), |v| v.to_string())
        ));
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("sweep.csv"), csv)?;
    Ok(rows)
}
