use std::{
    env, fs,
    path::{Path, PathBuf},
    process::ExitCode,
};

use clap::{Args, Parser, Subcommand};
use dagan::{
    checkpoint::load_model,
    config::ExperimentConfig,
    deform_sim::{level_spec, simulate_dataset, LEVELS},
    evaluation::{evaluate_model, evaluate_predictions, run_ablation, ABLATION_CSV},
    imaging::{abs_difference, load_dataset, normalize, read_raw_image, write_image, write_panel_strip},
    phantom::{generate_phantom_dataset, ModalityMap, PhantomSpec},
    training::{sensitivity_sweep, synthesize_with_fields, train, Direction, Preset},
    DatasetManifest, Error, Image2D,
};
use tch::Device;

/// Relative data paths are looked up here when they do not exist as given.
const DATA_ROOT_ENV: &str = "DAGAN_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(
    name = "dagan",
    version,
    about = "Deformation-aware GAN for translation of misaligned image pairs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an aligned two-modality phantom dataset.
    Phantom(PhantomArgs),
    /// Misalign a dataset with graded elastic deformation.
    Simulate(SimulateArgs),
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Translate every pair of a dataset with a checkpoint.
    Synth(SynthArgs),
    /// Score predictions or a checkpoint against a dataset's references.
    Eval(EvalArgs),
    /// Train and score several ablation presets.
    Ablate(AblateArgs),
    /// Prediction, reference and error-map panels side by side.
    Plot(PlotArgs),
    /// Train once per value of one loss weight.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Training manifest; overrides `data.manifest`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the same intensities for both modalities.
    #[arg(long)]
    identity: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Misalignment level NA-1 to NA-6.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=LEVELS as i64))]
    level: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// A-F, G1, G2 (= full), pix2pix or reggan.
    #[arg(long)]
    preset: Option<String>,
    /// Checkpoint directory, or a run directory to continue from its newest checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// x2y (through G) or y2x (through F).
    #[arg(long, default_value = "x2y")]
    direction: String,
    /// Also write the field registering each prediction onto its real counterpart.
    #[arg(long)]
    fields: bool,
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "pred", required_unless_present = "pred")]
    checkpoint: Option<PathBuf>,
    /// Directory of predictions named `<pair id>.<ext>`.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, default_value = "x2y")]
    direction: String,
    /// TOML file whose `[eval]` section sets metric options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset, e.g. `B,F`. Defaults to A-F, G1, G2.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Physical window `lo,hi` shared by both images; defaults to the reference extremes.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    range: Option<Vec<f64>>,
    /// Upper end of the error-map window in normalized units.
    #[arg(long, default_value_t = 0.5)]
    error_max: f32,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Loss weight name, e.g. `lambda_reg`.
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

fn data_path(p: &Path) -> PathBuf {
    if p.is_absolute() || p.exists() {
        return p.to_path_buf();
    }
    match env::var_os(DATA_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(p),
        None => p.to_path_buf(),
    }
}

fn manifest(p: &Path) -> Result<DatasetManifest, Error> {
    let path = data_path(p);
    if !path.exists() {
        return Err(Error::Argument(format!(
            "dataset manifest {} not found",
            path.display()
        )));
    }
    load_dataset(path)
}

fn direction(s: &str) -> Result<Direction, Error> {
    s.parse()
}

fn device(s: &str) -> Result<Device, Error> {
    dagan::training::TrainConfig {
        device: s.to_string(),
        ..Default::default()
    }
    .device()
}

fn resolve_config(args: &ConfigArgs, extra: &[String]) -> Result<ExperimentConfig, Error> {
    let mut overrides = args.overrides.clone();
    overrides.extend_from_slice(extra);
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_file(path, &overrides)?,
        None => ExperimentConfig::resolve("", &overrides)?,
    };
    if let Some(d) = &args.data {
        config.data.manifest = Some(d.clone());
    }
    Ok(config)
}

fn datasets(config: &ExperimentConfig) -> Result<(DatasetManifest, Option<DatasetManifest>), Error> {
    let train_path = config
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("no training data: pass --data or set data.manifest".into()))?;
    let validation = config.data.validation_manifest.as_deref().map(manifest).transpose()?;
    Ok((manifest(train_path)?, validation))
}

fn cmd_phantom(a: PhantomArgs) -> Result<(), Error> {
    let spec = PhantomSpec {
        image_size: a.size,
        n_samples: a.n,
        seed: a.seed,
        modality_map: if a.identity {
            ModalityMap::Identity
        } else {
            ModalityMap::default()
        },
        ..PhantomSpec::default()
    };
    let m = generate_phantom_dataset(&spec, &a.out)?;
    println!("wrote {} phantom pairs to {}", m.len(), a.out.display());
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), Error> {
    let input = manifest(&a.data)?;
    let spec = level_spec(a.level as usize)?.with_seed(a.seed);
    let out = simulate_dataset(&input, &spec, &a.out)?;
    println!(
        "wrote {} pairs misaligned at {} (magnitude {:?} px) to {}",
        out.len(),
        spec.level_name,
        spec.magnitude_range,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    let extra: Vec<String> = a.preset.iter().map(|p| format!("train.preset=\"{p}\"")).collect();
    let config = resolve_config(&a.config, &extra)?;
    let (data, validation) = datasets(&config)?;
    let s = train(&config, &data, validation.as_ref(), &a.out, a.resume.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), Error> {
    let data = manifest(&a.data)?;
    let dir = direction(&a.direction)?;
    let (model, _) = load_model(&a.checkpoint, device(&a.device)?)?;
    let samples = data.load_all()?;
    let scale = match dir {
        Direction::XToY => data.target_scale()?,
        Direction::YToX => data.source_scale()?,
    };
    let results = synthesize_with_fields(&model, &samples, dir)?;
    for (s, (pred, field)) in samples.iter().zip(&results) {
        write_image(&a.out.join(format!("{}.f32", s.sample_id)), pred, scale)?;
        if let (true, Some(f)) = (a.fields, field) {
            f.write(&a.out.join("fields").join(format!("{}.f32", s.sample_id)))?;
        }
    }
    println!("wrote {} predictions to {}", results.len(), a.out.display());
    Ok(())
}

fn find_prediction(dir: &Path, id: &str) -> Result<PathBuf, Error> {
    ["f32", "raw", "bin", "png"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Argument(format!("no prediction for `{id}` in {}", dir.display())))
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    let data = manifest(&a.data)?;
    let metrics = match &a.config {
        Some(p) => ExperimentConfig::from_file(p, &[])?.eval,
        None => Default::default(),
    };
    let eval = match (&a.checkpoint, &a.pred) {
        (Some(ckpt), _) => {
            let (model, _) = load_model(ckpt, device(&a.device)?)?;
            evaluate_model(&model, &data, direction(&a.direction)?, &metrics)?
        }
        (None, Some(pred_dir)) => {
            let scale = data.target_scale()?;
            let preds = data
                .pairs
                .iter()
                .map(|r| {
                    let raw = read_raw_image(&find_prediction(pred_dir, &r.id)?)?;
                    normalize(&raw, scale.lo, scale.hi)
                })
                .collect::<Result<Vec<_>, _>>()?;
            evaluate_predictions(&data, &preds, &metrics)?
        }
        (None, None) => unreachable!("clap requires one of --checkpoint and --pred"),
    };
    eval.write(&a.out)?;
    for (name, s) in eval.report.summary.iter().chain(&eval.volume_summary()) {
        println!("{name:>7}: {:.6} ± {:.6} (n = {})", s.mean, s.std, s.n);
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<(), Error> {
    let config = resolve_config(&a.config, &[])?;
    let presets = if a.only.is_empty() {
        Preset::ABLATION.to_vec()
    } else {
        a.only
            .iter()
            .map(|s| s.trim().parse())
            .collect::<Result<Vec<Preset>, _>>()?
    };
    let (data, validation) = datasets(&config)?;
    run_ablation(&config, &presets, &data, validation.as_ref(), &a.out)?;
    print!("{}", fs::read_to_string(a.out.join(ABLATION_CSV))?);
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<(), Error> {
    let pred = read_raw_image(&a.pred)?;
    let reference = read_raw_image(&a.reference)?;
    let (lo, hi) = match a.range.as_deref() {
        Some([lo, hi]) => (*lo, *hi),
        _ => extremes(&reference.values),
    };
    let p: Image2D = normalize(&pred, lo, hi)?;
    let r: Image2D = normalize(&reference, lo, hi)?;
    let err = abs_difference(&p, &r)?;
    write_panel_strip(&a.out, &[(&p, -1.0, 1.0), (&r, -1.0, 1.0), (&err, 0.0, a.error_max)])?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn extremes(values: &[f32]) -> (f64, f64) {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, lo + 1.0)
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Error> {
    let config = resolve_config(&a.config, &[])?;
    let (data, validation) = datasets(&config)?;
    sensitivity_sweep(&config, &data, validation.as_ref(), &a.out, &a.param, &a.values)?;
    print!("{}", fs::read_to_string(a.out.join("sweep.csv"))?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Argument(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
