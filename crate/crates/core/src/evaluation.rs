//! Scoring predictions on a dataset and tabulating ablation runs.
//!
//! Per-slice metrics are always computed. Volume metrics are added when every
//! pair carries a subject id and slice index; slices are stacked per subject in
//! slice order.

use std::{
    collections::BTreeMap,
    fs,
    path::{Path, PathBuf},
};

use serde::{Deserialize, Serialize};

use crate::{
    checkpoint::load_model,
    config::ExperimentConfig,
    imaging::{DatasetManifest, Image2D},
    metrics::{evaluate_pair, evaluate_volume, MetricsConfig, MetricsReport, Summary, VolumeMetrics},
    networks::DaGanModel,
    training::{synthesize, train, Direction, Preset},
    Error, Result,
};

pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const VOLUMES_CSV: &str = "volumes.csv";
pub const ABLATION_CSV: &str = "ablation.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Empty unless the dataset describes volumes.
    pub volumes: Vec<VolumeMetrics>,
}

impl Evaluation {
    pub fn volume_summary(&self) -> BTreeMap<String, Summary> {
        let column = |f: fn(&VolumeMetrics) -> f64| self.volumes.iter().map(f).collect::<Vec<_>>();
        let mut out = BTreeMap::new();
        if !self.volumes.is_empty() {
            out.insert("mae3d".to_string(), Summary::of(&column(|v| v.mae3d)));
            out.insert("psnr3d".to_string(), Summary::of(&column(|v| v.psnr3d)));
            out.insert("ssim3d".to_string(), Summary::of(&column(|v| v.ssim3d)));
        }
        out
    }

    /// Writes `metrics.csv`, `summary.json` and, for volumes, `volumes.csv`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        fs::write(out_dir.join(METRICS_CSV), self.report.to_csv())?;
        let mut summary: serde_json::Value = serde_json::from_str(&self.report.summary_json()?)?;
        if !self.volumes.is_empty() {
            summary["volume_metrics"] = serde_json::to_value(self.volume_summary())?;
            let mut csv = String::from("subject,slices,mae3d,psnr3d,ssim3d\n");
            for v in &self.volumes {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    v.subject, v.slices, v.mae3d, v.psnr3d, v.ssim3d
                ));
            }
            fs::write(out_dir.join(VOLUMES_CSV), csv)?;
        }
        fs::write(out_dir.join(SUMMARY_JSON), serde_json::to_string_pretty(&summary)?)?;
        Ok(())
    }
}

/// Scores `preds[i]` against the reference of pair `i` of `dataset`.
pub fn evaluate_predictions(
    dataset: &DatasetManifest,
    preds: &[Image2D],
    config: &MetricsConfig,
) -> Result<Evaluation> {
    if preds.len() != dataset.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} pairs",
            preds.len(),
            dataset.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Metric("nothing to evaluate".into()));
    }
    let mut samples = Vec::with_capacity(preds.len());
    let mut references = Vec::with_capacity(preds.len());
    for (i, pred) in preds.iter().enumerate() {
        let pair = dataset.load_pair(i)?;
        samples.push(evaluate_pair(&pair.sample_id, pred, pair.reference(), config)?);
        references.push(pair.reference().clone());
    }

    let mut volumes = Vec::new();
    if dataset.pairs.iter().all(|r| r.subject.is_some() && r.slice.is_some()) {
        let mut groups: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
        for (i, r) in dataset.pairs.iter().enumerate() {
            groups
                .entry(r.subject.as_deref().unwrap_or_default())
                .or_default()
                .push((r.slice.unwrap_or_default(), i));
        }
        for (subject, mut slices) in groups {
            slices.sort();
            let p: Vec<Image2D> = slices.iter().map(|&(_, i)| preds[i].clone()).collect();
            let r: Vec<Image2D> = slices.iter().map(|&(_, i)| references[i].clone()).collect();
            volumes.push(evaluate_volume(subject, &p, &r, config)?);
        }
    }
    Ok(Evaluation {
        report: MetricsReport::new(config.clone(), samples),
        volumes,
    })
}

pub fn evaluate_model(
    model: &DaGanModel,
    dataset: &DatasetManifest,
    direction: Direction,
    config: &MetricsConfig,
) -> Result<Evaluation> {
    let samples = dataset.load_all()?;
    let preds = synthesize(model, &samples, direction)?;
    evaluate_predictions(dataset, &preds, config)
}

/// Pairs used for held-out scoring: the validation manifest when given,
/// otherwise the trailing `data.holdout` pairs of the training manifest.
pub fn held_out(
    dataset: &DatasetManifest,
    validation: Option<&DatasetManifest>,
    config: &ExperimentConfig,
) -> Result<DatasetManifest> {
    let mut out = match validation {
        Some(v) => v.clone(),
        None => {
            let hold = config.data.holdout;
            if hold == 0 || hold >= dataset.len() {
                return Err(Error::Config(format!(
                    "need 0 < data.holdout < {} or a validation manifest",
                    dataset.len()
                )));
            }
            let mut m = dataset.clone();
            m.pairs.drain(..dataset.len() - hold);
            m
        }
    };
    if let Some([h, w]) = config.data.resize {
        out.resize = Some((h, w));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub preset: String,
    pub steps: usize,
    pub nmae: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub volume: Option<BTreeMap<String, f64>>,
    pub run_dir: PathBuf,
}

/// Comparison table; volume columns appear only when every row has them.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let volumes = !rows.is_empty() && rows.iter().all(|r| r.volume.is_some());
    let mut out = String::from("preset,steps");
    if volumes {
        out.push_str(",mae3d,psnr3d,ssim3d");
    }
    out.push_str(",nmae,psnr,ssim\n");
    for r in rows {
        out.push_str(&format!("{},{}", r.preset, r.steps));
        if let (true, Some(v)) = (volumes, &r.volume) {
            for k in ["mae3d", "psnr3d", "ssim3d"] {
                out.push_str(&format!(",{}", v[k]));
            }
        }
        out.push_str(&format!(",{},{},{}\n", r.nmae, r.psnr, r.ssim));
    }
    out
}

/// Trains each preset into `out_dir/<preset>` and scores it on the held-out
/// pairs. Writes `ablation.csv` after every run so partial tables survive.
pub fn run_ablation(
    config: &ExperimentConfig,
    presets: &[Preset],
    dataset: &DatasetManifest,
    validation: Option<&DatasetManifest>,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    let eval_set = held_out(dataset, validation, config)?;
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(presets.len());
    for &preset in presets {
        let mut c = config.clone();
        preset.apply(&mut c);
        let run_dir = out_dir.join(preset.name());
        let summary = train(&c, dataset, validation, &run_dir, None)?;
        let ckpt = summary
            .last_checkpoint
            .ok_or_else(|| Error::Checkpoint(format!("preset {preset} wrote no checkpoint")))?;
        let (model, _) = load_model(&ckpt, c.train.device()?)?;
        let eval = evaluate_model(&model, &eval_set, Direction::XToY, &c.eval)?;
        eval.write(&run_dir.join("eval"))?;
        let mean = |k: &str| eval.report.mean(k).unwrap_or(f64::NAN);
        let vol = eval.volume_summary();
        rows.push(AblationRow {
            preset: preset.name().to_string(),
            steps: summary.steps,
            nmae: mean("nmae"),
            psnr: mean("psnr"),
            ssim: mean("ssim"),
            volume: (!vol.is_empty()).then(|| vol.into_iter().map(|(k, s)| (k, s.mean)).collect()),
            run_dir,
        });
        fs::write(out_dir.join(ABLATION_CSV), ablation_csv(&rows))?;
    }
    Ok(rows)
}
