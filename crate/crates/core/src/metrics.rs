//! Masked image-quality metrics for slices and stacked volumes.
//!
//! 2D metrics work in normalized units. Volume metrics denormalize through each
//! slice's intensity scale and report physical units. Pixels outside the mask
//! never influence a value: windowed metrics see them at the background level.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{
    imaging::{foreground_mask, Image2D, Mask, DEFAULT_BACKGROUND_LEVEL, DEFAULT_BACKGROUND_TOLERANCE},
    Error, Result,
};

pub const DEFAULT_DATA_RANGE: f64 = 2.0;
/// Value substituted for infinite PSNR in aggregates.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_dims(pred: &Image2D, reference: &Image2D, mask: &Mask) -> Result<()> {
    if pred.dims() != reference.dims() || (mask.height, mask.width) != reference.dims() {
        return Err(Error::shape(format!(
            "pred {:?}, reference {:?}, mask {:?}",
            pred.dims(),
            reference.dims(),
            (mask.height, mask.width)
        )));
    }
    Ok(())
}

fn masked_pairs<'a>(pred: &'a [f64], reference: &'a [f64], mask: &'a [bool]) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.iter()
        .zip(reference)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &r), _)| (p, r))
}

fn as_f64(img: &Image2D) -> Vec<f64> {
    img.values().iter().map(|&v| v as f64).collect()
}

fn nmae_values(pred: &[f64], reference: &[f64], mask: &[bool]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (p, r) in masked_pairs(pred, reference, mask) {
        sum += (p - r).abs();
        n += 1;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    if n == 0 {
        return Err(Error::Metric("empty mask".into()));
    }
    if hi <= lo {
        return Err(Error::Metric("reference is constant on the mask".into()));
    }
    Ok(sum / n as f64 / (hi - lo))
}

/// Mean absolute error over the mask divided by the reference's range on the mask.
pub fn nmae(pred: &Image2D, reference: &Image2D, mask: &Mask) -> Result<f64> {
    check_dims(pred, reference, mask)?;
    nmae_values(&as_f64(pred), &as_f64(reference), &mask.bits)
}

fn mse_values(pred: &[f64], reference: &[f64], mask: &[bool]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, r) in masked_pairs(pred, reference, mask) {
        sum += (p - r) * (p - r);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metric("empty mask".into()));
    }
    Ok(sum / n as f64)
}

fn psnr_from_mse(mse: f64, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::arg(format!("data range must be positive, got {data_range}")));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// PSNR in dB; `f64::INFINITY` when the masked images agree exactly.
pub fn psnr(pred: &Image2D, reference: &Image2D, mask: &Mask, data_range: f64) -> Result<f64> {
    check_dims(pred, reference, mask)?;
    psnr_from_mse(mse_values(&as_f64(pred), &as_f64(reference), &mask.bits)?, data_range)
}

/// Replaces the infinite sentinel by [`PSNR_CAP_DB`].
pub fn capped_psnr(value: f64) -> f64 {
    value.min(PSNR_CAP_DB)
}

/// Windowed SSIM settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: DEFAULT_DATA_RANGE,
        }
    }
}

/// Normalized 1D Gaussian of odd length `size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Dense `[d][h][w]` array.
struct Grid {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Grid {
    /// Valid-mode correlation along `axis` with `kernel`.
    fn filter(&self, axis: usize, kernel: &[f64]) -> Grid {
        let mut dims = self.dims;
        dims[axis] = dims[axis] + 1 - kernel.len();
        let stride = [self.dims[1] * self.dims[2], self.dims[2], 1][axis];
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let base = (z * self.dims[1] + y) * self.dims[2] + x;
                    let v: f64 = kernel
                        .iter()
                        .enumerate()
                        .map(|(k, w)| w * self.data[base + k * stride])
                        .sum();
                    data.push(v);
                }
            }
        }
        Grid { dims, data }
    }

    fn smooth(&self, kernels: &[Vec<f64>; 3]) -> Grid {
        self.filter(0, &kernels[0])
            .filter(1, &kernels[1])
            .filter(2, &kernels[2])
    }

    fn map2(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Grid {
        Grid {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// Mean SSIM over valid windows whose centre lies in the mask. Pixels outside
/// the mask are replaced by `fill` in both inputs first.
fn ssim_grid(
    pred: &[f64],
    reference: &[f64],
    mask: &[bool],
    dims: [usize; 3],
    kernels: [Vec<f64>; 3],
    params: &SsimParams,
    fill: f64,
) -> Result<f64> {
    for axis in 0..3 {
        if kernels[axis].len() > dims[axis] {
            return Err(Error::Metric(format!("input {dims:?} is smaller than the SSIM window")));
        }
    }
    let masked = |v: &[f64]| Grid {
        dims,
        data: v.iter().zip(mask).map(|(&x, &m)| if m { x } else { fill }).collect(),
    };
    let x = masked(pred);
    let y = masked(reference);
    let mu_x = x.smooth(&kernels);
    let mu_y = y.smooth(&kernels);
    let xx = x.map2(&x, |a, b| a * b).smooth(&kernels);
    let yy = y.map2(&y, |a, b| a * b).smooth(&kernels);
    let xy = x.map2(&y, |a, b| a * b).smooth(&kernels);
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);

    let half = kernels.clone().map(|k| k.len() / 2);
    let out = mu_x.dims;
    let (mut sum, mut n) = (0.0, 0usize);
    for z in 0..out[0] {
        for r in 0..out[1] {
            for c in 0..out[2] {
                let centre = ((z + half[0]) * dims[1] + r + half[1]) * dims[2] + c + half[2];
                if !mask[centre] {
                    continue;
                }
                let i = (z * out[1] + r) * out[2] + c;
                let (mx, my) = (mu_x.data[i], mu_y.data[i]);
                let vx = xx.data[i] - mx * mx;
                let vy = yy.data[i] - my * my;
                let cov = xy.data[i] - mx * my;
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Metric("no SSIM window centre lies in the mask".into()));
    }
    Ok(sum / n as f64)
}

pub fn ssim(pred: &Image2D, reference: &Image2D, mask: &Mask) -> Result<f64> {
    ssim_with(pred, reference, mask, &SsimParams::default())
}

pub fn ssim_with(pred: &Image2D, reference: &Image2D, mask: &Mask, params: &SsimParams) -> Result<f64> {
    check_dims(pred, reference, mask)?;
    let (h, w) = reference.dims();
    let g = gaussian_window(params.window, params.sigma);
    ssim_grid(
        &as_f64(pred),
        &as_f64(reference),
        &mask.bits,
        [1, h, w],
        [vec![1.0], g.clone(), g],
        params,
        DEFAULT_BACKGROUND_LEVEL as f64,
    )
}

struct Flattened {
    dims: [usize; 3],
    pred: Vec<f64>,
    reference: Vec<f64>,
    mask: Vec<bool>,
    /// Physical value of the normalized background level.
    fill: f64,
    /// Physical width of the reference intensity window.
    range: f64,
}

fn flatten(pred: &[Image2D], reference: &[Image2D], masks: &[Mask]) -> Result<Flattened> {
    if pred.is_empty() || pred.len() != reference.len() || pred.len() != masks.len() {
        return Err(Error::shape(format!(
            "volume slice counts differ or are zero: pred {}, reference {}, masks {}",
            pred.len(),
            reference.len(),
            masks.len()
        )));
    }
    let (h, w) = reference[0].dims();
    let mut out = Flattened {
        dims: [pred.len(), h, w],
        pred: Vec::new(),
        reference: Vec::new(),
        mask: Vec::new(),
        fill: 0.0,
        range: 0.0,
    };
    let scale = reference[0].intensity_scale();
    for ((p, r), m) in pred.iter().zip(reference).zip(masks) {
        if r.dims() != (h, w) {
            return Err(Error::shape(format!("slice {:?} in a {:?} volume", r.dims(), (h, w))));
        }
        check_dims(p, r, m)?;
        out.pred.extend(p.denormalized());
        out.reference.extend(r.denormalized());
        out.mask.extend(&m.bits);
    }
    out.fill = scale.denormalize(DEFAULT_BACKGROUND_LEVEL as f64);
    out.range = scale.hi - scale.lo;
    Ok(out)
}

/// Mean absolute error over the masked volume, in physical units.
pub fn mae3d(pred: &[Image2D], reference: &[Image2D], masks: &[Mask]) -> Result<f64> {
    let v = flatten(pred, reference, masks)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, r) in masked_pairs(&v.pred, &v.reference, &v.mask) {
        sum += (p - r).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metric("empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// Volume PSNR in physical units. `data_range` defaults to the width of the
/// reference intensity window.
pub fn psnr3d(pred: &[Image2D], reference: &[Image2D], masks: &[Mask], data_range: Option<f64>) -> Result<f64> {
    let v = flatten(pred, reference, masks)?;
    psnr_from_mse(
        mse_values(&v.pred, &v.reference, &v.mask)?,
        data_range.unwrap_or(v.range),
    )
}

/// Depth of the 3D SSIM window: 11, or the largest odd count that fits.
pub fn ssim3d_depth_window(depth: usize) -> usize {
    let odd = if depth % 2 == 1 { depth } else { depth.saturating_sub(1) };
    odd.clamp(1, 11)
}

/// Volume SSIM with an isotropic Gaussian 3D window, in physical units.
pub fn ssim3d(pred: &[Image2D], reference: &[Image2D], masks: &[Mask]) -> Result<f64> {
    let v = flatten(pred, reference, masks)?;
    let params = SsimParams {
        data_range: v.range,
        ..SsimParams::default()
    };
    let g = gaussian_window(params.window, params.sigma);
    let depth = gaussian_window(ssim3d_depth_window(v.dims[0]), params.sigma);
    ssim_grid(
        &v.pred,
        &v.reference,
        &v.mask,
        v.dims,
        [depth, g.clone(), g],
        &params,
        v.fill,
    )
}

/// `2|A n B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape("mask shapes differ"));
    }
    let both = a.bits.iter().zip(&b.bits).filter(|(&x, &y)| x && y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p_value: f64,
}

/// Paired two-sided t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Metric(format!(
            "paired t-test needs two equal-length samples of size >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let summary = Summary::of(&d);
    let df = (d.len() - 1) as f64;
    let se = summary.std / (d.len() as f64).sqrt();
    if se == 0.0 {
        return Err(Error::Metric("paired differences have zero variance".into()));
    }
    let t = summary.mean / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Metric(e.to_string()))?;
    let p_value = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest { t, df, p_value })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub data_range: f64,
    pub background_level: f32,
    pub background_tolerance: f32,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            data_range: DEFAULT_DATA_RANGE,
            background_level: DEFAULT_BACKGROUND_LEVEL,
            background_tolerance: DEFAULT_BACKGROUND_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub nmae: f64,
    /// May be infinite for an exact match.
    pub psnr: f64,
    pub ssim: f64,
    pub foreground_pixels: usize,
}

/// Scores one prediction against its reference, masking the reference background.
pub fn evaluate_pair(
    sample_id: &str,
    pred: &Image2D,
    reference: &Image2D,
    config: &MetricsConfig,
) -> Result<SampleMetrics> {
    let mask = foreground_mask(reference, config.background_level, config.background_tolerance)?;
    Ok(SampleMetrics {
        sample_id: sample_id.to_string(),
        nmae: nmae(pred, reference, &mask)?,
        psnr: psnr(pred, reference, &mask, config.data_range)?,
        ssim: ssim_with(
            pred,
            reference,
            &mask,
            &SsimParams {
                data_range: config.data_range,
                ..SsimParams::default()
            },
        )?,
        foreground_pixels: mask.count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: MetricsConfig,
    pub samples: Vec<SampleMetrics>,
    pub summary: BTreeMap<String, Summary>,
    pub foreground_pixels: usize,
}

impl MetricsReport {
    pub fn new(config: MetricsConfig, samples: Vec<SampleMetrics>) -> Self {
        let column = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).collect::<Vec<_>>();
        let mut summary = BTreeMap::new();
        summary.insert("nmae".to_string(), Summary::of(&column(|s| s.nmae)));
        summary.insert("psnr".to_string(), Summary::of(&column(|s| capped_psnr(s.psnr))));
        summary.insert("ssim".to_string(), Summary::of(&column(|s| s.ssim)));
        let foreground_pixels = samples.iter().map(|s| s.foreground_pixels).sum();
        Self {
            config,
            samples,
            summary,
            foreground_pixels,
        }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary.get(metric).map(|s| s.mean)
    }

    /// Per-sample CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,nmae,psnr,ssim,foreground_pixels\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.sample_id, s.nmae, s.psnr, s.ssim, s.foreground_pixels
            ));
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            config: &'a MetricsConfig,
            n_samples: usize,
            foreground_pixels: usize,
            metrics: &'a BTreeMap<String, Summary>,
        }
        Ok(serde_json::to_string_pretty(&Out {
            config: &self.config,
            n_samples: self.samples.len(),
            foreground_pixels: self.foreground_pixels,
            metrics: &self.summary,
        })?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub subject: String,
    pub slices: usize,
    pub mae3d: f64,
    pub psnr3d: f64,
    pub ssim3d: f64,
}

/// Scores one stacked volume; each slice is masked by its own reference background.
pub fn evaluate_volume(
    subject: &str,
    pred: &[Image2D],
    reference: &[Image2D],
    config: &MetricsConfig,
) -> Result<VolumeMetrics> {
    let masks = reference
        .iter()
        .map(|r| foreground_mask(r, config.background_level, config.background_tolerance))
        .collect::<Result<Vec<_>>>()?;
    Ok(VolumeMetrics {
        subject: subject.to_string(),
        slices: pred.len(),
        mae3d: mae3d(pred, reference, &masks)?,
        psnr3d: psnr3d(pred, reference, &masks, None)?,
        ssim3d: ssim3d(pred, reference, &masks)?,
    })
}
