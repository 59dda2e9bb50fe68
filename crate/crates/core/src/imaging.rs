//! Image and dataset types, on-disk pixel formats, normalization and masking.
//!
//! Two pixel formats are accepted, selected by file extension:
//!
//! * `.png`: single-channel 8- or 16-bit grayscale. Stored integers are the
//!   physical values; the manifest's per-modality `[lo, hi]` maps them to
//!   `[-1, 1]`.
//! * `.f32` / `.raw` / `.bin`: row-major little-endian `f32` with a JSON
//!   sidecar at `<file>.json` holding `{"height": h, "width": w}`.

use std::{
    collections::{BTreeMap, HashSet},
    fs,
    path::{Path, PathBuf},
};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tch::{Device, Kind, Tensor};

use crate::{rng, Error, Result};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;

/// Physical-unit interval that maps onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityScale {
    pub lo: f64,
    pub hi: f64,
}

impl IntensityScale {
    pub const UNIT: IntensityScale = IntensityScale { lo: -1.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::arg(format!(
                "intensity range requires hi > lo, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    /// Physical value to normalized value, clamped to `[-1, 1]`.
    pub fn normalize(&self, v: f64) -> f64 {
        (2.0 * (v - self.lo) / (self.hi - self.lo) - 1.0).clamp(-1.0, 1.0)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.lo + (v + 1.0) * 0.5 * (self.hi - self.lo)
    }
}

impl Default for IntensityScale {
    fn default() -> Self {
        Self::UNIT
    }
}

/// Decoded pixel grid in physical units, before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }
}

/// Single-channel intensity image in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    height: usize,
    width: usize,
    values: Vec<f32>,
    intensity_scale: IntensityScale,
}

impl Image2D {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::arg(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            intensity_scale: IntensityScale::UNIT,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, values)
    }

    pub fn with_intensity_scale(mut self, scale: IntensityScale) -> Self {
        self.intensity_scale = scale;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn intensity_scale(&self) -> IntensityScale {
        self.intensity_scale
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Values mapped back to physical units through the recorded scale.
    pub fn denormalized(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|&v| self.intensity_scale.denormalize(v as f64))
            .collect()
    }

    /// `[1, 1, H, W]` float tensor on the CPU.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.values).view([1, 1, self.height as i64, self.width as i64])
    }

    /// Builds an image from a tensor with exactly `H * W` elements and at least two dims.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let size = t.size();
        if size.len() < 2 {
            return Err(Error::shape(format!("expected an image tensor, got {size:?}")));
        }
        let (h, w) = (size[size.len() - 2] as usize, size[size.len() - 1] as usize);
        if t.numel() != h * w {
            return Err(Error::shape(format!(
                "expected a single-channel image tensor, got {size:?}"
            )));
        }
        let flat = t
            .detach()
            .to_device(Device::Cpu)
            .to_kind(Kind::Float)
            .contiguous()
            .view([-1]);
        let values = Vec::<f32>::try_from(&flat)?;
        Self::new(h, w, values)
    }

    /// Bilinear resize using pixel-center alignment.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let out = Self::from_fn(height, width, |r, c| {
            let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (wy, wx) = (y - y0 as f64, x - x0 as f64);
            let v = (1.0 - wy) * ((1.0 - wx) * self.get(y0, x0) as f64 + wx * self.get(y0, x1) as f64)
                + wy * ((1.0 - wx) * self.get(y1, x0) as f64 + wx * self.get(y1, x1) as f64);
            v as f32
        })?;
        Ok(out.with_intensity_scale(self.intensity_scale))
    }
}

/// Maps a physical grid affinely onto `[-1, 1]`, clamping out-of-range values.
pub fn normalize(image: &RawImage, lo_phys: f64, hi_phys: f64) -> Result<Image2D> {
    let scale = IntensityScale::new(lo_phys, hi_phys)?;
    let values = image.values.iter().map(|&v| scale.normalize(v as f64) as f32).collect();
    Ok(Image2D::new(image.height, image.width, values)?.with_intensity_scale(scale))
}

/// Boolean pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, bits }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }
}

pub const DEFAULT_BACKGROUND_LEVEL: f32 = -1.0;
pub const DEFAULT_BACKGROUND_TOLERANCE: f32 = 1e-3;

/// Pixels of `reference` that differ from `background_level` by more than `tolerance`.
pub fn foreground_mask(reference: &Image2D, background_level: f32, tolerance: f32) -> Result<Mask> {
    if !(tolerance >= 0.0) {
        return Err(Error::arg(format!("tolerance must be >= 0, got {tolerance}")));
    }
    Ok(Mask {
        height: reference.height,
        width: reference.width,
        bits: reference
            .values
            .iter()
            .map(|&v| (v - background_level).abs() > tolerance)
            .collect(),
    })
}

/// Source/target pair. `aligned_target` is the target resampled into source
/// space; it only exists for simulated or evaluation data.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub sample_id: String,
    pub source: Image2D,
    pub target: Image2D,
    pub aligned_target: Option<Image2D>,
}

impl PairedSample {
    pub fn new(
        sample_id: impl Into<String>,
        source: Image2D,
        target: Image2D,
        aligned_target: Option<Image2D>,
    ) -> Result<Self> {
        let sample_id = sample_id.into();
        if source.dims() != target.dims() {
            return Err(Error::Validation {
                sample_id,
                reason: format!("source is {:?} but target is {:?}", source.dims(), target.dims()),
            });
        }
        if let Some(aligned) = &aligned_target {
            if aligned.dims() != source.dims() {
                return Err(Error::Validation {
                    sample_id,
                    reason: format!(
                        "source is {:?} but aligned target is {:?}",
                        source.dims(),
                        aligned.dims()
                    ),
                });
            }
        }
        Ok(Self {
            sample_id,
            source,
            target,
            aligned_target,
        })
    }

    /// Ground-truth reference for scoring: the aligned target when known.
    pub fn reference(&self) -> &Image2D {
        self.aligned_target.as_ref().unwrap_or(&self.target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// One manifest entry; paths are relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default)]
    pub aligned_target: Option<PathBuf>,
    /// Simulated misalignment field, when the pair was produced by the simulator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<PathBuf>,
    /// Subject identifier for grouping slices into volumes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    modalities: (String, String),
    #[serde(default)]
    normalization: BTreeMap<String, (f64, f64)>,
    #[serde(default)]
    split: Split,
    pairs: Vec<PairRecord>,
}

/// Validated dataset description. Pixels are decoded lazily by [`DatasetManifest::load_pair`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub modality_names: (String, String),
    pub normalization: BTreeMap<String, (f64, f64)>,
    pub split: Split,
    pub pairs: Vec<PairRecord>,
    /// Optional bilinear resize applied on load; off by default.
    pub resize: Option<(usize, usize)>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, modality_names: (String, String)) -> Self {
        Self {
            root: root.into(),
            modality_names,
            normalization: BTreeMap::new(),
            split: Split::Train,
            pairs: Vec::new(),
            resize: None,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    fn scale_for(&self, modality: &str) -> Result<IntensityScale> {
        match self.normalization.get(modality) {
            Some(&(lo, hi)) => IntensityScale::new(lo, hi),
            None => Ok(IntensityScale::UNIT),
        }
    }

    pub fn source_scale(&self) -> Result<IntensityScale> {
        self.scale_for(&self.modality_names.0)
    }

    pub fn target_scale(&self) -> Result<IntensityScale> {
        self.scale_for(&self.modality_names.1)
    }

    fn load_image(&self, path: &Path, scale: IntensityScale) -> Result<Image2D> {
        let raw = read_raw_image(&self.resolve(path))?;
        let image = normalize(&raw, scale.lo, scale.hi)?;
        match self.resize {
            Some((h, w)) => image.resized(h, w),
            None => Ok(image),
        }
    }

    /// Decodes pair `index` and checks its shape invariants.
    pub fn load_pair(&self, index: usize) -> Result<PairedSample> {
        let record = self
            .pairs
            .get(index)
            .ok_or_else(|| Error::arg(format!("pair index {index} out of range")))?;
        let (src_scale, tgt_scale) = (self.source_scale()?, self.target_scale()?);
        let source = self.load_image(&record.source, src_scale)?;
        let target = self.load_image(&record.target, tgt_scale)?;
        let aligned = record
            .aligned_target
            .as_ref()
            .map(|p| self.load_image(p, tgt_scale))
            .transpose()?;
        PairedSample::new(record.id.clone(), source, target, aligned)
    }

    pub fn load_all(&self) -> Result<Vec<PairedSample>> {
        (0..self.len()).map(|i| self.load_pair(i)).collect()
    }

    /// Decodes every pair once; reports the first inconsistent sample.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.len() {
            self.load_pair(i)?;
        }
        Ok(())
    }

    /// Shuffled pair order for one epoch; a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = rng::stream(seed, &format!("shuffle/{epoch}"));
        order.shuffle(&mut rng);
        order
    }

    pub fn write(&self, manifest_path: &Path) -> Result<()> {
        let file = ManifestFile {
            modalities: self.modality_names.clone(),
            normalization: self.normalization.clone(),
            split: self.split,
            pairs: self.pairs.clone(),
        };
        if let Some(parent) = manifest_path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(manifest_path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }
}

/// Parses and validates a `manifest.json`.
///
/// Every referenced file must exist and sample ids must be unique. Pixel
/// shapes are checked when pairs are decoded.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::load(manifest_path, e))?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::load(manifest_path, e))?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = DatasetManifest {
        root,
        modality_names: file.modalities,
        normalization: file.normalization,
        split: file.split,
        pairs: file.pairs,
        resize: None,
    };
    manifest.source_scale()?;
    manifest.target_scale()?;

    let mut seen = HashSet::new();
    for record in &manifest.pairs {
        if !seen.insert(record.id.as_str()) {
            return Err(Error::Validation {
                sample_id: record.id.clone(),
                reason: "duplicate sample id".into(),
            });
        }
        let paths = [
            Some(&record.source),
            Some(&record.target),
            record.aligned_target.as_ref(),
        ];
        for path in paths.into_iter().flatten() {
            let resolved = manifest.resolve(path);
            if !resolved.is_file() {
                return Err(Error::load(resolved, "file does not exist"));
            }
        }
    }
    Ok(manifest)
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct Sidecar {
    pub height: usize,
    pub width: usize,
}

pub(crate) fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn is_raw_extension(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("f32" | "raw" | "bin"))
}

pub(crate) fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::load(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::load(&side, e))
}

pub(crate) fn read_f32_le(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::load(path, "byte length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub(crate) fn write_f32_le(path: &Path, values: &[f32], height: usize, width: usize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), serde_json::to_string(&Sidecar { height, width })?)?;
    Ok(())
}

/// Reads a PNG or raw-float image in physical units.
pub fn read_raw_image(path: &Path) -> Result<RawImage> {
    if is_raw_extension(path) {
        let side = read_sidecar(path)?;
        let values = read_f32_le(path)?;
        if values.len() != side.height * side.width {
            return Err(Error::load(
                path,
                format!(
                    "sidecar says {}x{} but file holds {} values",
                    side.height,
                    side.width,
                    values.len()
                ),
            ));
        }
        return RawImage::new(side.height, side.width, values);
    }
    let decoded = image::open(path).map_err(|e| Error::load(path, e))?;
    let gray = decoded.into_luma16();
    let (w, h) = gray.dimensions();
    let values = gray.into_raw().into_iter().map(f32::from).collect();
    RawImage::new(h as usize, w as usize, values)
}

/// Writes normalized `image` as raw float (lossless) or 16-bit PNG, chosen by extension.
///
/// PNG output stores `scale.denormalize(v)` rounded to `u16`, so `scale` should
/// lie inside `[0, 65535]`; [`png16_scale`] is the usual choice.
pub fn write_image(path: &Path, image: &Image2D, scale: IntensityScale) -> Result<()> {
    if is_raw_extension(path) {
        let values: Vec<f32> = image
            .values()
            .iter()
            .map(|&v| scale.denormalize(v as f64) as f32)
            .collect();
        return write_f32_le(path, &values, image.height(), image.width());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let values: Vec<u16> = image
        .values()
        .iter()
        .map(|&v| scale.denormalize(v as f64).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(image.width() as u32, image.height() as u32, values)
        .ok_or_else(|| Error::shape("png buffer size mismatch"))?;
    buf.save(path)?;
    Ok(())
}

/// Full 16-bit range mapped onto `[-1, 1]`.
pub fn png16_scale() -> IntensityScale {
    IntensityScale { lo: 0.0, hi: 65535.0 }
}

/// Renders same-sized images side by side as 8-bit grayscale. Each panel maps
/// its own `[lo, hi]` window onto `[0, 255]`.
pub fn panel_strip(panels: &[(&Image2D, f32, f32)]) -> Result<image::GrayImage> {
    let Some((first, _, _)) = panels.first() else {
        return Err(Error::arg("no panels to render"));
    };
    let (h, w) = first.dims();
    if panels.iter().any(|(p, lo, hi)| p.dims() != (h, w) || !(hi > lo)) {
        return Err(Error::arg("panels must share a shape and have hi > lo"));
    }
    let mut out = image::GrayImage::new((w * panels.len()) as u32, h as u32);
    for (k, (img, lo, hi)) in panels.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                let t = ((img.get(r, c) - lo) / (hi - lo)).clamp(0.0, 1.0);
                out.put_pixel((k * w + c) as u32, r as u32, image::Luma([(t * 255.0).round() as u8]));
            }
        }
    }
    Ok(out)
}

pub fn write_panel_strip(path: &Path, panels: &[(&Image2D, f32, f32)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    panel_strip(panels)?.save(path)?;
    Ok(())
}

/// Pixelwise `|a - b|`.
pub fn abs_difference(a: &Image2D, b: &Image2D) -> Result<Image2D> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let values = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).collect();
    Image2D::new(a.height(), a.width(), values)
}
