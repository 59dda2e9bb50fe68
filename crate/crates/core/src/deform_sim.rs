//! Graded elastic misalignment for building misaligned pairs with known ground truth.
//!
//! A coarse control grid receives random per-node offsets which are smoothed
//! onto the pixel grid with a separable cubic B-spline. B-spline weights are
//! non-negative and sum to one, so the dense field never exceeds the largest
//! node offset: `max |displacement| <= hi * OVERSHOOT_BOUND` with a bound of 1.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::{
    fs,
    path::{Path, PathBuf},
};

use crate::{
    imaging::{write_image, DatasetManifest, PairRecord, PairedSample},
    rng,
    warp::{warp_image, DeformationField2D},
    Error, Result,
};

/// Upper bound of dense displacement over the largest node offset.
pub const OVERSHOOT_BOUND: f64 = 1.0;

pub const LEVELS: usize = 6;
const LEVEL_SPACING: (usize, usize) = (40, 40);
const LEVEL_MAGNITUDES: [(f64, f64); LEVELS] = [(1.0, 2.0), (2.0, 3.0), (3.0, 4.0), (4.0, 5.0), (5.0, 6.0), (6.0, 7.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticSpec {
    /// Control point spacing in pixels, (rows, cols).
    pub control_spacing: (usize, usize),
    /// Node offset magnitude range in pixels.
    pub magnitude_range: (f64, f64),
    pub level_name: String,
    pub seed: u64,
}

impl ElasticSpec {
    pub fn new(
        control_spacing: (usize, usize),
        magnitude_range: (f64, f64),
        level_name: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        let spec = Self {
            control_spacing,
            magnitude_range,
            level_name: level_name.into(),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (sy, sx) = self.control_spacing;
        if sy < 2 || sx < 2 {
            return Err(Error::arg(format!(
                "control spacing must be >= 2 pixels, got {:?}",
                self.control_spacing
            )));
        }
        let (lo, hi) = self.magnitude_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(Error::arg(format!(
                "magnitude range must satisfy 0 <= lo <= hi, got {:?}",
                self.magnitude_range
            )));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Generator for this spec's seed.
    pub fn rng(&self) -> ChaCha8Rng {
        rng::stream(self.seed, &format!("elastic/{}", self.level_name))
    }
}

/// Preset for misalignment level `NA-<level>`, `level` in 1..=6.
pub fn level_spec(level: usize) -> Result<ElasticSpec> {
    if !(1..=LEVELS).contains(&level) {
        return Err(Error::arg(format!(
            "misalignment level must be in 1..={LEVELS}, got {level}"
        )));
    }
    ElasticSpec::new(LEVEL_SPACING, LEVEL_MAGNITUDES[level - 1], format!("NA-{level}"), 0)
}

/// Node grid dimensions for an image: `ceil(side / spacing) + 1` per axis.
pub fn control_grid_dims(spec: &ElasticSpec, height: usize, width: usize) -> (usize, usize) {
    (
        height.div_ceil(spec.control_spacing.0) + 1,
        width.div_ceil(spec.control_spacing.1) + 1,
    )
}

/// Coarse node offsets, row-major, as `(dy, dx)` pairs. Each component is
/// `sign * u` with `u ~ U(lo, hi)` and an equiprobable sign.
pub fn sample_control_offsets(spec: &ElasticSpec, rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    let (lo, hi) = spec.magnitude_range;
    let mut draw = || {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let u = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        sign * u
    };
    (0..rows * cols).map(|_| (draw(), draw())).collect()
}

/// Uniform cubic B-spline basis weights for fractional offset `t` in [0, 1),
/// applied to nodes `k-1, k, k+1, k+2`.
fn bspline_weights(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t * t * t - 6.0 * t * t + 4.0) / 6.0,
        (-3.0 * t * t * t + 3.0 * t * t + 3.0 * t + 1.0) / 6.0,
        t * t * t / 6.0,
    ]
}

/// Per-pixel (first node index, weights) along one axis; node indices are
/// clamped to the grid.
fn axis_stencil(len: usize, spacing: usize, nodes: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..len)
        .map(|p| {
            let u = p as f64 / spacing as f64;
            let k = u.floor();
            let w = bspline_weights(u - k);
            let k = k as i64;
            let idx = [k - 1, k, k + 1, k + 2].map(|i| i.clamp(0, nodes as i64 - 1) as usize);
            (idx, w)
        })
        .collect()
}

/// Dense field from node offsets by separable cubic B-spline smoothing.
pub fn upsample_control_offsets(
    offsets: &[(f64, f64)],
    rows: usize,
    cols: usize,
    spacing: (usize, usize),
    height: usize,
    width: usize,
) -> Result<DeformationField2D> {
    if offsets.len() != rows * cols {
        return Err(Error::shape(format!(
            "{} offsets for a {rows}x{cols} grid",
            offsets.len()
        )));
    }
    let ys = axis_stencil(height, spacing.0, rows);
    let xs = axis_stencil(width, spacing.1, cols);
    DeformationField2D::from_fn(height, width, |r, c| {
        let (ri, rw) = &ys[r];
        let (ci, cw) = &xs[c];
        let mut dy = 0.0;
        let mut dx = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                let w = rw[a] * cw[b];
                let (oy, ox) = offsets[ri[a] * cols + ci[b]];
                dy += w * oy;
                dx += w * ox;
            }
        }
        (dy as f32, dx as f32)
    })
}

pub fn sample_elastic_field(
    spec: &ElasticSpec,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Result<DeformationField2D> {
    spec.validate()?;
    if height < spec.control_spacing.0 || width < spec.control_spacing.1 {
        return Err(Error::arg(format!(
            "image {height}x{width} is smaller than one control cell {:?}",
            spec.control_spacing
        )));
    }
    let (rows, cols) = control_grid_dims(spec, height, width);
    let offsets = sample_control_offsets(spec, rows, cols, rng);
    upsample_control_offsets(&offsets, rows, cols, spec.control_spacing, height, width)
}

/// Misaligns the target of an originally paired sample. The original target
/// becomes `aligned_target`; the sampled field is returned alongside.
pub fn apply_misalignment(
    pair: &PairedSample,
    spec: &ElasticSpec,
    rng: &mut impl Rng,
) -> Result<(PairedSample, DeformationField2D)> {
    let (h, w) = pair.target.dims();
    let field = sample_elastic_field(spec, h, w, rng)?;
    let warped = warp_image(&pair.target, &field)?;
    let out = PairedSample::new(
        pair.sample_id.clone(),
        pair.source.clone(),
        warped,
        Some(pair.target.clone()),
    )?;
    Ok((out, field))
}

/// Name of the file recording the [`ElasticSpec`] next to a simulated manifest.
pub const SIMULATION_FILE: &str = "simulation.json";

/// Misaligns every pair of `input` and writes a new dataset under `out_dir`:
/// raw float images, one field per pair and a manifest with `aligned_target`
/// set. Each pair draws from its own stream, so results do not depend on order.
pub fn simulate_dataset(input: &DatasetManifest, spec: &ElasticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let (src_scale, tgt_scale) = (input.source_scale()?, input.target_scale()?);
    let mut out = DatasetManifest::new(out_dir, input.modality_names.clone());
    out.normalization = input.normalization.clone();
    out.split = input.split;
    fs::create_dir_all(out_dir)?;
    for (i, record) in input.pairs.iter().enumerate() {
        let pair = input.load_pair(i)?;
        let mut rng = rng::stream(spec.seed, &format!("elastic/{}/{}", spec.level_name, record.id));
        let (moved, field) = apply_misalignment(&pair, spec, &mut rng)?;
        let rel = |dir: &str, ext: &str| PathBuf::from(dir).join(format!("{}.{ext}", record.id));
        let (src, tgt, aligned, fld) = (
            rel("source", "f32"),
            rel("target", "f32"),
            rel("aligned_target", "f32"),
            rel("fields", "f32"),
        );
        write_image(&out_dir.join(&src), &moved.source, src_scale)?;
        write_image(&out_dir.join(&tgt), &moved.target, tgt_scale)?;
        write_image(&out_dir.join(&aligned), moved.reference(), tgt_scale)?;
        field.write(&out_dir.join(&fld))?;
        out.pairs.push(PairRecord {
            id: record.id.clone(),
            source: src,
            target: tgt,
            aligned_target: Some(aligned),
            field: Some(fld),
            subject: record.subject.clone(),
            slice: record.slice,
        });
    }
    out.write(&out_dir.join("manifest.json"))?;
    fs::write(out_dir.join(SIMULATION_FILE), serde_json::to_string_pretty(spec)?)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image2D;
    use proptest::prelude::*;

    fn structured(h: usize, w: usize) -> Image2D {
        Image2D::from_fn(h, w, |r, c| {
            let (y, x) = (r as f32 / h as f32 - 0.5, c as f32 / w as f32 - 0.5);
            if x * x + y * y < 0.16 {
                ((r as f32 * 0.7).sin() * (c as f32 * 0.45).cos()).clamp(-0.9, 0.9)
            } else {
                -1.0
            }
        })
        .unwrap()
    }

    fn pair(img: &Image2D) -> PairedSample {
        PairedSample::new("p", img.clone(), img.clone(), None).unwrap()
    }

    fn mae(a: &Image2D, b: &Image2D) -> f64 {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / a.values().len() as f64
    }

    #[test]
    fn level_table() {
        let one = level_spec(1).unwrap();
        assert_eq!(one.control_spacing, (40, 40));
        assert_eq!(one.magnitude_range, (1.0, 2.0));
        assert_eq!(one.level_name, "NA-1");
        assert_eq!(level_spec(3).unwrap().magnitude_range, (3.0, 4.0));
        assert_eq!(level_spec(6).unwrap().magnitude_range, (6.0, 7.0));
        assert!(matches!(level_spec(0), Err(Error::Argument(_))));
        assert!(level_spec(7).is_err());
    }

    #[test]
    fn spec_invariants_enforced() {
        assert!(ElasticSpec::new((1, 40), (1.0, 2.0), "x", 0).is_err());
        assert!(ElasticSpec::new((40, 40), (2.0, 1.0), "x", 0).is_err());
        assert!(ElasticSpec::new((40, 40), (-1.0, 1.0), "x", 0).is_err());
        assert!(ElasticSpec::new((2, 2), (0.0, 0.0), "x", 0).is_ok());
    }

    #[test]
    fn bspline_partition_of_unity() {
        for i in 0..=20 {
            let w = bspline_weights(i as f64 / 20.0);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let spec = ElasticSpec::new((16, 16), (0.0, 0.0), "zero", 1).unwrap();
        let field = sample_elastic_field(&spec, 32, 48, &mut spec.rng()).unwrap();
        assert_eq!(field, DeformationField2D::zeros(32, 48));

        let img = structured(32, 32);
        let (out, _) = apply_misalignment(&pair(&img), &spec, &mut spec.rng()).unwrap();
        assert_eq!(out.target, img);
        assert_eq!(out.aligned_target.as_ref(), Some(&img));
        assert_eq!(out.source, img);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = level_spec(1).unwrap().with_seed(42);
        let a = sample_elastic_field(&spec, 256, 256, &mut spec.rng()).unwrap();
        let b = sample_elastic_field(&spec, 256, 256, &mut spec.rng()).unwrap();
        assert_eq!(a, b);
        let c = sample_elastic_field(
            &spec.clone().with_seed(43),
            256,
            256,
            &mut spec.clone().with_seed(43).rng(),
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn node_offsets_within_level_range() {
        let spec = level_spec(3).unwrap().with_seed(5);
        let offsets = sample_control_offsets(&spec, 100, 50, &mut spec.rng());
        let mags: Vec<f64> = offsets.iter().flat_map(|&(a, b)| [a.abs(), b.abs()]).collect();
        assert_eq!(mags.len(), 10_000);
        assert!(mags.iter().all(|&m| (3.0..=4.0).contains(&m)));
        let negative = offsets.iter().filter(|o| o.0 < 0.0).count();
        assert!((2000..3000).contains(&negative), "sign balance {negative}");
    }

    #[test]
    fn grid_dims_and_small_image_rejection() {
        let spec = level_spec(2).unwrap();
        assert_eq!(control_grid_dims(&spec, 64, 64), (3, 3));
        assert_eq!(control_grid_dims(&spec, 80, 81), (3, 4));
        assert!(matches!(
            sample_elastic_field(&spec, 32, 64, &mut spec.rng()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn constant_offsets_give_constant_field() {
        let offsets = vec![(1.5, -0.5); 9];
        let f = upsample_control_offsets(&offsets, 3, 3, (10, 10), 20, 20).unwrap();
        assert!(f.dy().iter().all(|&v| (v - 1.5).abs() < 1e-6));
        assert!(f.dx().iter().all(|&v| (v + 0.5).abs() < 1e-6));
    }

    #[test]
    fn misalignment_perturbs_target_only() {
        let img = structured(64, 64);
        let spec = level_spec(3).unwrap().with_seed(9);
        let (out, field) = apply_misalignment(&pair(&img), &spec, &mut spec.rng()).unwrap();
        assert_eq!(out.source, img);
        assert_eq!(mae(&out.source, out.aligned_target.as_ref().unwrap()), 0.0);
        assert!(mae(&out.source, &out.target) > 0.0);
        assert!(field.max_abs_component() > 0.0);

        let other = spec.clone().with_seed(10);
        let (out2, _) = apply_misalignment(&pair(&img), &other, &mut other.rng()).unwrap();
        let linf = out
            .target
            .values()
            .iter()
            .zip(out2.target.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(linf > 0.0);
    }

    #[test]
    fn severity_is_monotone_in_level() {
        let img = structured(64, 64);
        let means: Vec<f64> = (1..=LEVELS)
            .map(|level| {
                (0..20u64)
                    .map(|seed| {
                        let spec = level_spec(level).unwrap().with_seed(seed);
                        let (out, _) = apply_misalignment(&pair(&img), &spec, &mut spec.rng()).unwrap();
                        mae(&img, &out.target)
                    })
                    .sum::<f64>()
                    / 20.0
            })
            .collect();
        for w in means.windows(2) {
            assert!(w[1] >= w[0], "{means:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn dense_field_respects_overshoot_bound(
            seed in any::<u64>(),
            lo in 0.0f64..5.0,
            extra in 0.0f64..3.0,
            sy in 4usize..20,
            sx in 4usize..20,
        ) {
            let spec = ElasticSpec::new((sy, sx), (lo, lo + extra), "p", seed).unwrap();
            let f = sample_elastic_field(&spec, 40, 40, &mut spec.rng()).unwrap();
            let bound = (lo + extra) * OVERSHOOT_BOUND + 1e-4;
            prop_assert!(f.max_abs_component() as f64 <= bound);
        }
    }
}
