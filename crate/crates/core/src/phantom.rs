//! Procedural two-modality phantoms for small-scale experiments.
//!
//! Modality A is a soft-edged body ellipse holding several inner ellipses on a
//! background at -1. Modality B is a monotone remap of A, so an exact one-to-one
//! translation exists in both directions.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{
    imaging::{write_image, DatasetManifest, Image2D, IntensityScale, PairRecord},
    rng, Error, Result,
};

/// Intensity transfer from modality A to modality B on [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModalityMap {
    Identity,
    /// `tanh(gain * v) / tanh(gain)`.
    Tanh {
        gain: f64,
    },
}

impl Default for ModalityMap {
    fn default() -> Self {
        ModalityMap::Tanh { gain: 2.0 }
    }
}

impl ModalityMap {
    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            ModalityMap::Identity => v,
            ModalityMap::Tanh { gain } => (gain * v).tanh() / gain.tanh(),
        }
    }

    pub fn invert(&self, v: f64) -> f64 {
        match *self {
            ModalityMap::Identity => v,
            ModalityMap::Tanh { gain } => (v * gain.tanh()).clamp(-1.0, 1.0).atanh() / gain,
        }
    }

    fn validate(&self) -> Result<()> {
        if let ModalityMap::Tanh { gain } = *self {
            if !(gain > 0.0 && gain.is_finite()) {
                return Err(Error::arg(format!("tanh gain must be positive, got {gain}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub n_samples: usize,
    /// Inner ellipses per image.
    pub n_shapes: usize,
    pub modality_map: ModalityMap,
    pub seed: u64,
    /// Physical intensity windows written to the manifest for A and B.
    pub scale_a: (f64, f64),
    pub scale_b: (f64, f64),
    /// Consecutive samples grouped under one subject id.
    pub slices_per_subject: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_samples: 200,
            n_shapes: 4,
            modality_map: ModalityMap::default(),
            seed: 0,
            scale_a: (0.0, 1000.0),
            scale_b: (-1000.0, 1000.0),
            slices_per_subject: 8,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::arg(format!(
                "phantom size must be >= 16, got {}",
                self.image_size
            )));
        }
        if self.slices_per_subject == 0 {
            return Err(Error::arg("slices_per_subject must be >= 1"));
        }
        IntensityScale::new(self.scale_a.0, self.scale_a.1)?;
        IntensityScale::new(self.scale_b.0, self.scale_b.1)?;
        self.modality_map.validate()
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    value: f64,
}

impl Ellipse {
    /// Coverage in [0, 1] with a linear ramp about 1.5 pixels wide at the rim.
    fn coverage(&self, r: f64, c: f64) -> f64 {
        let (s, co) = self.angle.sin_cos();
        let (dy, dx) = (r - self.cy, c - self.cx);
        let u = (co * dx + s * dy) / self.rx;
        let v = (-s * dx + co * dy) / self.ry;
        let rho = (u * u + v * v).sqrt();
        let signed_px = (1.0 - rho) * self.rx.min(self.ry);
        ((signed_px + 0.75) / 1.5).clamp(0.0, 1.0)
    }
}

/// Modality-A phantom `index` of the dataset described by `spec`.
pub fn phantom_image(spec: &PhantomSpec, index: usize) -> Result<Image2D> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, &format!("phantom/{index}"));
    let n = spec.image_size as f64;
    let mid = (n - 1.0) / 2.0;
    let body = Ellipse {
        cy: mid + rng.gen_range(-0.05..0.05) * n,
        cx: mid + rng.gen_range(-0.05..0.05) * n,
        ry: rng.gen_range(0.32..0.42) * n,
        rx: rng.gen_range(0.28..0.40) * n,
        angle: rng.gen_range(-0.4..0.4),
        value: rng.gen_range(-0.3..0.1),
    };
    let inner: Vec<Ellipse> = (0..spec.n_shapes)
        .map(|k| {
            let radius = rng.gen_range(0.0..0.55);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            Ellipse {
                cy: body.cy + radius * body.ry * theta.sin(),
                cx: body.cx + radius * body.rx * theta.cos(),
                ry: rng.gen_range(0.06..0.16) * n,
                rx: rng.gen_range(0.06..0.16) * n,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                // the first shape is always bright, keeping contrast above half the range
                value: if k == 0 {
                    rng.gen_range(0.6..0.95)
                } else {
                    rng.gen_range(-0.7..0.95)
                },
            }
        })
        .collect();
    Image2D::from_fn(spec.image_size, spec.image_size, |r, c| {
        let (r, c) = (r as f64, c as f64);
        let b = body.coverage(r, c);
        let mut v = body.value;
        for e in &inner {
            let a = e.coverage(r, c);
            v = v * (1.0 - a) + e.value * a;
        }
        (-1.0 * (1.0 - b) + v * b) as f32
    })
}

/// Applies the modality map pixelwise.
pub fn map_modality(image: &Image2D, map: ModalityMap) -> Result<Image2D> {
    let (h, w) = image.dims();
    let values = image.values().iter().map(|&v| map.apply(v as f64) as f32).collect();
    Image2D::new(h, w, values)
}

/// Aligned `(A, B)` pair number `index`.
pub fn phantom_pair(spec: &PhantomSpec, index: usize) -> Result<(Image2D, Image2D)> {
    let a = phantom_image(spec, index)?;
    let b = map_modality(&a, spec.modality_map)?;
    Ok((a, b))
}

pub const MODALITY_A: &str = "A";
pub const MODALITY_B: &str = "B";

/// Writes `spec.n_samples` aligned pairs as raw float images under `out_dir`
/// and returns the manifest (also saved as `out_dir/manifest.json`).
pub fn generate_phantom_dataset(spec: &PhantomSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut manifest = DatasetManifest::new(out_dir, (MODALITY_A.to_string(), MODALITY_B.to_string()));
    manifest.normalization.insert(MODALITY_A.into(), spec.scale_a);
    manifest.normalization.insert(MODALITY_B.into(), spec.scale_b);
    let scale_a = IntensityScale::new(spec.scale_a.0, spec.scale_a.1)?;
    let scale_b = IntensityScale::new(spec.scale_b.0, spec.scale_b.1)?;
    std::fs::create_dir_all(out_dir)?;
    for i in 0..spec.n_samples {
        let (a, b) = phantom_pair(spec, i)?;
        let id = format!("phantom_{i:05}");
        let src = Path::new(MODALITY_A).join(format!("{id}.f32"));
        let tgt = Path::new(MODALITY_B).join(format!("{id}.f32"));
        write_image(&out_dir.join(&src), &a, scale_a)?;
        write_image(&out_dir.join(&tgt), &b, scale_b)?;
        manifest.pairs.push(PairRecord {
            id,
            source: src,
            target: tgt.clone(),
            aligned_target: Some(tgt),
            field: None,
            subject: Some(format!("subject_{:03}", i / spec.slices_per_subject)),
            slice: Some(i % spec.slices_per_subject),
        });
    }
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::load_dataset;

    fn small(n: usize) -> PhantomSpec {
        PhantomSpec {
            n_samples: n,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn map_is_invertible_and_monotone() {
        let map = ModalityMap::default();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=2000 {
            let v = -1.0 + i as f64 / 1000.0;
            let m = map.apply(v);
            assert!(m > prev);
            prev = m;
            assert!((map.invert(m) - v).abs() < 1e-4);
        }
        assert!((map.apply(-1.0) + 1.0).abs() < 1e-15);
        assert!((map.apply(1.0) - 1.0).abs() < 1e-15);
        assert!(ModalityMap::Tanh { gain: 0.0 }.validate().is_err());
    }

    #[test]
    fn contrast_and_background() {
        let spec = small(20);
        for i in 0..spec.n_samples {
            let (a, b) = phantom_pair(&spec, i).unwrap();
            for img in [&a, &b] {
                let (lo, hi) = img.min_max();
                assert!(hi - lo >= 1.0, "sample {i} spans {lo}..{hi}");
                assert_eq!(img.get(0, 0), -1.0);
            }
        }
    }

    #[test]
    fn identity_map_gives_equal_modalities() {
        let spec = PhantomSpec {
            modality_map: ModalityMap::Identity,
            ..small(3)
        };
        for i in 0..3 {
            let (a, b) = phantom_pair(&spec, i).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let empty = generate_phantom_dataset(&small(0), &dir.path().join("empty")).unwrap();
        assert!(empty.is_empty());

        let m1 = generate_phantom_dataset(&small(4), &dir.path().join("one")).unwrap();
        let m2 = generate_phantom_dataset(&small(4), &dir.path().join("two")).unwrap();
        for rec in &m1.pairs {
            for rel in [&rec.source, &rec.target] {
                let a = std::fs::read(m1.resolve(rel)).unwrap();
                let b = std::fs::read(m2.resolve(rel)).unwrap();
                assert_eq!(a, b);
            }
        }
        let loaded = load_dataset(dir.path().join("one/manifest.json")).unwrap();
        assert_eq!(loaded.len(), 4);
        let pair = loaded.load_pair(2).unwrap();
        let (a, b) = phantom_pair(&small(4), 2).unwrap();
        let max_err = |x: &Image2D, y: &Image2D| {
            x.values()
                .iter()
                .zip(y.values())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0f32, f32::max)
        };
        assert!(max_err(&pair.source, &a) < 1e-5);
        assert!(max_err(&pair.target, &b) < 1e-5);
        assert_eq!(pair.aligned_target.as_ref(), Some(&pair.target));

        let other = PhantomSpec { seed: 1, ..small(1) };
        assert_ne!(phantom_image(&other, 0).unwrap(), phantom_image(&small(1), 0).unwrap());
    }
}
