//! Differentiable backward warping.
//!
//! `warp(I, d)(p) = I(p + d(p))`, sampled bilinearly, with sampling
//! coordinates clamped to the image border. Displacements are in pixels and
//! stored as two planes, `dy` then `dx`. Tensor layouts are `[N, C, H, W]`
//! for images and `[N, 2, H, W]` for fields; gradients flow to both.

use std::path::Path;

use tch::{Device, Kind, Tensor};

use crate::{
    imaging::{read_f32_le, read_sidecar, write_f32_le, Image2D},
    Error, Result,
};

/// Dense per-pixel displacement `(dy, dx)` in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField2D {
    height: usize,
    width: usize,
    dy: Vec<f32>,
    dx: Vec<f32>,
}

impl DeformationField2D {
    pub fn new(height: usize, width: usize, dy: Vec<f32>, dx: Vec<f32>) -> Result<Self> {
        let n = height * width;
        if n == 0 {
            return Err(Error::arg("field must be non-empty"));
        }
        if dy.len() != n || dx.len() != n {
            return Err(Error::shape(format!(
                "{height}x{width} field needs {n} values per plane, got {} and {}",
                dy.len(),
                dx.len()
            )));
        }
        if dy.iter().chain(&dx).any(|v| !v.is_finite()) {
            return Err(Error::arg("field contains non-finite displacement"));
        }
        Ok(Self { height, width, dy, dx })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, dy: f32, dx: f32) -> Self {
        Self {
            height,
            width,
            dy: vec![dy; height * width],
            dx: vec![dx; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Result<Self> {
        let (mut dy, mut dx) = (Vec::new(), Vec::new());
        for r in 0..height {
            for c in 0..width {
                let (a, b) = f(r, c);
                dy.push(a);
                dx.push(b);
            }
        }
        Self::new(height, width, dy, dx)
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

    pub fn dy(&self) -> &[f32] {
        &self.dy
    }

    pub fn dx(&self) -> &[f32] {
        &self.dx
    }

    pub fn get(&self, row: usize, col: usize) -> (f32, f32) {
        let i = row * self.width + col;
        (self.dy[i], self.dx[i])
    }

    /// Largest displacement magnitude `sqrt(dy^2 + dx^2)`.
    pub fn max_magnitude(&self) -> f32 {
        self.dy
            .iter()
            .zip(&self.dx)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f32::max)
    }

    /// Largest per-axis displacement `max(|dy|, |dx|)`.
    pub fn max_abs_component(&self) -> f32 {
        self.dy.iter().chain(&self.dx).fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            dy: self.dy.iter().map(|v| v * factor).collect(),
            dx: self.dx.iter().map(|v| v * factor).collect(),
        }
    }

    /// `[1, 2, H, W]` float tensor (`dy` plane first).
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.dy.clone();
        data.extend_from_slice(&self.dx);
        Tensor::from_slice(&data).view([1, 2, self.height as i64, self.width as i64])
    }

    /// Accepts `[2, H, W]` or `[1, 2, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let size = t.size();
        let ok = match size.len() {
            3 => size[0] == 2,
            4 => size[0] == 1 && size[1] == 2,
            _ => false,
        };
        if !ok {
            return Err(Error::shape(format!("expected a [1, 2, H, W] field, got {size:?}")));
        }
        let (h, w) = (size[size.len() - 2] as usize, size[size.len() - 1] as usize);
        let flat = t
            .detach()
            .to_device(Device::Cpu)
            .to_kind(Kind::Float)
            .contiguous()
            .view([-1]);
        let mut data = Vec::<f32>::try_from(&flat)?;
        let dx = data.split_off(h * w);
        Self::new(h, w, data, dx)
    }

    /// Raw row-major `f32`, `dy` plane then `dx` plane, with a `{height, width}` sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut data = self.dy.clone();
        data.extend_from_slice(&self.dx);
        write_f32_le(path, &data, self.height, self.width)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let side = read_sidecar(path)?;
        let mut data = read_f32_le(path)?;
        let n = side.height * side.width;
        if data.len() != 2 * n {
            return Err(Error::load(
                path,
                format!("expected {} values for a two-plane field, got {}", 2 * n, data.len()),
            ));
        }
        let dx = data.split_off(n);
        Self::new(side.height, side.width, data, dx)
    }
}

fn size4(t: &Tensor, what: &str) -> Result<(i64, i64, i64, i64)> {
    match t.size()[..] {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(format!("{what} must be 4-D, got {s:?}"))),
    }
}

fn check_pair(image: &Tensor, field: &Tensor) -> Result<(i64, i64, i64, i64)> {
    let (n, c, h, w) = size4(image, "image")?;
    let (fnb, fc, fh, fw) = size4(field, "field")?;
    if fc != 2 || fnb != n || fh != h || fw != w {
        return Err(Error::shape(format!(
            "field {:?} does not match image {:?}",
            field.size(),
            image.size()
        )));
    }
    Ok((n, c, h, w))
}

/// Bilinear backward warp of `image` by `field`.
pub fn warp(image: &Tensor, field: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = check_pair(image, field)?;
    let opts = (field.kind(), field.device());
    let rows = Tensor::arange(h, opts).view([1, h, 1]);
    let cols = Tensor::arange(w, opts).view([1, 1, w]);
    let sy = (field.select(1, 0) + rows).clamp(0.0, (h - 1) as f64);
    let sx = (field.select(1, 1) + cols).clamp(0.0, (w - 1) as f64);

    let y0 = sy.detach().floor();
    let x0 = sx.detach().floor();
    let wy = (&sy - &y0).unsqueeze(1);
    let wx = (&sx - &x0).unsqueeze(1);
    let y0 = y0.to_kind(Kind::Int64);
    let x0 = x0.to_kind(Kind::Int64);
    let y1 = (&y0 + 1).clamp_max(h - 1);
    let x1 = (&x0 + 1).clamp_max(w - 1);

    let flat = image.reshape([n, c, h * w]);
    let corner = |yi: &Tensor, xi: &Tensor| {
        let idx = (yi * w + xi).view([n, 1, h * w]).expand([n, c, h * w], false);
        flat.gather(2, &idx, false).view([n, c, h, w])
    };
    let one_wy = 1.0 - &wy;
    let one_wx = 1.0 - &wx;
    let top = &one_wx * corner(&y0, &x0) + &wx * corner(&y0, &x1);
    let bottom = &one_wx * corner(&y1, &x0) + &wx * corner(&y1, &x1);
    Ok(one_wy * top + wy * bottom)
}

/// `warp(warp(image, first), second)`: two sequential resamplings, `first` applied first.
pub fn chain_warp(image: &Tensor, first: &Tensor, second: &Tensor) -> Result<Tensor> {
    check_pair(image, second)?;
    warp(&warp(image, first)?, second)
}

/// Forward differences of each displacement component.
///
/// Output is `[N, 2, 2, H, W]`: `[:, k, 0]` is `d(component k)/dy` and
/// `[:, k, 1]` is `d(component k)/dx`. The trailing row/column is zero.
pub fn spatial_gradient(field: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = size4(field, "field")?;
    if c != 2 {
        return Err(Error::shape(format!("field must have 2 channels, got {c}")));
    }
    if h < 2 || w < 2 {
        return Err(Error::arg(format!(
            "spatial gradient needs at least 2x2 pixels, got {h}x{w}"
        )));
    }
    let dy = field.narrow(2, 1, h - 1) - field.narrow(2, 0, h - 1);
    let dy = Tensor::cat(&[dy, field.narrow(2, 0, 1).zeros_like()], 2);
    let dx = field.narrow(3, 1, w - 1) - field.narrow(3, 0, w - 1);
    let dx = Tensor::cat(&[dx, field.narrow(3, 0, 1).zeros_like()], 3);
    Ok(Tensor::stack(&[dy, dx], 2).view([n, 2, 2, h, w]))
}

/// Analytic composition `c(p) = second(p) + first(p + second(p))`, so that
/// `warp(I, c)` approximates `chain_warp(I, first, second)`. Test utility;
/// training uses sequential resampling.
pub fn compose_fields(first: &Tensor, second: &Tensor) -> Result<Tensor> {
    check_pair(first, second)?;
    Ok(second + warp(first, second)?)
}

pub fn warp_image(image: &Image2D, field: &DeformationField2D) -> Result<Image2D> {
    if image.dims() != field.dims() {
        return Err(Error::shape(format!(
            "field {:?} does not match image {:?}",
            field.dims(),
            image.dims()
        )));
    }
    let out = tch::no_grad(|| warp(&image.to_tensor(), &field.to_tensor()))?;
    Ok(Image2D::from_tensor(&out)?.with_intensity_scale(image.intensity_scale()))
}

pub fn chain_warp_image(image: &Image2D, first: &DeformationField2D, second: &DeformationField2D) -> Result<Image2D> {
    if first.dims() != second.dims() {
        return Err(Error::shape("chained fields differ in shape"));
    }
    warp_image(&warp_image(image, first)?, second)
}

/// Per-pixel 2x2 Jacobian of displacement, `[component][axis]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientGrid {
    pub height: usize,
    pub width: usize,
    pub entries: Vec<[[f32; 2]; 2]>,
}

pub fn field_spatial_gradient(field: &DeformationField2D) -> Result<GradientGrid> {
    let g = spatial_gradient(&field.to_tensor())?;
    let (h, w) = field.dims();
    let flat = Vec::<f32>::try_from(&g.contiguous().view([-1]))?;
    let plane = h * w;
    let entries = (0..plane)
        .map(|i| [[flat[i], flat[plane + i]], [flat[2 * plane + i], flat[3 * plane + i]]])
        .collect();
    Ok(GradientGrid {
        height: h,
        width: w,
        entries,
    })
}
