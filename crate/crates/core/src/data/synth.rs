//! Synthetic image pairs with exact, analytic ground-truth flow.
//!
//! Frame 1 samples a continuous texture `T` on the pixel grid. Frame 2 is
//! rendered through the inverse of an affine map `p ↦ A·p + b`, i.e.
//! `I2(q) = T(A⁻¹(q − b))`, so the forward flow `A·p + b − p` is exact.

use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FlowSample, SampleFormat};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::io::RgbImage;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Texture {
    /// Two-octave value noise with quintic interpolation (cells of 8 and 4 px).
    SmoothNoise,
    /// 4 px checkerboard with per-channel random colors.
    Checker,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformFamily {
    Translation,
    /// Small rotation and scale about the image centre plus a translation.
    Affine,
}

impl FromStr for Texture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth_noise" | "noise" => Ok(Self::SmoothNoise),
            "checker" => Ok(Self::Checker),
            o => Err(Error::Config(format!("unknown texture '{o}' (expected smooth_noise or checker)"))),
        }
    }
}

impl FromStr for TransformFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(Self::Translation),
            "affine" => Ok(Self::Affine),
            o => Err(Error::Config(format!("unknown transform '{o}' (expected translation or affine)"))),
        }
    }
}

impl std::fmt::Display for Texture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SmoothNoise => "smooth_noise",
            Self::Checker => "checker",
        })
    }
}

impl std::fmt::Display for TransformFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Translation => "translation",
            Self::Affine => "affine",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Upper bound on the flow magnitude of every pixel.
    pub max_displacement: f64,
    pub texture: Texture,
    pub transform: TransformFamily,
    pub seed: u64,
    pub count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            max_displacement: 4.0,
            texture: Texture::SmoothNoise,
            transform: TransformFamily::Translation,
            seed: 0,
            count: 1000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("synthetic image size must be positive".into()));
        }
        let limit = self.width.min(self.height) as f64 / 2.0;
        if !(self.max_displacement >= 0.0 && self.max_displacement < limit) {
            return Err(Error::Config(format!(
                "max_displacement {} must lie in [0, {limit})",
                self.max_displacement
            )));
        }
        Ok(())
    }
}

/// `p ↦ A·p + b` in pixel coordinates (x, y).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self::translation(0.0, 0.0)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            a: [[1.0, 0.0], [0.0, 1.0]],
            b: [tx, ty],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a[0][0] * x + self.a[0][1] * y + self.b[0],
            self.a[1][0] * x + self.a[1][1] * y + self.b[1],
        )
    }

    pub fn inverse_apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [[p, q], [r, s]] = self.a;
        let det = p * s - q * r;
        let (dx, dy) = (x - self.b[0], y - self.b[1]);
        ((s * dx - q * dy) / det, (-r * dx + p * dy) / det)
    }

    /// Forward flow at a frame-1 pixel.
    pub fn flow_at(&self, x: f64, y: f64) -> (f64, f64) {
        let (tx, ty) = self.apply(x, y);
        (tx - x, ty - y)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64, salt: u64) -> f64 {
    let h = splitmix(seed ^ splitmix(ix as u64 ^ splitmix(iy as u64 ^ splitmix(salt))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn quintic(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Continuous RGB texture defined on the whole plane.
#[derive(Clone, Copy, Debug)]
pub struct TextureField {
    kind: Texture,
    seed: u64,
    offset: (f64, f64),
}

impl TextureField {
    const OCTAVES: [(f64, f64); 2] = [(8.0, 0.65), (4.0, 0.35)];
    const CHECKER: f64 = 4.0;

    pub fn new(kind: Texture, seed: u64, offset: (f64, f64)) -> Self {
        Self { kind, seed, offset }
    }

    /// Value of channel `c` at continuous position `(x, y)`, in `[0, 1]`.
    pub fn eval(&self, x: f64, y: f64, c: usize) -> f64 {
        let (x, y) = (x + self.offset.0, y + self.offset.1);
        match self.kind {
            Texture::SmoothNoise => Self::OCTAVES
                .iter()
                .enumerate()
                .map(|(o, &(cell, amp))| {
                    let (gx, gy) = (x / cell, y / cell);
                    let (ix, iy) = (gx.floor(), gy.floor());
                    let (fx, fy) = (quintic(gx - ix), quintic(gy - iy));
                    let (ix, iy) = (ix as i64, iy as i64);
                    let salt = (o * 3 + c) as u64;
                    let v00 = lattice(self.seed, ix, iy, salt);
                    let v10 = lattice(self.seed, ix + 1, iy, salt);
                    let v01 = lattice(self.seed, ix, iy + 1, salt);
                    let v11 = lattice(self.seed, ix + 1, iy + 1, salt);
                    amp * ((1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11))
                })
                .sum(),
            Texture::Checker => {
                let parity = ((x / Self::CHECKER).floor() + (y / Self::CHECKER).floor()).rem_euclid(2.0);
                let low = 0.2 * lattice(self.seed, 0, 0, c as u64);
                let high = 0.8 + 0.2 * lattice(self.seed, 1, 0, c as u64);
                if parity < 1.0 {
                    low
                } else {
                    high
                }
            }
        }
    }
}

/// Synthetic pair at working precision, before 8-bit quantization.
#[derive(Clone, Debug)]
pub struct SynthPair<T: Element> {
    /// `[1,3,H,W]` in `[0, 1]`.
    pub image1: Tensor<T>,
    pub image2: Tensor<T>,
    pub flow: FlowField<T>,
    pub transform: AffineTransform,
    pub texture: TextureField,
}

fn sample_rng(config: &SynthConfig, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(config.seed ^ splitmix(index)))
}

fn sample_texture(config: &SynthConfig, rng: &mut ChaCha8Rng) -> TextureField {
    let seed = rng.next_u64();
    let offset = (rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0));
    TextureField::new(config.texture, seed, offset)
}

fn sample_transform(config: &SynthConfig, rng: &mut ChaCha8Rng) -> AffineTransform {
    let disk = |rng: &mut ChaCha8Rng, radius: f64| {
        let r = radius * rng.random_range(0.0f64..1.0).sqrt();
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        (r * theta.cos(), r * theta.sin())
    };
    match config.transform {
        TransformFamily::Translation => {
            let (tx, ty) = disk(rng, config.max_displacement);
            AffineTransform::translation(tx, ty)
        }
        TransformFamily::Affine => {
            let (w, h) = (config.width as f64, config.height as f64);
            let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
            let corner = cx.hypot(cy);
            let mut angle: f64 = rng.random_range(-0.03..0.03);
            let mut scale: f64 = rng.random_range(-0.03..0.03);
            // |(A - I)(p - c)| <= (|scale| + |angle|·(1 + |scale|))·corner, keep
            // it within half the displacement budget.
            let bound = scale.abs() + angle.abs() * (1.0 + scale.abs());
            let budget = 0.5 * config.max_displacement / corner.max(1.0);
            if bound > budget {
                let k = budget / bound;
                angle *= k;
                scale *= k;
            }
            let linear = (scale.abs() + angle.abs() * (1.0 + scale.abs())) * corner;
            let (tx, ty) = disk(rng, (config.max_displacement - linear).max(0.0));
            let s = 1.0 + scale;
            let (sin, cos) = angle.sin_cos();
            let a = [[s * cos, -s * sin], [s * sin, s * cos]];
            let b = [
                cx - (a[0][0] * cx + a[0][1] * cy) + tx,
                cy - (a[1][0] * cx + a[1][1] * cy) + ty,
            ];
            AffineTransform { a, b }
        }
    }
}

/// Render the pair for `index` with an explicit transform.
pub fn render_with_transform<T: Element>(
    config: &SynthConfig,
    index: u64,
    transform: AffineTransform,
) -> Result<SynthPair<T>> {
    config.validate()?;
    let mut rng = sample_rng(config, index);
    let texture = sample_texture(config, &mut rng);
    Ok(render(config, texture, transform))
}

fn render<T: Element>(config: &SynthConfig, texture: TextureField, transform: AffineTransform) -> SynthPair<T> {
    let (w, h) = (config.width, config.height);
    let plane = w * h;
    let image1 = Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        T::lit(texture.eval((p % w) as f64, (p / w) as f64, c))
    });
    let image2 = Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        let (sx, sy) = transform.inverse_apply((p % w) as f64, (p / w) as f64);
        T::lit(texture.eval(sx, sy, c))
    });
    let flow = Tensor::from_fn(&[1, 2, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        let (u, v) = transform.flow_at((p % w) as f64, (p / w) as f64);
        T::lit(if c == 0 { u } else { v })
    });
    SynthPair {
        image1,
        image2,
        flow: FlowField::new(flow, None).expect("finite synthetic flow"),
        transform,
        texture,
    }
}

/// Deterministic pair for `(config.seed, index)`.
pub fn render_pair<T: Element>(config: &SynthConfig, index: u64) -> Result<SynthPair<T>> {
    config.validate()?;
    let mut rng = sample_rng(config, index);
    let texture = sample_texture(config, &mut rng);
    let transform = sample_transform(config, &mut rng);
    Ok(render(config, texture, transform))
}

/// Stack the pairs with the given indices into batch tensors.
pub fn synth_batch<T: Element>(config: &SynthConfig, indices: &[u64]) -> Result<(Tensor<T>, Tensor<T>, FlowField<T>)> {
    let count = indices.len();
    let pairs = indices
        .iter()
        .map(|&i| render_pair::<T>(config, i))
        .collect::<Result<Vec<_>>>()?;
    let stack = |get: &dyn Fn(&SynthPair<T>) -> &Tensor<T>, c: usize| {
        let data: Vec<T> = pairs.iter().flat_map(|p| get(p).data().iter().copied()).collect();
        Tensor::new(data, &[count, c, config.height, config.width])
    };
    let i1 = stack(&|p| &p.image1, 3)?;
    let i2 = stack(&|p| &p.image2, 3)?;
    let flow = FlowField::new(stack(&|p| p.flow.tensor(), 2)?, None)?;
    Ok((i1, i2, flow))
}

fn to_raster<T: Element>(image: &Tensor<T>, width: usize, height: usize) -> RgbImage {
    let plane = width * height;
    let mut img = RgbImage::new(width, height);
    for p in 0..plane {
        for c in 0..3 {
            img.data[p * 3 + c] = (image.data()[c * plane + p].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img
}

/// Deterministic pair for `(config.seed, index)` as an 8-bit sample.
pub fn synth_pair(config: &SynthConfig, index: u64) -> Result<FlowSample> {
    let pair = render_pair::<f64>(config, index)?;
    Ok(FlowSample {
        image1: to_raster(&pair.image1, config.width, config.height),
        image2: to_raster(&pair.image2, config.width, config.height),
        flow_gt: Some(pair.flow),
        source_path: None,
        format: SampleFormat::Synthetic,
    })
}
