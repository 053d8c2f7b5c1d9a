//! Flow fields and the differentiable flow mechanisms: feature warping, the
//! self-cleaning (SCI) quality map and local correlation.

use crate::error::{Error, Result};
use crate::tensor::{pixel_grid, Element, Tensor};

/// Dense per-pixel displacement `[B,2,H,W]` in pixels (channel 0 = u,
/// horizontal; channel 1 = v, vertical) with an optional validity mask.
#[derive(Clone, Debug)]
pub struct FlowField<T: Element = f64> {
    flow: Tensor<T>,
    /// Row-major `[B,1,H,W]` mask.
    valid: Option<Vec<bool>>,
}

impl<T: Element> FlowField<T> {
    pub fn new(flow: Tensor<T>, valid: Option<Vec<bool>>) -> Result<Self> {
        let (b, c, h, w) = flow.dims4("FlowField")?;
        if c != 2 {
            return Err(Error::shape("FlowField", "channel", 2, c));
        }
        if let Some(mask) = &valid {
            if mask.len() != b * h * w {
                return Err(Error::shape("FlowField", "mask", b * h * w, mask.len()));
            }
        }
        if let Some(i) = flow.data().iter().position(|v| !v.is_finite()) {
            let plane = h * w;
            return Err(Error::NonFinite {
                op: "FlowField",
                index: vec![i / (2 * plane), (i % (2 * plane)) / plane, (i % plane) / w, i % w],
            });
        }
        Ok(Self { flow, valid })
    }

    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        Self {
            flow: Tensor::zeros(&[batch, 2, height, width]),
            valid: None,
        }
    }

    /// Build a single-image field from separate u and v planes.
    pub fn from_planes(width: usize, height: usize, u: &[T], v: &[T], valid: Option<Vec<bool>>) -> Result<Self> {
        let n = width * height;
        if u.len() != n || v.len() != n {
            return Err(Error::shape("FlowField::from_planes", "numel", n, u.len().max(v.len())));
        }
        let data = u.iter().chain(v).copied().collect();
        Self::new(Tensor::new(data, &[1, 2, height, width])?, valid)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.flow
    }

    pub fn valid(&self) -> Option<&[bool]> {
        self.valid.as_deref()
    }

    pub fn with_valid(self, valid: Option<Vec<bool>>) -> Result<Self> {
        Self::new(self.flow, valid)
    }

    pub fn batch(&self) -> usize {
        self.flow.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.flow.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.flow.shape()[3]
    }

    pub fn is_valid(&self, b: usize, y: usize, x: usize) -> bool {
        self.valid
            .as_ref()
            .is_none_or(|m| m[(b * self.height() + y) * self.width() + x])
    }

    pub fn valid_count(&self) -> usize {
        match &self.valid {
            Some(m) => m.iter().filter(|&&v| v).count(),
            None => self.batch() * self.height() * self.width(),
        }
    }

    /// `(u, v)` at a pixel.
    pub fn at(&self, b: usize, y: usize, x: usize) -> (T, T) {
        let plane = self.height() * self.width();
        let i = y * self.width() + x;
        let d = self.flow.data();
        (d[b * 2 * plane + i], d[(b * 2 + 1) * plane + i])
    }

    pub fn detach(&self) -> Self {
        Self {
            flow: self.flow.detach(),
            valid: self.valid.clone(),
        }
    }

    /// Convert the element type (detaches).
    pub fn cast<U: Element>(&self) -> FlowField<U> {
        let data = self.flow.data().iter().map(|v| U::lit(v.as_f64())).collect();
        FlowField {
            flow: Tensor::new(data, self.flow.shape()).expect("same shape"),
            valid: self.valid.clone(),
        }
    }

    /// Select one batch entry.
    pub fn sample(&self, b: usize) -> FlowField<T> {
        let (h, w) = (self.height(), self.width());
        let plane = 2 * h * w;
        let data = self.flow.data()[b * plane..(b + 1) * plane].to_vec();
        FlowField {
            flow: Tensor::new(data, &[1, 2, h, w]).expect("same shape"),
            valid: self.valid.as_ref().map(|m| m[b * h * w..(b + 1) * h * w].to_vec()),
        }
    }

    pub(crate) fn check_compatible(&self, other: &FlowField<T>, op: &'static str) -> Result<()> {
        self.flow.check_same_shape(&other.flow, op)
    }
}

/// Per-pixel self-assessed flow quality `[B,1,H,W]`, every value in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SciMap<T: Element = f64>(Tensor<T>);

impl<T: Element> SciMap<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

/// Resample `features` along `flow`: output at `(x, y)` reads
/// `features(x + u, y + v)` bilinearly with border clamping.
pub fn warp<T: Element>(features: &Tensor<T>, flow: &FlowField<T>) -> Result<Tensor<T>> {
    let (b, _, h, w) = features.dims4("warp")?;
    let ft = flow.tensor();
    for (axis, want, got) in [
        ("batch", b, flow.batch()),
        ("height", h, flow.height()),
        ("width", w, flow.width()),
    ] {
        if want != got {
            return Err(Error::shape("warp", axis, want, got));
        }
    }
    let coords = pixel_grid::<T>(b, h, w).add(ft)?;
    features.bilinear_sample(&coords)
}

/// Gaussian-kernel similarity between reference features and warped target
/// features: `exp(-(1 / (2·sqrt(C))) · Σ_c (f1 - f2')²)` per pixel.
pub fn sci_map<T: Element>(f1: &Tensor<T>, f2_warped: &Tensor<T>) -> Result<SciMap<T>> {
    let (_, c, _, _) = f1.dims4("sci_map")?;
    f1.check_same_shape(f2_warped, "sci_map")?;
    if c == 0 {
        return Err(Error::shape("sci_map", "channel", 1, 0));
    }
    let scale = -T::one() / (T::lit(2.0) * T::from_usize(c).unwrap().sqrt());
    let ssd = f1.sub(f2_warped)?.square().sum_channels()?;
    Ok(SciMap(ssd.mul_scalar(scale).exp()))
}

/// Correlation of `f1` against `f2` over a `(2r+1)²` displacement window.
///
/// Channel `k = (dy + r)·(2r+1) + (dx + r)` holds
/// `⟨f1(x, y), f2(x + dx, y + dy)⟩ / sqrt(C)` with `f2` lookups clamped to the
/// border.
pub fn local_correlation<T: Element>(f1: &Tensor<T>, f2: &Tensor<T>, radius: usize) -> Result<Tensor<T>> {
    if radius < 1 {
        return Err(Error::Argument("local_correlation: radius must be at least 1".into()));
    }
    let (b, c, h, w) = f1.dims4("local_correlation")?;
    f1.check_same_shape(f2, "local_correlation")?;
    let side = 2 * radius + 1;
    let k_count = side * side;
    let plane = h * w;
    let norm = T::one() / T::from_usize(c.max(1)).unwrap().sqrt();
    // Clamped source columns for each dx, shared by all rows.
    let col_index: Vec<Vec<usize>> = (0..side)
        .map(|kx| {
            (0..w)
                .map(|x| (x as isize + kx as isize - radius as isize).clamp(0, w as isize - 1) as usize)
                .collect()
        })
        .collect();
    let row_index = move |y: usize, ky: usize| -> usize {
        (y as isize + ky as isize - radius as isize).clamp(0, h as isize - 1) as usize
    };

    let (a, s) = (f1.data(), f2.data());
    let mut out = vec![T::zero(); b * k_count * plane];
    for bi in 0..b {
        for ky in 0..side {
            for kx in 0..side {
                let k = ky * side + kx;
                let dst = &mut out[(bi * k_count + k) * plane..][..plane];
                for ci in 0..c {
                    let fa = &a[(bi * c + ci) * plane..][..plane];
                    let fb = &s[(bi * c + ci) * plane..][..plane];
                    for y in 0..h {
                        let yy = row_index(y, ky);
                        let row_a = &fa[y * w..(y + 1) * w];
                        let row_b = &fb[yy * w..(yy + 1) * w];
                        let d = &mut dst[y * w..(y + 1) * w];
                        for ((o, &va), &xx) in d.iter_mut().zip(row_a).zip(&col_index[kx]) {
                            *o = *o + va * row_b[xx];
                        }
                    }
                }
                dst.iter_mut().for_each(|v| *v = *v * norm);
            }
        }
    }

    Ok(Tensor::from_op(
        "local_correlation",
        vec![b, k_count, h, w],
        out,
        vec![f1.clone(), f2.clone()],
        Box::new(move |g, parents, _| {
            let (a, s) = (parents[0].data(), parents[1].data());
            let mut ga = parents[0].requires_grad().then(|| vec![T::zero(); a.len()]);
            let mut gb = parents[1].requires_grad().then(|| vec![T::zero(); s.len()]);
            for bi in 0..b {
                for ky in 0..side {
                    for kx in 0..side {
                        let k = ky * side + kx;
                        let gk = &g[(bi * k_count + k) * plane..][..plane];
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            for y in 0..h {
                                let yy = row_index(y, ky);
                                for x in 0..w {
                                    let go = gk[y * w + x] * norm;
                                    let xx = col_index[kx][x];
                                    if let Some(ga) = ga.as_mut() {
                                        ga[off + y * w + x] = ga[off + y * w + x] + go * s[off + yy * w + xx];
                                    }
                                    if let Some(gb) = gb.as_mut() {
                                        gb[off + yy * w + xx] = gb[off + yy * w + xx] + go * a[off + y * w + x];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![ga, gb]
        }),
    ))
}
