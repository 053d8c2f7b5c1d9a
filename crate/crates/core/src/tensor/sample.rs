use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Four-corner lookup for one clamped sampling coordinate.
struct Taps<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: T,
    wy: T,
    /// Whether the unclamped coordinate lies inside the grid (the blend then
    /// depends on the coordinate).
    inside_x: bool,
    inside_y: bool,
}

#[inline]
fn taps<T: Element>(x: T, y: T, h: usize, w: usize) -> Taps<T> {
    let xmax = T::from_usize(w - 1).unwrap();
    let ymax = T::from_usize(h - 1).unwrap();
    let xc = x.max(T::zero()).min(xmax);
    let yc = y.max(T::zero()).min(ymax);
    let x0 = xc.floor().to_usize().unwrap_or(0).min(w - 1);
    let y0 = yc.floor().to_usize().unwrap_or(0).min(h - 1);
    Taps {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        wx: xc - T::from_usize(x0).unwrap(),
        wy: yc - T::from_usize(y0).unwrap(),
        inside_x: x >= T::zero() && x <= xmax,
        inside_y: y >= T::zero() && y <= ymax,
    }
}

/// Absolute pixel coordinates `[B,2,H,W]`: channel 0 holds x (column),
/// channel 1 holds y (row).
pub fn pixel_grid<T: Element>(batch: usize, height: usize, width: usize) -> Tensor<T> {
    let plane = height * width;
    Tensor::from_fn(&[batch, 2, height, width], |i| {
        let within = i % (2 * plane);
        let p = within % plane;
        if within < plane {
            T::from_usize(p % width).unwrap()
        } else {
            T::from_usize(p / width).unwrap()
        }
    })
}

impl<T: Element> Tensor<T> {
    /// Bilinear lookup of `self` (`[B,C,H,W]`) at absolute pixel coordinates
    /// `coords` (`[B,2,H',W']`, x then y). Coordinates outside the grid are
    /// clamped to the border. Differentiable in both arguments.
    pub fn bilinear_sample(&self, coords: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4("bilinear_sample")?;
        let (cb, two, ho, wo) = coords.dims4("bilinear_sample")?;
        if cb != b {
            return Err(Error::shape("bilinear_sample", "batch", b, cb));
        }
        if two != 2 {
            return Err(Error::shape("bilinear_sample", "channel", 2, two));
        }
        if h == 0 || w == 0 {
            return Err(Error::Argument("bilinear_sample: empty source".into()));
        }
        let (src_plane, dst_plane) = (h * w, ho * wo);
        let cd = coords.data();
        for bi in 0..b {
            for p in 0..dst_plane {
                let x = cd[bi * 2 * dst_plane + p];
                let y = cd[(bi * 2 + 1) * dst_plane + p];
                if !x.is_finite() || !y.is_finite() {
                    return Err(Error::NonFinite {
                        op: "bilinear_sample",
                        index: vec![bi, p / wo, p % wo],
                    });
                }
            }
        }

        let src = self.data();
        let mut out = vec![T::zero(); b * c * dst_plane];
        for bi in 0..b {
            for p in 0..dst_plane {
                let t = taps(
                    cd[bi * 2 * dst_plane + p],
                    cd[(bi * 2 + 1) * dst_plane + p],
                    h,
                    w,
                );
                let (ax, ay) = (T::one() - t.wx, T::one() - t.wy);
                for ci in 0..c {
                    let s = &src[(bi * c + ci) * src_plane..];
                    out[(bi * c + ci) * dst_plane + p] = ay
                        * (ax * s[t.y0 * w + t.x0] + t.wx * s[t.y0 * w + t.x1])
                        + t.wy * (ax * s[t.y1 * w + t.x0] + t.wx * s[t.y1 * w + t.x1]);
                }
            }
        }

        Ok(Tensor::from_op(
            "bilinear_sample",
            vec![b, c, ho, wo],
            out,
            vec![self.clone(), coords.clone()],
            Box::new(move |g, parents, _| {
                let (source, coords) = (&parents[0], &parents[1]);
                let (src, cd) = (source.data(), coords.data());
                let mut gs = source.requires_grad().then(|| vec![T::zero(); src.len()]);
                let mut gc = coords.requires_grad().then(|| vec![T::zero(); cd.len()]);
                for bi in 0..b {
                    for p in 0..dst_plane {
                        let t = taps(
                            cd[bi * 2 * dst_plane + p],
                            cd[(bi * 2 + 1) * dst_plane + p],
                            h,
                            w,
                        );
                        let (ax, ay) = (T::one() - t.wx, T::one() - t.wy);
                        let (mut dx, mut dy) = (T::zero(), T::zero());
                        for ci in 0..c {
                            let go = g[(bi * c + ci) * dst_plane + p];
                            let base = (bi * c + ci) * src_plane;
                            if let Some(gs) = gs.as_mut() {
                                gs[base + t.y0 * w + t.x0] = gs[base + t.y0 * w + t.x0] + go * ay * ax;
                                gs[base + t.y0 * w + t.x1] = gs[base + t.y0 * w + t.x1] + go * ay * t.wx;
                                gs[base + t.y1 * w + t.x0] = gs[base + t.y1 * w + t.x0] + go * t.wy * ax;
                                gs[base + t.y1 * w + t.x1] = gs[base + t.y1 * w + t.x1] + go * t.wy * t.wx;
                            }
                            if gc.is_some() {
                                let s = &src[base..];
                                let (v00, v01) = (s[t.y0 * w + t.x0], s[t.y0 * w + t.x1]);
                                let (v10, v11) = (s[t.y1 * w + t.x0], s[t.y1 * w + t.x1]);
                                dx = dx + go * (ay * (v01 - v00) + t.wy * (v11 - v10));
                                dy = dy + go * (ax * (v10 - v00) + t.wx * (v11 - v01));
                            }
                        }
                        if let Some(gc) = gc.as_mut() {
                            if t.inside_x {
                                gc[bi * 2 * dst_plane + p] = dx;
                            }
                            if t.inside_y {
                                gc[(bi * 2 + 1) * dst_plane + p] = dy;
                            }
                        }
                    }
                }
                vec![gs, gc]
            }),
        ))
    }

    /// Bilinear upsampling by an integer factor using half-pixel alignment:
    /// output pixel `X` reads input position `(X + 0.5) / factor - 0.5`,
    /// clamped to the border.
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Tensor<T>> {
        let (b, _, h, w) = self.dims4("upsample_bilinear")?;
        if factor == 0 {
            return Err(Error::Argument("upsample_bilinear: factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (ho, wo) = (h * factor, w * factor);
        let plane = ho * wo;
        let f = T::from_usize(factor).unwrap();
        let half = T::lit(0.5);
        let coords = Tensor::from_fn(&[b, 2, ho, wo], |i| {
            let within = i % (2 * plane);
            let p = within % plane;
            let pix = if within < plane { p % wo } else { p / wo };
            (T::from_usize(pix).unwrap() + half) / f - half
        });
        self.bilinear_sample(&coords)
    }
}
