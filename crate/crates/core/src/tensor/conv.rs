use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output coordinate `o` and kernel tap `k` along one axis.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col<T: Element>(x: &[T], g: &Geometry, col: &mut [T]) {
    let p = g.out_len();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    let out_row = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    match g.source(oy, ky, g.h) {
                        None => out_row.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, o) in out_row.iter_mut().enumerate() {
                                *o = match g.source(ox, kx, g.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], g: &Geometry, x: &mut [T]) {
    let p = g.out_len();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.ho {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for (ox, &v) in row[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            dst[ix] = dst[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// 2-D cross-correlation of `[B,Cin,H,W]` with a `[Cout,Cin,kh,kw]`
    /// kernel, zero padding on all sides.
    pub fn conv2d(&self, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let (b, cin, h, w) = self.dims4("conv2d")?;
        let (cout, kcin, kh, kw) = match *kernel.shape() {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::shape("conv2d", "kernel rank", 4, kernel.rank())),
        };
        if stride == 0 {
            return Err(Error::Argument("conv2d: stride must be positive".into()));
        }
        if kcin != cin {
            return Err(Error::shape("conv2d", "channel", kcin, cin));
        }
        if kh == 0 || kh > h + 2 * padding {
            return Err(Error::shape("conv2d", "height", h + 2 * padding, kh));
        }
        if kw == 0 || kw > w + 2 * padding {
            return Err(Error::shape("conv2d", "width", w + 2 * padding, kw));
        }
        let g = Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let (k, p) = (g.patch_len(), g.out_len());
        let in_len = cin * h * w;

        let mut out = vec![T::zero(); b * cout * p];
        let mut col = vec![T::zero(); k * p];
        for bi in 0..b {
            im2col(&self.data()[bi * in_len..(bi + 1) * in_len], &g, &mut col);
            T::gemm(
                false,
                false,
                cout,
                k,
                p,
                kernel.data(),
                &col,
                &mut out[bi * cout * p..(bi + 1) * cout * p],
                false,
            );
        }

        Ok(Tensor::from_op(
            "conv2d",
            vec![b, cout, g.ho, g.wo],
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |grad, parents, _| {
                let (x, kern) = (&parents[0], &parents[1]);
                let mut gx = x.requires_grad().then(|| vec![T::zero(); b * in_len]);
                let mut gk = kern.requires_grad().then(|| vec![T::zero(); cout * k]);
                let mut col = vec![T::zero(); k * p];
                for bi in 0..b {
                    let gout = &grad[bi * cout * p..(bi + 1) * cout * p];
                    if let Some(gk) = gk.as_mut() {
                        im2col(&x.data()[bi * in_len..(bi + 1) * in_len], &g, &mut col);
                        T::gemm(false, true, cout, p, k, gout, &col, gk, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        T::gemm(true, false, k, cout, p, kern.data(), gout, &mut col, false);
                        col2im(&col, &g, &mut gx[bi * in_len..(bi + 1) * in_len]);
                    }
                }
                vec![gx, gk]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f64>::from_fn(&[2, 1, 3, 4], |i| i as f64 * 0.5 - 1.0);
        let k = Tensor::ones(&[1, 1, 1, 1]);
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn constant_field_with_ones_kernel_is_nine_c() {
        let c = 1.75;
        let x = Tensor::<f64>::full(&[1, 1, 5, 5], c);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0 * c));
    }

    #[test]
    fn output_size_follows_stride_and_padding() {
        let x = Tensor::<f32>::zeros(&[1, 2, 8, 6]);
        let k = Tensor::zeros(&[4, 2, 3, 3]);
        let y = x.conv2d(&k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 3]);
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        let bad_channels = Tensor::zeros(&[1, 3, 1, 1]);
        match x.conv2d(&bad_channels, 1, 0).unwrap_err() {
            Error::Shape { axis, .. } => assert_eq!(axis, "channel"),
            e => panic!("{e}"),
        }
        let too_tall = Tensor::zeros(&[1, 2, 3, 1]);
        match x.conv2d(&too_tall, 1, 0).unwrap_err() {
            Error::Shape { axis, .. } => assert_eq!(axis, "height"),
            e => panic!("{e}"),
        }
        assert!(x.conv2d(&too_tall, 1, 1).is_ok());
        assert!(matches!(
            x.conv2d(&Tensor::zeros(&[1, 2, 1, 1]), 0, 0),
            Err(Error::Argument(_))
        ));
    }
}
