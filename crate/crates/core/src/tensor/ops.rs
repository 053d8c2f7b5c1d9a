use super::{Element, Tensor};
use crate::error::{Error, Result};

impl<T: Element> Tensor<T> {
    fn unary<F, D>(&self, name: &'static str, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + Send + Sync + 'static,
    {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents, out| {
                let x = parents[0].data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .zip(out)
                        .map(|((&g, &x), &y)| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    fn binary<F, DA, DB>(
        &self,
        other: &Tensor<T>,
        name: &'static str,
        f: F,
        da: DA,
        db: DB,
    ) -> Result<Tensor<T>>
    where
        F: Fn(T, T) -> T,
        DA: Fn(T, T) -> T + Send + Sync + 'static,
        DB: Fn(T, T) -> T + Send + Sync + 'static,
    {
        self.check_same_shape(other, name)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents, _| {
                let (a, b) = (parents[0].data(), parents[1].data());
                let ga = parents[0].requires_grad().then(|| {
                    g.iter()
                        .zip(a.iter().zip(b))
                        .map(|(&g, (&a, &b))| g * da(a, b))
                        .collect()
                });
                let gb = parents[1].requires_grad().then(|| {
                    g.iter()
                        .zip(a.iter().zip(b))
                        .map(|(&g, (&a, &b))| g * db(a, b))
                        .collect()
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.unary("add_scalar", move |x| x + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        self.unary("mul_scalar", move |x| x * s, move |_, _| s)
    }

    /// Multiply every element by a single-element tensor; differentiable in
    /// both arguments.
    pub fn scale(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.numel() != 1 {
            return Err(Error::shape("scale", "numel", 1, s.numel()));
        }
        let k = s.data()[0];
        let data = self.data().iter().map(|&x| x * k).collect();
        Ok(Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            Box::new(|g, parents, _| {
                let x = parents[0].data();
                let k = parents[1].data()[0];
                let gx = parents[0]
                    .requires_grad()
                    .then(|| g.iter().map(|&g| g * k).collect());
                let gk = parents[1]
                    .requires_grad()
                    .then(|| vec![g.iter().zip(x).map(|(&g, &x)| g * x).sum()]);
                vec![gx, gk]
            }),
        ))
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", T::exp, |_, y| y)
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            "sigmoid",
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary("tanh", T::tanh, |_, y| T::one() - y * y)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Elementwise absolute value; the subgradient at zero is zero.
    pub fn abs(&self) -> Tensor<T> {
        self.unary("abs", T::abs, |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Sum of all elements as a shape `[1]` tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::from_usize(self.numel().max(1)).unwrap();
        self.sum().mul_scalar(T::one() / n)
    }

    /// L1 reduction: sum of absolute values.
    pub fn l1(&self) -> Tensor<T> {
        self.abs().sum()
    }

    /// Mean over height and width: `[B,C,H,W] -> [B,C,1,1]`.
    pub fn mean_spatial(&self) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4("mean_spatial")?;
        let plane = h * w;
        let inv = T::one() / T::from_usize(plane.max(1)).unwrap();
        let data = self
            .data()
            .chunks(plane.max(1))
            .take(b * c)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(Tensor::from_op(
            "mean_spatial",
            vec![b, c, 1, 1],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = Vec::with_capacity(b * c * plane);
                for &gi in g {
                    gx.extend(std::iter::repeat_n(gi * inv, plane));
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Sum over the channel axis: `[B,C,H,W] -> [B,1,H,W]`.
    pub fn sum_channels(&self) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4("sum_channels")?;
        let plane = h * w;
        let mut data = vec![T::zero(); b * plane];
        let x = self.data();
        for bi in 0..b {
            let out = &mut data[bi * plane..(bi + 1) * plane];
            for ci in 0..c {
                let src = &x[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                out.iter_mut().zip(src).for_each(|(o, &s)| *o = *o + s);
            }
        }
        Ok(Tensor::from_op(
            "sum_channels",
            vec![b, 1, h, w],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); b * c * plane];
                for bi in 0..b {
                    let gb = &g[bi * plane..(bi + 1) * plane];
                    for ci in 0..c {
                        gx[(bi * c + ci) * plane..(bi * c + ci + 1) * plane].copy_from_slice(gb);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat_channels: no inputs".into()))?;
        let (b, _, h, w) = first.dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4("concat_channels")?;
            for (axis, want, got) in [("batch", b, pb), ("height", h, ph), ("width", w, pw)] {
                if want != got {
                    return Err(Error::shape("concat_channels", axis, want, got));
                }
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (p, &pc) in parts.iter().zip(&channels) {
                data.extend_from_slice(&p.data()[bi * pc * plane..(bi + 1) * pc * plane]);
            }
        }
        let parents: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(Tensor::from_op(
            "concat_channels",
            vec![b, total, h, w],
            data,
            parents,
            Box::new(move |g, parents, _| {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parents.len());
                for (p, &pc) in parents.iter().zip(&channels) {
                    let grad = p.requires_grad().then(|| {
                        let mut gp = Vec::with_capacity(b * pc * plane);
                        for bi in 0..b {
                            let start = (bi * total + offset) * plane;
                            gp.extend_from_slice(&g[start..start + pc * plane]);
                        }
                        gp
                    });
                    out.push(grad);
                    offset += pc;
                }
                out
            }),
        ))
    }

    /// Add a per-channel bias of shape `[C]` to a `[B,C,H,W]` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4("add_channel_bias")?;
        if bias.shape() != [c] {
            return Err(Error::shape("add_channel_bias", "channel", c, bias.numel()));
        }
        let plane = h * w;
        let mut data = self.to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let k = bias.data()[ci];
                data[(bi * c + ci) * plane..(bi * c + ci + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = *v + k);
            }
        }
        Ok(Tensor::from_op(
            "add_channel_bias",
            vec![b, c, h, w],
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, parents, _| {
                let gx = parents[0].requires_grad().then(|| g.to_vec());
                let gb = parents[1].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); c];
                    for bi in 0..b {
                        for (ci, acc) in gb.iter_mut().enumerate() {
                            let s: T = g[(bi * c + ci) * plane..(bi * c + ci + 1) * plane]
                                .iter()
                                .copied()
                                .sum();
                            *acc = *acc + s;
                        }
                    }
                    gb
                });
                vec![gx, gb]
            }),
        ))
    }

    /// Select a contiguous channel range `[start, start+len)`.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4("narrow_channels")?;
        if start + len > c {
            return Err(Error::shape("narrow_channels", "channel", c, start + len));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            let from = (bi * c + start) * plane;
            data.extend_from_slice(&self.data()[from..from + len * plane]);
        }
        Ok(Tensor::from_op(
            "narrow_channels",
            vec![b, len, h, w],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); b * c * plane];
                for bi in 0..b {
                    let to = (bi * c + start) * plane;
                    gx[to..to + len * plane]
                        .copy_from_slice(&g[bi * len * plane..(bi + 1) * len * plane]);
                }
                vec![Some(gx)]
            }),
        ))
    }
}
