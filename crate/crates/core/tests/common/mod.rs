//! Shared helpers: scalar-loop oracles, finite differences and the check
//! suites reused by the acceptance target.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sciflow::flow::{local_correlation, sci_map, warp, FlowField};
use sciflow::loss::{rfl_loss, sequence_loss, l1_flow_loss, ConfidenceMap, LossConfig, LossVariant};
use sciflow::model::{FlowModel, ModelConfig};
use sciflow::tensor::pixel_grid;
use sciflow::{Result, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random values whose fractional part stays in `[0.15, 0.85]`, away from
/// the kinks of bilinear interpolation.
pub fn off_grid(rng: &mut ChaCha8Rng, shape: &[usize], lo: i64, hi: i64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi) as f64 + rng.random_range(0.15..0.85))
}

fn idx(shape: &[usize], b: usize, c: usize, y: usize, x: usize) -> usize {
    ((b * shape[1] + c) * shape[2] + y) * shape[3] + x
}

// ---------------------------------------------------------------- oracles

pub fn conv2d_oracle(input: &Tensor<f64>, kernel: &Tensor<f64>, stride: usize, padding: usize) -> Vec<f64> {
    let (is, ks) = (input.shape(), kernel.shape());
    let (b, cin, h, w) = (is[0], is[1], is[2], is[3]);
    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - padding as isize;
                                let x = (ox * stride + kx) as isize - padding as isize;
                                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                    continue;
                                }
                                acc += input.data()[idx(is, bi, ci, y as usize, x as usize)]
                                    * kernel.data()[idx(ks, co, ci, ky, kx)];
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Bilinear lookup as a tent-weighted sum over every pixel, after clamping
/// the coordinate into the grid.
pub fn sample_point(img: &Tensor<f64>, b: usize, c: usize, x: f64, y: f64) -> f64 {
    let s = img.shape();
    let (h, w) = (s[2], s[3]);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let mut acc = 0.0;
    for j in 0..h {
        let wy = (1.0 - (yc - j as f64).abs()).max(0.0);
        if wy == 0.0 {
            continue;
        }
        for i in 0..w {
            let wx = (1.0 - (xc - i as f64).abs()).max(0.0);
            acc += wx * wy * img.data()[idx(s, b, c, j, i)];
        }
    }
    acc
}

pub fn bilinear_oracle(img: &Tensor<f64>, coords: &Tensor<f64>) -> Vec<f64> {
    let (s, cs) = (img.shape(), coords.shape());
    let (b, c, ho, wo) = (s[0], s[1], cs[2], cs[3]);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let px = coords.data()[idx(cs, bi, 0, y, x)];
                    let py = coords.data()[idx(cs, bi, 1, y, x)];
                    out.push(sample_point(img, bi, ci, px, py));
                }
            }
        }
    }
    out
}

pub fn warp_oracle(features: &Tensor<f64>, flow: &Tensor<f64>) -> Vec<f64> {
    let (s, fs) = (features.shape(), flow.shape());
    let mut out = Vec::with_capacity(features.numel());
    for b in 0..s[0] {
        for c in 0..s[1] {
            for y in 0..s[2] {
                for x in 0..s[3] {
                    let u = flow.data()[idx(fs, b, 0, y, x)];
                    let v = flow.data()[idx(fs, b, 1, y, x)];
                    out.push(sample_point(features, b, c, x as f64 + u, y as f64 + v));
                }
            }
        }
    }
    out
}

pub fn correlation_oracle(f1: &Tensor<f64>, f2: &Tensor<f64>, r: usize) -> Vec<f64> {
    let s = f1.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let side = 2 * r + 1;
    let mut out = vec![0.0; b * side * side * h * w];
    for bi in 0..b {
        for dy in -(r as isize)..=r as isize {
            for dx in -(r as isize)..=r as isize {
                let k = (dy + r as isize) as usize * side + (dx + r as isize) as usize;
                for y in 0..h {
                    for x in 0..w {
                        let y2 = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let x2 = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        let dot: f64 = (0..c)
                            .map(|ci| f1.data()[idx(s, bi, ci, y, x)] * f2.data()[idx(s, bi, ci, y2, x2)])
                            .sum();
                        out[((bi * side * side + k) * h + y) * w + x] = dot / (c as f64).sqrt();
                    }
                }
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst oracle deviation of each op over `instances` random small cases.
pub fn oracle_suite(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let (mut conv, mut bil, mut wrp, mut cor) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let b = r.random_range(1..3);
        let cin = r.random_range(1..4);
        let h = r.random_range(3..9);
        let w = r.random_range(3..9);
        let input = rand_tensor(&mut r, &[b, cin, h, w], -1.0, 1.0);

        let k = [1, 3, 5][r.random_range(0..3)].min(h).min(w);
        let cout = r.random_range(1..4);
        let kernel = rand_tensor(&mut r, &[cout, cin, k, k], -1.0, 1.0);
        let stride = r.random_range(1..3);
        let padding = r.random_range(0..=k / 2 + 1);
        let got = input.conv2d(&kernel, stride, padding).unwrap();
        conv = conv.max(max_abs_diff(got.data(), &conv2d_oracle(&input, &kernel, stride, padding)));

        let (ho, wo) = (r.random_range(1..7), r.random_range(1..7));
        let coords = Tensor::from_fn(&[b, 2, ho, wo], |i| {
            let extent = if (i / (ho * wo)) % 2 == 0 { w } else { h } as f64;
            r.random_range(-2.0..extent + 1.0)
        });
        let got = input.bilinear_sample(&coords).unwrap();
        bil = bil.max(max_abs_diff(got.data(), &bilinear_oracle(&input, &coords)));

        let flow = rand_tensor(&mut r, &[b, 2, h, w], -3.0, 3.0);
        let got = warp(&input, &FlowField::new(flow.clone(), None).unwrap()).unwrap();
        wrp = wrp.max(max_abs_diff(got.data(), &warp_oracle(&input, &flow)));

        let f2 = rand_tensor(&mut r, &[b, cin, h, w], -1.0, 1.0);
        let radius = r.random_range(1..4);
        let got = local_correlation(&input, &f2, radius).unwrap();
        cor = cor.max(max_abs_diff(got.data(), &correlation_oracle(&input, &f2, radius)));
    }
    vec![
        ("conv2d", conv),
        ("bilinear_sample", bil),
        ("warp", wrp),
        ("local_correlation", cor),
    ]
}

// ------------------------------------------------------- finite differences

pub const FD_STEP: f64 = 1e-3;

/// Norm-wise relative error between the analytic gradient of
/// `Σ f(inputs) · R` (R a fixed random tensor) and central differences with
/// step [`FD_STEP`], worst over all inputs.
pub fn gradient_error(inputs: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>) -> f64 {
    let inputs: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().requires_grad_(true)).collect();
    let out = f(&inputs).unwrap();
    let mut r = rng(out.numel() as u64);
    let weights = rand_tensor(&mut r, out.shape(), 0.5, 1.5);
    out.mul(&weights).unwrap().sum().backward().unwrap();
    let objective = |xs: &[Tensor<f64>]| -> f64 {
        let o = f(xs).unwrap();
        o.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = input.grad().unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for k in 0..input.numel() {
            let eval = |delta: f64| {
                let mut xs: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
                let mut d = xs[i].to_vec();
                d[k] += delta;
                xs[i] = Tensor::new(d, input.shape()).unwrap();
                objective(&xs)
            };
            numeric[k] = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn flow_of(t: &Tensor<f64>) -> FlowField<f64> {
    FlowField::new(t.clone(), None).unwrap()
}

/// Gradient check of every differentiable operation.
pub fn op_gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let s = [2, 3, 4, 5];
    let a = rand_tensor(&mut r, &s, -1.0, 1.0);
    let b = rand_tensor(&mut r, &s, -1.0, 1.0);
    // |x| >= 0.2 keeps relu and abs away from their kink.
    let away = Tensor::from_fn(&s, |_| {
        let m = r.random_range(0.2..1.0);
        if r.random_bool(0.5) { m } else { -m }
    });
    let scalar = rand_tensor(&mut r, &[1], 0.5, 1.5);
    let bias = rand_tensor(&mut r, &[3], -1.0, 1.0);
    let kernel = rand_tensor(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
    let img = rand_tensor(&mut r, &[2, 3, 5, 6], -1.0, 1.0);
    let coords = Tensor::from_fn(&[2, 2, 3, 4], |i| {
        let extent = if (i / 12) % 2 == 0 { 6 } else { 5 };
        r.random_range(0..extent - 1) as f64 + r.random_range(0.15..0.85)
    });
    let flow = off_grid(&mut r, &[2, 2, 5, 6], -2, 2);
    let f2 = rand_tensor(&mut r, &[2, 3, 5, 6], -1.0, 1.0);
    let gt = rand_tensor(&mut r, &[2, 2, 4, 5], -3.0, 3.0);
    // Residuals bounded away from zero keep L1 differentiable.
    let pred = Tensor::from_fn(&[2, 2, 4, 5], |i| {
        let m = r.random_range(0.2..1.0);
        gt.data()[i] + if r.random_bool(0.5) { m } else { -m }
    });
    let conf = ConfidenceMap::new(rand_tensor(&mut r, &[2, 1, 4, 5], 0.05, 1.0)).unwrap();
    let losses = rand_tensor(&mut r, &[3], 0.5, 2.0);

    let mut out = vec![
        ("add", gradient_error(&[a.clone(), b.clone()], |x| x[0].add(&x[1]))),
        ("sub", gradient_error(&[a.clone(), b.clone()], |x| x[0].sub(&x[1]))),
        ("mul", gradient_error(&[a.clone(), b.clone()], |x| x[0].mul(&x[1]))),
        ("neg", gradient_error(&[a.clone()], |x| Ok(x[0].neg()))),
        ("add_scalar", gradient_error(&[a.clone()], |x| Ok(x[0].add_scalar(0.7)))),
        ("mul_scalar", gradient_error(&[a.clone()], |x| Ok(x[0].mul_scalar(-1.3)))),
        ("scale", gradient_error(&[a.clone(), scalar], |x| x[0].scale(&x[1]))),
        ("exp", gradient_error(&[a.clone()], |x| Ok(x[0].exp()))),
        ("square", gradient_error(&[a.clone()], |x| Ok(x[0].square()))),
        ("sigmoid", gradient_error(&[a.clone()], |x| Ok(x[0].sigmoid()))),
        ("tanh", gradient_error(&[a.clone()], |x| Ok(x[0].tanh()))),
        ("relu", gradient_error(&[away.clone()], |x| Ok(x[0].relu()))),
        ("abs", gradient_error(&[away.clone()], |x| Ok(x[0].abs()))),
        ("sum", gradient_error(&[a.clone()], |x| Ok(x[0].sum()))),
        ("mean", gradient_error(&[a.clone()], |x| Ok(x[0].mean()))),
        ("l1", gradient_error(&[away], |x| Ok(x[0].l1()))),
        ("mean_spatial", gradient_error(&[a.clone()], |x| x[0].mean_spatial())),
        ("sum_channels", gradient_error(&[a.clone()], |x| x[0].sum_channels())),
        (
            "concat_channels",
            gradient_error(&[a.clone(), b.clone()], |x| Tensor::concat_channels(&[&x[0], &x[1]])),
        ),
        ("add_channel_bias", gradient_error(&[a.clone(), bias], |x| x[0].add_channel_bias(&x[1]))),
        ("narrow_channels", gradient_error(&[a.clone()], |x| x[0].narrow_channels(1, 2))),
        ("conv2d", gradient_error(&[img.clone(), kernel.clone()], |x| x[0].conv2d(&x[1], 1, 1))),
        ("conv2d_strided", gradient_error(&[img.clone(), kernel], |x| x[0].conv2d(&x[1], 2, 1))),
        ("bilinear_sample", gradient_error(&[img.clone(), coords], |x| x[0].bilinear_sample(&x[1]))),
        ("upsample_bilinear", gradient_error(&[img.clone()], |x| x[0].upsample_bilinear(2))),
        ("pixel_grid_offset", gradient_error(&[flow.clone()], |x| {
            img.bilinear_sample(&pixel_grid::<f64>(2, 5, 6).add(&x[0])?)
        })),
        ("warp", gradient_error(&[f2.clone(), flow], |x| warp(&x[0], &flow_of(&x[1])))),
        ("sci_map", gradient_error(&[img.clone(), f2.clone()], |x| Ok(sci_map(&x[0], &x[1])?.into_tensor()))),
        ("local_correlation", gradient_error(&[img, f2], |x| local_correlation(&x[0], &x[1], 2))),
        ("l1_flow_loss", gradient_error(&[pred.clone()], |x| l1_flow_loss(&flow_of(&gt), &flow_of(&x[0])))),
    ];
    for variant in [LossVariant::A, LossVariant::B, LossVariant::C, LossVariant::D] {
        let cfg = LossConfig {
            variant,
            alpha: 0.7,
            beta: 1.5,
            ..LossConfig::default()
        };
        let name = match variant {
            LossVariant::A => "rfl_loss_a",
            LossVariant::B => "rfl_loss_b",
            LossVariant::C => "rfl_loss_c",
            LossVariant::D => "rfl_loss_d",
        };
        out.push((
            name,
            gradient_error(&[pred.clone()], |x| rfl_loss(&flow_of(&gt), &flow_of(&x[0]), &conf, &cfg)),
        ));
    }
    out.push((
        "sequence_loss",
        gradient_error(&[losses], |x| {
            let parts: Vec<Tensor<f64>> = (0..3).map(|i| x[0].narrow_flat(i)).collect::<Result<_>>()?;
            sequence_loss(&parts, 0.8)
        }),
    ));
    out
}

trait NarrowFlat {
    fn narrow_flat(&self, i: usize) -> Result<Tensor<f64>>;
}

impl NarrowFlat for Tensor<f64> {
    /// Element `i` of a rank-1 tensor as a differentiable `[1]` tensor.
    fn narrow_flat(&self, i: usize) -> Result<Tensor<f64>> {
        let n = self.numel();
        let one_hot = Tensor::from_fn(&[n], |k| if k == i { 1.0 } else { 0.0 });
        Ok(self.mul(&one_hot)?.sum())
    }
}

pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        feature_channels: 8,
        hidden_channels: 8,
        correlation_radius: 1,
        iterations: 2,
        sci_enabled: true,
        downsample_factor: 4,
        seed,
    }
}

/// End-to-end gradient check of the sequence loss of a 16×16, N=2 model
/// with respect to every parameter. Parameters get random offsets so that
/// biases and the zero-initialized SCI weights are non-zero. Detached flow
/// inputs are frozen at the values of an initial run so finite differences
/// see the same graph.
pub fn model_gradient_error(seed: u64) -> f64 {
    let config = tiny_model_config(seed);
    let mut r = rng(seed + 1);
    let fresh = FlowModel::<f64>::new(config).unwrap();
    let named = fresh
        .named_parameters()
        .map(|(n, p)| {
            let offset = rand_tensor(&mut r, p.shape(), -0.2, 0.2);
            (n.to_string(), p.detach().add(&offset).unwrap())
        })
        .collect();
    let model = FlowModel::from_parameters(config, named).unwrap();
    let i1 = rand_tensor(&mut r, &[1, 3, 16, 16], 0.0, 1.0);
    let i2 = rand_tensor(&mut r, &[1, 3, 16, 16], 0.0, 1.0);
    // Ground truth far from every iterate keeps the L1 residuals clear of
    // their kink under the finite-difference step.
    let gt = flow_of(&Tensor::from_fn(&[1, 2, 16, 16], |_| {
        let m = r.random_range(5.0..8.0);
        if r.random_bool(0.5) { m } else { -m }
    }));
    let inputs = model.estimate_flow(&i1, &i2).unwrap().flow_inputs;
    let layout = config.parameter_layout();
    let loss_of = |params: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let named = layout.iter().map(|(n, _)| n.clone()).zip(params.iter().cloned()).collect();
        let m = FlowModel::from_parameters(config, named)?;
        let trace = m.estimate_flow_with_inputs(&i1, &i2, &inputs)?;
        let terms = trace
            .flows
            .iter()
            .map(|f| l1_flow_loss(&gt, f))
            .collect::<Result<Vec<_>>>()?;
        sequence_loss(&terms, 0.8)
    };
    gradient_error(model.parameters(), loss_of)
}
