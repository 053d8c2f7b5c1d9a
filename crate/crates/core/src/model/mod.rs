//! Toy recurrent refinement network.
//!
//! Architecture (all convolutions carry a bias):
//!
//! * **encoder** (shared by both frames): 3×3 conv `3 → m` + tanh, then
//!   `log2(s)` stride-2 3×3 convs + tanh (the last one widening to `F`), then
//!   a linear 1×1 conv `→ F`. `m = max(F/2, 4)`.
//! * **context**: 3×3 conv `F → H` + tanh on frame-1 features gives the
//!   initial hidden state.
//! * **update step**: warp frame-2 features by the current flow, correlate
//!   with frame-1 features over a `(2r+1)²` window, optionally compute the SCI
//!   map, and feed `[corr, flow, sci]` through a 3×3 motion conv
//!   (`→ max(H/2, 2)` channels, tanh) into a convolutional GRU with 3×3 gates.
//!   A head (3×3 `H → H` + tanh, 3×3 `H → 2`) predicts the flow increment.
//! * flows are kept at feature resolution and upsampled bilinearly (values
//!   scaled by `s`) for the trace.

mod checkpoint;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_precision, load_checkpoint, AnyModel, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::flow::{local_correlation, sci_map, warp, FlowField, SciMap};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_channels: usize,
    pub hidden_channels: usize,
    pub correlation_radius: usize,
    pub iterations: usize,
    pub sci_enabled: bool,
    pub downsample_factor: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_channels: 32,
            hidden_channels: 48,
            correlation_radius: 3,
            iterations: 6,
            sci_enabled: true,
            downsample_factor: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.feature_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::Config("channel counts must be at least 1".into()));
        }
        if self.correlation_radius == 0 {
            return Err(Error::Config("correlation_radius must be at least 1".into()));
        }
        if !self.downsample_factor.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample_factor must be a power of two, got {}",
                self.downsample_factor
            )));
        }
        Ok(())
    }

    fn encoder_width(&self) -> usize {
        (self.feature_channels / 2).max(4)
    }

    fn motion_channels(&self) -> usize {
        (self.hidden_channels / 2).max(2)
    }

    fn downsample_steps(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Channels entering the motion convolution.
    pub fn gru_input_channels(&self) -> usize {
        let side = 2 * self.correlation_radius + 1;
        side * side + 2 + usize::from(self.sci_enabled)
    }

    /// Parameter names and shapes, in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let f = self.feature_channels;
        let h = self.hidden_channels;
        let m = self.encoder_width();
        let mut layout = Vec::new();
        let mut conv = |name: &str, cout: usize, cin: usize, k: usize| {
            layout.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            layout.push((format!("{name}.bias"), vec![cout]));
        };
        conv("encoder.conv0", m, 3, 3);
        let steps = self.downsample_steps();
        let mut width = m;
        for i in 0..steps {
            let out = if i + 1 == steps { f } else { m };
            conv(&format!("encoder.down{i}"), out, width, 3);
            width = out;
        }
        conv("encoder.out", f, width, 1);
        conv("context", h, f, 3);
        conv("update.motion", self.motion_channels(), self.gru_input_channels(), 3);
        for gate in ["update.gru_z", "update.gru_r", "update.gru_q"] {
            conv(gate, h, h + self.motion_channels(), 3);
        }
        conv("update.head1", h, h, 3);
        conv("update.head2", 2, h, 3);
        layout
    }
}

/// Ordered per-iteration predictions of one refinement run.
#[derive(Clone, Debug)]
pub struct IterationTrace<T: Element = f64> {
    /// Full-resolution flow after each iteration.
    pub flows: Vec<FlowField<T>>,
    /// SCI map of each iteration at feature resolution, when enabled.
    pub sci_maps: Option<Vec<SciMap<T>>>,
    /// Detached feature-resolution flow fed into each iteration.
    pub flow_inputs: Vec<Tensor<T>>,
}

impl<T: Element> IterationTrace<T> {
    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn last(&self) -> Option<&FlowField<T>> {
        self.flows.last()
    }
}

/// Result of one refinement step at feature resolution.
#[derive(Clone, Debug)]
pub struct StepOutput<T: Element> {
    pub delta_flow: Tensor<T>,
    pub flow: Tensor<T>,
    pub hidden: Tensor<T>,
    pub sci: Option<SciMap<T>>,
    /// The concatenated input of the motion convolution.
    pub gru_input: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FlowModel<T: Element = f64> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Element> FlowModel<T> {
    /// Fresh model. Weights are uniform in `±sqrt(3 / fan_in)` (unit-variance
    /// preserving), each tensor drawn from its own ChaCha stream of
    /// `config.seed`; biases start at zero.
    ///
    /// The SCI input slice of `update.motion.weight` starts at zero and the
    /// rest of that tensor is drawn as for the baseline, so a fresh +SCI
    /// model computes exactly what the baseline with the same seed does.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (stream, (name, shape)) in config.parameter_layout().into_iter().enumerate() {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if config.sci_enabled && name == "update.motion.weight" {
                let (cout, cin, k) = (shape[0], shape[1], shape[2] * shape[3]);
                let shared = init_weights::<T>(config.seed, stream, &[cout, cin - 1, shape[2], shape[3]]);
                let mut data = vec![T::zero(); cout * cin * k];
                for (o, row) in shared.data().chunks(k * (cin - 1)).enumerate() {
                    data[o * cin * k..o * cin * k + row.len()].copy_from_slice(row);
                }
                Tensor::new(data, &shape)?
            } else {
                init_weights(config.seed, stream, &shape)
            };
            names.push(name);
            params.push(tensor.requires_grad_(true));
        }
        Ok(Self { config, names, params })
    }

    /// Assemble a model from named tensors; names and shapes must match the
    /// layout implied by `config`.
    pub fn from_parameters(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((want_name, want_shape), (name, tensor)) in layout.into_iter().zip(named) {
            if want_name != name || want_shape != tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter mismatch: expected {want_name} {want_shape:?}, found {name} {:?}",
                    tensor.shape()
                )));
            }
            names.push(name);
            params.push(tensor.requires_grad_(true));
        }
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Replace every parameter value (same order and shapes); gradients reset.
    pub fn set_parameter_values(&mut self, values: Vec<Vec<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape("set_parameter_values", "count", self.params.len(), values.len()));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            *p = Tensor::new(v, p.shape())?.requires_grad_(true);
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }

    fn param(&self, name: &str) -> &Tensor<T> {
        self.parameter(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from layout"))
    }

    fn conv(&self, name: &str, x: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let w = self.param(&format!("{name}.weight"));
        let b = self.param(&format!("{name}.bias"));
        x.conv2d(w, stride, padding)?.add_channel_bias(b)
    }

    /// Encode `[B,3,H,W]` images into `[B,F,H/s,W/s]` features.
    pub fn encode_features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = image.dims4("encode_features")?;
        if c != 3 {
            return Err(Error::shape("encode_features", "channel", 3, c));
        }
        let s = self.config.downsample_factor;
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(Error::PaddingRequired {
                op: "encode_features",
                height: h,
                width: w,
                factor: s,
            });
        }
        let mut x = self.conv("encoder.conv0", image, 1, 1)?.tanh();
        for i in 0..self.config.downsample_steps() {
            x = self.conv(&format!("encoder.down{i}"), &x, 2, 1)?.tanh();
        }
        self.conv("encoder.out", &x, 1, 0)
    }

    /// Initial hidden state from frame-1 features.
    pub fn initial_hidden(&self, f1: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.conv("context", f1, 1, 1)?.tanh())
    }

    /// One refinement step at feature resolution. `flow_prev` (`[B,2,h,w]`)
    /// must not carry gradients.
    pub fn refine_step(
        &self,
        f1: &Tensor<T>,
        f2: &Tensor<T>,
        flow_prev: &Tensor<T>,
        hidden: &Tensor<T>,
    ) -> Result<StepOutput<T>> {
        if flow_prev.requires_grad() {
            return Err(Error::Argument("refine_step: flow_prev must be detached".into()));
        }
        let prev = FlowField::new(flow_prev.clone(), None)?;
        let f2_warped = warp(f2, &prev)?;
        let corr = local_correlation(f1, &f2_warped, self.config.correlation_radius)?;
        let sci = if self.config.sci_enabled {
            Some(sci_map(f1, &f2_warped)?)
        } else {
            None
        };
        let gru_input = match &sci {
            Some(s) => Tensor::concat_channels(&[&corr, flow_prev, s.tensor()])?,
            None => Tensor::concat_channels(&[&corr, flow_prev])?,
        };
        let motion = self.conv("update.motion", &gru_input, 1, 1)?.tanh();

        let hx = Tensor::concat_channels(&[hidden, &motion])?;
        let z = self.conv("update.gru_z", &hx, 1, 1)?.sigmoid();
        let r = self.conv("update.gru_r", &hx, 1, 1)?.sigmoid();
        let rh = r.mul(hidden)?;
        let q = self
            .conv("update.gru_q", &Tensor::concat_channels(&[&rh, &motion])?, 1, 1)?
            .tanh();
        // h' = (1 - z)·h + z·q = h + z·(q - h)
        let hidden = hidden.add(&z.mul(&q.sub(hidden)?)?)?;

        let head = self.conv("update.head1", &hidden, 1, 1)?.tanh();
        let delta_flow = self.conv("update.head2", &head, 1, 1)?;
        let flow = flow_prev.add(&delta_flow)?;
        Ok(StepOutput {
            delta_flow,
            flow,
            hidden,
            sci,
            gru_input,
        })
    }

    /// Refine from zero flow for the configured number of iterations.
    pub fn estimate_flow(&self, image1: &Tensor<T>, image2: &Tensor<T>) -> Result<IterationTrace<T>> {
        self.run(image1, image2, None)
    }

    /// Like [`FlowModel::estimate_flow`], but each iteration starts from the
    /// given flow values instead of the previous iteration's output. Since
    /// those inputs are detached anyway, the loss gradient is unchanged; this
    /// lets finite differences treat them as constants.
    pub fn estimate_flow_with_inputs(
        &self,
        image1: &Tensor<T>,
        image2: &Tensor<T>,
        flow_inputs: &[Tensor<T>],
    ) -> Result<IterationTrace<T>> {
        if flow_inputs.len() != self.config.iterations {
            return Err(Error::shape(
                "estimate_flow_with_inputs",
                "iterations",
                self.config.iterations,
                flow_inputs.len(),
            ));
        }
        self.run(image1, image2, Some(flow_inputs))
    }

    fn run(&self, image1: &Tensor<T>, image2: &Tensor<T>, fixed: Option<&[Tensor<T>]>) -> Result<IterationTrace<T>> {
        image1.check_same_shape(image2, "estimate_flow")?;
        let f1 = self.encode_features(image1)?;
        let f2 = self.encode_features(image2)?;
        let (b, _, h, w) = f1.dims4("estimate_flow")?;
        let s = self.config.downsample_factor;
        let scale = T::from_usize(s).unwrap();

        let mut hidden = self.initial_hidden(&f1)?;
        let mut flow = Tensor::zeros(&[b, 2, h, w]);
        let mut trace = IterationTrace {
            flows: Vec::with_capacity(self.config.iterations),
            sci_maps: self.config.sci_enabled.then(Vec::new),
            flow_inputs: Vec::with_capacity(self.config.iterations),
        };
        for i in 0..self.config.iterations {
            let input = match fixed {
                Some(inputs) => inputs[i].detach(),
                None => flow.detach(),
            };
            let step = self.refine_step(&f1, &f2, &input, &hidden)?;
            let full = step.flow.upsample_bilinear(s)?.mul_scalar(scale);
            trace.flows.push(FlowField::new(full, None)?);
            if let (Some(maps), Some(sci)) = (trace.sci_maps.as_mut(), step.sci) {
                maps.push(sci);
            }
            trace.flow_inputs.push(input);
            hidden = step.hidden;
            flow = step.flow;
        }
        Ok(trace)
    }
}

fn init_weights<T: Element>(seed: u64, stream: usize, shape: &[usize]) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    let fan_in: usize = shape[1..].iter().product();
    let bound = (3.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut rng)))
}
