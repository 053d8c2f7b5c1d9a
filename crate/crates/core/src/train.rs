//! Optimizer, training loop, evaluation and the ablation grid.

use crate::config::{OptimizerConfig, OptimizerKind, RunConfig, TrainVariant};
use crate::data::{ingest_dataset, synth_batch, FlowSample, SampleIndex, SynthConfig};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::loss::{apply_confidence_schedule, ConfidenceSource, LossConfig, LossVariant};
use crate::metrics::{EvalAccumulator, EvalReport, OutlierRule};
use crate::model::FlowModel;
use crate::tensor::{Element, Tensor};

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer with global gradient-norm clipping. State is kept
/// in f64 regardless of the model precision.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new<T: Element>(config: OptimizerConfig, model: &FlowModel<T>) -> Self {
        let zeros: Vec<Vec<f64>> = model.parameters().iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            config,
            second: if config.kind == OptimizerKind::Adam { zeros.clone() } else { Vec::new() },
            first: zeros,
            t: 0,
        }
    }

    /// Apply one update from the accumulated gradients. Returns the gradient
    /// norm before clipping.
    pub fn step<T: Element>(&mut self, model: &mut FlowModel<T>) -> Result<f64> {
        let grads: Vec<Vec<f64>> = model
            .parameters()
            .iter()
            .map(|p| match p.grad() {
                Some(g) => g.iter().map(|v| v.as_f64()).collect(),
                None => vec![0.0; p.numel()],
            })
            .collect();
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient norm at update {}", self.t + 1)));
        }
        let clip = self.config.clip_norm;
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        let c = self.config;
        let lr = c.lr * c.schedule.factor(self.t as usize, c.steps);
        self.t += 1;
        let mut values = Vec::with_capacity(grads.len());
        for (i, (p, g)) in model.parameters().iter().zip(&grads).enumerate() {
            let m = &mut self.first[i];
            let mut v = p.data().iter().map(|x| x.as_f64()).collect::<Vec<_>>();
            match c.kind {
                OptimizerKind::Sgd => {
                    for ((x, mk), &gk) in v.iter_mut().zip(m.iter_mut()).zip(g) {
                        *mk = c.momentum * *mk + gk * scale;
                        *x -= lr * *mk;
                    }
                }
                OptimizerKind::Adam => {
                    let s = &mut self.second[i];
                    let bc1 = 1.0 - c.momentum.powi(self.t as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                    for (((x, mk), sk), &gk) in v.iter_mut().zip(m.iter_mut()).zip(s.iter_mut()).zip(g) {
                        let gk = gk * scale;
                        *mk = c.momentum * *mk + (1.0 - c.momentum) * gk;
                        *sk = ADAM_BETA2 * *sk + (1.0 - ADAM_BETA2) * gk * gk;
                        *x -= lr * (*mk / bc1) / ((*sk / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
            values.push(v.into_iter().map(T::lit).collect());
        }
        model.set_parameter_values(values)?;
        Ok(norm)
    }
}

/// Stack equally sized samples with ground truth into one batch.
pub fn stack_samples<T: Element>(samples: &[FlowSample]) -> Result<(Tensor<T>, Tensor<T>, FlowField<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("cannot stack an empty batch".into()))?;
    let (w, h) = (first.image1.width, first.image1.height);
    let (mut i1, mut i2, mut fl, mut valid) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        for img in [&s.image1, &s.image2] {
            if img.width != w {
                return Err(Error::shape("stack_samples", "width", w, img.width));
            }
            if img.height != h {
                return Err(Error::shape("stack_samples", "height", h, img.height));
            }
        }
        let (a, b) = s.tensors::<T>()?;
        i1.extend_from_slice(a.data());
        i2.extend_from_slice(b.data());
        let gt = s
            .flow_gt
            .as_ref()
            .ok_or_else(|| Error::Argument("training sample has no ground truth".into()))?;
        if (gt.width(), gt.height()) != (w, h) {
            return Err(Error::shape("stack_samples", "width", w, gt.width()));
        }
        fl.extend(gt.tensor().data().iter().map(|v| T::lit(*v)));
        match gt.valid() {
            Some(m) => valid.extend_from_slice(m),
            None => valid.extend(std::iter::repeat_n(true, w * h)),
        }
    }
    let n = samples.len();
    let mask = valid.iter().any(|v| !v).then_some(valid);
    Ok((
        Tensor::new(i1, &[n, 3, h, w])?,
        Tensor::new(i2, &[n, 3, h, w])?,
        FlowField::new(Tensor::new(fl, &[n, 2, h, w])?, mask)?,
    ))
}

enum Source {
    Synthetic(SynthConfig),
    Dataset { index: SampleIndex, with_gt: Vec<usize> },
}

impl Source {
    fn from_config(config: &RunConfig) -> Result<Self> {
        let Some(root) = &config.dataset else {
            return Ok(Source::Synthetic(config.train_data()));
        };
        let index = ingest_dataset(root, config.layout)?;
        let with_gt: Vec<usize> = index
            .descriptors()
            .iter()
            .enumerate()
            .filter(|(_, d)| d.flow.is_some())
            .map(|(i, _)| i)
            .collect();
        if with_gt.is_empty() {
            return Err(Error::Config(format!(
                "dataset {} has no samples with ground truth",
                root.display()
            )));
        }
        Ok(Source::Dataset { index, with_gt })
    }

    fn batch<T: Element>(&self, step: usize, batch: usize) -> Result<(Tensor<T>, Tensor<T>, FlowField<T>)> {
        match self {
            Source::Synthetic(cfg) => {
                let indices: Vec<u64> = (0..batch).map(|j| ((step * batch + j) % cfg.count) as u64).collect();
                synth_batch(cfg, &indices)
            }
            Source::Dataset { index, with_gt } => {
                let samples = (0..batch)
                    .map(|j| index.load(with_gt[(step * batch + j) % with_gt.len()]))
                    .collect::<Result<Vec<_>>>()?;
                stack_samples(&samples)
            }
        }
    }
}

/// Loss of one batch under a loss configuration, as a `[1]` tensor.
pub fn batch_loss<T: Element>(
    model: &FlowModel<T>,
    image1: &Tensor<T>,
    image2: &Tensor<T>,
    gt: &FlowField<T>,
    loss: &LossConfig,
) -> Result<Tensor<T>> {
    let trace = model.estimate_flow(image1, image2)?;
    apply_confidence_schedule(&trace, gt, loss)
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainResult<T: Element> {
    pub model: FlowModel<T>,
    pub report: EvalReport,
    pub final_loss: Option<f64>,
}

/// Train the configured variant. Every log line (per-step loss and periodic
/// held-out EPE) is passed to `log` in order; none contain timings.
pub fn train<T: Element>(config: &RunConfig, log: &mut dyn FnMut(&str) -> Result<()>) -> Result<TrainResult<T>> {
    config.validate()?;
    let loss_cfg = config.effective_loss();
    let mut model = FlowModel::<T>::new(config.effective_model())?;
    let source = Source::from_config(config)?;
    let mut opt = Optimizer::new(config.optim, &model);
    log(&format!(
        "variant={} parameters={} steps={} batch={}",
        config.variant,
        model.parameter_count(),
        config.optim.steps,
        config.optim.batch
    ))?;
    let mut final_loss = None;
    for step in 0..config.optim.steps {
        let (i1, i2, gt) = source.batch::<T>(step, config.optim.batch)?;
        let loss = batch_loss(&model, &i1, &i2, &gt, &loss_cfg)?;
        let value = loss.item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss at step {}", step + 1)));
        }
        loss.backward()?;
        let norm = opt.step(&mut model)?;
        log(&format!("step={} loss={value:.9e} grad_norm={norm:.6e}", step + 1))?;
        final_loss = Some(value);
        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 && step + 1 < config.optim.steps {
            let r = evaluate_synthetic(&model, &config.eval_data(), config.optim.batch)?;
            log(&format!("step={} heldout_epe={:.9e}", step + 1, r.epe_mean))?;
        }
    }
    let report = match &source {
        Source::Synthetic(_) => evaluate_synthetic(&model, &config.eval_data(), config.optim.batch)?,
        Source::Dataset { index, .. } => evaluate_index(&model, index, OutlierRule::Kitti)?,
    };
    log(&format!("final heldout_epe={:.9e} fl_all={:.6}", report.epe_mean, report.fl_all))?;
    Ok(TrainResult {
        model,
        report,
        final_loss,
    })
}

/// Final-iteration and per-iteration metrics over `count` synthetic pairs.
pub fn evaluate_synthetic<T: Element>(model: &FlowModel<T>, data: &SynthConfig, batch: usize) -> Result<EvalReport> {
    let mut acc = EvalAccumulator::new(OutlierRule::Kitti);
    let mut start = 0;
    while start < data.count {
        let n = batch.max(1).min(data.count - start);
        let indices: Vec<u64> = (start as u64..(start + n) as u64).collect();
        let (i1, i2, gt) = synth_batch::<T>(data, &indices)?;
        let trace = model.estimate_flow(&i1, &i2)?;
        acc.add(trace.last().expect("at least one iteration"), &gt)?;
        acc.add_iterations(&trace.flows, &gt)?;
        start += n;
    }
    acc.report()
}

/// Metrics over the samples of an index that carry ground truth.
pub fn evaluate_index<T: Element>(model: &FlowModel<T>, index: &SampleIndex, rule: OutlierRule) -> Result<EvalReport> {
    let mut acc = EvalAccumulator::new(rule);
    for sample in index.iter() {
        let sample = sample?;
        if !sample.has_ground_truth() {
            continue;
        }
        let (i1, i2, gt) = stack_samples::<T>(std::slice::from_ref(&sample))?;
        let trace = model.estimate_flow(&i1, &i2)?;
        acc.add(trace.last().expect("at least one iteration"), &gt)?;
        acc.add_iterations(&trace.flows, &gt)?;
    }
    acc.report()
}

/// One row of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub variant: TrainVariant,
    pub loss_variant: LossVariant,
    pub confidence_source: ConfidenceSource,
    /// Held-out EPE per seed, then the mean.
    pub epe: Vec<f64>,
    pub fl_all: Vec<f64>,
}

impl AblationRow {
    pub fn mean_epe(&self) -> f64 {
        self.epe.iter().sum::<f64>() / self.epe.len() as f64
    }

    pub fn mean_fl_all(&self) -> f64 {
        self.fl_all.iter().sum::<f64>() / self.fl_all.len() as f64
    }
}

/// Configurations of the ablation grid: loss variants a-d with the
/// final-iteration confidence map, then variant d with a per-iteration map.
/// The SCI switch follows the base configuration's variant.
pub fn ablation_grid(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let variant = if base.variant.sci() {
        TrainVariant::SciRfl
    } else {
        TrainVariant::Rfl
    };
    let mut rows = Vec::new();
    for lv in [LossVariant::A, LossVariant::B, LossVariant::C, LossVariant::D] {
        rows.push((format!("loss_{lv}"), lv, ConfidenceSource::FinalIteration));
    }
    rows.push(("loss_d_per_iteration".into(), LossVariant::D, ConfidenceSource::PerIteration));
    rows.into_iter()
        .map(|(label, lv, cs)| {
            let mut cfg = base.clone();
            cfg.variant = variant;
            cfg.loss.variant = lv;
            cfg.loss.confidence_source = cs;
            (label, cfg)
        })
        .collect()
}

/// Train and evaluate every grid row for every seed.
pub fn run_ablation<T: Element>(
    base: &RunConfig,
    seeds: &[u64],
    log: &mut dyn FnMut(&str) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (label, cfg) in ablation_grid(base) {
        let mut row = AblationRow {
            label: label.clone(),
            variant: cfg.variant,
            loss_variant: cfg.loss.variant,
            confidence_source: cfg.loss.confidence_source,
            epe: Vec::new(),
            fl_all: Vec::new(),
        };
        for &seed in seeds {
            let cfg = RunConfig { seed, ..cfg.clone() };
            let mut quiet = |_: &str| Ok(());
            let result = train::<T>(&cfg, &mut quiet)?;
            log(&format!(
                "row={label} seed={seed} epe={:.6} fl_all={:.6}",
                result.report.epe_mean, result.report.fl_all
            ))?;
            row.epe.push(result.report.epe_mean);
            row.fl_all.push(result.report.fl_all);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Fixed-width comparison table.
pub fn format_ablation_table(rows: &[AblationRow], seeds: &[u64]) -> String {
    let mut s = format!("{:<24} {:<8} {:<4} {:<16}", "row", "variant", "loss", "confidence");
    for seed in seeds {
        s.push_str(&format!(" {:>12}", format!("epe_s{seed}")));
    }
    s.push_str(&format!(" {:>10} {:>10}\n", "epe_mean", "fl_all"));
    for r in rows {
        s.push_str(&format!(
            "{:<24} {:<8} {:<4} {:<16}",
            r.label,
            r.variant.to_string(),
            r.loss_variant.to_string(),
            r.confidence_source.to_string()
        ));
        for e in &r.epe {
            s.push_str(&format!(" {e:>12.4}"));
        }
        s.push_str(&format!(" {:>10.4} {:>10.4}\n", r.mean_epe(), r.mean_fl_all()));
    }
    s
}
