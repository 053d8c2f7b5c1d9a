//! Sequence L1 loss, ground-truth confidence maps and the regression focal
//! loss together with its ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::model::IterationTrace;
use crate::tensor::{Element, Tensor};

/// Per-pixel weighting applied to the L1 flow residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    /// `1` (plain L1).
    A,
    /// `α·(1-M)^β`.
    B,
    /// `1 + α·M^β`.
    C,
    /// `1 + α·(1-M)^β`, the regression focal loss.
    D,
}

/// Which prediction the confidence map is derived from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConfidenceSource {
    /// One map from the last iteration, reused for every iteration's term.
    FinalIteration,
    /// Each iteration weighted by its own map.
    PerIteration,
    /// Plain L1 terms.
    None,
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            "d" => Ok(Self::D),
            other => Err(Error::Argument(format!("unknown loss variant '{other}' (expected a, b, c or d)"))),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::D => "d",
        })
    }
}

impl FromStr for ConfidenceSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "final" | "final_iteration" => Ok(Self::FinalIteration),
            "per" | "per_iteration" => Ok(Self::PerIteration),
            "none" => Ok(Self::None),
            other => Err(Error::Argument(format!(
                "unknown confidence source '{other}' (expected final_iteration, per_iteration or none)"
            ))),
        }
    }
}

impl fmt::Display for ConfidenceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FinalIteration => "final_iteration",
            Self::PerIteration => "per_iteration",
            Self::None => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Decay over iterations, in (0, 1).
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub variant: LossVariant,
    pub confidence_source: ConfidenceSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            alpha: 1.0,
            beta: 1.0,
            variant: LossVariant::D,
            confidence_source: ConfidenceSource::FinalIteration,
        }
    }
}

impl LossConfig {
    /// Plain sequence L1 loss.
    pub fn baseline() -> Self {
        Self {
            variant: LossVariant::A,
            confidence_source: ConfidenceSource::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Ground-truth confidence `[B,1,H,W]`, values in `(0, 1]`.
#[derive(Clone, Debug)]
pub struct ConfidenceMap<T: Element = f64>(Tensor<T>);

impl<T: Element> ConfidenceMap<T> {
    /// Wrap an externally computed map; values must lie in `(0, 1]`.
    pub fn new(map: Tensor<T>) -> Result<Self> {
        let (_, c, _, _) = map.dims4("ConfidenceMap")?;
        if c != 1 {
            return Err(Error::shape("ConfidenceMap", "channel", 1, c));
        }
        if let Some(v) = map.data().iter().find(|&&v| !(v > T::zero() && v <= T::one())) {
            return Err(Error::Argument(format!("confidence value {v} outside (0, 1]")));
        }
        Ok(Self(map.detach()))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// `exp(-(Δu² + Δv²))` per pixel, computed on the detached prediction.
///
/// Values are floored at the smallest positive normal so the map stays in
/// `(0, 1]` when the exponential underflows.
pub fn confidence_map<T: Element>(f_gt: &FlowField<T>, f_pred: &FlowField<T>) -> Result<ConfidenceMap<T>> {
    f_gt.check_compatible(f_pred, "confidence_map")?;
    let (b, h, w) = (f_gt.batch(), f_gt.height(), f_gt.width());
    let plane = h * w;
    let (g, p) = (f_gt.tensor().data(), f_pred.tensor().data());
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for i in 0..plane {
            let du = g[bi * 2 * plane + i] - p[bi * 2 * plane + i];
            let dv = g[(bi * 2 + 1) * plane + i] - p[(bi * 2 + 1) * plane + i];
            out.push((-(du * du + dv * dv)).exp().max(T::min_positive_value()));
        }
    }
    Ok(ConfidenceMap(Tensor::new(out, &[b, 1, h, w])?))
}

/// Per-pixel weights `[B·H·W]` for a loss variant.
pub fn rfl_weights<T: Element>(m: &ConfidenceMap<T>, config: &LossConfig) -> Vec<T> {
    let alpha = T::lit(config.alpha);
    let beta = T::lit(config.beta);
    m.0.data()
        .iter()
        .map(|&m| match config.variant {
            LossVariant::A => T::one(),
            LossVariant::B => alpha * (T::one() - m).powf(beta),
            LossVariant::C => T::one() + alpha * m.powf(beta),
            LossVariant::D => T::one() + alpha * (T::one() - m).powf(beta),
        })
        .collect()
}

/// Unreduced weighted residual `w·|f_gt - f_i|` as `[B,2,H,W]`, zero on
/// invalid pixels, together with the valid pixel count.
pub fn weighted_residual<T: Element>(
    f_gt: &FlowField<T>,
    f_i: &FlowField<T>,
    pixel_weights: Option<&[T]>,
) -> Result<(Tensor<T>, usize)> {
    f_gt.check_compatible(f_i, "flow_loss")?;
    let (b, h, w) = (f_gt.batch(), f_gt.height(), f_gt.width());
    let plane = h * w;
    if let Some(pw) = pixel_weights {
        if pw.len() != b * plane {
            return Err(Error::shape("flow_loss", "weights", b * plane, pw.len()));
        }
    }
    let mut count = 0;
    let mut weights = vec![T::zero(); b * 2 * plane];
    for bi in 0..b {
        for i in 0..plane {
            let (y, x) = (i / w, i % w);
            if !(f_gt.is_valid(bi, y, x) && f_i.is_valid(bi, y, x)) {
                continue;
            }
            count += 1;
            let wt = pixel_weights.map_or(T::one(), |pw| pw[bi * plane + i]);
            weights[bi * 2 * plane + i] = wt;
            weights[(bi * 2 + 1) * plane + i] = wt;
        }
    }
    let weights = Tensor::new(weights, f_gt.tensor().shape())?;
    let residual = f_gt.tensor().sub(f_i.tensor())?.abs().mul(&weights)?;
    Ok((residual, count))
}

fn weighted_l1<T: Element>(f_gt: &FlowField<T>, f_i: &FlowField<T>, pixel_weights: Option<&[T]>) -> Result<Tensor<T>> {
    let (residual, count) = weighted_residual(f_gt, f_i, pixel_weights)?;
    if count == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(residual.sum().mul_scalar(T::one() / T::from_usize(count).unwrap()))
}

/// Mean over valid pixels of `|Δu| + |Δv|`.
pub fn l1_flow_loss<T: Element>(f_gt: &FlowField<T>, f_i: &FlowField<T>) -> Result<Tensor<T>> {
    weighted_l1(f_gt, f_i, None)
}

/// Confidence-weighted L1 loss for the configured variant.
pub fn rfl_loss<T: Element>(
    f_gt: &FlowField<T>,
    f_i: &FlowField<T>,
    m: &ConfidenceMap<T>,
    config: &LossConfig,
) -> Result<Tensor<T>> {
    let (b, _, h, w) = m.0.dims4("rfl_loss")?;
    if (b, h, w) != (f_gt.batch(), f_gt.height(), f_gt.width()) {
        return Err(Error::shape("rfl_loss", "confidence map", f_gt.batch() * f_gt.height() * f_gt.width(), b * h * w));
    }
    let weights = rfl_weights(m, config);
    weighted_l1(f_gt, f_i, Some(&weights))
}

/// `Σ_i γ^(N-i) · l_i` over per-iteration losses `l_1..l_N`.
pub fn sequence_loss<T: Element>(per_iter_losses: &[Tensor<T>], gamma: f64) -> Result<Tensor<T>> {
    let n = per_iter_losses.len();
    if n == 0 {
        return Err(Error::Argument("sequence_loss: empty loss sequence".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Argument(format!("sequence_loss: gamma must lie in (0, 1), got {gamma}")));
    }
    let mut total: Option<Tensor<T>> = None;
    for (i, l) in per_iter_losses.iter().enumerate() {
        if l.numel() != 1 {
            return Err(Error::shape("sequence_loss", "numel", 1, l.numel()));
        }
        let term = l.mul_scalar(T::lit(gamma.powi((n - 1 - i) as i32)));
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("n >= 1"))
}

/// Total training loss of an iteration trace under the configured
/// confidence schedule.
pub fn apply_confidence_schedule<T: Element>(
    trace: &IterationTrace<T>,
    f_gt: &FlowField<T>,
    config: &LossConfig,
) -> Result<Tensor<T>> {
    let flows = &trace.flows;
    let last = flows
        .last()
        .ok_or_else(|| Error::Argument("confidence schedule: empty iteration trace".into()))?;
    let terms = match config.confidence_source {
        ConfidenceSource::None => flows
            .iter()
            .map(|f| l1_flow_loss(f_gt, f))
            .collect::<Result<Vec<_>>>()?,
        ConfidenceSource::FinalIteration => {
            let m = confidence_map(f_gt, last)?;
            flows
                .iter()
                .map(|f| rfl_loss(f_gt, f, &m, config))
                .collect::<Result<Vec<_>>>()?
        }
        ConfidenceSource::PerIteration => flows
            .iter()
            .map(|f| rfl_loss(f_gt, f, &confidence_map(f_gt, f)?, config))
            .collect::<Result<Vec<_>>>()?,
    };
    sequence_loss(&terms, config.gamma)
}
