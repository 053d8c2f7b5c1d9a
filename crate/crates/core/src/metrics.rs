//! End-point error, Fl-all outlier rate and error/confidence renders.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::io::RgbImage;
use crate::loss::ConfidenceMap;
use crate::tensor::{Element, Tensor};

/// Outlier definition used by [`fl_all`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutlierRule {
    /// EPE > 3 px and EPE > 5% of the ground-truth magnitude (KITTI 2015).
    #[default]
    Kitti,
    /// EPE > 3 px only.
    AbsoluteOnly,
}

impl OutlierRule {
    pub fn is_outlier(self, epe: f64, gt_magnitude: f64) -> bool {
        match self {
            OutlierRule::Kitti => epe > 3.0 && epe > 0.05 * gt_magnitude,
            OutlierRule::AbsoluteOnly => epe > 3.0,
        }
    }
}

impl FromStr for OutlierRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kitti" => Ok(Self::Kitti),
            "3px" | "absolute" => Ok(Self::AbsoluteOnly),
            other => Err(Error::Argument(format!("unknown outlier rule '{other}' (expected kitti or 3px)"))),
        }
    }
}

/// Visit `(epe, |gt|)` for every pixel valid in both fields.
fn for_each_valid<T: Element>(
    pred: &FlowField<T>,
    gt: &FlowField<T>,
    op: &'static str,
    mut f: impl FnMut(f64, f64),
) -> Result<()> {
    pred.check_compatible(gt, op)?;
    for b in 0..gt.batch() {
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                if !(gt.is_valid(b, y, x) && pred.is_valid(b, y, x)) {
                    continue;
                }
                let (pu, pv) = pred.at(b, y, x);
                let (gu, gv) = gt.at(b, y, x);
                let (gu, gv) = (gu.as_f64(), gv.as_f64());
                let (du, dv) = (pu.as_f64() - gu, pv.as_f64() - gv);
                f((du * du + dv * dv).sqrt(), (gu * gu + gv * gv).sqrt());
            }
        }
    }
    Ok(())
}

/// Mean end-point error over valid pixels.
pub fn epe<T: Element>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<f64> {
    let mut acc = EvalAccumulator::new(OutlierRule::Kitti);
    acc.add(pred, gt)?;
    Ok(acc.report()?.epe_mean)
}

/// Percentage of valid pixels that are outliers under the KITTI rule.
pub fn fl_all<T: Element>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<f64> {
    fl_all_with_rule(pred, gt, OutlierRule::Kitti)
}

pub fn fl_all_with_rule<T: Element>(pred: &FlowField<T>, gt: &FlowField<T>, rule: OutlierRule) -> Result<f64> {
    let mut acc = EvalAccumulator::new(rule);
    acc.add(pred, gt)?;
    Ok(acc.report()?.fl_all)
}

/// Per-pixel end-point error `[B,1,H,W]`; invalid pixels are 0.
pub fn error_map<T: Element>(pred: &FlowField<T>, gt: &FlowField<T>) -> Result<Tensor<T>> {
    pred.check_compatible(gt, "error_map")?;
    let (b, h, w) = (gt.batch(), gt.height(), gt.width());
    let mut out = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let e = if gt.is_valid(bi, y, x) && pred.is_valid(bi, y, x) {
                    let (pu, pv) = pred.at(bi, y, x);
                    let (gu, gv) = gt.at(bi, y, x);
                    let (du, dv) = (pu - gu, pv - gv);
                    (du * du + dv * dv).sqrt()
                } else {
                    T::zero()
                };
                out.push(e);
            }
        }
    }
    Tensor::new(out, &[b, 1, h, w])
}

fn gray_of_first<T: Element>(map: &Tensor<T>, op: &'static str, intensity: impl Fn(f64) -> f64) -> Result<RgbImage> {
    let (_, c, h, w) = map.dims4(op)?;
    if c != 1 {
        return Err(Error::shape(op, "channel", 1, c));
    }
    let gray: Vec<u8> = map.data()[..h * w]
        .iter()
        .map(|v| (intensity(v.as_f64()).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(RgbImage::from_gray(w, h, &gray))
}

/// Grayscale error render: intensity `round(255 · min(e / max_error, 1))`.
/// Without `max_error` the largest error in the map is used; an all-zero
/// map renders black.
pub fn render_error_map<T: Element>(map: &Tensor<T>, max_error: Option<f64>) -> Result<RgbImage> {
    let max = max_error.unwrap_or_else(|| map.data().iter().map(|v| v.as_f64()).fold(0.0, f64::max));
    gray_of_first(map, "render_error_map", |e| if max > 0.0 { e / max } else { 0.0 })
}

/// Grayscale confidence render: intensity `round(255 · M)`.
pub fn confidence_render<T: Element>(m: &ConfidenceMap<T>) -> Result<RgbImage> {
    gray_of_first(m.tensor(), "confidence_render", |v| v)
}

/// Pooled evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epe_mean: f64,
    /// Outlier percentage in `[0, 100]`.
    pub fl_all: f64,
    pub pixel_count: usize,
    pub per_iteration_epe: Option<Vec<f64>>,
}

impl EvalReport {
    /// `key=value` lines.
    pub fn to_kv_lines(&self) -> String {
        let mut s = String::new();
        writeln!(s, "epe={:.6}", self.epe_mean).unwrap();
        writeln!(s, "fl_all={:.6}", self.fl_all).unwrap();
        writeln!(s, "pixels={}", self.pixel_count).unwrap();
        if let Some(per) = &self.per_iteration_epe {
            for (i, e) in per.iter().enumerate() {
                writeln!(s, "epe_iter_{}={:.6}", i + 1, e).unwrap();
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Accumulates pixel-pooled metrics over many samples.
#[derive(Clone, Debug)]
pub struct EvalAccumulator {
    rule: OutlierRule,
    epe_sum: f64,
    outliers: usize,
    count: usize,
    per_iteration: Vec<(f64, usize)>,
}

impl EvalAccumulator {
    pub fn new(rule: OutlierRule) -> Self {
        Self {
            rule,
            epe_sum: 0.0,
            outliers: 0,
            count: 0,
            per_iteration: Vec::new(),
        }
    }

    /// Add a final prediction.
    pub fn add<T: Element>(&mut self, pred: &FlowField<T>, gt: &FlowField<T>) -> Result<()> {
        let rule = self.rule;
        for_each_valid(pred, gt, "metrics", |e, mag| {
            self.epe_sum += e;
            self.count += 1;
            if rule.is_outlier(e, mag) {
                self.outliers += 1;
            }
        })
    }

    /// Add the EPE of every iteration's prediction.
    pub fn add_iterations<T: Element>(&mut self, preds: &[FlowField<T>], gt: &FlowField<T>) -> Result<()> {
        if self.per_iteration.len() < preds.len() {
            self.per_iteration.resize(preds.len(), (0.0, 0));
        }
        for (slot, pred) in self.per_iteration.iter_mut().zip(preds) {
            for_each_valid(pred, gt, "metrics", |e, _| {
                slot.0 += e;
                slot.1 += 1;
            })?;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<EvalReport> {
        if self.count == 0 {
            return Err(Error::NoValidPixels);
        }
        let per_iteration_epe = (!self.per_iteration.is_empty()).then(|| {
            self.per_iteration
                .iter()
                .map(|&(s, n)| if n > 0 { s / n as f64 } else { f64::NAN })
                .collect()
        });
        Ok(EvalReport {
            epe_mean: self.epe_sum / self.count as f64,
            fl_all: 100.0 * self.outliers as f64 / self.count as f64,
            pixel_count: self.count,
            per_iteration_epe,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(u: &[f64], v: &[f64]) -> FlowField<f64> {
        FlowField::from_planes(u.len(), 1, u, v, None).unwrap()
    }

    #[test]
    fn three_four_five() {
        let gt = field(&[0.0], &[0.0]);
        let pred = field(&[3.0], &[4.0]);
        assert_eq!(epe(&pred, &gt).unwrap(), 5.0);
        assert_eq!(epe(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn one_outlier_in_four_is_twenty_five_percent() {
        let gt = field(&[10.0, 1.0, 1.0, 1.0], &[0.0, 0.0, 0.0, 0.0]);
        let pred = field(&[15.0, 1.0, 1.0, 1.0], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(fl_all(&pred, &gt).unwrap(), 25.0);
        assert_eq!(fl_all(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn large_motion_tolerates_relative_error() {
        let gt = field(&[100.0], &[0.0]);
        let pred = field(&[104.0], &[0.0]);
        assert_eq!(fl_all(&pred, &gt).unwrap(), 0.0);
        assert_eq!(fl_all_with_rule(&pred, &gt, OutlierRule::AbsoluteOnly).unwrap(), 100.0);
    }

    #[test]
    fn no_valid_pixels_is_an_error() {
        let gt = field(&[1.0], &[1.0]).with_valid(Some(vec![false])).unwrap();
        assert!(matches!(epe(&gt, &gt), Err(Error::NoValidPixels)));
        assert!(matches!(fl_all(&gt, &gt), Err(Error::NoValidPixels)));
    }

    #[test]
    fn renders() {
        let gt = field(&[1.0, 2.0], &[0.0, 0.0]);
        let black = render_error_map(&error_map(&gt, &gt).unwrap(), None).unwrap();
        assert!(black.data.iter().all(|&c| c == 0));
        let white = confidence_render(&ConfidenceMap::new(Tensor::<f64>::ones(&[1, 1, 2, 3])).unwrap()).unwrap();
        assert!(white.data.iter().all(|&c| c == 255));
    }

    #[test]
    fn report_lines() {
        let r = EvalReport {
            epe_mean: 0.0,
            fl_all: 0.0,
            pixel_count: 4,
            per_iteration_epe: Some(vec![1.5]),
        };
        assert_eq!(r.to_kv_lines(), "epe=0.000000\nfl_all=0.000000\npixels=4\nepe_iter_1=1.500000\n");
    }
}
