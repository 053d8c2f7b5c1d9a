//! Flat `key=value` configuration files and the merged run configuration.
//!
//! One entry per line, `#` starts a comment, surrounding whitespace is
//! ignored. Duplicate and unknown keys are errors. Floats are written in
//! shortest round-trip form so a saved config reproduces a run exactly.

use std::fmt::{Display, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Layout, SynthConfig};
use crate::error::{Error, Result};
use crate::loss::{ConfidenceSource, LossConfig, LossVariant};
use crate::model::ModelConfig;

pub type KvPairs = Vec<(String, String)>;

/// Parse `key=value` lines, preserving order.
pub fn parse_kv(text: &str) -> Result<KvPairs> {
    let mut out: KvPairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: invalid value '{v}': {e}")))
}

fn bool_value(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown key '{key}'"))
}

fn set_model(m: &mut ModelConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "feature_channels" => m.feature_channels = value(key, v)?,
        "hidden_channels" => m.hidden_channels = value(key, v)?,
        "correlation_radius" => m.correlation_radius = value(key, v)?,
        "iterations" => m.iterations = value(key, v)?,
        "sci_enabled" => m.sci_enabled = bool_value(key, v)?,
        "downsample_factor" => m.downsample_factor = value(key, v)?,
        "seed" => m.seed = value(key, v)?,
        _ => return Err(unknown(key)),
    }
    Ok(())
}

fn model_entries(m: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("feature_channels", m.feature_channels.to_string()),
        ("hidden_channels", m.hidden_channels.to_string()),
        ("correlation_radius", m.correlation_radius.to_string()),
        ("iterations", m.iterations.to_string()),
        ("sci_enabled", m.sci_enabled.to_string()),
        ("downsample_factor", m.downsample_factor.to_string()),
        ("seed", m.seed.to_string()),
    ]
}

pub fn model_config_to_kv(m: &ModelConfig) -> String {
    model_entries(m).into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Every key must be present.
pub fn model_config_from_kv(pairs: &KvPairs) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    for (k, v) in pairs {
        set_model(&mut m, k, v)?;
    }
    for (k, _) in model_entries(&m) {
        if !pairs.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("missing key '{k}'")));
        }
    }
    m.validate()?;
    Ok(m)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Self::F32),
            "f64" | "64" => Ok(Self::F64),
            o => Err(Error::Config(format!("unknown precision '{o}' (expected f32 or f64)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

/// Training variant: which of the two mechanisms are switched on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainVariant {
    #[default]
    Baseline,
    Sci,
    Rfl,
    SciRfl,
}

impl TrainVariant {
    pub const ALL: [TrainVariant; 4] = [Self::Baseline, Self::Sci, Self::Rfl, Self::SciRfl];

    pub fn sci(self) -> bool {
        matches!(self, Self::Sci | Self::SciRfl)
    }

    pub fn rfl(self) -> bool {
        matches!(self, Self::Rfl | Self::SciRfl)
    }
}

impl FromStr for TrainVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "baseline" => Ok(Self::Baseline),
            "sci" => Ok(Self::Sci),
            "rfl" => Ok(Self::Rfl),
            "sci_rfl" | "sciflow" => Ok(Self::SciRfl),
            o => Err(Error::Config(format!(
                "unknown variant '{o}' (expected baseline, sci, rfl or sci_rfl)"
            ))),
        }
    }
}

impl std::fmt::Display for TrainVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Sci => "sci",
            Self::Rfl => "rfl",
            Self::SciRfl => "sci_rfl",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Gradient descent with heavy-ball momentum.
    #[default]
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            o => Err(Error::Config(format!("unknown optimizer '{o}' (expected sgd or adam)"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

/// Learning-rate multiplier over the course of training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Straight line from `lr` down to zero at the last step.
    Linear,
    /// Half cosine from `lr` down to zero at the last step.
    Cosine,
}

impl LrSchedule {
    /// Multiplier for update `t` (0-based) out of `total`.
    pub fn factor(self, t: usize, total: usize) -> f64 {
        let frac = if total == 0 { 0.0 } else { t as f64 / total as f64 };
        match self {
            Self::Constant => 1.0,
            Self::Linear => 1.0 - frac,
            Self::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            o => Err(Error::Config(format!(
                "unknown schedule '{o}' (expected constant, linear or cosine)"
            ))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Heavy-ball momentum for SGD, first-moment decay for Adam.
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub steps: usize,
    pub batch: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 1e-3,
            schedule: LrSchedule::Constant,
            momentum: 0.9,
            clip_norm: 1.0,
            steps: 2000,
            batch: 4,
        }
    }
}

/// Everything needed to reproduce a training or evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: TrainVariant,
    /// `sci_enabled` and `seed` are derived from `variant` and `seed`.
    pub model: ModelConfig,
    /// Applied when the variant enables RFL; otherwise plain L1 is used.
    pub loss: LossConfig,
    /// Training data; its seed is derived from `seed`.
    pub data: SynthConfig,
    pub optim: OptimizerConfig,
    pub seed: u64,
    pub precision: Precision,
    /// Held-out synthetic set.
    pub eval_seed: u64,
    pub eval_count: usize,
    /// Steps between held-out evaluations in the metrics log; 0 disables.
    pub eval_every: usize,
    /// Train on an ingested dataset instead of synthetic pairs.
    pub dataset: Option<PathBuf>,
    pub layout: Layout,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: TrainVariant::Baseline,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            data: SynthConfig::default(),
            optim: OptimizerConfig::default(),
            seed: 0,
            precision: Precision::F64,
            eval_seed: 1_000_003,
            eval_count: 64,
            eval_every: 100,
            dataset: None,
            layout: Layout::FloPairs,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Model configuration with variant and seed applied.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            sci_enabled: self.variant.sci(),
            seed: self.seed,
            ..self.model
        }
    }

    pub fn effective_loss(&self) -> LossConfig {
        if self.variant.rfl() {
            self.loss
        } else {
            LossConfig {
                gamma: self.loss.gamma,
                ..LossConfig::baseline()
            }
        }
    }

    pub fn train_data(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.data
        }
    }

    pub fn eval_data(&self) -> SynthConfig {
        SynthConfig {
            seed: self.eval_seed,
            count: self.eval_count,
            ..self.data
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_model().validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        let s = self.model.downsample_factor;
        if self.dataset.is_none() && (self.data.width % s != 0 || self.data.height % s != 0) {
            return Err(Error::Config(format!(
                "synthetic size {}x{} must be divisible by downsample_factor {s}",
                self.data.width, self.data.height
            )));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("optim.lr must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config(format!("optim.momentum must lie in [0, 1), got {}", o.momentum)));
        }
        if !(o.clip_norm >= 0.0 && o.clip_norm.is_finite()) {
            return Err(Error::Config(format!("optim.clip_norm must be >= 0, got {}", o.clip_norm)));
        }
        if o.batch == 0 {
            return Err(Error::Config("optim.batch must be at least 1".into()));
        }
        if self.data.count == 0 {
            return Err(Error::Config("data.count must be at least 1".into()));
        }
        Ok(())
    }

    /// Apply one `key=value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("model.") {
            if matches!(k, "sci_enabled" | "seed") {
                return Err(Error::Config(format!("'{key}' is derived from variant/seed")));
            }
            return set_model(&mut self.model, k, v).map_err(|e| match e {
                Error::Config(m) if m.starts_with("unknown") => unknown(key),
                Error::Config(m) => Error::Config(format!("model.{m}")),
                other => other,
            });
        }
        match key {
            "variant" => self.variant = value(key, v)?,
            "seed" => self.seed = value(key, v)?,
            "precision" => self.precision = value(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "dataset" => self.dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "layout" => self.layout = value(key, v)?,
            "eval.seed" => self.eval_seed = value(key, v)?,
            "eval.count" => self.eval_count = value(key, v)?,
            "eval.every" => self.eval_every = value(key, v)?,
            "loss.gamma" => self.loss.gamma = value(key, v)?,
            "loss.alpha" => self.loss.alpha = value(key, v)?,
            "loss.beta" => self.loss.beta = value(key, v)?,
            "loss.variant" => self.loss.variant = value::<LossVariant>(key, v)?,
            "loss.confidence_source" => self.loss.confidence_source = value::<ConfidenceSource>(key, v)?,
            "data.width" => self.data.width = value(key, v)?,
            "data.height" => self.data.height = value(key, v)?,
            "data.max_displacement" => self.data.max_displacement = value(key, v)?,
            "data.texture" => self.data.texture = value(key, v)?,
            "data.transform" => self.data.transform = value(key, v)?,
            "data.count" => self.data.count = value(key, v)?,
            "optim.kind" => self.optim.kind = value(key, v)?,
            "optim.lr" => self.optim.lr = value(key, v)?,
            "optim.schedule" => self.optim.schedule = value(key, v)?,
            "optim.momentum" => self.optim.momentum = value(key, v)?,
            "optim.clip_norm" => self.optim.clip_norm = value(key, v)?,
            "optim.steps" => self.optim.steps = value(key, v)?,
            "optim.batch" => self.optim.batch = value(key, v)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &KvPairs) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// Defaults overridden by a config file's contents.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_kv(text)?)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_text(&text)
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn Display| writeln!(s, "{k}={v}").unwrap();
        put("variant", &self.variant);
        put("seed", &self.seed);
        put("precision", &self.precision);
        put("output_dir", &self.output_dir.display());
        put(
            "dataset",
            &self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        put("layout", &self.layout);
        put("eval.seed", &self.eval_seed);
        put("eval.count", &self.eval_count);
        put("eval.every", &self.eval_every);
        for (k, v) in model_entries(&self.model) {
            if !matches!(k, "sci_enabled" | "seed") {
                put(&format!("model.{k}"), &v);
            }
        }
        put("loss.gamma", &self.loss.gamma);
        put("loss.alpha", &self.loss.alpha);
        put("loss.beta", &self.loss.beta);
        put("loss.variant", &self.loss.variant);
        put("loss.confidence_source", &self.loss.confidence_source);
        put("data.width", &self.data.width);
        put("data.height", &self.data.height);
        put("data.max_displacement", &self.data.max_displacement);
        put("data.texture", &self.data.texture);
        put("data.transform", &self.data.transform);
        put("data.count", &self.data.count);
        put("optim.kind", &self.optim.kind);
        put("optim.lr", &self.optim.lr);
        put("optim.schedule", &self.optim.schedule);
        put("optim.momentum", &self.optim.momentum);
        put("optim.clip_norm", &self.optim.clip_norm);
        put("optim.steps", &self.optim.steps);
        put("optim.batch", &self.optim.batch);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_comments_and_whitespace() {
        let kv = parse_kv("# header\n a = 1 \n\nb=two # trailing\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "two".into())]);
    }

    #[test]
    fn duplicate_and_malformed_lines() {
        assert!(matches!(parse_kv("a=1\na=2"), Err(Error::Config(_))));
        assert!(matches!(parse_kv("novalue"), Err(Error::Config(_))));
        assert!(matches!(parse_kv("=3"), Err(Error::Config(_))));
    }

    #[test]
    fn run_config_round_trips() {
        let mut cfg = RunConfig {
            variant: TrainVariant::SciRfl,
            seed: 7,
            dataset: Some("data/x".into()),
            ..RunConfig::default()
        };
        cfg.loss.alpha = 0.1 + 0.2;
        cfg.optim.lr = 3e-4;
        let back = RunConfig::from_kv_text(&cfg.to_kv_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("model.nope", "1"), Err(Error::Config(m)) if m.contains("unknown")));
        assert!(matches!(cfg.set("model.iterations", "x"), Err(Error::Config(m)) if m.contains("invalid")));
        assert!(matches!(cfg.set("loss.variant", "e"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("model.sci_enabled", "true"), Err(Error::Config(_))));
    }

    #[test]
    fn variants_gate_mechanisms() {
        let mut cfg = RunConfig::default();
        assert!(!cfg.effective_model().sci_enabled);
        assert_eq!(cfg.effective_loss().variant, LossVariant::A);
        cfg.variant = TrainVariant::SciRfl;
        assert!(cfg.effective_model().sci_enabled);
        assert_eq!(cfg.effective_loss(), cfg.loss);
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.data.width = 30;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_kv_requires_every_key() {
        let m = ModelConfig::default();
        let pairs = parse_kv(&model_config_to_kv(&m)).unwrap();
        assert_eq!(model_config_from_kv(&pairs).unwrap(), m);
        assert!(model_config_from_kv(&pairs[1..].to_vec()).is_err());
    }
}
