//! Run configuration: defaults, TOML file values and `key=value` overrides,
//! applied in that order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::ContrastiveConfig;
use crate::dataset::{SpeedBins, SynthesisParams};
use crate::detection::{DetectorConfig, LossWeights};
use crate::error::{Error, Result};
use crate::evaluation::MatchCriterion;
use crate::temporal::DEFAULT_CONFIDENCE_THRESHOLD;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    pub model: DetectorConfig,
    pub detection: DetectionLossConfig,
    pub fta: FtaConfig,
    pub contrastive: ContrastiveConfig,
    pub modules: ModuleSwitches,
    pub input: InputConfig,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerConfig,
    pub inference: InferenceConfig,
    pub evaluation: EvaluationConfig,
    pub dataset: DatasetConfig,
    pub synthesis: SynthesisParams,
    pub analysis: AnalysisConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionLossConfig {
    pub size_weight: f64,
    pub offset_weight: f64,
}

impl Default for DetectionLossConfig {
    fn default() -> Self {
        Self {
            size_weight: 0.1,
            offset_weight: 1.0,
        }
    }
}

impl DetectionLossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            size: self.size_weight,
            offset: self.offset_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FtaConfig {
    pub confidence_threshold: f64,
    /// Probability of training a sample as if its reference had no boxes.
    pub train_skip_prob: f64,
}

impl Default for FtaConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            train_skip_prob: 0.0,
        }
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModuleSwitches {
    pub fta: bool,
    pub adaptive_weight: bool,
    pub bda: bool,
    pub cbcl: bool,
}

impl Default for ModuleSwitches {
    fn default() -> Self {
        Self::all_on()
    }
}

impl ModuleSwitches {
    pub fn all_on() -> Self {
        Self {
            fta: true,
            adaptive_weight: true,
            bda: true,
            cbcl: true,
        }
    }

    pub fn all_off() -> Self {
        Self {
            fta: false,
            adaptive_weight: false,
            bda: false,
            cbcl: false,
        }
    }

    /// Whether any module reads the reference frame.
    pub fn uses_reference(&self) -> bool {
        self.fta || self.bda || self.cbcl
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    pub height: usize,
    pub width: usize,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            height: 512,
            width: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    pub rotate_prob: f64,
    /// Smallest crop side as a fraction of the frame side.
    pub crop_min_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            rotate_prob: 0.5,
            crop_min_scale: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            final_learning_rate: 1e-5,
            weight_decay: 5e-4,
            epochs: 64,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Decoded boxes scoring below this are dropped from the output.
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.3,
            max_detections: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub criterion: CriterionKind,
    pub iou_threshold: f64,
    pub fps_warmup: usize,
    pub fps_repeats: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    CenterInBox,
    Iou,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            criterion: CriterionKind::CenterInBox,
            iou_threshold: 0.5,
            fps_warmup: 2,
            fps_repeats: 3,
        }
    }
}

impl EvaluationConfig {
    pub fn criterion(&self) -> MatchCriterion {
        match self.criterion {
            CriterionKind::CenterInBox => MatchCriterion::CenterInBox,
            CriterionKind::Iou => MatchCriterion::Iou(self.iou_threshold),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Number of sequences `generate` writes.
    pub sequences: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { sequences: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Frames on each side considered by the motion IoU.
    pub window: usize,
    pub slow_edge: f64,
    pub fast_edge: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            window: 10,
            slow_edge: 0.9,
            fast_edge: 0.7,
        }
    }
}

impl AnalysisConfig {
    pub fn bins(&self) -> SpeedBins {
        SpeedBins {
            slow_above: self.slow_edge,
            fast_at_or_below: self.fast_edge,
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_owned(),
        message: message.into(),
    }
}

impl Config {
    /// Checks value ranges that the type system does not.
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("detection.size_weight", self.detection.size_weight),
            ("detection.offset_weight", self.detection.offset_weight),
            ("contrastive.weight", self.contrastive.weight),
            ("optimizer.learning_rate", self.optimizer.learning_rate),
            ("optimizer.final_learning_rate", self.optimizer.final_learning_rate),
            ("optimizer.weight_decay", self.optimizer.weight_decay),
        ];
        for (key, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(key, format!("must be a finite value >= 0, got {v}")));
            }
        }
        let unit = [
            ("fta.confidence_threshold", self.fta.confidence_threshold),
            ("fta.train_skip_prob", self.fta.train_skip_prob),
            ("inference.score_threshold", self.inference.score_threshold),
            ("evaluation.iou_threshold", self.evaluation.iou_threshold),
            ("augment.flip_prob", self.augment.flip_prob),
            ("augment.rotate_prob", self.augment.rotate_prob),
        ];
        for (key, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(key, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(self.augment.crop_min_scale > 0.0 && self.augment.crop_min_scale <= 1.0) {
            return Err(invalid("augment.crop_min_scale", "must lie in (0, 1]"));
        }
        if !(self.contrastive.temperature > 0.0) {
            return Err(invalid("contrastive.temperature", "must be > 0"));
        }
        for (key, v) in [("input.height", self.input.height), ("input.width", self.input.width)] {
            if v == 0 || v % 16 != 0 {
                return Err(invalid(key, format!("must be a positive multiple of 16, got {v}")));
            }
        }
        if self.optimizer.batch_size == 0 {
            return Err(invalid("optimizer.batch_size", "must be >= 1"));
        }
        if self.optimizer.epochs == 0 {
            return Err(invalid("optimizer.epochs", "must be >= 1"));
        }
        if self.analysis.window == 0 {
            return Err(invalid("analysis.window", "must be >= 1"));
        }
        if self.analysis.fast_edge > self.analysis.slow_edge {
            return Err(invalid("analysis.fast_edge", "must not exceed analysis.slow_edge"));
        }
        if self.model.widths.contains(&0) || self.model.fusion_width == 0 || self.model.head_width == 0 {
            return Err(invalid("model", "channel widths must be >= 1"));
        }
        self.synthesis
            .validate()
            .map_err(|e| invalid("synthesis", e.to_string()))?;
        Ok(())
    }

    /// Resolves defaults, then `path` (when given), then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let defaults = toml::Value::try_from(Config::default()).expect("defaults serialize");
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config {
            key: "<file>".into(),
            message: e.message().to_owned(),
        })?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| invalid(item, "override must have the form key=value"))?;
            set_dotted(&mut table, key.trim(), parse_scalar(raw.trim()))?;
        }
        let mut value = toml::Value::Table(table);
        conform(&mut value, &defaults, "")?;
        let config: Config = value.try_into().map_err(|e: toml::de::Error| Error::Config {
            key: "<config>".into(),
            message: e.message().to_owned(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut current = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(invalid(key, "empty key segment"));
        }
        if parts.peek().is_none() {
            current.insert(part.to_owned(), value);
            return Ok(());
        }
        let entry = current
            .entry(part.to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| invalid(key, format!("`{part}` is not a section")))?;
    }
    Ok(())
}

/// Rejects keys absent from the defaults and values whose type differs
/// from the default's, naming the dotted key. Integers are widened where a
/// float is expected.
fn conform(value: &mut toml::Value, reference: &toml::Value, path: &str) -> Result<()> {
    use toml::Value as V;
    match (value, reference) {
        (V::Table(t), V::Table(r)) => {
            for (k, v) in t.iter_mut() {
                let child = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match r.get(k) {
                    Some(rv) => conform(v, rv, &child)?,
                    // optional keys that the defaults leave unset
                    None if OPTIONAL_KEYS.contains(&child.as_str()) => {
                        if !matches!(v, V::Float(_) | V::Integer(_)) {
                            return Err(invalid(&child, "expected a number"));
                        }
                        if let V::Integer(i) = *v {
                            *v = V::Float(i as f64);
                        }
                    }
                    None => return Err(invalid(&child, "unknown key")),
                }
            }
            Ok(())
        }
        (v @ V::Integer(_), V::Float(_)) => {
            if let V::Integer(i) = *v {
                *v = V::Float(i as f64);
            }
            Ok(())
        }
        (V::Array(items), V::Array(r)) => {
            if let Some(first) = r.first() {
                for item in items.iter_mut() {
                    conform(item, first, path)?;
                }
            }
            Ok(())
        }
        (v, r) if std::mem::discriminant(v) == std::mem::discriminant(r) => Ok(()),
        (v, r) => Err(invalid(
            path,
            format!("expected {}, got {}", r.type_str(), v.type_str()),
        )),
    }
}

const OPTIONAL_KEYS: &[&str] = &["synthesis.heading_deg"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_training_defaults() {
        let c = Config::from_toml_with_overrides("", &[]).unwrap();
        assert_eq!(c.contrastive.weight, 0.3);
        assert_eq!(c.fta.confidence_threshold, 0.6);
        assert_eq!(c.detection.size_weight, 0.1);
        assert_eq!(c.detection.offset_weight, 1.0);
        assert_eq!(c.optimizer.batch_size, 32);
        assert_eq!(c.optimizer.learning_rate, 1e-4);
        assert_eq!(c, Config::default());
    }

    #[test]
    fn override_beats_file() {
        let c = Config::from_toml_with_overrides(
            "[contrastive]\nweight = 0.5\n",
            &["contrastive.weight=0".into()],
        )
        .unwrap();
        assert_eq!(c.contrastive.weight, 0.0);
    }

    #[test]
    fn file_beats_default() {
        let c = Config::from_toml_with_overrides("seed = 9\n[fta]\nconfidence_threshold = 0.7\n", &[]).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.fta.confidence_threshold, 0.7);
    }

    #[test]
    fn misspelled_key_is_named() {
        let err = Config::from_toml_with_overrides("[contrastive]\nwieght = 0.5\n", &[]).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "contrastive.wieght"),
            other => panic!("unexpected {other:?}"),
        }
        let err = Config::from_toml_with_overrides("", &["modules.ftaa=true".into()]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "modules.ftaa"));
    }

    #[test]
    fn type_mismatch_is_named() {
        let err = Config::from_toml_with_overrides("", &["optimizer.epochs=fast".into()]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "optimizer.epochs"));
    }

    #[test]
    fn integers_widen_to_floats() {
        let c = Config::from_toml_with_overrides("", &["contrastive.weight=1".into()]).unwrap();
        assert_eq!(c.contrastive.weight, 1.0);
    }

    #[test]
    fn range_checks() {
        assert!(Config::from_toml_with_overrides("", &["input.height=50".into()]).is_err());
        assert!(Config::from_toml_with_overrides("", &["contrastive.weight=-1".into()]).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut c = Config::default();
        c.seed = 42;
        c.modules.bda = false;
        c.synthesis.heading_deg = Some(30.0);
        let back = Config::from_toml_with_overrides(&c.to_toml_string(), &[]).unwrap();
        assert_eq!(back, c);
    }
}
