//! Model and training configuration with strict JSON schemas.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Normalization axis of time-enhanced attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeEnhancedNorm {
    /// Each source step's weights are a distribution over target steps.
    #[default]
    Paper,
    /// Each target step's weights are a distribution over source steps.
    Cross,
}

/// Which input features the gating memory query reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingInput {
    /// Features of the last observed step.
    #[default]
    Last,
    /// Features averaged over the input window.
    Mean,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Use only the attention expert; no gating network.
    pub no_gating: bool,
    /// Final output is the probability-weighted sum of all experts.
    pub ensemble: bool,
    /// Drop the best-route selection loss.
    pub worst_only: bool,
    /// Replace the identity expert with a second adaptive-graph expert.
    pub replaced_identity: bool,
    /// Replace Time2Vec with a learnable time-of-day lookup table.
    pub no_tim: bool,
    /// Replace time-enhanced attention with temporal self-attention.
    pub no_time_enhanced: bool,
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.no_gating && self.ensemble {
            return Err(Error::config(
                "ablation",
                "no_gating and ensemble are mutually exclusive",
            ));
        }
        Ok(())
    }

    /// Short name used in reports.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.no_gating, "no_gating"),
            (self.ensemble, "ensemble"),
            (self.worst_only, "worst_only"),
            (self.replaced_identity, "replaced_identity"),
            (self.no_tim, "no_tim"),
            (self.no_time_enhanced, "no_time_enhanced"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden width of every expert.
    pub d: usize,
    /// Width of a memory item; must equal `d`.
    pub e: usize,
    /// Number of memory items.
    pub m: usize,
    pub layers: usize,
    pub heads: usize,
    pub h_ff: usize,
    /// Width of the temporal information embedding.
    pub tim_dim: usize,
    pub dropout: f64,
    pub te_norm: TimeEnhancedNorm,
    pub gating_input: GatingInput,
    /// Label-side time-enhanced keys reuse the input Time2Vec parameters.
    pub share_label_tim: bool,
    /// Add day of week as an extra input channel.
    pub day_of_week: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            e: 32,
            m: 20,
            layers: 3,
            heads: 4,
            h_ff: 128,
            tim_dim: 32,
            dropout: 0.1,
            te_norm: TimeEnhancedNorm::Paper,
            gating_input: GatingInput::Last,
            share_label_tim: true,
            day_of_week: false,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("model.d", "must be positive"));
        }
        if self.e != self.d {
            return Err(Error::config(
                "model.e",
                format!("memory width {} must equal hidden width {}", self.e, self.d),
            ));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("{} heads do not divide d = {}", self.heads, self.d),
            ));
        }
        for (field, v) in [
            ("model.m", self.m),
            ("model.layers", self.layers),
            ("model.h_ff", self.h_ff),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.tim_dim < 2 {
            return Err(Error::config("model.tim_dim", "needs one linear and at least one periodic component"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("model.layer_norm_eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub reg: f64,
    pub worst: f64,
    pub best: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reg: 1.0,
            worst: 1.0,
            best: 1.0,
        }
    }
}

/// Cosine annealing with linear warmup and periodic restarts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub t_warm: usize,
    pub t_freq: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lr_min: 1e-7,
            lr_max: 3e-3,
            t_warm: 4000,
            t_freq: 4000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_min.is_finite()) {
            return Err(Error::config("schedule.lr_min", "must be finite and >= 0"));
        }
        if !(self.lr_max.is_finite() && self.lr_max >= 0.0) {
            return Err(Error::config("schedule.lr_max", "must be finite and >= 0"));
        }
        if self.lr_min > self.lr_max {
            return Err(Error::config("schedule.lr_min", "must not exceed lr_max"));
        }
        if self.t_warm == 0 {
            return Err(Error::config("schedule.t_warm", "must be at least 1"));
        }
        if self.t_freq == 0 {
            return Err(Error::config("schedule.t_freq", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub t_in: usize,
    pub t_out: usize,
    pub split: (f64, f64, f64),
    pub model: ModelConfig,
    pub ablation: AblationConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Error quantile for the routing pseudo labels.
    pub q: f64,
    pub loss_weights: LossWeights,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    /// Global gradient-norm clipping threshold; 0 disables clipping.
    pub clip_norm: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_in: 12,
            t_out: 12,
            split: (0.7, 0.1, 0.2),
            model: ModelConfig::default(),
            ablation: AblationConfig::default(),
            epochs: 100,
            batch_size: 64,
            q: 0.7,
            loss_weights: LossWeights::default(),
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            patience: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ablation.validate()?;
        self.schedule.validate()?;
        if self.t_in == 0 || self.t_out == 0 {
            return Err(Error::config("t_in", "window lengths must be positive"));
        }
        if self.ablation.no_time_enhanced && self.t_in != self.t_out {
            return Err(Error::config(
                "ablation.no_time_enhanced",
                "temporal attention cannot change the horizon length; requires t_in == t_out",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::config("q", "must lie in (0, 1)"));
        }
        let w = &self.loss_weights;
        if [w.reg, w.worst, w.best].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("loss_weights", "weights must be finite and >= 0"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::config("adam", "betas must lie in [0, 1) and eps > 0"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("clip_norm", "must be >= 0"));
        }
        Ok(())
    }

    /// Effective best-route weight after the `worst_only` ablation.
    pub fn best_weight(&self) -> f64 {
        if self.ablation.worst_only {
            0.0
        } else {
            self.loss_weights.best
        }
    }
}

/// Parses a strict JSON document, applies `key.path=value` overrides and
/// re-validates the result against the schema of `T`.
pub fn load_with_overrides<T>(text: &str, overrides: &[String]) -> Result<T>
where
    T: serde::de::DeserializeOwned + Serialize,
{
    let mut doc: Value = serde_json::from_str(text)?;
    // round-trip through T first so unknown keys in the file are rejected and
    // defaults are filled in before overrides are applied
    let base: T = serde_json::from_value(doc)?;
    doc = serde_json::to_value(&base)?;
    for ov in overrides {
        apply_override(&mut doc, ov)?;
    }
    serde_json::from_value(doc).map_err(|e| Error::config("--set", e.to_string()))
}

/// Sets a dotted path in a JSON document. The value is parsed as JSON when
/// possible, otherwise taken as a string. The path must already exist.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key.path=value"))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(path, format!("`{}` is not an object", keys[..i].join("."))))?;
        let slot = obj
            .get_mut(*key)
            .ok_or_else(|| Error::config(path, "unknown key"))?;
        if i + 1 == keys.len() {
            let same_kind = matches!(
                (&*slot, &value),
                (Value::Bool(_), Value::Bool(_))
                    | (Value::Number(_), Value::Number(_))
                    | (Value::String(_), Value::String(_))
                    | (Value::Array(_), Value::Array(_))
                    | (Value::Object(_), Value::Object(_))
                    | (Value::Null, _)
            );
            if !same_kind {
                return Err(Error::config(
                    path,
                    format!("type mismatch: cannot assign {value} to {slot}"),
                ));
            }
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(Error::config(path, "empty key"))
}
