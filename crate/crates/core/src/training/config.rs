//! Training configuration and its flat `key = value` text form.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::diffcore::AdamConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Schedule {
    /// Task update, then adversarial update, on every batch.
    Alternating,
    /// One update of the summed objective.
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Alternation {
    /// Both stages on each batch before moving on.
    Batch,
    /// All task updates of an epoch, then all adversarial updates over the same batches.
    Epoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Sentences per batch, half from each domain.
    pub batch_size: usize,
    /// Weight of the opinion loss.
    pub rho: f64,
    /// Weight of the domain loss in the joint schedule.
    pub gamma: f64,
    /// Global gradient norm cap.
    pub clip: f64,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub schedule: Schedule,
    pub alternation: Alternation,
    /// One Adam state for both stages instead of one per stage.
    pub shared_adam: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            model: ModelConfig::default(),
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            rho: 1.0,
            gamma: 1.0,
            clip: 40.0,
            epochs: 30,
            seeds: vec![1, 2, 3, 4, 5],
            schedule: Schedule::Alternating,
            alternation: Alternation::Batch,
            shared_adam: false,
        }
    }
}

impl TrainingConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let nonneg = [
            ("lr", self.lr),
            ("rho", self.rho),
            ("gamma", self.gamma),
            ("clip", self.clip),
            ("adam_eps", self.adam_eps),
        ];
        if let Some((k, _)) = nonneg.iter().find(|(_, v)| !(*v >= 0.0)) {
            return Err(Error::Config(format!("{k} must be nonnegative")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must be in [0, 1)".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config("batch_size must be even and at least 2".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    /// Every addressable key with its current value, in declaration order.
    pub fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("plain data") {
            Value::Object(m) => m,
            _ => unreachable!("struct serializes to an object"),
        }
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut map = self.to_map();
        let current = map
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        let bad = |what: &str| Error::Config(format!("`{key}`: expected {what}, got `{raw}`"));
        let raw = raw.trim();
        let value = match current {
            Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
            Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad("an integer"))?),
            Value::Number(_) => Value::from(raw.parse::<f64>().map_err(|_| bad("a number"))?),
            Value::Array(_) => Value::Array(
                raw.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<u64>().map(Value::from).map_err(|_| bad("comma-separated integers")))
                    .collect::<Result<_>>()?,
            ),
            Value::String(_) if key == "mode" => Value::from(raw.parse::<ModelMode>()?.as_str()),
            Value::String(_) => Value::from(raw.to_ascii_uppercase()),
            _ => return Err(bad("a scalar")),
        };
        map.insert(key.to_string(), value);
        *self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    /// Apply a config file body: `key = value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Render in the same `key = value` form `apply_text` reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_map() {
            let v = match v {
                Value::String(s) => s,
                Value::Array(a) => a.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
                other => other.to_string(),
            };
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}
