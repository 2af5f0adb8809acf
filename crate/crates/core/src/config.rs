//! Flat, namespaced run configuration (module.key), JSON on disk.
//!
//! Every tunable constant lives in one registry with a doc string and a
//! default, so `--help` coverage and unknown-key rejection both fall out of
//! walking the same table.

use crate::error::{Error, Result};
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigValue {
    Num(f64),
    Int(i64),
    Bool(bool),
    Str(String),
}

impl ConfigValue {
    fn kind(&self) -> &'static str {
        match self {
            ConfigValue::Num(_) => "number",
            ConfigValue::Int(_) => "integer",
            ConfigValue::Bool(_) => "bool",
            ConfigValue::Str(_) => "string",
        }
    }

    fn to_json(&self) -> Value {
        match self {
            ConfigValue::Num(v) => Value::from(*v),
            ConfigValue::Int(v) => Value::from(*v),
            ConfigValue::Bool(v) => Value::from(*v),
            ConfigValue::Str(v) => Value::from(v.clone()),
        }
    }
}

pub struct KeySpec {
    pub key: &'static str,
    pub doc: &'static str,
    pub default: ConfigValue,
}

macro_rules! keys {
    ($(($k:literal, $v:expr, $d:literal)),* $(,)?) => {
        vec![$(KeySpec { key: $k, doc: $d, default: $v }),*]
    };
}

/// The full key registry. Order is the order `--help` prints.
pub fn registry() -> Vec<KeySpec> {
    use ConfigValue::*;
    keys![
        ("run.seed", Int(0), "Root seed; every module's rng is split from it"),
        ("run.out_dir", Str("out".into()), "Directory artifacts are written into (overridden by --out)"),
        ("model.d_model", Int(64), "Embedding width"),
        ("model.n_layers", Int(2), "Transformer blocks"),
        ("model.n_heads", Int(2), "Attention heads; must divide d_model"),
        ("model.d_ff", Int(128), "Gated MLP hidden width"),
        ("model.context", Int(64), "Maximum sequence length"),
        ("model.bits", Int(4), "Quantizer bit width b; SNN T = 2^(b-1)-1"),
        ("model.eps", Num(1e-5), "RMSNorm epsilon"),
        ("model.schedule", Str("strided".into()), "Attention spike schedule: strided or front_loaded"),
        ("train.corpus", Str("crates/core/data/corpus.txt".into()), "Byte-level training corpus path"),
        ("train.lr", Num(0.05), "SGD learning rate"),
        ("train.momentum", Num(0.9), "SGD momentum"),
        ("train.epochs", Int(3), "Training epochs"),
        ("train.batch", Int(8), "Sequences per step"),
        ("train.steps_per_epoch", Int(60), "Optimizer steps per epoch"),
        ("train.seq_len", Int(64), "Training sequence length (<= model.context)"),
        ("train.init_scale", Num(0.08), "Gaussian init stddev for weights"),
        ("train.calibration_batches", Int(8), "Batches used to freeze per-site activation scales"),
        ("train.resume", Str("".into()), "Optional checkpoint to resume from"),
        ("fit.steps", Int(64), "CustomNeuron simulation window T_n"),
        ("fit.square_segments", Int(32), "Square bank segment count"),
        ("fit.square_power", Num(1.5), "Square bank power-law partition exponent"),
        ("fit.sqrt_segments", Int(32), "Sqrt bank segment count (log partition)"),
        ("fit.samples", Int(1024), "Fit sample budget per bank"),
        ("fit.square_mse_ceiling", Num(1e-2), "Square bank MSE gate"),
        ("fit.sqrt_mse_ceiling", Num(1e-2), "Sqrt bank weighted-MSE gate"),
        ("fit.silu_mse_ceiling", Num(1e-2), "SiLU bank MSE gate"),
        ("convert.ann_checkpoint", Str("out/ann.btsf".into()), "ANN checkpoint to convert"),
        ("audit.ann_checkpoint", Str("out/ann.btsf".into()), "ANN side of the equivalence audit"),
        ("audit.snn_checkpoint", Str("out/snn.btsf".into()), "SNN side of the equivalence audit"),
        ("audit.tokens", Int(1000), "Token stream length for the argmax-agreement probe"),
        ("stdp.checkpoint", Str("out/snn.btsf".into()), "SNN checkpoint to fine-tune"),
        ("stdp.steps", Int(200), "Fine-tune steps"),
        ("stdp.seq_len", Int(32), "Fine-tune sequence length"),
        ("stdp.a_plus", Num(1.0), "STDP potentiation amplitude A+"),
        ("stdp.a_minus", Num(1.0), "STDP depression amplitude A-"),
        ("stdp.tau_plus", Num(4.0), "Potentiation time constant (steps)"),
        ("stdp.tau_minus", Num(4.0), "Depression time constant (steps)"),
        ("stdp.beta", Num(1.0), "Global-modulation sigmoid slope"),
        ("stdp.baseline_window", Int(32), "Loss-baseline ring buffer length"),
        ("stdp.eta_w", Num(1e-4), "Weight plasticity rate"),
        ("stdp.eta_theta", Num(1e-4), "Threshold plasticity rate"),
        ("stdp.eta_alpha", Num(1e-4), "Threshold-growth plasticity rate"),
        ("stdp.eta_r", Num(1e-4), "Decay-rate plasticity rate"),
        ("stdp.eta_grad", Num(0.0), "Task-gradient rate for the surrogate eta' terms (0 disables)"),
        ("stdp.lambda_w", Num(1.0), "Composite loss: tagged weight-mismatch term weight"),
        ("stdp.lambda_theta", Num(1.0), "Composite loss: spike-count homeostasis term weight"),
        ("stdp.lambda_alpha", Num(1.0), "Composite loss: membrane-target term weight"),
        ("stdp.lambda_r", Num(1.0), "Composite loss: resting-potential term weight"),
        ("stdp.lambda_c", Num(1.0), "Composite loss: synaptic-sum term weight"),
        ("stdp.lambda_t", Num(1.0), "Composite loss: expected first-spike time term weight"),
        ("stdp.lambda_task", Num(1.0), "Composite loss: task term weight"),
        ("stdp.lambda_reg", Num(1.0), "Composite loss: weight regularizer term weight"),
        ("stdp.lambda_scale", Num(1.0), "Surrogate sigmoid width for spike probability"),
        ("stdp.target_rate_frac", Num(0.2), "Target spike count as a fraction of T"),
        ("stdp.target_time_frac", Num(0.5), "Target first-spike step as a fraction of T"),
        ("stdp.v_target", Num(0.0), "Membrane potential target"),
        ("stdp.v_rest", Num(0.0), "Resting membrane potential"),
        ("stdp.ema", Num(0.99), "Activity/loss EMA factor"),
        ("stdp.homeostatic_sign_flip", Bool(false), "Flip the threshold-update sign to the homeostatic direction"),
        ("generate.checkpoint", Str("out/ann.btsf".into()), "Checkpoint to decode with"),
        ("generate.prompt", Str("the ".into()), "Prompt text (bytes)"),
        ("generate.max_tokens", Int(64), "Tokens to emit"),
        ("generate.temperature", Num(0.0), "Sampling temperature; 0 is greedy"),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    map: BTreeMap<String, ConfigValue>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let map = registry()
            .into_iter()
            .map(|k| (k.key.to_string(), k.default))
            .collect();
        RunConfig { map }
    }
}

impl RunConfig {
    /// Defaults overlaid with a flat JSON object; unknown keys and type
    /// mismatches are rejected by name.
    pub fn from_json(v: &Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Config("config root must be a JSON object".into()))?;
        let mut cfg = RunConfig::default();
        for (key, val) in obj {
            let slot = cfg
                .map
                .get_mut(key)
                .ok_or_else(|| Error::Config(format!("unknown config key {}", key)))?;
            let parsed = match (&slot, val) {
                (ConfigValue::Num(_), Value::Number(n)) => ConfigValue::Num(
                    n.as_f64()
                        .ok_or_else(|| Error::Config(format!("{} not representable", key)))?,
                ),
                (ConfigValue::Int(_), Value::Number(n)) => ConfigValue::Int(
                    n.as_i64()
                        .ok_or_else(|| Error::Config(format!("{} must be an integer", key)))?,
                ),
                (ConfigValue::Bool(_), Value::Bool(b)) => ConfigValue::Bool(*b),
                (ConfigValue::Str(_), Value::String(s)) => ConfigValue::Str(s.clone()),
                _ => {
                    return Err(Error::Config(format!(
                        "{} expects a {}, got {}",
                        key,
                        slot.kind(),
                        match val {
                            Value::Null => "null",
                            Value::Bool(_) => "bool",
                            Value::Number(_) => "number",
                            Value::String(_) => "string",
                            Value::Array(_) => "array",
                            Value::Object(_) => "object",
                        }
                    )))
                }
            };
            *slot = parsed;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("config {}: {}", path.display(), e)))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {}", path.display(), e)))?;
        Self::from_json(&v)
    }

    pub fn set(&mut self, key: &str, value: ConfigValue) -> Result<()> {
        let slot = self
            .map
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown config key {}", key)))?;
        if slot.kind() != value.kind() {
            return Err(Error::Config(format!(
                "{} expects a {}, got {}",
                key,
                slot.kind(),
                value.kind()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn num(&self, key: &str) -> Result<f64> {
        match self.map.get(key) {
            Some(ConfigValue::Num(v)) => Ok(*v),
            Some(ConfigValue::Int(v)) => Ok(*v as f64),
            Some(other) => Err(Error::Config(format!("{} is a {}", key, other.kind()))),
            None => Err(Error::Config(format!("unknown config key {}", key))),
        }
    }

    pub fn int(&self, key: &str) -> Result<i64> {
        match self.map.get(key) {
            Some(ConfigValue::Int(v)) => Ok(*v),
            Some(other) => Err(Error::Config(format!("{} is a {}", key, other.kind()))),
            None => Err(Error::Config(format!("unknown config key {}", key))),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.int(key)?;
        usize::try_from(v).map_err(|_| Error::Config(format!("{} must be >= 0", key)))
    }

    pub fn boolean(&self, key: &str) -> Result<bool> {
        match self.map.get(key) {
            Some(ConfigValue::Bool(v)) => Ok(*v),
            Some(other) => Err(Error::Config(format!("{} is a {}", key, other.kind()))),
            None => Err(Error::Config(format!("unknown config key {}", key))),
        }
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        match self.map.get(key) {
            Some(ConfigValue::Str(v)) => Ok(v.as_str()),
            Some(other) => Err(Error::Config(format!("{} is a {}", key, other.kind()))),
            None => Err(Error::Config(format!("unknown config key {}", key))),
        }
    }

    /// Canonical JSON form (sorted keys), used when embedding the config in
    /// a checkpoint.
    pub fn to_json(&self) -> Value {
        let mut m = serde_json::Map::new();
        for (k, v) in &self.map {
            m.insert(k.clone(), v.to_json());
        }
        Value::Object(m)
    }
}

/// Every registered key name, for doc-coverage checks.
pub fn registry_keys() -> Vec<&'static str> {
    registry().iter().map(|k| k.key).collect()
}

/// One line per key for `--help`; the doc-coverage test walks this.
pub fn help_text() -> String {
    let mut s = String::from("Config keys (JSON object, flat module.key names):\n");
    for k in registry() {
        let default = match &k.default {
            ConfigValue::Str(v) => format!("\"{}\"", v),
            other => {
                let j = other.to_json();
                j.to_string()
            }
        };
        s.push_str(&format!("  {:34} {} [default: {}]\n", k.key, k.doc, default));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_cover_registry() {
        let cfg = RunConfig::default();
        for k in registry() {
            assert_eq!(cfg.map.get(k.key), Some(&k.default));
        }
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let e = RunConfig::from_json(&json!({"model.banana": 3})).unwrap_err();
        assert!(format!("{}", e).contains("model.banana"));
    }

    #[test]
    fn type_mismatch_rejected() {
        assert!(RunConfig::from_json(&json!({"model.bits": "four"})).is_err());
        assert!(RunConfig::from_json(&json!({"train.lr": true})).is_err());
        // Float into an integer slot is a mismatch too.
        assert!(RunConfig::from_json(&json!({"model.bits": 4.5})).is_err());
    }

    #[test]
    fn override_applies() {
        let cfg = RunConfig::from_json(&json!({"model.bits": 8, "train.lr": 0.01})).unwrap();
        assert_eq!(cfg.int("model.bits").unwrap(), 8);
        assert_eq!(cfg.num("train.lr").unwrap(), 0.01);
        assert_eq!(cfg.int("model.d_model").unwrap(), 64);
    }

    #[test]
    fn num_getter_accepts_int_slots() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.num("model.bits").unwrap(), 4.0);
    }

    #[test]
    fn help_documents_every_key() {
        let h = help_text();
        for k in registry() {
            assert!(h.contains(k.key), "missing {}", k.key);
            assert!(!k.doc.is_empty(), "{} has no doc", k.key);
        }
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::from_json(&json!({"model.bits": 6})).unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn registry_keys_unique_and_namespaced() {
        let keys: Vec<_> = registry().into_iter().map(|k| k.key).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), keys.len());
        for k in keys {
            assert!(k.contains('.'), "{} not namespaced", k);
        }
    }
}
