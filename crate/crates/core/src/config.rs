//! `key = value` config files.
//!
//! Bare keys name [`TrainConfig`](crate::metalearn::TrainConfig) fields.
//! Dotted keys address the other sections of a [`BenchmarkConfig`]:
//! `pipeline.clusters`, `pipeline.corpus.docs`, `shift.rho`, `tune.lr`, ...
//! Blank lines and lines starting with `#` are skipped. List values are
//! comma separated.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::harness::BenchmarkConfig;

pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", no + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse(format!("line {}: empty key", no + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn scalar(raw: &str, like: &Value, key: &str) -> Result<Value> {
    let bad = || Error::Parse(format!("{key}: cannot use {raw:?} here"));
    match like {
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| bad()),
        Value::Number(n) if n.is_f64() => raw
            .parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map(Value::Number)
            .ok_or_else(bad),
        Value::Number(_) => raw.parse::<u64>().map(|v| Value::Number(v.into())).map_err(|_| bad()),
        _ => Err(bad()),
    }
}

fn convert(raw: &str, like: &Value, key: &str) -> Result<Value> {
    match like {
        Value::Array(items) => {
            let proto = items
                .first()
                .ok_or_else(|| Error::Parse(format!("{key}: list of unknown element type")))?;
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| scalar(s, proto, key))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        Value::Null => {
            if raw == "null" {
                Ok(Value::Null)
            } else {
                serde_json::from_str(raw).map_err(|_| Error::Parse(format!("{key}: cannot parse {raw:?}")))
            }
        }
        other => scalar(raw, other, key),
    }
}

/// Applies `pairs` on top of `base`. Unknown keys are errors.
pub fn apply(base: &BenchmarkConfig, pairs: &[(String, String)]) -> Result<BenchmarkConfig> {
    let mut root = serde_json::to_value(base)?;
    for (key, raw) in pairs {
        let path = if key.contains('.') {
            key.clone()
        } else {
            format!("train.{key}")
        };
        let mut slot = &mut root;
        for part in path.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Parse(format!("unknown config key {key:?}")))?;
        }
        if slot.is_object() {
            return Err(Error::Parse(format!("{key:?} names a section, not a value")));
        }
        *slot = convert(raw, slot, key)?;
    }
    serde_json::from_value(root).map_err(|e| Error::Parse(format!("config: {e}")))
}

pub fn load(path: impl AsRef<Path>) -> Result<BenchmarkConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    apply(&BenchmarkConfig::default(), &parse_lines(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metalearn::CosineSource;
    use crate::optim::Optimizer;
    use crate::taskgen::TaskFormat;

    fn with(text: &str) -> Result<BenchmarkConfig> {
        apply(&BenchmarkConfig::default(), &parse_lines(text)?)
    }

    #[test]
    fn bare_keys_set_train_fields() {
        let cfg = with("inner_lr = 0.05\nmax_steps=7\n# comment\n\ncurriculum = false\ncosine_source = raw\noptimizer=adam").unwrap();
        assert_eq!(cfg.train.inner_lr, 0.05);
        assert_eq!(cfg.train.max_steps, 7);
        assert!(!cfg.train.curriculum);
        assert_eq!(cfg.train.cosine_source, CosineSource::Raw);
        assert_eq!(cfg.train.optimizer, Optimizer::Adam);
    }

    #[test]
    fn dotted_keys_reach_nested_sections() {
        let cfg = with("pipeline.corpus.docs = 50\nshift.rho = 0\ntune.steps = 12\npipeline.formats = sp, ss").unwrap();
        assert_eq!(cfg.pipeline.corpus.docs, 50);
        assert_eq!(cfg.shift.rho, 0.0);
        assert_eq!(cfg.tune.steps, 12);
        assert_eq!(cfg.pipeline.formats, [TaskFormat::SentencePair, TaskFormat::SingleSentence]);
    }

    #[test]
    fn integer_values_for_float_fields_are_fine() {
        assert_eq!(with("outer_lr = 1").unwrap().train.outer_lr, 1.0);
    }

    #[test]
    fn errors() {
        assert!(with("no_such_field = 1").is_err());
        assert!(with("pipeline = 3").is_err());
        assert!(with("max_steps = -1").is_err());
        assert!(with("curriculum = maybe").is_err());
        assert!(with("optimizer = rmsprop").is_err());
        assert!(with("just a line").is_err());
        assert!(with("= 3").is_err());
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(with("").unwrap(), BenchmarkConfig::default());
    }
}
