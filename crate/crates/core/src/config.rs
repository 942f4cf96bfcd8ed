//! Flat `key = value` configuration text for [`TrainConfig`].
//!
//! One assignment per line, `#` starts a comment, unknown keys are errors.
//! The same text is embedded in checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::training::TrainConfig;

fn parse_value<V: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse::<V>()
        .map_err(|e| Error::Config(format!("line {line}: bad value '{value}' for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "line {line}: bad boolean '{value}' for {key}"
        ))),
    }
}

/// Parses config text, starting from defaults for keys that are absent.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected 'key = value', got '{content}'")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "lambda" => cfg.lambda = parse_value(key, value, line)?,
            "loss_weights" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| parse_value(key, p.trim(), line))
                    .collect::<Result<_>>()?;
                cfg.loss_weights = parts.try_into().map_err(|v: Vec<f64>| {
                    Error::Config(format!(
                        "line {line}: loss_weights needs 3 values, got {}",
                        v.len()
                    ))
                })?;
            }
            "learning_rate" => cfg.learning_rate = parse_value(key, value, line)?,
            "iterations" => cfg.iterations = parse_value(key, value, line)?,
            "batch_size" => cfg.batch_size = parse_value(key, value, line)?,
            "seed" => cfg.seed = parse_value(key, value, line)?,
            "variant" => cfg.variant = parse_value(key, value, line)?,
            "deterministic" => cfg.deterministic = parse_bool(key, value, line)?,
            "adam_beta1" => cfg.adam_beta1 = parse_value(key, value, line)?,
            "adam_beta2" => cfg.adam_beta2 = parse_value(key, value, line)?,
            "adam_eps" => cfg.adam_eps = parse_value(key, value, line)?,
            "pool" => cfg.pool = parse_value(key, value, line)?,
            "tv_norm" => cfg.tv_norm = parse_value(key, value, line)?,
            "tv_epsilon" => cfg.tv_epsilon = parse_value(key, value, line)?,
            "loss_level_order" => cfg.loss_level_order = parse_value(key, value, line)?,
            "checkpoint_every" => cfg.checkpoint_every = parse_value(key, value, line)?,
            _ => return Err(Error::Config(format!("line {line}: unknown key '{key}'"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Serializes every field; `parse_config(&config_text(c)) == c`.
pub fn config_text(cfg: &TrainConfig) -> String {
    let w = cfg.loss_weights;
    let mut s = String::new();
    let _ = writeln!(s, "lambda = {}", cfg.lambda);
    let _ = writeln!(s, "loss_weights = {},{},{}", w[0], w[1], w[2]);
    let _ = writeln!(s, "learning_rate = {}", cfg.learning_rate);
    let _ = writeln!(s, "iterations = {}", cfg.iterations);
    let _ = writeln!(s, "batch_size = {}", cfg.batch_size);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "variant = {}", cfg.variant.as_str());
    let _ = writeln!(s, "deterministic = {}", cfg.deterministic);
    let _ = writeln!(s, "adam_beta1 = {}", cfg.adam_beta1);
    let _ = writeln!(s, "adam_beta2 = {}", cfg.adam_beta2);
    let _ = writeln!(s, "adam_eps = {}", cfg.adam_eps);
    let _ = writeln!(s, "pool = {}", cfg.pool.as_str());
    let _ = writeln!(s, "tv_norm = {}", cfg.tv_norm.as_str());
    let _ = writeln!(s, "tv_epsilon = {}", cfg.tv_epsilon);
    let _ = writeln!(s, "loss_level_order = {}", cfg.loss_level_order.as_str());
    let _ = writeln!(s, "checkpoint_every = {}", cfg.checkpoint_every);
    s
}
