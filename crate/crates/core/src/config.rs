//! Plain `key = value` configuration files.
//!
//! Lines that are empty or start with `#` are skipped; everything else
//! must be `key = value`. Unknown or duplicate keys are errors — a config
//! that parses is a config that was fully understood.

use std::collections::BTreeMap;
use std::path::Path;

use crate::attention::{AttentionKind, XcaMode};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Structure};
use crate::train::TrainConfig;

#[derive(Clone, Debug)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn parse_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("cannot read {}: {e}", path.display())))?;
    parse_str(&text)
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected an integer, got '{value}'")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected an integer, got '{value}'")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true|false, got '{value}'"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse_usize(key, part.trim()))
        .collect()
}

pub fn parse_str(text: &str) -> Result<FileConfig> {
    let mut pairs: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!(
                "line {}: empty key or value",
                lineno + 1
            )));
        }
        if pairs.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("duplicate key '{key}'")));
        }
    }

    // structure and patch pick the preset; every other key overrides it
    let structure = match pairs.remove("structure") {
        Some(v) => Structure::parse(&v)?,
        None => Structure::Pyramid,
    };
    let kind = match pairs.remove("attention.kind") {
        Some(v) => AttentionKind::parse(&v)?,
        None => AttentionKind::Softmax,
    };
    let patch_size = match pairs.remove("patch_size") {
        Some(v) => parse_usize("patch_size", &v)?,
        None => match structure {
            Structure::Pyramid => 4,
            Structure::Columnar => 16,
        },
    };
    let mut model = match structure {
        Structure::Pyramid => ModelConfig::pyramid(patch_size, kind),
        Structure::Columnar => ModelConfig::columnar(patch_size, kind),
    };
    let mut train = TrainConfig::default();

    for (key, value) in pairs {
        match key.as_str() {
            "image_size" => model.image_size = parse_usize(&key, &value)?,
            "dims" => model.stage_dims = parse_list(&key, &value)?,
            "depths" => model.stage_depths = parse_list(&key, &value)?,
            "head_dim" => {
                model.head_dim = parse_usize(&key, &value)?;
                model.attention.head_dim = model.head_dim;
            }
            "mlp_ratio" => model.mlp_ratio = parse_usize(&key, &value)?,
            "num_classes" => model.num_classes = parse_usize(&key, &value)?,
            "seed" => model.seed = parse_u64(&key, &value)?,
            "lpi" => model.lpi_enabled = parse_bool(&key, &value)?,
            "attention.m_ratio" => model.attention.m_ratio = parse_f64(&key, &value)?,
            "attention.r" => model.attention.r = Some(parse_usize(&key, &value)?),
            "attention.w" => model.attention.w = parse_usize(&key, &value)?,
            "attention.xca_mode" => model.attention.xca_mode = XcaMode::parse(&value)?,
            "train.samples" => train.samples = parse_usize(&key, &value)?,
            "train.epochs" => train.epochs = parse_usize(&key, &value)?,
            "train.batch" => train.batch = parse_usize(&key, &value)?,
            "train.lr" => train.base_lr = parse_f64(&key, &value)?,
            "train.wd" => train.weight_decay = parse_f64(&key, &value)?,
            "train.warmup" => train.warmup_epochs = parse_usize(&key, &value)?,
            "train.cooldown" => train.cooldown_epochs = parse_usize(&key, &value)?,
            "train.target_acc" => train.target_acc = parse_f64(&key, &value)?,
            other => {
                return Err(Error::Config(format!("unknown key '{other}'")));
            }
        }
    }
    train.seed = model.seed;
    model.validate()?;
    train.validate()?;
    Ok(FileConfig { model, train })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let text = "\
# tiny run
structure = pyramid
image_size = 32
patch_size = 4
dims = 16, 32, 64, 128
depths = 1, 1, 1, 1
head_dim = 16
attention.kind = la
attention.m_ratio = 0.25
num_classes = 2
seed = 7
train.epochs = 5
train.batch = 16
";
        let cfg = parse_str(text).unwrap();
        assert_eq!(cfg.model.stage_dims, vec![16, 32, 64, 128]);
        assert_eq!(cfg.model.attention.kind, AttentionKind::Linformer);
        assert_eq!(cfg.model.seed, 7);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.batch, 16);
    }

    #[test]
    fn rejects_unknown_key() {
        let err = parse_str("learning_rate = 0.1").unwrap_err();
        assert!(format!("{err}").contains("unknown key"), "{err}");
    }

    #[test]
    fn rejects_duplicate_key() {
        assert!(parse_str("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn rejects_bad_value() {
        assert!(parse_str("patch_size = four").is_err());
    }

    #[test]
    fn default_is_valid() {
        let cfg = parse_str("").unwrap();
        assert_eq!(cfg.model.structure, Structure::Pyramid);
        assert_eq!(cfg.model.patch_size, 4);
        assert_eq!(cfg.model.num_classes, 1000);
    }
}
