//! Config resolution: built-in defaults < `--config` file < `--set`/flags.

use std::fs;
use std::path::{Path, PathBuf};

use mmea_core::kg::SyntheticConfig;
use mmea_core::train::TrainConfig;

use crate::Failure;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

/// `key = value` lines with `#` comments, in file order.
pub fn parse_kv(text: &str, origin: &str) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Failure::Config(format!(
                "{origin}:{}: expected key = value, found {line:?}",
                n + 1
            ))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_set(s: &str) -> Result<(String, String), Failure> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Explicit assignments from a config file and `--set` flags, file first.
pub fn explicit(
    config: Option<&PathBuf>,
    sets: &[String],
) -> Result<Vec<(String, String)>, Failure> {
    let mut kv = match config {
        Some(p) => parse_kv(&read(p)?, &p.display().to_string())?,
        None => Vec::new(),
    };
    for s in sets {
        kv.push(parse_set(s)?);
    }
    Ok(kv)
}

pub fn train_config(kv: &[(String, String)]) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::default();
    for (k, v) in kv {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub const SYNTH_KEYS: [&str; 12] = [
    "entities",
    "relations",
    "degree",
    "text_attrs",
    "image_attrs",
    "gap_level",
    "image_gap_level",
    "missing_rate",
    "noise",
    "text_dim",
    "image_dim",
    "seed",
];

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, Failure> {
    v.parse()
        .map_err(|_| Failure::Config(format!("invalid value {v:?} for synthetic key `{key}`")))
}

/// `lo-hi` inclusive range.
fn range(key: &str, v: &str) -> Result<(usize, usize), Failure> {
    let (lo, hi) = v
        .split_once('-')
        .ok_or_else(|| Failure::Config(format!("`{key}` expects lo-hi, got {v:?}")))?;
    Ok((value(key, lo.trim())?, value(key, hi.trim())?))
}

pub fn synth_set(cfg: &mut SyntheticConfig, key: &str, v: &str) -> Result<(), Failure> {
    match key {
        "entities" => cfg.n_entities = value(key, v)?,
        "relations" => cfg.n_relation_types = value(key, v)?,
        "degree" => cfg.avg_degree = value(key, v)?,
        "text_attrs" => cfg.text_attr_count_range = range(key, v)?,
        "image_attrs" => cfg.image_attr_count_range = range(key, v)?,
        "gap_level" => cfg.gap_level = value(key, v)?,
        "image_gap_level" => cfg.image_gap_level = Some(value(key, v)?),
        "missing_rate" => cfg.missing_modality_rate = value(key, v)?,
        "noise" => cfg.feature_noise_sigma = value(key, v)?,
        "text_dim" => cfg.text_dim = value(key, v)?,
        "image_dim" => cfg.image_dim = value(key, v)?,
        "seed" | "rng_seed" => cfg.rng_seed = value(key, v)?,
        other => return Err(Failure::Config(format!("unknown synthetic key `{other}`"))),
    }
    Ok(())
}

pub fn synth_kv(cfg: &SyntheticConfig) -> Vec<(String, String)> {
    let (tl, th) = cfg.text_attr_count_range;
    let (il, ih) = cfg.image_attr_count_range;
    let vals = [
        cfg.n_entities.to_string(),
        cfg.n_relation_types.to_string(),
        cfg.avg_degree.to_string(),
        format!("{tl}-{th}"),
        format!("{il}-{ih}"),
        cfg.gap_level.to_string(),
        cfg.image_gap_level.unwrap_or(cfg.gap_level).to_string(),
        cfg.missing_modality_rate.to_string(),
        cfg.feature_noise_sigma.to_string(),
        cfg.text_dim.to_string(),
        cfg.image_dim.to_string(),
        cfg.rng_seed.to_string(),
    ];
    SYNTH_KEYS
        .iter()
        .zip(vals)
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

pub fn train_kv(cfg: &TrainConfig) -> Vec<(String, String)> {
    TrainConfig::KEYS
        .iter()
        .map(|k| (k.to_string(), cfg.get(k).expect("listed key")))
        .collect()
}

pub fn kv_text(kv: &[(String, String)]) -> String {
    kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
