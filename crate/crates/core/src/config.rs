//! Flat `key = value` overrides on top of a canonical setting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::DeskPreset;
use crate::patchgen::{Mixing, Strategy};
use crate::tracker::TrackerConfig;
use crate::trainer::{DistillConfig, Trainable};

/// Keys accepted by [`apply_override`].
pub const KEYS: &[&str] = &[
    "patch_strategy",
    "batch_mixing",
    "concat_horizontal",
    "tcl_trainable",
    "bbe_trainable",
    "lr_tcl",
    "lr_bbe",
    "lr_scale",
    "lambda",
    "mu",
    "nu",
    "epochs",
    "batch_size",
    "samples_per_epoch",
    "lr_decay_factor",
    "lr_decay_period",
    "seed",
    "patch_size",
    "views_per_sample",
    "jitter_center",
    "jitter_scale",
];

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::BadValue { key: key.to_string(), reason: reason.into() }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| bad(key, format!("{v:?}: {e}")))
}

fn finite(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(bad(key, "must be finite"))
    }
}

fn trainable(key: &str, v: &str) -> Result<Trainable> {
    Trainable::parse(v.trim()).ok_or_else(|| bad(key, format!("unknown value {v:?}")))
}

pub fn parse_mixing(key: &str, v: &str) -> Result<Mixing> {
    match v.trim() {
        "ref_tir" => Ok(Mixing::RefTir),
        "ref_rgb" => Ok(Mixing::RefRgb),
        "mixed" => Ok(Mixing::Mixed),
        _ => Err(bad(key, format!("unknown value {v:?}"))),
    }
}

/// Applies one override and records it on the config.
pub fn apply_override(cfg: &mut DistillConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "patch_strategy" => {
            cfg.patch_strategy = Strategy::parse(value.trim()).ok_or_else(|| bad(key, format!("unknown value {value:?}")))?
        }
        "batch_mixing" => cfg.batch_mixing.mixing = parse_mixing(key, value)?,
        "concat_horizontal" => cfg.batch_mixing.concat_horizontal = num(key, value)?,
        "tcl_trainable" => cfg.tcl_trainable = trainable(key, value)?,
        "bbe_trainable" => cfg.bbe_trainable = trainable(key, value)?,
        "lr_tcl" => cfg.lr_tcl = finite(key, value)?,
        "lr_bbe" => cfg.lr_bbe = finite(key, value)?,
        "lr_scale" => cfg.lr_scale = finite(key, value)?,
        "lambda" => cfg.lambda = finite(key, value)?,
        "mu" => cfg.mu = finite(key, value)?,
        "nu" => cfg.nu = finite(key, value)?,
        "epochs" => cfg.epochs = num(key, value)?,
        "batch_size" => cfg.batch_size = num(key, value)?,
        "samples_per_epoch" => cfg.samples_per_epoch = num(key, value)?,
        "lr_decay_factor" => cfg.lr_decay_factor = finite(key, value)?,
        "lr_decay_period" => cfg.lr_decay_period = num(key, value)?,
        "seed" => cfg.seed = num(key, value)?,
        "patch_size" => cfg.patch_size = num(key, value)?,
        "views_per_sample" => cfg.views_per_sample = num(key, value)?,
        "jitter_center" => cfg.jitter.center = finite(key, value)?,
        "jitter_scale" => cfg.jitter.log_scale = finite(key, value)?,
        _ => return Err(Error::UnknownKey(key.to_string())),
    }
    cfg.overrides.push(format!("{key}={}", value.trim()));
    Ok(())
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(bad(s, "expected key=value")),
    }
}

/// Reads a flat TOML table into string values. Nested tables and arrays are
/// rejected with the offending key.
pub fn load_flat(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let table: toml::Table =
        text.parse().map_err(|e: toml::de::Error| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
    table
        .into_iter()
        .map(|(k, v)| {
            let s = match v {
                toml::Value::String(s) => s,
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => format!("{f:?}"),
                toml::Value::Boolean(b) => b.to_string(),
                _ => return Err(bad(&k, "expected a scalar value")),
            };
            Ok((k, s))
        })
        .collect()
}

pub fn apply_all<'a>(cfg: &mut DistillConfig, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
    for (k, v) in pairs {
        apply_override(cfg, k, v)?;
    }
    Ok(())
}

/// Keys accepted by [`apply_preset_override`].
pub const PRESET_KEYS: &[&str] = &[
    "seed",
    "epochs",
    "n_pairs",
    "pair_image_size",
    "pair_object_min",
    "pair_object_max",
    "pair_center_spread",
    "pair_distractor_prob",
    "tir_blur",
    "tir_noise",
    "tir_gain",
    "detection_jitter",
    "n_train_sequences",
    "n_eval_sequences",
    "n_frames",
    "seq_image_size",
    "pretrain_epochs",
    "pretrain_examples",
    "pretrain_lr",
    "pretrain_batch_size",
    "pretrain_loss_threshold",
    "search_scale",
    "search_side",
    "adapt_steps",
    "n_jitter",
    "max_scale_change",
];

/// Applies one override to the desk preset. `seed` reseeds every stage.
pub fn apply_preset_override(p: &mut DeskPreset, key: &str, value: &str) -> Result<()> {
    match key {
        "seed" => *p = p.clone().with_seed(num(key, value)?),
        "epochs" => p.epochs = num(key, value)?,
        "n_pairs" => p.pairs.n_pairs = num(key, value)?,
        "pair_image_size" => p.pairs.image_size = num(key, value)?,
        "pair_object_min" => p.pairs.object_size_range.0 = finite(key, value)?,
        "pair_object_max" => p.pairs.object_size_range.1 = finite(key, value)?,
        "pair_center_spread" => p.pairs.center_spread = Some(finite(key, value)?),
        "pair_distractor_prob" => p.pairs.distractor_prob = finite(key, value)?,
        "tir_blur" | "tir_noise" | "tir_gain" => {
            let t = &mut p.pairs.tir_transform;
            match key {
                "tir_blur" => t.blur_radius = num(key, value)?,
                "tir_noise" => t.noise_scale = finite(key, value)?,
                _ => {
                    let g = finite(key, value)?;
                    t.weights = [0.299, 0.587, 0.114].map(|w| w * g);
                }
            }
            let t = *t;
            p.train_sequences.tir_transform = t;
            p.eval_sequences.tir_transform = t;
        }
        "detection_jitter" => p.detection_jitter = finite(key, value)?,
        "n_train_sequences" => p.train_sequences.n_sequences = num(key, value)?,
        "n_eval_sequences" => p.eval_sequences.n_sequences = num(key, value)?,
        "n_frames" => {
            let n = num(key, value)?;
            p.train_sequences.n_frames = n;
            p.eval_sequences.n_frames = n;
        }
        "seq_image_size" => {
            let n = num(key, value)?;
            p.train_sequences.image_size = n;
            p.eval_sequences.image_size = n;
        }
        "pretrain_epochs" => p.pretrain.epochs = num(key, value)?,
        "pretrain_examples" => p.pretrain.n_examples = num(key, value)?,
        "pretrain_lr" => p.pretrain.lr = finite(key, value)?,
        "pretrain_batch_size" => p.pretrain.batch_size = num(key, value)?,
        "pretrain_loss_threshold" => p.pretrain.loss_threshold = finite(key, value)?,
        _ => return apply_tracker_override(&mut p.tracker, key, value),
    }
    Ok(())
}

pub fn apply_tracker_override(t: &mut TrackerConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "search_scale" => t.search_scale = finite(key, value)?,
        "search_side" => t.search_side = num(key, value)?,
        "adapt_steps" => t.adapt_steps = num(key, value)?,
        "n_jitter" => t.n_jitter = num(key, value)?,
        "max_scale_change" => t.max_scale_change = finite(key, value)?,
        "seed" => t.seed = num(key, value)?,
        _ => return Err(Error::UnknownKey(key.to_string())),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::config_from_setting;

    #[test]
    fn every_key_is_accepted() {
        let base = config_from_setting("D3").unwrap();
        let sample = |k: &str| match k {
            "patch_strategy" => "detection",
            "batch_mixing" => "ref_rgb",
            "concat_horizontal" => "false",
            "tcl_trainable" | "bbe_trainable" => "test",
            "lr_tcl" | "lr_bbe" | "lr_scale" | "lambda" | "mu" | "nu" | "lr_decay_factor" | "jitter_center" | "jitter_scale" => {
                "0.125"
            }
            _ => "7",
        };
        for k in KEYS {
            let mut c = base.clone();
            apply_override(&mut c, k, sample(k)).unwrap();
            assert_ne!(c, base, "{k}");
            assert_eq!(c.overrides, vec![format!("{k}={}", sample(k))]);
        }
    }

    #[test]
    fn errors_name_the_key() {
        let mut c = config_from_setting("A1").unwrap();
        match apply_override(&mut c, "lr_tlc", "1") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "lr_tlc"),
            other => panic!("{other:?}"),
        }
        match apply_override(&mut c, "epochs", "ten") {
            Err(Error::BadValue { key, .. }) => assert_eq!(key, "epochs"),
            other => panic!("{other:?}"),
        }
        assert!(c.overrides.is_empty());
    }

    #[test]
    fn flat_toml() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "epochs = 3\nlr_scale = 2.5\nconcat_horizontal = false\npatch_strategy = \"detection\"\n").unwrap();
        let m = load_flat(&p).unwrap();
        let mut c = config_from_setting("D3").unwrap();
        apply_all(&mut c, m.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!((c.epochs, c.lr_scale, c.batch_mixing.concat_horizontal), (3, 2.5, false));
        fs::write(&p, "[x]\na = 1\n").unwrap();
        assert!(matches!(load_flat(&p), Err(Error::BadValue { key, .. }) if key == "x"));
    }

    #[test]
    fn preset_keys() {
        for k in PRESET_KEYS {
            let mut p = DeskPreset::default();
            apply_preset_override(&mut p, k, "3").unwrap();
            assert_ne!(p, DeskPreset::default(), "{k}");
        }
        let mut p = DeskPreset::default();
        assert!(matches!(apply_preset_override(&mut p, "lr_bbe", "1"), Err(Error::UnknownKey(_))));
    }

    #[test]
    fn assignment() {
        assert_eq!(parse_assignment(" a = b=c").unwrap(), ("a".into(), "b=c".into()));
        assert!(parse_assignment("novalue").is_err());
    }
}
