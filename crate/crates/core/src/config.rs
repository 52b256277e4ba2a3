//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional
//! and falls back to [`TrainConfig::default`]; unknown or repeated keys are
//! errors. Lists are comma-separated.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::MrGradient;
use crate::pipeline::TrainConfig;

/// One `key = value` line.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

impl Entry {
    fn parse<T: FromStr>(&self) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse().map_err(|e: T::Err| self.error(format!("`{}`: {e}", self.value)))
    }

    fn list<T: FromStr>(&self) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.value
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|e: T::Err| self.error(format!("list item `{}`: {e}", p.trim())))
            })
            .collect()
    }

    fn array<T: FromStr + Copy + Default, const N: usize>(&self) -> Result<[T; N]>
    where
        T::Err: std::fmt::Display,
    {
        let v: Vec<T> = self.list()?;
        v.try_into()
            .map_err(|v: Vec<T>| self.error(format!("expected {N} values, got {}", v.len())))
    }

    pub fn error(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            key: self.key.clone(),
            detail: detail.into(),
        }
    }
}

/// Splits text into entries, rejecting malformed and duplicate lines.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: i + 1,
                key: String::new(),
                detail: format!("expected `key = value`, got `{line}`"),
            });
        };
        let entry = Entry {
            line: i + 1,
            key: k.trim().to_string(),
            value: v.trim().to_string(),
        };
        if let Some(prev) = out.iter().find(|e| e.key == entry.key) {
            return Err(entry.error(format!("duplicate key (first set on line {})", prev.line)));
        }
        out.push(entry);
    }
    Ok(out)
}

fn parse_bool(e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(e.error(format!("`{v}` is not a boolean"))),
    }
}

fn parse_mr_mode(e: &Entry) -> Result<MrGradient> {
    match e.value.as_str() {
        "detached" => Ok(MrGradient::Detached),
        "both" => Ok(MrGradient::Both),
        v => Err(e.error(format!("`{v}` is not one of detached, both"))),
    }
}

/// Applies one entry to `config`. Returns `false` if the key is not a
/// training key, leaving the decision to the caller.
pub fn apply_entry(config: &mut TrainConfig, e: &Entry) -> Result<bool> {
    let c = config;
    match e.key.as_str() {
        "stage1_iters" => c.stage1_iters = e.parse()?,
        "stage2_iters" => c.stage2_iters = e.parse()?,
        "mr_warmup_frac" => c.mr_warmup_frac = e.parse()?,
        "mr_warmup_iters" => c.mr_warmup_override = Some(e.parse()?),
        "batch_size" => c.batch_size = e.parse()?,
        "seg_lr" => c.seg_lr = e.parse()?,
        "seg_momentum" => c.seg_momentum = e.parse()?,
        "disc_lr" => c.disc_lr = e.parse()?,
        "aux_seg_weight" => c.loss_weights.aux_seg = e.parse()?,
        "adv_primary_weight" => c.loss_weights.adv_primary = e.parse()?,
        "adv_aux_weight" => c.loss_weights.adv_aux = e.parse()?,
        "lambda_mr" => c.loss_weights.lambda_mr = e.parse()?,
        "lambda_mr_sweep" => c.lambda_mr_sweep = e.list()?,
        "seed" => c.seed = e.parse()?,
        "eval_every" => c.eval_every = e.parse()?,
        "train_pool" => c.train_pool = e.parse()?,
        "val_count" => c.val_count = e.parse()?,
        "eval_count" => c.eval_count = e.parse()?,
        "crop" => c.crop = e.parse()?,
        "mr_detach_mode" => c.mr_gradient = parse_mr_mode(e)?,
        "class_balance" => c.class_balance = parse_bool(e)?,
        "num_classes" => {
            let n = e.parse()?;
            c.seg.num_classes = n;
            c.disc.num_classes = n;
        }
        "seg_widths" => c.seg.widths = e.array()?,
        "seg_dropout" => c.seg.dropout = e.parse()?,
        "disc_widths" => c.disc.widths = e.array()?,
        "disc_scales" => c.disc.scale_count = e.parse()?,
        "disc_leak" => c.disc.leak = e.parse()?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Parses a configuration from text; an empty text yields the defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    for e in parse_entries(text)? {
        if !apply_entry(&mut config, &e)? {
            return Err(e.error("unknown key"));
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Renders every key; `parse_config(&render_config(c)) == c`.
pub fn render_config(c: &TrainConfig) -> String {
    let mut s = String::new();
    let w = &c.loss_weights;
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("stage1_iters", c.stage1_iters.to_string());
    kv("stage2_iters", c.stage2_iters.to_string());
    kv("mr_warmup_frac", c.mr_warmup_frac.to_string());
    if let Some(n) = c.mr_warmup_override {
        kv("mr_warmup_iters", n.to_string());
    }
    kv("batch_size", c.batch_size.to_string());
    kv("seg_lr", c.seg_lr.to_string());
    kv("seg_momentum", c.seg_momentum.to_string());
    kv("disc_lr", c.disc_lr.to_string());
    kv("aux_seg_weight", w.aux_seg.to_string());
    kv("adv_primary_weight", w.adv_primary.to_string());
    kv("adv_aux_weight", w.adv_aux.to_string());
    kv("lambda_mr", w.lambda_mr.to_string());
    kv("lambda_mr_sweep", join(&c.lambda_mr_sweep));
    kv("seed", c.seed.to_string());
    kv("eval_every", c.eval_every.to_string());
    kv("train_pool", c.train_pool.to_string());
    kv("val_count", c.val_count.to_string());
    kv("eval_count", c.eval_count.to_string());
    kv("crop", c.crop.to_string());
    let mode = match c.mr_gradient {
        MrGradient::Detached => "detached",
        MrGradient::Both => "both",
    };
    kv("mr_detach_mode", mode.to_string());
    kv("class_balance", c.class_balance.to_string());
    kv("num_classes", c.seg.num_classes.to_string());
    kv("seg_widths", join(&c.seg.widths));
    kv("seg_dropout", c.seg.dropout.to_string());
    kv("disc_widths", join(&c.disc.widths));
    kv("disc_scales", c.disc.scale_count.to_string());
    kv("disc_leak", c.disc.leak.to_string());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_all_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.loss_weights.lambda_mr, 0.1);
        assert_eq!(c.loss_weights.aux_seg, 0.5);
        assert_eq!(c.loss_weights.adv_primary, 0.001);
        assert_eq!(c.loss_weights.adv_aux, 0.0002);
    }

    #[test]
    fn overrides_apply() {
        let c = parse_config("# comment\n\nlambda_mr = 0.5\nseed=9\nmr_detach_mode = both\n").unwrap();
        assert_eq!(c.loss_weights.lambda_mr, 0.5);
        assert_eq!(c.seed, 9);
        assert_eq!(c.mr_gradient, MrGradient::Both);
    }

    #[test]
    fn type_mismatch_names_key_and_line() {
        let err = parse_config("seed = 1\nlambda_mr = banana\n").unwrap_err();
        match &err {
            Error::Parse { line, key, .. } => {
                assert_eq!(*line, 2);
                assert_eq!(key, "lambda_mr");
            }
            other => panic!("unexpected {other:?}"),
        }
        let msg = err.to_string();
        assert!(msg.contains("lambda_mr") && msg.contains('2'), "{msg}");
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(matches!(parse_config("colour = red"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_config("seed = 1\nseed = 2"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_config("just text"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(matches!(parse_config("seg_lr = 0"), Err(Error::Config(_))));
        assert!(matches!(parse_config("mr_warmup_iters = 5000"), Err(Error::Config(_))));
        assert!(parse_config("seg_widths = 1,2,3").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut c = TrainConfig::default();
        c.seed = 77;
        c.lambda_mr_sweep = vec![0.0, 0.25];
        c.mr_warmup_override = Some(12);
        c.class_balance = false;
        assert_eq!(parse_config(&render_config(&c)).unwrap(), c);
        let d = TrainConfig::default();
        assert_eq!(parse_config(&render_config(&d)).unwrap(), d);
    }
}
