//! Training configuration and its `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadInit;
use crate::numeric::OptimizerKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub tau_text: f64,
    pub tau_proto: f64,
    /// Number of prototypes.
    pub k: usize,
    /// Head and prototype dimension.
    pub d: usize,
    /// Projection dimension, excluding the uncertainty output.
    pub d_z: usize,
    pub ema_alpha: f64,
    pub ema_eps: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Labeled negatives drawn per positive.
    pub negative_ratio: usize,
    pub threshold: f64,
    pub head_init: HeadInit,
    /// Width of the optional tanh layer in the detector; 0 disables it.
    pub detector_hidden: usize,
    /// When false every image is ignored and all gates are 0.
    pub use_images: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            tau_text: 0.1,
            tau_proto: 0.1,
            k: 1024,
            d: 256,
            d_z: 128,
            ema_alpha: 0.999,
            ema_eps: 0.001,
            lr: 5e-5,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            epochs: 10,
            seed: 0,
            negative_ratio: 1,
            threshold: 0.5,
            head_init: HeadInit::Xavier,
            detector_hidden: 0,
            use_images: true,
        }
    }
}

/// Keys in the order they are printed.
pub const KEYS: &[&str] = &[
    "batch_size",
    "tau_text",
    "tau_proto",
    "k",
    "d",
    "d_z",
    "ema_alpha",
    "ema_eps",
    "lr",
    "optimizer",
    "weight_decay",
    "epochs",
    "seed",
    "negative_ratio",
    "threshold",
    "head_init",
    "detector_hidden",
    "use_images",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    /// Sets one key from its textual value. `e` is accepted as an alias of `d`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "tau_text" => self.tau_text = parse_num(key, value)?,
            "tau_proto" => self.tau_proto = parse_num(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "d" | "e" => self.d = parse_num(key, value)?,
            "d_z" => self.d_z = parse_num(key, value)?,
            "ema_alpha" => self.ema_alpha = parse_num(key, value)?,
            "ema_eps" => self.ema_eps = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "negative_ratio" => self.negative_ratio = parse_num(key, value)?,
            "threshold" => self.threshold = parse_num(key, value)?,
            "head_init" => self.head_init = value.parse()?,
            "detector_hidden" => self.detector_hidden = parse_num(key, value)?,
            "use_images" => self.use_images = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, "expected `key = value`"))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::parse(i + 1, m),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text).map_err(|e| e.with_path(path))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "batch_size" => self.batch_size.to_string(),
            "tau_text" => self.tau_text.to_string(),
            "tau_proto" => self.tau_proto.to_string(),
            "k" => self.k.to_string(),
            "d" | "e" => self.d.to_string(),
            "d_z" => self.d_z.to_string(),
            "ema_alpha" => self.ema_alpha.to_string(),
            "ema_eps" => self.ema_eps.to_string(),
            "lr" => self.lr.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "negative_ratio" => self.negative_ratio.to_string(),
            "threshold" => self.threshold.to_string(),
            "head_init" => self.head_init.to_string(),
            "detector_hidden" => self.detector_hidden.to_string(),
            "use_images" => self.use_images.to_string(),
            _ => return None,
        })
    }

    /// The full resolved configuration in the same format [`apply_text`](Self::apply_text) reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.tau_text > 0.0 && self.tau_proto > 0.0) {
            return bad("temperatures must be positive");
        }
        if self.k == 0 || self.d == 0 || self.d_z == 0 {
            return bad("k, d and d_z must be positive");
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return bad("ema_alpha must lie in (0, 1)");
        }
        if !(self.ema_eps > 0.0 && self.ema_eps.is_finite()) {
            return bad("ema_eps must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.negative_ratio == 0 {
            return bad("negative_ratio must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        Ok(())
    }
}
