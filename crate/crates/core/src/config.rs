//! Run configuration and its flat `key=value` text form.
//!
//! Lines are `dotted.key=value`; blank lines and lines starting with `#` are
//! ignored. Keys not listed in [`RunConfig::entries`] are rejected. Lists
//! are comma separated. [`RunConfig::to_text`] writes every key in a fixed
//! order and parses back to an identical config.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::LossConfig;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::tensor::Precision;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Per-axis probability of flipping a training sample.
    pub flip_prob: [f64; 3],
    pub optim: AdamWConfig,
    pub loss: LossConfig,
    /// NSD tolerance in voxels.
    pub tau: f64,
    /// Validate every this many epochs; 0 validates after the last epoch only.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 2,
            seed: 0,
            precision: Precision::F32,
            flip_prob: [0.0; 3],
            optim: AdamWConfig::default(),
            loss: LossConfig::default(),
            tau: 1.0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be >= 1".into()));
        }
        if self.flip_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("train.flip_prob {:?} must lie in [0, 1]", self.flip_prob)));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::Config(format!("eval.tau = {} must be >= 0", self.tau)));
        }
        self.optim.validate()?;
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse3<T: FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]> {
    let xs: Vec<T> = parse_list(key, v)?;
    match xs.as_slice() {
        [a] => Ok([*a; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::Config(format!("{key}: expected 1 or 3 values, got {v:?}"))),
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its current value, in echo order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t) = (&self.model, &self.train);
        vec![
            ("model.volume", join(&m.volume)),
            ("model.in_channels", m.in_channels.to_string()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("patch.size", join(&m.patch.patch)),
            ("patch.mode", m.patch.mode.to_string()),
            ("encoder.layers", m.encoder.layers.to_string()),
            ("encoder.heads", m.encoder.heads.to_string()),
            ("encoder.adapter_dim", m.encoder.adapter_dim.to_string()),
            ("encoder.scale", m.encoder.scale.to_string()),
            ("encoder.taps", join(&m.encoder.taps)),
            ("encoder.mlp_ratio", m.encoder.mlp_ratio.to_string()),
            ("encoder.activation", m.encoder.activation.to_string()),
            ("encoder.mlp_residual", m.encoder.mlp_residual.to_string()),
            ("prompter.kind", m.prompter.kind.to_string()),
            ("prompter.reduced_tokens", m.prompter.reduced_tokens.to_string()),
            ("prompter.share_qk", m.prompter.share_qk.to_string()),
            ("prompter.layer", m.prompter.layer.to_string()),
            ("prompter.scaling", m.prompter.scaling.to_string()),
            ("decoder.channels", m.decoder.channels.to_string()),
            ("decoder.no_image_branch", m.decoder.no_image_branch.to_string()),
            ("decoder.share_image_branch", m.decoder.share_image_branch.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.precision", t.precision.as_str().to_string()),
            ("train.flip_prob", join(&t.flip_prob)),
            ("train.lr", t.optim.lr.to_string()),
            ("train.beta1", t.optim.beta1.to_string()),
            ("train.beta2", t.optim.beta2.to_string()),
            ("train.eps", t.optim.eps.to_string()),
            ("train.weight_decay", t.optim.weight_decay.to_string()),
            ("loss.w_dice", t.loss.w_dice.to_string()),
            ("loss.w_ce", t.loss.w_ce.to_string()),
            ("loss.smooth", t.loss.smooth.to_string()),
            ("loss.eps", t.loss.eps.to_string()),
            ("eval.tau", t.tau.to_string()),
            ("eval.every", t.eval_every.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "model.volume" => m.volume = parse3(key, v)?,
            "model.in_channels" => m.in_channels = parse(key, v)?,
            "model.embed_dim" => m.embed_dim = parse(key, v)?,
            "patch.size" => m.patch.patch = parse3(key, v)?,
            "patch.mode" => m.patch.mode = v.parse()?,
            "encoder.layers" => m.encoder.layers = parse(key, v)?,
            "encoder.heads" => m.encoder.heads = parse(key, v)?,
            "encoder.adapter_dim" => m.encoder.adapter_dim = parse(key, v)?,
            "encoder.scale" => m.encoder.scale = parse(key, v)?,
            "encoder.taps" => m.encoder.taps = parse_list(key, v)?,
            "encoder.mlp_ratio" => m.encoder.mlp_ratio = parse(key, v)?,
            "encoder.activation" => m.encoder.activation = v.parse()?,
            "encoder.mlp_residual" => m.encoder.mlp_residual = parse(key, v)?,
            "prompter.kind" => m.prompter.kind = v.parse()?,
            "prompter.reduced_tokens" => m.prompter.reduced_tokens = parse(key, v)?,
            "prompter.share_qk" => m.prompter.share_qk = parse(key, v)?,
            "prompter.layer" => m.prompter.layer = parse(key, v)?,
            "prompter.scaling" => m.prompter.scaling = parse(key, v)?,
            "decoder.channels" => m.decoder.channels = parse(key, v)?,
            "decoder.no_image_branch" => m.decoder.no_image_branch = parse(key, v)?,
            "decoder.share_image_branch" => m.decoder.share_image_branch = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.precision" => t.precision = v.parse()?,
            "train.flip_prob" => t.flip_prob = parse3(key, v)?,
            "train.lr" => t.optim.lr = parse(key, v)?,
            "train.beta1" => t.optim.beta1 = parse(key, v)?,
            "train.beta2" => t.optim.beta2 = parse(key, v)?,
            "train.eps" => t.optim.eps = parse(key, v)?,
            "train.weight_decay" => t.optim.weight_decay = parse(key, v)?,
            "loss.w_dice" => t.loss.w_dice = parse(key, v)?,
            "loss.w_ce" => t.loss.w_ce = parse(key, v)?,
            "loss.smooth" => t.loss.smooth = parse(key, v)?,
            "loss.eps" => t.loss.eps = parse(key, v)?,
            "eval.tau" => t.tau = parse(key, v)?,
            "eval.every" => t.eval_every = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", no + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", no + 1)));
            }
            self.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, validated.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}
