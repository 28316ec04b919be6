//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys and unparsable values are errors naming the key.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{Normalization, SplitSpec, DEFAULT_RATIOS};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::MetricConfig;
use crate::model::{Ablation, EncoderConfig, ModelConfig};
use crate::multiclass::{HeadKind, McConfig};
use crate::semisup::{SemiConfig, TrainSchedule};
use crate::train::TrainerConfig;

/// Ground-truth pool used for fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneSet {
    Train,
    TrainVal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Checkpoint whose `encoder.*` tensors seed the encoder.
    pub pretrained_weights: Option<PathBuf>,
    pub norm: Normalization,
    pub split: SplitSpec,
    pub finetune_set: FinetuneSet,
    pub loss: LossWeights,
    pub ratios: Vec<f64>,
    pub lr: f64,
    pub schedule: TrainSchedule,
    pub semi: SemiConfig,
    pub metrics: MetricConfig,
    pub mc: McConfig,
    pub predict_batch: usize,
    /// Checkpoint every this many semi-supervised rounds; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            pretrained_weights: None,
            norm: Normalization::MinMax,
            split: SplitSpec::default(),
            finetune_set: FinetuneSet::Train,
            loss: LossWeights::default(),
            ratios: DEFAULT_RATIOS.to_vec(),
            lr: 1e-4,
            schedule: TrainSchedule::default(),
            semi: SemiConfig::default(),
            metrics: MetricConfig::default(),
            mc: McConfig::default(),
            predict_batch: 8,
            checkpoint_every: 1,
        }
    }
}

pub const KEYS: [&str; 41] = [
    "seed",
    "ablation",
    "encoder",
    "ra_channels",
    "input_size",
    "pretrained_weights",
    "normalization",
    "norm_mean",
    "norm_std",
    "split_train",
    "split_val",
    "split_test",
    "finetune_set",
    "loss_lambda",
    "hard_pixel_gain",
    "pool_window",
    "epsilon",
    "ratios",
    "lr",
    "pretrain_epochs",
    "pretrain_batch",
    "finetune_epochs",
    "finetune_batch",
    "semi_k",
    "pseudo_threshold",
    "semi_initial_epochs",
    "semi_round_epochs",
    "semi_batch",
    "semi_reset_optimizer",
    "metric_threshold",
    "metric_alpha",
    "mc_head",
    "mc_width",
    "mc_input_size",
    "mc_lr",
    "mc_momentum",
    "mc_weight_decay",
    "mc_epochs",
    "mc_batch",
    "predict_batch",
    "checkpoint_every",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::ConfigValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn bad(key: &str, value: &str, reason: &str) -> Error {
    Error::ConfigValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

/// `352` or `352x320`.
fn parse_size(key: &str, value: &str) -> Result<(usize, usize)> {
    match value.split_once('x') {
        Some((h, w)) => Ok((parse(key, h.trim())?, parse(key, w.trim())?)),
        None => {
            let s = parse(key, value)?;
            Ok((s, s))
        }
    }
}

fn size_text((h, w): (usize, usize)) -> String {
    if h == w {
        h.to_string()
    } else {
        format!("{h}x{w}")
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Argument(format!("config line {}: expected `key = value`", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "ablation" => {
                self.model.ablation =
                    Ablation::parse(value).map_err(|e| bad(key, value, &e.to_string()))?
            }
            "encoder" => {
                self.model.encoder = match value {
                    "toy" => EncoderConfig::toy(),
                    "res2net50" => EncoderConfig::res2net50(),
                    _ => return Err(bad(key, value, "expected `toy` or `res2net50`")),
                }
            }
            "ra_channels" => self.model.ra_channels = parse(key, value)?,
            "input_size" => self.model.input_size = parse_size(key, value)?,
            "pretrained_weights" => {
                self.pretrained_weights = (!value.is_empty()).then(|| PathBuf::from(value));
                self.model.pretrained = self.pretrained_weights.is_some();
            }
            "normalization" => {
                self.norm = match value {
                    "minmax" => Normalization::MinMax,
                    "meanstd" => match self.norm {
                        Normalization::MeanStd { .. } => self.norm,
                        Normalization::MinMax => Normalization::MeanStd {
                            mean: 0.5,
                            std: 0.25,
                        },
                    },
                    _ => return Err(bad(key, value, "expected `minmax` or `meanstd`")),
                }
            }
            "norm_mean" | "norm_std" => {
                let v: f64 = parse(key, value)?;
                let (mut mean, mut std) = match self.norm {
                    Normalization::MeanStd { mean, std } => (mean, std),
                    Normalization::MinMax => (0.5, 0.25),
                };
                if key == "norm_mean" {
                    mean = v;
                } else {
                    std = v;
                }
                self.norm = Normalization::MeanStd { mean, std };
            }
            "split_train" => self.split.train = parse(key, value)?,
            "split_val" => self.split.val = parse(key, value)?,
            "split_test" => self.split.test = parse(key, value)?,
            "finetune_set" => {
                self.finetune_set = match value {
                    "train" => FinetuneSet::Train,
                    "train+val" => FinetuneSet::TrainVal,
                    _ => return Err(bad(key, value, "expected `train` or `train+val`")),
                }
            }
            "loss_lambda" => self.loss.lambda = parse(key, value)?,
            "hard_pixel_gain" => self.loss.hard_pixel_gain = parse(key, value)?,
            "pool_window" => self.loss.pool_window = parse(key, value)?,
            "epsilon" => self.loss.epsilon = parse(key, value)?,
            "ratios" => {
                self.ratios = value
                    .split(',')
                    .map(|r| parse(key, r.trim()))
                    .collect::<Result<Vec<f64>>>()?
            }
            "lr" => self.lr = parse(key, value)?,
            "pretrain_epochs" => self.schedule.pretrain.epochs = parse(key, value)?,
            "pretrain_batch" => self.schedule.pretrain.batch_size = parse(key, value)?,
            "finetune_epochs" => self.schedule.finetune.epochs = parse(key, value)?,
            "finetune_batch" => self.schedule.finetune.batch_size = parse(key, value)?,
            "semi_k" => self.semi.k = parse(key, value)?,
            "pseudo_threshold" => self.semi.pseudo_threshold = parse(key, value)?,
            "semi_initial_epochs" => self.semi.initial_epochs = parse(key, value)?,
            "semi_round_epochs" => self.semi.round_epochs = parse(key, value)?,
            "semi_batch" => self.semi.batch_size = parse(key, value)?,
            "semi_reset_optimizer" => self.semi.reset_optimizer_each_round = parse(key, value)?,
            "metric_threshold" => self.metrics.threshold = parse(key, value)?,
            "metric_alpha" => self.metrics.alpha = parse(key, value)?,
            "mc_head" => {
                self.mc.head = value
                    .parse()
                    .map_err(|e: Error| bad(key, value, &e.to_string()))?
            }
            "mc_width" => self.mc.width = parse(key, value)?,
            "mc_input_size" => self.mc.input_size = parse_size(key, value)?,
            "mc_lr" => self.mc.sgd.lr = parse(key, value)?,
            "mc_momentum" => self.mc.sgd.momentum = parse(key, value)?,
            "mc_weight_decay" => self.mc.sgd.weight_decay = parse(key, value)?,
            "mc_epochs" => self.mc.epochs = parse(key, value)?,
            "mc_batch" => self.mc.batch_size = parse(key, value)?,
            "predict_batch" => self.predict_batch = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    /// Cross-field checks; the message names the offending key.
    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, value: String, r: Result<()>| {
            r.map_err(|e| bad(key, &value, &e.to_string()))
        };
        wrap(
            "ra_channels / input_size",
            format!("{:?}", self.model.input_size),
            self.model.validate(),
        )?;
        wrap(
            "pool_window / loss_lambda / epsilon",
            format!("{:?}", self.loss),
            self.loss.validate(),
        )?;
        wrap(
            "semi_k / semi_batch / pseudo_threshold",
            format!("{:?}", self.semi),
            self.semi.validate(),
        )?;
        wrap(
            "mc_input_size / mc_width / mc_batch",
            format!("{:?}", self.mc.input_size),
            self.mc.validate(),
        )?;
        if self.ratios.is_empty() || self.ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(bad(
                "ratios",
                &format!("{:?}", self.ratios),
                "ratios must be positive",
            ));
        }
        if !(self.metrics.threshold > 0.0 && self.metrics.threshold < 1.0) {
            return Err(bad(
                "metric_threshold",
                &self.metrics.threshold.to_string(),
                "must lie in (0, 1)",
            ));
        }
        if !(0.0..=1.0).contains(&self.metrics.alpha) {
            return Err(bad(
                "metric_alpha",
                &self.metrics.alpha.to_string(),
                "must lie in [0, 1]",
            ));
        }
        if !(self.lr > 0.0) {
            return Err(bad("lr", &self.lr.to_string(), "must be positive"));
        }
        if self.schedule.pretrain.batch_size == 0
            || self.schedule.finetune.batch_size == 0
            || self.predict_batch == 0
        {
            return Err(bad(
                "pretrain_batch / finetune_batch / predict_batch",
                "0",
                "batch sizes must be positive",
            ));
        }
        if let Normalization::MeanStd { std, .. } = self.norm {
            if !(std > 0.0) {
                return Err(bad("norm_std", &std.to_string(), "must be positive"));
            }
        }
        Ok(())
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let mut t = TrainerConfig::new(self.model.clone());
        t.optimizer.lr = self.lr;
        t.loss = self.loss;
        t.ratios = self.ratios.clone();
        t.norm = self.norm;
        t.predict_batch = self.predict_batch;
        t
    }

    pub fn semi_config(&self) -> SemiConfig {
        SemiConfig {
            seed: self.seed,
            batch_size: self.semi.batch_size,
            ..self.semi.clone()
        }
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            seed: self.seed,
            ..self.mc.clone()
        }
    }

    /// Every key with its effective value, in [`KEYS`] order; parsing the
    /// result reproduces `self`.
    pub fn to_text(&self) -> String {
        let encoder = match self.model.encoder {
            EncoderConfig::LightweightToy { .. } => "toy",
            EncoderConfig::Res2NetLike { .. } => "res2net50",
        };
        let (norm, mean, std) = match self.norm {
            Normalization::MinMax => ("minmax", None, None),
            Normalization::MeanStd { mean, std } => ("meanstd", Some(mean), Some(std)),
        };
        let ratios: Vec<String> = self.ratios.iter().map(f64::to_string).collect();
        let head = match self.mc.head {
            HeadKind::Fcn => "fcn",
            HeadKind::EncoderDecoder => "encdec",
        };
        let mut lines = vec![
            ("seed", self.seed.to_string()),
            ("ablation", self.model.ablation.label()),
            ("encoder", encoder.to_string()),
            ("ra_channels", self.model.ra_channels.to_string()),
            ("input_size", size_text(self.model.input_size)),
            (
                "pretrained_weights",
                self.pretrained_weights
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("normalization", norm.to_string()),
        ];
        if let (Some(m), Some(s)) = (mean, std) {
            lines.push(("norm_mean", m.to_string()));
            lines.push(("norm_std", s.to_string()));
        }
        lines.extend([
            ("split_train", self.split.train.to_string()),
            ("split_val", self.split.val.to_string()),
            ("split_test", self.split.test.to_string()),
            (
                "finetune_set",
                match self.finetune_set {
                    FinetuneSet::Train => "train",
                    FinetuneSet::TrainVal => "train+val",
                }
                .to_string(),
            ),
            ("loss_lambda", self.loss.lambda.to_string()),
            ("hard_pixel_gain", self.loss.hard_pixel_gain.to_string()),
            ("pool_window", self.loss.pool_window.to_string()),
            ("epsilon", self.loss.epsilon.to_string()),
            ("ratios", ratios.join(",")),
            ("lr", self.lr.to_string()),
            ("pretrain_epochs", self.schedule.pretrain.epochs.to_string()),
            (
                "pretrain_batch",
                self.schedule.pretrain.batch_size.to_string(),
            ),
            ("finetune_epochs", self.schedule.finetune.epochs.to_string()),
            (
                "finetune_batch",
                self.schedule.finetune.batch_size.to_string(),
            ),
            ("semi_k", self.semi.k.to_string()),
            ("pseudo_threshold", self.semi.pseudo_threshold.to_string()),
            ("semi_initial_epochs", self.semi.initial_epochs.to_string()),
            ("semi_round_epochs", self.semi.round_epochs.to_string()),
            ("semi_batch", self.semi.batch_size.to_string()),
            (
                "semi_reset_optimizer",
                self.semi.reset_optimizer_each_round.to_string(),
            ),
            ("metric_threshold", self.metrics.threshold.to_string()),
            ("metric_alpha", self.metrics.alpha.to_string()),
            ("mc_head", head.to_string()),
            ("mc_width", self.mc.width.to_string()),
            ("mc_input_size", size_text(self.mc.input_size)),
            ("mc_lr", self.mc.sgd.lr.to_string()),
            ("mc_momentum", self.mc.sgd.momentum.to_string()),
            ("mc_weight_decay", self.mc.sgd.weight_decay.to_string()),
            ("mc_epochs", self.mc.epochs.to_string()),
            ("mc_batch", self.mc.batch_size.to_string()),
            ("predict_batch", self.predict_batch.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]);
        lines
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
