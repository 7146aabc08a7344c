//! Run configuration: flat `key=value` lines with dotted section prefixes.
//!
//! ```text
//! seed=7
//! model.streams=dual
//! model.d_model=64
//! optim.eta_base=1e-4
//! transfer.scope=full
//! ```
//!
//! Blank lines and `#` comments are ignored. Later keys override earlier
//! ones, so command-line `--set` pairs are applied after the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Streams};
use crate::optim::UpdateRule;
use crate::track::EvalConfig;
use crate::train::TrainConfig;
use crate::transfer::TransferScope;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub streams: Streams,
    /// Training, tracking, loss and optimizer settings. `train.seed` mirrors
    /// the run seed.
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// SR column shown in the report table.
    pub sr_threshold: f64,
    pub data: Vec<PathBuf>,
    pub transfer_source: Option<PathBuf>,
    pub transfer_scope: TransferScope,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            streams: Streams::Dual,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sr_threshold: 0.5,
            data: Vec::new(),
            transfer_source: None,
            transfer_scope: TransferScope::Full,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not a number")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not a non-negative integer")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: `{v}` is not a boolean"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies every `key=value` line of `text`; errors name the line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{raw}`", n + 1)))?;
            self.apply_kv(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override such as `optim.eta_base=3e-4`.
    pub fn apply_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{pair}` is not key=value")))?;
        self.apply_kv(k, v)
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let v = value.trim();
        if key == "model.streams" {
            self.streams = Streams::parse(v)?;
            return Ok(());
        }
        if self.model.apply_kv(key, v)? {
            return Ok(());
        }
        let t = &mut self.train;
        let o = &mut t.optim;
        match key {
            "seed" => {
                self.seed = v
                    .parse()
                    .map_err(|_| Error::Config(format!("seed: `{v}` is not a u64")))?;
                t.seed = self.seed;
            }
            "optim.eta_base" => o.eta_base = parse_f64(key, v)?,
            "optim.backbone_factor" => o.backbone_factor = parse_f64(key, v)?,
            "optim.warmup_epochs" => o.warmup_epochs = parse_usize(key, v)?,
            "optim.total_epochs" => o.total_epochs = parse_usize(key, v)?,
            "optim.eta_min" => o.eta_min = parse_f64(key, v)?,
            "optim.weight_decay" => o.weight_decay = parse_f64(key, v)?,
            "optim.beta1" => o.beta1 = parse_f64(key, v)?,
            "optim.beta2" => o.beta2 = parse_f64(key, v)?,
            "optim.adam_eps" => o.adam_eps = parse_f64(key, v)?,
            "optim.rule" => {
                o.rule = match v {
                    "adam" | "adamw" => UpdateRule::Adam,
                    "sgd" => UpdateRule::Sgd,
                    _ => return Err(Error::Config(format!("{key}: unknown rule `{v}`"))),
                }
            }
            "loss.lambda_l1" => t.loss.lambda_l1 = parse_f64(key, v)?,
            "loss.lambda_giou" => t.loss.lambda_giou = parse_f64(key, v)?,
            "train.steps_per_epoch" => t.steps_per_epoch = parse_usize(key, v)?,
            "train.batch_size" => t.batch_size = parse_usize(key, v)?,
            "train.center_jitter" => t.center_jitter = parse_f64(key, v)?,
            "train.scale_jitter" => t.scale_jitter = parse_f64(key, v)?,
            "train.fixed_batch" => t.fixed_batch = parse_bool(key, v)?,
            "track.template_scale" => t.track.template_scale = parse_f64(key, v)?,
            "track.search_scale" => t.track.search_scale = parse_f64(key, v)?,
            "eval.sr_threshold" => self.sr_threshold = parse_f64(key, v)?,
            "eval.precision_px" => self.eval.precision_px = parse_f64(key, v)?,
            "eval.fscore_iou" => self.eval.fscore_iou = parse_f64(key, v)?,
            "data" => self.data = v.split(',').map(|p| PathBuf::from(p.trim())).collect(),
            "transfer.source" => self.transfer_source = (!v.is_empty()).then(|| PathBuf::from(v)),
            "transfer.scope" => self.transfer_scope = TransferScope::parse(v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.train.track.template_scale > 0.0 && self.train.track.search_scale > 0.0) {
            return Err(Error::Config("track scales must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sr_threshold) {
            return Err(Error::Config(format!("eval.sr_threshold {} outside [0, 1]", self.sr_threshold)));
        }
        Ok(())
    }

    /// Evaluation settings with the display threshold included among the
    /// SR thresholds.
    pub fn eval_config(&self) -> EvalConfig {
        let mut e = self.eval.clone();
        if !e.sr_thresholds.iter().any(|t| (t - self.sr_threshold).abs() < 1e-12) {
            e.sr_thresholds.push(self.sr_threshold);
            e.sr_thresholds.sort_by(f64::total_cmp);
        }
        e
    }

    /// Serializes every key; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let o = &t.optim;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("model.streams", self.streams.name().into());
        for (k, v) in self.model.to_kv() {
            kv(&k, v);
        }
        kv("optim.eta_base", o.eta_base.to_string());
        kv("optim.backbone_factor", o.backbone_factor.to_string());
        kv("optim.warmup_epochs", o.warmup_epochs.to_string());
        kv("optim.total_epochs", o.total_epochs.to_string());
        kv("optim.eta_min", o.eta_min.to_string());
        kv("optim.weight_decay", o.weight_decay.to_string());
        kv(
            "optim.rule",
            match o.rule {
                UpdateRule::Adam => "adam",
                UpdateRule::Sgd => "sgd",
            }
            .into(),
        );
        kv("optim.beta1", o.beta1.to_string());
        kv("optim.beta2", o.beta2.to_string());
        kv("optim.adam_eps", o.adam_eps.to_string());
        kv("loss.lambda_l1", t.loss.lambda_l1.to_string());
        kv("loss.lambda_giou", t.loss.lambda_giou.to_string());
        kv("train.steps_per_epoch", t.steps_per_epoch.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.center_jitter", t.center_jitter.to_string());
        kv("train.scale_jitter", t.scale_jitter.to_string());
        kv("train.fixed_batch", t.fixed_batch.to_string());
        kv("track.template_scale", t.track.template_scale.to_string());
        kv("track.search_scale", t.track.search_scale.to_string());
        kv("eval.sr_threshold", self.sr_threshold.to_string());
        kv("eval.precision_px", self.eval.precision_px.to_string());
        kv("eval.fscore_iou", self.eval.fscore_iou.to_string());
        if !self.data.is_empty() {
            let joined: Vec<String> = self.data.iter().map(|p| p.display().to_string()).collect();
            kv("data", joined.join(","));
        }
        if let Some(p) = &self.transfer_source {
            kv("transfer.source", p.display().to_string());
        }
        kv("transfer.scope", self.transfer_scope.name().into());
        s
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
