//! Supervised training on template/search crop pairs.
//!
//! Each sample takes a template around the ground truth of one frame and a
//! search region around a jittered copy of the ground truth of another frame
//! of the same sequence. Per-sample gradients run in parallel on separate
//! tapes and are summed in sample order, so results do not depend on thread
//! scheduling.

use std::fmt;

use rayon::prelude::*;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::model::{NetInput, TrackerNet};
use crate::optim::{loss_on_tape, make_param_groups, LossConfig, Optimizer, OptimizerConfig, StepReport};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::synth::Sequence;
use crate::tensor::Tape;
use crate::track::{crop_mapping, crop_region, net_input, TrackConfig};

const STREAM_SAMPLING: u64 = 0x7472_6169_6e;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Search-centre jitter as a fraction of `sqrt(w·h)`.
    pub center_jitter: f64,
    /// Search-size jitter: the box side is scaled by `exp(u)`, `|u| ≤ scale_jitter`.
    pub scale_jitter: f64,
    /// Draw one batch up front and reuse it for every step.
    pub fixed_batch: bool,
    pub track: TrackConfig,
    pub loss: LossConfig,
    pub optim: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps_per_epoch: 8,
            batch_size: 4,
            seed: 0,
            center_jitter: 0.5,
            scale_jitter: 0.2,
            fixed_batch: false,
            track: TrackConfig::default(),
            loss: LossConfig::default(),
            optim: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.steps_per_epoch and train.batch_size must be positive".into()));
        }
        if !(self.center_jitter >= 0.0 && self.scale_jitter >= 0.0) {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        self.loss.validate()?;
        self.optim.validate()
    }
}

/// One training example: network input and the target box in search-crop
/// coordinates divided by the search size.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: NetInput,
    pub target: BBox,
}

/// Draws one template/search pair from `seq`.
pub fn draw_sample(net: &TrackerNet, seq: &Sequence, cfg: &TrainConfig, rng: &mut SeededRng) -> Result<Sample> {
    if seq.frames.is_empty() || seq.frames.len() != seq.gt.len() {
        return Err(Error::Dataset {
            sequence: seq.name.clone(),
            detail: "frames and ground truth missing or of different length".into(),
        });
    }
    let n = seq.frames.len();
    let (t0, t1) = (rng.below(n), rng.below(n));
    let (z, x) = (&seq.gt[t0], &seq.gt[t1]);
    if !z.is_valid() || !x.is_valid() {
        return Err(Error::Dataset {
            sequence: seq.name.clone(),
            detail: format!("frame {t0} or {t1} has no usable ground truth"),
        });
    }
    let mc = net.config();
    let (template, _) = crop_region(&seq.frames[t0], z, cfg.track.template_scale, mc.template_size)?;
    let side = (x.w * x.h).sqrt();
    let dx = rng.uniform(-cfg.center_jitter, cfg.center_jitter) * side;
    let dy = rng.uniform(-cfg.center_jitter, cfg.center_jitter) * side;
    let s = rng.uniform(-cfg.scale_jitter, cfg.scale_jitter).exp();
    let anchor = BBox::new(x.x + dx, x.y + dy, x.w * s, x.h * s);
    let mapping = crop_mapping(&anchor, cfg.track.search_scale, mc.search_size)?;
    let (search, _) = crop_region(&seq.frames[t1], &anchor, cfg.track.search_scale, mc.search_size)?;
    let target = mapping.box_to_crop(x).scaled(1.0 / mc.search_size as f64);
    Ok(Sample {
        input: net_input(net.streams(), &template, &search),
        target,
    })
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(net: &TrackerNet, sample: &Sample, loss: &LossConfig) -> Result<(f64, ParamStore)> {
    let mut tape = Tape::new();
    let bound = net.params().bind(&mut tape, true);
    let out = net.forward(&mut tape, &bound, &sample.input)?;
    let search = net.config().search_size as f64;
    let pred = tape.scale(out.raw_box, 1.0 / search);
    let l = loss_on_tape(&mut tape, pred, &sample.target, loss, 1.0 / search)?;
    let value = tape.value(l).item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    let grads = tape.backward(l)?;
    let mut store = ParamStore::new();
    for (name, var) in bound.iter() {
        let shape = net.params().get(name).expect("bound from params").shape().to_vec();
        store.insert(name, grads.get_or_zeros(var, &shape))?;
    }
    Ok((value, store))
}

/// Mean loss and mean gradients over a batch.
pub fn batch_gradients(net: &TrackerNet, samples: &[Sample], loss: &LossConfig) -> Result<(f64, ParamStore)> {
    if samples.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let per_sample: Vec<(f64, ParamStore)> = samples
        .par_iter()
        .map(|s| sample_gradients(net, s, loss))
        .collect::<Result<_>>()?;
    let inv = 1.0 / samples.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut total, mut acc) = iter.next().expect("non-empty");
    for (l, g) in iter {
        total += l;
        for ((_, a), (_, b)) in acc.iter_mut().zip(g.iter()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
    for (_, a) in acc.iter_mut() {
        for x in a.data_mut() {
            *x *= inv;
        }
    }
    Ok((total * inv, acc))
}

/// One optimizer step on `samples`; returns the batch loss and step report.
pub fn train_step(
    net: &mut TrackerNet,
    opt: &mut Optimizer,
    samples: &[Sample],
    loss: &LossConfig,
    epoch: usize,
) -> Result<(f64, StepReport)> {
    let (l, grads) = batch_gradients(net, samples, loss)?;
    let report = opt.step(net.params_mut(), &grads, epoch)?;
    Ok((l, report))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr_fresh: f64,
    pub lr_backbone: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,loss,lr_fresh,lr_backbone";

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Format(format!("bad log line `{line}`"));
        let [e, l, lf, lb] = f[..] else { return Err(bad()) };
        Ok(Self {
            epoch: e.parse().map_err(|_| bad())?,
            loss: l.parse().map_err(|_| bad())?,
            lr_fresh: lf.parse().map_err(|_| bad())?,
            lr_backbone: lb.parse().map_err(|_| bad())?,
        })
    }
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.epoch, self.loss, self.lr_fresh, self.lr_backbone)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub warnings: Vec<String>,
}

/// Trains `net` for `cfg.optim.total_epochs` epochs of
/// `cfg.steps_per_epoch` steps each, calling `on_epoch` after every epoch.
pub fn train(
    net: &mut TrackerNet,
    data: &[Sequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("no training sequences".into()));
    }
    let names = net.param_names();
    let groups = make_param_groups(names.iter().map(String::as_str), &cfg.optim);
    let warnings = groups.warnings.clone();
    let mut opt = Optimizer::new(cfg.optim.clone(), groups)?;
    let mut rng = SeededRng::derived(cfg.seed, STREAM_SAMPLING);
    let draw = |net: &TrackerNet, rng: &mut SeededRng| {
        (0..cfg.batch_size)
            .map(|_| {
                let seq = &data[rng.below(data.len())];
                draw_sample(net, seq, cfg, rng)
            })
            .collect::<Result<Vec<_>>>()
    };
    let fixed = if cfg.fixed_batch { Some(draw(net, &mut rng)?) } else { None };
    let mut logs = Vec::with_capacity(cfg.optim.total_epochs);
    for epoch in 0..cfg.optim.total_epochs {
        let mut sum = 0.0;
        let mut last = None;
        for _ in 0..cfg.steps_per_epoch {
            let fresh;
            let samples = match &fixed {
                Some(batch) => batch,
                None => {
                    fresh = draw(net, &mut rng)?;
                    &fresh
                }
            };
            let (l, report) = train_step(net, &mut opt, samples, &cfg.loss, epoch)?;
            sum += l;
            last = Some(report);
        }
        let report = last.expect("at least one step");
        let log = EpochLog {
            epoch,
            loss: sum / cfg.steps_per_epoch as f64,
            lr_fresh: report.lr_fresh,
            lr_backbone: report.lr_backbone,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(TrainOutcome { logs, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_line_round_trip() {
        let l = EpochLog {
            epoch: 3,
            loss: 0.125,
            lr_fresh: 1e-4,
            lr_backbone: 1e-5,
        };
        assert_eq!(l.to_string(), "3,0.125,0.0001,0.00001");
        assert_eq!(EpochLog::parse(&l.to_string()).unwrap(), l);
        assert!(EpochLog::parse("1,2").is_err());
    }
}
