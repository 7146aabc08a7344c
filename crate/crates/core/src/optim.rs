//! Box regression loss, learning-rate schedule and the differential-rate
//! optimizer.
//!
//! The loss is `λ_l1 · mean|b − b̂| + λ_giou · (1 − GIoU(b, b̂))` on boxes
//! normalized by the search-crop size. Backbone parameters train at
//! `k · η(e)` and everything else at `η(e)`, where `η` warms up linearly and
//! then follows a cosine to `eta_min`.

use std::f64::consts::PI;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_l1: f64,
    pub lambda_giou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 5.0,
            lambda_giou: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0 && self.lambda_giou >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateRule {
    Adam,
    /// Plain gradient descent, used by the analytic tests.
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub eta_base: f64,
    pub backbone_factor: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub eta_min: f64,
    pub weight_decay: f64,
    pub rule: UpdateRule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            eta_base: 1e-4,
            backbone_factor: 0.1,
            warmup_epochs: 10,
            total_epochs: 100,
            eta_min: 1e-6,
            weight_decay: 1e-4,
            rule: UpdateRule::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.backbone_factor > 0.0 && self.backbone_factor <= 1.0) {
            return Err(Error::Config(format!(
                "optim.backbone_factor must lie in (0, 1], got {}",
                self.backbone_factor
            )));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "optim.warmup_epochs {} must be below optim.total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.eta_min >= 0.0 && self.eta_min < self.eta_base) {
            return Err(Error::Config("need 0 ≤ optim.eta_min < optim.eta_base".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("optim.weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_box(b: &BBox, which: &str) -> Result<()> {
    if !b.is_valid() {
        return Err(Error::Usage(format!("{which} box {b:?} needs finite, positive width and height")));
    }
    Ok(())
}

/// Generalized IoU: `IoU − |C \ (A ∪ B)| / |C|` with `C` the smallest
/// enclosing axis-aligned box.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    check_box(a, "first")?;
    check_box(b, "second")?;
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    Ok((inter / union).min(1.0) - (enclosing - union).max(0.0) / enclosing)
}

struct TapeBox {
    x1: Var,
    y1: Var,
    x2: Var,
    y2: Var,
    area: Var,
}

fn tape_box(tape: &mut Tape, b: Var) -> Result<TapeBox> {
    let x = tape.slice_flat(b, 0, 1)?;
    let y = tape.slice_flat(b, 1, 1)?;
    let w = tape.slice_flat(b, 2, 1)?;
    let h = tape.slice_flat(b, 3, 1)?;
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    Ok(TapeBox {
        x1: tape.sub(x, hw)?,
        y1: tape.sub(y, hh)?,
        x2: tape.add(x, hw)?,
        y2: tape.add(y, hh)?,
        area: tape.mul(w, h)?,
    })
}

/// Differentiable GIoU of two `[x, y, w, h]` vectors.
pub fn giou_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    for (v, which) in [(a, "first"), (b, "second")] {
        let d = tape.value(v).data();
        if d.len() != 4 {
            return Err(Error::Dimension(format!("{which} box must have 4 coordinates")));
        }
        check_box(&BBox::new(d[0], d[1], d[2], d[3]), which)?;
    }
    let a = tape_box(tape, a)?;
    let b = tape_box(tape, b)?;
    let ix2 = tape.minimum(a.x2, b.x2)?;
    let ix1 = tape.maximum(a.x1, b.x1)?;
    let iy2 = tape.minimum(a.y2, b.y2)?;
    let iy1 = tape.maximum(a.y1, b.y1)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let both = tape.add(a.area, b.area)?;
    let union = tape.sub(both, inter)?;
    let iou = tape.div(inter, union)?;
    let cx2 = tape.maximum(a.x2, b.x2)?;
    let cx1 = tape.minimum(a.x1, b.x1)?;
    let cy2 = tape.maximum(a.y2, b.y2)?;
    let cy1 = tape.minimum(a.y1, b.y1)?;
    let cw = tape.sub(cx2, cx1)?;
    let ch = tape.sub(cy2, cy1)?;
    let enclosing = tape.mul(cw, ch)?;
    let gap = tape.sub(enclosing, union)?;
    let penalty = tape.div(gap, enclosing)?;
    tape.sub(iou, penalty)
}

/// Composite regression loss on the tape.
///
/// `pred` is the decoded `[x, y, w, h]` before any size clamp. The ℓ1 term
/// uses it as is, so the corner spread always receives gradient; the GIoU
/// term sees width and height clamped to at least `min_size`, since GIoU is
/// only defined for boxes with positive extent.
pub fn loss_on_tape(tape: &mut Tape, pred: Var, gt: &BBox, cfg: &LossConfig, min_size: f64) -> Result<Var> {
    check_box(gt, "ground-truth")?;
    if let Some(v) = tape.value(pred).data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite box prediction {v}")));
    }
    let target = tape.constant(Tensor::vector(gt.to_array().to_vec()));
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    let l1 = tape.mean(abs);

    let xy = tape.slice_flat(pred, 0, 2)?;
    let wh = tape.slice_flat(pred, 2, 2)?;
    let floor = tape.constant(Tensor::full(&[2], min_size));
    let wh = tape.maximum(wh, floor)?;
    let clamped = tape.concat_flat(&[xy, wh])?;
    let g = giou_on_tape(tape, clamped, target)?;
    let g = tape.scale(g, -1.0);
    let giou_loss = tape.add_scalar(g, 1.0);

    let a = tape.scale(l1, cfg.lambda_l1);
    let b = tape.scale(giou_loss, cfg.lambda_giou);
    tape.add(a, b)
}

/// `λ_l1 · mean|b − b̂| + λ_giou · (1 − GIoU(b, b̂))` on normalized boxes.
pub fn total_loss(pred: &BBox, gt: &BBox, cfg: &LossConfig) -> Result<Tensor> {
    Ok(Tensor::scalar(total_loss_with_grad(pred, gt, cfg)?.0))
}

/// Loss value and its gradient with respect to `pred = [x, y, w, h]`.
pub fn total_loss_with_grad(pred: &BBox, gt: &BBox, cfg: &LossConfig) -> Result<(f64, [f64; 4])> {
    check_box(pred, "predicted")?;
    let mut tape = Tape::new();
    let p = tape.param(Tensor::vector(pred.to_array().to_vec()));
    let loss = loss_on_tape(&mut tape, p, gt, cfg, 0.0)?;
    let grads = tape.backward(loss)?;
    let g = grads.get_or_zeros(p, &[4]);
    let d = g.data();
    Ok((tape.value(loss).item()?, [d[0], d[1], d[2], d[3]]))
}

/// Learning rate at epoch `e` (0-based): linear warmup to `eta_base` over
/// `warmup_epochs`, then cosine annealing reaching `eta_min` on the last epoch.
pub fn lr_at_epoch(e: usize, cfg: &OptimizerConfig) -> Result<f64> {
    if e >= cfg.total_epochs {
        return Err(Error::Usage(format!(
            "epoch {e} outside 0..{}",
            cfg.total_epochs
        )));
    }
    let w = cfg.warmup_epochs;
    if e < w {
        return Ok(cfg.eta_base * ((e + 1) as f64 / w as f64));
    }
    let span = cfg.total_epochs - 1 - w;
    if span == 0 {
        return Ok(cfg.eta_min);
    }
    let phase = (e - w) as f64 / span as f64;
    Ok(cfg.eta_min + 0.5 * (cfg.eta_base - cfg.eta_min) * (1.0 + (PI * phase).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupKind {
    /// Transferred backbone weights, trained at `k · η`.
    Backbone,
    /// Adapters, fusion and head, trained at `η`.
    Fresh,
}

impl GroupKind {
    pub fn name(self) -> &'static str {
        match self {
            GroupKind::Backbone => "backbone",
            GroupKind::Fresh => "fresh",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub kind: GroupKind,
    pub names: Vec<String>,
    pub lr_factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroups {
    pub groups: Vec<ParamGroup>,
    pub warnings: Vec<String>,
}

impl ParamGroups {
    pub fn group(&self, kind: GroupKind) -> &ParamGroup {
        self.groups
            .iter()
            .find(|g| g.kind == kind)
            .expect("both groups are always present")
    }

    pub fn kind_of(&self, name: &str) -> Option<GroupKind> {
        self.groups
            .iter()
            .find(|g| g.names.iter().any(|n| n == name))
            .map(|g| g.kind)
    }
}

pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("tir_backbone.") || name.starts_with("depth_backbone.")
}

/// Splits parameter names into the backbone group (`lr_factor = k`) and the
/// fresh group (`lr_factor = 1`).
pub fn make_param_groups<'a>(names: impl IntoIterator<Item = &'a str>, cfg: &OptimizerConfig) -> ParamGroups {
    let (backbone, fresh): (Vec<String>, Vec<String>) = names
        .into_iter()
        .map(String::from)
        .partition(|n| is_backbone_param(n));
    let mut warnings = Vec::new();
    if backbone.is_empty() {
        let msg = "no backbone parameters found; every parameter trains at the base rate".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    ParamGroups {
        groups: vec![
            ParamGroup {
                kind: GroupKind::Backbone,
                names: backbone,
                lr_factor: cfg.backbone_factor,
            },
            ParamGroup {
                kind: GroupKind::Fresh,
                names: fresh,
                lr_factor: 1.0,
            },
        ],
        warnings,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub epoch: usize,
    pub lr_backbone: f64,
    pub lr_fresh: f64,
    pub grad_norm: f64,
}

/// Per-parameter update state across steps.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    groups: ParamGroups,
    first: ParamStore,
    second: ParamStore,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, groups: ParamGroups) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            groups,
            first: ParamStore::new(),
            second: ParamStore::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn groups(&self) -> &ParamGroups {
        &self.groups
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `θ ← θ − η_group(e)·(d + λ·θ)`, where `d` is the raw gradient (SGD) or
    /// the bias-corrected Adam direction. Aborts without touching any
    /// parameter if a gradient is not finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, epoch: usize) -> Result<StepReport> {
        let mut sq = 0.0;
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
            }
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        let lr = lr_at_epoch(epoch, &self.cfg)?;
        self.steps += 1;
        let t = self.steps as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        for group in &self.groups.groups {
            let eta = lr * group.lr_factor;
            for name in &group.names {
                let Some(g) = grads.get(name) else { continue };
                let theta = params
                    .get_mut(name)
                    .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter `{name}`")))?;
                if theta.shape() != g.shape() {
                    return Err(Error::Dimension(format!("gradient shape mismatch for `{name}`")));
                }
                match c.rule {
                    UpdateRule::Sgd => {
                        for (p, gv) in theta.data_mut().iter_mut().zip(g.data()) {
                            *p -= eta * (gv + c.weight_decay * *p);
                        }
                    }
                    UpdateRule::Adam => {
                        if !self.first.contains(name) {
                            self.first.insert(name.clone(), Tensor::zeros(g.shape()))?;
                            self.second.insert(name.clone(), Tensor::zeros(g.shape()))?;
                        }
                        let m = self.first.get_mut(name).expect("inserted above");
                        let v = self.second.get_mut(name).expect("inserted above");
                        let (m, v) = (m.data_mut(), v.data_mut());
                        for (i, (p, gv)) in theta.data_mut().iter_mut().zip(g.data()).enumerate() {
                            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gv;
                            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gv * gv;
                            let dir = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.adam_eps);
                            *p -= eta * (dir + c.weight_decay * *p);
                        }
                    }
                }
            }
        }
        Ok(StepReport {
            epoch,
            lr_backbone: lr * self.groups.group(GroupKind::Backbone).lr_factor,
            lr_fresh: lr * self.groups.group(GroupKind::Fresh).lr_factor,
            grad_norm: sq.sqrt(),
        })
    }
}
