//! Finite-difference verification of the autodiff engine.
//!
//! Two layers: every primitive is checked in isolation through a
//! vector-Jacobian product against central differences of `⟨op(x), r⟩`,
//! then a sample of individual parameters of a full network is checked
//! through the training loss.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, NetInput, Streams, TrackerNet};
use crate::optim::{loss_on_tape, LossConfig};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::{OpKind, Tape, Tensor, Var};
use crate::BBox;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Gradients whose analytic and numeric magnitudes both fall below this
    /// are compared in absolute rather than relative terms.
    pub abs_floor: f64,
    pub n_params: usize,
    pub seed: u64,
    pub model: ModelConfig,
    /// Test hook: scale the backward rule of this op.
    pub corrupt: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-5,
            n_params: 200,
            seed: 0,
            model: ModelConfig::default(),
            corrupt: None,
        }
    }
}

impl GradcheckConfig {
    fn rel_err(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.abs_floor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub kind: OpKind,
    pub max_rel_err: f64,
    pub entries: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub ops: Vec<OpCheck>,
    pub params: Vec<ParamCheck>,
    /// Sampled entries whose `±eps` step crossed a kink and were measured
    /// with the unperturbed branch pattern held fixed.
    pub frozen_branch_entries: usize,
}

impl GradcheckReport {
    pub fn failing_ops(&self) -> Vec<OpKind> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.kind).collect()
    }

    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed) && self.params.iter().all(|p| p.passed)
    }

    /// Largest relative error per component prefix of the sampled parameters.
    pub fn component_summary(&self) -> Vec<(String, usize, f64)> {
        let mut out: Vec<(String, usize, f64)> = Vec::new();
        for p in &self.params {
            let comp = p.name.split('.').next().unwrap_or("").to_string();
            match out.iter_mut().find(|(c, _, _)| *c == comp) {
                Some(e) => {
                    e.1 += 1;
                    e.2 = e.2.max(p.rel_err);
                }
                None => out.push((comp, 1, p.rel_err)),
            }
        }
        out
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "op                max_rel_err  entries  status");
        for o in &self.ops {
            let _ = writeln!(
                s,
                "{:<16}  {:>11.3e}  {:>7}  {}",
                o.kind.name(),
                o.max_rel_err,
                o.entries,
                if o.passed { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(s, "component         max_rel_err  sampled");
        for (c, n, e) in self.component_summary() {
            let _ = writeln!(s, "{c:<16}  {e:>11.3e}  {n:>7}");
        }
        for p in self.params.iter().filter(|p| !p.passed) {
            let _ = writeln!(
                s,
                "FAIL {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                p.name, p.index, p.analytic, p.numeric, p.rel_err
            );
        }
        let _ = writeln!(
            s,
            "params_checked={} frozen_branch_entries={} tolerance={:e}",
            self.params.len(),
            self.frozen_branch_entries,
            self.tolerance
        );
        for k in self.failing_ops() {
            let _ = writeln!(s, "failing_op={}", k.name());
        }
        let _ = writeln!(s, "result={}", if self.passed() { "pass" } else { "fail" });
        s
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    kind: OpKind,
    inputs: Vec<Tensor>,
    build: Build,
}

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).expect("shape")
}

/// Entries with magnitude in `[0.2, 1]` and random sign, away from kinks at 0.
fn away_from_zero(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let mut t = random(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.2 + 0.8 * v.abs());
    }
    t
}

fn cases(rng: &mut SeededRng) -> Vec<Case> {
    let mut c: Vec<Case> = Vec::new();
    let mut add = |kind, inputs: Vec<Tensor>, build: Build| c.push(Case { kind, inputs, build });
    add(OpKind::MatMul, vec![random(&[3, 4], rng), random(&[4, 2], rng)], Box::new(|t, v| t.matmul(v[0], v[1])));
    add(OpKind::Transpose, vec![random(&[3, 4], rng)], Box::new(|t, v| t.transpose(v[0])));
    add(
        OpKind::Conv2d,
        vec![random(&[2, 5, 5], rng), random(&[3, 2, 3, 3], rng)],
        Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1)),
    );
    add(
        OpKind::Conv2d,
        vec![random(&[2, 6, 6], rng), random(&[3, 2, 3, 3], rng)],
        Box::new(|t, v| t.conv2d_padded(v[0], v[1], 2, 0, 1)),
    );
    add(
        OpKind::Conv2d,
        vec![random(&[3, 4, 4], rng), random(&[2, 3, 1, 1], rng)],
        Box::new(|t, v| t.conv2d(v[0], v[1], 1, 0)),
    );
    add(OpKind::Relu, vec![away_from_zero(&[4, 5], rng)], Box::new(|t, v| Ok(t.relu(v[0]))));
    add(OpKind::Softmax, vec![random(&[3, 4], rng)], Box::new(|t, v| t.softmax(v[0], 1)));
    add(OpKind::Softmax, vec![random(&[3, 4], rng)], Box::new(|t, v| t.softmax(v[0], 0)));
    add(
        OpKind::LayerNorm,
        vec![random(&[3, 5], rng), random(&[5], rng), random(&[5], rng)],
        Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
    );
    add(OpKind::Add, vec![random(&[2, 3], rng), random(&[2, 3], rng)], Box::new(|t, v| t.add(v[0], v[1])));
    add(OpKind::Sub, vec![random(&[2, 3], rng), random(&[2, 3], rng)], Box::new(|t, v| t.sub(v[0], v[1])));
    add(OpKind::Mul, vec![random(&[2, 3], rng), random(&[2, 3], rng)], Box::new(|t, v| t.mul(v[0], v[1])));
    add(
        OpKind::Div,
        vec![random(&[2, 3], rng), away_from_zero(&[2, 3], rng)],
        Box::new(|t, v| t.div(v[0], v[1])),
    );
    let a = random(&[2, 3], rng);
    let mut b = a.clone();
    for (i, x) in b.data_mut().iter_mut().enumerate() {
        *x += if i % 2 == 0 { 0.3 } else { -0.3 };
    }
    add(OpKind::Maximum, vec![a.clone(), b.clone()], Box::new(|t, v| t.maximum(v[0], v[1])));
    add(OpKind::Minimum, vec![a, b], Box::new(|t, v| t.minimum(v[0], v[1])));
    add(OpKind::Abs, vec![away_from_zero(&[2, 3], rng)], Box::new(|t, v| Ok(t.abs(v[0]))));
    add(OpKind::Scale, vec![random(&[2, 3], rng)], Box::new(|t, v| Ok(t.scale(v[0], -1.7))));
    add(OpKind::AddScalar, vec![random(&[2, 3], rng)], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.4))));
    add(OpKind::Sum, vec![random(&[2, 3], rng)], Box::new(|t, v| Ok(t.sum(v[0]))));
    add(OpKind::Reshape, vec![random(&[2, 3], rng)], Box::new(|t, v| t.reshape(v[0], &[3, 2])));
    add(
        OpKind::AddBias,
        vec![random(&[3, 4], rng), random(&[4], rng)],
        Box::new(|t, v| t.add_bias(v[0], v[1])),
    );
    add(
        OpKind::AddChannelBias,
        vec![random(&[2, 3, 3], rng), random(&[2], rng)],
        Box::new(|t, v| t.add_channel_bias(v[0], v[1])),
    );
    add(OpKind::SliceCols, vec![random(&[3, 5], rng)], Box::new(|t, v| t.slice_cols(v[0], 1, 4)));
    add(
        OpKind::ConcatCols,
        vec![random(&[3, 2], rng), random(&[3, 1], rng)],
        Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
    );
    add(OpKind::SliceRows, vec![random(&[4, 3], rng)], Box::new(|t, v| t.slice_rows(v[0], 1, 3)));
    add(
        OpKind::ConcatRows,
        vec![random(&[1, 3], rng), random(&[2, 3], rng)],
        Box::new(|t, v| t.concat_rows(&[v[0], v[1]])),
    );
    add(OpKind::SliceFlat, vec![random(&[2, 3], rng)], Box::new(|t, v| t.slice_flat(v[0], 2, 3)));
    add(
        OpKind::ConcatFlat,
        vec![random(&[2, 2], rng), random(&[3], rng)],
        Box::new(|t, v| t.concat_flat(&[v[0], v[1]])),
    );
    c
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn check_case(case: &Case, cfg: &GradcheckConfig, rng: &mut SeededRng) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    if let Some(k) = cfg.corrupt {
        tape.corrupt_backward(k);
    }
    let vars: Vec<Var> = case.inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let seed = random(tape.value(out).shape(), rng);
    let grads = tape.backward_from(out, &seed)?;
    let probe = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let o = (case.build)(&mut t, &vs)?;
        Ok(dot(t.value(o), &seed))
    };
    let mut worst = 0.0f64;
    let mut entries = 0;
    for (i, (x, &v)) in case.inputs.iter().zip(&vars).enumerate() {
        let g = grads.get_or_zeros(v, x.shape());
        for j in 0..x.numel() {
            let mut inputs = case.inputs.clone();
            inputs[i].data_mut()[j] = x.data()[j] + cfg.eps;
            let plus = probe(&inputs)?;
            inputs[i].data_mut()[j] = x.data()[j] - cfg.eps;
            let minus = probe(&inputs)?;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            worst = worst.max(cfg.rel_err(g.data()[j], numeric));
            entries += 1;
        }
    }
    Ok((worst, entries))
}

/// Checks every differentiable primitive; results are per op kind.
pub fn check_primitives(cfg: &GradcheckConfig) -> Result<Vec<OpCheck>> {
    let mut rng = SeededRng::derived(cfg.seed, 0x6f70);
    let mut out: Vec<OpCheck> = Vec::new();
    for case in cases(&mut rng) {
        let (err, n) = check_case(&case, cfg, &mut rng)?;
        match out.iter_mut().find(|o| o.kind == case.kind) {
            Some(o) => {
                o.max_rel_err = o.max_rel_err.max(err);
                o.entries += n;
                o.passed = o.max_rel_err < cfg.tolerance;
            }
            None => out.push(OpCheck {
                kind: case.kind,
                max_rel_err: err,
                entries: n,
                passed: err < cfg.tolerance,
            }),
        }
    }
    Ok(out)
}

struct Probe<'a> {
    net: &'a TrackerNet,
    input: NetInput,
    target: BBox,
}

impl Probe<'_> {
    /// Loss tape over `params`, recording branch decisions; optionally
    /// replaying a fixed branch pattern.
    fn run(&self, params: &ParamStore, grad: bool, corrupt: Option<OpKind>, replay: Option<&[bool]>) -> Result<(Tape, Vec<(String, Var)>, Var)> {
        let mut tape = Tape::new();
        if let Some(k) = corrupt {
            tape.corrupt_backward(k);
        }
        tape.record_branches();
        if let Some(p) = replay {
            tape.replay_branches(p.to_vec());
        }
        let bound = params.bind(&mut tape, grad);
        let out = self.net.forward(&mut tape, &bound, &self.input)?;
        let s = self.net.config().search_size as f64;
        let pred = tape.scale(out.raw_box, 1.0 / s);
        let loss = loss_on_tape(&mut tape, pred, &self.target, &LossConfig::default(), 1.0 / s)?;
        let vars = bound.iter().map(|(n, v)| (n.to_string(), v)).collect();
        Ok((tape, vars, loss))
    }

    fn value(&self, params: &ParamStore, replay: Option<&[bool]>) -> Result<(f64, Vec<bool>)> {
        let (tape, _, loss) = self.run(params, false, None, replay)?;
        Ok((tape.value(loss).item()?, tape.branch_pattern().to_vec()))
    }
}

const COMPONENTS: [&str; 6] = ["tir_adapter.", "depth_adapter.", "tir_backbone.", "depth_backbone.", "fusion.", "head."];

/// Samples at least `cfg.n_params` individual parameter entries spread
/// evenly over adapters, both backbones, fusion and head of a dual network
/// and compares their loss gradients with central differences.
///
/// When a `±eps` step flips a branch of some `relu`, `maximum`, `minimum`
/// or `abs` element, the plain difference quotient straddles a kink and
/// does not estimate the derivative. Such entries are re-measured with the
/// branch pattern of the unperturbed point held fixed and counted in the
/// second return value.
pub fn check_model(cfg: &GradcheckConfig) -> Result<(Vec<ParamCheck>, usize)> {
    let net = TrackerNet::new(cfg.model.clone(), Streams::Dual, cfg.seed)?;
    let mut rng = SeededRng::derived(cfg.seed, 0x6d6f);
    let mc = net.config();
    let plane = |size: usize, rng: &mut SeededRng| {
        Tensor::new(vec![1, size, size], (0..size * size).map(|_| rng.uniform(0.0, 1.0)).collect()).expect("shape")
    };
    let input = NetInput {
        template: (0..2).map(|_| plane(mc.template_size, &mut rng)).collect(),
        search: (0..2).map(|_| plane(mc.search_size, &mut rng)).collect(),
    };
    let target = BBox::new(rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3));
    let probe = Probe {
        net: &net,
        input,
        target,
    };

    let (tape, vars, loss) = probe.run(net.params(), true, cfg.corrupt, None)?;
    let base_pattern = tape.branch_pattern().to_vec();
    let grads = tape.backward(loss)?;
    drop(tape);

    let per_component = cfg.n_params.div_ceil(COMPONENTS.len());
    let mut checks = Vec::new();
    let mut frozen = 0usize;
    for prefix in COMPONENTS {
        let names: Vec<&(String, Var)> = vars.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
        if names.is_empty() {
            return Err(Error::Usage(format!("network has no `{prefix}*` parameters")));
        }
        for _ in 0..per_component {
            let (name, var) = names[rng.below(names.len())];
            let value = net.params().get(name).expect("bound name");
            let index = rng.below(value.numel());
            let analytic = grads.get_or_zeros(*var, value.shape()).data()[index];
            let x = value.data()[index];
            let mut plus = net.params().clone();
            plus.get_mut(name).expect("name").data_mut()[index] = x + cfg.eps;
            let mut minus = net.params().clone();
            minus.get_mut(name).expect("name").data_mut()[index] = x - cfg.eps;
            let (mut fp, pp) = probe.value(&plus, None)?;
            let (mut fm, pm) = probe.value(&minus, None)?;
            if pp != base_pattern || pm != base_pattern {
                frozen += 1;
                fp = probe.value(&plus, Some(&base_pattern))?.0;
                fm = probe.value(&minus, Some(&base_pattern))?.0;
            }
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let rel_err = cfg.rel_err(analytic, numeric);
            checks.push(ParamCheck {
                name: name.clone(),
                index,
                analytic,
                numeric,
                rel_err,
                passed: rel_err < cfg.tolerance,
            });
        }
    }
    Ok((checks, frozen))
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let ops = check_primitives(cfg)?;
    let (params, frozen_branch_entries) = check_model(cfg)?;
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        ops,
        params,
        frozen_branch_entries,
    })
}
