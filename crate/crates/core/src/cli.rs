//! Command-line front end: argument parsing, command bodies and the exit
//! code contract.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | verification failure |
//! | 2 | input, usage, I/O or format error |
//! | 3 | transfer error |
//! | 4 | numeric error |

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{densify, render_depth_map, CameraModel, PointCloud};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::model::TrackerNet;
use crate::rng::SeededRng;
use crate::synth::{gen_sequence, gen_single_modality, read_dataset, read_sequence, write_dataset, Modality, SceneSpec, Sequence};
use crate::tensor::OpKind;
use crate::track::{evaluate_sequences, format_report, track_sequence, write_trace, TrackReport};
use crate::train::{train, EpochLog};
use crate::transfer::{cross_modal_init, load_checkpoint, save_checkpoint};
use crate::BBox;

pub const THREADS_ENV: &str = "TIRD_THREADS";

#[derive(Debug, Parser)]
#[command(name = "tird", version, about = "Thermal + depth single-object tracker")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenSynth(GenSynthArgs),
    /// Render a LiDAR point cloud into a 16-bit depth PGM.
    ProjectDepth(ProjectDepthArgs),
    /// Train a network, optionally starting from a transferred checkpoint.
    Train(TrainArgs),
    /// Track every sequence of a dataset and write prediction traces.
    Track(TrackArgs),
    /// Track and score one or more checkpoints.
    Eval(EvalArgs),
    /// Compare autodiff gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthModality {
    Dual,
    Tir,
    Visible,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub sequences: usize,
    #[arg(long, default_value_t = 60)]
    pub frames: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SynthModality::Dual)]
    pub modality: SynthModality,
    /// Scene spec override, e.g. `contrast=0.06`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ProjectDepthArgs {
    /// Text file of `x y z` lines.
    #[arg(long)]
    pub points: PathBuf,
    /// Camera `key=value` file; the default camera when omitted.
    #[arg(long)]
    pub camera: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Fill holes from neighbours within this pixel radius.
    #[arg(long, default_value_t = 0)]
    pub densify: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config override, e.g. `optim.eta_base=3e-4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Dataset root or sequence directory; repeatable.
    #[arg(long)]
    pub data: Vec<PathBuf>,
    /// Checkpoint to initialize from via cross-modal transfer.
    #[arg(long, conflicts_with = "init")]
    pub transfer: Option<PathBuf>,
    /// Checkpoint of the same architecture to continue training from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log (`epoch,loss,lr_fresh,lr_backbone`).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Vec<PathBuf>,
    /// Directory receiving one `<sequence>.txt` trace per sequence.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint to evaluate; repeatable.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Add a row whose predictions are the ground truth.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub sr_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of network parameter entries to sample.
    #[arg(long, default_value_t = 200)]
    pub params: usize,
    #[arg(long, hide = true, value_name = "OP")]
    pub corrupt: Option<String>,
}

/// Outcome of a command that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    VerificationFailed,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Transfer(_) => 3,
        Error::Numeric(_) => 4,
        _ => 2,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match run(&cli, out) {
        Ok(Status::Success) => 0,
        Ok(Status::VerificationFailed) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<Status> {
    match &cli.command {
        Command::GenSynth(a) => cmd_gen_synth(a, out),
        Command::ProjectDepth(a) => cmd_project_depth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Track(a) => cmd_track(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

fn emit(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    out.write_all(text.as_ref().as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

/// Per-sequence scene seeds derived from the command seed.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    SeededRng::derived(seed, index as u64).next_u64()
}

pub fn cmd_gen_synth(a: &GenSynthArgs, out: &mut dyn Write) -> Result<Status> {
    let mut base = SceneSpec {
        frames: a.frames,
        ..SceneSpec::default()
    };
    for pair in &a.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{pair}` is not key=value")))?;
        base.apply_kv(k, v)?;
    }
    let sequences = (0..a.sequences)
        .into_par_iter()
        .map(|i| {
            let spec = SceneSpec {
                seed: sequence_seed(a.seed, i),
                ..base.clone()
            };
            match a.modality {
                SynthModality::Dual => gen_sequence(&spec),
                SynthModality::Tir => gen_single_modality(&spec, Modality::Tir),
                SynthModality::Visible => gen_single_modality(&spec, Modality::Visible),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    write_dataset(&sequences, &a.out)?;
    emit(out, format!("wrote {} sequences to {}\n", sequences.len(), a.out.display()))?;
    Ok(Status::Success)
}

pub fn cmd_project_depth(a: &ProjectDepthArgs, out: &mut dyn Write) -> Result<Status> {
    let cloud = PointCloud::read(&a.points).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", a.points.display())),
        other => other,
    })?;
    let cam = match &a.camera {
        Some(p) => CameraModel::read(p)?,
        None => CameraModel::default(),
    };
    let mut map = render_depth_map(&cloud, &cam);
    if a.densify > 0 {
        map = densify(&map, a.densify);
    }
    map.write_pgm(&a.out)?;
    let filled = map.to_millimetres().iter().filter(|&&v| v > 0).count();
    emit(
        out,
        format!("projected {} points, {filled} pixels filled, wrote {}\n", cloud.len(), a.out.display()),
    )?;
    Ok(Status::Success)
}

/// Loads the config file, applies `--seed` and `--set` on top.
pub fn load_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    for pair in &run.set {
        cfg.apply_pair(pair)?;
    }
    if let Some(s) = run.seed {
        cfg.apply_kv("seed", &s.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads each path as a single sequence directory if it holds a `tir/`
/// subdirectory, otherwise as a dataset root.
pub fn load_data(paths: &[PathBuf]) -> Result<Vec<Sequence>> {
    if paths.is_empty() {
        return Err(Error::Usage("no dataset given (--data or `data=` in the config)".into()));
    }
    let mut out = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::Usage(format!("dataset path {} does not exist", p.display())));
        }
        if p.join("tir").is_dir() {
            out.push(read_sequence(p)?);
        } else {
            out.extend(read_dataset(p)?);
        }
    }
    Ok(out)
}

fn data_paths<'a>(flag: &'a [PathBuf], cfg: &'a RunConfig) -> &'a [PathBuf] {
    if flag.is_empty() {
        &cfg.data
    } else {
        flag
    }
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<Status> {
    let cfg = load_config(&a.run)?;
    let data = load_data(data_paths(&a.data, &cfg))?;
    let mut net = match &a.init {
        Some(p) => {
            let net = load_checkpoint(p)?.to_net()?;
            if net.config() != &cfg.model || net.streams() != cfg.streams {
                return Err(Error::Config(format!(
                    "{} holds a {} net that differs from the configured architecture",
                    p.display(),
                    net.streams().name()
                )));
            }
            net
        }
        None => TrackerNet::new(cfg.model.clone(), cfg.streams, cfg.seed)?,
    };
    let transfer = if a.init.is_some() {
        None
    } else {
        a.transfer.as_ref().or(cfg.transfer_source.as_ref())
    };
    if let Some(src) = transfer {
        let ckpt = load_checkpoint(src).map_err(|e| Error::Transfer(format!("cannot load {}: {e}", src.display())))?;
        let report = cross_modal_init(&mut net, &ckpt, cfg.transfer_scope)?;
        emit(
            out,
            format!(
                "transfer scope={} transferred={} fresh={} ignored={}\n",
                cfg.transfer_scope.name(),
                report.transferred.len(),
                report.fresh.len(),
                report.ignored.len()
            ),
        )?;
    }
    let mut log_file = match &a.log {
        Some(p) => {
            let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{}", EpochLog::HEADER).map_err(|e| Error::io(p, e))?;
            Some((p.clone(), f))
        }
        None => None,
    };
    let mut io_error = None;
    emit(out, format!("{}\n", EpochLog::HEADER))?;
    let outcome = train(&mut net, &data, &cfg.train, |log| {
        let line = format!("{log}\n");
        if let Some((p, f)) = &mut log_file {
            if let Err(e) = f.write_all(line.as_bytes()) {
                io_error.get_or_insert(Error::io(p.as_path(), e));
            }
        }
        if let Err(e) = out.write_all(line.as_bytes()) {
            io_error.get_or_insert(Error::io("<stdout>", e));
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    save_checkpoint(&net, &a.out)?;
    emit(out, format!("saved {}\n", a.out.display()))?;
    Ok(Status::Success)
}

/// Tracks every sequence with at most `threads` workers; results follow
/// sequence-name order.
pub fn track_all(net: &TrackerNet, data: &[Sequence], cfg: &RunConfig, threads: usize) -> Result<Vec<(String, Vec<BBox>)>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {threads} threads: {e}")))?;
    let mut runs = pool.install(|| {
        data.par_iter()
            .map(|seq| {
                let first = *seq.gt.first().ok_or_else(|| Error::Dataset {
                    sequence: seq.name.clone(),
                    detail: "empty ground truth".into(),
                })?;
                let preds = track_sequence(&seq.frames, first, net, &cfg.train.track)?;
                Ok((seq.name.clone(), preds))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    runs.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(runs)
}

/// Worker count from `TIRD_THREADS`, default 1.
pub fn eval_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Usage(format!("{THREADS_ENV}=`{v}` is not a positive integer"))),
        },
    }
}

fn tracker_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn cmd_track(a: &TrackArgs, out: &mut dyn Write) -> Result<Status> {
    let cfg = load_config(&a.run)?;
    let data = load_data(data_paths(&a.data, &cfg))?;
    let net = load_checkpoint(&a.checkpoint)?.to_net()?;
    let runs = track_all(&net, &data, &cfg, eval_threads()?)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (name, preds) in &runs {
        let path = a.out.join(format!("{name}.txt"));
        write_trace(&path, preds)?;
        emit(out, format!("{name} frames={} -> {}\n", preds.len(), path.display()))?;
    }
    Ok(Status::Success)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<Status> {
    let mut cfg = load_config(&a.run)?;
    if let Some(t) = a.sr_threshold {
        cfg.sr_threshold = t;
        cfg.validate()?;
    }
    if a.checkpoint.is_empty() && !a.oracle {
        return Err(Error::Usage("nothing to evaluate: give --checkpoint or --oracle".into()));
    }
    let mut data = load_data(data_paths(&a.data, &cfg))?;
    data.sort_by(|x, y| x.name.cmp(&y.name));
    let eval_cfg = cfg.eval_config();
    let threads = eval_threads()?;
    let mut reports: Vec<(String, TrackReport)> = Vec::new();
    if a.oracle {
        let runs: Vec<(Vec<BBox>, Vec<BBox>)> = data.iter().map(|s| (s.gt.clone(), s.gt.clone())).collect();
        reports.push(("oracle".into(), evaluate_sequences(&runs, &eval_cfg)?));
    }
    for path in &a.checkpoint {
        let net = load_checkpoint(path)?.to_net()?;
        let tracked = track_all(&net, &data, &cfg, threads)?;
        let runs: Vec<(Vec<BBox>, Vec<BBox>)> = tracked
            .into_iter()
            .zip(&data)
            .map(|((_, preds), seq)| (preds, seq.gt.clone()))
            .collect();
        reports.push((tracker_name(path), evaluate_sequences(&runs, &eval_cfg)?));
    }
    let mut text = format_report(&reports, cfg.sr_threshold)?;
    for (name, r) in &reports {
        text.push('\n');
        text.push_str(&format!("tracker={name}\n"));
        text.push_str(&r.kv_block());
    }
    emit(out, text)?;
    Ok(Status::Success)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<Status> {
    let cfg = load_config(&a.run)?;
    let corrupt = match &a.corrupt {
        Some(name) => Some(OpKind::parse(name).ok_or_else(|| Error::Usage(format!("unknown op `{name}`")))?),
        None => None,
    };
    let gc = GradcheckConfig {
        n_params: a.params,
        seed: cfg.seed,
        model: cfg.model.clone(),
        corrupt,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&gc)?;
    emit(out, report.render())?;
    Ok(if report.passed() {
        Status::Success
    } else {
        Status::VerificationFailed
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let c = main_with(std::iter::once("tird").chain(args.iter().copied()), &mut out, &mut err);
        (c, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn exit_codes_follow_the_error_kind() {
        assert_eq!(exit_code(&Error::Usage("x".into())), 2);
        assert_eq!(exit_code(&Error::Format("x".into())), 2);
        assert_eq!(exit_code(&Error::Transfer("x".into())), 3);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 4);
    }

    #[test]
    fn bad_flags_are_usage_errors() {
        assert_eq!(code(&["no-such-command"]).0, 2);
        assert_eq!(code(&["gen-synth"]).0, 2);
        let (c, out, _) = code(&["--help"]);
        assert_eq!(c, 0);
        assert!(out.contains("gen-synth"));
    }

    #[test]
    fn unknown_corrupt_op_is_rejected() {
        let (c, _, err) = code(&["gradcheck", "--corrupt", "nonsense", "--params", "6"]);
        assert_eq!(c, 2, "{err}");
        assert!(err.contains("nonsense"));
    }
}
