//! Deterministic synthetic TIR-D sequences.
//!
//! The target is an anisotropic Gaussian blob in the thermal plane and an
//! elliptical region `depth_offset` metres in front of a flat background in
//! the depth plane. Its ground-truth box spans ±2σ on each axis. Distractors
//! are static warm blobs that sit on the background plane, so they can match
//! the target thermally but never in depth.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::geometry::{read_pgm16, write_pgm16, DEFAULT_HEIGHT, DEFAULT_MAX_RANGE, DEFAULT_WIDTH};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::track::{format_trace, read_trace, FramePair};

const BASE_LEVEL: f64 = 0.1;
const CLUTTER_BUMPS: usize = 6;
const SINE_AMPLITUDE: f64 = 12.0;
const SINE_WAVELENGTH: f64 = 80.0;
const PLACEMENT_ATTEMPTS: usize = 200;

const STREAM_PATH: u64 = 1;
const STREAM_CLUTTER: u64 = 2;
const STREAM_DISTRACTORS: u64 = 3;
const STREAM_TIR_NOISE: u64 = 4;
const STREAM_DEPTH_NOISE: u64 = 5;
const STREAM_SPARSITY: u64 = 6;
const STREAM_TEXTURE: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    Linear,
    Sinusoid,
}

impl PathKind {
    pub fn name(self) -> &'static str {
        match self {
            PathKind::Linear => "linear",
            PathKind::Sinusoid => "sinusoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(PathKind::Linear),
            "sinusoid" => Ok(PathKind::Sinusoid),
            other => Err(Error::Spec(format!("unknown path type `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Tir,
    /// Textured rectangle with hard edges and no thermal halo.
    Visible,
}

impl Modality {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "tir" | "thermal" => Ok(Modality::Tir),
            "visible" | "rgb" => Ok(Modality::Visible),
            other => Err(Error::Spec(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub path: PathKind,
    /// Pixels per frame along the path.
    pub speed: f64,
    pub size_min: f64,
    pub size_max: f64,
    /// Mean thermal excess of the target over the background inside its box.
    pub contrast: f64,
    /// Metres between the background plane and the target.
    pub depth_offset: f64,
    pub background_depth: f64,
    pub distractors: usize,
    pub distractor_contrast: f64,
    /// Peak amplitude of each static background bump.
    pub clutter: f64,
    pub tir_noise: f64,
    /// Depth noise sigma in metres.
    pub depth_noise: f64,
    pub lidar_sparsity: f64,
    pub max_range: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 60,
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            path: PathKind::Linear,
            speed: 1.0,
            size_min: 16.0,
            size_max: 28.0,
            contrast: 0.25,
            depth_offset: 1.5,
            background_depth: 6.0,
            distractors: 0,
            distractor_contrast: 0.25,
            clutter: 0.05,
            tir_noise: 0.01,
            depth_noise: 0.01,
            lidar_sparsity: 0.0,
            max_range: DEFAULT_MAX_RANGE,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.frames == 0 || self.width < 8 || self.height < 8 {
            return fail("need at least one frame and an 8×8 frame".into());
        }
        if !(self.size_min >= 2.0 && self.size_min <= self.size_max) {
            return fail(format!("size range [{}, {}] invalid", self.size_min, self.size_max));
        }
        if self.size_max > self.width.min(self.height) as f64 {
            return fail("target larger than the frame".into());
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) {
            return fail("speed must be finite and non-negative".into());
        }
        for (name, v) in [("contrast", self.contrast), ("distractor_contrast", self.distractor_contrast)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.max_range > 0.0 && self.background_depth > 0.0 && self.background_depth <= self.max_range) {
            return fail("need 0 < background_depth ≤ max_range".into());
        }
        if !(self.depth_offset > 0.0 && self.depth_offset < self.background_depth) {
            return fail("need 0 < depth_offset < background_depth".into());
        }
        if !(self.clutter >= 0.0 && self.tir_noise >= 0.0 && self.depth_noise >= 0.0) {
            return fail("clutter and noise levels must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.lidar_sparsity) {
            return fail("lidar_sparsity must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("frames", self.frames.to_string());
        kv("width", self.width.to_string());
        kv("height", self.height.to_string());
        kv("path", self.path.name().into());
        kv("speed", self.speed.to_string());
        kv("size_min", self.size_min.to_string());
        kv("size_max", self.size_max.to_string());
        kv("contrast", self.contrast.to_string());
        kv("depth_offset", self.depth_offset.to_string());
        kv("background_depth", self.background_depth.to_string());
        kv("distractors", self.distractors.to_string());
        kv("distractor_contrast", self.distractor_contrast.to_string());
        kv("clutter", self.clutter.to_string());
        kv("tir_noise", self.tir_noise.to_string());
        kv("depth_noise", self.depth_noise.to_string());
        kv("lidar_sparsity", self.lidar_sparsity.to_string());
        kv("max_range", self.max_range.to_string());
        s
    }

    /// Applies one key; unknown keys are a spec error.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let float = || v.parse::<f64>().map_err(|_| Error::Spec(format!("{key}: `{v}` is not a number")));
        let int = || v.parse::<usize>().map_err(|_| Error::Spec(format!("{key}: `{v}` is not a count")));
        match key.trim() {
            "seed" => self.seed = v.parse().map_err(|_| Error::Spec(format!("seed: `{v}` is not a u64")))?,
            "frames" => self.frames = int()?,
            "width" => self.width = int()?,
            "height" => self.height = int()?,
            "path" => self.path = PathKind::parse(v)?,
            "speed" => self.speed = float()?,
            "size_min" => self.size_min = float()?,
            "size_max" => self.size_max = float()?,
            "contrast" => self.contrast = float()?,
            "depth_offset" => self.depth_offset = float()?,
            "background_depth" => self.background_depth = float()?,
            "distractors" => self.distractors = int()?,
            "distractor_contrast" => self.distractor_contrast = float()?,
            "clutter" => self.clutter = float()?,
            "tir_noise" => self.tir_noise = float()?,
            "depth_noise" => self.depth_noise = float()?,
            "lidar_sparsity" => self.lidar_sparsity = float()?,
            "max_range" => self.max_range = float()?,
            other => return Err(Error::Spec(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SceneSpec::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Spec(format!("line `{line}` is not key=value")))?;
            spec.apply_kv(k, v)?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// One generated or loaded sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub spec: Option<SceneSpec>,
    pub frames: Vec<FramePair>,
    pub gt: Vec<BBox>,
}

/// Static anisotropic Gaussian `amp · exp(−dx²/2σx² − dy²/2σy²)`.
#[derive(Clone, Copy, Debug)]
struct Blob {
    x: f64,
    y: f64,
    sx: f64,
    sy: f64,
    amp: f64,
}

impl Blob {
    fn profile(&self, px: f64, py: f64) -> f64 {
        let dx = (px - self.x) / self.sx;
        let dy = (py - self.y) / self.sy;
        (-0.5 * (dx * dx + dy * dy)).exp()
    }

    /// Adds the blob to `plane`, only evaluating within 4σ.
    fn splat(&self, plane: &mut [f64], width: usize, height: usize) {
        let (x0, x1) = window(self.x, 4.0 * self.sx, width);
        let (y0, y1) = window(self.y, 4.0 * self.sy, height);
        for r in y0..y1 {
            for c in x0..x1 {
                plane[r * width + c] += self.amp * self.profile(c as f64 + 0.5, r as f64 + 0.5);
            }
        }
    }
}

fn window(center: f64, reach: f64, limit: usize) -> (usize, usize) {
    let lo = (center - reach).floor().max(0.0) as usize;
    let hi = ((center + reach).ceil().max(0.0) as usize).min(limit);
    (lo.min(limit), hi)
}

/// Pixels whose centres lie inside the box.
fn box_pixels(b: &BBox, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let (x1, y1, x2, y2) = b.corners();
    let cols = (x1 - 0.5).ceil().max(0.0) as usize..((x2 - 0.5).floor() + 1.0).clamp(0.0, width as f64) as usize;
    let rows = (y1 - 0.5).ceil().max(0.0) as usize..((y2 - 0.5).floor() + 1.0).clamp(0.0, height as f64) as usize;
    rows.flat_map(move |r| cols.clone().map(move |c| (c, r)))
}

/// A ±2σ blob whose mean over its own box pixels is exactly `contrast`.
fn blob_for_box(b: &BBox, contrast: f64, width: usize, height: usize) -> Blob {
    let mut blob = Blob {
        x: b.x,
        y: b.y,
        sx: b.w / 4.0,
        sy: b.h / 4.0,
        amp: 1.0,
    };
    let (mut sum, mut n) = (0.0, 0usize);
    for (c, r) in box_pixels(b, width, height) {
        sum += blob.profile(c as f64 + 0.5, r as f64 + 0.5);
        n += 1;
    }
    blob.amp = if n == 0 || contrast == 0.0 {
        0.0
    } else {
        contrast / (sum / n as f64)
    };
    blob
}

/// Target centres for every frame, fully inside the frame.
fn target_path(spec: &SceneSpec, rng: &mut SeededRng) -> Result<(Vec<(f64, f64)>, f64, f64)> {
    let w = rng.uniform(spec.size_min, spec.size_max);
    let h = rng.uniform(spec.size_min, spec.size_max);
    let (xmin, xmax) = (w / 2.0, spec.width as f64 - w / 2.0);
    let (ymin, ymax) = (h / 2.0, spec.height as f64 - h / 2.0);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let theta = rng.uniform(0.0, std::f64::consts::TAU);
        let (dx, dy) = (theta.cos(), theta.sin());
        let offsets: Vec<(f64, f64)> = (0..spec.frames)
            .map(|t| {
                let s = spec.speed * t as f64;
                let lateral = match spec.path {
                    PathKind::Linear => 0.0,
                    PathKind::Sinusoid => SINE_AMPLITUDE * (std::f64::consts::TAU * s / SINE_WAVELENGTH).sin(),
                };
                (s * dx - lateral * dy, s * dy + lateral * dx)
            })
            .collect();
        let lo_x = xmin - offsets.iter().map(|o| o.0).fold(f64::INFINITY, f64::min);
        let hi_x = xmax - offsets.iter().map(|o| o.0).fold(f64::NEG_INFINITY, f64::max);
        let lo_y = ymin - offsets.iter().map(|o| o.1).fold(f64::INFINITY, f64::min);
        let hi_y = ymax - offsets.iter().map(|o| o.1).fold(f64::NEG_INFINITY, f64::max);
        if lo_x <= hi_x && lo_y <= hi_y {
            let cx = rng.uniform(lo_x, hi_x);
            let cy = rng.uniform(lo_y, hi_y);
            let path = offsets.iter().map(|&(ox, oy)| (cx + ox, cy + oy)).collect();
            return Ok((path, w, h));
        }
    }
    Err(Error::Spec(format!(
        "a {:.1}×{:.1} target moving {} px/frame for {} frames cannot stay inside a {}×{} frame",
        w, h, spec.speed, spec.frames, spec.width, spec.height
    )))
}

fn clutter_field(spec: &SceneSpec) -> Vec<f64> {
    let (w, h) = (spec.width, spec.height);
    let mut plane = vec![BASE_LEVEL; w * h];
    let mut rng = SeededRng::derived(spec.seed, STREAM_CLUTTER);
    for _ in 0..CLUTTER_BUMPS {
        let s = rng.uniform(15.0, 40.0);
        let blob = Blob {
            x: rng.uniform(0.0, w as f64),
            y: rng.uniform(0.0, h as f64),
            sx: s,
            sy: s * rng.uniform(0.6, 1.4),
            amp: rng.uniform(0.0, spec.clutter),
        };
        blob.splat(&mut plane, w, h);
    }
    plane
}

fn distractor_boxes(spec: &SceneSpec) -> Vec<BBox> {
    let mut rng = SeededRng::derived(spec.seed, STREAM_DISTRACTORS);
    (0..spec.distractors)
        .map(|_| {
            let bw = rng.uniform(spec.size_min, spec.size_max);
            let bh = rng.uniform(spec.size_min, spec.size_max);
            let x = rng.uniform(bw / 2.0, spec.width as f64 - bw / 2.0);
            let y = rng.uniform(bh / 2.0, spec.height as f64 - bh / 2.0);
            BBox::new(x, y, bw, bh)
        })
        .collect()
}

fn plane(data: Vec<f64>, spec: &SceneSpec) -> Tensor {
    Tensor::new(vec![1, spec.height, spec.width], data).expect("frame shape")
}

fn ground_truth(spec: &SceneSpec) -> Result<Vec<BBox>> {
    spec.validate()?;
    let mut rng = SeededRng::derived(spec.seed, STREAM_PATH);
    let (path, w, h) = target_path(spec, &mut rng)?;
    Ok(path.into_iter().map(|(x, y)| BBox::new(x, y, w, h)).collect())
}

/// Thermal plane for one frame before noise.
fn thermal_frame(spec: &SceneSpec, clutter: &[f64], distractors: &[Blob], target: &BBox) -> Vec<f64> {
    let (w, h) = (spec.width, spec.height);
    let mut tir = clutter.to_vec();
    for d in distractors {
        d.splat(&mut tir, w, h);
    }
    blob_for_box(target, spec.contrast, w, h).splat(&mut tir, w, h);
    tir
}

fn depth_frame(spec: &SceneSpec, target: &BBox, noise: &mut SeededRng, holes: &mut SeededRng) -> Vec<f64> {
    let (w, h) = (spec.width, spec.height);
    let mut depth = vec![spec.background_depth; w * h];
    let (rx, ry) = (target.w / 2.0, target.h / 2.0);
    for (c, r) in box_pixels(target, w, h) {
        let dx = (c as f64 + 0.5 - target.x) / rx;
        let dy = (r as f64 + 0.5 - target.y) / ry;
        if dx * dx + dy * dy <= 1.0 {
            depth[r * w + c] = spec.background_depth - spec.depth_offset;
        }
    }
    for d in depth.iter_mut() {
        let z = (*d + noise.normal(spec.depth_noise)).clamp(0.0, spec.max_range);
        let z = if holes.bernoulli(spec.lidar_sparsity) { 0.0 } else { z };
        *d = millimetre_quantized(z) / spec.max_range;
    }
    depth
}

/// Rounds metres to whole millimetres, the resolution of the depth files.
fn millimetre_quantized(z: f64) -> f64 {
    (z * 1000.0).round() / 1000.0
}

fn add_noise(plane: &mut [f64], sigma: f64, rng: &mut SeededRng) {
    for v in plane.iter_mut() {
        *v = (*v + rng.normal(sigma)).clamp(0.0, 1.0);
    }
}

/// Aligned thermal and depth frames with per-frame ground truth.
pub fn gen_sequence(spec: &SceneSpec) -> Result<Sequence> {
    let gt = ground_truth(spec)?;
    let clutter = clutter_field(spec);
    let (w, h) = (spec.width, spec.height);
    let distractors: Vec<Blob> = distractor_boxes(spec)
        .iter()
        .map(|b| blob_for_box(b, spec.distractor_contrast, w, h))
        .collect();
    let mut tir_noise = SeededRng::derived(spec.seed, STREAM_TIR_NOISE);
    let mut depth_noise = SeededRng::derived(spec.seed, STREAM_DEPTH_NOISE);
    let mut holes = SeededRng::derived(spec.seed, STREAM_SPARSITY);
    let mut frames = Vec::with_capacity(spec.frames);
    for (t, target) in gt.iter().enumerate() {
        let mut tir = thermal_frame(spec, &clutter, &distractors, target);
        add_noise(&mut tir, spec.tir_noise, &mut tir_noise);
        let depth = depth_frame(spec, target, &mut depth_noise, &mut holes);
        frames.push(FramePair::new(plane(tir, spec), plane(depth, spec), t)?);
    }
    Ok(Sequence {
        name: format!("synth_{}", spec.seed),
        spec: Some(spec.clone()),
        frames,
        gt,
    })
}

/// One-modality sequence in the `tir` slot of each frame; the depth slot is
/// all zeros. The thermal variant is the thermal plane of [`gen_sequence`];
/// both variants share the motion path.
pub fn gen_single_modality(spec: &SceneSpec, modality: Modality) -> Result<Sequence> {
    let mut seq = match modality {
        Modality::Tir => gen_sequence(spec)?,
        Modality::Visible => gen_visible(spec)?,
    };
    for f in &mut seq.frames {
        f.depth = Tensor::zeros(f.depth.shape());
    }
    Ok(seq)
}

fn gen_visible(spec: &SceneSpec) -> Result<Sequence> {
    let gt = ground_truth(spec)?;
    let (w, h) = (spec.width, spec.height);
    let mut tex = SeededRng::derived(spec.seed, STREAM_TEXTURE);
    let background: Vec<f64> = (0..w * h).map(|_| 0.45 + tex.uniform(-0.05, 0.05)).collect();
    let distractors = distractor_boxes(spec);
    let mut noise = SeededRng::derived(spec.seed, STREAM_TIR_NOISE);
    let paint = |img: &mut [f64], b: &BBox, level: f64| {
        let (x1, _, _, _) = b.corners();
        for (c, r) in box_pixels(b, w, h) {
            let stripe = 0.08 * (std::f64::consts::TAU * (c as f64 + 0.5 - x1) / 4.0).sin();
            img[r * w + c] = 0.45 + level + stripe;
        }
    };
    let mut frames = Vec::with_capacity(spec.frames);
    for (t, target) in gt.iter().enumerate() {
        let mut img = background.clone();
        for d in &distractors {
            paint(&mut img, d, spec.distractor_contrast);
        }
        paint(&mut img, target, spec.contrast);
        add_noise(&mut img, spec.tir_noise, &mut noise);
        frames.push(FramePair::new(plane(img, spec), Tensor::zeros(&[1, h, w]), t)?);
    }
    Ok(Sequence {
        name: format!("visible_{}", spec.seed),
        spec: Some(spec.clone()),
        frames,
        gt,
    })
}

pub fn sequence_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("seq_{index:04}"))
}

fn to_u16(v: f64, scale: f64) -> u16 {
    (v * scale).round().clamp(0.0, u16::MAX as f64) as u16
}

/// Writes `seq_%04d/{tir,depth}/%06d.pgm`, `groundtruth.txt` and `spec.txt`.
/// Thermal values are stored as `round(v·65535)`, depth in millimetres.
pub fn write_dataset(sequences: &[Sequence], root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for (i, seq) in sequences.iter().enumerate() {
        let dir = sequence_dir(root, i);
        let max_range = seq.spec.as_ref().map_or(DEFAULT_MAX_RANGE, |s| s.max_range);
        for sub in ["tir", "depth"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (t, f) in seq.frames.iter().enumerate() {
            let (fw, fh) = (f.width(), f.height());
            let tir: Vec<u16> = f.tir.data().iter().map(|&v| to_u16(v, 65535.0)).collect();
            write_pgm16(&dir.join("tir").join(format!("{t:06}.pgm")), fw, fh, &tir)?;
            let depth: Vec<u16> = f.depth.data().iter().map(|&v| to_u16(v * max_range, 1000.0)).collect();
            write_pgm16(&dir.join("depth").join(format!("{t:06}.pgm")), fw, fh, &depth)?;
        }
        let gt = dir.join("groundtruth.txt");
        fs::write(&gt, format_trace(&seq.gt)).map_err(|e| Error::io(&gt, e))?;
        if let Some(spec) = &seq.spec {
            let p = dir.join("spec.txt");
            fs::write(&p, spec.to_kv()).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

fn frame_files(dir: &Path, seq: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|_| Error::Dataset {
        sequence: seq.to_string(),
        detail: format!("missing directory {}", dir.display()),
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads one `seq_*` directory.
pub fn read_sequence(dir: impl AsRef<Path>) -> Result<Sequence> {
    let dir = dir.as_ref();
    let name = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    let bad = |detail: String| Error::Dataset {
        sequence: name.clone(),
        detail,
    };
    let spec_path = dir.join("spec.txt");
    let spec = if spec_path.exists() {
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        Some(SceneSpec::parse(&text)?)
    } else {
        None
    };
    let max_range = spec.as_ref().map_or(DEFAULT_MAX_RANGE, |s| s.max_range);
    let tir_files = frame_files(&dir.join("tir"), &name)?;
    let depth_files = frame_files(&dir.join("depth"), &name)?;
    if tir_files.is_empty() {
        return Err(bad("no thermal frames".into()));
    }
    if tir_files.len() != depth_files.len() {
        return Err(bad(format!(
            "{} thermal frames but {} depth frames",
            tir_files.len(),
            depth_files.len()
        )));
    }
    let gt = read_trace(dir.join("groundtruth.txt"))?;
    if gt.len() != tir_files.len() {
        return Err(bad(format!("{} ground-truth lines for {} frames", gt.len(), tir_files.len())));
    }
    let mut frames = Vec::with_capacity(tir_files.len());
    for (t, (tp, dp)) in tir_files.iter().zip(&depth_files).enumerate() {
        let (w, h, tir) = read_pgm16(tp)?;
        let (dw, dh, depth) = read_pgm16(dp)?;
        if (w, h) != (dw, dh) {
            return Err(bad(format!("frame {t}: thermal {w}×{h} vs depth {dw}×{dh}")));
        }
        let tir = tir.iter().map(|&v| v as f64 / 65535.0).collect();
        let depth = depth.iter().map(|&v| v as f64 / 1000.0 / max_range).collect();
        frames.push(FramePair::new(
            Tensor::new(vec![1, h, w], tir)?,
            Tensor::new(vec![1, h, w], depth)?,
            t,
        )?);
    }
    Ok(Sequence {
        name,
        spec,
        frames,
        gt,
    })
}

/// Loads every `seq_*` directory under `root`, in name order.
pub fn read_dataset(root: impl AsRef<Path>) -> Result<Vec<Sequence>> {
    let root = root.as_ref();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seq_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Dataset {
            sequence: root.display().to_string(),
            detail: "no seq_* directories".into(),
        });
    }
    dirs.iter().map(read_sequence).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_kv_round_trip() {
        let spec = SceneSpec {
            seed: 42,
            path: PathKind::Sinusoid,
            distractors: 3,
            lidar_sparsity: 0.25,
            ..SceneSpec::default()
        };
        assert_eq!(SceneSpec::parse(&spec.to_kv()).unwrap(), spec);
        assert!(SceneSpec::parse("bogus=1").is_err());
    }

    #[test]
    fn impossible_path_is_a_spec_error() {
        let spec = SceneSpec {
            speed: 20.0,
            frames: 60,
            ..SceneSpec::default()
        };
        assert!(matches!(gen_sequence(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn box_pixels_cover_centres() {
        let b = BBox::new(5.0, 5.0, 4.0, 2.0);
        let px: Vec<_> = box_pixels(&b, 20, 20).collect();
        assert_eq!(px.len(), 8);
        assert!(px.contains(&(3, 4)) && px.contains(&(6, 5)));
    }
}
