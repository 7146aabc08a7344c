//! Online tracking loop and the tracking metric suite.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::model::{NetInput, Streams, TrackerNet, MIN_BOX_SIZE};
use crate::tensor::Tensor;

/// Aligned thermal and depth frames, each `1×H×W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub tir: Tensor,
    pub depth: Tensor,
    pub index: usize,
}

impl FramePair {
    pub fn new(tir: Tensor, depth: Tensor, index: usize) -> Result<Self> {
        if tir.rank() != 3 || tir.shape()[0] != 1 || tir.shape() != depth.shape() {
            return Err(Error::Dimension(format!(
                "frame {index}: expected two 1×H×W planes of equal size, got {:?} and {:?}",
                tir.shape(),
                depth.shape()
            )));
        }
        Ok(Self { tir, depth, index })
    }

    pub fn height(&self) -> usize {
        self.tir.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tir.shape()[2]
    }
}

/// Affine map between crop pixels and image pixels:
/// `image = origin + scale · crop` on both axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropMapping {
    pub origin_x: f64,
    pub origin_y: f64,
    /// Image pixels per crop pixel.
    pub scale: f64,
    pub out_size: usize,
}

impl CropMapping {
    pub fn to_image(&self, u: f64, v: f64) -> (f64, f64) {
        (self.origin_x + self.scale * u, self.origin_y + self.scale * v)
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin_x) / self.scale, (y - self.origin_y) / self.scale)
    }

    pub fn box_to_image(&self, b: &BBox) -> BBox {
        let (x, y) = self.to_image(b.x, b.y);
        BBox::new(x, y, b.w * self.scale, b.h * self.scale)
    }

    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let (x, y) = self.to_crop(b.x, b.y);
        BBox::new(x, y, b.w / self.scale, b.h / self.scale)
    }
}

/// Mapping for a square crop of side `scale·sqrt(w·h)` centred on `b`.
pub fn crop_mapping(b: &BBox, scale: f64, out_size: usize) -> Result<CropMapping> {
    if !b.is_valid() {
        return Err(Error::Usage(format!("cannot crop around degenerate box {b:?}")));
    }
    if !(scale > 0.0) || out_size == 0 {
        return Err(Error::Usage("crop scale and size must be positive".into()));
    }
    let side = scale * (b.w * b.h).sqrt();
    Ok(CropMapping {
        origin_x: b.x - side / 2.0,
        origin_y: b.y - side / 2.0,
        scale: side / out_size as f64,
        out_size,
    })
}

/// Bilinear resample of one `1×H×W` plane. Crop pixel centres whose image
/// position lies outside `[0, W]×[0, H]` take the mean of the in-image samples.
fn resample(plane: &Tensor, m: &CropMapping) -> Tensor {
    let (h, w) = (plane.shape()[1], plane.shape()[2]);
    let src = plane.data();
    let n = m.out_size;
    let mut out = vec![0.0; n * n];
    let mut inside = vec![false; n * n];
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..n {
        for j in 0..n {
            let (x, y) = m.to_image(j as f64 + 0.5, i as f64 + 0.5);
            if !(0.0..=w as f64).contains(&x) || !(0.0..=h as f64).contains(&y) {
                continue;
            }
            let px = (x - 0.5).clamp(0.0, (w - 1) as f64);
            let py = (y - 0.5).clamp(0.0, (h - 1) as f64);
            let (c0, r0) = (px.floor() as usize, py.floor() as usize);
            let (c1, r1) = ((c0 + 1).min(w - 1), (r0 + 1).min(h - 1));
            let (fx, fy) = (px - c0 as f64, py - r0 as f64);
            let top = src[r0 * w + c0] * (1.0 - fx) + src[r0 * w + c1] * fx;
            let bottom = src[r1 * w + c0] * (1.0 - fx) + src[r1 * w + c1] * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            out[i * n + j] = v;
            inside[i * n + j] = true;
            sum += v;
            count += 1;
        }
    }
    let fill = if count > 0 {
        sum / count as f64
    } else {
        src.iter().sum::<f64>() / src.len() as f64
    };
    for (v, ok) in out.iter_mut().zip(&inside) {
        if !ok {
            *v = fill;
        }
    }
    Tensor::new(vec![1, n, n], out).expect("crop shape")
}

/// Square crop around `b` resampled to `out_size×out_size`, with the mapping
/// back to image coordinates.
pub fn crop_region(frame: &FramePair, b: &BBox, scale: f64, out_size: usize) -> Result<(FramePair, CropMapping)> {
    let m = crop_mapping(b, scale, out_size)?;
    let crop = FramePair {
        tir: resample(&frame.tir, &m),
        depth: resample(&frame.depth, &m),
        index: frame.index,
    };
    Ok((crop, m))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackConfig {
    pub template_scale: f64,
    pub search_scale: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            template_scale: 2.0,
            search_scale: 5.0,
        }
    }
}

/// Where the current search crop sits in the frame.
#[derive(Clone, Copy, Debug)]
pub struct SearchView {
    pub frame_index: usize,
    pub mapping: CropMapping,
}

/// Anything that turns a template crop and a search crop into a box in
/// search-crop pixels.
pub trait CropTracker {
    fn template_size(&self) -> usize;
    fn search_size(&self) -> usize;
    fn predict(&self, template: &FramePair, search: &FramePair, view: &SearchView) -> Result<BBox>;
}

/// Stacks the planes a net of the given layout consumes.
pub fn net_input(streams: Streams, template: &FramePair, search: &FramePair) -> NetInput {
    match streams {
        Streams::Single => NetInput {
            template: vec![template.tir.clone()],
            search: vec![search.tir.clone()],
        },
        Streams::Dual => NetInput {
            template: vec![template.tir.clone(), template.depth.clone()],
            search: vec![search.tir.clone(), search.depth.clone()],
        },
    }
}

impl CropTracker for TrackerNet {
    fn template_size(&self) -> usize {
        self.config().template_size
    }

    fn search_size(&self) -> usize {
        self.config().search_size
    }

    fn predict(&self, template: &FramePair, search: &FramePair, _view: &SearchView) -> Result<BBox> {
        let (b, _) = TrackerNet::predict(self, &net_input(self.streams(), template, search))?;
        Ok(b)
    }
}

/// Runs the tracker over `frames`. `output[0]` is `init_box`; later frames
/// search around the last present prediction. A numeric failure on one
/// frame records an absent box and tracking continues.
pub fn track_sequence(
    frames: &[FramePair],
    init_box: BBox,
    tracker: &dyn CropTracker,
    cfg: &TrackConfig,
) -> Result<Vec<BBox>> {
    let first = frames.first().ok_or_else(|| Error::Usage("empty sequence".into()))?;
    let (template, _) = crop_region(first, &init_box, cfg.template_scale, tracker.template_size())?;
    let (fw, fh) = (first.width() as f64, first.height() as f64);
    let mut out = Vec::with_capacity(frames.len());
    out.push(init_box);
    let mut anchor = init_box;
    for frame in &frames[1..] {
        let (search, mapping) = crop_region(frame, &anchor, cfg.search_scale, tracker.search_size())?;
        let view = SearchView {
            frame_index: frame.index,
            mapping,
        };
        match tracker.predict(&template, &search, &view) {
            Ok(b) if b.is_valid() => {
                let b = mapping.box_to_image(&b).clamp_to_frame(fw, fh, MIN_BOX_SIZE);
                out.push(b);
                anchor = b;
            }
            Ok(_) | Err(Error::Numeric(_)) => {
                log::warn!("frame {}: no valid prediction", frame.index);
                out.push(BBox::absent());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub sr_thresholds: Vec<f64>,
    pub precision_px: f64,
    /// IoU needed for a frame to count toward F-score precision and recall.
    pub fscore_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sr_thresholds: vec![0.5, 0.85],
            precision_px: 20.0,
            fscore_iou: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackReport {
    pub per_frame_iou: Vec<f64>,
    pub ao: f64,
    /// `(threshold, fraction of frames with IoU ≥ threshold)`, ascending.
    pub sr: Vec<(f64, f64)>,
    pub precision: f64,
    pub fscore: f64,
    pub fps: Option<f64>,
}

impl TrackReport {
    pub fn sr_at(&self, threshold: f64) -> Option<f64> {
        self.sr
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-12)
            .map(|&(_, v)| v)
    }

    /// `key=value` lines: `ao`, `sr_<τ>`, `precision`, `fscore`.
    pub fn kv_block(&self) -> String {
        let mut s = format!("ao={:.6}\n", self.ao);
        for (t, v) in &self.sr {
            let _ = writeln!(s, "sr_{t:.2}={v:.6}");
        }
        let _ = writeln!(s, "precision={:.6}", self.precision);
        let _ = writeln!(s, "fscore={:.6}", self.fscore);
        s
    }
}

/// Metrics over one sequence; frame 0 is the given initialization and is
/// skipped.
pub fn evaluate(preds: &[BBox], gts: &[BBox], cfg: &EvalConfig) -> Result<TrackReport> {
    if preds.len() != gts.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    evaluate_pairs(preds.iter().zip(gts).skip(1), cfg)
}

/// Pooled metrics over several sequences, each with its frame 0 skipped.
pub fn evaluate_sequences(runs: &[(Vec<BBox>, Vec<BBox>)], cfg: &EvalConfig) -> Result<TrackReport> {
    for (p, g) in runs {
        if p.len() != g.len() {
            return Err(Error::Usage(format!("{} predictions for {} ground-truth frames", p.len(), g.len())));
        }
    }
    evaluate_pairs(runs.iter().flat_map(|(p, g)| p.iter().zip(g).skip(1)), cfg)
}

fn evaluate_pairs<'a>(pairs: impl Iterator<Item = (&'a BBox, &'a BBox)>, cfg: &EvalConfig) -> Result<TrackReport> {
    let mut per_frame_iou = Vec::new();
    let mut close = 0usize;
    let (mut pred_present, mut gt_present) = (0usize, 0usize);
    let (mut hits_pred, mut hits_gt) = (0usize, 0usize);
    for (p, g) in pairs {
        let o = iou(p, g);
        per_frame_iou.push(o);
        if !p.is_absent() && !g.is_absent() && p.center_distance(g) <= cfg.precision_px {
            close += 1;
        }
        let hit = o >= cfg.fscore_iou;
        if !p.is_absent() {
            pred_present += 1;
            hits_pred += hit as usize;
        }
        if !g.is_absent() {
            gt_present += 1;
            hits_gt += hit as usize;
        }
    }
    let n = per_frame_iou.len();
    if n == 0 {
        return Err(Error::Usage("no frames to evaluate after the initial frame".into()));
    }
    let frac = |k: usize, d: usize| if d == 0 { 0.0 } else { k as f64 / d as f64 };
    let mut thresholds = cfg.sr_thresholds.clone();
    thresholds.sort_by(f64::total_cmp);
    let sr = thresholds
        .iter()
        .map(|&t| (t, frac(per_frame_iou.iter().filter(|&&o| o >= t).count(), n)))
        .collect();
    let pr = frac(hits_pred, pred_present);
    let re = frac(hits_gt, gt_present);
    let fscore = if pr + re > 0.0 { 2.0 * pr * re / (pr + re) } else { 0.0 };
    Ok(TrackReport {
        ao: per_frame_iou.iter().sum::<f64>() / n as f64,
        per_frame_iou,
        sr,
        precision: frac(close, n),
        fscore,
        fps: None,
    })
}

/// Text table `Tracker  AO  SR  F-score`, SR as a percentage at
/// `sr_threshold`.
pub fn format_report(reports: &[(String, TrackReport)], sr_threshold: f64) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Format("no reports to format".into()));
    }
    let mut rows = vec![["Tracker".to_string(), "AO".into(), "SR".into(), "F-score".into()]];
    for (name, r) in reports {
        if name.trim().is_empty() {
            return Err(Error::Format("tracker name is empty".into()));
        }
        let sr = r
            .sr_at(sr_threshold)
            .ok_or_else(|| Error::Format(format!("SR at {sr_threshold} was not computed")))?;
        rows.push([
            name.clone(),
            format!("{:.3}", r.ao),
            format!("{:.1}", sr * 100.0),
            format!("{:.3}", r.fscore),
        ]);
    }
    let widths: Vec<usize> = (0..4)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<w$}"))
            .collect::<Vec<_>>()
            .join("  ");
        out.push_str(line.trim_end());
        out.push('\n');
    }
    Ok(out)
}

/// Parses `x_tl,y_tl,w,h` lines into center-format boxes; `nan` fields mark
/// an absent frame.
pub fn parse_trace(text: &str) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("trace line {}: cannot parse `{line}`", i + 1)))?;
        let [x, y, w, h] = vals[..] else {
            return Err(Error::Format(format!("trace line {}: expected 4 fields", i + 1)));
        };
        if vals.iter().any(|v| v.is_nan()) {
            out.push(BBox::absent());
        } else {
            out.push(BBox::from_top_left(x, y, w, h));
        }
    }
    Ok(out)
}

pub fn format_trace(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        if b.is_absent() {
            s.push_str("nan,nan,nan,nan\n");
        } else {
            let (x1, y1, _, _) = b.corners();
            let _ = writeln!(s, "{},{},{},{}", x1, y1, b.w, b.h);
        }
    }
    s
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<BBox>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&text)
}

pub fn write_trace(path: impl AsRef<Path>, boxes: &[BBox]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_trace(boxes)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        let data = (0..h * w).map(|i| i as f64 / (h * w) as f64).collect();
        Tensor::new(vec![1, h, w], data).unwrap()
    }

    fn frame(h: usize, w: usize) -> FramePair {
        FramePair::new(ramp(h, w), ramp(h, w), 0).unwrap()
    }

    #[test]
    fn identity_crop() {
        let f = frame(40, 50);
        let b = BBox::new(25.0, 20.0, 16.0, 16.0);
        let (c, _) = crop_region(&f, &b, 1.0, 16).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let want = f.tir.data()[(12 + i) * 50 + 17 + j];
                assert_eq!(c.tir.data()[i * 16 + j], want);
            }
        }
    }

    #[test]
    fn mapping_round_trip() {
        let m = crop_mapping(&BBox::new(31.3, 17.9, 7.0, 12.5), 5.0, 128).unwrap();
        let (u, v) = m.to_crop(12.34, 98.76);
        let (x, y) = m.to_image(u, v);
        assert!((x - 12.34).abs() < 1e-9 && (y - 98.76).abs() < 1e-9);
        let b = BBox::new(3.0, 4.0, 5.0, 6.0);
        let back = m.box_to_crop(&m.box_to_image(&b));
        assert!(back.to_array().iter().zip(b.to_array()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn corner_crop_pads_with_mean() {
        let f = FramePair::new(Tensor::full(&[1, 20, 20], 0.25), Tensor::full(&[1, 20, 20], 0.75), 0).unwrap();
        let (c, _) = crop_region(&f, &BBox::new(0.0, 0.0, 4.0, 4.0), 5.0, 32).unwrap();
        assert!(c.tir.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert!(c.depth.data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
        assert!(crop_region(&f, &BBox::new(5.0, 5.0, 0.0, 2.0), 2.0, 8).is_err());
    }

    #[test]
    fn report_formatting() {
        let r = TrackReport {
            per_frame_iou: vec![],
            ao: 0.700,
            sr: vec![(0.5, 0.587), (0.85, 0.2)],
            precision: 0.0,
            fscore: 0.760,
            fps: None,
        };
        let t = format_report(&[("TIR-D".into(), r.clone())], 0.5).unwrap();
        assert!(t.lines().nth(1).unwrap().contains("0.700  58.7  0.760"), "{t}");
        let one = TrackReport { ao: 1.0, ..r.clone() };
        assert!(format_report(&[("x".into(), one)], 0.5).unwrap().contains("1.000"));
        assert!(format_report(&[("".into(), r.clone())], 0.5).is_err());
        assert!(format_report(&[], 0.5).is_err());
        assert!(r.kv_block().contains("sr_0.50=0.587000\nsr_0.85=0.200000\n"));
    }

    #[test]
    fn trace_round_trip() {
        let boxes = vec![BBox::from_top_left(1.5, 2.25, 10.0, 3.0), BBox::absent()];
        let back = parse_trace(&format_trace(&boxes)).unwrap();
        assert_eq!(back[0], boxes[0]);
        assert!(back[1].is_absent());
        assert!(parse_trace("1,2,3\n").is_err());
    }
}
