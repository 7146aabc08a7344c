#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tird::geometry::{CameraModel, Extrinsic, Point3};
use tird::BBox;

/// Runs the command line in-process; returns exit code, stdout and stderr.
pub fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = tird::cli::main_with(std::iter::once("tird").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Model keys for a network small enough to train in seconds.
pub const SMALL_MODEL: &str = "\
model.adapter_mid_channels=8
model.backbone_channels=8,16,32
model.backbone_stride=8
model.d_model=32
model.n_heads=4
model.n_fusion_layers=2
model.template_size=32
model.search_size=64
model.head_channels=16
";

pub fn tilted_camera() -> CameraModel {
    let (a, b) = (0.2f64, -0.15f64);
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let rz = Extrinsic::rotation_z(b).rotation;
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| rz[i][k] * rx[k][j]).sum();
        }
    }
    CameraModel {
        fx: 40.0,
        fy: 42.0,
        cx: 20.0,
        cy: 15.5,
        width: 40,
        height: 30,
        z_min: 0.1,
        extrinsic: Extrinsic {
            rotation: r,
            translation: [0.1, -0.2, 0.3],
        },
    }
}

/// Every pixel scans every point: transform, project, round half away from
/// zero, keep the smallest range that lands on it.
pub fn exhaustive_depth_oracle(points: &[Point3], cam: &CameraModel) -> Vec<f64> {
    let r = cam.extrinsic.rotation;
    let t = cam.extrinsic.translation;
    let landed: Vec<Option<(i64, i64, f64)>> = points
        .iter()
        .map(|p| {
            let q: Vec<f64> = (0..3).map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i]).collect();
            if q[2] <= cam.z_min {
                return None;
            }
            let u = cam.fx * q[0] / q[2] + cam.cx;
            let v = cam.fy * q[1] / q[2] + cam.cy;
            if u < 0.0 || v < 0.0 || u >= cam.width as f64 || v >= cam.height as f64 {
                return None;
            }
            Some((u.round() as i64, v.round() as i64, q[2]))
        })
        .collect();
    let mut out = Vec::with_capacity(cam.width * cam.height);
    for row in 0..cam.height as i64 {
        for col in 0..cam.width as i64 {
            let best = landed
                .iter()
                .flatten()
                .filter(|(c, r, _)| *c == col && *r == row)
                .map(|&(_, _, z)| z)
                .fold(f64::INFINITY, f64::min);
            out.push(if best.is_finite() { best } else { 0.0 });
        }
    }
    out
}

/// IoU of two center-format boxes from interval arithmetic; absent boxes
/// score 0.
pub fn overlap(p: &BBox, g: &BBox) -> f64 {
    if p.x.is_nan() || g.x.is_nan() {
        return 0.0;
    }
    let ix = ((p.x + p.w / 2.0).min(g.x + g.w / 2.0) - (p.x - p.w / 2.0).max(g.x - g.w / 2.0)).max(0.0);
    let iy = ((p.y + p.h / 2.0).min(g.y + g.h / 2.0) - (p.y - p.h / 2.0).max(g.y - g.h / 2.0)).max(0.0);
    ix * iy / (p.w * p.h + g.w * g.h - ix * iy)
}

/// GIoU from corner coordinates and the hull rectangle.
pub fn giou_oracle(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.x - a.w / 2.0, a.y - a.h / 2.0, a.x + a.w / 2.0, a.y + a.h / 2.0);
    let (bx1, by1, bx2, by2) = (b.x - b.w / 2.0, b.y - b.h / 2.0, b.x + b.w / 2.0, b.y + b.h / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (hull - union) / hull
}

/// Ten frames with an absent ground truth, an absent prediction, a miss and
/// partial overlaps.
pub fn ten_frame_fixture() -> (Vec<BBox>, Vec<BBox>) {
    let gts = vec![
        BBox::new(50.0, 50.0, 20.0, 20.0),
        BBox::new(52.0, 50.0, 20.0, 20.0),
        BBox::new(54.0, 51.0, 20.0, 22.0),
        BBox::absent(),
        BBox::new(58.0, 53.0, 18.0, 22.0),
        BBox::new(60.0, 54.0, 18.0, 22.0),
        BBox::new(62.0, 55.0, 18.0, 20.0),
        BBox::new(64.0, 56.0, 18.0, 20.0),
        BBox::new(66.0, 57.0, 16.0, 20.0),
        BBox::new(68.0, 58.0, 16.0, 20.0),
    ];
    let preds = vec![
        gts[0],
        BBox::new(52.0, 50.0, 20.0, 20.0),
        BBox::new(57.0, 52.0, 20.0, 20.0),
        BBox::new(56.0, 52.0, 20.0, 20.0),
        BBox::absent(),
        BBox::new(70.0, 54.0, 18.0, 22.0),
        BBox::new(63.0, 56.0, 17.0, 21.0),
        BBox::new(100.0, 100.0, 18.0, 20.0),
        BBox::new(66.0, 59.0, 14.0, 18.0),
        BBox::new(67.0, 58.0, 16.0, 20.0),
    ];
    (preds, gts)
}

pub struct MetricsOracle {
    pub ious: Vec<f64>,
    pub ao: f64,
    pub sr50: f64,
    pub sr85: f64,
    pub precision: f64,
    pub fscore: f64,
}

/// Brute-force recomputation of every metric from per-frame quantities;
/// frame 0 is the initialization and is skipped.
pub fn metrics_oracle(preds: &[BBox], gts: &[BBox]) -> MetricsOracle {
    let frames: Vec<usize> = (1..preds.len()).collect();
    let n = frames.len() as f64;
    let ious: Vec<f64> = frames.iter().map(|&t| overlap(&preds[t], &gts[t])).collect();
    let ao = ious.iter().sum::<f64>() / n;
    let sr50 = ious.iter().filter(|&&o| o >= 0.5).count() as f64 / n;
    let sr85 = ious.iter().filter(|&&o| o >= 0.85).count() as f64 / n;
    let mut close = 0.0;
    for &t in &frames {
        let (p, g) = (&preds[t], &gts[t]);
        if !p.x.is_nan() && !g.x.is_nan() && ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt() <= 20.0 {
            close += 1.0;
        }
    }
    let pp: Vec<usize> = frames.iter().copied().filter(|&t| !preds[t].x.is_nan()).collect();
    let gp: Vec<usize> = frames.iter().copied().filter(|&t| !gts[t].x.is_nan()).collect();
    let pr = pp.iter().filter(|&&t| overlap(&preds[t], &gts[t]) >= 0.5).count() as f64 / pp.len() as f64;
    let re = gp.iter().filter(|&&t| overlap(&preds[t], &gts[t]) >= 0.5).count() as f64 / gp.len() as f64;
    let fscore = if pr + re > 0.0 { 2.0 * pr * re / (pr + re) } else { 0.0 };
    MetricsOracle {
        ious,
        ao,
        sr50,
        sr85,
        precision: close / n,
        fscore,
    }
}
