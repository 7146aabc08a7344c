mod common;

use proptest::prelude::*;
use tird::bbox::iou;
use tird::tensor::Tensor;
use tird::track::{
    evaluate, track_sequence, CropTracker, EvalConfig, FramePair, SearchView, TrackConfig,
};
use tird::{BBox, Result};

/// Returns the ground-truth box, expressed in the current search crop.
struct OracleStub {
    gt: Vec<BBox>,
}

impl CropTracker for OracleStub {
    fn template_size(&self) -> usize {
        16
    }
    fn search_size(&self) -> usize {
        40
    }
    fn predict(&self, _t: &FramePair, _s: &FramePair, view: &SearchView) -> Result<BBox> {
        Ok(view.mapping.box_to_crop(&self.gt[view.frame_index]))
    }
}

/// Always predicts the whole search crop and more.
struct Wild;

impl CropTracker for Wild {
    fn template_size(&self) -> usize {
        8
    }
    fn search_size(&self) -> usize {
        32
    }
    fn predict(&self, _t: &FramePair, _s: &FramePair, _v: &SearchView) -> Result<BBox> {
        Ok(BBox::new(-50.0, 90.0, 400.0, 300.0))
    }
}

fn frames(n: usize) -> Vec<FramePair> {
    (0..n)
        .map(|i| FramePair::new(Tensor::full(&[1, 48, 64], 0.3), Tensor::full(&[1, 48, 64], 0.6), i).unwrap())
        .collect()
}

#[test]
fn single_frame_returns_init() {
    let b = BBox::new(20.0, 20.0, 6.0, 8.0);
    let out = track_sequence(&frames(1), b, &OracleStub { gt: vec![b] }, &TrackConfig::default()).unwrap();
    assert_eq!(out, vec![b]);
}

#[test]
fn oracle_stub_tracks_perfectly() {
    let gt: Vec<BBox> = (0..8).map(|_| BBox::new(30.0, 22.0, 9.0, 7.0)).collect();
    let out = track_sequence(&frames(8), gt[0], &OracleStub { gt: gt.clone() }, &TrackConfig::default()).unwrap();
    for (p, g) in out.iter().zip(&gt) {
        assert!((iou(p, g) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn predictions_are_clamped_into_the_frame() {
    let out = track_sequence(&frames(6), BBox::new(10.0, 40.0, 6.0, 6.0), &Wild, &TrackConfig::default()).unwrap();
    for b in &out {
        let (x1, y1, x2, y2) = b.corners();
        assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 64.0 + 1e-9 && y2 <= 48.0 + 1e-9, "{b:?}");
    }
}

#[test]
fn perfect_and_absent_traces() {
    let gt: Vec<BBox> = (0..5).map(|i| BBox::new(10.0 + i as f64, 10.0, 4.0, 4.0)).collect();
    let cfg = EvalConfig::default();
    let r = evaluate(&gt, &gt, &cfg).unwrap();
    assert_eq!((r.ao, r.fscore, r.precision), (1.0, 1.0, 1.0));
    assert!(r.sr.iter().all(|&(_, v)| v == 1.0));
    let absent = vec![BBox::absent(); 5];
    let r = evaluate(&absent, &gt, &cfg).unwrap();
    assert_eq!((r.ao, r.fscore), (0.0, 0.0));
    assert!(evaluate(&gt[..3], &gt, &cfg).is_err());
}

#[test]
fn ten_frame_fixture_matches_oracle() {
    let (preds, gts) = common::ten_frame_fixture();
    let r = evaluate(&preds, &gts, &EvalConfig::default()).unwrap();
    let o = common::metrics_oracle(&preds, &gts);
    assert_eq!(r.per_frame_iou, o.ious);
    assert_eq!(r.ao, o.ao);
    assert_eq!(r.sr_at(0.5).unwrap(), o.sr50);
    assert_eq!(r.sr_at(0.85).unwrap(), o.sr85);
    assert_eq!(r.precision, o.precision);
    assert_eq!(r.fscore, o.fscore);
}

fn any_box() -> impl Strategy<Value = BBox> {
    (0.0..100.0f64, 0.0..100.0f64, 1.0..40.0f64, 1.0..40.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

proptest! {
    #[test]
    fn iou_symmetry_and_invariance(a in any_box(), b in any_box(), d in -50.0..50.0f64, s in 0.1..10.0f64) {
        let o = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&o));
        prop_assert!((o - iou(&b, &a)).abs() < 1e-12);
        prop_assert!((o - iou(&a.translated(d, -d), &b.translated(d, -d))).abs() < 1e-12);
        prop_assert!((o - iou(&a.scaled(s), &b.scaled(s))).abs() < 1e-12);
    }

    #[test]
    fn sr_monotone_and_ao_is_mean(pairs in prop::collection::vec((any_box(), any_box()), 2..30)) {
        let (preds, gts): (Vec<BBox>, Vec<BBox>) = pairs.into_iter().unzip();
        let cfg = EvalConfig { sr_thresholds: vec![0.1, 0.3, 0.5, 0.7, 0.85, 0.95], ..EvalConfig::default() };
        let r = evaluate(&preds, &gts, &cfg).unwrap();
        prop_assert!(r.sr.windows(2).all(|w| w[1].1 <= w[0].1));
        let mean = r.per_frame_iou.iter().sum::<f64>() / r.per_frame_iou.len() as f64;
        prop_assert!((r.ao - mean).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.ao));
    }
}
