mod common;

use common::{exhaustive_depth_oracle as exhaustive_oracle, fixture, run, tilted_camera};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use tird::geometry::{decode_pgm16, project_point, render_depth_map, PointCloud, Point3};

#[test]
fn renderer_matches_exhaustive_oracle_on_random_points() {
    let cam = tilted_camera();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
    let points: Vec<Point3> = (0..1000)
        .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..8.0)])
        .collect();
    let map = render_depth_map(&PointCloud::new(points.clone()).unwrap(), &cam);
    let oracle = exhaustive_oracle(&points, &cam);
    assert_eq!(map.values, oracle);
    let filled = oracle.iter().filter(|&&v| v > 0.0).count();
    assert!(filled > 100, "only {filled} pixels hit; fixture too sparse to be meaningful");
}

#[test]
fn back_projection_recovers_points() {
    let cam = tilted_camera();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(12);
    let mut checked = 0;
    while checked < 1000 {
        let p = [rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.2..9.0)];
        let Some((u, v, z)) = project_point(p, &cam) else { continue };
        let q = cam.back_project(u, v, z);
        for k in 0..3 {
            assert!((q[k] - p[k]).abs() < 1e-9, "{p:?} -> {q:?}");
        }
        checked += 1;
    }
}

#[test]
fn fixture_cloud_reproduces_golden_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let golden = std::fs::read(fixture("golden_depth.pgm")).unwrap();
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("run{i}.pgm"));
        let (code, _, err) = run(&[
            "project-depth",
            "--points",
            fixture("cloud.txt").to_str().unwrap(),
            "--camera",
            fixture("camera.txt").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
        outputs.push(std::fs::read(out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(outputs[0] == golden, "rendered PGM differs from the golden file");
}

#[test]
fn empty_cloud_gives_all_zero_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let pts = dir.path().join("empty.txt");
    std::fs::write(&pts, "# no returns\n\n").unwrap();
    let out = dir.path().join("d.pgm");
    let (code, _, err) = run(&["project-depth", "--points", pts.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let (w, h, px) = decode_pgm16(&std::fs::read(out).unwrap()).unwrap();
    assert_eq!((w, h), (256, 192));
    assert!(px.iter().all(|&v| v == 0));
}

#[test]
fn malformed_point_line_exits_2_naming_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let pts = dir.path().join("bad.txt");
    std::fs::write(&pts, "0 0 1\n# comment\n1.0 2.0\n").unwrap();
    let out = dir.path().join("d.pgm");
    let (code, _, err) = run(&["project-depth", "--points", pts.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("line 3"), "{err}");
    assert!(!out.exists());
}

proptest! {
    #[test]
    fn every_filled_pixel_is_the_nearest_return(
        pts in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -0.5f64..5.0), 0..60)
    ) {
        let cam = tilted_camera();
        let points: Vec<Point3> = pts.iter().map(|&(x, y, z)| [x, y, z]).collect();
        let map = render_depth_map(&PointCloud::new(points.clone()).unwrap(), &cam);
        prop_assert!(map.values.iter().all(|&d| d == 0.0 || d > cam.z_min));
        prop_assert_eq!(map.values, exhaustive_oracle(&points, &cam));
    }
}
