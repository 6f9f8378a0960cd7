mod common;

use nearmiss_core::clipio::Frame;
use nearmiss_core::denseflow::FlowField;
use nearmiss_core::trajectories::{
    extract_trajectories, is_erratic, is_static, prune, track, SamplerParams, TrackOutcome,
    Trajectory,
};
use rand::Rng;

/// Values on a 1/64 grid are exact in f32, so the analytic path is too.
fn dyadic(r: &mut impl Rng, lo: f32, hi: f32) -> f32 {
    (r.gen_range(lo..hi) * 64.0).round() / 64.0
}

#[test]
fn constant_flow_tracks_follow_the_analytic_path() {
    let mut r = common::rng(3);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (u, v) = (dyadic(&mut r, -2.0, 2.0), dyadic(&mut r, -2.0, 2.0));
        let flows = vec![FlowField::constant(128, 128, u, v); 15];
        let seed = (dyadic(&mut r, 40.0, 88.0), dyadic(&mut r, 40.0, 88.0));
        let TrackOutcome::Accepted(t) = track(&flows, seed, 2, 8.0).unwrap() else {
            panic!("track rejected");
        };
        assert_eq!(t.start_frame(), 2);
        for (i, p) in t.points().iter().enumerate() {
            let ex = seed.0 as f64 + i as f64 * u as f64;
            let ey = seed.1 as f64 + i as f64 * v as f64;
            worst = worst.max((p.x as f64 - ex).abs()).max((p.y as f64 - ey).abs());
            assert_eq!(p.z, 2 + i);
        }
    }
    assert!(worst < 1e-6, "max deviation {worst} px");
}

#[test]
fn arbitrary_constant_flow_stays_within_f32_rounding() {
    let mut r = common::rng(4);
    for _ in 0..200 {
        let (u, v) = (r.gen_range(-2.0f32..2.0), r.gen_range(-2.0f32..2.0));
        let flows = vec![FlowField::constant(128, 128, u, v); 15];
        let seed = (r.gen_range(40.0f32..88.0), r.gen_range(40.0f32..88.0));
        let TrackOutcome::Accepted(t) = track(&flows, seed, 0, 8.0).unwrap() else {
            panic!("track rejected");
        };
        for (i, p) in t.points().iter().enumerate() {
            let ex = seed.0 as f64 + i as f64 * u as f64;
            // each of i additions rounds by at most half an ulp at this magnitude
            let tol = (i as f64 + 1.0) * f64::from(f32::EPSILON) * 128.0;
            assert!((p.x as f64 - ex).abs() <= tol);
        }
    }
}

#[test]
fn tracks_leaving_the_frame_or_jumping_are_rejected() {
    let flows = vec![FlowField::constant(32, 32, 3.0, 0.0); 15];
    assert!(matches!(
        track(&flows, (10.0, 10.0), 0, 8.0).unwrap(),
        TrackOutcome::LeftFrame { step: 8 }
    ));
    let fast = vec![FlowField::constant(32, 32, 9.0, 0.0); 15];
    assert!(matches!(
        track(&fast, (1.0, 1.0), 0, 8.0).unwrap(),
        TrackOutcome::StepTooLarge { step: 1, .. }
    ));
}

enum Kind {
    Good,
    Static,
    Erratic,
}

/// 500 tracks: uniform and curved movers, static points with sub-pixel
/// jitter, and smooth tracks with one planted jump.
fn suite() -> Vec<(Kind, Trajectory)> {
    let mut r = common::rng(5);
    let mut out = Vec::new();
    for i in 0..500 {
        let (x0, y0) = (r.gen_range(20.0f32..80.0), r.gen_range(20.0f32..80.0));
        let (kind, pos): (Kind, Vec<(f32, f32)>) = match i % 3 {
            0 => {
                let speed = r.gen_range(0.6f32..3.0);
                let a = r.gen_range(0.0f32..std::f32::consts::TAU);
                let bend = r.gen_range(-0.1f32..0.1);
                let mut p = (x0, y0);
                let pos = (0..16)
                    .map(|k| {
                        let cur = p;
                        let ang = a + bend * k as f32;
                        p = (p.0 + speed * ang.cos(), p.1 + speed * ang.sin());
                        cur
                    })
                    .collect();
                (Kind::Good, pos)
            }
            1 => {
                let jitter = r.gen_range(0.0f32..0.1);
                let pos = (0..16)
                    .map(|_| (x0 + r.gen_range(-jitter..=jitter), y0 + r.gen_range(-jitter..=jitter)))
                    .collect();
                (Kind::Static, pos)
            }
            _ => {
                let drift = r.gen_range(0.0f32..0.1);
                let jump_at = r.gen_range(1..16);
                let jump = r.gen_range(4.0f32..8.0);
                let mut p = (x0, y0);
                let pos = (0..16)
                    .map(|k| {
                        if k == jump_at {
                            p.0 += jump;
                        } else if k > 0 {
                            p.0 += drift;
                        }
                        p
                    })
                    .collect();
                (Kind::Erratic, pos)
            }
        };
        out.push((kind, Trajectory::from_positions(0, &pos).unwrap()));
    }
    out
}

#[test]
fn pruning_removes_every_static_and_erratic_track() {
    let params = SamplerParams::default();
    let suite = suite();
    let (mut statics, mut erratics, mut goods) = (0, 0, 0);
    for (kind, t) in &suite {
        match kind {
            Kind::Static => {
                statics += 1;
                assert!(is_static(t, &params));
            }
            Kind::Erratic => {
                erratics += 1;
                assert!(is_erratic(t, &params));
            }
            Kind::Good => {
                goods += 1;
                assert!(!is_static(t, &params) && !is_erratic(t, &params));
            }
        }
    }
    let kept = prune(suite.iter().map(|(_, t)| t.clone()).collect(), &params);
    assert_eq!(kept.len(), goods);
    assert_eq!(statics + erratics + goods, 500);
}

#[test]
fn static_scene_yields_no_trajectories() {
    let tex = common::texture(64, 64, 9);
    let frames: Vec<Frame> = (0..16).map(|_| Frame::new(tex.clone()).unwrap()).collect();
    let flows = vec![FlowField::zeros(64, 64); 15];
    let trajs = extract_trajectories(&frames, &flows, &SamplerParams::default()).unwrap();
    assert!(trajs.is_empty());
}

#[test]
fn dense_tracks_under_constant_flow_are_straight_lines() {
    let tex = common::texture(96, 96, 10);
    let frames: Vec<Frame> = (0..17).map(|_| Frame::new(tex.clone()).unwrap()).collect();
    let flows = vec![FlowField::constant(96, 96, 1.25, -0.5); 16];
    let trajs = extract_trajectories(&frames, &flows, &SamplerParams::default()).unwrap();
    assert!(!trajs.is_empty());
    for t in &trajs {
        let p0 = t.points()[0];
        for (i, p) in t.points().iter().enumerate() {
            assert!((p.x - (p0.x + 1.25 * i as f32)).abs() < 1e-4);
            assert!((p.y - (p0.y - 0.5 * i as f32)).abs() < 1e-4);
        }
    }
    assert!(trajs.iter().any(|t| t.start_frame() == 0));
}
