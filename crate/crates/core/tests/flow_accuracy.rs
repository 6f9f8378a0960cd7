mod common;

use std::time::Instant;

use nearmiss_core::clipio::Frame;
use nearmiss_core::denseflow::{farneback_flow, median_filter_flow, FlowField, FlowParams};
use nearmiss_core::grid::Grid;
use nearmiss_core::synthscenes::smooth_texture;
use rand::Rng;

const MARGIN: usize = 8;

/// `next` shows `prev`'s content moved by `(sx, sy)`.
fn shifted_pair(seed: u64, sx: i32, sy: i32) -> (Frame, Frame) {
    let big = smooth_texture(96, 96, 2.0, seed);
    let crop = |ox: i32, oy: i32| {
        Frame::new(Grid::from_fn(64, 64, |x, y| {
            big.get((x as i32 + 16 - ox) as usize, (y as i32 + 16 - oy) as usize)
        }))
        .unwrap()
    };
    (crop(0, 0), crop(sx, sy))
}

fn interior_epe(flow: &FlowField, sx: f32, sy: f32) -> f32 {
    let mut sum = 0.0;
    let mut n = 0;
    for y in MARGIN..64 - MARGIN {
        for x in MARGIN..64 - MARGIN {
            let (u, v) = (flow.u.get(x, y), flow.v.get(x, y));
            sum += ((u - sx).powi(2) + (v - sy).powi(2)).sqrt();
            n += 1;
        }
    }
    sum / n as f32
}

#[test]
fn global_shifts_are_recovered_on_random_textures() {
    let t0 = Instant::now();
    let mut r = common::rng(7);
    let params = FlowParams::default();
    let mut worst = 0.0f32;
    for i in 0..20 {
        let (sx, sy) = loop {
            let s = (r.gen_range(-4..=4), r.gen_range(-4..=4));
            if s.0 * s.0 + s.1 * s.1 <= 16 {
                break s;
            }
        };
        let (a, b) = shifted_pair(100 + i, sx, sy);
        let flow = farneback_flow(&a, &b, &params).unwrap();
        let epe = interior_epe(&flow, sx as f32, sy as f32);
        worst = worst.max(epe);
        assert!(epe < 0.25, "texture {i}, shift ({sx},{sy}): mean EPE {epe}");
    }
    eprintln!("worst interior mean EPE {worst:.4} in {:?}", t0.elapsed());
    assert!(t0.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn median_filter_keeps_constant_flow_and_removes_spikes() {
    let mut f = FlowField::constant(20, 20, 1.5, -0.5);
    f.u.set(10, 10, 40.0);
    let m = median_filter_flow(&f, 3).unwrap();
    assert!(m.u.data().iter().all(|&v| v == 1.5));
    assert!(m.v.data().iter().all(|&v| v == -0.5));
    assert!(median_filter_flow(&f, 4).is_err());
}

#[test]
fn flow_dump_layout() {
    let mut f = FlowField::zeros(3, 2);
    f.u.set(1, 0, 2.5);
    f.v.set(2, 1, -1.0);
    let mut bytes = Vec::new();
    f.write_dump(&mut bytes).unwrap();
    let header = b"SFW1|3|2|2\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 2 * 6 * 4);
    let u1 = &bytes[header.len() + 4..header.len() + 8];
    assert_eq!(u1, 2.5f32.to_le_bytes());
    let v_last = &bytes[bytes.len() - 4..];
    assert_eq!(v_last, (-1.0f32).to_le_bytes());
    let back = FlowField::read_dump(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, f);
    let mut truncated = &bytes[..bytes.len() - 1];
    assert!(FlowField::read_dump(&mut truncated).is_err());
}
