//! Dense optical flow by Farnebäck polynomial expansion, plus the median
//! filter applied before tracking.

use std::io::{BufRead, Write};

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::clipio::Frame;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Smallest pyramid level side; coarser levels are skipped.
const MIN_LEVEL_SIDE: usize = 32;
/// Internal intensity scale, so the regulariser below is in 8-bit units.
const INTENSITY_SCALE: f32 = 255.0;
const SOLVE_EPS: f64 = 1e-3;
/// Confidence ramp for the outermost pixels of each level.
const BORDER_WEIGHTS: [f32; 5] = [0.14, 0.14, 0.4472, 0.4472, 0.4472];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    pub pyramid_scale: f64,
    pub window_size: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
    pub iterations: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            pyramid_levels: 3,
            pyramid_scale: 0.5,
            window_size: 15,
            poly_n: 7,
            poly_sigma: 1.5,
            iterations: 3,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_size % 2 == 0 || self.poly_n % 2 == 0 {
            return Err(Error::Invalid("window_size and poly_n must be odd".into()));
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::Invalid("pyramid_scale must lie in (0,1)".into()));
        }
        if self.iterations == 0 || self.pyramid_levels == 0 {
            return Err(Error::Invalid("iterations and pyramid_levels must be >= 1".into()));
        }
        if self.poly_sigma <= 0.0 {
            return Err(Error::Invalid("poly_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel displacement `(u, v)` in pixels per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub u: Grid<f32>,
    pub v: Grid<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            u: Grid::filled(width, height, 0.0),
            v: Grid::filled(width, height, 0.0),
        }
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        FlowField {
            u: Grid::filled(width, height, u),
            v: Grid::filled(width, height, v),
        }
    }

    pub fn width(&self) -> usize {
        self.u.width()
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    /// Bilinear flow lookup at a sub-pixel position.
    pub fn sample(&self, x: f32, y: f32) -> (f32, f32) {
        (self.u.bilinear(x, y), self.v.bilinear(x, y))
    }

    pub fn write_dump<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        binfmt::write_header(
            w,
            &[
                "SFW1".into(),
                self.width().to_string(),
                self.height().to_string(),
                "2".into(),
            ],
        )?;
        binfmt::write_f32s(w, self.u.data().iter().copied())?;
        binfmt::write_f32s(w, self.v.data().iter().copied())
    }

    pub fn read_dump<R: BufRead>(r: &mut R) -> Result<FlowField> {
        let ctx = "flow dump";
        let f = binfmt::read_header(r, "SFW1", 4, ctx)?;
        let w: usize = binfmt::parse_field(&f, 1, ctx)?;
        let h: usize = binfmt::parse_field(&f, 2, ctx)?;
        let planes: usize = binfmt::parse_field(&f, 3, ctx)?;
        if planes != 2 {
            return Err(Error::header(ctx, format!("expected 2 planes, found {planes}")));
        }
        let u = binfmt::read_f32s(r, w * h, ctx)?;
        let v = binfmt::read_f32s(r, w * h, ctx)?;
        binfmt::expect_eof(r, ctx)?;
        Ok(FlowField {
            u: Grid::from_vec(w, h, u),
            v: Grid::from_vec(w, h, v),
        })
    }
}

/// Quadratic model `f(p + d) ≈ dᵀA d + bᵀd + c` at every pixel.
struct Expansion {
    bx: Grid<f32>,
    by: Grid<f32>,
    axx: Grid<f32>,
    ayy: Grid<f32>,
    axy: Grid<f32>,
}

fn poly_expansion(img: &Grid<f32>, poly_n: usize, sigma: f64) -> Expansion {
    let r = (poly_n / 2) as isize;
    let g: Vec<f64> = {
        let raw: Vec<f64> = (-r..=r)
            .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    let offsets: Vec<f64> = (-r..=r).map(|k| k as f64).collect();

    // Gram matrix of the basis {1, x, y, x², y², xy} under the applicability.
    let mut gram = Matrix6::<f64>::zeros();
    for (iy, &dy) in offsets.iter().enumerate() {
        for (ix, &dx) in offsets.iter().enumerate() {
            let w = g[ix] * g[iy];
            let b = Vector6::new(1.0, dx, dy, dx * dx, dy * dy, dx * dy);
            gram += w * b * b.transpose();
        }
    }
    let inv = gram
        .try_inverse()
        .expect("polynomial basis Gram matrix is positive definite");

    let k = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f32> {
        offsets
            .iter()
            .zip(&g)
            .map(|(&o, &w)| f(o, w) as f32)
            .collect()
    };
    let k0 = k(&|_, w| w);
    let k1 = k(&|o, w| o * w);
    let k2 = k(&|o, w| o * o * w);

    let rows0 = img.correlate_rows(&k0);
    let rows1 = img.correlate_rows(&k1);
    let rows2 = img.correlate_rows(&k2);
    let m00 = rows0.correlate_cols(&k0);
    let m10 = rows1.correlate_cols(&k0);
    let m01 = rows0.correlate_cols(&k1);
    let m20 = rows2.correlate_cols(&k0);
    let m02 = rows0.correlate_cols(&k2);
    let m11 = rows1.correlate_cols(&k1);

    let (w, h) = (img.width(), img.height());
    let mut bx = Grid::filled(w, h, 0.0);
    let mut by = bx.clone();
    let mut axx = bx.clone();
    let mut ayy = bx.clone();
    let mut axy = bx.clone();
    for i in 0..w * h {
        let m = Vector6::new(
            m00.data()[i] as f64,
            m10.data()[i] as f64,
            m01.data()[i] as f64,
            m20.data()[i] as f64,
            m02.data()[i] as f64,
            m11.data()[i] as f64,
        );
        let p = inv * m;
        bx.data_mut()[i] = p[1] as f32;
        by.data_mut()[i] = p[2] as f32;
        axx.data_mut()[i] = p[3] as f32;
        ayy.data_mut()[i] = p[4] as f32;
        axy.data_mut()[i] = (p[5] * 0.5) as f32;
    }
    Expansion {
        bx,
        by,
        axx,
        ayy,
        axy,
    }
}

fn border_weight(x: usize, y: usize, w: usize, h: usize) -> f32 {
    let edge = |i: usize, n: usize| {
        let d = i.min(n - 1 - i);
        BORDER_WEIGHTS.get(d).copied().unwrap_or(1.0)
    };
    edge(x, w) * edge(y, h)
}

/// Per-pixel normal-equation terms `(AᵀA, AᵀΔb)` for the current flow estimate.
fn update_matrices(e1: &Expansion, e2: &Expansion, flow: &FlowField) -> [Grid<f32>; 5] {
    let (w, h) = (flow.width(), flow.height());
    let mut out: [Vec<f32>; 5] = std::array::from_fn(|_| vec![0.0; w * h]);
    let e2_planes = [
        e2.axx.data(),
        e2.ayy.data(),
        e2.axy.data(),
        e2.bx.data(),
        e2.by.data(),
    ];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = (flow.u.data()[i], flow.v.data()[i]);
            let fx = x as f32 + dx;
            let fy = y as f32 + dy;
            let a1 = (e1.axx.data()[i], e1.ayy.data()[i], e1.axy.data()[i]);
            let b1 = (e1.bx.data()[i], e1.by.data()[i]);
            let inside = fx >= 0.0 && fy >= 0.0 && fx < (w - 1) as f32 && fy < (h - 1) as f32;
            let (a, db) = if inside {
                // inside the frame all four bilinear taps are in bounds
                let (x0, y0) = (fx.floor(), fy.floor());
                let (tx, ty) = (fx - x0, fy - y0);
                let j = y0 as usize * w + x0 as usize;
                let s = e2_planes.map(|p| {
                    let top = p[j] + (p[j + 1] - p[j]) * tx;
                    let bottom = p[j + w] + (p[j + w + 1] - p[j + w]) * tx;
                    top + (bottom - top) * ty
                });
                let a = (
                    0.5 * (a1.0 + s[0]),
                    0.5 * (a1.1 + s[1]),
                    0.5 * (a1.2 + s[2]),
                );
                (a, (-0.5 * (s[3] - b1.0), -0.5 * (s[4] - b1.1)))
            } else {
                (a1, (0.0, 0.0))
            };
            // Δb = −½(b2 − b1) + A·d0
            let r1 = db.0 + a.0 * dx + a.2 * dy;
            let r2 = db.1 + a.2 * dx + a.1 * dy;
            let s = border_weight(x, y, w, h);
            let (axx, ayy, axy) = (a.0 * s, a.1 * s, a.2 * s);
            let (r1, r2) = (r1 * s, r2 * s);
            out[0][i] = axx * axx + axy * axy;
            out[1][i] = axy * (axx + ayy);
            out[2][i] = ayy * ayy + axy * axy;
            out[3][i] = axx * r1 + axy * r2;
            out[4][i] = axy * r1 + ayy * r2;
        }
    }
    out.map(|v| Grid::from_vec(w, h, v))
}

fn solve_flow(terms: &[Grid<f32>; 5], window: usize) -> FlowField {
    let blurred: Vec<Grid<f32>> = terms.iter().map(|t| t.box_filter(window)).collect();
    let (w, h) = (terms[0].width(), terms[0].height());
    let mut flow = FlowField::zeros(w, h);
    for i in 0..w * h {
        let g11 = blurred[0].data()[i] as f64;
        let g12 = blurred[1].data()[i] as f64;
        let g22 = blurred[2].data()[i] as f64;
        let h1 = blurred[3].data()[i] as f64;
        let h2 = blurred[4].data()[i] as f64;
        let idet = 1.0 / (g11 * g22 - g12 * g12 + SOLVE_EPS);
        flow.u.data_mut()[i] = ((g22 * h1 - g12 * h2) * idet) as f32;
        flow.v.data_mut()[i] = ((g11 * h2 - g12 * h1) * idet) as f32;
    }
    flow
}

/// Dense flow from `prev` to `next`: `next(p + flow(p)) ≈ prev(p)`.
pub fn farneback_flow(prev: &Frame, next: &Frame, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(Error::dims(
            "farneback_flow frames",
            format!("{}x{}", prev.width(), prev.height()),
            format!("{}x{}", next.width(), next.height()),
        ));
    }
    let (w0, h0) = (prev.width(), prev.height());
    let img0 = prev.grid().map(|v| v * INTENSITY_SCALE);
    let img1 = next.grid().map(|v| v * INTENSITY_SCALE);

    let mut levels = Vec::new();
    for k in 0..params.pyramid_levels {
        let scale = params.pyramid_scale.powi(k as i32);
        let w = (w0 as f64 * scale).round() as usize;
        let h = (h0 as f64 * scale).round() as usize;
        if k > 0 && w.min(h) < MIN_LEVEL_SIDE {
            break;
        }
        levels.push((scale, w, h));
    }

    let mut flow: Option<FlowField> = None;
    for &(scale, w, h) in levels.iter().rev() {
        let sigma = ((1.0 / scale - 1.0) * 0.5) as f32;
        let level = |img: &Grid<f32>| {
            if scale < 1.0 {
                img.gaussian_blur(sigma).resize_bilinear(w, h)
            } else {
                img.clone()
            }
        };
        let (l0, l1) = (level(&img0), level(&img1));
        let mut current = match flow.take() {
            None => FlowField::zeros(w, h),
            Some(f) => {
                let sx = w as f32 / f.width() as f32;
                let sy = h as f32 / f.height() as f32;
                FlowField {
                    u: f.u.resize_bilinear(w, h).map(|v| v * sx),
                    v: f.v.resize_bilinear(w, h).map(|v| v * sy),
                }
            }
        };
        let e0 = poly_expansion(&l0, params.poly_n, params.poly_sigma);
        let e1 = poly_expansion(&l1, params.poly_n, params.poly_sigma);
        for _ in 0..params.iterations {
            let terms = update_matrices(&e0, &e1, &current);
            current = solve_flow(&terms, params.window_size);
        }
        flow = Some(current);
    }
    let mut flow = flow.expect("at least one pyramid level");
    let bound = w0 as f32;
    for g in [&mut flow.u, &mut flow.v] {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite flow estimate".into()));
        }
        g.data_mut().iter_mut().for_each(|v| *v = v.clamp(-bound, bound));
    }
    Ok(flow)
}

/// Component-wise median over a `kernel × kernel` window with replicate padding.
pub fn median_filter_flow(flow: &FlowField, kernel: usize) -> Result<FlowField> {
    if kernel < 3 || kernel % 2 == 0 {
        return Err(Error::Invalid(format!(
            "median kernel must be odd and >= 3, got {kernel}"
        )));
    }
    Ok(FlowField {
        u: median_filter(&flow.u, kernel),
        v: median_filter(&flow.v, kernel),
    })
}

fn median_filter(g: &Grid<f32>, kernel: usize) -> Grid<f32> {
    let r = (kernel / 2) as isize;
    let mut buf = Vec::with_capacity(kernel * kernel);
    Grid::from_fn(g.width(), g.height(), |x, y| {
        buf.clear();
        for dy in -r..=r {
            for dx in -r..=r {
                buf.push(g.get_clamped(x as isize + dx, y as isize + dy));
            }
        }
        let mid = buf.len() / 2;
        *buf.select_nth_unstable_by(mid, f32::total_cmp).1
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthscenes::smooth_texture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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

    fn interior_mean(g: &Grid<f32>, margin: usize) -> f32 {
        let mut s = 0.0;
        let mut n = 0;
        for y in margin..g.height() - margin {
            for x in margin..g.width() - margin {
                s += g.get(x, y);
                n += 1;
            }
        }
        s / n as f32
    }

    #[test]
    fn identical_frames_give_near_zero_flow() {
        let (a, _) = shifted_pair(1, 0, 0);
        let f = farneback_flow(&a, &a, &FlowParams::default()).unwrap();
        assert!(f.u.max_abs() < 0.1 && f.v.max_abs() < 0.1);
    }

    #[test]
    fn recovers_horizontal_shift() {
        let (a, b) = shifted_pair(2, 3, 0);
        let f = farneback_flow(&a, &b, &FlowParams::default()).unwrap();
        let (mu, mv) = (interior_mean(&f.u, 8), interior_mean(&f.v, 8));
        assert!((2.75..=3.25).contains(&mu), "u = {mu}");
        assert!(mv.abs() <= 0.25, "v = {mv}");
    }

    #[test]
    fn recovers_diagonal_shift() {
        let (a, b) = shifted_pair(3, 1, 2);
        let f = farneback_flow(&a, &b, &FlowParams::default()).unwrap();
        let (mu, mv) = (interior_mean(&f.u, 8), interior_mean(&f.v, 8));
        assert!((mu - 1.0).abs() <= 0.25 && (mv - 2.0).abs() <= 0.25, "({mu}, {mv})");
    }

    #[test]
    fn rejects_mismatched_frames_and_bad_params() {
        let a = Frame::new(Grid::filled(32, 32, 0.5)).unwrap();
        let b = Frame::new(Grid::filled(40, 32, 0.5)).unwrap();
        assert!(farneback_flow(&a, &b, &FlowParams::default()).is_err());
        let p = FlowParams {
            window_size: 14,
            ..FlowParams::default()
        };
        assert!(farneback_flow(&a, &a, &p).is_err());
    }

    #[test]
    fn median_of_constant_flow_is_unchanged() {
        let f = FlowField::constant(20, 20, 1.0, 0.0);
        assert_eq!(median_filter_flow(&f, 3).unwrap(), f);
        assert!(median_filter_flow(&f, 4).is_err());
        assert!(median_filter_flow(&f, 1).is_err());
    }

    #[test]
    fn median_removes_singleton_outlier() {
        let mut f = FlowField::constant(10, 10, 1.0, 0.0);
        f.u.set(4, 4, 100.0);
        let m = median_filter_flow(&f, 3).unwrap();
        assert_eq!(m.u.get(4, 4), 1.0);
    }

    #[test]
    fn median_matches_brute_force_nine_point_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (w, h) = (13, 9);
        let u = Grid::from_fn(w, h, |_, _| rng.gen_range(-5.0f32..5.0));
        let v = Grid::from_fn(w, h, |_, _| rng.gen_range(-5.0f32..5.0));
        let flow = FlowField { u, v };
        let m = median_filter_flow(&flow, 3).unwrap();
        for (src, dst) in [(&flow.u, &m.u), (&flow.v, &m.v)] {
            for y in 0..h {
                for x in 0..w {
                    let mut vals = Vec::new();
                    for dy in -1i32..=1 {
                        for dx in -1i32..=1 {
                            let xx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                            let yy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                            vals.push(src.get(xx, yy));
                        }
                    }
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    assert_eq!(dst.get(x, y), vals[4]);
                }
            }
        }
    }

    #[test]
    fn flow_dump_roundtrip() {
        let mut f = FlowField::constant(5, 4, 0.5, -1.25);
        f.u.set(2, 3, 7.0);
        let mut buf = Vec::new();
        f.write_dump(&mut buf).unwrap();
        assert!(buf.starts_with(b"SFW1|5|4|2\n"));
        let g = FlowField::read_dump(&mut buf.as_slice()).unwrap();
        assert_eq!(f, g);
    }
}
