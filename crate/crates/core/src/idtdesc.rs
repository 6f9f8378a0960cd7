//! HoG, HoF and MBH histograms over a 32×32 px tube following each
//! trajectory, split into 2×2 spatial × 3 temporal cells.

use crate::clipio::Frame;
use crate::denseflow::FlowField;
use crate::error::{Error, Result};
use crate::featuremaps::soft_bins;
use crate::grid::Grid;
use crate::trajectories::{Trajectory, TRACK_STEPS};

pub const PATCH: usize = 32;
pub const SPATIAL_CELLS: usize = 2;
pub const TEMPORAL_CELLS: usize = 3;
pub const CELLS: usize = SPATIAL_CELLS * SPATIAL_CELLS * TEMPORAL_CELLS;
pub const ORIENT_BINS: usize = 8;
pub const HOF_BINS: usize = ORIENT_BINS + 1;
pub const HOG_DIM: usize = CELLS * ORIENT_BINS;
pub const HOF_DIM: usize = CELLS * HOF_BINS;
pub const MBH_DIM: usize = 2 * HOG_DIM;
/// Concatenated `[MBH | HoF | HoG]`.
pub const IDT_DIM: usize = MBH_DIM + HOF_DIM + HOG_DIM;
/// Flow magnitude below which a sample counts as no motion.
pub const ZERO_MOTION: f32 = 1e-2;

const FRAMES_PER_CELL: usize = TRACK_STEPS / TEMPORAL_CELLS;
const BIN_WIDTH: f32 = std::f32::consts::TAU / ORIENT_BINS as f32;

/// Per-pixel soft orientation binning of one plane: lower bin and the
/// weights of the lower and upper bins.
#[derive(Clone, Debug)]
struct BinnedPlane {
    width: usize,
    lo: Vec<u8>,
    w_lo: Vec<f32>,
    w_hi: Vec<f32>,
}

impl BinnedPlane {
    /// Gradient orientation weighted by gradient magnitude.
    fn gradient(g: &Grid<f32>) -> Self {
        let (gx, gy) = g.gradients();
        Self::from_vectors(g.width(), gx.data(), gy.data(), |dx, dy, mag| {
            (mag > 0.0).then(|| (dy.atan2(dx), mag))
        })
    }

    /// Flow orientation with unit weight; slow samples go to the zero-motion bin.
    fn flow(f: &FlowField) -> Self {
        Self::from_vectors(f.width(), f.u.data(), f.v.data(), |u, v, mag| {
            Some(if mag < ZERO_MOTION {
                (f32::NAN, 1.0)
            } else {
                (v.atan2(u), 1.0)
            })
        })
    }

    fn from_vectors(
        width: usize,
        xs: &[f32],
        ys: &[f32],
        weigh: impl Fn(f32, f32, f32) -> Option<(f32, f32)>,
    ) -> Self {
        let n = xs.len();
        let mut out = BinnedPlane {
            width,
            lo: vec![0; n],
            w_lo: vec![0.0; n],
            w_hi: vec![0.0; n],
        };
        for i in 0..n {
            let (x, y) = (xs[i], ys[i]);
            let Some((angle, weight)) = weigh(x, y, (x * x + y * y).sqrt()) else {
                continue;
            };
            if angle.is_nan() {
                out.lo[i] = ORIENT_BINS as u8;
                out.w_lo[i] = weight;
            } else {
                let (lo, _, frac) = soft_bins(angle, BIN_WIDTH, ORIENT_BINS);
                out.lo[i] = lo as u8;
                out.w_lo[i] = weight * (1.0 - frac);
                out.w_hi[i] = weight * frac;
            }
        }
        out
    }

    /// Adds pixel `(x, y)` into an 8-bin histogram, or a 9-bin one whose last
    /// bin holds zero-motion samples.
    #[inline]
    fn add(&self, x: usize, y: usize, hist: &mut [f32]) {
        let i = y * self.width + x;
        let lo = self.lo[i] as usize;
        if lo == ORIENT_BINS {
            hist[ORIENT_BINS] += self.w_lo[i];
        } else {
            hist[lo] += self.w_lo[i];
            hist[(lo + 1) % ORIENT_BINS] += self.w_hi[i];
        }
    }
}

/// Per-clip binned gradient and flow planes shared by all trajectories.
#[derive(Clone, Debug)]
pub struct IdtInputs {
    width: usize,
    height: usize,
    image: Vec<BinnedPlane>,
    flow: Vec<BinnedPlane>,
    flow_u: Vec<BinnedPlane>,
    flow_v: Vec<BinnedPlane>,
}

impl IdtInputs {
    pub fn new(frames: &[Frame], flows: &[FlowField]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InsufficientData("no frames for IDT descriptors".into()))?;
        let (width, height) = (first.width(), first.height());
        if flows
            .iter()
            .any(|f| (f.width(), f.height()) != (width, height))
        {
            return Err(Error::dims(
                "IDT flow fields",
                format!("{width}x{height}"),
                "mixed sizes",
            ));
        }
        Ok(IdtInputs {
            width,
            height,
            image: frames.iter().map(|f| BinnedPlane::gradient(f.grid())).collect(),
            flow: flows.iter().map(BinnedPlane::flow).collect(),
            flow_u: flows.iter().map(|f| BinnedPlane::gradient(&f.u)).collect(),
            flow_v: flows.iter().map(|f| BinnedPlane::gradient(&f.v)).collect(),
        })
    }

    fn check(&self, traj: &Trajectory, available: usize, what: &str) -> Result<()> {
        let last = traj.start_frame() + TRACK_STEPS - 1;
        if last >= available {
            return Err(Error::Invalid(format!(
                "trajectory needs {what} up to index {last}, clip has {available}"
            )));
        }
        Ok(())
    }
}

/// Visits every pixel of every cell: `visit(cell, z, Some((x, y)))` for
/// in-frame pixels and `visit(cell, z, None)` for zero-padded ones.
fn for_each_sample(
    traj: &Trajectory,
    width: usize,
    height: usize,
    mut visit: impl FnMut(usize, usize, Option<(usize, usize)>),
) {
    let half = (PATCH / 2) as isize;
    let sub = PATCH / SPATIAL_CELLS;
    for (k, p) in traj.points().iter().take(TRACK_STEPS).enumerate() {
        let t_cell = k / FRAMES_PER_CELL;
        let cx = p.x.round() as isize;
        let cy = p.y.round() as isize;
        for dy in 0..PATCH {
            let y = cy - half + dy as isize;
            for dx in 0..PATCH {
                let x = cx - half + dx as isize;
                let cell = (t_cell * SPATIAL_CELLS + dy / sub) * SPATIAL_CELLS + dx / sub;
                let inside = x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height;
                visit(cell, p.z, inside.then(|| (x as usize, y as usize)));
            }
        }
    }
}

fn oriented_histogram(traj: &Trajectory, planes: &[BinnedPlane], w: usize, h: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; HOG_DIM];
    for_each_sample(traj, w, h, |cell, z, at| {
        if let Some((x, y)) = at {
            let base = cell * ORIENT_BINS;
            planes[z].add(x, y, &mut out[base..base + ORIENT_BINS]);
        }
    });
    out
}

/// L2-normalizes each consecutive block of `block` values; zero blocks stay zero.
pub fn normalize_blocks(v: &mut [f32], block: usize) {
    for b in v.chunks_exact_mut(block) {
        let n = b.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 0.0 {
            b.iter_mut().for_each(|x| *x /= n);
        }
    }
}

/// Unnormalized gradient-orientation histograms, 8 bins × 12 cells.
pub fn hog_raw(traj: &Trajectory, inputs: &IdtInputs) -> Result<Vec<f32>> {
    inputs.check(traj, inputs.image.len(), "frames")?;
    Ok(oriented_histogram(traj, &inputs.image, inputs.width, inputs.height))
}

/// Unnormalized flow histograms: 8 soft orientation bins plus a zero-motion
/// bin per cell. Every sample (zero-padded ones included) adds unit mass.
pub fn hof_raw(traj: &Trajectory, inputs: &IdtInputs) -> Result<Vec<f32>> {
    inputs.check(traj, inputs.flow.len(), "flow steps")?;
    let mut out = vec![0.0f32; HOF_DIM];
    for_each_sample(traj, inputs.width, inputs.height, |cell, z, at| {
        let base = cell * HOF_BINS;
        match at {
            Some((x, y)) => inputs.flow[z].add(x, y, &mut out[base..base + HOF_BINS]),
            None => out[base + ORIENT_BINS] += 1.0,
        }
    });
    Ok(out)
}

/// Unnormalized motion-boundary histograms: HoG of the u plane then of the v plane.
pub fn mbh_raw(traj: &Trajectory, inputs: &IdtInputs) -> Result<Vec<f32>> {
    inputs.check(traj, inputs.flow.len(), "flow steps")?;
    let mut out = oriented_histogram(traj, &inputs.flow_u, inputs.width, inputs.height);
    out.extend(oriented_histogram(
        traj,
        &inputs.flow_v,
        inputs.width,
        inputs.height,
    ));
    Ok(out)
}

pub fn hog_descriptor(traj: &Trajectory, inputs: &IdtInputs) -> Result<Vec<f32>> {
    let mut v = hog_raw(traj, inputs)?;
    normalize_blocks(&mut v, ORIENT_BINS);
    Ok(v)
}

pub fn hof_descriptor(traj: &Trajectory, inputs: &IdtInputs) -> Result<Vec<f32>> {
    let mut v = hof_raw(traj, inputs)?;
    normalize_blocks(&mut v, HOF_BINS);
    Ok(v)
}

pub fn mbh_descriptor(traj: &Trajectory, inputs: &IdtInputs) -> Result<Vec<f32>> {
    let mut v = mbh_raw(traj, inputs)?;
    normalize_blocks(&mut v, ORIENT_BINS);
    Ok(v)
}

/// `[MBH | HoF | HoG]`, 396 values.
pub fn idt_descriptor(traj: &Trajectory, inputs: &IdtInputs) -> Result<Vec<f32>> {
    let mut v = mbh_descriptor(traj, inputs)?;
    v.extend(hof_descriptor(traj, inputs)?);
    v.extend(hog_descriptor(traj, inputs)?);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames_from(f: impl Fn(usize, usize) -> f32) -> Vec<Frame> {
        (0..16)
            .map(|_| Frame::new(Grid::from_fn(64, 64, &f)).unwrap())
            .collect()
    }

    fn still(x: f32, y: f32) -> Trajectory {
        Trajectory::from_positions(0, &[(x, y); 16]).unwrap()
    }

    fn inputs(frames: Vec<Frame>, flow: FlowField) -> IdtInputs {
        IdtInputs::new(&frames, &vec![flow; 15]).unwrap()
    }

    #[test]
    fn lengths() {
        let inp = inputs(frames_from(|x, y| ((x * 7 + y * 3) % 11) as f32 / 11.0), FlowField::constant(64, 64, 0.3, 0.1));
        let t = still(32.0, 32.0);
        assert_eq!(hog_descriptor(&t, &inp).unwrap().len(), 96);
        assert_eq!(hof_descriptor(&t, &inp).unwrap().len(), 108);
        assert_eq!(mbh_descriptor(&t, &inp).unwrap().len(), 192);
        assert_eq!(idt_descriptor(&t, &inp).unwrap().len(), IDT_DIM);
        assert_eq!(IDT_DIM, 396);
    }

    #[test]
    fn constant_volume_has_zero_hog() {
        let inp = inputs(frames_from(|_, _| 0.5), FlowField::zeros(64, 64));
        assert!(hog_descriptor(&still(32.0, 32.0), &inp).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_edge_hog_matches_direct_histogram() {
        let inp = inputs(frames_from(|x, _| if x < 30 { 0.2 } else { 0.7 }), FlowField::zeros(64, 64));
        let t = still(32.0, 32.0);
        let raw = hog_raw(&t, &inp).unwrap();
        // patch columns 16..48 cover the edge at x=29,30 in the left cells;
        // each edge pixel has gx = 0.25 and lands wholly in bin 0
        for cell in 0..CELLS {
            let h = &raw[cell * 8..cell * 8 + 8];
            let left = cell % 2 == 0;
            let expected = if left { 2.0 * 0.25 * 16.0 * 5.0 } else { 0.0 };
            assert!((h[0] - expected).abs() < 1e-4, "cell {cell}: {h:?}");
            assert!(h[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_flow_goes_to_zero_bins() {
        let inp = inputs(frames_from(|_, _| 0.5), FlowField::zeros(64, 64));
        let raw = hof_raw(&still(32.0, 32.0), &inp).unwrap();
        for cell in 0..CELLS {
            assert!(raw[cell * 9..cell * 9 + 8].iter().all(|&v| v == 0.0));
            assert_eq!(raw[cell * 9 + 8], (16 * 16 * 5) as f32);
        }
    }

    #[test]
    fn rightward_flow_fills_first_bin() {
        let inp = inputs(frames_from(|_, _| 0.5), FlowField::constant(64, 64, 2.0, 0.0));
        let d = hof_descriptor(&still(32.0, 32.0), &inp).unwrap();
        for cell in 0..CELLS {
            assert!((d[cell * 9] - 1.0).abs() < 1e-6);
            assert!(d[cell * 9 + 1..cell * 9 + 9].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn hof_partition_of_unity_near_border() {
        let mut flow = FlowField::zeros(64, 64);
        flow.u = Grid::from_fn(64, 64, |x, y| (x as f32 - 30.0) * 0.05 + (y % 3) as f32 * 0.01);
        flow.v = Grid::from_fn(64, 64, |x, y| (y as f32 * 0.37).sin() * (x as f32 * 0.1).cos());
        let inp = inputs(frames_from(|_, _| 0.5), flow);
        let pos: Vec<(f32, f32)> = (0..16).map(|i| (3.0 + i as f32 * 0.5, 60.0 - i as f32)).collect();
        let raw = hof_raw(&Trajectory::from_positions(0, &pos).unwrap(), &inp).unwrap();
        for cell in 0..CELLS {
            let mass: f32 = raw[cell * 9..cell * 9 + 9].iter().sum();
            assert!((mass - 1280.0).abs() < 1e-2, "cell {cell} mass {mass}");
        }
    }

    #[test]
    fn mbh_of_constant_flow_is_zero() {
        let inp = inputs(frames_from(|_, _| 0.5), FlowField::constant(64, 64, 1.5, -0.7));
        assert!(mbh_descriptor(&still(20.0, 40.0), &inp).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn u_step_shows_in_mbhx_only() {
        let mut flow = FlowField::zeros(64, 64);
        flow.u = Grid::from_fn(64, 64, |x, _| if x < 30 { 0.0 } else { 1.0 });
        let inp = inputs(frames_from(|_, _| 0.5), flow);
        let raw = mbh_raw(&still(32.0, 32.0), &inp).unwrap();
        let (mx, my) = raw.split_at(HOG_DIM);
        assert!(my.iter().all(|&v| v == 0.0));
        let bin0: f32 = mx.iter().step_by(8).sum();
        let total: f32 = mx.iter().sum();
        assert!(bin0 > 0.0 && (bin0 - total).abs() < 1e-4);
    }

    #[test]
    fn short_clip_is_rejected() {
        let frames = frames_from(|_, _| 0.5);
        let inp = IdtInputs::new(&frames, &vec![FlowField::zeros(64, 64); 10]).unwrap();
        assert!(hof_raw(&still(5.0, 5.0), &inp).is_err());
    }
}
