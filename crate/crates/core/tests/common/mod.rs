//! Independent reference implementations and fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use std::path::Path;

use nearmiss_core::clipio::{ClipRecord, SemanticMask};
use nearmiss_core::encoding::Codebook;
use nearmiss_core::featuremaps::{FeatureMap, Layer, Stream};
use nearmiss_core::grid::Grid;
use nearmiss_core::pipeline::{load_manifest, PipelineConfig};
use nearmiss_core::semanticflow::{ChannelMode, ChannelTag, SemanticClass};
use nearmiss_core::synthscenes::{generate_dataset, DatasetConfig};
use nearmiss_core::trajectories::Trajectory;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Brute-force pooling: for each of the 16 points, round the scaled
/// coordinate, clamp it into the map, pick the frame (temporal maps reuse the
/// last step for a point one past their end) and add every channel.
pub fn pool_oracle(traj: &Trajectory, map: &FeatureMap<f64>) -> Vec<f64> {
    let mut out = vec![0.0; map.channels];
    let factor = map.scale * map.stride_factor;
    for p in traj.points() {
        let cell = |c: f32, size: usize| -> usize {
            let v = (c as f64 * factor).round();
            if v < 0.0 {
                0
            } else if v > (size - 1) as f64 {
                size - 1
            } else {
                v as usize
            }
        };
        let (x, y) = (cell(p.x, map.width), cell(p.y, map.height));
        let f = if p.z >= map.frames && map.layer.stream() == Stream::Temporal {
            map.frames - 1
        } else {
            p.z
        };
        for (c, o) in out.iter_mut().enumerate() {
            *o += map.get(f, c, x, y);
        }
    }
    out
}

/// Random map and a random trajectory that fits its clip.
pub fn random_pool_case(r: &mut ChaCha8Rng) -> (Trajectory, FeatureMap<f64>) {
    let layer = Layer::ALL[r.gen_range(0..4)];
    let scale = [1.0, std::f64::consts::FRAC_1_SQRT_2, 0.5][r.gen_range(0..3)];
    let stride = [1.0, 0.5, 0.25, 1.0 / 16.0][r.gen_range(0..4)];
    let frame_w = r.gen_range(32..96usize);
    let frame_h = r.gen_range(32..96usize);
    let clip_frames = r.gen_range(16..24usize);
    let frames = match layer.stream() {
        Stream::Spatial => clip_frames,
        Stream::Temporal => clip_frames - 1,
    };
    let w = ((frame_w as f64) * scale * stride).ceil().max(1.0) as usize;
    let h = ((frame_h as f64) * scale * stride).ceil().max(1.0) as usize;
    let channels = r.gen_range(1..9);
    let mut map = FeatureMap::<f64>::zeros(layer, scale, channels, frames, w, h, stride);
    map.data.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
    let start = r.gen_range(0..=clip_frames - 16);
    let mut x = r.gen_range(-2.0..frame_w as f32 + 2.0);
    let mut y = r.gen_range(-2.0..frame_h as f32 + 2.0);
    let pos: Vec<(f32, f32)> = (0..16)
        .map(|_| {
            let p = (x, y);
            x += r.gen_range(-3.0..3.0);
            y += r.gen_range(-3.0..3.0);
            p
        })
        .collect();
    (Trajectory::from_positions(start, &pos).unwrap(), map)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Brute-force VLAD: linear scan for the nearest center (first on ties),
/// per-center residual sums, signed square root, unit L2 norm.
pub fn vlad_oracle(descs: &[f64], centers: &[f64], k: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; k * dim];
    for x in descs.chunks_exact(dim) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d: f64 = (0..dim).map(|j| (x[j] - centers[c * dim + j]).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        for j in 0..dim {
            v[best * dim + j] += x[j] - centers[best * dim + j];
        }
    }
    if descs.is_empty() {
        return v;
    }
    for e in v.iter_mut() {
        *e = e.signum() * e.abs().sqrt();
    }
    let n = v.iter().map(|e| e * e).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|e| *e /= n);
    }
    v
}

pub fn random_codebook(r: &mut ChaCha8Rng, k: usize, dim: usize) -> Codebook<f64> {
    Codebook {
        k,
        dim,
        centers: (0..k * dim).map(|_| r.gen_range(-1.0..1.0)).collect(),
        inertia: Vec::new(),
        seed: 0,
    }
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix; eigenvalues
/// descending with matching column eigenvectors.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[b * n + b].total_cmp(&m[a * n + a]));
    let vals = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &i) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + col] = v[k * n + i];
        }
    }
    (vals, vecs)
}

/// Channel by brute force: count nearest-pixel codes over the 16 points,
/// background unless foreground points reach the threshold fraction, then
/// the most frequent class (earliest on ties).
pub fn channel_oracle(traj: &Trajectory, masks: &[SemanticMask], mode: ChannelMode, thr: f64) -> ChannelTag {
    if mode == ChannelMode::Off {
        return ChannelTag::All;
    }
    let mut counts = [0usize; 4];
    for p in traj.points() {
        let m = masks[p.z].grid();
        let x = (p.x.round() as isize).clamp(0, m.width() as isize - 1) as usize;
        let y = (p.y.round() as isize).clamp(0, m.height() as isize - 1) as usize;
        counts[m.get(x, y) as usize] += 1;
    }
    let fg = counts[1] + counts[2] + counts[3];
    if fg == 0 || (fg as f64) < thr * 16.0 {
        return ChannelTag::Bg;
    }
    if mode == ChannelMode::Combined {
        return ChannelTag::FgCombined;
    }
    let mut best = 1;
    for c in 2..4 {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    ChannelTag::Fg(SemanticClass::from_code(best as u8).unwrap())
}

/// Smooth random texture with structure at several scales.
pub fn texture(w: usize, h: usize, seed: u64) -> Grid<f32> {
    let mut r = rng(seed);
    let noise = Grid::from_fn(w, h, |_, _| r.gen_range(0.0f32..1.0));
    let a = noise.gaussian_blur(1.5);
    let b = noise.gaussian_blur(4.0);
    Grid::from_fn(w, h, |x, y| {
        (0.5 + 3.0 * (a.get(x, y) - 0.5) + 4.0 * (b.get(x, y) - 0.5)).clamp(0.0, 1.0)
    })
}

/// Generates a preset dataset and returns its resolved records.
pub fn dataset(preset: &str, seed: u64, dir: &Path) -> Vec<ClipRecord> {
    let mut cfg = DatasetConfig::preset(preset).unwrap();
    cfg.seed = seed;
    generate_dataset(&cfg, dir).unwrap();
    load_manifest(&dir.join("manifest.jsonl")).unwrap()
}

/// Tiny-preset dataset with `per_class` train and test clips per class.
pub fn small_dataset(seed: u64, train: usize, test: usize, dir: &Path) -> Vec<ClipRecord> {
    let mut cfg = DatasetConfig::preset("tiny").unwrap();
    cfg.seed = seed;
    cfg.per_class.train = train;
    cfg.per_class.test = test;
    generate_dataset(&cfg, dir).unwrap();
    load_manifest(&dir.join("manifest.jsonl")).unwrap()
}

/// Pipeline settings small enough for tiny datasets.
pub fn small_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = seed;
    cfg.encode.pca_dim = 8;
    cfg.encode.codebook_size = 4;
    cfg.encode.max_fit_descriptors = 2000;
    cfg
}
