//! Multi-scale feature maps pooled along trajectories.
//!
//! Two providers exist. The built-in one computes small filter banks on the
//! clip itself: oriented-gradient energy for the spatial layers and sign-split
//! flow for the temporal layers. The external one reads precomputed network
//! activations from `SFM1` tensor files.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::clipio::Frame;
use crate::denseflow::FlowField;
use crate::error::{Error, Result};
use crate::grid::{scaled_size, Grid};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Spatial,
    Temporal,
}

/// Network layer a map stands for. The stream is implied by the layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Spa4,
    Spa5,
    Tem3,
    Tem4,
}

impl Layer {
    pub const ALL: [Layer; 4] = [Layer::Spa4, Layer::Spa5, Layer::Tem3, Layer::Tem4];

    pub fn stream(self) -> Stream {
        match self {
            Layer::Spa4 | Layer::Spa5 => Stream::Spatial,
            Layer::Tem3 | Layer::Tem4 => Stream::Temporal,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Layer::Spa4 => "spa4",
            Layer::Spa5 => "spa5",
            Layer::Tem3 => "tem3",
            Layer::Tem4 => "tem4",
        }
    }

    pub fn parse(s: &str) -> Option<Layer> {
        Layer::ALL.into_iter().find(|l| l.name() == s)
    }

    /// Channel count of the two-stream network layer.
    pub fn external_channels(self) -> usize {
        match self {
            Layer::Spa4 | Layer::Spa5 | Layer::Tem4 => 512,
            Layer::Tem3 => 256,
        }
    }

    /// Channel count of the built-in stand-in bank.
    pub fn builtin_channels(self) -> usize {
        match self {
            Layer::Spa4 => 8,
            Layer::Spa5 => 16,
            Layer::Tem3 | Layer::Tem4 => TEMPORAL_CHANNELS,
        }
    }

    /// Orientation bins (spatial) or temporal stride (temporal) of the built-in bank.
    fn builtin_param(self) -> usize {
        match self {
            Layer::Spa4 => 8,
            Layer::Spa5 => 16,
            Layer::Tem3 => 1,
            Layer::Tem4 => 2,
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `u+`, `u−`, `v+`, `v−`.
pub const TEMPORAL_CHANNELS: usize = 4;

/// Descending scale ratios, the first of which is 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScaleSpec(Vec<f64>);

impl Default for ScaleSpec {
    fn default() -> Self {
        ScaleSpec(vec![1.0, std::f64::consts::FRAC_1_SQRT_2, 0.5])
    }
}

impl ScaleSpec {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        let s = ScaleSpec(ratios);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.0;
        if r.first() != Some(&1.0) {
            return Err(Error::Invalid("scale list must start with 1.0".into()));
        }
        if r.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::Invalid("scale ratios must lie in (0,1]".into()));
        }
        if r.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Invalid("scale ratios must be strictly descending".into()));
        }
        Ok(())
    }

    pub fn ratios(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A stack of per-frame channel grids for one layer at one scale.
///
/// Storage is frame-major, channel-major within a frame, row-major within a channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub layer: Layer,
    pub scale: f64,
    pub channels: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Map pixels per input pixel at scale 1.
    pub stride_factor: f64,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(
        layer: Layer,
        scale: f64,
        channels: usize,
        frames: usize,
        width: usize,
        height: usize,
        stride_factor: f64,
    ) -> Self {
        FeatureMap {
            layer,
            scale,
            channels,
            frames,
            width,
            height,
            stride_factor,
            data: vec![T::zero(); channels * frames * width * height],
        }
    }

    #[inline]
    pub fn index(&self, frame: usize, channel: usize, x: usize, y: usize) -> usize {
        ((frame * self.channels + channel) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, frame: usize, channel: usize, x: usize, y: usize) -> T {
        self.data[self.index(frame, channel, x, y)]
    }

    pub fn plane(&self, frame: usize, channel: usize) -> &[T] {
        let start = self.index(frame, channel, 0, 0);
        &self.data[start..start + self.width * self.height]
    }

    pub fn plane_mut(&mut self, frame: usize, channel: usize) -> &mut [T] {
        let start = self.index(frame, channel, 0, 0);
        let len = self.width * self.height;
        &mut self.data[start..start + len]
    }

    /// Converts the element type.
    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            layer: self.layer,
            scale: self.scale,
            channels: self.channels,
            frames: self.frames,
            width: self.width,
            height: self.height,
            stride_factor: self.stride_factor,
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Checks the `ceil(r × size × stride)` rule against a frame size.
    pub fn check_geometry(&self, frame_width: usize, frame_height: usize) -> Result<()> {
        let w = scaled_size(frame_width, self.scale * self.stride_factor);
        let h = scaled_size(frame_height, self.scale * self.stride_factor);
        if (w, h) != (self.width, self.height) {
            return Err(Error::dims(
                format!("{} map at scale {}", self.layer, self.scale),
                format!("{w}x{h}"),
                format!("{}x{}", self.width, self.height),
            ));
        }
        Ok(())
    }
}

/// All scales of one layer.
pub type FeatureMaps<T> = Vec<FeatureMap<T>>;

/// Resamples a full-resolution plane to scale `r`, low-passing first when shrinking.
fn rescale_plane(g: &Grid<f32>, r: f64) -> Grid<f32> {
    let (w, h) = (scaled_size(g.width(), r), scaled_size(g.height(), r));
    if r < 1.0 {
        g.gaussian_blur(((1.0 / r - 1.0) * 0.5) as f32).resize_bilinear(w, h)
    } else {
        g.clone()
    }
}

/// Gradient magnitude soft-assigned to `bins` orientation channels over 360°.
pub fn orientation_energy(img: &Grid<f32>, bins: usize) -> Vec<Grid<f32>> {
    let (dx, dy) = img.gradients();
    let (w, h) = (img.width(), img.height());
    let mut out = vec![Grid::filled(w, h, 0.0f32); bins];
    let bin_width = std::f32::consts::TAU / bins as f32;
    for y in 0..h {
        for x in 0..w {
            let (gx, gy) = (dx.get(x, y), dy.get(x, y));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let (lo, hi, frac) = soft_bins(gy.atan2(gx), bin_width, bins);
            let i = y * w + x;
            out[lo].data_mut()[i] += mag * (1.0 - frac);
            out[hi].data_mut()[i] += mag * frac;
        }
    }
    out
}

/// Two nearest orientation bins of `angle` (radians) and the weight of the upper one.
#[inline]
pub fn soft_bins(angle: f32, bin_width: f32, bins: usize) -> (usize, usize, f32) {
    let a = angle.rem_euclid(std::f32::consts::TAU);
    let pos = a / bin_width;
    let lo = (pos.floor() as usize) % bins;
    let frac = pos - pos.floor();
    (lo, (lo + 1) % bins, frac)
}

/// Oriented-gradient energy maps for one spatial layer at every scale.
pub fn builtin_spatial_maps(
    frames: &[Frame],
    scales: &ScaleSpec,
    layer: Layer,
) -> Result<FeatureMaps<f32>> {
    if layer.stream() != Stream::Spatial {
        return Err(Error::Invalid(format!("{layer} is not a spatial layer")));
    }
    let bins = layer.builtin_param();
    spatial_maps_with_bins(frames, scales, layer, bins)
}

/// Spatial bank with an explicit bin count.
pub fn spatial_maps_with_bins(
    frames: &[Frame],
    scales: &ScaleSpec,
    layer: Layer,
    bins: usize,
) -> Result<FeatureMaps<f32>> {
    if bins < 4 {
        return Err(Error::Invalid(format!("need at least 4 orientation bins, got {bins}")));
    }
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let (fw, fh) = (first.width(), first.height());
    Ok(scales
        .ratios()
        .iter()
        .map(|&r| {
            let (w, h) = (scaled_size(fw, r), scaled_size(fh, r));
            let mut map = FeatureMap::zeros(layer, r, bins, frames.len(), w, h, 1.0);
            for (f, frame) in frames.iter().enumerate() {
                let energy = orientation_energy(&rescale_plane(frame.grid(), r), bins);
                for (c, g) in energy.iter().enumerate() {
                    map.plane_mut(f, c).copy_from_slice(g.data());
                }
            }
            map
        })
        .collect())
}

/// Sign-split flow maps for one temporal layer; one map frame per flow step.
/// Values are displacements in map pixels (flow × r).
pub fn builtin_temporal_maps(
    flows: &[FlowField],
    scales: &ScaleSpec,
    layer: Layer,
) -> Result<FeatureMaps<f32>> {
    if layer.stream() != Stream::Temporal {
        return Err(Error::Invalid(format!("{layer} is not a temporal layer")));
    }
    let stride = layer.builtin_param();
    let Some(first) = flows.first() else {
        return Ok(Vec::new());
    };
    let (fw, fh) = (first.width(), first.height());
    let n = flows.len();
    let composed: Vec<(Grid<f32>, Grid<f32>)> = (0..n)
        .map(|t| {
            let mut u = flows[t].u.clone();
            let mut v = flows[t].v.clone();
            for k in 1..stride {
                let next = &flows[(t + k).min(n - 1)];
                u.data_mut()
                    .iter_mut()
                    .zip(next.u.data())
                    .for_each(|(a, b)| *a += b);
                v.data_mut()
                    .iter_mut()
                    .zip(next.v.data())
                    .for_each(|(a, b)| *a += b);
            }
            (u, v)
        })
        .collect();
    Ok(scales
        .ratios()
        .iter()
        .map(|&r| {
            let (w, h) = (scaled_size(fw, r), scaled_size(fh, r));
            let mut map = FeatureMap::zeros(layer, r, TEMPORAL_CHANNELS, n, w, h, 1.0);
            let rf = r as f32;
            for (t, (u, v)) in composed.iter().enumerate() {
                let (us, vs) = (rescale_plane(u, r), rescale_plane(v, r));
                for (c, (src, sign)) in [(&us, 1.0f32), (&us, -1.0), (&vs, 1.0), (&vs, -1.0)]
                    .into_iter()
                    .enumerate()
                {
                    map.plane_mut(t, c)
                        .iter_mut()
                        .zip(src.data())
                        .for_each(|(dst, &val)| *dst = (sign * val * rf).max(0.0));
                }
            }
            map
        })
        .collect())
}

/// Built-in maps for `layer` from whichever input its stream needs.
pub fn builtin_maps(
    layer: Layer,
    frames: &[Frame],
    flows: &[FlowField],
    scales: &ScaleSpec,
) -> Result<FeatureMaps<f32>> {
    match layer.stream() {
        Stream::Spatial => builtin_spatial_maps(frames, scales, layer),
        Stream::Temporal => builtin_temporal_maps(flows, scales, layer),
    }
}

/// Directory holding the external tensors of one layer at one scale.
pub fn external_map_dir(root: &Path, layer: Layer, scale: f64) -> PathBuf {
    root.join(format!("{}_r{:.3}", layer.name(), scale))
}

/// Writes a map as an `SFM1` tensor file.
pub fn write_map_file(path: &Path, map: &FeatureMap<f32>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    binfmt::write_header(
        &mut out,
        &[
            "SFM1".into(),
            map.layer.name().into(),
            map.width.to_string(),
            map.height.to_string(),
            map.channels.to_string(),
            map.frames.to_string(),
            map.stride_factor.to_string(),
        ],
    )
    .and_then(|_| binfmt::write_f32s(&mut out, map.data.iter().copied()))
    .and_then(|_| out.flush())
    .map_err(|e| Error::io(path, e))
}

/// Reads one `SFM1` tensor file.
pub fn read_map_file(path: &Path, scale: f64) -> Result<FeatureMap<f32>> {
    let ctx = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let f = binfmt::read_header(&mut r, "SFM1", 7, &ctx)?;
    let layer = Layer::parse(&f[1])
        .ok_or_else(|| Error::header(&ctx, format!("unknown layer `{}`", f[1])))?;
    let width: usize = binfmt::parse_field(&f, 2, &ctx)?;
    let height: usize = binfmt::parse_field(&f, 3, &ctx)?;
    let channels: usize = binfmt::parse_field(&f, 4, &ctx)?;
    let frames: usize = binfmt::parse_field(&f, 5, &ctx)?;
    let stride_factor: f64 = binfmt::parse_field(&f, 6, &ctx)?;
    if !(stride_factor > 0.0) {
        return Err(Error::header(&ctx, "stride factor must be positive"));
    }
    let data = binfmt::read_f32s(&mut r, width * height * channels * frames, &ctx)?;
    binfmt::expect_eof(&mut r, &ctx)?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::header(&ctx, "non-finite map value"));
    }
    Ok(FeatureMap {
        layer,
        scale,
        channels,
        frames,
        width,
        height,
        stride_factor,
        data,
    })
}

/// Loads the precomputed tensors of `layer` at `scale` for a clip of
/// `clip_frames` frames of size `frame_size`.
///
/// Files `map_%06d.sfm` under [`external_map_dir`] are concatenated in order.
/// Spatial layers need one map frame per clip frame; temporal layers one per
/// flow step (one fewer), though a trailing extra frame is accepted.
pub fn load_external_maps(
    root: &Path,
    layer: Layer,
    scale: f64,
    clip_frames: usize,
    frame_size: (usize, usize),
) -> Result<FeatureMap<f32>> {
    let dir = external_map_dir(root, layer, scale);
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("map_") && n.ends_with(".sfm"))
        })
        .collect();
    files.sort();

    let mut merged: Option<FeatureMap<f32>> = None;
    for path in &files {
        let part = read_map_file(path, scale)?;
        if part.layer != layer {
            return Err(Error::header(
                path.display().to_string(),
                format!("layer {} where {layer} was requested", part.layer),
            ));
        }
        if part.channels != layer.external_channels() {
            return Err(Error::CountMismatch {
                context: format!("{layer} channels in {}", path.display()),
                expected: layer.external_channels(),
                found: part.channels,
            });
        }
        merged = Some(match merged {
            None => part,
            Some(mut m) => {
                if (m.width, m.height, m.stride_factor) != (part.width, part.height, part.stride_factor)
                {
                    return Err(Error::dims(
                        path.display().to_string(),
                        format!("{}x{} stride {}", m.width, m.height, m.stride_factor),
                        format!("{}x{} stride {}", part.width, part.height, part.stride_factor),
                    ));
                }
                m.frames += part.frames;
                m.data.extend(part.data);
                m
            }
        });
    }
    let map = merged.ok_or_else(|| {
        Error::io(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no map files"),
        )
    })?;
    let needed = match layer.stream() {
        Stream::Spatial => clip_frames,
        Stream::Temporal => clip_frames.saturating_sub(1),
    };
    let allowed = needed..=clip_frames;
    if !allowed.contains(&map.frames) {
        return Err(Error::CountMismatch {
            context: format!("{layer} map frames in {}", dir.display()),
            expected: needed,
            found: map.frames,
        });
    }
    map.check_geometry(frame_size.0, frame_size.1)?;
    Ok(map)
}
