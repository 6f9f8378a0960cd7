//! Trajectory-pooled descriptors: feature-map values summed along the
//! scaled coordinates of each trajectory point.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::error::{Error, Result};
use crate::featuremaps::{FeatureMap, FeatureMaps, Layer, Stream};
use crate::scalar::{l2_normalize, Scalar};
use crate::semanticflow::{ChannelPartition, ChannelTag};
use crate::trajectories::Trajectory;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    #[serde(rename = "spatiotemporal_channel_max")]
    ChannelMax,
    #[serde(rename = "per_descriptor_l2")]
    L2,
    #[default]
    Both,
}

impl Normalization {
    fn channel_max(self) -> bool {
        matches!(self, Normalization::ChannelMax | Normalization::Both)
    }

    fn l2(self) -> bool {
        matches!(self, Normalization::L2 | Normalization::Both)
    }
}

/// Descriptor family written in dump headers and used as encoding keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DescLayer {
    Tdd(Layer),
    IdtHog,
    IdtHof,
    IdtMbh,
}

impl DescLayer {
    pub fn name(self) -> &'static str {
        match self {
            DescLayer::Tdd(l) => l.name(),
            DescLayer::IdtHog => "idt_hog",
            DescLayer::IdtHof => "idt_hof",
            DescLayer::IdtMbh => "idt_mbh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "idt_hog" => Some(DescLayer::IdtHog),
            "idt_hof" => Some(DescLayer::IdtHof),
            "idt_mbh" => Some(DescLayer::IdtMbh),
            other => Layer::parse(other).map(DescLayer::Tdd),
        }
    }
}

impl fmt::Display for DescLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for DescLayer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for DescLayer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        DescLayer::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown descriptor layer `{s}`")))
    }
}

/// Row-major descriptors of one layer within one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet<T> {
    pub layer: DescLayer,
    pub channel: ChannelTag,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> DescriptorSet<T> {
    pub fn new(layer: DescLayer, channel: ChannelTag, dim: usize) -> Self {
        DescriptorSet {
            layer,
            channel,
            dim,
            data: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn push(&mut self, row: &[T]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::dims(
                format!("{} descriptor", self.layer),
                self.dim.to_string(),
                row.len().to_string(),
            ));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    /// Writes an `SFD1` dump.
    pub fn write_dump<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        binfmt::write_header(
            w,
            &[
                "SFD1".into(),
                self.layer.name().into(),
                self.dim.to_string(),
                self.count().to_string(),
                self.channel.as_str().into(),
            ],
        )?;
        binfmt::write_f32s(w, self.data.iter().map(|v| v.to_f32_lossy()))
    }

    pub fn read_dump<R: BufRead>(r: &mut R, context: &str) -> Result<Self> {
        let f = binfmt::read_header(r, "SFD1", 5, context)?;
        let layer = DescLayer::parse(&f[1])
            .ok_or_else(|| Error::header(context, format!("unknown layer `{}`", f[1])))?;
        let dim: usize = binfmt::parse_field(&f, 2, context)?;
        let count: usize = binfmt::parse_field(&f, 3, context)?;
        let channel = ChannelTag::parse(&f[4])
            .ok_or_else(|| Error::header(context, format!("unknown channel `{}`", f[4])))?;
        let raw = binfmt::read_f32s(r, dim * count, context)?;
        binfmt::expect_eof(r, context)?;
        Ok(DescriptorSet {
            layer,
            channel,
            dim,
            data: raw.into_iter().map(|v| T::lit(f64::from(v))).collect(),
        })
    }
}

/// Map frame holding trajectory frame `z`. Temporal maps have one frame per
/// flow step, so the final point of a trajectory ending on the last clip
/// frame reads the last step.
fn map_frame<T>(map: &FeatureMap<T>, z: usize) -> Result<usize> {
    if z < map.frames {
        Ok(z)
    } else if z == map.frames && map.layer.stream() == Stream::Temporal && map.frames > 0 {
        Ok(z - 1)
    } else {
        Err(Error::Invalid(format!(
            "trajectory point at frame {z} outside {} map with {} frames",
            map.layer, map.frames
        )))
    }
}

/// Map cell for an input-pixel coordinate: `round(r × stride × c)`, clamped.
#[inline]
pub fn map_cell(coord: f32, factor: f64, size: usize) -> usize {
    let c = (f64::from(coord) * factor).round();
    c.clamp(0.0, (size - 1) as f64) as usize
}

/// Sums each channel over the 16 trajectory points. The map's own scale and
/// stride factor set the coordinate scaling.
pub fn pool_trajectory<T: Scalar>(traj: &Trajectory, map: &FeatureMap<T>) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); map.channels];
    pool_into(traj, map, &mut out)?;
    Ok(out)
}

fn pool_into<T: Scalar>(traj: &Trajectory, map: &FeatureMap<T>, out: &mut [T]) -> Result<()> {
    let factor = map.scale * map.stride_factor;
    let plane = map.width * map.height;
    for p in traj.points() {
        let f = map_frame(map, p.z)?;
        let x = map_cell(p.x, factor, map.width);
        let y = map_cell(p.y, factor, map.height);
        let base = f * map.channels * plane + y * map.width + x;
        for (c, o) in out.iter_mut().enumerate() {
            *o += map.data[base + c * plane];
        }
    }
    Ok(())
}

/// Applies the map-level part of `mode` in place: every channel divided by its
/// maximum over all positions and frames. All-zero channels stay zero.
pub fn normalize_maps<T: Scalar>(maps: &mut [FeatureMap<T>], mode: Normalization) {
    if !mode.channel_max() {
        return;
    }
    for map in maps {
        let plane = map.width * map.height;
        for c in 0..map.channels {
            let mut max = T::zero();
            for f in 0..map.frames {
                let start = (f * map.channels + c) * plane;
                for &v in &map.data[start..start + plane] {
                    if v > max {
                        max = v;
                    }
                }
            }
            if max > T::zero() {
                for f in 0..map.frames {
                    let start = (f * map.channels + c) * plane;
                    map.data[start..start + plane]
                        .iter_mut()
                        .for_each(|v| *v /= max);
                }
            }
        }
    }
}

/// Descriptor sets keyed by channel and layer.
pub type ClipDescriptors<T> = BTreeMap<(ChannelTag, DescLayer), DescriptorSet<T>>;

/// Pools every trajectory of every channel over every scale of each layer.
///
/// Maps are normalized first according to `norm`; descriptors are then
/// L2-normalized if `norm` asks for it. Rows are ordered trajectory-major,
/// scale-minor. Every channel of the partition's mode gets an entry, empty
/// or not.
pub fn extract_clip_descriptors<T: Scalar>(
    partition: &ChannelPartition,
    mut maps: BTreeMap<Layer, FeatureMaps<T>>,
    layers: &[Layer],
    norm: Normalization,
) -> Result<ClipDescriptors<T>> {
    let mut out = ClipDescriptors::new();
    for &layer in layers {
        let scales = maps
            .get_mut(&layer)
            .ok_or_else(|| Error::Invalid(format!("missing feature maps for layer {layer}")))?;
        normalize_maps(scales, norm);
        let scales = &*scales;
        let dim = scales.first().map_or(0, |m| m.channels);
        if scales.iter().any(|m| m.channels != dim) {
            return Err(Error::Invalid(format!(
                "{layer} maps disagree on channel count across scales"
            )));
        }
        for tag in partition.mode.tags() {
            let trajs = partition.get(tag);
            let rows: Vec<Vec<T>> = trajs
                .par_iter()
                .map(|t| {
                    let mut block = vec![T::zero(); dim * scales.len()];
                    for (map, row) in scales.iter().zip(block.chunks_exact_mut(dim.max(1))) {
                        pool_into(t, map, row)?;
                        if norm.l2() {
                            l2_normalize(row);
                        }
                    }
                    Ok(block)
                })
                .collect::<Result<_>>()?;
            let mut set = DescriptorSet::new(DescLayer::Tdd(layer), tag, dim);
            set.data = rows.concat();
            out.insert((tag, DescLayer::Tdd(layer)), set);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featuremaps::{FeatureMap, Layer};
    use crate::semanticflow::ChannelMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(x0: f32, y: f32) -> Trajectory {
        let pos: Vec<(f32, f32)> = (0..16).map(|i| (x0 + i as f32, y)).collect();
        Trajectory::from_positions(0, &pos).unwrap()
    }

    fn ones(layer: Layer, scale: f64, channels: usize, frames: usize) -> FeatureMap<f64> {
        let mut m = FeatureMap::zeros(layer, scale, channels, frames, 40, 40, 1.0);
        m.data.iter_mut().for_each(|v| *v = 1.0);
        m
    }

    #[test]
    fn unit_map_gives_point_count() {
        let m = ones(Layer::Spa4, 1.0, 3, 16);
        assert_eq!(pool_trajectory(&line(3.0, 7.0), &m).unwrap(), vec![16.0; 3]);
    }

    #[test]
    fn x_ramp_gives_arithmetic_series() {
        let mut m = FeatureMap::<f64>::zeros(Layer::Spa4, 1.0, 1, 16, 40, 40, 1.0);
        for f in 0..16 {
            for y in 0..40 {
                for x in 0..40 {
                    let i = m.index(f, 0, x, y);
                    m.data[i] = x as f64;
                }
            }
        }
        assert_eq!(pool_trajectory(&line(10.0, 5.0), &m).unwrap(), vec![280.0]);
    }

    #[test]
    fn half_scale_samples_half_coordinates() {
        let mut m = FeatureMap::<f64>::zeros(Layer::Spa4, 0.5, 1, 16, 20, 20, 1.0);
        let i = m.index(0, 0, 5, 5);
        m.data[i] = 1.0;
        let t = Trajectory::from_positions(0, &[(10.0, 10.0); 16]).unwrap();
        let pooled = pool_trajectory(&t, &m).unwrap();
        assert_eq!(pooled, vec![1.0]);
    }

    #[test]
    fn temporal_maps_cover_last_point_with_last_step() {
        let t = Trajectory::from_positions(0, &[(1.0, 1.0); 16]).unwrap();
        assert_eq!(pool_trajectory(&t, &ones(Layer::Tem3, 1.0, 4, 15)).unwrap(), vec![16.0; 4]);
        assert!(pool_trajectory(&t, &ones(Layer::Spa4, 1.0, 4, 15)).is_err());
        assert!(pool_trajectory(&t, &ones(Layer::Tem3, 1.0, 4, 14)).is_err());
    }

    #[test]
    fn channel_max_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = FeatureMap::<f64>::zeros(Layer::Spa4, 1.0, 4, 3, 8, 8, 1.0);
        m.data.iter_mut().for_each(|v| *v = rng.gen::<f64>() * 4.0);
        for f in 0..3 {
            m.plane_mut(f, 2).fill(0.0);
        }
        let mut maps = vec![m];
        normalize_maps(&mut maps, Normalization::Both);
        let m = &maps[0];
        for c in 0..4 {
            let max = (0..3)
                .flat_map(|f| m.plane(f, c).iter().copied())
                .fold(0.0f64, f64::max);
            assert!(max == 0.0 || max == 1.0, "channel {c} max {max}");
        }
        assert!(m.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn extraction_counts_and_lengths() {
        let mut part = ChannelPartition::empty(ChannelMode::Combined);
        let trajs: Vec<Trajectory> = (0..10).map(|i| line(1.0, i as f32 + 1.0)).collect();
        part.channels.insert(ChannelTag::Bg, trajs);
        let scales = [1.0, 0.75, 0.5];
        let maps: BTreeMap<Layer, FeatureMaps<f64>> = [(
            Layer::Spa4,
            scales.iter().map(|&r| ones(Layer::Spa4, r, 512, 16)).collect(),
        )]
        .into();
        let d = extract_clip_descriptors(&part, maps.clone(), &[Layer::Spa4], Normalization::None)
            .unwrap();
        let bg = &d[&(ChannelTag::Bg, DescLayer::Tdd(Layer::Spa4))];
        assert_eq!((bg.count(), bg.dim), (30, 512));
        assert!(d[&(ChannelTag::FgCombined, DescLayer::Tdd(Layer::Spa4))].is_empty());
        assert!(extract_clip_descriptors(&part, maps, &[Layer::Spa5], Normalization::None).is_err());

        let empty = ChannelPartition::empty(ChannelMode::Off);
        let maps: BTreeMap<Layer, FeatureMaps<f64>> =
            [(Layer::Tem3, vec![ones(Layer::Tem3, 1.0, 4, 15)])].into();
        let d = extract_clip_descriptors(&empty, maps, &[Layer::Tem3], Normalization::Both).unwrap();
        assert_eq!(d.len(), 1);
        assert!(d.values().all(DescriptorSet::is_empty));
    }

    #[test]
    fn l2_rows_have_unit_norm() {
        let mut part = ChannelPartition::empty(ChannelMode::Off);
        part.channels.insert(ChannelTag::All, vec![line(2.0, 2.0)]);
        let maps: BTreeMap<Layer, FeatureMaps<f64>> =
            [(Layer::Spa4, vec![ones(Layer::Spa4, 1.0, 8, 16)])].into();
        let d = extract_clip_descriptors(&part, maps, &[Layer::Spa4], Normalization::L2).unwrap();
        let row = d.values().next().unwrap().row(0).to_vec();
        let n: f64 = row.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dump_roundtrip() {
        let mut set = DescriptorSet::<f32>::new(DescLayer::IdtHof, ChannelTag::FgCombined, 3);
        set.push(&[1.0, 2.5, -3.0]).unwrap();
        set.push(&[0.0, 0.125, 7.0]).unwrap();
        assert!(set.push(&[1.0]).is_err());
        let mut buf = Vec::new();
        set.write_dump(&mut buf).unwrap();
        assert!(buf.starts_with(b"SFD1|idt_hof|3|2|fg\n"));
        let back = DescriptorSet::<f32>::read_dump(&mut buf.as_slice(), "mem").unwrap();
        assert_eq!(back, set);
    }
}
