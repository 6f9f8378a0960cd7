//! Foreground/background partition of trajectories by semantic masks.
//!
//! A trajectory is looked up in the mask of each frame it visits (nearest
//! pixel, clamped). When the fraction of its 16 points on a non-background
//! code reaches the policy threshold it is foreground; in separated mode the
//! plurality class decides which foreground channel it joins, ties going to
//! bicycle, then pedestrian, then vehicle.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::clipio::SemanticMask;
use crate::error::{Error, Result};
use crate::trajectories::Trajectory;

pub const DEFAULT_POLICY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticClass {
    Bicycle,
    Pedestrian,
    Vehicle,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; 3] = [
        SemanticClass::Bicycle,
        SemanticClass::Pedestrian,
        SemanticClass::Vehicle,
    ];

    /// Mask code of this class.
    pub fn code(self) -> u8 {
        match self {
            SemanticClass::Bicycle => 1,
            SemanticClass::Pedestrian => 2,
            SemanticClass::Vehicle => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(SemanticClass::Bicycle),
            2 => Some(SemanticClass::Pedestrian),
            3 => Some(SemanticClass::Vehicle),
            _ => None,
        }
    }
}

/// Trajectory channel. `All` is used only when semantic filtering is off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChannelTag {
    Bg,
    FgCombined,
    Fg(SemanticClass),
    All,
}

impl ChannelTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelTag::Bg => "bg",
            ChannelTag::FgCombined => "fg",
            ChannelTag::Fg(SemanticClass::Bicycle) => "fg_bic",
            ChannelTag::Fg(SemanticClass::Pedestrian) => "fg_ped",
            ChannelTag::Fg(SemanticClass::Vehicle) => "fg_veh",
            ChannelTag::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "bg" => ChannelTag::Bg,
            "fg" => ChannelTag::FgCombined,
            "fg_bic" => ChannelTag::Fg(SemanticClass::Bicycle),
            "fg_ped" => ChannelTag::Fg(SemanticClass::Pedestrian),
            "fg_veh" => ChannelTag::Fg(SemanticClass::Vehicle),
            "all" => ChannelTag::All,
            _ => return None,
        })
    }

    pub fn is_foreground(self) -> bool {
        matches!(self, ChannelTag::FgCombined | ChannelTag::Fg(_))
    }
}

impl fmt::Display for ChannelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for ChannelTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ChannelTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ChannelTag::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown channel tag `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    /// `bg` and a single `fg` channel.
    Combined,
    /// `bg` plus one foreground channel per semantic class.
    Separated,
    /// No filtering: every trajectory lands in `all`.
    Off,
}

impl ChannelMode {
    pub fn tags(self) -> Vec<ChannelTag> {
        match self {
            ChannelMode::Combined => vec![ChannelTag::Bg, ChannelTag::FgCombined],
            ChannelMode::Separated => {
                let mut t = vec![ChannelTag::Bg];
                t.extend(SemanticClass::ALL.map(ChannelTag::Fg));
                t
            }
            ChannelMode::Off => vec![ChannelTag::All],
        }
    }

    pub fn needs_masks(self) -> bool {
        self != ChannelMode::Off
    }
}

impl std::str::FromStr for ChannelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(ChannelMode::Combined),
            "separated" => Ok(ChannelMode::Separated),
            "off" => Ok(ChannelMode::Off),
            other => Err(Error::Config(format!("unknown channel mode `{other}`"))),
        }
    }
}

/// Per-class point counts of a trajectory, indexed by mask code.
pub fn code_histogram(traj: &Trajectory, masks: &[SemanticMask]) -> Result<[usize; 4]> {
    if masks.len() <= traj.end_frame() {
        return Err(Error::CountMismatch {
            context: format!(
                "masks covering frames {}..={}",
                traj.start_frame(),
                traj.end_frame()
            ),
            expected: traj.end_frame() + 1,
            found: masks.len(),
        });
    }
    let mut hist = [0usize; 4];
    for p in traj.points() {
        hist[masks[p.z].code_at(p.x, p.y) as usize] += 1;
    }
    Ok(hist)
}

pub fn assign_channel(
    traj: &Trajectory,
    masks: &[SemanticMask],
    mode: ChannelMode,
    policy_threshold: f64,
) -> Result<ChannelTag> {
    if mode == ChannelMode::Off {
        return Ok(ChannelTag::All);
    }
    let hist = code_histogram(traj, masks)?;
    let total: usize = hist.iter().sum();
    let fg = total - hist[0];
    if (fg as f64) < policy_threshold * total as f64 || fg == 0 {
        return Ok(ChannelTag::Bg);
    }
    Ok(match mode {
        ChannelMode::Combined => ChannelTag::FgCombined,
        _ => {
            // strict comparison keeps the earliest class on ties
            let mut best = SemanticClass::Bicycle;
            for class in SemanticClass::ALL {
                if hist[class.code() as usize] > hist[best.code() as usize] {
                    best = class;
                }
            }
            ChannelTag::Fg(best)
        }
    })
}

/// Disjoint, exhaustive split of trajectories into the mode's channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelPartition {
    pub mode: ChannelMode,
    pub channels: BTreeMap<ChannelTag, Vec<Trajectory>>,
}

impl ChannelPartition {
    pub fn empty(mode: ChannelMode) -> Self {
        ChannelPartition {
            mode,
            channels: mode.tags().into_iter().map(|t| (t, Vec::new())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.channels.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, tag: ChannelTag) -> &[Trajectory] {
        self.channels.get(&tag).map_or(&[], Vec::as_slice)
    }
}

pub fn partition(
    trajs: &[Trajectory],
    masks: &[SemanticMask],
    mode: ChannelMode,
    policy_threshold: f64,
) -> Result<ChannelPartition> {
    let mut out = ChannelPartition::empty(mode);
    for t in trajs {
        let tag = assign_channel(t, masks, mode, policy_threshold)?;
        out.channels
            .get_mut(&tag)
            .expect("assigned tag belongs to the mode")
            .push(t.clone());
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub clip_id: String,
    pub start_frame: usize,
    pub points: Vec<[f32; 2]>,
    pub channel: ChannelTag,
}

/// Writes one JSON line per trajectory.
pub fn write_trajectory_dump<W: Write>(
    w: &mut W,
    clip_id: &str,
    partition: &ChannelPartition,
) -> std::io::Result<()> {
    for (&tag, trajs) in &partition.channels {
        for t in trajs {
            let rec = TrajectoryRecord {
                clip_id: clip_id.to_owned(),
                start_frame: t.start_frame(),
                points: t.points().iter().map(|p| [p.x, p.y]).collect(),
                channel: tag,
            };
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}
