//! Deterministic synthetic traffic clips with exact semantic masks and
//! TTC-derived labels.
//!
//! A clip is a textured background translated by the ego motion, a few
//! unlabelled distractor blocks, and at most one agent approaching the
//! camera. The agent's apparent size follows `1/Z` for a closing distance
//! that reaches `closing_distance` on the last frame, so the clip's TTC is
//! `closing_distance / closing_speed`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::IncidentClass;
use crate::clipio::{
    frame_file_name, mask_file_name, write_frame_pgm, write_manifest, write_mask_pgm, ClipRecord,
    Frame, SemanticMask, Split, MIN_CLIP_FRAMES,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::semanticflow::SemanticClass;

/// Nominal frame rate converting closing speed to per-frame motion.
pub const FPS: f64 = 30.0;
/// Driving-recorder trigger constants, recorded in clip metadata only.
pub const TRIGGER_G: f64 = 0.5;
pub const TRIGGER_WINDOW_S: f64 = 15.0;
pub const HIGH_RISK_TTC: f64 = 0.5;
pub const LOW_RISK_TTC: f64 = 2.0;
pub const PRESET_VERSION: u32 = 1;
/// Per-class video counts of the near-miss incident database, taxonomy order.
pub const NIDB_TOTALS: [usize; 7] = [570, 388, 718, 976, 946, 996, 1650];
/// Per-class test-split counts of the same database.
pub const NIDB_TEST: [usize; 7] = [100, 50, 100, 100, 100, 100, 550];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskLabel {
    High,
    Low,
    Excluded,
    Background,
}

/// `< 0.5 s` high, `> 2.0 s` low, in between excluded, absent background.
pub fn ttc_label(ttc: Option<f64>) -> Result<RiskLabel> {
    match ttc {
        None => Ok(RiskLabel::Background),
        Some(t) if !(t > 0.0) || !t.is_finite() => {
            Err(Error::Invalid(format!("time-to-collision must be positive, got {t}")))
        }
        Some(t) if t < HIGH_RISK_TTC => Ok(RiskLabel::High),
        Some(t) if t > LOW_RISK_TTC => Ok(RiskLabel::Low),
        Some(_) => Ok(RiskLabel::Excluded),
    }
}

/// Incident class of a (risk, agent) pair; `None` for excluded clips.
pub fn incident_class(risk: RiskLabel, agent: Option<SemanticClass>) -> Option<IncidentClass> {
    use IncidentClass as C;
    use SemanticClass as S;
    Some(match (risk, agent) {
        (RiskLabel::Background, None) => C::Background,
        (RiskLabel::High, Some(S::Bicycle)) => C::HighBicycle,
        (RiskLabel::High, Some(S::Pedestrian)) => C::HighPedestrian,
        (RiskLabel::High, Some(S::Vehicle)) => C::HighVehicle,
        (RiskLabel::Low, Some(S::Bicycle)) => C::LowBicycle,
        (RiskLabel::Low, Some(S::Pedestrian)) => C::LowPedestrian,
        (RiskLabel::Low, Some(S::Vehicle)) => C::LowVehicle,
        _ => return None,
    })
}

/// Agent class and risk of an incident class.
pub fn class_parts(class: IncidentClass) -> (RiskLabel, Option<SemanticClass>) {
    use IncidentClass as C;
    use SemanticClass as S;
    match class {
        C::HighBicycle => (RiskLabel::High, Some(S::Bicycle)),
        C::HighPedestrian => (RiskLabel::High, Some(S::Pedestrian)),
        C::HighVehicle => (RiskLabel::High, Some(S::Vehicle)),
        C::LowBicycle => (RiskLabel::Low, Some(S::Bicycle)),
        C::LowPedestrian => (RiskLabel::Low, Some(S::Pedestrian)),
        C::LowVehicle => (RiskLabel::Low, Some(S::Vehicle)),
        C::Background => (RiskLabel::Background, None),
    }
}

/// Unlabelled moving block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    /// Top-left corner on the first frame.
    pub origin: [f64; 2],
    pub size: [f64; 2],
    pub velocity: [f64; 2],
    /// Draw with an agent pattern instead of plain texture.
    pub look: Option<SemanticClass>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub agent: Option<SemanticClass>,
    /// Apparent agent height on the last frame, px.
    pub agent_size: f64,
    /// Lateral image motion of the agent, px/frame.
    pub agent_speed: f64,
    /// Horizontal agent centre on the last frame, as a fraction of width.
    pub agent_anchor: f64,
    /// Global background translation, px/frame.
    pub ego_flow: [f64; 2],
    /// Distance to the agent on the last frame, m.
    pub closing_distance: f64,
    /// m/s.
    pub closing_speed: f64,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub texture_seed: u64,
    /// Class-specific agent shapes and patterns; otherwise all agents look alike.
    pub class_appearance: bool,
    pub distractors: Vec<Distractor>,
}

impl ScenarioSpec {
    pub fn ttc(&self) -> Option<f64> {
        self.agent.map(|_| self.closing_distance / self.closing_speed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames < MIN_CLIP_FRAMES {
            return Err(Error::Invalid(format!(
                "scenarios need at least {MIN_CLIP_FRAMES} frames, got {}",
                self.n_frames
            )));
        }
        if self.width < 32 || self.height < 32 {
            return Err(Error::Invalid("scenario resolution below 32x32".into()));
        }
        if self.agent.is_some() {
            if !(self.closing_speed > 0.0) || !(self.closing_distance > 0.0) {
                return Err(Error::Invalid(
                    "incident scenarios need positive closing speed and distance".into(),
                ));
            }
            if !(self.agent_size > 0.0) {
                return Err(Error::Invalid("agent size must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> Result<IncidentClass> {
        let risk = ttc_label(self.ttc())?;
        incident_class(risk, self.agent).ok_or_else(|| {
            Error::Invalid(format!(
                "TTC {:.3} s falls in the excluded band [{HIGH_RISK_TTC}, {LOW_RISK_TTC}]",
                self.ttc().unwrap_or(f64::NAN)
            ))
        })
    }
}

/// Axis-aligned footprint, half-open in pixel-centre coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    /// Pixel `(x, y)` is covered when its centre lies in `[x0, x1) × [y0, y1)`.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (x, y) = (x as f64, y as f64);
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    fn local(&self, x: usize, y: usize) -> (f64, f64) {
        (
            (x as f64 - self.x0) / (self.x1 - self.x0),
            (y as f64 - self.y0) / (self.y1 - self.y0),
        )
    }
}

pub struct SyntheticClip {
    pub frames: Vec<Frame>,
    pub masks: Vec<SemanticMask>,
    pub label: IncidentClass,
    pub ttc: Option<f64>,
    /// Agent footprint per frame.
    pub footprints: Vec<Option<Rect>>,
}

/// Blurred uniform noise stretched to `[0.1, 0.9]` and quantised to 8-bit levels.
pub fn smooth_texture(width: usize, height: usize, sigma: f32, seed: u64) -> Grid<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Grid::from_fn(width, height, |_, _| rng.gen::<f32>());
    let blurred = noise.gaussian_blur(sigma);
    let (lo, hi) = blurred
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-6);
    blurred.map(|v| quantize(0.1 + 0.8 * (v - lo) / span))
}

/// Rounds to the nearest `k/255`.
pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Width over height of an agent's footprint.
pub fn aspect(agent: SemanticClass, class_appearance: bool) -> f64 {
    if !class_appearance {
        return 1.0;
    }
    match agent {
        SemanticClass::Bicycle => 1.0,
        SemanticClass::Pedestrian => 0.45,
        SemanticClass::Vehicle => 1.6,
    }
}

/// Intensity of an agent pattern at local coordinates `(u, v) ∈ [0,1)²`.
fn agent_pattern(look: Option<SemanticClass>, u: f64, v: f64) -> f64 {
    let ring = |cx: f64, cy: f64, r: f64| ((u - cx).powi(2) + (v - cy).powi(2)).sqrt() - r;
    match look {
        Some(SemanticClass::Vehicle) => {
            if (0.15..0.45).contains(&v) && (0.12..0.88).contains(&u) {
                0.9
            } else if v > 0.78 && (ring(0.22, 0.85, 0.0) < 0.12 || ring(0.78, 0.85, 0.0) < 0.12) {
                0.05
            } else {
                0.3
            }
        }
        Some(SemanticClass::Pedestrian) => {
            if ring(0.5, 0.12, 0.0) < 0.12 {
                0.95
            } else if v < 0.55 {
                if (0.4..0.6).contains(&u) {
                    0.2
                } else {
                    0.7
                }
            } else if (u < 0.45) ^ (v > 0.8) {
                0.15
            } else {
                0.55
            }
        }
        Some(SemanticClass::Bicycle) => {
            let wheel = ring(0.25, 0.7, 0.2).abs() < 0.06 || ring(0.75, 0.7, 0.2).abs() < 0.06;
            let frame = ((v - 0.7) + 0.9 * (u - 0.25)).abs() < 0.05 && (0.25..0.75).contains(&u);
            if wheel || frame {
                0.08
            } else {
                0.8
            }
        }
        None => {
            // generic checker used when classes share one look
            if ((u * 4.0) as i32 + (v * 4.0) as i32) % 2 == 0 {
                0.85
            } else {
                0.2
            }
        }
    }
}

/// Renders a scenario.
pub fn generate_clip(spec: &ScenarioSpec) -> Result<SyntheticClip> {
    spec.validate()?;
    let label = spec.label()?;
    let (w, h, n) = (spec.width, spec.height, spec.n_frames);

    // background large enough for the whole ego path
    let travel_x = spec.ego_flow[0].abs() * n as f64;
    let travel_y = spec.ego_flow[1].abs() * n as f64;
    let margin = (travel_x.max(travel_y).ceil() as usize) + 4;
    let bg = smooth_texture(w + 2 * margin, h + 2 * margin, 1.6, spec.texture_seed);
    let detail = smooth_texture(64, 64, 1.0, spec.texture_seed ^ 0xA5A5);

    let ttc = spec.ttc();
    let horizon = 0.3 * h as f64;
    let ground_end = 0.85 * h as f64;
    let mut frames = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut footprints = Vec::with_capacity(n);

    for f in 0..n {
        let ox = margin as f64 + spec.ego_flow[0] * f as f64 - spec.ego_flow[0] * n as f64 / 2.0;
        let oy = margin as f64 + spec.ego_flow[1] * f as f64 - spec.ego_flow[1] * n as f64 / 2.0;
        let mut img = Grid::from_fn(w, h, |x, y| bg.bilinear((x as f64 + ox) as f32, (y as f64 + oy) as f32));

        for d in &spec.distractors {
            let r = Rect {
                x0: d.origin[0] + d.velocity[0] * f as f64,
                y0: d.origin[1] + d.velocity[1] * f as f64,
                x1: d.origin[0] + d.size[0] + d.velocity[0] * f as f64,
                y1: d.origin[1] + d.size[1] + d.velocity[1] * f as f64,
            };
            let tex = (d.look.is_none()).then(|| smooth_texture(16, 16, 0.8, d.seed));
            paint(&mut img, &r, |u, v| match &tex {
                Some(t) => t.bilinear((u * 15.0) as f32, (v * 15.0) as f32) as f64,
                None => agent_pattern(d.look, u, v),
            });
        }

        let mut mask = Grid::filled(w, h, 0u8);
        let footprint = spec.agent.map(|agent| {
            // distance ratio Z_end / Z_f
            let steps_left = (n - 1 - f) as f64 / FPS;
            let ratio = spec.closing_distance / (spec.closing_distance + spec.closing_speed * steps_left);
            let height = (spec.agent_size * ratio).max(2.0);
            let width = height * aspect(agent, spec.class_appearance);
            let bottom = horizon + (ground_end - horizon) * ratio;
            let cx = spec.agent_anchor * w as f64 - spec.agent_speed * (n - 1 - f) as f64;
            let r = Rect {
                x0: cx - width / 2.0,
                x1: cx + width / 2.0,
                y0: bottom - height,
                y1: bottom,
            };
            let look = spec.class_appearance.then_some(agent);
            paint(&mut img, &r, |u, v| {
                agent_pattern(look, u, v) + 0.25 * (detail.bilinear((u * 63.0) as f32, (v * 63.0) as f32) as f64 - 0.5)
            });
            for y in 0..h {
                for x in 0..w {
                    if r.covers(x, y) {
                        mask.set(x, y, agent.code());
                    }
                }
            }
            r
        });
        footprints.push(footprint);
        frames.push(Frame::new(img.map(quantize))?);
        masks.push(SemanticMask::new(mask)?);
    }
    Ok(SyntheticClip {
        frames,
        masks,
        label,
        ttc,
        footprints,
    })
}

fn paint(img: &mut Grid<f32>, r: &Rect, pattern: impl Fn(f64, f64) -> f64) {
    let (w, h) = (img.width(), img.height());
    let xs = r.x0.ceil().max(0.0) as usize..(r.x1.ceil().max(0.0) as usize).min(w);
    let ys = r.y0.ceil().max(0.0) as usize..(r.y1.ceil().max(0.0) as usize).min(h);
    for y in ys {
        for x in xs.clone() {
            if r.covers(x, y) {
                let (u, v) = r.local(x, y);
                img.set(x, y, pattern(u, v).clamp(0.0, 1.0) as f32);
            }
        }
    }
}

/// Inclusive-exclusive sampling range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        if self.1 > self.0 {
            rng.gen_range(self.0..self.1)
        } else {
            self.0
        }
    }
}

/// Per-class `(train, test)` clip counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

/// Dataset preset, stored as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    /// Included classes, taxonomy order.
    pub classes: Vec<IncidentClass>,
    /// Counts used for every class without an override.
    pub per_class: SplitCounts,
    #[serde(default)]
    pub overrides: BTreeMap<IncidentClass, SplitCounts>,
    pub class_appearance: bool,
    /// Distractor blocks per clip, inclusive range.
    pub distractors: [usize; 2],
    /// Draw distractors with agent patterns.
    pub agent_like_distractors: bool,
    /// Horizontal ego translation magnitude, px/frame; vertical drift is at
    /// most 30% of the upper bound.
    pub ego_speed: Range,
    pub agent_size: Range,
    /// Lateral image speed per agent class, px/frame.
    pub lateral_speed: BTreeMap<SemanticClass, Range>,
    pub high_ttc: Range,
    pub low_ttc: Range,
    pub closing_speed: Range,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            version: PRESET_VERSION,
            name: "default".into(),
            seed: 7,
            width: 80,
            height: 80,
            n_frames: 16,
            classes: IncidentClass::ALL.to_vec(),
            per_class: SplitCounts { train: 30, test: 10 },
            overrides: BTreeMap::new(),
            class_appearance: true,
            distractors: [0, 2],
            agent_like_distractors: false,
            ego_speed: Range(0.5, 1.5),
            agent_size: Range(26.0, 36.0),
            lateral_speed: [
                (SemanticClass::Bicycle, Range(0.8, 1.4)),
                (SemanticClass::Pedestrian, Range(0.2, 0.6)),
                (SemanticClass::Vehicle, Range(1.6, 2.4)),
            ]
            .into(),
            high_ttc: Range(0.2, 0.45),
            low_ttc: Range(2.2, 4.0),
            closing_speed: Range(6.0, 14.0),
        }
    }
}

impl DatasetConfig {
    /// Named presets: `default`, `distractor_heavy`, `motion_dominated`, `nidb`, `tiny`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = DatasetConfig::default();
        Ok(match name {
            "default" => base,
            "distractor_heavy" => DatasetConfig {
                name: name.into(),
                distractors: [3, 5],
                agent_like_distractors: true,
                ..base
            },
            "motion_dominated" => DatasetConfig {
                name: name.into(),
                class_appearance: false,
                distractors: [0, 1],
                ..base
            },
            "nidb" => {
                let mut cfg = DatasetConfig {
                    name: name.into(),
                    ..base
                };
                cfg.set_nidb_counts(1);
                cfg
            }
            "tiny" => DatasetConfig {
                name: name.into(),
                width: 64,
                height: 64,
                per_class: SplitCounts { train: 2, test: 1 },
                ..base
            },
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        })
    }

    /// Per-class counts from the database's train/test split divided by
    /// `scale_down` (rounded up, at least one clip per split).
    pub fn set_nidb_counts(&mut self, scale_down: usize) {
        let scale = scale_down.max(1);
        self.overrides = IncidentClass::ALL
            .iter()
            .zip(NIDB_TOTALS.iter().zip(NIDB_TEST))
            .map(|(&c, (&total, test))| {
                let counts = SplitCounts {
                    train: (total - test).div_ceil(scale).max(1),
                    test: test.div_ceil(scale).max(1),
                };
                (c, counts)
            })
            .collect();
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: DatasetConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("dataset configs always serialise")
    }

    pub fn counts(&self, class: IncidentClass) -> SplitCounts {
        self.overrides.get(&class).copied().unwrap_or(self.per_class)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != PRESET_VERSION {
            return Err(Error::Config(format!(
                "preset version {} unsupported (expected {PRESET_VERSION})",
                self.version
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("no classes selected".into()));
        }
        for &c in &self.classes {
            let k = self.counts(c);
            if k.train == 0 || k.test == 0 {
                return Err(Error::Config(format!("class {c} needs at least one train and one test clip")));
            }
        }
        if self.distractors[0] > self.distractors[1] {
            return Err(Error::Config("distractor range is reversed".into()));
        }
        if self.high_ttc.1 >= HIGH_RISK_TTC || self.low_ttc.0 <= LOW_RISK_TTC {
            return Err(Error::Config("TTC ranges overlap the excluded band".into()));
        }
        for c in SemanticClass::ALL {
            if !self.lateral_speed.contains_key(&c) {
                return Err(Error::Config(format!("missing lateral speed for {c:?}")));
            }
        }
        Ok(())
    }

    /// Samples the scenario of one clip.
    pub fn scenario(&self, class: IncidentClass, clip_seed: u64) -> ScenarioSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
        let (risk, agent) = class_parts(class);
        let (w, h) = (self.width as f64, self.height as f64);
        let sign = |rng: &mut ChaCha8Rng| if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let ego = [
            sign(&mut rng) * self.ego_speed.sample(&mut rng),
            rng.gen_range(-0.3..=0.3) * self.ego_speed.1,
        ];
        let closing_speed = self.closing_speed.sample(&mut rng);
        let ttc = match risk {
            RiskLabel::High => self.high_ttc.sample(&mut rng),
            _ => self.low_ttc.sample(&mut rng),
        };
        let lateral = agent.map_or(0.0, |a| {
            let s = self.lateral_speed[&a].sample(&mut rng);
            if rng.gen::<bool>() {
                s
            } else {
                -s
            }
        });
        let agent_size = self.agent_size.sample(&mut rng).min(0.8 * h);
        let agent_anchor = rng.gen_range(0.4..0.6);
        let n_distractors = rng.gen_range(self.distractors[0]..=self.distractors[1]);
        let distractors = (0..n_distractors)
            .map(|_| {
                let look = self
                    .agent_like_distractors
                    .then(|| SemanticClass::ALL[rng.gen_range(0..3)]);
                let sh = rng.gen_range(8.0..16.0);
                let sw = sh * look.map_or(1.0, |a| aspect(a, true));
                Distractor {
                    origin: [rng.gen_range(0.0..w - sw), rng.gen_range(0.0..h * 0.7)],
                    size: [sw, sh],
                    velocity: [rng.gen_range(-1.5..1.5), rng.gen_range(-0.5..0.5)],
                    look,
                    seed: rng.gen(),
                }
            })
            .collect();
        ScenarioSpec {
            agent,
            agent_size,
            agent_speed: lateral,
            agent_anchor,
            ego_flow: ego,
            closing_distance: ttc * closing_speed,
            closing_speed,
            n_frames: self.n_frames,
            width: self.width,
            height: self.height,
            texture_seed: rng.gen(),
            class_appearance: self.class_appearance,
            distractors,
        }
    }
}

/// Seed of the `index`-th clip of a dataset.
pub fn clip_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

#[derive(Serialize)]
struct ClipMetadata<'a> {
    clip_id: &'a str,
    label: IncidentClass,
    ttc: Option<f64>,
    fps: f64,
    trigger_g: f64,
    trigger_window_s: f64,
    scenario: &'a ScenarioSpec,
}

/// Writes every clip under `out/clips/<clip_id>/` and the manifest at
/// `out/manifest.jsonl` (paths relative to `out`). Returns the records.
pub fn generate_dataset(config: &DatasetConfig, out: &Path) -> Result<Vec<ClipRecord>> {
    config.validate()?;
    let mut jobs: Vec<(String, IncidentClass, Split, u64)> = Vec::new();
    for &class in &config.classes {
        let k = config.counts(class);
        for i in 0..k.train + k.test {
            let split = if i < k.train { Split::Train } else { Split::Test };
            let seed = clip_seed(config.seed, jobs.len());
            jobs.push((format!("{}_{i:05}", class.name()), class, split, seed));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let records: Vec<ClipRecord> = jobs
        .par_iter()
        .map(|(id, class, split, seed)| {
            let spec = config.scenario(*class, *seed);
            let clip = generate_clip(&spec)?;
            if clip.label != *class {
                return Err(Error::Invalid(format!(
                    "clip {id}: scenario labelled {} instead of {class}",
                    clip.label
                )));
            }
            let rel = PathBuf::from("clips").join(id);
            let frame_dir = rel.join("frames");
            let mask_dir = rel.join("masks");
            write_clip(&clip, &out.join(&frame_dir), &out.join(&mask_dir))?;
            let meta = ClipMetadata {
                clip_id: id,
                label: clip.label,
                ttc: clip.ttc,
                fps: FPS,
                trigger_g: TRIGGER_G,
                trigger_window_s: TRIGGER_WINDOW_S,
                scenario: &spec,
            };
            let meta_path = out.join(&rel).join("meta.json");
            let text = serde_json::to_string_pretty(&meta).expect("metadata always serialises");
            fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;
            Ok(ClipRecord {
                clip_id: id.clone(),
                frame_dir,
                mask_dir: Some(mask_dir),
                label: clip.label,
                split: *split,
                ttc: clip.ttc,
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(&records, &out.join("manifest.jsonl"))?;
    let preset = out.join("preset.toml");
    fs::write(&preset, config.to_toml()).map_err(|e| Error::io(&preset, e))?;
    Ok(records)
}

/// Writes frames and masks as 8-bit PGM sequences.
pub fn write_clip(clip: &SyntheticClip, frame_dir: &Path, mask_dir: &Path) -> Result<()> {
    fs::create_dir_all(frame_dir).map_err(|e| Error::io(frame_dir, e))?;
    fs::create_dir_all(mask_dir).map_err(|e| Error::io(mask_dir, e))?;
    for (i, (f, m)) in clip.frames.iter().zip(&clip.masks).enumerate() {
        write_frame_pgm(&frame_dir.join(frame_file_name(i, "pgm")), f)?;
        write_mask_pgm(&mask_dir.join(mask_file_name(i, "pgm")), m)?;
    }
    Ok(())
}
