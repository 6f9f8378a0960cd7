//! End-to-end orchestration: descriptor extraction with a per-clip cache,
//! encoder fitting on the training split, clip encoding, classification,
//! evaluation and the six-configuration ablation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{evaluate, train_ovr, IncidentClass, LinearModel, Metrics, Task, TaskSpec};
use crate::clipio::{
    list_sequence, load_clip, load_masks, read_manifest, ClipRecord, Frame, SemanticMask, Split,
};
use crate::denseflow::{farneback_flow, median_filter_flow, FlowField, FlowParams};
use crate::encoding::{
    fit_kmeans, fit_pca, refine_kmeans, vlad_encode, Codebook, PcaModel, CODEBOOK_SIZE, PCA_DIM,
};
use crate::error::{Error, Result};
use crate::Real;
use crate::featuremaps::{builtin_maps, load_external_maps, FeatureMaps, Layer, ScaleSpec};
use crate::idtdesc::{hof_descriptor, hog_descriptor, mbh_descriptor, IdtInputs, HOF_DIM, HOG_DIM, IDT_DIM, MBH_DIM};
use crate::scalar::l2_normalize;
use crate::semanticflow::{
    partition, write_trajectory_dump, ChannelMode, ChannelPartition, ChannelTag,
    DEFAULT_POLICY_THRESHOLD,
};
use crate::tddpool::{extract_clip_descriptors, ClipDescriptors, DescLayer, DescriptorSet, Normalization};
use crate::trajectories::{compensate_camera, extract_trajectories, SamplerParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    #[default]
    Builtin,
    External,
}

/// Which training clips shape PCA and codebooks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookSource {
    /// Every training clip.
    #[default]
    All,
    /// Background training clips only.
    Background,
    /// Fit on background clips, then refine the codebook on every training clip.
    BackgroundThenAll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub provider: Provider,
    /// Root holding `<clip_id>/<layer>_r<scale>/map_%06d.sfm` for the external provider.
    pub external_dir: Option<PathBuf>,
    pub scales: ScaleSpec,
    pub layers: Vec<Layer>,
    pub normalization: Normalization,
    pub channels: ChannelMode,
    pub policy_threshold: f64,
    pub use_idt: bool,
    /// Subtract the dominant homography from every flow field before tracking.
    pub compensate_camera: bool,
    pub flow: FlowParams,
    pub sampler: SamplerParams,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            provider: Provider::Builtin,
            external_dir: None,
            scales: ScaleSpec::default(),
            layers: Layer::ALL.to_vec(),
            normalization: Normalization::Both,
            channels: ChannelMode::Combined,
            policy_threshold: DEFAULT_POLICY_THRESHOLD,
            use_idt: false,
            compensate_camera: false,
            flow: FlowParams::default(),
            sampler: SamplerParams::default(),
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        self.scales.validate()?;
        self.flow.validate()?;
        self.sampler.validate()?;
        if self.layers.is_empty() {
            return Err(Error::Config("no feature layers selected".into()));
        }
        let unique: BTreeSet<_> = self.layers.iter().collect();
        if unique.len() != self.layers.len() {
            return Err(Error::Config("duplicate feature layer".into()));
        }
        if !(self.policy_threshold > 0.0 && self.policy_threshold <= 1.0) {
            return Err(Error::Config("policy_threshold must lie in (0,1]".into()));
        }
        if self.provider == Provider::External && self.external_dir.is_none() {
            return Err(Error::Config("external provider needs external_dir".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeConfig {
    pub pca_dim: usize,
    pub codebook_size: usize,
    /// Cap on descriptors sampled for each PCA and k-means fit.
    pub max_fit_descriptors: usize,
    pub codebook_source: CodebookSource,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        EncodeConfig {
            pca_dim: PCA_DIM,
            codebook_size: CODEBOOK_SIZE,
            max_fit_descriptors: 8000,
            codebook_source: CodebookSource::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub c: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { c: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub task: Task,
    /// Extraction fails as a whole above this fraction of failed clips.
    pub max_failure_fraction: f64,
    pub extract: ExtractConfig,
    pub encode: EncodeConfig,
    pub classifier: ClassifierConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            task: Task::Detection,
            max_failure_fraction: 0.1,
            extract: ExtractConfig::default(),
            encode: EncodeConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline configs always serialise")
    }

    pub fn validate(&self) -> Result<()> {
        self.extract.validate()?;
        if self.encode.pca_dim == 0 || self.encode.codebook_size == 0 {
            return Err(Error::Config("pca_dim and codebook_size must be positive".into()));
        }
        if self.encode.max_fit_descriptors < self.encode.codebook_size {
            return Err(Error::Config(
                "max_fit_descriptors must be at least codebook_size".into(),
            ));
        }
        if !(self.classifier.c > 0.0) {
            return Err(Error::Config("classifier C must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(Error::Config("max_failure_fraction must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Deterministic sub-seed for a named purpose.
pub fn derive_seed(base: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Reads a manifest and rebases relative clip directories onto its folder.
pub fn load_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(read_manifest(path)?.iter().map(|r| r.resolved(base)).collect())
}

// ---------------------------------------------------------------------------
// extraction

/// Per-step flow fields of a clip, median-filtered and optionally
/// camera-compensated (foreground pixels excluded from the fit).
pub fn clip_flows(
    frames: &[Frame],
    masks: Option<&[SemanticMask]>,
    cfg: &ExtractConfig,
) -> Result<Vec<FlowField>> {
    let steps: Vec<usize> = (0..frames.len().saturating_sub(1)).collect();
    steps
        .par_iter()
        .map(|&i| {
            let raw = farneback_flow(&frames[i], &frames[i + 1], &cfg.flow)?;
            let flow = median_filter_flow(&raw, cfg.sampler.median_kernel)?;
            if cfg.compensate_camera {
                let exclude = masks.map(|m| &m[i]);
                Ok(compensate_camera(&flow, &frames[i], &frames[i + 1], exclude)?.flow)
            } else {
                Ok(flow)
            }
        })
        .collect()
}

/// Everything extracted from one clip.
pub struct ClipExtraction {
    pub partition: ChannelPartition,
    pub descriptors: ClipDescriptors<f32>,
}

/// Flow, trajectories, channel partition, pooled descriptors and (optionally)
/// IDT descriptors of one clip.
pub fn extract_clip(record: &ClipRecord, cfg: &ExtractConfig) -> Result<ClipExtraction> {
    let frames = load_clip(record)?;
    let masks = if cfg.channels.needs_masks() {
        Some(load_masks(record)?)
    } else {
        None
    };
    let flows = clip_flows(&frames, masks.as_deref(), cfg)?;
    let trajs = extract_trajectories(&frames, &flows, &cfg.sampler)?;
    let part = partition(
        &trajs,
        masks.as_deref().unwrap_or(&[]),
        cfg.channels,
        cfg.policy_threshold,
    )?;

    let mut maps: BTreeMap<Layer, FeatureMaps<f32>> = BTreeMap::new();
    for &layer in &cfg.layers {
        let m = match cfg.provider {
            Provider::Builtin => builtin_maps(layer, &frames, &flows, &cfg.scales)?,
            Provider::External => {
                let root = cfg
                    .external_dir
                    .as_ref()
                    .expect("validated")
                    .join(&record.clip_id);
                let size = (frames[0].width(), frames[0].height());
                cfg.scales
                    .ratios()
                    .iter()
                    .map(|&r| load_external_maps(&root, layer, r, frames.len(), size))
                    .collect::<Result<_>>()?
            }
        };
        maps.insert(layer, m);
    }
    let mut descriptors = extract_clip_descriptors(&part, maps, &cfg.layers, cfg.normalization)?;

    if cfg.use_idt {
        let inputs = IdtInputs::new(&frames, &flows)?;
        for tag in cfg.channels.tags() {
            let trajs = part.get(tag);
            let rows: Vec<[Vec<f32>; 3]> = trajs
                .par_iter()
                .map(|t| {
                    Ok([
                        hog_descriptor(t, &inputs)?,
                        hof_descriptor(t, &inputs)?,
                        mbh_descriptor(t, &inputs)?,
                    ])
                })
                .collect::<Result<_>>()?;
            for (i, (layer, dim)) in [
                (DescLayer::IdtHog, HOG_DIM),
                (DescLayer::IdtHof, HOF_DIM),
                (DescLayer::IdtMbh, MBH_DIM),
            ]
            .into_iter()
            .enumerate()
            {
                let mut set = DescriptorSet::new(layer, tag, dim);
                for r in &rows {
                    set.push(&r[i])?;
                }
                descriptors.insert((tag, layer), set);
            }
        }
    }
    Ok(ClipExtraction {
        partition: part,
        descriptors,
    })
}

/// Content hash of a clip's inputs and the extraction settings.
pub fn cache_key(record: &ClipRecord, cfg: &ExtractConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("configs always serialise"));
    h.update(record.clip_id.as_bytes());
    let mut hash_dir = |dir: &Path, prefix: &str| -> Result<()> {
        for p in list_sequence(dir, prefix)? {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            h.update(p.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(())
    };
    hash_dir(&record.frame_dir, "frame_")?;
    if cfg.channels.needs_masks() {
        if let Some(m) = &record.mask_dir {
            hash_dir(m, "mask_")?;
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn descriptor_file(tag: ChannelTag, layer: DescLayer) -> String {
    format!("{}.{}.sfd", tag.as_str(), layer.name())
}

const KEY_FILE: &str = "key.txt";

/// Directory of one clip inside a descriptor store.
pub fn clip_store_dir(store: &Path, clip_id: &str) -> PathBuf {
    store.join(clip_id)
}

fn write_clip_store(dir: &Path, key: &str, ex: &ClipExtraction, clip_id: &str) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (&(tag, layer), set) in &ex.descriptors {
        let path = dir.join(descriptor_file(tag, layer));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        set.write_dump(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
    }
    let tpath = dir.join("trajectories.jsonl");
    let file = fs::File::create(&tpath).map_err(|e| Error::io(&tpath, e))?;
    let mut w = BufWriter::new(file);
    write_trajectory_dump(&mut w, clip_id, &ex.partition)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&tpath, e))?;
    // written last: a clip directory without a key is incomplete
    let kpath = dir.join(KEY_FILE);
    fs::write(&kpath, format!("{key}\n")).map_err(|e| Error::io(&kpath, e))
}

/// Reads every descriptor set of a clip from the store.
pub fn load_clip_descriptors(store: &Path, clip_id: &str) -> Result<ClipDescriptors<f32>> {
    let dir = clip_store_dir(store, clip_id);
    if !dir.join(KEY_FILE).is_file() {
        return Err(Error::io(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no extracted descriptors"),
        ));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "sfd"))
        .collect();
    paths.sort();
    let mut out = ClipDescriptors::new();
    for p in paths {
        let file = fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
        let set = DescriptorSet::read_dump(&mut BufReader::new(file), &p.display().to_string())?;
        out.insert((set.channel, set.layer), set);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractReport {
    pub total: usize,
    pub extracted: usize,
    pub cached: usize,
    /// Clips that produced no trajectories.
    pub empty: Vec<String>,
    pub failed: Vec<(String, String)>,
}

impl ExtractReport {
    pub fn failure_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.failed.len() as f64 / self.total as f64
        }
    }
}

enum ClipOutcome {
    Cached,
    Extracted { empty: bool },
}

/// Extracts every clip into `store`, reusing cached results whose key matches.
/// Per-clip failures are logged and reported, not raised; the run fails only
/// when more than `max_failure_fraction` of the clips fail.
pub fn run_extract(
    records: &[ClipRecord],
    cfg: &ExtractConfig,
    store: &Path,
    max_failure_fraction: f64,
) -> Result<ExtractReport> {
    cfg.validate()?;
    fs::create_dir_all(store).map_err(|e| Error::io(store, e))?;
    let outcomes: Vec<Result<ClipOutcome>> = records
        .par_iter()
        .map(|rec| {
            let key = cache_key(rec, cfg)?;
            let dir = clip_store_dir(store, &rec.clip_id);
            let existing = fs::read_to_string(dir.join(KEY_FILE)).ok();
            if existing.as_deref().map(str::trim) == Some(key.as_str()) {
                return Ok(ClipOutcome::Cached);
            }
            let ex = extract_clip(rec, cfg)?;
            write_clip_store(&dir, &key, &ex, &rec.clip_id)?;
            Ok(ClipOutcome::Extracted {
                empty: ex.partition.is_empty(),
            })
        })
        .collect();
    let mut report = ExtractReport {
        total: records.len(),
        ..Default::default()
    };
    for (rec, outcome) in records.iter().zip(outcomes) {
        match outcome {
            Ok(ClipOutcome::Cached) => report.cached += 1,
            Ok(ClipOutcome::Extracted { empty }) => {
                report.extracted += 1;
                if empty {
                    log::warn!("clip {}: no trajectories survived", rec.clip_id);
                    report.empty.push(rec.clip_id.clone());
                }
            }
            Err(e) => {
                log::error!("clip {}: {e}", rec.clip_id);
                report.failed.push((rec.clip_id.clone(), e.to_string()));
            }
        }
    }
    let summary = store.join("extract_report.json");
    let text = serde_json::to_string_pretty(&report).expect("reports always serialise");
    fs::write(&summary, text + "\n").map_err(|e| Error::io(&summary, e))?;
    if report.failure_fraction() > max_failure_fraction {
        return Err(Error::TooManyFailures {
            failed: report.failed.len(),
            total: report.total,
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// encoding

/// Descriptor family of one encoded block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockLayer {
    Tdd(Layer),
    /// `[MBH | HoF | HoG]`.
    Idt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockKey {
    pub channel: ChannelTag,
    pub layer: BlockLayer,
}

impl BlockKey {
    pub fn name(&self) -> String {
        match self.layer {
            BlockLayer::Tdd(l) => format!("{}.{}", self.channel, l.name()),
            BlockLayer::Idt => format!("{}.idt", self.channel),
        }
    }
}

/// Blocks of a configuration: every channel of the mode × every layer (+ IDT).
pub fn block_keys(mode: ChannelMode, layers: &[Layer], use_idt: bool) -> Vec<BlockKey> {
    let mut keys = Vec::new();
    for channel in mode.tags() {
        for &l in layers {
            keys.push(BlockKey {
                channel,
                layer: BlockLayer::Tdd(l),
            });
        }
        if use_idt {
            keys.push(BlockKey {
                channel,
                layer: BlockLayer::Idt,
            });
        }
    }
    keys
}

/// Stored channels whose union forms `target`.
fn source_tags(target: ChannelTag, available: &BTreeSet<ChannelTag>) -> Result<Vec<ChannelTag>> {
    if available.contains(&target) {
        return Ok(vec![target]);
    }
    let picked: Vec<ChannelTag> = match target {
        ChannelTag::All => available.iter().copied().collect(),
        ChannelTag::FgCombined => available
            .iter()
            .copied()
            .filter(|t| matches!(t, ChannelTag::Fg(_)))
            .collect(),
        _ => Vec::new(),
    };
    if picked.is_empty() {
        return Err(Error::Config(format!(
            "channel {target} cannot be formed from stored channels {:?}",
            available.iter().map(|t| t.as_str()).collect::<Vec<_>>()
        )));
    }
    Ok(picked)
}

/// Row-major descriptors of one block for one clip, and their dimension.
pub fn block_rows(descs: &ClipDescriptors<f32>, key: BlockKey) -> Result<(Vec<Real>, usize)> {
    let available: BTreeSet<ChannelTag> = descs.keys().map(|(t, _)| *t).collect();
    let tags = source_tags(key.channel, &available)?;
    let fetch = |tag: ChannelTag, layer: DescLayer| {
        descs.get(&(tag, layer)).ok_or_else(|| {
            Error::Config(format!("descriptor set {tag}.{layer} missing from store"))
        })
    };
    let mut rows = Vec::new();
    let dim = match key.layer {
        BlockLayer::Tdd(l) => {
            let mut dim = 0;
            for tag in tags {
                let set = fetch(tag, DescLayer::Tdd(l))?;
                dim = set.dim;
                rows.extend(set.data.iter().map(|&v| Real::from(v)));
            }
            dim
        }
        BlockLayer::Idt => {
            for tag in tags {
                let (mbh, hof, hog) = (
                    fetch(tag, DescLayer::IdtMbh)?,
                    fetch(tag, DescLayer::IdtHof)?,
                    fetch(tag, DescLayer::IdtHog)?,
                );
                if mbh.count() != hof.count() || hof.count() != hog.count() {
                    return Err(Error::CountMismatch {
                        context: format!("IDT descriptor sets of channel {tag}"),
                        expected: mbh.count(),
                        found: hof.count().min(hog.count()),
                    });
                }
                for i in 0..mbh.count() {
                    for part in [mbh.row(i), hof.row(i), hog.row(i)] {
                        rows.extend(part.iter().map(|&v| Real::from(v)));
                    }
                }
            }
            IDT_DIM
        }
    };
    Ok((rows, dim))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockModel {
    pub pca: PcaModel<Real>,
    pub codebook: Codebook<Real>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    /// `None` marks a block with too little training data; it is left out of
    /// every encoding.
    pub blocks: Vec<(BlockKey, Option<BlockModel>)>,
}

/// Parameters of an encoder fit.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub keys: Vec<BlockKey>,
    pub encode: EncodeConfig,
    pub seed: u64,
}

fn subsample(rows: Vec<Real>, dim: usize, cap: usize, seed: u64) -> Vec<Real> {
    let n = rows.len() / dim;
    if n <= cap {
        return rows;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
    idx.sort_unstable();
    idx.iter()
        .flat_map(|&i| rows[i * dim..(i + 1) * dim].iter().copied())
        .collect()
}

fn fit_block(pool: &[Real], dim: usize, cfg: &EncodeConfig, seed: u64) -> Result<Option<BlockModel>> {
    let n = pool.len() / dim.max(1);
    let out_dim = cfg.pca_dim.min(dim);
    if n <= out_dim || n < 2 {
        return Ok(None);
    }
    let pca = match fit_pca(pool, dim, out_dim) {
        Ok(p) => p,
        Err(Error::Numerical(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let projected = pca.apply_rows(pool)?;
    let k = cfg.codebook_size.min(n);
    let codebook = match fit_kmeans(&projected, out_dim, k, seed) {
        Ok(c) => c,
        // too few distinct rows for k centers: retry with what is distinct
        Err(Error::InsufficientData(_)) => {
            let distinct: BTreeSet<Vec<u64>> = projected
                .chunks_exact(out_dim)
                .map(|r| r.iter().map(|v| v.to_bits()).collect())
                .collect();
            if distinct.len() < 2 {
                return Ok(None);
            }
            fit_kmeans(&projected, out_dim, distinct.len().min(k), seed)?
        }
        Err(e) => return Err(e),
    };
    Ok(Some(BlockModel { pca, codebook }))
}

/// Fits PCA and a codebook per block on training clips only.
///
/// `load` supplies a clip's descriptors; every call goes through it, so a
/// caller can audit exactly which clips shaped the encoder. Any test-split
/// record is a hard [`Error::Leakage`].
pub fn fit_encoder(
    train: &[ClipRecord],
    spec: &EncoderSpec,
    load: &(dyn Fn(&ClipRecord) -> Result<ClipDescriptors<f32>> + Sync),
) -> Result<Encoder> {
    if let Some(bad) = train.iter().find(|r| r.split != Split::Train) {
        return Err(Error::Leakage(format!(
            "clip {} from the test split reached encoder fitting",
            bad.clip_id
        )));
    }
    if train.is_empty() {
        return Err(Error::InsufficientData("no training clips".into()));
    }
    let descs: Vec<ClipDescriptors<f32>> = train.iter().map(load).collect::<Result<_>>()?;
    let mut blocks = Vec::with_capacity(spec.keys.len());
    for &key in &spec.keys {
        let mut all = Vec::new();
        let mut background = Vec::new();
        let mut dim = 0;
        for (rec, d) in train.iter().zip(&descs) {
            let (rows, dd) = block_rows(d, key)?;
            dim = dd;
            if rec.label == IncidentClass::Background {
                background.extend_from_slice(&rows);
            }
            all.extend(rows);
        }
        let cap = spec.encode.max_fit_descriptors;
        let seed = derive_seed(spec.seed, &key.name());
        let all = subsample(all, dim.max(1), cap, seed);
        let background = subsample(background, dim.max(1), cap, seed ^ 1);
        let model = match spec.encode.codebook_source {
            CodebookSource::All => fit_block(&all, dim, &spec.encode, seed)?,
            CodebookSource::Background | CodebookSource::BackgroundThenAll => {
                match fit_block(&background, dim, &spec.encode, seed)? {
                    None => {
                        log::warn!(
                            "block {}: too few background descriptors, fitting on all training clips",
                            key.name()
                        );
                        fit_block(&all, dim, &spec.encode, seed)?
                    }
                    Some(bg) if spec.encode.codebook_source == CodebookSource::BackgroundThenAll => {
                        let projected = bg.pca.apply_rows(&all)?;
                        match refine_kmeans(&projected, bg.pca.out_dim, &bg.codebook) {
                            Ok(codebook) => Some(BlockModel {
                                pca: bg.pca,
                                codebook,
                            }),
                            Err(Error::InsufficientData(_)) => Some(bg),
                            Err(e) => return Err(e),
                        }
                    }
                    Some(bg) => Some(bg),
                }
            }
        };
        if model.is_none() {
            log::warn!("block {}: not enough training descriptors, block disabled", key.name());
        }
        blocks.push((key, model));
    }
    Ok(Encoder { blocks })
}

impl Encoder {
    /// Length of every clip vector.
    pub fn dim(&self) -> usize {
        self.blocks
            .iter()
            .filter_map(|(_, m)| m.as_ref())
            .map(|m| m.codebook.k * m.codebook.dim)
            .sum()
    }

    /// Per-block normalized VLADs concatenated, then globally L2-normalized.
    pub fn encode(&self, descs: &ClipDescriptors<f32>) -> Result<Vec<Real>> {
        let mut out = Vec::with_capacity(self.dim());
        for (key, model) in &self.blocks {
            let Some(m) = model else { continue };
            let (rows, _) = block_rows(descs, *key)?;
            let projected = m.pca.apply_rows(&rows)?;
            out.extend(vlad_encode(&projected, &m.codebook)?);
        }
        l2_normalize(&mut out);
        Ok(out)
    }

    /// Writes `encoder.json` plus one PCA and one codebook file per block.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = Vec::new();
        for (key, model) in &self.blocks {
            let name = key.name();
            if let Some(m) = model {
                m.pca.save(&dir.join(format!("{name}.sfp")))?;
                m.codebook.save(&dir.join(format!("{name}.sfc")))?;
            }
            index.push(EncoderIndexEntry {
                key: *key,
                enabled: model.is_some(),
            });
        }
        let path = dir.join("encoder.json");
        let text = serde_json::to_string_pretty(&index).expect("index always serialises");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("encoder.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: Vec<EncoderIndexEntry> = serde_json::from_str(&text).map_err(|e| Error::Decode {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let blocks = index
            .into_iter()
            .map(|e| {
                let name = e.key.name();
                let model = if e.enabled {
                    Some(BlockModel {
                        pca: PcaModel::load(&dir.join(format!("{name}.sfp")))?,
                        codebook: Codebook::load(&dir.join(format!("{name}.sfc")))?,
                    })
                } else {
                    None
                };
                Ok((e.key, model))
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { blocks })
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderIndexEntry {
    key: BlockKey,
    enabled: bool,
}

/// One encoded clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    pub clip_id: String,
    pub label: IncidentClass,
    pub split: Split,
    pub vector: Vec<Real>,
}

pub fn encode_clips(
    records: &[ClipRecord],
    encoder: &Encoder,
    load: &(dyn Fn(&ClipRecord) -> Result<ClipDescriptors<f32>> + Sync),
) -> Result<Vec<Encoding>> {
    records
        .par_iter()
        .map(|r| {
            Ok(Encoding {
                clip_id: r.clip_id.clone(),
                label: r.label,
                split: r.split,
                vector: encoder.encode(&load(r)?)?,
            })
        })
        .collect()
}

pub fn write_encodings(path: &Path, encodings: &[Encoding]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in encodings {
        serde_json::to_writer(&mut w, e)
            .map_err(|err| Error::io(path, std::io::Error::other(err)))?;
        w.write_all(b"\n").map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_encodings(path: &Path) -> Result<Vec<Encoding>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// training and evaluation

pub fn train_classifier(encodings: &[Encoding], task: Task, c: f64, seed: u64) -> Result<LinearModel<Real>> {
    let train: Vec<&Encoding> = encodings.iter().filter(|e| e.split == Split::Train).collect();
    let xs: Vec<Vec<Real>> = train.iter().map(|e| e.vector.clone()).collect();
    let ys: Vec<IncidentClass> = train.iter().map(|e| e.label).collect();
    train_ovr(&xs, &ys, &TaskSpec::new(task), c, seed)
}

pub fn evaluate_classifier(model: &LinearModel<Real>, encodings: &[Encoding]) -> Result<Metrics> {
    let test: Vec<&Encoding> = encodings.iter().filter(|e| e.split == Split::Test).collect();
    let xs: Vec<Vec<Real>> = test.iter().map(|e| e.vector.clone()).collect();
    let ys: Vec<IncidentClass> = test.iter().map(|e| e.label).collect();
    evaluate(model, &xs, &ys)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: PipelineConfig,
    pub vector_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: Metrics,
}

impl EvalReport {
    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "clips: {} train / {} test", self.n_train, self.n_test);
        let _ = writeln!(s, "vector_dim: {}", self.vector_dim);
        let _ = writeln!(
            s,
            "channels: {:?}, layers: {}, idt: {}",
            self.config.extract.channels,
            self.config
                .extract
                .layers
                .iter()
                .map(|l| l.name())
                .collect::<Vec<_>>()
                .join(","),
            self.config.extract.use_idt
        );
        s.push_str(&self.metrics.report());
        s
    }

    /// Writes `report.txt` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join("report.txt");
        fs::write(&txt, self.text()).map_err(|e| Error::io(&txt, e))?;
        let json = dir.join("summary.json");
        let text = serde_json::to_string_pretty(self).expect("reports always serialise");
        fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
    }
}

/// Store-backed descriptor loader.
pub fn store_loader(store: &Path) -> impl Fn(&ClipRecord) -> Result<ClipDescriptors<f32>> + Sync + '_ {
    move |r: &ClipRecord| load_clip_descriptors(store, &r.clip_id)
}

fn train_split(records: &[ClipRecord]) -> Vec<ClipRecord> {
    records.iter().filter(|r| r.split == Split::Train).cloned().collect()
}

/// Fits the encoder on the training split, encodes every clip, trains on the
/// training split and evaluates on the test split.
pub fn run_train_eval(records: &[ClipRecord], store: &Path, cfg: &PipelineConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let loader = store_loader(store);
    let spec = EncoderSpec {
        keys: block_keys(cfg.extract.channels, &cfg.extract.layers, cfg.extract.use_idt),
        encode: cfg.encode.clone(),
        seed: derive_seed(cfg.seed, "encoder"),
    };
    let encoder = fit_encoder(&train_split(records), &spec, &loader)?;
    let encodings = encode_clips(records, &encoder, &loader)?;
    let model = train_classifier(&encodings, cfg.task, cfg.classifier.c, derive_seed(cfg.seed, "classifier"))?;
    let metrics = evaluate_classifier(&model, &encodings)?;
    Ok(EvalReport {
        config: cfg.clone(),
        vector_dim: encoder.dim(),
        n_train: encodings.iter().filter(|e| e.split == Split::Train).count(),
        n_test: encodings.iter().filter(|e| e.split == Split::Test).count(),
        metrics,
    })
}

// ---------------------------------------------------------------------------
// ablation

/// One column of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub name: String,
    pub layers: Vec<Layer>,
    pub channels: ChannelMode,
    pub use_idt: bool,
    pub codebook_source: CodebookSource,
}

/// The six cumulative configurations, in table order.
pub fn ablation_matrix() -> Vec<AblationConfig> {
    let spatial = vec![Layer::Spa4, Layer::Spa5];
    let all = Layer::ALL.to_vec();
    let cfg = |name: &str, layers: &Vec<Layer>, channels, use_idt, src| AblationConfig {
        name: name.into(),
        layers: layers.clone(),
        channels,
        use_idt,
        codebook_source: src,
    };
    use ChannelMode::{Combined, Off};
    use CodebookSource::{All, Background, BackgroundThenAll};
    vec![
        cfg("spatial", &spatial, Off, false, All),
        cfg("+temporal", &all, Off, false, All),
        cfg("+bg_codebook", &all, Off, false, Background),
        cfg("+nearmiss_codebook", &all, Off, false, BackgroundThenAll),
        cfg("+fg_bg", &all, Combined, false, BackgroundThenAll),
        cfg("+idt", &all, Combined, true, BackgroundThenAll),
    ]
}

/// The per-class foreground variant reported beside the table.
pub fn separated_config() -> AblationConfig {
    AblationConfig {
        name: "separated".into(),
        layers: Layer::ALL.to_vec(),
        channels: ChannelMode::Separated,
        use_idt: false,
        codebook_source: CodebookSource::BackgroundThenAll,
    }
}

/// Extraction settings that cover every ablation configuration: per-class
/// channels (coarser channels are unions of these), all layers, IDT.
pub fn ablation_extract_config(base: &ExtractConfig) -> ExtractConfig {
    ExtractConfig {
        layers: Layer::ALL.to_vec(),
        channels: ChannelMode::Separated,
        use_idt: true,
        ..base.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: AblationConfig,
    pub recognition: f64,
    pub detection: f64,
    pub vector_dim: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Set when a configuration failed; `rows` then holds the completed ones.
    pub aborted: Option<String>,
}

/// Runs one configuration on both tasks over an ablation store.
pub fn run_ablation_config(
    records: &[ClipRecord],
    store: &Path,
    base: &PipelineConfig,
    ac: &AblationConfig,
) -> Result<AblationRow> {
    let loader = store_loader(store);
    let spec = EncoderSpec {
        keys: block_keys(ac.channels, &ac.layers, ac.use_idt),
        encode: EncodeConfig {
            codebook_source: ac.codebook_source,
            ..base.encode.clone()
        },
        seed: derive_seed(base.seed, "encoder"),
    };
    let encoder = fit_encoder(&train_split(records), &spec, &loader)?;
    let encodings = encode_clips(records, &encoder, &loader)?;
    let mut acc = [0.0; 2];
    for (slot, task) in acc.iter_mut().zip([Task::Recognition, Task::Detection]) {
        let model = train_classifier(&encodings, task, base.classifier.c, derive_seed(base.seed, "classifier"))?;
        *slot = evaluate_classifier(&model, &encodings)?.accuracy;
    }
    Ok(AblationRow {
        config: ac.clone(),
        recognition: acc[0],
        detection: acc[1],
        vector_dim: encoder.dim(),
    })
}

/// Runs `configs` in order; a failure stops the run and is recorded.
pub fn run_ablation(
    records: &[ClipRecord],
    store: &Path,
    base: &PipelineConfig,
    configs: &[AblationConfig],
) -> AblationReport {
    let mut report = AblationReport::default();
    for ac in configs {
        match run_ablation_config(records, store, base, ac) {
            Ok(row) => {
                log::info!(
                    "ablation {}: recognition {:.4}, detection {:.4}",
                    ac.name,
                    row.recognition,
                    row.detection
                );
                report.rows.push(row);
            }
            Err(e) => {
                report.aborted = Some(format!("configuration {} failed: {e}", ac.name));
                break;
            }
        }
    }
    report
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(
            "# Columns 3-4 stand in for CNN fine-tuning: codebooks fit on background clips,\n\
             # then refined on all training clips.\n",
        );
        let (main, extra): (Vec<&AblationRow>, Vec<&AblationRow>) =
            self.rows.iter().partition(|r| r.config.channels != ChannelMode::Separated);
        let _ = write!(s, "{:<14}", "task");
        for r in &main {
            let _ = write!(s, "{:>20}", r.config.name);
        }
        s.push('\n');
        for (task, pick) in [
            ("recognition", (|r: &AblationRow| r.recognition) as fn(&AblationRow) -> f64),
            ("detection", |r: &AblationRow| r.detection),
        ] {
            let _ = write!(s, "{task:<14}");
            for r in &main {
                let _ = write!(s, "{:>20.4}", pick(r));
            }
            s.push('\n');
        }
        for r in extra {
            let _ = writeln!(
                s,
                "{} (extra row): recognition {:.4}, detection {:.4}",
                r.config.name, r.recognition, r.detection
            );
        }
        if let Some(a) = &self.aborted {
            let _ = writeln!(s, "ABORTED: {a} (partial results above)");
        }
        s
    }
}
