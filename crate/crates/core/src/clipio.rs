//! Frame, mask and manifest I/O.
//!
//! Frames are 8-bit grayscale PNG or PGM files named `frame_%06d.{png,pgm}`,
//! normalised to `[0, 1]` by `/255`. Colour inputs are converted with the
//! 0.299/0.587/0.114 luma weights. Masks are single-channel files named
//! `mask_%06d.{png,pgm}` whose raw value is the class code.
//!
//! The manifest is JSON Lines, one [`ClipRecord`] per line.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::classifier::IncidentClass;
use crate::error::{Error, Result};
use crate::grid::Grid;

pub const MIN_FRAME_SIDE: usize = 32;
pub const MIN_CLIP_FRAMES: usize = 16;

/// Grayscale frame with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame(Grid<f32>);

impl Frame {
    pub fn new(grid: Grid<f32>) -> Result<Self> {
        if grid.width() < MIN_FRAME_SIDE || grid.height() < MIN_FRAME_SIDE {
            return Err(Error::Invalid(format!(
                "frame {}x{} is smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}",
                grid.width(),
                grid.height()
            )));
        }
        if let Some(v) = grid
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Invalid(format!("frame intensity {v} outside [0,1]")));
        }
        Ok(Frame(grid))
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn grid(&self) -> &Grid<f32> {
        &self.0
    }
}

/// Per-pixel semantic class codes.
#[repr(u8)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MaskCode {
    Background = 0,
    Bicycle = 1,
    Pedestrian = 2,
    Vehicle = 3,
}

/// Semantic mask; every stored code is in `{0,1,2,3}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMask(Grid<u8>);

impl SemanticMask {
    pub fn new(grid: Grid<u8>) -> Result<Self> {
        if let Some(v) = grid.data().iter().find(|&&v| v > 3) {
            return Err(Error::Invalid(format!("mask code {v} outside {{0,1,2,3}}")));
        }
        Ok(SemanticMask(grid))
    }

    pub fn background(width: usize, height: usize) -> Self {
        SemanticMask(Grid::filled(width, height, 0))
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    /// Code at the nearest pixel to `(x, y)`, clamped to bounds.
    pub fn code_at(&self, x: f32, y: f32) -> u8 {
        self.0.get_clamped(x.round() as isize, y.round() as isize)
    }

    pub fn count(&self, code: u8) -> usize {
        self.0.data().iter().filter(|&&c| c == code).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    pub frame_dir: PathBuf,
    pub mask_dir: Option<PathBuf>,
    pub label: IncidentClass,
    pub split: Split,
    pub ttc: Option<f64>,
}

impl ClipRecord {
    /// Rebases relative directories onto `base` (usually the manifest's directory).
    pub fn resolved(&self, base: &Path) -> ClipRecord {
        let join = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        ClipRecord {
            frame_dir: join(&self.frame_dir),
            mask_dir: self.mask_dir.as_deref().map(join),
            ..self.clone()
        }
    }
}

pub fn frame_file_name(index: usize, ext: &str) -> String {
    format!("frame_{index:06}.{ext}")
}

pub fn mask_file_name(index: usize, ext: &str) -> String {
    format!("mask_{index:06}.{ext}")
}

/// Lists `prefix*.png|pgm` files of `dir` in lexicographic order.
pub fn list_sequence(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        let ext_ok = matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("png") | Some("pgm")
        );
        if name.starts_with(prefix) && ext_ok {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Decodes one frame file.
pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match &img {
        DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(g) => g.as_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                let y = 0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32;
                (y / 255.0).clamp(0.0, 1.0)
            })
            .collect(),
    };
    Frame::new(Grid::from_vec(w, h, data)).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Decodes one mask file; the raw single-channel value is the class code.
pub fn read_mask(path: &Path) -> Result<SemanticMask> {
    let img = decode(path)?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        _ => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: "mask must be single-channel 8-bit".into(),
            })
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    SemanticMask::new(Grid::from_vec(w, h, gray.into_raw())).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes an 8-bit binary PGM (P5). Values are rounded from `[0,1]` to `0..=255`.
pub fn write_frame_pgm(path: &Path, frame: &Frame) -> Result<()> {
    let bytes: Vec<u8> = frame
        .grid()
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_pgm(path, frame.width(), frame.height(), &bytes)
}

pub fn write_mask_pgm(path: &Path, mask: &SemanticMask) -> Result<()> {
    write_pgm(path, mask.width(), mask.height(), mask.grid().data())
}

fn write_pgm(path: &Path, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{w} {h}\n255\n")
        .and_then(|_| out.write_all(bytes))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Loads every frame of a clip in temporal (lexicographic) order.
pub fn load_clip(record: &ClipRecord) -> Result<Vec<Frame>> {
    let dir = &record.frame_dir;
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "frame directory missing"),
        ));
    }
    let files = list_sequence(dir, "frame_")?;
    let mut frames: Vec<Frame> = Vec::with_capacity(files.len());
    for path in &files {
        let frame = read_frame(path)?;
        if let Some(first) = frames.first() {
            if first.width() != frame.width() || first.height() != frame.height() {
                return Err(Error::dims(
                    path.display().to_string(),
                    format!("{}x{}", first.width(), first.height()),
                    format!("{}x{}", frame.width(), frame.height()),
                ));
            }
        }
        frames.push(frame);
    }
    if frames.len() < MIN_CLIP_FRAMES {
        return Err(Error::CountMismatch {
            context: format!("frames in {}", dir.display()),
            expected: MIN_CLIP_FRAMES,
            found: frames.len(),
        });
    }
    Ok(frames)
}

/// Loads the masks of a clip and checks them against the frame files.
pub fn load_masks(record: &ClipRecord) -> Result<Vec<SemanticMask>> {
    let dir = record
        .mask_dir
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("clip {} has no mask_dir", record.clip_id)))?;
    let frame_files = list_sequence(&record.frame_dir, "frame_")?;
    let mask_files = list_sequence(dir, "mask_")?;
    if mask_files.len() != frame_files.len() {
        return Err(Error::CountMismatch {
            context: format!("masks in {}", dir.display()),
            expected: frame_files.len(),
            found: mask_files.len(),
        });
    }
    let dims = match frame_files.first() {
        Some(p) => {
            let f = read_frame(p)?;
            Some((f.width(), f.height()))
        }
        None => None,
    };
    mask_files
        .iter()
        .map(|p| {
            let m = read_mask(p)?;
            if let Some((w, h)) = dims {
                if m.width() != w || m.height() != h {
                    return Err(Error::dims(
                        p.display().to_string(),
                        format!("{w}x{h}"),
                        format!("{}x{}", m.width(), m.height()),
                    ));
                }
            }
            Ok(m)
        })
        .collect()
}

/// Parses a JSON-Lines manifest. Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(BufReader::new(file))
}

pub fn parse_manifest<R: BufRead>(reader: R) -> Result<Vec<ClipRecord>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Manifest {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClipRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: line_no,
            reason: e.to_string(),
        })?;
        if !seen.insert(rec.clip_id.clone()) {
            return Err(Error::DuplicateClip(rec.clip_id));
        }
        records.push(rec);
    }
    Ok(records)
}

/// Writes records one per line, LF-terminated.
pub fn write_manifest(records: &[ClipRecord], path: &Path) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.clip_id.as_str()) {
            return Err(Error::DuplicateClip(r.clip_id.clone()));
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("clip records always serialise");
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Per-class `(train, test)` counts in taxonomy order.
pub fn split_counts(records: &[ClipRecord]) -> [(usize, usize); 7] {
    let mut counts = [(0usize, 0usize); 7];
    for r in records {
        let slot = &mut counts[r.label.index()];
        match r.split {
            Split::Train => slot.0 += 1,
            Split::Test => slot.1 += 1,
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn gray_frame(w: usize, h: usize, v: f32) -> Frame {
        Frame::new(Grid::filled(w, h, v)).unwrap()
    }

    fn record(dir: &Path, mask: Option<&Path>) -> ClipRecord {
        ClipRecord {
            clip_id: "c0".into(),
            frame_dir: dir.to_path_buf(),
            mask_dir: mask.map(Path::to_path_buf),
            label: IncidentClass::Background,
            split: Split::Train,
            ttc: None,
        }
    }

    #[test]
    fn loads_constant_gray_clip() {
        let dir = tempdir().unwrap();
        let f = gray_frame(64, 64, 0.5);
        let png = image::GrayImage::from_pixel(64, 64, image::Luma([128]));
        for i in 0..20 {
            if i % 2 == 0 {
                write_frame_pgm(&dir.path().join(frame_file_name(i, "pgm")), &f).unwrap();
            } else {
                png.save(dir.path().join(frame_file_name(i, "png"))).unwrap();
            }
        }
        let frames = load_clip(&record(dir.path(), None)).unwrap();
        assert_eq!(frames.len(), 20);
        // 0.5 quantises to the 8-bit level 128
        assert!(frames
            .iter()
            .all(|fr| fr.grid().data().iter().all(|&v| v == 128.0 / 255.0)));
        assert_eq!(frames, load_clip(&record(dir.path(), None)).unwrap());
    }

    #[test]
    fn mixed_sizes_name_first_offender() {
        let dir = tempdir().unwrap();
        for i in 0..16 {
            let f = if i == 5 || i == 9 {
                gray_frame(48, 64, 0.2)
            } else {
                gray_frame(64, 64, 0.2)
            };
            write_frame_pgm(&dir.path().join(frame_file_name(i, "pgm")), &f).unwrap();
        }
        match load_clip(&record(dir.path(), None)).unwrap_err() {
            Error::DimensionMismatch { context, .. } => {
                assert!(context.ends_with("frame_000005.pgm"))
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_directory_reports_path() {
        let err = load_clip(&record(Path::new("/nonexistent/clip"), None)).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/clip"));
    }

    #[test]
    fn undecodable_frame_reports_path() {
        let dir = tempdir().unwrap();
        let f = gray_frame(64, 64, 0.1);
        for i in 0..16 {
            write_frame_pgm(&dir.path().join(frame_file_name(i, "pgm")), &f).unwrap();
        }
        fs::write(dir.path().join(frame_file_name(16, "png")), b"not a png").unwrap();
        let err = load_clip(&record(dir.path(), None)).unwrap_err();
        assert!(matches!(err, Error::Decode { ref path, .. } if path.ends_with("frame_000016.png")));
    }

    #[test]
    fn png_color_frames_use_luma_weights() {
        let dir = tempdir().unwrap();
        let img = image::RgbImage::from_pixel(40, 40, image::Rgb([200, 100, 50]));
        let p = dir.path().join("frame_000000.png");
        img.save(&p).unwrap();
        let f = read_frame(&p).unwrap();
        let expect = (0.299 * 200.0 + 0.587 * 100.0 + 0.114 * 50.0) / 255.0;
        assert!((f.grid().get(3, 3) - expect).abs() < 1e-5);
    }

    #[test]
    fn mask_zero_and_count_mismatch() {
        let dir = tempdir().unwrap();
        let fdir = dir.path().join("f");
        let mdir = dir.path().join("m");
        fs::create_dir_all(&fdir).unwrap();
        fs::create_dir_all(&mdir).unwrap();
        let f = gray_frame(32, 32, 0.3);
        for i in 0..16 {
            write_frame_pgm(&fdir.join(frame_file_name(i, "pgm")), &f).unwrap();
        }
        for i in 0..15 {
            write_mask_pgm(&mdir.join(mask_file_name(i, "pgm")), &SemanticMask::background(32, 32))
                .unwrap();
        }
        let rec = record(&fdir, Some(&mdir));
        assert!(matches!(
            load_masks(&rec),
            Err(Error::CountMismatch {
                expected: 16,
                found: 15,
                ..
            })
        ));
        write_mask_pgm(&mdir.join(mask_file_name(15, "pgm")), &SemanticMask::background(32, 32))
            .unwrap();
        let masks = load_masks(&rec).unwrap();
        assert_eq!(masks.len(), 16);
        assert_eq!(masks[0].count(0), 32 * 32);
    }

    #[test]
    fn out_of_range_mask_code_is_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("mask_000000.pgm");
        write_pgm(&p, 32, 32, &[7u8; 32 * 32]).unwrap();
        assert!(read_mask(&p).is_err());
    }

    #[test]
    fn manifest_errors() {
        let good = "{\"clip_id\":\"a\",\"frame_dir\":\"x\",\"mask_dir\":null,\"label\":\"background\",\"split\":\"train\",\"ttc\":null}";
        let text = format!("{good}\nnot json\n");
        match parse_manifest(text.as_bytes()) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let dup = format!("{good}\n{good}\n");
        assert!(matches!(
            parse_manifest(dup.as_bytes()),
            Err(Error::DuplicateClip(_))
        ));
        assert!(parse_manifest("".as_bytes()).unwrap().is_empty());
    }
}
