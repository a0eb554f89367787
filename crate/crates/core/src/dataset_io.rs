//! Dataset manifests, frame sequences on disk, and the synthetic
//! moving-glyphs benchmark.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MffError, Result};
use crate::plane::Plane;
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub frames_dir: PathBuf,
    pub frame_count: usize,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative `frames_dir` values are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn frames_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.frames_dir)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Parses the JSON-lines text and checks the structural invariants
    /// (no filesystem access).
    pub fn parse(text: &str, source: &Path, base_dir: PathBuf) -> Result<Self> {
        let err = |line: usize, msg: String| MffError::Manifest {
            path: source.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (hline, header) = lines.next().ok_or_else(|| err(1, "empty manifest".into()))?;
        let header: ManifestHeader = serde_json::from_str(header)
            .map_err(|e| err(hline + 1, format!("bad header line: {e}")))?;
        if header.classes.is_empty() {
            return Err(err(hline + 1, "header lists no classes".into()));
        }
        let mut ids = HashSet::new();
        let mut entries = Vec::new();
        for (i, line) in lines {
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| err(i + 1, format!("bad entry: {e}")))?;
            if entry.label >= header.classes.len() {
                return Err(err(
                    i + 1,
                    format!(
                        "entry {}: label out of range ({} >= {} classes)",
                        entry.id,
                        entry.label,
                        header.classes.len()
                    ),
                ));
            }
            if entry.frame_count == 0 {
                return Err(err(i + 1, format!("entry {}: frame_count must be >= 1", entry.id)));
            }
            if !ids.insert(entry.id.clone()) {
                return Err(err(i + 1, format!("duplicate id {}", entry.id)));
            }
            entries.push(entry);
        }
        Ok(DatasetManifest {
            class_names: header.classes,
            entries,
            base_dir,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&ManifestHeader {
            classes: self.class_names.clone(),
        })
        .expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| MffError::io(path, e))
    }
}

/// Loads and validates a manifest, including the frame directories it names.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| MffError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = DatasetManifest::parse(&text, path, base)?;
    for entry in &manifest.entries {
        let dir = manifest.frames_path(entry);
        if !dir.is_dir() {
            return Err(MffError::Video {
                id: entry.id.clone(),
                msg: format!("missing frames dir {}", dir.display()),
            });
        }
        let found = list_frame_files(&dir)?.len();
        if found != entry.frame_count {
            return Err(MffError::Video {
                id: entry.id.clone(),
                msg: format!(
                    "frame_count is {} but {} holds {} frame files",
                    entry.frame_count,
                    dir.display(),
                    found
                ),
            });
        }
    }
    Ok(manifest)
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for item in fs::read_dir(dir).map_err(|e| MffError::io(dir, e))? {
        let path = item.map_err(|e| MffError::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if name.starts_with("frame_") && (name.ends_with(".png") || name.ends_with(".ppm")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Ordered RGB frames of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<RgbImage>,
    pub fps_hint: Option<(u32, u32)>,
}

impl FrameSequence {
    pub fn new(frames: Vec<RgbImage>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| MffError::Shape("frame sequence needs at least one frame".into()))?;
        let dims = first.dimensions();
        if let Some(i) = frames.iter().position(|f| f.dimensions() != dims) {
            return Err(MffError::Shape(format!(
                "frame {i} is {:?}, expected {:?}",
                frames[i].dimensions(),
                dims
            )));
        }
        Ok(FrameSequence {
            frames,
            fps_hint: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width() as usize
    }

    pub fn height(&self) -> usize {
        self.frames[0].height() as usize
    }
}

pub fn load_frame_sequence(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<FrameSequence> {
    load_frames_from_dir(&manifest.frames_path(entry))
}

/// Loads every `frame_*.png|ppm` in `dir`, in lexicographic order.
pub fn load_frames_from_dir(dir: &Path) -> Result<FrameSequence> {
    let files = list_frame_files(dir)?;
    let mut frames: Vec<RgbImage> = Vec::with_capacity(files.len());
    for (index, file) in files.iter().enumerate() {
        let img = image::open(file)
            .map_err(|e| MffError::Frame {
                dir: dir.to_path_buf(),
                index,
                msg: e.to_string(),
            })?
            .to_rgb8();
        if let Some(first) = frames.first() {
            if first.dimensions() != img.dimensions() {
                return Err(MffError::Frame {
                    dir: dir.to_path_buf(),
                    index,
                    msg: format!(
                        "size {:?} differs from first frame {:?}",
                        img.dimensions(),
                        first.dimensions()
                    ),
                });
            }
        }
        frames.push(img);
    }
    if frames.is_empty() {
        return Err(MffError::Frame {
            dir: dir.to_path_buf(),
            index: 0,
            msg: "no frame files".into(),
        });
    }
    Ok(FrameSequence {
        frames,
        fps_hint: None,
    })
}

/// ITU-R 601 luma scaled into [0, 1].
pub fn to_grayscale<T: Scalar>(frame: &RgbImage) -> Plane<T> {
    let (w, h) = frame.dimensions();
    let (kr, kg, kb) = (T::of(0.299), T::of(0.587), T::of(0.114));
    let scale = T::of(255.0);
    Plane::from_fn(w as usize, h as usize, |x, y| {
        let p = frame.get_pixel(x as u32, y as u32).0;
        (kr * T::of(p[0] as f64) + kg * T::of(p[1] as f64) + kb * T::of(p[2] as f64)) / scale
    })
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlyphShape {
    Square,
    Triangle,
    Disk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlyphMotion {
    Left,
    Right,
    Up,
    Down,
    Static,
}

impl GlyphMotion {
    fn direction(self) -> (f64, f64) {
        match self {
            GlyphMotion::Left => (-1.0, 0.0),
            GlyphMotion::Right => (1.0, 0.0),
            GlyphMotion::Up => (0.0, -1.0),
            GlyphMotion::Down => (0.0, 1.0),
            GlyphMotion::Static => (0.0, 0.0),
        }
    }
}

impl fmt::Display for GlyphShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GlyphShape::Square => "square",
            GlyphShape::Triangle => "triangle",
            GlyphShape::Disk => "disk",
        })
    }
}

impl fmt::Display for GlyphMotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GlyphMotion::Left => "left",
            GlyphMotion::Right => "right",
            GlyphMotion::Up => "up",
            GlyphMotion::Down => "down",
            GlyphMotion::Static => "static",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphClass {
    #[serde(default)]
    pub name: Option<String>,
    pub shape: GlyphShape,
    pub motion: GlyphMotion,
}

impl GlyphClass {
    pub fn new(shape: GlyphShape, motion: GlyphMotion) -> Self {
        GlyphClass {
            name: None,
            shape,
            motion,
        }
    }

    pub fn display_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}_{}", self.shape, self.motion))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlyphConfig {
    pub image_size: usize,
    /// Inclusive range of clip lengths.
    pub frames_per_video: [usize; 2],
    pub classes: Vec<GlyphClass>,
    pub glyph_size: f64,
    /// Inclusive range of speeds in px/frame.
    pub speed: [f64; 2],
    pub noise_std: f64,
    pub videos_per_class: usize,
    /// How many of each class's videos go to the `val` split.
    pub val_per_class: usize,
    pub background: [u8; 3],
    pub foreground: [u8; 3],
}

impl Default for GlyphConfig {
    fn default() -> Self {
        let swipe = |motion, name: &str| GlyphClass {
            name: Some(name.to_string()),
            shape: GlyphShape::Square,
            motion,
        };
        GlyphConfig {
            image_size: 64,
            frames_per_video: [24, 40],
            classes: vec![
                swipe(GlyphMotion::Left, "swipe_left"),
                swipe(GlyphMotion::Right, "swipe_right"),
                swipe(GlyphMotion::Up, "swipe_up"),
                swipe(GlyphMotion::Down, "swipe_down"),
            ],
            glyph_size: 14.0,
            speed: [1.0, 2.5],
            noise_std: 4.0,
            videos_per_class: 70,
            val_per_class: 20,
            background: [80, 80, 80],
            foreground: [230, 200, 70],
        }
    }
}

impl GlyphConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(MffError::config("dataset.glyph", key, msg));
        if self.image_size < 8 {
            return bad("image_size", "must be at least 8");
        }
        if self.frames_per_video[0] == 0 || self.frames_per_video[0] > self.frames_per_video[1] {
            return bad("frames_per_video", "needs 1 <= min <= max");
        }
        if self.classes.is_empty() {
            return bad("classes", "at least one class required");
        }
        if !(self.glyph_size > 0.0 && self.glyph_size < self.image_size as f64) {
            return bad("glyph_size", "must be positive and smaller than the image");
        }
        if !(self.speed[0] >= 0.0 && self.speed[0] <= self.speed[1]) {
            return bad("speed", "needs 0 <= min <= max");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std", "must be non-negative");
        }
        if self.videos_per_class == 0 || self.val_per_class > self.videos_per_class {
            return bad("val_per_class", "needs 0 <= val_per_class <= videos_per_class, videos_per_class >= 1");
        }
        if self.classes.len() > 1 && !self.has_motion_pair() {
            return bad(
                "classes",
                "at least two classes must share a shape and differ only in motion",
            );
        }
        Ok(())
    }

    fn has_motion_pair(&self) -> bool {
        self.classes.iter().enumerate().any(|(i, a)| {
            self.classes[i + 1..]
                .iter()
                .any(|b| a.shape == b.shape && a.motion != b.motion)
        })
    }
}

/// Wrapped signed distance on a torus of circumference `size`.
#[inline]
fn wrapped(d: f64, size: f64) -> f64 {
    (d + size * 0.5).rem_euclid(size) - size * 0.5
}

fn inside(shape: GlyphShape, dx: f64, dy: f64, half: f64) -> bool {
    match shape {
        GlyphShape::Square => dx.abs() <= half && dy.abs() <= half,
        GlyphShape::Disk => dx * dx + dy * dy <= half * half,
        // apex up, base down
        GlyphShape::Triangle => dy.abs() <= half && dx.abs() <= (dy + half) * 0.5,
    }
}

const SUPERSAMPLE: usize = 4;

fn render_frame(
    cfg: &GlyphConfig,
    shape: GlyphShape,
    cx: f64,
    cy: f64,
    noise: &Normal<f64>,
    rng: &mut rng::Rng,
) -> RgbImage {
    let size = cfg.image_size;
    let sz = size as f64;
    let half = cfg.glyph_size * 0.5;
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    if inside(shape, wrapped(px - cx, sz), wrapped(py - cy, sz), half) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let base = cfg.background[c] as f64 * (1.0 - cov) + cfg.foreground[c] as f64 * cov;
                let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                px[c] = (base + n).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

/// Renders one synthetic video. Deterministic in `(cfg, class, seed)`.
pub fn render_glyph_video(cfg: &GlyphConfig, class: &GlyphClass, seed: u64) -> Vec<RgbImage> {
    let mut rng = rng::rng_from_seed(seed);
    let sz = cfg.image_size as f64;
    let frames = rng.random_range(cfg.frames_per_video[0]..=cfg.frames_per_video[1]);
    let x0 = rng.random_range(0.0..sz);
    let y0 = rng.random_range(0.0..sz);
    let speed = if cfg.speed[0] < cfg.speed[1] {
        rng.random_range(cfg.speed[0]..=cfg.speed[1])
    } else {
        cfg.speed[0]
    };
    let (dx, dy) = class.motion.direction();
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    (0..frames)
        .map(|t| {
            let (cx, cy) = if class.motion == GlyphMotion::Static {
                (
                    x0 + rng.random_range(-0.5..=0.5),
                    y0 + rng.random_range(-0.5..=0.5),
                )
            } else {
                (x0 + dx * speed * t as f64, y0 + dy * speed * t as f64)
            };
            render_frame(cfg, class.shape, cx.rem_euclid(sz), cy.rem_euclid(sz), &noise, &mut rng)
        })
        .collect()
}

/// Writes `out_dir/frames/<id>/frame_*.png` plus `out_dir/manifest.jsonl`.
pub fn generate_moving_glyphs(cfg: &GlyphConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let frames_root = out_dir.join("frames");
    fs::create_dir_all(&frames_root).map_err(|e| MffError::io(&frames_root, e))?;
    let mut entries = Vec::new();
    for (label, class) in cfg.classes.iter().enumerate() {
        for k in 0..cfg.videos_per_class {
            let id = format!("v{:05}", entries.len());
            let split = if k >= cfg.videos_per_class - cfg.val_per_class {
                Split::Val
            } else {
                Split::Train
            };
            let frames = render_glyph_video(cfg, class, rng::derive_seed(seed, &id));
            let rel = PathBuf::from("frames").join(&id);
            let dir = out_dir.join(&rel);
            fs::create_dir_all(&dir).map_err(|e| MffError::io(&dir, e))?;
            for (t, frame) in frames.iter().enumerate() {
                let path = dir.join(frame_file_name(t));
                frame.save(&path).map_err(|source| MffError::Image { path, source })?;
            }
            entries.push(ManifestEntry {
                id,
                frames_dir: rel,
                frame_count: frames.len(),
                label,
                split,
            });
        }
    }
    let manifest = DatasetManifest {
        class_names: cfg.classes.iter().map(GlyphClass::display_name).collect(),
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
