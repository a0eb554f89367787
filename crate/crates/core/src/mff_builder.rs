//! Segment planning and Motion Fused Frame assembly.
//!
//! A video of `F` frames is split into `N` segments; one RGB frame is chosen
//! per segment and the quantized flow of its `n` preceding frame pairs is
//! appended as extra channels, giving `3 + 2n` planes per MFF.

use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset_io::{to_grayscale, FrameSequence};
use crate::error::{MffError, Result};
use crate::optical_flow::{estimate_flow, quantize_flow, FlowParams, QuantizedFlow};
use crate::plane::Plane;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPlan {
    pub frame_count: usize,
    /// `[start, end)` per segment.
    pub boundaries: Vec<(usize, usize)>,
    pub selected: Vec<usize>,
    pub mode: SamplingMode,
}

impl SegmentPlan {
    pub fn segments(&self) -> usize {
        self.boundaries.len()
    }
}

pub fn segment_boundaries(frame_count: usize, segments: usize) -> Vec<(usize, usize)> {
    (0..segments)
        .map(|i| (i * frame_count / segments, (i + 1) * frame_count / segments))
        .collect()
}

/// Plan with an explicit offset ratio `rho ∈ [0, 1)` shared by all segments.
pub fn plan_segments_with_offset(
    frame_count: usize,
    segments: usize,
    rho: f64,
    mode: SamplingMode,
) -> SegmentPlan {
    assert!(frame_count >= 1 && segments >= 1, "need F >= 1 and N >= 1");
    let boundaries = segment_boundaries(frame_count, segments);
    let selected = boundaries
        .iter()
        .map(|&(start, end)| {
            if end == start {
                start.min(frame_count - 1)
            } else {
                start + ((rho * (end - start) as f64).floor() as usize).min(end - start - 1)
            }
        })
        .collect();
    SegmentPlan {
        frame_count,
        boundaries,
        selected,
        mode,
    }
}

/// Train mode draws one offset for all segments, so the picks stay
/// equidistant; eval mode takes each segment's middle frame.
pub fn plan_segments(frame_count: usize, segments: usize, mode: SamplingMode, rng: &mut Rng) -> SegmentPlan {
    let rho = match mode {
        SamplingMode::Train => rng.random::<f64>(),
        SamplingMode::Eval => 0.5,
    };
    plan_segments_with_offset(frame_count, segments, rho, mode)
}

/// Frame pairs whose flow precedes frame `t`, oldest first. Indices clamp
/// at 0, and a clamped pair `(0, 0)` stands for zero motion.
pub fn flow_indices(t: usize, n: usize) -> Vec<(usize, usize)> {
    (1..=n)
        .rev()
        .map(|k| {
            let a = t as isize - k as isize;
            let b = a + 1;
            (a.max(0) as usize, b.max(0) as usize)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Flow sources

/// Supplies the quantized flow from frame `from` to `from + 1`.
pub trait FlowSource {
    fn pair_flow(&self, from: usize) -> Result<Cow<'_, QuantizedFlow>>;
}

/// All pair flows of one video, index `t` holding flow `t → t+1`.
#[derive(Debug, Clone, Default)]
pub struct InMemoryFlows(pub Vec<QuantizedFlow>);

impl FlowSource for InMemoryFlows {
    fn pair_flow(&self, from: usize) -> Result<Cow<'_, QuantizedFlow>> {
        self.0.get(from).map(Cow::Borrowed).ok_or_else(|| MffError::CacheMiss {
            from,
            to: from + 1,
            path: PathBuf::from("<memory>"),
        })
    }
}

pub fn flow_file_name(from: usize) -> String {
    format!("flow_{from:05}.mffq")
}

/// Per-video cache directory under a cache root.
pub fn video_cache_dir(cache_root: &Path, video_id: &str) -> PathBuf {
    cache_root.join(video_id)
}

/// Flow cache directory of one video. Without a fallback every miss is an
/// error; with one, misses are computed and written back.
pub struct DiskFlowCache<'a> {
    dir: PathBuf,
    fallback: Option<(&'a FrameSequence, FlowParams)>,
}

impl<'a> DiskFlowCache<'a> {
    pub fn cache_only(dir: impl Into<PathBuf>) -> Self {
        DiskFlowCache {
            dir: dir.into(),
            fallback: None,
        }
    }

    pub fn compute_on_miss(dir: impl Into<PathBuf>, seq: &'a FrameSequence, params: FlowParams) -> Self {
        DiskFlowCache {
            dir: dir.into(),
            fallback: Some((seq, params)),
        }
    }

    pub fn path(&self, from: usize) -> PathBuf {
        self.dir.join(flow_file_name(from))
    }
}

impl FlowSource for DiskFlowCache<'_> {
    fn pair_flow(&self, from: usize) -> Result<Cow<'_, QuantizedFlow>> {
        let path = self.path(from);
        if path.exists() {
            return QuantizedFlow::read_file(&path).map(Cow::Owned);
        }
        match &self.fallback {
            None => Err(MffError::CacheMiss {
                from,
                to: from + 1,
                path,
            }),
            Some((seq, params)) => {
                let q = compute_pair_flow(seq, from, params)?;
                fs::create_dir_all(&self.dir).map_err(|e| MffError::io(&self.dir, e))?;
                q.write_file(&path)?;
                Ok(Cow::Owned(q))
            }
        }
    }
}

pub fn compute_pair_flow(seq: &FrameSequence, from: usize, params: &FlowParams) -> Result<QuantizedFlow> {
    if from + 1 >= seq.len() {
        return Err(MffError::Shape(format!(
            "pair ({from}, {}) out of range for {} frames",
            from + 1,
            seq.len()
        )));
    }
    let a = to_grayscale::<f32>(&seq.frames[from]);
    let b = to_grayscale::<f32>(&seq.frames[from + 1]);
    quantize_flow(&estimate_flow(&a, &b, params)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheReport {
    pub written: usize,
    pub skipped: usize,
}

/// Writes `flow_{t:05}.mffq` for every consecutive pair. Existing files are
/// validated and skipped; a corrupt one is an error.
pub fn precompute_flow_cache(seq: &FrameSequence, params: &FlowParams, out_dir: &Path) -> Result<CacheReport> {
    fs::create_dir_all(out_dir).map_err(|e| MffError::io(out_dir, e))?;
    let pairs = seq.len().saturating_sub(1);
    let dims = (seq.width(), seq.height());
    let outcomes: Vec<Result<bool>> = (0..pairs)
        .into_par_iter()
        .map(|t| {
            let path = out_dir.join(flow_file_name(t));
            if path.exists() {
                let q = QuantizedFlow::read_file(&path)?;
                if (q.width(), q.height()) != dims {
                    return Err(MffError::CacheFormat {
                        path,
                        msg: format!("cached size {}x{} != frames {}x{}", q.width(), q.height(), dims.0, dims.1),
                    });
                }
                return Ok(false);
            }
            compute_pair_flow(seq, t, params)?.write_file(&path)?;
            Ok(true)
        })
        .collect();
    let mut report = CacheReport::default();
    for outcome in outcomes {
        if outcome? {
            report.written += 1;
        } else {
            report.skipped += 1;
        }
    }
    Ok(report)
}

/// Reads every pair flow of a video from its cache directory.
pub fn load_flow_cache(dir: &Path, frame_count: usize) -> Result<InMemoryFlows> {
    let cache = DiskFlowCache::cache_only(dir);
    let flows = (0..frame_count.saturating_sub(1))
        .map(|t| cache.pair_flow(t).map(Cow::into_owned))
        .collect::<Result<Vec<_>>>()?;
    Ok(InMemoryFlows(flows))
}

// ---------------------------------------------------------------------------
// MFF assembly

/// Channels `[R, G, B, u₁, v₁, …, uₙ, vₙ]`, flow pairs oldest to newest.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFusedFrame {
    pub channels: Vec<Plane<u8>>,
    pub flow_frames: usize,
    /// Index of the RGB frame.
    pub frame_index: usize,
    pub pairs: Vec<(usize, usize)>,
    /// Quantization scale of each appended flow pair.
    pub scales: Vec<f32>,
}

impl MotionFusedFrame {
    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    /// True for the horizontal-flow planes.
    pub fn is_u_channel(channel: usize) -> bool {
        channel >= 3 && (channel - 3) % 2 == 0
    }

    pub fn map_channels(&self, mut f: impl FnMut(usize, &Plane<u8>) -> Plane<u8>) -> Self {
        MotionFusedFrame {
            channels: self.channels.iter().enumerate().map(|(c, p)| f(c, p)).collect(),
            flow_frames: self.flow_frames,
            frame_index: self.frame_index,
            pairs: self.pairs.clone(),
            scales: self.scales.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MffSample {
    pub mffs: Vec<MotionFusedFrame>,
    pub label: usize,
    pub video_id: String,
}

impl MffSample {
    pub fn segments(&self) -> usize {
        self.mffs.len()
    }

    pub fn channels(&self) -> usize {
        self.mffs[0].channel_count()
    }

    pub fn map_mffs(&self, f: impl FnMut(&MotionFusedFrame) -> MotionFusedFrame) -> Self {
        MffSample {
            mffs: self.mffs.iter().map(f).collect(),
            label: self.label,
            video_id: self.video_id.clone(),
        }
    }
}

fn rgb_planes(frame: &image::RgbImage) -> [Plane<u8>; 3] {
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    let raw = frame.as_raw();
    [0, 1, 2].map(|c| Plane::from_fn(w, h, |x, y| raw[(y * w + x) * 3 + c]))
}

pub fn assemble_mff(seq: &FrameSequence, t: usize, n: usize, flows: &dyn FlowSource) -> Result<MotionFusedFrame> {
    if t >= seq.len() {
        return Err(MffError::Shape(format!("frame {t} out of range for {} frames", seq.len())));
    }
    let (w, h) = (seq.width(), seq.height());
    let mut channels: Vec<Plane<u8>> = rgb_planes(&seq.frames[t]).into();
    let pairs = flow_indices(t, n);
    let mut scales = Vec::with_capacity(n);
    for &(a, b) in &pairs {
        if a == b {
            channels.push(Plane::filled(w, h, 128));
            channels.push(Plane::filled(w, h, 128));
            scales.push(0.0);
            continue;
        }
        let q = flows.pair_flow(a)?;
        if (q.width(), q.height()) != (w, h) {
            return Err(MffError::Shape(format!(
                "flow ({a}, {b}) is {}x{}, frames are {w}x{h}",
                q.width(),
                q.height()
            )));
        }
        channels.push(q.u.clone());
        channels.push(q.v.clone());
        scales.push(q.scale);
    }
    Ok(MotionFusedFrame {
        channels,
        flow_frames: n,
        frame_index: t,
        pairs,
        scales,
    })
}

/// Assembles one MFF per entry of `selected`, in order.
pub fn build_sample_at(
    seq: &FrameSequence,
    label: usize,
    video_id: &str,
    selected: &[usize],
    n: usize,
    flows: &dyn FlowSource,
) -> Result<MffSample> {
    let mffs = selected
        .iter()
        .map(|&t| assemble_mff(seq, t, n, flows))
        .collect::<Result<Vec<_>>>()?;
    Ok(MffSample {
        mffs,
        label,
        video_id: video_id.to_string(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn build_sample(
    seq: &FrameSequence,
    label: usize,
    video_id: &str,
    segments: usize,
    n: usize,
    mode: SamplingMode,
    rng: &mut Rng,
    flows: &dyn FlowSource,
) -> Result<MffSample> {
    let plan = plan_segments(seq.len(), segments, mode, rng);
    build_sample_at(seq, label, video_id, &plan.selected, n, flows)
}

#[derive(Serialize)]
struct DebugSidecar<'a> {
    t: usize,
    n: usize,
    pairs: &'a [(usize, usize)],
    #[serde(rename = "scale_Ms")]
    scale_ms: &'a [f32],
}

/// Writes each channel as `ch_XX.png` plus an `mff.json` sidecar.
pub fn export_mff_debug(mff: &MotionFusedFrame, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MffError::io(dir, e))?;
    for (c, plane) in mff.channels.iter().enumerate() {
        let path = dir.join(format!("ch_{c:02}.png"));
        let img = GrayImage::from_raw(plane.width() as u32, plane.height() as u32, plane.data().to_vec())
            .expect("plane buffer matches dimensions");
        img.save(&path).map_err(|source| MffError::Image { path, source })?;
    }
    let sidecar = DebugSidecar {
        t: mff.frame_index,
        n: mff.flow_frames,
        pairs: &mff.pairs,
        scale_ms: &mff.scales,
    };
    let path = dir.join("mff.json");
    fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| MffError::io(&path, e))
}
