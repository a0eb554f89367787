//! SGD training loop, evaluation protocols and ablation sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_train, crop_dims, crop_resize, eval_transform, temporal_augment, AugmentConfig, CropAnchor};
use crate::dataset_io::{load_frame_sequence, DatasetManifest, FrameSequence, ManifestEntry, Split};
use crate::error::{MffError, Result};
use crate::mff_builder::{
    MffSample,
    build_sample_at, load_flow_cache, plan_segments, plan_segments_with_offset, video_cache_dir, InMemoryFlows,
    SamplingMode,
};
use crate::network::{
    adapt_first_layer, init_network, load_checkpoint, loss_and_grad, normalize_input, predict, save_checkpoint,
    DropoutRates, NetInput, NetworkParams, ArchConfig,
};
use crate::rng::labeled_rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    pub epoch: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutStage {
    pub epoch: usize,
    pub pool: f64,
    pub fc7: f64,
}

/// Published schedule shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Jester,
    Chalearn,
    Nvgesture,
    /// 30 epochs, steps at 15 and 25 (factor 1/4).
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub lr_steps: Vec<LrStep>,
    pub epochs: usize,
    pub dropout: Vec<DropoutStage>,
    pub seed: u64,
    pub eval_every: usize,
    /// Rayon pool size; 0 uses every core.
    pub workers: usize,
    /// Warm start from a checkpoint; an RGB first layer is adapted to the
    /// configured flow channels.
    pub init_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::recipe(Recipe::Desk)
    }
}

fn staged_dropout(first: usize, second: usize) -> Vec<DropoutStage> {
    vec![
        DropoutStage { epoch: 0, pool: 0.5, fc7: 0.5 },
        DropoutStage { epoch: first, pool: 0.8, fc7: 0.8 },
        DropoutStage { epoch: second, pool: 0.9, fc7: 0.9 },
    ]
}

impl TrainConfig {
    pub fn recipe(recipe: Recipe) -> Self {
        let (steps, epochs, dropout) = match recipe {
            Recipe::Jester => (
                vec![LrStep { epoch: 25, factor: 0.1 }, LrStep { epoch: 40, factor: 0.1 }],
                45,
                vec![DropoutStage { epoch: 0, pool: 0.8, fc7: 0.0 }],
            ),
            Recipe::Chalearn => (
                vec![LrStep { epoch: 15, factor: 0.25 }, LrStep { epoch: 30, factor: 0.25 }],
                35,
                staged_dropout(15, 30),
            ),
            Recipe::Nvgesture => (
                vec![LrStep { epoch: 40, factor: 0.25 }, LrStep { epoch: 80, factor: 0.25 }],
                85,
                staged_dropout(40, 80),
            ),
            Recipe::Desk => (
                vec![LrStep { epoch: 15, factor: 0.25 }, LrStep { epoch: 25, factor: 0.25 }],
                30,
                staged_dropout(15, 25),
            ),
        };
        TrainConfig {
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr: 1e-3,
            lr_steps: steps,
            epochs,
            dropout,
            seed: 0,
            eval_every: 1,
            workers: 1,
            init_from: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(MffError::config("train", key, msg));
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be >= 0");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be >= 0");
        }
        if self.lr_steps.iter().any(|s| !(s.factor > 0.0 && s.factor <= 1.0)) {
            return bad("lr_steps", "factors must lie in (0, 1]");
        }
        if self.lr_steps.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
            return bad("lr_steps", "epochs must be strictly increasing");
        }
        if self.dropout.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
            return bad("dropout", "epochs must be strictly increasing");
        }
        if self
            .dropout
            .iter()
            .any(|d| !(0.0..1.0).contains(&d.pool) || !(0.0..1.0).contains(&d.fc7))
        {
            return bad("dropout", "probabilities must lie in [0, 1)");
        }
        Ok(())
    }
}

/// `lr` times the factor of every step with `step.epoch <= epoch`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr_steps
        .iter()
        .filter(|s| s.epoch <= epoch)
        .fold(cfg.lr, |lr, s| lr * s.factor)
}

/// Rates of the last stage with `stage.epoch <= epoch`; no dropout before the
/// first stage.
pub fn dropout_schedule(epoch: usize, cfg: &TrainConfig) -> DropoutRates {
    cfg.dropout
        .iter()
        .rev()
        .find(|d| d.epoch <= epoch)
        .map_or(DropoutRates { pool: 0.0, fc7: 0.0 }, |d| DropoutRates { pool: d.pool, fc7: d.fc7 })
}

/// One SGD-with-momentum update on a flat slice:
/// `g' = g + γp`, `buf ← μ·buf + g'`, `p ← p − lr·buf`.
pub fn sgd_update_slice<T: Scalar>(p: &mut [T], g: &[T], buf: &mut [T], lr: T, momentum: T, weight_decay: T) {
    for ((p, &g), b) in p.iter_mut().zip(g).zip(buf.iter_mut()) {
        let gd = g + weight_decay * *p;
        *b = momentum * *b + gd;
        *p -= lr * *b;
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub buffers: NetworkParams<T>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(arch: &ArchConfig) -> Self {
        SgdState {
            buffers: NetworkParams::zeros(arch),
        }
    }
}

pub fn sgd_step<T: Scalar>(
    params: &mut NetworkParams<T>,
    grads: &NetworkParams<T>,
    state: &mut SgdState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let (lr, mu, wd) = (T::of(lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    for ((p, g), b) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.buffers.tensors_mut())
    {
        if p.shape() != g.shape() {
            return Err(MffError::Shape(format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape())));
        }
        sgd_update_slice(p.data_mut(), g.data(), b.data_mut(), lr, mu, wd);
    }
    if !params.is_finite() {
        return Err(MffError::NonFinite("SGD update produced a non-finite parameter".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Segments per video (N).
    pub segments: usize,
    /// Flow pairs per MFF (n).
    pub flow_frames: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            segments: 1,
            flow_frames: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalProtocol {
    Center,
    FiveCrop,
}

impl std::str::FromStr for EvalProtocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "center" => Ok(EvalProtocol::Center),
            "five_crop" => Ok(EvalProtocol::FiveCrop),
            _ => Err(format!("unknown protocol {s:?} (expected center or five_crop)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: EvalProtocol,
    /// Crop edge relative to the shorter side for the five-crop protocol.
    pub five_crop_ratio: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: EvalProtocol::Center,
            five_crop_ratio: 0.875,
        }
    }
}

/// Everything that determines a training run apart from the data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Experiment {
    pub sampling: SamplingConfig,
    pub arch: ArchConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        if self.sampling.segments == 0 {
            return Err(MffError::config("sampling", "segments", "must be >= 1"));
        }
        if self.arch.in_channels != 3 + 2 * self.sampling.flow_frames {
            return Err(MffError::config(
                "arch",
                "in_channels",
                format!(
                    "is {} but sampling.flow_frames = {} needs 3 + 2n = {}",
                    self.arch.in_channels,
                    self.sampling.flow_frames,
                    3 + 2 * self.sampling.flow_frames
                ),
            ));
        }
        if self.arch.segments != self.sampling.segments {
            return Err(MffError::config(
                "arch",
                "segments",
                format!("is {} but sampling.segments = {}", self.arch.segments, self.sampling.segments),
            ));
        }
        if self.arch.input_size != self.augment.final_size {
            return Err(MffError::config(
                "arch",
                "input_size",
                format!("is {} but augment.final_size = {}", self.arch.input_size, self.augment.final_size),
            ));
        }
        if !(self.eval.five_crop_ratio > 0.0 && self.eval.five_crop_ratio <= 1.0) {
            return Err(MffError::config("eval", "five_crop_ratio", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Same experiment at another grid point, with the network resized to match.
    pub fn with_sampling(&self, segments: usize, flow_frames: usize) -> Experiment {
        let mut exp = self.clone();
        exp.sampling = SamplingConfig { segments, flow_frames };
        exp.arch.segments = segments;
        exp.arch.in_channels = 3 + 2 * flow_frames;
        exp
    }

    pub fn name(&self) -> String {
        mff_name(self.sampling.segments, self.sampling.flow_frames)
    }
}

/// Architecture label `N-MFFs-nf1c`.
pub fn mff_name(segments: usize, flow_frames: usize) -> String {
    format!("{segments}-MFFs-{flow_frames}f1c")
}

// ---------------------------------------------------------------------------
// Data

/// A decoded video with all its pair flows.
#[derive(Debug, Clone)]
pub struct VideoData {
    pub id: String,
    pub label: usize,
    pub frames: FrameSequence,
    pub flows: InMemoryFlows,
}

/// Train and val videos held in memory.
#[derive(Debug, Clone)]
pub struct VideoStore {
    pub class_names: Vec<String>,
    pub train: Vec<VideoData>,
    pub val: Vec<VideoData>,
}

impl VideoStore {
    /// Decodes every video and reads its flow cache under `cache_root`.
    pub fn load(manifest: &DatasetManifest, cache_root: &Path) -> Result<Self> {
        let load = |e: &ManifestEntry| -> Result<VideoData> {
            let frames = load_frame_sequence(manifest, e)?;
            let flows = load_flow_cache(&video_cache_dir(cache_root, &e.id), frames.len())?;
            Ok(VideoData {
                id: e.id.clone(),
                label: e.label,
                frames,
                flows,
            })
        };
        let split = |s: Split| -> Result<Vec<VideoData>> {
            manifest.entries.par_iter().filter(|e| e.split == s).map(load).collect()
        };
        Ok(VideoStore {
            class_names: manifest.class_names.clone(),
            train: split(Split::Train)?,
            val: split(Split::Val)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Augmented training sample for one video: random segment plan, optional
/// temporal jitter, then the spatial pipeline.
pub fn train_sample(video: &VideoData, exp: &Experiment, rng: &mut crate::rng::Rng) -> Result<MffSample> {
    let f = video.frames.len();
    let plan = plan_segments(f, exp.sampling.segments, SamplingMode::Train, rng);
    let selected = temporal_augment(f, &plan.selected, rng, &exp.augment);
    let sample = build_sample_at(&video.frames, video.label, &video.id, &selected, exp.sampling.flow_frames, &video.flows)?;
    Ok(augment_train(&sample, rng, &exp.augment))
}

pub fn train_input<T: Scalar>(video: &VideoData, exp: &Experiment, rng: &mut crate::rng::Rng) -> Result<NetInput<T>> {
    normalize_input(&train_sample(video, exp, rng)?)
}

/// Stream seed of the training sample for video `index` in `epoch`.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> crate::rng::Rng {
    labeled_rng(seed, "sample", &[epoch as u64, index as u64])
}

/// Evaluation inputs for one video: one view for the centre protocol, five
/// (four corners then centre) for five-crop.
pub fn eval_inputs<T: Scalar>(video: &VideoData, exp: &Experiment) -> Result<Vec<NetInput<T>>> {
    let f = video.frames.len();
    let plan = plan_segments_with_offset(f, exp.sampling.segments, 0.5, SamplingMode::Eval);
    let sample = build_sample_at(
        &video.frames,
        video.label,
        &video.id,
        &plan.selected,
        exp.sampling.flow_frames,
        &video.flows,
    )?;
    let size = exp.augment.final_size;
    match exp.eval.protocol {
        EvalProtocol::Center => Ok(vec![normalize_input(&eval_transform(&sample, size))?]),
        EvalProtocol::FiveCrop => {
            let (w, h) = (sample.mffs[0].width(), sample.mffs[0].height());
            let r = exp.eval.five_crop_ratio;
            let (cw, ch) = crop_dims(w, h, r, r);
            CropAnchor::ALL
                .iter()
                .map(|&a| normalize_input(&crop_resize(&sample, cw, ch, a, size)))
                .collect()
        }
    }
}

/// Class probabilities for one video, averaged over the protocol's views.
pub fn predict_video<T: Scalar>(params: &NetworkParams<T>, video: &VideoData, exp: &Experiment) -> Result<Vec<T>> {
    let inputs = eval_inputs::<T>(video, exp)?;
    let mut mean = vec![T::zero(); params.arch.num_classes];
    for x in &inputs {
        for (m, p) in mean.iter_mut().zip(predict(params, x)?) {
            *m += p;
        }
    }
    let k = T::of(inputs.len() as f64);
    Ok(mean.into_iter().map(|m| m / k).collect())
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Fractions in `[0, 1]`.
    pub top1: f64,
    pub top5: f64,
    pub per_class_acc: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Position of `label` when classes are ranked by descending probability,
/// ties broken by lower class index.
pub fn rank_of<T: Scalar>(probs: &[T], label: usize) -> usize {
    let p = probs[label];
    probs
        .iter()
        .enumerate()
        .filter(|&(c, &q)| q > p || (q == p && c < label))
        .count()
}

pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    (0..v.len()).fold(0, |best, c| if v[c] > v[best] { c } else { best })
}

/// Metrics from per-sample probability vectors. Top-k uses `min(k, C)`.
pub fn metrics_from_probs<T: Scalar>(probs: &[Vec<T>], labels: &[usize], num_classes: usize) -> EvalReport {
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    let (mut hit1, mut hit5) = (0usize, 0usize);
    let k5 = 5.min(num_classes);
    for (p, &y) in probs.iter().zip(labels) {
        let rank = rank_of(p, y);
        hit1 += (rank < 1) as usize;
        hit5 += (rank < k5) as usize;
        confusion[y][argmax(p)] += 1;
    }
    let n = labels.len();
    let frac = |h: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    let per_class_acc = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[c] as f64 / total as f64
            }
        })
        .collect();
    EvalReport {
        samples: n,
        top1: frac(hit1),
        top5: frac(hit5),
        per_class_acc,
        confusion,
    }
}

pub fn evaluate<T: Scalar>(params: &NetworkParams<T>, videos: &[VideoData], exp: &Experiment) -> Result<EvalReport> {
    let probs = videos
        .par_iter()
        .map(|v| predict_video(params, v, exp))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = videos.iter().map(|v| v.label).collect();
    Ok(metrics_from_probs(&probs, &labels, params.arch.num_classes))
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    /// `None` for epochs without evaluation.
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
    pub lr: f64,
    pub p_pool: f64,
    pub p_fc7: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,loss,train_acc,val_top1,val_top5,lr,p_pool,p_fc7,seconds";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:.3}",
                r.epoch,
                r.loss,
                r.train_acc,
                opt(r.val_top1),
                opt(r.val_top5),
                r.lr,
                r.p_pool,
                r.p_fc7,
                r.seconds
            );
        }
        out
    }

    /// Epoch with the highest val top-1; ties go to the earlier epoch.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().fold(None, |best: Option<&EpochRecord>, r| match (best, r.val_top1) {
            (_, None) => best,
            (None, Some(_)) => Some(r),
            (Some(b), Some(v)) => Some(if v > b.val_top1.unwrap_or(f64::NEG_INFINITY) { r } else { b }),
        })
    }
}

pub struct TrainOutcome<T> {
    /// Parameters after the final epoch.
    pub params: NetworkParams<T>,
    pub history: TrainHistory,
}

pub const BEST_CHECKPOINT: &str = "ckpt_best.mffw";
pub const LAST_CHECKPOINT: &str = "ckpt_last.mffw";
pub const HISTORY_FILE: &str = "history.csv";

/// Copies every tensor of `src` whose shape matches; an RGB first layer is
/// adapted to the target channel count. Returns the names copied.
pub fn warm_start<T: Scalar>(dst: &mut NetworkParams<T>, src: &NetworkParams<T>) -> Result<Vec<String>> {
    let names = NetworkParams::<T>::tensor_names(&dst.arch);
    let src_named = src.named_tensors();
    let flow_frames = dst.arch.flow_frames().unwrap_or(0);
    let mut copied = Vec::new();
    for (name, t) in names.iter().zip(dst.tensors_mut()) {
        let Some((_, s)) = src_named.iter().find(|(n, _)| n == name) else {
            continue;
        };
        if s.shape() == t.shape() {
            *t = (*s).clone();
        } else if name == "conv1.weight" && s.shape().get(1) == Some(&3) {
            let adapted = adapt_first_layer(s, flow_frames)?;
            if adapted.shape() != t.shape() {
                continue;
            }
            *t = adapted;
        } else {
            continue;
        }
        copied.push(name.clone());
    }
    Ok(copied)
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| MffError::config("train", "workers", e.to_string()))
}

type PreparedBatch<T> = Result<(Vec<NetInput<T>>, Vec<usize>)>;

/// Trains from scratch (or from `train.init_from`). With `out_dir`, writes
/// checkpoints and the history CSV there after every epoch.
pub fn train<T: Scalar>(store: &VideoStore, exp: &Experiment, out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    exp.validate()?;
    if exp.arch.num_classes != store.num_classes() {
        return Err(MffError::config(
            "arch",
            "num_classes",
            format!("is {} but the dataset has {} classes", exp.arch.num_classes, store.num_classes()),
        ));
    }
    if store.train.is_empty() {
        return Err(MffError::Video {
            id: "<train split>".into(),
            msg: "no training videos".into(),
        });
    }
    let cfg = &exp.train;
    let mut params: NetworkParams<T> = init_network(&exp.arch, cfg.seed)?;
    if let Some(path) = &cfg.init_from {
        let src = load_checkpoint::<T>(path)?;
        let copied = warm_start(&mut params, &src)?;
        log::info!("warm start from {}: {} tensors", path.display(), copied.len());
    }
    let pool = build_pool(cfg.workers)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| MffError::io(dir, e))?;
    }
    let mut state = SgdState::new(&exp.arch);
    let mut history = TrainHistory::default();
    let mut best_top1 = f64::NEG_INFINITY;
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let rates = dropout_schedule(epoch, cfg);
        let mut order: Vec<usize> = (0..store.train.len()).collect();
        order.shuffle(&mut labeled_rng(cfg.seed, "shuffle", &[epoch as u64]));
        let batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();

        let (loss_sum, correct) = std::thread::scope(|scope| -> Result<(f64, usize)> {
            let (tx, rx) = mpsc::sync_channel::<PreparedBatch<T>>(2);
            let pool = &pool;
            let batches = &batches;
            scope.spawn(move || {
                for idx in batches {
                    let batch = pool.install(|| {
                        idx.par_iter()
                            .map(|&v| {
                                let mut rng = sample_rng(cfg.seed, epoch, v);
                                train_input::<T>(&store.train[v], exp, &mut rng)
                            })
                            .collect::<Result<Vec<_>>>()
                            .map(|xs| (xs, idx.iter().map(|&v| store.train[v].label).collect()))
                    });
                    let failed = batch.is_err();
                    if tx.send(batch).is_err() || failed {
                        break;
                    }
                }
            });
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            for b in 0..batches.len() {
                let (inputs, labels) = rx.recv().expect("producer sends every batch")?;
                let mut rng = labeled_rng(cfg.seed, "dropout", &[epoch as u64, b as u64]);
                let out = pool
                    .install(|| loss_and_grad(&params, &inputs, &labels, Some(rates), &mut rng))
                    .map_err(|e| match e {
                        MffError::NonFinite(m) => MffError::NonFinite(format!("epoch {epoch} batch {b}: {m}")),
                        other => other,
                    })?;
                sgd_step(&mut params, &out.grads, &mut state, lr, cfg)
                    .map_err(|e| MffError::NonFinite(format!("epoch {epoch} batch {b}: {e}")))?;
                loss_sum += out.loss.to_f64_lossy() * labels.len() as f64;
                correct += out.logits.iter().zip(&labels).filter(|(l, &y)| argmax(l) == y).count();
            }
            Ok((loss_sum, correct))
        })?;

        let n_train = store.train.len() as f64;
        let eval_now = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let report = if eval_now && !store.val.is_empty() {
            Some(pool.install(|| evaluate(&params, &store.val, exp))?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / n_train,
            train_acc: correct as f64 / n_train,
            val_top1: report.as_ref().map(|r| r.top1),
            val_top5: report.as_ref().map(|r| r.top5),
            lr,
            p_pool: rates.pool,
            p_fc7: rates.fc7,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4} train_acc {:.3} val_top1 {}",
            exp.name(),
            record.loss,
            record.train_acc,
            record.val_top1.map_or("-".into(), |v| format!("{v:.3}"))
        );
        if let Some(dir) = out_dir {
            if let Some(top1) = record.val_top1 {
                if top1 > best_top1 {
                    best_top1 = top1;
                    save_checkpoint(&params, &dir.join(BEST_CHECKPOINT))?;
                }
            }
            save_checkpoint(&params, &dir.join(LAST_CHECKPOINT))?;
        }
        history.epochs.push(record);
        if let Some(dir) = out_dir {
            let path = dir.join(HISTORY_FILE);
            std::fs::write(&path, history.to_csv()).map_err(|e| MffError::io(&path, e))?;
        }
    }
    Ok(TrainOutcome { params, history })
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub segments: usize,
    pub flow_frames: usize,
    pub top1: f64,
    pub top5: f64,
}

fn parse_list(key: &str, vals: &str) -> Result<Vec<usize>> {
    vals.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| MffError::config("ablate", "grid", format!("{key}: {v:?} is not a non-negative integer")))
        })
        .collect()
}

/// Parses `"N=1,8;n=0,1,2,3"` into the cartesian product of both lists
/// (N-major). Groups separated by `|` are concatenated. A missing key
/// defaults to `N=1` or `n=0`.
pub fn parse_grid(spec: &str) -> Result<Vec<(usize, usize)>> {
    let mut points = Vec::new();
    for group in spec.split('|') {
        let (mut ns, mut fs) = (vec![1], vec![0]);
        for part in group.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, vals) = part
                .split_once('=')
                .ok_or_else(|| MffError::config("ablate", "grid", format!("expected key=values, got {part:?}")))?;
            match key.trim() {
                "N" => ns = parse_list("N", vals)?,
                "n" => fs = parse_list("n", vals)?,
                other => return Err(MffError::config("ablate", "grid", format!("unknown key {other:?}"))),
            }
        }
        if ns.contains(&0) {
            return Err(MffError::config("ablate", "grid", "N must be >= 1"));
        }
        for &n_seg in &ns {
            for &n_flow in &fs {
                points.push((n_seg, n_flow));
            }
        }
    }
    Ok(points)
}

/// Trains one model per grid point with the base seed and budget, reporting
/// final-epoch val metrics. With `out_dir` each run writes into
/// `out_dir/<name>/`.
pub fn run_ablation<T: Scalar>(
    store: &VideoStore,
    base: &Experiment,
    grid: &[(usize, usize)],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    grid.iter()
        .map(|&(segments, flow_frames)| {
            let exp = base.with_sampling(segments, flow_frames);
            let name = exp.name();
            let dir = out_dir.map(|d| d.join(&name));
            let outcome = train::<T>(store, &exp, dir.as_deref())?;
            let last = outcome.history.epochs.last().expect("at least one epoch");
            Ok(AblationRow {
                name,
                segments,
                flow_frames,
                top1: last.val_top1.unwrap_or(0.0),
                top5: last.val_top5.unwrap_or(0.0),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("name,N,n,top1,top5\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.4},{:.4}", r.name, r.segments, r.flow_frames, r.top1, r.top5);
    }
    out
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| Model | N | n | Top-1 (%) | Top-5 (%) |\n|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:.2} | {:.2} |",
            r.name,
            r.segments,
            r.flow_frames,
            100.0 * r.top1,
            100.0 * r.top5
        );
    }
    out
}
