use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use mff_core::config::{load_flow_params, RunConfig};
use mff_core::dataset_io::{
    generate_moving_glyphs, load_frame_sequence, load_manifest, DatasetManifest, FrameSequence, ManifestEntry, Split,
};
use mff_core::mff_builder::{
    assemble_mff, export_mff_debug, flow_indices, plan_segments_with_offset, precompute_flow_cache, video_cache_dir,
    CacheReport, DiskFlowCache, FlowSource, SamplingMode,
};
use mff_core::network::load_checkpoint;
use mff_core::optical_flow::{dequantize_flow, flow_to_color, FlowField, FlowParams};
use mff_core::trainer::{
    ablation_csv, ablation_markdown, evaluate, parse_grid, run_ablation, sample_rng, train, train_sample, TrainConfig,
    VideoStore, BEST_CHECKPOINT, HISTORY_FILE,
};
use mff_core::{MffError, Result};

use crate::{Command, TrainOverrides};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { config, out, seed } => synth(config.as_deref(), &out, seed),
        Command::Flow {
            manifest,
            params,
            config,
            cache,
            workers,
        } => flow(&manifest, params.as_deref(), config.as_deref(), cache, workers),
        Command::Build {
            manifest,
            video_id,
            segments,
            flow_frames,
            cache,
            out,
        } => build(&manifest, &video_id, segments, flow_frames, cache, &out),
        Command::Train {
            config,
            out,
            overrides,
            save_augmented,
            save_count,
        } => train_cmd(&config, &out, &overrides, save_augmented.as_deref(), save_count),
        Command::Eval {
            config,
            checkpoint,
            protocol,
            out,
            workers,
        } => eval_cmd(&config, &checkpoint, protocol, out.as_deref(), workers),
        Command::Ablate {
            config,
            grid,
            out,
            overrides,
        } => ablate(&config, &grid, &out, &overrides),
        Command::Viz {
            manifest,
            video_id,
            segments,
            flow_frames,
            cache,
            out,
        } => viz(&manifest, &video_id, segments, flow_frames, cache, &out),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| MffError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| MffError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| MffError::Config {
            section: "cli".into(),
            key: "workers".into(),
            msg: e.to_string(),
        })
}

fn default_cache_root(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new("")).join("flow_cache")
}

fn synth(config: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let manifest = generate_moving_glyphs(&cfg.dataset.glyph, seed, out)?;
    println!("manifest: {}", out.join("manifest.jsonl").display());
    for (label, name) in manifest.class_names.iter().enumerate() {
        let count = |s: Split| manifest.split(s).filter(|e| e.label == label).count();
        println!("{name}: {} train, {} val", count(Split::Train), count(Split::Val));
    }
    Ok(())
}

fn flow(manifest_path: &Path, params: Option<&Path>, config: Option<&Path>, cache: Option<PathBuf>, workers: usize) -> Result<()> {
    let params = match (params, config) {
        (Some(p), _) => load_flow_params(p)?,
        (None, Some(c)) => RunConfig::load(c)?.flow,
        (None, None) => FlowParams::default(),
    };
    let root = cache.unwrap_or_else(|| default_cache_root(manifest_path));
    let manifest = load_manifest(manifest_path)?;
    let pool = pool(workers)?;
    let mut total = CacheReport::default();
    for entry in &manifest.entries {
        let seq = load_frame_sequence(&manifest, entry)?;
        let report = pool.install(|| precompute_flow_cache(&seq, &params, &video_cache_dir(&root, &entry.id)))?;
        total.written += report.written;
        total.skipped += report.skipped;
    }
    println!(
        "{} videos: {} written, {} skipped -> {}",
        manifest.entries.len(),
        total.written,
        total.skipped,
        root.display()
    );
    Ok(())
}

fn find_video<'a>(manifest: &'a DatasetManifest, id: &str) -> Result<&'a ManifestEntry> {
    manifest.entry(id).ok_or_else(|| MffError::Video {
        id: id.to_string(),
        msg: "not in manifest".into(),
    })
}

struct OpenedVideo {
    seq: FrameSequence,
    cache_dir: PathBuf,
    selected: Vec<usize>,
}

fn open_video(manifest_path: &Path, id: &str, segments: usize, cache: Option<PathBuf>) -> Result<OpenedVideo> {
    if segments == 0 {
        return Err(MffError::Config {
            section: "cli".into(),
            key: "N".into(),
            msg: "must be >= 1".into(),
        });
    }
    let manifest = load_manifest(manifest_path)?;
    let entry = find_video(&manifest, id)?;
    let seq = load_frame_sequence(&manifest, entry)?;
    let root = cache.unwrap_or_else(|| default_cache_root(manifest_path));
    let plan = plan_segments_with_offset(seq.len(), segments, 0.5, SamplingMode::Eval);
    Ok(OpenedVideo {
        seq,
        cache_dir: video_cache_dir(&root, id),
        selected: plan.selected,
    })
}

fn build(manifest: &Path, id: &str, segments: usize, n: usize, cache: Option<PathBuf>, out: &Path) -> Result<()> {
    let video = open_video(manifest, id, segments, cache)?;
    let flows = DiskFlowCache::cache_only(&video.cache_dir);
    for (s, &t) in video.selected.iter().enumerate() {
        let mff = assemble_mff(&video.seq, t, n, &flows)?;
        export_mff_debug(&mff, &out.join(format!("seg_{s:02}")))?;
    }
    println!("{} MFFs with {} channels -> {}", video.selected.len(), 3 + 2 * n, out.display());
    Ok(())
}

fn apply_overrides(train: &mut TrainConfig, o: &TrainOverrides) {
    if let Some(v) = o.seed {
        train.seed = v;
    }
    if let Some(v) = o.workers {
        train.workers = v;
    }
    if let Some(v) = o.epochs {
        train.epochs = v;
    }
    if let Some(v) = o.lr {
        train.lr = v;
    }
    if let Some(v) = o.batch_size {
        train.batch_size = v;
    }
}

/// Config with overrides applied, plus the loaded videos.
fn prepare(config: &Path, overrides: &TrainOverrides) -> Result<(RunConfig, VideoStore)> {
    let mut cfg = RunConfig::load(config)?;
    apply_overrides(&mut cfg.train, overrides);
    cfg.validate()?;
    let manifest_path = cfg.dataset.manifest.clone().ok_or_else(|| MffError::Config {
        section: "dataset".into(),
        key: "manifest".into(),
        msg: "required for this command".into(),
    })?;
    let manifest = load_manifest(&manifest_path)?;
    let root = cfg.cache_dir().expect("manifest is set");
    let store = VideoStore::load(&manifest, &root)?;
    Ok((cfg, store))
}

fn train_cmd(
    config: &Path,
    out: &Path,
    overrides: &TrainOverrides,
    save_augmented: Option<&Path>,
    save_count: usize,
) -> Result<()> {
    let (cfg, store) = prepare(config, overrides)?;
    let exp = cfg.experiment(store.num_classes());
    exp.validate()?;
    create_dir(out)?;
    write_file(&out.join("config.toml"), &cfg.to_toml_string())?;
    if let Some(dir) = save_augmented {
        for (v, video) in store.train.iter().enumerate().take(save_count) {
            let sample = train_sample(video, &exp, &mut sample_rng(exp.train.seed, 0, v))?;
            for (s, mff) in sample.mffs.iter().enumerate() {
                export_mff_debug(mff, &dir.join(&video.id).join(format!("seg_{s:02}")))?;
            }
        }
    }
    let outcome = train::<f32>(&store, &exp, Some(out))?;
    match outcome.history.best() {
        Some(best) => println!(
            "{}: best val top1 {:.4} at epoch {} -> {}",
            exp.name(),
            best.val_top1.unwrap_or(0.0),
            best.epoch,
            out.join(BEST_CHECKPOINT).display()
        ),
        None => println!("{}: trained without a val split", exp.name()),
    }
    println!("history: {}", out.join(HISTORY_FILE).display());
    Ok(())
}

fn eval_cmd(
    config: &Path,
    checkpoint: &Path,
    protocol: Option<mff_core::trainer::EvalProtocol>,
    out: Option<&Path>,
    workers: usize,
) -> Result<()> {
    let (cfg, store) = prepare(config, &TrainOverrides::default())?;
    let params = load_checkpoint::<f32>(checkpoint)?;
    let arch = params.arch.clone();
    let mut exp = cfg
        .experiment(store.num_classes())
        .with_sampling(arch.segments, arch.flow_frames().unwrap_or(0));
    exp.augment.final_size = arch.input_size;
    exp.arch = arch;
    if let Some(p) = protocol {
        exp.eval.protocol = p;
    }
    let report = pool(workers)?.install(|| evaluate(&params, &store.val, &exp))?;
    let mut json = serde_json::to_value(&report)?;
    json["protocol"] = serde_json::to_value(exp.eval.protocol)?;
    json["model"] = exp.name().into();
    let text = serde_json::to_string_pretty(&json)?;
    if let Some(path) = out {
        write_file(path, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn ablate(config: &Path, grid: &str, out: &Path, overrides: &TrainOverrides) -> Result<()> {
    let points = parse_grid(grid)?;
    let (cfg, store) = prepare(config, overrides)?;
    let exp = cfg.experiment(store.num_classes());
    create_dir(out)?;
    let rows = run_ablation::<f32>(&store, &exp, &points, Some(out))?;
    write_file(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    let md = ablation_markdown(&rows);
    write_file(&out.join("ablation.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn viz(manifest: &Path, id: &str, segments: usize, n: usize, cache: Option<PathBuf>, out: &Path) -> Result<()> {
    let video = open_video(manifest, id, segments, cache)?;
    let flows = DiskFlowCache::cache_only(&video.cache_dir);
    let (w, h) = (video.seq.width() as u32, video.seq.height() as u32);
    let mut sheet = RgbImage::new((1 + n as u32) * w, segments as u32 * h);
    for (row, &t) in video.selected.iter().enumerate() {
        let y = row as i64 * h as i64;
        image::imageops::replace(&mut sheet, &video.seq.frames[t], 0, y);
        for (col, (a, b)) in flow_indices(t, n).into_iter().enumerate() {
            let field: FlowField<f32> = if a == b {
                FlowField::zeros(w as usize, h as usize)
            } else {
                dequantize_flow(&*flows.pair_flow(a)?)
            };
            image::imageops::replace(&mut sheet, &flow_to_color(&field), (1 + col as i64) * w as i64, y);
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    sheet.save(out).map_err(|e| MffError::Image {
        path: out.to_path_buf(),
        source: e,
    })?;
    println!("{segments} rows x {} columns -> {}", 1 + n, out.display());
    Ok(())
}
