//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion prints one `PASS`/`FAIL` line even when output is captured.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use image::{Rgb, RgbImage};
use mff_core::augment::AugmentConfig;
use mff_core::dataset_io::{FrameSequence, GlyphClass, GlyphConfig, GlyphMotion, GlyphShape};
use mff_core::mff_builder::{
    assemble_mff, plan_segments_with_offset, precompute_flow_cache, InMemoryFlows, SamplingMode,
};
use mff_core::network::{adapt_first_layer, init_network, predict, ArchConfig, ConvBlock, NetworkParams, Tensor};
use mff_core::optical_flow::{dequantize_flow, estimate_flow, quantize_flow, FlowField, FlowParams, QuantizedFlow};
use mff_core::plane::Plane;
use mff_core::rng::labeled_rng;
use mff_core::trainer::{
    dropout_schedule, eval_inputs, lr_schedule, parse_grid, predict_video, run_ablation, train, EvalProtocol,
    Experiment, Recipe, SamplingConfig, TrainConfig, VideoData, BEST_CHECKPOINT, HISTORY_FILE, LAST_CHECKPOINT,
};
use rand::Rng;

use common::{dir_digest, fourier_texture, glyph_store, gradcheck, mean_interior_epe, random_frame, tiny_glyphs, translated_pair};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn a1_channels() -> Outcome {
    let seq = FrameSequence::new((0..16).map(|i| random_frame(6, 6, i)).collect()).unwrap();
    let flows = InMemoryFlows(
        (0..15)
            .map(|t| QuantizedFlow {
                u: Plane::filled(6, 6, t as u8),
                v: Plane::filled(6, 6, 255 - t as u8),
                scale: 1.0,
            })
            .collect(),
    );
    for n in 0..=11 {
        for t in [0, 7, 15] {
            let c = assemble_mff(&seq, t, n, &flows).map_err(|e| e.to_string())?.channel_count();
            ensure(c == 3 + 2 * n, format!("n={n} t={t}: {c} channels"))?;
        }
    }
    let nine = assemble_mff(&seq, 12, 3, &flows).unwrap().channel_count();
    ensure(nine == 9, format!("n=3 gave {nine}"))?;
    Ok("3+2n channels for n=0..11, n=3 -> 9".into())
}

fn a2_gradients() -> Outcome {
    const SEED: u64 = 10;
    let params = gradcheck::micro_params(SEED);
    let mut worst = 0.0f64;
    let mut total = 0;
    for rates in [None, Some(mff_core::network::DropoutRates { pool: 0.3, fc7: 0.3 })] {
        let report = gradcheck::check(SEED, 50, 1e-3, rates);
        for (t, tensor) in report.iter().zip(params.tensors()) {
            ensure(
                t.checked >= tensor.len().min(50),
                format!("{}: only {} kink-free coordinates", t.name, t.checked),
            )?;
            ensure(t.max_rel < 1e-4, format!("{}: relative error {:.3e}", t.name, t.max_rel))?;
            worst = worst.max(t.max_rel);
            total += t.checked;
        }
    }
    Ok(format!(
        "max relative error {worst:.2e} < 1e-4 over {total} probes, min(50, size) per tensor, h=1e-3, with and without dropout"
    ))
}

fn a3_flow() -> Outcome {
    let params = FlowParams::default();
    let mean_epe = |dx: f64, dy: f64| {
        (0..10)
            .map(|seed| {
                let (prev, next) = translated_pair(64, seed, dx, dy);
                mean_interior_epe(&estimate_flow(&prev, &next, &params).unwrap(), dx, dy, 5)
            })
            .sum::<f64>()
            / 10.0
    };
    let small = mean_epe(1.5, -0.75);
    let large = mean_epe(6.0, 0.0);
    let still = (0..10)
        .map(|seed| {
            let tex = fourier_texture(48, seed);
            let img = Plane::from_fn(48, 40, |x, y| tex(x as f64, y as f64));
            estimate_flow(&img, &img, &params).unwrap().max_abs()
        })
        .fold(0.0f64, f64::max);
    ensure(small < 0.25, format!("(1.5, -0.75) EPE {small:.4}"))?;
    ensure(large < 0.5, format!("(6, 0) EPE {large:.4}"))?;
    ensure(still < 1e-3, format!("identical frames max |flow| {still:.2e}"))?;
    Ok(format!(
        "EPE (1.5,-0.75) {small:.4} < 0.25, (6,0) {large:.4} < 0.5, identical {still:.1e} < 1e-3"
    ))
}

fn a4_quantization() -> Outcome {
    let mut rng = labeled_rng(4, "fields", &[]);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (w, h) = (rng.random_range(1..24usize), rng.random_range(1..24usize));
        let amp = rng.random_range(0.01..20.0);
        let mut plane = || Plane::from_fn(w, h, |_, _| rng.random_range(-amp..amp));
        let f: FlowField<f64> = FlowField::from_planes(plane(), plane()).unwrap();
        let q = quantize_flow(&f).map_err(|e| e.to_string())?;
        let back: FlowField<f64> = dequantize_flow(&q);
        let bound = q.scale as f64 / 255.0 + 1e-6;
        for (a, b) in f.u.data().iter().chain(f.v.data()).zip(back.u.data().iter().chain(back.v.data())) {
            ensure((a - b).abs() <= bound, format!("field {i}: |{a} - {b}| > {bound}"))?;
            worst = worst.max((a - b).abs() / bound);
        }
    }
    let zero = quantize_flow(&FlowField::<f64>::zeros(9, 7)).unwrap();
    ensure(
        zero.u.data().iter().chain(zero.v.data()).all(|&c| c == 128),
        "zero field has codes other than 128",
    )?;
    Ok(format!("100 fields within M/255 + 1e-6 (worst {:.6} of bound), zero field -> 128", worst))
}

fn a5_trend() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = GlyphConfig {
        videos_per_class: 70,
        val_per_class: 20,
        ..GlyphConfig::default()
    };
    let (_, store) = glyph_store(tmp.path(), &cfg, 7);
    ensure(store.train.len() == 200 && store.val.len() == 80, "expected 50 train + 20 val per class")?;
    let base = Experiment {
        arch: ArchConfig::for_mff(0, 1, 4),
        train: TrainConfig {
            epochs: 30,
            seed: 1,
            ..TrainConfig::default()
        },
        ..Experiment::default()
    };
    let grid = parse_grid("N=1;n=0,1,2,3|N=8;n=3").unwrap();
    let rows = run_ablation::<f32>(&store, &base, &grid, None).map_err(|e| e.to_string())?;
    let acc = |segments: usize, n: usize| {
        rows.iter()
            .find(|r| r.segments == segments && r.flow_frames == n)
            .map(|r| r.top1)
            .unwrap()
    };
    let table: Vec<String> = rows.iter().map(|r| format!("{} {:.1}%", r.name, 100.0 * r.top1)).collect();
    let table = table.join(", ");
    ensure(acc(1, 0) <= 0.40, format!("0f1c too high: {table}"))?;
    ensure(acc(1, 3) >= 0.90, format!("1-MFFs-3f1c below 90%: {table}"))?;
    ensure(acc(8, 3) >= 0.95, format!("8-MFFs-3f1c below 95%: {table}"))?;
    for n in 1..=3 {
        ensure(acc(1, n) >= acc(1, n - 1) - 0.03, format!("drop from n={} to n={n}: {table}", n - 1))?;
    }
    Ok(table)
}

fn a6_schedules() -> Outcome {
    let jester = TrainConfig::recipe(Recipe::Jester);
    let chalearn = TrainConfig::recipe(Recipe::Chalearn);
    ensure(lr_schedule(10, &jester) == 1e-3, "jester epoch 10")?;
    ensure(lr_schedule(30, &jester) == 1e-4, "jester epoch 30")?;
    ensure(lr_schedule(44, &jester) == 1e-5, "jester epoch 44")?;
    ensure(lr_schedule(35, &chalearn) == 6.25e-5, "chalearn epoch 35")?;
    for e in 0..jester.epochs {
        let d = dropout_schedule(e, &jester);
        ensure(d.pool == 0.8 && d.fc7 == 0.0, format!("jester dropout at {e}"))?;
    }
    for (recipe, first, second) in [(Recipe::Chalearn, 15, 30), (Recipe::Nvgesture, 40, 80)] {
        let cfg = TrainConfig::recipe(recipe);
        for (epoch, p) in [(0, 0.5), (first - 1, 0.5), (first, 0.8), (second - 1, 0.8), (second, 0.9)] {
            let d = dropout_schedule(epoch, &cfg);
            ensure(d.pool == p && d.fc7 == p, format!("{recipe:?} dropout at epoch {epoch}"))?;
        }
    }
    Ok("jester 1e-3/1e-4/1e-5 at 10/30/44, chalearn 6.25e-5 at 35, dropout stages at 15/30 and 40/80".into())
}

fn a7_adaptation() -> Outcome {
    let mut rng = labeled_rng(7, "w", &[]);
    let data: Vec<f64> = (0..16 * 3 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rgb = Tensor::from_vec(&[16, 3, 3, 3], data).unwrap();
    for n in [1, 3, 5] {
        let c = 3 + 2 * n;
        let out = adapt_first_layer(&rgb, n).map_err(|e| e.to_string())?;
        ensure(out.shape() == [16, c, 3, 3], format!("shape {:?}", out.shape()))?;
        for o in 0..16 {
            for j in 0..9 {
                let src = |k: usize| rgb.data()[(o * 3 + k) * 9 + j];
                let mean = (src(0) + src(1) + src(2)) / 3.0;
                for k in 0..c {
                    let want = if k < 3 { src(k) } else { mean };
                    ensure(out.data()[(o * c + k) * 9 + j] == want, format!("n={n} out {o} channel {k}"))?;
                }
            }
        }
    }
    Ok("flow-channel slices equal the RGB mean exactly for n=1,3,5".into())
}

fn small_experiment(flow_frames: usize, segments: usize, classes: usize, train: TrainConfig) -> Experiment {
    Experiment {
        sampling: SamplingConfig { segments, flow_frames },
        arch: ArchConfig {
            conv_blocks: vec![
                ConvBlock { out_channels: 8, kernel: 3, pool: true },
                ConvBlock { out_channels: 16, kernel: 3, pool: true },
            ],
            fc6_units: 32,
            fc7_units: 32,
            ..ArchConfig::for_mff(flow_frames, segments, classes)
        },
        augment: AugmentConfig::default(),
        train,
        ..Experiment::default()
    }
}

fn a8_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = GlyphConfig {
        classes: vec![
            GlyphClass::new(GlyphShape::Square, GlyphMotion::Left),
            GlyphClass::new(GlyphShape::Square, GlyphMotion::Right),
        ],
        ..tiny_glyphs(5, 1)
    };
    let (manifest, store) = glyph_store(tmp.path(), &cfg, 3);
    let run = |tag: &str| {
        let exp = small_experiment(
            2,
            2,
            2,
            TrainConfig {
                epochs: 3,
                batch_size: 3,
                workers: 1,
                seed: 5,
                ..TrainConfig::default()
            },
        );
        let dir = tmp.path().join(tag);
        train::<f32>(&store, &exp, Some(&dir)).unwrap();
        let csv = std::fs::read_to_string(dir.join(HISTORY_FILE)).unwrap();
        let columns: Vec<String> = csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect();
        (
            columns,
            std::fs::read(dir.join(LAST_CHECKPOINT)).unwrap(),
            std::fs::read(dir.join(BEST_CHECKPOINT)).unwrap(),
        )
    };
    let (a, b) = (run("a"), run("b"));
    ensure(a.0 == b.0, "history differs between identical runs")?;
    ensure(a.1 == b.1 && a.2 == b.2, "checkpoints differ between identical runs")?;

    let seq = mff_core::dataset_io::load_frame_sequence(&manifest, &manifest.entries[0]).unwrap();
    let caches: Vec<_> = [1, 4]
        .into_iter()
        .map(|threads| {
            let dir = tmp.path().join(format!("cache{threads}"));
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| precompute_flow_cache(&seq, &FlowParams::default(), &dir)).unwrap();
            dir_digest(&dir)
        })
        .collect();
    ensure(caches[0] == caches[1], "flow caches differ between 1 and 4 threads")?;
    Ok(format!(
        "repeated --workers 1 run: history (minus seconds) and checkpoints identical; {} cache files identical at 1 and 4 threads",
        caches[0].len()
    ))
}

/// Frame `t` has red value `t`; flow pair `t` has u code `3t`.
fn indexed_video(frames: usize, size: u32) -> VideoData {
    let seq: Vec<RgbImage> = (0..frames)
        .map(|t| RgbImage::from_fn(size, size, |x, y| Rgb([t as u8, (x * 4) as u8, (y * 4) as u8])))
        .collect();
    let flows = (0..frames - 1)
        .map(|t| QuantizedFlow {
            u: Plane::filled(size as usize, size as usize, (t * 3 % 256) as u8),
            v: Plane::filled(size as usize, size as usize, 255 - (t * 3 % 256) as u8),
            scale: 1.0,
        })
        .collect();
    VideoData {
        id: "fixture".into(),
        label: 1,
        frames: FrameSequence::new(seq).unwrap(),
        flows: InMemoryFlows(flows),
    }
}

fn a9_protocols() -> Outcome {
    let video = indexed_video(20, 40);
    let mut exp = small_experiment(1, 2, 3, TrainConfig::default());
    exp.eval.protocol = EvalProtocol::FiveCrop;
    let params: NetworkParams<f64> = init_network(&exp.arch, 2).unwrap();
    let views = eval_inputs::<f64>(&video, &exp).unwrap();
    ensure(views.len() == 5, format!("{} views", views.len()))?;
    let singles: Vec<Vec<f64>> = views.iter().map(|v| predict(&params, v).unwrap()).collect();
    let mean = predict_video(&params, &video, &exp).unwrap();
    let mut gap = 0.0f64;
    for c in 0..3 {
        let m = singles.iter().map(|p| p[c]).sum::<f64>() / 5.0;
        gap = gap.max((m - mean[c]).abs());
    }
    ensure(gap < 1e-6, format!("five-crop mean off by {gap:.2e}"))?;

    let middles = [5, 15, 25, 35, 45, 55, 65, 75];
    let plan = plan_segments_with_offset(80, 8, 0.5, SamplingMode::Eval);
    ensure(plan.selected == middles, format!("plan {:?}", plan.selected))?;
    let video = indexed_video(80, 32);
    let mut exp = small_experiment(1, 8, 3, TrainConfig::default());
    exp.eval.protocol = EvalProtocol::Center;
    let inputs = eval_inputs::<f64>(&video, &exp).unwrap();
    ensure(inputs.len() == 1, "center protocol should give one view")?;
    let x = &inputs[0];
    for (s, t) in middles.into_iter().enumerate() {
        let code = (x.segment(s)[0] + 0.5) * 255.0;
        ensure((code - t as f64).abs() < 1e-9, format!("segment {s} used frame {code}"))?;
    }
    Ok(format!("five-crop mean gap {gap:.1e} < 1e-6; center picks frames {middles:?} for F=80, N=8"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("A1", a1_channels),
        ("A2", a2_gradients),
        ("A3", a3_flow),
        ("A4", a4_quantization),
        ("A5", a5_trend),
        ("A6", a6_schedules),
        ("A7", a7_adaptation),
        ("A8", a8_determinism),
        ("A9", a9_protocols),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('A')).collect();
    let mut failed = 0;
    for (id, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
