#![allow(dead_code)]

use std::path::Path;

use image::RgbImage;
use mff_core::dataset_io::{frame_file_name, GlyphConfig};
use mff_core::optical_flow::FlowField;
use mff_core::plane::Plane;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth periodic texture on a `size`×`size` torus, values in [0.1, 0.9].
/// Returns a closure that can be evaluated at sub-pixel positions, so shifted
/// copies are exact.
pub fn fourier_texture(size: usize, seed: u64) -> impl Fn(f64, f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..12)
        .map(|_| {
            let kx = rng.random_range(-4i32..=4) as f64;
            let ky = rng.random_range(1i32..=4) as f64;
            (kx, ky, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.3..1.0))
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.3).sum();
    let n = size as f64;
    move |x, y| {
        let s: f64 = waves
            .iter()
            .map(|&(kx, ky, ph, a)| a * (std::f64::consts::TAU * (kx * x + ky * y) / n + ph).sin())
            .sum();
        0.5 + 0.4 * s / total
    }
}

/// `(prev, next)` where `next` is `prev` translated by `(dx, dy)` with wrap-around.
pub fn translated_pair(size: usize, seed: u64, dx: f64, dy: f64) -> (Plane<f64>, Plane<f64>) {
    let tex = fourier_texture(size, seed);
    let prev = Plane::from_fn(size, size, |x, y| tex(x as f64, y as f64));
    let next = Plane::from_fn(size, size, |x, y| tex(x as f64 - dx, y as f64 - dy));
    (prev, next)
}

/// Mean endpoint error against a constant ground truth, ignoring a border
/// of `margin` pixels.
pub fn mean_interior_epe(flow: &FlowField<f64>, dx: f64, dy: f64, margin: usize) -> f64 {
    let (w, h) = (flow.width(), flow.height());
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in margin..h - margin {
        for x in margin..w - margin {
            let eu = flow.u.get(x, y) - dx;
            let ev = flow.v.get(x, y) - dy;
            sum += (eu * eu + ev * ev).sqrt();
            count += 1;
        }
    }
    sum / count as f64
}

/// Small four-class glyph dataset for fast tests.
pub fn tiny_glyphs(videos_per_class: usize, val_per_class: usize) -> GlyphConfig {
    GlyphConfig {
        image_size: 32,
        frames_per_video: [8, 12],
        glyph_size: 8.0,
        videos_per_class,
        val_per_class,
        ..GlyphConfig::default()
    }
}

pub fn random_frame(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
}

pub fn write_frames(dir: &Path, frames: &[RgbImage]) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, f) in frames.iter().enumerate() {
        f.save(dir.join(frame_file_name(i))).unwrap();
    }
}

/// SHA-free content digest for byte comparison of directory trees.
pub fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub mod gradcheck {
    use mff_core::network::layers::{log_softmax, softmax};
    use mff_core::network::{
        draw_masks, init_network, item_backward, item_forward, loss_and_grad, ArchConfig, ConvBlock, DropoutMasks,
        DropoutRates, NetInput, NetworkParams,
    };
    use mff_core::rng::labeled_rng;
    use rand::seq::SliceRandom;
    use rand::Rng;

    /// Two conv blocks, N = 2, n = 1, S = 16, C = 3.
    pub fn micro_arch() -> ArchConfig {
        ArchConfig {
            input_size: 16,
            in_channels: 5,
            conv_blocks: vec![
                ConvBlock { out_channels: 4, kernel: 3, pool: true },
                ConvBlock { out_channels: 6, kernel: 3, pool: false },
            ],
            segments: 2,
            fc6_units: 12,
            fc7_units: 10,
            num_classes: 3,
        }
    }

    /// He init plus random biases. Conv biases are positive so that most
    /// conv pre-activations sit away from the ReLU kink; otherwise a 1e-3
    /// probe on a conv bias moves ~1000 units at once and almost always
    /// crosses one.
    pub fn micro_params(seed: u64) -> NetworkParams<f64> {
        let arch = micro_arch();
        let mut p: NetworkParams<f64> = init_network(&arch, seed).unwrap();
        let mut rng = labeled_rng(seed, "bias", &[]);
        let names = NetworkParams::<f64>::tensor_names(&arch);
        for (name, t) in names.iter().zip(p.tensors_mut()) {
            let range = match name.as_str() {
                n if n.starts_with("conv") && n.ends_with(".bias") => 0.5..1.0,
                n if n.ends_with(".bias") => -0.1..0.1,
                _ => continue,
            };
            for v in t.data_mut() {
                *v = rng.random_range(range.clone());
            }
        }
        p
    }

    pub fn micro_batch(seed: u64) -> (Vec<NetInput<f64>>, Vec<usize>) {
        let arch = micro_arch();
        let mut rng = labeled_rng(seed, "batch", &[]);
        let inputs = (0..2)
            .map(|_| {
                let mut x = NetInput::zeros(arch.segments, arch.in_channels, arch.input_size);
                for v in &mut x.data {
                    *v = rng.random_range(-0.5..0.5);
                }
                x
            })
            .collect();
        (inputs, vec![0, 2])
    }

    pub struct TensorCheck {
        pub name: String,
        pub checked: usize,
        /// Sampled coordinates rejected because a ReLU or pool decision
        /// changed within `±h`, where central differences are not valid.
        pub kinked: usize,
        pub max_rel: f64,
    }

    /// `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps coordinates whose
    /// true gradient is ~0 from turning round-off into huge ratios.
    pub fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    struct Fixture {
        inputs: Vec<NetInput<f64>>,
        labels: Vec<usize>,
        masks: Vec<Option<DropoutMasks<f64>>>,
    }

    impl Fixture {
        fn eval(&self, p: &NetworkParams<f64>) -> (f64, Vec<u32>) {
            let mut loss = 0.0;
            let mut pattern = Vec::new();
            for ((x, &y), m) in self.inputs.iter().zip(&self.labels).zip(&self.masks) {
                let cache = item_forward(p, x, m.clone());
                loss -= log_softmax(&cache.logits)[y];
                pattern.extend(cache.activation_pattern());
            }
            (loss / self.inputs.len() as f64, pattern)
        }

        fn grads(&self, p: &NetworkParams<f64>) -> NetworkParams<f64> {
            let inv_b = 1.0 / self.inputs.len() as f64;
            let mut g = NetworkParams::zeros(&p.arch);
            for ((x, &y), m) in self.inputs.iter().zip(&self.labels).zip(&self.masks) {
                let cache = item_forward(p, x, m.clone());
                let mut d: Vec<f64> = softmax(&cache.logits).iter().map(|q| q * inv_b).collect();
                d[y] -= inv_b;
                item_backward(p, &cache, &d, &mut g, None);
            }
            g
        }
    }

    /// Compares backprop against central differences on `coords` random
    /// coordinates of every tensor (all of them for smaller tensors).
    /// Coordinates whose `±h` probes change the activation pattern are
    /// replaced by fresh draws.
    pub fn check(seed: u64, coords: usize, h: f64, rates: Option<DropoutRates>) -> Vec<TensorCheck> {
        let params = micro_params(seed);
        let (inputs, labels) = micro_batch(seed);
        let masks = (0..inputs.len() as u64)
            .map(|i| rates.map(|r| draw_masks(&params.arch, r, &mut labeled_rng(seed, "masks", &[i]))))
            .collect();
        let fx = Fixture { inputs, labels, masks };
        let analytic = if rates.is_none() {
            let out = loss_and_grad(&params, &fx.inputs, &fx.labels, None, &mut labeled_rng(0, "unused", &[])).unwrap();
            out.grads
        } else {
            fx.grads(&params)
        };
        let (_, base_pattern) = fx.eval(&params);
        let names = NetworkParams::<f64>::tensor_names(&params.arch);
        let mut pick = labeled_rng(seed, "coords", &[]);
        let mut out = Vec::new();
        for (ti, name) in names.iter().enumerate() {
            let len = params.tensors()[ti].len();
            let mut candidates: Vec<usize> = (0..len).collect();
            candidates.shuffle(&mut pick);
            let mut checked = 0;
            let mut kinked = 0;
            let mut max_rel = 0.0f64;
            for &i in &candidates {
                if checked == coords {
                    break;
                }
                let mut p = params.clone();
                p.tensors_mut()[ti].data_mut()[i] += h;
                let (up, up_pattern) = fx.eval(&p);
                p.tensors_mut()[ti].data_mut()[i] -= 2.0 * h;
                let (down, down_pattern) = fx.eval(&p);
                if up_pattern != base_pattern || down_pattern != base_pattern {
                    kinked += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * h);
                max_rel = max_rel.max(rel_err(analytic.tensors()[ti].data()[i], numeric));
                checked += 1;
            }
            out.push(TensorCheck {
                name: name.clone(),
                checked,
                kinked,
                max_rel,
            });
        }
        out
    }
}

/// Generates a glyph dataset under `root`, precomputes its flow cache in
/// `root/flow_cache` and loads everything into memory.
pub fn glyph_store(
    root: &Path,
    cfg: &GlyphConfig,
    seed: u64,
) -> (mff_core::dataset_io::DatasetManifest, mff_core::trainer::VideoStore) {
    use mff_core::dataset_io::{generate_moving_glyphs, load_frame_sequence};
    use mff_core::mff_builder::{precompute_flow_cache, video_cache_dir};
    use mff_core::optical_flow::FlowParams;
    use rayon::prelude::*;

    let manifest = generate_moving_glyphs(cfg, seed, root).unwrap();
    let cache = root.join("flow_cache");
    let params = FlowParams::default();
    manifest.entries.par_iter().for_each(|e| {
        let seq = load_frame_sequence(&manifest, e).unwrap();
        precompute_flow_cache(&seq, &params, &video_cache_dir(&cache, &e.id)).unwrap();
    });
    let store = mff_core::trainer::VideoStore::load(&manifest, &cache).unwrap();
    (manifest, store)
}
