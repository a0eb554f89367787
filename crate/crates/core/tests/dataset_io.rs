mod common;

use std::fs;

use image::{Rgb, RgbImage};
use mff_core::dataset_io::{
    frame_file_name, generate_moving_glyphs, load_frame_sequence, load_frames_from_dir, load_manifest,
    to_grayscale, DatasetManifest, GlyphConfig, Split,
};
use mff_core::MffError;
use proptest::prelude::*;

use common::{dir_digest, random_frame, write_frames};

fn manifest_text(frame_count: usize) -> String {
    format!(
        "{{\"classes\":[\"a\",\"b\"]}}\n\
         {{\"id\":\"clip_7\",\"frames_dir\":\"frames/clip_7\",\"frame_count\":{frame_count},\"label\":1,\"split\":\"train\"}}\n"
    )
}

#[test]
fn frame_count_mismatch_names_the_entry() {
    let tmp = tempfile::tempdir().unwrap();
    let frames: Vec<_> = (0..10).map(|i| random_frame(8, 8, i)).collect();
    write_frames(&tmp.path().join("frames/clip_7"), &frames);
    let path = tmp.path().join("manifest.jsonl");
    fs::write(&path, manifest_text(12)).unwrap();

    let err = load_manifest(&path).unwrap_err();
    assert!(matches!(&err, MffError::Video { id, .. } if id == "clip_7"), "{err}");
    assert!(err.to_string().contains("clip_7"));

    fs::write(&path, manifest_text(10)).unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.entries.len(), 1);
    let seq = load_frame_sequence(&m, &m.entries[0]).unwrap();
    assert_eq!(seq.len(), 10);
    assert_eq!(seq.frames, frames);
}

#[test]
fn missing_frames_dir_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("manifest.jsonl");
    fs::write(&path, manifest_text(3)).unwrap();
    let err = load_manifest(&path).unwrap_err();
    assert!(err.to_string().contains("clip_7"), "{err}");
}

#[test]
fn loads_24_frame_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let frames: Vec<_> = (0..24).map(|i| random_frame(64, 64, i)).collect();
    write_frames(tmp.path(), &frames);
    let seq = load_frames_from_dir(tmp.path()).unwrap();
    assert_eq!((seq.len(), seq.width(), seq.height()), (24, 64, 64));
}

#[test]
fn mismatched_frame_size_reports_its_index() {
    let tmp = tempfile::tempdir().unwrap();
    let mut frames: Vec<_> = (0..6).map(|i| random_frame(64, 64, i)).collect();
    frames[4] = random_frame(32, 32, 99);
    write_frames(tmp.path(), &frames);
    match load_frames_from_dir(tmp.path()).unwrap_err() {
        MffError::Frame { index, .. } => assert_eq!(index, 4),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn ppm_and_png_decode_to_the_same_pixels() {
    let tmp = tempfile::tempdir().unwrap();
    let frame = random_frame(17, 11, 5);
    let png_dir = tmp.path().join("png");
    let ppm_dir = tmp.path().join("ppm");
    fs::create_dir_all(&png_dir).unwrap();
    fs::create_dir_all(&ppm_dir).unwrap();
    frame.save(png_dir.join("frame_00000.png")).unwrap();
    frame.save(ppm_dir.join("frame_00000.ppm")).unwrap();
    let a = load_frames_from_dir(&png_dir).unwrap();
    let b = load_frames_from_dir(&ppm_dir).unwrap();
    assert_eq!(a.frames[0].as_raw(), b.frames[0].as_raw());
    assert_eq!(a.frames[0].as_raw(), frame.as_raw());
}

#[test]
fn grayscale_of_white_and_red() {
    let white = RgbImage::from_pixel(4, 4, Rgb([255, 255, 255]));
    assert!(to_grayscale::<f64>(&white).data().iter().all(|&v| v == 1.0));
    let red = RgbImage::from_pixel(4, 4, Rgb([255, 0, 0]));
    assert!(to_grayscale::<f64>(&red).data().iter().all(|&v| (v - 0.299).abs() < 1e-12));
}

#[test]
fn glyph_generation_counts_and_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = GlyphConfig {
        videos_per_class: 50,
        val_per_class: 20,
        frames_per_video: [4, 6],
        image_size: 16,
        glyph_size: 5.0,
        ..GlyphConfig::default()
    };
    let m = generate_moving_glyphs(&cfg, 7, tmp.path()).unwrap();
    assert_eq!(m.entries.len(), 200);
    assert_eq!(m.class_names.len(), 4);
    assert_eq!(m.split(Split::Val).count(), 80);
    for label in 0..4 {
        assert_eq!(m.entries.iter().filter(|e| e.label == label).count(), 50);
    }
    let reloaded = load_manifest(&tmp.path().join("manifest.jsonl")).unwrap();
    assert_eq!(reloaded, m);
    let e = &m.entries[17];
    assert!(m.frames_path(e).join(frame_file_name(e.frame_count - 1)).is_file());
}

#[test]
fn glyph_generation_is_byte_deterministic() {
    let cfg = common::tiny_glyphs(3, 1);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_moving_glyphs(&cfg, 11, a.path()).unwrap();
    generate_moving_glyphs(&cfg, 11, b.path()).unwrap();
    assert_eq!(dir_digest(a.path()), dir_digest(b.path()));

    let c = tempfile::tempdir().unwrap();
    generate_moving_glyphs(&cfg, 12, c.path()).unwrap();
    assert_ne!(dir_digest(a.path()), dir_digest(c.path()));
}

/// Mean per-channel intensity histogram of the middle frames of one class.
fn class_histogram(m: &DatasetManifest, label: usize) -> Vec<f64> {
    let mut hist = vec![0.0; 3 * 256];
    let mut total = 0.0;
    for e in m.entries.iter().filter(|e| e.label == label) {
        let seq = load_frame_sequence(m, e).unwrap();
        let mid = &seq.frames[seq.len() / 2];
        for p in mid.pixels() {
            for c in 0..3 {
                hist[c * 256 + p[c] as usize] += 1.0;
            }
            total += 3.0;
        }
    }
    hist.iter().map(|h| h / total).collect()
}

#[test]
fn single_frames_do_not_reveal_the_motion_direction() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = GlyphConfig {
        videos_per_class: 50,
        val_per_class: 20,
        ..GlyphConfig::default()
    };
    let m = generate_moving_glyphs(&cfg, 7, tmp.path()).unwrap();
    let left = m.class_names.iter().position(|n| n == "swipe_left").unwrap();
    let right = m.class_names.iter().position(|n| n == "swipe_right").unwrap();
    let (a, b) = (class_histogram(&m, left), class_histogram(&m, right));
    let l1: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    assert!(l1 < 0.02, "histogram L1 distance {l1}");
}

#[test]
fn invalid_glyph_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = GlyphConfig {
        glyph_size: 200.0,
        ..GlyphConfig::default()
    };
    let err = generate_moving_glyphs(&cfg, 0, tmp.path()).unwrap_err();
    assert!(err.to_string().contains("glyph_size"), "{err}");
}

fn entry_line(i: usize, frames: usize, label: usize, val: bool) -> String {
    format!(
        "{{\"id\":\"v{i}\",\"frames_dir\":\"f/v{i}\",\"frame_count\":{frames},\"label\":{label},\"split\":\"{}\"}}",
        if val { "val" } else { "train" }
    )
}

proptest! {
    #[test]
    fn manifest_text_round_trips(
        classes in 1usize..6,
        rows in proptest::collection::vec((1usize..500, 0usize..6, any::<bool>()), 0..20),
    ) {
        let mut text = format!(
            "{{\"classes\":[{}]}}\n",
            (0..classes).map(|c| format!("\"c{c}\"")).collect::<Vec<_>>().join(",")
        );
        for (i, (frames, label, val)) in rows.iter().enumerate() {
            text.push_str(&entry_line(i, *frames, label % classes, *val));
            text.push('\n');
        }
        let m = DatasetManifest::parse(&text, "m.jsonl".as_ref(), "/data".into()).unwrap();
        prop_assert_eq!(m.to_jsonl(), text.clone());
        let again = DatasetManifest::parse(&m.to_jsonl(), "m.jsonl".as_ref(), "/data".into()).unwrap();
        prop_assert_eq!(again, m);
    }
}
