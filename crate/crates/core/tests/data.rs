use std::collections::HashSet;
use std::fs;
use std::path::Path;

use maskcot::data::format::{decode_grid, decode_mask, write_layout, write_record};
use maskcot::data::toy::{blob_intensity, render_sequence};
use maskcot::data::{
    batch_iter, build_manifest, make_toy_dataset, read_window, BatchPlan, Dataset, DatasetManifest,
    Layout, ToyGenConfig,
};
use maskcot::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn layout(c: usize, k: usize, h: usize, w: usize) -> Layout {
    Layout {
        channels: c,
        class_names: (0..k).map(|i| format!("class{i}")).collect(),
        height: h,
        width: w,
        time_step_hours: 6.0,
    }
}

/// Writes records of the given frame counts with random grids (channel c
/// offset by 10·c, scaled by c+1) and random masks.
fn raw_dataset(dir: &Path, l: &Layout, frames: &[usize], seed: u64) {
    write_layout(dir, l).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let plane = l.height * l.width;
    for (i, &n) in frames.iter().enumerate() {
        let mut grid = Vec::new();
        for _ in 0..n {
            for c in 0..l.channels {
                for _ in 0..plane {
                    grid.push(10.0 * c as f32 + (c as f32 + 1.0) * r.random_range(-1.0f32..1.0));
                }
            }
        }
        let mask: Vec<f32> = (0..n * l.mask_frame_len()).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        write_record(dir, &format!("rec{i:03}"), &grid, &mask).unwrap();
    }
}

fn days_in_year(y: u32) -> usize {
    let leap = y.is_multiple_of(4) && (!y.is_multiple_of(100) || y.is_multiple_of(400));
    if leap {
        366
    } else {
        365
    }
}

#[test]
fn a_year_of_six_hourly_frames_gives_146_windows() {
    let dir = tempfile::tempdir().unwrap();
    let frames = days_in_year(2004) * 4;
    assert_eq!(frames, 1464);
    raw_dataset(dir.path(), &layout(1, 1, 2, 3), &[frames], 1);
    let m = build_manifest(dir.path(), 10, 10).unwrap();
    assert_eq!(m.record_count, (frames - 10) / 10 + 1);
    assert_eq!(m.record_count, 146);
}

#[test]
fn single_exact_window() {
    let dir = tempfile::tempdir().unwrap();
    raw_dataset(dir.path(), &layout(1, 1, 2, 2), &[10], 2);
    assert_eq!(build_manifest(dir.path(), 10, 1).unwrap().record_count, 1);
}

#[test]
fn full_resolution_layout_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    raw_dataset(dir.path(), &layout(2, 4, 128, 196), &[2], 3);
    let m = build_manifest(dir.path(), 1, 1).unwrap();
    assert_eq!((m.layout.height, m.layout.width, m.layout.classes()), (128, 196, 4));
    let reloaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(reloaded, m);
}

#[test]
fn mismatched_mask_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let l = layout(1, 2, 3, 3);
    raw_dataset(dir.path(), &l, &[4], 4);
    let mp = dir.path().join("rec000.mask.u8");
    let bytes = fs::read(&mp).unwrap();
    fs::write(&mp, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(build_manifest(dir.path(), 2, 1), Err(Error::Format { .. })));
}

#[test]
fn constant_channel_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let l = layout(1, 1, 2, 2);
    write_layout(dir.path(), &l).unwrap();
    write_record(dir.path(), "a", &[3.0; 12], &[0.0; 12]).unwrap();
    assert!(matches!(build_manifest(dir.path(), 2, 1), Err(Error::Degenerate(_))));
}

#[test]
fn first_window_is_the_leading_frames_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let l = layout(2, 1, 2, 2);
    raw_dataset(dir.path(), &l, &[7, 5], 5);
    let m = build_manifest(dir.path(), 3, 2).unwrap();
    // (7−3)/2+1 + (5−3)/2+1
    assert_eq!(m.record_count, 5);
    let (g, mask) = read_window(&m, 0).unwrap();
    let raw = decode_grid(&fs::read(dir.path().join("rec000.grid.f32")).unwrap(), dir.path()).unwrap();
    for (i, v) in g.values.data().iter().enumerate() {
        let c = (i / 4) % 2;
        let want = ((raw[i] as f64 - m.stats[c].mean) / m.stats[c].std) as f32;
        assert_eq!(*v, want);
    }
    let raw_mask = decode_mask(&fs::read(dir.path().join("rec000.mask.u8")).unwrap(), dir.path()).unwrap();
    assert_eq!(mask.values.data(), &raw_mask[..12]);
    assert_eq!(g.values.shape(), &[3, 2, 2, 2]);
    assert!(matches!(read_window(&m, 5), Err(Error::Range { index: 5, count: 5 })));
}

#[test]
fn truncated_record_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    raw_dataset(dir.path(), &layout(1, 1, 2, 2), &[4], 6);
    let m = build_manifest(dir.path(), 2, 2).unwrap();
    let gp = dir.path().join("rec000.grid.f32");
    let bytes = fs::read(&gp).unwrap();
    fs::write(&gp, &bytes[..bytes.len() - 4]).unwrap();
    match read_window(&m, 1) {
        Err(Error::Integrity { path, .. }) => assert_eq!(path, gp),
        other => panic!("expected integrity error, got {other:?}"),
    }
}

#[test]
fn normalized_data_has_zero_mean_and_unit_variance() {
    let dir = tempfile::tempdir().unwrap();
    let l = layout(3, 2, 4, 5);
    raw_dataset(dir.path(), &l, &[6, 9, 3], 7);
    let m = build_manifest(dir.path(), 3, 3).unwrap();
    // Welford accumulation per channel over every frame (windows tile all files)
    let mut acc = vec![(0u64, 0f64, 0f64); 3];
    for i in 0..m.record_count {
        let (g, mask) = read_window(&m, i).unwrap();
        assert!(mask.values.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for (k, v) in g.values.data().iter().enumerate() {
            let a = &mut acc[(k / 20) % 3];
            a.0 += 1;
            let d = *v as f64 - a.1;
            a.1 += d / a.0 as f64;
            a.2 += d * (*v as f64 - a.1);
        }
    }
    for (n, mean, m2) in acc {
        assert_eq!(n, 18 * 20);
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((m2 / n as f64 - 1.0).abs() < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn normalization_round_trips(values in proptest::collection::vec(-1e4f32..1e4, 8), mean in -50.0f64..50.0, std in 0.1f64..30.0) {
        let m = DatasetManifest {
            format_version: 1,
            layout: layout(2, 1, 2, 2),
            window_length: 1,
            stride: 1,
            stats: vec![maskcot::data::ChannelStats { mean, std }, maskcot::data::ChannelStats { mean: -mean, std: 2.0 * std }],
            files: vec![],
            windows: vec![],
            record_count: 0,
            root: Default::default(),
        };
        let mut v = values.clone();
        m.normalize(&mut v);
        m.denormalize(&mut v);
        for (a, b) in v.iter().zip(&values) {
            prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn windows_cover_the_leading_frames(frames in 1usize..60, t in 1usize..12, stride in 1usize..12) {
        prop_assume!(frames >= t && stride <= t);
        let dir = tempfile::tempdir().unwrap();
        raw_dataset(dir.path(), &layout(1, 1, 1, 2), &[frames], 8);
        let m = build_manifest(dir.path(), t, stride).unwrap();
        prop_assert_eq!(m.record_count, (frames - t) / stride + 1);
        let mut covered = HashSet::new();
        for w in &m.windows {
            covered.extend(w.start..w.start + t);
        }
        let end = stride * (m.record_count - 1) + t;
        prop_assert_eq!(covered, (0..end).collect::<HashSet<_>>());
    }
}

fn toy(speed: f64) -> ToyGenConfig {
    ToyGenConfig {
        height: 16,
        width: 16,
        steps: 6,
        classes: 2,
        sequences: 5,
        blob_radius: 3.0,
        blob_speed: speed,
        noise_level: 0.2,
        seed: 42,
    }
}

#[test]
fn toy_generation_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_toy_dataset(&toy(1.3), a.path()).unwrap();
    make_toy_dataset(&toy(1.3), b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 11);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap());
    }
}

#[test]
fn motionless_blobs_give_identical_frames() {
    let cfg = toy(0.0);
    let (grid, mask) = render_sequence(&cfg, 3);
    let (gf, mf) = (256, 512);
    for t in 1..cfg.steps {
        assert_eq!(grid[..gf], grid[t * gf..(t + 1) * gf]);
        assert_eq!(mask[..mf], mask[t * mf..(t + 1) * mf]);
    }
}

/// Pixel count of an independently rendered half-peak disc.
fn rendered_area(cy: f64, cx: f64, r: f64, h: usize, w: usize) -> usize {
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            if (-(2f64.ln()) * d2 / (r * r)).exp() > 0.5 {
                n += 1;
            }
        }
    }
    n
}

#[test]
fn mask_area_is_close_to_the_half_peak_disc() {
    let cfg = ToyGenConfig {
        classes: 1,
        sequences: 20,
        ..toy(1.7)
    };
    let target = std::f64::consts::PI * cfg.blob_radius * cfg.blob_radius;
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let (cy, cx) = (r.random_range(3.0..12.0), r.random_range(3.0..12.0));
        let a = rendered_area(cy, cx, cfg.blob_radius, 16, 16) as f64;
        assert!((a - target).abs() <= 0.2 * target);
    }
    for s in 0..cfg.sequences as u64 {
        let (_, mask) = render_sequence(&cfg, s);
        for frame in mask.chunks(256) {
            let a: f32 = frame.iter().sum();
            assert!((a as f64 - target).abs() <= 0.2 * target, "area {a}");
        }
    }
}

#[test]
fn masked_pixels_are_above_half_peak() {
    let cfg = toy(2.1);
    for s in 0..cfg.sequences as u64 {
        let (grid, mask) = render_sequence(&cfg, s);
        for t in 0..cfg.steps {
            for k in 0..cfg.classes {
                for p in 0..256 {
                    if mask[(t * cfg.classes + k) * 256 + p] == 1.0 {
                        assert!(grid[t * 256 + p] >= 0.5);
                    }
                }
            }
        }
    }
    assert!(blob_intensity(3.0, 0.0, 3.0) - 0.5 < 1e-12);
}

#[test]
fn toy_config_rejects_small_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ToyGenConfig {
        height: 3,
        blob_radius: 1.0,
        ..toy(1.0)
    };
    assert!(matches!(make_toy_dataset(&cfg, dir.path()), Err(Error::Config(_))));
    let cfg = ToyGenConfig {
        blob_radius: 8.0,
        ..toy(1.0)
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn batches_per_epoch_drop_the_remainder() {
    let plan = BatchPlan::new(146, 8, 1).unwrap();
    assert_eq!(plan.batches_per_epoch(), 146 / 8);
    assert_eq!(plan.epoch(0).len(), 18);
    assert!(matches!(BatchPlan::new(7, 8, 0), Err(Error::Config(_))));
}

#[test]
fn epoch_visits_each_window_once_and_is_reproducible() {
    let plan = BatchPlan::new(40, 5, 9).unwrap();
    for e in 0..3 {
        let seen: Vec<usize> = plan.epoch(e).concat();
        let set: HashSet<usize> = seen.iter().copied().collect();
        assert_eq!(seen.len(), 40);
        assert_eq!(set.len(), 40);
        assert_eq!(plan.epoch(e), BatchPlan::new(40, 5, 9).unwrap().epoch(e));
    }
    assert_ne!(plan.epoch(0), plan.epoch(1));
    let other = BatchPlan::new(40, 5, 10).unwrap();
    assert_ne!(plan.permutation(0), other.permutation(0));
}

#[test]
fn batch_iter_stacks_windows() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_toy_dataset(&toy(1.0), dir.path()).unwrap();
    let ds = Dataset::new(m.clone());
    let batches: Vec<_> = batch_iter(&ds, 2, 4, 0).unwrap().collect::<Result<_, _>>().unwrap();
    assert_eq!(batches.len(), 2);
    assert_eq!(batches[0].grids.shape(), &[2, 6, 1, 16, 16]);
    assert_eq!(batches[0].masks.shape(), &[2, 6, 2, 16, 16]);
    let pre = Dataset::preloaded(m).unwrap();
    let again: Vec<_> = batch_iter(&pre, 2, 4, 0).unwrap().collect::<Result<_, _>>().unwrap();
    assert_eq!(batches, again);
    assert!(batch_iter(&ds, 6, 4, 0).is_err());
}
