//! Commands behind the `maskcot` binary.
//!
//! Every command returns a [`maskcot::Result`]; the binary maps the error
//! class onto its exit code.

pub mod render;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use maskcot::data::format::{write_layout, write_record, GRID_SUFFIX, MASK_SUFFIX};
use maskcot::data::{build_manifest, make_toy_dataset, Dataset, DatasetManifest, Layout, ToyGenConfig};
use maskcot::model::{FrameShape, Model};
use maskcot::nn::ParamStore;
use maskcot::train::eval::generate;
use maskcot::train::{evaluate, Checkpoint, EvalConfig, EvalReport, Seeds, TrainConfig, Trainer};
use maskcot::{Error, ErrorKind, Result};
use rayon::prelude::*;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "MASKCOT_THREADS";
/// Sequences generated per batch by `sample`.
pub const SAMPLE_BATCH: usize = 32;

/// Process exit code for an error class. Usage errors reported by the
/// argument parser also exit with 2.
pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

/// Sizes the global worker pool from `MASKCOT_THREADS`. Results never depend
/// on the thread count: parallel work is split into fixed chunks whose
/// outcomes are combined in index order.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Removes record files named `<prefix>*` so a rerun into the same
/// directory cannot pick up leftovers.
fn clear_records(dir: &Path, prefix: &str) -> Result<()> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(());
    };
    for entry in entries {
        let path = entry.map_err(io_err(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with(prefix) && (name.ends_with(GRID_SUFFIX) || name.ends_with(MASK_SUFFIX)) {
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// One line describing a dataset.
pub fn manifest_summary(m: &DatasetManifest) -> String {
    let l = &m.layout;
    format!(
        "{} windows of {} frames, {} channel(s) × {}×{}, classes [{}], {} file(s)",
        m.record_count,
        m.window_length,
        l.channels,
        l.height,
        l.width,
        l.class_names.join(", "),
        m.files.len()
    )
}

/// Writes a toy dataset. `config` defaults to [`ToyGenConfig::default`];
/// `seed` overrides its seed.
pub fn gen_toy(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<DatasetManifest> {
    let mut cfg: ToyGenConfig = match config {
        Some(p) => read_json(p)?,
        None => ToyGenConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    clear_records(out, "toy_")?;
    make_toy_dataset(&cfg, out)
}

/// Seeds derived from a single `--seed`.
pub fn seeds_from(seed: u64) -> Seeds {
    Seeds {
        init: seed,
        shuffle: seed.wrapping_add(1),
        noise: seed.wrapping_add(2),
    }
}

/// Loads a training config and applies command-line overrides.
pub fn train_config(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seeds = seeds_from(s);
    }
    if let Some(o) = out {
        cfg.output = o.to_path_buf();
    }
    Ok(cfg)
}

/// Trains to completion, reporting one line per epoch to `progress`.
pub fn train(cfg: TrainConfig, resume: Option<&Path>, progress: &mut dyn Write) -> Result<Checkpoint> {
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, p)?,
        None => Trainer::new(cfg)?,
    };
    let total = trainer.config.epochs;
    let ckpt = trainer.run(|s| {
        let _ = writeln!(
            progress,
            "epoch {}/{total} step {} g {:.5} d {:.5} div {:.5} pen {:.5} {:.1}s",
            s.epoch, s.step, s.generator_loss, s.discriminator_loss, s.divergence, s.penalty, s.wall_time_s
        );
    })?;
    let _ = writeln!(progress, "wrote {}", trainer.final_checkpoint_path().display());
    Ok(ckpt)
}

/// Rebuilds the trained model stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(Checkpoint, ParamStore, Model)> {
    let ckpt = Checkpoint::load(path)?;
    let (mut store, model) = Model::build(&ckpt.config.model, ckpt.frame, ckpt.config.seeds.init)?;
    ckpt.restore_params(&mut store)?;
    Ok((ckpt, store, model))
}

fn check_layout(frame: FrameShape, layout: &Layout) -> Result<()> {
    if layout.classes() != frame.classes || layout.height != frame.height || layout.width != frame.width {
        return Err(Error::Config(format!(
            "masks are {}×{}×{} (K×H×W), the checkpoint expects {}×{}×{}",
            layout.classes(),
            layout.height,
            layout.width,
            frame.classes,
            frame.height,
            frame.width
        )));
    }
    Ok(())
}

/// Generates `count` sequences conditioned on the first `count` mask windows
/// of `masks`, in physical units, and writes them as a dataset with its own
/// manifest. Noise for batch `b` of [`SAMPLE_BATCH`] is stream `b` of `seed`.
pub fn sample(checkpoint: &Path, masks: &Path, count: usize, seed: u64, out: &Path) -> Result<DatasetManifest> {
    let (ckpt, store, model) = load_model(checkpoint)?;
    let source = DatasetManifest::load(masks)?;
    check_layout(ckpt.frame, &source.layout)?;
    if count == 0 || count > source.record_count {
        return Err(Error::Config(format!(
            "count must lie in 1..={}, got {count}",
            source.record_count
        )));
    }
    let t = source.window_length;
    let noise = model.generator.spec.noise;
    let source = Dataset::new(source);
    let chunks: Vec<usize> = (0..count.div_ceil(SAMPLE_BATCH)).collect();
    let generated = chunks
        .par_iter()
        .map(|&b| {
            let idx: Vec<usize> = (b * SAMPLE_BATCH..((b + 1) * SAMPLE_BATCH).min(count)).collect();
            let batch = source.gather(&idx)?;
            let z = noise.sample(idx.len(), t, seed, b as u64);
            let y = generate(&store, &model, &batch.masks, &z)?;
            Ok((y, batch.masks))
        })
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(out).map_err(io_err(out))?;
    clear_records(out, "sample_")?;
    let layout = Layout {
        channels: ckpt.frame.channels,
        ..source.manifest.layout.clone()
    };
    write_layout(out, &layout)?;
    let mut i = 0;
    for (y, m) in &generated {
        let n = y.shape()[0];
        let (gi, mi) = (y.len() / n, m.len() / n);
        for j in 0..n {
            let mut grid = y.data()[j * gi..(j + 1) * gi].to_vec();
            denormalize(&ckpt, &layout, &mut grid);
            write_record(out, &format!("sample_{i:05}"), &grid, &m.data()[j * mi..(j + 1) * mi])?;
            i += 1;
        }
    }
    build_manifest(out, t, t)
}

/// Maps model output back to the training data's units.
fn denormalize(ckpt: &Checkpoint, layout: &Layout, grid: &mut [f32]) {
    let plane = layout.height * layout.width;
    for (k, chunk) in grid.chunks_mut(plane).enumerate() {
        let s = &ckpt.stats[k % layout.channels];
        for v in chunk {
            *v = (*v as f64 * s.std + s.mean) as f32;
        }
    }
}

/// Evaluation settings from an optional JSON file plus a seed override.
pub fn eval_config(path: Option<&Path>, seed: Option<u64>) -> Result<EvalConfig> {
    let mut cfg = match path {
        Some(p) => read_json(p)?,
        None => EvalConfig::default(),
    };
    if let Some(s) = seed {
        cfg.noise_seed = s;
    }
    Ok(cfg)
}

/// Scores a checkpoint on a held-out dataset, normalized with the
/// checkpoint's training statistics.
pub fn eval(checkpoint: &Path, held_out: &Path, cfg: &EvalConfig) -> Result<EvalReport> {
    let (ckpt, store, model) = load_model(checkpoint)?;
    let mut manifest = DatasetManifest::load(held_out)?;
    check_layout(ckpt.frame, &manifest.layout)?;
    if manifest.layout.channels != ckpt.frame.channels {
        return Err(Error::Config(format!(
            "held-out data have {} channels, the checkpoint {}",
            manifest.layout.channels, ckpt.frame.channels
        )));
    }
    manifest.stats = ckpt.stats.clone();
    let data = Dataset::preloaded(manifest)?;
    evaluate(&store, &model, &data, cfg)
}

/// Renders a montage; `out` overrides the spec's output path.
pub fn render_cmd(spec: &Path, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let mut spec = render::RenderSpec::load(spec)?;
    if let Some(o) = out {
        spec.output = o.to_path_buf();
    }
    render::write(&spec)
}
