//! Manifest construction over a raw directory and window access.

use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::format::{
    decode_grid, decode_mask, read_layout, ChannelStats, DatasetManifest, SourceFile, WindowRef,
    FORMAT_VERSION, GRID_SUFFIX, MASK_SUFFIX,
};

/// A T×C×H×W weather tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSequence {
    pub values: Tensor,
    pub time_step_hours: f64,
}

/// A T×K×H×W binary event mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EventMaskSequence {
    pub values: Tensor,
    pub class_names: Vec<String>,
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn file_len(path: &Path) -> Result<u64> {
    Ok(fs::metadata(path).map_err(|e| Error::io(path, e))?.len())
}

/// Scans `raw_dir` for record pairs, computes per-channel statistics over
/// every frame and enumerates windows. Windows never straddle two files.
/// The result is also written to `raw_dir/manifest.json`.
pub fn build_manifest(raw_dir: &Path, window_length: usize, stride: usize) -> Result<DatasetManifest> {
    if window_length == 0 || stride == 0 {
        return Err(Error::config("window length and stride must be positive"));
    }
    let layout = read_layout(raw_dir)?;
    let entries = fs::read_dir(raw_dir).map_err(|e| Error::io(raw_dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(raw_dir, e))?;
        let name = entry.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(GRID_SUFFIX)) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::format(raw_dir, "no *.grid.f32 records found"));
    }

    let gframe = layout.grid_frame_len();
    let mframe = layout.mask_frame_len();
    let mut files = Vec::with_capacity(ids.len());
    for id in ids {
        let gp = raw_dir.join(format!("{id}{GRID_SUFFIX}"));
        let mp = raw_dir.join(format!("{id}{MASK_SUFFIX}"));
        let glen = file_len(&gp)? as usize;
        if glen == 0 || !glen.is_multiple_of(4 * gframe) {
            return Err(Error::format(
                &gp,
                format!("{glen} bytes is not a whole number of {}×{}×{} frames", layout.channels, layout.height, layout.width),
            ));
        }
        let frames = glen / (4 * gframe);
        if !mp.exists() {
            return Err(Error::format(&mp, "mask file missing for grid record"));
        }
        let mlen = file_len(&mp)? as usize;
        if mlen != frames * mframe {
            return Err(Error::format(
                &mp,
                format!("mask holds {mlen} bytes, grid implies {frames} frames of {mframe}"),
            ));
        }
        decode_mask(&read_all(&mp)?, &mp)?;
        files.push(SourceFile { id, frames });
    }

    // Two passes in f64: means, then squared deviations.
    let c_count = layout.channels;
    let plane = layout.height * layout.width;
    let mut sums = vec![0f64; c_count];
    let mut count = 0usize;
    for f in &files {
        let gp = raw_dir.join(format!("{}{GRID_SUFFIX}", f.id));
        let g = decode_grid(&read_all(&gp)?, &gp)?;
        for frame in g.chunks_exact(gframe) {
            for (c, s) in sums.iter_mut().enumerate() {
                *s += frame[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        count += f.frames * plane;
    }
    let means: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0f64; c_count];
    for f in &files {
        let gp = raw_dir.join(format!("{}{GRID_SUFFIX}", f.id));
        let g = decode_grid(&read_all(&gp)?, &gp)?;
        for frame in g.chunks_exact(gframe) {
            for (c, s) in sq.iter_mut().enumerate() {
                *s += frame[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&v| (v as f64 - means[c]).powi(2))
                    .sum::<f64>();
            }
        }
    }
    let mut stats = Vec::with_capacity(c_count);
    for c in 0..c_count {
        let std = (sq[c] / count as f64).sqrt();
        if !(std > 0.0) {
            return Err(Error::Degenerate(format!("channel {c} has zero variance")));
        }
        stats.push(ChannelStats { mean: means[c], std });
    }

    let mut windows = Vec::new();
    for (fi, f) in files.iter().enumerate() {
        if f.frames >= window_length {
            let n = (f.frames - window_length) / stride + 1;
            windows.extend((0..n).map(|k| WindowRef {
                file: fi,
                start: k * stride,
            }));
        }
    }
    if windows.is_empty() {
        return Err(Error::Degenerate(format!(
            "no record has the {window_length} frames a window needs"
        )));
    }

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        layout,
        window_length,
        stride,
        stats,
        files,
        record_count: windows.len(),
        windows,
        root: raw_dir.to_path_buf(),
    };
    manifest.save(raw_dir)?;
    Ok(manifest)
}

fn read_range(path: &Path, expected_len: u64, offset: u64, len: usize) -> Result<Vec<u8>> {
    let actual = file_len(path)?;
    if actual != expected_len {
        return Err(Error::integrity(
            path,
            format!("expected {expected_len} bytes, found {actual}"),
        ));
    }
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    f.seek(SeekFrom::Start(offset)).map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; len];
    f.read_exact(&mut buf).map_err(|e| Error::integrity(path, e.to_string()))?;
    Ok(buf)
}

impl DatasetManifest {
    pub fn normalize(&self, grid: &mut [f32]) {
        self.map_channels(grid, |v, s| ((v as f64 - s.mean) / s.std) as f32);
    }

    pub fn denormalize(&self, grid: &mut [f32]) {
        self.map_channels(grid, |v, s| (v as f64 * s.std + s.mean) as f32);
    }

    /// Applies `f` to a T×C×H×W buffer channel by channel.
    fn map_channels(&self, grid: &mut [f32], f: impl Fn(f32, &ChannelStats) -> f32) {
        let plane = self.layout.height * self.layout.width;
        for (k, chunk) in grid.chunks_mut(plane).enumerate() {
            let s = &self.stats[k % self.layout.channels];
            for v in chunk {
                *v = f(*v, s);
            }
        }
    }
}

/// Loads window `index`: the grid normalized with the manifest statistics
/// and the raw 0/1 mask.
pub fn read_window(manifest: &DatasetManifest, index: usize) -> Result<(GridSequence, EventMaskSequence)> {
    read_window_with(manifest, index, true)
}

/// Like [`read_window`] but leaves the grid in its stored units.
pub fn read_window_raw(manifest: &DatasetManifest, index: usize) -> Result<(GridSequence, EventMaskSequence)> {
    read_window_with(manifest, index, false)
}

fn read_window_with(
    manifest: &DatasetManifest,
    index: usize,
    normalize: bool,
) -> Result<(GridSequence, EventMaskSequence)> {
    let w = *manifest.windows.get(index).ok_or(Error::Range {
        index,
        count: manifest.record_count,
    })?;
    let l = &manifest.layout;
    let t = manifest.window_length;
    let frames = manifest.files[w.file].frames as u64;
    let gframe = l.grid_frame_len();
    let mframe = l.mask_frame_len();

    let gp = manifest.grid_path(w.file);
    let gbytes = read_range(&gp, frames * gframe as u64 * 4, (w.start * gframe * 4) as u64, t * gframe * 4)?;
    let mut grid = decode_grid(&gbytes, &gp)?;
    if normalize {
        manifest.normalize(&mut grid);
    }

    let mp = manifest.mask_path(w.file);
    let mbytes = read_range(&mp, frames * mframe as u64, (w.start * mframe) as u64, t * mframe)?;
    let mask = decode_mask(&mbytes, &mp)?;

    Ok((
        GridSequence {
            values: Tensor::new(vec![t, l.channels, l.height, l.width], grid)?,
            time_step_hours: l.time_step_hours,
        },
        EventMaskSequence {
            values: Tensor::new(vec![t, l.classes(), l.height, l.width], mask)?,
            class_names: l.class_names.clone(),
        },
    ))
}
