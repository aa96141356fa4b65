//! Raw record encoding and the JSON manifest.
//!
//! A record `<id>` is two files: `<id>.grid.f32` holding little-endian
//! `f32` values and `<id>.mask.u8` holding one byte per mask pixel, both
//! row-major over (frame, channel, row, column).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GRID_SUFFIX: &str = ".grid.f32";
pub const MASK_SUFFIX: &str = ".mask.u8";

/// Shapes and labels shared by every record of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub channels: usize,
    pub class_names: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub time_step_hours: f64,
}

impl Layout {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn grid_frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn mask_frame_len(&self) -> usize {
        self.classes() * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.class_names.is_empty() {
            return Err(Error::config(format!(
                "layout needs C, K, H, W >= 1 (got C={} K={} H={} W={})",
                self.channels,
                self.class_names.len(),
                self.height,
                self.width
            )));
        }
        if !(self.time_step_hours > 0.0 && self.time_step_hours.is_finite()) {
            return Err(Error::config("time_step_hours must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFile {
    pub id: String,
    pub frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRef {
    pub file: usize,
    pub start: usize,
}

/// Everything needed to address and normalize the windows of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub layout: Layout,
    pub window_length: usize,
    pub stride: usize,
    pub stats: Vec<ChannelStats>,
    pub files: Vec<SourceFile>,
    pub windows: Vec<WindowRef>,
    pub record_count: usize,
    /// Directory holding the record files; set when the manifest is loaded.
    #[serde(skip)]
    pub root: PathBuf,
}

/// The part of `manifest.json` a raw directory must provide before
/// statistics exist.
#[derive(Debug, Deserialize)]
struct LayoutOnly {
    layout: Layout,
}

impl DatasetManifest {
    /// Parses and validates manifest JSON. `root` is not touched.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let m: DatasetManifest =
            serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        m.validate().map_err(|e| match e {
            Error::Config(reason) | Error::Degenerate(reason) => Error::format(origin, reason),
            other => other,
        })?;
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m = Self::from_json(&text, &path)?;
        m.root = dir.to_path_buf();
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported manifest version {}",
                self.format_version
            )));
        }
        self.layout.validate()?;
        if self.window_length == 0 || self.stride == 0 {
            return Err(Error::config("window length and stride must be positive"));
        }
        if self.stats.len() != self.layout.channels {
            return Err(Error::config("one statistics entry per channel required"));
        }
        for (c, s) in self.stats.iter().enumerate() {
            if !(s.std > 0.0 && s.std.is_finite() && s.mean.is_finite()) {
                return Err(Error::Degenerate(format!("channel {c} has std {}", s.std)));
            }
        }
        if self.record_count != self.windows.len() {
            return Err(Error::config("record count differs from the window list"));
        }
        for w in &self.windows {
            let f = self
                .files
                .get(w.file)
                .ok_or_else(|| Error::config(format!("window refers to missing file {}", w.file)))?;
            if w.start.checked_add(self.window_length).is_none_or(|end| end > f.frames) {
                return Err(Error::config(format!("window at {} overruns {}", w.start, f.id)));
            }
        }
        for f in &self.files {
            if f.id.is_empty() || f.id.contains(['/', '\\']) || f.id.starts_with('.') {
                return Err(Error::config(format!("invalid record id {:?}", f.id)));
            }
        }
        Ok(())
    }

    pub fn grid_path(&self, file: usize) -> PathBuf {
        self.root.join(format!("{}{GRID_SUFFIX}", self.files[file].id))
    }

    pub fn mask_path(&self, file: usize) -> PathBuf {
        self.root.join(format!("{}{MASK_SUFFIX}", self.files[file].id))
    }

    pub fn total_frames(&self) -> usize {
        self.files.iter().map(|f| f.frames).sum()
    }
}

/// Reads the `layout` object of a raw directory's `manifest.json`.
pub fn read_layout(dir: &Path) -> Result<Layout> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let l: LayoutOnly = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    l.layout.validate().map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(l.layout)
}

/// Writes a manifest holding only the layout, the starting point for
/// `build_manifest`.
pub fn write_layout(dir: &Path, layout: &Layout) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&serde_json::json!({ "layout": layout }))
        .expect("layout serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Decodes little-endian `f32` values; rejects ragged or non-finite data.
pub fn decode_grid(bytes: &[u8], origin: &Path) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::integrity(origin, format!("{} bytes is not a whole number of f32", bytes.len())));
    }
    let mut out = Vec::with_capacity(bytes.len() / 4);
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(Error::integrity(origin, format!("non-finite value at element {i}")));
        }
        out.push(v);
    }
    Ok(out)
}

/// Decodes mask bytes; every byte must be 0 or 1.
pub fn decode_mask(bytes: &[u8], origin: &Path) -> Result<Vec<f32>> {
    bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(0.0),
            1 => Ok(1.0),
            other => Err(Error::integrity(origin, format!("mask byte {other} at element {i}"))),
        })
        .collect()
}

pub fn encode_grid(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Encodes a 0/1 mask; any value above one half counts as set.
pub fn encode_mask(values: &[f32]) -> Vec<u8> {
    values.iter().map(|&v| u8::from(v > 0.5)).collect()
}

/// Writes one record pair.
pub fn write_record(dir: &Path, id: &str, grid: &[f32], mask: &[f32]) -> Result<()> {
    let gp = dir.join(format!("{id}{GRID_SUFFIX}"));
    fs::write(&gp, encode_grid(grid)).map_err(|e| Error::io(&gp, e))?;
    let mp = dir.join(format!("{id}{MASK_SUFFIX}"));
    fs::write(&mp, encode_mask(mask)).map_err(|e| Error::io(&mp, e))
}
