//! Montages of mask, real and generated frames.
//!
//! One row per [`RenderRow`], one column per timestep, tiles separated by
//! one-pixel gray lines. Values map linearly onto 0..=255 over a display
//! range and are clamped outside it.

use std::fs;
use std::path::{Path, PathBuf};

use maskcot::data::{read_window_raw, DatasetManifest};
use maskcot::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

/// Separator intensity.
pub const SEPARATOR: u8 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Event class `k` of the conditioning mask.
    Mask(usize),
    /// Channel `c` of the real window.
    Real(usize),
    /// Channel `c` of the generated window.
    Generated(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRow {
    pub label: String,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSpec {
    /// Dataset directory holding the real window and its mask.
    pub real: Option<PathBuf>,
    /// Directory written by `sample`; its masks are used when `real` is unset.
    pub generated: Option<PathBuf>,
    /// Window index, shared by both datasets.
    #[serde(default)]
    pub window: usize,
    /// First timestep shown.
    #[serde(default)]
    pub start: usize,
    pub timesteps: usize,
    pub rows: Vec<RenderRow>,
    /// `[lo, hi]` per channel in physical units. Masks always use `[0, 1]`.
    pub ranges: Vec<[f32; 2]>,
    pub output: PathBuf,
    /// Also write a PNG next to the PGM.
    #[serde(default)]
    pub png: bool,
}

impl RenderSpec {
    /// Default layout: every mask class, then a real and a generated row per
    /// channel, over ten timesteps.
    pub fn figure(real: PathBuf, generated: PathBuf, channels: usize, classes: usize, output: PathBuf) -> Self {
        let mut rows: Vec<RenderRow> = (0..classes)
            .map(|k| RenderRow {
                label: format!("mask {k}"),
                source: Source::Mask(k),
            })
            .collect();
        for c in 0..channels {
            rows.push(RenderRow {
                label: format!("real {c}"),
                source: Source::Real(c),
            });
            rows.push(RenderRow {
                label: format!("generated {c}"),
                source: Source::Generated(c),
            });
        }
        RenderSpec {
            real: Some(real),
            generated: Some(generated),
            window: 0,
            start: 0,
            timesteps: 10,
            rows,
            ranges: vec![[0.0, 1.0]; channels],
            output,
            png: false,
        }
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let spec: RenderSpec = serde_json::from_str(text).map_err(|e| Error::Format {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut spec = Self::from_json(&text, path)?;
        // relative paths are taken from the spec file's directory
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [spec.real.as_mut(), spec.generated.as_mut(), Some(&mut spec.output)].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() || self.timesteps == 0 {
            return Err(Error::Config("a montage needs at least one row and one timestep".into()));
        }
        for (c, [lo, hi]) in self.ranges.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("display range {c} needs min < max, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// An 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    #[cfg(feature = "png")]
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let err = |e: png::EncodingError| Error::Numeric(format!("png encoding: {e}"));
        let mut w = enc.write_header().map_err(err)?;
        w.write_image_data(&self.pixels).map_err(err)?;
        w.finish().map_err(err)?;
        Ok(out)
    }
}

/// Maps `v` linearly from `[lo, hi]` onto 0..=255.
pub fn to_gray(v: f32, lo: f32, hi: f32) -> u8 {
    let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    if u.is_nan() {
        return 0;
    }
    (u * 255.0).round() as u8
}

/// Lays out rows of T×H×W frames with their display ranges.
pub fn montage(rows: &[(Tensor, [f32; 2])]) -> Result<Gray> {
    let first = rows.first().ok_or_else(|| Error::Config("montage without rows".into()))?;
    let dims = first.0.shape().to_vec();
    if dims.len() != 3 {
        return Err(Error::Shape(format!("montage rows must be T×H×W, got {dims:?}")));
    }
    let (t, h, w) = (dims[0], dims[1], dims[2]);
    if let Some((r, _)) = rows.iter().find(|(r, _)| r.shape() != dims.as_slice()) {
        return Err(Error::Shape(format!("montage rows differ: {dims:?} vs {:?}", r.shape())));
    }
    let height = rows.len() * h + rows.len() - 1;
    let width = t * w + t - 1;
    let mut pixels = vec![SEPARATOR; height * width];
    for (r, (frames, [lo, hi])) in rows.iter().enumerate() {
        for s in 0..t {
            for y in 0..h {
                let src = &frames.data()[(s * h + y) * w..(s * h + y + 1) * w];
                let at = (r * (h + 1) + y) * width + s * (w + 1);
                for (p, &v) in pixels[at..at + w].iter_mut().zip(src) {
                    *p = to_gray(v, *lo, *hi);
                }
            }
        }
    }
    Ok(Gray { width, height, pixels })
}

/// Window contents in physical units plus the mask.
struct Loaded {
    grid: Tensor,
    mask: Tensor,
}

fn load(dir: &Path, window: usize) -> Result<Loaded> {
    let manifest = DatasetManifest::load(dir)?;
    let (grid, mask) = read_window_raw(&manifest, window)?;
    Ok(Loaded {
        grid: grid.values,
        mask: mask.values,
    })
}

/// Slices `[start, start+len)` of plane `j` from a T×J×H×W tensor.
fn plane(t: &Tensor, j: usize, start: usize, len: usize) -> Result<Tensor> {
    let s = t.shape();
    let (frames, planes, h, w) = (s[0], s[1], s[2], s[3]);
    if j >= planes {
        return Err(Error::Range { index: j, count: planes });
    }
    if start + len > frames {
        return Err(Error::Config(format!(
            "timesteps {start}..{} exceed the window length {frames}",
            start + len
        )));
    }
    let mut data = Vec::with_capacity(len * h * w);
    for f in start..start + len {
        let at = (f * planes + j) * h * w;
        data.extend_from_slice(&t.data()[at..at + h * w]);
    }
    Tensor::new(vec![len, h, w], data)
}

/// Loads every referenced source and composes the montage.
pub fn render(spec: &RenderSpec) -> Result<Gray> {
    spec.validate()?;
    let missing = |what: &str| Error::Format {
        path: spec.output.clone(),
        reason: format!("montage needs a {what} dataset"),
    };
    let real = spec.real.as_deref().map(|d| load(d, spec.window)).transpose()?;
    let generated = spec.generated.as_deref().map(|d| load(d, spec.window)).transpose()?;
    let mut rows = Vec::with_capacity(spec.rows.len());
    for row in &spec.rows {
        let range = |c: usize| {
            spec.ranges.get(c).copied().ok_or(Error::Range {
                index: c,
                count: spec.ranges.len(),
            })
        };
        let entry = match row.source {
            Source::Mask(k) => {
                let src = real.as_ref().or(generated.as_ref()).ok_or_else(|| missing("mask"))?;
                (plane(&src.mask, k, spec.start, spec.timesteps)?, [0.0, 1.0])
            }
            Source::Real(c) => {
                let src = real.as_ref().ok_or_else(|| missing("real"))?;
                (plane(&src.grid, c, spec.start, spec.timesteps)?, range(c)?)
            }
            Source::Generated(c) => {
                let src = generated.as_ref().ok_or_else(|| missing("generated"))?;
                (plane(&src.grid, c, spec.start, spec.timesteps)?, range(c)?)
            }
        };
        rows.push(entry);
    }
    montage(&rows)
}

/// Renders and writes the PGM (and PNG when asked). Returns the written
/// paths.
pub fn write(spec: &RenderSpec) -> Result<Vec<PathBuf>> {
    let img = render(spec)?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::Io { path: p, source: e }
    };
    if let Some(parent) = spec.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    let pgm = spec.output.with_extension("pgm");
    fs::write(&pgm, img.to_pgm()).map_err(io(&pgm))?;
    let mut written = vec![pgm];
    if spec.png {
        written.push(write_png(&img, &spec.output)?);
    }
    Ok(written)
}

#[cfg(feature = "png")]
fn write_png(img: &Gray, output: &Path) -> Result<PathBuf> {
    let p = output.with_extension("png");
    fs::write(&p, img.to_png()?).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    Ok(p)
}

#[cfg(not(feature = "png"))]
fn write_png(_: &Gray, _: &Path) -> Result<PathBuf> {
    Err(Error::Config("built without PNG support".into()))
}
