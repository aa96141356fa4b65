//! Synthetic moving-blob sequences: a desk-scale stand-in for reanalysis
//! grids with event masks that are exact by construction.

use std::f64::consts::{LN_2, PI};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::format::{write_layout, write_record, DatasetManifest, Layout};
use super::manifest::build_manifest;

pub const TOY_TIME_STEP_HOURS: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyGenConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per sequence; each sequence is one window.
    pub steps: usize,
    pub classes: usize,
    pub sequences: usize,
    /// Half-peak radius in pixels.
    pub blob_radius: f64,
    /// Pixels per step.
    pub blob_speed: f64,
    /// Amplitude of the static non-negative background noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for ToyGenConfig {
    fn default() -> Self {
        ToyGenConfig {
            height: 16,
            width: 16,
            steps: 8,
            classes: 1,
            sequences: 512,
            blob_radius: 3.0,
            blob_speed: 1.0,
            noise_level: 0.1,
            seed: 0,
        }
    }
}

impl ToyGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::config(format!(
                "toy frames must be at least 4×4, got {}×{}",
                self.height, self.width
            )));
        }
        if self.steps == 0 || self.classes == 0 || self.sequences == 0 {
            return Err(Error::config("steps, classes and sequences must be positive"));
        }
        let limit = self.height.min(self.width) as f64 / 2.0;
        if !(self.blob_radius > 0.0 && self.blob_radius < limit) {
            return Err(Error::config(format!(
                "blob radius {} must lie in (0, {limit})",
                self.blob_radius
            )));
        }
        if !(self.blob_speed >= 0.0 && self.blob_speed.is_finite()) {
            return Err(Error::config("blob speed must be finite and >= 0"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::config("noise level must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            channels: 1,
            class_names: (0..self.classes).map(|k| format!("blob{k}")).collect(),
            height: self.height,
            width: self.width,
            time_step_hours: TOY_TIME_STEP_HOURS,
        }
    }
}

/// Position along one axis, reflecting off `[lo, hi]`.
struct Axis {
    pos: f64,
    vel: f64,
    lo: f64,
    hi: f64,
}

impl Axis {
    fn new(rng: &mut ChaCha8Rng, extent: usize, radius: f64, vel: f64) -> Self {
        let lo = radius;
        let hi = extent as f64 - 1.0 - radius;
        if hi <= lo {
            let mid = (extent as f64 - 1.0) / 2.0;
            return Axis { pos: mid, vel: 0.0, lo: mid, hi: mid };
        }
        Axis {
            pos: rng.random_range(lo..=hi),
            vel,
            lo,
            hi,
        }
    }

    fn advance(&mut self) {
        self.pos += self.vel;
        loop {
            if self.pos < self.lo {
                self.pos = 2.0 * self.lo - self.pos;
            } else if self.pos > self.hi {
                self.pos = 2.0 * self.hi - self.pos;
            } else {
                break;
            }
            self.vel = -self.vel;
        }
    }
}

/// Gaussian intensity with unit peak that falls to one half at `radius`.
pub fn blob_intensity(dy: f64, dx: f64, radius: f64) -> f64 {
    (-LN_2 * (dy * dy + dx * dx) / (radius * radius)).exp()
}

/// Renders sequence `index`: a 1×H×W grid and a K×H×W mask per frame.
pub fn render_sequence(cfg: &ToyGenConfig, index: u64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;
    let noise: Vec<f64> = (0..plane).map(|_| cfg.noise_level * rng.random::<f64>()).collect();
    let mut blobs: Vec<(Axis, Axis)> = (0..cfg.classes)
        .map(|_| {
            let angle = rng.random_range(0.0..2.0 * PI);
            let y = Axis::new(&mut rng, h, cfg.blob_radius, cfg.blob_speed * angle.sin());
            let x = Axis::new(&mut rng, w, cfg.blob_radius, cfg.blob_speed * angle.cos());
            (y, x)
        })
        .collect();

    let mut grid = Vec::with_capacity(cfg.steps * plane);
    let mut mask = Vec::with_capacity(cfg.steps * cfg.classes * plane);
    for t in 0..cfg.steps {
        if t > 0 {
            for (y, x) in &mut blobs {
                y.advance();
                x.advance();
            }
        }
        let mut frame = noise.clone();
        for (y, x) in &blobs {
            for r in 0..h {
                for c in 0..w {
                    let v = blob_intensity(r as f64 - y.pos, c as f64 - x.pos, cfg.blob_radius);
                    frame[r * w + c] += v;
                    mask.push(if v > 0.5 { 1.0 } else { 0.0 });
                }
            }
        }
        grid.extend(frame.iter().map(|&v| v as f32));
    }
    (grid, mask)
}

/// Writes `cfg.sequences` records plus a manifest into `out_dir`.
pub fn make_toy_dataset(cfg: &ToyGenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_layout(out_dir, &cfg.layout())?;
    for i in 0..cfg.sequences {
        let (grid, mask) = render_sequence(cfg, i as u64);
        write_record(out_dir, &format!("toy_{i:05}"), &grid, &mask)?;
    }
    build_manifest(out_dir, cfg.steps, cfg.steps)
}
