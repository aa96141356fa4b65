//! Post-training metrics: divergence to held-out data, conditional
//! fidelity and mask-swap sensitivity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cot::{mixed_divergence, Side, SinkhornConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Graph, Mode, ParamStore};
use crate::tensor::Tensor;

/// Generates N×T×C×H×W sequences for N×T×K×H×W masks in eval mode.
pub fn generate(store: &ParamStore, model: &Model, masks: &Tensor, z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::<f32>::new(store, Mode::Eval);
    let m = g.constant(masks);
    let c = model.encoder.encode(&mut g, m)?;
    let zv = g.constant(z);
    let y = model.generator.generate(&mut g, zv, c, m)?;
    Ok(g.tensor(y))
}

/// Mean over in-mask cells minus mean over out-of-mask cells, averaged
/// over channels. A cell is in-mask when any class is set. Returns `None`
/// if either region is empty.
pub fn fidelity_gap(grids: &Tensor, masks: &Tensor) -> Result<Option<f64>> {
    let gs = grids.shape();
    let ms = masks.shape();
    if gs.len() != 5 || ms.len() != 5 || gs[..2] != ms[..2] || gs[3..] != ms[3..] {
        return Err(Error::shape(format!("fidelity_gap: grids {gs:?}, masks {ms:?}")));
    }
    let (frames, c, k, hw) = (gs[0] * gs[1], gs[2], ms[2], gs[3] * gs[4]);
    let (mut sin, mut nin, mut sout, mut nout) = (0.0f64, 0usize, 0.0f64, 0usize);
    for f in 0..frames {
        for p in 0..hw {
            let inside = (0..k).any(|j| masks.data()[(f * k + j) * hw + p] > 0.5);
            for ch in 0..c {
                let v = grids.data()[(f * c + ch) * hw + p] as f64;
                if inside {
                    sin += v;
                    nin += 1;
                } else {
                    sout += v;
                    nout += 1;
                }
            }
        }
    }
    if nin == 0 || nout == 0 {
        return Ok(None);
    }
    Ok(Some(sin / nin as f64 - sout / nout as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out windows used; rounded down to a multiple of `2·batch_size`.
    pub samples: usize,
    pub batch_size: usize,
    pub noise_seed: u64,
    /// Transport settings for the divergence. The causal weight is forced to
    /// 0 so the score does not depend on the trained critics.
    pub sinkhorn: SinkhornConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 256,
            batch_size: 32,
            noise_seed: 7,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Mean mixed divergence between generated and held-out real batches.
    pub divergence: f64,
    pub real_gap: f64,
    pub generated_gap: f64,
    /// generated_gap / real_gap.
    pub fidelity_ratio: f64,
    /// Fraction of mask pairs whose swap changes the output.
    pub swap_sensitivity: f64,
    pub swap_pairs: usize,
}

/// Scores a model against `held_out`. Fakes are conditioned on the held-out
/// masks, so the real and generated gaps are measured on the same cells.
pub fn evaluate(store: &ParamStore, model: &Model, held_out: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let b = cfg.batch_size;
    if b < 1 {
        return Err(Error::config("evaluation batch size must be >= 1"));
    }
    let pairs = cfg.samples.min(held_out.len()) / (2 * b);
    if pairs == 0 {
        return Err(Error::config(format!(
            "evaluation needs at least {} held-out windows, have {}",
            2 * b,
            held_out.len().min(cfg.samples)
        )));
    }
    let sk = SinkhornConfig {
        causal_weight: 0.0,
        ..cfg.sinkhorn
    };
    let noise = model.generator.spec.noise;
    // pairs are scored independently and reduced in index order, so the
    // report does not depend on the thread count
    let scored: Vec<PairScore> = (0..pairs)
        .into_par_iter()
        .map(|p| {
            let mut s = PairScore::default();
            let mut real = Vec::with_capacity(2);
            let mut fake = Vec::with_capacity(2);
            for half in 0..2 {
                let start = (2 * p + half) * b;
                let idx: Vec<usize> = (start..start + b).collect();
                let batch = held_out.gather(&idx)?;
                let t = batch.grids.shape()[1];
                let z = noise.sample(b, t, cfg.noise_seed, (2 * p + half) as u64);
                let y = generate(store, model, &batch.masks, &z)?;
                if let (Some(r), Some(f)) = (fidelity_gap(&batch.grids, &batch.masks)?, fidelity_gap(&y, &batch.masks)?) {
                    s.real_gap += r;
                    s.gen_gap += f;
                    s.gap_batches += 1;
                }
                // swap: condition each sequence on its neighbour's mask with
                // the same noise
                let swapped = roll(&batch.masks, 1);
                let ys = generate(store, model, &swapped, &z)?;
                let item = y.len() / b;
                for i in 0..b {
                    if masks_equal(&batch.masks, &swapped, i) {
                        continue;
                    }
                    s.swaps += 1;
                    let a = &y.data()[i * item..(i + 1) * item];
                    let w = &ys.data()[i * item..(i + 1) * item];
                    if a.iter().zip(w).any(|(u, v)| u != v) {
                        s.changed += 1;
                    }
                }
                real.push(batch.grids);
                fake.push(y);
            }
            let mut g = Graph::<f32>::new(store, Mode::Eval);
            let x1 = g.constant(&real[0]);
            let x2 = g.constant(&real[1]);
            let y1 = g.constant(&fake[0]);
            let y2 = g.constant(&fake[1]);
            let d = mixed_divergence(&mut g, &Side::plain(x1), &Side::plain(x2), &Side::plain(y1), &Side::plain(y2), &sk)?;
            s.divergence = g.scalar(d) as f64;
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let (mut div, mut real_g, mut gen_g, mut changed, mut swaps, mut gap_batches) = (0.0, 0.0, 0.0, 0, 0, 0);
    for s in &scored {
        div += s.divergence;
        real_g += s.real_gap;
        gen_g += s.gen_gap;
        changed += s.changed;
        swaps += s.swaps;
        gap_batches += s.gap_batches;
    }
    let real_gap = real_g / gap_batches.max(1) as f64;
    let generated_gap = gen_g / gap_batches.max(1) as f64;
    Ok(EvalReport {
        samples: pairs * 2 * b,
        divergence: div / pairs as f64,
        real_gap,
        generated_gap,
        fidelity_ratio: generated_gap / real_gap,
        swap_sensitivity: if swaps == 0 { 0.0 } else { changed as f64 / swaps as f64 },
        swap_pairs: swaps,
    })
}

#[derive(Default)]
struct PairScore {
    divergence: f64,
    real_gap: f64,
    gen_gap: f64,
    gap_batches: usize,
    changed: usize,
    swaps: usize,
}

/// Cyclic shift along the batch axis.
fn roll(t: &Tensor, by: usize) -> Tensor {
    let n = t.shape()[0];
    let item = t.len() / n;
    let mut data = Vec::with_capacity(t.len());
    for i in 0..n {
        let src = (i + by) % n;
        data.extend_from_slice(&t.data()[src * item..(src + 1) * item]);
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn masks_equal(a: &Tensor, b: &Tensor, i: usize) -> bool {
    let item = a.len() / a.shape()[0];
    a.data()[i * item..(i + 1) * item] == b.data()[i * item..(i + 1) * item]
}
