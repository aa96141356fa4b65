//! The alternating critic/generator loop.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::cot::{adversarial_losses, Losses, Side, SinkhornConfig};
use crate::data::{Batch, BatchPlan, Dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::{FrameShape, Model};
use crate::nn::{Graph, Group, Mode, ParamStore, Var};
use crate::tensor::Tensor;

use super::adamw::AdamW;
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::metrics::{MetricLog, MetricRecord};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Checkpoint file written after `epoch` completed epochs.
pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Frame geometry declared by a dataset.
pub fn frame_of(manifest: &DatasetManifest) -> FrameShape {
    let l = &manifest.layout;
    FrameShape {
        channels: l.channels,
        classes: l.classes(),
        height: l.height,
        width: l.width,
    }
}

/// Two minibatches drawn per step feed the four-batch divergence, so an
/// epoch has ⌊batches / 2⌋ steps.
pub fn steps_per_epoch(records: usize, batch_size: usize) -> Result<usize> {
    let plan = BatchPlan::new(records, batch_size, 0)?;
    let steps = plan.batches_per_epoch() / 2;
    if steps == 0 {
        return Err(Error::config(format!(
            "{records} windows give fewer than two batches of {batch_size}"
        )));
    }
    Ok(steps)
}

/// Builds both adversarial losses for one pair of real batches.
///
/// The critics see the encoder context through a detach when `detach_context`
/// is set, so the generator step cannot move the encoder through them.
#[allow(clippy::too_many_arguments)]
pub fn build_losses<'s>(
    g: &mut Graph<'s, f32>,
    model: &Model,
    x1: &Batch,
    x2: &Batch,
    z1: &Tensor,
    z2: &Tensor,
    sinkhorn: &SinkhornConfig,
    penalty_weight: f64,
    detach_context: bool,
) -> Result<Losses> {
    let mut sides = Vec::with_capacity(4);
    let mut m_real = Vec::with_capacity(2);
    let mut fakes = Vec::with_capacity(2);
    for (batch, z) in [(x1, z1), (x2, z2)] {
        let mask = g.constant(&batch.masks);
        let c = model.encoder.encode(g, mask)?;
        let zv = g.constant(z);
        let y = model.generator.generate(g, zv, c, mask)?;
        let cc = if detach_context { g.detach(c) } else { c };
        let x = g.constant(&batch.grids);
        let (hx, mx) = features(g, model, x, cc, mask)?;
        let (hy, my) = features(g, model, y, cc, mask)?;
        sides.push(Side::with_features(x, hx, mx));
        fakes.push(Side::with_features(y, hy, my));
        m_real.push(mx);
    }
    let m_real = g.concat(&m_real, 0)?;
    adversarial_losses(
        g,
        (&sides[0], &sides[1]),
        (&fakes[0], &fakes[1]),
        m_real,
        sinkhorn,
        penalty_weight,
    )
}

fn features(g: &mut Graph<'_, f32>, model: &Model, x: Var, c: Var, mask: Var) -> Result<(Var, Var)> {
    let h = model.critics.embed_h(g, x, c, mask)?;
    let m = model.critics.embed_m(g, x, c, mask)?;
    Ok((h, m))
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{name} became {v}")))
    }
}

/// Progress summary handed to the epoch callback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    /// Completed epochs, 1-based.
    pub epoch: u64,
    pub step: u64,
    pub generator_loss: f64,
    pub discriminator_loss: f64,
    pub divergence: f64,
    pub penalty: f64,
    pub wall_time_s: f64,
}

/// Owns the full mutable state of a run.
pub struct Trainer {
    pub config: TrainConfig,
    pub dataset: Dataset,
    pub frame: FrameShape,
    pub store: ParamStore,
    pub model: Model,
    pub optimizer: AdamW,
    plan: BatchPlan,
    steps_per_epoch: usize,
    /// Completed epochs.
    epoch: u64,
    /// Completed steps.
    step: u64,
    log: MetricLog,
    started: Instant,
}

impl Trainer {
    /// Fresh run: initializes parameters and truncates the metric log.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let (dataset, frame, plan, steps) = prepare(&config)?;
        let (store, model) = Model::build(&config.model, frame, config.seeds.init)?;
        let optimizer = AdamW::new(config.optimizer, &store);
        let log = MetricLog::create(&config.output.join(METRICS_FILE))?;
        Ok(Trainer {
            config,
            dataset,
            frame,
            store,
            model,
            optimizer,
            plan,
            steps_per_epoch: steps,
            epoch: 0,
            step: 0,
            log,
            started: Instant::now(),
        })
    }

    /// Continues from a checkpoint. The checkpoint's config hash must match
    /// `config`; the epoch count and paths may differ.
    pub fn resume(config: TrainConfig, checkpoint: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(checkpoint)?;
        if ckpt.config_hash != config.hash() {
            return Err(Error::config(format!(
                "{} was written by a different configuration (hash {} vs {})",
                checkpoint.display(),
                ckpt.config_hash,
                config.hash()
            )));
        }
        let (dataset, frame, plan, steps) = prepare(&config)?;
        if ckpt.frame != frame {
            return Err(Error::config("checkpoint frame differs from the dataset"));
        }
        if ckpt.step != ckpt.epoch * steps as u64 {
            return Err(Error::config(format!(
                "checkpoint at step {} is not on an epoch boundary of {steps} steps",
                ckpt.step
            )));
        }
        let (mut store, model) = Model::build(&config.model, frame, config.seeds.init)?;
        let mut optimizer = AdamW::new(config.optimizer, &store);
        ckpt.restore(&mut store, &mut optimizer)?;
        let log = MetricLog::resume(&config.output.join(METRICS_FILE), ckpt.step)?;
        Ok(Trainer {
            config,
            dataset,
            frame,
            store,
            model,
            optimizer,
            plan,
            steps_per_epoch: steps,
            epoch: ckpt.epoch,
            step: ckpt.step,
            log,
            started: Instant::now(),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn output_dir(&self) -> &Path {
        &self.config.output
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            self.epoch,
            self.step,
            &self.config,
            self.frame,
            &self.dataset.manifest.stats,
            &self.store,
            &self.optimizer,
        )
    }

    /// One critic ascent step then one generator descent step.
    fn train_step(&mut self, x1: &Batch, x2: &Batch) -> Result<MetricRecord> {
        let noise = self.config.model.generator.noise;
        let (n, t) = (x1.grids.shape()[0], x1.grids.shape()[1]);
        let z1 = noise.sample(n, t, self.config.seeds.noise, 2 * self.step);
        let z2 = noise.sample(n, t, self.config.seeds.noise, 2 * self.step + 1);
        let sk = self.config.sinkhorn;
        let w = self.config.penalty_weight;

        let (d_loss, divergence, penalty, d_grads) = {
            let mut g = Graph::<f32>::new(&self.store, Mode::Train);
            g.freeze(Group::Generator);
            let l = build_losses(&mut g, &self.model, x1, x2, &z1, &z2, &sk, w, false)?;
            let d = finite("discriminator loss", g.scalar(l.discriminator) as f64)?;
            let div = g.scalar(l.divergence) as f64;
            let pen = g.scalar(l.penalty) as f64;
            // batch-norm statistics from this pass are discarded: the
            // generator group is frozen here
            (d, div, pen, g.backward(l.discriminator)?)
        };
        self.optimizer.step(&mut self.store, &d_grads, Group::Critic)?;
        drop(d_grads);

        let (g_loss, g_grads, stats) = {
            let mut g = Graph::<f32>::new(&self.store, Mode::Train);
            g.freeze(Group::Critic);
            let l = build_losses(&mut g, &self.model, x1, x2, &z1, &z2, &sk, w, true)?;
            let gl = finite("generator loss", g.scalar(l.generator) as f64)?;
            let grads = g.backward(l.generator)?;
            (gl, grads, g.take_stat_updates())
        };
        self.optimizer.step(&mut self.store, &g_grads, Group::Generator)?;
        self.store.apply_stat_updates(&stats);

        self.step += 1;
        Ok(MetricRecord {
            epoch: self.epoch,
            step: self.step,
            generator_loss: g_loss,
            discriminator_loss: d_loss,
            divergence,
            penalty,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Runs one epoch and writes any checkpoint due at its end.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let batches = self.plan.epoch(self.epoch);
        let mut last = None;
        for pair in batches.chunks_exact(2).take(self.steps_per_epoch) {
            let x1 = self.dataset.gather(&pair[0])?;
            let x2 = self.dataset.gather(&pair[1])?;
            let record = self.train_step(&x1, &x2)?;
            self.log.append(&record)?;
            last = Some(record);
        }
        self.epoch += 1;
        let every = self.config.checkpoint_every as u64;
        if every > 0 && self.epoch.is_multiple_of(every) {
            self.checkpoint().save(&self.config.output.join(epoch_checkpoint_name(self.epoch)))?;
        }
        let r = last.expect("steps_per_epoch >= 1");
        Ok(EpochSummary {
            epoch: self.epoch,
            step: self.step,
            generator_loss: r.generator_loss,
            discriminator_loss: r.discriminator_loss,
            divergence: r.divergence,
            penalty: r.penalty,
            wall_time_s: r.wall_time_s,
        })
    }

    /// Trains through `config.epochs` and saves `final.ckpt`.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochSummary)) -> Result<Checkpoint> {
        while self.epoch < self.config.epochs as u64 {
            let s = self.run_epoch()?;
            on_epoch(&s);
        }
        let ckpt = self.checkpoint();
        ckpt.save(&self.final_checkpoint_path())?;
        Ok(ckpt)
    }

    pub fn final_checkpoint_path(&self) -> PathBuf {
        self.config.output.join(FINAL_CHECKPOINT)
    }
}

fn prepare(config: &TrainConfig) -> Result<(Dataset, FrameShape, BatchPlan, usize)> {
    config.validate()?;
    let manifest = DatasetManifest::load(&config.dataset)?;
    let frame = frame_of(&manifest);
    config.model.validate(&frame)?;
    let steps = steps_per_epoch(manifest.record_count, config.batch_size)?;
    let plan = BatchPlan::new(manifest.record_count, config.batch_size, config.seeds.shuffle)?;
    let dataset = if config.preload {
        Dataset::preloaded(manifest)?
    } else {
        Dataset::new(manifest)
    };
    fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;
    Ok((dataset, frame, plan, steps))
}

/// Fresh run or resume, then train to completion.
pub fn train(config: TrainConfig, resume: Option<&Path>) -> Result<Checkpoint> {
    let mut trainer = match resume {
        Some(p) => Trainer::resume(config, p)?,
        None => Trainer::new(config)?,
    };
    trainer.run(|_| {})
}
