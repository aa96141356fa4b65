//! Deterministic shuffled minibatches over manifest windows.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::format::DatasetManifest;
use super::manifest::read_window;

/// A manifest plus, optionally, every window held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    cache: Option<Vec<(Tensor, Tensor)>>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest) -> Self {
        Dataset {
            manifest,
            cache: None,
        }
    }

    /// Reads every window up front.
    pub fn preloaded(manifest: DatasetManifest) -> Result<Self> {
        let cache = (0..manifest.record_count)
            .map(|i| read_window(&manifest, i).map(|(g, m)| (g.values, m.values)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            manifest,
            cache: Some(cache),
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.record_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalized grid (T×C×H×W) and mask (T×K×H×W) of one window.
    pub fn window(&self, index: usize) -> Result<(Tensor, Tensor)> {
        match &self.cache {
            Some(c) => c.get(index).cloned().ok_or(Error::Range {
                index,
                count: c.len(),
            }),
            None => read_window(&self.manifest, index).map(|(g, m)| (g.values, m.values)),
        }
    }

    /// Stacks windows into N×T×C×H×W grids and N×T×K×H×W masks.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let mut grids = Vec::with_capacity(indices.len());
        let mut masks = Vec::with_capacity(indices.len());
        for &i in indices {
            let (g, m) = self.window(i)?;
            grids.push(g);
            masks.push(m);
        }
        Ok(Batch {
            grids: Tensor::stack(&grids)?,
            masks: Tensor::stack(&masks)?,
            indices: indices.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub grids: Tensor,
    pub masks: Tensor,
    pub indices: Vec<usize>,
}

/// Epoch-indexed batch order. The permutation for an epoch depends only on
/// `(shuffle_seed, epoch)`; the trailing short batch is dropped.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub records: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl BatchPlan {
    pub fn new(records: usize, batch_size: usize, shuffle_seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > records {
            return Err(Error::config(format!(
                "batch size {batch_size} must be in 1..={records}"
            )));
        }
        Ok(BatchPlan {
            records,
            batch_size,
            shuffle_seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.records / self.batch_size
    }

    pub fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.shuffle_seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.records).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Index lists of every full batch of `epoch`, in order.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.permutation(epoch)
            .chunks_exact(self.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }
}

/// Streams the batches of one epoch.
pub fn batch_iter<'a>(
    dataset: &'a Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let plan = BatchPlan::new(dataset.len(), batch_size, shuffle_seed)?;
    Ok(plan.epoch(epoch).into_iter().map(move |idx| dataset.gather(&idx)))
}
