//! Grid/mask records on disk, normalization, toy data and batching.

mod batch;
pub mod format;
mod manifest;
pub mod toy;

pub use batch::{batch_iter, Batch, BatchPlan, Dataset};
pub use format::{ChannelStats, DatasetManifest, Layout, SourceFile, WindowRef};
pub use manifest::{build_manifest, read_window, read_window_raw, EventMaskSequence, GridSequence};
pub use toy::{make_toy_dataset, ToyGenConfig};
