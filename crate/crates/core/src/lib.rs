//! Relevance-mapped networks for strict continual learning.
//!
//! A single MLP is shared by every task. Each task owns a relevance map per
//! parameter tensor that gates the shared weights; after the task finishes its
//! map is rounded to a hard mask and every weight inside the mask is frozen.
//! Earlier tasks therefore see bit-identical outputs forever, while later
//! tasks may still route through (but not modify) earlier tasks' weights.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`] / [`kernels`]: dense row-major arithmetic, optionally parallel.
//! - [`relevance`]: pseudo-round gates, pruning, bit masks, freeze indicators.
//! - [`network`]: the masked MLP with manual back-propagation.
//! - [`optim`]: two-group Adam honoring gradient masks.
//! - [`data`]: IDX loading and permuted/split/fuzzy task streams.
//! - [`supervised`]: per-task training with known task labels.
//! - [`unsupervised`]: task-switch detection, filtering, and task inference.
//! - [`record`] / [`report`]: JSON-lines run records, CSV and SVG summaries.
//! - [`checkpoint`]: versioned binary snapshots.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod kernels;
pub mod network;
pub mod optim;
pub mod record;
pub mod relevance;
pub mod report;
pub mod seed;
pub mod supervised;
pub mod tensor;
pub mod unsupervised;

pub use error::{Error, Result};
pub use network::{Architecture, MaskedNetwork, Mode, TaskId};
pub use relevance::{BitMask, FrozenIndicator, MapInit, RelevanceMap, DEFAULT_BETA};
pub use tensor::Tensor;
