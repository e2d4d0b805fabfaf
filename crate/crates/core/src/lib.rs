//! Multi-zone recurrent units.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, the reverse-mode tape, gradient checking.
//! * [`zones`]: the multi-zone transformation (generation, composition,
//!   aggregation) and the zone-disagreement score.
//! * [`cells`]: MZU / transition-MZU / GRU cells, deep transition stacks and
//!   sequence encoders.
//! * [`objective`]: language-model loss, BPC, the regularized objective and
//!   the aspect classification head.
//! * [`training`]: Adam, truncated BPTT, evaluation and checkpoints.
//! * [`data`]: character corpora, stream batching, aspect TSV and HDS.
//! * [`analysis`]: relevance maps and their PGM/CSV export.
//! * [`cli`]: the `train | eval | analyze | bench` commands.

pub mod error;
pub mod numerics;
pub mod zones;
pub mod cells;
pub mod objective;
pub mod model;
pub mod data;
pub mod training;
pub mod analysis;
pub mod cli;

pub use error::{Error, Result};
