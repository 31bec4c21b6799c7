//! Grid files, chronological splitting, baselines and synthetic fields.

mod baselines;
mod format;
mod grid;
mod split;

pub use baselines::{bicubic_upsample, persistence};
pub use format::{decode as decode_grid, encode as encode_grid, load as load_grid, save as save_grid, GRID_MAGIC, GRID_VERSION};
pub use grid::{Axis, GridField, GridMeta};
pub use split::{chronological_split, ChronoSplit, SplitRanges};
pub mod synthetic;

pub use synthetic::{generate, CaseId, Generated, SelfCheck, SyntheticCase};
