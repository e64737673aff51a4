//! Pressure-variable subsets, gridded fields, normalization and synthetic data.

pub mod field;
pub mod meta;
pub mod norm;
pub mod synth;
pub mod wgrid;

pub use field::{default_lats, default_lons, inclusive_lats, select_subset, Archive, DirArchive, GridField, MemoryArchive};
pub use meta::{Level, MetaEntry, PvsMeta, VariableId, VariableKind, LEVELS_13, LEVELS_25, LEVELS_6};
pub use norm::{LatWeights, NormStats};
pub use synth::{spectral_noise, synth_generate, SynthParams};
