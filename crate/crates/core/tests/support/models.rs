//! Small models and synthetic data sets for the integration tests.

use wla::griddata::{synth_generate, GridField, NormStats, PvsMeta, SynthParams};
use wla::model::{Wla, WlaConfig};
use wla::pvum::PvumConfig;
use wla::vaeformer::{PatchConfig, StackConfig};

/// 16x16 grid, 3x3 tokens of 8 bits, one encoder and two decoder blocks.
pub fn tiny_config(meta: PvsMeta, seed: u64) -> WlaConfig {
    WlaConfig {
        meta,
        height: 16,
        width: 16,
        patch: PatchConfig::desk(),
        stack: StackConfig { encoder_depth: 1, decoder_depth: 2, d_model: 16, heads: 2, mlp_ratio: 2 },
        pvum: PvumConfig { d: 8, blocks: 1, heads: 2, c2: 4, mlp_ratio: 2 },
        nb: 8,
        seed,
    }
}

pub fn tiny_meta() -> PvsMeta {
    PvsMeta::parse_list("z500,t850,t2m").unwrap()
}

pub fn physical(meta: &PvsMeta, h: usize, w: usize, seeds: std::ops::Range<u64>) -> Vec<GridField> {
    seeds.map(|s| synth_generate(meta, h, w, s, SynthParams::default()).unwrap()).collect()
}

/// A fresh tiny model with statistics fitted on `data`, plus `data` normalized.
pub fn tiny_model(seed: u64, n: u64) -> (Wla, Vec<GridField>, Vec<GridField>) {
    let meta = tiny_meta();
    let phys = physical(&meta, 16, 16, 0..n);
    let norm = NormStats::fit(&phys).unwrap();
    let normalized = phys.iter().map(|f| norm.normalize(f).unwrap()).collect();
    (Wla::new(tiny_config(meta, seed), norm).unwrap(), phys, normalized)
}
