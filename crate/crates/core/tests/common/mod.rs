#![allow(dead_code)]

use std::path::Path;

use stagematch::data::{synth_toy, ToyDomainSpec};
use stagematch::RunConfig;

/// Writes a toy dataset with `n` images per domain under `dir/data` and
/// returns the toy preset pointed at it, with outputs under `dir/runs`.
pub fn toy_config(dir: &Path, n: usize, seed: u64) -> RunConfig {
    let spec = ToyDomainSpec {
        n_images: n,
        seed,
        ..Default::default()
    };
    synth_toy(&spec, &dir.join("data")).expect("toy data");
    let mut c = RunConfig::toy();
    c.data.root = dir.join("data");
    c.output.root = dir.join("runs");
    c.train.seed = seed;
    c
}
