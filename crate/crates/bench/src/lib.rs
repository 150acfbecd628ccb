//! Shared fixtures for the benchmarks.

use adr_core::adr::{AdrConfig, ModelBundle};
use adr_core::datasets::{make_two_moons, rotate, LabeledSet2D};
use adr_core::{Rng, Tensor};

pub fn toy_bundle(seed: u64) -> ModelBundle {
    ModelBundle::init(&AdrConfig::default(), &mut Rng::new(seed)).expect("toy bundle")
}

pub fn toy_data(seed: u64) -> (LabeledSet2D, LabeledSet2D) {
    let source = make_two_moons(300, 0.1, &mut Rng::new(seed).split(100)).expect("moons");
    let target = rotate(&source, 30.0);
    (source, target)
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Tensor::from_vec(vec![rows, cols], data).expect("finite normals")
}
