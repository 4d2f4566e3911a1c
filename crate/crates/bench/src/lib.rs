//! Shared fixtures for the criterion benchmarks.

use cil_core::data::{stratified_split, synth_blobs, Dataset, SplitIndices, SplitSpec};
use cil_core::model::{BackboneSpec, ModelState};
use cil_core::tensor::Tensor;

pub fn blob_dataset() -> (Dataset, SplitIndices) {
    let ds = synth_blobs(10, 60, 32, 6.0, 1.0, 424).expect("valid blob parameters");
    let split = stratified_split(&ds, &SplitSpec::default(), 1000).expect("valid split");
    (ds, split)
}

pub fn mlp_model(classes: usize) -> ModelState<f32> {
    let spec = BackboneSpec::mlp(&[32], &[32], 16);
    ModelState::new(&spec, &[(0..classes).collect()], 7).expect("valid spec")
}

pub fn conv_model(classes: usize) -> ModelState<f32> {
    let spec = BackboneSpec::conv_net(&[8, 8], [4, 8, 8, 16], 3, 0.5);
    ModelState::new(&spec, &[(0..classes).collect()], 7).expect("valid spec")
}

pub fn batch(n: usize, shape: &[usize], seed: u64) -> Tensor<f32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let len: usize = full.iter().product();
    let data = (0..len).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
    Tensor::from_vec(&full, data).expect("shape matches data")
}
