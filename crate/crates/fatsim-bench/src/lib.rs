//! Shared fixtures for the benchmark targets.

use fatsim_core::autodiff::Tensor;
use fatsim_core::data::Dataset;
use fatsim_core::nn::{Architecture, ModelParams};

pub fn conv_model(seed: u64) -> ModelParams {
    ModelParams::build(&Architecture::conv_small((1, 28, 28), 10), seed).expect("conv model")
}

pub fn image_batch(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let x = Tensor::rand_uniform(vec![n, 1, 28, 28], 0.0, 1.0, seed);
    let y = (0..n).map(|i| i % 10).collect();
    (x, y)
}

pub fn image_dataset(n: usize, seed: u64) -> Dataset {
    let (images, labels) = image_batch(n, seed);
    Dataset { images, labels, class_count: 10 }
}
