//! Fixtures shared by the criterion benches.

use decaps_core::capsnet::VoteTensor;
use decaps_core::data::{generate, DatasetSpec, Sample};
use decaps_core::{Init, Tape, Tensor};

/// Uniform `[0, 1)` tensor.
pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::create(shape, Init::Uniform { low: 0.0, high: 1.0, seed }).expect("valid shape")
}

/// Gaussian votes for `heads x classes` capsule sets on a square grid.
pub fn votes<'t>(tape: &'t Tape, heads: usize, classes: usize, grid: usize, dim: usize, seed: u64) -> Vec<Vec<VoteTensor<'t>>> {
    (0..heads)
        .map(|i| {
            (0..classes)
                .map(|j| {
                    let init = Init::Gaussian { mean: 0.0, std: 0.3, seed: seed + (i * classes + j) as u64 };
                    VoteTensor {
                        head: i,
                        class: j,
                        grid: (grid, grid),
                        votes: tape.constant(Tensor::create(&[grid * grid, dim], init).expect("valid shape")),
                        coordinate_added: false,
                    }
                })
                .collect()
        })
        .collect()
}

/// A few default-sized synthetic samples.
pub fn samples(n: usize) -> Vec<Sample> {
    generate(&DatasetSpec { num_samples: n, ..DatasetSpec::default() }).expect("default spec is valid")
}
