//! Dense tensors, a per-pass autodiff graph, gradient checking and
//! parameter updates.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adaptive_step, sgd_step, AdamConfig, AdamState};
pub use params::{BoundParams, ParamSet, Precision};
pub use tensor::{log_sum_exp, softmax, squared_distance, Tensor};

use rand::Rng;

/// Uniform Glorot initialisation for a `rows×cols` weight matrix.
pub fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// Deterministic child seed for `parts` under `base` (splitmix64 chain).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
