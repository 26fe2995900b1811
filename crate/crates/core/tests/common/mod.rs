#![allow(dead_code)]

pub use debias_core::oracles::{gradcheck_config, gradcheck_model, noisy_model};

use debias_core::model::{EmbedderModel, LossSpec};
use debias_core::oracles::GradCheck;

pub fn finite_difference_check(
    model: &EmbedderModel<f64>,
    spec: &LossSpec<'_>,
    samples: usize,
    step: f64,
    seed: u64,
) -> GradCheck {
    debias_core::oracles::finite_difference_check(model, spec, samples, step, seed).unwrap()
}
