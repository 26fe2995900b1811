//! Reference problems with known answers: finite-difference gradients, the
//! XOR regression set and a planted-signal labelled set.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::model::{EmbedderModel, LossSpec, ModelConfig};
use crate::posthoc::LabeledEmbeddingSet;
use crate::probes::Sample;
use crate::seed;

/// A small model for gradient checks.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_seq_len: 12,
        vocab_size: 24,
        ..ModelConfig::default()
    }
}

/// A double-precision model whose weights are spread wide enough that every
/// nonlinearity is exercised away from its linear regime.
pub fn noisy_model(cfg: ModelConfig, seed: u64) -> EmbedderModel<f64> {
    let mut m = EmbedderModel::<f64>::new(cfg, seed).expect("valid config");
    let mut rng = seed::rng_from(seed ^ 0xABCD);
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    for t in m.params.tensors_mut() {
        for x in t.data_mut() {
            *x += noise.sample(&mut rng);
        }
    }
    m
}

pub fn gradcheck_model(seed: u64) -> EmbedderModel<f64> {
    noisy_model(gradcheck_config(), seed)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub sampled: usize,
    pub max_rel_err: f64,
}

/// Central finite differences at `step` on `samples` parameters drawn
/// uniformly from those with a non-negligible analytic gradient.
pub fn finite_difference_check(
    model: &EmbedderModel<f64>,
    spec: &LossSpec<'_>,
    samples: usize,
    step: f64,
    seed: u64,
) -> crate::Result<GradCheck> {
    let (_, grad) = model.loss_and_grad(spec)?;
    let mut candidates = Vec::new();
    for (ti, t) in grad.tensors().into_iter().enumerate() {
        for (ei, &g) in t.data().iter().enumerate() {
            if g.abs() > 1e-6 {
                candidates.push((ti, ei, g));
            }
        }
    }
    if candidates.len() < samples {
        return Err(crate::Error::invalid(format!(
            "only {} parameters have gradient, {samples} requested",
            candidates.len()
        )));
    }
    let mut rng = seed::rng_from(seed);
    let mut max_rel_err = 0.0f64;
    let mut probe = model.clone();
    for _ in 0..samples {
        let (ti, ei, analytic) = candidates[rng.random_range(0..candidates.len())];
        let base = probe.params.tensors()[ti].data()[ei];
        probe.params.tensors_mut()[ti].data_mut()[ei] = base + step;
        let plus = probe.loss(spec)?;
        probe.params.tensors_mut()[ti].data_mut()[ei] = base - step;
        let minus = probe.loss(spec)?;
        probe.params.tensors_mut()[ti].data_mut()[ei] = base;
        let numeric = (plus - minus) / (2.0 * step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(GradCheck { sampled: samples, max_rel_err })
}

/// Points in `[-1, 1]²` with target 0.9 when both coordinates share a sign
/// and 0.1 otherwise: no linear map separates them.
pub fn xor_samples(n: usize, rng: &mut seed::Rng) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            Sample {
                x: vec![a, b],
                y: if a * b > 0.0 { 0.9 } else { 0.1 },
            }
        })
        .collect()
}

/// Balanced binary labels planted along the first two axes of `dim`-space:
/// axis 0 carries a strong, low-noise signal and axis 1 a weaker signal
/// under wider noise, so linear classifiers strip the label one direction
/// at a time with falling accuracy.
pub fn planted_labeled_set(n: usize, dim: usize, seed: u64) -> LabeledEmbeddingSet {
    assert!(dim >= 2 && n >= 2);
    let mut rng = seed::rng_from(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    let mut x = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % 2) as u8;
        let s = if y == 1 { 1.0 } else { -1.0 };
        let mut row: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
        row[0] = s + 0.2 * row[0];
        row[1] = s + 1.2 * row[1];
        x.push(row);
        labels.push(y);
    }
    LabeledEmbeddingSet::new(x, labels).expect("both classes present")
}
