use debias_core::probes::*;
use debias_core::seed;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn sample(x: Vec<f64>, y: f64) -> Sample {
    Sample { x, y }
}

fn gaussian_rows(n: usize, dim: usize, rng: &mut seed::Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

fn targets(s: &[Sample]) -> Vec<f64> {
    s.iter().map(|s| s.y).collect()
}

fn xor_set(n: usize, rng: &mut seed::Rng) -> Vec<Sample> {
    debias_core::oracles::xor_samples(n, rng)
}

#[test]
fn constant_targets_give_constant_probe() {
    let mut rng = seed::rng_from(3);
    let xs = gaussian_rows(300, 4, &mut rng);
    let train: Vec<Sample> = xs.iter().map(|x| sample(x.clone(), 0.5)).collect();
    for arch in [ProbeArch::Linear, ProbeArch::Nonlinear] {
        let cfg = ProbeConfig { arch, ..Default::default() };
        let t = train_probe(&train, &train[..20], &cfg).unwrap();
        assert!(mse(&t.probe, &train) < 1e-4, "{arch:?}: {}", mse(&t.probe, &train));
    }
}

#[test]
fn linear_probe_fits_sigmoid_of_linear_map() {
    let mut rng = seed::rng_from(7);
    let w: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).map(|v: f64| v / 8f64.sqrt()).collect();
    let data: Vec<Sample> = gaussian_rows(200, 8, &mut rng)
        .into_iter()
        .map(|x| {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let y = 1.0 / (1.0 + (-z).exp());
            sample(x, y)
        })
        .collect();
    let (train, rest) = data.split_at(120);
    let (val, test) = rest.split_at(40);
    let t = train_probe(train, val, &ProbeConfig::default()).unwrap();
    let score = bias_score(&t.probe, test).unwrap();
    assert!(score < 1e-3, "test mse {score}");
}

#[test]
fn xor_separates_linear_from_nonlinear() {
    let mut rng = seed::rng_from(11);
    let train = xor_set(600, &mut rng);
    let val = xor_set(200, &mut rng);
    let test = xor_set(200, &mut rng);
    let base = baseline_score(&targets(&train), &targets(&test)).unwrap();
    let lin = train_probe(&train, &val, &ProbeConfig::default()).unwrap();
    let lin_score = bias_score(&lin.probe, &test).unwrap();
    let cfg = ProbeConfig {
        arch: ProbeArch::Nonlinear,
        ..Default::default()
    };
    let non = train_probe(&train, &val, &cfg).unwrap();
    let non_score = bias_score(&non.probe, &test).unwrap();
    eprintln!("xor: baseline {base:.4} linear {lin_score:.4} nonlinear {non_score:.4}");
    assert!(lin_score >= 0.8 * base);
    assert!(non_score <= 0.3 * base);
    assert!(non_score < lin_score);
}

#[test]
fn early_stopping_returns_best_validation_epoch() {
    let mut rng = seed::rng_from(5);
    for s in 0..5u64 {
        // Noisy targets so validation error bottoms out and rises again.
        let xs = gaussian_rows(60, 10, &mut rng);
        let data: Vec<Sample> = xs
            .into_iter()
            .map(|x| {
                let y = rng.random_range(0.0..1.0);
                sample(x, y)
            })
            .collect();
        let cfg = ProbeConfig {
            arch: ProbeArch::Nonlinear,
            seed: s,
            ..Default::default()
        };
        let t = train_probe(&data[..40], &data[40..], &cfg).unwrap();
        let returned = mse(&t.probe, &data[40..]);
        assert!((returned - t.val_history[t.best_epoch]).abs() < 1e-12);
        for v in &t.val_history[t.best_epoch..] {
            assert!(returned <= *v + 1e-12);
        }
        assert!(t.val_history.len() <= t.best_epoch + cfg.patience + 1);
    }
}

#[test]
fn balanced_binary_targets_have_quarter_baseline() {
    let train = [0.0, 1.0, 0.0, 1.0];
    let test = [1.0, 0.0];
    assert_eq!(baseline_score(&train, &test).unwrap(), 0.25);
}

#[test]
fn rescaling_preserves_order() {
    let ratings = parse_ratings(debias_core::data::OCCUPATION_RATINGS).unwrap();
    let mut raw: Vec<usize> = (0..ratings.len()).collect();
    let mut scaled = raw.clone();
    raw.sort_by(|&a, &b| ratings[a].rating.total_cmp(&ratings[b].rating));
    scaled.sort_by(|&a, &b| rescale_rating(ratings[a].rating).total_cmp(&rescale_rating(ratings[b].rating)));
    assert_eq!(raw, scaled);
}
