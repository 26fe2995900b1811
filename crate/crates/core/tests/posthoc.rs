use debias_core::oracles::planted_labeled_set;
use debias_core::posthoc::*;
use debias_core::seed;
use debias_core::{data, Error};
use rand_distr::{Distribution, Normal};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng_from(seed);
    let g = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| (0..d).map(|_| g.sample(&mut rng)).collect()).collect()
}

#[test]
fn sent_debias_recovers_planted_direction() {
    let d = 12;
    let mut u: Vec<f64> = (0..d).map(|i| (i as f64 * 0.7).sin()).collect();
    let n = norm(&u);
    u.iter_mut().for_each(|x| *x /= n);
    let noise = random_vectors(200, d, 1);
    let diffs: Vec<Vec<f64>> = noise
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let c = 3.0 * ((i % 7) as f64 - 3.0);
            u.iter().zip(z).map(|(ui, zi)| c * ui + 0.05 * zi).collect()
        })
        .collect();
    let s = sent_debias_from_differences(&diffs, 2).unwrap();
    let cos: f64 = s.directions[0].iter().zip(&u).map(|(a, b)| a * b).sum();
    assert!(cos.abs() > 0.999, "cos {cos}");
    assert!(s.explained_variance[0] > 0.99);
    assert!(s.explained_variance[0] >= s.explained_variance[1]);
    let cleaned = s.apply(&u).unwrap();
    assert!(norm(&cleaned) < 0.05);
}

#[test]
fn sent_debias_projector_algebra() {
    let diffs = random_vectors(40, 10, 2);
    for k in 1..=3 {
        let p = Projector::SentDebias(sent_debias_from_differences(&diffs, k).unwrap());
        let m = p.projection_matrix();
        assert!(idempotence_error(&m, 10) < 1e-10);
        assert_eq!(matrix_rank(&m, 10, 1e-8), 10 - k);
        for e in random_vectors(20, 10, 3) {
            let once = p.apply(&e).unwrap();
            let twice = p.apply(&once).unwrap();
            assert!(norm(&once) <= norm(&e) + 1e-12);
            assert!(once.iter().zip(&twice).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }
    assert!(matches!(
        sent_debias_from_differences(&diffs, 11),
        Err(Error::InsufficientRank { .. })
    ));
}

#[test]
fn inlp_strips_planted_signal_toward_chance() {
    let set = planted_labeled_set(400, 8, 5);
    let p = inlp_fit(&set, 8, &InlpConfig::default()).unwrap();
    eprintln!("accuracies {:?} chance {}", p.accuracies, p.chance);
    assert!(p.iterations() >= 2);
    assert!(p.accuracies[0] > 0.95);
    assert!(p.accuracies.windows(2).all(|w| w[1] <= w[0]));
    let last = *p.accuracies.last().unwrap();
    assert!(last <= p.chance + InlpConfig::default().chance_margin);
}

#[test]
fn inlp_rank_drops_by_one_per_iteration() {
    let set = planted_labeled_set(400, 8, 6);
    let cfg = InlpConfig::default();
    for n in 0..=3 {
        let p = inlp_fit(&set, n, &cfg).unwrap();
        assert_eq!(matrix_rank(&p.matrix, 8, 1e-6), 8 - p.iterations());
        assert!(idempotence_error(&p.matrix, 8) < 1e-10);
        for e in random_vectors(10, 8, 7) {
            assert!(norm(&p.apply(&e).unwrap()) <= norm(&e) + 1e-12);
        }
        for (i, a) in p.removed.iter().enumerate() {
            for b in &p.removed[i + 1..] {
                assert!(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().abs() < 1e-10);
            }
        }
    }
    assert!(inlp_fit(&set, 9, &cfg).is_err());
}

#[test]
fn gender_labeled_set_is_balanced() {
    let embed = |s: &str| Ok(vec![s.len() as f64, s.matches('e').count() as f64]);
    let set = build_gender_labeled_set(embed, &data::gender_groups(), &data::templates()).unwrap();
    assert_eq!(set.x.len(), 264);
    assert_eq!(set.labels.iter().filter(|&&l| l == 0).count(), 132);
    assert_eq!(set.labels.iter().filter(|&&l| l == 1).count(), 132);
}

#[test]
fn projector_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = planted_labeled_set(200, 6, 8);
    let inlp = Projector::Inlp(inlp_fit(&set, 2, &InlpConfig::default()).unwrap());
    let sd = Projector::SentDebias(sent_debias_from_differences(&random_vectors(20, 6, 9), 2).unwrap());
    for p in [inlp, sd] {
        let path = dir.path().join(format!("{}.prj1", p.method()));
        p.save(&path).unwrap();
        let back = Projector::load(&path).unwrap();
        assert_eq!(back.method(), p.method());
        let e = vec![0.3, -1.0, 2.0, 0.5, 0.0, 1.0];
        let (a, b) = (p.apply(&e).unwrap(), back.apply(&e).unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
    }
}
