//! Occupation-task bias probes.
//!
//! Template sentences are filled with occupation words, embedded, and a
//! small regressor is trained to predict each occupation's gender
//! stereotype rating. The regressor's held-out MSE is the bias score:
//! higher means less bias could be extracted. The constant predictor at the
//! training-target mean gives the baseline score, the ceiling a fully
//! debiased embedding should approach.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairminer::Template;
use crate::par::Exec;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationRating {
    pub occupation: String,
    /// 0 = stereotypically female, 1 = stereotypically male.
    pub rating: f64,
}

/// Map a raw rating in [-1, 1] onto the sigmoid range [0, 1].
pub fn rescale_rating(raw: f64) -> f64 {
    (raw + 1.0) / 2.0
}

/// Parse `occupation,rating` CSV with raw ratings in [-1, 1].
pub fn parse_ratings(text: &str) -> Result<Vec<OccupationRating>> {
    let bad = |detail: String| Error::Format {
        what: "ratings file",
        detail,
    };
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    match lines.next() {
        Some(h) if h.replace(' ', "").eq_ignore_ascii_case("occupation,rating") => {}
        other => return Err(bad(format!("expected header `occupation,rating`, found {other:?}"))),
    }
    let mut out: Vec<OccupationRating> = Vec::new();
    for line in lines {
        let (occ, raw) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("line {line:?} lacks a comma")))?;
        let occupation = occ.trim().to_lowercase();
        let raw: f64 = raw
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad rating in {line:?}")))?;
        if !(-1.0..=1.0).contains(&raw) {
            return Err(bad(format!("rating {raw} outside [-1, 1]")));
        }
        if out.iter().any(|r| r.occupation == occupation) {
            return Err(bad(format!("duplicate occupation {occupation:?}")));
        }
        out.push(OccupationRating {
            occupation,
            rating: rescale_rating(raw),
        });
    }
    Ok(out)
}

pub fn load_ratings(path: impl AsRef<Path>) -> Result<Vec<OccupationRating>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeArch {
    Linear,
    Nonlinear,
}

impl ProbeArch {
    pub fn name(self) -> &'static str {
        match self {
            ProbeArch::Linear => "linear",
            ProbeArch::Nonlinear => "nonlinear",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub arch: ProbeArch,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// train / validation / test fractions of the occupations.
    pub split: [f64; 3],
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            arch: ProbeArch::Linear,
            lr: 0.01,
            max_epochs: 50,
            patience: 5,
            batch_size: 1,
            seed: 0,
            split: [0.6, 0.2, 0.2],
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.split.iter().any(|&f| f < 0.0) {
            return Err(Error::invalid("probe config: split fractions must be non-negative and sum to 1"));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::invalid("probe config: patience must be below max_epochs"));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::invalid("probe config: batch_size and lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Occupations in each split, in split order.
    pub occupations: [Vec<String>; 3],
}

/// Embeddings of every (template, occupation) sentence, grouped by occupation.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationEmbeddings {
    pub entries: Vec<(OccupationRating, Vec<Vec<f64>>)>,
}

impl OccupationEmbeddings {
    pub fn compute<E>(embed_fn: E, ratings: &[OccupationRating], templates: &[Template]) -> Result<Self>
    where
        E: Fn(&str) -> Result<Vec<f64>>,
    {
        if templates.is_empty() {
            return Err(Error::invalid("probe dataset needs at least one template"));
        }
        let entries = ratings
            .iter()
            .map(|r| {
                let embs = templates
                    .iter()
                    .map(|t| embed_fn(&t.fill(&r.occupation)))
                    .collect::<Result<Vec<_>>>()?;
                Ok((r.clone(), embs))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    /// Apply `f` to every embedding (e.g. a post-hoc projection).
    pub fn map<M>(&self, f: M) -> Result<Self>
    where
        M: Fn(&[f64]) -> Result<Vec<f64>>,
    {
        let entries = self
            .entries
            .iter()
            .map(|(r, embs)| Ok((r.clone(), embs.iter().map(|e| f(e)).collect::<Result<Vec<_>>>()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    /// Seeded split by occupation: no occupation spans two splits.
    pub fn split(&self, fractions: [f64; 3], seed: u64) -> Result<ProbeDataset> {
        let n = self.entries.len();
        if n < 10 {
            return Err(Error::invalid(format!("probe dataset needs at least 10 occupations, got {n}")));
        }
        let n_train = (fractions[0] * n as f64).round() as usize;
        let n_val = (fractions[1] * n as f64).round() as usize;
        if n_train == 0 || n_val == 0 || n_train + n_val >= n {
            return Err(Error::invalid(format!("{n} occupations cannot populate all three splits")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::derive_rng(seed, "probe-split", 0));
        let mut splits: [Vec<Sample>; 3] = Default::default();
        let mut occupations: [Vec<String>; 3] = Default::default();
        for (rank, &i) in order.iter().enumerate() {
            let which = if rank < n_train {
                0
            } else if rank < n_train + n_val {
                1
            } else {
                2
            };
            let (r, embs) = &self.entries[i];
            occupations[which].push(r.occupation.clone());
            splits[which].extend(embs.iter().map(|e| Sample { x: e.clone(), y: r.rating }));
        }
        let [train, val, test] = splits;
        Ok(ProbeDataset {
            train,
            val,
            test,
            occupations,
        })
    }
}

/// Embed every (template, occupation) sentence and split by occupation.
pub fn build_probe_dataset<E>(
    embed_fn: E,
    ratings: &[OccupationRating],
    templates: &[Template],
    cfg: &ProbeConfig,
) -> Result<ProbeDataset>
where
    E: Fn(&str) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    OccupationEmbeddings::compute(embed_fn, ratings, templates)?.split(cfg.split, cfg.seed)
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    n_in: usize,
    n_out: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Dense {
    fn glorot(n_in: usize, n_out: usize, rng: &mut seed::Rng) -> Self {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        Self {
            n_in,
            n_out,
            w: (0..n_in * n_out).map(|_| rng.random_range(-limit..limit)).collect(),
            b: vec![0.0; n_out],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (a, &xa) in x.iter().enumerate() {
            let row = &self.w[a * self.n_out..(a + 1) * self.n_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xa * w;
            }
        }
        out
    }
}

/// A stereotype regressor: sigmoid output over either the raw embedding
/// (linear) or three 20-unit ReLU layers (nonlinear).
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    arch: ProbeArch,
    layers: Vec<Dense>,
}

pub const HIDDEN_UNITS: usize = 20;
pub const HIDDEN_LAYERS: usize = 3;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Probe {
    pub fn new(arch: ProbeArch, dim: usize, seed: u64) -> Self {
        let mut rng = seed::derive_rng(seed, "probe-init", 0);
        let layers = match arch {
            ProbeArch::Linear => vec![Dense::glorot(dim, 1, &mut rng)],
            ProbeArch::Nonlinear => {
                let mut layers = Vec::with_capacity(HIDDEN_LAYERS + 1);
                let mut width = dim;
                for _ in 0..HIDDEN_LAYERS {
                    layers.push(Dense::glorot(width, HIDDEN_UNITS, &mut rng));
                    width = HIDDEN_UNITS;
                }
                layers.push(Dense::glorot(width, 1, &mut rng));
                layers
            }
        };
        Self { arch, layers }
    }

    /// A probe that ignores its input and always predicts `value` ∈ (0, 1).
    pub fn constant(dim: usize, value: f64) -> Self {
        let logit = (value / (1.0 - value)).ln();
        Self {
            arch: ProbeArch::Linear,
            layers: vec![Dense {
                n_in: dim,
                n_out: 1,
                w: vec![0.0; dim],
                b: vec![logit],
            }],
        }
    }

    pub fn arch(&self) -> ProbeArch {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        sigmoid(h[0])
    }

    /// One SGD step on mean squared error over `batch`; returns the batch loss.
    fn sgd_step(&mut self, batch: &[&Sample], lr: f64) -> f64 {
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
            .collect();
        let inv = 1.0 / batch.len() as f64;
        let last = self.layers.len() - 1;
        let mut loss = 0.0;
        for s in batch {
            let mut acts = Vec::with_capacity(self.layers.len() + 1);
            acts.push(s.x.clone());
            for (i, layer) in self.layers.iter().enumerate() {
                let mut h = layer.forward(acts.last().expect("input"));
                if i < last {
                    h.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                acts.push(h);
            }
            let p = sigmoid(acts[last + 1][0]);
            let err = p - s.y;
            loss += err * err * inv;
            let mut delta = vec![2.0 * err * inv * p * (1.0 - p)];
            for i in (0..=last).rev() {
                let layer = &self.layers[i];
                let input = &acts[i];
                let (gw, gb) = &mut grads[i];
                let mut d_in = vec![0.0; layer.n_in];
                for (a, &xa) in input.iter().enumerate() {
                    let row = &layer.w[a * layer.n_out..(a + 1) * layer.n_out];
                    let grow = &mut gw[a * layer.n_out..(a + 1) * layer.n_out];
                    let mut acc = 0.0;
                    for o in 0..layer.n_out {
                        grow[o] += xa * delta[o];
                        acc += row[o] * delta[o];
                    }
                    d_in[a] = acc;
                }
                for (g, &d) in gb.iter_mut().zip(&delta) {
                    *g += d;
                }
                if i > 0 {
                    for (d, &h) in d_in.iter_mut().zip(input) {
                        if h <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                delta = d_in;
            }
        }
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads) {
            for (w, g) in layer.w.iter_mut().zip(gw) {
                *w -= lr * g;
            }
            for (b, g) in layer.b.iter_mut().zip(gb) {
                *b -= lr * g;
            }
        }
        loss
    }
}

pub fn mse(probe: &Probe, samples: &[Sample]) -> f64 {
    samples.iter().map(|s| (probe.predict(&s.x) - s.y).powi(2)).sum::<f64>() / samples.len() as f64
}

/// Test-set MSE of `probe`: the bias score (higher = less bias).
pub fn bias_score(probe: &Probe, test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    Ok(mse(probe, test))
}

/// MSE on `test_targets` of the constant predictor at the mean of `train_targets`.
pub fn baseline_score(train_targets: &[f64], test_targets: &[f64]) -> Result<f64> {
    if train_targets.is_empty() || test_targets.is_empty() {
        return Err(Error::invalid("baseline score needs nonempty targets"));
    }
    let mean = train_targets.iter().sum::<f64>() / train_targets.len() as f64;
    Ok(test_targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / test_targets.len() as f64)
}

pub fn dataset_baseline(data: &ProbeDataset) -> Result<f64> {
    let ys = |s: &[Sample]| s.iter().map(|x| x.y).collect::<Vec<_>>();
    baseline_score(&ys(&data.train), &ys(&data.test))
}

#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub probe: Probe,
    /// Validation MSE after each completed epoch.
    pub val_history: Vec<f64>,
    pub best_epoch: usize,
}

/// Mini-batch SGD on MSE with per-epoch shuffling and early stopping on
/// validation MSE; returns the parameters of the best validation epoch.
pub fn train_probe(train: &[Sample], val: &[Sample], cfg: &ProbeConfig) -> Result<TrainedProbe> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("probe training needs nonempty train and validation sets"));
    }
    let dim = train[0].x.len();
    if let Some(s) = train.iter().chain(val).find(|s| s.x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: s.x.len(),
        });
    }
    let mut probe = Probe::new(cfg.arch, dim, cfg.seed);
    let mut rng = seed::derive_rng(cfg.seed, "probe-shuffle", 0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, probe.clone(), 0);
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = probe.sgd_step(&batch, cfg.lr);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: epoch,
                    detail: "probe loss".into(),
                });
            }
        }
        let v = mse(&probe, val);
        history.push(v);
        if v < best.0 {
            best = (v, probe.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainedProbe {
        probe: best.1,
        val_history: history,
        best_epoch: best.2,
    })
}

/// Scores of one architecture over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub arch: ProbeArch,
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Mean of the per-seed baseline scores.
    pub baseline: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

/// Split, train and score one probe per seed. Each seed draws its own split
/// and initialization.
pub fn evaluate_probe(
    table: &OccupationEmbeddings,
    cfg: &ProbeConfig,
    seeds: &[u64],
    exec: Exec,
) -> Result<ProbeReport> {
    cfg.validate()?;
    let runs = exec.map(seeds, |&s| -> Result<(f64, f64)> {
        let data = table.split(cfg.split, s)?;
        let probe_cfg = ProbeConfig { seed: s, ..cfg.clone() };
        let trained = train_probe(&data.train, &data.val, &probe_cfg)?;
        Ok((bias_score(&trained.probe, &data.test)?, dataset_baseline(&data)?))
    });
    let mut scores = Vec::with_capacity(seeds.len());
    let mut baselines = Vec::with_capacity(seeds.len());
    for r in runs {
        let (s, b) = r?;
        scores.push(s);
        baselines.push(b);
    }
    let (mean, std) = mean_std(&scores);
    Ok(ProbeReport {
        arch: cfg.arch,
        seeds: seeds.to_vec(),
        scores,
        mean,
        std,
        baseline: mean_std(&baselines).0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(n: usize, templates: usize) -> OccupationEmbeddings {
        OccupationEmbeddings {
            entries: (0..n)
                .map(|i| {
                    (
                        OccupationRating {
                            occupation: format!("job{i}"),
                            rating: i as f64 / n as f64,
                        },
                        (0..templates).map(|t| vec![i as f64, t as f64]).collect(),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn parses_and_rescales_ratings() {
        let r = parse_ratings("occupation,rating\nnurse,-0.9\nPilot, 0.5\n").unwrap();
        assert_eq!(r.len(), 2);
        assert!((r[0].rating - 0.05).abs() < 1e-12);
        assert_eq!(r[1].occupation, "pilot");
        assert!((r[1].rating - 0.75).abs() < 1e-12);
        assert!(parse_ratings("job,score\nx,0").is_err());
        assert!(parse_ratings("occupation,rating\nx,2").is_err());
        assert!(parse_ratings("occupation,rating\nx,0\nx,0.1").is_err());
    }

    #[test]
    fn split_counts() {
        let d = table(10, 12).split([0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (72, 24, 24));
        assert_eq!(table(10, 12).split([0.6, 0.2, 0.2], 3).unwrap(), d);
        assert!(table(9, 12).split([0.6, 0.2, 0.2], 3).is_err());
    }

    #[test]
    fn split_never_shares_occupations() {
        for s in 0..10 {
            let d = table(40, 2).split([0.6, 0.2, 0.2], s).unwrap();
            for occ in &d.occupations[2] {
                assert!(!d.occupations[0].contains(occ));
                assert!(!d.occupations[1].contains(occ));
            }
            for occ in &d.occupations[1] {
                assert!(!d.occupations[0].contains(occ));
            }
        }
    }

    #[test]
    fn baseline_values() {
        assert_eq!(baseline_score(&[0.3, 0.3], &[0.3, 0.3, 0.3]).unwrap(), 0.0);
        assert_eq!(baseline_score(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.25);
        assert!(baseline_score(&[], &[1.0]).is_err());
    }

    #[test]
    fn bias_score_definitions() {
        let test = vec![Sample { x: vec![1.0], y: 0.2 }, Sample { x: vec![-1.0], y: 0.6 }];
        let train_ys = [0.2, 0.6, 0.4, 0.4];
        let mean = train_ys.iter().sum::<f64>() / 4.0;
        let constant = Probe::constant(1, mean);
        let s = bias_score(&constant, &test).unwrap();
        let b = baseline_score(&train_ys, &[0.2, 0.6]).unwrap();
        assert!((s - b).abs() < 1e-12);
        assert!(bias_score(&constant, &[]).is_err());
    }

    #[test]
    fn probe_outputs_stay_in_unit_interval() {
        for arch in [ProbeArch::Linear, ProbeArch::Nonlinear] {
            let p = Probe::new(arch, 3, 1);
            for x in [[0.0, 0.0, 0.0], [1e3, -1e3, 5.0], [-50.0, 20.0, 1.0]] {
                let y = p.predict(&x);
                assert!((0.0..=1.0).contains(&y));
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ProbeConfig::default();
        assert!(c.validate().is_ok());
        c.split = [0.5, 0.2, 0.2];
        assert!(c.validate().is_err());
        c.split = [0.6, 0.2, 0.2];
        c.patience = 50;
        assert!(c.validate().is_err());
    }
}
