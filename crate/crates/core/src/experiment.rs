//! Experiment configuration, the shared training/evaluation pipeline and
//! report tables.
//!
//! A [`Lab`] holds everything derived deterministically from an
//! [`ExperimentConfig`]: assets, vocabulary, mined pairs and the tokenized
//! training data. Every random choice is seeded from `config.seed` through
//! [`seed::derive_seed`] with a fixed component name:
//!
//! | component        | index        | used for                        |
//! |------------------|--------------|---------------------------------|
//! | `init`           | 0            | base model weights              |
//! | `pretrain`       | 0            | base pretraining schedule       |
//! | `run:<method>`   | seed index   | per-seed training schedule      |
//! | `probe`          | seed index   | probe split and initialization  |
//! | `inlp`           | seed index   | INLP classifier splits and SGD  |
//! | `mine`           | 0            | multi-term replacement choice   |
//! | `train`          | 0            | schedule of the `train` command |

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbedderModel, ModelConfig};
use crate::pairminer::{self, ContrastivePair, Template, TermGroup};
use crate::par::Exec;
use crate::posthoc::{self, InlpConfig, Projector};
use crate::probes::{self, OccupationEmbeddings, OccupationRating, ProbeArch, ProbeConfig, ProbeReport};
use crate::seed::derive_seed;
use crate::synth::{self, CorpusSpec};
use crate::trainer::{self, EncodedPair, EncodedTask, RunOutput, Schedule, ScheduleMode, ToyTask, TrainingData};
use crate::vocab::{TokenId, Vocab};
use crate::{data, Error as CoreError};

/// The debiasing variants compared in a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Pre-trained and fine-tuned without debiasing.
    Original,
    #[serde(rename = "sentdebias")]
    SentDebias,
    #[serde(rename = "nullitout")]
    NullItOut,
    FineP,
    PreP,
    PrefineP,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Original,
        Method::SentDebias,
        Method::NullItOut,
        Method::FineP,
        Method::PreP,
        Method::PrefineP,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Original => "original",
            Method::SentDebias => "sentdebias",
            Method::NullItOut => "nullitout",
            Method::FineP => "fine_p",
            Method::PreP => "pre_p",
            Method::PrefineP => "prefine_p",
        }
    }

    /// Whether the method involves fine-tuning on the toy task (and so has
    /// a downstream accuracy).
    pub fn has_accuracy(self) -> bool {
        self != Method::PreP
    }

    pub fn is_posthoc(self) -> bool {
        matches!(self, Method::SentDebias | Method::NullItOut)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// Input files; any unset path falls back to the bundled asset (or, for the
/// corpus, to the synthetic gender-correlated corpus).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub term_groups: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub ratings: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: None,
            term_groups: None,
            templates: None,
            ratings: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self { n_train: 400, n_test: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub paths: Paths,
    /// Synthetic corpus, used when `paths.corpus` is unset.
    pub corpus: CorpusSpec,
    pub task: TaskSpec,
    /// `vocab_size` is overwritten with the size of the built vocabulary.
    pub model: ModelConfig,
    /// Schedule run by the `train` command; method runs reuse its rates,
    /// batch sizes and ratio.
    pub schedule: Schedule,
    /// MLM steps of the shared base model.
    pub pretrain_steps: usize,
    /// Pretraining-phase steps of `pre_p` and `prefine_p` when continuing
    /// from the base model.
    pub debias_pretrain_steps: usize,
    /// Fine-tuning steps of every fine-tuned method.
    pub finetune_steps: usize,
    pub probe: ProbeConfig,
    pub inlp: InlpConfig,
    /// INLP iteration cap; unset runs until the classifier is at chance.
    pub inlp_iters: Option<usize>,
    pub sent_debias_k: usize,
    pub max_pairs: usize,
    pub min_freq: usize,
    pub methods: Vec<Method>,
    pub n_seeds: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            corpus: CorpusSpec {
                n_sentences: 3000,
                occupation_share: 0.3,
                topic_share: 0.05,
                framed_share: 0.25,
                seed: 0,
            },
            task: TaskSpec::default(),
            model: ModelConfig {
                d_model: 64,
                d_ff: 128,
                init_std: 0.1,
                ..ModelConfig::default()
            },
            schedule: Schedule {
                mode: ScheduleMode::PlainPretrain,
                total_steps: 4000,
                learning_rate: 0.2,
                debias_learning_rate: Some(0.005),
                ..Schedule::default()
            },
            pretrain_steps: 4000,
            debias_pretrain_steps: 500,
            finetune_steps: 300,
            probe: ProbeConfig::default(),
            inlp: InlpConfig::default(),
            inlp_iters: None,
            sent_debias_k: 1,
            max_pairs: 100_000,
            min_freq: 1,
            methods: Method::ALL.to_vec(),
            n_seeds: 5,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.paths;
        for path in [&p.corpus, &p.term_groups, &p.templates, &p.ratings].into_iter().flatten() {
            if !path.exists() {
                return Err(Error::invalid(format!("config: {} does not exist", path.display())));
            }
        }
        if self.n_seeds == 0 {
            return Err(Error::invalid("config: n_seeds must be at least 1"));
        }
        if self.sent_debias_k == 0 {
            return Err(Error::invalid("config: sent_debias_k must be at least 1"));
        }
        if self.min_freq == 0 {
            return Err(Error::invalid("config: min_freq must be at least 1"));
        }
        ModelConfig { vocab_size: self.model.vocab_size.max(5), ..self.model.clone() }.validate()?;
        self.schedule.validate()?;
        self.probe.validate()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).collect()
    }
}

/// Raw inputs of an experiment.
#[derive(Debug, Clone)]
pub struct Assets {
    pub groups: Vec<TermGroup>,
    pub templates: Vec<Template>,
    pub ratings: Vec<OccupationRating>,
    pub corpus: Vec<String>,
    pub task: ToyTask,
}

/// Non-empty trimmed lines.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

impl Assets {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let p = &cfg.paths;
        let groups = match &p.term_groups {
            Some(path) => pairminer::load_term_groups(path)?,
            None => data::gender_groups(),
        };
        let templates = match &p.templates {
            Some(path) => pairminer::load_templates(path)?,
            None => data::templates(),
        };
        let ratings = match &p.ratings {
            Some(path) => probes::load_ratings(path)?,
            None => probes::parse_ratings(data::OCCUPATION_RATINGS)?,
        };
        let corpus = match &p.corpus {
            Some(path) => read_corpus(path)?,
            None => synth::gender_correlated_corpus(&ratings, &templates, &cfg.corpus),
        };
        let task = synth::toy_task(&ratings, cfg.task.n_train, cfg.task.n_test, cfg.seed);
        Ok(Self {
            groups,
            templates,
            ratings,
            corpus,
            task,
        })
    }
}

/// Contrastive pairs of the configured corpus.
pub fn mine(config: &ExperimentConfig, assets: &Assets) -> Vec<ContrastivePair> {
    pairminer::mine_pairs(
        &assets.corpus,
        &assets.groups,
        derive_seed(config.seed, "mine", 0),
        config.max_pairs,
    )
}

/// Everything a training or evaluation run needs, derived from a config.
#[derive(Debug, Clone)]
pub struct Lab {
    pub config: ExperimentConfig,
    pub assets: Assets,
    pub vocab: Vocab,
    pub pairs: Vec<ContrastivePair>,
    corpus: Vec<Vec<TokenId>>,
    encoded_pairs: Vec<EncodedPair>,
    task: EncodedTask,
    probe_sentences: Vec<Vec<TokenId>>,
    pub exec: Exec,
}

impl Lab {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let assets = Assets::load(&config)?;
        Self::with_assets(config, assets)
    }

    pub fn with_assets(config: ExperimentConfig, assets: Assets) -> Result<Self> {
        let vocab = Self::build_vocab(&config, &assets)?;
        Self::with_vocab(config, assets, vocab)
    }

    /// Use a saved vocabulary, e.g. the one written next to a checkpoint.
    pub fn with_vocab(config: ExperimentConfig, assets: Assets, vocab: Vocab) -> Result<Self> {
        let pairs = mine(&config, &assets);
        let max_len = config.model.max_seq_len;
        let corpus = assets.corpus.iter().map(|s| vocab.tokenize(s, max_len)).collect();
        let encoded_pairs = trainer::encode_pairs(&vocab, &pairs, max_len);
        let task = assets.task.encode(&vocab, max_len);
        // The collapse guard watches filled occupation templates.
        let probe_sentences = assets
            .ratings
            .iter()
            .take(12)
            .zip(assets.templates.iter().cycle())
            .map(|(r, t)| vocab.tokenize(&t.fill(&r.occupation), max_len))
            .collect();
        Ok(Self {
            config,
            assets,
            vocab,
            pairs,
            corpus,
            encoded_pairs,
            task,
            probe_sentences,
            exec: Exec::default(),
        })
    }

    /// Corpus words (at `min_freq`) plus every word the probes, templates
    /// and toy task can produce.
    fn build_vocab(config: &ExperimentConfig, assets: &Assets) -> Result<Vocab> {
        let mut text: Vec<String> = Vec::new();
        let corpus_vocab = Vocab::build(&assets.corpus, config.min_freq)?;
        text.extend((0..corpus_vocab.len() as TokenId).filter_map(|i| corpus_vocab.token(i)).map(String::from));
        text.extend(assets.templates.iter().map(|t| t.text().to_string()));
        text.extend(assets.ratings.iter().map(|r| r.occupation.clone()));
        text.extend(assets.groups.iter().flat_map(|g| g.terms().iter().cloned()));
        text.extend(assets.task.train.iter().chain(&assets.task.test).map(|(s, _)| s.clone()));
        Vocab::build(&text, 1)
    }

    /// Load a checkpoint and check that it matches the vocabulary.
    pub fn load_model(&self, path: impl AsRef<Path>) -> Result<EmbedderModel<f32>> {
        let model = crate::checkpoint::load(path.as_ref())?;
        if model.config.vocab_size != self.vocab.len() {
            return Err(Error::invalid(format!(
                "{}: checkpoint vocabulary has {} tokens, the configured vocabulary {}",
                path.as_ref().display(),
                model.config.vocab_size,
                self.vocab.len()
            )));
        }
        Ok(model)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            ..self.config.model.clone()
        }
    }

    pub fn data(&self) -> TrainingData<'_> {
        TrainingData {
            corpus: &self.corpus,
            pairs: &self.encoded_pairs,
            task: Some(&self.task),
            probe_sentences: &self.probe_sentences,
        }
    }

    /// Sentences whose mean embedding norm the collapse guard watches.
    pub fn guard_sentences(&self) -> &[Vec<TokenId>] {
        &self.probe_sentences
    }

    pub fn fresh_model(&self) -> Result<EmbedderModel<f32>> {
        EmbedderModel::new(self.model_config(), derive_seed(self.config.seed, "init", 0))
    }

    pub fn run(&self, schedule: &Schedule, model: EmbedderModel<f32>) -> Result<RunOutput> {
        trainer::run_schedule(schedule, model, self.data(), self.exec)
    }

    /// Plain MLM pretraining from a fresh model; the starting point of every
    /// method.
    pub fn pretrain_base(&self) -> Result<RunOutput> {
        let schedule = Schedule {
            mode: ScheduleMode::PlainPretrain,
            total_steps: self.config.pretrain_steps,
            seed: derive_seed(self.config.seed, "pretrain", 0),
            ..self.config.schedule.clone()
        };
        self.run(&schedule, self.fresh_model()?)
    }

    /// The configured schedule as run by the `train` command.
    pub fn train_schedule(&self) -> Schedule {
        Schedule {
            seed: derive_seed(self.config.seed, "train", 0),
            ..self.config.schedule.clone()
        }
    }

    /// Starting model of the `train` command: the schedule's pretraining
    /// checkpoint when set, a fresh model otherwise.
    pub fn initial_model(&self) -> Result<EmbedderModel<f32>> {
        match &self.config.schedule.pretrain_checkpoint {
            Some(path) => self.load_model(path),
            None => self.fresh_model(),
        }
    }

    /// Schedule for one training run of `method` starting from the base.
    pub fn method_schedule(&self, method: Method, seed_index: u64) -> Schedule {
        let c = &self.config;
        let (mode, total, finetune) = match method {
            Method::Original | Method::SentDebias | Method::NullItOut => {
                (ScheduleMode::PlainFinetune, c.finetune_steps, None)
            }
            Method::FineP => (ScheduleMode::FineP, c.finetune_steps, None),
            Method::PreP => (ScheduleMode::PreP, c.debias_pretrain_steps, None),
            Method::PrefineP => (ScheduleMode::PrefineP, c.debias_pretrain_steps, Some(c.finetune_steps)),
        };
        // Post-hoc methods share the original model of the same seed.
        let stream = if method.is_posthoc() { Method::Original } else { method };
        Schedule {
            mode,
            total_steps: total,
            finetune_steps: finetune,
            seed: derive_seed(c.seed, &format!("run:{}", stream.name()), seed_index),
            pretrain_checkpoint: None,
            ..c.schedule.clone()
        }
    }

    /// Embedding function over raw sentences, with an optional projector.
    pub fn embedder<'a>(
        &'a self,
        model: &'a EmbedderModel<f32>,
        projector: Option<&'a Projector>,
    ) -> impl Fn(&str) -> Result<Vec<f64>> + Sync + 'a {
        let max_len = self.config.model.max_seq_len;
        move |s: &str| {
            let e: Vec<f64> = model.embed(&self.vocab.tokenize(s, max_len))?.iter().map(|&x| x as f64).collect();
            match projector {
                Some(p) => p.apply(&e),
                None => Ok(e),
            }
        }
    }

    /// Toy-task test accuracy, classifying projected embeddings when a
    /// projector is given.
    pub fn task_accuracy(&self, model: &EmbedderModel<f32>, projector: Option<&Projector>) -> Result<f64> {
        let Some(p) = projector else {
            return trainer::accuracy(model, &self.task.test, self.exec);
        };
        let hits = self.exec.map(&self.task.test, |(ids, y)| -> Result<bool> {
            let e: Vec<f64> = model.embed(ids)?.iter().map(|&x| x as f64).collect();
            let projected: Vec<f32> = p.apply(&e)?.iter().map(|&x| x as f32).collect();
            let logits = model.classify_embedding(&projected);
            let pred = logits
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &l)| if l > best.1 { (i, l) } else { best })
                .0;
            Ok(pred == *y)
        });
        let mut correct = 0usize;
        for h in hits {
            correct += h? as usize;
        }
        Ok(correct as f64 / self.task.test.len() as f64)
    }

    pub fn occupation_table(&self, model: &EmbedderModel<f32>, projector: Option<&Projector>) -> Result<OccupationEmbeddings> {
        OccupationEmbeddings::compute(self.embedder(model, projector), &self.assets.ratings, &self.assets.templates)
    }

    pub fn fit_sent_debias(&self, model: &EmbedderModel<f32>) -> Result<Projector> {
        let subspace = posthoc::sent_debias_fit(self.embedder(model, None), &self.pairs, self.config.sent_debias_k)?;
        Ok(Projector::SentDebias(subspace))
    }

    pub fn fit_inlp(&self, model: &EmbedderModel<f32>, seed_index: u64) -> Result<Projector> {
        let set = posthoc::build_gender_labeled_set(self.embedder(model, None), &self.assets.groups, &self.assets.templates)?;
        let cfg = InlpConfig {
            seed: derive_seed(self.config.seed, "inlp", seed_index),
            ..self.config.inlp.clone()
        };
        let iters = self.config.inlp_iters.unwrap_or(set.dim()).min(set.dim());
        Ok(Projector::Inlp(posthoc::inlp_fit(&set, iters, &cfg)?))
    }

    /// Probe seed for run `seed_index`; shared by all methods so their
    /// scores are compared on the same occupation splits.
    pub fn probe_seed(&self, seed_index: u64) -> u64 {
        derive_seed(self.config.seed, "probe", seed_index)
    }

    /// Linear and nonlinear probe reports over the given seeds.
    pub fn probe(&self, table: &OccupationEmbeddings, seeds: &[u64]) -> Result<[ProbeReport; 2]> {
        let run = |arch| {
            let cfg = ProbeConfig { arch, ..self.config.probe.clone() };
            probes::evaluate_probe(table, &cfg, seeds, self.exec)
        };
        Ok([run(ProbeArch::Linear)?, run(ProbeArch::Nonlinear)?])
    }

    /// One seed of one method, starting from `base`.
    pub fn run_method(&self, method: Method, base: &EmbedderModel<f32>, seed_index: u64) -> Result<SeedResult> {
        let out = self.run(&self.method_schedule(method, seed_index), base.clone())?;
        self.evaluate_method(method, &out.model, seed_index)
    }

    /// Fit the projector (for post-hoc methods), then score `model`.
    pub fn evaluate_method(&self, method: Method, model: &EmbedderModel<f32>, seed_index: u64) -> Result<SeedResult> {
        let projector = match method {
            Method::SentDebias => Some(self.fit_sent_debias(model)?),
            Method::NullItOut => Some(self.fit_inlp(model, seed_index)?),
            _ => None,
        };
        let accuracy = if method.has_accuracy() {
            Some(self.task_accuracy(model, projector.as_ref())?)
        } else {
            None
        };
        let table = self.occupation_table(model, projector.as_ref())?;
        let [linear, nonlinear] = self.probe(&table, &[self.probe_seed(seed_index)])?;
        Ok(SeedResult {
            accuracy,
            linear: linear.scores[0],
            nonlinear: nonlinear.scores[0],
            baseline: linear.baseline,
        })
    }

    /// Every configured method over `n_seeds` training seeds.
    pub fn run_experiment(&self, base: &EmbedderModel<f32>) -> Result<Vec<MethodResult>> {
        let mut results = Vec::with_capacity(self.config.methods.len());
        for &method in &self.config.methods {
            let mut r = MethodResult::new(method);
            for i in self.config.seeds() {
                r.push(self.run_method(method, base, i)?);
            }
            results.push(r);
        }
        Ok(results)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub accuracy: Option<f64>,
    pub linear: f64,
    pub nonlinear: f64,
    pub baseline: f64,
}

/// Per-seed scores of one method; also the `probe_<method>.json` format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    /// Empty for methods without fine-tuning.
    pub accuracy: Vec<f64>,
    pub linear: Vec<f64>,
    pub nonlinear: Vec<f64>,
    pub baseline: Vec<f64>,
}

impl MethodResult {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            accuracy: Vec::new(),
            linear: Vec::new(),
            nonlinear: Vec::new(),
            baseline: Vec::new(),
        }
    }

    pub fn push(&mut self, r: SeedResult) {
        self.accuracy.extend(r.accuracy);
        self.linear.push(r.linear);
        self.nonlinear.push(r.nonlinear);
        self.baseline.push(r.baseline);
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = probes::mean_std(xs);
        Self { mean, std }
    }

    pub fn exact(v: f64) -> Self {
        Self { mean: v, std: 0.0 }
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}±{}", self.mean, self.std)
    }
}

impl FromStr for Stat {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format {
            what: "report cell",
            detail: s.to_string(),
        };
        let (m, sd) = s.split_once('±').ok_or_else(bad)?;
        Ok(Self {
            mean: m.trim().parse().map_err(|_| bad())?,
            std: sd.trim().parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub accuracy: Option<Stat>,
    pub linear: Stat,
    pub nonlinear: Stat,
}

impl ReportRow {
    pub fn from_result(r: &MethodResult) -> Self {
        Self {
            method: r.method.name().to_string(),
            accuracy: (!r.accuracy.is_empty()).then(|| Stat::of(&r.accuracy)),
            linear: Stat::of(&r.linear),
            nonlinear: Stat::of(&r.nonlinear),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 4] = ["method", "accuracy", "linear bias", "nonlinear bias"];

/// One row per method plus a trailing `baseline` row holding the mean
/// baseline score in both bias columns.
pub fn report_rows(results: &[MethodResult]) -> Result<Vec<ReportRow>> {
    if results.is_empty() {
        return Err(Error::invalid("report: no method results"));
    }
    let mut rows: Vec<ReportRow> = results.iter().map(ReportRow::from_result).collect();
    let baselines: Vec<f64> = results.iter().flat_map(|r| r.baseline.iter().copied()).collect();
    let b = Stat::exact(probes::mean_std(&baselines).0);
    rows.push(ReportRow {
        method: "baseline".to_string(),
        accuracy: None,
        linear: b,
        nonlinear: b,
    });
    for row in &rows {
        let vals = [row.linear, row.nonlinear].into_iter().chain(row.accuracy);
        if vals.into_iter().any(|s| !s.mean.is_finite() || !s.std.is_finite() || s.std < 0.0) {
            return Err(Error::invalid(format!("report: non-finite value for {}", row.method)));
        }
    }
    Ok(rows)
}

/// Cells are `mean±std` with shortest round-trip formatting; accuracy is
/// empty when absent.
pub fn write_report_csv<W: std::io::Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_COLUMNS)?;
    for r in rows {
        let acc = r.accuracy.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([r.method.clone(), acc, r.linear.to_string(), r.nonlinear.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_report_csv<R: std::io::Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != REPORT_COLUMNS {
        return Err(Error::Format {
            what: "report header",
            detail: header.join(","),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let acc = &rec[1];
        rows.push(ReportRow {
            method: rec[0].to_string(),
            accuracy: if acc.is_empty() { None } else { Some(acc.parse()?) },
            linear: rec[2].parse()?,
            nonlinear: rec[3].parse()?,
        });
    }
    Ok(rows)
}

/// Fixed-width text table with 5 significant decimals.
pub fn format_report(rows: &[ReportRow]) -> String {
    let cell = |s: Option<Stat>| s.map_or_else(|| "-".to_string(), |s| format!("{:.5} ± {:.5}", s.mean, s.std));
    let mut lines = vec![format!(
        "{:<12} {:>19} {:>19} {:>19}",
        REPORT_COLUMNS[0], REPORT_COLUMNS[1], REPORT_COLUMNS[2], REPORT_COLUMNS[3]
    )];
    for r in rows {
        let (lin, non) = if r.method == "baseline" {
            (format!("{:.5}", r.linear.mean), format!("{:.5}", r.nonlinear.mean))
        } else {
            (cell(Some(r.linear)), cell(Some(r.nonlinear)))
        };
        lines.push(format!("{:<12} {:>19} {:>19} {:>19}", r.method, cell(r.accuracy), lin, non));
    }
    lines.join("\n") + "\n"
}
