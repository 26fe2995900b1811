//! Training objectives and interleaved schedules.
//!
//! Every schedule alternates `ratio` task steps (MLM while pretraining,
//! classification while fine-tuning) with one step on the pairwise debias
//! loss `Σ ‖E(S_o) − E(S_c)‖`. Updates are plain SGD and the objectives are
//! applied as separate, alternating updates.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbedderModel, LossSpec, Params};
use crate::pairminer::ContrastivePair;
use crate::par::Exec;
use crate::seed::{self, Rng};
use crate::vocab::{TokenId, Vocab, CLS, PAD, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    PreP,
    FineP,
    PrefineP,
    PlainPretrain,
    PlainFinetune,
    /// Only debias steps; exists to demonstrate the collapse of the
    /// debias objective when nothing else anchors the representation.
    DebiasOnly,
}

impl ScheduleMode {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleMode::PreP => "pre_p",
            ScheduleMode::FineP => "fine_p",
            ScheduleMode::PrefineP => "prefine_p",
            ScheduleMode::PlainPretrain => "plain_pretrain",
            ScheduleMode::PlainFinetune => "plain_finetune",
            ScheduleMode::DebiasOnly => "debias_only",
        }
    }

    fn needs_corpus(self) -> bool {
        matches!(self, ScheduleMode::PreP | ScheduleMode::PrefineP | ScheduleMode::PlainPretrain)
    }

    fn needs_pairs(self) -> bool {
        matches!(
            self,
            ScheduleMode::PreP | ScheduleMode::FineP | ScheduleMode::PrefineP | ScheduleMode::DebiasOnly
        )
    }

    fn needs_task(self) -> bool {
        matches!(self, ScheduleMode::FineP | ScheduleMode::PrefineP | ScheduleMode::PlainFinetune)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub mode: ScheduleMode,
    /// Task steps per debias step.
    pub ratio: usize,
    /// Task steps per phase (debias steps for `debias_only`).
    pub total_steps: usize,
    /// Fine-tuning steps of `prefine_p`; defaults to `total_steps`.
    pub finetune_steps: Option<usize>,
    pub batch_size: usize,
    pub debias_batch_size: usize,
    pub learning_rate: f32,
    /// Step size of debias updates; defaults to `learning_rate`.
    pub debias_learning_rate: Option<f32>,
    pub seed: u64,
    pub pretrain_checkpoint: Option<PathBuf>,
    pub mask_prob: f64,
    /// Debias steps between collapse-guard checks.
    pub guard_interval: usize,
    /// Fraction of the initial mean embedding norm below which the run fails.
    pub collapse_floor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::PlainPretrain,
            ratio: 1,
            total_steps: 100,
            finetune_steps: None,
            batch_size: 16,
            debias_batch_size: 8,
            learning_rate: 0.01,
            debias_learning_rate: None,
            seed: 0,
            pretrain_checkpoint: None,
            mask_prob: 0.15,
            guard_interval: 10,
            collapse_floor: 0.1,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.ratio == 0 {
            return Err(Error::invalid("schedule: ratio must be at least 1"));
        }
        if self.total_steps == 0 {
            return Err(Error::invalid("schedule: total_steps must be at least 1"));
        }
        if self.batch_size == 0 || self.debias_batch_size == 0 {
            return Err(Error::invalid("schedule: batch sizes must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("schedule: learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::invalid("schedule: mask_prob must lie in [0, 1]"));
        }
        Ok(())
    }

    fn debias_lr(&self) -> f32 {
        self.debias_learning_rate.unwrap_or(self.learning_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mlm,
    Finetune,
    Debias,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub phase: Phase,
    pub objective: Objective,
    pub loss: f64,
}

pub fn write_metrics(path: impl AsRef<Path>, log: &[MetricRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(log.len() * 64);
    for r in log {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// A contrastive pair in token form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub original: Vec<TokenId>,
    pub counterpart: Vec<TokenId>,
}

pub fn encode_pairs(vocab: &Vocab, pairs: &[ContrastivePair], max_len: usize) -> Vec<EncodedPair> {
    pairs
        .iter()
        .map(|p| EncodedPair {
            original: vocab.tokenize(&p.original, max_len),
            counterpart: vocab.tokenize(&p.counterpart, max_len),
        })
        .collect()
}

/// Pairs processed by one debias step.
#[derive(Debug, Clone)]
pub struct DebiasBatch<'a> {
    pairs: Vec<&'a EncodedPair>,
}

impl<'a> DebiasBatch<'a> {
    pub fn new(pairs: Vec<&'a EncodedPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("empty debias batch"));
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Labelled sentences for the downstream classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub train: Vec<(String, usize)>,
    pub test: Vec<(String, usize)>,
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            for class in 0..2 {
                if !split.iter().any(|(_, y)| *y == class) {
                    return Err(Error::invalid(format!("toy task: class {class} missing from {name} split")));
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self, vocab: &Vocab, max_len: usize) -> EncodedTask {
        let enc = |split: &[(String, usize)]| {
            split
                .iter()
                .map(|(s, y)| (vocab.tokenize(s, max_len), *y))
                .collect()
        };
        EncodedTask {
            train: enc(&self.train),
            test: enc(&self.test),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTask {
    pub train: Vec<(Vec<TokenId>, usize)>,
    pub test: Vec<(Vec<TokenId>, usize)>,
}

/// A masked-LM example: true tokens plus the positions hidden from the model.
#[derive(Debug, Clone)]
pub struct MlmExample {
    pub tokens: Vec<TokenId>,
    pub mask_positions: Vec<usize>,
}

/// Mask `mask_prob` of the word positions (at least one), all as `[MASK]`.
pub fn mask_tokens(tokens: &[TokenId], mask_prob: f64, rng: &mut Rng) -> Option<MlmExample> {
    let candidates: Vec<usize> = (0..tokens.len())
        .filter(|&i| !matches!(tokens[i], CLS | SEP | PAD))
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let k = ((candidates.len() as f64 * mask_prob).round() as usize).clamp(1, candidates.len());
    let mut mask_positions: Vec<usize> = index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    mask_positions.sort_unstable();
    Some(MlmExample {
        tokens: tokens.to_vec(),
        mask_positions,
    })
}

/// Per-example gradients computed under `exec`, reduced in input order.
fn reduce<'b, F>(model: &EmbedderModel<f32>, n: usize, exec: Exec, spec_of: F) -> Result<(f64, Params<f32>)>
where
    F: Fn(usize) -> LossSpec<'b> + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    let parts = exec.map(&idx, |&i| model.loss_and_grad(&spec_of(i)));
    let mut total = 0.0f64;
    let mut grad = Params::zeros(&model.config);
    for part in parts {
        let (loss, g) = part?;
        total += loss as f64;
        grad.axpy(1.0, &g);
    }
    Ok((total, grad))
}

pub fn mlm_loss_and_grad(
    model: &EmbedderModel<f32>,
    batch: &[MlmExample],
    exec: Exec,
) -> Result<(f64, Params<f32>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty MLM batch"));
    }
    let (total, mut grad) = reduce(model, batch.len(), exec, |i| LossSpec::Mlm {
        tokens: &batch[i].tokens,
        mask_positions: &batch[i].mask_positions,
    })?;
    let inv = 1.0 / batch.len() as f32;
    grad.scale(inv);
    Ok((total / batch.len() as f64, grad))
}

pub fn finetune_loss_and_grad(
    model: &EmbedderModel<f32>,
    batch: &[(&[TokenId], usize)],
    exec: Exec,
) -> Result<(f64, Params<f32>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty fine-tuning batch"));
    }
    let (total, mut grad) = reduce(model, batch.len(), exec, |i| LossSpec::Classification {
        tokens: batch[i].0,
        label: batch[i].1,
    })?;
    grad.scale(1.0 / batch.len() as f32);
    Ok((total / batch.len() as f64, grad))
}

/// Sum over the batch of `‖E(S_o) − E(S_c)‖` and its gradient.
pub fn debias_loss_and_grad(
    model: &EmbedderModel<f32>,
    batch: &DebiasBatch<'_>,
    exec: Exec,
) -> Result<(f64, Params<f32>)> {
    reduce(model, batch.len(), exec, |i| LossSpec::DebiasPair {
        original: &batch.pairs[i].original,
        counterpart: &batch.pairs[i].counterpart,
    })
}

pub fn debias_loss(model: &EmbedderModel<f32>, batch: &DebiasBatch<'_>) -> Result<f64> {
    batch
        .pairs
        .iter()
        .map(|p| {
            model
                .loss(&LossSpec::DebiasPair {
                    original: &p.original,
                    counterpart: &p.counterpart,
                })
                .map(|l| l as f64)
        })
        .sum()
}

/// The task batch for one step of [`task_step`].
#[derive(Debug, Clone, Copy)]
pub enum TaskBatch<'a> {
    Mlm(&'a [MlmExample]),
    Finetune(&'a [(&'a [TokenId], usize)]),
}

fn check_finite(loss: f64, step: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            detail: format!("{what} loss is {loss}"),
        })
    }
}

fn apply_update(model: &mut EmbedderModel<f32>, grad: &Params<f32>, lr: f32, step: usize) -> Result<()> {
    model.params.axpy(-lr, grad);
    if !model.params.all_finite() {
        return Err(Error::NonFinite {
            step,
            detail: "parameters became non-finite".into(),
        });
    }
    Ok(())
}

/// One SGD update on the task objective; returns the pre-update loss.
pub fn task_step(model: &mut EmbedderModel<f32>, batch: TaskBatch<'_>, lr: f32, exec: Exec) -> Result<f64> {
    let (loss, grad) = match batch {
        TaskBatch::Mlm(b) => mlm_loss_and_grad(model, b, exec)?,
        TaskBatch::Finetune(b) => finetune_loss_and_grad(model, b, exec)?,
    };
    check_finite(loss, 0, "task")?;
    apply_update(model, &grad, lr, 0)?;
    Ok(loss)
}

/// One SGD update on the debias objective; returns the pre-update loss.
pub fn debias_step(model: &mut EmbedderModel<f32>, batch: &DebiasBatch<'_>, lr: f32, exec: Exec) -> Result<f64> {
    let (loss, grad) = debias_loss_and_grad(model, batch, exec)?;
    check_finite(loss, 0, "debias")?;
    apply_update(model, &grad, lr, 0)?;
    Ok(loss)
}

pub fn mean_embedding_norm(model: &EmbedderModel<f32>, sentences: &[Vec<TokenId>], exec: Exec) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::invalid("empty probe sentence set"));
    }
    let norms = exec.map(sentences, |s| {
        model
            .embed(s)
            .map(|e| e.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt())
    });
    let mut total = 0.0;
    for n in norms {
        total += n?;
    }
    Ok(total / sentences.len() as f64)
}

/// Classification accuracy on labelled token sequences.
pub fn accuracy(model: &EmbedderModel<f32>, data: &[(Vec<TokenId>, usize)], exec: Exec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let hits = exec.map(data, |(ids, y)| {
        model.classify(ids).map(|logits| {
            let pred = logits
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &l)| if l > best.1 { (i, l) } else { best })
                .0;
            pred == *y
        })
    });
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Inputs of a schedule run, already tokenized.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainingData<'a> {
    pub corpus: &'a [Vec<TokenId>],
    pub pairs: &'a [EncodedPair],
    pub task: Option<&'a EncodedTask>,
    /// Sentences whose mean embedding norm the collapse guard watches.
    pub probe_sentences: &'a [Vec<TokenId>],
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: EmbedderModel<f32>,
    pub log: Vec<MetricRecord>,
    /// Test accuracy on the toy task after the run (fine-tuning modes only).
    pub task_accuracy: Option<f64>,
    pub debias_steps: usize,
    pub task_steps: usize,
}

struct Runner<'a> {
    schedule: &'a Schedule,
    data: TrainingData<'a>,
    exec: Exec,
    rng: Rng,
    model: EmbedderModel<f32>,
    log: Vec<MetricRecord>,
    step: usize,
    debias_steps: usize,
    task_steps: usize,
    initial_norm: Option<f64>,
}

impl Runner<'_> {
    fn record(&mut self, phase: Phase, objective: Objective, loss: f64) {
        self.log.push(MetricRecord {
            step: self.step,
            phase,
            objective,
            loss,
        });
        self.step += 1;
    }

    fn mlm_step(&mut self) -> Result<()> {
        let corpus = self.data.corpus;
        let mut batch = Vec::with_capacity(self.schedule.batch_size);
        while batch.len() < self.schedule.batch_size {
            let s = &corpus[self.rng.random_range(0..corpus.len())];
            if let Some(ex) = mask_tokens(s, self.schedule.mask_prob, &mut self.rng) {
                batch.push(ex);
            }
        }
        let (loss, grad) = mlm_loss_and_grad(&self.model, &batch, self.exec)?;
        check_finite(loss, self.step, "mlm")?;
        apply_update(&mut self.model, &grad, self.schedule.learning_rate, self.step)?;
        self.task_steps += 1;
        self.record(Phase::Pretrain, Objective::Mlm, loss);
        Ok(())
    }

    fn finetune_step(&mut self) -> Result<()> {
        let train = &self.data.task.expect("validated").train;
        let batch: Vec<(&[TokenId], usize)> = (0..self.schedule.batch_size)
            .map(|_| {
                let (ids, y) = &train[self.rng.random_range(0..train.len())];
                (ids.as_slice(), *y)
            })
            .collect();
        let (loss, grad) = finetune_loss_and_grad(&self.model, &batch, self.exec)?;
        check_finite(loss, self.step, "finetune")?;
        apply_update(&mut self.model, &grad, self.schedule.learning_rate, self.step)?;
        self.task_steps += 1;
        self.record(Phase::Finetune, Objective::Finetune, loss);
        Ok(())
    }

    fn debias_step(&mut self, phase: Phase) -> Result<()> {
        let pairs = self.data.pairs;
        let k = self.schedule.debias_batch_size.min(pairs.len());
        let batch = DebiasBatch::new(
            index::sample(&mut self.rng, pairs.len(), k)
                .into_iter()
                .map(|i| &pairs[i])
                .collect(),
        )?;
        let (loss, grad) = debias_loss_and_grad(&self.model, &batch, self.exec)?;
        check_finite(loss, self.step, "debias")?;
        apply_update(&mut self.model, &grad, self.schedule.debias_lr(), self.step)?;
        self.debias_steps += 1;
        self.record(phase, Objective::Debias, loss);
        if self.debias_steps.is_multiple_of(self.schedule.guard_interval.max(1)) {
            self.guard()?;
        }
        Ok(())
    }

    fn guard(&mut self) -> Result<()> {
        let Some(initial) = self.initial_norm else {
            return Ok(());
        };
        let current = mean_embedding_norm(&self.model, self.data.probe_sentences, self.exec)?;
        if !(current >= self.schedule.collapse_floor * initial) {
            return Err(Error::Collapse {
                step: self.step,
                initial,
                current,
            });
        }
        Ok(())
    }

    fn phase(&mut self, phase: Phase, steps: usize, debias: bool) -> Result<()> {
        let mut done = 0;
        while done < steps {
            let k = self.schedule.ratio.min(steps - done);
            for _ in 0..k {
                match phase {
                    Phase::Pretrain => self.mlm_step()?,
                    Phase::Finetune => self.finetune_step()?,
                }
            }
            done += k;
            if debias {
                self.debias_step(phase)?;
            }
        }
        Ok(())
    }
}

/// Run `schedule` starting from `model`.
pub fn run_schedule(
    schedule: &Schedule,
    model: EmbedderModel<f32>,
    data: TrainingData<'_>,
    exec: Exec,
) -> Result<RunOutput> {
    schedule.validate()?;
    let mode = schedule.mode;
    if mode.needs_corpus() && data.corpus.is_empty() {
        return Err(Error::invalid(format!("mode {} requires a corpus", mode.name())));
    }
    if mode.needs_pairs() && data.pairs.is_empty() {
        return Err(Error::invalid(format!("mode {} requires contrastive pairs", mode.name())));
    }
    if mode.needs_task() && data.task.is_none_or(|t| t.train.is_empty() || t.test.is_empty()) {
        return Err(Error::invalid(format!("mode {} requires a toy task", mode.name())));
    }
    let watches_norm = mode.needs_pairs() && !data.probe_sentences.is_empty();
    let initial_norm = if watches_norm {
        Some(mean_embedding_norm(&model, data.probe_sentences, exec)?)
    } else {
        None
    };
    let mut r = Runner {
        schedule,
        data,
        exec,
        rng: seed::derive_rng(schedule.seed, "schedule", 0),
        model,
        log: Vec::new(),
        step: 0,
        debias_steps: 0,
        task_steps: 0,
        initial_norm,
    };
    let n = schedule.total_steps;
    match mode {
        ScheduleMode::PlainPretrain => r.phase(Phase::Pretrain, n, false)?,
        ScheduleMode::PreP => r.phase(Phase::Pretrain, n, true)?,
        ScheduleMode::PlainFinetune => r.phase(Phase::Finetune, n, false)?,
        ScheduleMode::FineP => r.phase(Phase::Finetune, n, true)?,
        ScheduleMode::PrefineP => {
            r.phase(Phase::Pretrain, n, true)?;
            r.phase(Phase::Finetune, schedule.finetune_steps.unwrap_or(n), true)?;
        }
        ScheduleMode::DebiasOnly => {
            for _ in 0..n {
                r.debias_step(Phase::Pretrain)?;
            }
        }
    }
    if r.debias_steps > 0 {
        r.guard()?;
    }
    let task_accuracy = match (mode.needs_task(), data.task) {
        (true, Some(task)) => Some(accuracy(&r.model, &task.test, exec)?),
        _ => None,
    };
    Ok(RunOutput {
        model: r.model,
        log: r.log,
        task_accuracy,
        debias_steps: r.debias_steps,
        task_steps: r.task_steps,
    })
}
