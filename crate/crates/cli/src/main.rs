//! `debias`: mine pairs, train, fit post-hoc projectors, probe and report.
//!
//! Every command reads one JSON config (`--config`), lets `--seed` and
//! `--out` override its root seed and output directory, and writes its
//! outputs under the output directory with fixed file names.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use debias_core::experiment::{
    self, format_report, report_rows, write_report_csv, Assets, ExperimentConfig, Lab, Method, MethodResult,
    SeedResult,
};
use debias_core::pairminer;
use debias_core::posthoc::Projector;
use debias_core::trainer;
use debias_core::{checkpoint, Error, Vocab};

const PAIRS_FILE: &str = "pairs.jsonl";
const MODEL_FILE: &str = "model.dbf1";
const BASE_FILE: &str = "base.dbf1";
const VOCAB_FILE: &str = "vocab.txt";
const METRICS_FILE: &str = "metrics.jsonl";
const REPORT_FILE: &str = "report.csv";
const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "debias", version, about = "Contrastive-pair debiasing lab for a toy sentence embedder")]
struct Cli {
    /// JSON experiment config; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mine contrastive pairs from the corpus into pairs.jsonl.
    Mine {
        /// Corpus file, one sentence per line.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        max_pairs: Option<usize>,
    },
    /// Run the configured schedule; writes model.dbf1, vocab.txt and metrics.jsonl.
    Train {
        /// pre_p, fine_p, prefine_p, plain_pretrain, plain_finetune or debias_only.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        /// Task steps per debias step.
        #[arg(long)]
        ratio: Option<usize>,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fit a post-hoc projector (sentdebias or nullitout) on a checkpoint.
    Posthoc {
        method: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sent-Debias directions.
        #[arg(long)]
        k: Option<usize>,
        /// INLP iteration cap.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Linear and nonlinear occupation probes over n_seeds seeds.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        projector: Option<PathBuf>,
        /// Label of the report file (probe_<method>.json).
        #[arg(long, default_value = "original")]
        method: String,
    },
    /// Tabulate probe reports into report.csv and print the table.
    Report {
        /// Probe reports; defaults to every probe_<method>.json in the output dir.
        reports: Vec<PathBuf>,
    },
    /// Pretrain one base model, then train, probe and report every configured method.
    Experiment,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, Error> {
    let dir = cfg.paths.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Lab whose vocabulary is the one saved next to `checkpoint`, if any.
fn lab_for_checkpoint(cfg: ExperimentConfig, checkpoint: &Path) -> Result<Lab, Error> {
    let vocab_path = checkpoint.with_file_name(VOCAB_FILE);
    if !vocab_path.exists() {
        return Lab::new(cfg);
    }
    cfg.validate()?;
    let assets = Assets::load(&cfg)?;
    Lab::with_vocab(cfg, assets, Vocab::load(&vocab_path)?)
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Mine { corpus, max_pairs } => {
            if let Some(c) = corpus {
                cfg.paths.corpus = Some(c);
            }
            if let Some(n) = max_pairs {
                cfg.max_pairs = n;
            }
            cfg.validate()?;
            let pairs = experiment::mine(&cfg, &Assets::load(&cfg)?);
            let path = out_dir(&cfg)?.join(PAIRS_FILE);
            pairminer::write_pairs_jsonl(&path, &pairs)?;
            println!("{} pairs -> {}", pairs.len(), path.display());
        }
        Command::Train { mode, steps, ratio, init } => {
            if let Some(m) = mode {
                cfg.schedule.mode = serde_json::from_value(serde_json::Value::String(m.clone()))
                    .map_err(|_| Error::invalid(format!("unknown schedule mode {m:?}")))?;
            }
            if let Some(n) = steps {
                cfg.schedule.total_steps = n;
            }
            if let Some(r) = ratio {
                cfg.schedule.ratio = r;
            }
            if let Some(p) = init {
                cfg.schedule.pretrain_checkpoint = Some(p);
            }
            let lab = match cfg.schedule.pretrain_checkpoint.clone() {
                Some(p) => lab_for_checkpoint(cfg, &p)?,
                None => Lab::new(cfg)?,
            };
            let dir = out_dir(&lab.config)?;
            let out = lab.run(&lab.train_schedule(), lab.initial_model()?)?;
            checkpoint::save(&out.model, dir.join(MODEL_FILE))?;
            lab.vocab.save(dir.join(VOCAB_FILE))?;
            trainer::write_metrics(dir.join(METRICS_FILE), &out.log)?;
            print!(
                "{}: {} task steps, {} debias steps",
                lab.config.schedule.mode.name(),
                out.task_steps,
                out.debias_steps
            );
            if let Some(acc) = out.task_accuracy {
                print!(", task accuracy {acc:.4}");
            }
            println!(" -> {}", dir.join(MODEL_FILE).display());
        }
        Command::Posthoc { method, checkpoint, k, iters } => {
            let method: Method = method.parse()?;
            if !method.is_posthoc() {
                return Err(Error::invalid(format!("{method} is not a post-hoc method (sentdebias, nullitout)")));
            }
            if let Some(k) = k {
                cfg.sent_debias_k = k;
            }
            if iters.is_some() {
                cfg.inlp_iters = iters;
            }
            let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.out_dir.join(MODEL_FILE));
            let lab = lab_for_checkpoint(cfg, &ckpt)?;
            let model = lab.load_model(&ckpt)?;
            let projector = match method {
                Method::SentDebias => lab.fit_sent_debias(&model)?,
                _ => lab.fit_inlp(&model, 0)?,
            };
            match &projector {
                Projector::SentDebias(s) => {
                    let ev: Vec<String> = s.explained_variance.iter().map(|v| format!("{v:.4}")).collect();
                    println!("sentdebias: k={} explained variance [{}]", s.k(), ev.join(", "));
                }
                Projector::Inlp(n) => {
                    let acc: Vec<String> = n.accuracies.iter().map(|v| format!("{v:.4}")).collect();
                    println!(
                        "nullitout: {} iterations, chance {:.4}, accuracies [{}]",
                        n.iterations(),
                        n.chance,
                        acc.join(", ")
                    );
                }
            }
            let path = out_dir(&lab.config)?.join(format!("projector_{method}.prj1"));
            projector.save(&path)?;
            println!("-> {}", path.display());
        }
        Command::Probe { checkpoint, projector, method } => {
            let method: Method = method.parse()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.out_dir.join(MODEL_FILE));
            let lab = lab_for_checkpoint(cfg, &ckpt)?;
            let model = lab.load_model(&ckpt)?;
            let projector = projector.map(Projector::load).transpose()?;
            let mut result = MethodResult::new(method);
            let accuracy = if method.has_accuracy() {
                Some(lab.task_accuracy(&model, projector.as_ref())?)
            } else {
                None
            };
            let table = lab.occupation_table(&model, projector.as_ref())?;
            for i in lab.config.seeds() {
                let [linear, nonlinear] = lab.probe(&table, &[lab.probe_seed(i)])?;
                result.push(SeedResult {
                    accuracy,
                    linear: linear.scores[0],
                    nonlinear: nonlinear.scores[0],
                    baseline: linear.baseline,
                });
            }
            let path = out_dir(&lab.config)?.join(format!("probe_{method}.json"));
            result.save(&path)?;
            println!("{}", format_report(&report_rows(std::slice::from_ref(&result))?).trim_end());
            println!("-> {}", path.display());
        }
        Command::Report { reports } => {
            let dir = out_dir(&cfg)?;
            let paths: Vec<PathBuf> = if reports.is_empty() {
                Method::ALL
                    .iter()
                    .map(|m| dir.join(format!("probe_{m}.json")))
                    .filter(|p| p.exists())
                    .collect()
            } else {
                reports
            };
            let results = paths.iter().map(MethodResult::load).collect::<Result<Vec<_>, _>>()?;
            let rows = report_rows(&results)?;
            let path = dir.join(REPORT_FILE);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_report_csv(&rows, file)?;
            print!("{}", format_report(&rows));
            println!("-> {}", path.display());
        }
        Command::Experiment => {
            let lab = Lab::new(cfg)?;
            let dir = out_dir(&lab.config)?;
            lab.config.save(dir.join(CONFIG_FILE))?;
            let base = lab.pretrain_base()?;
            checkpoint::save(&base.model, dir.join(BASE_FILE))?;
            lab.vocab.save(dir.join(VOCAB_FILE))?;
            trainer::write_metrics(dir.join(METRICS_FILE), &base.log)?;
            println!("base: {} MLM steps", base.task_steps);
            let results = lab.run_experiment(&base.model)?;
            for r in &results {
                r.save(dir.join(format!("probe_{}.json", r.method)))?;
            }
            let rows = report_rows(&results)?;
            let path = dir.join(REPORT_FILE);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_report_csv(&rows, file)?;
            print!("{}", format_report(&rows));
            println!("-> {}", path.display());
        }
    }
    Ok(())
}
