//! Command-line front end for the endpointer toolkit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use endpointer::corpus::{gen_corpus, load_corpus, save_corpus, FeatureStorage, GrammarConfig};
use endpointer::decision::{write_trace_csv, DecisionConfig};
use endpointer::dsp::wav::read_wav;
use endpointer::dsp::{log_mel, DspParams};
use endpointer::metrics::{
    outcomes_at_threshold, score_corpus, summarize, sweep_scored, write_curve_csv,
    write_outcomes_csv,
};
use endpointer::model::{
    load_params, save_params, save_train_config, train, Head, TrainingExample,
};
use endpointer::pausemodel::fit;
use endpointer::pipeline::{build_examples, prepare, run_compare, ExperimentConfig};
use endpointer::targets::{write_targets_csv, SlopePolicy};

#[derive(Parser)]
#[command(
    name = "endpointer",
    version,
    about = "Speech endpointing toolkit: synthetic corpora, pause statistics, \
             recurrent scoring models, and latency/accuracy reports"
)]
struct Cli {
    /// Top-level random seed (overrides any seed in the experiment config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Size of the worker thread pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log more (-v: info, -vv: debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum HeadArg {
    Classification,
    Regression,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Head {
        match h {
            HeadArg::Classification => Head::Classification,
            HeadArg::Regression => Head::Regression,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic aligned corpus from a grammar config.
    GenCorpus {
        /// Grammar JSON file.
        #[arg(long)]
        config: PathBuf,
        /// Number of queries.
        #[arg(long)]
        n: usize,
        /// Output corpus path (.jsonl).
        #[arg(long)]
        out: PathBuf,
        /// Store features in a binary sidecar instead of inline JSON.
        #[arg(long)]
        sidecar: bool,
    },
    /// Compute log-mel features for a mono 16-bit WAV file.
    ExtractFeatures {
        #[arg(long)]
        wav: PathBuf,
        /// Optional DSP parameter JSON; defaults to 16 kHz / 25 ms / 10 ms / 40 mels.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output features path (.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit per-prefix pause statistics on a corpus.
    FitPause {
        #[arg(long)]
        corpus: PathBuf,
        /// Prefixes with fewer samples fall back to the default pause.
        #[arg(long, default_value_t = endpointer::pausemodel::DEFAULT_MIN_COUNT)]
        min_count: usize,
        /// Fallback pause in milliseconds for rare prefixes.
        #[arg(long, default_value_t = endpointer::pausemodel::DEFAULT_PAUSE_MS)]
        default_ms: f64,
        /// Keep raw samples in the output file (larger, but auditable).
        #[arg(long)]
        include_samples: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-frame training targets for inspection.
    BuildTargets {
        #[arg(long)]
        corpus: PathBuf,
        /// Slope policy JSON.
        #[arg(long)]
        policy: PathBuf,
        /// Pause model JSON; required for the pause-adaptive policy.
        #[arg(long)]
        pause_model: Option<PathBuf>,
        /// Only this query id (default: every query).
        #[arg(long)]
        query: Option<String>,
        /// Directory for the <id>.targets.csv files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one head per the experiment config.
    Train {
        /// Experiment JSON file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        head: HeadArg,
        /// Output directory (default: config, then $ENDPOINTER_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split at one threshold.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Also dump a per-frame decision trace for this query id.
        #[arg(long)]
        trace_query: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the test split once and report every threshold in the config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train both heads, sweep both, and pair operating points.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the paired-comparison table from a compare output directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_experiment(path: &Path, seed_flag: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)
        .with_context(|| format!("loading experiment config {}", path.display()))?;
    if let Some(seed) = seed_flag {
        config.seed = seed;
    }
    Ok(config)
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenCorpus {
            config,
            n,
            out,
            sidecar,
        } => {
            let grammar: GrammarConfig = load_json(&config, "grammar config")?;
            let corpus = gen_corpus(&grammar, n, cli.seed.unwrap_or(0))?;
            let storage = if sidecar {
                FeatureStorage::Sidecar
            } else {
                FeatureStorage::Inline
            };
            save_corpus(&corpus, &out, storage)?;
            println!("wrote {} queries to {}", corpus.len(), out.display());
            Ok(())
        }
        Command::ExtractFeatures { wav, config, out } => {
            let params: DspParams = match config {
                Some(path) => load_json(&path, "dsp config")?,
                None => DspParams::default(),
            };
            let audio = read_wav(&wav)?;
            if audio.sample_rate != params.sample_rate_hz {
                bail!(
                    "{} is sampled at {} Hz, config expects {}",
                    wav.display(),
                    audio.sample_rate,
                    params.sample_rate_hz
                );
            }
            let features = log_mel(&audio.samples, &params)?;
            let json = serde_json::to_string(&features)?;
            std::fs::write(&out, json)
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {} frames x {} dims to {}",
                features.n_frames(),
                features.n_dims(),
                out.display()
            );
            Ok(())
        }
        Command::FitPause {
            corpus,
            min_count,
            default_ms,
            include_samples,
            out,
        } => {
            let corpus = load_corpus(&corpus)?;
            let model = fit(&corpus, min_count, default_ms)?;
            model.save(&out, include_samples)?;
            println!(
                "fitted {} prefixes from {} queries into {}",
                model.len(),
                corpus.len(),
                out.display()
            );
            Ok(())
        }
        Command::BuildTargets {
            corpus,
            policy,
            pause_model,
            query,
            out,
        } => {
            let corpus = load_corpus(&corpus)?;
            let policy: SlopePolicy = load_json(&policy, "slope policy")?;
            policy.validate()?;
            let pause = match &pause_model {
                Some(path) => Some(endpointer::pausemodel::PauseModel::load(path)?),
                None => None,
            };
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let mut written = 0usize;
            for record in &corpus.records {
                if query.as_deref().is_some_and(|q| q != record.id) {
                    continue;
                }
                let expected = match (&policy, &pause) {
                    (SlopePolicy::PauseAdaptive { .. }, Some(p)) => {
                        Some(p.expected_pause(record)?)
                    }
                    (SlopePolicy::PauseAdaptive { .. }, None) => {
                        bail!("the pause-adaptive policy needs --pause-model")
                    }
                    _ => None,
                };
                let slope = policy.slope_ms(record, expected)?;
                let targets = endpointer::targets::regression_targets(record, slope);
                write_targets_csv(&targets, &out.join(format!("{}.targets.csv", record.id)))?;
                written += 1;
            }
            if written == 0 {
                bail!("no query matched");
            }
            println!("wrote targets for {written} queries into {}", out.display());
            Ok(())
        }
        Command::Train { config, head, out } => {
            let config = load_experiment(&config, cli.seed)?;
            let out_dir = config.resolve_output_dir(out);
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let head: Head = head.into();
            let label = match head {
                Head::Classification => "classification",
                Head::Regression => "regression",
            };
            let data = prepare(&config)?;
            let train_examples: Vec<TrainingExample> =
                build_examples(&data.train, head, &config.slope, &data.pause_model)?;
            let dev_examples =
                build_examples(&data.dev, head, &config.slope, &data.pause_model)?;
            let train_config = config.train.config_for(
                head,
                endpointer::seeds::derive_seed(config.seed, &format!("train-{label}")),
            );
            let (params, history) =
                train(&train_config, &train_examples, &dev_examples, None)?;
            let ckpt = out_dir.join(format!("{label}.ckpt"));
            save_params(&params, &ckpt)?;
            save_train_config(&train_config, &ckpt)?;
            let history_path = out_dir.join(format!("{label}_history.json"));
            std::fs::write(&history_path, serde_json::to_string_pretty(&history)?)
                .with_context(|| format!("writing {}", history_path.display()))?;
            let last = history.last().expect("at least one epoch");
            println!(
                "trained {label} for {} epochs (final train loss {:.6}, dev {:.6}); checkpoint {}",
                history.len(),
                last.train_loss,
                last.dev_loss,
                ckpt.display()
            );
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            threshold,
            trace_query,
            out,
        } => {
            let config = load_experiment(&config, cli.seed)?;
            let out_dir = config.resolve_output_dir(out);
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let params = load_params(&checkpoint)?;
            let decision = DecisionConfig {
                threshold,
                smoothing_window_frames: config.smoothing_window_frames,
            };
            decision.validate()?;
            let data = prepare(&config)?;
            let scored = score_corpus(&params, &data.test)?;
            if let Some(id) = &trace_query {
                let q = scored
                    .iter()
                    .find(|s| &s.id == id)
                    .with_context(|| format!("query {id} not in the test split"))?;
                write_trace_csv(
                    &q.scores,
                    &decision,
                    q.frame_ms,
                    &out_dir.join(format!("{id}.trace.csv")),
                )?;
            }
            let outcomes = outcomes_at_threshold(&scored, &decision);
            write_outcomes_csv(&outcomes, &out_dir.join("outcomes.csv"))?;
            let point = summarize(threshold, &outcomes)?;
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
            println!(
                "threshold {:.3}: early-cut {:.2}% | latency p50 {} p75 {} p90 {} p99 {} ms ({} queries)",
                point.threshold,
                point.early_cut_rate_pct,
                fmt(point.p50_ms),
                fmt(point.p75_ms),
                fmt(point.p90_ms),
                fmt(point.p99_ms),
                outcomes.len()
            );
            Ok(())
        }
        Command::Sweep {
            config,
            checkpoint,
            out,
        } => {
            let config = load_experiment(&config, cli.seed)?;
            let out_dir = config.resolve_output_dir(out);
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let params = load_params(&checkpoint)?;
            let data = prepare(&config)?;
            let scored = score_corpus(&params, &data.test)?;
            let curve = sweep_scored(&scored, &config.thresholds, config.smoothing_window_frames)?;
            let path = out_dir.join("curve.csv");
            write_curve_csv(&curve, &path)?;
            println!(
                "swept {} thresholds over {} queries into {}",
                curve.points.len(),
                scored.len(),
                path.display()
            );
            Ok(())
        }
        Command::Compare { config, out } => {
            let config = load_experiment(&config, cli.seed)?;
            let out_dir = config.resolve_output_dir(out);
            let result = run_compare(&config, &out_dir)?;
            println!(
                "compared {} operating points; report in {}",
                result.pairs.len(),
                out_dir.display()
            );
            print_pairs_table(&out_dir.join("paired_operating_points.csv"))?;
            Ok(())
        }
        Command::Report { dir } => {
            print_pairs_table(&dir.join("paired_operating_points.csv"))
        }
    }
}

/// Renders the paired CSV as an aligned table on stdout.
fn print_pairs_table(path: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for line in text.lines() {
        rows.push(line.split(',').map(str::to_string).collect());
    }
    if rows.is_empty() {
        bail!("{} is empty", path.display());
    }
    let cols = rows[0].len();
    let mut widths = vec![0usize; cols];
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, cell)| format!("{:>width$}", cell, width = widths[i]))
            .collect();
        println!("{}", line.join("  "));
    }
    Ok(())
}
