use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dualcorr::config::{RunConfig, SEED_ENV};
use dualcorr::correspondence::CorrespondenceConfig;
use dualcorr::encoders::Vocabulary;
use dualcorr::model::ModelParams;
use dualcorr::synthgen::{builtin_vocabulary, make_dataset, read_sample, Dataset, GenConfig, VideoSample};
use dualcorr::train_eval::{
    ablation_table, evaluate, run_ablation, toy_gradcheck, train, AblationAxis, DEFAULT_THRESHOLDS,
};
use dualcorr::viz::{write_sample_maps, RANGES_FILE};

/// Tolerance on the composite-loss gradient check.
const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "dualcorr", version, about = "Video referring-expression grounding with dual correspondence learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        n: usize,
        /// Defaults to $DUALCORR_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Distractors that share one attribute with the referent.
        #[arg(long)]
        heavy: bool,
    },
    /// Train on the training split and evaluate on the held-out split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `key=value` applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train one variant per setting of an axis over several seeds.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Finite-difference check of the full loss.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scale::Toy)]
        scale: Scale,
    },
    /// Confidence and patch-word similarity heatmaps for one sample.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A `sample_NNNN` directory written by `gen`.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Toy,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            let mut line = String::new();
            for cause in e.chain().map(ToString::to_string) {
                if !line.ends_with(&cause) {
                    if !line.is_empty() {
                        line.push_str(": ");
                    }
                    line.push_str(&cause);
                }
            }
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen { n, seed, out, heavy } => cmd_gen(n, seed, &out, heavy),
        Command::Train {
            config,
            data,
            out,
            overrides,
        } => cmd_train(config.as_deref(), data, &out, &overrides),
        Command::Eval {
            checkpoint,
            data,
            split,
            test_fraction,
            json,
        } => cmd_eval(&checkpoint, &data, split, test_fraction, json.as_deref()),
        Command::Ablate {
            axis,
            config,
            data,
            out,
            seeds,
            overrides,
        } => cmd_ablate(&axis, config.as_deref(), data, out.as_deref(), seeds, &overrides),
        Command::Gradcheck { scale: Scale::Toy } => cmd_gradcheck(),
        Command::Viz {
            checkpoint,
            sample,
            out,
        } => cmd_viz(&checkpoint, &sample, &out),
    }
}

fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    RunConfig {
        seed,
        ..RunConfig::default()
    }
    .effective_seed()
    .with_context(|| format!("reading {SEED_ENV}"))
}

fn cmd_gen(n: usize, seed: Option<u64>, out: &Path, heavy: bool) -> Result<ExitCode> {
    let seed = seed_or_env(seed)?;
    let config = if heavy {
        GenConfig::distractor_heavy()
    } else {
        GenConfig::default()
    };
    let ds = make_dataset(n, seed, &config, out)?;
    println!("wrote {} samples to {}", ds.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_run_config(path: Option<&Path>, data: Option<PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.apply_overrides(overrides)?;
    if data.is_some() {
        config.data = data;
    }
    Ok(config)
}

fn load_split(config: &RunConfig) -> Result<(Vec<VideoSample>, Vec<VideoSample>)> {
    let dir = config.data.as_ref().context("no dataset given (--data or data = ...)")?;
    let ds = Dataset::load(dir)?;
    let (train_idx, test_idx) = ds.split(config.test_fraction);
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

fn cmd_train(config: Option<&Path>, data: Option<PathBuf>, out: &Path, overrides: &[String]) -> Result<ExitCode> {
    let run = load_run_config(config, data, overrides)?;
    let (train_set, test_set) = load_split(&run)?;
    fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    fs::write(out.join("config.txt"), run.to_text()?)?;

    let log_path = out.join("metrics.log");
    let mut log = BufWriter::new(fs::File::create(&log_path).with_context(|| log_path.display().to_string())?);
    let outcome = train(&train_set, &run.model, &run.resolved_train()?, Some(&mut log))?;
    log.flush()?;
    outcome.params.save(&out.join("checkpoint.bin"))?;

    let eval_set = if test_set.is_empty() { &train_set } else { &test_set };
    let report = evaluate(&outcome.params, eval_set, &DEFAULT_THRESHOLDS)?;
    fs::write(out.join("report.txt"), report.to_text())?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    print!("{}", report.to_text());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: Split, test_fraction: f64, json: Option<&Path>) -> Result<ExitCode> {
    let params = ModelParams::load(checkpoint)?;
    let ds = Dataset::load(data)?;
    let samples = match split {
        Split::All => ds.samples.clone(),
        Split::Train => ds.subset(&ds.split(test_fraction).0),
        Split::Test => ds.subset(&ds.split(test_fraction).1),
    };
    if samples.is_empty() {
        bail!("the selected split is empty");
    }
    let report = evaluate(&params, &samples, &DEFAULT_THRESHOLDS)?;
    print!("{}", report.to_text());
    if let Some(path) = json {
        fs::write(path, report.to_json()?).with_context(|| path.display().to_string())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(
    axis: &str,
    config: Option<&Path>,
    data: Option<PathBuf>,
    out: Option<&Path>,
    seeds: u64,
    overrides: &[String],
) -> Result<ExitCode> {
    let axis: AblationAxis = axis.parse()?;
    let run = load_run_config(config, data, overrides)?;
    let (train_set, test_set) = load_split(&run)?;
    if test_set.is_empty() {
        bail!("ablation needs a non-empty test split");
    }
    let base = run.resolved_train()?;
    let variants = axis.variants(&run.model, &base);
    let seed_list: Vec<u64> = (0..seeds).map(|i| base.seed + i).collect();
    let rows = run_ablation(&variants, &seed_list, &train_set, &test_set)?;
    let table = ablation_table(&rows);
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
        fs::write(dir.join("config.txt"), run.to_text()?)?;
        fs::write(dir.join("ablation.txt"), &table)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck() -> Result<ExitCode> {
    let report = toy_gradcheck(0, &CorrespondenceConfig::default())?;
    let pass = report.max_rel_error < GRADCHECK_TOL;
    println!(
        "max_rel_error={:e} coordinates={} {}",
        report.max_rel_error,
        report.coordinates,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_viz(checkpoint: &Path, sample: &Path, out: &Path) -> Result<ExitCode> {
    let params = ModelParams::load(checkpoint)?;
    let vocab_path = sample.parent().map(|p| p.join("vocab.txt"));
    let vocab = match vocab_path {
        Some(p) if p.exists() => Vocabulary::load(&p)?,
        _ => builtin_vocabulary(),
    };
    let sample = read_sample(sample, &vocab)?;
    let maps = write_sample_maps(&params, &sample, out)?;
    println!("wrote {} maps and {} to {}", maps.len(), RANGES_FILE, out.display());
    Ok(ExitCode::SUCCESS)
}
