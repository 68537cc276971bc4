//! `harmonize`: dataset synthesis, training, inference and analysis.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use harmonize_core::data::{self, Split, SynthSpec};
use harmonize_core::metrics::{self, BtConfig, REQUIREMENT_LABELS};
use harmonize_core::train::{write_loss_header, RunOptions};
use harmonize_core::{Checkpoint, Error, Model32, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "harmonize", version, about = "Background-guided image harmonization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic composite dataset.
    SynthData(SynthArgs),
    /// Train the extractor and generator jointly.
    Train(TrainArgs),
    /// Harmonize the foreground of one composite.
    Harmonize(ImageArgs),
    /// Translate the background of one composite towards its foreground.
    BgHarmonize(ImageArgs),
    /// Score a model (or the raw composites) on a dataset split.
    Evaluate(EvalArgs),
    /// Check the six code-distance orderings on a dataset split.
    AnalyzeCodes(AnalyzeArgs),
    /// Distance between background and foreground codes of one image.
    Inharmony(InharmonyArgs),
    /// Fit Bradley-Terry strengths to pairwise votes.
    BtRank(BtArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// key = value file with seed, train, test, resolution.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Directory receiving checkpoint.bin and loss_log.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ImageArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    composite: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Omit to score the unmodified composites.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct InharmonyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
}

#[derive(Args)]
struct BtArgs {
    /// CSV with columns item_a,item_b,winner.
    #[arg(long)]
    votes: PathBuf,
    /// Write the ranking here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Add half a win per side of every compared pair.
    #[arg(long)]
    smoothing: bool,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    Ok(value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))?)
}

fn synth_data(args: SynthArgs) -> Result<()> {
    let (mut seed, mut n_train, mut n_test, mut resolution) = (7u64, 200usize, 40usize, 64usize);
    if let Some(path) = &args.config {
        for (k, v) in read_pairs(path)? {
            match k.as_str() {
                "seed" => seed = parse_value(&k, &v)?,
                "train" => n_train = parse_value(&k, &v)?,
                "test" => n_test = parse_value(&k, &v)?,
                "resolution" => resolution = parse_value(&k, &v)?,
                _ => return Err(Error::Config(format!("unknown synth-data key `{k}`")).into()),
            }
        }
    }
    seed = args.seed.unwrap_or(seed);
    n_train = args.train.unwrap_or(n_train);
    n_test = args.test.unwrap_or(n_test);
    resolution = args.resolution.unwrap_or(resolution);
    let spec = SynthSpec::new(seed, resolution);
    let items = data::write_synthetic_dataset(&args.out, &spec, n_train, n_test)?;
    println!("wrote {} triplets ({n_train} train, {n_test} test) to {}", items.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let resumed = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg = match &resumed {
        Some(c) => c.config.clone(),
        None => TrainConfig::default(),
    };
    if let Some(path) = &args.config {
        for (k, v) in read_pairs(path)? {
            cfg.set(&k, &v)?;
        }
    }
    let flags: [(&str, Option<String>); 5] = [
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("lr", args.lr.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("resolution", args.resolution.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;

    let mut trainer = match resumed {
        Some(mut c) => {
            c.config = cfg.clone();
            Trainer::from_checkpoint(&c)?
        }
        None => Trainer::new(cfg.clone())?,
    };
    let (items, warnings) = data::load_all(&args.dataset, Split::Train, Some(cfg.resolution))?;
    for w in &warnings {
        eprintln!("warning: {}: background differs by {:.4} on average", w.id, w.background_difference);
    }
    fs::create_dir_all(&args.out)?;
    let log_path = args.out.join("loss_log.csv");
    let fresh_log = trainer.step() == 0 || !log_path.exists();
    let mut log = BufWriter::new(if fresh_log {
        File::create(&log_path)?
    } else {
        fs::OpenOptions::new().append(true).open(&log_path)?
    });
    if fresh_log {
        write_loss_header(&mut log)?;
    }
    let checkpoint_path = args.out.join("checkpoint.bin");
    let losses = trainer.run(
        &items,
        RunOptions { max_steps: args.max_steps, checkpoint_path: Some(checkpoint_path.clone()), loss_log: Some(&mut log) },
    )?;
    log.flush()?;
    if losses.is_empty() {
        trainer.checkpoint().save(&checkpoint_path)?;
    }
    match losses.last() {
        Some(l) => println!("step {} total loss {}", l.step, l.total),
        None => println!("nothing to do: already at step {}", trainer.step()),
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model32, TrainConfig)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let cfg = ckpt.config.clone();
    Ok((Trainer::from_checkpoint(&ckpt)?.into_model(), cfg))
}

fn run_image(args: ImageArgs, background: bool) -> Result<()> {
    let (model, _) = load_model(&args.checkpoint)?;
    let composite = data::load_rgb(&args.composite)?;
    let mask = data::load_mask(&args.mask)?;
    let out = if background {
        model.background_harmonize(&composite, &mask)?
    } else {
        model.harmonize(&composite, &mask)?
    };
    data::save_rgb(&args.out, &out)?;
    Ok(())
}

fn evaluate(args: EvalArgs) -> Result<()> {
    let split: Split = args.split.parse()?;
    let model = args.checkpoint.as_deref().map(load_model).transpose()?;
    let resolution = args.resolution.or(model.as_ref().map(|(_, c)| c.resolution));
    let (items, _) = data::load_all(&args.dataset, split, resolution)?;
    let mut records = Vec::with_capacity(items.len());
    for it in &items {
        let pred = match &model {
            Some((m, _)) => m.harmonize(&it.composite, &it.mask)?,
            None => it.composite.clone(),
        };
        records.push(metrics::compute_metrics(&it.id, &pred, &it.real, &it.mask)?);
    }
    let bins = metrics::bin_by_fg_ratio(&records)?;
    let mut out = BufWriter::new(File::create(&args.out)?);
    metrics::write_metric_records(&mut out, &records)?;
    writeln!(out)?;
    metrics::write_bin_summary(&mut out, &bins)?;
    out.flush()?;
    let all = &bins[bins.len() - 1];
    println!("{} images, mse {:.4}, fmse {:.4}", all.count, all.mse.unwrap_or(f64::NAN), all.fmse.unwrap_or(f64::NAN));
    Ok(())
}

fn analyze_codes(args: AnalyzeArgs) -> Result<()> {
    let split: Split = args.split.parse()?;
    let (model, cfg) = load_model(&args.checkpoint)?;
    let (items, _) = data::load_all(&args.dataset, split, Some(cfg.resolution))?;
    let mut out = BufWriter::new(File::create(&args.out)?);
    writeln!(out, "id,r1,r2,r3,r4,r5,r6,all")?;
    let mut quads = Vec::with_capacity(items.len());
    for it in &items {
        let (q, _) = model.code_quadruple(&it.composite, &it.real, &it.mask)?;
        let checks = metrics::requirement_checks(&q)?;
        let cols: Vec<String> = checks.iter().map(|&c| (c as u8).to_string()).collect();
        writeln!(out, "{},{},{}", it.id, cols.join(","), checks.iter().all(|&c| c) as u8)?;
        quads.push(q);
    }
    let report = metrics::requirement_ratios(&quads)?;
    writeln!(out)?;
    writeln!(out, "requirement,ratio")?;
    for (label, r) in REQUIREMENT_LABELS.iter().zip(report.ratios) {
        writeln!(out, "{label},{r:.6}")?;
        println!("{label}: {r:.4}");
    }
    writeln!(out, "all six,{:.6}", report.all_six)?;
    println!("all six: {:.4}", report.all_six);
    out.flush()?;
    Ok(())
}

fn inharmony(args: InharmonyArgs) -> Result<()> {
    let (model, _) = load_model(&args.checkpoint)?;
    let image = data::load_rgb(&args.image)?;
    let mask = data::load_mask(&args.mask)?;
    let score = metrics::inharmony_score(&image, &mask, &model.extractor, &model.store)?;
    println!("{score:.6}");
    Ok(())
}

fn bt_rank(args: BtArgs) -> Result<()> {
    let file = File::open(&args.votes).with_context(|| format!("opening votes {}", args.votes.display()))?;
    let votes = metrics::parse_votes(BufReader::new(file))?;
    if votes.is_empty() {
        bail!(Error::Invalid("no votes found".into()));
    }
    let mut items: Vec<String> = votes.iter().flat_map(|v| [v.item_a.clone(), v.item_b.clone()]).collect();
    items.sort();
    items.dedup();
    let cfg = BtConfig { max_iter: args.max_iter, tol: args.tol, smoothing: args.smoothing };
    let fit = metrics::bt_fit(&votes, &items, &cfg)?;
    if !fit.converged {
        eprintln!("warning: stopped after {} iterations, gradient norm {:.3e}", fit.iterations, fit.gradient_norm);
    }
    let mut text = String::from("rank,item,strength,log_score\n");
    for (rank, &k) in fit.ranking().iter().enumerate() {
        text.push_str(&format!("{},{},{:.6},{:.6}\n", rank + 1, fit.items[k], fit.strengths[k], fit.log_scores[k]));
    }
    match &args.out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// 1 for bad input or configuration, 2 for failures while doing the work.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::Invalid(_)
            | Error::ShapeMismatch { .. }
            | Error::Resolution { .. }
            | Error::EmptyRegion(_)
            | Error::Data { .. }
            | Error::DisconnectedGraph { .. }
            | Error::ZeroWins(_),
        ) => 1,
        _ => 2,
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HARMONIZE_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::Config(format!("HARMONIZE_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            bail!(Error::Config("HARMONIZE_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Harmonize(a) => run_image(a, false),
        Command::BgHarmonize(a) => run_image(a, true),
        Command::Evaluate(a) => evaluate(a),
        Command::AnalyzeCodes(a) => analyze_codes(a),
        Command::Inharmony(a) => inharmony(a),
        Command::BtRank(a) => bt_rank(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
