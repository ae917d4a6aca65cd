//! Command-line front end for the HACA captioner.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors. Every command echoes its full effective
//! configuration before doing any work, and all randomness flows through
//! the single `seed` it reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use haca::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use haca::config::RunConfig;
use haca::data::{load_dataset, save_dataset, Sample, Vocabulary};
use haca::decoder::{ModelVariant, ALL_VARIANTS};
use haca::error::Error;
use haca::gradcheck::micro_gradcheck;
use haca::infer::{beam_search, greedy_decode, DecodeSession};
use haca::metrics::evaluate;
use haca::model::Model;
use haca::synth::{synth_dataset, SynthSpec};
use haca::train::{compare_variants, write_compare_csvs, write_metrics_csv, Trainer, METRICS_CSV_HEADER};

#[derive(Parser)]
#[command(name = "haca", version, about = "Hierarchical cross-modal attention captioner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multimodal dataset
    Synth(SynthArgs),
    /// Train a model variant on a dataset
    Train(TrainArgs),
    /// Score a trained model on a split
    Eval(EvalArgs),
    /// Decode captions from a trained model
    Generate(GenerateArgs),
    /// Verify model gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Train several variants on identical data and emit learning curves
    Compare(CompareArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Training samples
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Validation samples
    #[arg(long, default_value_t = 0)]
    val: usize,
    /// Test samples
    #[arg(long, default_value_t = 0)]
    test: usize,
    /// Event alphabet size
    #[arg(long, default_value_t = 4)]
    events: usize,
    /// Modifier alphabet size
    #[arg(long, default_value_t = 3)]
    modifiers: usize,
    #[arg(long, default_value_t = 8)]
    visual_dim: usize,
    #[arg(long, default_value_t = 4)]
    audio_dim: usize,
    /// Gaussian noise standard deviation
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 2)]
    min_events: usize,
    #[arg(long, default_value_t = 4)]
    max_events: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Overwrite an existing non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable): --set key=value
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Dataset directory (overrides the config file)
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig, Error> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.set("seed", &seed.to_string())?;
        }
        for pair in &self.sets {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{pair}`")))?;
            config.set(key.trim(), value.trim())?;
        }
        if let Some(data) = &self.data {
            config.data_dir = Some(data.clone());
        }
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Model variant: att_v | cm_att_va | cm_att_vad | haca_no_align | haca
    #[arg(long)]
    variant: Option<ModelVariant>,
    /// Total epochs to reach (defaults to the config's `epochs`)
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for the checkpoint and metrics CSV
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Which split's manifest to score
    #[arg(long, default_value = "test")]
    split: String,
    /// Beam width (1 = greedy)
    #[arg(long, default_value_t = 5)]
    beam: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Emit the top K hypotheses per sample as `score<TAB>tokens`
    #[arg(long, default_value_t = 1)]
    nbest: usize,
    /// Write captions here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump per-step attention/fusion weight CSVs (greedy path) here
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check one variant (default: all five)
    #[arg(long)]
    variant: Option<ModelVariant>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1)]
    model_seed: u64,
    #[arg(long, default_value_t = 99)]
    data_seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated variant list (default: all five)
    #[arg(long, value_delimiter = ',')]
    variants: Vec<ModelVariant>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for per-variant and merged CSVs
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn echo_config(config: &RunConfig) {
    println!("# effective configuration");
    for line in config.to_text().lines() {
        println!("# {line}");
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let spec = SynthSpec {
        train: args.samples,
        val: args.val,
        test: args.test,
        events: args.events,
        modifiers: args.modifiers,
        visual_dim: args.visual_dim,
        audio_dim: args.audio_dim,
        noise: args.noise,
        events_per_sample: (args.min_events, args.max_events),
        ..SynthSpec::default()
    };
    spec.validate()?;
    if args.out.exists() {
        let occupied = std::fs::read_dir(&args.out)
            .map_err(|e| Error::io(&args.out, e))?
            .next()
            .is_some();
        if occupied && !args.force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                args.out.display()
            )));
        }
    }
    println!("# synth seed = {}", args.seed);
    println!(
        "# events = {}, modifiers = {}, visual_dim = {}, audio_dim = {}, noise = {}",
        spec.events, spec.modifiers, spec.visual_dim, spec.audio_dim, spec.noise
    );
    let ds = synth_dataset(&spec, args.seed)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for (split, samples) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        if !samples.is_empty() {
            save_dataset(&args.out, split, samples, &ds.vocab)?;
            println!("{split}: {} samples", samples.len());
        }
    }
    println!("vocabulary: {} tokens (4 reserved)", ds.vocab.len());
    if ds.programs_reused {
        println!("note: latent programs were reused; splits are not program-disjoint");
    }
    Ok(())
}

fn load_split(dir: &Path, split: &str) -> Result<(Vec<Sample>, Vocabulary), Error> {
    load_dataset(&dir.join(format!("{split}.manifest")))
}

fn load_optional_split(dir: &Path, split: &str) -> Result<Vec<Sample>, Error> {
    let manifest = dir.join(format!("{split}.manifest"));
    if manifest.exists() {
        Ok(load_dataset(&manifest)?.0)
    } else {
        Ok(Vec::new())
    }
}

/// Fills corpus-derived sizes from the loaded samples.
fn adopt(config: &mut RunConfig, vocab: &Vocabulary, samples: &[Sample]) -> Result<(), Error> {
    let visual = samples
        .iter()
        .find_map(|s| s.stream("visual"))
        .ok_or_else(|| Error::Data("dataset has no `visual` streams".into()))?;
    let audio_dim = samples
        .iter()
        .find_map(|s| s.stream("audio"))
        .map(|a| a.dim())
        .unwrap_or(1);
    config.adopt_dataset(vocab.len(), visual.dim(), audio_dim);
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let (mut trainer, mut config) = match &args.resume {
        Some(ckpt_path) => {
            let checkpoint = load_checkpoint(ckpt_path)?;
            let (trainer, config) = checkpoint.into_trainer()?;
            println!("# resumed from {} at epoch {}", ckpt_path.display(), trainer.epoch);
            (trainer, config)
        }
        None => {
            let mut config = args.config.build()?;
            if let Some(variant) = args.variant {
                config.model.variant = variant;
            }
            let data_dir = config
                .data_dir
                .clone()
                .ok_or_else(|| Error::Config("no dataset: pass --data or set data_dir".into()))?;
            let (train_samples, vocab) = load_split(&data_dir, "train")?;
            adopt(&mut config, &vocab, &train_samples)?;
            let model = Model::build(config.model.clone())?;
            (Trainer::new(model, config.train.clone())?, config)
        }
    };
    if args.resume.is_some() {
        // CLI data/variant flags cannot silently diverge from the checkpoint
        if let Some(variant) = args.variant {
            if variant != config.model.variant {
                return Err(Error::Config(format!(
                    "checkpoint was trained as `{}`, refusing --variant {variant}",
                    config.model.variant
                )));
            }
        }
        if let Some(data) = &args.config.data {
            config.data_dir = Some(data.clone());
        }
    }
    let data_dir = config
        .data_dir
        .clone()
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data_dir".into()))?;
    let (train_samples, _) = load_split(&data_dir, "train")?;
    let val_samples = load_optional_split(&data_dir, "val")?;
    config.out_dir = Some(args.out.clone());
    echo_config(&config);
    println!("# parameters: {}", trainer.model.param_count());
    std::fs::write(args.out.join("model.txt"), trainer.model.describe())
        .map_err(|e| Error::io(args.out.join("model.txt"), e))?;

    let target = args.epochs.unwrap_or(config.train.max_epochs);
    println!("{METRICS_CSV_HEADER}");
    trainer.run(&train_samples, &val_samples, target, |row| {
        println!("{}", row.csv_row());
    })?;
    write_metrics_csv(&args.out.join("metrics.csv"), &trainer.metrics)?;
    let ckpt = args.out.join("model.ckpt");
    save_checkpoint(&ckpt, &trainer, &config)?;
    println!("# checkpoint: {}", ckpt.display());
    Ok(())
}

/// Loads a checkpoint and rejects command-line model settings that differ
/// from the stored configuration, naming the keys.
fn model_from_checkpoint(path: &Path, overrides: &ConfigArgs) -> Result<(Model, RunConfig), Error> {
    let checkpoint: Checkpoint = load_checkpoint(path)?;
    let stored = checkpoint.config.clone();
    let mut requested = stored.clone();
    if let Some(cfg) = &overrides.config {
        let text = std::fs::read_to_string(cfg).map_err(|e| Error::io(cfg, e))?;
        requested.apply_text(&text)?;
    }
    for pair in &overrides.sets {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{pair}`")))?;
        requested.set(key.trim(), value.trim())?;
    }
    let differing: Vec<String> = stored
        .to_text()
        .lines()
        .zip(requested.to_text().lines())
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.split('=').next().unwrap_or(a).trim().to_string())
        .collect();
    if !differing.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint/config mismatch on: {}",
            differing.join(", ")
        )));
    }
    let (trainer, config) = checkpoint.into_trainer()?;
    Ok((trainer.model, config))
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let (model, mut config) = model_from_checkpoint(&args.checkpoint, &args.config)?;
    if let Some(data) = &args.config.data {
        config.data_dir = Some(data.clone());
    }
    let data_dir = config
        .data_dir
        .clone()
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data_dir".into()))?;
    echo_config(&config);
    let (samples, _) = load_split(&data_dir, &args.split)?;
    if samples.is_empty() {
        return Err(Error::Eval(format!("split `{}` is empty", args.split)));
    }
    let report = evaluate(&model, &samples, args.beam)?;
    println!("{report}");
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Error> {
    let (model, mut config) = model_from_checkpoint(&args.checkpoint, &args.config)?;
    if let Some(data) = &args.config.data {
        config.data_dir = Some(data.clone());
    }
    let data_dir = config
        .data_dir
        .clone()
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data_dir".into()))?;
    let (samples, vocab) = load_split(&data_dir, &args.split)?;
    let max_steps = model.config.max_decode_steps;

    let mut out = String::new();
    for sample in &samples {
        if let Some(trace_dir) = &args.trace {
            write_trace(trace_dir, &model, sample, max_steps)?;
        }
        let session = DecodeSession::new(&model, sample)?;
        if args.nbest <= 1 {
            let tokens = if args.beam <= 1 {
                greedy_decode(&session, max_steps)?
            } else {
                beam_search(&session, args.beam, max_steps, 1)?.remove(0).tokens
            };
            out.push_str(&format!("{}\t{}\n", sample.id, vocab.decode(&tokens).join(" ")));
        } else {
            out.push_str(&format!("# {}\n", sample.id));
            for hyp in beam_search(&session, args.beam.max(1), max_steps, args.nbest)? {
                out.push_str(&format!("{}\t{}\n", hyp.score, vocab.decode(&hyp.tokens).join(" ")));
            }
        }
    }
    match &args.out {
        Some(path) => std::fs::write(path, out).map_err(|e| Error::io(path, e))?,
        None => print!("{out}"),
    }
    Ok(())
}

/// One CSV per sample: rows are greedy decode steps, columns are the flat
/// attention/fusion weights (`name.k`). Self-attention histories grow with
/// the step, so early rows leave the missing columns empty.
fn write_trace(dir: &Path, model: &Model, sample: &Sample, max_steps: usize) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let session = DecodeSession::new(model, sample)?.with_tracing();
    let _ = greedy_decode(&session, max_steps)?;
    let steps = session.traces.borrow();

    // column layout: order of first appearance, width = max length seen
    let mut order: Vec<String> = Vec::new();
    let mut width: std::collections::BTreeMap<String, usize> = std::collections::BTreeMap::new();
    for step in steps.iter() {
        for (name, values) in step {
            if !width.contains_key(name) {
                order.push(name.clone());
            }
            let w = width.entry(name.clone()).or_insert(0);
            *w = (*w).max(values.len());
        }
    }
    let mut csv = String::from("step");
    for name in &order {
        for k in 0..width[name] {
            csv.push_str(&format!(",{name}.{k}"));
        }
    }
    csv.push('\n');
    for (t, step) in steps.iter().enumerate() {
        csv.push_str(&(t + 1).to_string());
        for name in &order {
            let values = step.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice()).unwrap_or(&[]);
            for k in 0..width[name] {
                match values.get(k) {
                    Some(v) => csv.push_str(&format!(",{v}")),
                    None => csv.push(','),
                }
            }
        }
        csv.push('\n');
    }
    let path = dir.join(format!("trace_{}.csv", sample.id));
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), Error> {
    let variants: Vec<ModelVariant> = match args.variant {
        Some(v) => vec![v],
        None => ALL_VARIANTS.to_vec(),
    };
    println!(
        "# gradcheck: step = {}, tolerance = {}, model_seed = {}, data_seed = {}",
        args.step, args.tolerance, args.model_seed, args.data_seed
    );
    let mut all_ok = true;
    for variant in variants {
        let report = micro_gradcheck(variant, args.step, args.tolerance, args.model_seed, args.data_seed)?;
        println!("{variant}: max rel err {:.3e}", report.max_rel_err());
        for entry in &report.entries {
            println!(
                "  {}  rel {:.3e}  {}",
                entry.name,
                entry.rel_err,
                if entry.within_tolerance { "ok" } else { "FAIL" }
            );
        }
        all_ok &= report.passed();
    }
    if all_ok {
        println!("gradcheck: PASS");
        Ok(())
    } else {
        Err(Error::GradCheck("relative error above tolerance".into()))
    }
}

fn cmd_compare(args: CompareArgs) -> Result<(), Error> {
    let mut config = args.config.build()?;
    let data_dir = config
        .data_dir
        .clone()
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data_dir".into()))?;
    let (train_samples, vocab) = load_split(&data_dir, "train")?;
    let val_samples = load_optional_split(&data_dir, "val")?;
    adopt(&mut config, &vocab, &train_samples)?;
    config.out_dir = Some(args.out.clone());
    echo_config(&config);

    let variants = if args.variants.is_empty() {
        ALL_VARIANTS.to_vec()
    } else {
        args.variants.clone()
    };
    let epochs = args.epochs.unwrap_or(config.train.max_epochs);
    let outcomes = compare_variants(
        &config.model,
        &config.train,
        &variants,
        &train_samples,
        &val_samples,
        epochs,
        |variant, row| println!("{variant},{}", row.csv_row()),
    )?;
    write_compare_csvs(&args.out, &outcomes)?;
    for outcome in &outcomes {
        if let Some(last) = outcome.metrics.last() {
            println!("# {} final val_bleu4 = {}", outcome.variant, last.val_bleu4);
        }
    }
    Ok(())
}
