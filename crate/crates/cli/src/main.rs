//! Experiment driver: data preparation, training, evaluation, ablation, and
//! noise sweeps, all reproducible from a declarative config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use isgfan::archive;
use isgfan::config::ExperimentConfig;
use isgfan::nn::ModelVariant;
use isgfan::signal::NoiseType;
use isgfan::synthetic;
use isgfan::trainer::{self, ExperimentReport};

/// Environment variable naming the default output root.
const OUT_ROOT_ENV: &str = "ISGFAN_OUT";

#[derive(Parser)]
#[command(name = "isgfan", version, about = "Noise-robust transfer fault diagnosis experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain benchmark as raw bundles + manifest.
    Synth(SynthArgs),
    /// Segment raw bundles, inject noise, and write segment archives.
    Prepare(PrepareArgs),
    /// Train one experiment (optionally repeated over seeds).
    Train(RunArgs),
    /// Re-evaluate a finished run from its checkpoint.
    Evaluate(EvaluateArgs),
    /// Run the ablation ladder of model variants on one task.
    Ablate(AblateArgs),
    /// Train across a list of SNR levels and tabulate accuracy.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for bundles and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Samples per class and domain.
    #[arg(long)]
    samples_per_class: Option<usize>,
    /// Segment length (multiple of 32).
    #[arg(long)]
    segment_len: Option<usize>,
}

#[derive(Args)]
struct PrepareArgs {
    /// Manifest file: `condition_id, path, num_classes, samples_per_class`.
    #[arg(long)]
    manifest: PathBuf,
    /// Segment length.
    #[arg(long, default_value_t = 2048)]
    length: usize,
    /// Segment stride (defaults to non-overlapping).
    #[arg(long)]
    stride: Option<usize>,
    /// Noise family: gaussian | laplacian | mixed.
    #[arg(long, default_value = "mixed")]
    noise: String,
    /// Target SNR in dB; repeat for multiple levels.
    #[arg(long = "snr", required = true, allow_negative_numbers = true)]
    snrs: Vec<f64>,
    /// Noise seed.
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Output directory for archives.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ConfigOverrides {
    /// Experiment config file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model variant: full | isfa | is | fa | fald | source_only.
    #[arg(long)]
    variant: Option<String>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Noise SNR in dB.
    #[arg(long, allow_negative_numbers = true)]
    snr: Option<f64>,
    /// Directory of prepared archives.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output root directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Source condition id.
    #[arg(long)]
    source: Option<String>,
    /// Target condition id.
    #[arg(long)]
    target: Option<String>,
    /// Seed-varied repetitions.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory containing `config.toml` and checkpoints.
    #[arg(long)]
    run: PathBuf,
    /// Override the archive directory at evaluation time.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Evaluate the final checkpoint instead of the best one.
    #[arg(long)]
    r#final: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Also run the no-adaptation baseline.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// SNR levels to sweep; repeat for multiple levels.
    #[arg(long = "snr-level", required = true, allow_negative_numbers = true)]
    snr_levels: Vec<f64>,
    /// Additional tasks as `SOURCE:TARGET`; the config task always runs.
    #[arg(long = "task")]
    tasks: Vec<String>,
    /// Rebuild the summary table from stored reports without training.
    #[arg(long)]
    from_reports: bool,
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(args) => cmd_synth(args),
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

fn resolve_config(o: &ConfigOverrides) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &o.variant {
        cfg.model.variant = v.parse::<ModelVariant>()?;
    }
    if let Some(e) = o.epochs {
        cfg.training.epochs = e;
    }
    if let Some(s) = o.seed {
        cfg.training.seed = s;
    }
    if let Some(snr) = o.snr {
        cfg.noise.snr_db = snr;
    }
    if let Some(d) = &o.data_dir {
        cfg.task.data_dir = d.clone();
    }
    if let Some(s) = &o.source {
        cfg.task.source = s.clone();
    }
    if let Some(t) = &o.target {
        cfg.task.target = t.clone();
    }
    if let Some(r) = o.repeats {
        cfg.output.repeats = r;
    }
    match (&o.out, std::env::var_os(OUT_ROOT_ENV)) {
        (Some(dir), _) => cfg.output.dir = dir.clone(),
        (None, Some(root)) if cfg.output.dir == Path::new("out") => {
            cfg.output.dir = PathBuf::from(root);
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut spec = synthetic::benchmark_spec();
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.samples_per_class {
        spec.samples_per_class = n;
    }
    if let Some(l) = args.segment_len {
        if l == 0 || l % 32 != 0 {
            bail!("segment_len must be a positive multiple of 32");
        }
        spec.segment_len = l;
    }
    std::fs::create_dir_all(&args.out)?;
    let mut manifest = String::new();
    for condition in [synthetic::SOURCE_CONDITION, synthetic::TARGET_CONDITION] {
        let records = synthetic::generate_condition(&spec, condition)?;
        let file = args.out.join(format!("{condition}.sgr"));
        archive::write_raw_bundle(&file, &records)?;
        manifest.push_str(&format!(
            "{condition}, {condition}.sgr, {}, {}\n",
            spec.num_classes, spec.samples_per_class
        ));
        println!("wrote {} ({} records)", file.display(), records.len());
    }
    let manifest_path = args.out.join("manifest.txt");
    std::fs::write(&manifest_path, manifest)?;
    println!("wrote {}", manifest_path.display());
    Ok(())
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let noise: NoiseType = args.noise.parse()?;
    let stride = args.stride.unwrap_or(args.length);
    let written = archive::prepare_archives(
        &args.manifest,
        args.length,
        stride,
        noise,
        &args.snrs,
        args.seed,
        &args.out,
    )?;
    for (path, checksum) in &written {
        println!("{checksum}  {}", path.display());
    }
    println!("{} archives written to {}", written.len(), args.out.display());
    Ok(())
}

fn run_repeats(cfg: &ExperimentConfig) -> Result<Vec<ExperimentReport>> {
    let repeats = cfg.output.repeats.max(1);
    let mut reports = Vec::with_capacity(repeats);
    for i in 0..repeats {
        let seed = cfg.training.seed + i as u64;
        let report = trainer::run_experiment(cfg, seed)?;
        println!(
            "task {} variant {} snr {} seed {}: final {:.4} best {:.4} ({}s)",
            report.task,
            report.variant,
            report.snr_db,
            seed,
            report.final_accuracy,
            report.best_accuracy,
            report.wall_clock_secs.round()
        );
        reports.push(report);
    }
    if repeats > 1 {
        let dir = cfg
            .output
            .dir
            .join(cfg.task_name())
            .join(cfg.model.variant.as_str())
            .join(format!("{}dB", cfg.noise.snr_db));
        write_summary(&dir, &reports)?;
    }
    Ok(reports)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn write_summary(dir: &Path, reports: &[ExperimentReport]) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    let finals: Vec<f64> = reports.iter().map(|r| r.final_accuracy).collect();
    let bests: Vec<f64> = reports.iter().map(|r| r.best_accuracy).collect();
    let mut f = std::fs::File::create(dir.join("summary.txt"))?;
    writeln!(f, "runs: {}", reports.len())?;
    writeln!(f, "mean_final_accuracy: {:.6}", mean(&finals))?;
    writeln!(f, "mean_best_accuracy: {:.6}", mean(&bests))?;
    for r in reports {
        writeln!(f, "seed_{}: final {:.6} best {:.6}", r.seed, r.final_accuracy, r.best_accuracy)?;
    }
    println!(
        "summary: mean final {:.4}, mean best {:.4} over {} seeds",
        mean(&finals),
        mean(&bests),
        reports.len()
    );
    Ok(())
}

fn cmd_train(args: RunArgs) -> Result<()> {
    let cfg = resolve_config(&args.overrides)?;
    run_repeats(&cfg)?;
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let config_path = args.run.join("config.toml");
    let mut cfg = ExperimentConfig::load(&config_path)
        .with_context(|| format!("loading {}", config_path.display()))?;
    if let Some(d) = &args.data_dir {
        cfg.task.data_dir = d.clone();
    }
    let data = trainer::load_transfer_data(&cfg)?;
    let checkpoint = if args.r#final {
        args.run.join("checkpoint_final.ckpt")
    } else {
        args.run.join("checkpoint_best.ckpt")
    };
    let mut model = isgfan::nn::IsgfanModel::build_variant(
        cfg.model.variant,
        cfg.arch(),
        data.source_train.num_classes,
        0,
    )?;
    model.load_checkpoint(&checkpoint)?;
    let accuracy = isgfan::evaluator::evaluate_accuracy(&model, &data.target_test, 64)?;
    println!(
        "checkpoint {}: target-test accuracy {:.4} ({} samples)",
        checkpoint.display(),
        accuracy,
        data.target_test.len()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let base = resolve_config(&args.overrides)?;
    let mut variants = vec![
        ModelVariant::Isfa,
        ModelVariant::Is,
        ModelVariant::Fa,
        ModelVariant::Fald,
        ModelVariant::Full,
    ];
    if args.baseline {
        variants.insert(0, ModelVariant::SourceOnly);
    }
    let mut rows = Vec::new();
    for variant in variants {
        let mut cfg = base.clone();
        cfg.model.variant = variant;
        let reports = run_repeats(&cfg)?;
        let acc = mean(&reports.iter().map(|r| r.final_accuracy).collect::<Vec<_>>());
        rows.push((variant.as_str().to_string(), acc));
    }
    println!("\nvariant        mean final accuracy");
    for (name, acc) in &rows {
        println!("{name:<14} {:.4}", acc);
    }
    Ok(())
}

/// Mean final accuracy per (snr, task) cell from stored run reports.
fn table_from_reports(cfg: &ExperimentConfig, snrs: &[f64], tasks: &[(String, String)]) -> Result<BTreeMap<(String, String), f64>> {
    let mut table = BTreeMap::new();
    for &snr in snrs {
        for (source, target) in tasks {
            let task_name = format!("{source}-{target}");
            let dir = cfg
                .output
                .dir
                .join(&task_name)
                .join(cfg.model.variant.as_str())
                .join(format!("{snr}dB"));
            let mut finals = Vec::new();
            for entry in std::fs::read_dir(&dir)
                .with_context(|| format!("no reports under {}", dir.display()))?
            {
                let report_path = entry?.path().join("report.txt");
                if !report_path.exists() {
                    continue;
                }
                let text = std::fs::read_to_string(&report_path)?;
                for line in text.lines() {
                    if let Some(v) = line.strip_prefix("final_accuracy: ") {
                        finals.push(v.trim().parse::<f64>()?);
                    }
                }
            }
            if finals.is_empty() {
                bail!("no stored reports for task {task_name} at {snr} dB");
            }
            table.insert((format!("{snr}"), task_name), mean(&finals));
        }
    }
    Ok(table)
}

fn print_table(table: &BTreeMap<(String, String), f64>, snrs: &[f64], tasks: &[(String, String)]) {
    let task_names: Vec<String> = tasks.iter().map(|(s, t)| format!("{s}-{t}")).collect();
    print!("{:>8}", "SNR(dB)");
    for t in &task_names {
        print!("{t:>12}");
    }
    println!();
    for &snr in snrs {
        print!("{snr:>8}");
        for t in &task_names {
            let v = table.get(&(format!("{snr}"), t.clone())).copied().unwrap_or(f64::NAN);
            print!("{v:>12.4}");
        }
        println!();
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let cfg = resolve_config(&args.overrides)?;
    let mut tasks = vec![(cfg.task.source.clone(), cfg.task.target.clone())];
    for spec in &args.tasks {
        let (s, t) = spec
            .split_once(':')
            .with_context(|| format!("task `{spec}` must be SOURCE:TARGET"))?;
        let pair = (s.to_string(), t.to_string());
        if !tasks.contains(&pair) {
            tasks.push(pair);
        }
    }

    if !args.from_reports {
        for &snr in &args.snr_levels {
            for (source, target) in &tasks {
                let mut run_cfg = cfg.clone();
                run_cfg.noise.snr_db = snr;
                run_cfg.task.source = source.clone();
                run_cfg.task.target = target.clone();
                run_repeats(&run_cfg)?;
            }
        }
    }
    let table = table_from_reports(&cfg, &args.snr_levels, &tasks)?;
    print_table(&table, &args.snr_levels, &tasks);
    Ok(())
}
