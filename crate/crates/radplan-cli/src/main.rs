//! Command-line front end for the retrieval-augmented diffusion planning
//! benchmark: data generation, embedder/planner training, index building,
//! the eight-setting evaluation, reporting, and the retrieval latency bench.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use radplan::dataset;
use radplan::datagen;
use radplan::embedder::EmbedderObjective;
use radplan::harness::{self, RunConfig, SettingIndex};
use radplan::metrics::EvalReport;
use radplan::retrieval;

const GIT_REV: &str = env!("RADPLAN_GIT_REV");

#[derive(Parser)]
#[command(
    name = "radplan",
    about = "Retrieval-augmented diffusion planning benchmark",
    version
)]
struct Cli {
    /// Configuration file (TOML mirroring the run configuration).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (train/val splits plus manifest).
    GenData,
    /// Train a scenario embedder.
    TrainEmbedder(TrainEmbedderArgs),
    /// Embed the train split and build the retrieval index.
    BuildIndex(BuildIndexArgs),
    /// Train the action-denoiser planner.
    TrainPlanner(TrainPlannerArgs),
    /// Evaluate one benchmark setting.
    Evaluate(EvaluateArgs),
    /// Summarize evaluation reports and emit plot data.
    Report(ReportArgs),
    /// Measure retrieval latency across database sizes.
    BenchRetrieval(BenchArgs),
}

#[derive(Args)]
struct TrainEmbedderArgs {
    /// Training objective: "planning" (task-specific) or "reconstruction".
    #[arg(long, default_value = "planning")]
    objective: String,
    /// Step-count override.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct BuildIndexArgs {
    /// Embedder checkpoint; defaults to the planning embedder in --out.
    #[arg(long)]
    embedder: Option<PathBuf>,
    /// Output stem for the dump/index files.
    #[arg(long, default_value = "tse")]
    name: String,
}

#[derive(Args)]
struct TrainPlannerArgs {
    /// Train with retrieval augmentation.
    #[arg(long)]
    rag: bool,
    /// Checkpoint/log name.
    #[arg(long)]
    name: Option<String>,
    /// Index stem (under --out/index) used to precompute retrievals.
    #[arg(long, default_value = "tse")]
    index: String,
    /// Disable observation interpolation (ablation).
    #[arg(long)]
    no_obs_interp: bool,
    /// Disable action interpolation (ablation).
    #[arg(long)]
    no_act_interp: bool,
    /// Scheduler exponents as "n,m".
    #[arg(long)]
    scheduler: Option<String>,
    /// Resume from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Step-count override.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Setting index 1..=8 per the benchmark grid.
    #[arg(long)]
    setting: u8,
    /// Planner checkpoint path.
    #[arg(long)]
    planner: PathBuf,
    /// Embedder checkpoint (needed for retrieval inference).
    #[arg(long)]
    embedder: Option<PathBuf>,
    /// Index stem under --out/index (needed for retrieval/random modes).
    #[arg(long, default_value = "tse")]
    index: String,
    /// Evaluation repeats override.
    #[arg(long)]
    runs: Option<usize>,
    /// Report name; defaults to setting_<n>.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation report JSON files.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Database sizes to measure.
    #[arg(long, value_delimiter = ',', default_values_t = vec![10_000usize, 100_000, 1_000_000])]
    sizes: Vec<usize>,
    /// Embedding dimension.
    #[arg(long, default_value_t = 128)]
    dim: usize,
    /// Neighbors per query.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 6])]
    k: Vec<usize>,
    /// Queries per measurement.
    #[arg(long, default_value_t = 50)]
    queries: usize,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<RunConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn ensure_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(())
}

fn guard_overwrite(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        bail!(
            "{} already exists; pass --force to overwrite",
            path.display()
        );
    }
    Ok(())
}

fn write_config_snapshot(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let snapshot = serde_json::json!({
        "config": config,
        "config_hash": config.config_hash(),
        "git_revision": GIT_REV,
    });
    fs::write(
        out.join("config.snapshot.json"),
        serde_json::to_string_pretty(&snapshot)?,
    )?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::GenData => gen_data(&cli, &config),
        Command::TrainEmbedder(args) => train_embedder(&cli, &config, args),
        Command::BuildIndex(args) => build_index(&cli, &config, args),
        Command::TrainPlanner(args) => train_planner(&cli, &config, args),
        Command::Evaluate(args) => evaluate(&cli, &config, args),
        Command::Report(args) => report(&cli, &config, args),
        Command::BenchRetrieval(args) => bench_retrieval(&cli, &config, args),
    }
}

fn data_dir(cli: &Cli) -> PathBuf {
    cli.out.join("data")
}

fn gen_data(cli: &Cli, config: &RunConfig) -> anyhow::Result<()> {
    let dir = data_dir(cli);
    guard_overwrite(&dir.join("manifest.json"), cli.force)?;
    ensure_dir(&dir)?;
    ensure_dir(&cli.out)?;
    write_config_snapshot(config, &cli.out)?;
    let t0 = Instant::now();
    let corpus = datagen::build_corpus(&config.corpus_params(), &config.config_hash(), GIT_REV)?;
    dataset::save(&corpus.train, &dir.join("train.rdseg"))?;
    dataset::save(&corpus.val, &dir.join("val.rdseg"))?;
    corpus.manifest.save(&dir.join("manifest.json"))?;
    println!(
        "generated {} train / {} val segments over {} scenes in {:.1}s",
        corpus.train.len(),
        corpus.val.len(),
        config.train_scenes + config.val_scenes,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_split(cli: &Cli, split: &str) -> anyhow::Result<dataset::Dataset> {
    let path = data_dir(cli).join(format!("{split}.rdseg"));
    dataset::load(&path).with_context(|| format!("loading split {}", path.display()))
}

fn objective_of(name: &str) -> anyhow::Result<EmbedderObjective> {
    match name {
        "planning" => Ok(EmbedderObjective::Planning),
        "reconstruction" => Ok(EmbedderObjective::Reconstruction),
        other => bail!("unknown objective {other:?} (planning|reconstruction)"),
    }
}

fn embedder_stem(objective: EmbedderObjective) -> &'static str {
    match objective {
        EmbedderObjective::Planning => "tse",
        EmbedderObjective::Reconstruction => "recon",
    }
}

fn train_embedder(cli: &Cli, config: &RunConfig, args: &TrainEmbedderArgs) -> anyhow::Result<()> {
    let objective = objective_of(&args.objective)?;
    let train = load_split(cli, "train")?;
    let dir = cli.out.join("embedder");
    ensure_dir(&dir)?;
    let stem = embedder_stem(objective);
    let ckpt_path = dir.join(format!("{stem}.ckpt"));
    guard_overwrite(&ckpt_path, cli.force)?;
    let steps = args.steps.unwrap_or(config.embedder_train_steps);
    let t0 = Instant::now();
    let outcome = harness::train_embedder(config, objective, &train, steps, |step, loss| {
        if step % 50 == 0 {
            println!("[{:7.1}s] step {step}: loss {loss:.5}", t0.elapsed().as_secs_f64());
        }
    })?;
    fs::write(
        dir.join(format!("{stem}_loss.csv")),
        harness::loss_log_csv(&outcome.log, &config.config_hash(), GIT_REV),
    )?;
    harness::save_embedder_checkpoint(&ckpt_path, &outcome, config, GIT_REV)?;
    if let Some(step) = outcome.diverged_at {
        bail!(
            "training diverged at step {step}; checkpoint of the last finite state kept at {}",
            ckpt_path.display()
        );
    }
    println!(
        "trained {stem} embedder for {steps} steps in {:.1}s -> {}",
        t0.elapsed().as_secs_f64(),
        ckpt_path.display()
    );
    Ok(())
}

fn build_index(cli: &Cli, config: &RunConfig, args: &BuildIndexArgs) -> anyhow::Result<()> {
    let train = load_split(cli, "train")?;
    let default_ckpt = cli.out.join("embedder").join("tse.ckpt");
    let ckpt_path = args.embedder.clone().unwrap_or(default_ckpt);
    let loaded = harness::load_embedder_checkpoint(&ckpt_path)?;
    let dir = cli.out.join("index");
    ensure_dir(&dir)?;
    let dump_path = dir.join(format!("{}.rdemb", args.name));
    let index_path = dir.join(format!("{}.rdix", args.name));
    guard_overwrite(&index_path, cli.force)?;
    let t0 = Instant::now();
    let dump = harness::embed_corpus(&loaded.store, &loaded.model, &train)?;
    dataset::save_embeddings(&dump, &dump_path)?;
    let index = harness::build_index_from_dump(&dump, config)?;
    retrieval::save(&index, &index_path)?;
    let manifest = serde_json::json!({
        "entries": dump.entries.len(),
        "dim": dump.dim,
        "kind": if config.ivf_n_list > 0 { "ivf" } else { "flat" },
        "n_list": config.ivf_n_list,
        "embedder": ckpt_path.display().to_string(),
        "config_hash": config.config_hash(),
        "git_revision": GIT_REV,
    });
    fs::write(
        dir.join(format!("{}.manifest.json", args.name)),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "embedded {} segments and built the index in {:.1}s -> {}",
        dump.entries.len(),
        t0.elapsed().as_secs_f64(),
        index_path.display()
    );
    Ok(())
}

fn parse_scheduler(s: &str) -> anyhow::Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        bail!("scheduler must be \"n,m\"");
    }
    Ok((parts[0].trim().parse()?, parts[1].trim().parse()?))
}

fn train_planner(cli: &Cli, config: &RunConfig, args: &TrainPlannerArgs) -> anyhow::Result<()> {
    let train = load_split(cli, "train")?;
    let dir = cli.out.join("planner");
    ensure_dir(&dir)?;
    let name = args.name.clone().unwrap_or_else(|| {
        if args.rag {
            "rag".to_string()
        } else {
            "norag".to_string()
        }
    });
    let ckpt_path = dir.join(format!("{name}.ckpt"));
    if args.resume.is_none() {
        guard_overwrite(&ckpt_path, cli.force)?;
    }

    let mut planner_config = config.planner_config(args.rag);
    if args.no_obs_interp {
        planner_config.interp_obs = false;
    }
    if args.no_act_interp {
        planner_config.interp_act = false;
    }
    if let Some(s) = &args.scheduler {
        let (n, m) = parse_scheduler(s)?;
        planner_config.scheduler = radplan::diffusion::LambdaSchedulerParams::new(n, m)?;
    }

    let retrievals = if args.rag {
        let dump_path = cli.out.join("index").join(format!("{}.rdemb", args.index));
        let index_path = cli.out.join("index").join(format!("{}.rdix", args.index));
        if !index_path.exists() {
            bail!(
                "--rag needs the retrieval index at {} (run build-index first)",
                index_path.display()
            );
        }
        let dump = dataset::load_embeddings(&dump_path)?;
        let index = retrieval::load(&index_path)?;
        println!("precomputing top-1 training retrievals (same-scene excluded)...");
        Some(harness::precompute_train_retrievals(
            &dump, &index, config, &train,
        )?)
    } else {
        None
    };

    let resume = match &args.resume {
        Some(path) => {
            let loaded = harness::load_planner_checkpoint(path)?;
            if loaded.model.config != planner_config {
                bail!("resume checkpoint config differs from the requested run");
            }
            let opt = loaded
                .optimizer
                .ok_or_else(|| anyhow::anyhow!("checkpoint has no optimizer state"))?;
            Some((loaded.store, opt, loaded.step))
        }
        None => None,
    };
    let start_step = resume.as_ref().map_or(0, |(_, _, s)| *s);
    let steps = args.steps.unwrap_or(config.train_steps).saturating_sub(start_step);

    let t0 = Instant::now();
    let outcome = harness::train_planner(
        config,
        planner_config,
        &train,
        retrievals.as_ref(),
        resume,
        steps,
        |step, loss| {
            if step % 50 == 0 {
                println!("[{:7.1}s] step {step}: loss {loss:.5}", t0.elapsed().as_secs_f64());
            }
        },
    )?;
    let log_path = dir.join(format!("{name}_loss.csv"));
    let mut log_csv = harness::loss_log_csv(&outcome.log, &config.config_hash(), GIT_REV);
    if start_step > 0 && log_path.exists() {
        // Append to the existing log on resume.
        let mut existing = fs::read_to_string(&log_path)?;
        existing.push_str(log_csv.lines().skip(2).collect::<Vec<_>>().join("\n").as_str());
        existing.push('\n');
        log_csv = existing;
    }
    fs::write(&log_path, log_csv)?;
    harness::save_planner_checkpoint(&ckpt_path, &outcome, config, GIT_REV)?;
    println!(
        "trained planner {name} to step {} in {:.1}s -> {}",
        outcome.next_step,
        t0.elapsed().as_secs_f64(),
        ckpt_path.display()
    );
    Ok(())
}

fn evaluate(cli: &Cli, config: &RunConfig, args: &EvaluateArgs) -> anyhow::Result<()> {
    let setting = SettingIndex::new(args.setting)?;
    let val = load_split(cli, "val")?;
    let loaded = harness::load_planner_checkpoint(&args.planner)?;

    let needs_index = matches!(
        setting.inference(),
        harness::InferenceMode::Retrieval | harness::InferenceMode::RandomRetrieval
    );
    let (train, index) = if needs_index {
        let index_path = cli.out.join("index").join(format!("{}.rdix", args.index));
        (
            Some(load_split(cli, "train")?),
            Some(retrieval::load(&index_path)?),
        )
    } else {
        (None, None)
    };
    let embedder = match setting.inference() {
        harness::InferenceMode::Retrieval => {
            let path = args
                .embedder
                .clone()
                .unwrap_or_else(|| cli.out.join("embedder").join("tse.ckpt"));
            Some(harness::load_embedder_checkpoint(&path)?)
        }
        _ => None,
    };

    let mut run_config = config.clone();
    if let Some(runs) = args.runs {
        run_config.eval_runs = runs;
    }
    let t0 = Instant::now();
    let report = harness::evaluate(&harness::EvalInputs {
        config: &run_config,
        setting,
        planner_store: &loaded.store,
        planner: &loaded.model,
        embedder: embedder.as_ref().map(|e| (&e.store, &e.model)),
        index: index.as_ref(),
        train: train.as_ref(),
        val: &val,
        git_revision: GIT_REV.to_string(),
    })?;

    let dir = cli.out.join("reports");
    ensure_dir(&dir)?;
    let name = args
        .name
        .clone()
        .unwrap_or_else(|| format!("setting_{}", args.setting));
    fs::write(dir.join(format!("{name}.json")), report.to_json()?)?;
    fs::write(dir.join(format!("{name}.csv")), report.to_csv())?;
    println!(
        "{} over {} runs x {} segments in {:.1}s:",
        report.setting_label,
        report.runs.len(),
        report.segment_count,
        t0.elapsed().as_secs_f64()
    );
    println!(
        "  minADE6 {:.4} +/- {:.4}   minFDE6 {:.4} +/- {:.4}",
        report.mean.min_ade, report.std.min_ade, report.mean.min_fde, report.std.min_fde
    );
    println!(
        "  minCR {:.4}  avgCR {:.4}  minTTCE {:.4}  avgTTCE {:.4}",
        report.mean.min_cr, report.mean.avg_cr, report.mean.min_ttce, report.mean.avg_ttce
    );
    Ok(())
}

fn report(cli: &Cli, _config: &RunConfig, args: &ReportArgs) -> anyhow::Result<()> {
    let mut reports = Vec::new();
    for path in &args.reports {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading report {}", path.display()))?;
        reports.push(EvalReport::from_json(&text)?);
    }
    let dir = cli.out.join("report");
    ensure_dir(&dir)?;
    let table = harness::report_table(&reports)?;
    print!("{table}");
    fs::write(dir.join("summary.txt"), &table)?;
    fs::write(dir.join("summary.csv"), harness::report_csv(&reports)?)?;
    // Per-segment distributions for the tail analysis plots.
    for r in &reports {
        fs::write(
            dir.join(format!("distribution_setting_{}.csv", r.setting)),
            r.to_csv(),
        )?;
    }
    // Interpolation scheduler sweep curves.
    fs::write(
        dir.join("scheduler_sweep.csv"),
        harness::scheduler_sweep_csv(&[0.5, 1.0, 2.0, 3.0], 20),
    )?;
    // Latency curves, when the bench has run.
    let latency = cli.out.join("bench").join("latency.csv");
    if latency.exists() {
        fs::copy(&latency, dir.join("latency.csv"))?;
    }
    println!("wrote summary + plot data under {}", dir.display());
    Ok(())
}

fn bench_retrieval(cli: &Cli, config: &RunConfig, args: &BenchArgs) -> anyhow::Result<()> {
    let dir = cli.out.join("bench");
    ensure_dir(&dir)?;
    let mut csv = format!(
        "# config_hash={} git_revision={}\n",
        config.config_hash(),
        GIT_REV
    );
    csv.push_str("db_size,dim,k,queries,mean_s,p50_s,p99_s\n");
    println!("retrieval latency (flat index, dim {}):", args.dim);
    for &size in &args.sizes {
        let entries = retrieval::synthetic_entries(size, args.dim, config.seed);
        let index = retrieval::AnyIndex::Flat(retrieval::FlatIndex::build(args.dim, &entries)?);
        drop(entries);
        for &k in &args.k {
            let mut qrng = radplan::rng::stream(config.seed, &[0xbe9d, size as u64, k as u64]);
            let stats = retrieval::bench_latency(&index, args.queries, k, 1, &mut qrng)?;
            println!(
                "  {size:>9} entries, k={k}: mean {:.6}s  p50 {:.6}s  p99 {:.6}s",
                stats.mean_s, stats.p50_s, stats.p99_s
            );
            csv.push_str(&format!(
                "{size},{},{k},{},{},{},{}\n",
                args.dim, stats.queries, stats.mean_s, stats.p50_s, stats.p99_s
            ));
        }
    }
    println!(
        "reference point reported for the full-scale setup: ~0.018 s/query at 1e7 entries, dim 128, k=6 (hardware-dependent; not asserted)"
    );
    fs::write(dir.join("latency.csv"), csv)?;
    Ok(())
}
