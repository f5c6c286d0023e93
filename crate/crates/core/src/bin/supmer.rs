use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use supmer::checkpoint::{read_metrics, write_metrics, Checkpoint};
use supmer::corpus::{generate_synthetic, load_corpus, save_corpus, Corpus, SyntheticConfig};
use supmer::harness::{
    domain_shift_benchmark, evaluate, prompt_tune, run_vanilla_pt, shift_task, BenchmarkConfig, BenchmarkReport, Curves,
    HeldOut, SUPMER, VANILLA,
};
use supmer::metagrad::RegularizerState;
use supmer::metalearn::{meta_train, validate, Frozen, MetaState};
use supmer::pipeline::{build_pool, frozen_models, FrozenModels, TaskPool};
use supmer::promptmodel::PromptState;
use supmer::rng::{Purpose, Streams};
use supmer::taskgen::{write_tasks, MetaTask, TaskFormat};
use supmer::{Error, Result};

#[derive(Parser)]
#[command(name = "supmer", version, about = "Desk-scale self-supervised meta-prompt learning")]
struct Cli {
    /// key = value overrides; bare keys are TrainConfig fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for every random draw
    #[arg(long, global = true, env = "SUPMER_SEED")]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus to corpus.txt
    GenCorpus,
    /// Encode, cluster and generate the meta-task pools
    BuildTasks {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Meta-train the prompt and the gradient regularizer
    MetaTrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Tune on the downstream task, from a checkpoint or from a random prompt
    Tune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Validation and downstream accuracy of a checkpoint, without tuning
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Domain-shift benchmark over consecutive seeds starting at --seed
    BenchDg {
        #[arg(long, default_value_t = 5)]
        num_seeds: u64,
    },
    /// CSV files for plotting
    EmitPlots {
        #[arg(long)]
        metrics: PathBuf,
        /// A tune or bench-dg report
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct TuneReport {
    method: String,
    seed: u64,
    checkpoint_step: Option<u64>,
    curves: Curves,
}

#[derive(Serialize)]
struct PoolSummary {
    seed: u64,
    train_sentences: usize,
    val_sentences: usize,
    clusters: usize,
    train_tasks: usize,
    val_tasks: usize,
    train_by_format: Vec<(TaskFormat, usize)>,
    val_by_format: Vec<(TaskFormat, usize)>,
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint_step: u64,
    val_loss: Option<f64>,
    val_acc: Option<f64>,
    downstream: Vec<(String, f64)>,
}

fn resolve_config(cli: &Cli) -> Result<BenchmarkConfig> {
    let mut cfg = match &cli.config {
        Some(path) => supmer::config::load(path)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.pipeline.seed = seed;
    }
    // episode sizes are set once, on the training side
    cfg.pipeline.task_gen.support_size = cfg.train.support_size;
    cfg.pipeline.task_gen.query_size = cfg.train.query_size;
    cfg.train.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read_corpus(path: Option<&PathBuf>, cfg: &BenchmarkConfig) -> Result<Option<Corpus>> {
    path.map(|p| load_corpus(p, cfg.pipeline.corpus.vocab_size)).transpose()
}

fn setup(cfg: &BenchmarkConfig, corpus: Option<Corpus>) -> Result<(FrozenModels, TaskPool)> {
    let models = frozen_models(&cfg.pipeline, cfg.pipeline.corpus.vocab_size, cfg.train.prompt_dim)?;
    let pool = build_pool(&cfg.pipeline, &models.encoder, corpus)?;
    Ok((models, pool))
}

fn frozen(models: &FrozenModels) -> Frozen<'_> {
    Frozen {
        scorer: &models.scorer,
        encoder: &models.encoder,
    }
}

fn by_format(tasks: &[MetaTask]) -> Vec<(TaskFormat, usize)> {
    TaskFormat::ALL
        .iter()
        .map(|&f| (f, tasks.iter().filter(|t| t.format == f).count()))
        .collect()
}

/// Takes the training section from the checkpoint so the prompt shape and
/// seed match the run that produced it.
fn adopt_checkpoint(cfg: &mut BenchmarkConfig, ckpt: &Checkpoint) {
    if ckpt.config != cfg.train {
        warn!("using the training config stored in the checkpoint");
    }
    cfg.train = ckpt.config.clone();
}

fn downstream_task(cfg: &BenchmarkConfig, models: &FrozenModels, pool: &TaskPool) -> Result<supmer::harness::DownstreamTask> {
    let held = HeldOut::new(&models.encoder, &pool.val_corpus, &pool.train_clusters)?;
    let streams = Streams::new(cfg.pipeline.seed);
    shift_task(
        &models.encoder,
        &held,
        &pool.train_clusters,
        &cfg.shift,
        streams.derive_seed(Purpose::Benchmark, 0),
    )
}

fn gen_corpus(cli: &Cli, cfg: &BenchmarkConfig) -> Result<()> {
    let streams = Streams::new(cfg.pipeline.seed);
    let corpus = generate_synthetic(&SyntheticConfig {
        seed: streams.derive_seed(Purpose::Corpus, 0),
        ..cfg.pipeline.corpus.clone()
    })?;
    let path = cli.out.join("corpus.txt");
    save_corpus(&corpus, &path)?;
    info!("{} documents, {} sentences -> {}", corpus.num_documents(), corpus.num_sentences(), path.display());
    Ok(())
}

fn build_tasks(cli: &Cli, cfg: &BenchmarkConfig, corpus: Option<&PathBuf>) -> Result<()> {
    let (_, pool) = setup(cfg, read_corpus(corpus, cfg)?)?;
    write_tasks(cli.out.join("train_tasks.jsonl"), &pool.train_tasks)?;
    write_tasks(cli.out.join("val_tasks.jsonl"), &pool.val_tasks)?;
    write_json(
        &cli.out.join("tasks_summary.json"),
        &PoolSummary {
            seed: cfg.pipeline.seed,
            train_sentences: pool.train_corpus.num_sentences(),
            val_sentences: pool.val_corpus.num_sentences(),
            clusters: pool.train_clusters.centroids.nrows(),
            train_tasks: pool.train_tasks.len(),
            val_tasks: pool.val_tasks.len(),
            train_by_format: by_format(&pool.train_tasks),
            val_by_format: by_format(&pool.val_tasks),
        },
    )
}

fn meta_train_cmd(
    cli: &Cli,
    cfg: &mut BenchmarkConfig,
    corpus: Option<&PathBuf>,
    max_steps: Option<u64>,
    resume: Option<&PathBuf>,
) -> Result<()> {
    let resumed = resume.map(Checkpoint::load).transpose()?;
    if let Some(ckpt) = &resumed {
        adopt_checkpoint(cfg, ckpt);
    }
    if let Some(n) = max_steps {
        cfg.train.max_steps = n;
    }
    let (models, pool) = setup(cfg, read_corpus(corpus, cfg)?)?;
    let state = match &resumed {
        Some(ckpt) => ckpt.state()?,
        None => MetaState::initial(&cfg.train, cfg.pipeline.hidden_dim),
    };
    let out = meta_train(frozen(&models), &pool.train_tasks, &pool.val_tasks, &cfg.train, state)?;
    Checkpoint::new(&out.final_state, &cfg.train)?.save(cli.out.join("checkpoint.json"))?;
    Checkpoint::with_params(&out.best_theta, &out.best_phi, &out.final_state, &cfg.train)?.save(cli.out.join("best.json"))?;
    write_metrics(cli.out.join("metrics.jsonl"), &out.metrics)?;
    info!(
        "{} steps, best validation loss {:?} at step {}",
        out.metrics.len(),
        out.best_val_loss,
        out.best_step
    );
    Ok(())
}

fn load_params(path: &Path) -> Result<(Checkpoint, PromptState, RegularizerState)> {
    let ckpt = Checkpoint::load(path)?;
    let state = ckpt.state()?;
    Ok((ckpt, state.theta, state.phi))
}

fn tune(cli: &Cli, cfg: &mut BenchmarkConfig, checkpoint: Option<&PathBuf>) -> Result<()> {
    let loaded = checkpoint.map(|p| load_params(p)).transpose()?;
    if let Some((ckpt, ..)) = &loaded {
        adopt_checkpoint(cfg, ckpt);
    }
    cfg.tune.validate()?;
    let (models, pool) = setup(cfg, None)?;
    let task = downstream_task(cfg, &models, &pool)?;
    let (method, step, outcome) = match &loaded {
        Some((ckpt, theta, phi)) => {
            let phi = cfg.train.regularizer.then_some(phi);
            (SUPMER, Some(ckpt.step), prompt_tune(frozen(&models), theta, phi, &task, &cfg.tune)?)
        }
        None => {
            let seed = Streams::new(cfg.pipeline.seed).derive_seed(Purpose::Downstream, 0);
            let outcome = run_vanilla_pt(
                frozen(&models),
                &task,
                cfg.train.prompt_tokens,
                cfg.train.prompt_init_std,
                &cfg.tune,
                seed,
            )?;
            (VANILLA, None, outcome)
        }
    };
    write_json(
        &cli.out.join("tune_report.json"),
        &TuneReport {
            method: method.into(),
            seed: cfg.pipeline.seed,
            checkpoint_step: step,
            curves: outcome.curves,
        },
    )
}

fn eval(cli: &Cli, cfg: &mut BenchmarkConfig, checkpoint: &Path) -> Result<()> {
    let (ckpt, theta, phi) = load_params(checkpoint)?;
    adopt_checkpoint(cfg, &ckpt);
    let (models, pool) = setup(cfg, None)?;
    let (val_loss, val_acc) = if pool.val_tasks.is_empty() {
        (None, None)
    } else {
        let (l, a) = validate(frozen(&models), &theta, &phi, &pool.val_tasks, &cfg.train)?;
        (Some(l), Some(a))
    };
    let task = downstream_task(cfg, &models, &pool)?;
    let mut downstream = vec![("validation".to_string(), evaluate(&models.scorer, &theta, &[&task.validation])?)];
    for (domain, ep) in &task.tests {
        downstream.push((domain.clone(), evaluate(&models.scorer, &theta, &[ep])?));
    }
    write_json(
        &cli.out.join("eval_report.json"),
        &EvalReport {
            checkpoint_step: ckpt.step,
            val_loss,
            val_acc,
            downstream,
        },
    )
}

fn bench_dg(cli: &Cli, cfg: &BenchmarkConfig, num_seeds: u64) -> Result<()> {
    let first = cfg.pipeline.seed;
    let seeds: Vec<u64> = (0..num_seeds).map(|i| first.wrapping_add(i)).collect();
    let report = domain_shift_benchmark(cfg, &seeds)?;
    for s in &report.summary {
        info!(
            "{:8} {:7} best {:.3} ± {:.3}  final {:.3} ± {:.3}",
            s.method, s.domain, s.best_mean, s.best_std, s.last_mean, s.last_std
        );
    }
    write_json(&cli.out.join("bench_report.json"), &report)
}

#[derive(Serialize)]
struct AccuracyRow<'a> {
    method: &'a str,
    seed: u64,
    domain: &'a str,
    step: usize,
    accuracy: f64,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let io = match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("{other:?}")),
    };
    Error::io(path, io)
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn emit_plots(cli: &Cli, metrics: &Path, report: Option<&PathBuf>) -> Result<()> {
    // one row per outer step; empty cells where no validation ran
    write_csv(&cli.out.join("inner_product.csv"), read_metrics(metrics)?)?;

    let Some(report) = report else {
        return Ok(());
    };
    let text = fs::read_to_string(report).map_err(|e| Error::io(report, e))?;
    // (method, seed, domain, eval_interval, curve)
    let mut series: Vec<(String, u64, String, usize, Vec<f64>)> = Vec::new();
    if let Ok(bench) = serde_json::from_str::<BenchmarkReport>(&text) {
        for r in bench.runs {
            series.push((r.method, r.seed, r.domain, bench.eval_interval, r.curve));
        }
    } else {
        let tune: TuneReport = serde_json::from_str(&text)?;
        let c = tune.curves;
        series.push((tune.method.clone(), tune.seed, "validation".into(), c.eval_interval, c.validation));
        for (domain, curve) in c.tests {
            series.push((tune.method.clone(), tune.seed, domain, c.eval_interval, curve));
        }
    }
    let rows = series.iter().flat_map(|(method, seed, domain, interval, curve)| {
        curve.iter().enumerate().map(move |(k, &accuracy)| AccuracyRow {
            method,
            seed: *seed,
            domain,
            step: k * interval,
            accuracy,
        })
    });
    write_csv(&cli.out.join("accuracy_vs_step.csv"), rows)
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    match &cli.command {
        Command::GenCorpus => gen_corpus(cli, &cfg),
        Command::BuildTasks { corpus } => build_tasks(cli, &cfg, corpus.as_ref()),
        Command::MetaTrain {
            corpus,
            max_steps,
            resume,
        } => meta_train_cmd(cli, &mut cfg, corpus.as_ref(), *max_steps, resume.as_ref()),
        Command::Tune { checkpoint } => tune(cli, &mut cfg, checkpoint.as_ref()),
        Command::Eval { checkpoint } => eval(cli, &mut cfg, checkpoint),
        Command::BenchDg { num_seeds } => bench_dg(cli, &cfg, *num_seeds),
        Command::EmitPlots { metrics, report } => emit_plots(cli, metrics, report.as_ref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
