//! `sea`: verification suites, scaling benchmarks, toy distillation,
//! dynamic-k sweeps and attention dumps.
//!
//! Exit status: 0 on success, 1 when a suite or command fails, 2 on a
//! configuration error.

mod settings;

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sea_core::bench::{run_bench, BenchConfig, BenchRow};
use sea_core::distill::toy::copy_dataset;
use sea_core::distill::{
    load_pair, pretrain_teacher, save_pair, train_toy, LossWeights, Optimizer, PretrainConfig, ToyConfig, ToyStudent,
    TrainConfig,
};
use sea_core::pgm::dump_attention;
use sea_core::serialize::WeightStore;
use sea_core::verify::{run_all, VerifyConfig};
use sea_core::SeaError;

use settings::{config_error, ConfigError, Settings};

#[derive(Parser)]
#[command(name = "sea", version, about = "Sparse linear attention with an estimated mask: verification and toy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every correctness suite and report pass/fail per suite.
    Verify(VerifyArgs),
    /// Count MACs, mask nonzeros, bytes and wall time against dense attention.
    Bench(BenchArgs),
    /// Pretrain a dense teacher on the copy task and distill a SEA student.
    TrainToy(TrainArgs),
    /// Evaluate trained weights at several top-k budgets without retraining.
    DynamicK(DynamicKArgs),
    /// Write PGM images of every intermediate attention buffer.
    DumpAttn(DumpArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// `key = value` file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sequence lengths for the randomized pipeline suites.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Randomized oracle-equivalence cases.
    #[arg(long)]
    cases: Option<usize>,
    /// Skip the gradient, FAVOR+ and scaling suites.
    #[arg(long)]
    quick: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seq_lens: Option<Vec<usize>>,
    /// Keys kept per query.
    #[arg(long)]
    k: Option<usize>,
    /// Compressed width.
    #[arg(long = "K")]
    compressed: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Dense runs whose estimated footprint exceeds this many bytes are skipped.
    #[arg(long)]
    byte_cap: Option<u64>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training log CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Weight file holding teacher and student.
    #[arg(long)]
    save: Option<PathBuf>,
    /// `adam` or `sgd`.
    #[arg(long)]
    optimizer: Option<Optimizer>,
    #[arg(long)]
    lr_sea: Option<f64>,
    #[arg(long)]
    lr_backbone: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "K")]
    compressed: Option<usize>,
    /// Bidirectional reversal task instead of causal copying.
    #[arg(long)]
    bidirectional: bool,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    /// Train on the task loss alone (undistilled baseline).
    #[arg(long)]
    task_only: bool,
}

#[derive(Args)]
struct DynamicKArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    k_list: Option<Vec<usize>>,
    /// Held-out samples per evaluation.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Seed of the copy-task input sequence.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigError>() || matches!(c.downcast_ref::<SeaError>(), Some(SeaError::Config(_)))
    })
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Verify(a) => verify(a),
        Command::Bench(a) => bench(a),
        Command::TrainToy(a) => train(a),
        Command::DynamicK(a) => dynamic_k(a),
        Command::DumpAttn(a) => dump(a),
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout()),
    })
}

fn verify(a: VerifyArgs) -> Result<ExitCode> {
    let s = Settings::load(&a.config, &["seed", "sizes", "cases", "quick"])?;
    let d = VerifyConfig::default();
    let c = VerifyConfig {
        seed: s.get("seed", a.seed, d.seed)?,
        sizes: s.list("sizes", a.sizes, d.sizes)?,
        oracle_cases: s.get("cases", a.cases, d.oracle_cases)?,
        full: !s.flag("quick", a.quick)?,
        ..d
    };
    if c.sizes.iter().any(|&t| t < 2) {
        return Err(config_error("sizes must be at least 2"));
    }
    let reports = run_all(&c);
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} suites, {} failed", reports.len(), failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    let s = Settings::load(&a.config, &["seq_lens", "k", "K", "reps", "seed", "threads", "byte_cap", "out"])?;
    let d = BenchConfig::default();
    let b = BenchConfig {
        seq_lens: s.list("seq_lens", a.seq_lens, d.seq_lens)?,
        top_k: s.get("k", a.k, d.top_k)?,
        compressed_len: s.get("K", a.compressed, d.compressed_len)?,
        reps: s.get("reps", a.reps, d.reps)?,
        seed: s.get("seed", a.seed, d.seed)?,
        threads: s.get("threads", a.threads, d.threads)?,
        byte_cap: s.get("byte_cap", a.byte_cap, d.byte_cap)?,
        ..d
    };
    let out = s.path("out", a.out)?;
    let rows = run_bench(&b)?;
    let mut w = csv::Writer::from_writer(output(&out)?);
    w.write_record(BenchRow::HEADER)?;
    for r in &rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let keys = [
        "steps", "seed", "out", "save", "optimizer", "lr_sea", "lr_backbone", "k", "K", "bidirectional",
        "pretrain_steps", "task_only",
    ];
    let s = Settings::load(&a.config, &keys)?;
    let seed = s.get("seed", a.seed, 0)?;
    let recipe = TrainConfig::desk_recipe(seed);
    let toy = ToyConfig { causal: !s.flag("bidirectional", a.bidirectional)?, ..ToyConfig::default() };
    toy.validate()?;
    let sea_cfg = toy.sea_config(s.get("K", a.compressed, 8)?, s.get("k", a.k, 4)?);
    sea_cfg.validate()?;
    let c = TrainConfig {
        steps: s.get("steps", a.steps, recipe.steps)?,
        optimizer: s.get("optimizer", a.optimizer, recipe.optimizer)?,
        lr_sea: s.get("lr_sea", a.lr_sea, recipe.lr_sea)?,
        lr_backbone: s.get("lr_backbone", a.lr_backbone, recipe.lr_backbone)?,
        weights: if s.flag("task_only", a.task_only)? { LossWeights::task_only() } else { recipe.weights },
        ..recipe
    };
    let p = PretrainConfig {
        steps: s.get("pretrain_steps", a.pretrain_steps, PretrainConfig::default().steps)?,
        seed,
        ..Default::default()
    };
    let (out, save) = (s.path("out", a.out)?, s.path("save", a.save)?);

    let (teacher, teacher_loss) = pretrain_teacher(toy, &p)?;
    eprintln!("teacher validation loss {teacher_loss:.4}");
    let mut student = ToyStudent::from_teacher(&teacher, sea_cfg, seed)?;
    let log = train_toy(&teacher, &mut student, &c)?;
    eprintln!(
        "total loss {:.4} -> {:.4}, student validation task loss {:.4}",
        log.first_total(),
        log.last_total(),
        log.final_val_task()
    );
    output(&out)?.write_all(log.to_csv().as_bytes())?;
    if let Some(path) = save {
        save_pair(&teacher, &student).save(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn load_weights(s: &Settings, flag: Option<PathBuf>) -> Result<(sea_core::distill::ToyTeacher, ToyStudent)> {
    let path = s.path("weights", flag)?.ok_or_else(|| config_error("--weights is required"))?;
    let store = WeightStore::load(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(load_pair(store)?)
}

fn dynamic_k(a: DynamicKArgs) -> Result<ExitCode> {
    let s = Settings::load(&a.config, &["weights", "k_list", "samples", "seed", "out"])?;
    let (_, student) = load_weights(&s, a.weights)?;
    let t = student.cfg.seq_len;
    let ks = s.list("k_list", a.k_list, vec![1, student.sea_cfg.top_k, t])?;
    for &k in &ks {
        student.sea_cfg.with_top_k(k)?;
    }
    let n = s.get("samples", a.samples, 64)?;
    let samples = copy_dataset(&student.cfg, n, s.get("seed", a.seed, 1234)?);
    let out = s.path("out", a.out)?;
    let mut w = csv::Writer::from_writer(output(&out)?);
    w.write_record(["k", "task_loss"])?;
    for k in ks {
        let loss = student.task_loss(&samples, k)?;
        w.write_record([k.to_string(), format!("{loss:.6}")])?;
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn dump(a: DumpArgs) -> Result<ExitCode> {
    let s = Settings::load(&a.config, &["weights", "seed", "out"])?;
    let (teacher, student) = load_weights(&s, a.weights)?;
    let dir = s.path("out", a.out)?.ok_or_else(|| config_error("--out is required"))?;
    let sample = &copy_dataset(&student.cfg, 1, s.get("seed", a.seed, 0)?)[0];
    let written = dump_attention(&student, &teacher, &sample.tokens, &dir)?;
    eprintln!("wrote {} images to {}", written.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}
