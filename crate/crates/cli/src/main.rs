//! Operator surface: generate data, train, score, probe curvature, and run
//! the full benchmark or ablation sweeps, all driven by one flat config file
//! with reproducible seeds.
//!
//! Every subcommand writes its artifacts under `<output>/<subcommand>/`
//! together with a resolved-config snapshot and a checksum manifest.
//! Exit codes: 0 success, 1 generic failure, 2 missing checkpoint,
//! 3 config validation failure, 4 degenerate dataset (single label class).

use clap::{Parser, Subcommand};
use epgs_lab::config::RunConfig;
use epgs_lab::error::Error;
use epgs_lab::eval::{self, AblationGrid, BenchmarkOutput};
use epgs_lab::model::{Model, ParamLocation};
use epgs_lab::taskgen::{generate_corpus, Corpus};
use epgs_lab::{checkpoint, trainer};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "epgs", version, about = "Gradient-sensitivity hallucination lab")]
struct Cli {
    /// Run configuration file (flat `key = value` lines).
    #[arg(long)]
    config: PathBuf,

    /// Output directory root (overrides output.dir from the config).
    #[arg(long)]
    output: Option<PathBuf>,

    /// Per-example fan-out width; 0 uses all cores. Outputs are identical
    /// for any worker count.
    #[arg(long, default_value_t = 0)]
    workers: usize,

    /// Override run.seed from the config.
    #[arg(long)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus and write its JSONL files.
    GenData,
    /// Train the transformer on the generated corpus and save a checkpoint.
    Train,
    /// Score every eval example with the configured detectors.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Top-Hessian-eigenvalue study over the stubborn subset.
    Hessian {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full benchmark: detectors, baselines, subset, curvature, report.
    Benchmark {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep one axis (sigma | location | temperature) and emit a CSV table.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated grid; defaults per axis.
        #[arg(long)]
        grid: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let (tag, code) = match &e {
                Error::Config(_) => ("config", 3),
                Error::Degenerate(_) => ("degenerate", 4),
                Error::Corruption(_) => ("corrupt", 1),
                Error::Contract(_) => ("contract", 1),
                Error::Numerical(_) => ("numerical", 1),
                Error::Io(_) | Error::Json(_) => ("io", 1),
            };
            eprintln!("error[{tag}]: {e}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let mut cfg = RunConfig::from_file(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.run_seed = seed;
    }
    let out_root = cli.output.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;

    let code = match &cli.cmd {
        Cmd::GenData => gen_data(&cfg, &out_root)?,
        Cmd::Train => pool.install(|| train(&cfg, &out_root))?,
        Cmd::Score { checkpoint } => {
            let model = load_checkpoint(checkpoint)?;
            pool.install(|| score(&cfg, &model, &out_root))?
        }
        Cmd::Hessian { checkpoint } => {
            let model = load_checkpoint(checkpoint)?;
            pool.install(|| hessian(&cfg, &model, &out_root))?
        }
        Cmd::Benchmark { checkpoint } => {
            let model = load_checkpoint(checkpoint)?;
            pool.install(|| benchmark(&cfg, &model, &out_root))?
        }
        Cmd::Ablate { checkpoint, axis, grid } => {
            let model = load_checkpoint(checkpoint)?;
            pool.install(|| ablate(&cfg, &model, axis, grid.as_deref(), &out_root))?
        }
    };
    Ok(code)
}

fn load_checkpoint(path: &Path) -> Result<Model, Error> {
    if !path.exists() {
        eprintln!("error[checkpoint]: no checkpoint at {}", path.display());
        std::process::exit(2);
    }
    checkpoint::load(path)
}

fn corpus_for(cfg: &RunConfig) -> Result<Corpus, Error> {
    generate_corpus(&cfg.task_spec(), cfg.model_vocab_size)
}

/// Create `<root>/<sub>/`, write the resolved-config snapshot into it.
fn prepare_dir(cfg: &RunConfig, root: &Path, sub: &str) -> Result<PathBuf, Error> {
    let dir = root.join(sub);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("resolved-config.txt"), cfg.resolved_snapshot())?;
    Ok(dir)
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(to_hex(&h.finalize()))
}

/// Checksum manifest over every file in the directory (except the manifest).
fn write_manifest(dir: &Path) -> Result<(), Error> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.txt")
        .collect();
    names.sort();
    let mut out = String::new();
    for name in names {
        out.push_str(&format!("{}  {}\n", sha256_hex(&dir.join(&name))?, name));
    }
    std::fs::write(dir.join("manifest.txt"), out)?;
    Ok(())
}

fn config_digest(cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(cfg.resolved_snapshot().as_bytes());
    to_hex(&h.finalize())
}

fn gen_data(cfg: &RunConfig, root: &Path) -> Result<ExitCode, Error> {
    let dir = prepare_dir(cfg, root, "gen-data")?;
    let corpus = corpus_for(cfg)?;
    corpus.save_train_jsonl(&dir.join("train.jsonl"))?;
    corpus.save_eval_jsonl(&dir.join("eval.jsonl"))?;
    write_manifest(&dir)?;
    println!(
        "gen-data: {} training sequences, {} eval examples -> {}",
        corpus.train_sequences.len(),
        corpus.eval_examples.len(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(cfg: &RunConfig, root: &Path) -> Result<ExitCode, Error> {
    let dir = prepare_dir(cfg, root, "train")?;
    let corpus = corpus_for(cfg)?;
    let model = Model::init(cfg.model_config())?;
    let (model, report) = trainer::train(model, &corpus, &cfg.train_config())?;
    checkpoint::save(&model, &dir.join("checkpoint.bin"))?;
    report.write_loss_curve_csv(&dir.join("loss_curve.csv"))?;
    std::fs::write(dir.join("train_report.json"), serde_json::to_string_pretty(&report)?)?;
    write_manifest(&dir)?;
    println!(
        "train: final loss {:.6}, grad norm {:.6}, fact acc {:.2}, stubborn-corrupted {:.2}{}",
        report.final_train_loss,
        report.final_grad_norm,
        report.fact_accuracy,
        report.stubborn_match_corrupted,
        if report.converged { "" } else { " [NOT CONVERGED]" }
    );
    Ok(ExitCode::SUCCESS)
}

fn score(cfg: &RunConfig, model: &Model, root: &Path) -> Result<ExitCode, Error> {
    let dir = prepare_dir(cfg, root, "score")?;
    let corpus = corpus_for(cfg)?;
    let mut bench_cfg = cfg.benchmark_config(config_digest(cfg));
    bench_cfg.curvature_max_examples = Some(0);
    let out = eval::run_benchmark(model, &corpus, &bench_cfg)?;
    eval::write_scores_jsonl(&out.records, &dir.join("scores.jsonl"))?;
    eval::write_samples_jsonl(&out.samples, &dir.join("samples.jsonl"))?;
    write_manifest(&dir)?;
    println!("score: {} records -> {}", out.records.len(), dir.display());
    degenerate_exit(&out)
}

fn hessian(cfg: &RunConfig, model: &Model, root: &Path) -> Result<ExitCode, Error> {
    let dir = prepare_dir(cfg, root, "hessian")?;
    let corpus = corpus_for(cfg)?;
    let mut bench_cfg = cfg.benchmark_config(config_digest(cfg));
    bench_cfg.methods = vec!["epgs".to_string()];
    let out = eval::run_benchmark(model, &corpus, &bench_cfg)?;
    eval::write_curvature_jsonl(&out.curvature, &dir.join("curvature.jsonl"))?;
    eval::write_curvature_scatter_csv(
        &out.records,
        &out.curvature,
        &corpus.eval_examples,
        &dir.join("curvature_scatter.csv"),
    )?;
    std::fs::write(
        dir.join("correlation.json"),
        serde_json::to_string_pretty(&out.report.curvature)?,
    )?;
    write_manifest(&dir)?;
    match &out.report.curvature {
        Some(c) => println!(
            "hessian: n={} pearson={:?} spearman={:?} sharpness-ratio={:?}",
            c.n, c.pearson_epgs_lambda, c.spearman_epgs_lambda, c.sharpness_ratio
        ),
        None => println!("hessian: stubborn subset empty, no curvature probes"),
    }
    degenerate_exit(&out)
}

fn benchmark(cfg: &RunConfig, model: &Model, root: &Path) -> Result<ExitCode, Error> {
    let dir = prepare_dir(cfg, root, "benchmark")?;
    let corpus = corpus_for(cfg)?;
    let bench_cfg = cfg.benchmark_config(config_digest(cfg));
    let out = eval::run_benchmark(model, &corpus, &bench_cfg)?;
    eval::write_report_json(&out.report, &dir.join("report.json"))?;
    // Wall-clock timings are inherently non-reproducible and live in their
    // own file so everything else stays byte-identical across reruns.
    eval::write_timings_json(&out.timings, &dir.join("timings.json"))?;
    eval::write_scores_jsonl(&out.records, &dir.join("scores.jsonl"))?;
    eval::write_samples_jsonl(&out.samples, &dir.join("samples.jsonl"))?;
    eval::write_curvature_jsonl(&out.curvature, &dir.join("curvature.jsonl"))?;
    eval::write_auroc_csv(&out.report, &dir.join("auroc.csv"))?;
    eval::write_curvature_scatter_csv(
        &out.records,
        &out.curvature,
        &corpus.eval_examples,
        &dir.join("curvature_scatter.csv"),
    )?;
    write_manifest(&dir)?;
    println!(
        "benchmark: {} examples, stubborn subset {}, audit grad norm {:.4}{}",
        out.report.n_examples,
        out.report.n_stubborn_subset,
        out.report.convergence_audit.full_grad_norm,
        if out.report.degenerate_labels { " [DEGENERATE LABELS]" } else { "" }
    );
    for (method, fam) in &out.report.auroc {
        println!(
            "  {method}: full={} stubborn={}",
            fam.full.map(|v| format!("{v:.4}")).unwrap_or_else(|| "null".into()),
            fam.stubborn_subset.map(|v| format!("{v:.4}")).unwrap_or_else(|| "null".into()),
        );
    }
    degenerate_exit(&out)
}

fn degenerate_exit(out: &BenchmarkOutput) -> Result<ExitCode, Error> {
    if out.report.degenerate_labels {
        Ok(ExitCode::from(4))
    } else {
        Ok(ExitCode::SUCCESS)
    }
}

fn ablate(
    cfg: &RunConfig,
    model: &Model,
    axis: &str,
    grid: Option<&str>,
    root: &Path,
) -> Result<ExitCode, Error> {
    let dir = prepare_dir(cfg, root, "ablate")?;
    let corpus = corpus_for(cfg)?;
    let bench_cfg = cfg.benchmark_config(config_digest(cfg));
    let parse_floats = |s: &str| -> Result<Vec<f64>, Error> {
        s.split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad grid value '{v}' for axis {axis}")))
            })
            .collect()
    };
    let grid = match axis {
        "sigma" => AblationGrid::Sigma(match grid {
            Some(g) => parse_floats(g)?,
            None => vec![0.001, 0.01, 0.1, 1.0],
        }),
        "location" => AblationGrid::Location(match grid {
            Some(g) => g
                .split(',')
                .map(|v| ParamLocation::parse(v.trim()))
                .collect::<Result<Vec<_>, _>>()?,
            None => vec![
                ParamLocation::MidBlock,
                ParamLocation::LastBlock,
                ParamLocation::FinalNorm,
                ParamLocation::Head,
            ],
        }),
        "temperature" => AblationGrid::Temperature(match grid {
            Some(g) => parse_floats(g)?,
            None => vec![0.1, 0.325, 0.55, 0.775, 1.0],
        }),
        other => return Err(Error::Config(format!("unknown ablation axis '{other}'"))),
    };
    let table = eval::run_ablation(model, &corpus, &grid, &bench_cfg)?;
    let name = format!("ablation_{}.csv", table.axis);
    eval::write_ablation_csv(&table, &dir.join(&name))?;
    write_manifest(&dir)?;
    println!("ablate: {} rows -> {}", table.rows.len(), dir.join(&name).display());
    Ok(ExitCode::SUCCESS)
}
