//! Command-line front end: dataset generation, training, frozen-feature
//! evaluation, gradient auditing, and a small sorting demo. Every command
//! echoes its effective configuration as the first stdout line and into any
//! artifact it writes, so a run is reproducible from its outputs alone.
//! Failures print a single JSON line on stderr and exit nonzero.

mod config;
mod gradcheck;

use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use neco_core::data::{read_dataset, write_dataset, DatasetManifest, Split};
use neco_core::eval::{eval_clustering, eval_incontext, EvalReport};
use neco_core::seed::derive_seed;
use neco_core::sortnet::{build_network, soft_sort_values, NetworkKind, RelaxFamily};
use neco_core::train::{load_checkpoint_auto, train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "neco",
    version,
    about = "Train and probe patch features with relaxed sorting networks"
)]
struct Cli {
    /// Cap the worker thread pool (default: one worker per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic labeled shape dataset (train and val splits).
    GenData(GenDataArgs),
    /// Train the student/teacher encoder pair on two-view crops.
    Train(TrainArgs),
    /// Evaluate frozen features from a checkpoint.
    Eval(EvalArgs),
    /// Audit reverse-mode gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Sort a few values with a relaxed network and print the permutation.
    SortDemo(SortDemoArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Directory that receives train.bin and val.bin.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenes in the training split.
    #[arg(long, default_value_t = 512)]
    scenes: usize,
    /// Scenes in the validation split.
    #[arg(long = "val-scenes", default_value_t = 128)]
    val_scenes: usize,
    /// Segmentation classes including background.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Most shapes drawn per scene.
    #[arg(long = "max-shapes", default_value_t = 4)]
    max_shapes: usize,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// `key = value` config file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root holding train.bin (overrides dataset_root).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for checkpoint, log, config echo, and report.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra config override, repeatable (e.g. --set loss.top_k=4).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root holding val.bin (and train.bin for incontext).
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// cluster | overcluster | incontext
    #[arg(long, value_parser = ["cluster", "overcluster", "incontext"])]
    protocol: String,
    /// Cluster count for the clustering protocols. Defaults to the class
    /// count (cluster) or twice the class count (overcluster).
    #[arg(long = "K")]
    k_clusters: Option<usize>,
    /// Neighbors retrieved per query patch (incontext).
    #[arg(long = "k", default_value_t = 30)]
    neighbors: usize,
    /// Fraction of the training bank made available (incontext).
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    /// Evaluation seeds to average over. Defaults to 1 for clustering and 5
    /// for fractional incontext banks.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Memory bank row cap (incontext).
    #[arg(long, default_value_t = 20_000)]
    cap: usize,
    /// Retrieval softmax temperature (incontext).
    #[arg(long, default_value_t = 0.1)]
    temperature: f64,
    /// k-means iteration cap (clustering).
    #[arg(long = "max-iters", default_value_t = 100)]
    max_iters: usize,
    /// Evaluate the teacher (EMA) or the student tower.
    #[arg(long, default_value = "teacher", value_parser = ["teacher", "student"])]
    model: String,
    /// L2-normalize features before clustering.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    unit_norm: bool,
    /// Also write the report JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sorted-vector lengths to probe, comma separated.
    #[arg(long, default_value = "2,4,8,16")]
    sizes: String,
}

#[derive(clap::Args)]
struct SortDemoArgs {
    /// Values to sort, comma separated.
    #[arg(long)]
    values: String,
    /// Comparator steepness; large values approach a hard sort.
    #[arg(long, default_value_t = 1e6)]
    beta: f64,
    #[arg(long, default_value = "odd_even", value_parser = ["odd_even", "bitonic"])]
    network: String,
    #[arg(long, default_value = "logistic", value_parser = ["logistic", "arctan"])]
    relax: String,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("{}", json!({ "error": format!("{e:#}") }));
        std::process::exit(1);
    }
}

/// Writes one stdout line, exiting quietly if the consumer closed the pipe.
pub fn emit(line: impl std::fmt::Display) {
    use std::io::Write;
    if writeln!(std::io::stdout(), "{line}").is_err() {
        std::process::exit(0);
    }
}

fn run() -> Result<()> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => bail!("{e}"),
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Gradcheck(args) => gradcheck_cmd(args),
        Command::SortDemo(args) => sort_demo(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let echo = json!({
        "command": "gen_data",
        "out": args.out,
        "seed": args.seed,
        "scenes": args.scenes,
        "val_scenes": args.val_scenes,
        "classes": args.classes,
        "size": args.size,
        "max_shapes": args.max_shapes,
    });
    emit(&echo);

    let train_manifest = DatasetManifest {
        num_scenes: args.scenes,
        num_classes: args.classes,
        height: args.size,
        width: args.size,
        split: Split::Train,
        master_seed: args.seed,
        max_shapes: args.max_shapes,
    };
    train_manifest.validate()?;
    let val_manifest = DatasetManifest {
        num_scenes: args.val_scenes,
        split: Split::Val,
        ..train_manifest
    };
    val_manifest.validate()?;

    let train_path = write_dataset(&args.out, &train_manifest)?;
    let val_path = write_dataset(&args.out, &val_manifest)?;
    fs::write(
        args.out.join("gen_config.json"),
        serde_json::to_string_pretty(&echo)?,
    )?;
    emit(json!({ "train": train_path, "val": val_path }));
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut pairs = match &args.config {
        Some(path) => config::parse_config_file(path)?,
        None => Vec::new(),
    };
    for raw in &args.set {
        pairs.push(config::parse_override(raw)?);
    }
    let mut cfg = config::apply_overrides(&TrainConfig::default(), &pairs)?;
    if let Some(data) = args.data {
        cfg.dataset_root = data;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.resume {
        cfg.resume = true;
    }
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        cfg.checkpoint_path = Some(out.join("model.ckpt"));
        cfg.log_path = Some(out.join("train.log"));
    }
    cfg.validate()?;
    if cfg.resume && cfg.checkpoint_path.is_none() {
        bail!("--resume needs --out (or checkpoint_path) to locate the checkpoint");
    }

    let echo = json!({ "command": "train", "config": &cfg });
    emit(&echo);
    if let Some(out) = &args.out {
        fs::write(out.join("config.json"), serde_json::to_string_pretty(&echo)?)?;
    }

    let (_, report) = train(&cfg)?;

    if let Some(out) = &args.out {
        let full = json!({ "config": &cfg, "report": &report });
        fs::write(out.join("report.json"), serde_json::to_string_pretty(&full)?)?;
    }
    emit(json!({
        "steps_run": report.steps_run,
        "final_loss": report.records.last().map(|r| r.loss),
        "epoch_mean_loss": report.epoch_mean_loss,
    }));
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let state = load_checkpoint_auto(&args.checkpoint)?;
    let params = match args.model.as_str() {
        "student" => &state.student,
        _ => &state.teacher,
    };
    let (val_manifest, val) = read_dataset(&args.data.join("val.bin"))?;
    let num_classes = val_manifest.num_classes;

    let (report, k_clusters, runs) = match args.protocol.as_str() {
        "incontext" => {
            let (_, train_scenes) = read_dataset(&args.data.join("train.bin"))?;
            let trials = args.seeds.unwrap_or(5);
            let report = eval_incontext(
                params,
                &train_scenes,
                &val,
                num_classes,
                args.cap,
                args.neighbors,
                args.temperature,
                args.fraction,
                trials,
                args.seed,
            )?;
            (report, None, trials)
        }
        protocol => {
            let k = args.k_clusters.unwrap_or(match protocol {
                "overcluster" => 2 * num_classes,
                _ => num_classes,
            });
            let runs = args.seeds.unwrap_or(1);
            if runs == 0 {
                bail!("--seeds must be positive");
            }
            let reports: Vec<EvalReport> = (0..runs)
                .map(|i| {
                    eval_clustering(
                        params,
                        &val,
                        num_classes,
                        k,
                        args.max_iters,
                        derive_seed(args.seed, "eval-run", i as u64),
                        args.unit_norm,
                    )
                })
                .collect::<neco_core::Result<_>>()?;
            (merge_cluster_reports(reports), Some(k), runs)
        }
    };

    let result = json!({
        "command": "eval",
        "checkpoint": args.checkpoint,
        "data": args.data,
        "protocol": args.protocol,
        "model": args.model,
        "k_clusters": k_clusters,
        "neighbors": args.neighbors,
        "fraction": args.fraction,
        "cap": args.cap,
        "temperature": args.temperature,
        "max_iters": args.max_iters,
        "unit_norm": args.unit_norm,
        "seed": args.seed,
        "eval_seeds": runs,
        "train_config": state.config.portable(),
        "report": report,
    });
    emit(&result);
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(out, serde_json::to_string_pretty(&result)?)?;
    }
    Ok(())
}

/// Combines per-seed clustering reports: mean of the run means, population
/// spread across runs, and per-class IoU averaged over the runs that scored
/// the class.
fn merge_cluster_reports(reports: Vec<EvalReport>) -> EvalReport {
    if reports.len() == 1 {
        return reports.into_iter().next().expect("one report");
    }
    let n = reports.len() as f64;
    let mean = reports.iter().map(|r| r.miou_mean).sum::<f64>() / n;
    let var = reports
        .iter()
        .map(|r| (r.miou_mean - mean).powi(2))
        .sum::<f64>()
        / n;
    let classes = reports[0].per_class_iou.len();
    let per_class = (0..classes)
        .map(|c| {
            let scored: Vec<f64> = reports
                .iter()
                .filter_map(|r| r.per_class_iou[c])
                .collect();
            if scored.is_empty() {
                None
            } else {
                Some(scored.iter().sum::<f64>() / scored.len() as f64)
            }
        })
        .collect();
    EvalReport {
        protocol: reports[0].protocol.clone(),
        k: reports[0].k,
        fraction: None,
        seeds: reports.iter().flat_map(|r| r.seeds.clone()).collect(),
        miou_mean: mean,
        miou_std: var.sqrt(),
        per_class_iou: per_class,
    }
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<()> {
    let sizes: Vec<usize> = args
        .sizes
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| anyhow!("--sizes wants comma-separated lengths, got `{s}`"))
        })
        .collect::<Result<_>>()?;
    let echo = json!({
        "command": "gradcheck",
        "seed": args.seed,
        "sizes": sizes,
        "eps": gradcheck::EPS,
        "tol": gradcheck::TOL,
    });
    emit(&echo);
    gradcheck::run(args.seed, &sizes)
}

fn sort_demo(args: SortDemoArgs) -> Result<()> {
    let values: Vec<f64> = args
        .values
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("--values wants comma-separated numbers, got `{s}`"))
        })
        .collect::<Result<_>>()?;
    let kind = match args.network.as_str() {
        "bitonic" => NetworkKind::Bitonic,
        _ => NetworkKind::OddEven,
    };
    let family = match args.relax.as_str() {
        "arctan" => RelaxFamily::arctan(args.beta)?,
        _ => RelaxFamily::default_logistic(args.beta)?,
    };
    let echo = json!({
        "command": "sort_demo",
        "values": values,
        "beta": args.beta,
        "network": args.network,
        "relax": args.relax,
    });
    emit(&echo);

    let net = build_network(kind, values.len())?;
    let (q, sorted) = soft_sort_values(&values, &net, &family)?;

    let n = values.len();
    emit("relaxed permutation (row = rank, column = input):");
    for r in 0..n {
        let row: Vec<String> = (0..n)
            .map(|c| format!("{:8.6}", q.data()[r * n + c]))
            .collect();
        emit(format!("  [{}]", row.join(" "))); 
    }
    let shown: Vec<String> = sorted.iter().map(|v| format!("{v:.6}")).collect();
    emit(format!("sorted: {}", shown.join(" ")));

    let q_rows: Vec<Vec<f64>> = (0..n)
        .map(|r| q.data()[r * n..(r + 1) * n].to_vec())
        .collect();
    emit(json!({ "q": q_rows, "sorted": sorted }));
    Ok(())
}
