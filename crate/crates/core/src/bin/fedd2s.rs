use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedd2s::data::dirichlet_partition;
use fedd2s::experiment::{
    accuracy_curve, average_ua, client_ua, emit_metrics, fairness_histogram, load_metrics, DatasetSource,
    ExperimentError, RunConfig,
};

#[derive(Parser)]
#[command(name = "fedd2s", version, about = "Federated distillation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a dataset across clients and print or save the plan as JSON.
    Partition {
        /// `synth:classes,per_class,dims,separation`, `csv:path` or `idx:images,labels`.
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        clients: usize,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train according to a TOML config and write the metrics log.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// `.json` or `.csv`; defaults to `metrics.json`.
        #[arg(long, default_value = "metrics.json")]
        out: PathBuf,
    },
    /// Derive plotting tables from a metrics log.
    ReportData {
        #[arg(long)]
        metrics: PathBuf,
        /// Output directory for curve.csv, client_ua.csv, fairness.csv and schedule.csv.
        #[arg(long)]
        out: PathBuf,
        /// Rounds averaged for the summary; defaults to the config's window or 10.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, default_value_t = 10)]
        bucket_width: u32,
    },
}

fn write(path: &Path, text: String) -> Result<(), ExperimentError> {
    std::fs::write(path, text).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

fn partition(dataset: &str, clients: usize, alpha: f64, seed: u64, out: Option<&Path>) -> Result<(), ExperimentError> {
    let ds = DatasetSource::parse(dataset, None)?.load(seed)?;
    let plan = dirichlet_partition(&ds, clients, alpha, seed)?;
    let json = serde_json::to_string_pretty(&plan).expect("plan serializes") + "\n";
    match out {
        Some(p) => write(p, json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn run(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), ExperimentError> {
    let mut cfg = RunConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let log = fedd2s::experiment::run_training(&cfg)?;
    emit_metrics(&log, out)?;
    let window = log.config.as_ref().map_or(1, |c| c.ua_window).min(log.rounds.len());
    println!("average UA over last {window} rounds: {:.2}", average_ua(&log, window)?);
    Ok(())
}

fn report_data(metrics: &Path, out: &Path, window: Option<usize>, width: u32) -> Result<(), ExperimentError> {
    let log = load_metrics(metrics)?;
    let window = window.unwrap_or_else(|| log.config.as_ref().map_or(10, |c| c.ua_window).min(log.rounds.len()));
    std::fs::create_dir_all(out).map_err(|source| ExperimentError::Io { path: out.to_path_buf(), source })?;

    let mut curve = String::from("round,mean_accuracy\n");
    for (r, acc) in accuracy_curve(&log) {
        curve += &format!("{r},{acc}\n");
    }
    write(&out.join("curve.csv"), curve)?;

    let per_client = client_ua(&log, window)?;
    let mut ua = String::from("client_id,ua\n");
    for (id, v) in &per_client {
        ua += &format!("{id},{v}\n");
    }
    write(&out.join("client_ua.csv"), ua)?;

    let values: Vec<f64> = per_client.iter().map(|(_, v)| *v).collect();
    let mut hist = String::from("bucket_lo,bucket_hi,clients\n");
    for b in fairness_histogram(&values, width)? {
        hist += &format!("{},{},{}\n", b.lo, b.hi, b.count);
    }
    write(&out.join("fairness.csv"), hist)?;

    let mut sched = String::from("round,client_id,distill_layer\n");
    for r in &log.rounds {
        for c in r.clients.iter().filter(|c| c.distill_layer.is_some()) {
            sched += &format!("{},{},{}\n", r.round, c.client_id, c.distill_layer.unwrap());
        }
    }
    write(&out.join("schedule.csv"), sched)?;
    println!("average UA over last {window} rounds: {:.2}", average_ua(&log, window)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Partition { dataset, clients, alpha, seed, out } => {
            partition(dataset, *clients, *alpha, *seed, out.as_deref())
        }
        Command::Run { config, seed, out } => run(config, *seed, out),
        Command::ReportData { metrics, out, window, bucket_width } => report_data(metrics, out, *window, *bucket_width),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
