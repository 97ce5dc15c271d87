//! `errmon`: replay traces through the pipeline, run parameter sweeps and
//! summarize collector records.

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use errmon_core::analytics::{
    ccdf_csv, classify_senders, histogram_csv, hourly_csv, hourly_sender_stats, parse_prefix_list, per_port_histogram,
    sender_ccdf, senders_csv, HostClass, ScanThresholds,
};
use errmon_core::collector::record::{read_records, RecordRow};
use errmon_core::collector::{FileSink, RecordSink};
use errmon_core::config::{PipelineConfig, ANON_KEY_ENV};
use errmon_core::experiments::{
    batch_csv, batch_sweep, dt_csv, dt_sweep, filter_csv, filter_efficiency, timer_csv, timer_sweep, CostModel,
};
use errmon_core::ingest::pcap::{read_pcap, write_pcap};
use errmon_core::ingest::replay::{Pipeline, ReplayOptions};
use errmon_core::ingest::workload::{generate_workload, WorkloadSpec};
use errmon_core::packet::PacketRecord;

#[derive(Parser)]
#[command(name = "errmon", version, about = "Erroneous-traffic monitoring pipeline in virtual time")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a pcap trace or a synthetic workload and write collector outputs.
    Run(RunArgs),
    /// Run a named parameter sweep and write its result table.
    Experiment(ExperimentArgs),
    /// Write a synthetic workload as a pcap trace.
    Generate(GenerateArgs),
    /// Hourly sender statistics per host class.
    Stats(StatsArgs),
    /// Per-port packet histogram for one host class.
    Ports(PortsArgs),
    /// Scan-pattern classification per sender.
    Scanners(ScannersArgs),
    /// CCDF of distinct senders per internal host.
    Ccdf(RecordsArgs),
}

#[derive(Args)]
struct SourceArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Workload file with a `[workload]` table; overrides the config's.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Workload seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Anonymization key (32-bit hex), overriding the config file.
    #[arg(long = "anon-key", env = ANON_KEY_ENV, hide_env_values = true)]
    anon_key: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    src: SourceArgs,
    /// Pcap trace to replay instead of a synthetic workload.
    #[arg(long, conflicts_with = "spec")]
    trace: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    BatchSweep,
    TimerSweep,
    DtSweep,
    FilterEfficiency,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    src: SourceArgs,
    #[arg(long, value_enum)]
    experiment: Experiment,
    /// Output directory; the table goes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    src: SourceArgs,
    /// Pcap file to write. The workload's whitelist goes next to it as `<name>.whitelist`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecordsArgs {
    /// Configuration naming the internal and telescope prefixes and the key.
    #[arg(long)]
    config: PathBuf,
    /// Collector record file(s).
    #[arg(long, required = true, num_args = 1..)]
    records: Vec<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "anon-key", env = ANON_KEY_ENV, hide_env_values = true)]
    anon_key: Option<String>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    rec: RecordsArgs,
    /// Acknowledged scanners, one prefix or address per line.
    #[arg(long)]
    acked: Option<PathBuf>,
}

#[derive(Args)]
struct PortsArgs {
    #[command(flatten)]
    rec: RecordsArgs,
    /// telescope, active or dark.
    #[arg(long, value_parser = parse_class)]
    class: HostClass,
}

#[derive(Args)]
struct ScannersArgs {
    #[command(flatten)]
    rec: RecordsArgs,
    #[arg(long, default_value_t = ScanThresholds::default().theta_d)]
    theta_d: usize,
    #[arg(long, default_value_t = ScanThresholds::default().theta_p)]
    theta_p: usize,
    #[arg(long, default_value_t = ScanThresholds::default().theta_p_prime)]
    theta_p_prime: usize,
    #[arg(long, default_value_t = ScanThresholds::default().theta_d_prime)]
    theta_d_prime: usize,
    #[arg(long, default_value_t = ScanThresholds::default().min_packets)]
    min_packets: usize,
}

fn parse_class(s: &str) -> Result<HostClass, String> {
    HostClass::parse(s).ok_or_else(|| format!("unknown host class {s:?}"))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("errmon: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Run(a) => cmd_run(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Stats(a) => {
            let (cfg, rows) = load_records(&a.rec)?;
            let acked = match &a.acked {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    parse_prefix_list(&text)
                        .map_err(|(line, e)| anyhow::anyhow!("{}: line {line}: {e}", p.display()))?
                }
                None => Vec::new(),
            };
            emit(a.rec.out.as_deref(), &hourly_csv(&hourly_sender_stats(&rows, &cfg.network, &acked)))
        }
        Command::Ports(a) => {
            let (cfg, rows) = load_records(&a.rec)?;
            emit(a.rec.out.as_deref(), &histogram_csv(&per_port_histogram(&rows, a.class, &cfg.network)))
        }
        Command::Scanners(a) => {
            let (_, rows) = load_records(&a.rec)?;
            let th = ScanThresholds {
                theta_d: a.theta_d,
                theta_p: a.theta_p,
                theta_p_prime: a.theta_p_prime,
                theta_d_prime: a.theta_d_prime,
                min_packets: a.min_packets,
            };
            emit(a.rec.out.as_deref(), &senders_csv(&classify_senders(&rows, &th)))
        }
        Command::Ccdf(a) => {
            let (cfg, rows) = load_records(&a)?;
            emit(a.out.as_deref(), &ccdf_csv(&sender_ccdf(&rows, &cfg.network)))
        }
    }
}

/// The key from `--anon-key` or the environment wins over the file.
fn load_config(path: &Path, key: Option<&str>) -> Result<PipelineConfig> {
    let source = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    PipelineConfig::parse_with_key_override(&source, path.parent(), key)
        .with_context(|| format!("invalid configuration {}", path.display()))
}

/// The workload from `--spec`, else from the configuration.
fn workload(src: &SourceArgs, cfg: &PipelineConfig) -> Result<WorkloadSpec> {
    let spec = match &src.spec {
        Some(p) => load_config(p, None)?.workload.with_context(|| format!("{}: no [workload] table", p.display()))?,
        None => cfg.workload.clone().context("no workload: pass --trace or --spec, or add a [workload] table")?,
    };
    spec.validate().context("invalid workload")?;
    Ok(spec)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let cfg = load_config(&a.src.config, a.src.anon_key.as_deref())?;
    let (trace, whitelist): (Vec<PacketRecord>, Vec<_>) = match &a.trace {
        Some(p) => {
            let t = read_pcap(p).with_context(|| format!("reading {}", p.display()))?;
            if t.skipped > 0 {
                eprintln!("errmon: skipped {} undecodable frames", t.skipped);
            }
            (t.packets, Vec::new())
        }
        None => {
            let spec = workload(&a.src, &cfg)?;
            let w = generate_workload(&spec, &cfg.network, a.src.seed).context("generating workload")?;
            (w.packets, w.whitelist)
        }
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let sink: Box<dyn RecordSink> = Box::new(FileSink::create(&a.out, cfg.collector.pcap)?);
    let mut p = Pipeline::new(cfg, sink).context("invalid configuration")?.with_options(ReplayOptions::default());
    if !whitelist.is_empty() {
        p.set_whitelist(whitelist);
    }
    let out = p.run(trace);
    fs::write(a.out.join("metrics.csv"), out.metrics_csv())?;
    fs::write(a.out.join("summary.txt"), out.summary.render())?;
    print!("{}", out.summary.render());
    if !out.summary.invariant_failures.is_empty() {
        bail!(
            "{} invariant failure(s), first: {}",
            out.summary.invariant_failures.len(),
            out.summary.invariant_failures[0]
        );
    }
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    let cfg = load_config(&a.src.config, a.src.anon_key.as_deref())?;
    let model = cfg.control.latency;
    let (name, table) = match a.experiment {
        Experiment::BatchSweep => {
            let ks = [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10_000];
            ("batch_sweep", batch_csv(&batch_sweep(&ks, model, 2000.0, 200_000)))
        }
        Experiment::TimerSweep => {
            let spec = workload(&a.src, &cfg)?;
            let mut points = Vec::new();
            for p_d in [10, 100, 1000] {
                for d_max in [1, 10, 100] {
                    points.push((Duration::from_micros(p_d), d_max));
                }
            }
            let r = timer_sweep(&cfg, &spec, a.src.seed, &points, CostModel::default())?;
            ("timer_sweep", timer_csv(&r))
        }
        Experiment::DtSweep => {
            let spec = workload(&a.src, &cfg)?;
            let dts = [0.01, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0].map(Duration::from_secs_f64);
            ("dt_sweep", dt_csv(&dt_sweep(&cfg, &spec, a.src.seed, &dts)?))
        }
        Experiment::FilterEfficiency => {
            let spec = workload(&a.src, &cfg)?;
            ("filter_efficiency", filter_csv(&filter_efficiency(&cfg, &spec, a.src.seed)?))
        }
    };
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            emit(Some(&dir.join(format!("{name}.csv"))), &table)
        }
        None => emit(None, &table),
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let cfg = load_config(&a.src.config, a.src.anon_key.as_deref())?;
    let spec = workload(&a.src, &cfg)?;
    let w = generate_workload(&spec, &cfg.network, a.src.seed).context("generating workload")?;
    write_pcap(&a.out, &w.packets).with_context(|| format!("writing {}", a.out.display()))?;
    if !w.whitelist.is_empty() {
        let mut text = String::new();
        for (ip, port) in &w.whitelist {
            text.push_str(&format!("{ip},{port}\n"));
        }
        fs::write(a.out.with_extension("whitelist"), text)?;
    }
    eprintln!("errmon: wrote {} packets", w.packets.len());
    Ok(())
}

fn load_records(a: &RecordsArgs) -> Result<(PipelineConfig, Vec<RecordRow>)> {
    let cfg = load_config(&a.config, a.anon_key.as_deref())?;
    let mut rows = Vec::new();
    for p in &a.records {
        let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
        rows.extend(read_records(BufReader::new(f)).with_context(|| format!("parsing {}", p.display()))?);
    }
    Ok((cfg, rows))
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}
