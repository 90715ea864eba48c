//! `bench` driver: single experiments and parameter sweeps, emitting
//! JSON and CSV reports. See docs/metrics.md for the column schema.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rackkv_bench::harness::{
    run_experiment, run_sweep, ExperimentConfig, FaultSpec, SweepParam,
};
use rackkv_bench::report::{write_csv, write_json, MetricsReport};
use rackkv_bench::workload::{Phase, SizeMix};
use rackkv::replication::ReplicationMode;

#[derive(Parser)]
#[command(name = "bench", about = "replicated KV store benchmark driver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Workload phase: loadA, runA, runB, runC, runD.
    #[arg(long, default_value = "loadA")]
    workload: String,
    /// KV size mix: S, M, L, SD, MD, LD, or s-m-l percentages.
    #[arg(long, default_value = "SD")]
    dist: String,
    /// Replication mode: none, send_index, build_index.
    #[arg(long, default_value = "send_index")]
    mode: String,
    #[arg(long, default_value_t = 4)]
    growth_factor: u32,
    #[arg(long, default_value_t = 100_000)]
    ops: u64,
    /// Keys loaded before a run phase.
    #[arg(long, default_value_t = 0)]
    preload: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 3)]
    servers: usize,
    #[arg(long, default_value_t = 8)]
    regions: u32,
    /// Replica group size including the primary.
    #[arg(long, default_value_t = 2)]
    group_size: usize,
    #[arg(long, default_value_t = 1024)]
    l0_capacity: usize,
    #[arg(long, default_value_t = 65536)]
    segment_size: u64,
    #[arg(long, default_value_t = 4096)]
    node_size: usize,
    /// Kill a server when the measured stream reaches this op index.
    #[arg(long)]
    kill_at_op: Option<u64>,
    /// Server id to kill; defaults to the primary of the op's region.
    #[arg(long)]
    kill_server: Option<u16>,
    /// JSON report path.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// CSV report path (defaults to the JSON path with .csv).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment.
    Run(CommonArgs),
    /// Run one experiment per value of a swept parameter.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// growth_factor, mode, or small_pct.
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 4,8,12,16.
        #[arg(long)]
        values: String,
    },
}

fn experiment_config(a: &CommonArgs) -> Result<ExperimentConfig, String> {
    let phase: Phase = a.workload.parse()?;
    let mix: SizeMix = a.dist.parse()?;
    let mode: ReplicationMode = a.mode.parse()?;
    Ok(ExperimentConfig {
        phase,
        mix,
        mode,
        growth_factor: a.growth_factor,
        ops: a.ops,
        preload: a.preload,
        seed: a.seed,
        threads: a.threads,
        servers: a.servers,
        regions: a.regions,
        group_size: a.group_size,
        l0_capacity_keys: a.l0_capacity,
        segment_size: a.segment_size,
        node_size: a.node_size,
        fault: a.kill_at_op.map(|at_op| FaultSpec { at_op, server: a.kill_server }),
        ..ExperimentConfig::default()
    })
}

fn emit(common: &CommonArgs, reports: &[MetricsReport]) -> std::io::Result<()> {
    write_json(&common.out, reports)?;
    let csv = common
        .csv
        .clone()
        .unwrap_or_else(|| common.out.with_extension("csv"));
    write_csv(&csv, reports)?;
    for r in reports {
        println!(
            "{} {} {} f={}: {:.0} ops/s, io_amp {:.2}, net_amp {:.2}, p99 {} us",
            r.workload, r.dist, r.mode, r.growth_factor,
            r.throughput_ops_per_sec, r.io_amplification, r.network_amplification,
            r.latency_p99_us
        );
    }
    println!("wrote {} and {}", common.out.display(), csv.display());
    Ok(())
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run(common) => experiment_config(common)
            .map_err(|e| e.to_string())
            .and_then(|cfg| run_experiment(&cfg).map_err(|e| e.to_string()))
            .and_then(|r| emit(common, &[r]).map_err(|e| e.to_string())),
        Cmd::Sweep { common, param, values } => experiment_config(common)
            .map_err(|e| e.to_string())
            .and_then(|cfg| {
                let param: SweepParam = param.parse()?;
                let values: Vec<String> = values.split(',').map(|s| s.trim().to_string()).collect();
                run_sweep(&cfg, param, &values).map_err(|e| e.to_string())
            })
            .and_then(|rs| emit(common, &rs).map_err(|e| e.to_string())),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
