//! Experiment orchestration: spin up a single-process cluster, drive a
//! generated op stream against it (optionally from several closed-loop
//! client threads), inject faults, and derive a metrics report from the
//! counter deltas of the measured phase.

use std::time::Instant;

use rackkv::cluster::sim::{SimCluster, SimConfig};
use rackkv::cluster::ClusterError;
use rackkv::engine::EngineConfig;
use rackkv::replication::ReplicationMode;
use thiserror::Error;

use crate::metrics::{
    efficiency, io_amplification, network_amplification, process_cpu_seconds, LatencyHistogram,
    MetricsError, NOMINAL_HZ,
};
use crate::report::{build_id, config_fingerprint, MetricsReport, ServerCounters};
use crate::workload::{generate_ops, key_bytes, value_bytes, Op, Phase, SizeMix, WorkloadSpec};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, BenchError>;

/// Kill a server once the measured stream reaches `at_op`. With no
/// explicit server id the primary of the region owning that op's key
/// dies. Requires a single client thread.
#[derive(Debug, Clone, Copy)]
pub struct FaultSpec {
    pub at_op: u64,
    pub server: Option<u16>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub phase: Phase,
    pub mix: SizeMix,
    pub mode: ReplicationMode,
    pub growth_factor: u32,
    pub ops: u64,
    /// Keys loaded before a run phase (ignored for LoadA).
    pub preload: u64,
    pub seed: u64,
    pub threads: usize,
    pub servers: usize,
    pub regions: u32,
    /// Replica group size including the primary.
    pub group_size: usize,
    pub l0_capacity_keys: usize,
    pub node_size: usize,
    pub segment_size: u64,
    pub device_capacity: u64,
    pub fault: Option<FaultSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            phase: Phase::LoadA,
            mix: SizeMix::SD,
            mode: ReplicationMode::SendIndex,
            growth_factor: 4,
            ops: 10_000,
            preload: 0,
            seed: 42,
            threads: 1,
            servers: 3,
            regions: 8,
            group_size: 2,
            l0_capacity_keys: 1024,
            node_size: 4096,
            segment_size: 64 * 1024,
            device_capacity: 256 * 1024 * 1024,
            fault: None,
        }
    }
}

impl ExperimentConfig {
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            servers: self.servers,
            regions: self.regions,
            group_size: self.group_size,
            mode: self.mode,
            engine: EngineConfig {
                growth_factor: self.growth_factor as u64,
                l0_capacity_keys: self.l0_capacity_keys,
                node_size: self.node_size,
            },
            device_capacity: self.device_capacity,
            segment_size: self.segment_size,
            rpc: Default::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sim_config()
            .engine
            .validate()
            .map_err(BenchError::Config)?;
        self.mix.validate().map_err(BenchError::Config)?;
        if self.ops == 0 {
            return Err(BenchError::Config("ops must be positive".into()));
        }
        if self.threads == 0 {
            return Err(BenchError::Config("threads must be positive".into()));
        }
        if self.fault.is_some() && self.threads != 1 {
            return Err(BenchError::Config(
                "fault injection requires a single client thread".into(),
            ));
        }
        if self.phase != Phase::LoadA && self.preload == 0 {
            return Err(BenchError::Config("run phases need --preload".into()));
        }
        Ok(())
    }

    fn fingerprint(&self) -> String {
        config_fingerprint(&[
            self.phase.name(),
            &self.mix.name(),
            &format!("{:?}", self.mode),
            &self.growth_factor.to_string(),
            &self.ops.to_string(),
            &self.preload.to_string(),
            &self.seed.to_string(),
            &self.threads.to_string(),
            &self.servers.to_string(),
            &self.regions.to_string(),
            &self.group_size.to_string(),
            &self.l0_capacity_keys.to_string(),
            &self.segment_size.to_string(),
        ])
    }
}

struct Snapshot {
    cpu: f64,
    per_server: Vec<ServerCounters>,
}

fn snapshot(sim: &SimCluster) -> Snapshot {
    Snapshot {
        cpu: process_cpu_seconds(),
        per_server: sim
            .servers
            .iter()
            .map(|s| ServerCounters {
                server_id: s.node.id,
                device_read_bytes: s.node.device().stats().bytes_read(),
                device_write_bytes: s.node.device().stats().bytes_written(),
                net_sent_bytes: s.node.stats().bytes_sent(),
                net_received_bytes: s.node.stats().bytes_received(),
                backup_compactions: s.node.backup_compactions(),
                backup_l0_entries: s.node.backup_l0_entries(),
            })
            .collect(),
    }
}

fn delta(before: &Snapshot, after: &Snapshot) -> Vec<ServerCounters> {
    before
        .per_server
        .iter()
        .zip(&after.per_server)
        .map(|(b, a)| ServerCounters {
            server_id: a.server_id,
            device_read_bytes: a.device_read_bytes - b.device_read_bytes,
            device_write_bytes: a.device_write_bytes - b.device_write_bytes,
            net_sent_bytes: a.net_sent_bytes - b.net_sent_bytes,
            net_received_bytes: a.net_received_bytes - b.net_received_bytes,
            backup_compactions: a.backup_compactions - b.backup_compactions,
            // Gauge, not a counter: report the end-of-run value.
            backup_l0_entries: a.backup_l0_entries,
        })
        .collect()
}

/// A finished run with the cluster still alive for inspection.
pub struct RunOutput {
    pub report: MetricsReport,
    pub sim: SimCluster,
    /// Ops acknowledged by the cluster, in issue order.
    pub acked: Vec<Op>,
    pub failed_ops: u64,
}

/// Execute one op against a client; returns the request's dataset bytes.
fn execute_op(
    client: &mut rackkv::cluster::server::KvClient,
    op: &Op,
) -> std::result::Result<u64, ClusterError> {
    match *op {
        Op::Insert { id, value_len } | Op::Update { id, value_len } => {
            let key = key_bytes(id);
            let value = value_bytes(id, value_len);
            client.put(&key, &value)?;
            Ok((key.len() + value.len()) as u64)
        }
        Op::Read { id } => {
            let key = key_bytes(id);
            let got = client.get(&key)?;
            Ok((key.len() + got.map_or(0, |v| v.len())) as u64)
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    run_experiment_keep(cfg).map(|mut out| {
        out.sim.shutdown();
        out.report
    })
}

pub fn run_experiment_keep(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut sim = SimCluster::start(cfg.sim_config())?;

    // Preload phase (excluded from the measured counters).
    let preloaded = if cfg.phase == Phase::LoadA { 0 } else { cfg.preload };
    if preloaded > 0 {
        let spec = WorkloadSpec { phase: Phase::LoadA, ops: preloaded, threads: 1 };
        let mut client = sim.client();
        for op in generate_ops(&spec, &cfg.mix, 0, cfg.seed ^ 0x10ad_5eed) {
            execute_op(&mut client, &op)?;
        }
    }

    let spec = WorkloadSpec { phase: cfg.phase, ops: cfg.ops, threads: cfg.threads };
    let ops = generate_ops(&spec, &cfg.mix, preloaded, cfg.seed);

    let before = snapshot(&sim);
    let device_before = sim.total_device_traffic();
    let net_before = sim.total_server_network_traffic();
    let start = Instant::now();

    let mut hist = LatencyHistogram::new();
    let mut dataset = 0u64;
    let mut acked = Vec::new();
    let mut failed = 0u64;

    if cfg.threads == 1 {
        let mut client = sim.client();
        for (i, op) in ops.iter().enumerate() {
            if let Some(f) = cfg.fault {
                if i as u64 == f.at_op {
                    let victim = f.server.unwrap_or_else(|| {
                        let key = key_bytes(op.id());
                        sim.master.map.lookup(&key).unwrap().primary
                    });
                    sim.fail_server(victim);
                    sim.recover()?;
                }
            }
            let t = Instant::now();
            match execute_op(&mut client, op) {
                Ok(bytes) => {
                    dataset += bytes;
                    acked.push(*op);
                }
                Err(e) => {
                    log::warn!("op {i} failed: {e}");
                    failed += 1;
                }
            }
            hist.record_duration(t.elapsed());
        }
    } else {
        let threads = cfg.threads;
        let shards = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for t in 0..threads {
                let sim = &sim;
                let ops = &ops;
                handles.push(scope.spawn(move || {
                    let mut client = sim.client();
                    let mut hist = LatencyHistogram::new();
                    let mut dataset = 0u64;
                    let mut acked = Vec::new();
                    let mut failed = 0u64;
                    for op in ops.iter().skip(t).step_by(threads) {
                        let start = Instant::now();
                        match execute_op(&mut client, op) {
                            Ok(bytes) => {
                                dataset += bytes;
                                acked.push(*op);
                            }
                            Err(_) => failed += 1,
                        }
                        hist.record_duration(start.elapsed());
                    }
                    (hist, dataset, acked, failed)
                }));
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread"))
                .collect::<Vec<_>>()
        });
        for (h, d, a, f) in shards {
            hist.merge(&h);
            dataset += d;
            acked.extend(a);
            failed += f;
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    let after = snapshot(&sim);
    let device_traffic = sim.total_device_traffic() - device_before;
    let net_traffic = sim.total_server_network_traffic() - net_before;
    let done = cfg.ops - failed;

    let report = MetricsReport {
        workload: cfg.phase.name().into(),
        dist: cfg.mix.name(),
        mode: mode_name(cfg.mode).into(),
        growth_factor: cfg.growth_factor,
        ops: cfg.ops,
        seed: cfg.seed,
        threads: cfg.threads,
        config_fingerprint: cfg.fingerprint(),
        build_id: build_id().into(),
        throughput_ops_per_sec: done as f64 / elapsed.max(1e-9),
        efficiency_cycles_per_op: efficiency(after.cpu - before.cpu, NOMINAL_HZ, done.max(1))?,
        io_amplification: io_amplification(device_traffic, dataset)?,
        network_amplification: network_amplification(net_traffic, dataset)?,
        latency_p99_us: hist.percentile(0.99),
        latency_p999_us: hist.percentile(0.999),
        latency_p9999_us: hist.percentile(0.9999),
        elapsed_seconds: elapsed,
        cpu_seconds: after.cpu - before.cpu,
        dataset_bytes: dataset,
        device_traffic_bytes: device_traffic,
        network_traffic_bytes: net_traffic,
        backup_compactions: sim.total_backup_compactions(),
        backup_l0_entries: sim.total_backup_l0_entries(),
        per_server: delta(&before, &after),
    };
    Ok(RunOutput { report, sim, acked, failed_ops: failed })
}

pub fn mode_name(mode: ReplicationMode) -> &'static str {
    match mode {
        ReplicationMode::None => "none",
        ReplicationMode::SendIndex => "send_index",
        ReplicationMode::BuildIndex => "build_index",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    GrowthFactor,
    Mode,
    SmallPct,
}

impl std::str::FromStr for SweepParam {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<SweepParam, String> {
        match s {
            "growth_factor" => Ok(SweepParam::GrowthFactor),
            "mode" => Ok(SweepParam::Mode),
            "small_pct" => Ok(SweepParam::SmallPct),
            other => Err(format!("unknown sweep parameter {other:?}")),
        }
    }
}

/// One run per value, all other parameters held at `base`.
pub fn run_sweep(
    base: &ExperimentConfig,
    param: SweepParam,
    values: &[String],
) -> Result<Vec<MetricsReport>> {
    let mut out = Vec::new();
    for v in values {
        let mut cfg = base.clone();
        match param {
            SweepParam::GrowthFactor => {
                cfg.growth_factor = v
                    .parse()
                    .map_err(|_| BenchError::Config(format!("bad growth factor {v:?}")))?;
            }
            SweepParam::Mode => {
                cfg.mode = v
                    .parse()
                    .map_err(|e| BenchError::Config(format!("{e}")))?;
            }
            SweepParam::SmallPct => {
                let pct: u8 = v
                    .parse()
                    .map_err(|_| BenchError::Config(format!("bad percentage {v:?}")))?;
                if pct > 100 {
                    return Err(BenchError::Config(format!("bad percentage {v:?}")));
                }
                cfg.mix = SizeMix::small_heavy(pct);
            }
        }
        out.push(run_experiment(&cfg)?);
    }
    Ok(out)
}
