//! Report emission: one row per experiment, identical content in JSON
//! and CSV, each row carrying a config fingerprint and build id.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

/// Compile-time build id (git describe when available).
pub fn build_id() -> &'static str {
    option_env!("BENCH_BUILD_ID").unwrap_or(env!("CARGO_PKG_VERSION"))
}

/// Stable fingerprint of an experiment's configuration echo.
pub fn config_fingerprint(parts: &[&str]) -> String {
    let mut h = DefaultHasher::new();
    for p in parts {
        p.hash(&mut h);
    }
    format!("{:016x}", h.finish())
}

#[derive(Debug, Clone, Serialize)]
pub struct ServerCounters {
    pub server_id: u16,
    pub device_read_bytes: u64,
    pub device_write_bytes: u64,
    pub net_sent_bytes: u64,
    pub net_received_bytes: u64,
    pub backup_compactions: u64,
    pub backup_l0_entries: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    // Config echo.
    pub workload: String,
    pub dist: String,
    pub mode: String,
    pub growth_factor: u32,
    pub ops: u64,
    pub seed: u64,
    pub threads: usize,
    pub config_fingerprint: String,
    pub build_id: String,
    // Derived metrics.
    pub throughput_ops_per_sec: f64,
    pub efficiency_cycles_per_op: f64,
    pub io_amplification: f64,
    pub network_amplification: f64,
    pub latency_p99_us: u64,
    pub latency_p999_us: u64,
    pub latency_p9999_us: u64,
    // Raw counters the metrics derive from.
    pub elapsed_seconds: f64,
    pub cpu_seconds: f64,
    pub dataset_bytes: u64,
    pub device_traffic_bytes: u64,
    pub network_traffic_bytes: u64,
    pub backup_compactions: u64,
    pub backup_l0_entries: u64,
    pub per_server: Vec<ServerCounters>,
}

/// Column order documented in docs/metrics.md; keep the two in sync.
pub const CSV_HEADER: &str = "workload,dist,mode,growth_factor,ops,seed,threads,config_fingerprint,build_id,throughput_ops_per_sec,efficiency_cycles_per_op,io_amplification,network_amplification,latency_p99_us,latency_p999_us,latency_p9999_us,elapsed_seconds,cpu_seconds,dataset_bytes,device_traffic_bytes,network_traffic_bytes,backup_compactions,backup_l0_entries";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.2},{:.2},{:.4},{:.4},{},{},{},{:.3},{:.3},{},{},{},{},{}",
            self.workload,
            self.dist,
            self.mode,
            self.growth_factor,
            self.ops,
            self.seed,
            self.threads,
            self.config_fingerprint,
            self.build_id,
            self.throughput_ops_per_sec,
            self.efficiency_cycles_per_op,
            self.io_amplification,
            self.network_amplification,
            self.latency_p99_us,
            self.latency_p999_us,
            self.latency_p9999_us,
            self.elapsed_seconds,
            self.cpu_seconds,
            self.dataset_bytes,
            self.device_traffic_bytes,
            self.network_traffic_bytes,
            self.backup_compactions,
            self.backup_l0_entries,
        )
    }
}

pub fn write_json(path: &Path, reports: &[MetricsReport]) -> std::io::Result<()> {
    let body = if reports.len() == 1 {
        serde_json::to_string_pretty(&reports[0]).unwrap()
    } else {
        serde_json::to_string_pretty(reports).unwrap()
    };
    std::fs::write(path, body)
}

pub fn write_csv(path: &Path, reports: &[MetricsReport]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_row_matches_header_arity() {
        let r = MetricsReport {
            workload: "loadA".into(),
            dist: "SD".into(),
            mode: "send_index".into(),
            growth_factor: 4,
            ops: 10,
            seed: 1,
            threads: 1,
            config_fingerprint: config_fingerprint(&["a", "b"]),
            build_id: build_id().into(),
            throughput_ops_per_sec: 1.0,
            efficiency_cycles_per_op: 2.0,
            io_amplification: 3.0,
            network_amplification: 4.0,
            latency_p99_us: 5,
            latency_p999_us: 6,
            latency_p9999_us: 7,
            elapsed_seconds: 0.1,
            cpu_seconds: 0.2,
            dataset_bytes: 8,
            device_traffic_bytes: 9,
            network_traffic_bytes: 10,
            backup_compactions: 0,
            backup_l0_entries: 0,
            per_server: vec![],
        };
        assert_eq!(
            r.csv_row().split(',').count(),
            CSV_HEADER.split(',').count()
        );
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        assert_eq!(config_fingerprint(&["x"]), config_fingerprint(&["x"]));
        assert_ne!(config_fingerprint(&["x"]), config_fingerprint(&["y"]));
    }
}
