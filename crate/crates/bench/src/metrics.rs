//! Metric formulas and collection helpers: amplification ratios,
//! a cycles/op efficiency proxy, and a fixed-bucket latency histogram.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("dataset size is zero")]
    ZeroDataset,
    #[error("operation count is zero")]
    ZeroOps,
}

/// Nominal clock for the cycles/op proxy; desk-scale stand-in for the
/// machine's real base frequency.
pub const NOMINAL_HZ: f64 = 1.0e9;

/// device_traffic / dataset_size where dataset_size is the total bytes
/// of all key-value requests issued.
pub fn io_amplification(device_traffic: u64, dataset_size: u64) -> Result<f64, MetricsError> {
    if dataset_size == 0 {
        return Err(MetricsError::ZeroDataset);
    }
    Ok(device_traffic as f64 / dataset_size as f64)
}

/// network_traffic / dataset_size, counted at the servers' transport
/// endpoints (bytes sent + received).
pub fn network_amplification(network_traffic: u64, dataset_size: u64) -> Result<f64, MetricsError> {
    if dataset_size == 0 {
        return Err(MetricsError::ZeroDataset);
    }
    Ok(network_traffic as f64 / dataset_size as f64)
}

/// cycles/op = cpu_seconds x nominal_hz / ops.
pub fn efficiency(cpu_seconds: f64, nominal_hz: f64, ops: u64) -> Result<f64, MetricsError> {
    if ops == 0 {
        return Err(MetricsError::ZeroOps);
    }
    Ok(cpu_seconds * nominal_hz / ops as f64)
}

/// Process CPU time (user + system) from /proc/self/stat; 0.0 when the
/// proc filesystem is unavailable.
pub fn process_cpu_seconds() -> f64 {
    let Ok(stat) = std::fs::read_to_string("/proc/self/stat") else {
        return 0.0;
    };
    // Fields after the parenthesized command name; utime and stime are
    // fields 14 and 15 (1-based), in clock ticks.
    let Some(rest) = stat.rsplit(')').next() else {
        return 0.0;
    };
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let (Some(utime), Some(stime)) = (fields.get(11), fields.get(12)) else {
        return 0.0;
    };
    let ticks: f64 = utime.parse::<f64>().unwrap_or(0.0) + stime.parse::<f64>().unwrap_or(0.0);
    ticks / clock_ticks_per_second()
}

fn clock_ticks_per_second() -> f64 {
    // Linux has reported 100 Hz USER_HZ for decades; good enough for a
    // proxy metric.
    100.0
}

/// Modeled space overhead of the non-last LSM levels. With level i
/// sized 1/f of level i+1 and the last level holding the dataset, the
/// upper levels sum to dataset/(f-1); expressed relative to the device.
pub fn modeled_space_overhead(growth_factor: u32, dataset_bytes: u64, device_bytes: u64) -> f64 {
    assert!(growth_factor >= 2);
    assert!(device_bytes > 0);
    dataset_bytes as f64 / (growth_factor as f64 - 1.0) / device_bytes as f64
}

/// Latency histogram with fixed 1 microsecond buckets.
pub struct LatencyHistogram {
    buckets: Vec<u64>,
    overflow: u64,
    count: u64,
}

impl LatencyHistogram {
    /// Covers 0..~1 s at 1 us resolution; slower ops land in overflow.
    pub fn new() -> LatencyHistogram {
        LatencyHistogram {
            buckets: vec![0; 1 << 20],
            overflow: 0,
            count: 0,
        }
    }

    pub fn record(&mut self, micros: u64) {
        self.count += 1;
        match self.buckets.get_mut(micros as usize) {
            Some(b) => *b += 1,
            None => self.overflow += 1,
        }
    }

    pub fn record_duration(&mut self, d: std::time::Duration) {
        self.record(d.as_micros() as u64);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn merge(&mut self, other: &LatencyHistogram) {
        for (a, b) in self.buckets.iter_mut().zip(&other.buckets) {
            *a += b;
        }
        self.overflow += other.overflow;
        self.count += other.count;
    }

    /// Latency in microseconds at quantile q (0 < q <= 1); overflow maps
    /// to the histogram ceiling.
    pub fn percentile(&self, q: f64) -> u64 {
        if self.count == 0 {
            return 0;
        }
        let rank = ((q * self.count as f64).ceil() as u64).clamp(1, self.count);
        let mut seen = 0u64;
        for (i, b) in self.buckets.iter().enumerate() {
            seen += b;
            if seen >= rank {
                return i as u64;
            }
        }
        self.buckets.len() as u64
    }
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn amplification_formulas_and_errors() {
        assert_eq!(io_amplification(350, 100).unwrap(), 3.5);
        assert_eq!(io_amplification(100, 100).unwrap(), 1.0);
        assert_eq!(io_amplification(1, 0), Err(MetricsError::ZeroDataset));
        assert_eq!(network_amplification(1, 0), Err(MetricsError::ZeroDataset));
        assert_eq!(efficiency(2.0, 1e9, 1_000_000).unwrap(), 2000.0);
        assert_eq!(efficiency(1.0, 1e9, 0), Err(MetricsError::ZeroOps));
    }

    #[test]
    fn space_overhead_strictly_decreases_with_growth_factor() {
        let mut last = f64::INFINITY;
        for f in [2u32, 4, 8, 12, 16] {
            let o = modeled_space_overhead(f, 1 << 30, 4 << 30);
            assert!(o < last);
            last = o;
        }
    }

    #[test]
    fn histogram_percentiles() {
        let mut h = LatencyHistogram::new();
        for us in 1..=100u64 {
            h.record(us);
        }
        assert_eq!(h.percentile(0.5), 50);
        assert_eq!(h.percentile(0.99), 99);
        assert_eq!(h.percentile(1.0), 100);
        h.record(u64::MAX); // overflow
        assert_eq!(h.percentile(1.0), h.buckets.len() as u64);
    }
}
