//! Machine-readable logging: one JSON object per line on stderr.

use std::time::{SystemTime, UNIX_EPOCH};

struct JsonLogger {
    level: log::LevelFilter,
}

impl log::Log for JsonLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &log::Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        eprintln!(
            "{}",
            serde_json::json!({
                "ts_ms": ts,
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            })
        );
    }

    fn flush(&self) {}
}

/// Level comes from RUST_LOG (plain level names only); default info.
pub fn init() {
    let level = std::env::var("RUST_LOG")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(log::LevelFilter::Info);
    let _ = log::set_boxed_logger(Box::new(JsonLogger { level }));
    log::set_max_level(level);
}
