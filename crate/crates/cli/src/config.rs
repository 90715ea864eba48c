//! Cluster configuration shared by every binary. TOML or JSON, strict:
//! unknown keys are rejected, parameters validated before anything starts.

use std::path::Path;

use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerEntry {
    pub id: u16,
    pub address: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub growth_factor: u64,
    pub l0_capacity_keys: usize,
    pub node_size: usize,
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection {
            growth_factor: 4,
            l0_capacity_keys: 1024,
            node_size: 4096,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpcSection {
    pub workers: usize,
    pub spinners: usize,
    pub task_threshold: usize,
    pub request_buffer: usize,
}

impl Default for RpcSection {
    fn default() -> Self {
        RpcSection {
            workers: 2,
            spinners: 1,
            task_threshold: 4,
            request_buffer: 256 * 1024,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoordinatorSection {
    /// Listen/connect address for the standalone coordinator.
    pub addr: String,
    pub session_timeout_ms: u64,
    pub heartbeat_ms: u64,
}

impl Default for CoordinatorSection {
    fn default() -> Self {
        CoordinatorSection {
            addr: "127.0.0.1:7400".into(),
            session_timeout_ms: 500,
            heartbeat_ms: 100,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub servers: Vec<ServerEntry>,
    #[serde(default = "default_regions")]
    pub regions: u32,
    /// Replica group size including the primary.
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_segment_size")]
    pub segment_size: u64,
    #[serde(default = "default_device_capacity")]
    pub device_capacity: u64,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub rpc: RpcSection,
    #[serde(default)]
    pub coordinator: CoordinatorSection,
}

fn default_regions() -> u32 {
    32
}
fn default_group_size() -> usize {
    2
}
fn default_mode() -> String {
    "send_index".into()
}
fn default_segment_size() -> u64 {
    64 * 1024
}
fn default_device_capacity() -> u64 {
    256 * 1024 * 1024
}

impl ClusterConfig {
    pub fn load(path: &Path) -> Result<ClusterConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("read {}: {e}", path.display()))?;
        let mut cfg: ClusterConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| format!("parse {}: {e}", path.display()))?
        } else {
            toml::from_str(&text).map_err(|e| format!("parse {}: {e}", path.display()))?
        };
        cfg.apply_env_overrides()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `RACKKV_*` environment variables override the file's scalar knobs.
    fn apply_env_overrides(&mut self) -> Result<(), String> {
        fn over<T: std::str::FromStr>(name: &str, slot: &mut T) -> Result<(), String> {
            if let Ok(v) = std::env::var(name) {
                *slot = v.parse().map_err(|_| format!("bad {name} value {v:?}"))?;
            }
            Ok(())
        }
        over("RACKKV_MODE", &mut self.mode)?;
        over("RACKKV_REGIONS", &mut self.regions)?;
        over("RACKKV_GROUP_SIZE", &mut self.group_size)?;
        over("RACKKV_SEGMENT_SIZE", &mut self.segment_size)?;
        over("RACKKV_DEVICE_CAPACITY", &mut self.device_capacity)?;
        over("RACKKV_GROWTH_FACTOR", &mut self.engine.growth_factor)?;
        over("RACKKV_COORDINATOR_ADDR", &mut self.coordinator.addr)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.servers.is_empty() {
            return Err("config needs at least one server".into());
        }
        let mut ids: Vec<u16> = self.servers.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.servers.len() {
            return Err("duplicate server ids".into());
        }
        self.mode()?;
        if self.regions == 0 {
            return Err("regions must be positive".into());
        }
        if self.group_size == 0 || self.group_size > 4 {
            return Err("group_size must be 1..=4 (primary + up to 3 backups)".into());
        }
        self.engine_config().validate()?;
        if self.segment_size == 0 || self.device_capacity % self.segment_size != 0 {
            return Err("device_capacity must be a multiple of segment_size".into());
        }
        Ok(())
    }

    pub fn mode(&self) -> Result<rackkv::replication::ReplicationMode, String> {
        self.mode.parse()
    }

    pub fn engine_config(&self) -> rackkv::engine::EngineConfig {
        rackkv::engine::EngineConfig {
            growth_factor: self.engine.growth_factor,
            l0_capacity_keys: self.engine.l0_capacity_keys,
            node_size: self.engine.node_size,
        }
    }

    pub fn rpc_config(&self) -> rackkv::rpc::server::RpcConfig {
        rackkv::rpc::server::RpcConfig {
            workers: self.rpc.workers,
            spinners: self.rpc.spinners,
            task_threshold: self.rpc.task_threshold,
            request_buffer: self.rpc.request_buffer,
            ..Default::default()
        }
    }

    pub fn server(&self, id: u16) -> Result<&ServerEntry, String> {
        self.servers
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| format!("server id {id} not in config"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_with_defaults_parses() {
        let cfg: ClusterConfig = toml::from_str(
            r#"
            [[servers]]
            id = 1
            address = "127.0.0.1:7401"
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.regions, 32);
        assert_eq!(cfg.mode().unwrap(), rackkv::replication::ReplicationMode::SendIndex);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ClusterConfig>(
            r#"
            regions = 8
            banana = true
            [[servers]]
            id = 1
            address = "a"
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("banana"));
    }

    #[test]
    fn invalid_growth_factor_fails_validation() {
        let cfg: ClusterConfig = toml::from_str(
            r#"
            [engine]
            growth_factor = 1
            [[servers]]
            id = 1
            address = "a"
            "#,
        )
        .unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_parses_too() {
        let cfg: ClusterConfig = serde_json::from_str(
            r#"{"servers": [{"id": 1, "address": "x"}], "mode": "build_index"}"#,
        )
        .unwrap();
        cfg.validate().unwrap();
    }
}
