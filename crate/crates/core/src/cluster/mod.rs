//! Region metadata, the coordination service, master orchestration and
//! failure recovery.
//!
//! The keyspace is range-partitioned into regions; each region has one
//! primary server and a list of backups. The region map is the routing
//! table for clients and the master's source of truth during recovery.

pub mod coord_net;
pub mod coordination;
pub mod master;
pub mod server;
pub mod sim;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("coordinator unavailable")]
    CoordinatorUnavailable,
    #[error("server {0} unreachable: {1}")]
    ServerUnreachable(u16, String),
    #[error("no spare server for region {0}")]
    NoSpareServer(u32),
    #[error("region {0} lost: no backup alive")]
    RegionLost(u32),
    #[error("cluster protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Coord(#[from] coordination::CoordError),
    #[error(transparent)]
    Rpc(#[from] crate::rpc::RpcError),
    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),
}

pub type Result<T> = std::result::Result<T, ClusterError>;

/// Serialized size of one region entry.
pub const REGION_ENTRY_LEN: usize = 64;
/// Boundary keys are compared in this truncated/zero-padded form.
pub const REGION_KEY_LEN: usize = 24;
pub const MAX_BACKUPS: usize = 3;

pub const REGION_FLAG_DEGRADED: u8 = 0x1;
pub const REGION_FLAG_LOST: u8 = 0x2;

/// Truncate or zero-pad a key to its routing form.
pub fn pad_key(key: &[u8]) -> [u8; REGION_KEY_LEN] {
    let mut out = [0u8; REGION_KEY_LEN];
    let n = key.len().min(REGION_KEY_LEN);
    out[..n].copy_from_slice(&key[..n]);
    out
}

/// One region: key range [start_key, end_key), its primary and backups.
/// The end key of the last region is all-0xFF and is treated inclusive so
/// the ranges cover the whole keyspace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionEntry {
    pub region_id: u32,
    pub start_key: [u8; REGION_KEY_LEN],
    pub end_key: [u8; REGION_KEY_LEN],
    pub primary: u16,
    pub backups: Vec<u16>,
    pub flags: u8,
}

impl RegionEntry {
    pub fn contains(&self, key: &[u8]) -> bool {
        let k = pad_key(key);
        if k < self.start_key {
            return false;
        }
        if self.end_key == [0xFF; REGION_KEY_LEN] {
            return true;
        }
        k < self.end_key
    }

    pub fn members(&self) -> Vec<u16> {
        let mut m = vec![self.primary];
        m.extend_from_slice(&self.backups);
        m
    }

    /// Fixed 64 B layout:
    /// [start:24][end:24][region_id:4][primary:2][n_backups:1][backups:3x2][flags:1][pad:2]
    pub fn encode(&self) -> [u8; REGION_ENTRY_LEN] {
        assert!(self.backups.len() <= MAX_BACKUPS);
        let mut out = [0u8; REGION_ENTRY_LEN];
        out[0..24].copy_from_slice(&self.start_key);
        out[24..48].copy_from_slice(&self.end_key);
        out[48..52].copy_from_slice(&self.region_id.to_le_bytes());
        out[52..54].copy_from_slice(&self.primary.to_le_bytes());
        out[54] = self.backups.len() as u8;
        for (i, b) in self.backups.iter().enumerate() {
            out[55 + i * 2..57 + i * 2].copy_from_slice(&b.to_le_bytes());
        }
        out[61] = self.flags;
        out
    }

    pub fn decode(buf: &[u8]) -> Result<RegionEntry> {
        if buf.len() != REGION_ENTRY_LEN {
            return Err(ClusterError::Protocol(format!(
                "region entry must be {REGION_ENTRY_LEN} B, got {}",
                buf.len()
            )));
        }
        let n = buf[54] as usize;
        if n > MAX_BACKUPS {
            return Err(ClusterError::Protocol(format!("{n} backups in entry")));
        }
        let mut backups = Vec::with_capacity(n);
        for i in 0..n {
            backups.push(u16::from_le_bytes(
                buf[55 + i * 2..57 + i * 2].try_into().unwrap(),
            ));
        }
        Ok(RegionEntry {
            region_id: u32::from_le_bytes(buf[48..52].try_into().unwrap()),
            start_key: buf[0..24].try_into().unwrap(),
            end_key: buf[24..48].try_into().unwrap(),
            primary: u16::from_le_bytes(buf[52..54].try_into().unwrap()),
            backups,
            flags: buf[61],
        })
    }
}

/// Versioned routing table. Entries are ordered by start key and partition
/// the keyspace: every key matches exactly one entry.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegionMap {
    pub version: u64,
    pub entries: Vec<RegionEntry>,
}

impl RegionMap {
    /// Partition the keyspace into `regions` ranges by splitting the first
    /// two key bytes evenly, assigning primaries round-robin over `servers`
    /// (sorted ids) and the next `group_size - 1` servers as backups.
    pub fn build(regions: u32, servers: &[u16], group_size: usize) -> RegionMap {
        assert!(regions >= 1 && !servers.is_empty() && group_size >= 1);
        assert!(group_size <= servers.len() && group_size <= 1 + MAX_BACKUPS);
        let mut ids: Vec<u16> = servers.to_vec();
        ids.sort_unstable();
        let boundary = |i: u64| -> [u8; REGION_KEY_LEN] {
            let mut k = [0u8; REGION_KEY_LEN];
            if i >= regions as u64 {
                return [0xFF; REGION_KEY_LEN];
            }
            let b = ((i << 16) / regions as u64) as u16;
            k[0..2].copy_from_slice(&b.to_be_bytes());
            k
        };
        let entries = (0..regions)
            .map(|r| {
                let p = r as usize % ids.len();
                let backups = (1..group_size).map(|j| ids[(p + j) % ids.len()]).collect();
                RegionEntry {
                    region_id: r,
                    start_key: boundary(r as u64),
                    end_key: boundary(r as u64 + 1),
                    primary: ids[p],
                    backups,
                    flags: 0,
                }
            })
            .collect();
        RegionMap {
            version: 1,
            entries,
        }
    }

    pub fn lookup(&self, key: &[u8]) -> Option<&RegionEntry> {
        let k = pad_key(key);
        let idx = match self.entries.binary_search_by(|e| e.start_key.cmp(&k)) {
            Ok(i) => i,
            Err(0) => return None,
            Err(i) => i - 1,
        };
        let e = &self.entries[idx];
        e.contains(key).then_some(e)
    }

    pub fn entry(&self, region_id: u32) -> Option<&RegionEntry> {
        self.entries.iter().find(|e| e.region_id == region_id)
    }

    pub fn entry_mut(&mut self, region_id: u32) -> Option<&mut RegionEntry> {
        self.entries.iter_mut().find(|e| e.region_id == region_id)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.entries.len() * REGION_ENTRY_LEN);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.encode());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<RegionMap> {
        if buf.len() < 12 {
            return Err(ClusterError::Protocol("short region map".into()));
        }
        let version = u64::from_le_bytes(buf[0..8].try_into().unwrap());
        let count = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        if buf.len() != 12 + count * REGION_ENTRY_LEN {
            return Err(ClusterError::Protocol("region map length mismatch".into()));
        }
        let entries = (0..count)
            .map(|i| RegionEntry::decode(&buf[12 + i * REGION_ENTRY_LEN..12 + (i + 1) * REGION_ENTRY_LEN]))
            .collect::<Result<Vec<_>>>()?;
        Ok(RegionMap { version, entries })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MasterState {
    pub master_id: u16,
    pub epoch: u64,
}

impl MasterState {
    pub fn encode(&self) -> [u8; 10] {
        let mut out = [0u8; 10];
        out[0..2].copy_from_slice(&self.master_id.to_le_bytes());
        out[2..10].copy_from_slice(&self.epoch.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<MasterState> {
        if buf.len() != 10 {
            return Err(ClusterError::Protocol("bad master state".into()));
        }
        Ok(MasterState {
            master_id: u16::from_le_bytes(buf[0..2].try_into().unwrap()),
            epoch: u64::from_le_bytes(buf[2..10].try_into().unwrap()),
        })
    }
}
