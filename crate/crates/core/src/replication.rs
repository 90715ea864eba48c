//! Primary-backup value-log replication and the two index maintenance
//! strategies.
//!
//! Every acknowledged put exists in the memory of the whole replica set:
//! the primary appends locally, remote-writes the same record bytes into
//! each backup's replication buffer at the identical within-segment offset,
//! and acknowledges only after all write completions. No backup CPU runs on
//! this path. When a log segment seals, a flush message tells each backup
//! to persist its buffer as a local log segment and record the address pair
//! in its log segment map.
//!
//! Index maintenance is mode-dependent: send-index primaries ship rewritten
//! levels (backups never compact); build-index backups ingest flushed
//! segments into their own half-size L0 and compact locally.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::device::DeviceOffset;
use crate::engine::log::parse_record_sequence;
use crate::engine::record::ValueLogPointer;
use crate::engine::{CompactionJob, Engine, EngineError};
use crate::index_wire::{
    primary_serialize_level, BackupTransfer, CompactionManifest, LogSegmentMap, SerializedSegment,
    WireError,
};
use crate::rpc::client::RpcClient;
use crate::rpc::server::{ConnCtx, Handler};
use crate::rpc::{op, RpcError};
use crate::transport::{BufferHandle, BufferId, Connection, TransportError};

#[derive(Debug, Error)]
pub enum ReplicationError {
    #[error("backup unreachable: {0}")]
    BackupUnreachable(String),
    #[error("replication protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

pub type Result<T> = std::result::Result<T, ReplicationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicationMode {
    None,
    SendIndex,
    BuildIndex,
}

impl ReplicationMode {
    pub fn to_wire(self) -> u8 {
        match self {
            ReplicationMode::None => 0,
            ReplicationMode::SendIndex => 1,
            ReplicationMode::BuildIndex => 2,
        }
    }

    pub fn from_wire(b: u8) -> Option<ReplicationMode> {
        match b {
            0 => Some(ReplicationMode::None),
            1 => Some(ReplicationMode::SendIndex),
            2 => Some(ReplicationMode::BuildIndex),
            _ => None,
        }
    }
}

impl std::str::FromStr for ReplicationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(ReplicationMode::None),
            "send_index" => Ok(ReplicationMode::SendIndex),
            "build_index" => Ok(ReplicationMode::BuildIndex),
            _ => Err(format!("unknown replication mode {s:?}")),
        }
    }
}

// ---- control message payloads ----

pub fn encode_open_region(region_id: u32, mode: ReplicationMode) -> Vec<u8> {
    let mut out = Vec::with_capacity(5);
    out.extend_from_slice(&region_id.to_le_bytes());
    out.push(mode.to_wire());
    out
}

pub fn decode_open_region(p: &[u8]) -> Option<(u32, ReplicationMode)> {
    if p.len() != 5 {
        return None;
    }
    Some((
        u32::from_le_bytes(p[0..4].try_into().unwrap()),
        ReplicationMode::from_wire(p[4])?,
    ))
}

pub fn encode_flush_log(region_id: u32, primary_start: DeviceOffset, fill: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    out.extend_from_slice(&region_id.to_le_bytes());
    out.extend_from_slice(&primary_start.0.to_le_bytes());
    out.extend_from_slice(&fill.to_le_bytes());
    out
}

pub fn decode_flush_log(p: &[u8]) -> Option<(u32, DeviceOffset, u32)> {
    if p.len() != 16 {
        return None;
    }
    Some((
        u32::from_le_bytes(p[0..4].try_into().unwrap()),
        DeviceOffset(u64::from_le_bytes(p[4..12].try_into().unwrap())),
        u32::from_le_bytes(p[12..16].try_into().unwrap()),
    ))
}

fn prefix_region(region_id: u32, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&region_id.to_le_bytes());
    out.extend_from_slice(body);
    out
}

fn split_region(p: &[u8]) -> Option<(u32, &[u8])> {
    if p.len() < 4 {
        return None;
    }
    Some((u32::from_le_bytes(p[0..4].try_into().unwrap()), &p[4..]))
}

// ---- primary side ----

#[derive(Debug, Default, Clone)]
pub struct ReplicationCounters {
    pub flushed_segments: u64,
    pub shipped_segments: u64,
    pub replication_bytes: u64,
    /// Backups dropped from the group after an unreachable link.
    pub dropped_backups: u64,
}

/// Calls to backups fail fast: a dead backup degrades the group, it must
/// not stall the client-facing write path for the default rpc timeout.
const BACKUP_CALL_TIMEOUT: std::time::Duration = std::time::Duration::from_secs(1);

struct BackupLink {
    addr: String,
    client: RpcClient,
    conn: Arc<dyn Connection>,
    repl_buf_id: BufferId,
}

/// Primary-held replication state for one region: one link (rpc client plus
/// replication buffer id) per backup.
pub struct PrimaryReplication {
    region_id: u32,
    mode: ReplicationMode,
    backups: Vec<BackupLink>,
    pub counters: ReplicationCounters,
}

impl PrimaryReplication {
    pub fn new(region_id: u32, mode: ReplicationMode) -> PrimaryReplication {
        assert!(mode != ReplicationMode::None);
        PrimaryReplication {
            region_id,
            mode,
            backups: Vec::new(),
            counters: ReplicationCounters::default(),
        }
    }

    /// Open the region on every backup; each reply carries the id of the
    /// replication buffer that backup registered for us.
    pub fn open(
        region_id: u32,
        mode: ReplicationMode,
        backups: Vec<(String, Arc<dyn Connection>)>,
    ) -> Result<PrimaryReplication> {
        let mut repl = PrimaryReplication::new(region_id, mode);
        for (addr, conn) in backups {
            repl.open_link(addr, conn)?;
        }
        Ok(repl)
    }

    fn open_link(&mut self, addr: String, conn: Arc<dyn Connection>) -> Result<usize> {
        let mut client = RpcClient::connect(conn.clone())?;
        client.timeout = BACKUP_CALL_TIMEOUT;
        let reply = client.call(
            op::OPEN_REGION,
            &encode_open_region(self.region_id, self.mode),
        )?;
        if reply.payload.len() != 12 {
            return Err(ReplicationError::Protocol("bad open-region reply".into()));
        }
        let repl_buf_id = u32::from_le_bytes(reply.payload[0..4].try_into().unwrap());
        self.backups.push(BackupLink {
            addr,
            client,
            conn,
            repl_buf_id,
        });
        Ok(self.backups.len() - 1)
    }

    pub fn backup_addrs(&self) -> Vec<String> {
        self.backups.iter().map(|b| b.addr.clone()).collect()
    }

    /// Remove a backup from the group (master noticed it died before we
    /// did). Returns false when no such link exists.
    pub fn drop_backup(&mut self, addr: &str) -> bool {
        let before = self.backups.len();
        self.backups.retain(|b| b.addr != addr);
        let dropped = before - self.backups.len();
        self.counters.dropped_backups += dropped as u64;
        dropped > 0
    }

    /// Bring a fresh backup into the group with the region's full current
    /// state: every sealed log segment (flushed in order), the open tail,
    /// and in send-index mode every populated level. The new member ends up
    /// indistinguishable from one that was present since the first write.
    pub fn attach_backup(
        &mut self,
        addr: String,
        conn: Arc<dyn Connection>,
        engine: &Engine,
    ) -> Result<()> {
        let idx = self.open_link(addr, conn)?;
        if let Err(e) = self.resync_link(idx, engine) {
            self.backups.remove(idx);
            return Err(e);
        }
        Ok(())
    }

    fn resync_link(&mut self, idx: usize, engine: &Engine) -> Result<()> {
        for (i, seg) in engine.log().segments().iter().enumerate() {
            let bytes = engine.log().segment_bytes(i)?;
            let link = &self.backups[idx];
            link.conn
                .remote_write(link.repl_buf_id, 0, &bytes)
                .map_err(|e| ReplicationError::BackupUnreachable(e.to_string()))?;
            self.counters.replication_bytes += bytes.len() as u64;
            let payload = encode_flush_log(self.region_id, seg.start, bytes.len() as u32);
            self.backups[idx]
                .client
                .call(op::FLUSH_LOG, &payload)
                .map_err(backup_err)?;
        }
        if let Some(tail) = engine.log().tail_bytes() {
            if !tail.is_empty() {
                let link = &self.backups[idx];
                link.conn
                    .remote_write(link.repl_buf_id, 0, tail)
                    .map_err(|e| ReplicationError::BackupUnreachable(e.to_string()))?;
                self.counters.replication_bytes += tail.len() as u64;
            }
        }
        if self.mode == ReplicationMode::SendIndex {
            for level in engine.levels().iter().skip(1).filter(|l| !l.is_empty()) {
                let job = CompactionJob {
                    target_level: level.number,
                    leaf_segments: level.leaf_segments.clone(),
                    internal_segments: level.internal_segments.clone(),
                    root: level.root,
                    entries: level.entries,
                    covered_log_segments: engine.covered_log_segments(),
                    images: None,
                };
                let (segments, manifest) =
                    primary_serialize_level(engine.device(), &job, self.region_id, level.tombstones)?;
                for seg in &segments {
                    self.backups[idx]
                        .client
                        .call(op::INDEX_SEGMENT, &prefix_region(self.region_id, &seg.encode()))
                        .map_err(backup_err)?;
                }
                self.backups[idx]
                    .client
                    .call(
                        op::INDEX_FINALIZE,
                        &prefix_region(self.region_id, &manifest.encode()),
                    )
                    .map_err(backup_err)?;
                self.counters.shipped_segments += segments.len() as u64;
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> ReplicationMode {
        self.mode
    }

    pub fn backup_count(&self) -> usize {
        self.backups.len()
    }

    /// Drop every link whose per-link operation failed; the region keeps
    /// serving degraded and the master will find replacements.
    fn for_each_link(
        &mut self,
        mut f: impl FnMut(&mut BackupLink) -> Result<u64>,
    ) -> Result<()> {
        let mut i = 0;
        while i < self.backups.len() {
            match f(&mut self.backups[i]) {
                Ok(bytes) => {
                    self.counters.replication_bytes += bytes;
                    i += 1;
                }
                Err(ReplicationError::Protocol(m)) => {
                    // A protocol rejection is a bug, not a dead peer.
                    return Err(ReplicationError::Protocol(m));
                }
                Err(e) => {
                    log::warn!(
                        "region {}: dropping backup {}: {e}",
                        self.region_id,
                        self.backups[i].addr
                    );
                    self.backups.remove(i);
                    self.counters.dropped_backups += 1;
                }
            }
        }
        Ok(())
    }

    /// Step two of the insert path: the record bytes land in every backup's
    /// replication buffer at the primary's within-segment offset. Returns
    /// after all completions; the caller may then acknowledge.
    pub fn replicate_record(&mut self, within_offset: u64, record: &[u8]) -> Result<()> {
        self.for_each_link(|b| {
            b.conn
                .remote_write(b.repl_buf_id, within_offset, record)
                .map_err(|e| ReplicationError::BackupUnreachable(e.to_string()))?;
            Ok(record.len() as u64)
        })
    }

    /// Ask every backup to persist its replication buffer as a log segment
    /// mapped to `primary_start`.
    pub fn flush_log(&mut self, primary_start: DeviceOffset, fill: u32) -> Result<()> {
        if fill == 0 {
            return Ok(());
        }
        let region_id = self.region_id;
        let payload = encode_flush_log(region_id, primary_start, fill);
        self.for_each_link(|b| {
            b.client.call(op::FLUSH_LOG, &payload).map_err(backup_err)?;
            Ok(0)
        })?;
        self.counters.flushed_segments += 1;
        Ok(())
    }

    /// Stream a committed level to every backup.
    pub fn ship_index(
        &mut self,
        device: &crate::device::Device,
        job: &CompactionJob,
        tombstones: u64,
    ) -> Result<()> {
        assert_eq!(self.mode, ReplicationMode::SendIndex);
        let region_id = self.region_id;
        let (segments, manifest) = primary_serialize_level(device, job, region_id, tombstones)?;
        self.for_each_link(|b| {
            for seg in &segments {
                b.client
                    .call(op::INDEX_SEGMENT, &prefix_region(region_id, &seg.encode()))
                    .map_err(backup_err)?;
            }
            b.client
                .call(
                    op::INDEX_FINALIZE,
                    &prefix_region(region_id, &manifest.encode()),
                )
                .map_err(backup_err)?;
            Ok(0)
        })?;
        self.counters.shipped_segments += segments.len() as u64;
        Ok(())
    }
}

fn backup_err(e: RpcError) -> ReplicationError {
    match e {
        RpcError::Remote(m) => ReplicationError::Protocol(m),
        other => ReplicationError::BackupUnreachable(other.to_string()),
    }
}

/// A region served by this process as primary: the engine plus optional
/// replication to backups. Client operations always come here, never to a
/// backup.
pub struct PrimaryRegion {
    pub engine: Engine,
    pub replication: Option<PrimaryReplication>,
}

impl PrimaryRegion {
    pub fn new(engine: Engine, replication: Option<PrimaryReplication>) -> PrimaryRegion {
        PrimaryRegion {
            engine,
            replication,
        }
    }

    pub fn put(&mut self, key: &[u8], value: &[u8]) -> Result<()> {
        self.write(key, value, false)
    }

    pub fn delete(&mut self, key: &[u8]) -> Result<()> {
        self.write(key, &[], true)
    }

    fn write(&mut self, key: &[u8], value: &[u8], tombstone: bool) -> Result<()> {
        let out = if tombstone {
            self.engine.delete(key)?
        } else {
            self.engine.put(key, value)?
        };
        if let Some(repl) = &mut self.replication {
            // A seal means the record opened a fresh segment: the backups'
            // buffers hold the old segment and must persist it before this
            // record overwrites them.
            if let Some(sealed) = &out.sealed {
                repl.flush_log(sealed.segment.start, sealed.fill as u32)?;
            }
            let within = self.engine.device().within_segment(out.ptr.offset);
            repl.replicate_record(within, &out.record)?;
        }
        if out.l0_full {
            self.spill_and_ship()?;
        }
        Ok(())
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>> {
        Ok(self.engine.get(key)?)
    }

    pub fn scan(&self, start_key: &[u8], count: usize) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        Ok(self.engine.scan(start_key, count)?)
    }

    /// Spill L0 (sealing and flushing the log first so shipped indexes only
    /// reference replicated segments), run cascading compactions, and in
    /// send-index mode ship every produced level.
    pub fn spill_and_ship(&mut self) -> Result<()> {
        if self.replication.is_some() {
            if let Some(sealed) = self.engine.seal_log()? {
                let repl = self.replication.as_mut().unwrap();
                repl.flush_log(sealed.segment.start, sealed.fill as u32)?;
            }
        }
        let jobs = self.engine.flush_l0_and_cascade()?;
        if let Some(repl) = &mut self.replication {
            if repl.mode() == ReplicationMode::SendIndex {
                for job in &jobs {
                    let tombstones = self.engine.levels()[job.target_level as usize].tombstones;
                    let device = self.engine.device().clone();
                    repl.ship_index(&device, job, tombstones)?;
                }
            }
        }
        Ok(())
    }
}

// ---- backup side ----

/// One region this server backs up.
pub struct BackupRegion {
    pub engine: Engine,
    pub mode: ReplicationMode,
    pub log_map: LogSegmentMap,
    pub repl_buf: Arc<BufferHandle>,
    transfer: Option<BackupTransfer>,
}

impl BackupRegion {
    fn handle_flush(&mut self, primary_start: DeviceOffset, fill: u32) -> Result<()> {
        if fill == 0 {
            return Ok(());
        }
        let bytes = self.repl_buf.read(0, fill as usize);
        let local = self.engine.apply_raw_log_segment(&bytes)?;
        self.log_map.insert(primary_start, local.start);
        // Zero the consumed prefix so a later promotion never parses stale
        // records past the next segment's fill point. The primary is blocked
        // on this reply, so no write races the reset.
        self.repl_buf.write_local(0, &vec![0u8; fill as usize]);
        if self.mode == ReplicationMode::BuildIndex {
            // Index the segment through our own L0 like any LSM flush:
            // the build path reads the persisted records back from the
            // device, not the transient wire buffer.
            let persisted = self
                .engine
                .device()
                .read_at(local.start, fill as u64)
                .map_err(|e| ReplicationError::Protocol(e.to_string()))?;
            let (records, _) = parse_record_sequence(&persisted);
            let mut overflow = false;
            for (off, rec) in records {
                let ptr = ValueLogPointer::new(DeviceOffset(local.start.0 + off), rec.tombstone);
                overflow = self.engine.ingest_entry(rec.key, ptr);
            }
            if overflow {
                self.engine.flush_l0_and_cascade()?;
            }
        }
        Ok(())
    }

    fn handle_index_segment(&mut self, seg: &SerializedSegment) -> Result<()> {
        if self.mode != ReplicationMode::SendIndex {
            return Err(ReplicationError::Protocol(
                "index segment outside send-index mode".into(),
            ));
        }
        let transfer = self.transfer.get_or_insert_with(|| {
            BackupTransfer::new(
                self.engine.device().clone(),
                self.engine.config().node_size,
            )
        });
        match transfer.apply_segment(seg, &self.log_map) {
            Ok(_) => Ok(()),
            Err(e) => {
                // All-or-nothing: a failed apply discards the transfer.
                if let Some(t) = self.transfer.take() {
                    let _ = t.abort();
                }
                Err(e.into())
            }
        }
    }

    fn handle_index_finalize(&mut self, man: &CompactionManifest) -> Result<()> {
        let mut transfer = self
            .transfer
            .take()
            .ok_or_else(|| ReplicationError::Protocol("finalize without transfer".into()))?;
        match transfer.finalize(man) {
            Ok(level) => {
                self.engine.install_level(level, man.covered_log_segments)?;
                Ok(())
            }
            Err(e) => {
                let _ = transfer.abort();
                Err(e.into())
            }
        }
    }
}

/// Backup-role request handler: owns every region this server backs up.
/// Engines are produced by the factory so all regions share the server's
/// device; build-index regions get their own (half-size) L0 budget there.
pub struct BackupRegions {
    regions: Mutex<HashMap<u32, BackupRegion>>,
    engine_factory: Box<dyn Fn(ReplicationMode) -> Engine + Send + Sync>,
}

impl BackupRegions {
    pub fn new(
        engine_factory: Box<dyn Fn(ReplicationMode) -> Engine + Send + Sync>,
    ) -> BackupRegions {
        BackupRegions {
            regions: Mutex::new(HashMap::new()),
            engine_factory,
        }
    }

    /// Run `f` against one region's state (tests and promotion).
    pub fn with_region<T>(&self, region_id: u32, f: impl FnOnce(&mut BackupRegion) -> T) -> Option<T> {
        self.regions.lock().unwrap().get_mut(&region_id).map(f)
    }

    pub fn region_ids(&self) -> Vec<u32> {
        self.regions.lock().unwrap().keys().copied().collect()
    }

    /// Detach a region (promotion takes ownership of its state).
    pub fn take_region(&self, region_id: u32) -> Option<BackupRegion> {
        self.regions.lock().unwrap().remove(&region_id)
    }

    pub fn handle_open(&self, ctx: &ConnCtx, payload: &[u8]) -> Result<Vec<u8>> {
        let (region_id, mode) =
            decode_open_region(payload).ok_or_else(|| ReplicationError::Protocol("bad open".into()))?;
        let engine = (self.engine_factory)(mode);
        let seg_size = engine.device().segment_size() as usize;
        let repl_buf = ctx.conn.register_buffer(seg_size, None)?;
        let mut reply = Vec::with_capacity(12);
        reply.extend_from_slice(&repl_buf.id().to_le_bytes());
        reply.extend_from_slice(&(seg_size as u64).to_le_bytes());
        let old = self.regions.lock().unwrap().insert(
            region_id,
            BackupRegion {
                engine,
                mode,
                log_map: LogSegmentMap::new(),
                repl_buf,
                transfer: None,
            },
        );
        // Re-opening a region (backup resync after recovery) discards the
        // stale copy and its storage.
        if let Some(old) = old {
            if let Some(t) = old.transfer {
                let _ = t.abort();
            }
            old.engine
                .release_storage()
                .map_err(ReplicationError::Engine)?;
        }
        Ok(reply)
    }

    pub fn handle(&self, ctx: &ConnCtx, opcode: u8, payload: &[u8]) -> Result<Vec<u8>> {
        match opcode {
            op::OPEN_REGION => self.handle_open(ctx, payload),
            op::FLUSH_LOG => {
                let (region_id, start, fill) = decode_flush_log(payload)
                    .ok_or_else(|| ReplicationError::Protocol("bad flush".into()))?;
                self.with_region(region_id, |r| r.handle_flush(start, fill))
                    .ok_or_else(|| ReplicationError::Protocol(format!("unknown region {region_id}")))??;
                Ok(Vec::new())
            }
            op::INDEX_SEGMENT => {
                let (region_id, body) = split_region(payload)
                    .ok_or_else(|| ReplicationError::Protocol("bad index segment".into()))?;
                let seg = SerializedSegment::decode(body)?;
                self.with_region(region_id, |r| r.handle_index_segment(&seg))
                    .ok_or_else(|| ReplicationError::Protocol(format!("unknown region {region_id}")))??;
                Ok(Vec::new())
            }
            op::INDEX_FINALIZE => {
                let (region_id, body) = split_region(payload)
                    .ok_or_else(|| ReplicationError::Protocol("bad finalize".into()))?;
                let man = CompactionManifest::decode(body)?;
                self.with_region(region_id, |r| r.handle_index_finalize(&man))
                    .ok_or_else(|| ReplicationError::Protocol(format!("unknown region {region_id}")))??;
                Ok(Vec::new())
            }
            other => Err(ReplicationError::Protocol(format!("unexpected op {other}"))),
        }
    }
}

impl Handler for BackupRegions {
    fn handle(&self, ctx: &ConnCtx, opcode: u8, payload: &[u8]) -> std::result::Result<Vec<u8>, String> {
        BackupRegions::handle(self, ctx, opcode, payload).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::Device;
    use crate::engine::EngineConfig;
    use crate::rpc::server::{RpcConfig, RpcServer};
    use crate::transport::inproc::{InProcListener, InProcNetwork};
    use crate::transport::NetworkStats;

    const SEG: u64 = 64 * 1024;
    const L0_CAP: usize = 64;

    fn engine_factory(device: Arc<Device>) -> Box<dyn Fn(ReplicationMode) -> Engine + Send + Sync> {
        Box::new(move |mode| {
            let l0 = match mode {
                // Build-index backups keep their own L0 at half the budget.
                ReplicationMode::BuildIndex => L0_CAP / 2,
                _ => L0_CAP,
            };
            Engine::new(
                device.clone(),
                EngineConfig {
                    growth_factor: 4,
                    l0_capacity_keys: l0,
                    node_size: 4096,
                },
            )
        })
    }

    struct TestBackup {
        server: Arc<RpcServer>,
        state: Arc<BackupRegions>,
    }

    fn spawn_backup(net: &InProcNetwork, addr: &str) -> TestBackup {
        let device = Arc::new(Device::new_in_memory(SEG * 128, SEG));
        let state = Arc::new(BackupRegions::new(engine_factory(device)));
        let server = Arc::new(RpcServer::start(state.clone(), RpcConfig::default()));
        let listener: InProcListener = net.listen(addr, NetworkStats::new());
        let srv = server.clone();
        std::thread::spawn(move || {
            while let Ok(conn) = listener.accept() {
                if srv.add_connection(conn).is_err() {
                    break;
                }
            }
        });
        TestBackup { server, state }
    }

    fn primary_engine() -> Engine {
        Engine::new(
            Arc::new(Device::new_in_memory(SEG * 128, SEG)),
            EngineConfig {
                growth_factor: 4,
                l0_capacity_keys: L0_CAP,
                node_size: 4096,
            },
        )
    }

    fn connect_region(
        net: &InProcNetwork,
        addrs: &[&str],
        mode: ReplicationMode,
    ) -> PrimaryRegion {
        let conns = addrs
            .iter()
            .map(|a| (a.to_string(), net.connect(a, NetworkStats::new()).unwrap()))
            .collect();
        let repl = PrimaryReplication::open(7, mode, conns).unwrap();
        PrimaryRegion::new(primary_engine(), Some(repl))
    }

    #[test]
    fn record_bytes_land_in_backup_buffer_at_same_offset() {
        let net = InProcNetwork::new();
        let backup = spawn_backup(&net, "b1");
        let mut region = connect_region(&net, &["b1"], ReplicationMode::SendIndex);
        region.put(b"alpha", b"one").unwrap();
        region.put(b"beta", b"two").unwrap();
        let tail = region.engine.log().tail_bytes().unwrap().to_vec();
        let got = backup
            .state
            .with_region(7, |r| r.repl_buf.read(0, tail.len()))
            .unwrap();
        assert_eq!(got, tail, "backup buffer mirrors the primary tail prefix");
        backup.server.shutdown();
    }

    #[test]
    fn two_backups_both_receive_before_ack() {
        let net = InProcNetwork::new();
        let b1 = spawn_backup(&net, "b1");
        let b2 = spawn_backup(&net, "b2");
        let mut region = connect_region(&net, &["b1", "b2"], ReplicationMode::SendIndex);
        region.put(b"k", b"v").unwrap();
        // put returned, so completions from both backups were collected.
        for b in [&b1, &b2] {
            let tail = region.engine.log().tail_bytes().unwrap().to_vec();
            let got = b.state.with_region(7, |r| r.repl_buf.read(0, tail.len())).unwrap();
            assert_eq!(got, tail);
        }
        b1.server.shutdown();
        b2.server.shutdown();
    }

    #[test]
    fn mode_none_needs_no_backups() {
        let mut region = PrimaryRegion::new(primary_engine(), None);
        for i in 0..200 {
            region.put(format!("user{:08}", i).as_bytes(), b"v").unwrap();
        }
        assert_eq!(region.get(b"user00000007").unwrap().unwrap(), b"v");
    }

    #[test]
    fn segment_fills_replicate_byte_identically_and_grow_the_map() {
        let net = InProcNetwork::new();
        let backup = spawn_backup(&net, "b1");
        let mut region = connect_region(&net, &["b1"], ReplicationMode::SendIndex);
        // Values sized to fill several segments.
        let value = vec![5u8; 1000];
        let mut i = 0u32;
        while region.engine.log().sealed_count() < 2 {
            region.put(format!("user{:08}", i).as_bytes(), &value).unwrap();
            i += 1;
        }
        let (map_len, identical) = backup
            .state
            .with_region(7, |r| {
                let mut same = true;
                for s in 0..r.engine.log().segments().len() {
                    let local = r.engine.log().segment_bytes(s).unwrap();
                    let primary = region.engine.log().segment_bytes(s).unwrap();
                    same &= local == primary;
                }
                (r.log_map.len(), same)
            })
            .unwrap();
        assert_eq!(map_len, 2, "one map entry per flushed segment");
        assert!(identical, "backup log segments byte-identical to primary's");
        assert_eq!(
            region.replication.as_ref().unwrap().counters.flushed_segments,
            2
        );
        backup.server.shutdown();
    }

    #[test]
    fn send_index_backup_acquires_levels_without_compacting() {
        let net = InProcNetwork::new();
        let backup = spawn_backup(&net, "b1");
        let mut region = connect_region(&net, &["b1"], ReplicationMode::SendIndex);
        for i in 0..400 {
            region
                .put(format!("user{:08}", i).as_bytes(), format!("val{}", i).as_bytes())
                .unwrap();
        }
        region.delete(b"user00000009").unwrap();
        // Force a final spill so everything lives in shipped levels.
        region.spill_and_ship().unwrap();
        backup
            .state
            .with_region(7, |r| {
                assert_eq!(r.engine.counters().compactions, 0, "backups never compact");
                assert_eq!(r.engine.l0_len(), 0, "no backup L0 in send-index mode");
                assert_eq!(r.engine.counters().l0_insertions, 0);
                assert!(!r.engine.levels()[1].is_empty());
                for i in 0..400 {
                    let key = format!("user{:08}", i);
                    assert_eq!(
                        r.engine.get(key.as_bytes()).unwrap(),
                        region.engine.get(key.as_bytes()).unwrap(),
                        "mismatch at {key}"
                    );
                }
                assert!(r.engine.get(b"user00000009").unwrap().is_none());
            })
            .unwrap();
        backup.server.shutdown();
    }

    #[test]
    fn build_index_backup_ingests_and_compacts_locally() {
        let net = InProcNetwork::new();
        let backup = spawn_backup(&net, "b1");
        let mut region = connect_region(&net, &["b1"], ReplicationMode::BuildIndex);
        let value = vec![3u8; 500];
        for i in 0..600 {
            region.put(format!("user{:08}", i).as_bytes(), &value).unwrap();
        }
        region.spill_and_ship().unwrap();
        backup
            .state
            .with_region(7, |r| {
                assert!(r.engine.counters().l0_insertions > 0, "records ingested");
                assert!(r.engine.counters().compactions > 0, "local compactions ran");
                // Flushed data is readable through the backup's own index.
                assert_eq!(r.engine.get(b"user00000000").unwrap().unwrap(), value);
            })
            .unwrap();
        backup.server.shutdown();
    }

    #[test]
    fn empty_flush_is_a_no_op() {
        let net = InProcNetwork::new();
        let backup = spawn_backup(&net, "b1");
        let mut region = connect_region(&net, &["b1"], ReplicationMode::SendIndex);
        let repl = region.replication.as_mut().unwrap();
        repl.flush_log(DeviceOffset(0), 0).unwrap();
        assert_eq!(repl.counters.flushed_segments, 0);
        backup.state.with_region(7, |r| {
            assert_eq!(r.engine.log().sealed_count(), 0);
        });
        backup.server.shutdown();
    }
}
