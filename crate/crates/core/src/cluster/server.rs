//! Server node: dispatches client operations to the primary regions it
//! serves, replication traffic to its backup regions, and control commands
//! from the master (open, add-backup, promote, map updates).

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use crate::device::Device;
use crate::engine::{Engine, EngineConfig};
use crate::replication::{
    BackupRegions, PrimaryRegion, PrimaryReplication, ReplicationMode,
};
use crate::rpc::client::RpcClient;
use crate::rpc::server::{ConnCtx, Handler};
use crate::rpc::{op, RpcError};
use crate::transport::inproc::InProcNetwork;
use crate::transport::socket::socket_connect;
use crate::transport::{Connection, NetworkStats};

use super::{ClusterError, RegionMap, Result, REGION_FLAG_LOST};

/// Connector abstraction so the same cluster logic runs over the in-process
/// transport (simulation) and TCP sockets (multi-process).
pub trait ClusterNetwork: Send + Sync {
    fn connect(
        &self,
        addr: &str,
        stats: Arc<NetworkStats>,
    ) -> crate::transport::Result<Arc<dyn Connection>>;
}

impl ClusterNetwork for InProcNetwork {
    fn connect(
        &self,
        addr: &str,
        stats: Arc<NetworkStats>,
    ) -> crate::transport::Result<Arc<dyn Connection>> {
        InProcNetwork::connect(self, addr, stats)
    }
}

pub struct TcpNetwork;

impl ClusterNetwork for TcpNetwork {
    fn connect(
        &self,
        addr: &str,
        stats: Arc<NetworkStats>,
    ) -> crate::transport::Result<Arc<dyn Connection>> {
        socket_connect(addr, stats)
    }
}

// ---- wire codecs for client and control operations ----

pub fn encode_put(key: &[u8], value: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 + key.len() + value.len());
    out.extend_from_slice(&(key.len() as u16).to_le_bytes());
    out.extend_from_slice(key);
    out.extend_from_slice(value);
    out
}

pub fn decode_put(p: &[u8]) -> Option<(&[u8], &[u8])> {
    if p.len() < 2 {
        return None;
    }
    let klen = u16::from_le_bytes(p[0..2].try_into().unwrap()) as usize;
    if p.len() < 2 + klen {
        return None;
    }
    Some((&p[2..2 + klen], &p[2 + klen..]))
}

pub fn encode_scan(start_key: &[u8], count: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + start_key.len());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(start_key);
    out
}

pub fn decode_scan(p: &[u8]) -> Option<(&[u8], u32)> {
    if p.len() < 4 {
        return None;
    }
    Some((&p[4..], u32::from_le_bytes(p[0..4].try_into().unwrap())))
}

pub fn encode_scan_reply(items: &[(Vec<u8>, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (k, v) in items {
        out.extend_from_slice(&(k.len() as u16).to_le_bytes());
        out.extend_from_slice(k);
        out.extend_from_slice(&(v.len() as u32).to_le_bytes());
        out.extend_from_slice(v);
    }
    out
}

pub fn decode_scan_reply(p: &[u8]) -> Option<Vec<(Vec<u8>, Vec<u8>)>> {
    let n = u32::from_le_bytes(p.get(0..4)?.try_into().unwrap()) as usize;
    let mut at = 4;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let klen = u16::from_le_bytes(p.get(at..at + 2)?.try_into().unwrap()) as usize;
        at += 2;
        let key = p.get(at..at + klen)?.to_vec();
        at += klen;
        let vlen = u32::from_le_bytes(p.get(at..at + 4)?.try_into().unwrap()) as usize;
        at += 4;
        let value = p.get(at..at + vlen)?.to_vec();
        at += vlen;
        out.push((key, value));
    }
    (at == p.len()).then_some(out)
}

fn encode_addr_list(addrs: &[String]) -> Vec<u8> {
    let mut out = vec![addrs.len() as u8];
    for a in addrs {
        out.extend_from_slice(&(a.len() as u16).to_le_bytes());
        out.extend_from_slice(a.as_bytes());
    }
    out
}

fn decode_addr_list(p: &[u8]) -> Option<(Vec<String>, usize)> {
    let n = *p.first()? as usize;
    let mut at = 1;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u16::from_le_bytes(p.get(at..at + 2)?.try_into().unwrap()) as usize;
        at += 2;
        out.push(String::from_utf8(p.get(at..at + len)?.to_vec()).ok()?);
        at += len;
    }
    Some((out, at))
}

pub fn encode_open_primary(region_id: u32, mode: ReplicationMode, backups: &[String]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&region_id.to_le_bytes());
    out.push(mode.to_wire());
    out.extend_from_slice(&encode_addr_list(backups));
    out
}

pub fn decode_open_primary(p: &[u8]) -> Option<(u32, ReplicationMode, Vec<String>)> {
    if p.len() < 5 {
        return None;
    }
    let region_id = u32::from_le_bytes(p[0..4].try_into().unwrap());
    let mode = ReplicationMode::from_wire(p[4])?;
    let (addrs, used) = decode_addr_list(&p[5..])?;
    (5 + used == p.len()).then_some((region_id, mode, addrs))
}

pub fn encode_add_backup(region_id: u32, addr: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&region_id.to_le_bytes());
    out.extend_from_slice(&(addr.len() as u16).to_le_bytes());
    out.extend_from_slice(addr.as_bytes());
    out
}

pub fn decode_add_backup(p: &[u8]) -> Option<(u32, String)> {
    if p.len() < 6 {
        return None;
    }
    let region_id = u32::from_le_bytes(p[0..4].try_into().unwrap());
    let len = u16::from_le_bytes(p[4..6].try_into().unwrap()) as usize;
    if p.len() != 6 + len {
        return None;
    }
    Some((region_id, String::from_utf8(p[6..].to_vec()).ok()?))
}

pub fn encode_promote(region_id: u32, backups: &[String]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&region_id.to_le_bytes());
    out.extend_from_slice(&encode_addr_list(backups));
    out
}

pub fn decode_promote(p: &[u8]) -> Option<(u32, Vec<String>)> {
    if p.len() < 5 {
        return None;
    }
    let region_id = u32::from_le_bytes(p[0..4].try_into().unwrap());
    let (addrs, used) = decode_addr_list(&p[4..])?;
    (4 + used == p.len()).then_some((region_id, addrs))
}

// ---- the server ----

pub struct ServerNode {
    pub id: u16,
    pub addr: String,
    device: Arc<Device>,
    engine_cfg: EngineConfig,
    backups: BackupRegions,
    primaries: Mutex<HashMap<u32, PrimaryRegion>>,
    region_map: RwLock<RegionMap>,
    net: Arc<dyn ClusterNetwork>,
    stats: Arc<NetworkStats>,
}

impl ServerNode {
    pub fn new(
        id: u16,
        addr: String,
        device: Arc<Device>,
        engine_cfg: EngineConfig,
        net: Arc<dyn ClusterNetwork>,
    ) -> Arc<ServerNode> {
        let stats = NetworkStats::new();
        let factory_device = device.clone();
        let factory_cfg = engine_cfg.clone();
        let factory = Box::new(move |mode: ReplicationMode| {
            let mut cfg = factory_cfg.clone();
            if mode == ReplicationMode::BuildIndex {
                // A backup indexing on its own gets half the memory budget.
                cfg.l0_capacity_keys = (cfg.l0_capacity_keys / 2).max(1);
            }
            Engine::new(factory_device.clone(), cfg)
        });
        Arc::new(ServerNode {
            id,
            addr,
            device,
            engine_cfg,
            backups: BackupRegions::new(factory),
            primaries: Mutex::new(HashMap::new()),
            region_map: RwLock::new(RegionMap::default()),
            net,
            stats,
        })
    }

    pub fn stats(&self) -> &Arc<NetworkStats> {
        &self.stats
    }

    pub fn device(&self) -> &Arc<Device> {
        &self.device
    }

    pub fn region_map(&self) -> RegionMap {
        self.region_map.read().unwrap().clone()
    }

    pub fn set_region_map(&self, map: RegionMap) {
        let mut cur = self.region_map.write().unwrap();
        if map.version >= cur.version {
            *cur = map;
        }
    }

    /// Counters and sizes for reporting: (primary regions, backup regions).
    pub fn region_counts(&self) -> (usize, usize) {
        (
            self.primaries.lock().unwrap().len(),
            self.backups.region_ids().len(),
        )
    }

    pub fn with_primary<T>(&self, region_id: u32, f: impl FnOnce(&mut PrimaryRegion) -> T) -> Option<T> {
        self.primaries.lock().unwrap().get_mut(&region_id).map(f)
    }

    pub fn backup_regions(&self) -> &BackupRegions {
        &self.backups
    }

    /// Total backup-side compactions across this server's backup regions.
    pub fn backup_compactions(&self) -> u64 {
        self.backups
            .region_ids()
            .into_iter()
            .filter_map(|r| self.backups.with_region(r, |b| b.engine.counters().compactions))
            .sum()
    }

    pub fn backup_l0_entries(&self) -> u64 {
        self.backups
            .region_ids()
            .into_iter()
            .filter_map(|r| self.backups.with_region(r, |b| b.engine.l0_len() as u64))
            .sum()
    }

    /// Route a client key to one of this server's primary regions, or fail
    /// with the redirect protocol error carrying the current map version.
    fn route(&self, key: &[u8]) -> std::result::Result<u32, String> {
        let map = self.region_map.read().unwrap();
        let e = map
            .lookup(key)
            .ok_or_else(|| "redirect:0".to_string())?;
        if e.flags & REGION_FLAG_LOST != 0 {
            return Err(format!("lost:{}", e.region_id));
        }
        if e.primary != self.id {
            return Err(format!("redirect:{}", map.version));
        }
        Ok(e.region_id)
    }

    fn with_routed<T>(
        &self,
        key: &[u8],
        f: impl FnOnce(&mut PrimaryRegion) -> std::result::Result<T, String>,
    ) -> std::result::Result<T, String> {
        let region_id = self.route(key)?;
        let mut primaries = self.primaries.lock().unwrap();
        let region = primaries
            .get_mut(&region_id)
            .ok_or_else(|| format!("unavailable:{region_id}"))?;
        f(region)
    }

    fn handle_open_primary(&self, payload: &[u8]) -> std::result::Result<Vec<u8>, String> {
        let (region_id, mode, backup_addrs) =
            decode_open_primary(payload).ok_or("bad open-primary")?;
        let replication = if mode == ReplicationMode::None {
            None
        } else {
            let conns = backup_addrs
                .iter()
                .map(|a| {
                    self.net
                        .connect(a, self.stats.clone())
                        .map(|c| (a.clone(), c))
                })
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            Some(PrimaryReplication::open(region_id, mode, conns).map_err(|e| e.to_string())?)
        };
        let engine = Engine::new(self.device.clone(), self.engine_cfg.clone());
        let old = self
            .primaries
            .lock()
            .unwrap()
            .insert(region_id, PrimaryRegion::new(engine, replication));
        if let Some(old) = old {
            old.engine.release_storage().map_err(|e| e.to_string())?;
        }
        Ok(Vec::new())
    }

    fn handle_add_backup(&self, payload: &[u8]) -> std::result::Result<Vec<u8>, String> {
        let (region_id, addr) = decode_add_backup(payload).ok_or("bad add-backup")?;
        let conn = self
            .net
            .connect(&addr, self.stats.clone())
            .map_err(|e| e.to_string())?;
        let mut primaries = self.primaries.lock().unwrap();
        let region = primaries
            .get_mut(&region_id)
            .ok_or_else(|| format!("unavailable:{region_id}"))?;
        let PrimaryRegion {
            engine,
            replication,
        } = region;
        replication
            .as_mut()
            .ok_or("region is unreplicated")?
            .attach_backup(addr, conn, engine)
            .map_err(|e| e.to_string())?;
        Ok(Vec::new())
    }

    fn handle_remove_backup(&self, payload: &[u8]) -> std::result::Result<Vec<u8>, String> {
        let (region_id, addr) = decode_add_backup(payload).ok_or("bad remove-backup")?;
        let mut primaries = self.primaries.lock().unwrap();
        let region = primaries
            .get_mut(&region_id)
            .ok_or_else(|| format!("unavailable:{region_id}"))?;
        if let Some(repl) = region.replication.as_mut() {
            repl.drop_backup(&addr);
        }
        Ok(Vec::new())
    }

    /// Become primary for a region this server has been backing up: adopt
    /// the replication buffer as the log tail, rebuild L0 from log segments
    /// the on-device levels do not cover, then attach the given backups.
    fn handle_promote(&self, payload: &[u8]) -> std::result::Result<Vec<u8>, String> {
        let (region_id, backup_addrs) = decode_promote(payload).ok_or("bad promote")?;
        let br = self
            .backups
            .take_region(region_id)
            .ok_or_else(|| format!("not a backup of region {region_id}"))?;
        let mut engine = br.engine;
        engine
            .replay_uncovered_log_segments()
            .map_err(|e| e.to_string())?;
        let tail = br.repl_buf.read(0, br.repl_buf.len());
        engine.adopt_replicated_tail(&tail).map_err(|e| e.to_string())?;
        // An empty group is still replicated-mode: spares attach later.
        let replication = if br.mode == ReplicationMode::None {
            None
        } else {
            let mut repl = PrimaryReplication::new(region_id, br.mode);
            for addr in &backup_addrs {
                let conn = self
                    .net
                    .connect(addr, self.stats.clone())
                    .map_err(|e| e.to_string())?;
                repl.attach_backup(addr.clone(), conn, &engine)
                    .map_err(|e| e.to_string())?;
            }
            Some(repl)
        };
        self.primaries
            .lock()
            .unwrap()
            .insert(region_id, PrimaryRegion::new(engine, replication));
        Ok(Vec::new())
    }
}

impl Handler for ServerNode {
    fn handle(&self, ctx: &ConnCtx, opcode: u8, payload: &[u8]) -> std::result::Result<Vec<u8>, String> {
        match opcode {
            op::OPEN_REGION | op::FLUSH_LOG | op::INDEX_SEGMENT | op::INDEX_FINALIZE => {
                Handler::handle(&self.backups, ctx, opcode, payload)
            }
            op::PUT => {
                let (key, value) = decode_put(payload).ok_or("bad put")?;
                self.with_routed(key, |r| {
                    r.put(key, value).map_err(|e| e.to_string())?;
                    Ok(Vec::new())
                })
            }
            op::GET => self.with_routed(payload, |r| {
                match r.get(payload).map_err(|e| e.to_string())? {
                    Some(v) => {
                        let mut out = Vec::with_capacity(1 + v.len());
                        out.push(1);
                        out.extend_from_slice(&v);
                        Ok(out)
                    }
                    None => Ok(vec![0]),
                }
            }),
            op::DELETE => self.with_routed(payload, |r| {
                r.delete(payload).map_err(|e| e.to_string())?;
                Ok(Vec::new())
            }),
            op::SCAN => {
                let (start, count) = decode_scan(payload).ok_or("bad scan")?;
                // A scan stays within the region owning its start key.
                self.with_routed(start, |r| {
                    let items = r.scan(start, count as usize).map_err(|e| e.to_string())?;
                    Ok(encode_scan_reply(&items))
                })
            }
            op::GET_REGION_MAP => Ok(self.region_map.read().unwrap().encode()),
            op::SET_REGION_MAP => {
                let map = RegionMap::decode(payload).map_err(|e| e.to_string())?;
                self.set_region_map(map);
                Ok(Vec::new())
            }
            op::OPEN_PRIMARY => self.handle_open_primary(payload),
            op::ADD_BACKUP => self.handle_add_backup(payload),
            op::REMOVE_BACKUP => self.handle_remove_backup(payload),
            op::PROMOTE_REGION => self.handle_promote(payload),
            other => Err(format!("unknown opcode {other}")),
        }
    }
}

// ---- client ----

/// Cluster client: routes by cached region map, refreshes and retries on
/// redirects and during failover windows.
pub struct KvClient {
    net: Arc<dyn ClusterNetwork>,
    stats: Arc<NetworkStats>,
    addrs: BTreeMap<u16, String>,
    conns: HashMap<u16, RpcClient>,
    pub map: RegionMap,
    pub retry_limit: usize,
    pub retry_pause: Duration,
    /// Per-call timeout applied to new connections.
    pub call_timeout: Duration,
}

impl KvClient {
    pub fn new(net: Arc<dyn ClusterNetwork>, addrs: BTreeMap<u16, String>) -> KvClient {
        KvClient {
            net,
            stats: NetworkStats::new(),
            addrs,
            conns: HashMap::new(),
            map: RegionMap::default(),
            retry_limit: 100,
            retry_pause: Duration::from_millis(20),
            call_timeout: Duration::from_secs(5),
        }
    }

    pub fn stats(&self) -> &Arc<NetworkStats> {
        &self.stats
    }

    fn client_for(&mut self, id: u16) -> Result<&mut RpcClient> {
        if !self.conns.contains_key(&id) {
            let addr = self
                .addrs
                .get(&id)
                .ok_or_else(|| ClusterError::Protocol(format!("unknown server {id}")))?;
            let conn = self.net.connect(addr, self.stats.clone())?;
            let mut client = RpcClient::connect(conn)?;
            client.timeout = self.call_timeout;
            self.conns.insert(id, client);
        }
        Ok(self.conns.get_mut(&id).unwrap())
    }

    /// Adopt the newest map any server will give us.
    pub fn refresh_map(&mut self) {
        let ids: Vec<u16> = self.addrs.keys().copied().collect();
        for id in ids {
            let got = self
                .client_for(id)
                .and_then(|c| c.call(op::GET_REGION_MAP, &[]).map_err(ClusterError::Rpc));
            match got {
                Ok(reply) => {
                    if let Ok(map) = RegionMap::decode(&reply.payload) {
                        if map.version > self.map.version {
                            self.map = map;
                        }
                    }
                }
                Err(_) => {
                    self.conns.remove(&id);
                }
            }
        }
    }

    fn call_routed(&mut self, key: &[u8], opcode: u8, payload: &[u8]) -> Result<Vec<u8>> {
        for _ in 0..self.retry_limit {
            let target = self
                .map
                .lookup(key)
                .map(|e| (e.primary, e.region_id, e.flags));
            let Some((primary, region_id, flags)) = target else {
                self.refresh_map();
                std::thread::sleep(self.retry_pause);
                continue;
            };
            if flags & REGION_FLAG_LOST != 0 {
                return Err(ClusterError::RegionLost(region_id));
            }
            let outcome = self
                .client_for(primary)
                .and_then(|c| c.call(opcode, payload).map_err(ClusterError::Rpc));
            match outcome {
                Ok(reply) => return Ok(reply.payload),
                Err(ClusterError::Rpc(RpcError::Remote(msg))) => {
                    if let Some(region) = msg.strip_prefix("lost:") {
                        return Err(ClusterError::RegionLost(region.parse().unwrap_or(u32::MAX)));
                    }
                    if msg.starts_with("redirect:") || msg.starts_with("unavailable:") {
                        std::thread::sleep(self.retry_pause);
                        self.refresh_map();
                        continue;
                    }
                    return Err(ClusterError::Rpc(RpcError::Remote(msg)));
                }
                Err(_) => {
                    // Connection-level failure: drop the link, re-route.
                    self.conns.remove(&primary);
                    std::thread::sleep(self.retry_pause);
                    self.refresh_map();
                }
            }
        }
        Err(ClusterError::Protocol("retries exhausted".into()))
    }

    pub fn put(&mut self, key: &[u8], value: &[u8]) -> Result<()> {
        self.call_routed(key, op::PUT, &encode_put(key, value))?;
        Ok(())
    }

    pub fn get(&mut self, key: &[u8]) -> Result<Option<Vec<u8>>> {
        let reply = self.call_routed(key, op::GET, key)?;
        match reply.first() {
            Some(1) => Ok(Some(reply[1..].to_vec())),
            Some(0) if reply.len() == 1 => Ok(None),
            _ => Err(ClusterError::Protocol("bad get reply".into())),
        }
    }

    pub fn delete(&mut self, key: &[u8]) -> Result<()> {
        self.call_routed(key, op::DELETE, key)?;
        Ok(())
    }

    pub fn scan(&mut self, start_key: &[u8], count: u32) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let reply = self.call_routed(start_key, op::SCAN, &encode_scan(start_key, count))?;
        decode_scan_reply(&reply).ok_or_else(|| ClusterError::Protocol("bad scan reply".into()))
    }
}
