//! Master: owns the region map, bootstraps regions onto servers and runs
//! the recovery paths when a server's ephemeral node disappears.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::replication::ReplicationMode;
use crate::rpc::client::RpcClient;
use crate::rpc::op;

use super::coordination::{elect_master, CoordService};
use super::server::{encode_add_backup, encode_open_primary, encode_promote, ClusterNetwork};
use super::{
    ClusterError, MasterState, RegionMap, Result, REGION_FLAG_DEGRADED, REGION_FLAG_LOST,
};
use crate::transport::NetworkStats;

#[derive(Debug, Clone)]
pub struct MasterConfig {
    pub regions: u32,
    /// Replica group size including the primary.
    pub group_size: usize,
    pub mode: ReplicationMode,
}

pub struct Master {
    pub id: u16,
    coord: Arc<dyn CoordService>,
    session: u64,
    pub state: Option<MasterState>,
    net: Arc<dyn ClusterNetwork>,
    stats: Arc<NetworkStats>,
    clients: HashMap<u16, RpcClient>,
    /// Registered server addresses, refreshed from the coordinator.
    addrs: BTreeMap<u16, String>,
    alive: BTreeSet<u16>,
    pub map: RegionMap,
    pub cfg: MasterConfig,
}

impl Master {
    pub fn new(
        id: u16,
        coord: Arc<dyn CoordService>,
        net: Arc<dyn ClusterNetwork>,
        cfg: MasterConfig,
    ) -> Result<Master> {
        let session = coord.create_session()?;
        Ok(Master {
            id,
            coord,
            session,
            state: None,
            net,
            stats: NetworkStats::new(),
            clients: HashMap::new(),
            addrs: BTreeMap::new(),
            alive: BTreeSet::new(),
            map: RegionMap::default(),
            cfg,
        })
    }

    pub fn session(&self) -> u64 {
        self.session
    }

    pub fn stats(&self) -> &Arc<NetworkStats> {
        &self.stats
    }

    pub fn heartbeat(&self) -> Result<()> {
        self.coord.heartbeat(self.session)?;
        Ok(())
    }

    /// Run the election; returns true when this master won the epoch.
    pub fn elect(&mut self) -> Result<bool> {
        self.state = elect_master(self.coord.as_ref(), self.session, self.id)?;
        Ok(self.state.is_some())
    }

    fn registered_servers(&self) -> Result<BTreeMap<u16, String>> {
        let mut out = BTreeMap::new();
        for path in self.coord.children("/servers")? {
            let Some(id) = path
                .rsplit('/')
                .next()
                .and_then(|n| n.strip_prefix('s'))
                .and_then(|n| n.parse::<u16>().ok())
            else {
                continue;
            };
            if let Some(data) = self.coord.get(&path)? {
                out.insert(id, String::from_utf8_lossy(&data).into_owned());
            }
        }
        Ok(out)
    }

    fn client(&mut self, id: u16) -> Result<&mut RpcClient> {
        if !self.clients.contains_key(&id) {
            let addr = self
                .addrs
                .get(&id)
                .ok_or_else(|| ClusterError::ServerUnreachable(id, "unregistered".into()))?;
            let conn = self
                .net
                .connect(addr, self.stats.clone())
                .map_err(|e| ClusterError::ServerUnreachable(id, e.to_string()))?;
            self.clients.insert(
                id,
                RpcClient::connect(conn).map_err(|e| ClusterError::ServerUnreachable(id, e.to_string()))?,
            );
        }
        Ok(self.clients.get_mut(&id).unwrap())
    }

    fn call(&mut self, id: u16, opcode: u8, payload: &[u8]) -> Result<Vec<u8>> {
        let result = self
            .client(id)?
            .call(opcode, payload)
            .map(|r| r.payload)
            .map_err(|e| ClusterError::ServerUnreachable(id, e.to_string()));
        if result.is_err() {
            self.clients.remove(&id);
        }
        result
    }

    /// Publish the current map to the coordinator and every live server.
    fn push_map(&mut self) -> Result<()> {
        self.coord.set("/region_map", &self.map.encode())?;
        let encoded = self.map.encode();
        for id in self.alive.clone() {
            if let Err(e) = self.call(id, op::SET_REGION_MAP, &encoded) {
                log::warn!("map push to server {id} failed: {e}");
            }
        }
        Ok(())
    }

    /// Fresh cluster: partition the keyspace, assign roles and issue open
    /// commands. A master taking over after election adopts the stored map
    /// instead (regions are already open on the servers).
    pub fn bootstrap(&mut self) -> Result<()> {
        assert!(self.state.is_some(), "bootstrap requires election");
        self.addrs = self.registered_servers()?;
        self.alive = self.addrs.keys().copied().collect();
        if let Some(stored) = self.coord.get("/region_map")? {
            self.map = RegionMap::decode(&stored)?;
            // Recover anything that failed while no master was watching:
            // map members with no registration died before we took over.
            let mut referenced = BTreeSet::new();
            for e in &self.map.entries {
                referenced.extend(e.members());
            }
            let mut changed = false;
            for d in referenced {
                if !self.alive.contains(&d) {
                    changed |= self.handle_server_failure(d)?;
                }
            }
            if changed {
                self.map.version += 1;
                self.push_map()?;
            }
            return self.step();
        }
        let ids: Vec<u16> = self.addrs.keys().copied().collect();
        if ids.is_empty() {
            self.map = RegionMap::default();
            self.map.version = 1;
            self.push_map()?;
            return Ok(());
        }
        let group = self.cfg.group_size.min(ids.len());
        self.map = RegionMap::build(self.cfg.regions, &ids, group);
        for e in self.map.entries.clone() {
            let backups: Vec<String> = e
                .backups
                .iter()
                .map(|b| self.addrs[b].clone())
                .collect();
            let payload = encode_open_primary(e.region_id, self.cfg.mode, &backups);
            if let Err(err) = self.call(e.primary, op::OPEN_PRIMARY, &payload) {
                log::warn!("open region {} on server {} failed: {err}", e.region_id, e.primary);
                self.map.entry_mut(e.region_id).unwrap().flags |= REGION_FLAG_DEGRADED;
            }
        }
        self.push_map()
    }

    /// One supervision pass: expire sessions, diff the registered server
    /// set, recover regions touched by newly dead servers.
    pub fn step(&mut self) -> Result<()> {
        self.coord.expire_sessions()?;
        let now = self.registered_servers()?;
        let dead: Vec<u16> = self.alive.iter().copied().filter(|id| !now.contains_key(id)).collect();
        for (id, addr) in &now {
            self.addrs.insert(*id, addr.clone());
        }
        self.alive = now.keys().copied().collect();
        if dead.is_empty() {
            return Ok(());
        }
        let mut changed = false;
        for d in dead {
            self.clients.remove(&d);
            changed |= self.handle_server_failure(d)?;
        }
        if changed {
            self.map.version += 1;
            self.push_map()?;
        }
        Ok(())
    }

    fn handle_server_failure(&mut self, dead: u16) -> Result<bool> {
        let mut changed = false;
        for e in self.map.entries.clone() {
            if e.flags & REGION_FLAG_LOST != 0 || !e.members().contains(&dead) {
                continue;
            }
            if e.primary == dead {
                self.handle_primary_failure(e.region_id, dead)?;
            } else {
                self.handle_backup_failure(e.region_id, dead)?;
            }
            changed = true;
        }
        Ok(changed)
    }

    fn spare_for(&self, region_id: u32) -> Option<u16> {
        let members = self.map.entry(region_id).unwrap().members();
        self.alive
            .iter()
            .copied()
            .find(|id| !members.contains(id))
    }

    /// Promote the lowest-id live backup; survivors are re-attached to the
    /// new primary with a full resync, then a spare (if any) fills the
    /// vacancy.
    fn handle_primary_failure(&mut self, region_id: u32, dead: u16) -> Result<()> {
        let entry = self.map.entry(region_id).unwrap().clone();
        let mut survivors: Vec<u16> = entry
            .backups
            .iter()
            .copied()
            .filter(|b| *b != dead && self.alive.contains(b))
            .collect();
        survivors.sort_unstable();
        let Some(winner) = survivors.first().copied() else {
            log::error!("region {region_id} lost: primary {dead} died with no live backup");
            self.map.entry_mut(region_id).unwrap().flags |= REGION_FLAG_LOST;
            return Ok(());
        };
        let others: Vec<u16> = survivors[1..].to_vec();
        let other_addrs: Vec<String> = others.iter().map(|id| self.addrs[id].clone()).collect();
        self.call(winner, op::PROMOTE_REGION, &encode_promote(region_id, &other_addrs))?;
        {
            let e = self.map.entry_mut(region_id).unwrap();
            e.primary = winner;
            e.backups = others;
        }
        self.fill_vacancy(region_id)
    }

    fn handle_backup_failure(&mut self, region_id: u32, dead: u16) -> Result<()> {
        let primary = self.map.entry(region_id).unwrap().primary;
        // Tell the primary before it discovers the dead link via timeout.
        if let Some(dead_addr) = self.addrs.get(&dead).cloned() {
            if let Err(e) = self.call(
                primary,
                op::REMOVE_BACKUP,
                &encode_add_backup(region_id, &dead_addr),
            ) {
                log::warn!("remove-backup on server {primary} failed: {e}");
            }
        }
        self.map
            .entry_mut(region_id)
            .unwrap()
            .backups
            .retain(|b| *b != dead);
        self.fill_vacancy(region_id)
    }

    /// Top the group back up to the configured size with a spare server,
    /// or flag the region degraded when none exists.
    fn fill_vacancy(&mut self, region_id: u32) -> Result<()> {
        loop {
            let e = self.map.entry(region_id).unwrap().clone();
            if self.cfg.mode == ReplicationMode::None || e.backups.len() >= self.cfg.group_size - 1 {
                self.map.entry_mut(region_id).unwrap().flags &= !REGION_FLAG_DEGRADED;
                return Ok(());
            }
            let Some(spare) = self.spare_for(region_id) else {
                self.map.entry_mut(region_id).unwrap().flags |= REGION_FLAG_DEGRADED;
                return Ok(());
            };
            let addr = self.addrs[&spare].clone();
            self.call(e.primary, op::ADD_BACKUP, &encode_add_backup(region_id, &addr))?;
            self.map.entry_mut(region_id).unwrap().backups.push(spare);
        }
    }
}
