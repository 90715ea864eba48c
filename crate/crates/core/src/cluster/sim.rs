//! Single-process cluster over the in-process transport: real servers,
//! real rpc, an embedded coordinator on a manual clock, and fault
//! injection. Used by the failure tests and the benchmark harness.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::device::Device;
use crate::engine::EngineConfig;
use crate::replication::ReplicationMode;
use crate::rpc::server::{RpcConfig, RpcServer};
use crate::transport::inproc::InProcNetwork;

use super::coordination::{CoordConfig, Coordinator, TestClock};
use super::master::{Master, MasterConfig};
use super::server::{ClusterNetwork, KvClient, ServerNode};
use super::Result;

#[derive(Clone)]
pub struct SimConfig {
    pub servers: usize,
    pub regions: u32,
    /// Replica group size including the primary.
    pub group_size: usize,
    pub mode: ReplicationMode,
    pub engine: EngineConfig,
    pub device_capacity: u64,
    pub segment_size: u64,
    pub rpc: RpcConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            servers: 3,
            regions: 8,
            group_size: 2,
            mode: ReplicationMode::SendIndex,
            engine: EngineConfig {
                growth_factor: 4,
                l0_capacity_keys: 256,
                node_size: 4096,
            },
            device_capacity: 256 * 1024 * 1024,
            segment_size: 64 * 1024,
            rpc: RpcConfig::default(),
        }
    }
}

pub struct SimServer {
    pub node: Arc<ServerNode>,
    pub rpc: Arc<RpcServer>,
    pub session: u64,
    pub alive: bool,
}

pub struct SimCluster {
    pub net: Arc<InProcNetwork>,
    pub clock: Arc<TestClock>,
    pub coordinator: Arc<Coordinator>,
    pub servers: Vec<SimServer>,
    pub master: Master,
    pub cfg: SimConfig,
}

impl SimCluster {
    pub fn start(cfg: SimConfig) -> Result<SimCluster> {
        let net = InProcNetwork::new();
        let clock = TestClock::new();
        let coordinator = Coordinator::new(clock.clone(), CoordConfig::default());
        let mut servers = Vec::new();
        for i in 0..cfg.servers {
            let id = (i + 1) as u16;
            let addr = format!("s{id}");
            let device = Arc::new(Device::new_in_memory(cfg.device_capacity, cfg.segment_size));
            let node = ServerNode::new(
                id,
                addr.clone(),
                device,
                cfg.engine.clone(),
                net.clone() as Arc<dyn ClusterNetwork>,
            );
            let rpc = Arc::new(RpcServer::start(node.clone(), cfg.rpc.clone()));
            let listener = net.listen(&addr, node.stats().clone());
            let rpc2 = rpc.clone();
            std::thread::spawn(move || {
                while let Ok(conn) = listener.accept() {
                    if rpc2.add_connection(conn).is_err() {
                        break;
                    }
                }
            });
            let session = coordinator.create_session()?;
            coordinator.create(&format!("/servers/s{id}"), addr.as_bytes(), Some(session), false)?;
            servers.push(SimServer {
                node,
                rpc,
                session,
                alive: true,
            });
        }
        let mut master = Master::new(
            999,
            coordinator.clone(),
            net.clone() as Arc<dyn ClusterNetwork>,
            MasterConfig {
                regions: cfg.regions,
                group_size: cfg.group_size,
                mode: cfg.mode,
            },
        )?;
        assert!(master.elect()?, "unopposed election must win");
        master.bootstrap()?;
        Ok(SimCluster {
            net,
            clock,
            coordinator,
            servers,
            master,
            cfg,
        })
    }

    pub fn client(&self) -> KvClient {
        let addrs: BTreeMap<u16, String> = self
            .servers
            .iter()
            .map(|s| (s.node.id, s.node.addr.clone()))
            .collect();
        KvClient::new(self.net.clone() as Arc<dyn ClusterNetwork>, addrs)
    }

    pub fn server(&self, id: u16) -> &SimServer {
        self.servers.iter().find(|s| s.node.id == id).unwrap()
    }

    fn heartbeat_live(&self) -> Result<()> {
        for s in self.servers.iter().filter(|s| s.alive) {
            self.coordinator.heartbeat(s.session)?;
        }
        self.master.heartbeat()
    }

    /// Crash a server: its rpc service stops responding and its session
    /// stops heartbeating. Nothing is cleaned up gracefully.
    pub fn fail_server(&mut self, id: u16) {
        let s = self.servers.iter_mut().find(|s| s.node.id == id).unwrap();
        assert!(s.alive, "server {id} already down");
        s.alive = false;
        s.rpc.shutdown();
    }

    /// Advance time past the session timeout (heartbeating live members on
    /// the way so only crashed sessions expire), then run one master pass.
    pub fn recover(&mut self) -> Result<()> {
        let step = self.coordinator.cfg.heartbeat_ms;
        let rounds = self.coordinator.cfg.session_timeout_ms / step + 2;
        for _ in 0..rounds {
            self.clock.advance(step);
            self.heartbeat_live()?;
        }
        self.master.step()
    }

    /// Total bytes moved on every server's storage device.
    pub fn total_device_traffic(&self) -> u64 {
        self.servers
            .iter()
            .map(|s| s.node.device().stats().total())
            .sum()
    }

    /// Total bytes through every server's transport endpoint.
    pub fn total_server_network_traffic(&self) -> u64 {
        self.servers.iter().map(|s| s.node.stats().total()).sum()
    }

    pub fn total_backup_compactions(&self) -> u64 {
        self.servers.iter().map(|s| s.node.backup_compactions()).sum()
    }

    pub fn total_backup_l0_entries(&self) -> u64 {
        self.servers.iter().map(|s| s.node.backup_l0_entries()).sum()
    }

    pub fn shutdown(&mut self) {
        for s in &self.servers {
            if s.alive {
                s.rpc.shutdown();
            }
            self.net.unlisten(&s.node.addr);
        }
    }
}

impl Drop for SimCluster {
    fn drop(&mut self) {
        self.shutdown();
    }
}
