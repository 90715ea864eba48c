//! `rackkv`: cluster binaries — standalone coordinator, server daemon,
//! master, a single-process simulation mode, and topology inspection.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

mod config;
mod jsonlog;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};

use rackkv::cluster::coord_net::{CoordClient, CoordServer};
use rackkv::cluster::coordination::{CoordConfig, CoordService, Coordinator, SystemClock};
use rackkv::cluster::master::{Master, MasterConfig};
use rackkv::cluster::server::{ClusterNetwork, ServerNode, TcpNetwork};
use rackkv::cluster::sim::{SimCluster, SimConfig};
use rackkv::cluster::RegionMap;
use rackkv::device::Device;
use rackkv::rpc::server::RpcServer;
use rackkv::transport::socket::{socket_connect, SocketListener};
use rackkv::transport::NetworkStats;

use config::ClusterConfig;

#[derive(Parser)]
#[command(name = "rackkv", about = "replicated LSM key-value store")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Standalone coordination service.
    Coordinator {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        session_timeout_ms: Option<u64>,
        #[arg(long)]
        heartbeat_ms: Option<u64>,
    },
    /// One storage server.
    Server {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        id: u16,
    },
    /// Cluster master: elects itself, bootstraps regions, supervises.
    Master {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        id: u16,
    },
    /// Whole cluster in one process over the in-process transport.
    Sim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        ops: u64,
    },
    /// CI smoke: simulated cluster, 1k inserts, read-back verification.
    Smoke {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the region table of a running cluster.
    Topology {
        #[arg(long)]
        config: PathBuf,
    },
}

fn shutdown_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    ctrlc::set_handler(move || f.store(true, Ordering::Release))
        .expect("signal handler installs once");
    flag
}

fn load(path: &PathBuf) -> ClusterConfig {
    match ClusterConfig::load(path) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            std::process::exit(2);
        }
    }
}

fn fail(msg: String) -> ! {
    eprintln!("error: {msg}");
    std::process::exit(1);
}

fn coordinator_main(cfg: &ClusterConfig, timeout_ms: Option<u64>, heartbeat_ms: Option<u64>) {
    let coord_cfg = CoordConfig {
        session_timeout_ms: timeout_ms.unwrap_or(cfg.coordinator.session_timeout_ms),
        heartbeat_ms: heartbeat_ms.unwrap_or(cfg.coordinator.heartbeat_ms),
    };
    let tick = Duration::from_millis(coord_cfg.heartbeat_ms);
    let coordinator = Coordinator::new(SystemClock::new(), coord_cfg);
    let rpc = Arc::new(RpcServer::start(CoordServer::new(coordinator.clone()), cfg.rpc_config()));
    let listener = match SocketListener::bind(&cfg.coordinator.addr, NetworkStats::new()) {
        Ok(l) => l,
        Err(e) => fail(format!("bind {}: {e}", cfg.coordinator.addr)),
    };
    log::info!("coordinator listening on {}", cfg.coordinator.addr);
    let stop = shutdown_flag();
    {
        let coordinator = coordinator.clone();
        let stop = stop.clone();
        std::thread::spawn(move || {
            while !stop.load(Ordering::Acquire) {
                std::thread::sleep(tick);
                let _ = coordinator.expire_sessions();
            }
        });
    }
    {
        let rpc = rpc.clone();
        let stop = stop.clone();
        // Accept in the background: the blocking accept() must not keep
        // the process alive past a termination signal.
        std::thread::spawn(move || loop {
            match listener.accept() {
                Ok(conn) => {
                    if rpc.add_connection(conn).is_err() {
                        return;
                    }
                }
                Err(e) => {
                    if stop.load(Ordering::Acquire) {
                        return;
                    }
                    log::warn!("accept: {e}");
                }
            }
        });
    }
    while !stop.load(Ordering::Acquire) {
        std::thread::sleep(tick);
    }
    rpc.shutdown();
    log::info!("coordinator stopped");
}

fn connect_coordinator(cfg: &ClusterConfig) -> Arc<CoordClient> {
    match socket_connect(&cfg.coordinator.addr, NetworkStats::new())
        .map_err(|e| e.to_string())
        .and_then(|conn| CoordClient::connect(conn).map_err(|e| e.to_string()))
    {
        Ok(c) => Arc::new(c),
        Err(e) => fail(format!("coordinator unavailable at {}: {e}", cfg.coordinator.addr)),
    }
}

fn server_main(cfg: &ClusterConfig, id: u16) {
    let entry = cfg.server(id).unwrap_or_else(|e| fail(e)).clone();
    let device = Arc::new(Device::new_in_memory(cfg.device_capacity, cfg.segment_size));
    let node = ServerNode::new(
        id,
        entry.address.clone(),
        device,
        cfg.engine_config(),
        Arc::new(TcpNetwork) as Arc<dyn ClusterNetwork>,
    );
    let rpc = Arc::new(RpcServer::start(node.clone(), cfg.rpc_config()));
    let listener = match SocketListener::bind(&entry.address, node.stats().clone()) {
        Ok(l) => l,
        Err(e) => fail(format!("bind {}: {e}", entry.address)),
    };
    let coord = connect_coordinator(cfg);
    let session = coord.create_session().unwrap_or_else(|e| fail(e.to_string()));
    coord
        .create(&format!("/servers/s{id}"), entry.address.as_bytes(), Some(session), false)
        .unwrap_or_else(|e| fail(format!("register: {e}")));
    log::info!("server {id} listening on {}", entry.address);
    let stop = shutdown_flag();
    {
        let rpc = rpc.clone();
        let stop = stop.clone();
        std::thread::spawn(move || {
            while let Ok(conn) = listener.accept() {
                if rpc.add_connection(conn).is_err() || stop.load(Ordering::Acquire) {
                    break;
                }
            }
        });
    }
    let tick = Duration::from_millis(cfg.coordinator.heartbeat_ms);
    while !stop.load(Ordering::Acquire) {
        std::thread::sleep(tick);
        if let Err(e) = coord.heartbeat(session) {
            log::error!("heartbeat lost: {e}");
        }
    }
    // Graceful shutdown: the ephemeral registration disappears now, not
    // after the session timeout.
    let _ = coord.close_session(session);
    rpc.shutdown();
    log::info!("server {id} stopped");
}

fn master_main(cfg: &ClusterConfig, id: u16) {
    let coord = connect_coordinator(cfg);
    let mode = cfg.mode().unwrap_or_else(|e| fail(e));
    let mut master = Master::new(
        id,
        coord.clone() as Arc<dyn CoordService>,
        Arc::new(TcpNetwork) as Arc<dyn ClusterNetwork>,
        MasterConfig {
            regions: cfg.regions,
            group_size: cfg.group_size,
            mode,
        },
    )
    .unwrap_or_else(|e| fail(e.to_string()));
    let stop = shutdown_flag();
    let tick = Duration::from_millis(cfg.coordinator.heartbeat_ms);
    // Stand by until this candidate wins an epoch.
    loop {
        if stop.load(Ordering::Acquire) {
            return;
        }
        match master.elect() {
            Ok(true) => break,
            Ok(false) => {}
            Err(e) => log::warn!("election: {e}"),
        }
        master.heartbeat().unwrap_or_else(|e| fail(e.to_string()));
        std::thread::sleep(tick);
    }
    log::info!(
        "master {id} won epoch {}",
        master.state.as_ref().map(|s| s.epoch).unwrap_or(0)
    );
    master.bootstrap().unwrap_or_else(|e| fail(e.to_string()));
    while !stop.load(Ordering::Acquire) {
        std::thread::sleep(tick);
        if let Err(e) = master.heartbeat() {
            log::error!("heartbeat: {e}");
        }
        if let Err(e) = master.step() {
            log::warn!("supervision: {e}");
        }
    }
    log::info!("master {id} stopped");
}

fn print_region_table(map: &RegionMap) {
    println!("version {}  regions {}", map.version, map.entries.len());
    println!("{:<8} {:<12} {:<8} {:<12} {}", "region", "start", "primary", "backups", "health");
    for e in &map.entries {
        let health = if e.flags & rackkv::cluster::REGION_FLAG_LOST != 0 {
            "LOST"
        } else if e.flags & rackkv::cluster::REGION_FLAG_DEGRADED != 0 {
            "DEGRADED"
        } else {
            "ok"
        };
        let backups: Vec<String> = e.backups.iter().map(|b| b.to_string()).collect();
        println!(
            "{:<8} {:<12} {:<8} {:<12} {}",
            e.region_id,
            hex_prefix(&e.start_key),
            e.primary,
            backups.join(","),
            health
        );
    }
}

fn hex_prefix(key: &[u8; 24]) -> String {
    key[..4].iter().map(|b| format!("{b:02x}")).collect()
}

fn topology_main(cfg: &ClusterConfig) {
    let coord = connect_coordinator(cfg);
    match coord.get("/master") {
        Ok(Some(d)) => {
            if let Ok(state) = rackkv::cluster::MasterState::decode(&d) {
                println!("master {} epoch {}", state.master_id, state.epoch);
            }
        }
        Ok(None) => println!("no master elected"),
        Err(e) => fail(e.to_string()),
    }
    match coord.children("/servers") {
        Ok(kids) => println!("registered servers: {}", kids.len()),
        Err(e) => fail(e.to_string()),
    }
    match coord.get("/region_map") {
        Ok(Some(d)) => match RegionMap::decode(&d) {
            Ok(map) => print_region_table(&map),
            Err(e) => fail(e.to_string()),
        },
        Ok(None) => println!("no region map published"),
        Err(e) => fail(e.to_string()),
    }
}

/// Keys with a hashed prefix so they spread across the range partition.
fn sim_key(i: u64) -> Vec<u8> {
    let h = (i.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 48) as u16;
    let mut k = h.to_be_bytes().to_vec();
    k.extend_from_slice(format!("user{i:08}").as_bytes());
    k
}

fn sim_main(cfg: &ClusterConfig, ops: u64) {
    let mode = cfg.mode().unwrap_or_else(|e| fail(e));
    let sim_cfg = SimConfig {
        servers: cfg.servers.len(),
        regions: cfg.regions,
        group_size: cfg.group_size,
        mode,
        engine: cfg.engine_config(),
        device_capacity: cfg.device_capacity,
        segment_size: cfg.segment_size,
        rpc: cfg.rpc_config(),
    };
    let mut sim = SimCluster::start(sim_cfg).unwrap_or_else(|e| fail(e.to_string()));
    let mut client = sim.client();
    for i in 0..ops {
        let value = format!("value{i:08}");
        client
            .put(&sim_key(i), value.as_bytes())
            .unwrap_or_else(|e| fail(format!("put {i}: {e}")));
    }
    // Read back a deterministic sample.
    for i in (0..ops).step_by((ops / 100).max(1) as usize) {
        let got = client
            .get(&sim_key(i))
            .unwrap_or_else(|e| fail(format!("get {i}: {e}")));
        let want = format!("value{i:08}");
        if got.as_deref() != Some(want.as_bytes()) {
            fail(format!("read-back mismatch at key {i}"));
        }
    }
    print_region_table(&sim.master.map);
    let (p, b) = sim
        .servers
        .iter()
        .map(|s| s.node.region_counts())
        .fold((0, 0), |(ap, ab), (p, b)| (ap + p, ab + b));
    println!("ok: {ops} ops; {p} primary regions, {b} backup regions across {} servers", sim.servers.len());
    sim.shutdown();
}

fn main() {
    jsonlog::init();
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Coordinator { config, session_timeout_ms, heartbeat_ms } => {
            let cfg = load(config);
            coordinator_main(&cfg, *session_timeout_ms, *heartbeat_ms);
        }
        Cmd::Server { config, id } => server_main(&load(config), *id),
        Cmd::Master { config, id } => master_main(&load(config), *id),
        Cmd::Sim { config, ops } => sim_main(&load(config), *ops),
        Cmd::Smoke { config } => sim_main(&load(config), 1000),
        Cmd::Topology { config } => topology_main(&load(config)),
    }
}
