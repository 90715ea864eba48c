//! Embedded coordination service: a hierarchical node store with sessions,
//! heartbeats, ephemeral and sequential nodes, and watches. All operations
//! serialize through one lock, giving a single logical event order.
//!
//! An ephemeral node lives exactly as long as its session: graceful close
//! deletes it immediately, a missed-heartbeat expiry deletes it after the
//! session timeout. Watches fire on child creation and deletion.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoordError {
    #[error("coordinator unavailable")]
    Unavailable,
    #[error("node {0} already exists")]
    NodeExists(String),
    #[error("no node {0}")]
    NoNode(String),
    #[error("no session {0}")]
    NoSession(u64),
    #[error("bad path {0}")]
    BadPath(String),
}

pub type Result<T> = std::result::Result<T, CoordError>;

/// Millisecond time source; swapped for a manual clock in tests so session
/// expiry is deterministic.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> Arc<SystemClock> {
        Arc::new(SystemClock {
            start: Instant::now(),
        })
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }
}

pub struct TestClock {
    ms: Mutex<u64>,
}

impl TestClock {
    pub fn new() -> Arc<TestClock> {
        Arc::new(TestClock { ms: Mutex::new(0) })
    }

    pub fn advance(&self, ms: u64) {
        *self.ms.lock().unwrap() += ms;
    }
}

impl Clock for TestClock {
    fn now_ms(&self) -> u64 {
        *self.ms.lock().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WatchEvent {
    Created(String),
    Deleted(String),
}

impl WatchEvent {
    pub fn path(&self) -> &str {
        match self {
            WatchEvent::Created(p) | WatchEvent::Deleted(p) => p,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    data: Vec<u8>,
    ephemeral_owner: Option<u64>,
    /// Next suffix handed out to sequential children of this node.
    seq_counter: u64,
}

struct Session {
    last_heartbeat_ms: u64,
}

struct State {
    nodes: BTreeMap<String, Node>,
    sessions: HashMap<u64, Session>,
    next_session: u64,
    /// Child watches: parent path -> senders.
    watches: HashMap<String, Vec<Sender<WatchEvent>>>,
}

pub struct CoordConfig {
    pub session_timeout_ms: u64,
    pub heartbeat_ms: u64,
}

impl Default for CoordConfig {
    fn default() -> Self {
        CoordConfig {
            session_timeout_ms: 500,
            heartbeat_ms: 100,
        }
    }
}

pub struct Coordinator {
    state: Mutex<State>,
    clock: Arc<dyn Clock>,
    pub cfg: CoordConfig,
    available: AtomicBool,
}

fn parent_of(path: &str) -> Option<String> {
    let idx = path.rfind('/')?;
    if idx == 0 {
        Some("/".to_string())
    } else {
        Some(path[..idx].to_string())
    }
}

fn valid_path(path: &str) -> bool {
    path.starts_with('/') && (path == "/" || !path.ends_with('/')) && !path.contains("//")
}

impl Coordinator {
    pub fn new(clock: Arc<dyn Clock>, cfg: CoordConfig) -> Arc<Coordinator> {
        let mut nodes = BTreeMap::new();
        nodes.insert(
            "/".to_string(),
            Node {
                data: Vec::new(),
                ephemeral_owner: None,
                seq_counter: 0,
            },
        );
        Arc::new(Coordinator {
            state: Mutex::new(State {
                nodes,
                sessions: HashMap::new(),
                next_session: 1,
                watches: HashMap::new(),
            }),
            clock,
            cfg,
            available: AtomicBool::new(true),
        })
    }

    /// Fault injection: unavailable coordinators fail every operation.
    pub fn set_available(&self, up: bool) {
        self.available.store(up, Ordering::Release);
    }

    fn check(&self) -> Result<()> {
        if self.available.load(Ordering::Acquire) {
            Ok(())
        } else {
            Err(CoordError::Unavailable)
        }
    }

    /// Delete ephemeral nodes of sessions that stopped heartbeating.
    /// Called from every public operation, so expiry needs no background
    /// thread; tests drive it via the clock.
    fn expire_locked(&self, s: &mut State) {
        let now = self.clock.now_ms();
        let dead: Vec<u64> = s
            .sessions
            .iter()
            .filter(|(_, sess)| now.saturating_sub(sess.last_heartbeat_ms) > self.cfg.session_timeout_ms)
            .map(|(&id, _)| id)
            .collect();
        for id in dead {
            s.sessions.remove(&id);
            Self::drop_session_nodes(s, id);
        }
    }

    fn drop_session_nodes(s: &mut State, session: u64) {
        let owned: Vec<String> = s
            .nodes
            .iter()
            .filter(|(_, n)| n.ephemeral_owner == Some(session))
            .map(|(p, _)| p.clone())
            .collect();
        for path in owned {
            s.nodes.remove(&path);
            Self::notify(s, WatchEvent::Deleted(path));
        }
    }

    fn notify(s: &mut State, ev: WatchEvent) {
        let Some(parent) = parent_of(ev.path()) else {
            return;
        };
        if let Some(senders) = s.watches.get_mut(&parent) {
            senders.retain(|tx| tx.send(ev.clone()).is_ok());
        }
    }

    pub fn create_session(&self) -> Result<u64> {
        self.check()?;
        let mut s = self.state.lock().unwrap();
        self.expire_locked(&mut s);
        let id = s.next_session;
        s.next_session += 1;
        s.sessions.insert(
            id,
            Session {
                last_heartbeat_ms: self.clock.now_ms(),
            },
        );
        Ok(id)
    }

    pub fn heartbeat(&self, session: u64) -> Result<()> {
        self.check()?;
        let mut s = self.state.lock().unwrap();
        self.expire_locked(&mut s);
        let sess = s.sessions.get_mut(&session).ok_or(CoordError::NoSession(session))?;
        sess.last_heartbeat_ms = self.clock.now_ms();
        Ok(())
    }

    /// Graceful close: ephemeral nodes disappear immediately, watchers fire
    /// without waiting for the timeout.
    pub fn close_session(&self, session: u64) -> Result<()> {
        self.check()?;
        let mut s = self.state.lock().unwrap();
        s.sessions.remove(&session).ok_or(CoordError::NoSession(session))?;
        Self::drop_session_nodes(&mut s, session);
        Ok(())
    }

    /// Create a node. Missing parents are created as empty persistent
    /// nodes. Sequential nodes get a 10-digit suffix from the parent's
    /// counter; the final path is returned.
    pub fn create(
        &self,
        path: &str,
        data: &[u8],
        ephemeral: Option<u64>,
        sequential: bool,
    ) -> Result<String> {
        self.check()?;
        if !valid_path(path) || path == "/" {
            return Err(CoordError::BadPath(path.to_string()));
        }
        let mut s = self.state.lock().unwrap();
        self.expire_locked(&mut s);
        if let Some(owner) = ephemeral {
            if !s.sessions.contains_key(&owner) {
                return Err(CoordError::NoSession(owner));
            }
        }
        let parent = parent_of(path).ok_or_else(|| CoordError::BadPath(path.to_string()))?;
        let mut ancestors = Vec::new();
        let mut p = parent.clone();
        while !s.nodes.contains_key(&p) {
            ancestors.push(p.clone());
            p = parent_of(&p).ok_or_else(|| CoordError::BadPath(path.to_string()))?;
        }
        for a in ancestors.into_iter().rev() {
            s.nodes.insert(
                a,
                Node {
                    data: Vec::new(),
                    ephemeral_owner: None,
                    seq_counter: 0,
                },
            );
        }
        let final_path = if sequential {
            let n = {
                let pn = s.nodes.get_mut(&parent).unwrap();
                let n = pn.seq_counter;
                pn.seq_counter += 1;
                n
            };
            format!("{path}{n:010}")
        } else {
            path.to_string()
        };
        if s.nodes.contains_key(&final_path) {
            return Err(CoordError::NodeExists(final_path));
        }
        s.nodes.insert(
            final_path.clone(),
            Node {
                data: data.to_vec(),
                ephemeral_owner: ephemeral,
                seq_counter: 0,
            },
        );
        Self::notify(&mut s, WatchEvent::Created(final_path.clone()));
        Ok(final_path)
    }

    pub fn delete(&self, path: &str) -> Result<()> {
        self.check()?;
        let mut s = self.state.lock().unwrap();
        self.expire_locked(&mut s);
        s.nodes
            .remove(path)
            .ok_or_else(|| CoordError::NoNode(path.to_string()))?;
        Self::notify(&mut s, WatchEvent::Deleted(path.to_string()));
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<Option<Vec<u8>>> {
        self.check()?;
        let mut s = self.state.lock().unwrap();
        self.expire_locked(&mut s);
        Ok(s.nodes.get(path).map(|n| n.data.clone()))
    }

    /// Set data, creating the node (persistent) if absent.
    pub fn set(&self, path: &str, data: &[u8]) -> Result<()> {
        self.check()?;
        if !valid_path(path) || path == "/" {
            return Err(CoordError::BadPath(path.to_string()));
        }
        {
            let mut s = self.state.lock().unwrap();
            self.expire_locked(&mut s);
            if let Some(n) = s.nodes.get_mut(path) {
                n.data = data.to_vec();
                return Ok(());
            }
        }
        self.create(path, data, None, false).map(|_| ())
    }

    /// Direct children of `path`, sorted.
    pub fn children(&self, path: &str) -> Result<Vec<String>> {
        self.check()?;
        let mut s = self.state.lock().unwrap();
        self.expire_locked(&mut s);
        let prefix = if path == "/" {
            "/".to_string()
        } else {
            format!("{path}/")
        };
        Ok(s.nodes
            .range(prefix.clone()..)
            .take_while(|(p, _)| p.starts_with(&prefix))
            .filter(|(p, _)| !p[prefix.len()..].contains('/'))
            .map(|(p, _)| p.clone())
            .collect())
    }

    /// Watch creations and deletions of `parent`'s direct children.
    pub fn watch_children(&self, parent: &str) -> Receiver<WatchEvent> {
        let (tx, rx) = channel();
        self.state
            .lock()
            .unwrap()
            .watches
            .entry(parent.to_string())
            .or_default()
            .push(tx);
        rx
    }

    /// Drive session expiry explicitly (master loop, tests).
    pub fn expire_sessions(&self) -> Result<()> {
        self.check()?;
        let mut s = self.state.lock().unwrap();
        self.expire_locked(&mut s);
        Ok(())
    }

    pub fn session_count(&self) -> usize {
        self.state.lock().unwrap().sessions.len()
    }

    /// Debugging snapshot of the node tree as JSON.
    pub fn snapshot_json(&self) -> String {
        let s = self.state.lock().unwrap();
        let map: serde_json::Map<String, serde_json::Value> = s
            .nodes
            .iter()
            .map(|(p, n)| {
                (
                    p.clone(),
                    serde_json::json!({
                        "data_len": n.data.len(),
                        "data_utf8": String::from_utf8_lossy(&n.data),
                        "ephemeral_owner": n.ephemeral_owner,
                    }),
                )
            })
            .collect();
        serde_json::Value::Object(map).to_string()
    }
}

/// Coordination operations as seen by masters and servers; implemented
/// by the embedded `Coordinator` and by the network client, so a process
/// can use either interchangeably.
pub trait CoordService: Send + Sync {
    fn create_session(&self) -> Result<u64>;
    fn heartbeat(&self, session: u64) -> Result<()>;
    fn close_session(&self, session: u64) -> Result<()>;
    fn create(
        &self,
        path: &str,
        data: &[u8],
        ephemeral: Option<u64>,
        sequential: bool,
    ) -> Result<String>;
    fn delete(&self, path: &str) -> Result<()>;
    fn get(&self, path: &str) -> Result<Option<Vec<u8>>>;
    fn set(&self, path: &str, data: &[u8]) -> Result<()>;
    fn children(&self, path: &str) -> Result<Vec<String>>;
    fn expire_sessions(&self) -> Result<()>;
}

impl CoordService for Coordinator {
    fn create_session(&self) -> Result<u64> {
        Coordinator::create_session(self)
    }
    fn heartbeat(&self, session: u64) -> Result<()> {
        Coordinator::heartbeat(self, session)
    }
    fn close_session(&self, session: u64) -> Result<()> {
        Coordinator::close_session(self, session)
    }
    fn create(
        &self,
        path: &str,
        data: &[u8],
        ephemeral: Option<u64>,
        sequential: bool,
    ) -> Result<String> {
        Coordinator::create(self, path, data, ephemeral, sequential)
    }
    fn delete(&self, path: &str) -> Result<()> {
        Coordinator::delete(self, path)
    }
    fn get(&self, path: &str) -> Result<Option<Vec<u8>>> {
        Coordinator::get(self, path)
    }
    fn set(&self, path: &str, data: &[u8]) -> Result<()> {
        Coordinator::set(self, path, data)
    }
    fn children(&self, path: &str) -> Result<Vec<String>> {
        Coordinator::children(self, path)
    }
    fn expire_sessions(&self) -> Result<()> {
        Coordinator::expire_sessions(self)
    }
}

/// Election: candidates race to create sequential ephemeral nodes under
/// `/election`; the lowest sequence wins the epoch. The winner records its
/// claim in `/master` (ephemeral, so a master crash reopens the election).
/// Returns `Some(state)` for the winner, `None` for followers.
pub fn elect_master(
    coord: &dyn CoordService,
    session: u64,
    candidate_id: u16,
) -> Result<Option<super::MasterState>> {
    coord.create(
        &format!("/election/c{candidate_id}-"),
        &candidate_id.to_le_bytes(),
        Some(session),
        true,
    )?;
    let mut children = coord.children("/election")?;
    children.sort_by_key(|p| p.rsplit('-').next().unwrap().to_string());
    // The earliest surviving candidate node wins; a candidate may hold
    // nodes from earlier rounds, so compare ids, not paths.
    let winner_id = children
        .first()
        .and_then(|p| coord.get(p).transpose())
        .transpose()?
        .filter(|d| d.len() == 2)
        .map(|d| u16::from_le_bytes(d.try_into().unwrap()));
    if winner_id != Some(candidate_id) {
        return Ok(None);
    }
    // Previous master's ephemeral node must be gone before a new claim.
    if coord.get("/master")?.is_some() {
        return Ok(None);
    }
    let epoch = match coord.get("/epoch")? {
        Some(d) if d.len() == 8 => u64::from_le_bytes(d.try_into().unwrap()),
        _ => 0,
    } + 1;
    coord.set("/epoch", &epoch.to_le_bytes())?;
    let state = super::MasterState {
        master_id: candidate_id,
        epoch,
    };
    coord.create("/master", &state.encode(), Some(session), false)?;
    Ok(Some(state))
}
