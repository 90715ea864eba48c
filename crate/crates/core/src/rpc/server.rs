//! Server side: a spinning thread polls every connection's request buffer
//! at its current rendezvous point, turns complete messages into tasks and
//! hands them to a worker pool. Workers execute the request handler and
//! remote-write the reply at the client-chosen offset, so no two workers
//! ever coordinate on reply space.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use crate::transport::{BufferHandle, BufferId, Connection};

use super::{
    compose_message, max_reply_payload, message_footprint, op, Assignment, MessageHeader, Result,
    RpcError, SchedulerPolicy, WorkerView, HEADER_LEN, MAGIC, MESSAGE_SEGMENT,
    RECEIVE_FIELD_OFFSET, FLAG_CONTINUATION, FLAG_ERROR, TAG_REPLY_BUFFER, TAG_REQUEST_BUFFER,
};

/// Executes decoded requests. Implementations must be thread-safe; distinct
/// requests may run on different workers concurrently.
pub trait Handler: Send + Sync {
    fn handle(&self, ctx: &ConnCtx, opcode: u8, payload: &[u8]) -> std::result::Result<Vec<u8>, String>;
}

/// Per-connection context handed to the handler (e.g. to register
/// replication buffers on the same connection).
pub struct ConnCtx {
    pub conn: Arc<dyn Connection>,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub header: MessageHeader,
    pub payload: Vec<u8>,
}

/// Rendezvous-tracking poller over one connection's request buffer.
pub struct ConnPoller {
    req_buf: Arc<BufferHandle>,
    rendezvous: u64,
}

impl ConnPoller {
    pub fn new(req_buf: Arc<BufferHandle>) -> ConnPoller {
        assert_eq!(req_buf.len() % MESSAGE_SEGMENT, 0);
        ConnPoller {
            req_buf,
            rendezvous: 0,
        }
    }

    pub fn rendezvous(&self) -> u64 {
        self.rendezvous
    }

    pub fn buffer(&self) -> &Arc<BufferHandle> {
        &self.req_buf
    }

    /// Detect at most one complete message. Returns `None` when no magic is
    /// present at the rendezvous point or the tail has not arrived yet.
    /// Reset messages are consumed internally and also yield `None`.
    pub fn poll_once(&mut self) -> Result<Option<Task>> {
        let r = self.rendezvous as usize;
        if self.req_buf.read_u8(r + RECEIVE_FIELD_OFFSET) != MAGIC {
            return Ok(None);
        }
        let header = MessageHeader::decode(&self.req_buf.read(r, HEADER_LEN))?;
        let footprint = message_footprint(header.payload_len as usize);
        if r + footprint > self.req_buf.len() {
            return Err(RpcError::Protocol(format!(
                "message at {} overruns the buffer",
                r
            )));
        }
        // The tail marker confirms the whole message has landed; header
        // alone must never produce a task.
        if self.req_buf.read_u8(r + footprint - 1) != MAGIC {
            return Ok(None);
        }
        let payload = self.req_buf.read(r + HEADER_LEN, header.payload_len as usize);
        // Zero every possible rendezvous point in the consumed footprint,
        // plus the tail, so stale magic can never be re-detected.
        for seg in (0..footprint).step_by(MESSAGE_SEGMENT) {
            self.req_buf.write_local(r + seg + RECEIVE_FIELD_OFFSET, &[0]);
        }
        self.req_buf.write_local(r + footprint - 1, &[0]);
        self.rendezvous += footprint as u64;
        if self.rendezvous as usize == self.req_buf.len() {
            self.rendezvous = 0;
        }
        if header.op == op::RESET_RENDEZVOUS {
            self.rendezvous = 0;
            return Ok(None);
        }
        Ok(Some(Task { header, payload }))
    }
}

#[derive(Debug, Clone)]
pub struct RpcConfig {
    pub workers: usize,
    pub task_threshold: usize,
    pub idle_sleep: Duration,
    pub request_buffer: usize,
    pub spinners: usize,
}

impl Default for RpcConfig {
    fn default() -> Self {
        RpcConfig {
            workers: 2,
            task_threshold: 4,
            idle_sleep: Duration::from_micros(100),
            request_buffer: 256 * 1024,
            spinners: 1,
        }
    }
}

type Job = Box<dyn FnOnce() + Send>;

struct WorkerShared {
    queue: Mutex<VecDeque<Job>>,
    cv: Condvar,
    sleeping: AtomicBool,
    shutdown: AtomicBool,
    idle_sleep: Duration,
}

fn worker_loop(shared: Arc<WorkerShared>) {
    let mut idle_since = Instant::now();
    loop {
        if shared.shutdown.load(Ordering::Acquire) {
            return;
        }
        let job = shared.queue.lock().unwrap().pop_front();
        match job {
            Some(job) => {
                job();
                idle_since = Instant::now();
            }
            None => {
                if idle_since.elapsed() >= shared.idle_sleep {
                    let mut q = shared.queue.lock().unwrap();
                    while q.is_empty() && !shared.shutdown.load(Ordering::Acquire) {
                        shared.sleeping.store(true, Ordering::Release);
                        q = shared.cv.wait(q).unwrap();
                    }
                    shared.sleeping.store(false, Ordering::Release);
                    idle_since = Instant::now();
                } else {
                    std::hint::spin_loop();
                    std::thread::yield_now();
                }
            }
        }
    }
}

pub struct WorkerPool {
    workers: Vec<Arc<WorkerShared>>,
    handles: Mutex<Vec<std::thread::JoinHandle<()>>>,
    policy: SchedulerPolicy,
    current: AtomicUsize,
    wakeups: AtomicU64,
}

impl WorkerPool {
    pub fn start(count: usize, policy: SchedulerPolicy, idle_sleep: Duration) -> WorkerPool {
        let mut workers = Vec::new();
        let mut handles = Vec::new();
        for i in 0..count {
            let shared = Arc::new(WorkerShared {
                queue: Mutex::new(VecDeque::new()),
                cv: Condvar::new(),
                sleeping: AtomicBool::new(false),
                shutdown: AtomicBool::new(false),
                idle_sleep,
            });
            let s = shared.clone();
            handles.push(
                std::thread::Builder::new()
                    .name(format!("rpc-worker-{}", i))
                    .spawn(move || worker_loop(s))
                    .expect("spawn worker"),
            );
            workers.push(shared);
        }
        WorkerPool {
            workers,
            handles: Mutex::new(handles),
            policy,
            current: AtomicUsize::new(0),
            wakeups: AtomicU64::new(0),
        }
    }

    pub fn wakeups(&self) -> u64 {
        self.wakeups.load(Ordering::Relaxed)
    }

    pub fn schedule(&self, job: Job) {
        let views: Vec<WorkerView> = self
            .workers
            .iter()
            .map(|w| WorkerView {
                queue_len: w.queue.lock().unwrap().len(),
                sleeping: w.sleeping.load(Ordering::Acquire),
            })
            .collect();
        let assignment = self
            .policy
            .decide(self.current.load(Ordering::Relaxed), &views);
        let idx = assignment.worker();
        let target = &self.workers[idx];
        let mut q = target.queue.lock().unwrap();
        q.push_back(job);
        // Notify whenever the worker is (or raced into) sleeping; the
        // policy's Wake/Run distinction is about choice, liveness needs the
        // flag check under the queue lock.
        if target.sleeping.load(Ordering::Acquire) {
            self.wakeups.fetch_add(1, Ordering::Relaxed);
            target.cv.notify_one();
        } else if matches!(assignment, Assignment::Wake(_)) {
            self.wakeups.fetch_add(1, Ordering::Relaxed);
            target.cv.notify_one();
        }
        drop(q);
        self.current.store(idx, Ordering::Relaxed);
    }

    pub fn shutdown(&self) {
        for w in &self.workers {
            w.shutdown.store(true, Ordering::Release);
            w.cv.notify_all();
        }
        for h in self.handles.lock().unwrap().drain(..) {
            let _ = h.join();
        }
    }
}

struct ConnShared {
    conn: Arc<dyn Connection>,
    reply_buf: OnceLock<BufferId>,
    /// Remainders of oversized replies, keyed by originating request id.
    stash: Mutex<HashMap<u64, Vec<u8>>>,
}

impl ConnShared {
    fn reply_buffer(&self) -> Result<BufferId> {
        if let Some(id) = self.reply_buf.get() {
            return Ok(*id);
        }
        let (id, _) = self
            .conn
            .peer_buffer_by_tag(TAG_REPLY_BUFFER, Duration::from_secs(5))?;
        let _ = self.reply_buf.set(id);
        Ok(id)
    }
}

struct ServerInner {
    handler: Arc<dyn Handler>,
    cfg: RpcConfig,
    pool: WorkerPool,
    pending: Mutex<Vec<(ConnPoller, Arc<ConnShared>)>>,
    next_spinner: AtomicUsize,
    shutdown: AtomicBool,
}

pub struct RpcServer {
    inner: Arc<ServerInner>,
    spinners: Mutex<Vec<std::thread::JoinHandle<()>>>,
}

impl RpcServer {
    pub fn start(handler: Arc<dyn Handler>, cfg: RpcConfig) -> RpcServer {
        assert!(cfg.workers >= 1 && cfg.spinners >= 1);
        assert_eq!(cfg.request_buffer % MESSAGE_SEGMENT, 0);
        let pool = WorkerPool::start(
            cfg.workers,
            SchedulerPolicy {
                task_threshold: cfg.task_threshold,
            },
            cfg.idle_sleep,
        );
        let inner = Arc::new(ServerInner {
            handler,
            cfg: cfg.clone(),
            pool,
            pending: Mutex::new(Vec::new()),
            next_spinner: AtomicUsize::new(0),
            shutdown: AtomicBool::new(false),
        });
        let mut spinners = Vec::new();
        for i in 0..cfg.spinners {
            let inner = inner.clone();
            spinners.push(
                std::thread::Builder::new()
                    .name(format!("rpc-spinner-{}", i))
                    .spawn(move || spinner_loop(inner, i))
                    .expect("spawn spinner"),
            );
        }
        RpcServer {
            inner,
            spinners: Mutex::new(spinners),
        }
    }

    /// Attach an accepted connection: registers the server-side request
    /// buffer and starts polling it.
    pub fn add_connection(&self, conn: Arc<dyn Connection>) -> Result<()> {
        let req_buf = conn.register_buffer(self.inner.cfg.request_buffer, Some(TAG_REQUEST_BUFFER))?;
        let shared = Arc::new(ConnShared {
            conn,
            reply_buf: OnceLock::new(),
            stash: Mutex::new(HashMap::new()),
        });
        self.inner
            .pending
            .lock()
            .unwrap()
            .push((ConnPoller::new(req_buf), shared));
        Ok(())
    }

    pub fn scheduler_wakeups(&self) -> u64 {
        self.inner.pool.wakeups()
    }

    pub fn shutdown(&self) {
        self.inner.shutdown.store(true, Ordering::Release);
        for h in self.spinners.lock().unwrap().drain(..) {
            let _ = h.join();
        }
        self.inner.pool.shutdown();
    }
}

fn spinner_loop(inner: Arc<ServerInner>, index: usize) {
    let mut conns: Vec<(ConnPoller, Arc<ConnShared>)> = Vec::new();
    loop {
        if inner.shutdown.load(Ordering::Acquire) {
            return;
        }
        {
            let mut pending = inner.pending.lock().unwrap();
            let mut i = 0;
            while i < pending.len() {
                // Connections are sharded across spinners round-robin.
                if inner.next_spinner.load(Ordering::Relaxed) % inner.cfg.spinners == index {
                    inner.next_spinner.fetch_add(1, Ordering::Relaxed);
                    conns.push(pending.remove(i));
                } else if inner.cfg.spinners == 1 {
                    conns.push(pending.remove(i));
                } else {
                    i += 1;
                }
            }
        }
        let mut any = false;
        let mut drop_list = Vec::new();
        for (ci, (poller, shared)) in conns.iter_mut().enumerate() {
            if shared.conn.is_closed() {
                drop_list.push(ci);
                continue;
            }
            match poller.poll_once() {
                Ok(Some(task)) => {
                    any = true;
                    let inner2 = inner.clone();
                    let shared2 = shared.clone();
                    inner.pool.schedule(Box::new(move || run_task(inner2, shared2, task)));
                }
                Ok(None) => {}
                Err(e) => {
                    log::warn!("poll error, dropping connection: {}", e);
                    drop_list.push(ci);
                }
            }
        }
        for ci in drop_list.into_iter().rev() {
            conns.remove(ci);
        }
        if !any {
            std::hint::spin_loop();
            std::thread::yield_now();
        }
    }
}

fn run_task(inner: Arc<ServerInner>, shared: Arc<ConnShared>, task: Task) {
    let reply_len = task.header.reply_len as usize;
    let outcome = if task.header.op == op::FETCH_CONTINUATION {
        continuation_chunk(&shared, &task, reply_len)
    } else {
        let ctx = ConnCtx {
            conn: shared.conn.clone(),
        };
        match inner.handler.handle(&ctx, task.header.op, &task.payload) {
            Ok(payload) => Ok(prepare_reply(&shared, &task, payload, reply_len)),
            Err(msg) => Err(msg),
        }
    };
    let (flags, payload) = match outcome {
        Ok(ok) => ok,
        Err(msg) => {
            let mut m = msg.into_bytes();
            m.truncate(max_reply_payload(reply_len));
            (FLAG_ERROR, m)
        }
    };
    if let Err(e) = send_reply(&shared, &task.header, flags, &payload) {
        log::warn!("reply failed: {}", e);
    }
}

/// Split an oversized reply: ship what fits now, stash the remainder under
/// the request id for FETCH_CONTINUATION.
fn prepare_reply(shared: &ConnShared, task: &Task, full: Vec<u8>, reply_len: usize) -> (u8, Vec<u8>) {
    let max = max_reply_payload(reply_len);
    if full.len() <= max {
        return (0, full);
    }
    let total = full.len() as u32;
    let first_chunk = max - 4;
    let mut payload = Vec::with_capacity(max);
    payload.extend_from_slice(&total.to_le_bytes());
    payload.extend_from_slice(&full[..first_chunk]);
    shared
        .stash
        .lock()
        .unwrap()
        .insert(task.header.req_id, full[first_chunk..].to_vec());
    (FLAG_CONTINUATION, payload)
}

fn continuation_chunk(
    shared: &ConnShared,
    task: &Task,
    reply_len: usize,
) -> std::result::Result<(u8, Vec<u8>), String> {
    if task.payload.len() != 8 {
        return Err("malformed continuation fetch".into());
    }
    let orig = u64::from_le_bytes(task.payload[..8].try_into().unwrap());
    let max = max_reply_payload(reply_len);
    let mut stash = shared.stash.lock().unwrap();
    let rest = stash.remove(&orig).ok_or("no pending continuation")?;
    if rest.len() > max {
        stash.insert(orig, rest[max..].to_vec());
        Ok((FLAG_CONTINUATION, rest[..max].to_vec()))
    } else {
        Ok((0, rest))
    }
}

fn send_reply(shared: &ConnShared, req: &MessageHeader, flags: u8, payload: &[u8]) -> Result<()> {
    let reply_buf = shared.reply_buffer()?;
    let header = MessageHeader {
        payload_len: payload.len() as u32,
        op: op::REPLY,
        flags,
        reply_offset: 0,
        reply_len: 0,
        req_id: req.req_id,
    };
    let msg = compose_message(&header, payload);
    debug_assert!(msg.len() <= req.reply_len as usize);
    shared.conn.remote_write(reply_buf, req.reply_offset, &msg)?;
    Ok(())
}
