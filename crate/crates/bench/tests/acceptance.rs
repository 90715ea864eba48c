//! Acceptance suite: one test per release criterion, each printing a
//! single PASS line with the measured numbers. Comparative criteria use
//! fixed seeds so runs are reproducible; tolerances are pinned here and
//! nowhere else.

use std::collections::HashMap;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use rackkv::cluster::sim::SimCluster;
use rackkv::device::{Device, DeviceOffset};
use rackkv::engine::log::parse_record_sequence;
use rackkv::engine::record::ValueLogPointer;
use rackkv::engine::{Engine, EngineConfig};
use rackkv::index_wire::{LogSegmentMap, WireError};
use rackkv::replication::{BackupRegion, ReplicationMode};
use rackkv::rpc::server::{ConnPoller, WorkerPool};
use rackkv::rpc::{
    compose_message, message_footprint, op, Assignment, MessageHeader, SchedulerPolicy,
    WorkerView, MESSAGE_SEGMENT, TAG_REQUEST_BUFFER,
};
use rackkv::transport::inproc::InProcNetwork;
use rackkv::transport::NetworkStats;

use rackkv_bench::harness::{run_experiment, run_experiment_keep, ExperimentConfig, FaultSpec};
use rackkv_bench::metrics::modeled_space_overhead;
use rackkv_bench::workload::{key_bytes, value_bytes, Op, Phase, SizeMix};

/// The criteria compare throughput and CPU-derived metrics, so the suite
/// runs one criterion at a time even under the parallel test harness.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn load_cfg(mode: ReplicationMode, ops: u64, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        phase: Phase::LoadA,
        mix: SizeMix::SD,
        mode,
        ops,
        seed,
        ..Default::default()
    }
}

/// Latest state of every key visible in a backup's local value log:
/// applied (persisted) segments in arrival order, then the mirrored
/// unsealed tail, newest record winning.
fn backup_log_view(r: &mut BackupRegion) -> HashMap<Vec<u8>, Option<Vec<u8>>> {
    let mut view = HashMap::new();
    for i in 0..r.engine.log().sealed_count() as usize {
        let bytes = r.engine.log().segment_bytes(i).unwrap();
        for (_, rec) in parse_record_sequence(&bytes).0 {
            view.insert(rec.key, (!rec.tombstone).then_some(rec.value));
        }
    }
    let tail = r.repl_buf.read(0, r.repl_buf.len());
    for (_, rec) in parse_record_sequence(&tail).0 {
        view.insert(rec.key, (!rec.tombstone).then_some(rec.value));
    }
    view
}

#[test]
fn criterion_1_backup_rewrite_equivalence() {
    let _serial = serial();
    let start = Instant::now();
    let out = run_experiment_keep(&load_cfg(ReplicationMode::SendIndex, 100_000, 42)).unwrap();
    assert_eq!(out.failed_ops, 0);
    assert_eq!(out.acked.len(), 100_000);

    // Latest-state log views, built once per (server, region).
    let mut views: HashMap<(u16, u32), HashMap<Vec<u8>, Option<Vec<u8>>>> = HashMap::new();
    let mut matched = 0u64;
    let mut via_levels = 0u64;
    for op in &out.acked {
        let (id, value_len) = match *op {
            Op::Insert { id, value_len } | Op::Update { id, value_len } => (id, value_len),
            Op::Read { .. } => unreachable!("LoadA is insert-only"),
        };
        let key = key_bytes(id);
        let want = value_bytes(id, value_len);
        let entry = out.sim.master.map.lookup(&key).expect("key owned by a region").clone();
        for backup in &entry.backups {
            let node = &out.sim.server(*backup).node;
            // The rewritten levels answer directly when they cover the key;
            // younger records still sit in the backup's local log.
            let from_levels = node
                .backup_regions()
                .with_region(entry.region_id, |r| r.engine.get(&key).unwrap())
                .expect("backup region open");
            let got = match from_levels {
                Some(v) => {
                    via_levels += 1;
                    Some(v)
                }
                None => {
                    let view = views.entry((*backup, entry.region_id)).or_insert_with(|| {
                        node.backup_regions()
                            .with_region(entry.region_id, backup_log_view)
                            .unwrap()
                    });
                    view.get(&key).cloned().flatten()
                }
            };
            assert_eq!(got.as_deref(), Some(want.as_slice()), "key id {id} on backup {backup}");
            matched += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "runtime {secs:.1}s exceeds 2 min budget");
    println!(
        "ACCEPTANCE 1: PASS - {matched} backup lookups matched ({via_levels} answered by rewritten levels) in {secs:.1}s"
    );
}

fn backup_l0_insertions(sim: &SimCluster) -> u64 {
    sim.servers
        .iter()
        .map(|s| {
            let br = s.node.backup_regions();
            br.region_ids()
                .into_iter()
                .filter_map(|r| br.with_region(r, |b| b.engine.counters().l0_insertions))
                .sum::<u64>()
        })
        .sum()
}

#[test]
fn criterion_2_backups_never_compact_in_send_mode() {
    let _serial = serial();
    let out = run_experiment_keep(&load_cfg(ReplicationMode::SendIndex, 100_000, 42)).unwrap();
    let send_compactions = out.sim.total_backup_compactions();
    let send_l0 = backup_l0_insertions(&out.sim) + out.sim.total_backup_l0_entries();
    assert_eq!(send_compactions, 0, "send-mode backups must not compact");
    assert_eq!(send_l0, 0, "send-mode backups must not allocate L0 entries");

    let out = run_experiment_keep(&load_cfg(ReplicationMode::BuildIndex, 50_000, 42)).unwrap();
    let build_compactions = out.sim.total_backup_compactions();
    let build_l0 = backup_l0_insertions(&out.sim);
    assert!(build_compactions > 0, "build-mode backups compact locally");
    assert!(build_l0 > 0, "build-mode backups ingest through L0");
    println!(
        "ACCEPTANCE 2: PASS - send mode: 0 backup compactions, 0 L0 entries; build mode: {build_compactions} compactions, {build_l0} L0 insertions"
    );
}

struct AmpRuns {
    io_none: f64,
    io_send: f64,
    io_build: f64,
    net_send: f64,
    net_build: f64,
    secs: f64,
}

/// Criteria 3 and 4 are judged on the same three runs.
fn amp_runs() -> &'static AmpRuns {
    static RUNS: OnceLock<AmpRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let none = run_experiment(&load_cfg(ReplicationMode::None, 100_000, 42)).unwrap();
        let send = run_experiment(&load_cfg(ReplicationMode::SendIndex, 100_000, 42)).unwrap();
        let build = run_experiment(&load_cfg(ReplicationMode::BuildIndex, 100_000, 42)).unwrap();
        AmpRuns {
            io_none: none.io_amplification,
            io_send: send.io_amplification,
            io_build: build.io_amplification,
            net_send: send.network_amplification,
            net_build: build.network_amplification,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_3_io_amplification_ordering() {
    let _serial = serial();
    let r = amp_runs();
    assert!(
        r.io_none < r.io_send && r.io_send < r.io_build,
        "expected io_amp ordering none < send < build, got {:.3} / {:.3} / {:.3}",
        r.io_none,
        r.io_send,
        r.io_build
    );
    let ratio = r.io_build / r.io_send;
    assert!(ratio >= 1.3, "build/send io ratio {ratio:.3} below 1.3");
    assert!(r.secs < 300.0, "runtime {:.1}s exceeds 5 min budget", r.secs);
    println!(
        "ACCEPTANCE 3: PASS - io_amp none {:.3} < send {:.3} < build {:.3}; build/send {ratio:.3} >= 1.3 ({:.1}s)",
        r.io_none, r.io_send, r.io_build, r.secs
    );
}

#[test]
fn criterion_4_network_amplification_bound() {
    let _serial = serial();
    let r = amp_runs();
    let ratio = r.net_send / r.net_build;
    assert!(
        ratio <= 1.5,
        "send/build network amplification {ratio:.3} exceeds 1.5 (send {:.3}, build {:.3})",
        r.net_send,
        r.net_build
    );
    println!(
        "ACCEPTANCE 4: PASS - net_amp send {:.3} / build {:.3} = {ratio:.3} <= 1.5",
        r.net_send, r.net_build
    );
}

#[test]
fn criterion_5_growth_factor_monotonicity() {
    let _serial = serial();
    let start = Instant::now();
    // Deeper trees with less per-segment padding noise: small L0 and
    // segments make the index-shipping advantage visible at every factor.
    let pinned = |mode, f| ExperimentConfig {
        phase: Phase::LoadA,
        mix: SizeMix::SD,
        mode,
        growth_factor: f,
        ops: 100_000,
        seed: 42,
        regions: 4,
        l0_capacity_keys: 256,
        segment_size: 16 * 1024,
        ..Default::default()
    };
    let mut overheads = Vec::new();
    let mut diffs = Vec::new();
    for f in [4u32, 8, 12, 16] {
        let send = run_experiment(&pinned(ReplicationMode::SendIndex, f)).unwrap();
        let build = run_experiment(&pinned(ReplicationMode::BuildIndex, f)).unwrap();
        overheads.push(modeled_space_overhead(f, send.dataset_bytes, 256 * 1024 * 1024));
        diffs.push(build.io_amplification - send.io_amplification);
    }
    for w in overheads.windows(2) {
        assert!(w[1] < w[0], "space overhead must strictly decrease: {overheads:?}");
    }
    for w in diffs.windows(2) {
        assert!(w[1] >= w[0], "io gap must not decrease with growth factor: {diffs:?}");
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 600.0, "runtime {secs:.1}s exceeds 10 min budget");
    println!(
        "ACCEPTANCE 5: PASS - overhead {:?} strictly decreasing, io gap {:?} non-decreasing over f=4,8,12,16 ({secs:.1}s)",
        overheads.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
        diffs.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
    );
}

#[test]
fn criterion_6_failover_loses_no_acknowledged_write() {
    let _serial = serial();
    let mut total_acked = 0u64;
    for trial in 0..20u64 {
        let cfg = ExperimentConfig {
            fault: Some(FaultSpec { at_op: 50_000, server: None }),
            ..load_cfg(ReplicationMode::SendIndex, 100_000, 1000 + trial)
        };
        let out = run_experiment_keep(&cfg).unwrap();
        let mut client = out.sim.client();
        for op in &out.acked {
            let (id, value_len) = match *op {
                Op::Insert { id, value_len } | Op::Update { id, value_len } => (id, value_len),
                Op::Read { .. } => continue,
            };
            let key = key_bytes(id);
            let got = client.get(&key).unwrap_or_else(|e| {
                panic!("trial {trial}: acked key id {id} unreadable after failover: {e}")
            });
            assert_eq!(
                got.as_deref(),
                Some(value_bytes(id, value_len).as_slice()),
                "trial {trial}: acked write for key id {id} lost or corrupted"
            );
        }
        total_acked += out.acked.len() as u64;
    }
    println!(
        "ACCEPTANCE 6: PASS - 20 failover trials (primary killed at op 50000), {total_acked} acknowledged writes all readable"
    );
}

#[test]
fn criterion_7_messaging_fuzz_exactly_once_in_order() {
    let _serial = serial();
    const MESSAGES: u64 = 100_000;
    const BUF: usize = 16 * 1024;
    let net = InProcNetwork::new();
    let listener = net.listen("fuzz", NetworkStats::new());
    let client = net.connect("fuzz", NetworkStats::new()).unwrap();
    let server = listener.accept().unwrap();
    let req_buf = server.register_buffer(BUF, Some(TAG_REQUEST_BUFFER)).unwrap();
    let mut poller = ConnPoller::new(req_buf);
    let (buf_id, _) = client
        .peer_buffer_by_tag(TAG_REQUEST_BUFFER, Duration::from_secs(5))
        .unwrap();

    let mut rng = StdRng::seed_from_u64(7);
    let mut woff = 0usize;
    let mut pending: std::collections::VecDeque<(u64, Vec<u8>)> = Default::default();
    let mut received = 0u64;
    let mut wraps = 0u64;
    let mut resets = 0u64;

    let drain = |pending: &mut std::collections::VecDeque<(u64, Vec<u8>)>,
                     poller: &mut ConnPoller,
                     received: &mut u64| {
        while let Some((want_id, want_payload)) = pending.front() {
            let Some(task) = poller.poll_once().unwrap() else {
                panic!("message {want_id} never created a task");
            };
            assert_eq!(task.header.req_id, *want_id, "out-of-order delivery");
            assert_eq!(&task.payload, want_payload, "payload corrupted in flight");
            pending.pop_front();
            *received += 1;
        }
    };

    for req_id in 0..MESSAGES {
        let len = rng.gen_range(0..=1500usize);
        let fp = message_footprint(len);
        assert_eq!(fp % MESSAGE_SEGMENT, 0, "footprint must quantize to 128 B");
        if woff + fp > BUF {
            // Not enough room before the edge: hand the reader everything,
            // then an explicit rendezvous reset restarts the ring at zero.
            drain(&mut pending, &mut poller, &mut received);
            let reset = MessageHeader {
                payload_len: 0,
                op: op::RESET_RENDEZVOUS,
                flags: 0,
                reply_offset: 0,
                reply_len: 128,
                req_id: 0,
            };
            client.remote_write(buf_id, woff as u64, &compose_message(&reset, &[])).unwrap();
            assert!(poller.poll_once().unwrap().is_none(), "reset is not a task");
            assert_eq!(poller.rendezvous(), 0);
            woff = 0;
            resets += 1;
        }
        let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let h = MessageHeader {
            payload_len: len as u32,
            op: op::PUT,
            flags: 0,
            reply_offset: 0,
            reply_len: 128,
            req_id,
        };
        client.remote_write(buf_id, woff as u64, &compose_message(&h, &payload)).unwrap();
        pending.push_back((req_id, payload));
        woff += fp;
        if woff == BUF {
            // Exact fill wraps implicitly, no reset message.
            drain(&mut pending, &mut poller, &mut received);
            assert_eq!(poller.rendezvous(), 0, "exact fill must wrap implicitly");
            woff = 0;
            wraps += 1;
        } else if rng.gen_ratio(1, 4) {
            drain(&mut pending, &mut poller, &mut received);
        }
    }
    drain(&mut pending, &mut poller, &mut received);
    assert_eq!(received, MESSAGES, "exactly-once delivery");
    assert!(poller.poll_once().unwrap().is_none(), "no phantom tasks");
    assert!(wraps > 0 && resets > 0, "fuzz must cross wraps ({wraps}) and resets ({resets})");
    println!(
        "ACCEPTANCE 7: PASS - {MESSAGES} messages exactly-once in-order across {wraps} implicit wraps and {resets} resets; all footprints = 0 mod 128"
    );
}

#[test]
fn criterion_8_pointer_translation_matches_div_mod_oracle() {
    let _serial = serial();
    const SEG: u64 = 4096;
    const SEGS: u64 = 1024;
    let device = Device::new_in_memory(SEG * SEGS, SEG);
    let mut map = LogSegmentMap::new();
    let mut oracle: HashMap<u64, u64> = HashMap::new();
    for s in 0..SEGS {
        if s % 3 == 0 {
            continue; // deliberately unmapped
        }
        let local = ((s * 7 + 13) % SEGS) * SEG;
        map.insert(DeviceOffset(s * SEG), DeviceOffset(local));
        oracle.insert(s * SEG, local);
    }
    let mut rng = StdRng::seed_from_u64(8);
    let (mut hits, mut misses) = (0u64, 0u64);
    for _ in 0..10_000 {
        let off = rng.gen_range(0..SEG * SEGS);
        let tombstone = rng.gen();
        let ptr = ValueLogPointer::new(DeviceOffset(off), tombstone);
        // Independent reference: pure integer div/mod.
        let seg = off / SEG * SEG;
        match (map.translate(&device, ptr), oracle.get(&seg)) {
            (Ok(got), Some(local)) => {
                assert_eq!(got.offset.0, local + off % SEG);
                assert_eq!(got.tombstone, tombstone);
                hits += 1;
            }
            (Err(WireError::MissingMapping(m)), None) => {
                assert_eq!(m, seg);
                misses += 1;
            }
            (got, want) => panic!("offset {off:#x}: translate {got:?} vs oracle {want:?}"),
        }
    }
    assert!(hits > 0 && misses > 0);
    println!(
        "ACCEPTANCE 8: PASS - 10000 translations agree with the div/mod reference ({hits} mapped, {misses} MissingMapping)"
    );
}

#[test]
fn criterion_9_engine_matches_shadow_map() {
    let _serial = serial();
    let start = Instant::now();
    let device = Device::new_in_memory(64 * 1024 * 1024, 16 * 1024);
    let mut engine = Engine::new(
        std::sync::Arc::new(device),
        EngineConfig { growth_factor: 4, l0_capacity_keys: 128, node_size: 4096 },
    );
    let mut shadow: std::collections::BTreeMap<Vec<u8>, Vec<u8>> = Default::default();
    let mut rng = StdRng::seed_from_u64(9);
    let key = |i: u32| format!("key{i:06}").into_bytes();
    let mut counts = [0u64; 4];
    for _ in 0..10_000 {
        let k = key(rng.gen_range(0..500));
        match rng.gen_range(0..100) {
            0..=59 => {
                let v: Vec<u8> = (0..rng.gen_range(1..200usize)).map(|_| rng.gen()).collect();
                engine.put_local(&k, &v).unwrap();
                shadow.insert(k, v);
                counts[0] += 1;
            }
            60..=79 => {
                engine.delete_local(&k).unwrap();
                shadow.remove(&k);
                counts[1] += 1;
            }
            80..=94 => {
                assert_eq!(engine.get(&k).unwrap(), shadow.get(&k).cloned(), "get {k:?}");
                counts[2] += 1;
            }
            _ => {
                let n = rng.gen_range(1..20usize);
                let got = engine.scan(&k, n).unwrap();
                let want: Vec<(Vec<u8>, Vec<u8>)> = shadow
                    .range(k.clone()..)
                    .take(n)
                    .map(|(a, b)| (a.clone(), b.clone()))
                    .collect();
                assert_eq!(got, want, "scan from {k:?}");
                counts[3] += 1;
            }
        }
    }
    for i in 0..500 {
        let k = key(i);
        assert_eq!(engine.get(&k).unwrap(), shadow.get(&k).cloned());
    }
    let spills = engine.counters().l0_spills;
    assert!(spills >= 3, "need >= 3 spills to exercise the levels, saw {spills}");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "runtime {secs:.1}s exceeds 1 min budget");
    println!(
        "ACCEPTANCE 9: PASS - 10000 ops ({} put, {} delete, {} get, {} scan) match the shadow map across {spills} spills ({secs:.1}s)",
        counts[0], counts[1], counts[2], counts[3]
    );
}

#[test]
fn criterion_10_scheduler_policy_conformance() {
    let _serial = serial();
    let policy = SchedulerPolicy { task_threshold: 4 };
    let mut rng = StdRng::seed_from_u64(10);
    let mut wakes = 0u64;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=6usize);
        let workers: Vec<WorkerView> = (0..n)
            .map(|_| WorkerView { queue_len: rng.gen_range(0..8), sleeping: rng.gen_ratio(1, 3) })
            .collect();
        let current = rng.gen_range(0..n);
        match policy.decide(current, &workers) {
            Assignment::Wake(i) => {
                assert!(workers[i].sleeping, "woke a running worker");
                assert!(
                    workers.iter().all(|w| w.sleeping || w.queue_len >= 4),
                    "woke a sleeper while a running worker was under threshold: {workers:?}"
                );
                wakes += 1;
            }
            Assignment::Run(i) => {
                assert!(!workers[i].sleeping, "ran a job on a sleeping worker without waking it");
                if workers[i].queue_len >= 4 {
                    // Overload fallback is legal only with nobody to wake
                    // and nobody under threshold; it picks the least loaded.
                    assert!(workers.iter().all(|w| !w.sleeping && w.queue_len >= 4));
                    assert!(workers.iter().all(|w| w.queue_len >= workers[i].queue_len));
                }
            }
        }
    }
    assert!(wakes > 0, "trace never exercised the wake path");

    // Idle workers must fall asleep after the configured 100 us, so the
    // first job after a quiet period needs a wakeup.
    let pool = WorkerPool::start(2, policy, Duration::from_micros(100));
    std::thread::sleep(Duration::from_millis(20));
    let before = pool.wakeups();
    let (tx, rx) = std::sync::mpsc::channel();
    pool.schedule(Box::new(move || tx.send(()).unwrap()));
    rx.recv_timeout(Duration::from_secs(5)).expect("job ran");
    let woke = pool.wakeups() - before;
    assert!(woke >= 1, "idle worker never slept within 20 ms");
    pool.shutdown();
    println!(
        "ACCEPTANCE 10: PASS - 10000 scripted decisions conform ({wakes} legal wakeups); idle worker slept after 100 us and required a wakeup"
    );
}

#[test]
fn criterion_11_read_workload_throughput_is_mode_neutral() {
    let _serial = serial();
    let modes = [ReplicationMode::None, ReplicationMode::SendIndex, ReplicationMode::BuildIndex];
    // Five interleaved rounds; judged on per-mode median throughput.
    // Single runs are noisy (the rpc spinners alone oversubscribe small
    // CI machines), so the median of interleaved samples cancels slow
    // periods, and rotating the in-round order cancels any monotone
    // machine-speed drift that would otherwise bias a fixed position.
    // Replication never touches the read path.
    let mut samples = [[0f64; 5]; 3];
    for round in 0..5 {
        for k in 0..modes.len() {
            let i = (round + k) % modes.len();
            let mode = &modes[i];
            let cfg = ExperimentConfig {
                phase: Phase::RunC,
                mix: SizeMix::SD,
                mode: *mode,
                ops: 30_000,
                preload: 20_000,
                seed: 42,
                ..Default::default()
            };
            let r = run_experiment(&cfg).unwrap();
            samples[i][round] = r.throughput_ops_per_sec;
        }
    }
    let medians: Vec<f64> = samples
        .iter()
        .map(|s| {
            let mut s = *s;
            s.sort_by(f64::total_cmp);
            s[s.len() / 2]
        })
        .collect();
    let max = medians.iter().cloned().fold(f64::MIN, f64::max);
    let min = medians.iter().cloned().fold(f64::MAX, f64::min);
    assert!(
        max / min <= 1.10,
        "median read throughput spread {:.1}% exceeds 10%: none {:.0}, send {:.0}, build {:.0}",
        (max / min - 1.0) * 100.0,
        medians[0],
        medians[1],
        medians[2]
    );
    println!(
        "ACCEPTANCE 11: PASS - RunC median throughput none {:.0} / send {:.0} / build {:.0} ops/s, spread {:.1}% <= 10%",
        medians[0], medians[1], medians[2], (max / min - 1.0) * 100.0
    );
}
