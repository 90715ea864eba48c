//! End-to-end tests of the `rackkv` binary: config validation, the
//! single-process smoke run and the multi-process cluster path.

use std::io::Write;
use std::net::TcpListener;
use std::process::{Child, Command, Stdio};
use std::time::Duration;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rackkv"))
}

fn write_config(dir: &std::path::Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("cluster.toml");
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(body.as_bytes()).unwrap();
    path
}

#[test]
fn smoke_run_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
        regions = 4
        [[servers]]
        id = 1
        address = "local:1"
        [[servers]]
        id = 2
        address = "local:2"
        "#,
    );
    let out = bin().args(["smoke", "--config"]).arg(&cfg).output().unwrap();
    assert!(
        out.status.success(),
        "smoke failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ok: 1000 ops"), "unexpected output: {stdout}");
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
        [engine]
        growth_factor = 99
        [[servers]]
        id = 1
        address = "local:1"
        "#,
    );
    let out = bin().args(["smoke", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
}

#[test]
fn unknown_config_key_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
        turbo = true
        [[servers]]
        id = 1
        address = "local:1"
        "#,
    );
    let out = bin().args(["smoke", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_override_changes_region_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
        regions = 4
        [[servers]]
        id = 1
        address = "local:1"
        "#,
    );
    let out = bin()
        .args(["smoke", "--config"])
        .arg(&cfg)
        .env("RACKKV_REGIONS", "2")
        .env("RACKKV_GROUP_SIZE", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("regions 2"));
}

#[test]
fn occupied_port_is_surfaced_as_runtime_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"
            [[servers]]
            id = 1
            address = "local:1"
            [coordinator]
            addr = "{addr}"
            "#
        ),
    );
    let out = bin().args(["coordinator", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("bind"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Reaper(Vec<Child>);

impl Drop for Reaper {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn free_ports(n: usize) -> Vec<u16> {
    // Bind-then-release: a small race window, fine for tests.
    let sockets: Vec<TcpListener> =
        (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    sockets.iter().map(|s| s.local_addr().unwrap().port()).collect()
}

#[test]
fn multi_process_cluster_serves_topology() {
    let ports = free_ports(3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"
            regions = 4
            [[servers]]
            id = 1
            address = "127.0.0.1:{}"
            [[servers]]
            id = 2
            address = "127.0.0.1:{}"
            [coordinator]
            addr = "127.0.0.1:{}"
            "#,
            ports[0], ports[1], ports[2]
        ),
    );
    let spawn = |args: &[&str]| {
        bin()
            .args(args)
            .arg("--config")
            .arg(&cfg)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap()
    };
    let mut procs = Reaper(Vec::new());
    procs.0.push(spawn(&["coordinator"]));
    std::thread::sleep(Duration::from_millis(400));
    procs.0.push(spawn(&["server", "--id", "1"]));
    procs.0.push(spawn(&["server", "--id", "2"]));
    std::thread::sleep(Duration::from_millis(400));
    procs.0.push(spawn(&["master"]));

    // Topology should eventually show a published, fully healthy map.
    let deadline = std::time::Instant::now() + Duration::from_secs(15);
    loop {
        let out = bin().args(["topology", "--config"]).arg(&cfg).output().unwrap();
        let stdout = String::from_utf8_lossy(&out.stdout);
        if out.status.success()
            && stdout.contains("registered servers: 2")
            && stdout.contains("version 1  regions 4")
            && !stdout.contains("DEGRADED")
        {
            break;
        }
        assert!(
            std::time::Instant::now() < deadline,
            "cluster never became healthy; last topology output:\n{stdout}\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::thread::sleep(Duration::from_millis(300));
    }
}
