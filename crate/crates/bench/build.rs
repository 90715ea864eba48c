use std::process::Command;

fn main() {
    // Best-effort git describe for the report build id.
    let id = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    if let Some(id) = id {
        println!("cargo:rustc-env=BENCH_BUILD_ID={id}");
    }
    println!("cargo:rerun-if-changed=build.rs");
}
