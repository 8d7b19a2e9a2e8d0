//! End-to-end checks for the command line surface and for process-group
//! cleanup of spawned sensor trees.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rapid_core::supervisor::{ProcessSpawner, Spawner};

fn rapidctl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rapidctl"))
}

const VALID_CONFIG: &str = r#"
[device.cam_wrist]
vid = "0x0fd9"
pid = "0x0066"
serial = "CAMW001"
node = "cam-node --port 0"
topic = "/rapid/cam"

[device.tac_left]
vid = "0x1234"
pid = "0x5678"
node = "tac-node"
topic = "/rapid/tac"
"#;

#[test]
fn register_writes_stable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("devices.toml");
    std::fs::write(&config, VALID_CONFIG).unwrap();

    let run = |config: &Path| {
        let out = rapidctl().arg("register").arg("--config").arg(config).output().unwrap();
        assert!(out.status.success(), "register failed: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&config);
    let rules = std::fs::read(dir.path().join("devices.rules")).unwrap();
    let descriptors = std::fs::read(dir.path().join("devices.descriptors.json")).unwrap();
    assert!(!rules.is_empty());
    assert!(!descriptors.is_empty());

    // A second run over the same input is byte-identical.
    run(&config);
    assert_eq!(rules, std::fs::read(dir.path().join("devices.rules")).unwrap());
    assert_eq!(
        descriptors,
        std::fs::read(dir.path().join("devices.descriptors.json")).unwrap()
    );

    // Rules mention both identities.
    let text = String::from_utf8(rules).unwrap();
    assert!(text.contains("0fd9") && text.contains("1234"), "rules missing identities:\n{text}");
}

#[test]
fn register_rejects_invalid_config_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[device.a]\nvid = \"0x1\"\nnode = \"n\"\ntopic = \"/a\"\n").unwrap();
    let out = rapidctl().arg("register").arg("--config").arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("pid"), "finding does not name the missing key: {stderr}");
}

#[test]
fn monitor_once_reports_environment_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = rapidctl()
        .arg("monitor")
        .arg("--once")
        .arg("--plain")
        .arg("--mask-path")
        .arg(dir.path().join("absent.bin"))
        .arg("--socket")
        .arg(dir.path().join("absent.sock"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn inject_reports_environment_failure_when_daemon_is_down() {
    let dir = tempfile::tempdir().unwrap();
    let out = rapidctl()
        .args(["inject", "attach", "--vid", "0x1", "--pid", "0x2", "--socket"])
        .arg(dir.path().join("absent.sock"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn kill_reaches_grandchildren_via_process_group() {
    let dir = tempfile::tempdir().unwrap();
    let pid_file = dir.path().join("grandchild.pid");
    let script = dir.path().join("tree.sh");
    std::fs::write(
        &script,
        format!("#!/bin/sh\nsleep 300 &\necho $! > {}\nwait\n", pid_file.display()),
    )
    .unwrap();

    let mut spawner = ProcessSpawner::new(Vec::new());
    spawner.spawn("tree", &format!("/bin/sh {}", script.display())).unwrap();

    let deadline = Instant::now() + Duration::from_secs(5);
    let grandchild: i32 = loop {
        if let Ok(text) = std::fs::read_to_string(&pid_file) {
            if let Ok(pid) = text.trim().parse() {
                break pid;
            }
        }
        assert!(Instant::now() < deadline, "grandchild pid never appeared");
        std::thread::sleep(Duration::from_millis(20));
    };
    let alive = |pid: i32| unsafe { libc::kill(pid, 0) == 0 };
    assert!(alive(grandchild), "grandchild not running before kill");

    spawner.signal_kill("tree");

    let deadline = Instant::now() + Duration::from_secs(5);
    while alive(grandchild) {
        assert!(Instant::now() < deadline, "grandchild survived group kill");
        std::thread::sleep(Duration::from_millis(20));
    }
}
