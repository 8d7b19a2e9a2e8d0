//! Command-line surface: daemon runner, registration tooling, event
//! injection, status monitor, record/replay/audit, scenarios and the
//! mask-path benchmark.
//!
//! Exit codes are uniform across subcommands: 0 success, 1 runtime
//! failure, 2 configuration error, 3 environment error.

use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use rapid_core::clock::monotonic_ns;
use rapid_core::daemon::{
    control_request, start_deferred, DaemonOptions, InjectReply, StatusSnapshot,
};
use rapid_core::event::{EventKind, InjectRequest};
use rapid_core::maskpub::{read_mask, read_raw, wait_for_mask, MaskChannel};
use rapid_core::recorder::{
    audit, replay, ChannelInfo, EpisodeReader, EpisodeRecord, EpisodeWriter, Manifest,
    MASK_CHANNEL_ID, MASK_KEEPALIVE_NS,
};
use rapid_core::registry::{load_registry, validate_registration, generate_hotplug_rules, Severity};
use rapid_core::scenario::{
    bench_mask_path, expected_status, run_scenario, Condition, HarnessConfig, Mode, ScenarioSpec,
};
use rapid_core::supervisor::ProcessSpawner;
use rapid_core::transport::{subscribe, Publisher, SubscriberItem};
use rapid_core::vsensor::{install_term_handler, term_requested};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ENV: u8 = 3;

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn runtime(msg: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, message: msg.into() }
    }
    fn config(msg: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: msg.into() }
    }
    fn env(msg: impl Into<String>) -> Self {
        Self { code: EXIT_ENV, message: msg.into() }
    }
}

#[derive(Parser)]
#[command(name = "rapidctl", about = "hot-plug device middleware control")]
struct Cli {
    /// Machine-readable JSON output where the subcommand supports it
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the daemon: event bus, supervisor, mask publisher, control socket
    Run {
        #[arg(long)]
        config: PathBuf,
        /// State directory for sockets (default: alongside the mask file)
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, env = "RAPID_MASK_PATH")]
        mask_path: Option<PathBuf>,
        /// Attach the OS hot-plug event adapter
        #[arg(long)]
        os_events: bool,
    },
    /// Validate a registry file and write derived artifacts next to it
    Register {
        #[arg(long)]
        config: PathBuf,
    },
    /// Inject an attach/detach event into a running daemon
    Inject {
        /// attach | detach
        kind: String,
        #[arg(long)]
        vid: String,
        #[arg(long)]
        pid: String,
        #[arg(long)]
        serial: Option<String>,
        #[arg(long, env = "RAPID_CONTROL_SOCKET")]
        socket: Option<PathBuf>,
    },
    /// Read-only status view of a running daemon
    Monitor {
        #[arg(long, default_value_t = 500)]
        interval_ms: u64,
        /// Print one snapshot and exit
        #[arg(long)]
        once: bool,
        /// Stable uncolored text (implied when stdout is not a terminal)
        #[arg(long)]
        plain: bool,
        #[arg(long, env = "RAPID_MASK_PATH")]
        mask_path: Option<PathBuf>,
        #[arg(long, env = "RAPID_CONTROL_SOCKET")]
        socket: Option<PathBuf>,
    },
    /// Record topics and mask snapshots into an episode file
    Record {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated topic list
        #[arg(long)]
        topics: String,
        /// Publisher endpoint(s) to subscribe to (repeatable)
        #[arg(long = "endpoint")]
        endpoints: Vec<String>,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, env = "RAPID_MASK_PATH")]
        mask_path: Option<PathBuf>,
        /// Control socket used to resolve the registry bit map for the
        /// manifest (best-effort)
        #[arg(long, env = "RAPID_CONTROL_SOCKET")]
        socket: Option<PathBuf>,
    },
    /// Re-publish a recorded episode
    Replay {
        file: PathBuf,
        /// Time scale; 0 = as fast as possible
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        /// Delay before the first record so subscribers can connect
        #[arg(long, default_value_t = 500)]
        settle_ms: u64,
    },
    /// Dropout report for a recorded episode
    Audit {
        file: PathBuf,
        /// Comma-separated modalities that must be present for a segment
        /// to count as usable
        #[arg(long)]
        require: Option<String>,
    },
    /// Run one condition/mode cell (or the full grid) of the behavior matrix
    Scenario {
        /// full | no-tactile | hot-unplug | hot-replug
        #[arg(long, required_unless_present = "grid")]
        condition: Option<Condition>,
        /// mask-aware | static-config
        #[arg(long, required_unless_present = "grid")]
        mode: Option<Mode>,
        /// Run all 8 cells and compare against the expected matrix
        #[arg(long)]
        grid: bool,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        vsensor_bin: Option<PathBuf>,
    },
    /// Mask-path latency and publish-rate benchmark
    Bench {
        #[arg(long, default_value_t = 1000)]
        transitions: usize,
        /// Also measure attach-to-first-data with a real sensor process
        #[arg(long)]
        with_sensor: bool,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        vsensor_bin: Option<PathBuf>,
    },
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run { config, dir, mask_path, os_events } => {
            cmd_run(&config, dir, mask_path, os_events, cli.json)
        }
        Cmd::Register { config } => cmd_register(&config, cli.json),
        Cmd::Inject { kind, vid, pid, serial, socket } => {
            cmd_inject(&kind, vid, pid, serial, socket, cli.json)
        }
        Cmd::Monitor { interval_ms, once, plain, mask_path, socket } => {
            cmd_monitor(interval_ms, once, plain, mask_path, socket, cli.json)
        }
        Cmd::Record { out, topics, endpoints, duration, mask_path, socket } => {
            cmd_record(&out, &topics, &endpoints, duration, mask_path, socket, cli.json)
        }
        Cmd::Replay { file, speed, listen, settle_ms } => {
            cmd_replay(&file, speed, &listen, settle_ms, cli.json)
        }
        Cmd::Audit { file, require } => cmd_audit(&file, require.as_deref(), cli.json),
        Cmd::Scenario { condition, mode, grid, report, vsensor_bin } => {
            cmd_scenario(condition, mode, grid, report, vsensor_bin, cli.json)
        }
        Cmd::Bench { transitions, with_sensor, report, vsensor_bin } => {
            cmd_bench(transitions, with_sensor, report, vsensor_bin, cli.json)
        }
    };
    if let Err(f) = result {
        eprintln!("{}", f.message);
        std::process::exit(f.code as i32);
    }
}

fn default_control_socket() -> PathBuf {
    std::env::var_os("RAPID_CONTROL_SOCKET")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("rapid-control.sock"))
}

fn default_mask_path() -> PathBuf {
    MaskChannel::default_path()
}

fn load_config(path: &Path) -> Result<rapid_core::registry::Registry, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let report = validate_registration(&text);
    if !report.is_clean() {
        let mut msg = String::new();
        for f in &report.findings {
            msg.push_str(&format!("{:?} line {}: {}\n", f.severity, f.line.unwrap_or(0), f.message));
        }
        return Err(Failure::config(msg.trim_end().to_owned()));
    }
    load_registry(&text).map_err(|e| Failure::config(e.to_string()))
}

fn cmd_run(
    config: &Path,
    dir: Option<PathBuf>,
    mask_path: Option<PathBuf>,
    os_events: bool,
    json: bool,
) -> Result<(), Failure> {
    let registry = load_config(config)?;
    let mask_path = mask_path.unwrap_or_else(default_mask_path);
    let dir = match dir {
        Some(d) => d,
        None => mask_path.parent().map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Failure::env(format!("{}: {e}", dir.display())))?;

    let mut options = DaemonOptions::new(registry, &dir);
    options.mask_path = mask_path;
    options.control_socket = default_control_socket();
    options.os_events = os_events;
    let hb_socket = options.heartbeat_socket.display().to_string();
    let daemon = start_deferred(options, move |sender| {
        Box::new(
            ProcessSpawner::new(vec![("RAPID_HEARTBEAT_SOCKET".into(), hb_socket)])
                .with_notify(sender),
        )
    })
    .map_err(|e| Failure::env(e.to_string()))?;
    wait_for_mask(daemon.mask_path(), Duration::from_secs(1))
        .map_err(|e| Failure::env(e.to_string()))?;

    if json {
        println!(
            "{}",
            serde_json::json!({
                "ready": true,
                "mask_path": daemon.mask_path(),
                "control_socket": daemon.control_socket(),
                "transport": daemon.transport_addr(),
            })
        );
    } else {
        println!(
            "rapid daemon ready  mask={}  control={}  transport={}",
            daemon.mask_path().display(),
            daemon.control_socket().display(),
            daemon.transport_addr().unwrap_or_else(|| "off".into()),
        );
    }

    install_term_handler();
    while !term_requested() {
        std::thread::sleep(Duration::from_millis(50));
    }
    daemon.stop();
    Ok(())
}

fn cmd_register(config: &Path, json: bool) -> Result<(), Failure> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| Failure::config(format!("{}: {e}", config.display())))?;
    let report = validate_registration(&text);
    if !report.is_clean() {
        for f in &report.findings {
            eprintln!("{:?} line {}: {}", f.severity, f.line.unwrap_or(0), f.message);
        }
        return Err(Failure::config("validation failed; no artifacts written"));
    }
    let registry = load_registry(&text).map_err(|e| Failure::config(e.to_string()))?;
    let rules_path = config.with_extension("rules");
    let desc_path = config.with_extension("descriptors.json");
    std::fs::write(&rules_path, generate_hotplug_rules(&registry))
        .map_err(|e| Failure::env(e.to_string()))?;
    let descriptors =
        serde_json::to_string_pretty(&registry).expect("registry serializes") + "\n";
    std::fs::write(&desc_path, descriptors).map_err(|e| Failure::env(e.to_string()))?;

    if json {
        println!(
            "{}",
            serde_json::json!({
                "rules": rules_path,
                "descriptors": desc_path,
                "devices": registry.descriptors.len(),
                "findings": report.findings,
            })
        );
    } else {
        println!("wrote {}", rules_path.display());
        println!("wrote {}", desc_path.display());
        for f in &report.findings {
            let tag = match f.severity {
                Severity::Error => "error",
                Severity::Warning => "warning",
            };
            println!("{tag} line {}: {}", f.line.unwrap_or(0), f.message);
        }
        println!("{} device(s) registered", registry.descriptors.len());
    }
    Ok(())
}

fn cmd_inject(
    kind: &str,
    vid: String,
    pid: String,
    serial: Option<String>,
    socket: Option<PathBuf>,
    json: bool,
) -> Result<(), Failure> {
    let kind = match kind {
        "attach" => EventKind::Attach,
        "detach" => EventKind::Detach,
        other => return Err(Failure::config(format!("unknown event kind `{other}`"))),
    };
    let socket = socket.unwrap_or_else(default_control_socket);
    let line = serde_json::to_string(&InjectRequest { kind, vid, pid, serial })
        .expect("request serializes");
    let reply = control_request(&socket, &line)
        .map_err(|e| Failure::env(format!("daemon unreachable at {}: {e}", socket.display())))?;
    if json {
        println!("{reply}");
        return Ok(());
    }
    let parsed: InjectReply =
        serde_json::from_str(&reply).map_err(|e| Failure::runtime(format!("bad reply: {e}")))?;
    if let Some(w) = &parsed.warning {
        eprintln!("warning: {w}");
    }
    match (parsed.ok, parsed.device, parsed.state) {
        (true, Some(d), Some(s)) => println!("{d}: {s}"),
        _ => println!("no match: {}", parsed.reason.unwrap_or_default()),
    }
    Ok(())
}

const GREEN: &str = "\x1b[32m";
const YELLOW: &str = "\x1b[33m";
const RED: &str = "\x1b[31m";
const RESET: &str = "\x1b[0m";

fn render_status(status: &StatusSnapshot, color: bool) -> String {
    let width = 8 * ((status.device_count as usize).max(1)).div_ceil(8);
    let mut out = format!(
        "mask {}  binary {:0width$b}  sequence {}\n",
        status.mask, status.mask_word, status.sequence,
    );
    for d in &status.devices {
        let (paint, label) = match d.state.as_str() {
            "Online" => (GREEN, "online"),
            "AttachedStarting" => (YELLOW, "starting"),
            _ => (RED, "offline"),
        };
        let state_cell = if color {
            format!("{paint}{:<10}{RESET}", label)
        } else {
            format!("{:<10}", label)
        };
        out.push_str(&format!(
            "{:<16} bit {:<2} {state_cell} {:<18} attached={} restarts={}\n",
            d.name, d.bit, d.state, d.attached, d.restart_count
        ));
    }
    for line in status.recent_log.iter().rev().take(10) {
        out.push_str(&format!("  {line}\n"));
    }
    out
}

fn fetch_status(socket: &Path, mask_path: &Path) -> Result<StatusSnapshot, String> {
    let reply =
        control_request(socket, "{\"cmd\":\"status\"}").map_err(|e| e.to_string())?;
    let mut status: StatusSnapshot = serde_json::from_str(&reply).map_err(|e| e.to_string())?;
    if let Ok(m) = read_mask(mask_path) {
        status.sequence = m.sequence;
    }
    Ok(status)
}

fn cmd_monitor(
    interval_ms: u64,
    once: bool,
    plain: bool,
    mask_path: Option<PathBuf>,
    socket: Option<PathBuf>,
    json: bool,
) -> Result<(), Failure> {
    let socket = socket.unwrap_or_else(default_control_socket);
    let mask_path = mask_path.unwrap_or_else(default_mask_path);
    let tty = std::io::stdout().is_terminal();
    let color = tty && !plain && !json;

    loop {
        match fetch_status(&socket, &mask_path) {
            Ok(status) => {
                if json {
                    println!("{}", serde_json::to_string(&status).unwrap());
                } else {
                    if tty && !once {
                        print!("\x1b[2J\x1b[H");
                    }
                    print!("{}", render_status(&status, color));
                }
            }
            Err(e) => {
                if once {
                    return Err(Failure::env(format!("daemon unreachable: {e}")));
                }
                println!("== DAEMON UNREACHABLE: {e} ==");
            }
        }
        if once {
            return Ok(());
        }
        std::thread::sleep(Duration::from_millis(interval_ms));
    }
}

fn cmd_record(
    out: &Path,
    topics: &str,
    endpoints: &[String],
    duration: f64,
    mask_path: Option<PathBuf>,
    socket: Option<PathBuf>,
    json: bool,
) -> Result<(), Failure> {
    let mask_path = mask_path.unwrap_or_else(default_mask_path);
    let topics: Vec<String> =
        topics.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect();
    if topics.is_empty() {
        return Err(Failure::config("no topics given"));
    }

    let mut channels = std::collections::BTreeMap::new();
    let mut channel_by_topic = std::collections::HashMap::new();
    for (i, t) in topics.iter().enumerate() {
        let id = (i + 1) as u8;
        let name = t.rsplit('/').next().unwrap_or(t).to_owned();
        channels.insert(
            id,
            ChannelInfo { name, topic: t.clone(), shape: vec![], rate_hz: 0.0 },
        );
        channel_by_topic.insert(t.clone(), id);
    }
    // Best-effort: the daemon's status endpoint carries name -> bit, so
    // the episode stays self-contained for audit.
    let socket = socket.unwrap_or_else(default_control_socket);
    let bit_map: std::collections::BTreeMap<u8, String> = fetch_status(&socket, &mask_path)
        .map(|s| s.devices.iter().map(|d| (d.bit, d.name.clone())).collect())
        .unwrap_or_default();
    let manifest = Manifest {
        format_version: 1,
        channels,
        start_wall_time: rapid_core::mask::iso8601_utc_now(),
        bit_map,
    };
    let mut writer =
        EpisodeWriter::create(out, manifest).map_err(|e| Failure::env(e.to_string()))?;

    // One retrying subscriber thread per endpoint; absent topics simply
    // deliver nothing and show up as zero-masked in the recording.
    let (tx, rx) = std::sync::mpsc::channel::<(String, u64, Vec<u8>)>();
    let stop = std::sync::Arc::new(std::sync::atomic::AtomicBool::new(false));
    let mut threads = Vec::new();
    for ep in endpoints {
        let ep = ep.clone();
        let topics = topics.clone();
        let tx = tx.clone();
        let stop = stop.clone();
        threads.push(std::thread::spawn(move || {
            let refs: Vec<&str> = topics.iter().map(String::as_str).collect();
            while !stop.load(std::sync::atomic::Ordering::Relaxed) {
                let sub = match subscribe(&ep, &refs) {
                    Ok(s) => s,
                    Err(_) => {
                        std::thread::sleep(Duration::from_millis(50));
                        continue;
                    }
                };
                loop {
                    if stop.load(std::sync::atomic::Ordering::Relaxed) {
                        return;
                    }
                    match sub.recv_timeout(Duration::from_millis(100)) {
                        Some(SubscriberItem::Frame(env)) => {
                            if tx.send((env.topic, env.timestamp_ns, env.payload)).is_err() {
                                return;
                            }
                        }
                        Some(SubscriberItem::Disconnected) => break,
                        None => continue,
                    }
                }
            }
        }));
    }
    drop(tx);

    let start = Instant::now();
    let deadline = start + Duration::from_secs_f64(duration);
    let mut last_mask_bytes: Option<[u8; 32]> = None;
    let mut last_mask_at = Instant::now() - Duration::from_secs(1);
    let mut data_records: u64 = 0;
    let mut mask_records: u64 = 0;
    while Instant::now() < deadline {
        while let Ok((topic, t_ns, payload)) = rx.try_recv() {
            if let Some(&id) = channel_by_topic.get(&topic) {
                writer
                    .append(&EpisodeRecord { channel_id: id, timestamp_ns: t_ns, payload })
                    .map_err(|e| Failure::runtime(e.to_string()))?;
                data_records += 1;
            }
        }
        // Mask keepalive at 100 Hz plus every change.
        if let Ok(bytes) = read_raw(&mask_path) {
            let changed = last_mask_bytes.map_or(true, |prev| prev[8..16] != bytes[8..16]);
            let due = last_mask_at.elapsed() >= Duration::from_nanos(MASK_KEEPALIVE_NS);
            if changed || due {
                writer
                    .append_mask(&bytes, monotonic_ns())
                    .map_err(|e| Failure::runtime(e.to_string()))?;
                last_mask_bytes = Some(bytes);
                last_mask_at = Instant::now();
                mask_records += 1;
            }
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    stop.store(true, std::sync::atomic::Ordering::Relaxed);
    // Drain anything already queued before closing the file.
    while let Ok((topic, t_ns, payload)) = rx.try_recv() {
        if let Some(&id) = channel_by_topic.get(&topic) {
            let _ = writer.append(&EpisodeRecord { channel_id: id, timestamp_ns: t_ns, payload });
            data_records += 1;
        }
    }
    if mask_records == 0 {
        // Zero-duration session still yields a valid container with at
        // least one mask record (all-absent if the file is missing).
        let bytes = read_raw(&mask_path).unwrap_or_else(|_| {
            rapid_core::mask::encode_mask(&rapid_core::mask::PhysicalMask::new(
                0,
                0,
                0,
                1,
            ))
            .unwrap()
        });
        writer.append_mask(&bytes, monotonic_ns()).map_err(|e| Failure::runtime(e.to_string()))?;
        mask_records += 1;
    }
    writer.finish().map_err(|e| Failure::runtime(e.to_string()))?;
    for t in threads {
        let _ = t.join();
    }

    if json {
        println!(
            "{}",
            serde_json::json!({
                "out": out,
                "data_records": data_records,
                "mask_records": mask_records,
            })
        );
    } else {
        println!(
            "recorded {} data record(s), {} mask record(s) to {}",
            data_records,
            mask_records,
            out.display()
        );
    }
    Ok(())
}

fn cmd_replay(
    file: &Path,
    speed: f64,
    listen: &str,
    settle_ms: u64,
    json: bool,
) -> Result<(), Failure> {
    let reader = EpisodeReader::open(file).map_err(|e| Failure::runtime(e.to_string()))?;
    let publisher = Publisher::bind(listen).map_err(|e| Failure::env(e.to_string()))?;
    if json {
        println!(
            "{}",
            serde_json::json!({ "listen": publisher.local_addr().to_string(), "records": reader.records().len() })
        );
    } else {
        println!("replaying {} record(s) on {}", reader.records().len(), publisher.local_addr());
    }
    std::thread::sleep(Duration::from_millis(settle_ms));
    let published = replay(&reader, &publisher, rapid_core::daemon::DEFAULT_MASK_TOPIC, speed)
        .map_err(|e| Failure::runtime(e.to_string()))?;
    // Give subscriber queues a moment to drain before the sockets close.
    std::thread::sleep(Duration::from_millis(200));
    if !json {
        println!("replayed {published} record(s)");
    }
    Ok(())
}

fn cmd_audit(file: &Path, require: Option<&str>, json: bool) -> Result<(), Failure> {
    let reader = EpisodeReader::open(file).map_err(|e| Failure::runtime(e.to_string()))?;
    let required: Vec<String> = require
        .map(|r| r.split(',').map(str::trim).map(String::from).collect())
        .unwrap_or_default();
    let report = audit(&reader, &required).map_err(|e| Failure::runtime(e.to_string()))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).unwrap());
        return Ok(());
    }
    println!(
        "episode span {:.3} s",
        (report.episode_end_ns - report.episode_start_ns) as f64 / 1e9
    );
    for m in &report.modalities {
        if m.dropouts.is_empty() {
            println!("{:<16} bit {:<2} no dropouts", m.name, m.bit);
        } else {
            println!(
                "{:<16} bit {:<2} {} dropout(s), {:.3} s absent",
                m.name,
                m.bit,
                m.dropouts.len(),
                m.absent_ns as f64 / 1e9
            );
            for d in &m.dropouts {
                println!(
                    "    [{:.3} s .. {:.3} s]",
                    (d.start_ns - report.episode_start_ns) as f64 / 1e9,
                    (d.end_ns - report.episode_start_ns) as f64 / 1e9
                );
            }
        }
    }
    if !required.is_empty() {
        println!("usable segments (require {}):", required.join(","));
        for s in &report.usable_segments {
            println!(
                "    [{:.3} s .. {:.3} s]",
                (s.start_ns - report.episode_start_ns) as f64 / 1e9,
                (s.end_ns - report.episode_start_ns) as f64 / 1e9
            );
        }
    }
    let mask_count = reader.records_for(MASK_CHANNEL_ID).count();
    println!("{} mask record(s) scanned", mask_count);
    Ok(())
}

fn sibling_binary(name: &str) -> Result<PathBuf, Failure> {
    let me = std::env::current_exe().map_err(|e| Failure::env(e.to_string()))?;
    let path = me.parent().map(|d| d.join(name)).unwrap_or_default();
    if path.exists() {
        Ok(path)
    } else {
        Err(Failure::env(format!("{name} not found next to rapidctl (looked at {})", path.display())))
    }
}

fn cmd_scenario(
    condition: Option<Condition>,
    mode: Option<Mode>,
    grid: bool,
    report: Option<PathBuf>,
    vsensor_bin: Option<PathBuf>,
    json: bool,
) -> Result<(), Failure> {
    let vsensor_bin = match vsensor_bin {
        Some(b) => b,
        None => sibling_binary("rapid-vsensor")?,
    };
    let work_dir = std::env::temp_dir().join(format!("rapid-scenario-{}", std::process::id()));
    let harness = HarnessConfig { vsensor_bin, work_dir };

    let cells: Vec<(Condition, Mode)> = if grid {
        let mut v = Vec::new();
        for c in Condition::ALL {
            for m in [Mode::MaskAware, Mode::StaticConfig] {
                v.push((c, m));
            }
        }
        v
    } else {
        vec![(condition.unwrap(), mode.unwrap())]
    };

    let mut outcomes = Vec::new();
    let mut mismatches = 0;
    for (c, m) in cells {
        let spec = ScenarioSpec::new(c, m);
        let outcome = run_scenario(&spec, &harness).map_err(|e| Failure::env(e.to_string()))?;
        if grid && outcome.status != expected_status(c, m) {
            mismatches += 1;
        }
        if !json {
            println!(
                "{:<10} {:<13} -> {:<9} observations={} zero_filled(tac)={:.2}",
                format!("{c:?}"),
                format!("{m:?}"),
                format!("{:?}", outcome.status),
                outcome.observations_emitted,
                outcome.zero_filled_fraction.get("tac").copied().unwrap_or(0.0),
            );
        }
        outcomes.push(outcome);
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&outcomes).unwrap());
    }
    if let Some(path) = report {
        std::fs::write(&path, serde_json::to_string_pretty(&outcomes).unwrap())
            .map_err(|e| Failure::env(e.to_string()))?;
    }
    if grid && mismatches > 0 {
        return Err(Failure::runtime(format!("{mismatches} cell(s) off the expected matrix")));
    }
    Ok(())
}

fn cmd_bench(
    transitions: usize,
    with_sensor: bool,
    report: Option<PathBuf>,
    vsensor_bin: Option<PathBuf>,
    json: bool,
) -> Result<(), Failure> {
    let sensor = if with_sensor {
        Some(match vsensor_bin {
            Some(b) => b,
            None => sibling_binary("rapid-vsensor")?,
        })
    } else {
        None
    };
    let work_dir = std::env::temp_dir().join(format!("rapid-bench-{}", std::process::id()));
    let bench = bench_mask_path(&work_dir, transitions, sensor.as_deref())
        .map_err(|e| Failure::runtime(e.to_string()))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&bench).unwrap());
    } else {
        print!("{}", bench.render_text());
    }
    if let Some(path) = report {
        std::fs::write(&path, serde_json::to_string_pretty(&bench).unwrap())
            .map_err(|e| Failure::env(e.to_string()))?;
    }
    Ok(())
}
