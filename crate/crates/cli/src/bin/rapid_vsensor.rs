//! Synthetic sensor publisher process: supervised child standing in for
//! real camera/tactile/motor hardware. Publishes deterministic frames on
//! its topic, heartbeats to the daemon, and exits cleanly on SIGTERM
//! unless a misbehavior mode is selected.

use clap::Parser;
use rapid_core::vsensor::{
    install_term_handler, run_virtual_sensor, ExitReason, Misbehavior, PayloadKind, SensorContext,
    VirtualSensorConfig,
};

#[derive(Parser)]
#[command(name = "rapid-vsensor", about = "synthetic sensor publisher")]
struct Args {
    #[arg(long)]
    name: String,
    #[arg(long)]
    topic: String,
    #[arg(long, default_value_t = 30.0)]
    rate: f64,
    /// camera | tactile | motor
    #[arg(long)]
    kind: PayloadKind,
    /// Dimensions as WxH[xD...], e.g. 4x4
    #[arg(long, default_value = "4x4")]
    shape: String,
    /// none | ignore-termination | crash-after:<n> | freeze
    #[arg(long, default_value = "none")]
    misbehave: Misbehavior,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TCP endpoint to publish on
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Stop after N frames (testing aid)
    #[arg(long)]
    max_frames: Option<u64>,
}

fn parse_shape(s: &str) -> Result<Vec<usize>, String> {
    s.split('x')
        .map(|d| d.parse::<usize>().map_err(|e| format!("bad shape `{s}`: {e}")))
        .collect()
}

fn main() {
    env_logger::init();
    let args = Args::parse();
    let shape = match parse_shape(&args.shape) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
    };
    let config = VirtualSensorConfig {
        name: args.name,
        topic: args.topic,
        rate_hz: args.rate,
        payload_kind: args.kind,
        shape,
        misbehavior: args.misbehave,
        seed: args.seed,
    };
    if let Err(e) = config.validate() {
        eprintln!("{e}");
        std::process::exit(2);
    }
    let ctx = SensorContext {
        listen_addr: args.listen,
        heartbeat_socket: std::env::var("RAPID_HEARTBEAT_SOCKET").ok(),
        max_frames: args.max_frames,
    };
    install_term_handler();
    match run_virtual_sensor(&config, &ctx) {
        Ok((ExitReason::Terminated | ExitReason::FrameLimit, _)) => {}
        Ok((ExitReason::Crashed, _)) => std::process::exit(1),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(3);
        }
    }
}
