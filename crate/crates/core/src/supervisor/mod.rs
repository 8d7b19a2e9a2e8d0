//! Per-device lifecycle supervision: event matching, process
//! spawn/terminate, cooldown debouncing, crash restarts with exponential
//! backoff, heartbeat health.
//!
//! The transition logic lives in [`core::SupervisorCore`], a deterministic
//! state machine that consumes timestamped inputs and emits actions. The
//! [`runtime`] module wires it to real clocks, processes and signals.

pub mod core;
pub mod runtime;

pub use self::core::{
    Action, DeviceSnapshot, DeviceState, Input, SupervisorConfig, SupervisorCore,
    TransitionRecord,
};
pub use self::runtime::{
    InstantOnlineSpawner, Msg, ProcessSpawner, Spawner, SupervisorHandle, SupervisorRuntime,
};
