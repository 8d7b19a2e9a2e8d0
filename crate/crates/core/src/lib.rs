//! Hot-plug-aware multimodal device middleware.
//!
//! The stack has a driver side and a client side. On the driver side a
//! daemon turns device attach/detach events into supervised publisher
//! processes and a hardware-grounded presence bitmask (the physical mask),
//! published as a 32-byte shared record at 500 Hz. On the client side a
//! synchronizer aligns multimodal streams within a configurable window,
//! zero-fills absent channels, and a recorder logs episodes with per-frame
//! mask snapshots.

pub mod clock;
pub mod daemon;
pub mod event;
pub mod mask;
pub mod maskpub;
pub mod recorder;
pub mod registry;
pub mod scenario;
pub mod supervisor;
pub mod sync;
pub mod transport;
pub mod vsensor;
