//! Attach/detach event sources feeding the supervisor: a bounded
//! injection queue (the hardware-free test seam) and an optional Linux
//! netlink uevent adapter.
//!
//! The injection control protocol is one JSON object per line:
//! `{"kind":"attach","vid":"0x1234","pid":"0x5678","serial":"TACL001"}`.

use std::sync::mpsc::{Receiver, SyncSender, TrySendError};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{parse_hex_id, DeviceIdentity};

pub const EVENT_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Attach,
    Detach,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HotplugEvent {
    pub kind: EventKind,
    pub identity: DeviceIdentity,
    pub device_path: Option<String>,
    pub timestamp_ns: u64,
}

#[derive(Debug, Error)]
pub enum EventBusError {
    #[error("event channel closed")]
    ChannelClosed,
    #[error("event queue full ({EVENT_QUEUE_CAPACITY})")]
    Overflow,
}

/// Producer half of the bus; cheap to clone into every source.
#[derive(Clone)]
pub struct EventSender {
    tx: SyncSender<HotplugEvent>,
}

impl EventSender {
    /// Enqueues one event in injection order without blocking the caller.
    pub fn inject(&self, event: HotplugEvent) -> Result<(), EventBusError> {
        self.tx.try_send(event).map_err(|e| match e {
            TrySendError::Full(_) => EventBusError::Overflow,
            TrySendError::Disconnected(_) => EventBusError::ChannelClosed,
        })
    }
}

/// Multiple producers, single consumer (the supervisor loop).
pub fn event_bus() -> (EventSender, Receiver<HotplugEvent>) {
    let (tx, rx) = std::sync::mpsc::sync_channel(EVENT_QUEUE_CAPACITY);
    (EventSender { tx }, rx)
}

/// Wire form of one control-socket line.
#[derive(Debug, Serialize, Deserialize)]
pub struct InjectRequest {
    pub kind: EventKind,
    pub vid: String,
    pub pid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub serial: Option<String>,
}

#[derive(Debug, Error)]
pub enum ControlParseError {
    #[error("bad control line: {0}")]
    Json(String),
    #[error("bad identity: {0}")]
    Identity(String),
}

pub fn parse_inject_line(line: &str, now_ns: u64) -> Result<HotplugEvent, ControlParseError> {
    let req: InjectRequest =
        serde_json::from_str(line).map_err(|e| ControlParseError::Json(e.to_string()))?;
    Ok(HotplugEvent {
        kind: req.kind,
        identity: DeviceIdentity {
            vid: parse_hex_id(&req.vid).map_err(|e| ControlParseError::Identity(e.to_string()))?,
            pid: parse_hex_id(&req.pid).map_err(|e| ControlParseError::Identity(e.to_string()))?,
            serial: req.serial,
        },
        device_path: None,
        timestamp_ns: now_ns,
    })
}

pub fn inject_line(event: &HotplugEvent) -> String {
    serde_json::to_string(&InjectRequest {
        kind: event.kind,
        vid: format!("0x{:04x}", event.identity.vid),
        pid: format!("0x{:04x}", event.identity.pid),
        serial: event.identity.serial.clone(),
    })
    .expect("inject request serializes")
}

#[derive(Debug, Error)]
pub enum OsEventError {
    #[error("platform has no usable hotplug facility: {0}")]
    Unsupported(String),
}

/// Starts the Linux kernel uevent listener and forwards add/remove events
/// with a USB identity into the bus. Returns `Unsupported` where the
/// netlink socket cannot be opened; the daemon then runs with the
/// injection source only.
pub fn subscribe_os_events(
    sender: EventSender,
    clock: Arc<dyn crate::clock::Clock>,
) -> Result<std::thread::JoinHandle<()>, OsEventError> {
    #[cfg(target_os = "linux")]
    {
        let sock = uevent::open_socket().map_err(OsEventError::Unsupported)?;
        Ok(std::thread::Builder::new()
            .name("uevent".into())
            .spawn(move || uevent::listen(sock, sender, clock))
            .expect("spawn uevent thread"))
    }
    #[cfg(not(target_os = "linux"))]
    {
        let _ = (sender, clock);
        Err(OsEventError::Unsupported("no kernel uevent source on this platform".into()))
    }
}

#[cfg(target_os = "linux")]
mod uevent {
    use super::*;

    const NETLINK_KOBJECT_UEVENT: i32 = 15;

    pub struct UeventSocket(i32);

    impl Drop for UeventSocket {
        fn drop(&mut self) {
            unsafe { libc::close(self.0) };
        }
    }

    pub fn open_socket() -> Result<UeventSocket, String> {
        unsafe {
            let fd = libc::socket(
                libc::AF_NETLINK,
                libc::SOCK_DGRAM | libc::SOCK_CLOEXEC,
                NETLINK_KOBJECT_UEVENT,
            );
            if fd < 0 {
                return Err(format!("socket: {}", std::io::Error::last_os_error()));
            }
            let mut addr: libc::sockaddr_nl = std::mem::zeroed();
            addr.nl_family = libc::AF_NETLINK as u16;
            addr.nl_groups = 1; // kernel uevent broadcast group
            let rc = libc::bind(
                fd,
                &addr as *const _ as *const libc::sockaddr,
                std::mem::size_of::<libc::sockaddr_nl>() as u32,
            );
            if rc < 0 {
                let err = format!("bind: {}", std::io::Error::last_os_error());
                libc::close(fd);
                return Err(err);
            }
            Ok(UeventSocket(fd))
        }
    }

    pub fn listen(sock: UeventSocket, sender: EventSender, clock: Arc<dyn crate::clock::Clock>) {
        let mut buf = [0u8; 8192];
        loop {
            let n = unsafe {
                libc::recv(sock.0, buf.as_mut_ptr() as *mut libc::c_void, buf.len(), 0)
            };
            if n <= 0 {
                return;
            }
            if let Some(event) = parse_uevent(&buf[..n as usize], clock.now_ns()) {
                if sender.inject(event).is_err() {
                    return;
                }
            }
        }
    }

    /// Parses one kernel uevent datagram: a header line then
    /// NUL-separated KEY=VALUE pairs. Only USB add/remove events carrying
    /// a PRODUCT key become hotplug events.
    pub fn parse_uevent(datagram: &[u8], now_ns: u64) -> Option<HotplugEvent> {
        let mut action = None;
        let mut product = None;
        let mut serial = None;
        let mut devname = None;
        for field in datagram.split(|&b| b == 0) {
            let field = std::str::from_utf8(field).ok()?;
            if let Some(v) = field.strip_prefix("ACTION=") {
                action = Some(v.to_owned());
            } else if let Some(v) = field.strip_prefix("PRODUCT=") {
                product = Some(v.to_owned());
            } else if let Some(v) = field.strip_prefix("SERIAL=") {
                serial = Some(v.to_owned());
            } else if let Some(v) = field.strip_prefix("DEVNAME=") {
                devname = Some(v.to_owned());
            }
        }
        let kind = match action.as_deref() {
            Some("add") => EventKind::Attach,
            Some("remove") => EventKind::Detach,
            _ => return None,
        };
        // PRODUCT is vid/pid/bcdDevice in bare hex.
        let product = product?;
        let mut parts = parts_of(&product);
        let vid = parts.next()?;
        let pid = parts.next()?;
        Some(HotplugEvent {
            kind,
            identity: DeviceIdentity { vid, pid, serial },
            device_path: devname,
            timestamp_ns: now_ns,
        })
    }

    fn parts_of(product: &str) -> impl Iterator<Item = u16> + '_ {
        product.split('/').filter_map(|p| u16::from_str_radix(p, 16).ok())
    }

    #[cfg(test)]
    mod tests {
        use super::*;

        #[test]
        fn parses_add_uevent_with_serial() {
            let mut dg = b"add@/devices/usb1/1-1".to_vec();
            dg.push(0);
            for kv in ["ACTION=add", "PRODUCT=1234/5678/100", "SERIAL=TACL001", "DEVNAME=bus/usb/001/004"] {
                dg.extend_from_slice(kv.as_bytes());
                dg.push(0);
            }
            let ev = parse_uevent(&dg, 42).unwrap();
            assert_eq!(ev.kind, EventKind::Attach);
            assert_eq!(ev.identity.vid, 0x1234);
            assert_eq!(ev.identity.pid, 0x5678);
            assert_eq!(ev.identity.serial.as_deref(), Some("TACL001"));
            assert_eq!(ev.device_path.as_deref(), Some("bus/usb/001/004"));
            assert_eq!(ev.timestamp_ns, 42);
        }

        #[test]
        fn missing_serial_yields_model_match_identity() {
            let mut dg = Vec::new();
            for kv in ["ACTION=remove", "PRODUCT=abcd/ef01/100"] {
                dg.extend_from_slice(kv.as_bytes());
                dg.push(0);
            }
            let ev = parse_uevent(&dg, 0).unwrap();
            assert_eq!(ev.kind, EventKind::Detach);
            assert!(ev.identity.serial.is_none());
        }

        #[test]
        fn ignores_non_usb_uevents() {
            let mut dg = Vec::new();
            for kv in ["ACTION=change", "SUBSYSTEM=block"] {
                dg.extend_from_slice(kv.as_bytes());
                dg.push(0);
            }
            assert!(parse_uevent(&dg, 0).is_none());
        }
    }
}
