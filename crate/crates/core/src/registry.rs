//! Device registry: the catalog of registered modules, two-tier identity
//! matching, stable mask-bit assignment, and hotplug rule generation.
//!
//! Registration lives in a single TOML file with one `[device.<name>]`
//! table per module. Bits are assigned in declaration order and are fixed
//! for the lifetime of a daemon run.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_DEVICES: usize = 64;

/// USB-style identity: vendor id, product id, optional serial.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceIdentity {
    pub vid: u16,
    pub pid: u16,
    pub serial: Option<String>,
}

impl DeviceIdentity {
    pub fn new(vid: u16, pid: u16, serial: Option<&str>) -> Self {
        Self { vid, pid, serial: serial.map(str::to_owned) }
    }
}

impl fmt::Display for DeviceIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.serial {
            Some(s) => write!(f, "{:04x}:{:04x}/{}", self.vid, self.pid, s),
            None => write!(f, "{:04x}:{:04x}", self.vid, self.pid),
        }
    }
}

/// Parse a 16-bit hex id, case-insensitive, optional `0x` prefix.
pub fn parse_hex_id(text: &str) -> Result<u16, RegistryError> {
    let t = text.trim();
    let t = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")).unwrap_or(t);
    u16::from_str_radix(t, 16).map_err(|_| RegistryError::BadIdentity(text.to_owned()))
}

/// One registered module: identity, launch commands, topic, mask bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub name: String,
    pub identity: DeviceIdentity,
    /// Command line spawned on attach.
    pub on_attach: String,
    pub on_detach: Option<String>,
    pub topic: String,
    /// Mask bit index, assigned in declaration order.
    pub bit: u8,
    /// Declared payload dimensions used for zero-fill.
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Registry {
    pub descriptors: Vec<DeviceDescriptor>,
    /// Incremented on any mutation; the registry is immutable after load,
    /// so in practice this distinguishes reloads.
    pub version_stamp: u64,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("duplicate device name {0:?}")]
    DuplicateName(String),
    #[error("duplicate topic {0:?}")]
    DuplicateTopic(String),
    #[error("too many devices: {0} (max {MAX_DEVICES})")]
    TooManyDevices(usize),
    #[error("bad identity field {0:?}")]
    BadIdentity(String),
    #[error("device {device:?}: missing required key {key:?}")]
    MissingField { device: String, key: String },
    #[error("device {device:?}: empty topic")]
    EmptyTopic { device: String },
}

#[derive(Debug, Deserialize)]
struct RawDevice {
    vid: String,
    pid: String,
    serial: Option<String>,
    node: String,
    topic: String,
    on_detach: Option<String>,
    shape: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
struct RawConfig {
    #[serde(default)]
    device: toml::map::Map<String, toml::Value>,
}

/// Loads and validates a registry file, assigning bits in declaration order.
pub fn load_registry(config_text: &str) -> Result<Registry, RegistryError> {
    // toml preserves table declaration order (preserve_order feature is on
    // for toml::map), which carries the bit assignment.
    let raw: RawConfig =
        toml::from_str(config_text).map_err(|e| RegistryError::Parse(e.to_string()))?;

    if raw.device.len() > MAX_DEVICES {
        return Err(RegistryError::TooManyDevices(raw.device.len()));
    }

    let mut names = HashSet::new();
    let mut topics = HashSet::new();
    let mut descriptors = Vec::with_capacity(raw.device.len());

    for (idx, (name, value)) in raw.device.iter().enumerate() {
        let dev: RawDevice = value.clone().try_into().map_err(|e: toml::de::Error| {
            let msg = e.to_string();
            if let Some(key) = missing_key(&msg) {
                RegistryError::MissingField { device: name.clone(), key }
            } else {
                RegistryError::Parse(format!("device {name:?}: {msg}"))
            }
        })?;

        if !names.insert(name.clone()) {
            return Err(RegistryError::DuplicateName(name.clone()));
        }
        if dev.topic.is_empty() {
            return Err(RegistryError::EmptyTopic { device: name.clone() });
        }
        if !topics.insert(dev.topic.clone()) {
            return Err(RegistryError::DuplicateTopic(dev.topic.clone()));
        }

        descriptors.push(DeviceDescriptor {
            name: name.clone(),
            identity: DeviceIdentity {
                vid: parse_hex_id(&dev.vid)?,
                pid: parse_hex_id(&dev.pid)?,
                serial: dev.serial,
            },
            on_attach: dev.node,
            on_detach: dev.on_detach,
            topic: dev.topic,
            bit: idx as u8,
            shape: dev.shape.unwrap_or_default(),
        });
    }

    Ok(Registry { descriptors, version_stamp: 1 })
}

fn missing_key(msg: &str) -> Option<String> {
    // toml reports "missing field `pid`"
    let start = msg.find("missing field `")? + "missing field `".len();
    let rest = &msg[start..];
    let end = rest.find('`')?;
    Some(rest[..end].to_owned())
}

impl Registry {
    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn by_name(&self, name: &str) -> Option<&DeviceDescriptor> {
        self.descriptors.iter().find(|d| d.name == name)
    }

    pub fn by_bit(&self, bit: u8) -> Option<&DeviceDescriptor> {
        self.descriptors.iter().find(|d| d.bit == bit)
    }

    /// Serializes back to the registry file format. `load_registry` of the
    /// output yields the same descriptor set.
    pub fn to_toml_string(&self) -> String {
        let mut out = String::new();
        for d in &self.descriptors {
            out.push_str(&format!("[device.{}]\n", d.name));
            out.push_str(&format!("vid = \"0x{:04x}\"\n", d.identity.vid));
            out.push_str(&format!("pid = \"0x{:04x}\"\n", d.identity.pid));
            if let Some(s) = &d.identity.serial {
                out.push_str(&format!("serial = {}\n", toml_quote(s)));
            }
            out.push_str(&format!("node = {}\n", toml_quote(&d.on_attach)));
            out.push_str(&format!("topic = {}\n", toml_quote(&d.topic)));
            if let Some(c) = &d.on_detach {
                out.push_str(&format!("on_detach = {}\n", toml_quote(c)));
            }
            if !d.shape.is_empty() {
                let dims: Vec<String> = d.shape.iter().map(|n| n.to_string()).collect();
                out.push_str(&format!("shape = [{}]\n", dims.join(", ")));
            }
            out.push('\n');
        }
        out
    }
}

fn toml_quote(s: &str) -> String {
    toml::Value::String(s.to_owned()).to_string()
}

/// Two-tier match: exact (vid+pid+serial) first, then model (vid+pid with
/// no serial declared). Model candidates whose name is in `occupancy`
/// (already bound to a live device) are skipped.
pub fn match_device<'r>(
    identity: &DeviceIdentity,
    registry: &'r Registry,
    occupancy: &HashSet<String>,
) -> Option<&'r DeviceDescriptor> {
    // Pass 1: exact match on vid + pid + serial.
    if identity.serial.is_some() {
        if let Some(d) = registry.descriptors.iter().find(|d| {
            d.identity.vid == identity.vid
                && d.identity.pid == identity.pid
                && d.identity.serial == identity.serial
        }) {
            return Some(d);
        }
    }
    // Pass 2: model match on vid + pid against serial-less entries.
    registry.descriptors.iter().find(|d| {
        d.identity.serial.is_none()
            && d.identity.vid == identity.vid
            && d.identity.pid == identity.pid
            && !occupancy.contains(&d.name)
    })
}

/// Emits one udev-style rule line per descriptor creating a stable
/// `rapid/<name>` symlink. Output is deterministic for a given registry.
pub fn generate_hotplug_rules(registry: &Registry) -> String {
    let mut out = String::from(
        "# Hotplug rules generated by rapidctl register; install as 99-rapid.rules\n",
    );
    for d in &registry.descriptors {
        let mut line = format!(
            "SUBSYSTEM==\"usb\", ATTRS{{idVendor}}==\"{:04x}\", ATTRS{{idProduct}}==\"{:04x}\"",
            d.identity.vid, d.identity.pid
        );
        if let Some(serial) = &d.identity.serial {
            line.push_str(&format!(", ATTRS{{serial}}==\"{serial}\""));
        }
        line.push_str(&format!(", SYMLINK+=\"rapid/{}\"\n", d.name));
        out.push_str(&line);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Serialize)]
pub struct Finding {
    pub severity: Severity,
    /// 1-based line in the config text, when attributable.
    pub line: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        !self.findings.iter().any(|f| f.severity == Severity::Error)
    }
}

/// Validates a registry file without loading it for use. Empty error
/// findings iff `load_registry` would succeed.
pub fn validate_registration(config_text: &str) -> ValidationReport {
    let mut report = ValidationReport::default();
    match load_registry(config_text) {
        Ok(reg) => {
            for d in &reg.descriptors {
                if d.identity.serial.is_none() {
                    report.findings.push(Finding {
                        severity: Severity::Warning,
                        line: device_line(config_text, &d.name),
                        message: format!(
                            "device {:?} has no serial; model match binds at most one unit at a time",
                            d.name
                        ),
                    });
                }
                if d.shape.is_empty() {
                    report.findings.push(Finding {
                        severity: Severity::Warning,
                        line: device_line(config_text, &d.name),
                        message: format!(
                            "device {:?} declares no shape; zero-fill payload will be empty",
                            d.name
                        ),
                    });
                }
            }
        }
        Err(err) => {
            let line = match &err {
                RegistryError::DuplicateName(n) => device_line(config_text, n),
                RegistryError::MissingField { device, .. } => device_line(config_text, device),
                RegistryError::EmptyTopic { device } => device_line(config_text, device),
                _ => None,
            };
            report.findings.push(Finding {
                severity: Severity::Error,
                line,
                message: err.to_string(),
            });
        }
    }
    report
}

fn device_line(text: &str, name: &str) -> Option<usize> {
    let needle = format!("[device.{name}]");
    text.lines().position(|l| l.trim() == needle).map(|i| i + 1)
}
