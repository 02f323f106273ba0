//! The 32-bit fwmark space shared by every piece of software on a node.
//!
//! Several networking components claim bits of the packet mark for their own
//! use. A [`FwMarkSpace`] takes the declared reservations, works out which bits
//! are left, and hands out per-pod marks built only from those bits. Allocation
//! state is persisted to a small text file so a restarted daemon never hands
//! out a mark that is still in use.
//!
//! Registry file grammar, one reservation per line:
//!
//! ```text
//! # comment
//! <software name> <hex mask>
//! ```
//!
//! The mask is the last whitespace-separated token; everything before it is
//! the name, so names may contain spaces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

/// Reservations published by common Kubernetes networking software.
pub const DEFAULT_REGISTRY: &str = "\
# Known fwmark bit reservations.
# <software> <mask>
Cilium 0xFFFF1FFF
AWS CNI 0x00000080
CNI Portmap 0x00002000
Kubernetes 0x0000C000
Calico 0xFFFF0000
Weave Net 0x00060000
Tailscale 0x000C0000
";

const STATE_HEADER: &str = "fwmark-state v1";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("line {line}: malformed mask {token:?}")]
    MalformedMask { line: usize, token: String },
    #[error("line {line}: expected `<name> <hex-mask>`")]
    MalformedLine { line: usize },
    #[error("line {line}: mask for {name:?} is zero")]
    ZeroMask { line: usize, name: String },
    #[error("duplicate software name {0:?}")]
    DuplicateName(String),
}

#[derive(Debug, Error)]
pub enum FwMarkError {
    #[error("no fwmark left in free mask {free_mask:#010x}")]
    Exhausted { free_mask: u32 },
    #[error("failed to persist fwmark state to {path}: {source}")]
    Persistence {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt fwmark state file {path}: {reason}")]
    CorruptState { path: PathBuf, reason: String },
    #[error("mark {mark:#010x} is not usable under reserved mask {reserved:#010x}")]
    Reserved { mark: u32, reserved: u32 },
}

/// One piece of software and the mark bits it owns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservedEntry {
    pub software: String,
    pub mask: u32,
}

impl ReservedEntry {
    pub fn new(software: impl Into<String>, mask: u32) -> Self {
        Self {
            software: software.into(),
            mask,
        }
    }
}

/// A nonzero packet mark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FwMark(u32);

impl FwMark {
    pub fn new(value: u32) -> Option<Self> {
        (value != 0).then_some(Self(value))
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Display for FwMark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

fn parse_hex_u32(token: &str) -> Option<u32> {
    let digits = token
        .strip_prefix("0x")
        .or_else(|| token.strip_prefix("0X"))
        .unwrap_or(token);
    if digits.is_empty() || digits.len() > 8 {
        return None;
    }
    u32::from_str_radix(digits, 16).ok()
}

/// Parses a registry document. Overlapping masks are accepted with a warning.
pub fn load_registry(document: &str) -> Result<Vec<ReservedEntry>, RegistryError> {
    let mut entries: Vec<ReservedEntry> = Vec::new();
    for (idx, raw) in document.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (name, token) = line
            .rsplit_once(char::is_whitespace)
            .ok_or(RegistryError::MalformedLine { line: line_no })?;
        let name = name.trim();
        if name.is_empty() {
            return Err(RegistryError::MalformedLine { line: line_no });
        }
        let mask = parse_hex_u32(token).ok_or_else(|| RegistryError::MalformedMask {
            line: line_no,
            token: token.to_string(),
        })?;
        if mask == 0 {
            return Err(RegistryError::ZeroMask {
                line: line_no,
                name: name.to_string(),
            });
        }
        if entries.iter().any(|e| e.software == name) {
            return Err(RegistryError::DuplicateName(name.to_string()));
        }
        for other in &entries {
            if other.mask & mask != 0 {
                warn!(
                    "fwmark reservation {:?} ({:#010x}) overlaps {:?} ({:#010x})",
                    name, mask, other.software, other.mask
                );
            }
        }
        entries.push(ReservedEntry::new(name, mask));
    }
    Ok(entries)
}

/// OR of every reservation.
pub fn reserved_mask(entries: &[ReservedEntry]) -> u32 {
    entries.iter().fold(0, |acc, e| acc | e.mask)
}

/// Bits nobody has claimed.
pub fn free_mask(entries: &[ReservedEntry]) -> u32 {
    !reserved_mask(entries)
}

/// Number of distinct nonzero marks expressible with the free bits.
pub fn capacity(free_mask: u32) -> u64 {
    (1u64 << free_mask.count_ones()) - 1
}

/// Per-reservation line of an [`Audit`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditEntry {
    pub software: String,
    pub mask: u32,
    pub bits: u32,
    /// Bits no other entry claims.
    pub exclusive_bits: u32,
}

/// What a set of reservations leaves for QoS marks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Audit {
    pub reserved_mask: u32,
    pub free_mask: u32,
    pub free_bits: u32,
    pub capacity: u64,
    pub entries: Vec<AuditEntry>,
}

pub fn audit(entries: &[ReservedEntry]) -> Audit {
    let free = free_mask(entries);
    let rows = entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let others = entries
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .fold(0u32, |acc, (_, o)| acc | o.mask);
            AuditEntry {
                software: e.software.clone(),
                mask: e.mask,
                bits: e.mask.count_ones(),
                exclusive_bits: (e.mask & !others).count_ones(),
            }
        })
        .collect();
    Audit {
        reserved_mask: reserved_mask(entries),
        free_mask: free,
        free_bits: free.count_ones(),
        capacity: capacity(free),
        entries: rows,
    }
}

impl Audit {
    pub fn summary(&self) -> String {
        format!("{} free bits, capacity {} marks", self.free_bits, self.capacity)
    }

    pub fn render_text(&self) -> String {
        let mut out = format!(
            "reserved mask {:#010x}\nfree mask     {:#010x}\n{}\n",
            self.reserved_mask,
            self.free_mask,
            self.summary()
        );
        if !self.entries.is_empty() {
            out.push_str(&format!("\n{:<20} {:<10} {:>4} {:>9}\n", "software", "mask", "bits", "exclusive"));
        }
        for e in &self.entries {
            out.push_str(&format!(
                "{:<20} {:#010x} {:>4} {:>9}\n",
                e.software, e.mask, e.bits, e.exclusive_bits
            ));
        }
        out
    }

    /// Tab-separated key/value lines, then one `entry` line per reservation.
    pub fn render_machine(&self) -> String {
        let mut out = format!(
            "reserved_mask\t{:#010x}\nfree_mask\t{:#010x}\nfree_bits\t{}\ncapacity\t{}\n",
            self.reserved_mask, self.free_mask, self.free_bits, self.capacity
        );
        for e in &self.entries {
            out.push_str(&format!("entry\t{}\t{:#010x}\t{}\t{}\n", e.software, e.mask, e.bits, e.exclusive_bits));
        }
        out
    }
}

/// Allocation state over the free part of the mark space.
#[derive(Debug)]
pub struct FwMarkSpace {
    entries: Vec<ReservedEntry>,
    reserved: u32,
    allocated: BTreeSet<u32>,
    persistence: Option<PathBuf>,
    dirty: bool,
}

impl FwMarkSpace {
    /// Purely in-memory space.
    pub fn new(entries: Vec<ReservedEntry>) -> Self {
        let reserved = reserved_mask(&entries);
        Self {
            entries,
            reserved,
            allocated: BTreeSet::new(),
            persistence: None,
            dirty: false,
        }
    }

    /// Opens a persisted space. An existing state file supplies the allocated
    /// set; the reservations always come from `entries`.
    pub fn open(entries: Vec<ReservedEntry>, path: impl Into<PathBuf>) -> Result<Self, FwMarkError> {
        let path = path.into();
        let mut space = Self::new(entries);
        match fs::read_to_string(&path) {
            Ok(text) => {
                space.allocated = parse_state(&text).map_err(|reason| FwMarkError::CorruptState {
                    path: path.clone(),
                    reason,
                })?;
                if let Some(&bad) = space.allocated.iter().find(|m| *m & space.reserved != 0) {
                    return Err(FwMarkError::Reserved {
                        mark: bad,
                        reserved: space.reserved,
                    });
                }
                space.persistence = Some(path);
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                space.persistence = Some(path);
                space.persist()?;
            }
            Err(source) => return Err(FwMarkError::Persistence { path, source }),
        }
        Ok(space)
    }

    pub fn entries(&self) -> &[ReservedEntry] {
        &self.entries
    }

    pub fn reserved_mask(&self) -> u32 {
        self.reserved
    }

    pub fn free_mask(&self) -> u32 {
        !self.reserved
    }

    pub fn allocated(&self) -> &BTreeSet<u32> {
        &self.allocated
    }

    pub fn is_allocated(&self, mark: FwMark) -> bool {
        self.allocated.contains(&mark.value())
    }

    /// Lowest unallocated nonzero value whose bits all lie in the free mask.
    pub fn allocate(&mut self) -> Result<FwMark, FwMarkError> {
        let free = self.free_mask();
        let mut candidate = next_submask(0, free);
        while let Some(value) = candidate {
            if !self.allocated.contains(&value) {
                self.allocated.insert(value);
                if let Err(e) = self.persist() {
                    self.allocated.remove(&value);
                    return Err(e);
                }
                return Ok(FwMark(value));
            }
            candidate = next_submask(value, free);
        }
        Err(FwMarkError::Exhausted { free_mask: free })
    }

    /// Releasing a mark that is not allocated is a no-op. On a persistence
    /// failure the in-memory release stands and the next successful write
    /// (or [`FwMarkSpace::flush`]) catches the file up.
    pub fn release(&mut self, mark: FwMark) -> Result<(), FwMarkError> {
        if self.allocated.remove(&mark.value()) || self.dirty {
            self.persist()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), FwMarkError> {
        if self.dirty {
            self.persist()?;
        }
        Ok(())
    }

    /// Canonical state text: header, reservations, then allocated marks, each
    /// section in sorted order.
    pub fn state_text(&self) -> String {
        let mut out = String::from(STATE_HEADER);
        out.push('\n');
        let sorted: BTreeMap<&str, u32> = self
            .entries
            .iter()
            .map(|e| (e.software.as_str(), e.mask))
            .collect();
        for (name, mask) in sorted {
            out.push_str(&format!("reserved {mask:#010x} {name}\n"));
        }
        for mark in &self.allocated {
            out.push_str(&format!("allocated {mark:#010x}\n"));
        }
        out
    }

    fn persist(&mut self) -> Result<(), FwMarkError> {
        let Some(path) = self.persistence.clone() else {
            return Ok(());
        };
        match write_atomic(&path, self.state_text().as_bytes()) {
            Ok(()) => {
                self.dirty = false;
                Ok(())
            }
            Err(source) => {
                self.dirty = true;
                Err(FwMarkError::Persistence { path, source })
            }
        }
    }
}

/// Next value strictly greater than `current` whose bits are a subset of
/// `mask`, in increasing numeric order.
fn next_submask(current: u32, mask: u32) -> Option<u32> {
    let next = (current | !mask).wrapping_add(1) & mask;
    (next != 0).then_some(next)
}

fn parse_state(text: &str) -> Result<BTreeSet<u32>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(STATE_HEADER) {
        return Err("missing or unsupported header".into());
    }
    let mut allocated = BTreeSet::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (kind, rest) = line.split_once(' ').ok_or_else(|| format!("bad line {line:?}"))?;
        match kind {
            "reserved" => {}
            "allocated" => {
                let value = parse_hex_u32(rest.trim())
                    .filter(|v| *v != 0)
                    .ok_or_else(|| format!("bad mark {rest:?}"))?;
                if !allocated.insert(value) {
                    return Err(format!("mark {value:#010x} listed twice"));
                }
            }
            _ => return Err(format!("unknown record {kind:?}")),
        }
    }
    Ok(allocated)
}

/// Write-to-temp then rename, so readers see either the old or the new file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(
        ".{}.tmp.{}.{:?}",
        file_name.to_string_lossy(),
        std::process::id(),
        std::thread::current().id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
