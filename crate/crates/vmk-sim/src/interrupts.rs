//! Emulated interrupt plumbing: an I/O APIC redirection table that can
//! broadcast one vector to many sandboxes, inter-processor interrupts
//! between monitors, and the early-demultiplex decision each sandbox
//! makes on a delivered interrupt.
//!
//! Nothing here involves a monitor on the delivery path: interrupts go
//! straight to sandbox kernels, and a sandbox that is not the packet's
//! real destination discards it after a fixed demux check.

use std::collections::{BTreeMap, BTreeSet};

use crate::devices::{IcmpPacket, VirtualInterface};
use crate::mem::MonitorToken;
use crate::sandbox::SandboxId;
use crate::{Error, Result};

/// Where one vector goes.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Destinations {
    BroadcastAll,
    Set(BTreeSet<SandboxId>),
}

impl Destinations {
    pub fn set(ids: impl IntoIterator<Item = SandboxId>) -> Destinations {
        Destinations::Set(ids.into_iter().collect())
    }

    fn is_empty(&self) -> bool {
        match self {
            Destinations::BroadcastAll => false,
            Destinations::Set(s) => s.is_empty(),
        }
    }
}

/// Who is asking for a redirect.
pub enum RedirectAuthority<'a> {
    /// Any monitor may program the table.
    Monitor(&'a MonitorToken),
    /// A sandbox kernel needs a standing grant for that vector.
    Sandbox(SandboxId),
}

/// The emulated I/O APIC. One entry per vector; mutation is a single
/// atomic replacement, so no raise ever sees a half-updated set.
#[derive(Default)]
pub struct RedirectionTable {
    entries: BTreeMap<u8, Destinations>,
    grants: BTreeSet<(u8, SandboxId)>,
}

impl RedirectionTable {
    /// Boot-time programming (no capability: the platform sets itself
    /// up before any guest runs).
    pub fn program(&mut self, vector: u8, dests: Destinations) -> Result<()> {
        if dests.is_empty() {
            return Err(Error::Config(format!(
                "vector {vector:#x} needs at least one destination"
            )));
        }
        self.entries.insert(vector, dests);
        Ok(())
    }

    /// Grants `sandbox` the right to redirect `vector` later (handed
    /// out by its monitor during recovery).
    pub fn grant(&mut self, vector: u8, sandbox: SandboxId) {
        self.grants.insert((vector, sandbox));
    }

    pub fn has_entry(&self, vector: u8) -> bool {
        self.entries.contains_key(&vector)
    }

    /// Destinations for a raise, in ascending sandbox order. `None`
    /// means the vector is unprogrammed and the raise is dropped.
    pub fn resolve(&self, vector: u8, all_sandboxes: &[SandboxId]) -> Option<Vec<SandboxId>> {
        match self.entries.get(&vector)? {
            Destinations::BroadcastAll => Some(all_sandboxes.to_vec()),
            Destinations::Set(s) => Some(s.iter().copied().collect()),
        }
    }

    /// Atomically replaces a vector's destination set. Monitors may
    /// always do this; a sandbox needs a prior grant.
    pub fn redirect(
        &mut self,
        vector: u8,
        new: Destinations,
        by: RedirectAuthority<'_>,
    ) -> Result<()> {
        match by {
            RedirectAuthority::Monitor(_) => {}
            RedirectAuthority::Sandbox(sb) => {
                if !self.grants.contains(&(vector, sb)) {
                    return Err(Error::Capability);
                }
            }
        }
        if new.is_empty() {
            return Err(Error::Config(format!(
                "vector {vector:#x} needs at least one destination"
            )));
        }
        self.entries.insert(vector, new);
        Ok(())
    }
}

/// Payload carried by a recovery-kickstart IPI: everything the target
/// monitor needs to take over a device.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RecoveryDescriptor {
    pub device: u32,
    pub vector: u8,
    pub channels: Vec<u32>,
    pub fault: usize,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum IpiPayload {
    RecoveryKickstart(RecoveryDescriptor),
    Generic(u32),
}

impl IpiPayload {
    pub fn tag(&self) -> &'static str {
        match self {
            IpiPayload::RecoveryKickstart(_) => "recovery-kickstart",
            IpiPayload::Generic(_) => "generic",
        }
    }
}

/// Inter-processor interrupt between two sandboxes' monitors.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Ipi {
    pub src: SandboxId,
    pub dst: SandboxId,
    pub vector: u8,
    pub payload: IpiPayload,
}

impl Ipi {
    pub fn new(src: SandboxId, dst: SandboxId, vector: u8, payload: IpiPayload) -> Result<Ipi> {
        if src == dst {
            return Err(Error::Config(format!("ipi to self (sandbox {src})")));
        }
        Ok(Ipi {
            src,
            dst,
            vector,
            payload,
        })
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum DemuxDecision {
    Handle,
    Discard,
}

/// The driver-level early check on a delivered interrupt: handle only
/// if this sandbox has a driver instance and the packet addresses one
/// of its virtual interfaces.
pub fn early_demux(
    has_driver: bool,
    vifs: &[VirtualInterface],
    packet: &IcmpPacket,
) -> DemuxDecision {
    if !has_driver {
        return DemuxDecision::Discard;
    }
    if vifs.iter().any(|v| v.ip == packet.dst_ip) {
        DemuxDecision::Handle
    } else {
        DemuxDecision::Discard
    }
}
