//! The simulated shared NIC: one physical device, one driver instance
//! per sharing sandbox, per-sandbox virtual interfaces, and the 1-byte
//! test-and-set lock in shared memory that serializes access to the
//! shared hardware. Driver corruption and reinitialization hooks live
//! here; the recovery module sequences them.

use crate::engine::SimTime;
use crate::mem::Gpa;
use crate::sandbox::SandboxId;
use crate::{Error, Result};

#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct DeviceId(pub u32);

#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct DriverId(pub u32);

/// A NIC shared across sandboxes. Drivers attach per sandbox; the
/// lock byte lives in the shared communication region.
#[derive(Clone, Debug)]
pub struct NicDevice {
    pub id: DeviceId,
    pub vector: u8,
    pub attached: Vec<DriverId>,
    pub shared_lock_gpa: Gpa,
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum DriverState {
    Healthy,
    Corrupted,
    Reinitializing,
}

impl DriverState {
    pub fn as_str(self) -> &'static str {
        match self {
            DriverState::Healthy => "healthy",
            DriverState::Corrupted => "corrupted",
            DriverState::Reinitializing => "reinitializing",
        }
    }
}

/// Which of the two available driver builds is loaded. Recovery can
/// swap to the alternate as a diversity measure.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Implementation {
    Primary,
    Alternate,
}

impl Implementation {
    pub fn toggled(self) -> Implementation {
        match self {
            Implementation::Primary => Implementation::Alternate,
            Implementation::Alternate => Implementation::Primary,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Implementation::Primary => "primary",
            Implementation::Alternate => "alternate",
        }
    }
}

/// One sandbox's instance of the shared-NIC driver. Its private data
/// is duplicated per sandbox inside the owner's kernel region.
#[derive(Clone, Debug)]
pub struct DriverInstance {
    pub id: DriverId,
    pub sandbox: SandboxId,
    pub device: DeviceId,
    pub state: DriverState,
    pub private_data_gpa: Gpa,
    pub private_data_len: u64,
    pub implementation: Implementation,
}

impl DriverInstance {
    /// Fault-injection hook: flips the state; the caller performs the
    /// blast writes through guest accesses so isolation is enforced by
    /// the page tables, not by politeness.
    pub fn corrupt(&mut self) -> Result<()> {
        if self.state != DriverState::Healthy {
            return Err(Error::State(format!(
                "corrupting driver {:?} while {}",
                self.id,
                self.state.as_str()
            )));
        }
        self.state = DriverState::Corrupted;
        Ok(())
    }

    /// Starts reinitialization, optionally swapping implementations.
    pub fn begin_reinit(&mut self, switch_implementation: bool) -> Result<()> {
        if self.state == DriverState::Reinitializing {
            return Err(Error::State(format!(
                "driver {:?} already reinitializing",
                self.id
            )));
        }
        if switch_implementation {
            self.implementation = self.implementation.toggled();
        }
        self.state = DriverState::Reinitializing;
        Ok(())
    }

    pub fn finish_reinit(&mut self) -> Result<()> {
        if self.state != DriverState::Reinitializing {
            return Err(Error::State(format!(
                "driver {:?} finish_reinit while {}",
                self.id,
                self.state.as_str()
            )));
        }
        self.state = DriverState::Healthy;
        Ok(())
    }

    pub fn is_healthy(&self) -> bool {
        self.state == DriverState::Healthy
    }
}

/// Per-sandbox view of the shared NIC on the wire.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct VirtualInterface {
    pub sandbox: SandboxId,
    pub ip: [u8; 4],
    pub mac: [u8; 6],
}

pub fn format_ip(ip: [u8; 4]) -> String {
    format!("{}.{}.{}.{}", ip[0], ip[1], ip[2], ip[3])
}

pub fn parse_ip(s: &str) -> Result<[u8; 4]> {
    let parts: Vec<&str> = s.split('.').collect();
    if parts.len() != 4 {
        return Err(Error::Config(format!("bad ipv4 address: {s:?}")));
    }
    let mut ip = [0u8; 4];
    for (i, p) in parts.iter().enumerate() {
        ip[i] = p
            .parse::<u8>()
            .map_err(|_| Error::Config(format!("bad ipv4 address: {s:?}")))?;
    }
    Ok(ip)
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum IcmpKind {
    Request,
    Reply,
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct IcmpPacket {
    pub kind: IcmpKind,
    pub seq: u32,
    pub src_ip: [u8; 4],
    pub dst_ip: [u8; 4],
    pub sent_at: SimTime,
}

impl IcmpPacket {
    pub fn reply_to(&self, now: SimTime) -> IcmpPacket {
        IcmpPacket {
            kind: IcmpKind::Reply,
            seq: self.seq,
            src_ip: self.dst_ip,
            dst_ip: self.src_ip,
            sent_at: now,
        }
    }
}

pub const LOCK_FREE: u8 = 0;
pub const LOCK_HELD: u8 = 1;

/// Test-and-set over the lock byte's current value: returns the byte
/// to write back and whether the caller acquired the lock.
pub fn lock_try_acquire(current: u8) -> (u8, bool) {
    if current == LOCK_FREE {
        (LOCK_HELD, true)
    } else {
        (current, false)
    }
}
