//! Fault recovery orchestration data: fault specifications, recovery
//! policies and target selection, and the fixed phase sequences whose
//! cycle costs come from the cost model. The machine walks the phase
//! list as serialized events; nothing else contributes to downtime, so
//! reported downtime decomposes exactly into these phases.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::devices::DriverId;
use crate::engine::SimTime;
use crate::mem::Gpa;
use crate::sandbox::{CostModel, SandboxId};

#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryMode {
    /// Reinitialize the driver in the faulting sandbox.
    Local,
    /// Move the service to another sandbox; heal the origin later.
    Remote,
    /// No online recovery: halt and reboot the sandbox (comparison arm).
    Reboot,
}

impl RecoveryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RecoveryMode::Local => "local",
            RecoveryMode::Remote => "remote",
            RecoveryMode::Reboot => "reboot",
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum TargetSelection {
    Random,
    RoundRobin,
    LeastLoaded,
}

/// How a monitor recovers its sandbox's components.
#[derive(Clone, Debug)]
pub struct RecoveryPolicy {
    pub target_selection: TargetSelection,
    /// Swap to the alternate driver implementation during recovery.
    pub diversity: bool,
    /// Round-robin position; persists across recoveries.
    last_round_robin: Option<SandboxId>,
}

impl Default for RecoveryPolicy {
    fn default() -> Self {
        RecoveryPolicy {
            target_selection: TargetSelection::RoundRobin,
            diversity: true,
            last_round_robin: None,
        }
    }
}

impl RecoveryPolicy {
    pub fn new(target_selection: TargetSelection, diversity: bool) -> RecoveryPolicy {
        RecoveryPolicy {
            target_selection,
            diversity,
            last_round_robin: None,
        }
    }

    /// Picks the sandbox that takes over a service. `candidates` must
    /// be ascending and exclude the faulty sandbox; `loads` maps each
    /// candidate to the summed utilization of its resident VCPUs.
    pub fn select_target<R: Rng>(
        &mut self,
        candidates: &[SandboxId],
        loads: &BTreeMap<SandboxId, f64>,
        rng: &mut R,
    ) -> Option<SandboxId> {
        if candidates.is_empty() {
            return None;
        }
        let chosen = match self.target_selection {
            TargetSelection::Random => candidates[rng.gen_range(0..candidates.len())],
            TargetSelection::RoundRobin => {
                let next = match self.last_round_robin {
                    Some(last) => candidates.iter().copied().find(|&c| c > last),
                    None => None,
                };
                let c = next.unwrap_or(candidates[0]);
                self.last_round_robin = Some(c);
                c
            }
            TargetSelection::LeastLoaded => {
                let mut best = candidates[0];
                let mut best_load = f64::INFINITY;
                for &c in candidates {
                    let load = loads.get(&c).copied().unwrap_or(0.0);
                    if load < best_load {
                        best = c;
                        best_load = load;
                    }
                }
                best
            }
        };
        Some(chosen)
    }
}

/// One page-granular write attempted by a corrupted driver.
#[derive(Clone, Debug)]
pub struct BlastWrite {
    pub gpa: Gpa,
    pub bytes: Vec<u8>,
}

/// A scheduled fault injection.
#[derive(Clone, Debug)]
pub struct FaultSpec {
    pub at: SimTime,
    pub sandbox: SandboxId,
    pub driver: DriverId,
    pub blast: Vec<BlastWrite>,
    pub mode: RecoveryMode,
}

/// One timed step of a recovery sequence.
#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct Phase {
    pub name: &'static str,
    pub cycles: u64,
}

/// Local recovery: trap to the monitor, optionally swap the driver
/// build, resume the kernel, then reinitialize driver and network.
pub fn local_phases(cost: &CostModel, diversity: bool) -> Vec<Phase> {
    let mut v = vec![Phase {
        name: "vm_exit",
        cycles: cost.vm_exit,
    }];
    if diversity {
        v.push(Phase {
            name: "driver_switch",
            cycles: cost.driver_switch,
        });
    }
    v.extend([
        Phase {
            name: "vm_enter",
            cycles: cost.vm_enter,
        },
        Phase {
            name: "driver_reinit",
            cycles: cost.driver_reinit,
        },
        Phase {
            name: "network_reinit",
            cycles: cost.network_reinit,
        },
    ]);
    v
}

/// Remote recovery: trap, kick the target over IPI, resume the target
/// kernel at its reinit entry point, then reinitialize there.
pub fn remote_phases(cost: &CostModel) -> Vec<Phase> {
    vec![
        Phase {
            name: "vm_exit",
            cycles: cost.vm_exit,
        },
        Phase {
            name: "ipi_round_trip",
            cycles: cost.ipi_round_trip,
        },
        Phase {
            name: "vm_enter",
            cycles: cost.vm_enter,
        },
        Phase {
            name: "driver_reinit",
            cycles: cost.driver_reinit,
        },
        Phase {
            name: "network_reinit",
            cycles: cost.network_reinit,
        },
    ]
}

/// The comparison arm: the whole reboot is one opaque phase.
pub fn reboot_phases(cost: &CostModel) -> Vec<Phase> {
    vec![
        Phase {
            name: "vm_exit",
            cycles: cost.vm_exit,
        },
        Phase {
            name: "reboot",
            cycles: cost.reboot,
        },
    ]
}

pub fn phase_total(phases: &[Phase]) -> u64 {
    phases.iter().map(|p| p.cycles).sum()
}

/// Summary of one completed recovery, assembled from the trace.
#[derive(Clone, Debug, Serialize)]
pub struct RecoveryReport {
    pub mode: RecoveryMode,
    pub sandbox: u32,
    pub target: Option<u32>,
    pub phases: Vec<Phase>,
    pub downtime_cycles: u64,
    pub missed_icmp: u64,
    pub restored_channels: Vec<u32>,
}
