use thiserror::Error;

/// Crate-wide error type. Simulation-visible faults (EPT violations,
/// dropped IPIs, missed replies) are not errors; they are values and
/// trace events. `Error` is for misuse of the API, invalid
/// configuration, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("event at cycle {at} is in the past (now {now})")]
    PastTime { at: u64, now: u64 },

    #[error("cycle arithmetic overflow")]
    TimeOverflow,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("gpa {gpa:#x} is beyond the 48-bit guest-physical space")]
    GpaRange { gpa: u64 },

    #[error("address {addr:#x} is not 4KB aligned")]
    Misaligned { addr: u64 },

    #[error("hpa {hpa:#x}+{len:#x} is outside host memory of {host:#x} bytes")]
    HpaRange { hpa: u64, len: u64, host: u64 },

    #[error("EPT mutation requires the owning monitor's capability")]
    Capability,

    #[error("host memory exhausted while building the layout")]
    HostExhausted,

    #[error("shared communication region has no free 4KB slot")]
    SharedExhausted,

    #[error("channel endpoints must be two distinct sandboxes")]
    SelfChannel,

    #[error("invalid state transition: {0}")]
    State(String),

    #[error("budget accounting exceeded remaining budget on vcpu {vcpu}: this is a scheduler bug")]
    BudgetUnderflow { vcpu: u32 },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("admission failed on pcpu {pcpu}: total utilization {total:.6} exceeds bound {bound:.6} for {n} vcpus")]
    Admission {
        pcpu: u32,
        total: f64,
        bound: f64,
        n: usize,
    },

    #[error("unknown builtin scenario {0:?}")]
    UnknownBuiltin(String),

    #[error("trace parse error: {0}")]
    Trace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
