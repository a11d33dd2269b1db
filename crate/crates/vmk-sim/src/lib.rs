//! Deterministic discrete-event simulator of a virtualized multikernel.
//!
//! The simulated machine is a set of *sandbox kernels*, one per physical
//! core, each confined to a private host-memory region by an emulated
//! four-level extended page table (EPT) that only the sandbox's *monitor*
//! may mutate. Sandboxes exchange messages over shared-memory mailbox
//! channels, share devices through broadcast interrupt delivery with
//! early demultiplexing, and recover from injected driver faults either
//! locally or in a remote sandbox, with every phase charged its measured
//! cycle cost.
//!
//! Everything runs on a single virtual timeline measured in CPU cycles.
//! Given the same scenario and seed, two runs produce byte-identical
//! traces.

pub mod builtins;
pub mod devices;
pub mod engine;
pub mod interrupts;
pub mod ipc;
pub mod machine;
pub mod mem;
pub mod metrics;
pub mod recovery;
pub mod sandbox;
pub mod scenario;
pub mod sched;
pub mod workload;

mod error;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
