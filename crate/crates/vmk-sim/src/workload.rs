//! Workload state: what each simulated thread is doing and where each
//! traffic generator stands. The machine owns the choreography; these
//! types are the bookkeeping it advances.

use std::collections::BTreeSet;

use crate::devices::DeviceId;
use crate::ipc::ChannelId;
use crate::sandbox::SandboxId;
use crate::sched::VcpuId;

/// Conditions a busy-waiting thread or I/O job spins on. Spinning
/// burns CPU (and budget); a matching state change converts the wait
/// into a short timed notice, after which the waiter re-checks.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum CondKey {
    /// Mailbox status flipped to empty: senders may write.
    MailboxEmpty(ChannelId),
    /// Mailbox status flipped to full: receivers may read.
    MailboxFull(ChannelId),
    /// Shared device lock released.
    LockFree(DeviceId),
}

/// Continuation points for thread jobs; the machine's step dispatcher
/// interprets them against the thread's workload state.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Step {
    /// Periodic sender checked the status byte.
    StreamPollDone,
    /// Periodic sender finished copying the body; commit the chunk.
    StreamCommit,
    /// Periodic receiver checked the status byte.
    RecvPollDone,
    /// Receiver finished copying a chunk out; consume it.
    RecvCopyDone,
    /// Blocking sender re-checks whether the mailbox emptied.
    BenchSendCheck,
    /// Blocking sender finished the body copy; commit.
    BenchSendCommit,
    /// Blocking receiver re-checks whether the mailbox filled.
    BenchRecvCheck,
    /// Blocking receiver finished copying a chunk out; consume it.
    BenchRecvConsume,
    /// One fork/wait iteration finished.
    ForkIterDone,
    /// One periodic-task job finished.
    TaskDone,
}

/// What a thread is doing right now. `None` job means blocked on a
/// timer (not runnable).
#[derive(Copy, Clone, Debug)]
pub enum Job {
    /// Burn `remaining` executed cycles, then fire `then`.
    Timed { remaining: u64, then: Step },
    /// Burn cycles until `cond` is signaled, then re-check `resume`
    /// after a short notice delay.
    Wait { cond: CondKey, resume: Step },
}

/// A kernel thread bound to one Main VCPU.
#[derive(Clone, Debug)]
pub struct ThreadState {
    pub id: usize,
    pub vcpu: VcpuId,
    pub sandbox: SandboxId,
    pub workload: usize,
    pub job: Option<Job>,
}

/// External ping generator: fires requests onto the device at a fixed
/// interval and keeps score of replies for gap detection.
#[derive(Clone, Debug)]
pub struct IcmpFloodState {
    pub device: DeviceId,
    pub dst_ip: [u8; 4],
    pub src_ip: [u8; 4],
    pub interval: u64,
    pub count: u32,
    pub sent: u32,
    pub next_seq: u32,
    pub replied: BTreeSet<u32>,
}

/// Periodic drop-if-full sender: one chunk per tick, dropped when the
/// mailbox has not been drained yet.
#[derive(Clone, Debug)]
pub struct MsgStreamState {
    pub channel: ChannelId,
    pub thread: usize,
    pub interval: u64,
    pub size: u32,
    pub next_seq: u32,
    pub sent: u64,
    pub dropped: u64,
}

/// Periodic or busy receiver.
#[derive(Clone, Debug)]
pub struct MsgRecvState {
    pub channel: ChannelId,
    pub thread: usize,
    /// Poll interval; `None` means busy-wait reception.
    pub interval: Option<u64>,
    pub received: u64,
    /// Empty or corrupt polls after the first successful reception:
    /// the channel's steady-state miss count.
    pub misses: u64,
    pub got_first: bool,
}

/// Blocking benchmark sender: `trials` messages of `size` bytes, back
/// to back, chunked with a handshake per chunk.
#[derive(Clone, Debug)]
pub struct BenchSendState {
    pub channel: ChannelId,
    pub thread: usize,
    pub size: u32,
    pub trials: u32,
    pub msg_idx: u32,
    pub chunk_idx: u32,
    pub next_seq: u32,
}

/// Blocking benchmark receiver, mirror of the sender. A message is
/// complete after `chunk_count(size)` chunks, so the zero-byte message
/// still takes its one handshake.
#[derive(Clone, Debug)]
pub struct BenchRecvState {
    pub channel: ChannelId,
    pub thread: usize,
    pub size: u32,
    pub trials: u32,
    pub msg_idx: u32,
    pub chunks_done: u32,
    pub bytes_received: u64,
    pub expect_seq: u32,
    pub corrupt: u64,
}

/// Syscall-pair loop: fork + waitpid abstracted to two privilege
/// switches plus address-space create/destroy, none of which traps.
#[derive(Clone, Debug)]
pub struct ForkWaitState {
    pub thread: usize,
    pub iterations: u32,
    pub done: u32,
}

/// Pure CPU burner; soaks background time so budget limits bite.
#[derive(Clone, Debug)]
pub struct BusyState {
    pub thread: usize,
}

/// Implicit-deadline periodic task: releases exec cycles every period;
/// a release finding the previous job unfinished is a deadline miss.
#[derive(Clone, Debug)]
pub struct PeriodicTaskState {
    pub thread: usize,
    pub period: u64,
    pub exec: u64,
    pub released: u64,
    pub completed: u64,
    pub missed: u64,
    pub job_pending: bool,
}

#[derive(Clone, Debug)]
pub enum WorkloadState {
    IcmpFlood(IcmpFloodState),
    MsgStream(MsgStreamState),
    MsgRecv(MsgRecvState),
    BenchSend(BenchSendState),
    BenchRecv(BenchRecvState),
    ForkWait(ForkWaitState),
    Busy(BusyState),
    PeriodicTask(PeriodicTaskState),
}

impl WorkloadState {
    /// The thread driving this workload, if it has one (generators are
    /// host-side and do not).
    pub fn thread(&self) -> Option<usize> {
        match self {
            WorkloadState::IcmpFlood(_) => None,
            WorkloadState::MsgStream(s) => Some(s.thread),
            WorkloadState::MsgRecv(s) => Some(s.thread),
            WorkloadState::BenchSend(s) => Some(s.thread),
            WorkloadState::BenchRecv(s) => Some(s.thread),
            WorkloadState::ForkWait(s) => Some(s.thread),
            WorkloadState::Busy(s) => Some(s.thread),
            WorkloadState::PeriodicTask(s) => Some(s.thread),
        }
    }
}
