//! Discrete-event core: virtual time in CPU cycles, an ordered event
//! queue with deterministic tie-breaking, seeded randomness and the
//! append-only trace every metric is derived from.

use std::cmp::Ordering;
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::Write as IoWrite;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::devices::IcmpPacket;
use crate::interrupts::Ipi;
use crate::sandbox::SandboxId;
use crate::sched::{PcpuId, VcpuId};
use crate::{Error, Result};

/// Virtual time: CPU cycles since simulation start.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn cycles(self) -> u64 {
        self.0
    }

    pub fn checked_add(self, cycles: u64) -> Result<SimTime> {
        self.0
            .checked_add(cycles)
            .map(SimTime)
            .ok_or(Error::TimeOverflow)
    }

    pub fn saturating_sub(self, other: SimTime) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl fmt::Debug for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}cyc", self.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::ops::Add<u64> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: u64) -> SimTime {
        SimTime(self.0.checked_add(rhs).expect("SimTime overflow"))
    }
}

impl std::ops::Sub for SimTime {
    type Output = u64;
    fn sub(self, rhs: SimTime) -> u64 {
        self.0
            .checked_sub(rhs.0)
            .expect("SimTime subtraction underflow")
    }
}

/// Engine parameters shared by every run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SimConfig {
    /// Wall-time conversion factor for millisecond-based workloads.
    pub cycles_per_second: u64,
    pub seed: u64,
    /// Run bound; events past it stay queued.
    pub horizon: SimTime,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            cycles_per_second: 2_000_000_000,
            seed: 42,
            horizon: SimTime(u64::MAX),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cycles_per_second == 0 {
            return Err(Error::Config("cycles_per_second must be > 0".into()));
        }
        if self.horizon == SimTime::ZERO {
            return Err(Error::Config("horizon must be > 0".into()));
        }
        Ok(())
    }
}

/// Converts milliseconds of wall time to cycles, rounding to nearest.
pub fn cycles_from_millis(ms: f64, cycles_per_second: u64) -> Result<u64> {
    if !ms.is_finite() || ms < 0.0 {
        return Err(Error::Config(format!("invalid duration: {ms} ms")));
    }
    let cycles = (ms * cycles_per_second as f64 / 1000.0).round();
    if !cycles.is_finite() || cycles > u64::MAX as f64 {
        return Err(Error::TimeOverflow);
    }
    Ok(cycles as u64)
}

#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct EventId(pub u64);

/// Scheduled-event payloads. The engine does not interpret them; the
/// machine's dispatch loop does.
#[derive(Clone, Debug)]
pub enum EventKind {
    /// Bare timer, used by engine-level tests and ad-hoc waits.
    Timer { tag: u32 },
    /// Periodic workload driver tick (generators, pollers, releases).
    WorkloadTick { workload: usize },
    /// Interrupt delivery at one destination's local APIC.
    IrqDeliver {
        vector: u8,
        dst: SandboxId,
        packet: Option<IcmpPacket>,
    },
    /// IPI arrival; `ack` marks the return half of the round trip.
    IpiDeliver { ipi: Ipi, ack: bool },
    /// Monitor gains control after a VM exit completes.
    MonitorTrap { sandbox: SandboxId },
    /// Sandbox resumes after a VM entry completes.
    VmEnterDone { sandbox: SandboxId },
    /// Re-evaluate one PCPU (work completion or budget exhaustion).
    PcpuStep { pcpu: PcpuId, gen: u64 },
    /// Sporadic-server replenishment comes due.
    Replenish { vcpu: VcpuId },
    /// Fault activation from the scenario's fault list.
    FaultInject { fault: usize },
    /// Next phase boundary of an in-flight recovery.
    RecoveryPhase { recovery: usize, phase: usize },
    /// Halted sandbox comes back up (reboot arm / background heal).
    Relaunch { sandbox: SandboxId },
}

impl EventKind {
    /// Stable label used for the per-dispatch trace record.
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::Timer { .. } => "timer",
            EventKind::WorkloadTick { .. } => "workload_tick",
            EventKind::IrqDeliver { .. } => "irq_deliver",
            EventKind::IpiDeliver { .. } => "ipi_deliver",
            EventKind::MonitorTrap { .. } => "monitor_trap",
            EventKind::VmEnterDone { .. } => "vm_enter_done",
            EventKind::PcpuStep { .. } => "pcpu_step",
            EventKind::Replenish { .. } => "replenish_due",
            EventKind::FaultInject { .. } => "fault_inject",
            EventKind::RecoveryPhase { .. } => "recovery_phase_due",
            EventKind::Relaunch { .. } => "relaunch",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Event {
    pub id: EventId,
    pub at: SimTime,
    pub sandbox: Option<SandboxId>,
    pub kind: EventKind,
}

struct Queued(Event);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.0.at == other.0.at && self.0.id == other.0.id
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        // (at, id) lexicographic: id breaks ties by insertion order.
        (self.0.at, self.0.id).cmp(&(other.0.at, other.0.id))
    }
}

/// One line of the run log. `sandbox == None` renders as "host".
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub at: SimTime,
    pub sandbox: Option<SandboxId>,
    pub event_type: &'static str,
    pub detail: String,
}

pub const TRACE_CSV_HEADER: &str = "time_cycles,sandbox,event_type,detail";

/// Append-only event log; dispatch order is record order.
#[derive(Default)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn push(&mut self, rec: TraceRecord) {
        debug_assert!(
            self.records.last().is_none_or(|p| p.at <= rec.at),
            "trace must be time-ordered"
        );
        debug_assert!(
            !rec.detail.contains(',') && !rec.detail.contains('\n'),
            "detail must stay csv-safe: {:?}",
            rec.detail
        );
        self.records.push(rec);
    }

    pub fn write_csv<W: IoWrite>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TRACE_CSV_HEADER}")?;
        for r in &self.records {
            match r.sandbox {
                Some(sb) => writeln!(w, "{},{},{},{}", r.at, sb.0, r.event_type, r.detail)?,
                None => writeln!(w, "{},host,{},{}", r.at, r.event_type, r.detail)?,
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("trace is always utf-8")
    }

    pub fn csv_sha256(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_csv_string().as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            use std::fmt::Write;
            write!(out, "{b:02x}").unwrap();
        }
        out
    }
}

/// The event engine: clock, queue, trace and seeded RNG. One instance
/// per run; confine to a single thread of control at a time.
pub struct Engine {
    cfg: SimConfig,
    now: SimTime,
    next_id: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    trace: Trace,
    rng: ChaCha8Rng,
    dispatched: u64,
}

impl Engine {
    pub fn new(cfg: SimConfig) -> Result<Engine> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Engine {
            cfg,
            now: SimTime::ZERO,
            next_id: 1,
            queue: BinaryHeap::new(),
            trace: Trace::default(),
            rng,
            dispatched: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn horizon(&self) -> SimTime {
        self.cfg.horizon
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn dispatched_events(&self) -> u64 {
        self.dispatched
    }

    /// Enqueue an event. Rejects times in the past; same inputs under
    /// the same seed yield the same id sequence.
    pub fn schedule(
        &mut self,
        at: SimTime,
        sandbox: Option<SandboxId>,
        kind: EventKind,
    ) -> Result<EventId> {
        if at < self.now {
            return Err(Error::PastTime {
                at: at.0,
                now: self.now.0,
            });
        }
        let id = EventId(self.next_id);
        self.next_id += 1;
        self.queue.push(Reverse(Queued(Event {
            id,
            at,
            sandbox,
            kind,
        })));
        Ok(id)
    }

    /// Enqueue `delay` cycles from now.
    pub fn schedule_in(
        &mut self,
        delay: u64,
        sandbox: Option<SandboxId>,
        kind: EventKind,
    ) -> Result<EventId> {
        let at = self.now.checked_add(delay)?;
        self.schedule(at, sandbox, kind)
    }

    /// Pop the next event due at or before `bound`, advancing the clock
    /// to its timestamp.
    pub fn pop_due(&mut self, bound: SimTime) -> Option<Event> {
        match self.queue.peek() {
            Some(Reverse(q)) if q.0.at <= bound => {
                let ev = self.queue.pop().unwrap().0 .0;
                debug_assert!(ev.at >= self.now, "causality violated");
                self.now = ev.at;
                self.dispatched += 1;
                Some(ev)
            }
            _ => None,
        }
    }

    /// Advance the clock without dispatching (used to land exactly on a
    /// run bound after the queue is drained up to it).
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Bare runner: dispatch every event due by `t`, logging one record
    /// per event, and leave the clock at `t`. The machine installs real
    /// semantics on top of `pop_due`; this is the engine by itself.
    pub fn run_until(&mut self, t: SimTime) -> Result<&[TraceRecord]> {
        if t < self.now {
            return Err(Error::PastTime {
                at: t.0,
                now: self.now.0,
            });
        }
        let mark = self.trace.len();
        while let Some(ev) = self.pop_due(t) {
            self.record(ev.sandbox, ev.kind.label(), format!("event_id={}", ev.id.0));
        }
        self.advance_to(t);
        Ok(&self.trace.records()[mark..])
    }

    /// Append a trace record at the current time.
    pub fn record(&mut self, sandbox: Option<SandboxId>, event_type: &'static str, detail: String) {
        self.trace.push(TraceRecord {
            at: self.now,
            sandbox,
            event_type,
            detail,
        });
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn trace_len(&self) -> usize {
        self.trace.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine() -> Engine {
        Engine::new(SimConfig::default()).unwrap()
    }

    #[test]
    fn schedule_at_now_gets_id_one() {
        let mut e = engine();
        let id = e
            .schedule(SimTime(0), None, EventKind::Timer { tag: 0 })
            .unwrap();
        assert_eq!(id, EventId(1));
    }

    #[test]
    fn ties_dispatch_in_insertion_order() {
        let mut e = engine();
        let a = e
            .schedule(SimTime(5), None, EventKind::Timer { tag: 1 })
            .unwrap();
        let b = e
            .schedule(SimTime(5), None, EventKind::Timer { tag: 2 })
            .unwrap();
        assert_eq!((a, b), (EventId(1), EventId(2)));
        let first = e.pop_due(SimTime(10)).unwrap();
        let second = e.pop_due(SimTime(10)).unwrap();
        assert_eq!(first.id, a);
        assert_eq!(second.id, b);
    }

    #[test]
    fn past_time_rejected() {
        let mut e = engine();
        e.schedule(SimTime(20), None, EventKind::Timer { tag: 0 })
            .unwrap();
        e.run_until(SimTime(20)).unwrap();
        let err = e
            .schedule(SimTime(10), None, EventKind::Timer { tag: 0 })
            .unwrap_err();
        assert!(matches!(err, Error::PastTime { at: 10, now: 20 }));
    }

    #[test]
    fn run_until_on_empty_queue_advances_clock() {
        let mut e = engine();
        let recs = e.run_until(SimTime(100)).unwrap();
        assert!(recs.is_empty());
        assert_eq!(e.now(), SimTime(100));
    }

    #[test]
    fn run_until_dispatches_single_event() {
        let mut e = engine();
        e.schedule(SimTime(50), None, EventKind::Timer { tag: 7 })
            .unwrap();
        let recs = e.run_until(SimTime(100)).unwrap().to_vec();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].at, SimTime(50));
        assert_eq!(recs[0].event_type, "timer");
        assert_eq!(e.now(), SimTime(100));
    }

    #[test]
    fn identical_seed_and_schedule_gives_identical_trace() {
        let run = || {
            let mut e = engine();
            for i in 0..100u64 {
                // mix of times, including duplicates
                e.schedule(
                    SimTime((i * 37) % 60),
                    None,
                    EventKind::Timer { tag: i as u32 },
                )
                .unwrap();
            }
            e.run_until(SimTime(100)).unwrap();
            e.trace().to_csv_string()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "rerun must be byte-identical");
    }

    #[test]
    fn causality_and_conservation() {
        let mut e = engine();
        let total = 500u64;
        for i in 0..total {
            e.schedule(
                SimTime((i * 7919) % 1000),
                None,
                EventKind::Timer { tag: 0 },
            )
            .unwrap();
        }
        let recs = e.run_until(SimTime(400)).unwrap();
        for pair in recs.windows(2) {
            assert!(pair[0].at <= pair[1].at, "dispatch order must be causal");
        }
        // every scheduled event is either dispatched or still queued
        assert_eq!(e.dispatched_events() + e.pending_events() as u64, total);
    }

    #[test]
    fn millis_conversion() {
        let cps = SimConfig::default().cycles_per_second;
        assert_eq!(cycles_from_millis(0.0, cps).unwrap(), 0);
        assert_eq!(cycles_from_millis(500.0, cps).unwrap(), 1_000_000_000);
        assert_eq!(cycles_from_millis(3.0, cps).unwrap(), 6_000_000);
        assert!(cycles_from_millis(f64::MAX, cps).is_err());
        assert!(cycles_from_millis(-1.0, cps).is_err());
    }
}
