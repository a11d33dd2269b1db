//! The assembled machine: engine, memory, sandboxes with monitors,
//! VCPU scheduling, the emulated I/O APIC, shared devices, mailbox
//! channels, workloads and fault recovery, all advanced by one
//! deterministic event loop.
//!
//! Execution is slice-based and lazy. Each PCPU runs at most one VCPU
//! between events; nothing can change between events, so CPU time is
//! only charged when a slice closes. Every handler that touches a
//! PCPU's inputs marks it dirty, and after each event all dirty PCPUs
//! are settled: close the running slice, charge the sporadic-server
//! budget, fire any completed work, re-run admission-ordered picking,
//! and open the next slice with a wakeup at its earliest boundary.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::devices::{
    self, format_ip, lock_try_acquire, DeviceId, DriverId, DriverInstance, DriverState, IcmpKind,
    IcmpPacket, Implementation, NicDevice, VirtualInterface, LOCK_FREE,
};
use crate::engine::{cycles_from_millis, Engine, Event, EventKind, SimConfig, SimTime, Trace};
use crate::interrupts::{
    early_demux, DemuxDecision, Destinations, Ipi, IpiPayload, RecoveryDescriptor,
    RedirectAuthority, RedirectionTable,
};
use crate::ipc::{self, Channel, ChannelId};
use crate::mem::{self, EptViolation, Gpa, Hpa, MemorySystem, PAGE_SIZE};
use crate::recovery::{
    local_phases, reboot_phases, remote_phases, BlastWrite, FaultSpec, Phase, RecoveryMode,
};
use crate::sandbox::{CostModel, ExitReason, Monitor, MonitorAction, Sandbox, TrapInfo};
use crate::scenario::{BlastSpec, Scenario, VcpuSpec, WorkloadSpec};
use crate::sched::{
    io_inherit, pick_next, rms_assign, Band, Candidate, Chosen, IoVcpu, MainVcpu, PcpuId, Priority,
    ServerState, VcpuId,
};
use crate::workload::{
    BenchRecvState, BenchSendState, BusyState, CondKey, ForkWaitState, IcmpFloodState, Job,
    MsgRecvState, MsgStreamState, PeriodicTaskState, Step, ThreadState, WorkloadState,
};
use crate::{Error, Result};

/// A schedulable VCPU: either a CPU server bound to threads or a
/// device server draining its interrupt queue.
pub enum Vcpu {
    Main(MainVcpu),
    Io { vcpu: IoVcpu, owner: SandboxId },
}

use crate::sandbox::SandboxId;

impl Vcpu {
    pub fn id(&self) -> VcpuId {
        match self {
            Vcpu::Main(m) => m.id,
            Vcpu::Io { vcpu, .. } => vcpu.id,
        }
    }

    pub fn pcpu(&self) -> PcpuId {
        match self {
            Vcpu::Main(m) => m.pcpu,
            Vcpu::Io { vcpu, .. } => vcpu.pcpu,
        }
    }

    pub fn owner(&self) -> SandboxId {
        match self {
            Vcpu::Main(m) => m.owner,
            Vcpu::Io { owner, .. } => *owner,
        }
    }

    pub fn server(&self) -> &ServerState {
        match self {
            Vcpu::Main(m) => &m.server,
            Vcpu::Io { vcpu, .. } => &vcpu.server,
        }
    }

    pub fn server_mut(&mut self) -> &mut ServerState {
        match self {
            Vcpu::Main(m) => &mut m.server,
            Vcpu::Io { vcpu, .. } => &mut vcpu.server,
        }
    }
}

/// What a slice executes.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum WorkRef {
    /// Index into `threads`.
    Thread(usize),
    /// Index into `vcpus`; the front of that I/O queue.
    Io(usize),
}

/// One contiguous stretch of a VCPU on its PCPU.
#[derive(Copy, Clone, Debug)]
pub struct Slice {
    pub vcpu: usize,
    pub band: Band,
    pub since: SimTime,
    pub work: WorkRef,
}

#[derive(Debug)]
pub struct PcpuState {
    pub id: PcpuId,
    /// Bumped per opened slice; stale PcpuStep events are ignored.
    pub gen: u64,
    pub running: Option<Slice>,
    pub last_dispatched: Option<(VcpuId, Band)>,
}

/// Pipeline position of one queued interrupt.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum IoStage {
    /// Early-demultiplex check runs first, before any driver work.
    Demux,
    /// Spinning on the device lock; burns cycles, never completes.
    AwaitLock,
    /// Noticed the lock flip; re-reads it after the poll latency.
    Retry,
    /// Holding the lock, performing the echo service.
    Service,
}

#[derive(Clone, Debug)]
pub struct IoJob {
    pub packet: IcmpPacket,
    pub stage: IoStage,
    pub remaining: u64,
    /// Foreground priority of the requesting main VCPU, if any; the
    /// I/O VCPU inherits over these. External packets carry none.
    pub initiator_fg: Option<u32>,
}

/// One in-flight or finished recovery.
#[derive(Clone, Debug)]
pub struct RecoveryRun {
    pub fault: usize,
    pub mode: RecoveryMode,
    pub sandbox: SandboxId,
    pub target: Option<SandboxId>,
    pub phases: Vec<Phase>,
    pub fault_at: SimTime,
    /// Driver instance index created on the target (remote only).
    pub new_driver: Option<usize>,
    pub completed: bool,
    pub downtime: u64,
    pub restored: Vec<u32>,
}

pub struct Machine {
    pub engine: Engine,
    pub cost: CostModel,
    pub mem: MemorySystem,
    pub sandboxes: Vec<Sandbox>,
    pub monitors: Vec<Monitor>,
    pub apic: RedirectionTable,
    pub devices: Vec<NicDevice>,
    pub drivers: Vec<DriverInstance>,
    pub vifs: Vec<VirtualInterface>,
    pub channels: Vec<Channel>,
    pub vcpus: Vec<Vcpu>,
    pub threads: Vec<ThreadState>,
    pub workloads: Vec<WorkloadState>,
    faults: Vec<FaultSpec>,
    recoveries: Vec<RecoveryRun>,
    io_queues: Vec<VecDeque<IoJob>>,
    pcpus: Vec<PcpuState>,
    /// Round-robin cursor into each main VCPU's bound threads.
    thread_rr: Vec<usize>,
    damaged_channels: BTreeSet<u32>,
    dirty: BTreeSet<u32>,
    pub deadline_misses: u64,
}

impl Machine {
    pub fn build(scn: &Scenario) -> Result<Machine> {
        scn.validate()?;
        let horizon = SimTime(scn.sim.horizon()?);
        let engine = Engine::new(SimConfig {
            cycles_per_second: scn.sim.cycles_per_second,
            seed: scn.sim.seed,
            horizon,
        })?;
        let mem = mem::build_layout(scn.sandboxes.len(), &scn.memory.to_sizes())?;
        let cps = scn.sim.cycles_per_second;

        let mut m = Machine {
            engine,
            cost: scn.cost_model.clone(),
            mem,
            sandboxes: Vec::new(),
            monitors: Vec::new(),
            apic: RedirectionTable::default(),
            devices: Vec::new(),
            drivers: Vec::new(),
            vifs: Vec::new(),
            channels: Vec::new(),
            vcpus: Vec::new(),
            threads: Vec::new(),
            workloads: Vec::new(),
            faults: Vec::new(),
            recoveries: Vec::new(),
            io_queues: Vec::new(),
            pcpus: Vec::new(),
            thread_rr: Vec::new(),
            damaged_channels: BTreeSet::new(),
            dirty: BTreeSet::new(),
            deadline_misses: 0,
        };

        for sb in &scn.sandboxes {
            let id = SandboxId(sb.id);
            let mut s = Sandbox::new(id, PcpuId(sb.id));
            s.services = sb.services.clone();
            m.sandboxes.push(s);
            m.monitors.push(Monitor::new(id, scn.policy.to_policy()));
            m.pcpus.push(PcpuState {
                id: PcpuId(sb.id),
                gen: 0,
                running: None,
                last_dispatched: None,
            });
            for (k, vif) in sb.vifs.iter().enumerate() {
                let ip = devices::parse_ip(&vif.ip)?;
                let mac = match &vif.mac {
                    Some(s) => parse_mac(s)?,
                    None => [0x02, 0, 0, 0, sb.id as u8, k as u8 + 1],
                };
                m.vifs.push(VirtualInterface {
                    sandbox: id,
                    ip,
                    mac,
                });
            }
        }

        // Devices draw their lock bytes from page zero of the shared
        // region; mailbox buffers start at page one.
        let shared_base = m.mem.layout.shared_base;
        for (d, spec) in scn.devices.iter().enumerate() {
            let dests = if spec.broadcast {
                Destinations::BroadcastAll
            } else {
                let ids = spec
                    .destinations
                    .clone()
                    .unwrap_or_else(|| spec.attach.clone());
                Destinations::set(ids.into_iter().map(SandboxId))
            };
            m.apic.program(spec.vector, dests)?;
            m.devices.push(NicDevice {
                id: DeviceId(d as u32),
                vector: spec.vector,
                attached: Vec::new(),
                shared_lock_gpa: Gpa(shared_base.0 + d as u64),
            });
            for &sb in &spec.attach {
                let id = DriverId(m.drivers.len() as u32);
                // Private data lives in the owner's kernel region, one
                // page per device, at half the region's size.
                let gpa = Gpa(m.mem.layout.kernel_base_gpa.0
                    + m.mem.layout.kernel_bytes / 2
                    + d as u64 * PAGE_SIZE);
                m.drivers.push(DriverInstance {
                    id,
                    sandbox: SandboxId(sb),
                    device: DeviceId(d as u32),
                    state: DriverState::Healthy,
                    private_data_gpa: gpa,
                    private_data_len: PAGE_SIZE,
                    implementation: Implementation::Primary,
                });
                m.devices[d].attached.push(id);
                m.sandboxes[sb as usize].drivers.push(id.0);
            }
        }

        // VCPUs keep their spec order as ids; each sandbox's VCPUs run
        // on its own PCPU. Foreground priorities are rate-monotonic
        // per PCPU; I/O enforcement periods default to the shortest
        // main-VCPU period in the owner sandbox.
        let mut main_periods: BTreeMap<u32, Vec<(VcpuId, u64)>> = BTreeMap::new();
        let mut slots: Vec<Option<Vcpu>> = Vec::new();
        for (i, v) in scn.vcpus.iter().enumerate() {
            let id = VcpuId(i as u32);
            match v {
                VcpuSpec::Main {
                    owner,
                    c_max_ms,
                    v_t_ms,
                } => {
                    let c = cycles_from_millis(*c_max_ms, cps)?;
                    let t = cycles_from_millis(*v_t_ms, cps)?;
                    main_periods.entry(*owner).or_default().push((id, t));
                    slots.push(Some(Vcpu::Main(MainVcpu {
                        id,
                        owner: SandboxId(*owner),
                        pcpu: PcpuId(*owner),
                        server: ServerState::new(c, t)?,
                        fg_priority: 0,
                        bound_threads: Vec::new(),
                    })));
                }
                VcpuSpec::Io { .. } => slots.push(None),
            }
        }
        for (i, v) in scn.vcpus.iter().enumerate() {
            if let VcpuSpec::Io {
                owner,
                device,
                bandwidth,
                enforcement_period_ms,
            } = v
            {
                let period = match enforcement_period_ms {
                    Some(ms) => cycles_from_millis(*ms, cps)?,
                    None => main_periods
                        .get(owner)
                        .and_then(|v| v.iter().map(|&(_, t)| t).min())
                        .unwrap_or(cycles_from_millis(10.0, cps)?),
                };
                let budget = ((period as f64 * bandwidth).round() as u64).max(1);
                slots[i] = Some(Vcpu::Io {
                    vcpu: IoVcpu {
                        id: VcpuId(i as u32),
                        pcpu: PcpuId(*owner),
                        device: *device,
                        bandwidth: *bandwidth,
                        server: ServerState::new(budget, period)?,
                        current_priority: Priority::Floor,
                    },
                    owner: SandboxId(*owner),
                });
            }
        }
        m.vcpus = slots.into_iter().map(|s| s.expect("slot filled")).collect();
        for (_, periods) in main_periods {
            for (vid, prio) in rms_assign(&periods) {
                if let Vcpu::Main(mv) = &mut m.vcpus[vid.0 as usize] {
                    mv.fg_priority = prio;
                }
            }
        }
        m.io_queues = (0..m.vcpus.len()).map(|_| VecDeque::new()).collect();
        m.thread_rr = vec![0; m.vcpus.len()];

        for (k, spec) in scn.channels.iter().enumerate() {
            let id = ChannelId(k as u32);
            let buffer_gpa = Gpa(shared_base.0 + PAGE_SIZE * (1 + k as u64));
            let ch = Channel {
                id,
                a: SandboxId(spec.a),
                b: SandboxId(spec.b),
                buffer_gpa,
                private: spec.private,
            };
            m.sandboxes[spec.a as usize].channels.push(id.0);
            m.sandboxes[spec.b as usize].channels.push(id.0);
            if spec.private {
                // Boot-time narrowing by each non-endpoint's monitor;
                // no sandbox is running yet, so no exit is charged.
                for sb in 0..m.sandboxes.len() {
                    let sid = SandboxId(sb as u32);
                    if !ch.is_endpoint(sid) {
                        let token = &m.monitors[sb].token;
                        m.mem.table_mut(sid).unmap(token, buffer_gpa, 1)?;
                    }
                }
            }
            m.channels.push(ch);
        }

        for (w, spec) in scn.workloads.iter().enumerate() {
            m.build_workload(w, spec, cps)?;
        }

        for f in &scn.faults {
            let at = SimTime(cycles_from_millis(f.at_ms, cps)?);
            let sandbox = SandboxId(f.sandbox);
            let driver = m
                .drivers
                .iter()
                .find(|d| d.sandbox == sandbox)
                .map(|d| d.id)
                .ok_or_else(|| {
                    Error::Scenario(format!("fault sandbox {} has no driver", f.sandbox))
                })?;
            let mut blast = Vec::new();
            for b in &f.blast {
                blast.push(m.resolve_blast(b)?);
            }
            let idx = m.faults.len();
            m.faults.push(FaultSpec {
                at,
                sandbox,
                driver,
                blast,
                mode: f.mode.to_mode(),
            });
            m.engine
                .schedule(at, Some(sandbox), EventKind::FaultInject { fault: idx })?;
        }

        for i in 0..m.sandboxes.len() {
            m.sandboxes[i].launch()?;
            m.record(
                Some(SandboxId(i as u32)),
                "sandbox_launch",
                "reason=boot".to_string(),
            );
        }
        Ok(m)
    }

    fn build_workload(&mut self, w: usize, spec: &WorkloadSpec, cps: u64) -> Result<()> {
        let new_thread = |m: &mut Machine, vcpu: u32| -> Result<usize> {
            let t = m.threads.len();
            let owner = m.vcpus[vcpu as usize].owner();
            m.threads.push(ThreadState {
                id: t,
                vcpu: VcpuId(vcpu),
                sandbox: owner,
                workload: w,
                job: None,
            });
            if let Vcpu::Main(mv) = &mut m.vcpus[vcpu as usize] {
                mv.bound_threads.push(t);
            }
            Ok(t)
        };
        match spec {
            WorkloadSpec::IcmpFlood {
                device,
                dst_ip,
                interval_ms,
                count,
                start_ms,
                src_ip,
            } => {
                let interval = cycles_from_millis(*interval_ms, cps)?;
                let start = match start_ms {
                    Some(ms) => cycles_from_millis(*ms, cps)?,
                    None => interval,
                };
                self.workloads
                    .push(WorkloadState::IcmpFlood(IcmpFloodState {
                        device: DeviceId(*device),
                        dst_ip: devices::parse_ip(dst_ip)?,
                        src_ip: match src_ip {
                            Some(s) => devices::parse_ip(s)?,
                            None => [192, 168, 0, 254],
                        },
                        interval,
                        count: *count,
                        sent: 0,
                        next_seq: 1,
                        replied: BTreeSet::new(),
                    }));
                self.engine.schedule(
                    SimTime(start),
                    None,
                    EventKind::WorkloadTick { workload: w },
                )?;
            }
            WorkloadSpec::MsgStream {
                channel,
                vcpu,
                interval_ms,
                size,
                start_ms,
            } => {
                let t = new_thread(self, *vcpu)?;
                let interval = cycles_from_millis(*interval_ms, cps)?;
                let start = match start_ms {
                    Some(ms) => cycles_from_millis(*ms, cps)?,
                    None => interval,
                };
                self.workloads
                    .push(WorkloadState::MsgStream(MsgStreamState {
                        channel: ChannelId(*channel),
                        thread: t,
                        interval,
                        size: *size,
                        next_seq: 1,
                        sent: 0,
                        dropped: 0,
                    }));
                self.engine.schedule(
                    SimTime(start),
                    None,
                    EventKind::WorkloadTick { workload: w },
                )?;
            }
            WorkloadSpec::MsgRecv {
                channel,
                vcpu,
                poll_interval_ms,
            } => {
                let t = new_thread(self, *vcpu)?;
                let interval = match poll_interval_ms {
                    Some(ms) => Some(cycles_from_millis(*ms, cps)?),
                    None => None,
                };
                let start = interval.unwrap_or(0);
                self.workloads.push(WorkloadState::MsgRecv(MsgRecvState {
                    channel: ChannelId(*channel),
                    thread: t,
                    interval,
                    received: 0,
                    misses: 0,
                    got_first: false,
                }));
                self.engine.schedule(
                    SimTime(start),
                    None,
                    EventKind::WorkloadTick { workload: w },
                )?;
            }
            WorkloadSpec::BenchSend {
                channel,
                vcpu,
                size,
                trials,
            } => {
                let t = new_thread(self, *vcpu)?;
                self.workloads
                    .push(WorkloadState::BenchSend(BenchSendState {
                        channel: ChannelId(*channel),
                        thread: t,
                        size: *size,
                        trials: *trials,
                        msg_idx: 0,
                        chunk_idx: 0,
                        next_seq: 1,
                    }));
                self.engine
                    .schedule(SimTime(0), None, EventKind::WorkloadTick { workload: w })?;
            }
            WorkloadSpec::BenchRecv {
                channel,
                vcpu,
                size,
                trials,
            } => {
                let t = new_thread(self, *vcpu)?;
                self.workloads
                    .push(WorkloadState::BenchRecv(BenchRecvState {
                        channel: ChannelId(*channel),
                        thread: t,
                        size: *size,
                        trials: *trials,
                        msg_idx: 0,
                        chunks_done: 0,
                        bytes_received: 0,
                        expect_seq: 1,
                        corrupt: 0,
                    }));
                self.engine
                    .schedule(SimTime(0), None, EventKind::WorkloadTick { workload: w })?;
            }
            WorkloadSpec::Forkwait { vcpu, iterations } => {
                let t = new_thread(self, *vcpu)?;
                self.workloads.push(WorkloadState::ForkWait(ForkWaitState {
                    thread: t,
                    iterations: *iterations,
                    done: 0,
                }));
                self.engine
                    .schedule(SimTime(0), None, EventKind::WorkloadTick { workload: w })?;
            }
            WorkloadSpec::Busy { vcpu } => {
                let t = new_thread(self, *vcpu)?;
                self.workloads
                    .push(WorkloadState::Busy(BusyState { thread: t }));
                self.engine
                    .schedule(SimTime(0), None, EventKind::WorkloadTick { workload: w })?;
            }
            WorkloadSpec::PeriodicTask { vcpu, exec_ms } => {
                let t = new_thread(self, *vcpu)?;
                let period = self.vcpus[*vcpu as usize].server().v_t;
                let exec = cycles_from_millis(*exec_ms, cps)?;
                self.workloads
                    .push(WorkloadState::PeriodicTask(PeriodicTaskState {
                        thread: t,
                        period,
                        exec,
                        released: 0,
                        completed: 0,
                        missed: 0,
                        job_pending: false,
                    }));
                self.engine
                    .schedule(SimTime(0), None, EventKind::WorkloadTick { workload: w })?;
            }
        }
        Ok(())
    }

    fn resolve_blast(&self, b: &BlastSpec) -> Result<BlastWrite> {
        Ok(match b {
            BlastSpec::Channel { channel } => BlastWrite {
                gpa: self.channels[*channel as usize].buffer_gpa,
                bytes: vec![0xFF; ipc::MAILBOX_BYTES],
            },
            BlastSpec::KernelOf { kernel_of, pages } => BlastWrite {
                gpa: Gpa(
                    self.mem.layout.kernel_host_base[*kernel_of as usize].0 + pages * PAGE_SIZE
                ),
                bytes: vec![0xFF; PAGE_SIZE as usize],
            },
            BlastSpec::Raw { gpa, len, fill } => BlastWrite {
                gpa: Gpa(*gpa),
                bytes: vec![*fill; *len as usize],
            },
        })
    }

    // ------------------------------------------------------------------
    // Event loop
    // ------------------------------------------------------------------

    pub fn run(&mut self) -> Result<()> {
        let horizon = self.engine.horizon();
        while let Some(ev) = self.engine.pop_due(horizon) {
            self.dispatch(ev)?;
            self.settle_dirty()?;
        }
        self.engine.advance_to(horizon);
        self.finish()
    }

    fn dispatch(&mut self, ev: Event) -> Result<()> {
        match ev.kind {
            EventKind::Timer { .. } => Ok(()),
            EventKind::WorkloadTick { workload } => self.on_tick(workload),
            EventKind::IrqDeliver {
                vector,
                dst,
                packet,
            } => self.on_irq_deliver(vector, dst, packet),
            EventKind::IpiDeliver { ipi, ack } => self.on_ipi(ipi, ack),
            EventKind::MonitorTrap { sandbox } => self.on_monitor_trap(sandbox),
            EventKind::VmEnterDone { .. } => Ok(()),
            EventKind::PcpuStep { pcpu, gen } => {
                if self.pcpus[pcpu.0 as usize].gen == gen {
                    self.touch(pcpu);
                }
                Ok(())
            }
            EventKind::Replenish { vcpu } => self.on_replenish(vcpu),
            EventKind::FaultInject { fault } => self.on_fault(fault),
            EventKind::RecoveryPhase { recovery, phase } => self.on_recovery_phase(recovery, phase),
            EventKind::Relaunch { .. } => Ok(()),
        }
    }

    fn finish(&mut self) -> Result<()> {
        for p in 0..self.pcpus.len() {
            self.close_slice(p)?;
        }
        let mut missed = Vec::new();
        for w in &self.workloads {
            if let WorkloadState::IcmpFlood(st) = w {
                for seq in 1..=st.sent {
                    if !st.replied.contains(&seq) {
                        missed.push((seq, st.dst_ip));
                    }
                }
            }
        }
        for (seq, dst) in missed {
            self.record(
                None,
                "icmp_missed",
                format!("seq={seq};dst={}", format_ip(dst)),
            );
        }
        let horizon = self.engine.horizon().cycles();
        self.record(None, "run_end", format!("horizon={horizon}"));
        Ok(())
    }

    fn touch(&mut self, pcpu: PcpuId) {
        self.dirty.insert(pcpu.0);
    }

    fn settle_dirty(&mut self) -> Result<()> {
        let mut spins = 0u32;
        while let Some(p) = self.dirty.pop_first() {
            self.settle(p as usize)?;
            spins += 1;
            if spins > 1_000_000 {
                return Err(Error::State("settle livelock".into()));
            }
        }
        // Budget conservation must hold between any two events, not just
        // at the end of the run. Debug builds sweep after every settle.
        #[cfg(debug_assertions)]
        for v in &self.vcpus {
            debug_assert!(
                v.server().conserved(),
                "vcpu {} budget not conserved at {}",
                v.id().0,
                self.engine.now().0
            );
        }
        Ok(())
    }

    fn record(&mut self, sandbox: Option<SandboxId>, event_type: &'static str, detail: String) {
        self.engine.record(sandbox, event_type, detail);
    }

    // ------------------------------------------------------------------
    // Slice lifecycle
    // ------------------------------------------------------------------

    fn settle(&mut self, pidx: usize) -> Result<()> {
        let now = self.engine.now();
        let finished = self.close_slice(pidx)?;
        let local: Vec<usize> = (0..self.vcpus.len())
            .filter(|&v| self.vcpus[v].pcpu().0 as usize == pidx)
            .collect();
        for &v in &local {
            self.apply_replenishments(v);
        }
        if let Some(work) = finished {
            self.process_finished(work)?;
        }
        let mut cands = Vec::with_capacity(local.len());
        for &v in &local {
            let runnable = self.vcpu_runnable(v);
            let priority = self.vcpu_priority(v);
            let server = self.vcpus[v].server_mut();
            if runnable && server.budget > 0 {
                server.note_eligible(now);
            } else {
                server.note_ineligible();
            }
            cands.push(Candidate {
                vcpu: VcpuId(v as u32),
                runnable,
                budget_positive: server.budget > 0,
                priority,
            });
        }
        let chosen = pick_next(&cands);
        self.open_slice(pidx, chosen)
    }

    /// Charges the elapsed slice and reports work that just completed.
    fn close_slice(&mut self, pidx: usize) -> Result<Option<WorkRef>> {
        let now = self.engine.now();
        let Some(slice) = self.pcpus[pidx].running.take() else {
            return Ok(None);
        };
        let ran = now.saturating_sub(slice.since);
        if ran == 0 {
            return Ok(None);
        }
        self.progress_work(slice.work, ran);
        let owner = self.vcpus[slice.vcpu].owner();
        if slice.band == Band::Foreground {
            let vid = VcpuId(slice.vcpu as u32);
            let server = self.vcpus[slice.vcpu].server_mut();
            let pending_before = server.replenishments.len();
            server.account(vid, slice.since, now)?;
            let exhausted = server.budget == 0;
            let arm = pending_before == 0;
            let next = server.next_replenish_at();
            if exhausted {
                self.record(
                    Some(owner),
                    "budget_exhausted",
                    format!("vcpu={}", slice.vcpu),
                );
            }
            // One wakeup is armed per queue front; later fronts are
            // re-armed by the handler as they surface.
            if arm {
                if let Some(at) = next {
                    self.engine
                        .schedule(at, None, EventKind::Replenish { vcpu: vid })?;
                }
            }
        }
        self.record(
            Some(owner),
            "vcpu_run",
            format!(
                "vcpu={};band={};cycles={ran}",
                slice.vcpu,
                slice.band.as_str()
            ),
        );
        let finished = match slice.work {
            WorkRef::Thread(t) => {
                matches!(self.threads[t].job, Some(Job::Timed { remaining: 0, .. }))
            }
            WorkRef::Io(v) => self.io_queues[v].front().is_some_and(|j| j.remaining == 0),
        };
        Ok(finished.then_some(slice.work))
    }

    fn progress_work(&mut self, work: WorkRef, ran: u64) {
        match work {
            WorkRef::Thread(t) => {
                if let Some(Job::Timed { remaining, .. }) = &mut self.threads[t].job {
                    *remaining = remaining.saturating_sub(ran);
                }
            }
            WorkRef::Io(v) => {
                if let Some(job) = self.io_queues[v].front_mut() {
                    job.remaining = job.remaining.saturating_sub(ran);
                }
            }
        }
    }

    fn apply_replenishments(&mut self, vidx: usize) {
        let now = self.engine.now();
        let server = self.vcpus[vidx].server_mut();
        let restored = server.apply_due(now);
        if restored > 0 {
            let budget = server.budget;
            let owner = self.vcpus[vidx].owner();
            self.record(
                Some(owner),
                "replenish",
                format!("vcpu={vidx};amount={restored};budget={budget}"),
            );
        }
    }

    fn on_replenish(&mut self, vcpu: VcpuId) -> Result<()> {
        let vidx = vcpu.0 as usize;
        self.apply_replenishments(vidx);
        if let Some(at) = self.vcpus[vidx].server().next_replenish_at() {
            self.engine
                .schedule(at, None, EventKind::Replenish { vcpu })?;
        }
        self.touch(self.vcpus[vidx].pcpu());
        Ok(())
    }

    fn process_finished(&mut self, work: WorkRef) -> Result<()> {
        match work {
            WorkRef::Thread(t) => {
                if let Some(Job::Timed { remaining: 0, then }) = self.threads[t].job {
                    self.threads[t].job = None;
                    self.fire_step(t, then)?;
                }
            }
            WorkRef::Io(v) => self.advance_io(v)?,
        }
        Ok(())
    }

    fn vcpu_runnable(&self, vidx: usize) -> bool {
        let owner = self.vcpus[vidx].owner();
        if !self.sandboxes[owner.0 as usize].is_running() {
            return false;
        }
        match &self.vcpus[vidx] {
            Vcpu::Main(m) => m
                .bound_threads
                .iter()
                .any(|&t| self.threads[t].job.is_some()),
            Vcpu::Io { .. } => !self.io_queues[vidx].is_empty(),
        }
    }

    fn vcpu_priority(&mut self, vidx: usize) -> Priority {
        match &self.vcpus[vidx] {
            Vcpu::Main(m) => Priority::Fg(m.fg_priority),
            Vcpu::Io { .. } => {
                let pending: Vec<u32> = self.io_queues[vidx]
                    .iter()
                    .filter_map(|j| j.initiator_fg)
                    .collect();
                let p = io_inherit(&pending);
                if let Vcpu::Io { vcpu, .. } = &mut self.vcpus[vidx] {
                    vcpu.current_priority = p;
                }
                p
            }
        }
    }

    fn select_thread(&mut self, vidx: usize) -> Option<usize> {
        let Vcpu::Main(m) = &self.vcpus[vidx] else {
            return None;
        };
        let n = m.bound_threads.len();
        if n == 0 {
            return None;
        }
        let start = self.thread_rr[vidx] % n;
        for k in 0..n {
            let pos = (start + k) % n;
            let t = m.bound_threads[pos];
            if self.threads[t].job.is_some() {
                self.thread_rr[vidx] = (pos + 1) % n;
                return Some(t);
            }
        }
        None
    }

    fn work_remaining(&self, work: WorkRef) -> u64 {
        match work {
            WorkRef::Thread(t) => match self.threads[t].job {
                Some(Job::Timed { remaining, .. }) => remaining,
                Some(Job::Wait { .. }) => u64::MAX,
                None => 0,
            },
            WorkRef::Io(v) => self.io_queues[v].front().map_or(0, |j| j.remaining),
        }
    }

    fn open_slice(&mut self, pidx: usize, chosen: Chosen) -> Result<()> {
        let now = self.engine.now();
        let Chosen::Run { vcpu, band } = chosen else {
            self.pcpus[pidx].last_dispatched = None;
            return Ok(());
        };
        let vidx = vcpu.0 as usize;
        let work = match &self.vcpus[vidx] {
            Vcpu::Main(_) => WorkRef::Thread(
                self.select_thread(vidx)
                    .expect("runnable main has a thread"),
            ),
            Vcpu::Io { .. } => WorkRef::Io(vidx),
        };
        let last = self.pcpus[pidx].last_dispatched;
        if last != Some((vcpu, band)) {
            if let Some((old, _)) = last {
                if old != vcpu && self.vcpu_runnable(old.0 as usize) {
                    let old_owner = self.vcpus[old.0 as usize].owner();
                    self.record(Some(old_owner), "vcpu_preempt", format!("vcpu={}", old.0));
                }
            }
            let owner = self.vcpus[vidx].owner();
            self.record(
                Some(owner),
                "vcpu_dispatch",
                format!("vcpu={};band={}", vcpu.0, band.as_str()),
            );
            self.pcpus[pidx].last_dispatched = Some((vcpu, band));
        }
        self.pcpus[pidx].gen += 1;
        let gen = self.pcpus[pidx].gen;
        self.pcpus[pidx].running = Some(Slice {
            vcpu: vidx,
            band,
            since: now,
            work,
        });
        let work_bound = self.work_remaining(work);
        let budget_bound = if band == Band::Foreground {
            self.vcpus[vidx].server().budget
        } else {
            u64::MAX
        };
        let bound = work_bound.min(budget_bound);
        if bound != u64::MAX {
            if let Ok(at) = now.checked_add(bound) {
                if at <= self.engine.horizon() {
                    self.engine.schedule(
                        at,
                        None,
                        EventKind::PcpuStep {
                            pcpu: PcpuId(pidx as u32),
                            gen,
                        },
                    )?;
                }
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Signals and guest access
    // ------------------------------------------------------------------

    /// Condition flip: waiting threads come back as a short timed
    /// notice (the poll latency), spinning I/O retries its lock read.
    fn signal(&mut self, cond: CondKey) {
        for t in 0..self.threads.len() {
            if let Some(Job::Wait { cond: c, resume }) = self.threads[t].job {
                if c == cond {
                    self.threads[t].job = Some(Job::Timed {
                        remaining: self.cost.poll_cost,
                        then: resume,
                    });
                    let pcpu = self.vcpus[self.threads[t].vcpu.0 as usize].pcpu();
                    self.touch(pcpu);
                }
            }
        }
        if let CondKey::LockFree(dev) = cond {
            for v in 0..self.vcpus.len() {
                let matches_dev = matches!(
                    &self.vcpus[v],
                    Vcpu::Io { vcpu, .. } if vcpu.device == dev.0
                );
                if !matches_dev {
                    continue;
                }
                if let Some(job) = self.io_queues[v].front_mut() {
                    if job.stage == IoStage::AwaitLock {
                        job.stage = IoStage::Retry;
                        job.remaining = self.cost.poll_cost;
                        let pcpu = self.vcpus[v].pcpu();
                        self.touch(pcpu);
                    }
                }
            }
        }
    }

    /// Guest read from workload context; a violation traps the whole
    /// sandbox and aborts the step.
    fn read_guest(&mut self, t: usize, gpa: Gpa, len: usize) -> Result<Option<Vec<u8>>> {
        let sb = self.threads[t].sandbox;
        match self.mem.guest_read(sb, gpa, len) {
            Ok(v) => Ok(Some(v)),
            Err(viol) => {
                self.threads[t].job = None;
                self.trap_on_violation(viol)?;
                Ok(None)
            }
        }
    }

    fn write_guest(&mut self, t: usize, gpa: Gpa, bytes: &[u8]) -> Result<bool> {
        let sb = self.threads[t].sandbox;
        match self.mem.guest_write(sb, gpa, bytes) {
            Ok(()) => Ok(true),
            Err(viol) => {
                self.threads[t].job = None;
                self.trap_on_violation(viol)?;
                Ok(false)
            }
        }
    }

    fn record_violation(&mut self, v: &EptViolation) {
        self.record(
            Some(v.sandbox),
            "ept_violation",
            format!(
                "gpa={};access={};reason={}",
                v.gpa.0,
                v.access.as_str(),
                v.reason.as_str()
            ),
        );
    }

    /// Hardware-detected violation outside fault injection: exit to
    /// the monitor, which will halt the sandbox (nothing attributes).
    fn trap_on_violation(&mut self, viol: EptViolation) -> Result<()> {
        let sb = viol.sandbox;
        self.record_violation(&viol);
        self.sandboxes[sb.0 as usize].vm_exit(ExitReason::EptViolation)?;
        let count = self.sandboxes[sb.0 as usize].vm_exit_count;
        self.record(
            Some(sb),
            "vm_exit",
            format!("reason={};count={count}", ExitReason::EptViolation.as_str()),
        );
        self.monitors[sb.0 as usize].pending_trap = Some(TrapInfo::Violation(viol));
        self.engine.schedule_in(
            self.cost.vm_exit,
            Some(sb),
            EventKind::MonitorTrap { sandbox: sb },
        )?;
        self.touch(PcpuId(sb.0));
        Ok(())
    }

    fn mailbox_gpa(&self, ch: ChannelId) -> Gpa {
        self.channels[ch.0 as usize].buffer_gpa
    }

    // ------------------------------------------------------------------
    // Workload ticks
    // ------------------------------------------------------------------

    fn schedule_next_tick(&mut self, w: usize, interval: u64) -> Result<()> {
        let now = self.engine.now();
        if let Ok(at) = now.checked_add(interval) {
            if at <= self.engine.horizon() {
                self.engine
                    .schedule(at, None, EventKind::WorkloadTick { workload: w })?;
            }
        }
        Ok(())
    }

    fn thread_pcpu(&self, t: usize) -> PcpuId {
        self.vcpus[self.threads[t].vcpu.0 as usize].pcpu()
    }

    fn on_tick(&mut self, w: usize) -> Result<()> {
        match &self.workloads[w] {
            WorkloadState::IcmpFlood(st) => {
                let (device, dst_ip, src_ip, interval, more) = (
                    st.device,
                    st.dst_ip,
                    st.src_ip,
                    st.interval,
                    st.sent + 1 < st.count,
                );
                let seq = st.next_seq;
                if let WorkloadState::IcmpFlood(st) = &mut self.workloads[w] {
                    st.next_seq += 1;
                    st.sent += 1;
                }
                let now = self.engine.now();
                let packet = IcmpPacket {
                    kind: IcmpKind::Request,
                    seq,
                    src_ip,
                    dst_ip,
                    sent_at: now,
                };
                let vector = self.devices[device.0 as usize].vector;
                self.record(
                    None,
                    "icmp_req",
                    format!("seq={seq};dst={}", format_ip(dst_ip)),
                );
                self.record(None, "irq_raise", format!("vector={vector};seq={seq}"));
                let all: Vec<SandboxId> = (0..self.sandboxes.len() as u32).map(SandboxId).collect();
                match self.apic.resolve(vector, &all) {
                    None => self.record(None, "irq_drop", format!("vector={vector}")),
                    Some(dsts) => {
                        for dst in dsts {
                            self.engine.schedule_in(
                                self.cost.irq_delivery_latency,
                                Some(dst),
                                EventKind::IrqDeliver {
                                    vector,
                                    dst,
                                    packet: Some(packet),
                                },
                            )?;
                        }
                    }
                }
                if more {
                    self.schedule_next_tick(w, interval)?;
                }
            }
            WorkloadState::MsgStream(st) => {
                let (t, ch, interval) = (st.thread, st.channel, st.interval);
                if self.threads[t].job.is_some() {
                    self.record(
                        Some(self.threads[t].sandbox),
                        "msg_tick_skipped",
                        format!("chan={}", ch.0),
                    );
                } else {
                    self.threads[t].job = Some(Job::Timed {
                        remaining: self.cost.poll_cost,
                        then: Step::StreamPollDone,
                    });
                    self.touch(self.thread_pcpu(t));
                }
                self.schedule_next_tick(w, interval)?;
            }
            WorkloadState::MsgRecv(st) => {
                let (t, ch, interval) = (st.thread, st.channel, st.interval);
                if self.threads[t].job.is_some() {
                    if interval.is_some() {
                        self.record(
                            Some(self.threads[t].sandbox),
                            "msg_tick_skipped",
                            format!("chan={}", ch.0),
                        );
                    }
                } else {
                    self.threads[t].job = Some(Job::Timed {
                        remaining: self.cost.poll_cost,
                        then: Step::RecvPollDone,
                    });
                    self.touch(self.thread_pcpu(t));
                }
                if let Some(iv) = interval {
                    self.schedule_next_tick(w, iv)?;
                }
            }
            WorkloadState::BenchSend(st) => {
                let (t, ch, size) = (st.thread, st.channel, st.size);
                self.record(
                    Some(self.threads[t].sandbox),
                    "msg_send_start",
                    format!("chan={};msg=0;bytes={size}", ch.0),
                );
                self.threads[t].job = Some(Job::Timed {
                    remaining: self.cost.poll_cost,
                    then: Step::BenchSendCheck,
                });
                self.touch(self.thread_pcpu(t));
            }
            WorkloadState::BenchRecv(st) => {
                let t = st.thread;
                self.threads[t].job = Some(Job::Timed {
                    remaining: self.cost.poll_cost,
                    then: Step::BenchRecvCheck,
                });
                self.touch(self.thread_pcpu(t));
            }
            WorkloadState::ForkWait(st) => {
                let t = st.thread;
                let iter = self.forkwait_iter_cycles();
                self.threads[t].job = Some(Job::Timed {
                    remaining: iter,
                    then: Step::ForkIterDone,
                });
                self.touch(self.thread_pcpu(t));
            }
            WorkloadState::Busy(st) => {
                let t = st.thread;
                self.threads[t].job = Some(Job::Timed {
                    remaining: u64::MAX,
                    then: Step::TaskDone,
                });
                self.touch(self.thread_pcpu(t));
            }
            WorkloadState::PeriodicTask(st) => {
                let (t, period, exec, pending) = (st.thread, st.period, st.exec, st.job_pending);
                if pending {
                    self.deadline_misses += 1;
                    if let WorkloadState::PeriodicTask(st) = &mut self.workloads[w] {
                        st.missed += 1;
                        st.released += 1;
                    }
                    let vcpu = self.threads[t].vcpu.0;
                    self.record(
                        Some(self.threads[t].sandbox),
                        "deadline_miss",
                        format!("vcpu={vcpu};period={period}"),
                    );
                } else {
                    if let WorkloadState::PeriodicTask(st) = &mut self.workloads[w] {
                        st.job_pending = true;
                        st.released += 1;
                    }
                    self.threads[t].job = Some(Job::Timed {
                        remaining: exec,
                        then: Step::TaskDone,
                    });
                    self.touch(self.thread_pcpu(t));
                }
                self.schedule_next_tick(w, period)?;
            }
        }
        Ok(())
    }

    fn forkwait_iter_cycles(&self) -> u64 {
        2 * self.cost.syscall_cost + self.cost.aspace_create_cost + self.cost.aspace_destroy_cost
    }

    // ------------------------------------------------------------------
    // Thread step completion
    // ------------------------------------------------------------------

    fn fire_step(&mut self, t: usize, step: Step) -> Result<()> {
        let w = self.threads[t].workload;
        let sb = self.threads[t].sandbox;
        match step {
            Step::StreamPollDone => {
                let (ch, size, seq) = match &self.workloads[w] {
                    WorkloadState::MsgStream(s) => (s.channel, s.size, s.next_seq),
                    _ => unreachable!("step/workload mismatch"),
                };
                let gpa = self.mailbox_gpa(ch);
                let Some(buf) = self.read_guest(t, gpa, 1)? else {
                    return Ok(());
                };
                if buf[0] == ipc::STATUS_EMPTY {
                    self.record(
                        Some(sb),
                        "msg_send_start",
                        format!("chan={};seq={seq};bytes={size}", ch.0),
                    );
                    self.threads[t].job = Some(Job::Timed {
                        remaining: self
                            .cost
                            .copy_cycles(ipc::HEADER_BYTES as u64 + size as u64),
                        then: Step::StreamCommit,
                    });
                } else {
                    if let WorkloadState::MsgStream(s) = &mut self.workloads[w] {
                        s.dropped += 1;
                    }
                    self.record(
                        Some(sb),
                        "msg_dropped",
                        format!("chan={};seq={seq};status={}", ch.0, buf[0]),
                    );
                }
            }
            Step::StreamCommit => {
                let (ch, size, seq) = match &self.workloads[w] {
                    WorkloadState::MsgStream(s) => (s.channel, s.size, s.next_seq),
                    _ => unreachable!("step/workload mismatch"),
                };
                let payload = pattern_payload(seq, size as usize);
                if !self.commit_chunk(t, ch, seq, &payload)? {
                    return Ok(());
                }
                if let WorkloadState::MsgStream(s) = &mut self.workloads[w] {
                    s.sent += 1;
                    s.next_seq += 1;
                }
            }
            Step::RecvPollDone => {
                let (ch, interval, got_first) = match &self.workloads[w] {
                    WorkloadState::MsgRecv(s) => (s.channel, s.interval, s.got_first),
                    _ => unreachable!("step/workload mismatch"),
                };
                let gpa = self.mailbox_gpa(ch);
                let Some(buf) = self.read_guest(t, gpa, ipc::OFF_SEQ)? else {
                    return Ok(());
                };
                match buf[0] {
                    ipc::STATUS_FULL => {
                        let len = u32::from_le_bytes(
                            buf[ipc::OFF_LENGTH..ipc::OFF_SEQ].try_into().unwrap(),
                        )
                        .min(ipc::MAX_PAYLOAD as u32);
                        self.threads[t].job = Some(Job::Timed {
                            remaining: self.cost.copy_cycles(ipc::HEADER_BYTES as u64 + len as u64),
                            then: Step::RecvCopyDone,
                        });
                    }
                    ipc::STATUS_EMPTY => {
                        if got_first && interval.is_some() {
                            if let WorkloadState::MsgRecv(s) = &mut self.workloads[w] {
                                s.misses += 1;
                            }
                            self.record(Some(sb), "msg_poll_empty", format!("chan={}", ch.0));
                        }
                        if interval.is_none() {
                            self.threads[t].job = Some(Job::Wait {
                                cond: CondKey::MailboxFull(ch),
                                resume: Step::RecvPollDone,
                            });
                        }
                    }
                    other => {
                        if let WorkloadState::MsgRecv(s) = &mut self.workloads[w] {
                            if s.got_first {
                                s.misses += 1;
                            }
                        }
                        self.record(
                            Some(sb),
                            "msg_corrupt",
                            format!("chan={};kind=status;status={other}", ch.0),
                        );
                    }
                }
            }
            Step::RecvCopyDone => {
                let ch = match &self.workloads[w] {
                    WorkloadState::MsgRecv(s) => s.channel,
                    _ => unreachable!("step/workload mismatch"),
                };
                let gpa = self.mailbox_gpa(ch);
                let Some(buf) = self.read_guest(t, gpa, ipc::MAILBOX_BYTES)? else {
                    return Ok(());
                };
                match ipc::decode(&buf) {
                    Ok(Some(frame)) => {
                        let want = pattern_payload(frame.seq, frame.payload.len());
                        if frame.payload != want {
                            self.record(
                                Some(sb),
                                "msg_corrupt",
                                format!("chan={};kind=payload;seq={}", ch.0, frame.seq),
                            );
                        }
                        let bytes = frame.payload.len();
                        if !self.write_guest(t, gpa, &[ipc::STATUS_EMPTY])? {
                            return Ok(());
                        }
                        self.signal(CondKey::MailboxEmpty(ch));
                        if let WorkloadState::MsgRecv(s) = &mut self.workloads[w] {
                            s.received += 1;
                            s.got_first = true;
                        }
                        self.record(
                            Some(sb),
                            "msg_recv_done",
                            format!("chan={};seq={};bytes={bytes}", ch.0, frame.seq),
                        );
                        let interval = match &self.workloads[w] {
                            WorkloadState::MsgRecv(s) => s.interval,
                            _ => unreachable!(),
                        };
                        if interval.is_none() {
                            self.threads[t].job = Some(Job::Timed {
                                remaining: self.cost.poll_cost,
                                then: Step::RecvPollDone,
                            });
                        }
                    }
                    Ok(None) => {}
                    Err(e) => {
                        if let WorkloadState::MsgRecv(s) = &mut self.workloads[w] {
                            if s.got_first {
                                s.misses += 1;
                            }
                        }
                        self.record(
                            Some(sb),
                            "msg_corrupt",
                            format!("chan={};kind=decode;error={e:?}", ch.0),
                        );
                    }
                }
            }
            Step::BenchSendCheck => {
                let (ch, size, chunk_idx) = match &self.workloads[w] {
                    WorkloadState::BenchSend(s) => (s.channel, s.size, s.chunk_idx),
                    _ => unreachable!("step/workload mismatch"),
                };
                let gpa = self.mailbox_gpa(ch);
                let Some(buf) = self.read_guest(t, gpa, 1)? else {
                    return Ok(());
                };
                if buf[0] == ipc::STATUS_EMPTY {
                    let len = bench_chunk_len(size, chunk_idx);
                    self.threads[t].job = Some(Job::Timed {
                        remaining: self.cost.copy_cycles(ipc::HEADER_BYTES as u64 + len as u64),
                        then: Step::BenchSendCommit,
                    });
                } else {
                    self.threads[t].job = Some(Job::Wait {
                        cond: CondKey::MailboxEmpty(ch),
                        resume: Step::BenchSendCheck,
                    });
                }
            }
            Step::BenchSendCommit => {
                let (ch, size, trials, msg_idx, chunk_idx, seq) = match &self.workloads[w] {
                    WorkloadState::BenchSend(s) => (
                        s.channel,
                        s.size,
                        s.trials,
                        s.msg_idx,
                        s.chunk_idx,
                        s.next_seq,
                    ),
                    _ => unreachable!("step/workload mismatch"),
                };
                let len = bench_chunk_len(size, chunk_idx);
                let payload = pattern_payload(seq, len as usize);
                if !self.commit_chunk(t, ch, seq, &payload)? {
                    return Ok(());
                }
                let chunks = ipc::chunk_count(size as usize) as u32;
                let last_chunk = chunk_idx + 1 == chunks;
                if let WorkloadState::BenchSend(s) = &mut self.workloads[w] {
                    s.next_seq += 1;
                    if last_chunk {
                        s.chunk_idx = 0;
                        s.msg_idx += 1;
                    } else {
                        s.chunk_idx += 1;
                    }
                }
                if last_chunk && msg_idx + 1 >= trials {
                    return Ok(()); // all trials sent
                }
                if last_chunk {
                    self.record(
                        Some(sb),
                        "msg_send_start",
                        format!("chan={};msg={};bytes={size}", ch.0, msg_idx + 1),
                    );
                }
                self.threads[t].job = Some(Job::Timed {
                    remaining: self.cost.poll_cost,
                    then: Step::BenchSendCheck,
                });
            }
            Step::BenchRecvCheck => {
                let ch = match &self.workloads[w] {
                    WorkloadState::BenchRecv(s) => s.channel,
                    _ => unreachable!("step/workload mismatch"),
                };
                let gpa = self.mailbox_gpa(ch);
                let Some(buf) = self.read_guest(t, gpa, ipc::OFF_SEQ)? else {
                    return Ok(());
                };
                if buf[0] == ipc::STATUS_FULL {
                    let len =
                        u32::from_le_bytes(buf[ipc::OFF_LENGTH..ipc::OFF_SEQ].try_into().unwrap())
                            .min(ipc::MAX_PAYLOAD as u32);
                    self.threads[t].job = Some(Job::Timed {
                        remaining: self.cost.copy_cycles(ipc::HEADER_BYTES as u64 + len as u64),
                        then: Step::BenchRecvConsume,
                    });
                } else {
                    self.threads[t].job = Some(Job::Wait {
                        cond: CondKey::MailboxFull(ch),
                        resume: Step::BenchRecvCheck,
                    });
                }
            }
            Step::BenchRecvConsume => {
                let (ch, size, trials, msg_idx, expect_seq) = match &self.workloads[w] {
                    WorkloadState::BenchRecv(s) => {
                        (s.channel, s.size, s.trials, s.msg_idx, s.expect_seq)
                    }
                    _ => unreachable!("step/workload mismatch"),
                };
                let gpa = self.mailbox_gpa(ch);
                let Some(buf) = self.read_guest(t, gpa, ipc::MAILBOX_BYTES)? else {
                    return Ok(());
                };
                let frame = match ipc::decode(&buf) {
                    Ok(Some(f)) => f,
                    Ok(None) => {
                        // Raced an empty mailbox; wait for the flip.
                        self.threads[t].job = Some(Job::Wait {
                            cond: CondKey::MailboxFull(ch),
                            resume: Step::BenchRecvCheck,
                        });
                        return Ok(());
                    }
                    Err(e) => {
                        if let WorkloadState::BenchRecv(s) = &mut self.workloads[w] {
                            s.corrupt += 1;
                        }
                        self.record(
                            Some(sb),
                            "msg_corrupt",
                            format!("chan={};kind=decode;error={e:?}", ch.0),
                        );
                        return Ok(());
                    }
                };
                if frame.seq != expect_seq {
                    if let WorkloadState::BenchRecv(s) = &mut self.workloads[w] {
                        s.corrupt += 1;
                    }
                    self.record(
                        Some(sb),
                        "msg_corrupt",
                        format!("chan={};kind=seq;got={};want={expect_seq}", ch.0, frame.seq),
                    );
                }
                let want = pattern_payload(frame.seq, frame.payload.len());
                if frame.payload != want {
                    if let WorkloadState::BenchRecv(s) = &mut self.workloads[w] {
                        s.corrupt += 1;
                    }
                    self.record(
                        Some(sb),
                        "msg_corrupt",
                        format!("chan={};kind=payload;seq={}", ch.0, frame.seq),
                    );
                }
                if !self.write_guest(t, gpa, &[ipc::STATUS_EMPTY])? {
                    return Ok(());
                }
                self.signal(CondKey::MailboxEmpty(ch));
                let got = frame.payload.len() as u64;
                let chunks = ipc::chunk_count(size as usize) as u32;
                let mut message_done = false;
                let mut total = 0u64;
                if let WorkloadState::BenchRecv(s) = &mut self.workloads[w] {
                    s.expect_seq += 1;
                    s.chunks_done += 1;
                    s.bytes_received += got;
                    if s.chunks_done == chunks {
                        message_done = true;
                        total = s.bytes_received;
                        s.chunks_done = 0;
                        s.bytes_received = 0;
                        s.msg_idx += 1;
                    }
                }
                if message_done {
                    self.record(
                        Some(sb),
                        "msg_recv_done",
                        format!("chan={};msg={msg_idx};bytes={total}", ch.0),
                    );
                    if msg_idx + 1 >= trials {
                        return Ok(()); // benchmark complete
                    }
                }
                self.threads[t].job = Some(Job::Timed {
                    remaining: self.cost.poll_cost,
                    then: Step::BenchRecvCheck,
                });
            }
            Step::ForkIterDone => {
                let (iterations, done) = match &self.workloads[w] {
                    WorkloadState::ForkWait(s) => (s.iterations, s.done + 1),
                    _ => unreachable!("step/workload mismatch"),
                };
                if let WorkloadState::ForkWait(s) = &mut self.workloads[w] {
                    s.done = done;
                }
                if done < iterations {
                    let iter = self.forkwait_iter_cycles();
                    self.threads[t].job = Some(Job::Timed {
                        remaining: iter,
                        then: Step::ForkIterDone,
                    });
                } else {
                    self.record(
                        Some(sb),
                        "forkwait_done",
                        format!("iterations={iterations}"),
                    );
                }
            }
            Step::TaskDone => {
                if let WorkloadState::PeriodicTask(s) = &mut self.workloads[w] {
                    s.completed += 1;
                    s.job_pending = false;
                }
            }
        }
        Ok(())
    }

    /// Writes body and status of one chunk and wakes the readers.
    /// Returns false if the write trapped.
    fn commit_chunk(&mut self, t: usize, ch: ChannelId, seq: u32, payload: &[u8]) -> Result<bool> {
        let sb = self.threads[t].sandbox;
        let gpa = self.mailbox_gpa(ch);
        let body = ipc::body_bytes(seq, payload)?;
        if !self.write_guest(t, Gpa(gpa.0 + ipc::OFF_LENGTH as u64), &body)? {
            return Ok(false);
        }
        if !self.write_guest(t, gpa, &[ipc::STATUS_FULL])? {
            return Ok(false);
        }
        self.record(
            Some(sb),
            "msg_chunk",
            format!("chan={};seq={seq};bytes={}", ch.0, payload.len()),
        );
        self.signal(CondKey::MailboxFull(ch));
        Ok(true)
    }

    // ------------------------------------------------------------------
    // Interrupt pipeline
    // ------------------------------------------------------------------

    fn on_irq_deliver(
        &mut self,
        vector: u8,
        dst: SandboxId,
        packet: Option<IcmpPacket>,
    ) -> Result<()> {
        let Some(packet) = packet else {
            self.record(Some(dst), "irq_discard", "reason=spurious".to_string());
            return Ok(());
        };
        self.record(
            Some(dst),
            "irq_deliver",
            format!("vector={vector};seq={}", packet.seq),
        );
        if !self.sandboxes[dst.0 as usize].is_running() {
            self.record(
                Some(dst),
                "irq_discard",
                format!("seq={};reason=sandbox-down", packet.seq),
            );
            return Ok(());
        }
        let Some(vidx) = self.io_vcpu_of(dst, vector) else {
            self.record(
                Some(dst),
                "irq_discard",
                format!("seq={};reason=no-io-vcpu", packet.seq),
            );
            return Ok(());
        };
        self.io_queues[vidx].push_back(IoJob {
            packet,
            stage: IoStage::Demux,
            remaining: self.cost.demux_cost,
            initiator_fg: None,
        });
        self.touch(self.vcpus[vidx].pcpu());
        Ok(())
    }

    fn io_vcpu_of(&self, sb: SandboxId, vector: u8) -> Option<usize> {
        (0..self.vcpus.len()).find(|&v| match &self.vcpus[v] {
            Vcpu::Io { vcpu, owner } => {
                *owner == sb && self.devices[vcpu.device as usize].vector == vector
            }
            _ => false,
        })
    }

    /// Front job of an I/O queue finished its timed stage.
    fn advance_io(&mut self, vidx: usize) -> Result<()> {
        let owner = self.vcpus[vidx].owner();
        let device = match &self.vcpus[vidx] {
            Vcpu::Io { vcpu, .. } => vcpu.device as usize,
            _ => unreachable!("io work on a main vcpu"),
        };
        let Some(job) = self.io_queues[vidx].front() else {
            return Ok(());
        };
        let (stage, packet) = (job.stage, job.packet);
        match stage {
            IoStage::Demux => {
                let has_driver = self.devices[device]
                    .attached
                    .iter()
                    .any(|id| self.drivers[id.0 as usize].sandbox == owner);
                let vifs: Vec<VirtualInterface> = self
                    .vifs
                    .iter()
                    .filter(|v| v.sandbox == owner)
                    .cloned()
                    .collect();
                match early_demux(has_driver, &vifs, &packet) {
                    DemuxDecision::Discard => {
                        let reason = if has_driver { "not-mine" } else { "no-driver" };
                        self.io_queues[vidx].pop_front();
                        self.record(
                            Some(owner),
                            "irq_discard",
                            format!("seq={};reason={reason}", packet.seq),
                        );
                    }
                    DemuxDecision::Handle => {
                        let healthy = self.devices[device].attached.iter().any(|id| {
                            let d = &self.drivers[id.0 as usize];
                            d.sandbox == owner && d.is_healthy()
                        });
                        if !healthy {
                            self.io_queues[vidx].pop_front();
                            self.record(
                                Some(owner),
                                "irq_discard",
                                format!("seq={};reason=driver-unavailable", packet.seq),
                            );
                        } else {
                            self.record(Some(owner), "irq_handle", format!("seq={}", packet.seq));
                            self.try_lock(vidx, device, owner)?;
                        }
                    }
                }
            }
            IoStage::Retry => self.try_lock(vidx, device, owner)?,
            IoStage::AwaitLock => {} // spins; never completes
            IoStage::Service => {
                let lock_gpa = self.devices[device].shared_lock_gpa;
                self.mem
                    .guest_write(owner, lock_gpa, &[LOCK_FREE])
                    .expect("shared lock page is mapped everywhere");
                self.io_queues[vidx].pop_front();
                let now = self.engine.now();
                let rtt = now.saturating_sub(packet.sent_at) + self.cost.irq_delivery_latency;
                self.record(
                    Some(owner),
                    "icmp_reply",
                    format!(
                        "seq={};dst={};rtt={rtt}",
                        packet.seq,
                        devices::format_ip(packet.dst_ip)
                    ),
                );
                for w in &mut self.workloads {
                    if let WorkloadState::IcmpFlood(st) = w {
                        if st.dst_ip == packet.dst_ip {
                            st.replied.insert(packet.seq);
                            break;
                        }
                    }
                }
                self.signal(CondKey::LockFree(DeviceId(device as u32)));
            }
        }
        Ok(())
    }

    fn try_lock(&mut self, vidx: usize, device: usize, owner: SandboxId) -> Result<()> {
        let lock_gpa = self.devices[device].shared_lock_gpa;
        let cur = self
            .mem
            .guest_read(owner, lock_gpa, 1)
            .expect("shared lock page is mapped everywhere")[0];
        let (next, acquired) = lock_try_acquire(cur);
        if acquired {
            self.mem
                .guest_write(owner, lock_gpa, &[next])
                .expect("shared lock page is mapped everywhere");
            if let Some(job) = self.io_queues[vidx].front_mut() {
                job.stage = IoStage::Service;
                job.remaining = self.cost.icmp_service_cost;
            }
        } else {
            let seq = self.io_queues[vidx]
                .front()
                .map(|j| j.packet.seq)
                .unwrap_or(0);
            if let Some(job) = self.io_queues[vidx].front_mut() {
                job.stage = IoStage::AwaitLock;
                job.remaining = u64::MAX;
            }
            self.record(
                Some(owner),
                "lock_wait",
                format!("device={device};seq={seq}"),
            );
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Faults and recovery
    // ------------------------------------------------------------------

    fn on_fault(&mut self, idx: usize) -> Result<()> {
        let (sb, driver, mode, blast) = {
            let f = &self.faults[idx];
            (f.sandbox, f.driver, f.mode, f.blast.clone())
        };
        self.record(
            Some(sb),
            "fault_inject",
            format!("mode={};driver={}", mode.as_str(), driver.0),
        );
        self.drivers[driver.0 as usize].corrupt()?;
        self.drain_io(sb, "in-flight");

        // Snapshot everything the blast must not reach, attempt the
        // writes through the faulty sandbox's own table, then verify.
        let regions = self.isolation_regions(sb);
        let mut before = Vec::with_capacity(regions.len());
        for (_, _, hpa, len) in &regions {
            before.push(self.mem.host().logical_digest(*hpa, *len)?);
        }
        let mut violated = false;
        for bw in &blast {
            let mut off = 0usize;
            while off < bw.bytes.len() {
                let gpa = Gpa(bw.gpa.0 + off as u64);
                let page_off = (gpa.0 % PAGE_SIZE) as usize;
                let take = (bw.bytes.len() - off).min(PAGE_SIZE as usize - page_off);
                match self.mem.guest_write(sb, gpa, &bw.bytes[off..off + take]) {
                    Ok(()) => self.note_damage(gpa, take),
                    Err(v) => {
                        violated = true;
                        self.record_violation(&v);
                    }
                }
                off += take;
            }
        }
        for (i, (label, owner, hpa, len)) in regions.iter().enumerate() {
            let after = self.mem.host().logical_digest(*hpa, *len)?;
            let intact = u8::from(after == before[i]);
            self.record(
                *owner,
                "isolation_check",
                format!("{label};intact={intact}"),
            );
        }

        let reason = if violated {
            ExitReason::EptViolation
        } else {
            ExitReason::Forced
        };
        self.sandboxes[sb.0 as usize].vm_exit(reason)?;
        let count = self.sandboxes[sb.0 as usize].vm_exit_count;
        self.record(
            Some(sb),
            "vm_exit",
            format!("reason={};count={count}", reason.as_str()),
        );
        self.monitors[sb.0 as usize].pending_trap = Some(TrapInfo::Forced { fault: idx });
        self.engine.schedule_in(
            self.cost.vm_exit,
            Some(sb),
            EventKind::MonitorTrap { sandbox: sb },
        )?;
        self.touch(PcpuId(sb.0));
        Ok(())
    }

    /// Host ranges that must survive a blast from `faulty`: the BIOS,
    /// every other kernel image, and all table storage.
    fn isolation_regions(&self, faulty: SandboxId) -> Vec<(String, Option<SandboxId>, Hpa, u64)> {
        let lay = &self.mem.layout;
        let mut v: Vec<(String, Option<SandboxId>, Hpa, u64)> = Vec::new();
        v.push(("region=bios".to_string(), None, Hpa(0), lay.bios_bytes));
        for i in 0..self.sandboxes.len() {
            if i as u32 != faulty.0 {
                v.push((
                    format!("region=kernel;owner={i}"),
                    Some(SandboxId(i as u32)),
                    lay.kernel_host_base[i],
                    lay.kernel_bytes,
                ));
            }
        }
        for (i, (hpa, len)) in lay.ept_data_host.iter().enumerate() {
            v.push((
                format!("region=table;owner={i}"),
                Some(SandboxId(i as u32)),
                *hpa,
                *len,
            ));
        }
        v
    }

    fn note_damage(&mut self, gpa: Gpa, len: usize) {
        let end = gpa.0 + len as u64;
        for ch in &self.channels {
            let b = ch.buffer_gpa.0;
            if gpa.0 < b + PAGE_SIZE && end > b {
                self.damaged_channels.insert(ch.id.0);
            }
        }
    }

    fn drain_io(&mut self, sb: SandboxId, reason: &str) {
        for v in 0..self.vcpus.len() {
            if !matches!(&self.vcpus[v], Vcpu::Io { owner, .. } if *owner == sb) {
                continue;
            }
            let mut seqs = Vec::new();
            while let Some(job) = self.io_queues[v].pop_front() {
                seqs.push(job.packet.seq);
            }
            for seq in seqs {
                self.record(
                    Some(sb),
                    "irq_discard",
                    format!("seq={seq};reason={reason}"),
                );
            }
            self.touch(self.vcpus[v].pcpu());
        }
    }

    fn on_monitor_trap(&mut self, sb: SandboxId) -> Result<()> {
        let trap = self.monitors[sb.0 as usize].pending_trap.take();
        let fault = match &trap {
            Some(TrapInfo::Forced { fault }) => Some(*fault),
            _ => None,
        };
        let mode = fault.map(|f| self.faults[f].mode);
        let action = self.monitors[sb.0 as usize].decide(mode);
        self.record(
            Some(sb),
            "monitor_decision",
            format!("action={}", action.as_str()),
        );
        match action {
            MonitorAction::Halt => {
                self.sandboxes[sb.0 as usize].halt();
                self.drain_io(sb, "sandbox-down");
                self.touch(PcpuId(sb.0));
            }
            MonitorAction::LocalRecover => {
                self.start_local(fault.expect("attributed"), sb)?;
            }
            MonitorAction::RemoteRecover => {
                self.start_remote(fault.expect("attributed"), sb)?;
            }
            MonitorAction::Reboot => {
                self.start_reboot(fault.expect("attributed"), sb)?;
            }
        }
        Ok(())
    }

    fn start_local(&mut self, fault: usize, sb: SandboxId) -> Result<()> {
        let diversity = self.monitors[sb.0 as usize].policy.diversity;
        let driver = self.faults[fault].driver;
        self.drivers[driver.0 as usize].begin_reinit(diversity)?;
        let phases = local_phases(&self.cost, diversity);
        let rec = self.recoveries.len();
        self.recoveries.push(RecoveryRun {
            fault,
            mode: RecoveryMode::Local,
            sandbox: sb,
            target: None,
            phases: phases.clone(),
            fault_at: self.faults[fault].at,
            new_driver: None,
            completed: false,
            downtime: 0,
            restored: Vec::new(),
        });
        self.record_phase(rec, 0);
        self.engine.schedule_in(
            phases[1].cycles,
            Some(sb),
            EventKind::RecoveryPhase {
                recovery: rec,
                phase: 1,
            },
        )?;
        Ok(())
    }

    fn start_remote(&mut self, fault: usize, sb: SandboxId) -> Result<()> {
        let candidates: Vec<SandboxId> = (0..self.sandboxes.len() as u32)
            .map(SandboxId)
            .filter(|&c| c != sb && self.sandboxes[c.0 as usize].is_running())
            .collect();
        let mut loads: BTreeMap<SandboxId, f64> = BTreeMap::new();
        for v in &self.vcpus {
            *loads.entry(v.owner()).or_insert(0.0) += v.server().utilization();
        }
        let target = self.monitors[sb.0 as usize].policy.select_target(
            &candidates,
            &loads,
            self.engine.rng(),
        );
        let Some(target) = target else {
            // Nobody can take the service over; degrade to local.
            self.record(Some(sb), "recovery_fallback", "to=local".to_string());
            return self.start_local(fault, sb);
        };
        let driver = self.faults[fault].driver;
        let device = self.drivers[driver.0 as usize].device;
        let vector = self.devices[device.0 as usize].vector;
        let channels = self.sandboxes[sb.0 as usize].channels.clone();
        let phases = remote_phases(&self.cost);
        let rec = self.recoveries.len();
        self.recoveries.push(RecoveryRun {
            fault,
            mode: RecoveryMode::Remote,
            sandbox: sb,
            target: Some(target),
            phases,
            fault_at: self.faults[fault].at,
            new_driver: None,
            completed: false,
            downtime: 0,
            restored: Vec::new(),
        });
        self.record_phase(rec, 0);
        let ipi = Ipi::new(
            sb,
            target,
            vector,
            IpiPayload::RecoveryKickstart(RecoveryDescriptor {
                device: device.0,
                vector,
                channels,
                fault,
            }),
        )?;
        self.record(
            Some(sb),
            "ipi_send",
            format!("src={};dst={};tag={}", sb.0, target.0, ipi.payload.tag()),
        );
        self.engine.schedule_in(
            self.cost.ipi_request_cost(),
            Some(target),
            EventKind::IpiDeliver { ipi, ack: false },
        )?;
        Ok(())
    }

    fn start_reboot(&mut self, fault: usize, sb: SandboxId) -> Result<()> {
        self.sandboxes[sb.0 as usize].halt();
        self.drain_io(sb, "sandbox-down");
        self.touch(PcpuId(sb.0));
        let phases = reboot_phases(&self.cost);
        let rec = self.recoveries.len();
        self.recoveries.push(RecoveryRun {
            fault,
            mode: RecoveryMode::Reboot,
            sandbox: sb,
            target: None,
            phases: phases.clone(),
            fault_at: self.faults[fault].at,
            new_driver: None,
            completed: false,
            downtime: 0,
            restored: Vec::new(),
        });
        self.record_phase(rec, 0);
        self.engine.schedule_in(
            phases[1].cycles,
            Some(sb),
            EventKind::RecoveryPhase {
                recovery: rec,
                phase: 1,
            },
        )?;
        Ok(())
    }

    fn record_phase(&mut self, rec: usize, phase: usize) {
        let run = &self.recoveries[rec];
        let (mode, sb) = (run.mode, run.sandbox);
        let p = run.phases[phase].clone();
        self.record(
            Some(sb),
            "recovery_phase",
            format!("mode={};name={};cycles={}", mode.as_str(), p.name, p.cycles),
        );
    }

    fn on_ipi(&mut self, ipi: Ipi, ack: bool) -> Result<()> {
        let IpiPayload::RecoveryKickstart(desc) = &ipi.payload else {
            self.record(
                Some(ipi.dst),
                "ipi_deliver",
                format!(
                    "src={};dst={};tag={}",
                    ipi.src.0,
                    ipi.dst.0,
                    ipi.payload.tag()
                ),
            );
            return Ok(());
        };
        let fault = desc.fault;
        let rec = self
            .recoveries
            .iter()
            .rposition(|r| r.fault == fault && !r.completed)
            .ok_or_else(|| Error::State(format!("ipi for unknown recovery of fault {fault}")))?;
        let leg = if ack { "ack" } else { "request" };
        self.record(
            Some(ipi.dst),
            "ipi_deliver",
            format!(
                "src={};dst={};tag={};leg={leg}",
                ipi.src.0,
                ipi.dst.0,
                ipi.payload.tag()
            ),
        );
        if !ack {
            // Target monitor seizes its kernel and acks back.
            self.sandboxes[ipi.dst.0 as usize].state = crate::sandbox::SandboxState::Recovering;
            self.touch(PcpuId(ipi.dst.0));
            let back = Ipi::new(ipi.dst, ipi.src, ipi.vector, ipi.payload.clone())?;
            self.engine.schedule_in(
                self.cost.ipi_ack_cost(),
                Some(ipi.src),
                EventKind::IpiDeliver {
                    ipi: back,
                    ack: true,
                },
            )?;
        } else {
            self.record_phase(rec, 1); // ipi_round_trip complete
            let next = self.recoveries[rec].phases[2].cycles;
            self.engine.schedule_in(
                next,
                Some(self.recoveries[rec].sandbox),
                EventKind::RecoveryPhase {
                    recovery: rec,
                    phase: 2,
                },
            )?;
        }
        Ok(())
    }

    fn on_recovery_phase(&mut self, rec: usize, phase: usize) -> Result<()> {
        self.record_phase(rec, phase);
        let run = &self.recoveries[rec];
        let (mode, sb, target, name) = (run.mode, run.sandbox, run.target, run.phases[phase].name);
        match name {
            "driver_switch" | "driver_reinit" | "ipi_round_trip" => {}
            "vm_enter" => match mode {
                RecoveryMode::Local => {
                    self.sandboxes[sb.0 as usize].vm_enter()?;
                    self.record(Some(sb), "vm_enter", "mode=local".to_string());
                    self.touch(PcpuId(sb.0));
                }
                RecoveryMode::Remote => {
                    let target = target.expect("remote has a target");
                    self.sandboxes[target.0 as usize].vm_enter()?;
                    self.record(Some(target), "vm_enter", "mode=remote".to_string());
                    self.adopt_service(rec, sb, target)?;
                    self.touch(PcpuId(target.0));
                }
                RecoveryMode::Reboot => unreachable!("reboot has no vm_enter phase"),
            },
            "network_reinit" => self.complete_recovery(rec)?,
            "reboot" => {
                self.sandboxes[sb.0 as usize].launch()?;
                self.record(Some(sb), "sandbox_launch", "reason=reboot".to_string());
                let driver = self.faults[self.recoveries[rec].fault].driver;
                let d = &mut self.drivers[driver.0 as usize];
                d.state = DriverState::Healthy;
                d.implementation = Implementation::Primary;
                self.touch(PcpuId(sb.0));
                self.complete_recovery(rec)?;
            }
            other => unreachable!("unknown recovery phase {other}"),
        }
        let n_phases = self.recoveries[rec].phases.len();
        if phase + 1 < n_phases {
            let next = self.recoveries[rec].phases[phase + 1].cycles;
            let sb = self.recoveries[rec].sandbox;
            self.engine.schedule_in(
                next,
                Some(sb),
                EventKind::RecoveryPhase {
                    recovery: rec,
                    phase: phase + 1,
                },
            )?;
        }
        Ok(())
    }

    /// Remote vm_enter: the target brings up a fresh driver instance,
    /// the vector redirects to it, and the faulty sandbox's interfaces
    /// move over.
    fn adopt_service(&mut self, rec: usize, sb: SandboxId, target: SandboxId) -> Result<()> {
        let fault = self.recoveries[rec].fault;
        let old_driver = self.faults[fault].driver;
        let device = self.drivers[old_driver.0 as usize].device;
        let vector = self.devices[device.0 as usize].vector;
        let id = DriverId(self.drivers.len() as u32);
        let gpa = Gpa(self.mem.layout.kernel_base_gpa.0
            + self.mem.layout.kernel_bytes / 2
            + device.0 as u64 * PAGE_SIZE);
        self.drivers.push(DriverInstance {
            id,
            sandbox: target,
            device,
            state: DriverState::Reinitializing,
            private_data_gpa: gpa,
            private_data_len: PAGE_SIZE,
            implementation: Implementation::Primary,
        });
        self.devices[device.0 as usize].attached.push(id);
        self.sandboxes[target.0 as usize].drivers.push(id.0);
        self.recoveries[rec].new_driver = Some(id.0 as usize);
        self.apic.redirect(
            vector,
            Destinations::set([target]),
            RedirectAuthority::Monitor(&self.monitors[target.0 as usize].token),
        )?;
        self.record(
            Some(target),
            "irq_redirect",
            format!("vector={vector};to={}", target.0),
        );
        let mut moved = Vec::new();
        for vif in &mut self.vifs {
            if vif.sandbox == sb {
                vif.sandbox = target;
                moved.push(vif.ip);
            }
        }
        for ip in moved {
            self.record(
                Some(target),
                "vif_move",
                format!("ip={};from={};to={}", format_ip(ip), sb.0, target.0),
            );
        }
        Ok(())
    }

    fn complete_recovery(&mut self, rec: usize) -> Result<()> {
        let now = self.engine.now();
        let (mode, sb, target, fault) = {
            let r = &self.recoveries[rec];
            (r.mode, r.sandbox, r.target, r.fault)
        };
        match mode {
            RecoveryMode::Local => {
                let driver = self.faults[fault].driver;
                self.drivers[driver.0 as usize].finish_reinit()?;
            }
            RecoveryMode::Remote => {
                let new = self.recoveries[rec].new_driver.expect("driver adopted");
                self.drivers[new].finish_reinit()?;
                let old = self.faults[fault].driver;
                let device = self.drivers[old.0 as usize].device;
                self.devices[device.0 as usize]
                    .attached
                    .retain(|&d| d != old);
                // The faulty kernel heals in the background and comes
                // back up without its device role.
                self.sandboxes[sb.0 as usize].halt();
                self.sandboxes[sb.0 as usize].launch()?;
                self.record(
                    Some(sb),
                    "sandbox_launch",
                    "reason=background-heal".to_string(),
                );
                self.touch(PcpuId(sb.0));
                let tpc = self
                    .vcpus
                    .iter()
                    .find(|v| v.owner() == target.expect("target"));
                if let Some(v) = tpc {
                    let p = v.pcpu();
                    self.touch(p);
                }
            }
            RecoveryMode::Reboot => {}
        }
        let incident: Vec<u32> = self
            .damaged_channels
            .iter()
            .copied()
            .filter(|&c| self.channels[c as usize].is_endpoint(sb))
            .collect();
        for c in incident {
            let gpa = self.channels[c as usize].buffer_gpa;
            self.mem
                .host_mut()
                .write(Hpa(gpa.0), &[0u8; ipc::MAILBOX_BYTES])?;
            self.damaged_channels.remove(&c);
            self.recoveries[rec].restored.push(c);
            self.record(Some(sb), "channel_restored", format!("chan={c}"));
            self.signal(CondKey::MailboxEmpty(ChannelId(c)));
        }
        self.drain_io(sb, "stale");
        let downtime = now.saturating_sub(self.recoveries[rec].fault_at);
        self.recoveries[rec].completed = true;
        self.recoveries[rec].downtime = downtime;
        let mut detail = format!(
            "mode={};sandbox={};downtime={downtime}",
            mode.as_str(),
            sb.0
        );
        if let Some(t) = target {
            detail.push_str(&format!(";target={}", t.0));
        }
        self.record(Some(sb), "service_healthy", detail);
        self.touch(PcpuId(sb.0));
        Ok(())
    }

    // ------------------------------------------------------------------
    // Introspection
    // ------------------------------------------------------------------

    pub fn trace(&self) -> &Trace {
        self.engine.trace()
    }

    pub fn recoveries(&self) -> &[RecoveryRun] {
        &self.recoveries
    }

    /// Sporadic-server conservation plus trace/state exit agreement;
    /// test hook, cheap enough to run after every scenario.
    pub fn check_invariants(&self) -> Result<()> {
        for v in &self.vcpus {
            if !v.server().conserved() {
                return Err(Error::State(format!(
                    "vcpu {} budget not conserved",
                    v.id().0
                )));
            }
        }
        let traced = self
            .trace()
            .records()
            .iter()
            .filter(|r| r.event_type == "vm_exit")
            .count() as u64;
        let counted: u64 = self.sandboxes.iter().map(|s| s.vm_exit_count).sum();
        if traced != counted {
            return Err(Error::State(format!(
                "vm_exit trace/count mismatch: {traced} vs {counted}"
            )));
        }
        Ok(())
    }
}

/// Length of chunk `idx` when `size` bytes are split at the mailbox
/// payload limit.
fn bench_chunk_len(size: u32, idx: u32) -> u32 {
    let mp = ipc::MAX_PAYLOAD as u32;
    let start = idx.saturating_mul(mp);
    size.saturating_sub(start).min(mp)
}

fn pattern_payload(seq: u32, len: usize) -> Vec<u8> {
    (0..len).map(|k| ipc::pattern_byte(seq, k)).collect()
}

fn parse_mac(s: &str) -> Result<[u8; 6]> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 6 {
        return Err(Error::Config(format!("bad mac address: {s:?}")));
    }
    let mut mac = [0u8; 6];
    for (i, p) in parts.iter().enumerate() {
        mac[i] = u8::from_str_radix(p, 16)
            .map_err(|_| Error::Config(format!("bad mac address: {s:?}")))?;
    }
    Ok(mac)
}
