//! Scenario configuration: the JSON schema the CLI loads, plus
//! validation that catches dangling references and schedulability
//! violations before a machine is built.
//!
//! Times in the config are milliseconds (floats are fine here; they
//! are converted to integer cycles once, at build time, and never
//! appear in the trace).

use serde::{Deserialize, Serialize};

use crate::engine::cycles_from_millis;
use crate::sandbox::CostModel;
use crate::sched::admit;
use crate::Error;

fn d_cycles_per_second() -> u64 {
    2_000_000_000
}

fn d_seed() -> u64 {
    42
}

fn d_true() -> bool {
    true
}

fn d_vector() -> u8 {
    0x20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    #[serde(default = "d_cycles_per_second")]
    pub cycles_per_second: u64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Horizon in milliseconds; `horizon_cycles` takes precedence if set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_cycles: Option<u64>,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            cycles_per_second: d_cycles_per_second(),
            seed: d_seed(),
            horizon_ms: None,
            horizon_cycles: None,
        }
    }
}

impl SimSpec {
    /// Resolve the run horizon in cycles. Defaults to one second.
    pub fn horizon(&self) -> crate::Result<u64> {
        if let Some(c) = self.horizon_cycles {
            return Ok(c);
        }
        match self.horizon_ms {
            Some(ms) => cycles_from_millis(ms, self.cycles_per_second),
            None => Ok(self.cycles_per_second),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySpec {
    pub host_bytes: u64,
    pub bios_bytes: u64,
    pub kernel_bytes: u64,
    pub shared_bytes: u64,
    pub ept_data_bytes: u64,
}

impl Default for MemorySpec {
    fn default() -> Self {
        let d = crate::mem::LayoutSizes::default();
        MemorySpec {
            host_bytes: d.host_bytes,
            bios_bytes: d.bios_bytes,
            kernel_bytes: d.kernel_bytes,
            shared_bytes: d.shared_bytes,
            ept_data_bytes: d.ept_data_bytes,
        }
    }
}

impl MemorySpec {
    pub fn to_sizes(&self) -> crate::mem::LayoutSizes {
        crate::mem::LayoutSizes {
            host_bytes: self.host_bytes,
            bios_bytes: self.bios_bytes,
            kernel_bytes: self.kernel_bytes,
            shared_bytes: self.shared_bytes,
            ept_data_bytes: self.ept_data_bytes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VifSpec {
    pub ip: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mac: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxSpec {
    pub id: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub services: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vifs: Vec<VifSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    #[serde(default = "d_vector")]
    pub vector: u8,
    /// Sandboxes holding a driver instance for this device.
    #[serde(default)]
    pub attach: Vec<u32>,
    /// Deliver interrupts to every sandbox rather than a fixed set.
    #[serde(default)]
    pub broadcast: bool,
    /// Explicit destination set; defaults to the attached sandboxes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destinations: Option<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum VcpuSpec {
    Main {
        owner: u32,
        c_max_ms: f64,
        v_t_ms: f64,
    },
    Io {
        owner: u32,
        #[serde(default)]
        device: u32,
        bandwidth: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        enforcement_period_ms: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub a: u32,
    pub b: u32,
    #[serde(default)]
    pub private: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WorkloadSpec {
    IcmpFlood {
        #[serde(default)]
        device: u32,
        dst_ip: String,
        interval_ms: f64,
        count: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        start_ms: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        src_ip: Option<String>,
    },
    MsgStream {
        channel: u32,
        vcpu: u32,
        interval_ms: f64,
        size: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        start_ms: Option<f64>,
    },
    MsgRecv {
        channel: u32,
        vcpu: u32,
        /// Poll interval; omit for busy-wait reception.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        poll_interval_ms: Option<f64>,
    },
    BenchSend {
        channel: u32,
        vcpu: u32,
        size: u32,
        trials: u32,
    },
    BenchRecv {
        channel: u32,
        vcpu: u32,
        size: u32,
        trials: u32,
    },
    Forkwait {
        vcpu: u32,
        iterations: u32,
    },
    Busy {
        vcpu: u32,
    },
    PeriodicTask {
        vcpu: u32,
        exec_ms: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSpec {
    Local,
    Remote,
    Reboot,
}

impl ModeSpec {
    pub fn to_mode(&self) -> crate::recovery::RecoveryMode {
        match self {
            ModeSpec::Local => crate::recovery::RecoveryMode::Local,
            ModeSpec::Remote => crate::recovery::RecoveryMode::Remote,
            ModeSpec::Reboot => crate::recovery::RecoveryMode::Reboot,
        }
    }
}

/// One corrupting write attempted while a driver fault is injected.
/// Variants are distinguished by their keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BlastSpec {
    /// Overwrite a channel buffer (reachable: the damage lands).
    Channel { channel: u32 },
    /// Write at the host-physical address of another sandbox's kernel
    /// image, offset by `pages` pages (unreachable through the EPT).
    KernelOf {
        kernel_of: u32,
        #[serde(default)]
        pages: u64,
    },
    /// Raw guest-physical write.
    Raw { gpa: u64, len: u64, fill: u8 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub at_ms: f64,
    pub sandbox: u32,
    pub mode: ModeSpec,
    #[serde(default)]
    pub blast: Vec<BlastSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionSpec {
    Random,
    RoundRobin,
    LeastLoaded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    #[serde(default = "d_selection")]
    pub target_selection: SelectionSpec,
    #[serde(default = "d_true")]
    pub diversity: bool,
}

fn d_selection() -> SelectionSpec {
    SelectionSpec::RoundRobin
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec {
            target_selection: d_selection(),
            diversity: d_true(),
        }
    }
}

impl PolicySpec {
    pub fn to_policy(&self) -> crate::recovery::RecoveryPolicy {
        let target_selection = match self.target_selection {
            SelectionSpec::Random => crate::recovery::TargetSelection::Random,
            SelectionSpec::RoundRobin => crate::recovery::TargetSelection::RoundRobin,
            SelectionSpec::LeastLoaded => crate::recovery::TargetSelection::LeastLoaded,
        };
        crate::recovery::RecoveryPolicy::new(target_selection, self.diversity)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub sim: SimSpec,
    #[serde(default)]
    pub cost_model: CostModel,
    #[serde(default)]
    pub memory: MemorySpec,
    pub sandboxes: Vec<SandboxSpec>,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub vcpus: Vec<VcpuSpec>,
    #[serde(default)]
    pub channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub workloads: Vec<WorkloadSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub policy: PolicySpec,
}

impl Scenario {
    pub fn from_json(text: &str) -> crate::Result<Scenario> {
        let scn: Scenario =
            serde_json::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    fn err(msg: impl Into<String>) -> Error {
        Error::Scenario(msg.into())
    }

    /// Structural and schedulability checks. A scenario that passes
    /// here builds into a machine without further surprises.
    pub fn validate(&self) -> crate::Result<()> {
        // NaN and infinities fail both predicates, so every duration
        // that passes validation survives the cycle conversions.
        fn positive(x: f64) -> bool {
            x.is_finite() && x > 0.0
        }
        fn non_negative(x: f64) -> bool {
            x.is_finite() && x >= 0.0
        }

        let n = self.sandboxes.len();
        if n == 0 {
            return Err(Self::err("at least one sandbox is required"));
        }
        for (i, sb) in self.sandboxes.iter().enumerate() {
            if sb.id as usize != i {
                return Err(Self::err(format!(
                    "sandbox ids must be 0..{} in order; found {} at position {}",
                    n - 1,
                    sb.id,
                    i
                )));
            }
            for vif in &sb.vifs {
                crate::devices::parse_ip(&vif.ip)?;
            }
        }

        if self.sim.cycles_per_second == 0 {
            return Err(Self::err("cycles_per_second must be positive"));
        }
        self.sim.horizon()?;

        let mut vectors = std::collections::BTreeSet::new();
        for dev in &self.devices {
            if !vectors.insert(dev.vector) {
                return Err(Self::err(format!("duplicate device vector {}", dev.vector)));
            }
            for sb in dev.attach.iter().chain(dev.destinations.iter().flatten()) {
                if *sb as usize >= n {
                    return Err(Self::err(format!("device references sandbox {sb}")));
                }
            }
            if !dev.broadcast && dev.attach.is_empty() && dev.destinations.is_none() {
                return Err(Self::err(format!(
                    "device vector {} has no destinations: set attach, destinations, or broadcast",
                    dev.vector
                )));
            }
        }

        for (i, v) in self.vcpus.iter().enumerate() {
            match v {
                VcpuSpec::Main {
                    owner,
                    c_max_ms,
                    v_t_ms,
                } => {
                    if *owner as usize >= n {
                        return Err(Self::err(format!("vcpu {i} references sandbox {owner}")));
                    }
                    if !positive(*c_max_ms) || !positive(*v_t_ms) {
                        return Err(Self::err(format!(
                            "vcpu {i}: budget and period must be positive"
                        )));
                    }
                    if c_max_ms > v_t_ms {
                        return Err(Self::err(format!(
                            "vcpu {i}: budget {c_max_ms}ms exceeds period {v_t_ms}ms"
                        )));
                    }
                }
                VcpuSpec::Io {
                    owner,
                    device,
                    bandwidth,
                    enforcement_period_ms,
                } => {
                    if *owner as usize >= n {
                        return Err(Self::err(format!("vcpu {i} references sandbox {owner}")));
                    }
                    if *device as usize >= self.devices.len() {
                        return Err(Self::err(format!("vcpu {i} references device {device}")));
                    }
                    if !(*bandwidth > 0.0 && *bandwidth < 1.0) {
                        return Err(Self::err(format!(
                            "vcpu {i}: bandwidth must be in (0, 1), got {bandwidth}"
                        )));
                    }
                    if let Some(p) = enforcement_period_ms {
                        if !positive(*p) {
                            return Err(Self::err(format!(
                                "vcpu {i}: enforcement period must be positive"
                            )));
                        }
                    }
                }
            }
        }

        for (i, ch) in self.channels.iter().enumerate() {
            if ch.a as usize >= n || ch.b as usize >= n {
                return Err(Self::err(format!(
                    "channel {i} references a missing sandbox"
                )));
            }
            if ch.a == ch.b {
                return Err(Self::err(format!(
                    "channel {i} connects sandbox {} to itself",
                    ch.a
                )));
            }
        }
        let slots_available = (self.memory.shared_bytes / crate::mem::PAGE_SIZE).saturating_sub(1);
        if self.channels.len() as u64 > slots_available {
            return Err(Self::err(format!(
                "{} channels exceed the {} shared-region slots",
                self.channels.len(),
                slots_available
            )));
        }

        let check_vcpu = |idx: u32, what: &str| -> crate::Result<()> {
            match self.vcpus.get(idx as usize) {
                Some(VcpuSpec::Main { .. }) => Ok(()),
                Some(VcpuSpec::Io { .. }) => Err(Self::err(format!(
                    "{what} must run on a main vcpu; vcpu {idx} is an I/O vcpu"
                ))),
                None => Err(Self::err(format!("{what} references missing vcpu {idx}"))),
            }
        };
        let check_channel = |idx: u32, what: &str| -> crate::Result<()> {
            if idx as usize >= self.channels.len() {
                Err(Self::err(format!(
                    "{what} references missing channel {idx}"
                )))
            } else {
                Ok(())
            }
        };
        for (i, w) in self.workloads.iter().enumerate() {
            match w {
                WorkloadSpec::IcmpFlood {
                    device,
                    dst_ip,
                    interval_ms,
                    count,
                    src_ip,
                    ..
                } => {
                    if *device as usize >= self.devices.len() {
                        return Err(Self::err(format!(
                            "workload {i} references device {device}"
                        )));
                    }
                    crate::devices::parse_ip(dst_ip)?;
                    if let Some(ip) = src_ip {
                        crate::devices::parse_ip(ip)?;
                    }
                    if !positive(*interval_ms) || *count == 0 {
                        return Err(Self::err(format!(
                            "workload {i}: interval and count must be positive"
                        )));
                    }
                }
                WorkloadSpec::MsgStream {
                    channel,
                    vcpu,
                    interval_ms,
                    size,
                    ..
                } => {
                    check_channel(*channel, "msg-stream")?;
                    check_vcpu(*vcpu, "msg-stream")?;
                    if !positive(*interval_ms) {
                        return Err(Self::err(format!(
                            "workload {i}: interval must be positive"
                        )));
                    }
                    if *size as usize > crate::ipc::MAX_PAYLOAD {
                        return Err(Self::err(format!(
                            "workload {i}: periodic messages are single chunks of at most {} bytes",
                            crate::ipc::MAX_PAYLOAD
                        )));
                    }
                }
                WorkloadSpec::MsgRecv {
                    channel,
                    vcpu,
                    poll_interval_ms,
                } => {
                    check_channel(*channel, "msg-recv")?;
                    check_vcpu(*vcpu, "msg-recv")?;
                    if let Some(p) = poll_interval_ms {
                        if !positive(*p) {
                            return Err(Self::err(format!(
                                "workload {i}: poll interval must be positive"
                            )));
                        }
                    }
                }
                WorkloadSpec::BenchSend {
                    channel,
                    vcpu,
                    trials,
                    ..
                }
                | WorkloadSpec::BenchRecv {
                    channel,
                    vcpu,
                    trials,
                    ..
                } => {
                    check_channel(*channel, "bench")?;
                    check_vcpu(*vcpu, "bench")?;
                    if *trials == 0 {
                        return Err(Self::err(format!("workload {i}: trials must be positive")));
                    }
                }
                WorkloadSpec::Forkwait { vcpu, iterations } => {
                    check_vcpu(*vcpu, "forkwait")?;
                    if *iterations == 0 {
                        return Err(Self::err(format!(
                            "workload {i}: iterations must be positive"
                        )));
                    }
                }
                WorkloadSpec::Busy { vcpu } => check_vcpu(*vcpu, "busy")?,
                WorkloadSpec::PeriodicTask { vcpu, exec_ms } => {
                    check_vcpu(*vcpu, "periodic-task")?;
                    if !positive(*exec_ms) {
                        return Err(Self::err(format!("workload {i}: exec must be positive")));
                    }
                }
            }
        }

        for (i, f) in self.faults.iter().enumerate() {
            if f.sandbox as usize >= n {
                return Err(Self::err(format!(
                    "fault {i} references sandbox {}",
                    f.sandbox
                )));
            }
            if !non_negative(f.at_ms) {
                return Err(Self::err(format!("fault {i}: time must be non-negative")));
            }
            let has_driver = self.devices.iter().any(|d| d.attach.contains(&f.sandbox));
            if !has_driver {
                return Err(Self::err(format!(
                    "fault {i} targets sandbox {} which has no driver instance",
                    f.sandbox
                )));
            }
            for b in &f.blast {
                match b {
                    BlastSpec::Channel { channel } => check_channel(*channel, "blast")?,
                    BlastSpec::KernelOf { kernel_of, .. } => {
                        if *kernel_of as usize >= n {
                            return Err(Self::err(format!("blast references sandbox {kernel_of}")));
                        }
                        if *kernel_of == f.sandbox {
                            return Err(Self::err(format!(
                                "fault {i}: kernel_of must name a sandbox other than the faulty one"
                            )));
                        }
                    }
                    BlastSpec::Raw { len, .. } => {
                        if *len == 0 {
                            return Err(Self::err(format!(
                                "fault {i}: raw blast length must be positive"
                            )));
                        }
                    }
                }
            }
        }

        // Schedulability: every sandbox's VCPUs share one PCPU, so the
        // rate-monotonic bound applies per sandbox.
        for (pcpu, _) in self.sandboxes.iter().enumerate() {
            let mut utils = Vec::new();
            for v in &self.vcpus {
                match v {
                    VcpuSpec::Main {
                        owner,
                        c_max_ms,
                        v_t_ms,
                    } if *owner as usize == pcpu => utils.push(c_max_ms / v_t_ms),
                    VcpuSpec::Io {
                        owner, bandwidth, ..
                    } if *owner as usize == pcpu => utils.push(*bandwidth),
                    _ => {}
                }
            }
            if utils.is_empty() {
                continue;
            }
            let report = admit(&utils);
            if !report.accepted {
                return Err(Error::Admission {
                    pcpu: pcpu as u32,
                    total: report.total_utilization,
                    bound: report.bound,
                    n: report.n,
                });
            }
        }

        Ok(())
    }
}
