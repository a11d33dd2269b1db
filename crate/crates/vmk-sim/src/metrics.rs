//! Derived numbers: everything here is recomputed from the trace, so
//! any consumer holding only the CSV can rebuild the same report.
//! `parse_trace_csv` is total over arbitrary input; it is also a fuzz
//! entry point.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{Trace, TRACE_CSV_HEADER};
use crate::{Error, Result};

/// One trace record reparsed from CSV, owning its strings.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct OwnedRecord {
    pub at: u64,
    /// None encodes the host row.
    pub sandbox: Option<u32>,
    pub event_type: String,
    pub detail: String,
}

/// Borrowed view shared by the in-memory and reparsed paths.
#[derive(Copy, Clone, Debug)]
pub struct RecordView<'a> {
    pub at: u64,
    pub sandbox: Option<u32>,
    pub event_type: &'a str,
    pub detail: &'a str,
}

/// Strict but panic-free CSV parser for traces. The header must match
/// exactly; each row is `time,sandbox,event_type,detail` where detail
/// (which never contains commas when we write it) absorbs the rest of
/// the line.
pub fn parse_trace_csv(text: &str) -> Result<Vec<OwnedRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRACE_CSV_HEADER => {}
        Some(h) => {
            return Err(Error::Trace(format!(
                "bad header {h:?}, want {TRACE_CSV_HEADER:?}"
            )))
        }
        None => return Err(Error::Trace("empty input".into())),
    }
    let mut out = Vec::new();
    let mut last_at = 0u64;
    for (i, line) in lines.enumerate() {
        let n = i + 2; // 1-based, after the header
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(4, ',');
        let (Some(t), Some(sb), Some(ty)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Trace(format!("line {n}: want 4 fields")));
        };
        let detail = parts.next().unwrap_or("");
        let at: u64 = t
            .parse()
            .map_err(|_| Error::Trace(format!("line {n}: bad time {t:?}")))?;
        if at < last_at {
            return Err(Error::Trace(format!(
                "line {n}: time goes backwards ({at} after {last_at})"
            )));
        }
        last_at = at;
        let sandbox = if sb == "host" {
            None
        } else {
            Some(
                sb.parse::<u32>()
                    .map_err(|_| Error::Trace(format!("line {n}: bad sandbox {sb:?}")))?,
            )
        };
        if ty.is_empty() {
            return Err(Error::Trace(format!("line {n}: empty event type")));
        }
        out.push(OwnedRecord {
            at,
            sandbox,
            event_type: ty.to_string(),
            detail: detail.to_string(),
        });
    }
    Ok(out)
}

/// Value of `key` inside a `k=v;k=v` detail string.
pub fn detail_field<'a>(detail: &'a str, key: &str) -> Option<&'a str> {
    detail
        .split(';')
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
}

pub fn detail_u64(detail: &str, key: &str) -> Option<u64> {
    detail_field(detail, key)?.parse().ok()
}

// ----------------------------------------------------------------------
// Aggregates
// ----------------------------------------------------------------------

#[derive(Clone, Default, PartialEq, Serialize, Deserialize, Debug)]
pub struct IcmpMetrics {
    pub dst: String,
    pub sent: u64,
    pub replied: u64,
    pub missed: u64,
    pub rtt_min: u64,
    pub rtt_max: u64,
    pub rtt_mean: f64,
}

#[derive(Clone, Default, PartialEq, Serialize, Deserialize, Debug)]
pub struct ChannelMetrics {
    pub channel: u32,
    pub chunks_sent: u64,
    pub messages_received: u64,
    pub bytes_received: u64,
    pub dropped: u64,
    pub empty_polls: u64,
    pub corrupt: u64,
    /// Mean message latency over send/recv pairs, in cycles.
    pub latency_mean: Option<f64>,
    /// Received payload bytes per cycle over the active window.
    pub throughput: Option<f64>,
}

#[derive(Clone, Default, PartialEq, Serialize, Deserialize, Debug)]
pub struct IrqMetrics {
    pub raised: u64,
    pub delivered: u64,
    pub handled: u64,
    pub redirects: u64,
    pub discarded: BTreeMap<String, u64>,
}

#[derive(Clone, Default, PartialEq, Serialize, Deserialize, Debug)]
pub struct RecoveryMetrics {
    pub mode: String,
    pub sandbox: u32,
    pub target: Option<u32>,
    pub downtime_cycles: u64,
    pub phases: Vec<(String, u64)>,
    pub channels_restored: u64,
}

#[derive(Clone, Default, PartialEq, Serialize, Deserialize, Debug)]
pub struct VcpuUsage {
    pub vcpu: u32,
    pub foreground_cycles: u64,
    pub background_cycles: u64,
}

#[derive(Clone, Default, PartialEq, Serialize, Deserialize, Debug)]
pub struct RunMetrics {
    pub horizon_cycles: u64,
    pub records: u64,
    pub vm_exits_total: u64,
    pub vm_exits_by_sandbox: BTreeMap<u32, u64>,
    pub sandbox_launches: u64,
    pub ept_violations: u64,
    pub isolation_breaches: u64,
    pub deadline_misses: u64,
    pub preemptions: u64,
    pub replenishments: u64,
    pub icmp: Vec<IcmpMetrics>,
    pub channels: Vec<ChannelMetrics>,
    pub irq: IrqMetrics,
    pub recoveries: Vec<RecoveryMetrics>,
    pub vcpu_usage: Vec<VcpuUsage>,
}

impl RunMetrics {
    pub fn from_trace(trace: &Trace) -> RunMetrics {
        compute(trace.records().iter().map(|r| RecordView {
            at: r.at.cycles(),
            sandbox: r.sandbox.map(|s| s.0),
            event_type: r.event_type,
            detail: &r.detail,
        }))
    }

    pub fn from_records(records: &[OwnedRecord]) -> RunMetrics {
        compute(records.iter().map(|r| RecordView {
            at: r.at,
            sandbox: r.sandbox,
            event_type: &r.event_type,
            detail: &r.detail,
        }))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

#[derive(Default)]
struct IcmpAccum {
    sent: u64,
    replied: u64,
    missed: u64,
    rtt_sum: u64,
    rtt_min: u64,
    rtt_max: u64,
}

#[derive(Default)]
struct ChannelAccum {
    chunks_sent: u64,
    messages_received: u64,
    bytes_received: u64,
    dropped: u64,
    empty_polls: u64,
    corrupt: u64,
    sends: BTreeMap<String, u64>,
    recvs: BTreeMap<String, u64>,
    first_send: Option<u64>,
    last_recv: Option<u64>,
}

#[derive(Default)]
struct RecoveryAccum {
    mode: String,
    sandbox: u32,
    target: Option<u32>,
    downtime: u64,
    phases: Vec<(String, u64)>,
    restored: u64,
}

fn compute<'a>(views: impl Iterator<Item = RecordView<'a>>) -> RunMetrics {
    let mut m = RunMetrics::default();
    // Reply seqs need a dst to attribute to; requests record it, the
    // reply only carries seq, so remember the association.
    let mut seq_dst: BTreeMap<u64, String> = BTreeMap::new();
    let mut icmp: BTreeMap<String, IcmpAccum> = BTreeMap::new();
    let mut chans: BTreeMap<u32, ChannelAccum> = BTreeMap::new();
    let mut recs: Vec<RecoveryAccum> = Vec::new();
    let mut open_rec: Option<usize> = None;
    let mut usage: BTreeMap<u32, (u64, u64)> = BTreeMap::new();

    for r in views {
        m.records += 1;
        match r.event_type {
            "run_end" => {
                if let Some(h) = detail_u64(r.detail, "horizon") {
                    m.horizon_cycles = h;
                }
            }
            "vm_exit" => {
                m.vm_exits_total += 1;
                if let Some(sb) = r.sandbox {
                    *m.vm_exits_by_sandbox.entry(sb).or_insert(0) += 1;
                }
            }
            "sandbox_launch" => m.sandbox_launches += 1,
            "ept_violation" => m.ept_violations += 1,
            "isolation_check" => {
                if detail_field(r.detail, "intact") == Some("0") {
                    m.isolation_breaches += 1;
                }
            }
            "deadline_miss" => m.deadline_misses += 1,
            "vcpu_preempt" => m.preemptions += 1,
            "replenish" => m.replenishments += 1,
            "icmp_req" => {
                if let (Some(seq), Some(dst)) =
                    (detail_u64(r.detail, "seq"), detail_field(r.detail, "dst"))
                {
                    seq_dst.insert(seq, dst.to_string());
                    icmp.entry(dst.to_string()).or_default().sent += 1;
                }
            }
            "icmp_reply" => {
                if let Some(seq) = detail_u64(r.detail, "seq") {
                    // Sequence numbers repeat across concurrent
                    // request streams, so trust the reply's own
                    // destination over the seq-indexed request map.
                    let dst = detail_field(r.detail, "dst")
                        .map(str::to_string)
                        .or_else(|| seq_dst.get(&seq).cloned());
                    if let Some(dst) = dst {
                        let a = icmp.entry(dst).or_default();
                        a.replied += 1;
                        if let Some(rtt) = detail_u64(r.detail, "rtt") {
                            a.rtt_sum += rtt;
                            a.rtt_max = a.rtt_max.max(rtt);
                            a.rtt_min = if a.rtt_min == 0 {
                                rtt
                            } else {
                                a.rtt_min.min(rtt)
                            };
                        }
                    }
                }
            }
            "icmp_missed" => {
                if let Some(dst) = detail_field(r.detail, "dst") {
                    icmp.entry(dst.to_string()).or_default().missed += 1;
                }
            }
            "irq_raise" => m.irq.raised += 1,
            "irq_deliver" => m.irq.delivered += 1,
            "irq_handle" => m.irq.handled += 1,
            "irq_redirect" => m.irq.redirects += 1,
            "irq_discard" => {
                let reason = detail_field(r.detail, "reason").unwrap_or("unknown");
                *m.irq.discarded.entry(reason.to_string()).or_insert(0) += 1;
            }
            "msg_chunk" => {
                if let Some(c) = detail_u64(r.detail, "chan") {
                    chans.entry(c as u32).or_default().chunks_sent += 1;
                }
            }
            "msg_send_start" => {
                if let Some(c) = detail_u64(r.detail, "chan") {
                    let a = chans.entry(c as u32).or_default();
                    if let Some(key) = pair_key(r.detail) {
                        a.sends.entry(key).or_insert(r.at);
                    }
                    a.first_send.get_or_insert(r.at);
                }
            }
            "msg_recv_done" => {
                if let Some(c) = detail_u64(r.detail, "chan") {
                    let a = chans.entry(c as u32).or_default();
                    a.messages_received += 1;
                    a.bytes_received += detail_u64(r.detail, "bytes").unwrap_or(0);
                    if let Some(key) = pair_key(r.detail) {
                        a.recvs.entry(key).or_insert(r.at);
                    }
                    a.last_recv = Some(r.at);
                }
            }
            "msg_dropped" | "msg_tick_skipped" => {
                if let Some(c) = detail_u64(r.detail, "chan") {
                    chans.entry(c as u32).or_default().dropped += 1;
                }
            }
            "msg_poll_empty" => {
                if let Some(c) = detail_u64(r.detail, "chan") {
                    chans.entry(c as u32).or_default().empty_polls += 1;
                }
            }
            "msg_corrupt" => {
                if let Some(c) = detail_u64(r.detail, "chan") {
                    chans.entry(c as u32).or_default().corrupt += 1;
                }
            }
            "vcpu_run" => {
                if let (Some(v), Some(cycles)) =
                    (detail_u64(r.detail, "vcpu"), detail_u64(r.detail, "cycles"))
                {
                    let e = usage.entry(v as u32).or_insert((0, 0));
                    match detail_field(r.detail, "band") {
                        Some("foreground") => e.0 += cycles,
                        _ => e.1 += cycles,
                    }
                }
            }
            "fault_inject" => {
                recs.push(RecoveryAccum {
                    mode: detail_field(r.detail, "mode").unwrap_or("?").to_string(),
                    sandbox: r.sandbox.unwrap_or(0),
                    ..Default::default()
                });
                open_rec = Some(recs.len() - 1);
            }
            "recovery_phase" => {
                if let Some(i) = open_rec {
                    let name = detail_field(r.detail, "name").unwrap_or("?").to_string();
                    let cycles = detail_u64(r.detail, "cycles").unwrap_or(0);
                    recs[i].phases.push((name, cycles));
                }
            }
            "channel_restored" => {
                if let Some(i) = open_rec {
                    recs[i].restored += 1;
                }
            }
            "service_healthy" => {
                if let Some(i) = open_rec.take() {
                    recs[i].downtime = detail_u64(r.detail, "downtime").unwrap_or(0);
                    recs[i].target = detail_u64(r.detail, "target").map(|t| t as u32);
                    if let Some(mode) = detail_field(r.detail, "mode") {
                        recs[i].mode = mode.to_string();
                    }
                }
            }
            _ => {}
        }
    }

    m.icmp = icmp
        .into_iter()
        .map(|(dst, a)| IcmpMetrics {
            dst,
            sent: a.sent,
            replied: a.replied,
            missed: a.missed,
            rtt_min: a.rtt_min,
            rtt_max: a.rtt_max,
            rtt_mean: if a.replied > 0 {
                a.rtt_sum as f64 / a.replied as f64
            } else {
                0.0
            },
        })
        .collect();
    m.channels = chans
        .into_iter()
        .map(|(channel, a)| {
            let mut lat_sum = 0u64;
            let mut lat_n = 0u64;
            for (key, &sent) in &a.sends {
                if let Some(&recvd) = a.recvs.get(key) {
                    lat_sum += recvd.saturating_sub(sent);
                    lat_n += 1;
                }
            }
            let latency_mean = (lat_n > 0).then(|| lat_sum as f64 / lat_n as f64);
            let throughput = match (a.first_send, a.last_recv) {
                (Some(s), Some(e)) if e > s && a.bytes_received > 0 => {
                    Some(a.bytes_received as f64 / (e - s) as f64)
                }
                _ => None,
            };
            ChannelMetrics {
                channel,
                chunks_sent: a.chunks_sent,
                messages_received: a.messages_received,
                bytes_received: a.bytes_received,
                dropped: a.dropped,
                empty_polls: a.empty_polls,
                corrupt: a.corrupt,
                latency_mean,
                throughput,
            }
        })
        .collect();
    m.recoveries = recs
        .into_iter()
        .map(|a| RecoveryMetrics {
            mode: a.mode,
            sandbox: a.sandbox,
            target: a.target,
            downtime_cycles: a.downtime,
            phases: a.phases,
            channels_restored: a.restored,
        })
        .collect();
    m.vcpu_usage = usage
        .into_iter()
        .map(|(vcpu, (fg, bg))| VcpuUsage {
            vcpu,
            foreground_cycles: fg,
            background_cycles: bg,
        })
        .collect();
    m
}

/// Stable pairing key for latency: benchmark messages carry `msg=`,
/// streams carry `seq=`.
fn pair_key(detail: &str) -> Option<String> {
    if let Some(msg) = detail_field(detail, "msg") {
        return Some(format!("m{msg}"));
    }
    detail_field(detail, "seq").map(|s| format!("s{s}"))
}
