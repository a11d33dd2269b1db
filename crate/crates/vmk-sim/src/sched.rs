//! Hierarchical VCPU scheduling.
//!
//! Main VCPUs are sporadic servers under rate-monotonic fixed
//! priorities; a VCPU that exhausts its budget drops to a shared
//! background band instead of stopping, so it cannot disturb anyone
//! still holding budget. I/O VCPUs get fixed bandwidth but inherit
//! priority from whichever task's request they are servicing.
//!
//! Replenishment follows the corrected sporadic-server rule: each
//! consumption is returned one period after the *activation* in which
//! it happened, and consumptions within one activation coalesce into a
//! single replenishment item. That kills both early replenishment and
//! budget amplification.

use std::collections::VecDeque;
use std::fmt;

use crate::engine::SimTime;
use crate::sandbox::SandboxId;
use crate::{Error, Result};

#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct VcpuId(pub u32);

#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct PcpuId(pub u32);

impl fmt::Display for VcpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Effective priority. Lower foreground numbers win; `Floor` sits
/// below every foreground level (idle I/O VCPUs, unsolicited device
/// work) but still belongs to the budgeted class.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum Priority {
    Fg(u32),
    Floor,
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct Replenishment {
    pub at: SimTime,
    pub amount: u64,
}

/// Sporadic-server accounting shared by Main and I/O VCPUs.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub c_max: u64,
    pub v_t: u64,
    pub budget: u64,
    pub replenishments: VecDeque<Replenishment>,
    /// Set while the server is in an activation (eligible at
    /// foreground level); cleared when budget runs out or the owner
    /// stops being runnable.
    activation_start: Option<SimTime>,
    /// Anchor and end of the current contiguous consumption run.
    /// Charges that butt against `run.1` extend the run and share its
    /// anchor; any gap, block, or replenishment arrival starts a new
    /// run so returned capacity can never anchor in the past.
    run: Option<(SimTime, SimTime)>,
}

impl ServerState {
    pub fn new(c_max: u64, v_t: u64) -> Result<ServerState> {
        if c_max == 0 || c_max > v_t {
            return Err(Error::Config(format!(
                "budget must satisfy 0 < C_max <= V_T (got C_max={c_max}, V_T={v_t})"
            )));
        }
        Ok(ServerState {
            c_max,
            v_t,
            budget: c_max,
            replenishments: VecDeque::new(),
            activation_start: None,
            run: None,
        })
    }

    pub fn utilization(&self) -> f64 {
        self.c_max as f64 / self.v_t as f64
    }

    pub fn activation_start(&self) -> Option<SimTime> {
        self.activation_start
    }

    /// Marks the start of an activation: the server just became
    /// eligible to run at foreground level. Idempotent while active.
    pub fn note_eligible(&mut self, now: SimTime) {
        if self.activation_start.is_none() {
            self.activation_start = Some(now);
        }
    }

    /// Ends the current activation (owner blocked or budget gone).
    pub fn note_ineligible(&mut self) {
        self.activation_start = None;
        self.run = None;
    }

    /// Charges `from..to` of foreground execution against the budget
    /// and books the matching replenishment one period after the start
    /// of the contiguous consumption run this charge belongs to.
    /// Anchoring at the eligible time instead (the original
    /// sporadic-server rule) lets a server that waited behind higher
    /// priorities replenish early and exceed C_max inside a sliding
    /// V_T window. Background time is never passed through here.
    pub fn account(&mut self, vcpu: VcpuId, from: SimTime, to: SimTime) -> Result<()> {
        let ran = to - from;
        if ran == 0 {
            return Ok(());
        }
        if self.activation_start.is_none() {
            return Err(Error::State(format!(
                "vcpu {vcpu} charged outside an activation"
            )));
        }
        if ran > self.budget {
            return Err(Error::BudgetUnderflow { vcpu: vcpu.0 });
        }
        self.budget -= ran;
        let anchor = match self.run {
            Some((anchor, end)) if end == from => anchor,
            _ => from,
        };
        self.run = Some((anchor, to));
        let at = anchor.checked_add(self.v_t)?;
        match self.replenishments.back_mut() {
            Some(last) if last.at == at => last.amount += ran,
            _ => self
                .replenishments
                .push_back(Replenishment { at, amount: ran }),
        }
        if self.budget == 0 {
            self.activation_start = None;
            self.run = None;
        }
        Ok(())
    }

    /// Applies every replenishment due at or before `now`; returns the
    /// amount restored. Arriving capacity ends the current run: were it
    /// charged against the old anchor it would come back less than a
    /// full period after it is consumed.
    pub fn apply_due(&mut self, now: SimTime) -> u64 {
        let mut restored = 0;
        while let Some(front) = self.replenishments.front() {
            if front.at > now {
                break;
            }
            restored += self.replenishments.pop_front().unwrap().amount;
        }
        self.budget += restored;
        debug_assert!(self.budget <= self.c_max, "budget amplification");
        if restored > 0 {
            self.run = None;
        }
        restored
    }

    pub fn next_replenish_at(&self) -> Option<SimTime> {
        self.replenishments.front().map(|r| r.at)
    }

    /// Invariant check: budget plus everything pending equals C_max.
    pub fn conserved(&self) -> bool {
        let pending: u64 = self.replenishments.iter().map(|r| r.amount).sum();
        self.budget + pending == self.c_max
    }
}

/// CPU-bound server with a fixed rate-monotonic priority.
#[derive(Clone, Debug)]
pub struct MainVcpu {
    pub id: VcpuId,
    pub owner: SandboxId,
    pub pcpu: PcpuId,
    pub server: ServerState,
    pub fg_priority: u32,
    pub bound_threads: Vec<usize>,
}

/// Device-side server: fixed bandwidth over an enforcement period,
/// priority inherited from pending initiators.
#[derive(Clone, Debug)]
pub struct IoVcpu {
    pub id: VcpuId,
    pub pcpu: PcpuId,
    pub device: u32,
    pub bandwidth: f64,
    pub server: ServerState,
    pub current_priority: Priority,
}

/// Assigns rate-monotonic priorities: strictly shorter period means a
/// strictly smaller (stronger) number; equal periods break by id. The
/// result is a permutation of 0..n-1 in input order.
pub fn rms_assign(periods: &[(VcpuId, u64)]) -> Vec<(VcpuId, u32)> {
    let mut order: Vec<usize> = (0..periods.len()).collect();
    order.sort_by_key(|&i| (periods[i].1, periods[i].0));
    let mut out = vec![(VcpuId(0), 0u32); periods.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = (periods[i].0, rank as u32);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmitReport {
    pub n: usize,
    pub total_utilization: f64,
    pub bound: f64,
    pub accepted: bool,
}

/// Liu-Layland admission test for one PCPU: accept iff the summed
/// utilization of all n servers stays within n(2^(1/n) - 1).
pub fn admit(utilizations: &[f64]) -> AdmitReport {
    let n = utilizations.len();
    let total: f64 = utilizations.iter().sum();
    let bound = if n == 0 {
        1.0
    } else {
        n as f64 * ((2f64).powf(1.0 / n as f64) - 1.0)
    };
    AdmitReport {
        n,
        total_utilization: total,
        bound,
        accepted: total <= bound,
    }
}

/// Which class a dispatch decision came from.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Band {
    Foreground,
    Background,
}

impl Band {
    pub fn as_str(self) -> &'static str {
        match self {
            Band::Foreground => "foreground",
            Band::Background => "background",
        }
    }
}

/// Scheduling view of one VCPU at one instant.
#[derive(Copy, Clone, Debug)]
pub struct Candidate {
    pub vcpu: VcpuId,
    pub runnable: bool,
    pub budget_positive: bool,
    pub priority: Priority,
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Chosen {
    Run { vcpu: VcpuId, band: Band },
    Idle,
}

/// Picks the next VCPU for one PCPU. Budgeted runnables go first, by
/// (priority, id); with none left, runnable but exhausted VCPUs share
/// a single background band ordered by id; otherwise idle.
pub fn pick_next(candidates: &[Candidate]) -> Chosen {
    let fg = candidates
        .iter()
        .filter(|c| c.runnable && c.budget_positive)
        .min_by_key(|c| (c.priority, c.vcpu));
    if let Some(c) = fg {
        return Chosen::Run {
            vcpu: c.vcpu,
            band: Band::Foreground,
        };
    }
    let bg = candidates
        .iter()
        .filter(|c| c.runnable)
        .min_by_key(|c| c.vcpu);
    match bg {
        Some(c) => Chosen::Run {
            vcpu: c.vcpu,
            band: Band::Background,
        },
        None => Chosen::Idle,
    }
}

/// Priority an I/O VCPU serves at: the strongest pending initiator's
/// foreground priority, or the floor with nothing pending.
pub fn io_inherit(pending_initiator_priorities: &[u32]) -> Priority {
    match pending_initiator_priorities.iter().min() {
        Some(&p) => Priority::Fg(p),
        None => Priority::Floor,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MS: u64 = 2_000_000; // cycles per millisecond at the default clock

    #[test]
    fn rms_examples() {
        let got = rms_assign(&[
            (VcpuId(0), 10 * MS),
            (VcpuId(1), 5 * MS),
            (VcpuId(2), 100 * MS),
        ]);
        assert_eq!(got, vec![(VcpuId(0), 1), (VcpuId(1), 0), (VcpuId(2), 2)]);

        assert_eq!(rms_assign(&[(VcpuId(9), 7)]), vec![(VcpuId(9), 0)]);

        let got = rms_assign(&[(VcpuId(2), 5 * MS), (VcpuId(1), 5 * MS)]);
        assert_eq!(got, vec![(VcpuId(2), 1), (VcpuId(1), 0)]);
    }

    #[test]
    fn admit_examples() {
        let r = admit(&[1.0]);
        assert!(r.accepted);
        assert!((r.bound - 1.0).abs() < 1e-12);

        let r = admit(&[0.26, 0.26, 0.26]);
        assert!(!r.accepted, "0.78 exceeds {:.6}", r.bound);
        assert!((r.bound - 0.779_763).abs() < 1e-4);

        let r = admit(&[0.4, 0.4]);
        assert!(r.accepted, "0.8 within {:.6}", r.bound);
        assert!((r.bound - 0.828_427).abs() < 1e-4);
    }

    fn cand(id: u32, runnable: bool, budget: bool, prio: Priority) -> Candidate {
        Candidate {
            vcpu: VcpuId(id),
            runnable,
            budget_positive: budget,
            priority: prio,
        }
    }

    #[test]
    fn pick_prefers_stronger_priority() {
        let got = pick_next(&[
            cand(0, true, true, Priority::Fg(0)),
            cand(1, true, true, Priority::Fg(3)),
        ]);
        assert_eq!(
            got,
            Chosen::Run {
                vcpu: VcpuId(0),
                band: Band::Foreground
            }
        );
    }

    #[test]
    fn exhausted_vcpu_does_not_block_budgeted_one() {
        let got = pick_next(&[
            cand(0, true, false, Priority::Fg(0)),
            cand(1, true, true, Priority::Fg(3)),
        ]);
        assert_eq!(
            got,
            Chosen::Run {
                vcpu: VcpuId(1),
                band: Band::Foreground
            }
        );
    }

    #[test]
    fn background_is_work_conserving_and_by_id() {
        let got = pick_next(&[cand(4, true, false, Priority::Fg(1))]);
        assert_eq!(
            got,
            Chosen::Run {
                vcpu: VcpuId(4),
                band: Band::Background
            }
        );
        // two exhausted: id decides, not foreground priority
        let got = pick_next(&[
            cand(7, true, false, Priority::Fg(0)),
            cand(2, true, false, Priority::Fg(5)),
        ]);
        assert_eq!(
            got,
            Chosen::Run {
                vcpu: VcpuId(2),
                band: Band::Background
            }
        );
        assert_eq!(
            pick_next(&[cand(1, false, true, Priority::Fg(0))]),
            Chosen::Idle
        );
    }

    #[test]
    fn floor_priority_beats_background_but_not_foreground() {
        let got = pick_next(&[
            cand(0, true, true, Priority::Floor),
            cand(1, true, true, Priority::Fg(9)),
        ]);
        assert_eq!(
            got,
            Chosen::Run {
                vcpu: VcpuId(1),
                band: Band::Foreground
            }
        );
        let got = pick_next(&[
            cand(0, true, true, Priority::Floor),
            cand(1, true, false, Priority::Fg(0)),
        ]);
        assert_eq!(
            got,
            Chosen::Run {
                vcpu: VcpuId(0),
                band: Band::Foreground
            }
        );
    }

    #[test]
    fn full_budget_consumed_in_one_go() {
        let mut s = ServerState::new(2 * MS, 10 * MS).unwrap();
        s.note_eligible(SimTime(0));
        s.account(VcpuId(0), SimTime(0), SimTime(2 * MS)).unwrap();
        assert_eq!(s.budget, 0);
        assert_eq!(
            s.replenishments.iter().copied().collect::<Vec<_>>(),
            vec![Replenishment {
                at: SimTime(10 * MS),
                amount: 2 * MS
            }]
        );
        assert!(s.conserved());
        assert_eq!(s.activation_start(), None, "activation ends with budget");
    }

    #[test]
    fn contiguous_pieces_share_one_replenishment() {
        // Event boundaries chop a solid run into pieces; they must
        // coalesce into a single entry anchored at the run start, or
        // busy servers flood the queue with one entry per event.
        let mut s = ServerState::new(2 * MS, 10 * MS).unwrap();
        s.note_eligible(SimTime(3 * MS));
        s.account(VcpuId(0), SimTime(3 * MS), SimTime(4 * MS))
            .unwrap();
        s.account(VcpuId(0), SimTime(4 * MS), SimTime(5 * MS))
            .unwrap();
        assert_eq!(
            s.replenishments.iter().copied().collect::<Vec<_>>(),
            vec![Replenishment {
                at: SimTime(13 * MS),
                amount: 2 * MS
            }]
        );
        assert!(s.conserved());
    }

    #[test]
    fn split_consumption_books_each_run_at_its_own_start() {
        let mut s = ServerState::new(2 * MS, 10 * MS).unwrap();
        s.note_eligible(SimTime(0));
        s.account(VcpuId(0), SimTime(0), SimTime(MS)).unwrap();
        s.account(VcpuId(0), SimTime(3 * MS / 2), SimTime(5 * MS / 2))
            .unwrap();
        assert_eq!(
            s.replenishments.iter().copied().collect::<Vec<_>>(),
            vec![
                Replenishment {
                    at: SimTime(10 * MS),
                    amount: MS
                },
                Replenishment {
                    at: SimTime(23 * MS / 2),
                    amount: MS
                },
            ]
        );
        assert!(s.conserved());
    }

    #[test]
    fn replenishment_anchored_at_consumption_not_eligibility() {
        // A server that becomes eligible early but waits behind higher
        // priorities must not replenish early: anchoring at the
        // eligible time would return capacity at 15ms here and allow
        // two full budgets inside one 10ms window.
        let mut s = ServerState::new(2 * MS, 10 * MS).unwrap();
        s.note_eligible(SimTime(5 * MS));
        s.account(VcpuId(0), SimTime(6 * MS), SimTime(7 * MS))
            .unwrap();
        assert_eq!(s.next_replenish_at(), Some(SimTime(16 * MS)));

        // new activation after blocking: later consumption lands later
        s.note_ineligible();
        s.note_eligible(SimTime(9 * MS));
        s.account(VcpuId(0), SimTime(9 * MS), SimTime(10 * MS))
            .unwrap();
        assert_eq!(
            s.replenishments.iter().copied().collect::<Vec<_>>(),
            vec![
                Replenishment {
                    at: SimTime(16 * MS),
                    amount: MS
                },
                Replenishment {
                    at: SimTime(19 * MS),
                    amount: MS
                },
            ]
        );
        assert!(s.conserved());

        assert_eq!(s.apply_due(SimTime(16 * MS)), MS);
        assert_eq!(s.budget, MS);
        assert!(s.conserved());
    }

    #[test]
    fn preempted_low_priority_server_cannot_double_dip_a_window() {
        // Regression shape: eligible at 0, first run delayed to
        // [5ms, 7ms] by higher priorities. The old eligible-time anchor
        // replenished at 10ms, letting [5ms, 15ms) hold 4ms of a 2ms
        // budget. The consumption anchor returns capacity at 15ms so
        // the window holds exactly C_max.
        let mut s = ServerState::new(2 * MS, 10 * MS).unwrap();
        s.note_eligible(SimTime(0));
        s.account(VcpuId(0), SimTime(5 * MS), SimTime(7 * MS))
            .unwrap();
        assert_eq!(s.budget, 0);
        assert_eq!(s.next_replenish_at(), Some(SimTime(15 * MS)));
        assert_eq!(s.apply_due(SimTime(10 * MS)), 0);
        assert_eq!(s.apply_due(SimTime(15 * MS)), 2 * MS);
        assert!(s.conserved());
    }

    #[test]
    fn consumption_after_replenishment_anchors_at_its_own_start() {
        let mut s = ServerState::new(2 * MS, 10 * MS).unwrap();
        s.note_eligible(SimTime(0));
        s.account(VcpuId(0), SimTime(0), SimTime(MS)).unwrap();
        // preempted but still eligible until the replenishment at 10ms
        assert_eq!(s.apply_due(SimTime(10 * MS)), MS);
        s.account(VcpuId(0), SimTime(10 * MS), SimTime(11 * MS))
            .unwrap();
        assert_eq!(s.next_replenish_at(), Some(SimTime(20 * MS)));
        assert!(s.conserved());
        // total foreground possible in [10ms, 20ms) is exactly C_max
        assert_eq!(s.budget, MS);
    }

    #[test]
    fn overdraw_is_an_internal_error() {
        let mut s = ServerState::new(MS, 10 * MS).unwrap();
        s.note_eligible(SimTime(0));
        let err = s
            .account(VcpuId(3), SimTime(0), SimTime(2 * MS))
            .unwrap_err();
        assert!(matches!(err, Error::BudgetUnderflow { vcpu: 3 }));
    }

    #[test]
    fn io_inherit_examples() {
        assert_eq!(io_inherit(&[2]), Priority::Fg(2));
        assert_eq!(io_inherit(&[]), Priority::Floor);
        assert_eq!(io_inherit(&[1, 4]), Priority::Fg(1));
        assert_eq!(io_inherit(&[4, 1]), Priority::Fg(1));
    }

    proptest! {
        // conservation holds under arbitrary run/replenish interleaving
        #[test]
        fn budget_conservation(
            c_max in 1u64..1000,
            slack in 0u64..1000,
            steps in proptest::collection::vec((0u64..200, 0u64..500), 1..60)
        ) {
            let v_t = c_max + slack + 1;
            let mut s = ServerState::new(c_max, v_t).unwrap();
            let mut now = SimTime(0);
            for (gap, want) in steps {
                now = SimTime(now.0 + gap);
                s.apply_due(now);
                if s.budget > 0 {
                    s.note_eligible(now);
                    let run = want.min(s.budget);
                    if run > 0 {
                        s.account(VcpuId(0), now, SimTime(now.0 + run)).unwrap();
                        now = SimTime(now.0 + run);
                    }
                }
                prop_assert!(s.conserved());
                prop_assert!(s.budget <= s.c_max);
            }
        }
    }
}
