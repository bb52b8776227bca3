//! Brute-force reference implementations used only by tests. Nothing here
//! calls into the scheduling, interpolation or memory code under test; the
//! oracles read plain data (grid samples, snapshots, op logs) and recompute
//! everything from first principles.

#![allow(dead_code)]

use std::collections::BTreeMap;

use meshsim_core::cluster::NodeSnapshot;
use meshsim_core::perfmodel::PerfTable;
use meshsim_core::{Bytes, InstanceId, RequestId};

pub const EPS: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Naive interpolation
// ---------------------------------------------------------------------------

/// Perf samples copied out of a table, interpolated by linear search.
#[derive(Debug, Clone)]
pub struct NaiveTable {
    prefill: Vec<(f64, f64)>,
    decode: Vec<((f64, f64), f64)>,
    batches: Vec<f64>,
    lens: Vec<f64>,
}

fn segment(axis: &[f64], x: f64) -> (f64, f64) {
    let mut lo = axis[0];
    let mut hi = axis[axis.len() - 1];
    for &a in axis {
        if a <= x {
            lo = a;
        }
    }
    for &a in axis.iter().rev() {
        if a >= x {
            hi = a;
        }
    }
    (lo, hi)
}

fn weight(lo: f64, hi: f64, x: f64) -> f64 {
    if hi == lo {
        0.0
    } else {
        (x - lo) / (hi - lo)
    }
}

impl NaiveTable {
    pub fn of(table: &PerfTable) -> Self {
        let prefill: Vec<(f64, f64)> = table
            .prefill_samples()
            .iter()
            .map(|&(l, t)| (l as f64, t))
            .collect();
        let decode: Vec<((f64, f64), f64)> = table
            .decode_samples()
            .into_iter()
            .map(|((b, l), t)| ((b as f64, l as f64), t))
            .collect();
        let mut batches: Vec<f64> = decode.iter().map(|d| d.0 .0).collect();
        batches.sort_by(f64::total_cmp);
        batches.dedup();
        let mut lens: Vec<f64> = decode.iter().map(|d| d.0 .1).collect();
        lens.sort_by(f64::total_cmp);
        lens.dedup();
        NaiveTable {
            prefill,
            decode,
            batches,
            lens,
        }
    }

    pub fn prefill_max(&self) -> u32 {
        self.prefill.last().unwrap().0 as u32
    }

    pub fn decode_len_max(&self) -> u32 {
        *self.lens.last().unwrap() as u32
    }

    pub fn batch_max(&self) -> u32 {
        *self.batches.last().unwrap() as u32
    }

    fn grid(&self, b: f64, l: f64) -> f64 {
        self.decode
            .iter()
            .find(|((bb, ll), _)| *bb == b && *ll == l)
            .map(|d| d.1)
            .expect("grid point")
    }

    pub fn prefill(&self, len: u32) -> f64 {
        let x = len as f64;
        let axis: Vec<f64> = self.prefill.iter().map(|p| p.0).collect();
        let (lo, hi) = segment(&axis, x);
        let at = |a: f64| self.prefill.iter().find(|p| p.0 == a).unwrap().1;
        let w = weight(lo, hi, x);
        at(lo) * (1.0 - w) + at(hi) * w
    }

    pub fn decode(&self, batch: u32, len: u32) -> f64 {
        let (b, l) = (batch as f64, len as f64);
        let (b0, b1) = segment(&self.batches, b);
        let (l0, l1) = segment(&self.lens, l);
        let wb = weight(b0, b1, b);
        let wl = weight(l0, l1, l);
        self.grid(b0, l0) * (1.0 - wb) * (1.0 - wl)
            + self.grid(b0, l1) * (1.0 - wb) * wl
            + self.grid(b1, l0) * wb * (1.0 - wl)
            + self.grid(b1, l1) * wb * wl
    }
}

// ---------------------------------------------------------------------------
// Future replay
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Pending {
    id: RequestId,
    input: u32,
    generated: u32,
    output: u32,
    needs_prefill: bool,
    first_deadline: f64,
    /// Tokens already past due at capture time are not the validator's doing.
    late_at_capture: bool,
}

impl Pending {
    fn deadline(&self, tpot: f64) -> f64 {
        self.first_deadline + self.generated as f64 * tpot
    }
}

#[derive(Debug, Clone)]
struct Inst {
    id: InstanceId,
    ready_at: f64,
    table: NaiveTable,
    reqs: Vec<Pending>,
}

impl Inst {
    fn next_deadline(&self, tpot: f64) -> f64 {
        self.reqs
            .iter()
            .map(|r| r.deadline(tpot))
            .fold(f64::INFINITY, f64::min)
    }

    /// Which request the next iteration prefills (if any) and how long it takes.
    fn next_step(&self, tpot: f64) -> (Option<usize>, f64) {
        let mut prefill: Option<usize> = None;
        for (k, r) in self.reqs.iter().enumerate() {
            if !r.needs_prefill {
                continue;
            }
            prefill = match prefill {
                None => Some(k),
                Some(j) => {
                    let (dj, dk) = (self.reqs[j].deadline(tpot), r.deadline(tpot));
                    if dk < dj || (dk == dj && r.id < self.reqs[j].id) {
                        Some(k)
                    } else {
                        Some(j)
                    }
                }
            };
        }
        match prefill {
            Some(k) => {
                let r = &self.reqs[k];
                let len = (r.input + r.generated).clamp(1, self.table.prefill_max());
                (Some(k), self.table.prefill(len))
            }
            None => {
                let n = self.reqs.len() as u64;
                let total: u64 = self
                    .reqs
                    .iter()
                    .map(|r| (r.input + r.generated) as u64)
                    .sum();
                let avg = (total.div_ceil(n).max(1) as u32).clamp(1, self.table.decode_len_max());
                let b = (n as u32).clamp(1, self.table.batch_max());
                (None, self.table.decode(b, avg))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub request: RequestId,
    pub token: u32,
    pub at: f64,
    pub deadline: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ReplayReport {
    pub emissions: u64,
    /// Every replayed token as `(request, token index, time)`, in order.
    pub schedule: Vec<(RequestId, u32, f64)>,
    pub violations: Vec<Violation>,
    /// Requests that could never run because their instance never became ready.
    pub stranded: Vec<RequestId>,
}

fn emit(r: &mut Pending, at: f64, tpot: f64, rep: &mut ReplayReport) {
    let deadline = r.deadline(tpot);
    rep.emissions += 1;
    rep.schedule.push((r.id, r.generated, at));
    if at > deadline + EPS && !r.late_at_capture {
        rep.violations.push(Violation {
            request: r.id,
            token: r.generated,
            at,
            deadline,
        });
    }
    r.generated += 1;
}

/// Replay a node from `snap` with no further arrivals, using the true
/// output lengths, until every request finishes. `tables` maps each
/// instance to its naive perf table.
///
/// Scheduling rule: rank instances by their earliest token deadline; the
/// first ready instance whose next iteration ends before every higher-ranked
/// waiting instance becomes ready runs next. Within an instance the most
/// urgent pending prefill goes first, otherwise the whole batch decodes.
pub fn replay_future(
    snap: &NodeSnapshot,
    tables: &BTreeMap<InstanceId, NaiveTable>,
    tpot: f64,
) -> ReplayReport {
    let mut rep = ReplayReport::default();
    let now = snap.time;
    let mut insts: Vec<Inst> = snap
        .instances
        .iter()
        .map(|si| Inst {
            id: si.id,
            ready_at: si.ready_at,
            table: tables[&si.id].clone(),
            reqs: si
                .requests
                .iter()
                .map(|r| {
                    let first_deadline = r.arrival + r.ttft_slo;
                    let p = Pending {
                        id: r.id,
                        input: r.input,
                        generated: r.generated,
                        output: r.true_output,
                        needs_prefill: r.needs_prefill,
                        first_deadline,
                        late_at_capture: false,
                    };
                    let late = now > p.deadline(tpot) + EPS;
                    Pending {
                        late_at_capture: late,
                        ..p
                    }
                })
                .collect(),
        })
        .collect();
    insts.sort_by_key(|i| i.id);

    let mut t = now;
    if let Some((iid, ends_at, is_prefill, members)) = &snap.in_flight {
        t = t.max(*ends_at);
        if let Some(inst) = insts.iter_mut().find(|i| i.id == *iid) {
            for r in inst.reqs.iter_mut().filter(|r| members.contains(&r.id)) {
                if *is_prefill {
                    if r.needs_prefill {
                        r.needs_prefill = false;
                        emit(r, t, tpot, &mut rep);
                    }
                } else if !r.needs_prefill {
                    emit(r, t, tpot, &mut rep);
                }
            }
            inst.reqs.retain(|r| r.generated < r.output);
        }
    }

    loop {
        let waiting: Vec<usize> = (0..insts.len())
            .filter(|&i| !insts[i].reqs.is_empty())
            .collect();
        if waiting.is_empty() {
            break;
        }
        let (never, mut live): (Vec<usize>, Vec<usize>) = waiting
            .into_iter()
            .partition(|&i| insts[i].ready_at.is_infinite());
        for &i in &never {
            rep.stranded.extend(insts[i].reqs.iter().map(|r| r.id));
            insts[i].reqs.clear();
        }
        if live.is_empty() {
            break;
        }
        // Most urgent first; ties to the lower instance id.
        live.sort_by(|&a, &b| {
            let (da, db) = (insts[a].next_deadline(tpot), insts[b].next_deadline(tpot));
            da.partial_cmp(&db)
                .unwrap()
                .then(insts[a].id.cmp(&insts[b].id))
        });
        // A ready instance runs only if it finishes before every more urgent
        // instance that is still loading or resizing becomes ready.
        let mut gate = f64::INFINITY;
        let mut pick = None;
        for &i in &live {
            if insts[i].ready_at > t {
                gate = gate.min(insts[i].ready_at);
                continue;
            }
            let step = insts[i].next_step(tpot);
            if t + step.1 <= gate {
                pick = Some((i, step));
                break;
            }
        }
        let Some((best, (prefill, dur))) = pick else {
            t = live
                .iter()
                .map(|&i| insts[i].ready_at)
                .filter(|&r| r > t)
                .fold(f64::INFINITY, f64::min);
            continue;
        };
        let inst = &mut insts[best];
        t += dur;
        match prefill {
            Some(k) => {
                let r = &mut inst.reqs[k];
                r.needs_prefill = false;
                emit(r, t, tpot, &mut rep);
            }
            None => {
                for r in inst.reqs.iter_mut() {
                    emit(r, t, tpot, &mut rep);
                }
            }
        }
        inst.reqs.retain(|r| r.generated < r.output);
    }
    rep
}

// ---------------------------------------------------------------------------
// Allocator replay
// ---------------------------------------------------------------------------

/// What happened to one memory op, in the order it happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemEvent {
    /// An op began moving bytes: `from -> to` for `instance`.
    Start {
        instance: InstanceId,
        from: Bytes,
        to: Bytes,
    },
    /// The op finished; the instance now holds `to`.
    Finish {
        instance: InstanceId,
        from: Bytes,
        to: Bytes,
    },
}

#[derive(Debug, Clone, Default)]
pub struct AllocReport {
    /// Physical occupancy after each event.
    pub trace: Vec<Bytes>,
    pub peak: Bytes,
    /// Settled size of every instance after the last event.
    pub final_sizes: BTreeMap<InstanceId, Bytes>,
    /// Event indices where physical occupancy exceeded capacity.
    pub overflows: Vec<usize>,
    /// Event indices that contradict the replayed state (size mismatch).
    pub inconsistencies: Vec<usize>,
}

/// Replay physical memory: while an op runs, its instance holds
/// `max(from, to)`; otherwise it holds its settled size.
pub fn replay_allocator(capacity: Bytes, log: &[MemEvent]) -> AllocReport {
    let mut settled: BTreeMap<InstanceId, Bytes> = BTreeMap::new();
    let mut running: BTreeMap<InstanceId, (Bytes, Bytes)> = BTreeMap::new();
    let mut rep = AllocReport::default();
    for (k, ev) in log.iter().enumerate() {
        match *ev {
            MemEvent::Start { instance, from, to } => {
                if settled.get(&instance).copied().unwrap_or(0) != from
                    || running.contains_key(&instance)
                {
                    rep.inconsistencies.push(k);
                }
                running.insert(instance, (from, to));
            }
            MemEvent::Finish { instance, from, to } => {
                if running.remove(&instance) != Some((from, to)) {
                    rep.inconsistencies.push(k);
                }
                if to == 0 {
                    settled.remove(&instance);
                } else {
                    settled.insert(instance, to);
                }
            }
        }
        let mut used: Bytes = 0;
        for (i, &s) in &settled {
            if !running.contains_key(i) {
                used += s;
            }
        }
        for &(from, to) in running.values() {
            used += from.max(to);
        }
        rep.trace.push(used);
        rep.peak = rep.peak.max(used);
        if used > capacity {
            rep.overflows.push(k);
        }
    }
    rep.final_sizes = settled;
    rep
}
