//! Node memory orchestration replayed through the exact allocator oracle.

mod support;

use std::collections::BTreeMap;

use meshsim_core::memory::{Dispatch, IssueOutcome, NodeMemory, OpKind, ScaleOp};
use meshsim_core::{Bytes, InstanceId, OpId};
use proptest::prelude::*;
use support::oracles::{replay_allocator, MemEvent};

const GB: Bytes = 1_000_000_000;

/// A node memory plus the physical event log the oracle replays.
struct Recorder {
    mem: NodeMemory,
    log: Vec<MemEvent>,
    next_op: u64,
}

impl Recorder {
    fn new(capacity: Bytes) -> Self {
        Recorder {
            mem: NodeMemory::new(capacity),
            log: Vec::new(),
            next_op: 0,
        }
    }

    fn started(&mut self, op: OpId) {
        let o = self.mem.op(op).unwrap();
        self.log.push(MemEvent::Start {
            instance: o.instance,
            from: o.from,
            to: o.to,
        });
    }

    /// Issue and dispatch; `None` when the budget denies the op.
    fn submit(
        &mut self,
        inst: u64,
        kind: OpKind,
        from: Bytes,
        to: Bytes,
    ) -> Option<(OpId, Dispatch)> {
        let id = OpId(self.next_op);
        if self
            .mem
            .issue(ScaleOp::new(id, InstanceId(inst), kind, from, to))
            == IssueOutcome::Denied
        {
            return None;
        }
        self.next_op += 1;
        let d = self.mem.dispatch(id);
        if d == Dispatch::Executing {
            self.started(id);
        }
        Some((id, d))
    }

    fn finish(&mut self, op: OpId) -> Vec<OpId> {
        let o = self.mem.op(op).unwrap().clone();
        let started = self.mem.on_complete(op);
        self.log.push(MemEvent::Finish {
            instance: o.instance,
            from: o.from,
            to: o.to,
        });
        for &s in &started {
            self.started(s);
        }
        started
    }

    /// Load an instance and let the load finish.
    fn resident(&mut self, inst: u64, size: Bytes) {
        let (op, d) = self.submit(inst, OpKind::ModelLoad, 0, size).unwrap();
        assert_eq!(d, Dispatch::Executing);
        self.finish(op);
    }
}

#[test]
fn single_load_trace() {
    let mut r = Recorder::new(80 * GB);
    r.resident(1, 8 * GB);
    let rep = replay_allocator(80 * GB, &r.log);
    assert_eq!(rep.trace, vec![8 * GB, 8 * GB]);
    assert_eq!(rep.final_sizes, BTreeMap::from([(InstanceId(1), 8 * GB)]));
}

#[test]
fn grow_behind_running_shrink_stays_under_capacity() {
    // x holds 32 GB and shrinks to 16; y then grows so the node goes 60 -> 70 GB
    let mut r = Recorder::new(80 * GB);
    r.resident(1, 32 * GB);
    r.resident(2, 44 * GB);
    let (down, d) = r.submit(1, OpKind::KvDown, 32 * GB, 16 * GB).unwrap();
    assert_eq!(d, Dispatch::Executing);
    assert_eq!(r.mem.optimistic_budget(), 60 * GB);
    let (up, d) = r.submit(2, OpKind::KvUp, 44 * GB, 54 * GB).unwrap();
    assert_eq!(d, Dispatch::Reserved, "the shrink still holds 32 GB");
    assert_eq!(r.mem.optimistic_budget(), 70 * GB);
    assert_eq!(r.finish(down), vec![up]);
    r.finish(up);

    let rep = replay_allocator(80 * GB, &r.log);
    assert!(rep.overflows.is_empty() && rep.inconsistencies.is_empty());
    assert_eq!(rep.peak, 76 * GB);
    assert_eq!(rep.final_sizes[&InstanceId(1)], 16 * GB);
    assert_eq!(rep.final_sizes[&InstanceId(2)], 54 * GB);

    // had the grow started at once, the node would briefly hold 86 GB
    let mut eager = r.log[..4].to_vec();
    eager.extend([
        MemEvent::Start {
            instance: InstanceId(1),
            from: 32 * GB,
            to: 16 * GB,
        },
        MemEvent::Start {
            instance: InstanceId(2),
            from: 44 * GB,
            to: 54 * GB,
        },
    ]);
    let rep = replay_allocator(80 * GB, &eager);
    assert_eq!(rep.peak, 86 * GB);
    assert_eq!(rep.overflows, vec![5]);
}

#[test]
fn partial_release_starts_only_the_reserved_op_that_fits() {
    let mut r = Recorder::new(80 * GB);
    r.resident(1, 30 * GB);
    r.resident(2, 30 * GB);
    r.resident(3, 10 * GB);
    r.resident(4, 8 * GB);
    let (down_a, _) = r.submit(1, OpKind::KvDown, 30 * GB, 15 * GB).unwrap();
    let (down_b, _) = r.submit(2, OpKind::KvDown, 30 * GB, 15 * GB).unwrap();
    let (up_c, d) = r.submit(3, OpKind::KvUp, 10 * GB, 25 * GB).unwrap();
    assert_eq!(d, Dispatch::Reserved);
    let (up_d, d) = r.submit(4, OpKind::KvUp, 8 * GB, 23 * GB).unwrap();
    assert_eq!(d, Dispatch::Reserved);

    assert_eq!(
        r.finish(down_a),
        vec![up_c],
        "15 GB freed covers only the first grow"
    );
    assert_eq!(
        r.mem.reserved().map(|o| o.id).collect::<Vec<_>>(),
        vec![up_d]
    );
    assert_eq!(r.finish(down_b), vec![up_d]);
    r.finish(up_c);
    r.finish(up_d);

    let rep = replay_allocator(80 * GB, &r.log);
    assert!(rep.overflows.is_empty() && rep.inconsistencies.is_empty());
    assert!(rep.peak <= 80 * GB);
    for (inst, size) in [(1, 15), (2, 15), (3, 25), (4, 23)] {
        assert_eq!(rep.final_sizes[&InstanceId(inst)], size * GB);
        assert_eq!(r.mem.actual_of(InstanceId(inst)), size * GB);
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Step {
    Load(u8),
    Resize(u8, u8),
    Unload(u8),
    Complete(u8),
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        2 => (1u8..=24).prop_map(Step::Load),
        4 => (any::<u8>(), 1u8..=40).prop_map(|(i, s)| Step::Resize(i, s)),
        1 => any::<u8>().prop_map(Step::Unload),
        4 => any::<u8>().prop_map(Step::Complete),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Physical occupancy never exceeds capacity, every reserved op runs once
    /// the soup drains, and settled sizes agree with the oracle.
    #[test]
    fn op_soup_is_oom_free(capacity_gb in 20u64..=100, steps in prop::collection::vec(step(), 1..300)) {
        let capacity = capacity_gb * GB;
        let mut r = Recorder::new(capacity);
        let mut settled: BTreeMap<u64, Bytes> = BTreeMap::new();
        let mut busy: BTreeMap<OpId, u64> = BTreeMap::new();
        let mut executing: Vec<OpId> = Vec::new();
        let mut next_inst = 0u64;
        let pick = |settled: &BTreeMap<u64, Bytes>, i: u8| settled.keys().nth(i as usize % settled.len().max(1)).copied();

        for s in steps {
            let submitted = match s {
                Step::Load(half_gb) => {
                    next_inst += 1;
                    r.submit(next_inst, OpKind::ModelLoad, 0, half_gb as Bytes * GB / 2).map(|x| (x, next_inst))
                }
                Step::Resize(i, half_gb) => match pick(&settled, i) {
                    Some(inst) => {
                        let (cur, to) = (settled[&inst], half_gb as Bytes * GB / 2);
                        let kind = if to > cur { OpKind::KvUp } else { OpKind::KvDown };
                        if to == cur { None } else { r.submit(inst, kind, cur, to).map(|x| (x, inst)) }
                    }
                    None => None,
                },
                Step::Unload(i) => pick(&settled, i).and_then(|inst| {
                    r.submit(inst, OpKind::ModelUnload, settled[&inst], 0).map(|x| (x, inst))
                }),
                Step::Complete(k) => {
                    if !executing.is_empty() {
                        let op = executing.remove(k as usize % executing.len());
                        let inst = busy.remove(&op).unwrap();
                        let to = r.mem.op(op).unwrap().to;
                        executing.extend(r.finish(op));
                        if to > 0 {
                            settled.insert(inst, to);
                        }
                    }
                    None
                }
            };
            if let Some(((op, d), inst)) = submitted {
                settled.remove(&inst);
                busy.insert(op, inst);
                if d == Dispatch::Executing {
                    executing.push(op);
                }
            }
            prop_assert_eq!(r.mem.check_invariants(), Ok(()));
        }
        while let Some(op) = executing.pop() {
            let inst = busy.remove(&op).unwrap();
            let to = r.mem.op(op).unwrap().to;
            executing.extend(r.finish(op));
            if to > 0 {
                settled.insert(inst, to);
            }
        }
        prop_assert!(busy.is_empty(), "{} ops never executed", busy.len());

        let rep = replay_allocator(capacity, &r.log);
        prop_assert!(rep.overflows.is_empty(), "peak {} > {}", rep.peak, capacity);
        prop_assert!(rep.inconsistencies.is_empty());
        let expect: BTreeMap<InstanceId, Bytes> = settled.iter().map(|(&i, &b)| (InstanceId(i), b)).collect();
        prop_assert_eq!(&rep.final_sizes, &expect);
        for (inst, size) in expect {
            prop_assert_eq!(r.mem.actual_of(inst), size);
        }
    }
}
