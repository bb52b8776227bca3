//! Token-level scheduling inside a node and shadow validation of admissions.
//!
//! A node runs one iteration at a time. Each time it is free it picks the
//! instance holding the request with the least headroom and runs either that
//! instance's most urgent pending prefill or a decode over its whole batch.
//!
//! Shadow validation replays the same policy on a [`VirtualNode`], a detached
//! copy of the node, using pessimistic iteration times and assumed output
//! lengths.

use std::collections::BTreeSet;

use crate::memory::{ModelRegistry, ModelSpec};
use crate::perfmodel::{CostParams, IterKind, PerfCatalog, PerfTable};
use crate::simcore::SimTime;
use crate::types::{Bytes, HardwareClass, InstanceId, ModelId, NodeId, OpId, RequestId};
use crate::workload::{Request, RequestState, SloSpec};

/// Slack allowed when comparing emission times against deadlines.
pub const DEADLINE_EPS: f64 = 1e-9;

const MAX_REPLAY_STEPS: usize = 200_000;

/// Read-only inputs shared by scheduling and validation.
#[derive(Debug, Clone, Copy)]
pub struct ComputeCtx<'a> {
    pub models: &'a ModelRegistry,
    pub perf: &'a PerfCatalog,
    pub slo: &'a SloSpec,
    pub cost: &'a CostParams,
}

impl<'a> ComputeCtx<'a> {
    pub fn table(&self, model: ModelId, class: HardwareClass) -> &'a PerfTable {
        let spec = self.models.get(model);
        self.perf
            .get(&spec.family, class)
            .unwrap_or_else(|| panic!("no {class} table for family {}", spec.family))
    }

    pub fn model(&self, model: ModelId) -> &'a ModelSpec {
        self.models.get(model)
    }

    fn pessimistic(&self, table: &PerfTable, kind: IterKind) -> f64 {
        self.cost
            .pessimistic_iter_time(table, kind)
            .expect("iteration clamped into the table grid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceState {
    Loading,
    Idle,
    Active,
    Draining,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: InstanceId,
    pub model: ModelId,
    pub node: NodeId,
    pub state: InstanceState,
    /// Admitted, unfinished requests in admission order.
    pub batch: Vec<RequestId>,
    /// KV-cache size the instance holds once its pending op finishes (M_cur).
    pub kv_alloc: Bytes,
    pub idle_since: Option<SimTime>,
    pub pending_op: Option<OpId>,
    /// When the pending op finishes; infinite while it waits for memory.
    pub blocked_until: Option<f64>,
}

impl Instance {
    pub fn loading(id: InstanceId, model: ModelId, node: NodeId, kv_alloc: Bytes) -> Self {
        Instance {
            id,
            model,
            node,
            state: InstanceState::Loading,
            batch: Vec::new(),
            kv_alloc,
            idle_since: None,
            pending_op: None,
            blocked_until: None,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch.len()
    }

    /// May the node run an iteration of this instance right now?
    pub fn is_runnable(&self) -> bool {
        self.state == InstanceState::Active && self.pending_op.is_none() && !self.batch.is_empty()
    }

    pub fn is_live(&self) -> bool {
        self.state != InstanceState::Draining
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanKind {
    Prefill(RequestId),
    Decode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationPlan {
    pub instance: InstanceId,
    pub kind: PlanKind,
    pub predicted_duration: f64,
    /// Requests that receive a token when the iteration ends.
    pub members: Vec<RequestId>,
}

/// An iteration currently executing on a node.
#[derive(Debug, Clone, PartialEq)]
pub struct InFlight {
    pub plan: IterationPlan,
    pub ends_at: SimTime,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationOutcome {
    /// `(request, token index)` pairs, index 0 being the first token.
    pub emissions: Vec<(RequestId, u32)>,
    pub completed: Vec<RequestId>,
}

/// Slack before the request's next token misses its cumulative deadline.
pub fn headroom(req: &Request, slo: &SloSpec, now: SimTime) -> f64 {
    req.next_deadline(slo.tpot) - now.secs()
}

/// Key with the earliest deadline; ties go to the smaller key.
fn most_urgent<K: Ord + Copy>(items: impl Iterator<Item = (K, f64)>) -> Option<K> {
    items
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(k, _)| k)
}

fn req(requests: &[Request], id: RequestId) -> &Request {
    &requests[id.0 as usize]
}

/// Average context length of a decode batch, rounded up.
fn avg_len(lens: impl Iterator<Item = u32>) -> u32 {
    let (sum, n) = lens.fold((0u64, 0u64), |(s, n), l| (s + l as u64, n + 1));
    sum.div_ceil(n.max(1)).max(1) as u32
}

fn decode_kind(table: &PerfTable, batch: usize, avg: u32) -> IterKind {
    IterKind::Decode {
        batch: (batch as u32).clamp(1, table.b_max()),
        avg_len: avg.clamp(1, table.decode_l_max()),
    }
}

fn prefill_kind(table: &PerfTable, len: u32) -> IterKind {
    IterKind::Prefill {
        len: len.clamp(1, table.prefill_l_max()),
    }
}

/// The iteration `inst` would run next: its most urgent pending prefill,
/// otherwise a decode of the whole batch.
fn plan_for(
    inst: &Instance,
    requests: &[Request],
    ctx: &ComputeCtx<'_>,
    class: HardwareClass,
) -> IterationPlan {
    let tpot = ctx.slo.tpot;
    let table = ctx.table(inst.model, class);
    let pending = most_urgent(
        inst.batch
            .iter()
            .map(|&r| req(requests, r))
            .filter(|r| r.needs_prefill)
            .map(|r| (r.id, r.next_deadline(tpot))),
    );
    let (kind, iter, members) = match pending {
        Some(r) => (
            PlanKind::Prefill(r),
            prefill_kind(table, req(requests, r).context_len()),
            vec![r],
        ),
        None => {
            let avg = avg_len(inst.batch.iter().map(|&r| req(requests, r).context_len()));
            (
                PlanKind::Decode,
                decode_kind(table, inst.batch.len(), avg),
                inst.batch.clone(),
            )
        }
    };
    let predicted_duration = table
        .iter_time(iter)
        .expect("iteration clamped into the table grid");
    IterationPlan {
        instance: inst.id,
        kind,
        predicted_duration,
        members,
    }
}

/// Pick the node's next iteration.
///
/// Instances are ranked by their most urgent deadline. Instances waiting on
/// a memory op with a known finish time still take part in the ranking: a
/// ready instance may only run if its iteration ends before every more
/// urgent waiting instance becomes ready, so a long prefill never blocks a
/// more urgent instance that is about to load. `None` means the node waits.
pub fn select_next<'i>(
    instances: impl IntoIterator<Item = &'i Instance>,
    requests: &[Request],
    ctx: &ComputeCtx<'_>,
    class: HardwareClass,
    now: SimTime,
) -> Option<IterationPlan> {
    let tpot = ctx.slo.tpot;
    let mut ranked: Vec<(f64, InstanceId, &Instance, Option<f64>)> = instances
        .into_iter()
        .filter(|i| i.is_live() && !i.batch.is_empty())
        .filter_map(|inst| {
            let wait = if inst.is_runnable() {
                None
            } else {
                Some(inst.blocked_until.filter(|t| t.is_finite())?)
            };
            let d = inst
                .batch
                .iter()
                .map(|&r| req(requests, r).next_deadline(tpot))
                .fold(f64::INFINITY, f64::min);
            Some((d, inst.id, inst, wait))
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut limit = f64::INFINITY;
    for (_, _, inst, wait) in ranked {
        if let Some(ready_at) = wait {
            limit = limit.min(ready_at);
            continue;
        }
        let plan = plan_for(inst, requests, ctx, class);
        if now.secs() + plan.predicted_duration <= limit {
            return Some(plan);
        }
    }
    None
}

/// Apply a finished iteration: emit tokens, retire finished requests.
pub fn complete_iteration(
    instance: &mut Instance,
    requests: &mut [Request],
    plan: &IterationPlan,
    now: SimTime,
) -> IterationOutcome {
    debug_assert_eq!(instance.id, plan.instance);
    let mut out = IterationOutcome::default();
    for &id in &plan.members {
        if !instance.batch.contains(&id) {
            continue;
        }
        let r = &mut requests[id.0 as usize];
        if matches!(plan.kind, PlanKind::Decode) && r.needs_prefill {
            continue;
        }
        out.emissions.push((id, r.generated()));
        r.emission_times.push(now);
        r.needs_prefill = false;
        r.state = RequestState::Decoding;
        if r.generated() >= r.true_output_len {
            r.state = RequestState::Complete;
            out.completed.push(id);
        }
    }
    instance.batch.retain(|id| !out.completed.contains(id));
    if instance.batch.is_empty() && instance.state == InstanceState::Active {
        instance.state = InstanceState::Idle;
        instance.idle_since = Some(now);
    }
    out
}

/// Everything shadow validation needs to know about one node.
#[derive(Debug, Clone)]
pub struct NodeView<'v> {
    pub class: HardwareClass,
    pub now: SimTime,
    pub instances: Vec<&'v Instance>,
    pub requests: &'v [Request],
    pub in_flight: Option<&'v InFlight>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// The new request's first token would be late.
    OwnDeadline,
    /// An already-admitted request would be delayed past its deadline.
    ExistingDeadline,
    /// One decode round over every instance would exceed the TPOT target.
    DecodeRound,
}

impl RejectReason {
    pub fn case(self) -> u8 {
        match self {
            RejectReason::OwnDeadline => 1,
            RejectReason::ExistingDeadline => 2,
            RejectReason::DecodeRound => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

impl Verdict {
    pub fn accepted(self) -> bool {
        self == Verdict::Accept
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualRequest {
    pub id: RequestId,
    /// Deadline of the first token.
    pub base_deadline: f64,
    pub input: u32,
    pub generated: u32,
    pub prefilled: bool,
    /// Late tokens of unchecked requests are tolerated: they were already
    /// late when the node was captured.
    checked: bool,
    is_new: bool,
}

impl VirtualRequest {
    pub fn from_request(r: &Request) -> Self {
        VirtualRequest {
            id: r.id,
            base_deadline: r.arrival.secs() + r.ttft_slo,
            input: r.input_len,
            generated: r.generated(),
            prefilled: !r.needs_prefill,
            checked: true,
            is_new: false,
        }
    }

    fn deadline(&self, tpot: f64) -> f64 {
        self.base_deadline + tpot * self.generated as f64
    }

    fn context(&self) -> u32 {
        self.input + self.generated
    }
}

#[derive(Debug, Clone)]
pub struct VirtualInstance<'a> {
    pub id: InstanceId,
    pub model: ModelId,
    pub available_at: f64,
    pub reqs: Vec<VirtualRequest>,
    table: &'a PerfTable,
    assumed_output: u32,
}

impl VirtualInstance<'_> {
    fn final_len(&self, r: &VirtualRequest) -> u32 {
        r.input + r.generated.max(self.assumed_output)
    }

    fn next_deadline(&self, tpot: f64) -> f64 {
        self.reqs
            .iter()
            .map(|r| r.deadline(tpot))
            .fold(f64::INFINITY, f64::min)
    }

    /// Pessimistic duration of the next iteration, and the index of the
    /// request it prefills, if any.
    fn next_iteration(&self, ctx: &ComputeCtx<'_>, tpot: f64) -> (f64, Option<usize>) {
        let pending = most_urgent(
            self.reqs
                .iter()
                .enumerate()
                .filter(|(_, r)| !r.prefilled)
                .map(|(k, r)| ((r.id, k), r.deadline(tpot))),
        );
        match pending {
            Some((_, k)) => (
                ctx.pessimistic(self.table, prefill_kind(self.table, self.reqs[k].context())),
                Some(k),
            ),
            None => {
                let avg = avg_len(self.reqs.iter().map(|r| r.context()));
                (
                    ctx.pessimistic(self.table, decode_kind(self.table, self.reqs.len(), avg)),
                    None,
                )
            }
        }
    }
}

enum Horizon {
    AfterPrefillOf(RequestId),
    AfterTime(f64),
}

/// Detached copy of a node that validation can mutate freely.
#[derive(Debug, Clone)]
pub struct VirtualNode<'a> {
    class: HardwareClass,
    now: f64,
    start: f64,
    instances: Vec<VirtualInstance<'a>>,
}

impl<'a> VirtualNode<'a> {
    pub fn capture(view: &NodeView<'_>, ctx: &ComputeCtx<'a>) -> Self {
        let now = view.now.secs();
        let tpot = ctx.slo.tpot;
        let mut instances: Vec<VirtualInstance<'a>> = view
            .instances
            .iter()
            .filter(|i| i.is_live())
            .map(|inst| VirtualInstance {
                id: inst.id,
                model: inst.model,
                available_at: inst.blocked_until.unwrap_or(now).max(now),
                reqs: inst
                    .batch
                    .iter()
                    .map(|&r| VirtualRequest::from_request(req(view.requests, r)))
                    .collect(),
                table: ctx.table(inst.model, view.class),
                assumed_output: ctx.model(inst.model).avg_output.assumed(),
            })
            .collect();
        instances.sort_by_key(|i| i.id);
        let mut start = now;
        if let Some(fl) = view.in_flight {
            start = start.max(fl.ends_at.secs());
            if let Some(vi) = instances.iter_mut().find(|i| i.id == fl.plan.instance) {
                for r in vi.reqs.iter_mut() {
                    let member = fl.plan.members.contains(&r.id);
                    let decodes = matches!(fl.plan.kind, PlanKind::Decode) && r.prefilled;
                    let prefills = fl.plan.kind == PlanKind::Prefill(r.id);
                    if member && (decodes || prefills) {
                        r.generated += 1;
                        r.prefilled = true;
                    }
                }
            }
        }
        for vi in instances.iter_mut() {
            for r in vi.reqs.iter_mut() {
                r.checked = r.deadline(tpot) >= now;
            }
        }
        VirtualNode {
            class: view.class,
            now,
            start,
            instances,
        }
    }

    pub fn class(&self) -> HardwareClass {
        self.class
    }

    pub fn instances(&self) -> &[VirtualInstance<'a>] {
        &self.instances
    }

    pub fn batch_len(&self, id: InstanceId) -> usize {
        self.get(id).map_or(0, |i| i.reqs.len())
    }

    fn get(&self, id: InstanceId) -> Option<&VirtualInstance<'a>> {
        self.instances.iter().find(|i| i.id == id)
    }

    fn get_mut(&mut self, id: InstanceId) -> &mut VirtualInstance<'a> {
        self.instances
            .iter_mut()
            .find(|i| i.id == id)
            .expect("virtual instance exists")
    }

    /// Add an instance that becomes runnable at `available_at`.
    pub fn add_instance(
        &mut self,
        id: InstanceId,
        model: ModelId,
        available_at: f64,
        ctx: &ComputeCtx<'a>,
    ) {
        let vi = VirtualInstance {
            id,
            model,
            available_at: available_at.max(self.now),
            reqs: Vec::new(),
            table: ctx.table(model, self.class),
            assumed_output: ctx.model(model).avg_output.assumed(),
        };
        let pos = self.instances.partition_point(|i| i.id < id);
        self.instances.insert(pos, vi);
    }

    pub fn remove_instance(&mut self, id: InstanceId) -> Vec<VirtualRequest> {
        let pos = self
            .instances
            .iter()
            .position(|i| i.id == id)
            .expect("virtual instance exists");
        self.instances.remove(pos).reqs
    }

    pub fn block_until(&mut self, id: InstanceId, t: f64) {
        let vi = self.get_mut(id);
        vi.available_at = vi.available_at.max(t);
    }

    /// Commit `r` to `target` as if it had been admitted.
    pub fn admit(&mut self, target: InstanceId, mut r: VirtualRequest) {
        r.checked = true;
        r.is_new = false;
        self.get_mut(target).reqs.push(r);
    }

    /// Would admitting `new` to `target` keep every deadline?
    pub fn validate_admission(
        &self,
        target: InstanceId,
        new: &VirtualRequest,
        ctx: &ComputeCtx<'a>,
    ) -> Verdict {
        let mut sim = self.clone();
        let mut r = new.clone();
        r.prefilled = false;
        r.checked = true;
        r.is_new = true;
        sim.get_mut(target).reqs.push(r);
        sim.check(Horizon::AfterPrefillOf(new.id), ctx)
    }

    /// Would blocking `instance` until `until` keep every deadline?
    pub fn validate_blocking(
        &self,
        instance: InstanceId,
        until: f64,
        ctx: &ComputeCtx<'a>,
    ) -> bool {
        let mut sim = self.clone();
        sim.block_until(instance, until);
        sim.check(Horizon::AfterTime(until), ctx).accepted()
    }

    /// Pessimistic time of one decode round over every non-empty instance,
    /// with each request at its assumed final length.
    pub fn round_time(&self, ctx: &ComputeCtx<'a>) -> f64 {
        self.instances
            .iter()
            .filter(|i| !i.reqs.is_empty())
            .map(|i| {
                let avg = avg_len(i.reqs.iter().map(|r| i.final_len(r)));
                ctx.pessimistic(i.table, decode_kind(i.table, i.reqs.len(), avg))
            })
            .sum()
    }

    fn check(mut self, horizon: Horizon, ctx: &ComputeCtx<'a>) -> Verdict {
        if self
            .instances
            .iter()
            .any(|i| i.reqs.len() as u32 > i.table.b_max())
        {
            return Verdict::Reject(RejectReason::DecodeRound);
        }
        let round = self.round_time(ctx);
        if let Some(reason) = self.replay(horizon, ctx) {
            return Verdict::Reject(reason);
        }
        if round > ctx.slo.tpot + DEADLINE_EPS {
            return Verdict::Reject(RejectReason::DecodeRound);
        }
        Verdict::Accept
    }

    /// Run the scheduling policy forward. Returns the first violation.
    fn replay(&mut self, horizon: Horizon, ctx: &ComputeCtx<'a>) -> Option<RejectReason> {
        let tpot = ctx.slo.tpot;
        let mut t = self.start;
        let mut armed = false;
        let mut decoded: BTreeSet<InstanceId> = BTreeSet::new();
        for _ in 0..MAX_REPLAY_STEPS {
            if let Horizon::AfterTime(until) = horizon {
                armed |= t >= until;
            }
            if armed
                && !self.instances.iter().any(|i| {
                    !i.reqs.is_empty() && i.available_at.is_finite() && !decoded.contains(&i.id)
                })
            {
                return None;
            }
            let mut order: Vec<usize> = (0..self.instances.len())
                .filter(|&k| {
                    !self.instances[k].reqs.is_empty() && self.instances[k].available_at.is_finite()
                })
                .collect();
            if order.is_empty() {
                return None;
            }
            order.sort_by(|&a, &b| {
                let (ia, ib) = (&self.instances[a], &self.instances[b]);
                ia.next_deadline(tpot)
                    .total_cmp(&ib.next_deadline(tpot))
                    .then(ia.id.cmp(&ib.id))
            });
            let mut limit = f64::INFINITY;
            let mut chosen = None;
            for k in order {
                let inst = &self.instances[k];
                if inst.available_at > t {
                    limit = limit.min(inst.available_at);
                    continue;
                }
                let (dur, pending) = inst.next_iteration(ctx, tpot);
                if t + dur <= limit {
                    chosen = Some((k, dur, pending));
                    break;
                }
            }
            let Some((idx, dur, pending)) = chosen else {
                t = self
                    .instances
                    .iter()
                    .filter(|i| !i.reqs.is_empty() && i.available_at > t)
                    .map(|i| i.available_at)
                    .fold(f64::INFINITY, f64::min);
                continue;
            };
            let inst = &mut self.instances[idx];
            t += dur;
            match pending {
                Some(k) => {
                    let r = &mut inst.reqs[k];
                    if let Some(reason) = late(r, t, tpot) {
                        return Some(reason);
                    }
                    r.generated += 1;
                    r.prefilled = true;
                    if let Horizon::AfterPrefillOf(id) = horizon {
                        armed |= r.id == id;
                    }
                    // A prefill eats into everyone's slack: only a full
                    // decode round after the last one shows the node has
                    // settled.
                    decoded.clear();
                }
                None => {
                    for r in inst.reqs.iter_mut() {
                        if let Some(reason) = late(r, t, tpot) {
                            return Some(reason);
                        }
                        r.generated += 1;
                    }
                    if armed {
                        decoded.insert(inst.id);
                    }
                }
            }
        }
        log::warn!("shadow replay hit its step limit; accepting");
        None
    }
}

fn late(r: &VirtualRequest, t: f64, tpot: f64) -> Option<RejectReason> {
    if t <= r.deadline(tpot) + DEADLINE_EPS {
        return None;
    }
    if r.is_new {
        Some(RejectReason::OwnDeadline)
    } else if r.checked {
        Some(RejectReason::ExistingDeadline)
    } else {
        None
    }
}

/// Validate admitting `new_req` to `target` on the node described by `view`.
/// `target_ready_at` delays the target, e.g. behind a KV-cache grow.
pub fn shadow_validate(
    view: &NodeView<'_>,
    target: InstanceId,
    new_req: &Request,
    ctx: &ComputeCtx<'_>,
    target_ready_at: Option<f64>,
) -> Verdict {
    let mut vn = VirtualNode::capture(view, ctx);
    if let Some(t) = target_ready_at {
        vn.block_until(target, t);
    }
    vn.validate_admission(target, &VirtualRequest::from_request(new_req), ctx)
}
