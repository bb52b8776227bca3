//! Cluster state, request routing, instance lifecycle and baseline policies.
//!
//! [`World`] owns every node, instance and request and reacts to simulation
//! events. [`Simulation`] pairs it with the event engine.
//!
//! Mesh routing tries hardware classes CPU first. Within a class it tries the
//! model's existing instances in bin-packing order, then preemption, then a
//! cold start; a request nobody accepts is dropped immediately. The baselines
//! dedicate whole nodes to one instance, queue requests per model and scale
//! out when an instance's concurrency reaches its threshold.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{
    self, ComputeCtx, InFlight, Instance, InstanceState, NodeView, PlanKind, VirtualNode,
    VirtualRequest,
};
use crate::defrag::{self, PreemptionPlan};
use crate::memory::{
    handle_underestimate, m_require, shadow_mem_check, watermark_decide, Dispatch, IssueOutcome,
    MemCheck, ModelRegistry, NodeMemory, OpKind, ScaleDecision, ScaleOp, Underestimate, Watermark,
};
use crate::metrics::{self, MetricsSink, RequestRecord, SummaryReport};
use crate::perfmodel::{CostParams, PerfCatalog, SizeClass};
use crate::simcore::{Engine, Event, EventPayload, EventQueue, Handler, SimTime};
use crate::types::{Bytes, HardwareClass, InstanceId, ModelId, NodeId, OpId, RequestId};
use crate::workload::{Request, RequestState, SloSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Mesh,
    Exclusive,
    #[serde(rename = "exclusive_cpu")]
    ExclusivePlusCpu,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Mesh => "mesh",
            PolicyKind::Exclusive => "exclusive",
            PolicyKind::ExclusivePlusCpu => "exclusive_cpu",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mesh" => Ok(PolicyKind::Mesh),
            "exclusive" => Ok(PolicyKind::Exclusive),
            "exclusive_cpu" => Ok(PolicyKind::ExclusivePlusCpu),
            other => Err(format!(
                "unknown policy `{other}` (expected mesh, exclusive or exclusive_cpu)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// At most one instance per node.
    pub disable_sharing: bool,
    /// Never place instances on CPU nodes.
    pub disable_cpu: bool,
    /// No preemption; route to the lowest-batch instance first.
    pub disable_defrag: bool,
    /// Admit on memory checks alone.
    pub disable_validation: bool,
}

/// Baseline scale-out thresholds per model size and hardware class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Thresholds(BTreeMap<(SizeClass, HardwareClass), u32>);

impl Default for Thresholds {
    fn default() -> Self {
        use HardwareClass::{Cpu, Gpu};
        use SizeClass::{B13, B3, B7};
        Thresholds(BTreeMap::from([
            ((B3, Cpu), 59),
            ((B7, Cpu), 15),
            ((B13, Cpu), 6),
            ((B3, Gpu), 160),
            ((B7, Gpu), 32),
            ((B13, Gpu), 16),
        ]))
    }
}

impl Thresholds {
    pub fn get(&self, size: SizeClass, class: HardwareClass) -> u32 {
        self.0[&(size, class)]
    }

    pub fn set(&mut self, size: SizeClass, class: HardwareClass, v: u32) {
        self.0.insert((size, class), v);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub kind: PolicyKind,
    pub ablations: Ablations,
    pub thresholds: Thresholds,
}

impl Policy {
    pub fn new(kind: PolicyKind) -> Self {
        Policy {
            kind,
            ablations: Ablations::default(),
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub class: HardwareClass,
    pub capacity: Bytes,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub class: HardwareClass,
    pub mem: NodeMemory,
    /// Instances placed here, ascending by id, including draining ones.
    pub instances: Vec<InstanceId>,
    pub in_flight: Option<InFlight>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    pub slo: SloSpec,
    pub cost: CostParams,
    pub watermark: Watermark,
    pub keep_alive: f64,
    /// Executed iteration time is scaled by a uniform factor in `[1-j, 1+j]`.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            slo: SloSpec::default(),
            cost: CostParams::default(),
            watermark: Watermark::from_percent(20.0),
            keep_alive: 1.0,
            jitter: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ev {
    RequestArrival(RequestId),
    IterationComplete(NodeId),
    ScaleOpComplete(NodeId, OpId),
    KeepAliveCheck(InstanceId),
    /// Start the node's first iteration; scheduled for preloaded nodes.
    Wake(NodeId),
}

impl EventPayload for Ev {
    fn kind(&self) -> &'static str {
        match self {
            Ev::RequestArrival(_) => "request_arrival",
            Ev::IterationComplete(_) => "iteration_complete",
            Ev::ScaleOpComplete(..) => "scale_op_complete",
            Ev::KeepAliveCheck(_) => "keep_alive_check",
            Ev::Wake(_) => "wake",
        }
    }

    fn subject(&self) -> u64 {
        match *self {
            Ev::RequestArrival(r) => r.0,
            Ev::IterationComplete(n) => n.0 as u64,
            Ev::ScaleOpComplete(_, op) => op.0,
            Ev::KeepAliveCheck(i) => i.0,
            Ev::Wake(n) => n.0 as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteOutcome {
    AdmittedTo(InstanceId),
    Preempted(InstanceId),
    ColdStartOn(NodeId, InstanceId),
    Queued,
    Dropped,
}

/// Request state frozen for an external replay.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapRequest {
    pub id: RequestId,
    pub input: u32,
    pub generated: u32,
    pub true_output: u32,
    pub needs_prefill: bool,
    pub arrival: f64,
    pub ttft_slo: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapInstance {
    pub id: InstanceId,
    pub model: ModelId,
    /// Earliest time the instance may compute; infinite if unknown.
    pub ready_at: f64,
    pub requests: Vec<SnapRequest>,
}

/// A node right after an admission commits.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSnapshot {
    pub time: f64,
    pub node: NodeId,
    pub class: HardwareClass,
    pub admitted: RequestId,
    pub instances: Vec<SnapInstance>,
    /// `(instance, ends_at, is_prefill, members)` of the running iteration.
    pub in_flight: Option<(InstanceId, f64, bool, Vec<RequestId>)>,
}

struct Admission {
    instance: InstanceId,
    request: RequestId,
    kv_target: Option<Bytes>,
}

pub struct World {
    pub nodes: Vec<Node>,
    pub instances: BTreeMap<InstanceId, Instance>,
    pub requests: Vec<Request>,
    pub models: ModelRegistry,
    pub perf: PerfCatalog,
    pub params: SimParams,
    pub policy: Policy,
    pub metrics: MetricsSink,
    /// Filled when `capture_snapshots` is set.
    pub snapshots: Vec<NodeSnapshot>,
    pub capture_snapshots: bool,
    queues: BTreeMap<ModelId, VecDeque<RequestId>>,
    next_instance: u64,
    next_op: u64,
    rng: ChaCha8Rng,
}

impl World {
    pub fn new(
        nodes: &[NodeSpec],
        models: ModelRegistry,
        perf: PerfCatalog,
        params: SimParams,
        policy: Policy,
        requests: Vec<Request>,
    ) -> Self {
        let nodes: Vec<Node> = nodes
            .iter()
            .enumerate()
            .map(|(i, s)| Node {
                id: NodeId(i as u32),
                class: s.class,
                mem: NodeMemory::new(s.capacity),
                instances: Vec::new(),
                in_flight: None,
            })
            .collect();
        let metrics = MetricsSink::new(nodes.iter().map(|n| n.class).collect());
        World {
            nodes,
            instances: BTreeMap::new(),
            requests,
            models,
            perf,
            params,
            policy,
            metrics,
            snapshots: Vec::new(),
            capture_snapshots: false,
            queues: BTreeMap::new(),
            next_instance: 0,
            next_op: 0,
            rng: ChaCha8Rng::seed_from_u64(params.seed ^ 0x6a09_e667_f3bc_c908),
        }
    }

    pub fn ctx(&self) -> ComputeCtx<'_> {
        ComputeCtx {
            models: &self.models,
            perf: &self.perf,
            slo: &self.params.slo,
            cost: &self.params.cost,
        }
    }

    pub fn node_view(&self, node: NodeId, now: SimTime) -> NodeView<'_> {
        let n = &self.nodes[node.0 as usize];
        NodeView {
            class: n.class,
            now,
            instances: n.instances.iter().map(|i| &self.instances[i]).collect(),
            requests: &self.requests,
            in_flight: n.in_flight.as_ref(),
        }
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0 as usize]
    }

    fn node_mut(&mut self, id: NodeId) -> &mut Node {
        &mut self.nodes[id.0 as usize]
    }

    pub(crate) fn lengths(&self, batch: &[RequestId]) -> Vec<(u32, u32)> {
        batch
            .iter()
            .map(|r| {
                let r = &self.requests[r.0 as usize];
                (r.input_len, r.generated())
            })
            .collect()
    }

    /// Hardware classes the policy may use, in routing order.
    pub(crate) fn classes(&self) -> Vec<HardwareClass> {
        let mut v = Vec::new();
        if !(self.policy.kind == PolicyKind::Exclusive
            || (self.policy.kind == PolicyKind::Mesh && self.policy.ablations.disable_cpu))
        {
            v.push(HardwareClass::Cpu);
        }
        v.push(HardwareClass::Gpu);
        v
    }

    /// Live instances of `model` on nodes of `class` in routing order.
    pub fn candidate_instances(&self, model: ModelId, class: HardwareClass) -> Vec<InstanceId> {
        let cands: Vec<&Instance> = self
            .instances
            .values()
            .filter(|i| i.model == model && i.is_live() && self.node(i.node).class == class)
            .collect();
        if self.policy.ablations.disable_defrag {
            defrag::spread_order(&cands)
        } else {
            defrag::pick_instance(&cands)
        }
    }

    pub fn op_latency(&self, kind: OpKind, model: ModelId, from: Bytes, to: Bytes) -> f64 {
        let cost = &self.params.cost;
        match kind {
            OpKind::KvUp | OpKind::KvDown => {
                cost.scale_latency(from, to).expect("non-trivial scale op")
            }
            OpKind::ModelLoad => {
                cost.cold_start_time(self.models.get(model).param_bytes) + cost.latency_floor
            }
            OpKind::ModelUnload => cost.unload_latency,
        }
    }

    fn start_op(
        &mut self,
        q: &mut EventQueue<Ev>,
        node: NodeId,
        inst: InstanceId,
        kind: OpKind,
        from: Bytes,
        to: Bytes,
    ) -> bool {
        let id = OpId(self.next_op);
        let model = self.instances[&inst].model;
        let n = &mut self.nodes[node.0 as usize];
        if n.mem.issue(ScaleOp::new(id, inst, kind, from, to)) == IssueOutcome::Denied {
            return false;
        }
        self.next_op += 1;
        let c = &mut self.metrics.counters;
        match kind {
            OpKind::KvUp => c.kv_scale_ups += 1,
            OpKind::KvDown => c.kv_scale_downs += 1,
            OpKind::ModelLoad => c.cold_starts += 1,
            OpKind::ModelUnload => c.unloads += 1,
        }
        let blocked = match n.mem.dispatch(id) {
            Dispatch::Executing => {
                let lat = self.op_latency(kind, model, from, to);
                q.schedule_in(lat, Ev::ScaleOpComplete(node, id));
                q.now().secs() + lat
            }
            Dispatch::Reserved => {
                self.metrics.counters.reserved_ops += 1;
                f64::INFINITY
            }
        };
        let i = self.instances.get_mut(&inst).unwrap();
        i.pending_op = Some(id);
        i.blocked_until = Some(blocked);
        true
    }

    fn snapshot(&mut self, node: NodeId, admitted: RequestId, now: SimTime) {
        if !self.capture_snapshots {
            return;
        }
        let n = self.node(node);
        let instances = n
            .instances
            .iter()
            .map(|id| &self.instances[id])
            .filter(|i| i.is_live())
            .map(|i| SnapInstance {
                id: i.id,
                model: i.model,
                ready_at: i.blocked_until.unwrap_or(now.secs()).max(now.secs()),
                requests: i
                    .batch
                    .iter()
                    .map(|r| {
                        let r = &self.requests[r.0 as usize];
                        SnapRequest {
                            id: r.id,
                            input: r.input_len,
                            generated: r.generated(),
                            true_output: r.true_output_len,
                            needs_prefill: r.needs_prefill,
                            arrival: r.arrival.secs(),
                            ttft_slo: r.ttft_slo,
                        }
                    })
                    .collect(),
            })
            .collect();
        let in_flight = n.in_flight.as_ref().map(|f| {
            (
                f.plan.instance,
                f.ends_at.secs(),
                matches!(f.plan.kind, PlanKind::Prefill(_)),
                f.plan.members.clone(),
            )
        });
        self.snapshots.push(NodeSnapshot {
            time: now.secs(),
            node,
            class: n.class,
            admitted,
            instances,
            in_flight,
        });
    }

    // ----- Mesh routing -----

    /// Route a new, evicted or displaced request.
    pub fn route_request(&mut self, q: &mut EventQueue<Ev>, rid: RequestId) -> RouteOutcome {
        self.route_excluding(q, rid, None)
    }

    fn route_excluding(
        &mut self,
        q: &mut EventQueue<Ev>,
        rid: RequestId,
        exclude: Option<InstanceId>,
    ) -> RouteOutcome {
        if self.policy.kind != PolicyKind::Mesh {
            return self.route_baseline(q, rid);
        }
        let now = q.now();
        let model = self.requests[rid.0 as usize].model;
        for class in self.classes() {
            let order = self.candidate_instances(model, class);
            for &iid in order.iter().filter(|&&i| Some(i) != exclude) {
                if let Some(adm) = self.try_instance(iid, rid, now) {
                    self.commit_admission(q, adm);
                    return RouteOutcome::AdmittedTo(iid);
                }
            }
            if !self.policy.ablations.disable_defrag {
                for &iid in order.iter().filter(|&&i| Some(i) != exclude) {
                    if let Some(plan) = defrag::plan_preemption(self, iid, rid, now) {
                        self.commit_preemption(q, plan);
                        return RouteOutcome::Preempted(iid);
                    }
                }
            }
            if let Some((node, kv)) = self.try_cold_start(class, model, rid, now) {
                let iid = self.commit_cold_start(q, node, model, kv, rid);
                return RouteOutcome::ColdStartOn(node, iid);
            }
        }
        self.metrics.counters.rejected_validations += 1;
        self.requests[rid.0 as usize].state = RequestState::Dropped;
        RouteOutcome::Dropped
    }

    fn try_instance(&self, iid: InstanceId, rid: RequestId, now: SimTime) -> Option<Admission> {
        let inst = &self.instances[&iid];
        if !inst.is_live() {
            return None;
        }
        let node = self.node(inst.node);
        let spec = self.models.get(inst.model);
        let r = &self.requests[rid.0 as usize];
        let mut running = self.lengths(&inst.batch);
        running.push((r.input_len, r.generated()));
        if running.len() as u32 > self.ctx().table(inst.model, node.class).b_max() {
            return None;
        }
        let check = shadow_mem_check(
            &node.mem,
            inst.kv_alloc,
            running,
            spec,
            self.params.watermark,
        );
        let kv_target = match check {
            MemCheck::Fail => return None,
            other => other.target(),
        };
        let mut ready_at = None;
        if let Some(t) = kv_target {
            if inst.pending_op.is_some() || !node.mem.would_execute(t - inst.kv_alloc) {
                return None;
            }
            ready_at =
                Some(now.secs() + self.op_latency(OpKind::KvUp, inst.model, inst.kv_alloc, t));
        }
        if !self.policy.ablations.disable_validation {
            let view = self.node_view(inst.node, now);
            if !compute::shadow_validate(&view, iid, r, &self.ctx(), ready_at).accepted() {
                return None;
            }
        }
        Some(Admission {
            instance: iid,
            request: rid,
            kv_target,
        })
    }

    fn join(&mut self, iid: InstanceId, rid: RequestId) {
        let inst = self.instances.get_mut(&iid).unwrap();
        inst.batch.push(rid);
        if inst.state == InstanceState::Idle {
            inst.state = InstanceState::Active;
        }
        inst.idle_since = None;
        let r = &mut self.requests[rid.0 as usize];
        if r.state == RequestState::Evicted {
            r.needs_prefill = true;
        }
        r.state = RequestState::Pending;
    }

    fn commit_admission(&mut self, q: &mut EventQueue<Ev>, adm: Admission) {
        let node = self.instances[&adm.instance].node;
        if let Some(t) = adm.kv_target {
            let from = self.instances[&adm.instance].kv_alloc;
            let ok = self.start_op(q, node, adm.instance, OpKind::KvUp, from, t);
            debug_assert!(ok, "admission grow was checked against the budget");
            self.instances.get_mut(&adm.instance).unwrap().kv_alloc = t;
        }
        self.join(adm.instance, adm.request);
        self.snapshot(node, adm.request, q.now());
        self.kick(q, node);
    }

    /// Initial KV size for a fresh instance serving `lens`, if it fits.
    fn cold_start_kv(&self, node: &Node, model: ModelId, lens: (u32, u32)) -> Option<Bytes> {
        let spec = self.models.get(model);
        let required = m_require([lens], spec);
        let recommended = self.params.watermark.recommend(required);
        [recommended, required].into_iter().find(|&kv| {
            node.mem.budget_fits(spec.param_bytes + kv)
                && node.mem.would_execute(spec.param_bytes + kv)
        })
    }

    fn try_cold_start(
        &self,
        class: HardwareClass,
        model: ModelId,
        rid: RequestId,
        now: SimTime,
    ) -> Option<(NodeId, Bytes)> {
        let mut nodes: Vec<&Node> = self.nodes.iter().filter(|n| n.class == class).collect();
        nodes.sort_by(|a, b| {
            b.mem
                .free_budget()
                .cmp(&a.mem.free_budget())
                .then(a.id.cmp(&b.id))
        });
        let r = &self.requests[rid.0 as usize];
        for node in nodes {
            if self.policy.ablations.disable_sharing && !node.instances.is_empty() {
                continue;
            }
            let Some(kv) = self.cold_start_kv(node, model, (r.input_len, r.generated())) else {
                continue;
            };
            if !self.policy.ablations.disable_validation {
                let spec = self.models.get(model);
                let ready = now.secs()
                    + self.op_latency(OpKind::ModelLoad, model, 0, spec.param_bytes + kv);
                let ctx = self.ctx();
                let mut vn = VirtualNode::capture(&self.node_view(node.id, now), &ctx);
                let vid = InstanceId(self.next_instance);
                vn.add_instance(vid, model, ready, &ctx);
                if !vn
                    .validate_admission(vid, &VirtualRequest::from_request(r), &ctx)
                    .accepted()
                {
                    continue;
                }
            }
            return Some((node.id, kv));
        }
        None
    }

    fn new_instance(&mut self, node: NodeId, model: ModelId, kv: Bytes) -> InstanceId {
        let id = InstanceId(self.next_instance);
        self.next_instance += 1;
        self.instances
            .insert(id, Instance::loading(id, model, node, kv));
        self.node_mut(node).instances.push(id);
        id
    }

    fn commit_cold_start(
        &mut self,
        q: &mut EventQueue<Ev>,
        node: NodeId,
        model: ModelId,
        kv: Bytes,
        rid: RequestId,
    ) -> InstanceId {
        let iid = self.new_instance(node, model, kv);
        self.metrics.set_in_use(node, true, q.now().secs());
        let total = self.models.get(model).param_bytes + kv;
        let ok = self.start_op(q, node, iid, OpKind::ModelLoad, 0, total);
        debug_assert!(ok, "cold start was checked against the budget");
        self.join(iid, rid);
        self.snapshot(node, rid, q.now());
        iid
    }

    fn commit_preemption(&mut self, q: &mut EventQueue<Ev>, plan: PreemptionPlan) {
        self.metrics.counters.preemptions += 1;
        for &v in &plan.victims {
            let node = plan.node;
            let footprint = self.node(node).mem.target_of(v);
            let inst = self.instances.get_mut(&v).unwrap();
            inst.state = InstanceState::Draining;
            let displaced = std::mem::take(&mut inst.batch);
            for r in displaced {
                let r = &mut self.requests[r.0 as usize];
                r.state = RequestState::Evicted;
                r.evictions += 1;
                self.metrics.counters.evictions += 1;
            }
            let ok = self.start_op(q, node, v, OpKind::ModelUnload, footprint, 0);
            debug_assert!(ok);
        }
        for d in &plan.displaced {
            let dest_node = self.instances[&d.target].node;
            if let Some(t) = d.kv_target {
                let from = self.instances[&d.target].kv_alloc;
                let ok = self.start_op(q, dest_node, d.target, OpKind::KvUp, from, t);
                debug_assert!(ok, "displacement grow was planned against the budget");
                self.instances.get_mut(&d.target).unwrap().kv_alloc = t;
            }
            self.join(d.target, d.request);
            self.kick(q, dest_node);
        }
        let from = self.instances[&plan.grower].kv_alloc;
        if plan.grower_kv > from {
            let ok = self.start_op(
                q,
                plan.node,
                plan.grower,
                OpKind::KvUp,
                from,
                plan.grower_kv,
            );
            debug_assert!(ok, "grower grow was planned against the budget");
            self.instances.get_mut(&plan.grower).unwrap().kv_alloc = plan.grower_kv;
        }
        self.join(plan.grower, plan.request);
        self.snapshot(plan.node, plan.request, q.now());
        self.kick(q, plan.node);
    }

    // ----- Baselines -----

    fn route_baseline(&mut self, q: &mut EventQueue<Ev>, rid: RequestId) -> RouteOutcome {
        let model = self.requests[rid.0 as usize].model;
        let queued = self.queues.get(&model).is_some_and(|qq| !qq.is_empty());
        if !queued {
            if let Some(out) = self.place_baseline(q, rid) {
                return out;
            }
        }
        self.queues.entry(model).or_default().push_back(rid);
        RouteOutcome::Queued
    }

    fn place_baseline(&mut self, q: &mut EventQueue<Ev>, rid: RequestId) -> Option<RouteOutcome> {
        let model = self.requests[rid.0 as usize].model;
        let size = self.models.get(model).size;
        let classes = self.classes();
        for &class in &classes {
            let limit = self.policy.thresholds.get(size, class) as usize;
            let best = self
                .instances
                .values()
                .filter(|i| i.model == model && i.is_live() && self.node(i.node).class == class)
                .filter(|i| i.batch.len() < limit)
                .min_by_key(|i| (i.batch.len(), i.id))
                .map(|i| (i.id, i.node));
            if let Some((iid, node)) = best {
                self.join(iid, rid);
                self.kick(q, node);
                return Some(RouteOutcome::AdmittedTo(iid));
            }
        }
        for &class in &classes {
            let free = self
                .nodes
                .iter()
                .find(|n| n.class == class && n.instances.is_empty())
                .map(|n| (n.id, n.mem.capacity()));
            if let Some((node, cap)) = free {
                let param = self.models.get(model).param_bytes;
                if param >= cap {
                    continue;
                }
                let iid = self.new_instance(node, model, cap - param);
                self.metrics.set_in_use(node, true, q.now().secs());
                let ok = self.start_op(q, node, iid, OpKind::ModelLoad, 0, cap);
                debug_assert!(ok);
                self.join(iid, rid);
                return Some(RouteOutcome::ColdStartOn(node, iid));
            }
        }
        None
    }

    fn pump_queue(&mut self, q: &mut EventQueue<Ev>, model: ModelId) {
        let now = q.now().secs();
        loop {
            let Some(&head) = self.queues.get(&model).and_then(|qq| qq.front()) else {
                return;
            };
            let r = &self.requests[head.0 as usize];
            if now > r.arrival.secs() + r.ttft_slo + compute::DEADLINE_EPS {
                self.queues.get_mut(&model).unwrap().pop_front();
                self.requests[head.0 as usize].state = RequestState::Dropped;
                continue;
            }
            if self.place_baseline(q, head).is_none() {
                return;
            }
            self.queues.get_mut(&model).unwrap().pop_front();
        }
    }

    fn pump_all(&mut self, q: &mut EventQueue<Ev>) {
        let mut heads: Vec<(SimTime, ModelId)> = self
            .queues
            .iter()
            .filter_map(|(m, qq)| {
                qq.front()
                    .map(|r| (self.requests[r.0 as usize].arrival, *m))
            })
            .collect();
        heads.sort();
        for (_, m) in heads {
            self.pump_queue(q, m);
        }
    }

    /// Requests still waiting in baseline queues.
    pub fn queued(&self) -> usize {
        self.queues.values().map(|q| q.len()).sum()
    }

    // ----- Lifecycle -----

    /// Install an already-loaded instance of `model` on `node` serving
    /// `requests`, bypassing routing and cold start. For scripted scenarios;
    /// call before building the [`Simulation`], which then skips the
    /// arrivals of these requests.
    pub fn preload(&mut self, node: NodeId, model: ModelId, requests: &[RequestId]) -> InstanceId {
        assert!(!requests.is_empty(), "preloaded instances need requests");
        let spec = self.models.get(model);
        let kv = self
            .params
            .watermark
            .recommend(m_require(self.lengths(requests), spec));
        let total = spec.param_bytes + kv;
        let iid = self.new_instance(node, model, kv);
        let op = OpId(self.next_op);
        self.next_op += 1;
        let mem = &mut self.node_mut(node).mem;
        assert_eq!(
            mem.issue(ScaleOp::new(op, iid, OpKind::ModelLoad, 0, total)),
            IssueOutcome::Issued,
            "preloaded instance does not fit on {node}"
        );
        assert_eq!(mem.dispatch(op), Dispatch::Executing);
        mem.on_complete(op);
        self.metrics.set_in_use(node, true, 0.0);
        self.instances.get_mut(&iid).unwrap().state = InstanceState::Idle;
        for &r in requests {
            self.join(iid, r);
        }
        iid
    }

    /// Unload every idle instance whose keep-alive has expired.
    pub fn keep_alive_reap(&mut self, q: &mut EventQueue<Ev>) -> Vec<InstanceId> {
        let now = q.now().secs();
        let ka = self.params.keep_alive;
        let due: Vec<InstanceId> = self
            .instances
            .values()
            .filter(|i| {
                i.state == InstanceState::Idle
                    && i.pending_op.is_none()
                    && i.idle_since.is_some_and(|t| now - t.secs() >= ka - 1e-9)
            })
            .map(|i| i.id)
            .collect();
        for &iid in &due {
            let node = self.instances[&iid].node;
            let footprint = self.node(node).mem.target_of(iid);
            self.instances.get_mut(&iid).unwrap().state = InstanceState::Draining;
            let ok = self.start_op(q, node, iid, OpKind::ModelUnload, footprint, 0);
            debug_assert!(ok);
        }
        due
    }

    fn went_idle(&mut self, q: &mut EventQueue<Ev>, iid: InstanceId) {
        let inst = &self.instances[&iid];
        if inst.state != InstanceState::Idle {
            return;
        }
        let at = inst.idle_since.map_or(q.now().secs(), |t| t.secs()) + self.params.keep_alive;
        let at = at.max(q.now().secs());
        q.schedule(SimTime::from_secs(at), Ev::KeepAliveCheck(iid))
            .expect("keep-alive in the future");
    }

    /// Start the node's next iteration if it is free.
    fn kick(&mut self, q: &mut EventQueue<Ev>, node: NodeId) {
        if self.node(node).in_flight.is_some() {
            return;
        }
        let n = self.node(node);
        let plan = compute::select_next(
            n.instances.iter().map(|i| &self.instances[i]),
            &self.requests,
            &self.ctx(),
            n.class,
            q.now(),
        );
        let Some(plan) = plan else {
            return;
        };
        let j = self.params.jitter;
        let factor = if j > 0.0 {
            self.rng.random_range(1.0 - j..=1.0 + j)
        } else {
            1.0
        };
        let dur = plan.predicted_duration * factor;
        let ends_at = q.now() + dur;
        for &r in &plan.members {
            let r = &mut self.requests[r.0 as usize];
            if r.needs_prefill {
                r.state = RequestState::Prefilling;
            }
        }
        self.node_mut(node).in_flight = Some(InFlight { plan, ends_at });
        q.schedule(ends_at, Ev::IterationComplete(node))
            .expect("iteration ends in the future");
    }

    fn on_iteration_complete(&mut self, q: &mut EventQueue<Ev>, node: NodeId) {
        let now = q.now();
        let fl = self
            .node_mut(node)
            .in_flight
            .take()
            .expect("iteration in flight");
        let iid = fl.plan.instance;
        let inst = self
            .instances
            .get_mut(&iid)
            .expect("instance of running iteration");
        let out = compute::complete_iteration(inst, &mut self.requests, &fl.plan, now);
        if fl.plan.kind == PlanKind::Decode {
            self.metrics.record_decode(node, out.emissions.len() as u64);
        }
        let model = inst.model;
        for &c in &out.completed {
            let len = self.requests[c.0 as usize].true_output_len;
            self.models.get_mut(model).avg_output.record(len);
        }
        if self.policy.kind == PolicyKind::Mesh {
            self.maintain(q, iid);
        } else {
            self.pump_queue(q, model);
        }
        self.went_idle(q, iid);
        self.kick(q, node);
    }

    fn on_op_complete(&mut self, q: &mut EventQueue<Ev>, node: NodeId, op: OpId) {
        let now = q.now().secs();
        let done = self
            .node(node)
            .mem
            .op(op)
            .cloned()
            .expect("completed op is tracked");
        let started = self.node_mut(node).mem.on_complete(op);
        for s in started {
            let sop = self.node(node).mem.op(s).cloned().unwrap();
            let model = self.instances[&sop.instance].model;
            let lat = self.op_latency(sop.kind, model, sop.from, sop.to);
            self.instances.get_mut(&sop.instance).unwrap().blocked_until = Some(now + lat);
            q.schedule_in(lat, Ev::ScaleOpComplete(node, s));
        }
        let iid = done.instance;
        if done.kind == OpKind::ModelUnload {
            self.instances.remove(&iid);
            let n = self.node_mut(node);
            n.instances.retain(|&i| i != iid);
            if n.instances.is_empty() {
                self.metrics.set_in_use(node, false, now);
            }
            if self.policy.kind != PolicyKind::Mesh {
                self.pump_all(q);
            }
            self.kick(q, node);
            return;
        }
        let inst = self.instances.get_mut(&iid).unwrap();
        inst.pending_op = None;
        inst.blocked_until = None;
        if done.kind == OpKind::ModelLoad {
            if inst.batch.is_empty() {
                inst.state = InstanceState::Idle;
                inst.idle_since = Some(SimTime::from_secs(now));
            } else {
                inst.state = InstanceState::Active;
            }
        }
        if self.policy.kind == PolicyKind::Mesh {
            self.maintain(q, iid);
        }
        self.went_idle(q, iid);
        self.kick(q, node);
    }

    /// Keep an instance's KV-cache matched to its batch: handle underestimates
    /// and apply watermark scaling.
    fn maintain(&mut self, q: &mut EventQueue<Ev>, iid: InstanceId) {
        let now = q.now();
        let w = self.params.watermark;
        loop {
            let Some(inst) = self.instances.get(&iid) else {
                return;
            };
            if inst.pending_op.is_some()
                || !matches!(inst.state, InstanceState::Idle | InstanceState::Active)
            {
                return;
            }
            let node = inst.node;
            let spec = self.models.get(inst.model);
            let need: Bytes = spec.kv_bytes_per_token
                * inst
                    .batch
                    .iter()
                    .map(|r| self.requests[r.0 as usize].context_len() as Bytes + 1)
                    .sum::<Bytes>();
            if need > inst.kv_alloc {
                let running: Vec<(RequestId, u32, u32, f64)> = inst
                    .batch
                    .iter()
                    .map(|&r| {
                        let r = &self.requests[r.0 as usize];
                        (
                            r.id,
                            r.input_len,
                            r.generated(),
                            compute::headroom(r, &self.params.slo, now),
                        )
                    })
                    .collect();
                match handle_underestimate(&self.node(node).mem, inst.kv_alloc, &running, spec, w) {
                    Underestimate::Rescale(t) => {
                        let from = inst.kv_alloc;
                        if self.start_op(q, node, iid, OpKind::KvUp, from, t) {
                            self.instances.get_mut(&iid).unwrap().kv_alloc = t;
                        }
                        return;
                    }
                    Underestimate::Evict(victim) => {
                        let inst = self.instances.get_mut(&iid).unwrap();
                        inst.batch.retain(|&r| r != victim);
                        if inst.batch.is_empty() {
                            inst.state = InstanceState::Idle;
                            inst.idle_since = Some(now);
                        }
                        let r = &mut self.requests[victim.0 as usize];
                        r.state = RequestState::Evicted;
                        r.needs_prefill = true;
                        r.evictions += 1;
                        self.metrics.counters.evictions += 1;
                        self.route_excluding(q, victim, Some(iid));
                        continue;
                    }
                }
            }
            let required = m_require(self.lengths(&inst.batch), spec);
            let (from, model) = (inst.kv_alloc, inst.model);
            let (kind, to) = match watermark_decide(from, required, w) {
                ScaleDecision::Hold => return,
                ScaleDecision::ScaleUpTo(t) => {
                    let mem = &self.node(node).mem;
                    if !(mem.budget_fits(t - from) && mem.would_execute(t - from)) {
                        return;
                    }
                    (OpKind::KvUp, t)
                }
                ScaleDecision::ScaleDownTo(t) => (OpKind::KvDown, t),
            };
            if !self.policy.ablations.disable_validation {
                let until = now.secs() + self.op_latency(kind, model, from, to);
                let ctx = self.ctx();
                let vn = VirtualNode::capture(&self.node_view(node, now), &ctx);
                if !vn.validate_blocking(iid, until, &ctx) {
                    return;
                }
            }
            if self.start_op(q, node, iid, kind, from, to) {
                self.instances.get_mut(&iid).unwrap().kv_alloc = to;
            }
            return;
        }
    }

    /// Close out requests that never finished.
    fn finish(&mut self) {
        for qq in self.queues.values_mut() {
            for r in qq.drain(..) {
                self.requests[r.0 as usize].state = RequestState::Dropped;
            }
        }
    }
}

impl Handler<Ev> for World {
    fn handle(&mut self, event: Event<Ev>, q: &mut EventQueue<Ev>) {
        match event.payload {
            Ev::RequestArrival(r) => {
                let out = self.route_request(q, r);
                log::trace!("t={} {r} -> {out:?}", event.time);
            }
            Ev::IterationComplete(n) => self.on_iteration_complete(q, n),
            Ev::ScaleOpComplete(n, op) => self.on_op_complete(q, n, op),
            Ev::KeepAliveCheck(_) => {
                self.keep_alive_reap(q);
            }
            Ev::Wake(n) => self.kick(q, n),
        }
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub summary: SummaryReport,
    pub records: Vec<RequestRecord>,
    pub cdf: Vec<(u32, f64)>,
    pub events_jsonl: Option<String>,
}

pub struct Simulation {
    engine: Engine<Ev>,
    world: World,
    end: SimTime,
    record_events: bool,
}

impl Simulation {
    /// Schedule every request's arrival; the run stops at `end` seconds.
    pub fn new(world: World, end: f64, record_events: bool) -> Self {
        let mut engine = Engine::new(record_events);
        let placed: BTreeSet<RequestId> = world
            .instances
            .values()
            .flat_map(|i| i.batch.iter().copied())
            .collect();
        for n in &world.nodes {
            if !n.instances.is_empty() {
                engine
                    .schedule(SimTime::ZERO, Ev::Wake(n.id))
                    .expect("time zero");
            }
        }
        for r in world.requests.iter().filter(|r| !placed.contains(&r.id)) {
            engine
                .schedule(r.arrival, Ev::RequestArrival(r.id))
                .expect("arrivals are non-negative");
        }
        Simulation {
            engine,
            world,
            end: SimTime::from_secs(end),
            record_events,
        }
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut World {
        &mut self.world
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    /// Advance to `t` (capped at the end of the run).
    pub fn run_until(&mut self, t: f64) {
        let t = SimTime::from_secs(t.min(self.end.secs()));
        self.engine.run_until(&mut self.world, t);
    }

    pub fn finish(mut self) -> (SimResult, World) {
        let report = self.engine.run_until(&mut self.world, self.end);
        self.world.finish();
        let slo = self.world.params.slo;
        let records: Vec<RequestRecord> = self
            .world
            .requests
            .iter()
            .map(|r| metrics::record(r, &slo))
            .collect();
        let summary = metrics::finalize(
            self.world.policy.kind.as_str(),
            &records,
            &self.world.metrics,
            self.end.secs(),
            report.events_processed,
        );
        let cdf = metrics::ttft_cdf(&records);
        let events_jsonl = self.record_events.then(|| self.engine.log_jsonl());
        (
            SimResult {
                summary,
                records,
                cdf,
                events_jsonl,
            },
            self.world,
        )
    }
}
