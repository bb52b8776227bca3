//! KV-cache demand estimation, watermark scaling and node-level orchestration
//! of asynchronous memory operations.
//!
//! A node keeps two views of its memory. The optimistic budget applies every
//! operation's post-completion size the moment it is issued, so admission
//! decisions see memory that is about to be released. The pessimistic view
//! charges each in-flight operation at `max(from, to)` and decides whether an
//! issued grow may start now or must wait in the reservation station until
//! enough shrinks have completed.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::perfmodel::SizeClass;
use crate::types::{Bytes, InstanceId, ModelId, OpId, RequestId};

/// Running mean of completed output lengths for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputEstimator {
    window: usize,
    recent: VecDeque<u32>,
    sum: u64,
    seed_mean: f64,
}

impl OutputEstimator {
    /// `window == 0` freezes the estimate at `seed_mean`.
    pub fn new(seed_mean: f64, window: usize) -> Self {
        OutputEstimator {
            window,
            recent: VecDeque::new(),
            sum: 0,
            seed_mean: seed_mean.max(1.0),
        }
    }

    pub fn record(&mut self, output_len: u32) {
        if self.window == 0 {
            return;
        }
        self.recent.push_back(output_len);
        self.sum += output_len as u64;
        if self.recent.len() > self.window {
            self.sum -= self.recent.pop_front().unwrap() as u64;
        }
    }

    pub fn mean(&self) -> f64 {
        if self.recent.is_empty() {
            self.seed_mean
        } else {
            self.sum as f64 / self.recent.len() as f64
        }
    }

    /// Ō in whole tokens.
    pub fn assumed(&self) -> u32 {
        (self.mean().ceil() as u32).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub id: ModelId,
    pub name: String,
    /// Family whose perf tables this model uses.
    pub family: String,
    pub size: SizeClass,
    pub param_bytes: Bytes,
    pub kv_bytes_per_token: Bytes,
    pub max_seq_len: u32,
    /// L_min; defaults to `max_seq_len`.
    pub min_total_len: u32,
    pub avg_output: OutputEstimator,
}

impl ModelSpec {
    /// Smallest KV footprint any live instance holds: `C · L_min`.
    pub fn min_kv(&self) -> Bytes {
        self.kv_bytes_per_token * self.min_total_len as Bytes
    }
}

#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    models: Vec<ModelSpec>,
    by_name: BTreeMap<String, ModelId>,
}

impl ModelRegistry {
    pub fn insert(&mut self, mut spec: ModelSpec) -> ModelId {
        let id = ModelId(self.models.len() as u32);
        spec.id = id;
        self.by_name.insert(spec.name.clone(), id);
        self.models.push(spec);
        id
    }

    pub fn get(&self, id: ModelId) -> &ModelSpec {
        &self.models[id.0 as usize]
    }

    pub fn get_mut(&mut self, id: ModelId) -> &mut ModelSpec {
        &mut self.models[id.0 as usize]
    }

    pub fn lookup(&self, name: &str) -> Option<ModelId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModelSpec> {
        self.models.iter()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// KV bytes an instance needs for its running requests, given as
/// `(input_len, generated)` pairs:
/// `C · max(Σ (I_r + max(O_r, Ō)), L_min)`.
pub fn m_require<I>(running: I, model: &ModelSpec) -> Bytes
where
    I: IntoIterator<Item = (u32, u32)>,
{
    let assumed = model.avg_output.assumed() as u64;
    let total: u64 = running
        .into_iter()
        .map(|(input, generated)| input as u64 + (generated as u64).max(assumed))
        .sum();
    model.kv_bytes_per_token * total.max(model.min_total_len as u64)
}

/// Watermark `w`, stored in basis points so byte arithmetic stays exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Watermark(u32);

impl Watermark {
    pub fn from_percent(pct: f64) -> Self {
        assert!(pct >= 0.0 && pct.is_finite(), "watermark must be >= 0");
        Watermark((pct * 100.0).round() as u32)
    }

    pub fn percent(self) -> f64 {
        self.0 as f64 / 100.0
    }

    /// `ceil(m · (1 + w%))`.
    pub fn recommend(self, m: Bytes) -> Bytes {
        let num = m as u128 * (10_000 + self.0 as u128);
        num.div_ceil(10_000) as Bytes
    }

    /// True when `m · (1 + w%) < other`.
    fn inflated_below(self, m: Bytes, other: Bytes) -> bool {
        (m as u128) * (10_000 + self.0 as u128) < other as u128 * 10_000
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleDecision {
    ScaleUpTo(Bytes),
    ScaleDownTo(Bytes),
    Hold,
}

/// Early scale-up, lazy scale-down.
pub fn watermark_decide(m_cur: Bytes, m_require: Bytes, w: Watermark) -> ScaleDecision {
    let recommend = w.recommend(m_require);
    if m_cur < m_require {
        ScaleDecision::ScaleUpTo(recommend)
    } else if w.inflated_below(recommend, m_cur) {
        ScaleDecision::ScaleDownTo(recommend)
    } else {
        ScaleDecision::Hold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OpKind {
    KvUp,
    KvDown,
    ModelLoad,
    ModelUnload,
}

impl OpKind {
    pub fn grows(self) -> bool {
        matches!(self, OpKind::KvUp | OpKind::ModelLoad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OpState {
    Issued,
    Reserved,
    Executing,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleOp {
    pub id: OpId,
    pub instance: InstanceId,
    pub kind: OpKind,
    pub from: Bytes,
    pub to: Bytes,
    pub state: OpState,
}

impl ScaleOp {
    pub fn new(id: OpId, instance: InstanceId, kind: OpKind, from: Bytes, to: Bytes) -> Self {
        ScaleOp {
            id,
            instance,
            kind,
            from,
            to,
            state: OpState::Issued,
        }
    }

    fn well_formed(&self) -> bool {
        match self.kind {
            OpKind::KvUp => self.to > self.from,
            OpKind::KvDown => self.to < self.from,
            OpKind::ModelLoad => self.from == 0 && self.to > 0,
            OpKind::ModelUnload => self.to == 0 && self.from > 0,
        }
    }

    fn delta(&self) -> Bytes {
        self.from.abs_diff(self.to)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IssueOutcome {
    Issued,
    Denied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dispatch {
    Executing,
    Reserved,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Footprint {
    /// Bytes the instance really holds once no op is in flight.
    actual: Bytes,
    /// Size after every issued op completes.
    target: Bytes,
}

/// Memory orchestrator for one node. Footprints are whole-instance sizes
/// (weights plus KV-cache); KV ops move the instance size by their delta.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMemory {
    capacity: Bytes,
    budget: Bytes,
    allocated: Bytes,
    footprints: BTreeMap<InstanceId, Footprint>,
    ops: BTreeMap<OpId, ScaleOp>,
    station: VecDeque<OpId>,
}

impl NodeMemory {
    pub fn new(capacity: Bytes) -> Self {
        NodeMemory {
            capacity,
            budget: 0,
            allocated: 0,
            footprints: BTreeMap::new(),
            ops: BTreeMap::new(),
            station: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> Bytes {
        self.capacity
    }

    pub fn optimistic_budget(&self) -> Bytes {
        self.budget
    }

    /// Bytes charged under pessimistic tracking: settled sizes plus in-flight
    /// grows at their new size. Equals what is physically allocated.
    pub fn pessimistic_view(&self) -> Bytes {
        self.allocated
    }

    pub fn free_budget(&self) -> Bytes {
        self.capacity - self.budget
    }

    /// Could a grow of `delta` bytes be issued right now?
    pub fn budget_fits(&self, delta: Bytes) -> bool {
        self.budget + delta <= self.capacity
    }

    /// Would a grow of `delta` bytes start executing immediately?
    pub fn would_execute(&self, delta: Bytes) -> bool {
        self.allocated + delta <= self.capacity
    }

    pub fn op(&self, id: OpId) -> Option<&ScaleOp> {
        self.ops.get(&id)
    }

    pub fn reserved(&self) -> impl Iterator<Item = &ScaleOp> {
        self.station.iter().map(|id| &self.ops[id])
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &ScaleOp> {
        self.ops.values()
    }

    pub fn target_of(&self, instance: InstanceId) -> Bytes {
        self.footprints.get(&instance).map_or(0, |f| f.target)
    }

    pub fn actual_of(&self, instance: InstanceId) -> Bytes {
        self.footprints.get(&instance).map_or(0, |f| f.actual)
    }

    pub fn has_pending(&self, instance: InstanceId) -> bool {
        self.ops.values().any(|op| op.instance == instance)
    }

    /// Apply an op to the optimistic budget. Shrinks always succeed; grows
    /// succeed only if the budget can absorb them.
    pub fn issue(&mut self, mut op: ScaleOp) -> IssueOutcome {
        assert!(op.well_formed(), "malformed scale op {op:?}");
        assert!(!self.ops.contains_key(&op.id), "duplicate op id {}", op.id);
        let fp = self
            .footprints
            .get(&op.instance)
            .copied()
            .unwrap_or_default();
        let delta = op.delta();
        if op.kind.grows() {
            if !self.budget_fits(delta) {
                return IssueOutcome::Denied;
            }
            self.budget += delta;
        } else {
            self.budget -= delta;
        }
        let target = if op.kind.grows() {
            fp.target + delta
        } else {
            fp.target - delta
        };
        self.footprints.insert(
            op.instance,
            Footprint {
                actual: fp.actual,
                target,
            },
        );
        op.state = OpState::Issued;
        self.ops.insert(op.id, op);
        IssueOutcome::Issued
    }

    /// Start an issued op or park it in the reservation station.
    pub fn dispatch(&mut self, id: OpId) -> Dispatch {
        let op = self.ops.get_mut(&id).expect("dispatch of unknown op");
        assert_eq!(op.state, OpState::Issued, "op {id} dispatched twice");
        if !op.kind.grows() {
            op.state = OpState::Executing;
            return Dispatch::Executing;
        }
        let delta = op.delta();
        if self.allocated + delta <= self.capacity {
            self.allocated += delta;
            op.state = OpState::Executing;
            Dispatch::Executing
        } else {
            op.state = OpState::Reserved;
            self.station.push_back(id);
            Dispatch::Reserved
        }
    }

    /// Retire an executing op and start every reserved op that now fits,
    /// scanning the station front to back.
    pub fn on_complete(&mut self, id: OpId) -> Vec<OpId> {
        let mut op = self.ops.remove(&id).expect("completion of unknown op");
        assert_eq!(
            op.state,
            OpState::Executing,
            "op {id} completed without executing"
        );
        op.state = OpState::Done;
        let delta = op.delta();
        let fp = self
            .footprints
            .get_mut(&op.instance)
            .expect("footprint exists");
        if op.kind.grows() {
            fp.actual += delta;
        } else {
            fp.actual -= delta;
            self.allocated -= delta;
        }
        if op.kind == OpKind::ModelUnload && fp.target == 0 && !self.has_pending(op.instance) {
            self.footprints.remove(&op.instance);
        }

        let mut started = Vec::new();
        let mut i = 0;
        while i < self.station.len() {
            let rid = self.station[i];
            let d = self.ops[&rid].delta();
            if self.allocated + d <= self.capacity {
                self.allocated += d;
                self.ops.get_mut(&rid).unwrap().state = OpState::Executing;
                self.station.remove(i);
                started.push(rid);
            } else {
                i += 1;
            }
        }
        started
    }

    /// Internal consistency; used by tests and debug assertions.
    pub fn check_invariants(&self) -> Result<(), String> {
        let targets: Bytes = self.footprints.values().map(|f| f.target).sum();
        if targets != self.budget {
            return Err(format!(
                "budget {} != sum of targets {targets}",
                self.budget
            ));
        }
        let executing_up: Bytes = self
            .ops
            .values()
            .filter(|o| o.state == OpState::Executing && o.kind.grows())
            .map(|o| o.delta())
            .sum();
        let actual: Bytes = self.footprints.values().map(|f| f.actual).sum();
        if actual + executing_up != self.allocated {
            return Err(format!(
                "allocated {} != actual {actual} + executing grows {executing_up}",
                self.allocated
            ));
        }
        if self.allocated > self.capacity {
            return Err(format!(
                "allocated {} exceeds capacity {}",
                self.allocated, self.capacity
            ));
        }
        if self.budget > self.capacity {
            return Err(format!(
                "budget {} exceeds capacity {}",
                self.budget, self.capacity
            ));
        }
        Ok(())
    }
}

/// Result of a side-effect-free memory check for admitting one more request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemCheck {
    /// `target` is the new KV size; `None` when the current size suffices.
    Ok {
        target: Option<Bytes>,
    },
    /// Only the bare requirement fits.
    OkCompromised {
        target: Bytes,
    },
    Fail,
}

impl MemCheck {
    pub fn target(&self) -> Option<Bytes> {
        match *self {
            MemCheck::Ok { target } => target,
            MemCheck::OkCompromised { target } => Some(target),
            MemCheck::Fail => None,
        }
    }

    pub fn passed(&self) -> bool {
        !matches!(self, MemCheck::Fail)
    }
}

/// Can an instance whose KV-cache is `current_kv` take one more request?
/// `running` lists the instance's requests with the new one appended.
pub fn shadow_mem_check<I>(
    mem: &NodeMemory,
    current_kv: Bytes,
    running: I,
    model: &ModelSpec,
    w: Watermark,
) -> MemCheck
where
    I: IntoIterator<Item = (u32, u32)>,
{
    shadow_mem_check_with_free(mem.free_budget(), current_kv, running, model, w)
}

/// As [`shadow_mem_check`] against an explicit free budget.
pub fn shadow_mem_check_with_free<I>(
    free: Bytes,
    current_kv: Bytes,
    running: I,
    model: &ModelSpec,
    w: Watermark,
) -> MemCheck
where
    I: IntoIterator<Item = (u32, u32)>,
{
    let required = m_require(running, model);
    if current_kv >= required {
        return MemCheck::Ok { target: None };
    }
    let recommended = w.recommend(required);
    if recommended - current_kv <= free {
        MemCheck::Ok {
            target: Some(recommended),
        }
    } else if required - current_kv <= free {
        MemCheck::OkCompromised { target: required }
    } else {
        MemCheck::Fail
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Underestimate {
    /// Grow the KV-cache to this many bytes.
    Rescale(Bytes),
    /// No room: evict this request.
    Evict(RequestId),
}

/// Decide how to handle an instance whose next iteration needs more KV bytes
/// than it holds. `running` carries `(id, input, generated, headroom)`.
pub fn handle_underestimate(
    mem: &NodeMemory,
    current_kv: Bytes,
    running: &[(RequestId, u32, u32, f64)],
    model: &ModelSpec,
    w: Watermark,
) -> Underestimate {
    let need = model.kv_bytes_per_token
        * running
            .iter()
            .map(|r| (r.1 + r.2 + 1) as Bytes)
            .sum::<Bytes>();
    let required = m_require(running.iter().map(|r| (r.1, r.2 + 1)), model).max(need);
    let target = w.recommend(required).max(need);
    if target > current_kv && mem.budget_fits(target - current_kv) {
        return Underestimate::Rescale(target);
    }
    if required > current_kv && mem.budget_fits(required - current_kv) {
        return Underestimate::Rescale(required);
    }
    let victim = running
        .iter()
        .max_by(|a, b| a.3.total_cmp(&b.3).then_with(|| b.0.cmp(&a.0)))
        .expect("underestimate on an empty batch");
    Underestimate::Evict(victim.0)
}
