//! Preemption-based defragmentation and bin-packing routing order.
//!
//! An instance that cannot grow its KV-cache for a new request may preempt
//! neighbours on its node whose batch is strictly smaller than its own,
//! smallest first, stopping as soon as enough memory would be freed. The
//! neighbours' requests must all find a validated home elsewhere before the
//! plan is accepted; otherwise nothing changes.

use std::collections::BTreeMap;

use crate::cluster::World;
use crate::compute::{Instance, InstanceState, VirtualNode, VirtualRequest};
use crate::memory::{m_require, shadow_mem_check_with_free, MemCheck};
use crate::simcore::SimTime;
use crate::types::{Bytes, InstanceId, NodeId, RequestId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Displacement {
    pub request: RequestId,
    pub target: InstanceId,
    /// New KV size for the target, when it must grow.
    pub kv_target: Option<Bytes>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreemptionPlan {
    pub node: NodeId,
    pub grower: InstanceId,
    pub request: RequestId,
    pub grower_kv: Bytes,
    /// Ascending by batch size.
    pub victims: Vec<InstanceId>,
    pub displaced: Vec<Displacement>,
}

/// Highest batch first, ties to the lower id.
pub fn pick_instance(cands: &[&Instance]) -> Vec<InstanceId> {
    let mut v: Vec<(usize, InstanceId)> = cands.iter().map(|i| (i.batch_size(), i.id)).collect();
    v.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    v.into_iter().map(|(_, id)| id).collect()
}

/// Lowest batch first, ties to the lower id.
pub fn spread_order(cands: &[&Instance]) -> Vec<InstanceId> {
    let mut v: Vec<(usize, InstanceId)> = cands.iter().map(|i| (i.batch_size(), i.id)).collect();
    v.sort();
    v.into_iter().map(|(_, id)| id).collect()
}

/// Neighbours `grower` may preempt, in preemption order.
pub fn victim_order(grower: &Instance, neighbours: &[&Instance]) -> Vec<InstanceId> {
    let lower: Vec<&Instance> = neighbours
        .iter()
        .copied()
        .filter(|n| n.id != grower.id && n.batch_size() < grower.batch_size())
        .collect();
    spread_order(&lower)
}

/// Shortest prefix of `order` whose footprints add up to `needed`.
pub fn minimal_victims(order: &[(InstanceId, Bytes)], needed: Bytes) -> Option<Vec<InstanceId>> {
    let mut freed = 0;
    let mut picked = Vec::new();
    for &(id, bytes) in order {
        if freed >= needed {
            break;
        }
        freed += bytes;
        picked.push(id);
    }
    (freed >= needed).then_some(picked)
}

/// Try to make room for `rid` on `grower` by preempting lower-batch
/// neighbours. Pure: the world is not modified.
pub fn plan_preemption(
    world: &World,
    grower: InstanceId,
    rid: RequestId,
    now: SimTime,
) -> Option<PreemptionPlan> {
    let g = world.instances.get(&grower)?;
    if !matches!(g.state, InstanceState::Idle | InstanceState::Active) || g.pending_op.is_some() {
        return None;
    }
    let home = g.node;
    let node = &world.nodes[home.0 as usize];
    let ctx = world.ctx();
    let w = world.params.watermark;
    let cost = &world.params.cost;
    let r = &world.requests[rid.0 as usize];
    let spec = world.models.get(g.model);

    let mut running = world.lengths(&g.batch);
    running.push((r.input_len, r.generated()));
    if running.len() as u32 > ctx.table(g.model, node.class).b_max() {
        return None;
    }
    let required = m_require(running, spec);
    let free = node.mem.free_budget();
    if required <= g.kv_alloc || required - g.kv_alloc <= free {
        return None;
    }
    let needed = required - g.kv_alloc - free;

    let running_here = node.in_flight.as_ref().map(|f| f.plan.instance);
    let neighbours: Vec<&Instance> = node
        .instances
        .iter()
        .map(|i| &world.instances[i])
        .filter(|i| {
            matches!(i.state, InstanceState::Idle | InstanceState::Active)
                && i.pending_op.is_none()
                && Some(i.id) != running_here
        })
        .collect();
    let order: Vec<(InstanceId, Bytes)> = victim_order(g, &neighbours)
        .into_iter()
        .map(|v| (v, node.mem.target_of(v)))
        .collect();
    let victims = minimal_victims(&order, needed)?;
    let freed: Bytes = order
        .iter()
        .filter(|(v, _)| victims.contains(v))
        .map(|(_, b)| b)
        .sum();
    let avail = free + freed;
    let recommended = w.recommend(required);
    let grower_kv = if recommended - g.kv_alloc <= avail {
        recommended
    } else {
        required
    };

    let validate = !world.policy.ablations.disable_validation;
    let unload_done = now.secs() + cost.unload_latency;
    let mut vnodes: BTreeMap<NodeId, VirtualNode<'_>> = BTreeMap::new();
    let mut home_vn = VirtualNode::capture(&world.node_view(home, now), &ctx);
    for &v in &victims {
        home_vn.remove_instance(v);
    }
    let grow_lat = cost
        .scale_latency(g.kv_alloc, grower_kv)
        .expect("grower grows");
    home_vn.block_until(grower, unload_done + grow_lat);
    vnodes.insert(home, home_vn);

    let mut spare: BTreeMap<NodeId, Bytes> =
        BTreeMap::from([(home, avail - (grower_kv - g.kv_alloc))]);
    let mut extra_alloc: BTreeMap<NodeId, Bytes> = BTreeMap::new();
    let mut planned: BTreeMap<InstanceId, (Bytes, Vec<(u32, u32)>)> = BTreeMap::new();
    let mut displaced = Vec::new();

    for &v in &victims {
        for &moved in &world.instances[&v].batch {
            let mr = &world.requests[moved.0 as usize];
            let mspec = world.models.get(mr.model);
            let mut placed = false;
            'classes: for class in world.classes() {
                for dest in world.candidate_instances(mr.model, class) {
                    if victims.contains(&dest) || dest == grower {
                        continue;
                    }
                    let d = &world.instances[&dest];
                    let dn = &world.nodes[d.node.0 as usize];
                    let (kv, extra) = planned
                        .get(&dest)
                        .cloned()
                        .unwrap_or((d.kv_alloc, Vec::new()));
                    let mut lens = world.lengths(&d.batch);
                    lens.extend(extra.iter().copied());
                    lens.push((mr.input_len, mr.generated()));
                    if lens.len() as u32 > ctx.table(d.model, dn.class).b_max() {
                        continue;
                    }
                    let spare_n = *spare.entry(d.node).or_insert_with(|| dn.mem.free_budget());
                    let target = match shadow_mem_check_with_free(
                        spare_n,
                        kv,
                        lens.iter().copied(),
                        mspec,
                        w,
                    ) {
                        MemCheck::Fail => continue,
                        ok => ok.target(),
                    };
                    let mut ready = None;
                    if let Some(t) = target {
                        if d.pending_op.is_some() {
                            continue;
                        }
                        let lat = cost.scale_latency(kv, t).expect("target grows");
                        if d.node == home {
                            ready = Some(unload_done + lat);
                        } else {
                            let extra = extra_alloc.get(&d.node).copied().unwrap_or(0);
                            if !dn.mem.would_execute(extra + (t - kv)) {
                                continue;
                            }
                            ready = Some(now.secs() + lat);
                        }
                    }
                    let mut vr = VirtualRequest::from_request(mr);
                    vr.prefilled = false;
                    if validate {
                        let vn = vnodes.entry(d.node).or_insert_with(|| {
                            VirtualNode::capture(&world.node_view(d.node, now), &ctx)
                        });
                        let mut trial = vn.clone();
                        if let Some(t) = ready {
                            trial.block_until(dest, t);
                        }
                        if !trial.validate_admission(dest, &vr, &ctx).accepted() {
                            continue;
                        }
                        trial.admit(dest, vr);
                        *vn = trial;
                    }
                    let new_kv = target.unwrap_or(kv);
                    if let Some(t) = target {
                        *spare.get_mut(&d.node).unwrap() -= t - kv;
                        if d.node != home {
                            *extra_alloc.entry(d.node).or_insert(0) += t - kv;
                        }
                    }
                    let entry = planned.entry(dest).or_insert((d.kv_alloc, Vec::new()));
                    entry.0 = new_kv;
                    entry.1.push((mr.input_len, mr.generated()));
                    displaced.push(Displacement {
                        request: moved,
                        target: dest,
                        kv_target: target,
                    });
                    placed = true;
                    break 'classes;
                }
            }
            if !placed {
                return None;
            }
        }
    }

    if validate {
        let vr = VirtualRequest::from_request(r);
        if !vnodes[&home]
            .validate_admission(grower, &vr, &ctx)
            .accepted()
        {
            return None;
        }
    }
    Some(PreemptionPlan {
        node: home,
        grower,
        request: rid,
        grower_kv,
        victims,
        displaced,
    })
}
