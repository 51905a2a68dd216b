//! Deadline-aware packing of RT and BE requests.
//!
//! RT requests are added in urgency order while the predicted iteration time
//! stays within the smallest RT slack (`t_min_res`, see [`budget_slack`]). BE requests are then
//! packed in order of how much checkpointed data they must restore; when a BE
//! request does not fit, the least urgent selected RT request is swapped out
//! for it if that makes the batch fit and no RT request left out misses its
//! slack because of the swap. An RT request that finds no memory
//! drops BE requests; if that is not enough it is skipped for this iteration.
//! Requests without KV are admitted only while the remaining growth of the
//! requests already holding blocks stays covered.

use std::collections::BTreeSet;

use super::baseline::full_footprint;
use super::{
    blocks_for, budget_slack, finalize, iteration_entry, plan_for, replay, SchedInput, ScheduleDecision, SchedulerState,
};
use crate::cost_model::BatchFeatures;
use crate::error::SimError;
use crate::kv::{drop_until, AllocationEstimate, BlockId, BlockPool, VictimCandidate};
use crate::queue::pull_rt_in_priority_order;
use crate::request::{Request, RequestClass, RequestId};

/// BE requests holding blocks, except those already in the batch.
fn be_victims(pool: &BlockPool, exclude: &[RequestId]) -> Vec<VictimCandidate> {
    pool.holders()
        .filter(|(id, t)| t.class == RequestClass::Be && !exclude.contains(id))
        .map(|(id, _)| VictimCandidate {
            id,
            class: RequestClass::Be,
            remaining: 0,
        })
        .collect()
}

/// Plan for `req`, if it fits. A request without KV is only admitted when the
/// blocks left afterwards cover its own remaining growth plus the remaining
/// growth of the other holders. RT admissions count only RT holders and treat
/// every block an RT request may claim as available; BE admissions count all
/// holders against empty blocks.
fn admission_plan(pool: &BlockPool, req: &Request, inp: &SchedInput) -> Option<AllocationEstimate> {
    let plan = plan_for(pool, req)?;
    if req.has_kv() {
        return Some(plan);
    }
    let s = pool.slots_per_block();
    let (_, tokens) = iteration_entry(req);
    let own = full_footprint(req, s).saturating_sub(blocks_for(tokens, s));
    let rt = req.class == RequestClass::Rt;
    let reserved: u32 = pool
        .holders()
        .filter(|(_, t)| !rt || t.class == RequestClass::Rt)
        .map(|(id, t)| full_footprint(inp.requests.get(id), s).saturating_sub(t.blocks.len() as u32))
        .sum();
    let left = if rt {
        let claimed: BTreeSet<BlockId> = plan.runs.iter().map(|r| r.block).collect();
        pool.rt_claimable_blocks().saturating_sub(claimed.len() as u32)
    } else {
        pool.empty_blocks().saturating_sub(plan.m_new)
    };
    (left >= reserved + own).then_some(plan)
}

/// Slack and solo cost of a queued RT request.
#[derive(Clone, Copy)]
struct RtTiming {
    id: RequestId,
    slack: i64,
}

/// Flags, per entry of `deferred` (urgency order), whether it meets its slack
/// when an iteration of `t` us runs first and the requests follow in batches of `cap`.
fn deferred_on_time(inp: &SchedInput, t: u64, deferred: &[RtTiming], cap: usize) -> Vec<bool> {
    let mut elapsed = t as i64;
    let mut out = Vec::with_capacity(deferred.len());
    for chunk in deferred.chunks(cap.max(1)) {
        let feats = chunk.iter().fold(BatchFeatures::default(), |f, r| {
            f.with(iteration_entry(inp.requests.get(r.id)).0, inp.pool.swap_in_plan(r.id))
        });
        elapsed += inp.models.predict(&feats) as i64;
        out.extend(chunk.iter().map(|r| elapsed <= r.slack));
    }
    out
}

/// Replacing `popped` is allowed unless it makes a left-out RT request miss
/// its slack that would have met it otherwise. `t_keep` and `t_swap` are the
/// predicted times of the batch without and with the replacement.
fn replacement_ok(inp: &SchedInput, timings: &[RtTiming], selected: &[RequestId], popped: RequestId, t_keep: u64, t_swap: u64, cap: usize) -> bool {
    let with: Vec<RtTiming> = timings.iter().copied().filter(|r| !selected.contains(&r.id)).collect();
    let without: Vec<RtTiming> = with.iter().copied().filter(|r| r.id != popped).collect();
    let before = deferred_on_time(inp, t_keep, &without, cap);
    let after = deferred_on_time(inp, t_swap, &with, cap);
    let mut before = before.into_iter();
    with.iter().zip(after).all(|(r, ok)| {
        // `popped` runs in the current batch without the replacement.
        let met = if r.id == popped { true } else { before.next().expect("same order") };
        ok || !met
    })
}

pub fn schedule_packing(inp: &SchedInput, state: &SchedulerState) -> Result<ScheduleDecision, SimError> {
    let t_avg = state.t_avg;
    let order: Vec<RequestId> = pull_rt_in_priority_order(inp.queues, inp.requests, inp.slo, t_avg, inp.now)?
        .map(|(_, id)| id)
        .collect();
    let mut t_min: Option<i64> = None;
    let mut timings = Vec::with_capacity(order.len());
    for &id in &order {
        let b = budget_slack(inp.requests.get(id), inp, t_avg)?;
        t_min = Some(t_min.map_or(b, |m| m.min(b)));
        timings.push(RtTiming { id, slack: b });
    }
    let fits_budget = |t: u64| t_min.is_none_or(|m| (t as i64) <= m);
    let cap = state.b_curr as usize;

    let mut dec = ScheduleDecision {
        t_min_res: t_min,
        saw_rt: !order.is_empty(),
        ..ScheduleDecision::default()
    };
    let mut tent = inp.pool.clone();
    let mut plans = Vec::new();
    let mut feats = BatchFeatures::default();
    // Smallest full footprint of a refused RT request without KV; later ones at
    // least as large would be refused too.
    let mut refused_at = u32::MAX;

    for &id in &order {
        if dec.rt_ready.len() >= cap {
            break;
        }
        let req = inp.requests.get(id);
        let footprint = full_footprint(req, tent.slots_per_block());
        if !req.has_kv() && footprint >= refused_at {
            continue;
        }
        let (entry, _) = iteration_entry(req);
        let admissible = |p: &BlockPool| admission_plan(p, req, inp);
        let plan = match admissible(&tent) {
            Some(p) => p,
            None => {
                // Free room by dropping BE requests. RT requests are never
                // dropped for each other: under memory pressure that turns
                // into a cascade of recomputations.
                let cands = be_victims(&tent, &dec.be_ready);
                let Some(d) = drop_until(&mut tent, &cands, |p| admissible(p).is_some()) else {
                    if !req.has_kv() {
                        refused_at = refused_at.min(footprint);
                    }
                    continue;
                };
                dec.drop_points.extend(d.iter().map(|_| plans.len()));
                dec.dropped.extend(d);
                admissible(&tent).expect("drop_until checked the plan")
            }
        };
        let cand = feats.with(entry, plan.m_cpu);
        if !fits_budget(inp.models.predict(&cand)) {
            if dec.rt_ready.is_empty() {
                tent.commit(&plan)?;
                dec.rt_ready.push(id);
                plans.push(plan);
                dec.degenerate = true;
                return Ok(finalize(dec, inp, plans, &cand));
            }
            break;
        }
        tent.commit(&plan)?;
        dec.rt_ready.push(id);
        plans.push(plan);
        feats = cand;
    }

    let mut be: Vec<_> = inp
        .queues
        .be_waiting
        .iter()
        .chain(inp.queues.be_pending.iter())
        .copied()
        .filter(|id| !dec.dropped.contains(id))
        .map(|id| {
            let r = inp.requests.get(id);
            (tent.swap_in_plan(id), !r.has_kv(), r.arrival_time, id)
        })
        .collect();
    be.sort_unstable();

    for (_, _, _, id) in be {
        let req = inp.requests.get(id);
        let (entry, _) = iteration_entry(req);
        if plan_for(&tent, req).is_none() {
            break;
        }
        // Refused only to keep growth room: a smaller request may still pass.
        let Some(plan) = admission_plan(&tent, req, inp) else { continue };
        let cand = feats.with(entry, plan.m_cpu);
        if dec.len() < cap && fits_budget(inp.models.predict(&cand)) {
            tent.commit(&plan)?;
            dec.be_ready.push(id);
            plans.push(plan);
            feats = cand;
            continue;
        }
        let Some(popped) = dec.rt_ready.pop() else { break };
        let kept: Vec<RequestId> = dec.batch().collect();
        let t_keep = inp.models.predict(&feats);
        let accepted = replay(inp.pool, &dec.dropped, &kept, inp.requests).and_then(|(pool, p, f)| {
            let plan = plan_for(&pool, req)?;
            let cand = f.with(entry, plan.m_cpu);
            let t_swap = inp.models.predict(&cand);
            (kept.len() < cap
                && fits_budget(t_swap)
                && replacement_ok(inp, &timings, &dec.rt_ready, popped, t_keep, t_swap, cap))
            .then_some((pool, p, plan, cand))
        });
        match accepted {
            Some((mut pool, p, plan, cand)) => {
                pool.commit(&plan)?;
                tent = pool;
                plans = p;
                // The replay released every dropped request before its first plan.
                dec.drop_points.iter_mut().for_each(|x| *x = 0);
                plans.push(plan);
                feats = cand;
                dec.be_ready.push(id);
                dec.replaced.push(popped);
            }
            None => {
                // The replay ran on a copy, so `tent` and `plans` still include `popped`.
                dec.rt_ready.push(popped);
                break;
            }
        }
    }
    Ok(finalize(dec, inp, plans, &feats))
}
