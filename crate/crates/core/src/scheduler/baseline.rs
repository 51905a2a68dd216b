//! Class-agnostic FCFS and round-robin baselines.
//!
//! Both admit waiting requests in arrival order with head-of-line blocking and
//! reserve a request's whole KV footprint (prompt plus full output) at
//! admission, so admitted requests never need to be preempted. Blocks are never
//! shared between requests.

use serde::{Deserialize, Serialize};

use super::{blocks_for, finalize, iteration_entry, plan_for, SchedInput, ScheduleDecision};
use crate::cost_model::BatchFeatures;
use crate::error::SimError;
use crate::kv::BlockPool;
use crate::queue::Requests;
use crate::request::{Request, RequestClass, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineParams {
    /// Maximum requests per iteration.
    pub cap: u32,
    /// Maximum new tokens per iteration; a prompt that alone exceeds it is still admitted.
    pub max_batched_tokens: Option<u32>,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            cap: 128,
            max_batched_tokens: None,
        }
    }
}

/// Blocks a request holds once it has generated its last token.
pub fn full_footprint(req: &Request, slots_per_block: u32) -> u32 {
    blocks_for(req.prompt_len + req.target_output_len.saturating_sub(1), slots_per_block)
}

fn outstanding_reservation(pool: &BlockPool, requests: &Requests) -> u32 {
    let s = pool.slots_per_block();
    pool.holders()
        .map(|(id, t)| full_footprint(requests.get(id), s).saturating_sub(t.blocks.len() as u32))
        .sum()
}

fn admit(inp: &SchedInput, params: &BaselineParams, classes: &[RequestClass]) -> Result<ScheduleDecision, SimError> {
    let cap = params.cap as usize;
    let s = inp.pool.slots_per_block();
    let mut tent = inp.pool.clone();
    let mut plans = Vec::new();
    let mut feats = BatchFeatures::default();
    let mut dec = ScheduleDecision::default();
    let mut tokens = 0u64;
    let push = |dec: &mut ScheduleDecision, id: RequestId, class: RequestClass| match class {
        RequestClass::Rt => dec.rt_ready.push(id),
        RequestClass::Be => dec.be_ready.push(id),
    };

    let by_arrival = |ids: &mut Vec<RequestId>| {
        ids.sort_unstable_by_key(|&id| {
            let r = inp.requests.get(id);
            (r.arrival_time, id)
        })
    };
    let mut running: Vec<RequestId> = Vec::new();
    let mut waiting: Vec<RequestId> = Vec::new();
    for &c in classes {
        match c {
            RequestClass::Rt => {
                running.extend(&inp.queues.rt_pending);
                waiting.extend(&inp.queues.rt_waiting);
            }
            RequestClass::Be => {
                running.extend(&inp.queues.be_pending);
                waiting.extend(&inp.queues.be_waiting);
            }
        }
    }
    by_arrival(&mut running);
    by_arrival(&mut waiting);

    for id in running {
        if dec.len() >= cap {
            break;
        }
        let req = inp.requests.get(id);
        let (entry, n) = iteration_entry(req);
        let Some(plan) = plan_for(&tent, req) else { continue };
        tent.commit(&plan)?;
        feats = feats.with(entry, plan.m_cpu);
        tokens += u64::from(n);
        plans.push(plan);
        push(&mut dec, id, req.class);
    }

    let mut reserved = outstanding_reservation(&tent, inp.requests);
    for id in waiting {
        if dec.len() >= cap {
            break;
        }
        let req = inp.requests.get(id);
        let (entry, n) = iteration_entry(req);
        if let Some(limit) = params.max_batched_tokens {
            if tokens > 0 && tokens + u64::from(n) > u64::from(limit) {
                break;
            }
        }
        let need = full_footprint(req, s);
        if tent.empty_blocks() < reserved + need {
            break;
        }
        let Some(plan) = plan_for(&tent, req) else { break };
        tent.commit(&plan)?;
        reserved += need.saturating_sub(tent.footprint(id));
        feats = feats.with(entry, plan.m_cpu);
        tokens += u64::from(n);
        plans.push(plan);
        push(&mut dec, id, req.class);
    }
    Ok(finalize(dec, inp, plans, &feats))
}

pub fn schedule_fcfs(inp: &SchedInput, params: &BaselineParams) -> Result<ScheduleDecision, SimError> {
    let mut dec = admit(inp, params, &[RequestClass::Rt, RequestClass::Be])?;
    // Keep commit order equal to batch order (RT then BE) for the engine.
    order_plans(&mut dec);
    dec.saw_rt = inp.queues.rt_len() > 0;
    Ok(dec)
}

/// Serves whole iterations of one class at a time. `turn` is the class whose
/// turn it is; it flips to the other class after an iteration is served. A
/// class with nothing to run forfeits its turn.
pub fn schedule_round_robin(
    inp: &SchedInput,
    params: &BaselineParams,
    turn: &mut RequestClass,
) -> Result<ScheduleDecision, SimError> {
    let other = |c: RequestClass| match c {
        RequestClass::Rt => RequestClass::Be,
        RequestClass::Be => RequestClass::Rt,
    };
    for class in [*turn, other(*turn)] {
        let queued = match class {
            RequestClass::Rt => inp.queues.rt_len(),
            RequestClass::Be => inp.queues.be_len(),
        };
        if queued == 0 {
            continue;
        }
        let mut dec = admit(inp, params, &[class])?;
        if !dec.is_empty() {
            *turn = other(class);
            dec.saw_rt = inp.queues.rt_len() > 0;
            return Ok(dec);
        }
    }
    Ok(ScheduleDecision {
        saw_rt: inp.queues.rt_len() > 0,
        ..ScheduleDecision::default()
    })
}

/// Reorders plans so RT plans come first, matching `batch()` order. Plans of
/// an exclusive pool touch disjoint blocks, so reordering keeps them valid.
fn order_plans(dec: &mut ScheduleDecision) {
    let rank = |id: RequestId| {
        dec.rt_ready
            .iter()
            .position(|&x| x == id)
            .unwrap_or_else(|| dec.rt_ready.len() + dec.be_ready.iter().position(|&x| x == id).unwrap_or(usize::MAX / 2))
    };
    let mut plans = std::mem::take(&mut dec.plans);
    plans.sort_by_key(|p| rank(p.request));
    dec.plans = plans;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::CostModels;
    use crate::queue::QueueSet;
    use crate::request::SloConfig;

    fn setup(specs: &[(RequestClass, u64, u32, u32)]) -> (Requests, QueueSet) {
        let items = specs
            .iter()
            .enumerate()
            .map(|(i, &(c, a, p, o))| Request::new(i as u64, c, a, p, o, 1))
            .collect();
        let reqs = Requests::new(items).unwrap();
        let mut q = QueueSet::default();
        for r in reqs.iter() {
            q.push_waiting(r, &reqs);
        }
        (reqs, q)
    }

    fn input<'a>(reqs: &'a Requests, q: &'a QueueSet, pool: &'a BlockPool, m: &'a CostModels, slo: &'a SloConfig) -> SchedInput<'a> {
        SchedInput {
            requests: reqs,
            queues: q,
            pool,
            models: m,
            slo,
            now: 100,
        }
    }

    #[test]
    fn test_long_be_blocks_later_rt() {
        // The BE request reserves 6 of 8 blocks; the RT request needs 3.
        let (reqs, q) = setup(&[(RequestClass::Be, 0, 64, 33), (RequestClass::Rt, 10, 32, 17)]);
        let pool = BlockPool::new(8, 16, false);
        let (m, slo) = (CostModels::default(), SloConfig::default());
        let d = schedule_fcfs(&input(&reqs, &q, &pool, &m, &slo), &BaselineParams::default()).unwrap();
        assert_eq!(d.be_ready, vec![0]);
        assert!(d.rt_ready.is_empty());
    }

    #[test]
    fn test_single_request_scheduled() {
        let (reqs, q) = setup(&[(RequestClass::Rt, 0, 10, 5)]);
        let pool = BlockPool::new(8, 16, false);
        let (m, slo) = (CostModels::default(), SloConfig::default());
        let d = schedule_fcfs(&input(&reqs, &q, &pool, &m, &slo), &BaselineParams::default()).unwrap();
        assert_eq!(d.rt_ready, vec![0]);
    }

    #[test]
    fn test_cap_one_serves_arrival_order() {
        let (reqs, q) = setup(&[(RequestClass::Be, 5, 4, 2), (RequestClass::Rt, 1, 4, 2), (RequestClass::Be, 3, 4, 2)]);
        let pool = BlockPool::new(8, 16, false);
        let (m, slo) = (CostModels::default(), SloConfig::default());
        let params = BaselineParams {
            cap: 1,
            max_batched_tokens: None,
        };
        let d = schedule_fcfs(&input(&reqs, &q, &pool, &m, &slo), &params).unwrap();
        assert_eq!(d.batch().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn test_token_budget_limits_prefills() {
        let (reqs, q) = setup(&[(RequestClass::Be, 0, 100, 2), (RequestClass::Be, 1, 100, 2)]);
        let pool = BlockPool::new(64, 16, false);
        let (m, slo) = (CostModels::default(), SloConfig::default());
        let params = BaselineParams {
            cap: 8,
            max_batched_tokens: Some(150),
        };
        let d = schedule_fcfs(&input(&reqs, &q, &pool, &m, &slo), &params).unwrap();
        assert_eq!(d.be_ready, vec![0]);
    }

    #[test]
    fn test_round_robin_alternates_and_forfeits() {
        let (reqs, q) = setup(&[(RequestClass::Rt, 0, 4, 4), (RequestClass::Be, 0, 4, 4)]);
        let pool = BlockPool::new(8, 16, false);
        let (m, slo) = (CostModels::default(), SloConfig::default());
        let inp = input(&reqs, &q, &pool, &m, &slo);
        let params = BaselineParams::default();
        let mut turn = RequestClass::Rt;
        let d = schedule_round_robin(&inp, &params, &mut turn).unwrap();
        assert_eq!((d.rt_ready.clone(), d.be_ready.clone()), (vec![0], vec![]));
        let d = schedule_round_robin(&inp, &params, &mut turn).unwrap();
        assert_eq!((d.rt_ready.clone(), d.be_ready.clone()), (vec![], vec![1]));

        let (reqs, q) = setup(&[(RequestClass::Rt, 0, 4, 4)]);
        let inp = input(&reqs, &q, &pool, &m, &slo);
        let mut turn = RequestClass::Be;
        let d = schedule_round_robin(&inp, &params, &mut turn).unwrap();
        assert_eq!(d.rt_ready, vec![0]);
        assert_eq!(turn, RequestClass::Be);
    }
}
