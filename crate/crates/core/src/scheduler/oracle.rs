//! Exhaustive search for the batch with the most BE requests.
//!
//! Used to cross-check the packing heuristic on small instances. A selection is
//! feasible when it respects the batch cap, every selected request can be
//! allocated in canonical order on the pool, and the RT deadline constraint
//! holds: a selected RT request needs `T <= slack`, an unselected one needs
//! `T <= slack - t_avg` because its next token slips by one more iteration.
//! Slack is [`budget_slack`], the same quantity the packing heuristic uses.

use thiserror::Error;

use super::{budget_slack, iteration_entry, plan_for, SchedInput};
use crate::cost_model::BatchFeatures;
use crate::queue::pull_rt_in_priority_order;
use crate::request::{RequestClass, RequestId};

/// Which RT requests the deadline constraint is checked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeadlineScope {
    /// Every queued RT request, selected or not.
    AllRt,
    /// Only RT requests in the selection.
    SelectedRt,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("instance has {0} requests, more than the enumeration bound of {MAX_REQUESTS}")]
    TooLarge(usize),
    #[error("no selection satisfies the RT deadline constraints")]
    Infeasible,
}

pub const MAX_REQUESTS: usize = 14;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleSolution {
    pub be_count: usize,
    /// Selected requests in canonical order.
    pub selection: Vec<RequestId>,
    pub estimated_time: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    BatchCap { size: usize, cap: u32 },
    Memory { request: RequestId },
    Deadline { request: RequestId, selected: bool, slack: i64, time: u64 },
    NotQueued { request: RequestId },
}

/// Canonical order: RT by urgency, then BE by (restore blocks, has KV first, arrival, id).
pub fn canonical_order(inp: &SchedInput, t_avg: u64) -> Vec<RequestId> {
    let mut out: Vec<RequestId> = pull_rt_in_priority_order(inp.queues, inp.requests, inp.slo, t_avg, inp.now)
        .expect("RT queues hold RT requests")
        .map(|(_, id)| id)
        .collect();
    let mut be: Vec<_> = inp
        .queues
        .be_waiting
        .iter()
        .chain(inp.queues.be_pending.iter())
        .map(|&id| {
            let r = inp.requests.get(id);
            (inp.pool.swap_in_plan(id), !r.has_kv(), r.arrival_time, id)
        })
        .collect();
    be.sort_unstable();
    out.extend(be.into_iter().map(|x| x.3));
    out
}

/// Checks a selection given in commit order and returns its predicted time.
pub fn check_selection(
    inp: &SchedInput,
    b_curr: u32,
    t_avg: u64,
    selection: &[RequestId],
    scope: DeadlineScope,
) -> Result<u64, Violation> {
    if selection.len() > b_curr as usize {
        return Err(Violation::BatchCap {
            size: selection.len(),
            cap: b_curr,
        });
    }
    let mut pool = inp.pool.clone();
    let mut feats = BatchFeatures::default();
    for &id in selection {
        if !inp.queues.contains(id) {
            return Err(Violation::NotQueued { request: id });
        }
        let req = inp.requests.get(id);
        let (entry, _) = iteration_entry(req);
        let plan = plan_for(&pool, req).ok_or(Violation::Memory { request: id })?;
        pool.commit(&plan).map_err(|_| Violation::Memory { request: id })?;
        feats = feats.with(entry, plan.m_cpu);
    }
    let t = inp.models.predict(&feats);
    let rt_ids = inp.queues.rt_waiting.iter().chain(inp.queues.rt_pending.iter());
    for &id in rt_ids {
        let selected = selection.contains(&id);
        if scope == DeadlineScope::SelectedRt && !selected {
            continue;
        }
        let slack = budget_slack(inp.requests.get(id), inp, t_avg).expect("RT request");
        let limit = if selected { slack } else { slack - t_avg as i64 };
        if (t as i64) > limit {
            return Err(Violation::Deadline {
                request: id,
                selected,
                slack,
                time: t,
            });
        }
    }
    Ok(t)
}

pub fn oracle_pack(inp: &SchedInput, b_curr: u32, t_avg: u64, scope: DeadlineScope) -> Result<OracleSolution, OracleError> {
    let order = canonical_order(inp, t_avg);
    let n = order.len();
    if n > MAX_REQUESTS {
        return Err(OracleError::TooLarge(n));
    }
    let mut best: Option<OracleSolution> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() > b_curr {
            continue;
        }
        let selection: Vec<RequestId> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| order[i]).collect();
        let be_count = selection
            .iter()
            .filter(|&&id| inp.requests.get(id).class == RequestClass::Be)
            .count();
        if let Some(b) = &best {
            if be_count < b.be_count {
                continue;
            }
        }
        let Ok(t) = check_selection(inp, b_curr, t_avg, &selection, scope) else { continue };
        let better = match &best {
            None => true,
            Some(b) => be_count > b.be_count || be_count == b.be_count && t < b.estimated_time,
        };
        if better {
            best = Some(OracleSolution {
                be_count,
                selection,
                estimated_time: t,
            });
        }
    }
    best.ok_or(OracleError::Infeasible)
}
