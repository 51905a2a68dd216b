//! Per-iteration batch construction.
//!
//! Every scheduler is a function of the current queues, a read-only view of the
//! block pool and the cost models. It plans allocations on a private copy of
//! the pool and returns a [`ScheduleDecision`]; the engine re-commits the plans
//! in order on the real pool.

pub mod baseline;
pub mod oracle;
mod packing;

pub use baseline::{schedule_fcfs, schedule_round_robin, BaselineParams};
pub use packing::schedule_packing;

use serde::{Deserialize, Serialize};

use crate::cost_model::{BatchEntry, BatchFeatures, CostModels};
use crate::kv::{AllocationEstimate, BlockPool};
use crate::error::ContractViolation;
use crate::queue::{QueueSet, Requests};
use crate::request::{remaining_time, Request, RequestId, SloConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerKind {
    /// Deadline-aware packing of RT and BE requests.
    Packing,
    /// Arrival-order admission regardless of class.
    Fcfs,
    /// Alternating RT and BE iterations, each FCFS.
    RoundRobin,
}

impl SchedulerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::Packing => "packing",
            SchedulerKind::Fcfs => "fcfs",
            SchedulerKind::RoundRobin => "round-robin",
        }
    }

    pub const ALL: [SchedulerKind; 3] = [SchedulerKind::Packing, SchedulerKind::Fcfs, SchedulerKind::RoundRobin];
}

impl std::fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SchedulerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "packing" => Ok(SchedulerKind::Packing),
            "fcfs" => Ok(SchedulerKind::Fcfs),
            "rr" | "round-robin" | "round_robin" => Ok(SchedulerKind::RoundRobin),
            other => Err(format!("unknown scheduler '{other}' (expected packing, fcfs or rr)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub b_curr: u32,
    pub b_base: u32,
    pub b_max: u32,
    /// Moving average of iteration time; 0 until the first iteration.
    pub t_avg: u64,
}

impl SchedulerState {
    pub fn new(b_base: u32, b_max: u32) -> Self {
        Self {
            b_curr: b_base,
            b_base,
            b_max: b_max.max(b_base),
            t_avg: 0,
        }
    }
}

/// Doubles the cap when no RT request was queued, resets it after an overrun.
pub fn adapt_batch_size(state: SchedulerState, saw_rt: bool, overran: bool) -> SchedulerState {
    let b_curr = if overran {
        state.b_base
    } else if !saw_rt {
        state.b_curr.saturating_mul(2).min(state.b_max)
    } else {
        state.b_curr
    };
    SchedulerState { b_curr, ..state }
}

/// Everything a scheduler may look at.
#[derive(Debug, Clone, Copy)]
pub struct SchedInput<'a> {
    pub requests: &'a Requests,
    pub queues: &'a QueueSet,
    pub pool: &'a BlockPool,
    pub models: &'a CostModels,
    pub slo: &'a SloConfig,
    pub now: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub rt_ready: Vec<RequestId>,
    pub be_ready: Vec<RequestId>,
    /// Allocation plans in commit order (RT first, then BE).
    pub plans: Vec<AllocationEstimate>,
    /// Requests whose KV cache is discarded.
    pub dropped: Vec<RequestId>,
    /// `dropped[i]` is released right before `plans[drop_points[i]]` is committed
    /// (after the last plan if the index equals `plans.len()`).
    pub drop_points: Vec<usize>,
    /// RT requests removed from the batch to make room for a BE request.
    pub replaced: Vec<RequestId>,
    pub swap_blocks_total: u32,
    pub estimated_time: u64,
    /// Iteration budget: smallest [`budget_slack`] over queued RT requests;
    /// `None` when no RT request was queued.
    pub t_min_res: Option<i64>,
    pub saw_rt: bool,
    /// The most urgent RT request could not meet its budget and runs alone.
    pub degenerate: bool,
    /// Empty blocks after all drops, before any plan is committed.
    pub empty_blocks: u32,
    pub m_new_total: u32,
}

impl ScheduleDecision {
    pub fn batch(&self) -> impl Iterator<Item = RequestId> + '_ {
        self.rt_ready.iter().chain(self.be_ready.iter()).copied()
    }

    pub fn len(&self) -> usize {
        self.rt_ready.len() + self.be_ready.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn overran(&self) -> bool {
        self.t_min_res.is_some_and(|t| (self.estimated_time as i64) > t)
    }
}

/// Cost-model entry and number of new KV tokens of a request's next iteration.
pub fn iteration_entry(req: &Request) -> (BatchEntry, u32) {
    let (l_n, l_a) = req.next_iteration_shape();
    if req.needs_prefill() {
        (BatchEntry::prefill(l_n), l_n)
    } else {
        (BatchEntry::decode(l_a), 1)
    }
}

pub fn plan_for(pool: &BlockPool, req: &Request) -> Option<AllocationEstimate> {
    let (_, tokens) = iteration_entry(req);
    pool.plan(req.id, req.class, tokens)
}

/// RT slack that bounds the iteration time. A request that cannot meet its
/// current deadline even when run alone has its deadline window re-anchored at
/// `now`, so one late request does not shrink every following batch to a
/// single request.
pub fn budget_slack(req: &Request, inp: &SchedInput, t_avg: u64) -> Result<i64, ContractViolation> {
    let slack = remaining_time(req, inp.slo, t_avg, inp.now)?;
    let (entry, _) = iteration_entry(req);
    let solo = inp
        .models
        .predict(&BatchFeatures::default().with(entry, inp.pool.swap_in_plan(req.id))) as i64;
    if slack >= solo {
        return Ok(slack);
    }
    let target = inp.slo.group_target(req.group_has_first_token(), req.group_len) as i64;
    let k = i64::from(req.group_remaining.max(1));
    Ok(slack.max(target - (k - 1) * t_avg as i64))
}

/// Blocks needed to hold `tokens` tokens.
pub fn blocks_for(tokens: u32, slots_per_block: u32) -> u32 {
    tokens.div_ceil(slots_per_block)
}

/// Re-plans `order` from scratch on a copy of `base` with `dropped` released.
/// Returns the resulting pool, plans and features, or `None` if some request no longer fits.
pub(crate) fn replay(
    base: &BlockPool,
    dropped: &[RequestId],
    order: &[RequestId],
    requests: &Requests,
) -> Option<(BlockPool, Vec<AllocationEstimate>, BatchFeatures)> {
    let mut pool = base.clone();
    for &d in dropped {
        pool.release(d);
    }
    let mut plans = Vec::with_capacity(order.len());
    let mut feats = BatchFeatures::default();
    for &id in order {
        let req = requests.get(id);
        let (entry, _) = iteration_entry(req);
        let plan = plan_for(&pool, req)?;
        pool.commit(&plan).ok()?;
        feats = feats.with(entry, plan.m_cpu);
        plans.push(plan);
    }
    Some((pool, plans, feats))
}

/// Fills the bookkeeping fields shared by every scheduler.
pub(crate) fn finalize(
    mut dec: ScheduleDecision,
    inp: &SchedInput,
    plans: Vec<AllocationEstimate>,
    feats: &BatchFeatures,
) -> ScheduleDecision {
    let mut empties = inp.pool.clone();
    for &d in &dec.dropped {
        empties.release(d);
    }
    dec.empty_blocks = empties.empty_blocks();
    dec.m_new_total = plans.iter().map(|p| p.m_new).sum();
    dec.swap_blocks_total = feats.swap_blocks as u32;
    dec.estimated_time = inp.models.predict(feats);
    dec.plans = plans;
    dec
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_expand_without_rt() {
        let s = SchedulerState::new(128, 2048);
        assert_eq!(adapt_batch_size(s, false, false).b_curr, 256);
    }

    #[test]
    fn test_reset_on_overrun() {
        let s = SchedulerState {
            b_curr: 512,
            ..SchedulerState::new(128, 2048)
        };
        assert_eq!(adapt_batch_size(s, true, true).b_curr, 128);
    }

    #[test]
    fn test_expansion_clamped() {
        let s = SchedulerState {
            b_curr: 2048,
            ..SchedulerState::new(128, 2048)
        };
        assert_eq!(adapt_batch_size(s, false, false).b_curr, 2048);
        assert_eq!(adapt_batch_size(s, true, false).b_curr, 2048);
    }

    #[test]
    fn test_kind_parsing() {
        assert_eq!("rr".parse::<SchedulerKind>().unwrap(), SchedulerKind::RoundRobin);
        assert_eq!("Packing".parse::<SchedulerKind>().unwrap(), SchedulerKind::Packing);
        assert!("lifo".parse::<SchedulerKind>().is_err());
    }
}
