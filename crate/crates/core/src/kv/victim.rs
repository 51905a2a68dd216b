//! Victim selection when the pool cannot host an urgent RT request.

use super::BlockPool;
use crate::error::KvError;
use crate::request::{RequestClass, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VictimCandidate {
    pub id: RequestId,
    pub class: RequestClass,
    /// Slack of an RT candidate; ignored for BE.
    pub remaining: i64,
}

/// Candidates in drop order: BE requests first, largest footprint first; then
/// RT requests with the most slack first. Ties go to the larger id.
fn drop_order(pool: &BlockPool, candidates: &[VictimCandidate]) -> Vec<VictimCandidate> {
    let mut order: Vec<_> = candidates.iter().filter(|c| pool.table(c.id).is_some()).copied().collect();
    order.sort_by_key(|c| match c.class {
        RequestClass::Be => (0, -(i64::from(pool.footprint(c.id))), std::cmp::Reverse(c.id)),
        RequestClass::Rt => (1, -c.remaining, std::cmp::Reverse(c.id)),
    });
    order
}

/// Releases candidates in drop order until `fits` holds. Returns the released
/// ids, or `None` with the pool unchanged if releasing every candidate is not enough.
pub fn drop_until(
    pool: &mut BlockPool,
    candidates: &[VictimCandidate],
    fits: impl Fn(&BlockPool) -> bool,
) -> Option<Vec<RequestId>> {
    if fits(pool) {
        return Some(Vec::new());
    }
    let order = drop_order(pool, candidates);
    if order.is_empty() {
        return None;
    }
    let mut trial = pool.clone();
    let mut dropped = Vec::new();
    for c in order {
        trial.release(c.id);
        dropped.push(c.id);
        if fits(&trial) {
            *pool = trial;
            return Some(dropped);
        }
    }
    None
}

/// Releases candidates in drop order until `needed_blocks` blocks are empty.
/// Returns the released ids in drop order. On error the pool is unchanged.
pub fn drop_victims(pool: &mut BlockPool, needed_blocks: u32, candidates: &[VictimCandidate]) -> Result<Vec<RequestId>, KvError> {
    if needed_blocks > pool.num_blocks() {
        return Err(KvError::PoolExhausted {
            needed: needed_blocks,
            available: pool.num_blocks(),
        });
    }
    drop_until(pool, candidates, |p| p.empty_blocks() >= needed_blocks).ok_or_else(|| {
        let mut all = pool.clone();
        for c in candidates {
            all.release(c.id);
        }
        KvError::PoolExhausted {
            needed: needed_blocks,
            available: all.empty_blocks(),
        }
    })
}
