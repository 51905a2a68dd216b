//! Flat-array reference model of the KV pool.
//!
//! Every physical slot holds `Option<(request, token index)>`. The model is fed
//! the slots a commit wrote and derives the checkpointed tokens itself: a write
//! that lands on a live BE token moves that token to the host list of its
//! owner.

#![allow(dead_code)]

use std::collections::BTreeMap;

use hybrid_serve::kv::{AllocationEstimate, BlockPool, CommitOutcome};
use hybrid_serve::request::{RequestClass, RequestId};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Token {
    req: RequestId,
    idx: u32,
}

#[derive(Debug, Clone, Default)]
struct ReqState {
    class: Option<RequestClass>,
    /// Tokens appended so far; indices `0..appended` must all be stored somewhere.
    appended: u32,
    /// Checkpointed tokens with the slot they were copied from, oldest first.
    host: Vec<(u32, u32, u32)>,
    /// Blocks in the order the request first wrote to them.
    blocks: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct FlatOracle {
    slots_per_block: u32,
    bidirectional: bool,
    slots: Vec<Option<Token>>,
    reqs: BTreeMap<RequestId, ReqState>,
}

impl FlatOracle {
    pub fn new(num_blocks: u32, slots_per_block: u32, bidirectional: bool) -> Self {
        Self {
            slots_per_block,
            bidirectional,
            slots: vec![None; (num_blocks * slots_per_block) as usize],
            reqs: BTreeMap::new(),
        }
    }

    fn num_blocks(&self) -> u32 {
        self.slots.len() as u32 / self.slots_per_block
    }

    fn at(&self, block: u32, slot: u32) -> Option<Token> {
        self.slots[(block * self.slots_per_block + slot) as usize]
    }

    fn class_of(&self, req: RequestId) -> Option<RequestClass> {
        self.reqs.get(&req).and_then(|r| r.class)
    }

    /// Applies the slots written by a committed plan.
    pub fn apply_commit(&mut self, plan: &AllocationEstimate, out: &CommitOutcome) -> Result<(), String> {
        let req = plan.request;
        if out.written.len() as u32 != plan.total_tokens() {
            return Err(format!("commit wrote {} slots, plan covers {}", out.written.len(), plan.total_tokens()));
        }
        let mut restore: Vec<u32> = {
            let st = self.reqs.entry(req).or_default();
            st.class = Some(plan.class);
            if plan.restore_tokens as usize != st.host.len() {
                return Err(format!("request {req}: plan restores {} tokens, model has {}", plan.restore_tokens, st.host.len()));
            }
            st.host.drain(..).map(|(idx, _, _)| idx).collect()
        };
        restore.reverse();
        for &(block, slot) in &out.written {
            let i = (block * self.slots_per_block + slot) as usize;
            if let Some(prev) = self.slots[i] {
                if plan.class != RequestClass::Rt || self.class_of(prev.req) != Some(RequestClass::Be) {
                    return Err(format!("request {req} wrote over live token of {} at ({block},{slot})", prev.req));
                }
                self.reqs.get_mut(&prev.req).expect("owner known").host.push((prev.idx, block, slot));
            }
            let st = self.reqs.get_mut(&req).expect("inserted above");
            let idx = match restore.pop() {
                Some(idx) => idx,
                None => {
                    st.appended += 1;
                    st.appended - 1
                }
            };
            if !st.blocks.contains(&block) {
                st.blocks.push(block);
            }
            self.slots[i] = Some(Token { req, idx });
        }
        Ok(())
    }

    pub fn release(&mut self, req: RequestId) {
        for s in self.slots.iter_mut() {
            if s.is_some_and(|t| t.req == req) {
                *s = None;
            }
        }
        self.reqs.remove(&req);
    }

    /// Slots an RT request could obtain: free and BE slots of its last block,
    /// plus whole blocks without RT data (any block in bidirectional mode,
    /// only untouched ones otherwise).
    pub fn rt_capacity(&self, req: RequestId) -> u32 {
        let s = self.slots_per_block;
        let mut cap = 0;
        let last = self.reqs.get(&req).and_then(|r| r.blocks.last().copied());
        for b in 0..self.num_blocks() {
            let tokens: Vec<Token> = (0..s).filter_map(|i| self.at(b, i)).collect();
            let rt_used = tokens.iter().filter(|t| self.class_of(t.req) == Some(RequestClass::Rt)).count() as u32;
            if Some(b) == last {
                cap += if self.bidirectional { s - rt_used } else { s - tokens.len() as u32 };
            } else if self.bidirectional {
                if rt_used == 0 {
                    cap += s;
                }
            } else if tokens.is_empty() {
                cap += s;
            }
        }
        cap
    }

    /// Compares the model against the pool slot by slot.
    pub fn check(&self, pool: &BlockPool) -> Result<(), String> {
        let s = self.slots_per_block;
        let mut live: BTreeMap<RequestId, Vec<u32>> = BTreeMap::new();
        for b in 0..self.num_blocks() {
            for i in 0..s {
                let want = self.at(b, i);
                let got = pool.slot_owner(b, i);
                if got != want.map(|t| t.req) {
                    return Err(format!("slot ({b},{i}): pool owner {got:?}, model {want:?}"));
                }
                if let Some(t) = want {
                    live.entry(t.req).or_default().push(t.idx);
                }
            }
        }
        for (&req, st) in &self.reqs {
            let mine = live.remove(&req).unwrap_or_default();
            if pool.gpu_tokens(req) != mine.len() as u32 {
                return Err(format!("request {req}: pool has {} live tokens, model {}", pool.gpu_tokens(req), mine.len()));
            }
            let host: Vec<(u32, u32)> = pool.host_slots(req).iter().map(|h| (h.block, h.slot)).collect();
            let want: Vec<(u32, u32)> = st.host.iter().map(|&(_, b, i)| (b, i)).collect();
            if host != want {
                return Err(format!("request {req}: pool host slots {host:?}, model {want:?}"));
            }
            let mut all: Vec<u32> = mine.into_iter().chain(st.host.iter().map(|h| h.0)).collect();
            all.sort_unstable();
            if all != (0..st.appended).collect::<Vec<_>>() {
                return Err(format!("request {req}: stored token indices {all:?} != 0..{}", st.appended));
            }
        }
        if let Some((req, _)) = live.into_iter().next() {
            return Err(format!("request {req} has slots but the model released it"));
        }
        pool.check_invariants().map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Op {
    Append { req: RequestId, tokens: u32 },
    Release { req: RequestId },
    /// Plans for `req`, appends for `other`, then commits the first plan.
    Stale { req: RequestId, other: RequestId },
}

/// Even ids are RT requests, odd ids BE.
pub fn class_of(req: RequestId) -> RequestClass {
    if req.is_multiple_of(2) {
        RequestClass::Rt
    } else {
        RequestClass::Be
    }
}

pub fn random_op(rng: &mut impl Rng, ids: u64) -> Op {
    let req = rng.random_range(0..ids);
    match rng.random_range(0..20) {
        0..=2 => Op::Release { req },
        3 => Op::Stale {
            req,
            other: rng.random_range(0..ids),
        },
        4..=7 => Op::Append {
            req,
            tokens: rng.random_range(1..=40),
        },
        _ => Op::Append { req, tokens: 1 },
    }
}

/// Executes one op on both sides and compares them.
pub fn step(pool: &mut BlockPool, model: &mut FlatOracle, op: Op) -> Result<(), String> {
    match op {
        Op::Append { req, tokens } => {
            let class = class_of(req);
            let plan = pool.plan(req, class, tokens);
            if class == RequestClass::Rt && plan.is_some() != (tokens <= model.rt_capacity(req)) {
                return Err(format!(
                    "RT {req} needs {tokens}, model capacity {}, pool plan {}",
                    model.rt_capacity(req),
                    plan.is_some()
                ));
            }
            if let Some(plan) = plan {
                let out = pool.commit(&plan).map_err(|e| e.to_string())?;
                model.apply_commit(&plan, &out)?;
            }
        }
        Op::Release { req } => {
            pool.release(req);
            model.release(req);
        }
        Op::Stale { req, other } => {
            let Some(plan) = pool.plan(req, class_of(req), 1) else { return Ok(()) };
            if let Some(p2) = pool.plan(other, class_of(other), 1) {
                let out = pool.commit(&p2).map_err(|e| e.to_string())?;
                model.apply_commit(&p2, &out)?;
            }
            let before = pool.snapshot_json();
            match pool.commit(&plan) {
                Ok(out) => model.apply_commit(&plan, &out)?,
                Err(_) if pool.snapshot_json() == before => {}
                Err(e) => return Err(format!("rejected plan modified the pool: {e}")),
            }
        }
    }
    model.check(pool)
}

/// Runs `ops` random operations; returns the number of checkpointed slots seen.
pub fn stress(seed: u64, ops: usize, num_blocks: u32, slots_per_block: u32, bidirectional: bool) -> Result<usize, String> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut pool = BlockPool::new(num_blocks, slots_per_block, bidirectional);
    let mut model = FlatOracle::new(num_blocks, slots_per_block, bidirectional);
    let mut checkpoints = 0;
    for n in 0..ops {
        let op = random_op(&mut rng, 12);
        let before = model.reqs.values().map(|r| r.host.len()).sum::<usize>();
        step(&mut pool, &mut model, op).map_err(|e| format!("op {n} {op:?}: {e}"))?;
        let after = model.reqs.values().map(|r| r.host.len()).sum::<usize>();
        checkpoints += after.saturating_sub(before);
    }
    Ok(checkpoints)
}
