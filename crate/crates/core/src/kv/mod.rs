//! Bidirectional KV-cache block pool.
//!
//! Every block has `slots_per_block` token slots. An RT request fills a block
//! from the left, a BE request from the right, so one block can hold one RT
//! and one BE request at the same time. When an RT request needs more room it
//! may write over the BE side of a block; each live BE slot about to be
//! overwritten is first copied to the host store (lazy checkpointing) and the
//! block gets a preemption entry until the overlap is resolved.
//!
//! Allocation is two-step: `plan_*` inspects the pool and returns an
//! [`AllocationEstimate`], and [`BlockPool::commit`] applies it. A plan is only
//! valid against the exact state it was computed from.

mod victim;

pub use victim::{drop_until, drop_victims, VictimCandidate};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::KvError;
use crate::request::{RequestClass, RequestId};

pub type BlockId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub id: BlockId,
    pub rt_owner: Option<RequestId>,
    pub be_owner: Option<RequestId>,
    /// Slots `[0, rt_used)` hold RT tokens.
    pub rt_used: u32,
    /// Slots `[S - be_used, S)` belong to the BE side, including any that an RT
    /// write has covered and that now live in the host store.
    pub be_used: u32,
}

impl Block {
    fn new(id: BlockId) -> Self {
        Self {
            id,
            rt_owner: None,
            be_owner: None,
            rt_used: 0,
            be_used: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rt_owner.is_none() && self.be_owner.is_none()
    }

    pub fn overlap(&self, s: u32) -> u32 {
        (self.rt_used + self.be_used).saturating_sub(s)
    }

    pub fn free_slots(&self, s: u32) -> u32 {
        s.saturating_sub(self.rt_used + self.be_used)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTable {
    pub class: RequestClass,
    /// Blocks in allocation order; the last one is where appends continue.
    pub blocks: Vec<BlockId>,
    /// Tokens currently resident on the GPU.
    pub gpu_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreemptionEntry {
    pub rt_req: RequestId,
    pub be_req: RequestId,
    /// Slot range `[start, end)` of BE data covered by RT tokens.
    pub overwritten: (u32, u32),
    /// Handle of the most recent checkpoint taken for this block.
    pub checkpoint: u64,
}

/// One BE slot copied to the host before being overwritten.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostSlot {
    pub block: BlockId,
    pub slot: u32,
    pub handle: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointAction {
    pub victim: RequestId,
    pub by: RequestId,
    pub block: BlockId,
    pub slot: u32,
    pub handle: u64,
}

/// Contiguous slots written in one block. RT runs grow rightwards from
/// `rt_used`, BE runs grow leftwards from `S - be_used`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRun {
    pub block: BlockId,
    pub expect_rt_used: u32,
    pub expect_be_used: u32,
    pub len: u32,
    /// Live BE slots this run overwrites (RT runs only).
    pub overwrite: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationEstimate {
    pub request: RequestId,
    pub class: RequestClass,
    pub new_tokens: u32,
    /// Checkpointed tokens brought back from the host store.
    pub restore_tokens: u32,
    /// Empty blocks claimed.
    pub m_new: u32,
    /// Distinct blocks the restored tokens were checkpointed from.
    pub m_cpu: u32,
    pub runs: Vec<SlotRun>,
}

impl AllocationEstimate {
    pub fn total_tokens(&self) -> u32 {
        self.new_tokens + self.restore_tokens
    }
}

/// Physical slots written by a commit, in write order (restored tokens first).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommitOutcome {
    pub written: Vec<(BlockId, u32)>,
    pub checkpoints: Vec<CheckpointAction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSnapshot {
    #[serde(flatten)]
    pub block: Block,
    pub preemption: Option<PreemptionEntry>,
}

#[derive(Debug, Clone)]
pub struct BlockPool {
    slots_per_block: u32,
    bidirectional: bool,
    blocks: Vec<Block>,
    /// Blocks an RT request may claim, bucketed by free slots.
    rt_index: Vec<BTreeSet<BlockId>>,
    /// Blocks a BE request may claim, bucketed by free slots.
    be_index: Vec<BTreeSet<BlockId>>,
    rt_bucket: Vec<Option<u32>>,
    be_bucket: Vec<Option<u32>>,
    empty: u32,
    tables: BTreeMap<RequestId, BlockTable>,
    preemptions: BTreeMap<BlockId, PreemptionEntry>,
    host: BTreeMap<RequestId, Vec<HostSlot>>,
    next_handle: u64,
}

impl BlockPool {
    /// `bidirectional = false` gives the plain allocator: one owner per block and no preemption.
    pub fn new(num_blocks: u32, slots_per_block: u32, bidirectional: bool) -> Self {
        assert!(slots_per_block > 0, "slots_per_block must be positive");
        let s = slots_per_block as usize;
        let mut pool = Self {
            slots_per_block,
            bidirectional,
            blocks: (0..num_blocks).map(Block::new).collect(),
            rt_index: vec![BTreeSet::new(); s + 1],
            be_index: vec![BTreeSet::new(); s + 1],
            rt_bucket: vec![None; num_blocks as usize],
            be_bucket: vec![None; num_blocks as usize],
            empty: num_blocks,
            tables: BTreeMap::new(),
            preemptions: BTreeMap::new(),
            host: BTreeMap::new(),
            next_handle: 0,
        };
        for b in 0..num_blocks {
            pool.rt_index[s].insert(b);
            pool.be_index[s].insert(b);
            pool.rt_bucket[b as usize] = Some(slots_per_block);
            pool.be_bucket[b as usize] = Some(slots_per_block);
        }
        pool
    }

    pub fn slots_per_block(&self) -> u32 {
        self.slots_per_block
    }

    pub fn num_blocks(&self) -> u32 {
        self.blocks.len() as u32
    }

    pub fn is_bidirectional(&self) -> bool {
        self.bidirectional
    }

    /// Blocks with no owner (M_ept).
    pub fn empty_blocks(&self) -> u32 {
        self.empty
    }

    /// Blocks without an RT owner that an RT request may claim: empty blocks,
    /// plus BE-owned blocks in bidirectional mode.
    pub fn rt_claimable_blocks(&self) -> u32 {
        self.rt_index.iter().map(|b| b.len() as u32).sum()
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id as usize]
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn table(&self, req: RequestId) -> Option<&BlockTable> {
        self.tables.get(&req)
    }

    pub fn holders(&self) -> impl Iterator<Item = (RequestId, &BlockTable)> {
        self.tables.iter().map(|(&k, v)| (k, v))
    }

    pub fn footprint(&self, req: RequestId) -> u32 {
        self.tables.get(&req).map_or(0, |t| t.blocks.len() as u32)
    }

    pub fn gpu_tokens(&self, req: RequestId) -> u32 {
        self.tables.get(&req).map_or(0, |t| t.gpu_tokens)
    }

    pub fn host_tokens(&self, req: RequestId) -> u32 {
        self.host.get(&req).map_or(0, |h| h.len() as u32)
    }

    pub fn host_slots(&self, req: RequestId) -> &[HostSlot] {
        self.host.get(&req).map_or(&[], |h| h.as_slice())
    }

    pub fn preemption(&self, block: BlockId) -> Option<&PreemptionEntry> {
        self.preemptions.get(&block)
    }

    pub fn preemptions(&self) -> impl Iterator<Item = (BlockId, &PreemptionEntry)> {
        self.preemptions.iter().map(|(&k, v)| (k, v))
    }

    /// Tokens stored for `req` on the GPU plus in the host store.
    pub fn stored_tokens(&self, req: RequestId) -> u32 {
        self.gpu_tokens(req) + self.host_tokens(req)
    }

    /// Blocks that must be read back from the host before `req` can run.
    pub fn swap_in_plan(&self, req: RequestId) -> u32 {
        let Some(h) = self.host.get(&req) else { return 0 };
        let blocks: BTreeSet<BlockId> = h.iter().map(|s| s.block).collect();
        blocks.len() as u32
    }

    /// Request whose data physically occupies `slot` of `block`.
    pub fn slot_owner(&self, block: BlockId, slot: u32) -> Option<RequestId> {
        let b = &self.blocks[block as usize];
        if slot < b.rt_used {
            b.rt_owner
        } else if slot >= self.slots_per_block - b.be_used {
            b.be_owner
        } else {
            None
        }
    }

    fn last_own_block(&self, req: RequestId) -> Option<BlockId> {
        self.tables.get(&req).and_then(|t| t.blocks.last().copied())
    }

    fn run(&self, block: BlockId, len: u32, overwrite: u32) -> SlotRun {
        let b = &self.blocks[block as usize];
        SlotRun {
            block,
            expect_rt_used: b.rt_used,
            expect_be_used: b.be_used,
            len,
            overwrite,
        }
    }

    fn finish_plan(&self, req: RequestId, class: RequestClass, new_tokens: u32, m_new: u32, runs: Vec<SlotRun>) -> AllocationEstimate {
        AllocationEstimate {
            request: req,
            class,
            new_tokens,
            restore_tokens: self.host_tokens(req),
            m_new,
            m_cpu: self.swap_in_plan(req),
            runs,
        }
    }

    /// Plans room for `new_tokens` (plus any checkpointed tokens) of a BE request.
    pub fn plan_be(&self, req: RequestId, new_tokens: u32) -> Option<AllocationEstimate> {
        let s = self.slots_per_block;
        let mut rem = new_tokens + self.host_tokens(req);
        let mut runs = Vec::new();
        let mut m_new = 0;
        if rem > 0 {
            if let Some(last) = self.last_own_block(req) {
                let free = self.blocks[last as usize].free_slots(s);
                if free > 0 {
                    let take = free.min(rem);
                    runs.push(self.run(last, take, 0));
                    rem -= take;
                }
            }
        }
        'outer: for free in (1..=s).rev() {
            for &b in &self.be_index[free as usize] {
                if rem == 0 {
                    break 'outer;
                }
                let take = free.min(rem);
                if self.blocks[b as usize].is_empty() {
                    m_new += 1;
                }
                runs.push(self.run(b, take, 0));
                rem -= take;
            }
        }
        (rem == 0).then(|| self.finish_plan(req, RequestClass::Be, new_tokens, m_new, runs))
    }

    /// Plans room for an RT request: own free slots, then empty blocks, then
    /// free slots of BE-only blocks (most free first), then BE slots to overwrite.
    pub fn plan_rt(&self, req: RequestId, new_tokens: u32) -> Option<AllocationEstimate> {
        let s = self.slots_per_block;
        let mut rem = new_tokens + self.host_tokens(req);
        let mut runs = Vec::new();
        let mut m_new = 0;
        let own = self.last_own_block(req);
        let mut own_taken = 0;
        if let Some(last) = own {
            let free = self.blocks[last as usize].free_slots(s);
            own_taken = free.min(rem);
            if own_taken > 0 {
                runs.push(self.run(last, own_taken, 0));
                rem -= own_taken;
            }
        }
        for &b in &self.rt_index[s as usize] {
            if rem == 0 {
                break;
            }
            let take = s.min(rem);
            m_new += 1;
            runs.push(self.run(b, take, 0));
            rem -= take;
        }
        if !self.bidirectional || rem == 0 {
            return (rem == 0).then(|| self.finish_plan(req, RequestClass::Rt, new_tokens, m_new, runs));
        }
        let mut claimed = Vec::new();
        'outer: for free in (1..s).rev() {
            for &b in &self.rt_index[free as usize] {
                if rem == 0 {
                    break 'outer;
                }
                let take = free.min(rem);
                runs.push(self.run(b, take, 0));
                claimed.push((b, take));
                rem -= take;
            }
        }
        if rem == 0 {
            return Some(self.finish_plan(req, RequestClass::Rt, new_tokens, m_new, runs));
        }
        // Overwrite BE slots, starting where this request already writes.
        if let Some(last) = own {
            let b = &self.blocks[last as usize];
            if b.be_owner.is_some() {
                let start = b.rt_used + own_taken;
                let take = (s - start).min(rem);
                if take > 0 {
                    let be_start = s - b.be_used;
                    let overwrite = (start..start + take).filter(|&i| i >= be_start).count() as u32;
                    runs.push(SlotRun {
                        block: last,
                        expect_rt_used: start,
                        expect_be_used: b.be_used,
                        len: take,
                        overwrite,
                    });
                    rem -= take;
                }
            }
        }
        for (b, taken) in claimed {
            if rem == 0 {
                break;
            }
            let blk = &self.blocks[b as usize];
            let take = (s - taken).min(rem);
            runs.push(SlotRun {
                block: b,
                expect_rt_used: taken,
                expect_be_used: blk.be_used,
                len: take,
                overwrite: take,
            });
            rem -= take;
        }
        for &b in &self.rt_index[0] {
            if rem == 0 {
                break;
            }
            let take = s.min(rem);
            runs.push(self.run(b, take, take));
            rem -= take;
        }
        (rem == 0).then(|| self.finish_plan(req, RequestClass::Rt, new_tokens, m_new, runs))
    }

    pub fn plan(&self, req: RequestId, class: RequestClass, new_tokens: u32) -> Option<AllocationEstimate> {
        match class {
            RequestClass::Rt => self.plan_rt(req, new_tokens),
            RequestClass::Be => self.plan_be(req, new_tokens),
        }
    }

    fn stale(req: RequestId, reason: impl Into<String>) -> KvError {
        KvError::StalePlan {
            request: req,
            reason: reason.into(),
        }
    }

    /// Checks one run against a (possibly already partially updated) block.
    fn check_run(&self, b: &Block, run: &SlotRun, req: RequestId, class: RequestClass) -> Result<(), KvError> {
        let s = self.slots_per_block;
        if b.rt_used != run.expect_rt_used || b.be_used != run.expect_be_used {
            return Err(Self::stale(
                req,
                format!(
                    "block {} has rt_used={} be_used={}, plan expected {} and {}",
                    b.id, b.rt_used, b.be_used, run.expect_rt_used, run.expect_be_used
                ),
            ));
        }
        match class {
            RequestClass::Rt => {
                if b.rt_owner.is_some_and(|o| o != req) {
                    return Err(Self::stale(req, format!("block {} has another RT owner", b.id)));
                }
                if !self.bidirectional && b.be_owner.is_some() {
                    return Err(Self::stale(req, format!("block {} is BE-owned", b.id)));
                }
                if b.rt_used + run.len > s {
                    return Err(Self::stale(req, format!("block {} lacks room", b.id)));
                }
                let be_start = s - b.be_used;
                let overwrite = (b.rt_used..b.rt_used + run.len).filter(|&i| i >= be_start).count() as u32;
                if overwrite != run.overwrite {
                    return Err(Self::stale(req, format!("block {} overwrite count changed", b.id)));
                }
                if overwrite > 0 && !self.bidirectional {
                    return Err(Self::stale(req, "overwrite planned in exclusive mode"));
                }
                if overwrite > 0 && self.preemptions.get(&b.id).is_some_and(|e| e.rt_req != req) {
                    return Err(Self::stale(req, format!("block {} preempted by another request", b.id)));
                }
            }
            RequestClass::Be => {
                if b.be_owner.is_some_and(|o| o != req) {
                    return Err(Self::stale(req, format!("block {} has another BE owner", b.id)));
                }
                if !self.bidirectional && b.rt_owner.is_some() {
                    return Err(Self::stale(req, format!("block {} is RT-owned", b.id)));
                }
                if b.rt_used + b.be_used + run.len > s || run.overwrite != 0 {
                    return Err(Self::stale(req, format!("block {} lacks free slots", b.id)));
                }
            }
        }
        Ok(())
    }

    /// Applies a plan. Nothing is modified if the plan does not match the pool.
    pub fn commit(&mut self, plan: &AllocationEstimate) -> Result<CommitOutcome, KvError> {
        let req = plan.request;
        let class = plan.class;
        if let Some(t) = self.tables.get(&req) {
            if t.class != class {
                return Err(Self::stale(req, "class does not match existing block table"));
            }
        }
        if plan.restore_tokens != self.host_tokens(req) {
            return Err(Self::stale(req, "host store changed since planning"));
        }
        let total: u32 = plan.runs.iter().map(|r| r.len).sum();
        if total != plan.total_tokens() {
            return Err(Self::stale(req, "runs do not cover the planned tokens"));
        }
        // Validation pass on scratch copies of the touched blocks.
        let mut scratch: BTreeMap<BlockId, Block> = BTreeMap::new();
        for run in &plan.runs {
            let idx = run.block as usize;
            if idx >= self.blocks.len() {
                return Err(Self::stale(req, format!("block {} does not exist", run.block)));
            }
            let b = scratch.entry(run.block).or_insert_with(|| self.blocks[idx].clone());
            self.check_run(b, run, req, class)?;
            match class {
                RequestClass::Rt => {
                    b.rt_owner = Some(req);
                    b.rt_used += run.len;
                }
                RequestClass::Be => {
                    b.be_owner = Some(req);
                    b.be_used += run.len;
                }
            }
        }

        if class == RequestClass::Be {
            self.resolve_overlaps_of_be(req);
            self.host.remove(&req);
        }
        let s = self.slots_per_block;
        let mut out = CommitOutcome::default();
        for run in &plan.runs {
            let bid = run.block;
            let (start, be_start, victim) = {
                let b = &self.blocks[bid as usize];
                (
                    match class {
                        RequestClass::Rt => b.rt_used,
                        RequestClass::Be => s - b.be_used,
                    },
                    s - b.be_used,
                    b.be_owner,
                )
            };
            let mut victim_loss = 0;
            for k in 0..run.len {
                let slot = match class {
                    RequestClass::Rt => start + k,
                    RequestClass::Be => start - 1 - k,
                };
                out.written.push((bid, slot));
                if class == RequestClass::Rt && slot >= be_start {
                    let victim = victim.expect("overwritten slot has a BE owner");
                    let handle = self.next_handle;
                    self.next_handle += 1;
                    self.host.entry(victim).or_default().push(HostSlot {
                        block: bid,
                        slot,
                        handle,
                    });
                    out.checkpoints.push(CheckpointAction {
                        victim,
                        by: req,
                        block: bid,
                        slot,
                        handle,
                    });
                    victim_loss += 1;
                }
            }
            {
                let b = &mut self.blocks[bid as usize];
                match class {
                    RequestClass::Rt => {
                        b.rt_owner = Some(req);
                        b.rt_used += run.len;
                    }
                    RequestClass::Be => {
                        b.be_owner = Some(req);
                        b.be_used += run.len;
                    }
                }
            }
            if victim_loss > 0 {
                let victim = victim.expect("victim present");
                self.tables.get_mut(&victim).expect("victim has table").gpu_tokens -= victim_loss;
                let b = &self.blocks[bid as usize];
                let handle = out.checkpoints.last().map_or(0, |c| c.handle);
                self.preemptions.insert(
                    bid,
                    PreemptionEntry {
                        rt_req: req,
                        be_req: victim,
                        overwritten: (s - b.be_used, b.rt_used),
                        checkpoint: handle,
                    },
                );
            }
            let table = self.tables.entry(req).or_insert_with(|| BlockTable {
                class,
                blocks: Vec::new(),
                gpu_tokens: 0,
            });
            if !table.blocks.contains(&bid) {
                table.blocks.push(bid);
            }
            table.gpu_tokens += run.len;
            self.reindex(bid);
        }
        Ok(out)
    }

    /// Drops BE slots that RT data still covers; their content is in the host store.
    fn resolve_overlaps_of_be(&mut self, req: RequestId) {
        let blocks: Vec<BlockId> = self
            .preemptions
            .iter()
            .filter(|(_, e)| e.be_req == req)
            .map(|(&b, _)| b)
            .collect();
        for bid in blocks {
            self.shrink_be_overlap(bid);
        }
    }

    fn shrink_be_overlap(&mut self, bid: BlockId) {
        let s = self.slots_per_block;
        self.preemptions.remove(&bid);
        let b = &mut self.blocks[bid as usize];
        let ov = b.overlap(s);
        b.be_used -= ov;
        if b.be_used == 0 {
            if let Some(be) = b.be_owner.take() {
                if let Some(t) = self.tables.get_mut(&be) {
                    t.blocks.retain(|&x| x != bid);
                }
            }
        }
        self.reindex(bid);
    }

    /// Frees everything `req` holds. Checkpointed data of a BE peer stays in the host store.
    pub fn release(&mut self, req: RequestId) {
        let Some(table) = self.tables.remove(&req) else {
            self.host.remove(&req);
            return;
        };
        match table.class {
            RequestClass::Rt => {
                for bid in table.blocks {
                    if self.preemptions.get(&bid).is_some_and(|e| e.rt_req == req) {
                        // The covered BE slots are gone from the GPU for good.
                        let s = self.slots_per_block;
                        let b = &mut self.blocks[bid as usize];
                        b.be_used -= b.overlap(s);
                        self.preemptions.remove(&bid);
                    }
                    let b = &mut self.blocks[bid as usize];
                    b.rt_owner = None;
                    b.rt_used = 0;
                    if b.be_used == 0 {
                        if let Some(be) = b.be_owner.take() {
                            if let Some(t) = self.tables.get_mut(&be) {
                                t.blocks.retain(|&x| x != bid);
                            }
                        }
                    }
                    self.reindex(bid);
                }
            }
            RequestClass::Be => {
                for bid in table.blocks {
                    self.preemptions.remove(&bid);
                    let b = &mut self.blocks[bid as usize];
                    b.be_owner = None;
                    b.be_used = 0;
                    self.reindex(bid);
                }
                self.host.remove(&req);
            }
        }
    }

    fn reindex(&mut self, bid: BlockId) {
        let s = self.slots_per_block;
        let i = bid as usize;
        let b = &self.blocks[i];
        let free = b.free_slots(s);
        let rt_ok = b.rt_owner.is_none() && (self.bidirectional || b.be_owner.is_none());
        let be_ok = b.be_owner.is_none() && (self.bidirectional || b.rt_owner.is_none());
        let was_empty = self.rt_bucket[i] == Some(s) && self.be_bucket[i] == Some(s);
        let now_empty = b.is_empty();
        let rt_new = rt_ok.then_some(free);
        let be_new = be_ok.then_some(free);
        if self.rt_bucket[i] != rt_new {
            if let Some(old) = self.rt_bucket[i] {
                self.rt_index[old as usize].remove(&bid);
            }
            if let Some(new) = rt_new {
                self.rt_index[new as usize].insert(bid);
            }
            self.rt_bucket[i] = rt_new;
        }
        if self.be_bucket[i] != be_new {
            if let Some(old) = self.be_bucket[i] {
                self.be_index[old as usize].remove(&bid);
            }
            if let Some(new) = be_new {
                self.be_index[new as usize].insert(bid);
            }
            self.be_bucket[i] = be_new;
        }
        match (was_empty, now_empty) {
            (true, false) => self.empty -= 1,
            (false, true) => self.empty += 1,
            _ => {}
        }
    }

    pub fn snapshot(&self) -> Vec<BlockSnapshot> {
        self.blocks
            .iter()
            .map(|b| BlockSnapshot {
                block: b.clone(),
                preemption: self.preemptions.get(&b.id).cloned(),
            })
            .collect()
    }

    pub fn snapshot_json(&self) -> String {
        serde_json::to_string(&self.snapshot()).expect("snapshot serializes")
    }

    /// Full consistency check; meant for tests and diagnostic runs.
    pub fn check_invariants(&self) -> Result<(), KvError> {
        let s = self.slots_per_block;
        let bad = |m: String| Err(KvError::Invariant(m));
        let mut empty = 0;
        let mut per_req: BTreeMap<RequestId, (Vec<BlockId>, u32)> = BTreeMap::new();
        for b in &self.blocks {
            if b.is_empty() {
                empty += 1;
            }
            if b.rt_owner.is_none() && b.rt_used != 0 || b.rt_owner.is_some() && b.rt_used == 0 {
                return bad(format!("block {} rt owner/used mismatch", b.id));
            }
            if b.be_owner.is_none() && b.be_used != 0 || b.be_owner.is_some() && b.be_used == 0 {
                return bad(format!("block {} be owner/used mismatch", b.id));
            }
            if b.rt_used > s || b.be_used > s {
                return bad(format!("block {} overfull", b.id));
            }
            let ov = b.overlap(s);
            match self.preemptions.get(&b.id) {
                Some(e) => {
                    if ov == 0 || Some(e.rt_req) != b.rt_owner || Some(e.be_req) != b.be_owner {
                        return bad(format!("block {} stale preemption entry", b.id));
                    }
                    if e.overwritten != (s - b.be_used, b.rt_used) {
                        return bad(format!("block {} preemption range mismatch", b.id));
                    }
                }
                None if ov > 0 => return bad(format!("block {} overlaps without entry", b.id)),
                None => {}
            }
            if !self.bidirectional && b.rt_owner.is_some() && b.be_owner.is_some() {
                return bad(format!("block {} shared in exclusive mode", b.id));
            }
            if let Some(r) = b.rt_owner {
                let e = per_req.entry(r).or_default();
                e.0.push(b.id);
                e.1 += b.rt_used;
            }
            if let Some(r) = b.be_owner {
                let e = per_req.entry(r).or_default();
                e.0.push(b.id);
                e.1 += b.be_used - ov;
            }
            let i = b.id as usize;
            let free = b.free_slots(s);
            let rt_ok = b.rt_owner.is_none() && (self.bidirectional || b.be_owner.is_none());
            let be_ok = b.be_owner.is_none() && (self.bidirectional || b.rt_owner.is_none());
            if self.rt_bucket[i] != rt_ok.then_some(free) || self.be_bucket[i] != be_ok.then_some(free) {
                return bad(format!("block {} free-slot index is stale", b.id));
            }
        }
        if empty != self.empty {
            return bad(format!("empty count {} != {}", self.empty, empty));
        }
        let indexed: usize = self.rt_index.iter().map(|x| x.len()).sum();
        if indexed != self.rt_bucket.iter().filter(|x| x.is_some()).count() {
            return bad("rt index size mismatch".into());
        }
        for (r, t) in &self.tables {
            let (mut blocks, tokens) = per_req.remove(r).unwrap_or_default();
            let mut listed = t.blocks.clone();
            blocks.sort_unstable();
            listed.sort_unstable();
            if blocks != listed {
                return bad(format!("request {r} block table disagrees with owners"));
            }
            if tokens != t.gpu_tokens {
                return bad(format!("request {r} stores {} tokens, table says {}", tokens, t.gpu_tokens));
            }
        }
        if let Some((r, _)) = per_req.into_iter().next() {
            return bad(format!("request {r} owns blocks without a table"));
        }
        for (r, h) in &self.host {
            let is_be = self.tables.get(r).is_some_and(|t| t.class == RequestClass::Be);
            if !h.is_empty() && !is_be {
                return bad(format!("host store holds data of request {r} without a BE table"));
            }
        }
        Ok(())
    }
}
