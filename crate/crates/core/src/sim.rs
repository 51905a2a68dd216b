//! Discrete-event engine: admit arrivals, schedule, commit allocations,
//! advance the clock by the predicted iteration time, emit tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost_model::CostModels;
use crate::error::{ContractViolation, KvError, SimError};
use crate::kv::{BlockPool, CheckpointAction};
use crate::metrics::{self, MetricsReport};
use crate::queue::{QueueSet, Requests};
use crate::request::{advance_token_group, Phase, Request, RequestClass, RequestId, SloConfig};
use crate::scheduler::baseline::full_footprint;
use crate::scheduler::{
    adapt_batch_size, iteration_entry, schedule_fcfs, schedule_packing, schedule_round_robin, BaselineParams,
    SchedInput, ScheduleDecision, SchedulerKind, SchedulerState,
};
use crate::workload::{Arrival, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub scheduler: SchedulerKind,
    pub slo: SloConfig,
    pub num_blocks: u32,
    pub slots_per_block: u32,
    /// Share blocks between one RT and one BE request. Only the packing
    /// scheduler uses it; the baselines always run on an exclusive pool.
    pub bidirectional: bool,
    pub models: CostModels,
    pub horizon_us: u64,
    pub seed: u64,
    pub b_base: u32,
    pub b_max: u32,
    pub baseline: BaselineParams,
    pub t_avg_decay: f64,
    /// Fixed per-iteration scheduling overhead added to the clock.
    pub overhead_us: u64,
    /// Check pool, token and queue invariants after every step.
    pub diagnostics: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scheduler: SchedulerKind::Packing,
            slo: SloConfig::default(),
            num_blocks: 2048,
            slots_per_block: 16,
            bidirectional: true,
            models: CostModels::default(),
            horizon_us: 600_000_000,
            seed: 0,
            b_base: 128,
            b_max: 2048,
            baseline: BaselineParams::default(),
            t_avg_decay: 0.9,
            overhead_us: 0,
            diagnostics: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        self.slo.validate().map_err(|e| SimError::Config(e.0))?;
        if self.horizon_us == 0 {
            return bad("horizon must be positive");
        }
        if self.num_blocks == 0 || self.slots_per_block == 0 {
            return bad("pool needs at least one block with at least one slot");
        }
        if self.b_base == 0 || self.baseline.cap == 0 {
            return bad("batch caps must be positive");
        }
        if !(0.0..=1.0).contains(&self.t_avg_decay) {
            return bad("t_avg_decay must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub id: RequestId,
    pub class: RequestClass,
    pub prefill: bool,
    pub l_n: u32,
    pub l_a: u32,
}

/// One iteration. Every batched request emits one token at `end_us`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u64,
    pub start_us: u64,
    pub end_us: u64,
    pub b_curr: u32,
    pub batch: Vec<BatchItem>,
    pub estimated_us: u64,
    pub swap_blocks: u32,
    pub t_min_res: Option<i64>,
    pub degenerate: bool,
    pub empty_blocks: u32,
    pub m_new: u32,
    pub dropped: Vec<RequestId>,
    pub replaced: Vec<RequestId>,
    pub checkpoints: Vec<CheckpointAction>,
    pub finished: Vec<RequestId>,
    /// BE wave members released at `end_us`.
    pub released: Vec<RequestId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLog {
    pub horizon_us: u64,
    pub records: Vec<IterationRecord>,
}

impl EventLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, horizon_us: u64) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { horizon_us, records })
    }

    /// SHA-256 of the JSON Lines export, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn tokens_emitted(&self, id: RequestId) -> usize {
        self.records.iter().filter(|r| r.batch.iter().any(|b| b.id == id)).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Iteration,
    /// Nothing runnable; the clock jumped to the next arrival.
    Idle,
    /// A deadlocked pool was relieved by dropping a BE request.
    Recovered(RequestId),
    Done,
}

pub struct Simulation {
    config: SimConfig,
    trace: Trace,
    requests: Requests,
    queues: QueueSet,
    pool: BlockPool,
    state: SchedulerState,
    rr_turn: RequestClass,
    clock: u64,
    /// Timed arrivals sorted by (time, id) and the index of the next one.
    timed: Vec<(u64, RequestId)>,
    next_timed: usize,
    waves: BTreeMap<u32, Vec<RequestId>>,
    wave_of: BTreeMap<RequestId, u32>,
    wave_left: BTreeMap<u32, usize>,
    /// Drops made outside an iteration, reported with the next record.
    carried_drops: Vec<RequestId>,
    log: EventLog,
}

impl Simulation {
    pub fn new(config: SimConfig, trace: &Trace) -> Result<Self, SimError> {
        config.validate()?;
        trace.validate().map_err(|e| SimError::Config(e.to_string()))?;
        let requests = Requests::new(trace.to_requests(config.slo.token_group_size))?;
        for r in requests.iter() {
            let need = full_footprint(r, config.slots_per_block);
            if need > config.num_blocks {
                return Err(SimError::Config(format!(
                    "request {} needs {need} blocks but the pool has {}",
                    r.id, config.num_blocks
                )));
            }
        }
        let mut timed = Vec::new();
        let mut waves: BTreeMap<u32, Vec<RequestId>> = BTreeMap::new();
        let mut wave_of = BTreeMap::new();
        for (i, e) in trace.entries.iter().enumerate() {
            let id = i as RequestId;
            match e.arrival {
                Arrival::At(t) => timed.push((t, id)),
                Arrival::Wave(k) => {
                    waves.entry(k).or_default().push(id);
                    wave_of.insert(id, k);
                }
            }
        }
        timed.sort_unstable();
        let wave_left = waves.iter().map(|(&k, v)| (k, v.len())).collect();
        let bidirectional = config.bidirectional && config.scheduler == SchedulerKind::Packing;
        let mut sim = Self {
            pool: BlockPool::new(config.num_blocks, config.slots_per_block, bidirectional),
            state: SchedulerState::new(config.b_base, config.b_max),
            log: EventLog {
                horizon_us: config.horizon_us,
                records: Vec::new(),
            },
            config,
            trace: trace.clone(),
            requests,
            queues: QueueSet::default(),
            rr_turn: RequestClass::Rt,
            clock: 0,
            timed,
            next_timed: 0,
            waves,
            wave_of,
            wave_left,
            carried_drops: Vec::new(),
        };
        if let Some(&first) = sim.waves.keys().next() {
            sim.release_wave(first, 0);
        }
        Ok(sim)
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn requests(&self) -> &Requests {
        &self.requests
    }

    pub fn queues(&self) -> &QueueSet {
        &self.queues
    }

    pub fn pool(&self) -> &BlockPool {
        &self.pool
    }

    pub fn scheduler_state(&self) -> &SchedulerState {
        &self.state
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn into_log(self) -> EventLog {
        self.log
    }

    fn release_wave(&mut self, k: u32, now: u64) -> Vec<RequestId> {
        let ids = self.waves.get(&k).cloned().unwrap_or_default();
        let g = self.config.slo.token_group_size;
        for &id in &ids {
            let r = self.requests.get(id);
            *self.requests.get_mut(id) = Request::new(id, r.class, now, r.prompt_len, r.target_output_len, g);
            self.queues.push_waiting(self.requests.get(id), &self.requests);
        }
        ids
    }

    fn admit_arrivals(&mut self) {
        while let Some(&(t, id)) = self.timed.get(self.next_timed) {
            if t > self.clock {
                break;
            }
            self.queues.push_waiting(self.requests.get(id), &self.requests);
            self.next_timed += 1;
        }
    }

    fn next_arrival(&self) -> Option<u64> {
        self.timed.get(self.next_timed).map(|&(t, _)| t)
    }

    pub fn is_done(&self) -> bool {
        self.clock >= self.config.horizon_us || (self.queues.is_empty() && self.next_arrival().is_none())
    }

    fn drop_request(&mut self, id: RequestId) {
        self.pool.release(id);
        let r = self.requests.get_mut(id);
        r.kv_tokens = 0;
        r.recomputes += 1;
        r.phase = Phase::Dropped;
        let class = r.class;
        self.queues.remove(id, class);
        self.queues.push_waiting(self.requests.get(id), &self.requests);
    }

    fn decide(&mut self) -> Result<ScheduleDecision, SimError> {
        let inp = SchedInput {
            requests: &self.requests,
            queues: &self.queues,
            pool: &self.pool,
            models: &self.config.models,
            slo: &self.config.slo,
            now: self.clock,
        };
        match self.config.scheduler {
            SchedulerKind::Packing => schedule_packing(&inp, &self.state),
            SchedulerKind::Fcfs => schedule_fcfs(&inp, &self.config.baseline),
            SchedulerKind::RoundRobin => schedule_round_robin(&inp, &self.config.baseline, &mut self.rr_turn),
        }
    }

    pub fn step(&mut self) -> Result<StepOutcome, SimError> {
        self.step_observed(&mut |_, _, _| {})
    }

    /// Runs one loop body. `observe` sees the scheduler input and decision
    /// before the decision is applied.
    pub fn step_observed(
        &mut self,
        observe: &mut dyn FnMut(&SchedInput, &SchedulerState, &ScheduleDecision),
    ) -> Result<StepOutcome, SimError> {
        if self.is_done() {
            return Ok(StepOutcome::Done);
        }
        self.admit_arrivals();
        if self.queues.is_empty() {
            return Ok(match self.next_arrival() {
                Some(t) => {
                    self.clock = t;
                    StepOutcome::Idle
                }
                None => StepOutcome::Done,
            });
        }

        let dec = self.decide()?;
        observe(
            &SchedInput {
                requests: &self.requests,
                queues: &self.queues,
                pool: &self.pool,
                models: &self.config.models,
                slo: &self.config.slo,
                now: self.clock,
            },
            &self.state,
            &dec,
        );
        if dec.is_empty() {
            for &d in &dec.dropped {
                self.drop_request(d);
                self.carried_drops.push(d);
            }
            return self.recover_or_wait();
        }

        let mut dropped = std::mem::take(&mut self.carried_drops);
        let mut checkpoints = Vec::new();
        for (i, plan) in dec.plans.iter().enumerate() {
            for (&d, _) in dec.dropped.iter().zip(&dec.drop_points).filter(|(_, &p)| p == i) {
                self.drop_request(d);
                dropped.push(d);
            }
            checkpoints.extend(self.pool.commit(plan)?.checkpoints);
        }
        for (&d, _) in dec.dropped.iter().zip(&dec.drop_points).filter(|(_, &p)| p >= dec.plans.len()) {
            self.drop_request(d);
            dropped.push(d);
        }

        let start = self.clock;
        let elapsed = dec.estimated_time.max(1) + self.config.overhead_us;
        let end = start + elapsed;
        let g = self.config.slo.token_group_size;
        let mut batch = Vec::with_capacity(dec.len());
        let mut finished = Vec::new();
        let mut released = Vec::new();
        for id in dec.batch() {
            let req = self.requests.get_mut(id);
            let (entry, new_tokens) = iteration_entry(req);
            let prefill = req.needs_prefill();
            batch.push(BatchItem {
                id,
                class: req.class,
                prefill,
                l_n: entry.l_n,
                l_a: entry.l_a,
            });
            req.kv_tokens += new_tokens;
            let out = advance_token_group(req, end, g)?;
            let class = req.class;
            if out.finished {
                self.pool.release(id);
                self.queues.remove(id, class);
                finished.push(id);
                if let Some(&k) = self.wave_of.get(&id) {
                    let left = self.wave_left.get_mut(&k).expect("wave count");
                    *left -= 1;
                    if *left == 0 {
                        if let Some((&next, _)) = self.waves.range(k + 1..).next() {
                            released.extend(self.release_wave(next, end));
                        }
                    }
                }
            } else {
                req.phase = Phase::Pending;
                if prefill {
                    self.queues.remove(id, class);
                    self.queues.push_pending(self.requests.get(id));
                }
            }
        }

        self.clock = end;
        self.state.t_avg = crate::cost_model::update_t_avg(self.state.t_avg, elapsed, self.config.t_avg_decay);
        let b_curr = self.state.b_curr;
        if self.config.scheduler == SchedulerKind::Packing {
            self.state = adapt_batch_size(self.state, dec.saw_rt, dec.overran());
        }
        self.log.records.push(IterationRecord {
            index: self.log.records.len() as u64,
            start_us: start,
            end_us: end,
            b_curr,
            batch,
            estimated_us: dec.estimated_time,
            swap_blocks: dec.swap_blocks_total,
            t_min_res: dec.t_min_res,
            degenerate: dec.degenerate,
            empty_blocks: dec.empty_blocks,
            m_new: dec.m_new_total,
            dropped,
            replaced: dec.replaced.clone(),
            checkpoints,
            finished,
            released,
        });
        if self.config.diagnostics {
            self.check_invariants()?;
        }
        Ok(StepOutcome::Iteration)
    }

    /// Nothing could be scheduled. If requests hold blocks the pool is
    /// deadlocked and the BE request holding the most blocks is dropped;
    /// otherwise the clock jumps to the next arrival.
    fn recover_or_wait(&mut self) -> Result<StepOutcome, SimError> {
        let victim = self
            .pool
            .holders()
            .map(|(id, t)| (t.class == RequestClass::Be, t.blocks.len(), id))
            .max();
        if let Some((_, _, id)) = victim {
            self.drop_request(id);
            self.carried_drops.push(id);
            return Ok(StepOutcome::Recovered(id));
        }
        match self.next_arrival() {
            Some(t) => {
                self.clock = t;
                Ok(StepOutcome::Idle)
            }
            None => Err(SimError::Stalled {
                clock_us: self.clock,
                reason: format!("{} queued requests cannot be scheduled on an empty pool", self.queues.len()),
            }),
        }
    }

    /// Pool invariants, stored tokens per request and queue membership.
    pub fn check_invariants(&self) -> Result<(), SimError> {
        self.pool.check_invariants()?;
        for r in self.requests.iter().filter(|r| !r.is_finished()) {
            let stored = self.pool.stored_tokens(r.id);
            if stored != r.kv_tokens {
                return Err(KvError::Invariant(format!(
                    "request {} stores {stored} tokens but has {} KV tokens",
                    r.id, r.kv_tokens
                ))
                .into());
            }
            let queued = self.queues.contains(r.id);
            if r.kv_tokens > 0 && !queued {
                return Err(ContractViolation(format!("request {} queue membership is inconsistent", r.id)).into());
            }
        }
        Ok(())
    }

    pub fn run_to_end(mut self) -> Result<EventLog, SimError> {
        while self.step()? != StepOutcome::Done {}
        Ok(self.log)
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }
}

pub fn run(config: &SimConfig, trace: &Trace) -> Result<(EventLog, MetricsReport), SimError> {
    let log = Simulation::new(config.clone(), trace)?.run_to_end()?;
    let report = metrics::compute(&log, trace, &config.slo).map_err(|e| SimError::Config(e.to_string()))?;
    Ok((log, report))
}
