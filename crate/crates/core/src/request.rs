//! Request and SLO domain types.
//!
//! All times are integer microseconds. A request's output is split into token
//! groups; the first group is due `ttft_target` after arrival and every later
//! group is due `tpot_target * len` after the previous group completed.

use serde::{Deserialize, Serialize};

use crate::error::ContractViolation;

pub type RequestId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestClass {
    /// Latency-sensitive request with TTFT/TPOT deadlines.
    Rt,
    /// Throughput-oriented request without deadlines.
    Be,
}

impl RequestClass {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestClass::Rt => "rt",
            RequestClass::Be => "be",
        }
    }
}

impl std::str::FromStr for RequestClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rt" => Ok(RequestClass::Rt),
            "be" => Ok(RequestClass::Be),
            other => Err(format!("unknown request class '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Queued without any KV cache (never run, or dropped for recompute).
    Waiting,
    /// Has KV cache and waits for its next decode iteration.
    Pending,
    Running,
    Finished,
    /// Lost its KV cache and waits in the waiting queue for recompute.
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SloConfig {
    pub ttft_target: u64,
    pub tpot_target: u64,
    pub token_group_size: u32,
}

impl Default for SloConfig {
    fn default() -> Self {
        Self {
            ttft_target: 400_000,
            tpot_target: 200_000,
            token_group_size: 1,
        }
    }
}

impl SloConfig {
    pub fn validate(&self) -> Result<(), ContractViolation> {
        if self.ttft_target == 0 || self.tpot_target == 0 {
            return Err(ContractViolation("SLO targets must be positive".into()));
        }
        if self.token_group_size == 0 {
            return Err(ContractViolation("token_group_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Deadline budget of a group of `len` tokens.
    pub fn group_target(&self, contains_first_token: bool, len: u32) -> u64 {
        if contains_first_token {
            self.ttft_target
        } else {
            self.tpot_target * u64::from(len)
        }
    }
}

/// Result of emitting one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenOutcome {
    pub group_completed: bool,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub class: RequestClass,
    pub arrival_time: u64,
    pub prompt_len: u32,
    pub target_output_len: u32,
    pub generated: u32,
    pub phase: Phase,
    pub last_token_emit_time: Option<u64>,
    /// Tokens left in the current group (k_i).
    pub group_remaining: u32,
    /// Size of the current group.
    pub group_len: u32,
    /// Start of the current group's deadline window; t_i = now - group_anchor.
    pub group_anchor: u64,
    /// Tokens whose KV entries exist (GPU or host). Zero means the next run is a prefill.
    pub kv_tokens: u32,
    /// Times this request lost its KV cache and had to be recomputed.
    pub recomputes: u32,
}

impl Request {
    pub fn new(
        id: RequestId,
        class: RequestClass,
        arrival_time: u64,
        prompt_len: u32,
        target_output_len: u32,
        group_size: u32,
    ) -> Self {
        let group_len = group_size.max(1).min(target_output_len);
        Self {
            id,
            class,
            arrival_time,
            prompt_len,
            target_output_len,
            generated: 0,
            phase: Phase::Waiting,
            last_token_emit_time: None,
            group_remaining: group_len,
            group_len,
            group_anchor: arrival_time,
            kv_tokens: 0,
            recomputes: 0,
        }
    }

    pub fn context_len(&self) -> u32 {
        self.prompt_len + self.generated
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Finished
    }

    pub fn has_kv(&self) -> bool {
        self.kv_tokens > 0
    }

    /// True when the next iteration of this request is a (re)prefill.
    pub fn needs_prefill(&self) -> bool {
        self.kv_tokens == 0
    }

    /// (new tokens L^n, attended context L^a) of this request's next iteration.
    pub fn next_iteration_shape(&self) -> (u32, u32) {
        if self.needs_prefill() {
            let n = self.context_len();
            (n, n)
        } else {
            (1, self.context_len())
        }
    }

    /// Whether the current group includes the first output token.
    pub fn group_has_first_token(&self) -> bool {
        self.generated + self.group_remaining == self.group_len
    }

    pub fn group_elapsed(&self, now: u64) -> u64 {
        now.saturating_sub(self.group_anchor)
    }

    /// Absolute deadline of the current group.
    pub fn group_deadline(&self, slo: &SloConfig) -> u64 {
        self.group_anchor + slo.group_target(self.group_has_first_token(), self.group_len)
    }

    pub fn priority_key(&self, slo: &SloConfig, t_avg: u64, now: u64) -> Result<PriorityKey, ContractViolation> {
        Ok(PriorityKey {
            remaining: remaining_time(self, slo, t_avg, now)?,
            arrival: self.arrival_time,
            id: self.id,
        })
    }
}

/// Lexicographic scheduling priority of an RT request; smaller is more urgent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PriorityKey {
    pub remaining: i64,
    pub arrival: u64,
    pub id: RequestId,
}

/// Slack left before the current group misses its deadline, assuming the
/// remaining `k - 1` tokens of the group each take `t_avg`.
pub fn remaining_time(req: &Request, slo: &SloConfig, t_avg: u64, now: u64) -> Result<i64, ContractViolation> {
    if req.class != RequestClass::Rt {
        return Err(ContractViolation(format!("remaining_time called on BE request {}", req.id)));
    }
    if req.is_finished() {
        return Err(ContractViolation(format!("remaining_time called on finished request {}", req.id)));
    }
    let target = slo.group_target(req.group_has_first_token(), req.group_len) as i64;
    let elapsed = req.group_elapsed(now) as i64;
    let k = i64::from(req.group_remaining.max(1));
    Ok(target - elapsed - (k - 1) * t_avg as i64)
}

/// Book-keeping for one emitted token at time `now`.
pub fn advance_token_group(req: &mut Request, now: u64, group_size: u32) -> Result<TokenOutcome, ContractViolation> {
    if req.is_finished() {
        return Err(ContractViolation(format!("request {} already finished", req.id)));
    }
    if req.generated >= req.target_output_len || req.group_remaining == 0 {
        return Err(ContractViolation(format!("request {} has no token left to emit", req.id)));
    }
    req.generated += 1;
    req.group_remaining -= 1;
    req.last_token_emit_time = Some(now);
    let mut outcome = TokenOutcome {
        group_completed: false,
        finished: false,
    };
    if req.group_remaining == 0 {
        outcome.group_completed = true;
        req.group_anchor = now;
        let len = group_size.max(1).min(req.target_output_len - req.generated);
        req.group_len = len;
        req.group_remaining = len;
    }
    if req.generated == req.target_output_len {
        req.phase = Phase::Finished;
        outcome.finished = true;
    }
    Ok(outcome)
}
