//! Request table, per-class queues and priority-ordered pulling of RT requests.

use std::collections::VecDeque;

use crate::error::ContractViolation;
use crate::request::{PriorityKey, Request, RequestClass, RequestId, SloConfig};

/// Dense request storage indexed by id.
#[derive(Debug, Clone, Default)]
pub struct Requests {
    items: Vec<Request>,
}

impl Requests {
    pub fn new(items: Vec<Request>) -> Result<Self, ContractViolation> {
        for (i, r) in items.iter().enumerate() {
            if r.id != i as RequestId {
                return Err(ContractViolation(format!("request at index {i} has id {}", r.id)));
            }
        }
        Ok(Self { items })
    }

    pub fn get(&self, id: RequestId) -> &Request {
        &self.items[id as usize]
    }

    pub fn get_mut(&mut self, id: RequestId) -> &mut Request {
        &mut self.items[id as usize]
    }

    pub fn try_get(&self, id: RequestId) -> Option<&Request> {
        self.items.get(id as usize)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Request> {
        self.items.iter()
    }
}

/// Waiting queues hold requests without KV cache, pending queues hold requests
/// that already have KV cache and wait for their next decode step.
#[derive(Debug, Clone, Default)]
pub struct QueueSet {
    pub rt_waiting: VecDeque<RequestId>,
    pub rt_pending: Vec<RequestId>,
    pub be_waiting: VecDeque<RequestId>,
    pub be_pending: Vec<RequestId>,
}

impl QueueSet {
    pub fn len(&self) -> usize {
        self.rt_waiting.len() + self.rt_pending.len() + self.be_waiting.len() + self.be_pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rt_len(&self) -> usize {
        self.rt_waiting.len() + self.rt_pending.len()
    }

    pub fn be_len(&self) -> usize {
        self.be_waiting.len() + self.be_pending.len()
    }

    /// Inserts into the class's waiting queue keeping (arrival, id) order.
    pub fn push_waiting(&mut self, req: &Request, requests: &Requests) {
        let q = match req.class {
            RequestClass::Rt => &mut self.rt_waiting,
            RequestClass::Be => &mut self.be_waiting,
        };
        let key = (req.arrival_time, req.id);
        let pos = q.partition_point(|&id| {
            let r = requests.get(id);
            (r.arrival_time, r.id) <= key
        });
        q.insert(pos, req.id);
    }

    pub fn push_pending(&mut self, req: &Request) {
        match req.class {
            RequestClass::Rt => self.rt_pending.push(req.id),
            RequestClass::Be => self.be_pending.push(req.id),
        }
    }

    /// Removes `id` from whichever queue holds it. Returns false if absent.
    pub fn remove(&mut self, id: RequestId, class: RequestClass) -> bool {
        let (waiting, pending) = match class {
            RequestClass::Rt => (&mut self.rt_waiting, &mut self.rt_pending),
            RequestClass::Be => (&mut self.be_waiting, &mut self.be_pending),
        };
        if let Some(pos) = waiting.iter().position(|&x| x == id) {
            waiting.remove(pos);
            return true;
        }
        if let Some(pos) = pending.iter().position(|&x| x == id) {
            pending.remove(pos);
            return true;
        }
        false
    }

    pub fn contains(&self, id: RequestId) -> bool {
        self.rt_waiting.contains(&id)
            || self.rt_pending.contains(&id)
            || self.be_waiting.contains(&id)
            || self.be_pending.contains(&id)
    }

    pub fn all_ids(&self) -> impl Iterator<Item = RequestId> + '_ {
        self.rt_waiting
            .iter()
            .chain(self.rt_pending.iter())
            .chain(self.be_waiting.iter())
            .chain(self.be_pending.iter())
            .copied()
    }
}

/// Iterator over RT requests in ascending priority key.
///
/// The pending queue is sorted once; the waiting queue is polled head-first and
/// merged against it. Waiting requests normally have nondecreasing keys because
/// their first-group deadlines follow arrival order; if that does not hold
/// (recomputed requests or groups longer than one token) the waiting keys are
/// sorted as well so the output always equals a full merge-sort.
pub struct PriorityPull {
    pending: Vec<(PriorityKey, RequestId)>,
    waiting: Vec<(PriorityKey, RequestId)>,
    p: usize,
    w: usize,
}

impl Iterator for PriorityPull {
    type Item = (PriorityKey, RequestId);

    fn next(&mut self) -> Option<Self::Item> {
        let take_pending = match (self.pending.get(self.p), self.waiting.get(self.w)) {
            (None, None) => return None,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(a), Some(b)) => a.0 <= b.0,
        };
        if take_pending {
            self.p += 1;
            Some(self.pending[self.p - 1])
        } else {
            self.w += 1;
            Some(self.waiting[self.w - 1])
        }
    }
}

pub fn pull_rt_in_priority_order(
    queues: &QueueSet,
    requests: &Requests,
    slo: &SloConfig,
    t_avg: u64,
    now: u64,
) -> Result<PriorityPull, ContractViolation> {
    let key = |id: RequestId| requests.get(id).priority_key(slo, t_avg, now).map(|k| (k, id));
    let mut pending = queues.rt_pending.iter().map(|&id| key(id)).collect::<Result<Vec<_>, _>>()?;
    pending.sort_unstable();
    let mut waiting = queues.rt_waiting.iter().map(|&id| key(id)).collect::<Result<Vec<_>, _>>()?;
    if waiting.windows(2).any(|w| w[0].0 > w[1].0) {
        waiting.sort_unstable();
    }
    Ok(PriorityPull {
        pending,
        waiting,
        p: 0,
        w: 0,
    })
}
