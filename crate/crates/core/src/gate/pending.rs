use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::broker::{BrokerRequest, Decision};
use crate::hash::RequestId;

#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
pub enum QueueError {
    #[error("unknown request id")]
    Unknown,
    #[error("request already decided")]
    AlreadyDecided,
}

/// A request awaiting a decision, with the seconds left before it is denied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingView {
    pub request: BrokerRequest,
    pub seconds_remaining: u64,
}

struct Slot {
    request: BrokerRequest,
    deadline: Instant,
    decision: Option<Decision>,
}

#[derive(Default)]
struct QueueState {
    pending: BTreeMap<RequestId, Slot>,
    closed: BTreeSet<RequestId>,
}

/// Requests waiting on a remote decider. Each id accepts exactly one decision;
/// a request that timed out is closed and refuses late decisions.
#[derive(Default)]
pub struct PendingQueue {
    state: Mutex<QueueState>,
    cv: Condvar,
}

impl PendingQueue {
    pub fn new() -> PendingQueue {
        PendingQueue::default()
    }

    fn lock(&self) -> MutexGuard<'_, QueueState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Blocks until a decision arrives or `timeout` passes (`None`).
    pub fn submit(&self, request: BrokerRequest, timeout: Duration) -> Option<Decision> {
        let id = request.request_id;
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        st.pending.insert(
            id,
            Slot {
                request,
                deadline,
                decision: None,
            },
        );
        loop {
            if let Some(d) = st.pending.get(&id).and_then(|s| s.decision) {
                st.pending.remove(&id);
                st.closed.insert(id);
                return Some(d);
            }
            let now = Instant::now();
            if now >= deadline {
                st.pending.remove(&id);
                st.closed.insert(id);
                return None;
            }
            st = self
                .cv
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    pub fn decide(&self, id: &RequestId, decision: Decision) -> Result<(), QueueError> {
        let mut st = self.lock();
        if st.closed.contains(id) {
            return Err(QueueError::AlreadyDecided);
        }
        let slot = st.pending.get_mut(id).ok_or(QueueError::Unknown)?;
        if slot.decision.is_some() || Instant::now() >= slot.deadline {
            return Err(QueueError::AlreadyDecided);
        }
        slot.decision = Some(decision);
        drop(st);
        self.cv.notify_all();
        Ok(())
    }

    /// Undecided requests in id order.
    pub fn list(&self) -> Vec<PendingView> {
        let st = self.lock();
        let now = Instant::now();
        st.pending
            .values()
            .filter(|s| s.decision.is_none() && s.deadline > now)
            .map(|s| PendingView {
                request: s.request.clone(),
                seconds_remaining: s.deadline.saturating_duration_since(now).as_secs(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skillpkg::VerificationLevel;
    use std::sync::Arc;

    fn req(b: u8) -> BrokerRequest {
        BrokerRequest {
            request_id: RequestId([b; 16]),
            op: "publish".into(),
            target: "general".into(),
            reasoning: String::new(),
            origin_skill_id: "s".into(),
            level: VerificationLevel::Unverified,
        }
    }

    fn wait_listed(q: &PendingQueue) {
        while q.list().is_empty() {
            std::thread::yield_now();
        }
    }

    #[test]
    fn decide_unblocks_submitter_once() {
        let q = Arc::new(PendingQueue::new());
        let q2 = q.clone();
        let h = std::thread::spawn(move || q2.submit(req(1), Duration::from_secs(30)));
        wait_listed(&q);
        assert_eq!(q.list()[0].request.request_id, RequestId([1; 16]));
        assert_eq!(
            q.decide(&RequestId([9; 16]), Decision::Approve),
            Err(QueueError::Unknown)
        );
        q.decide(&RequestId([1; 16]), Decision::Approve).unwrap();
        assert_eq!(
            q.decide(&RequestId([1; 16]), Decision::Deny),
            Err(QueueError::AlreadyDecided)
        );
        assert_eq!(h.join().unwrap(), Some(Decision::Approve));
        assert!(q.list().is_empty());
        assert_eq!(
            q.decide(&RequestId([1; 16]), Decision::Deny),
            Err(QueueError::AlreadyDecided)
        );
    }

    #[test]
    fn timeout_closes_request() {
        let q = PendingQueue::new();
        assert_eq!(q.submit(req(2), Duration::from_millis(5)), None);
        assert_eq!(
            q.decide(&RequestId([2; 16]), Decision::Approve),
            Err(QueueError::AlreadyDecided)
        );
    }

    #[test]
    fn racing_decisions_resolve_to_one() {
        let q = Arc::new(PendingQueue::new());
        let q2 = q.clone();
        let h = std::thread::spawn(move || q2.submit(req(3), Duration::from_secs(30)));
        wait_listed(&q);
        let results: Vec<_> = (0..4)
            .map(|i| {
                let q = q.clone();
                std::thread::spawn(move || {
                    let d = if i % 2 == 0 { Decision::Approve } else { Decision::Deny };
                    q.decide(&RequestId([3; 16]), d)
                })
            })
            .map(|t| t.join().unwrap())
            .collect();
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
        assert!(h.join().unwrap().is_some());
    }
}
