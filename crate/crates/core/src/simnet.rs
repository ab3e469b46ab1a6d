//! Single-queue discrete-event network simulation.
//!
//! Events fire in `(fire_time, sequence)` order. Message delivery time is
//! `now + latency + bytes / bandwidth`, with latency drawn per message from
//! the simulation's own seeded generator.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::overlay::NodeId;

/// Simulated milliseconds.
pub type SimTime = f64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    /// Lower bound of the uniform per-message latency, ms.
    pub latency_lo: f64,
    /// Upper bound of the uniform per-message latency, ms.
    pub latency_hi: f64,
    /// Bytes per simulated ms on every link.
    pub bandwidth: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        // 100 Mbit/s links with LAN-to-metro latency
        Self {
            latency_lo: 5.0,
            latency_hi: 20.0,
            bandwidth: 12_500.0,
        }
    }
}

impl LinkModel {
    pub fn validate(&self) -> Result<()> {
        let finite = self.latency_lo.is_finite() && self.latency_hi.is_finite() && self.bandwidth.is_finite();
        if !finite || self.latency_lo < 0.0 || self.latency_lo > self.latency_hi {
            return Err(Error::invalid(format!(
                "latency range [{}, {}] must satisfy 0 <= lo <= hi",
                self.latency_lo, self.latency_hi
            )));
        }
        if self.bandwidth <= 0.0 {
            return Err(Error::invalid("bandwidth must be positive"));
        }
        Ok(())
    }

    pub fn transmission_time(&self, bytes: u64) -> SimTime {
        bytes as f64 / self.bandwidth
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope<P> {
    pub from: NodeId,
    pub to: NodeId,
    pub bytes: u64,
    pub sent_at: SimTime,
    pub payload: P,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action<P> {
    Deliver(Envelope<P>),
    NodeFailure(NodeId),
    NodeRejoin(NodeId),
    HeartbeatTick,
    RoundTrigger(u64),
    Timer(P),
}

impl<P> Action<P> {
    pub fn kind(&self) -> &'static str {
        match self {
            Action::Deliver(_) => "deliver",
            Action::NodeFailure(_) => "fail",
            Action::NodeRejoin(_) => "rejoin",
            Action::HeartbeatTick => "heartbeat",
            Action::RoundTrigger(_) => "round",
            Action::Timer(_) => "timer",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event<P> {
    pub fire_time: SimTime,
    pub sequence: u64,
    pub action: Action<P>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventHandle {
    pub fire_time: SimTime,
    pub sequence: u64,
}

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .fire_time
            .total_cmp(&self.0.fire_time)
            .then_with(|| other.0.sequence.cmp(&self.0.sequence))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub executed: u64,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub bytes_sent: u64,
}

/// One line of the optional event trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: SimTime,
    #[serde(rename = "type")]
    pub kind: String,
    pub from: Option<NodeId>,
    pub to: Option<NodeId>,
    pub bytes: u64,
}

pub struct Sim<P> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Queued<P>>,
    rng: ChaCha8Rng,
    link: LinkModel,
    dead: HashSet<NodeId>,
    stats: SimStats,
    trace: Option<Vec<TraceRecord>>,
}

impl<P> Sim<P> {
    pub fn new(seed: u64, link: LinkModel) -> Self {
        Self {
            now: 0.0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            link,
            dead: HashSet::new(),
            stats: SimStats::default(),
            trace: None,
        }
    }

    /// Records every executed event for [`Sim::write_trace`].
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn link(&self) -> &LinkModel {
        &self.link
    }

    pub fn stats(&self) -> SimStats {
        self.stats
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        !self.dead.contains(&id)
    }

    pub fn set_alive(&mut self, id: NodeId, alive: bool) {
        if alive {
            self.dead.remove(&id);
        } else {
            self.dead.insert(id);
        }
    }

    /// Enqueues `action` at `now + delay`.
    ///
    /// Panics if `delay` is negative or not finite.
    pub fn schedule(&mut self, delay: SimTime, action: Action<P>) -> EventHandle {
        assert!(
            delay.is_finite() && delay >= 0.0,
            "delay must be finite and >= 0, got {delay}"
        );
        let handle = EventHandle {
            fire_time: self.now + delay,
            sequence: self.next_seq,
        };
        self.next_seq += 1;
        self.queue.push(Queued(Event {
            fire_time: handle.fire_time,
            sequence: handle.sequence,
            action,
        }));
        handle
    }

    pub fn sample_latency(&mut self) -> SimTime {
        let u: f64 = self.rng.random();
        self.link.latency_lo + (self.link.latency_hi - self.link.latency_lo) * u
    }

    /// Sends a message. Nothing is sent if the sender is dead.
    pub fn send(&mut self, from: NodeId, to: NodeId, bytes: u64, payload: P) -> Option<EventHandle> {
        if !self.is_alive(from) {
            return None;
        }
        let delay = self.sample_latency() + self.link.transmission_time(bytes);
        self.stats.sent += 1;
        self.stats.bytes_sent += bytes;
        let envelope = Envelope {
            from,
            to,
            bytes,
            sent_at: self.now,
            payload,
        };
        Some(self.schedule(delay, Action::Deliver(envelope)))
    }

    /// Pops the next event due at or before `t_end`. Liveness changes take
    /// effect here; deliveries to dead nodes are dropped and skipped.
    pub fn next_event(&mut self, t_end: SimTime) -> Option<Event<P>> {
        loop {
            if self.queue.peek().is_none_or(|q| q.0.fire_time > t_end) {
                return None;
            }
            let Queued(event) = self.queue.pop().expect("peeked");
            debug_assert!(event.fire_time >= self.now);
            self.now = event.fire_time;
            match &event.action {
                Action::NodeFailure(id) => {
                    self.dead.insert(*id);
                }
                Action::NodeRejoin(id) => {
                    self.dead.remove(id);
                }
                Action::Deliver(env) if self.dead.contains(&env.to) => {
                    self.stats.dropped += 1;
                    self.record(&event, "drop");
                    continue;
                }
                Action::Deliver(_) => self.stats.delivered += 1,
                _ => {}
            }
            self.stats.executed += 1;
            self.record(&event, event.action.kind());
            return Some(event);
        }
    }

    /// Executes every event with `fire_time <= t_end`, then parks the clock
    /// at `t_end`. Returns the number of events handed to `handler`.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> usize
    where
        F: FnMut(&mut Sim<P>, Event<P>),
    {
        assert!(t_end >= self.now, "cannot run backwards from {} to {t_end}", self.now);
        let mut count = 0;
        while let Some(event) = self.next_event(t_end) {
            handler(self, event);
            count += 1;
        }
        self.now = t_end;
        count
    }

    /// Runs until the queue is empty; the clock stays at the last event.
    pub fn run<F>(&mut self, mut handler: F) -> usize
    where
        F: FnMut(&mut Sim<P>, Event<P>),
    {
        let mut count = 0;
        while let Some(event) = self.next_event(f64::INFINITY) {
            handler(self, event);
            count += 1;
        }
        count
    }

    fn record(&mut self, event: &Event<P>, kind: &str) {
        let Some(trace) = self.trace.as_mut() else { return };
        let (from, to, bytes) = match &event.action {
            Action::Deliver(env) => (Some(env.from), Some(env.to), env.bytes),
            Action::NodeFailure(id) | Action::NodeRejoin(id) => (None, Some(*id), 0),
            _ => (None, None, 0),
        };
        trace.push(TraceRecord {
            time: event.fire_time,
            kind: kind.to_string(),
            from,
            to,
            bytes,
        });
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn write_trace<W: Write>(&self, mut out: W) -> Result<()> {
        for rec in self.trace() {
            serde_json::to_writer(&mut out, rec).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// SHA-256 over the line-delimited trace, hex encoded.
    pub fn trace_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_trace(&mut buf).expect("in-memory write");
        Sha256::digest(&buf).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Fail,
    Rejoin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureEntry {
    pub time: SimTime,
    pub node: NodeId,
    pub kind: FailureKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FailureSchedule {
    pub entries: Vec<FailureEntry>,
}

impl FailureSchedule {
    /// Checks ordering and that nothing fails twice or rejoins while alive.
    pub fn validate(&self) -> Result<()> {
        let mut dead = HashSet::new();
        let mut last = f64::NEG_INFINITY;
        for e in &self.entries {
            if !e.time.is_finite() || e.time < last {
                return Err(Error::invalid(format!(
                    "failure schedule times must be non-decreasing at {}",
                    e.time
                )));
            }
            last = e.time;
            let ok = match e.kind {
                FailureKind::Fail => dead.insert(e.node),
                FailureKind::Rejoin => dead.remove(&e.node),
            };
            if !ok {
                return Err(Error::invalid(format!(
                    "{:?} of node {} in wrong state",
                    e.kind, e.node
                )));
            }
        }
        Ok(())
    }

    /// Enqueues every entry relative to the current clock.
    pub fn schedule_into<P>(&self, sim: &mut Sim<P>) -> Result<()> {
        self.validate()?;
        for e in &self.entries {
            let delay = (e.time - sim.now()).max(0.0);
            let action = match e.kind {
                FailureKind::Fail => Action::NodeFailure(e.node),
                FailureKind::Rejoin => Action::NodeRejoin(e.node),
            };
            sim.schedule(delay, action);
        }
        Ok(())
    }
}

/// Derives an independent stream seed from a base seed and a salt, so that
/// per-node generators do not depend on iteration order.
pub fn derive_seed(base: u64, salt: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for s in salt {
        h.update(s.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
