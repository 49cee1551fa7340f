//! Deterministic discrete-event kernel.
//!
//! Events are ordered by `(time, seq)` where `seq` is a per-run counter, so
//! dequeue order is total and independent of heap internals. Messages travel
//! over a [`ChannelModel`] belonging to either the control or the data plane;
//! each directed `(src, dst, plane)` link serializes its messages FIFO.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::NodeId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("cannot schedule at t={at} before current time t={now}")]
    SchedulingInPast { at: f64, now: f64 },
    #[error("unknown destination node {0}")]
    UnknownDestination(NodeId),
    #[error("unknown source node {0}")]
    UnknownSource(NodeId),
    #[error("channel bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("message on {message:?} plane sent over a {channel:?} channel")]
    PlaneMismatch { message: Plane, channel: Plane },
    #[error("message size must be non-negative, got {0}")]
    NegativeSize(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    Control,
    Data,
}

/// Protocol payloads name themselves for the trace.
pub trait MessageBody {
    fn kind(&self) -> &'static str;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message<B> {
    pub src: NodeId,
    pub dst: NodeId,
    pub plane: Plane,
    pub size_bits: f64,
    pub body: B,
}

impl<B> Message<B> {
    pub fn control(src: NodeId, dst: NodeId, size_bits: f64, body: B) -> Self {
        Self { src, dst, plane: Plane::Control, size_bits, body }
    }

    pub fn data(src: NodeId, dst: NodeId, size_bits: f64, body: B) -> Self {
        Self { src, dst, plane: Plane::Data, size_bits, body }
    }
}

/// Prices a transfer as `fixed_latency + size_bits / bandwidth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub plane: Plane,
    pub fixed_latency: f64,
    pub bandwidth: f64,
}

impl ChannelModel {
    pub fn new(plane: Plane, fixed_latency: f64, bandwidth: f64) -> Self {
        Self { plane, fixed_latency, bandwidth }
    }

    /// A cut-through forwarding hop: adds `latency` but does not serialize
    /// the message a second time.
    pub fn forwarding(plane: Plane, latency: f64) -> Self {
        Self { plane, fixed_latency: latency, bandwidth: f64::INFINITY }
    }

    pub fn with_bandwidth(self, bandwidth: f64) -> Self {
        Self { bandwidth, ..self }
    }

    pub fn transfer_time(&self, size_bits: f64) -> f64 {
        size_bits / self.bandwidth
    }

    pub fn delivery_delay(&self, size_bits: f64) -> f64 {
        self.fixed_latency + self.transfer_time(size_bits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload<B> {
    Deliver(Message<B>),
    /// A local timer firing at `node`; never crosses a channel.
    Timer {
        node: NodeId,
        body: B,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event<B> {
    pub time: f64,
    pub seq: u64,
    pub payload: Payload<B>,
}

impl<B> Event<B> {
    pub fn message(&self) -> Option<&Message<B>> {
        match &self.payload {
            Payload::Deliver(m) => Some(m),
            Payload::Timer { .. } => None,
        }
    }
}

struct Queued<B>(Event<B>);

impl<B> PartialEq for Queued<B> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<B> Eq for Queued<B> {}

impl<B> PartialOrd for Queued<B> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<B> Ord for Queued<B> {
    // Reversed so the max-heap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.time.total_cmp(&self.0.time).then_with(|| other.0.seq.cmp(&self.0.seq))
    }
}

/// Outcome of [`Kernel::send`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    pub seq: u64,
    /// When the first bit leaves the sender (after FIFO queueing).
    pub start: f64,
    /// Serialization time `size_bits / bandwidth`.
    pub transfer_time: f64,
    pub deliver_at: f64,
    pub size_bits: f64,
}

/// One line of the exported trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Event {
        time: f64,
        seq: u64,
        src: NodeId,
        dst: NodeId,
        /// `None` for local timers.
        plane: Option<Plane>,
        kind: String,
        size_bits: f64,
    },
    State {
        time: f64,
        subject: String,
        from: String,
        to: String,
    },
    Allocation {
        time: f64,
        cell: String,
        comm_demand: f64,
        sensing_demand: f64,
        comm_share: f64,
        sensing_share: f64,
    },
}

impl TraceRecord {
    pub fn time(&self) -> f64 {
        match self {
            TraceRecord::Event { time, .. }
            | TraceRecord::State { time, .. }
            | TraceRecord::Allocation { time, .. } => *time,
        }
    }
}

/// Serializes records as line-delimited JSON.
pub fn to_jsonl(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("trace records always serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<Vec<TraceRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Derives an independent RNG stream from the run seed and a fixed label, so
/// adding a consumer of randomness never perturbs the others.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CommTotals {
    pub bits: f64,
    pub seconds: f64,
}

pub struct Kernel<B> {
    now: f64,
    next_seq: u64,
    seed: u64,
    queue: BinaryHeap<Queued<B>>,
    nodes: BTreeSet<NodeId>,
    busy_until: BTreeMap<(NodeId, NodeId, Plane), f64>,
    comm: BTreeMap<NodeId, CommTotals>,
    trace: Vec<TraceRecord>,
}

impl<B: MessageBody> Kernel<B> {
    pub fn new(seed: u64) -> Self {
        Self::starting_at(seed, 0.0)
    }

    pub fn starting_at(seed: u64, start: f64) -> Self {
        Self {
            now: start,
            next_seq: 0,
            seed,
            queue: BinaryHeap::new(),
            nodes: BTreeSet::new(),
            busy_until: BTreeMap::new(),
            comm: BTreeMap::new(),
            trace: Vec::new(),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, label: &str) -> ChaCha8Rng {
        substream(self.seed, label)
    }

    pub fn register(&mut self, id: NodeId) {
        self.nodes.insert(id);
    }

    pub fn is_registered(&self, id: &NodeId) -> bool {
        self.nodes.contains(id)
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Enqueues `payload` at absolute time `time` and returns its sequence
    /// number.
    pub fn schedule(&mut self, time: f64, payload: Payload<B>) -> Result<u64, EngineError> {
        if time < self.now || time.is_nan() {
            return Err(EngineError::SchedulingInPast { at: time, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Queued(Event { time, seq, payload }));
        Ok(seq)
    }

    pub fn timer(&mut self, time: f64, node: NodeId, body: B) -> Result<u64, EngineError> {
        self.schedule(time, Payload::Timer { node, body })
    }

    /// Puts `msg` on `channel`. The message starts once every earlier
    /// message on the same directed link has been serialized.
    pub fn send(&mut self, msg: Message<B>, channel: &ChannelModel) -> Result<Delivery, EngineError> {
        if !(channel.bandwidth > 0.0) {
            return Err(EngineError::NonPositiveBandwidth(channel.bandwidth));
        }
        if msg.plane != channel.plane {
            return Err(EngineError::PlaneMismatch { message: msg.plane, channel: channel.plane });
        }
        if !(msg.size_bits >= 0.0) {
            return Err(EngineError::NegativeSize(msg.size_bits));
        }
        if !self.nodes.contains(&msg.src) {
            return Err(EngineError::UnknownSource(msg.src));
        }
        if !self.nodes.contains(&msg.dst) {
            return Err(EngineError::UnknownDestination(msg.dst));
        }
        let key = (msg.src.clone(), msg.dst.clone(), msg.plane);
        let start = match self.busy_until.get(&key) {
            Some(&busy) if busy > self.now => busy,
            _ => self.now,
        };
        let transfer_time = channel.transfer_time(msg.size_bits);
        let deliver_at = start + channel.delivery_delay(msg.size_bits);
        self.busy_until.insert(key, start + transfer_time);
        let totals = self.comm.entry(msg.src.clone()).or_default();
        totals.bits += msg.size_bits;
        totals.seconds += transfer_time;
        let size_bits = msg.size_bits;
        let seq = self.schedule(deliver_at, Payload::Deliver(msg))?;
        Ok(Delivery { seq, start, transfer_time, deliver_at, size_bits })
    }

    pub fn comm_totals(&self) -> &BTreeMap<NodeId, CommTotals> {
        &self.comm
    }

    /// Appends a non-event record (state change, allocation) to the trace.
    pub fn log(&mut self, record: TraceRecord) {
        self.trace.push(record);
    }

    pub fn log_state(&mut self, subject: &str, from: impl ToString, to: impl ToString) {
        let record = TraceRecord::State {
            time: self.now,
            subject: subject.to_owned(),
            from: from.to_string(),
            to: to.to_string(),
        };
        self.trace.push(record);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn trace_jsonl(&self) -> String {
        to_jsonl(&self.trace)
    }

    fn pop(&mut self) -> Event<B> {
        let Queued(event) = self.queue.pop().expect("caller checked non-empty");
        self.now = event.time;
        let record = match &event.payload {
            Payload::Deliver(m) => TraceRecord::Event {
                time: event.time,
                seq: event.seq,
                src: m.src.clone(),
                dst: m.dst.clone(),
                plane: Some(m.plane),
                kind: m.body.kind().to_owned(),
                size_bits: m.size_bits,
            },
            Payload::Timer { node, body } => TraceRecord::Event {
                time: event.time,
                seq: event.seq,
                src: node.clone(),
                dst: node.clone(),
                plane: None,
                kind: body.kind().to_owned(),
                size_bits: 0.0,
            },
        };
        self.trace.push(record);
        event
    }

    /// Processes every event with `time <= t_end`, then sets the clock to
    /// `t_end`. Returns the number of events processed.
    pub fn run_until<F>(&mut self, t_end: f64, mut handler: F) -> usize
    where
        F: FnMut(&mut Self, Event<B>),
    {
        if t_end < self.now {
            return 0;
        }
        let mut count = 0;
        while self.queue.peek().is_some_and(|q| q.0.time <= t_end) {
            let event = self.pop();
            handler(self, event);
            count += 1;
        }
        self.now = t_end;
        count
    }

    /// Processes events until the queue is empty; the clock stays at the
    /// last event time.
    pub fn run_to_completion<F>(&mut self, mut handler: F) -> usize
    where
        F: FnMut(&mut Self, Event<B>),
    {
        let mut count = 0;
        while !self.queue.is_empty() {
            let event = self.pop();
            handler(self, event);
            count += 1;
        }
        count
    }
}
