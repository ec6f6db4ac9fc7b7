//! Spike exchange between ranks.
//!
//! Spikes are carried as AER entries (source id, emission time) packed into
//! one batch per target rank. Delivery is a two-phase counted exchange: a
//! single-word counter goes to every rank of the sender's connectivity
//! subset, then payloads travel only over pairs whose counter is non-zero.
//! The same protocol, with all ranks as the subset, carries the synapse
//! records of the construction phase.
//!
//! Two transports implement the collectives: [`route_sequential`] moves
//! every rank's messages in one thread, round-robin; [`Hub`] and
//! [`ThreadEndpoint`] serve one OS thread per rank.

use std::any::Any;
use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};

use thiserror::Error;

use crate::model::NeuronId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    ConstructionCounts,
    ConstructionPayload,
    SpikeCounters,
    SpikePayload,
}

/// Step-tag carried by every message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tag {
    pub phase: Phase,
    pub step: u64,
}

impl Tag {
    pub const fn new(phase: Phase, step: u64) -> Self {
        Self { phase, step }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommError {
    #[error("rank {rank} expected {expected:?} but a peer is at {got:?}")]
    TagMismatch { rank: u32, expected: Tag, got: Tag },
    #[error("rank {dst} got {received} entries from rank {src} after a counter of {announced} ({tag:?})")]
    CounterMismatch {
        src: u32,
        dst: u32,
        tag: Tag,
        announced: u64,
        received: u64,
    },
    #[error("message {src} -> {dst} ({tag:?}) lies outside the connectivity subset")]
    OutsideSubset { src: u32, dst: u32, tag: Tag },
    #[error("rank {rank}: payload type does not match {tag:?}")]
    PayloadType { rank: u32, tag: Tag },
    #[error("rank {rank} asked to run step {requested} but step {expected} is due")]
    StepOrder { rank: u32, requested: u64, expected: u64 },
    #[error("step {step}: {sent} spikes sent but {received} received")]
    Conservation { step: u64, sent: u64, received: u64 },
    #[error("transport aborted because another rank failed")]
    Aborted,
}

/// Address-event: which neuron spiked and when.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AerSpike {
    pub source: NeuronId,
    pub time_ms: f64,
}

impl AerSpike {
    /// Wire size: 4-byte id plus 8-byte time.
    pub const ENCODED_LEN: usize = 12;
}

#[derive(Clone, Debug, PartialEq)]
pub struct AxonalSpikeBatch {
    pub step: u64,
    pub source_rank: u32,
    pub target_rank: u32,
    pub spikes: Vec<AerSpike>,
}

/// Ranks a rank exchanges spikes with, fixed at construction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Subsets {
    /// Ranks hosting at least one target synapse of a local neuron.
    pub outgoing: Vec<u32>,
    /// Ranks hosting at least one source neuron of a local synapse.
    pub incoming: Vec<u32>,
}

impl Subsets {
    pub fn sends_to(&self, rank: u32) -> bool {
        self.outgoing.binary_search(&rank).is_ok()
    }

    pub fn receives_from(&self, rank: u32) -> bool {
        self.incoming.binary_search(&rank).is_ok()
    }
}

/// For each local neuron, the ranks hosting its targets (compressed rows).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Fanout {
    offsets: Vec<u32>,
    ranks: Vec<u32>,
}

impl Fanout {
    pub fn from_lists(lists: impl IntoIterator<Item = Vec<u32>>) -> Self {
        let mut offsets = vec![0u32];
        let mut ranks = Vec::new();
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            ranks.extend_from_slice(&l);
            offsets.push(ranks.len() as u32);
        }
        Fanout { offsets, ranks }
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn targets(&self, local: u32) -> &[u32] {
        let l = local as usize;
        &self.ranks[self.offsets[l] as usize..self.offsets[l + 1] as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrafficRow {
    pub step: u64,
    pub src: u32,
    pub dst: u32,
    pub counter: u64,
    pub bytes: u64,
}

pub fn traffic_csv(rows: &[TrafficRow]) -> String {
    let mut s = String::from("step,src,dst,counter,bytes\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.src, r.dst, r.counter, r.bytes));
    }
    s
}

/// Splits this step's spikes into the local fast-path list and one batch
/// per remote target rank. `spikes` must be sorted by source id.
pub fn pack(
    step: u64,
    rank: u32,
    spikes: &[AerSpike],
    fanout: &Fanout,
    local_of: impl Fn(NeuronId) -> u32,
) -> (Vec<AerSpike>, Vec<AxonalSpikeBatch>) {
    let mut local = Vec::new();
    let mut remote: BTreeMap<u32, Vec<AerSpike>> = BTreeMap::new();
    for s in spikes {
        for &r in fanout.targets(local_of(s.source)) {
            if r == rank {
                local.push(*s);
            } else {
                remote.entry(r).or_default().push(*s);
            }
        }
    }
    let batches = remote
        .into_iter()
        .map(|(target_rank, spikes)| AxonalSpikeBatch { step, source_rank: rank, target_rank, spikes })
        .collect();
    (local, batches)
}

/// Phase-one message: how many entries will follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Counter {
    pub tag: Tag,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Payload<P> {
    pub tag: Tag,
    pub entries: Vec<P>,
}

/// Counter messages for every rank of `dests` other than `me`.
pub fn counter_messages<P>(
    me: u32,
    tag: Tag,
    dests: &[u32],
    payloads: &BTreeMap<u32, Vec<P>>,
) -> Vec<(u32, Counter)> {
    dests
        .iter()
        .filter(|&&d| d != me)
        .map(|&d| (d, Counter { tag, count: payloads.get(&d).map_or(0, |p| p.len() as u64) }))
        .collect()
}

/// Checks that every outgoing payload is covered by a counter.
pub fn check_outgoing<P>(
    me: u32,
    tag: Tag,
    dests: &[u32],
    payloads: &BTreeMap<u32, Vec<P>>,
) -> Result<(), CommError> {
    for (&dst, p) in payloads {
        if !p.is_empty() && (dst == me || dests.binary_search(&dst).is_err()) {
            return Err(CommError::OutsideSubset { src: me, dst, tag });
        }
    }
    Ok(())
}

/// Validates received counters against the expected tag and, when given,
/// the set of ranks allowed to send.
pub fn check_counters(
    me: u32,
    tag: Tag,
    allowed: Option<&[u32]>,
    received: &[(u32, Counter)],
) -> Result<BTreeMap<u32, u64>, CommError> {
    let mut out = BTreeMap::new();
    for &(src, c) in received {
        if c.tag != tag {
            return Err(CommError::TagMismatch { rank: me, expected: tag, got: c.tag });
        }
        if allowed.is_some_and(|a| a.binary_search(&src).is_err()) {
            return Err(CommError::OutsideSubset { src, dst: me, tag });
        }
        out.insert(src, c.count);
    }
    Ok(out)
}

pub fn payload_messages<P>(tag: Tag, payloads: BTreeMap<u32, Vec<P>>) -> Vec<(u32, Payload<P>)> {
    payloads
        .into_iter()
        .filter(|(_, p)| !p.is_empty())
        .map(|(d, entries)| (d, Payload { tag, entries }))
        .collect()
}

/// Matches payloads to announced counters, exactly.
pub fn check_payloads<P>(
    me: u32,
    tag: Tag,
    announced: &BTreeMap<u32, u64>,
    received: Vec<(u32, Payload<P>)>,
) -> Result<Vec<(u32, Vec<P>)>, CommError> {
    let mut got: BTreeMap<u32, u64> = BTreeMap::new();
    let mut out = Vec::with_capacity(received.len());
    for (src, p) in received {
        if p.tag != tag {
            return Err(CommError::TagMismatch { rank: me, expected: tag, got: p.tag });
        }
        let n = p.entries.len() as u64;
        let want = announced.get(&src).copied().unwrap_or(0);
        if want == 0 {
            return Err(CommError::OutsideSubset { src, dst: me, tag });
        }
        *got.entry(src).or_default() += n;
        out.push((src, p.entries));
    }
    for (&src, &want) in announced {
        let have = got.get(&src).copied().unwrap_or(0);
        if have != want {
            return Err(CommError::CounterMismatch { src, dst: me, tag, announced: want, received: have });
        }
    }
    Ok(out)
}

/// Single-worker transport: routes every rank's outgoing messages in rank
/// order. Inboxes come back sorted by source rank, per-pair order kept.
pub fn route_sequential<T>(outgoing: Vec<Vec<(u32, T)>>) -> Vec<Vec<(u32, T)>> {
    let n = outgoing.len();
    let mut inbox: Vec<Vec<(u32, T)>> = (0..n).map(|_| Vec::new()).collect();
    for (src, msgs) in outgoing.into_iter().enumerate() {
        for (dst, m) in msgs {
            inbox[dst as usize].push((src as u32, m));
        }
    }
    inbox
}

/// A rank's handle on a collective transport.
pub trait Collective {
    fn rank(&self) -> u32;
    fn size(&self) -> u32;
    /// Sparse all-to-all; every rank must call it with the same tag.
    /// Returns `(source, message)` pairs sorted by source.
    fn exchange<T: Send + 'static>(
        &mut self,
        tag: Tag,
        outgoing: Vec<(u32, T)>,
    ) -> Result<Vec<(u32, T)>, CommError>;
    /// Aborts the collective so that peers blocked in it return an error.
    fn abort(&self);
}

/// Two-phase counted exchange over a [`Collective`].
pub fn counted_exchange<C: Collective, P: Send + 'static>(
    c: &mut C,
    counter_tag: Tag,
    payload_tag: Tag,
    dests: &[u32],
    allowed_sources: Option<&[u32]>,
    payloads: BTreeMap<u32, Vec<P>>,
) -> Result<Vec<(u32, Vec<P>)>, CommError> {
    let me = c.rank();
    check_outgoing(me, payload_tag, dests, &payloads)?;
    let counters = counter_messages(me, counter_tag, dests, &payloads);
    let received = c.exchange(counter_tag, counters)?;
    let announced = check_counters(me, counter_tag, allowed_sources, &received)?;
    let received = c.exchange(payload_tag, payload_messages(payload_tag, payloads))?;
    check_payloads(me, payload_tag, &announced, received)
}

struct BarrierState {
    arrived: u32,
    generation: u64,
    aborted: bool,
}

/// Reusable barrier that can be aborted to release every waiter.
struct AbortableBarrier {
    parties: u32,
    state: Mutex<BarrierState>,
    cv: Condvar,
}

impl AbortableBarrier {
    fn new(parties: u32) -> Self {
        Self {
            parties,
            state: Mutex::new(BarrierState { arrived: 0, generation: 0, aborted: false }),
            cv: Condvar::new(),
        }
    }

    fn wait(&self) -> Result<(), CommError> {
        let mut s = self.state.lock().expect("barrier lock");
        if s.aborted {
            return Err(CommError::Aborted);
        }
        s.arrived += 1;
        if s.arrived == self.parties {
            s.arrived = 0;
            s.generation += 1;
            self.cv.notify_all();
            return Ok(());
        }
        let gen = s.generation;
        while s.generation == gen && !s.aborted {
            s = self.cv.wait(s).expect("barrier lock");
        }
        if s.generation == gen {
            Err(CommError::Aborted)
        } else {
            Ok(())
        }
    }

    fn abort(&self) {
        let mut s = self.state.lock().expect("barrier lock");
        s.aborted = true;
        self.cv.notify_all();
    }
}

type Envelope = (u32, Box<dyn Any + Send>);

/// Shared state of the in-process concurrent transport.
pub struct Hub {
    size: u32,
    mailboxes: Vec<Mutex<Vec<Envelope>>>,
    tags: Mutex<Vec<Option<Tag>>>,
    barrier: AbortableBarrier,
}

impl Hub {
    pub fn new(size: u32) -> Arc<Self> {
        Arc::new(Hub {
            size,
            mailboxes: (0..size).map(|_| Mutex::new(Vec::new())).collect(),
            tags: Mutex::new(vec![None; size as usize]),
            barrier: AbortableBarrier::new(size),
        })
    }

    pub fn endpoints(self: &Arc<Self>) -> Vec<ThreadEndpoint> {
        (0..self.size).map(|rank| ThreadEndpoint { rank, hub: Arc::clone(self) }).collect()
    }
}

pub struct ThreadEndpoint {
    rank: u32,
    hub: Arc<Hub>,
}

impl Collective for ThreadEndpoint {
    fn rank(&self) -> u32 {
        self.rank
    }

    fn size(&self) -> u32 {
        self.hub.size
    }

    fn exchange<T: Send + 'static>(
        &mut self,
        tag: Tag,
        outgoing: Vec<(u32, T)>,
    ) -> Result<Vec<(u32, T)>, CommError> {
        let hub = &self.hub;
        hub.tags.lock().expect("tag lock")[self.rank as usize] = Some(tag);
        for (dst, msg) in outgoing {
            hub.mailboxes[dst as usize].lock().expect("mailbox lock").push((self.rank, Box::new(msg)));
        }
        hub.barrier.wait()?;
        let mismatch = hub
            .tags
            .lock()
            .expect("tag lock")
            .iter()
            .flatten()
            .find(|t| **t != tag)
            .copied();
        let inbox = std::mem::take(&mut *hub.mailboxes[self.rank as usize].lock().expect("mailbox lock"));
        hub.barrier.wait()?;
        if let Some(got) = mismatch {
            return Err(CommError::TagMismatch { rank: self.rank, expected: tag, got });
        }
        let mut out = Vec::with_capacity(inbox.len());
        for (src, boxed) in inbox {
            let msg = boxed
                .downcast::<T>()
                .map_err(|_| CommError::PayloadType { rank: self.rank, tag })?;
            out.push((src, *msg));
        }
        // Stable: per-pair order is the push order.
        out.sort_by_key(|(src, _)| *src);
        Ok(out)
    }

    fn abort(&self) {
        self.hub.barrier.abort();
    }
}
