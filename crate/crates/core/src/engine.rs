//! Per-rank simulation loop.
//!
//! Each 1 ms step a rank demultiplexes the spikes whose delay matures in
//! this step, draws the external Poisson input, integrates every neuron
//! exactly from event to event, and hands the spikes it emitted to the
//! transport. Events of a neuron are applied in (time, source) order, with
//! external events after recurrent ones at equal times.
//!
//! While refractory a neuron is held at V_r; the jumps it receives in that
//! window are summed and released onto V_r when the window closes.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::sync::Arc;
use std::time::Instant;

use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::comm::{
    check_counters, check_outgoing, check_payloads, counter_messages, pack, payload_messages,
    route_sequential, AerSpike, Collective, CommError, Counter, Fanout, Hub, Payload, Phase,
    Subsets, Tag, TrafficRow,
};
use crate::connectivity::{
    build_matrix, exchange_counts, exchange_sequential, exchange_synapses, DelayGroup,
    NetworkPlan, SynapticMatrix,
};
use crate::error::{Error, Result};
use crate::model::{IdCodec, NeuronParams, PopulationKind, StatePreset, WeightCode};
use crate::rng::{Domain, KeyedRng};
use crate::topology::PartitionMap;

/// Communication step (ms).
pub const STEP_MS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronState {
    pub v: f64,
    pub c: f64,
    pub last_update: f64,
    pub refractory_until: f64,
    /// Input received during the refractory window, not yet applied (mV).
    pub pending: f64,
}

impl NeuronState {
    pub fn at_rest(params: &NeuronParams) -> Self {
        NeuronState { v: params.e_rest, c: 0.0, last_update: 0.0, refractory_until: f64::NEG_INFINITY, pending: 0.0 }
    }

    pub fn is_refractory(&self, t: f64) -> bool {
        t < self.refractory_until
    }
}

/// Closed-form free evolution over `dt` ms.
pub fn evolve_free(s: &mut NeuronState, p: &NeuronParams, dt: f64) {
    if dt <= 0.0 {
        return;
    }
    let em = (-dt / p.tau_m).exp();
    let mut v = p.e_rest + (s.v - p.e_rest) * em;
    if let Some(a) = p.adaptation {
        let g = p.adaptation_drift() * s.c;
        if g != 0.0 {
            let k = 1.0 / p.tau_m - 1.0 / a.tau_c;
            // (e^{-dt/tau_c} - e^{-dt/tau_m}) / k, written to stay exact as k -> 0.
            let x = dt * k;
            let shape = if x == 0.0 {
                dt * em
            } else if x.abs() < 1.0 {
                em * x.exp_m1() / k
            } else {
                ((-dt / a.tau_c).exp() - em) / k
            };
            v -= g * shape;
        }
        s.c *= (-dt / a.tau_c).exp();
    }
    s.v = v;
    s.last_update += dt;
}

/// Brings the neuron to time `t`, holding V at reset while refractory and
/// releasing the held input when the window closes.
pub fn advance_to(s: &mut NeuronState, p: &NeuronParams, t: f64) -> Result<()> {
    if t < s.last_update {
        return Err(Error::Sequencing { event: t, last: s.last_update });
    }
    if s.last_update < s.refractory_until {
        let t1 = t.min(s.refractory_until);
        if let Some(a) = p.adaptation {
            s.c *= (-(t1 - s.last_update) / a.tau_c).exp();
        }
        s.v = p.v_reset;
        if t1 == s.refractory_until {
            s.v += s.pending;
            s.pending = 0.0;
        }
        s.last_update = t1;
    }
    if t > s.last_update {
        evolve_free(s, p, t - s.last_update);
    }
    s.last_update = t;
    Ok(())
}

/// Applies a jump of `j` mV at time `t`; returns the spike time if the
/// neuron fires. Jumps inside the refractory window are held back.
pub fn apply_event(s: &mut NeuronState, p: &NeuronParams, j: f64, t: f64) -> Result<Option<f64>> {
    if t < s.last_update {
        return Err(Error::Sequencing { event: t, last: s.last_update });
    }
    if s.is_refractory(t) {
        s.pending += j;
        return Ok(None);
    }
    advance_to(s, p, t)?;
    s.v += j;
    if s.v > p.v_theta {
        s.v = p.v_reset;
        s.refractory_until = t + p.tau_arp;
        if let Some(a) = p.adaptation {
            s.c += a.alpha_c;
        }
        return Ok(Some(t));
    }
    Ok(None)
}

/// Per target population sampler of the external drive.
#[derive(Clone, Debug)]
pub struct ExternalSampler {
    count: Option<Poisson<f64>>,
    amplitude: Option<Normal<f64>>,
    mean: f64,
}

impl ExternalSampler {
    pub fn new(preset: &StatePreset, kind: PopulationKind) -> Self {
        let syn = &preset.synaptic;
        let drive = syn.external(kind);
        let lambda = drive.events_per_ms() * STEP_MS;
        let sd = syn.delta_j_ext(kind);
        ExternalSampler {
            count: (lambda > 0.0).then(|| Poisson::new(lambda).expect("positive rate")),
            amplitude: (sd > 0.0).then(|| Normal::new(drive.j_ext, sd).expect("finite spread")),
            mean: drive.j_ext,
        }
    }

    /// External events of neuron `global` during `step`, as (time, mV),
    /// in draw order.
    pub fn sample(&self, seed: u64, global: u32, step: u64, out: &mut Vec<(f64, f64)>) {
        let Some(count) = &self.count else { return };
        let mut rng = KeyedRng::new(seed, Domain::External, &[u64::from(global), step]);
        let n = count.sample(&mut rng) as u64;
        let t0 = step as f64 * STEP_MS;
        let hi = (t0 + STEP_MS).next_down();
        for _ in 0..n {
            let t = (t0 + rng.uniform() * STEP_MS).min(hi);
            let j = self.amplitude.as_ref().map_or(self.mean, |a| a.sample(&mut rng));
            out.push((t, j));
        }
    }
}

/// External events of one neuron during one step.
pub fn external_events(global: u32, step: u64, kind: PopulationKind, preset: &StatePreset, seed: u64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    ExternalSampler::new(preset, kind).sample(seed, global, step, &mut out);
    out
}

/// Co-traverses spikes sorted by source id with one delay group and calls
/// `emit(target, time, source_global, weight)` for every match.
pub fn demux(spikes: &[AerSpike], group: &DelayGroup, mut emit: impl FnMut(u32, f64, u32, WeightCode)) {
    let delay = f64::from(group.delay);
    let sources = group.sources();
    let mut pos = 0;
    for s in spikes {
        pos = group.seek(pos, s.source);
        if pos == sources.len() {
            break;
        }
        if sources[pos] != s.source {
            continue;
        }
        let g = group.source_global(pos);
        let (targets, weights) = group.fan(pos);
        for (&t, &w) in targets.iter().zip(weights) {
            emit(t, s.time_ms + delay, g, w);
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Event {
    time: f64,
    /// 0 for the end of a refractory window, 1 + source global id for
    /// recurrent events, 2^33 + draw ordinal for external ones.
    key: u64,
    amp: f64,
}

const RECURRENT_KEY: u64 = 1;
const EXTERNAL_KEY: u64 = 1 << 33;

fn before(t: f64, key: u64, u: f64, other: u64) -> bool {
    t < u || (t == u && key < other)
}

/// A spike reaching this rank's synapses of one delay group.
#[derive(Clone, Copy, Debug)]
struct Arrival {
    time: f64,
    key: u64,
    delay: u8,
    group: u32,
    pos: u32,
}

/// Ring of received spikes indexed by emission step.
#[derive(Clone, Debug)]
pub struct DelayQueues {
    slots: Vec<Option<(u64, Vec<AerSpike>)>>,
}

impl DelayQueues {
    pub fn new(max_delay: u8) -> Self {
        DelayQueues { slots: vec![None; usize::from(max_delay) + 1] }
    }

    pub fn insert(&mut self, step: u64, mut spikes: Vec<AerSpike>) {
        spikes.sort_unstable_by(|a, b| a.source.cmp(&b.source).then(a.time_ms.total_cmp(&b.time_ms)));
        let n = self.slots.len() as u64;
        self.slots[(step % n) as usize] = Some((step, spikes));
    }

    /// Spikes emitted at `step`, if still held.
    pub fn emitted_at(&self, step: u64) -> &[AerSpike] {
        let n = self.slots.len() as u64;
        match &self.slots[(step % n) as usize] {
            Some((s, v)) if *s == step => v,
            _ => &[],
        }
    }
}

struct SpikeSink<'a> {
    rank: u32,
    codec: IdCodec,
    record: bool,
    spikes: &'a mut Vec<AerSpike>,
    log: &'a mut Vec<(u32, f64)>,
}

/// Per-neuron view used while one step is integrated.
struct Lanes<'a> {
    params: &'a [NeuronParams; 3],
    kinds: &'a [PopulationKind],
    globals: &'a [u32],
    states: &'a mut [NeuronState],
    ext: &'a [Event],
    ext_start: &'a [u32],
    ext_next: &'a mut [u32],
    lo: f64,
    hi: f64,
}

impl Lanes<'_> {
    fn apply(&mut self, local: usize, j: f64, t: f64, sink: &mut SpikeSink<'_>) -> Result<()> {
        let p = &self.params[self.kinds[local].index()];
        if let Some(ts) = apply_event(&mut self.states[local], p, j, t)? {
            sink.spikes.push(AerSpike { source: sink.codec.encode(sink.rank, local as u32)?, time_ms: ts });
            if sink.record {
                sink.log.push((self.globals[local], ts));
            }
        }
        Ok(())
    }

    /// Applies the neuron's external events and refractory release that
    /// precede `(t, key)`.
    fn catch_up(&mut self, local: usize, t: f64, key: u64, sink: &mut SpikeSink<'_>) -> Result<()> {
        let end = self.ext_start[local + 1];
        loop {
            let p = &self.params[self.kinds[local].index()];
            let s = &self.states[local];
            // Held input may carry the neuron over threshold right as the window closes.
            let release = (s.last_update < s.refractory_until
                && s.pending > p.v_theta - p.v_reset
                && (self.lo..=self.hi).contains(&s.refractory_until))
            .then_some(s.refractory_until)
            .filter(|&r| before(r, 0, t, key));
            let next = self.ext_next[local];
            let ext = (next < end).then(|| self.ext[next as usize]).filter(|e| before(e.time, e.key, t, key));
            match (release, ext) {
                (Some(r), Some(e)) if !before(r, 0, e.time, e.key) => {
                    self.ext_next[local] += 1;
                    self.apply(local, e.amp, e.time, sink)?;
                }
                (Some(r), _) => self.apply(local, 0.0, r, sink)?,
                (None, Some(e)) => {
                    self.ext_next[local] += 1;
                    self.apply(local, e.amp, e.time, sink)?;
                }
                (None, None) => return Ok(()),
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub spikes: u64,
    pub recurrent_events: u64,
    pub external_events: u64,
}

impl std::ops::AddAssign for Counters {
    fn add_assign(&mut self, o: Self) {
        self.spikes += o.spikes;
        self.recurrent_events += o.recurrent_events;
        self.external_events += o.external_events;
    }
}

/// Everything a rank owns during the simulation.
pub struct RankEngine {
    pub rank: u32,
    codec: IdCodec,
    seed: u64,
    params: [NeuronParams; 3],
    externals: [ExternalSampler; 3],
    kinds: Vec<PopulationKind>,
    globals: Vec<u32>,
    states: Vec<NeuronState>,
    matrix: SynapticMatrix,
    fanout: Fanout,
    queues: DelayQueues,
    /// External events of the current step, grouped by neuron and sorted.
    ext: Vec<Event>,
    ext_start: Vec<u32>,
    ext_next: Vec<u32>,
    ext_scratch: Vec<(f64, f64)>,
    arrivals: Vec<Arrival>,
    next_step: u64,
    delivered_through: Option<u64>,
    /// Spikes emitted by this rank, as (global id, time ms).
    pub log: Vec<(u32, f64)>,
    pub record: bool,
    pub totals: Counters,
    pub window: Counters,
    pub window_start: u64,
}

impl RankEngine {
    pub fn new(
        partition: &PartitionMap,
        preset: &StatePreset,
        seed: u64,
        rank: u32,
        matrix: SynapticMatrix,
        fanout: Fanout,
    ) -> Self {
        let n = partition.local_count(rank);
        let grid = partition.grid();
        let globals: Vec<u32> = (0..n).map(|l| partition.global_of(rank, l)).collect();
        let kinds: Vec<PopulationKind> = globals.iter().map(|&g| grid.kind_of_global(g)).collect();
        let params = PopulationKind::ALL.map(|k| *preset.neuron(k));
        let states = globals
            .iter()
            .zip(&kinds)
            .map(|(&g, &k)| {
                let p = &params[k.index()];
                let mut rng = KeyedRng::new(seed, Domain::Initial, &[u64::from(g)]);
                let mut s = NeuronState::at_rest(p);
                s.v = p.e_rest + rng.uniform() * (p.v_theta - p.e_rest);
                s
            })
            .collect();
        let max_delay = matrix.max_delay().max(1);
        RankEngine {
            rank,
            codec: partition.codec(),
            seed,
            params,
            externals: PopulationKind::ALL.map(|k| ExternalSampler::new(preset, k)),
            kinds,
            globals,
            states,
            matrix,
            fanout,
            queues: DelayQueues::new(max_delay),
            ext: Vec::new(),
            ext_start: Vec::with_capacity(n as usize + 1),
            ext_next: vec![0; n as usize],
            ext_scratch: Vec::new(),
            arrivals: Vec::new(),
            next_step: 0,
            delivered_through: None,
            log: Vec::new(),
            record: true,
            totals: Counters::default(),
            window: Counters::default(),
            window_start: 0,
        }
    }

    pub fn matrix(&self) -> &SynapticMatrix {
        &self.matrix
    }

    pub fn subsets(&self) -> &Subsets {
        &self.matrix.subsets
    }

    pub fn states(&self) -> &[NeuronState] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [NeuronState] {
        &mut self.states
    }

    pub fn local_count(&self) -> u32 {
        self.states.len() as u32
    }

    pub fn next_step(&self) -> u64 {
        self.next_step
    }

    /// Integrates all local neurons over `[step, step + 1)` ms and returns
    /// the emitted spikes sorted by source id.
    pub fn advance(&mut self, step: u64) -> Result<Vec<AerSpike>> {
        let ready = match step {
            0 => self.delivered_through.is_none(),
            s => self.delivered_through == Some(s - 1),
        };
        if step != self.next_step || !ready {
            return Err(CommError::StepOrder { rank: self.rank, requested: step, expected: self.next_step }.into());
        }
        let lo = step as f64 * STEP_MS;
        let hi = (lo + STEP_MS).next_down();
        let mut step_counts = Counters::default();

        // External drive of every neuron for this step.
        self.ext.clear();
        self.ext_start.clear();
        for local in 0..self.states.len() {
            self.ext_start.push(self.ext.len() as u32);
            self.ext_next[local] = self.ext.len() as u32;
            let kind = self.kinds[local];
            self.ext_scratch.clear();
            self.externals[kind.index()].sample(self.seed, self.globals[local], step, &mut self.ext_scratch);
            let first = self.ext.len();
            for (i, &(t, j)) in self.ext_scratch.iter().enumerate() {
                self.ext.push(Event { time: t, key: EXTERNAL_KEY + i as u64, amp: j });
            }
            self.ext[first..].sort_unstable_by(|a, b| a.time.total_cmp(&b.time).then(a.key.cmp(&b.key)));
        }
        self.ext_start.push(self.ext.len() as u32);
        step_counts.external_events += self.ext.len() as u64;

        // Recurrent arrivals in (time, source, delay) order.
        self.arrivals.clear();
        for (gi, group) in self.matrix.groups().iter().enumerate() {
            let d = u64::from(group.delay);
            if step < d {
                continue;
            }
            let sources = group.sources();
            let mut pos = 0;
            for sp in self.queues.emitted_at(step - d) {
                pos = group.seek(pos, sp.source);
                if pos == sources.len() {
                    break;
                }
                if sources[pos] != sp.source {
                    continue;
                }
                self.arrivals.push(Arrival {
                    time: (sp.time_ms + f64::from(group.delay)).clamp(lo, hi),
                    key: RECURRENT_KEY + u64::from(group.source_global(pos)),
                    delay: group.delay,
                    group: gi as u32,
                    pos: pos as u32,
                });
            }
        }
        self.arrivals
            .sort_unstable_by(|a, b| a.time.total_cmp(&b.time).then(a.key.cmp(&b.key)).then(a.delay.cmp(&b.delay)));

        let mut spikes = Vec::new();
        let mut sink = SpikeSink { rank: self.rank, codec: self.codec, record: self.record, spikes: &mut spikes, log: &mut self.log };
        let mut lanes = Lanes {
            params: &self.params,
            kinds: &self.kinds,
            globals: &self.globals,
            states: &mut self.states,
            ext: &self.ext,
            ext_start: &self.ext_start,
            ext_next: &mut self.ext_next,
            lo,
            hi,
        };
        for a in &self.arrivals {
            let (targets, weights) = self.matrix.groups()[a.group as usize].fan(a.pos as usize);
            step_counts.recurrent_events += targets.len() as u64;
            for (&t, &w) in targets.iter().zip(weights) {
                let local = t as usize;
                lanes.catch_up(local, a.time, a.key, &mut sink)?;
                lanes.apply(local, w.mv(), a.time, &mut sink)?;
            }
        }
        for local in 0..lanes.states.len() {
            lanes.catch_up(local, f64::INFINITY, u64::MAX, &mut sink)?;
        }
        spikes.sort_unstable_by_key(|s| s.source);
        step_counts.spikes = spikes.len() as u64;
        self.totals += step_counts;
        if step >= self.window_start {
            self.window += step_counts;
        }
        self.next_step = step + 1;
        Ok(spikes)
    }

    /// Splits emitted spikes into the local list and per-rank batches.
    pub fn pack(&self, step: u64, spikes: &[AerSpike]) -> (Vec<AerSpike>, BTreeMap<u32, Vec<AerSpike>>) {
        let codec = self.codec;
        let (local, batches) = pack(step, self.rank, spikes, &self.fanout, |id| codec.local_of(id));
        (local, batches.into_iter().map(|b| (b.target_rank, b.spikes)).collect())
    }

    /// Stores the spikes emitted during `step` that reached this rank.
    pub fn deliver(&mut self, step: u64, local: Vec<AerSpike>, remote: Vec<(u32, Vec<AerSpike>)>) -> Result<()> {
        if step + 1 != self.next_step || self.delivered_through.map_or(step != 0, |d| d + 1 != step) {
            return Err(CommError::StepOrder { rank: self.rank, requested: step, expected: self.next_step }.into());
        }
        let mut all = local;
        for (_, mut v) in remote {
            all.append(&mut v);
        }
        self.queues.insert(step, all);
        self.delivered_through = Some(step);
        Ok(())
    }
}

/// How ranks are executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transport {
    /// All ranks in the calling thread, round-robin.
    Loopback,
    /// One OS thread per rank.
    Threaded,
}

impl std::str::FromStr for Transport {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "loopback" | "sequential" => Ok(Transport::Loopback),
            "threaded" | "threads" => Ok(Transport::Threaded),
            other => Err(Error::Config(format!("unknown transport `{other}` (loopback, threaded)"))),
        }
    }
}

impl Transport {
    pub fn as_str(self) -> &'static str {
        match self {
            Transport::Loopback => "loopback",
            Transport::Threaded => "threaded",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub recurrent_synapses: u64,
    pub remote_records: u64,
    /// Largest number of synapse records and matrix entries alive at once.
    pub peak_live_records: u64,
}

/// Sent and received spike entries of one step, summed over ranks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolStats {
    pub steps: u64,
    pub counters: u64,
    pub payloads: u64,
    pub spikes_sent: u64,
    pub spikes_received: u64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    /// Spikes sorted by (time, global id).
    pub log: SpikeLog,
    pub totals: Counters,
    pub window: Counters,
    pub sim_seconds: f64,
    pub window_seconds: f64,
    pub protocol: ProtocolStats,
    pub traffic: Vec<TrafficRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub steps: u64,
    pub transient_steps: u64,
    pub transport: Transport,
    pub trace_traffic: bool,
    pub record: bool,
}

impl RunOptions {
    pub fn new(steps: u64) -> Self {
        RunOptions { steps, transient_steps: 0, transport: Transport::Loopback, trace_traffic: false, record: true }
    }
}

/// A built network: one engine per rank.
pub struct Network {
    pub partition: Arc<PartitionMap>,
    pub preset: StatePreset,
    pub seed: u64,
    pub ranks: Vec<RankEngine>,
    pub build: BuildStats,
    pub init_seconds: f64,
}

const fn spike_tags(step: u64) -> (Tag, Tag) {
    (Tag::new(Phase::SpikeCounters, step), Tag::new(Phase::SpikePayload, step))
}

fn without(v: &[u32], me: u32) -> Vec<u32> {
    v.iter().copied().filter(|&r| r != me).collect()
}

impl Network {
    /// Builds every rank's matrix: source-side generation, counted exchange
    /// of the records, then assembly on the target side.
    pub fn build(plan: &NetworkPlan<'_>, transport: Transport) -> Result<Network> {
        let t0 = Instant::now();
        let partition = plan.partition;
        let ranks = partition.ranks();
        let codec = partition.codec();
        let (ranks_out, build) = match transport {
            Transport::Loopback => {
                let mut generated = 0u64;
                let mut fanouts = Vec::with_capacity(ranks as usize);
                let mut outgoing = Vec::with_capacity(ranks as usize);
                let mut remote = 0u64;
                for r in 0..ranks {
                    let out = plan.generate_outgoing(r);
                    generated += out.generated;
                    remote += out.by_rank.iter().filter(|(&d, _)| d != r).map(|(_, v)| v.len() as u64).sum::<u64>();
                    fanouts.push(out.fanout);
                    outgoing.push(out.by_rank);
                }
                let (counts, received) = exchange_sequential(outgoing)?;
                let mut engines = Vec::with_capacity(ranks as usize);
                for (r, ((recs, c), fanout)) in received.into_iter().zip(counts).zip(fanouts).enumerate() {
                    let mut m = build_matrix(r as u32, codec, recs, |id| {
                        partition.global_of_id(id).expect("valid source id")
                    })?;
                    m.subsets = c.subsets;
                    engines.push(RankEngine::new(partition, plan.preset, plan.seed, r as u32, m, fanout));
                }
                let final_count: u64 = engines.iter().map(|e| e.matrix.len() as u64).sum();
                if final_count != generated {
                    return Err(Error::Connectivity(format!("built {final_count} synapses, generated {generated}")));
                }
                let stats = BuildStats {
                    recurrent_synapses: generated,
                    remote_records: remote,
                    peak_live_records: (generated + remote).max(2 * generated),
                };
                (engines, stats)
            }
            Transport::Threaded => {
                let hub = Hub::new(ranks);
                let results: Vec<Result<(RankEngine, u64, u64)>> = std::thread::scope(|scope| {
                    let handles: Vec<_> = hub
                        .endpoints()
                        .into_iter()
                        .map(|mut ep| {
                            scope.spawn(move || {
                                let r = ep.rank();
                                let res = (|| {
                                    let out = plan.generate_outgoing(r);
                                    let generated = out.generated;
                                    let remote: u64 = out.by_rank.iter().filter(|(&d, _)| d != r).map(|(_, v)| v.len() as u64).sum();
                                    let counts = exchange_counts(&mut ep, &out)?;
                                    let recs = exchange_synapses(&mut ep, &counts, out.by_rank)?;
                                    let mut m = build_matrix(r, codec, recs, |id| {
                                        partition.global_of_id(id).expect("valid source id")
                                    })?;
                                    m.subsets = counts.subsets;
                                    Ok((RankEngine::new(partition, plan.preset, plan.seed, r, m, out.fanout), generated, remote))
                                })();
                                if res.is_err() {
                                    ep.abort();
                                }
                                res
                            })
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("rank thread panicked")).collect()
                });
                let mut engines = Vec::with_capacity(ranks as usize);
                let (mut generated, mut remote) = (0, 0);
                for r in first_error(results)? {
                    engines.push(r.0);
                    generated += r.1;
                    remote += r.2;
                }
                let stats = BuildStats {
                    recurrent_synapses: generated,
                    remote_records: remote,
                    peak_live_records: (generated + remote).max(2 * generated),
                };
                (engines, stats)
            }
        };
        Ok(Network {
            partition: Arc::new(partition.clone()),
            preset: plan.preset.clone(),
            seed: plan.seed,
            ranks: ranks_out,
            build,
            init_seconds: t0.elapsed().as_secs_f64(),
        })
    }

    pub fn neuron_count(&self) -> u64 {
        self.partition.grid().total_neurons()
    }

    /// Runs `opts.steps` further steps.
    pub fn run(&mut self, opts: &RunOptions) -> Result<RunOutput> {
        let start = self.ranks.first().map_or(0, |r| r.next_step);
        for r in &mut self.ranks {
            r.record = opts.record;
            r.window_start = start + opts.transient_steps;
        }
        let before: Vec<(Counters, Counters, usize)> =
            self.ranks.iter().map(|r| (r.totals, r.window, r.log.len())).collect();
        let t0 = Instant::now();
        let (protocol, traffic, window_seconds) = match opts.transport {
            Transport::Loopback => run_loopback(&mut self.ranks, start, opts)?,
            Transport::Threaded => run_threaded(&mut self.ranks, start, opts)?,
        };
        let sim_seconds = t0.elapsed().as_secs_f64();
        let mut out = RunOutput { sim_seconds, window_seconds, protocol, traffic, ..Default::default() };
        let mut entries = Vec::new();
        for (r, (tot, win, n)) in self.ranks.iter().zip(before) {
            out.totals += diff(r.totals, tot);
            out.window += diff(r.window, win);
            entries.extend_from_slice(&r.log[n..]);
        }
        out.log = SpikeLog::from_unsorted(entries);
        Ok(out)
    }
}

fn diff(a: Counters, b: Counters) -> Counters {
    Counters {
        spikes: a.spikes - b.spikes,
        recurrent_events: a.recurrent_events - b.recurrent_events,
        external_events: a.external_events - b.external_events,
    }
}

fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    // Report the root cause rather than a peer's abort notification.
    if results.iter().any(|r| r.is_err()) {
        let mut errs: Vec<Error> = results.into_iter().filter_map(|r| r.err()).collect();
        let pos = errs.iter().position(|e| !matches!(e, Error::Comm(CommError::Aborted))).unwrap_or(0);
        return Err(errs.swap_remove(pos));
    }
    Ok(results.into_iter().map(|r| r.expect("checked")).collect())
}

fn traffic_rows(step: u64, src: u32, counters: &[(u32, Counter)], rows: &mut Vec<TrafficRow>) {
    for &(dst, c) in counters {
        rows.push(TrafficRow { step, src, dst, counter: c.count, bytes: c.count * crate::comm::AerSpike::ENCODED_LEN as u64 });
    }
}

fn run_loopback(ranks: &mut [RankEngine], start: u64, opts: &RunOptions) -> Result<(ProtocolStats, Vec<TrafficRow>, f64)> {
    let n = ranks.len();
    let mut stats = ProtocolStats::default();
    let mut traffic = Vec::new();
    let mut window_start = None;
    for step in start..start + opts.steps {
        if step == start + opts.transient_steps {
            window_start = Some(Instant::now());
        }
        let (ctag, ptag) = spike_tags(step);
        let mut locals = Vec::with_capacity(n);
        let mut counter_out = Vec::with_capacity(n);
        let mut payload_out = Vec::with_capacity(n);
        let mut sent = 0u64;
        for r in ranks.iter_mut() {
            let spikes = r.advance(step)?;
            let (local, batches) = r.pack(step, &spikes);
            let me = r.rank;
            let dests = without(&r.subsets().outgoing, me);
            check_outgoing(me, ptag, &dests, &batches)?;
            let counters = counter_messages(me, ctag, &dests, &batches);
            if opts.trace_traffic {
                traffic_rows(step, me, &counters, &mut traffic);
            }
            stats.counters += counters.len() as u64;
            sent += batches.values().map(|v| v.len() as u64).sum::<u64>();
            counter_out.push(counters);
            payload_out.push(payload_messages(ptag, batches));
            locals.push(local);
        }
        let counters_in = route_sequential(counter_out);
        let payloads_in: Vec<Vec<(u32, Payload<AerSpike>)>> = route_sequential(payload_out);
        let mut received = 0u64;
        for (((r, cin), pin), local) in ranks.iter_mut().zip(counters_in).zip(payloads_in).zip(locals) {
            let me = r.rank;
            let allowed = without(&r.subsets().incoming, me);
            let announced = check_counters(me, ctag, Some(&allowed), &cin)?;
            stats.payloads += pin.len() as u64;
            let remote = check_payloads(me, ptag, &announced, pin)?;
            received += remote.iter().map(|(_, v)| v.len() as u64).sum::<u64>();
            r.deliver(step, local, remote)?;
        }
        if sent != received {
            return Err(CommError::Conservation { step, sent, received }.into());
        }
        stats.steps += 1;
        stats.spikes_sent += sent;
        stats.spikes_received += received;
    }
    Ok((stats, traffic, window_start.map_or(0.0, |t| t.elapsed().as_secs_f64())))
}

struct ThreadReport {
    stats: ProtocolStats,
    per_step: Vec<(u64, u64)>,
    traffic: Vec<TrafficRow>,
    window_seconds: f64,
}

fn run_rank_threaded<C: Collective>(r: &mut RankEngine, ep: &mut C, start: u64, opts: &RunOptions) -> Result<ThreadReport> {
    let me = r.rank;
    let dests = without(&r.subsets().outgoing, me);
    let allowed = without(&r.subsets().incoming, me);
    let mut rep = ThreadReport { stats: ProtocolStats::default(), per_step: Vec::new(), traffic: Vec::new(), window_seconds: 0.0 };
    let mut window_start = None;
    for step in start..start + opts.steps {
        if step == start + opts.transient_steps {
            window_start = Some(Instant::now());
        }
        let (ctag, ptag) = spike_tags(step);
        let spikes = r.advance(step)?;
        let (local, batches) = r.pack(step, &spikes);
        check_outgoing(me, ptag, &dests, &batches)?;
        let counters = counter_messages(me, ctag, &dests, &batches);
        if opts.trace_traffic {
            traffic_rows(step, me, &counters, &mut rep.traffic);
        }
        rep.stats.counters += counters.len() as u64;
        let sent: u64 = batches.values().map(|v| v.len() as u64).sum();
        let cin = ep.exchange(ctag, counters)?;
        let announced = check_counters(me, ctag, Some(&allowed), &cin)?;
        let pin = ep.exchange(ptag, payload_messages(ptag, batches))?;
        rep.stats.payloads += pin.len() as u64;
        let remote = check_payloads(me, ptag, &announced, pin)?;
        let received: u64 = remote.iter().map(|(_, v)| v.len() as u64).sum();
        r.deliver(step, local, remote)?;
        rep.per_step.push((sent, received));
        rep.stats.steps += 1;
        rep.stats.spikes_sent += sent;
        rep.stats.spikes_received += received;
    }
    rep.window_seconds = window_start.map_or(0.0, |t| t.elapsed().as_secs_f64());
    Ok(rep)
}

fn run_threaded(ranks: &mut [RankEngine], start: u64, opts: &RunOptions) -> Result<(ProtocolStats, Vec<TrafficRow>, f64)> {
    let hub = Hub::new(ranks.len() as u32);
    let results: Vec<Result<ThreadReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ranks
            .iter_mut()
            .zip(hub.endpoints())
            .map(|(r, mut ep)| {
                scope.spawn(move || {
                    let res = run_rank_threaded(r, &mut ep, start, opts);
                    if res.is_err() {
                        ep.abort();
                    }
                    res
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("rank thread panicked")).collect()
    });
    let reports = first_error(results)?;
    let mut stats = ProtocolStats::default();
    let mut traffic = Vec::new();
    let mut window = 0.0f64;
    for (i, step) in (start..start + opts.steps).enumerate() {
        let sent: u64 = reports.iter().map(|r| r.per_step[i].0).sum();
        let received: u64 = reports.iter().map(|r| r.per_step[i].1).sum();
        if sent != received {
            return Err(CommError::Conservation { step, sent, received }.into());
        }
    }
    for r in reports {
        stats.counters += r.stats.counters;
        stats.payloads += r.stats.payloads;
        stats.spikes_sent += r.stats.spikes_sent;
        stats.spikes_received += r.stats.spikes_received;
        stats.steps = r.stats.steps;
        traffic.extend(r.traffic);
        window = window.max(r.window_seconds);
    }
    traffic.sort_by_key(|t| (t.step, t.src, t.dst));
    Ok((stats, traffic, window))
}

/// Emitted spikes as (global neuron id, time ms), sorted by time then id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpikeLog {
    pub entries: Vec<(u32, f64)>,
}

impl SpikeLog {
    pub fn from_unsorted(mut entries: Vec<(u32, f64)>) -> Self {
        entries.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        SpikeLog { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Binary stream of little-endian (u32 id, f64 time) pairs.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        for &(id, t) in &self.entries {
            w.write_all(&id.to_le_bytes())?;
            w.write_all(&t.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() % 12 != 0 {
            return Err(Error::Analysis(format!("spike log length {} is not a multiple of 12", buf.len())));
        }
        let entries = buf
            .chunks_exact(12)
            .map(|c| {
                let id = u32::from_le_bytes(c[0..4].try_into().expect("4 bytes"));
                let t = f64::from_le_bytes(c[4..12].try_into().expect("8 bytes"));
                (id, t)
            })
            .collect();
        Ok(SpikeLog::from_unsorted(entries))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "neuron,time_ms")?;
        for &(id, t) in &self.entries {
            writeln!(w, "{id},{t:?}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.starts_with('#') || line.starts_with("neuron") || line.trim().is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once(',')
                .ok_or_else(|| Error::Analysis(format!("line {}: expected `neuron,time_ms`", i + 1)))?;
            let id = a.trim().parse().map_err(|e| Error::Analysis(format!("line {}: {e}", i + 1)))?;
            let t = b.trim().parse().map_err(|e| Error::Analysis(format!("line {}: {e}", i + 1)))?;
            entries.push((id, t));
        }
        Ok(SpikeLog::from_unsorted(entries))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::AerSpike;
    use crate::connectivity::ConnectivityParams;
    use crate::model::{preset, ColumnSizes, NeuronId, PresetName, SynapseKind, SynapseRecord};
    use crate::topology::{partition, GridSpec};

    const EXC: NeuronParams = NeuronParams::EXCITATORY;

    fn state(v: f64, c: f64) -> NeuronState {
        NeuronState { v, c, last_update: 0.0, refractory_until: f64::NEG_INFINITY, pending: 0.0 }
    }

    #[test]
    fn evolve_examples() {
        let mut s = state(12.0, 3.0);
        evolve_free(&mut s, &EXC, 0.0);
        assert_eq!(s, state(12.0, 3.0));

        let mut s = state(10.0, 0.0);
        evolve_free(&mut s, &EXC, 1.0);
        assert!((s.v - 10.0 * (-0.05f64).exp()).abs() < 1e-12);
        assert!((s.v - 9.51229).abs() < 1e-5);

        let mut s = state(18.0, 5.0);
        evolve_free(&mut s, &EXC, 1e6);
        assert!(s.v.abs() < 1e-9 && s.c.abs() < 1e-9);
    }

    #[test]
    fn evolve_matches_fine_euler_with_adaptation() {
        let (v0, c0, dt) = (12.0, 4.0, 7.0);
        let mut s = state(v0, c0);
        evolve_free(&mut s, &EXC, dt);
        let a = EXC.adaptation.unwrap();
        let (mut v, mut c) = (v0, c0);
        let h = 1e-4;
        for _ in 0..(dt / h) as usize {
            let dv = -(v - EXC.e_rest) / EXC.tau_m - a.g_c / EXC.c_m * c;
            let dc = -c / a.tau_c;
            v += h * dv;
            c += h * dc;
        }
        assert!((s.v - v).abs() < 1e-4, "{} vs {}", s.v, v);
        assert!((s.c - c).abs() < 1e-6);
    }

    #[test]
    fn degenerate_time_constants_use_the_limit() {
        let mut p = EXC;
        p.adaptation.as_mut().unwrap().tau_c = p.tau_m;
        let mut s = state(10.0, 2.0);
        evolve_free(&mut s, &p, 3.0);
        let em = (-3.0f64 / 20.0).exp();
        let expected = 10.0 * em - 0.02 * 2.0 * 3.0 * em;
        assert!((s.v - expected).abs() < 1e-12);

        let mut near = EXC;
        near.adaptation.as_mut().unwrap().tau_c = p.tau_m * (1.0 + 1e-12);
        let mut s2 = state(10.0, 2.0);
        evolve_free(&mut s2, &near, 3.0);
        assert!((s2.v - expected).abs() < 1e-9);
    }

    #[test]
    fn event_examples() {
        let mut s = state(19.9, 0.0);
        let spike = apply_event(&mut s, &EXC, 0.2, 0.0).unwrap();
        assert_eq!(spike, Some(0.0));
        assert_eq!(s.v, 15.0);
        assert_eq!(s.c, 1.0);
        assert_eq!(s.refractory_until, 2.0);

        let inh = NeuronParams::INHIBITORY;
        let mut s = state(10.0, 0.0);
        assert_eq!(apply_event(&mut s, &inh, -1.5, 0.0).unwrap(), None);
        assert_eq!(s.v, 8.5);

        let eps = 1e-9;
        let mut s = state(20.0 - 0.515 + eps, 0.0);
        assert!(apply_event(&mut s, &inh, 0.515, 0.0).unwrap().is_some());
        let mut s = state(20.0 - 0.515 - eps, 0.0);
        assert!(apply_event(&mut s, &inh, 0.515, 0.0).unwrap().is_none());
    }

    #[test]
    fn refractory_input_is_held_then_released() {
        let mut s = state(19.9, 0.0);
        assert!(apply_event(&mut s, &EXC, 2.0, 1.0).unwrap().is_some());
        assert_eq!(apply_event(&mut s, &EXC, 1.0, 2.5).unwrap(), None);
        assert_eq!(apply_event(&mut s, &EXC, -0.25, 2.9).unwrap(), None);
        assert_eq!(s.pending, 0.75);
        // Window closes at 3.0: V = V_r + 0.75, then decays until the next event.
        assert_eq!(apply_event(&mut s, &EXC, 0.0, 3.0).unwrap(), None);
        assert_eq!(s.v, 15.75);
        assert_eq!(s.pending, 0.0);
        apply_event(&mut s, &EXC, 0.0, 4.0).unwrap();
        let a = EXC.adaptation.unwrap();
        let c_at_3 = (-2.0 / a.tau_c).exp();
        let mut reference = NeuronState { v: 15.75, c: c_at_3, last_update: 3.0, refractory_until: 3.0, pending: 0.0 };
        evolve_free(&mut reference, &EXC, 1.0);
        assert!((s.v - reference.v).abs() < 1e-12);
    }

    #[test]
    fn held_input_can_fire_at_window_end() {
        let mut s = state(19.9, 0.0);
        apply_event(&mut s, &EXC, 2.0, 0.0).unwrap();
        apply_event(&mut s, &EXC, 6.0, 1.0).unwrap();
        assert_eq!(apply_event(&mut s, &EXC, 0.0, 2.0).unwrap(), Some(2.0));
        assert_eq!(s.refractory_until, 4.0);
    }

    #[test]
    fn out_of_order_event_is_an_error() {
        let mut s = state(0.0, 0.0);
        apply_event(&mut s, &EXC, 0.1, 5.0).unwrap();
        assert!(matches!(apply_event(&mut s, &EXC, 0.1, 4.0), Err(Error::Sequencing { .. })));
    }

    #[test]
    fn external_drive_rate() {
        let p = preset(PresetName::SlowWave3_1);
        assert!((p.synaptic.external(PopulationKind::F).events_per_ms() - 1.268).abs() < 1e-12);
        let steps = 100_000u64;
        let total: usize = (0..steps).map(|s| external_events(17, s, PopulationKind::F, &p, 3).len()).sum();
        let mean = total as f64 / steps as f64;
        assert!((mean - 1.268).abs() < 0.01 * 1.268, "{mean}");

        let mut quiet = p.clone();
        quiet.synaptic.external[0].nu_ext_hz = 0.0;
        assert!(external_events(17, 3, PopulationKind::F, &quiet, 3).is_empty());

        for (t, _) in external_events(5, 42, PopulationKind::B, &p, 9) {
            assert!((42.0..43.0).contains(&t));
        }
    }

    fn group(records: Vec<SynapseRecord>) -> DelayGroup {
        let codec = IdCodec::new(16).unwrap();
        build_matrix(0, codec, records, |id| id.raw()).unwrap().groups()[0].clone()
    }

    fn rec(src: u32, tgt: u32, w: i16) -> SynapseRecord {
        SynapseRecord {
            source: NeuronId::from_raw(src),
            target: NeuronId::from_raw(tgt),
            weight: WeightCode(w),
            delay: 1,
            kind: SynapseKind(0),
        }
    }

    #[test]
    fn demux_examples() {
        let g = group(vec![rec(1, 0, 5), rec(1, 2, 6), rec(1, 3, 7), rec(4, 0, 1)]);
        let mut got = Vec::new();
        demux(&[], &g, |t, time, s, w| got.push((t, time, s, w)));
        assert!(got.is_empty());
        demux(&[AerSpike { source: NeuronId::from_raw(1), time_ms: 3.25 }], &g, |t, time, s, w| got.push((t, time, s, w)));
        assert_eq!(got.len(), 3);
        assert!(got.iter().all(|e| e.1 == 4.25 && e.2 == 1));
        got.clear();
        demux(&[AerSpike { source: NeuronId::from_raw(9), time_ms: 0.0 }], &g, |t, time, s, w| got.push((t, time, s, w)));
        assert!(got.is_empty());
    }

    #[test]
    fn demux_matches_brute_force() {
        let mut rng = KeyedRng::new(1, Domain::Test, &[]);
        let recs: Vec<_> = (0..100).map(|_| rec(rng.below(40), rng.below(30), rng.below(500) as i16)).collect();
        let g = group(recs.clone());
        let mut spikes = Vec::new();
        for s in 0..40u32 {
            if rng.uniform() < 0.4 {
                spikes.push(AerSpike { source: NeuronId::from_raw(s), time_ms: 10.0 + rng.uniform() });
            }
        }
        spikes.sort_by_key(|s| s.source);
        let mut fast = Vec::new();
        demux(&spikes, &g, |t, time, s, w| fast.push((t, time.to_bits(), s, w)));
        let mut brute = Vec::new();
        for s in &spikes {
            for r in &recs {
                if r.source == s.source {
                    brute.push((r.target.raw(), (s.time_ms + 1.0).to_bits(), s.source.raw(), r.weight));
                }
            }
        }
        fast.sort();
        brute.sort();
        assert_eq!(fast, brute);
    }

    #[test]
    fn delay_queue_holds_by_emission_step() {
        let mut q = DelayQueues::new(3);
        q.insert(5, vec![AerSpike { source: NeuronId::from_raw(2), time_ms: 5.5 }, AerSpike { source: NeuronId::from_raw(1), time_ms: 5.1 }]);
        assert_eq!(q.emitted_at(5)[0].source.raw(), 1);
        assert!(q.emitted_at(1).is_empty());
        q.insert(9, vec![]);
        assert!(q.emitted_at(5).is_empty());
    }

    fn small_network(ranks: u32) -> (PartitionMap, StatePreset) {
        let g = GridSpec::new(2, 2, ColumnSizes::scaled(0.04).unwrap()).unwrap();
        (partition(&g, ranks).unwrap(), preset(PresetName::Async8_8))
    }

    #[test]
    fn step_order_is_enforced() {
        let (p, pr) = small_network(1);
        let plan = NetworkPlan::new(&p, ConnectivityParams::new(0.5), &pr, 1).unwrap();
        let mut net = Network::build(&plan, Transport::Loopback).unwrap();
        let r = &mut net.ranks[0];
        r.advance(0).unwrap();
        assert!(matches!(r.advance(1), Err(Error::Comm(CommError::StepOrder { .. }))));
        r.deliver(0, vec![], vec![]).unwrap();
        assert!(r.advance(2).is_err());
        r.advance(1).unwrap();
    }

    #[test]
    fn zero_duration_gives_empty_log() {
        let (p, pr) = small_network(1);
        let plan = NetworkPlan::new(&p, ConnectivityParams::new(0.5), &pr, 1).unwrap();
        let mut net = Network::build(&plan, Transport::Loopback).unwrap();
        let out = net.run(&RunOptions::new(0)).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.totals, Counters::default());
    }

    #[test]
    fn transports_and_partitions_agree() {
        let run = |ranks: u32, t: Transport| {
            let (p, pr) = small_network(ranks);
            let plan = NetworkPlan::new(&p, ConnectivityParams::new(0.5), &pr, 4).unwrap();
            let mut net = Network::build(&plan, t).unwrap();
            let mut o = RunOptions::new(200);
            o.transport = t;
            let out = net.run(&o).unwrap();
            assert_eq!(out.protocol.spikes_sent, out.protocol.spikes_received);
            (out.log, net.build.recurrent_synapses)
        };
        let (base, n) = run(1, Transport::Loopback);
        assert!(!base.is_empty());
        for (r, t) in [(4, Transport::Loopback), (4, Transport::Threaded), (8, Transport::Threaded), (1, Transport::Threaded)] {
            let (log, m) = run(r, t);
            assert_eq!(m, n);
            assert_eq!(log, base, "R={r} {t:?}");
        }
    }

    #[test]
    fn spike_log_round_trips() {
        let log = SpikeLog::from_unsorted(vec![(3, 2.5), (1, 0.25), (2, 2.5)]);
        assert_eq!(log.entries[0], (1, 0.25));
        assert_eq!(log.entries[1], (2, 2.5));
        let mut bin = Vec::new();
        log.write_binary(&mut bin).unwrap();
        assert_eq!(bin.len(), 36);
        assert_eq!(SpikeLog::read_binary(&bin[..]).unwrap(), log);
        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        assert_eq!(SpikeLog::read_csv(&csv[..]).unwrap(), log);
    }
}
