//! Exponential-kernel network generation and the per-rank synaptic matrix.
//!
//! Synapses are generated by the rank hosting the source neuron. For every
//! source neuron, target column and target population a binomial count is
//! drawn, then that many distinct targets are picked uniformly. Counts and
//! synapse details come from two counter-based streams keyed by the source
//! neuron's global index, so the generated multiset does not depend on the
//! partition and counting alone reproduces the exact synapse totals.

use std::collections::BTreeMap;

use rand::seq::index;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::comm::{
    check_counters, check_outgoing, check_payloads, counted_exchange, counter_messages,
    payload_messages, route_sequential, Collective, Phase, Subsets, Tag,
};
use crate::comm::Fanout;
use crate::error::{Error, Result};
use crate::model::{
    IdCodec, NeuronId, PopulationKind, StatePreset, SynapseKind, SynapseRecord, WeightCode,
};
use crate::rng::{Domain, KeyedRng};
use crate::topology::{Column, GridSpec, PartitionMap};

/// Fraction of each source population projected onto every target neuron.
pub const INDEGREE_FRACTION: f64 = 0.9;

/// Kernel values below this fraction of the on-column value are treated as
/// zero; normalization uses the same support, so in-degrees stay exact.
pub const DEFAULT_KERNEL_CUTOFF: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DelaySpec {
    Fixed(u8),
    /// Uniform integer delay in `1..=max` ms.
    Uniform { max: u8 },
}

impl DelaySpec {
    pub fn max_delay(&self) -> u8 {
        match *self {
            DelaySpec::Fixed(d) => d,
            DelaySpec::Uniform { max } => max,
        }
    }

    fn draw(&self, rng: &mut KeyedRng) -> u8 {
        match *self {
            DelaySpec::Fixed(d) => d,
            DelaySpec::Uniform { max } => 1 + rng.below(u32::from(max)) as u8,
        }
    }
}

impl Default for DelaySpec {
    fn default() -> Self {
        DelaySpec::Fixed(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityParams {
    /// Decay length of the excitatory kernel, in grid spacings.
    pub lambda: f64,
    pub delays: DelaySpec,
    pub kernel_cutoff: f64,
}

impl ConnectivityParams {
    pub fn new(lambda: f64) -> Self {
        Self { lambda, delays: DelaySpec::default(), kernel_cutoff: DEFAULT_KERNEL_CUTOFF }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Connectivity(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.delays.max_delay() == 0 {
            return Err(Error::Connectivity("synaptic delays must be >= 1 ms".into()));
        }
        if !(self.kernel_cutoff > 0.0 && self.kernel_cutoff < 1.0) {
            return Err(Error::Connectivity(format!(
                "kernel cutoff must be in (0, 1), got {}",
                self.kernel_cutoff
            )));
        }
        Ok(())
    }
}

/// Connection probability `c0 * exp(-d / lambda)`, clamped to [0, 1].
pub fn kernel_prob(d: f64, lambda: f64, c0: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Connectivity(format!("lambda must be > 0, got {lambda}")));
    }
    let p = c0 * (-d / lambda).exp();
    if !(0.0..=1.0).contains(&p) {
        log::warn!("kernel probability {p} clamped to [0, 1] (d={d}, lambda={lambda}, c0={c0})");
        return Ok(p.clamp(0.0, 1.0));
    }
    Ok(p)
}

/// Relative column offsets inside the kernel support with their decay factor.
#[derive(Clone, Debug)]
pub struct Stencil {
    offsets: Vec<(i32, i32, f64)>,
}

impl Stencil {
    pub fn new(lambda: f64, cutoff: f64) -> Self {
        let radius = lambda * (1.0 / cutoff).ln();
        let r = radius.floor() as i32;
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let d = f64::from(dx).hypot(f64::from(dy));
                if d <= radius {
                    offsets.push((dx, dy, (-d / lambda).exp()));
                }
            }
        }
        Stencil { offsets }
    }

    pub fn offsets(&self) -> &[(i32, i32, f64)] {
        &self.offsets
    }

    /// Columns of `grid` inside the support around `center`, with decay factor.
    pub fn around<'a>(&'a self, grid: &'a GridSpec, center: Column) -> impl Iterator<Item = (Column, f64)> + 'a {
        self.offsets.iter().filter_map(move |&(dx, dy, w)| {
            let x = i64::from(center.x) + i64::from(dx);
            let y = i64::from(center.y) + i64::from(dy);
            (x >= 0 && y >= 0 && x < i64::from(grid.width) && y < i64::from(grid.height))
                .then(|| (Column::new(x as u32, y as u32), w))
        })
    }
}

/// Base probability for excitatory projections onto `target`, chosen so
/// that every target neuron expects `0.9 * K_s` synapses from population s.
pub fn normalize_c0(grid: &GridSpec, lambda: f64, target: Column) -> Result<f64> {
    normalize_c0_with(grid, &Stencil::new(lambda, DEFAULT_KERNEL_CUTOFF), target)
}

pub fn normalize_c0_with(grid: &GridSpec, stencil: &Stencil, target: Column) -> Result<f64> {
    let mass: f64 = stencil.around(grid, target).map(|(_, w)| w).sum();
    let c0 = INDEGREE_FRACTION / mass;
    if c0 > 1.0 {
        return Err(Error::Connectivity(format!("normalized C0 = {c0} exceeds 1")));
    }
    Ok(c0)
}

/// Number of columns around a central column onto which one source neuron
/// expects at least `threshold` synapses (all target populations together).
pub fn reachable_columns(grid: &GridSpec, lambda: f64, threshold: f64) -> Result<usize> {
    let stencil = Stencil::new(lambda, DEFAULT_KERNEL_CUTOFF);
    let center = Column::new(grid.width / 2, grid.height / 2);
    let k = f64::from(grid.sizes.total());
    let mut n = 0;
    for (c, w) in stencil.around(grid, center) {
        if k * normalize_c0_with(grid, &stencil, c)? * w >= threshold {
            n += 1;
        }
    }
    Ok(n)
}

/// Everything generation needs, precomputed once per network.
pub struct NetworkPlan<'a> {
    pub partition: &'a PartitionMap,
    pub params: ConnectivityParams,
    pub preset: &'a StatePreset,
    pub seed: u64,
    stencil: Stencil,
    c0: Vec<f64>,
}

impl<'a> NetworkPlan<'a> {
    pub fn new(
        partition: &'a PartitionMap,
        params: ConnectivityParams,
        preset: &'a StatePreset,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        let grid = partition.grid();
        let stencil = Stencil::new(params.lambda, params.kernel_cutoff);
        let c0 = (0..grid.columns())
            .map(|ci| normalize_c0_with(grid, &stencil, grid.column_at(ci)))
            .collect::<Result<Vec<_>>>()?;
        Ok(NetworkPlan { partition, params, preset, seed, stencil, c0 })
    }

    pub fn grid(&self) -> &GridSpec {
        self.partition.grid()
    }

    pub fn c0(&self, c: Column) -> f64 {
        self.c0[self.grid().column_index(c) as usize]
    }

    /// Visits every (target column, target population, probability) a
    /// source neuron of `kind` in `column` may project to, in a fixed order.
    fn for_each_target<F: FnMut(Column, PopulationKind, f64)>(&self, column: Column, kind: PopulationKind, mut f: F) {
        if kind.is_excitatory() {
            for (c, w) in self.stencil.around(self.grid(), column) {
                let p = (self.c0(c) * w).min(1.0);
                for t in PopulationKind::ALL {
                    f(c, t, p);
                }
            }
        } else {
            for t in PopulationKind::ALL {
                f(column, t, INDEGREE_FRACTION);
            }
        }
    }

    fn draw_count(&self, rng: &mut KeyedRng, t: PopulationKind, p: f64) -> u64 {
        let k = u64::from(self.grid().sizes.of(t));
        if p <= 0.0 || k == 0 {
            return 0;
        }
        Binomial::new(k, p).expect("p in [0, 1]").sample(rng)
    }

    /// Synapses a single source neuron would generate, without storing them.
    pub fn count_for_source(&self, global: u32) -> u64 {
        let grid = self.grid();
        let (column, kind, _) = grid.locate_global(global).expect("global in grid");
        let mut rng = KeyedRng::new(self.seed, Domain::ConnectivityCounts, &[u64::from(global)]);
        let mut n = 0;
        self.for_each_target(column, kind, |_, t, p| n += self.draw_count(&mut rng, t, p));
        n
    }

    /// Appends the synapses of one source neuron to `out`.
    pub fn generate_for_source(&self, global: u32, out: &mut Vec<GeneratedSynapse>) {
        let grid = *self.grid();
        let (column, kind, self_index) = grid.locate_global(global).expect("global in grid");
        let syn = &self.preset.synaptic;
        let mut counts = KeyedRng::new(self.seed, Domain::ConnectivityCounts, &[u64::from(global)]);
        let mut detail = KeyedRng::new(self.seed, Domain::ConnectivityDetail, &[u64::from(global)]);
        self.for_each_target(column, kind, |c, t, p| {
            let n = self.draw_count(&mut counts, t, p);
            if n == 0 {
                return;
            }
            let k = grid.sizes.of(t);
            let is_own_population = c == column && t == kind;
            let mean = syn.effective_j(t, kind);
            let sd = syn.delta_j(t, kind);
            let normal = Normal::new(mean, sd).expect("finite spread");
            let picks = index::sample(&mut detail, k as usize, n as usize);
            for idx in picks.iter() {
                let mut idx = idx as u32;
                if is_own_population && idx == self_index {
                    // Autapse: redraw among the other neurons of the population.
                    if k < 2 {
                        continue;
                    }
                    let r = detail.below(k - 1);
                    idx = if r >= self_index { r + 1 } else { r };
                }
                let w = normal.sample(&mut detail).clamp(-127.99, 127.99);
                let delay = self.params.delays.draw(&mut detail);
                out.push(GeneratedSynapse {
                    source: global,
                    target: grid.global_id(c, t, idx).expect("target inside grid"),
                    weight: WeightCode::quantize(w).expect("clamped weight"),
                    delay,
                    kind: SynapseKind::new(kind, t),
                });
            }
        });
    }

    /// Recurrent synapses whose source lives on `rank`, counted without storage.
    pub fn count_rank(&self, rank: u32) -> u64 {
        let p = self.partition;
        (0..p.local_count(rank)).map(|l| self.count_for_source(p.global_of(rank, l))).sum()
    }

    /// Total recurrent synapses of the whole network, counted without storage.
    pub fn count_all(&self) -> u64 {
        (0..self.grid().total_neurons() as u32).map(|g| self.count_for_source(g)).sum()
    }

    /// Generates every synapse of the neurons hosted on `rank`, grouped by
    /// the rank hosting the target neuron.
    pub fn generate_outgoing(&self, rank: u32) -> OutgoingSynapses {
        let part = self.partition;
        let codec = part.codec();
        let n_local = part.local_count(rank);
        let expected = self.count_rank(rank) as usize;
        let mut by_rank: BTreeMap<u32, Vec<SynapseRecord>> = BTreeMap::new();
        let mut fanout_lists = Vec::with_capacity(n_local as usize);
        let mut scratch = Vec::new();
        let mut generated = 0u64;
        for local in 0..n_local {
            let global = part.global_of(rank, local);
            scratch.clear();
            self.generate_for_source(global, &mut scratch);
            let source = codec.encode(rank, local).expect("codec sized for partition");
            let mut ranks = Vec::new();
            for s in &scratch {
                let (tr, tl) = part.place(s.target);
                let rec = SynapseRecord {
                    source,
                    target: codec.encode(tr, tl).expect("codec sized for partition"),
                    weight: s.weight,
                    delay: s.delay,
                    kind: s.kind,
                };
                let bucket = by_rank.entry(tr).or_insert_with(|| {
                    if part.ranks() == 1 {
                        Vec::with_capacity(expected)
                    } else {
                        Vec::new()
                    }
                });
                bucket.push(rec);
                ranks.push(tr);
            }
            generated += scratch.len() as u64;
            fanout_lists.push(ranks);
        }
        debug_assert_eq!(generated as usize, expected);
        OutgoingSynapses { rank, by_rank, fanout: Fanout::from_lists(fanout_lists), generated }
    }
}

/// Synapse expressed in global neuron indices (partition independent).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GeneratedSynapse {
    pub source: u32,
    pub target: u32,
    pub weight: WeightCode,
    pub delay: u8,
    pub kind: SynapseKind,
}

impl GeneratedSynapse {
    pub fn from_record(rec: &SynapseRecord, partition: &PartitionMap) -> Result<Self> {
        Ok(GeneratedSynapse {
            source: partition.global_of_id(rec.source)?,
            target: partition.global_of_id(rec.target)?,
            weight: rec.weight,
            delay: rec.delay,
            kind: rec.kind,
        })
    }

    /// 12-byte record whose id fields hold global indices.
    pub fn to_bytes(&self) -> [u8; 12] {
        SynapseRecord {
            source: NeuronId::from_raw(self.source),
            target: NeuronId::from_raw(self.target),
            weight: self.weight,
            delay: self.delay,
            kind: self.kind,
        }
        .to_bytes()
    }
}

/// A rank's generated synapses before the exchange.
#[derive(Debug)]
pub struct OutgoingSynapses {
    pub rank: u32,
    pub by_rank: BTreeMap<u32, Vec<SynapseRecord>>,
    pub fanout: Fanout,
    pub generated: u64,
}

impl OutgoingSynapses {
    pub fn counts(&self, ranks: u32) -> Vec<u64> {
        (0..ranks).map(|r| self.by_rank.get(&r).map_or(0, |v| v.len() as u64)).collect()
    }
}

/// Result of the counter exchange as seen by one rank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IncomingCounts {
    /// Records announced by each source rank, this rank included.
    pub per_source: Vec<u64>,
    pub subsets: Subsets,
}

const COUNTS_TAG: Tag = Tag::new(Phase::ConstructionCounts, 0);
const PAYLOAD_TAG: Tag = Tag::new(Phase::ConstructionPayload, 0);

fn subsets_from(me: u32, sent: &[u64], received: &BTreeMap<u32, u64>, own: u64) -> IncomingCounts {
    let ranks = sent.len() as u32;
    let mut per_source = vec![0u64; ranks as usize];
    for (&src, &n) in received {
        per_source[src as usize] = n;
    }
    per_source[me as usize] = own;
    let incoming = (0..ranks).filter(|&r| per_source[r as usize] > 0).collect();
    let outgoing = (0..ranks).filter(|&r| sent[r as usize] > 0).collect();
    IncomingCounts { per_source, subsets: Subsets { outgoing, incoming } }
}

/// First construction step on a concurrent transport: one word per rank
/// pair announcing how many synapse records will follow.
pub fn exchange_counts<C: Collective>(c: &mut C, outgoing: &OutgoingSynapses) -> Result<IncomingCounts> {
    let me = c.rank();
    let all: Vec<u32> = (0..c.size()).collect();
    let msgs = counter_messages(me, COUNTS_TAG, &all, &outgoing.by_rank);
    let received = c.exchange(COUNTS_TAG, msgs)?;
    let announced = check_counters(me, COUNTS_TAG, None, &received)?;
    let sent = outgoing.counts(c.size());
    Ok(subsets_from(me, &sent, &announced, sent[me as usize]))
}

/// Second construction step: records travel to the rank of their target
/// neuron, only over pairs with a non-zero count. The rank's own records
/// move in memory.
pub fn exchange_synapses<C: Collective>(
    c: &mut C,
    counts: &IncomingCounts,
    mut outgoing: BTreeMap<u32, Vec<SynapseRecord>>,
) -> Result<Vec<SynapseRecord>> {
    let me = c.rank();
    let mut own = outgoing.remove(&me).unwrap_or_default();
    let dests = counts.subsets.outgoing.clone();
    check_outgoing(me, PAYLOAD_TAG, &dests, &outgoing)?;
    let received = c.exchange(PAYLOAD_TAG, payload_messages(PAYLOAD_TAG, outgoing))?;
    let announced: BTreeMap<u32, u64> = counts
        .per_source
        .iter()
        .enumerate()
        .filter(|&(r, &n)| r as u32 != me && n > 0)
        .map(|(r, &n)| (r as u32, n))
        .collect();
    for (_, mut recs) in check_payloads(me, PAYLOAD_TAG, &announced, received)? {
        own.append(&mut recs);
    }
    Ok(own)
}

/// Both construction steps for all ranks on the single-worker transport.
pub fn exchange_sequential(
    outgoing: Vec<BTreeMap<u32, Vec<SynapseRecord>>>,
) -> Result<(Vec<IncomingCounts>, Vec<Vec<SynapseRecord>>)> {
    let ranks = outgoing.len() as u32;
    let all: Vec<u32> = (0..ranks).collect();
    let sent: Vec<Vec<u64>> = outgoing
        .iter()
        .map(|m| (0..ranks).map(|r| m.get(&r).map_or(0, |v| v.len() as u64)).collect())
        .collect();
    let counter_out = outgoing
        .iter()
        .enumerate()
        .map(|(me, m)| counter_messages(me as u32, COUNTS_TAG, &all, m))
        .collect();
    let counter_in = route_sequential(counter_out);
    let mut counts = Vec::with_capacity(ranks as usize);
    for (me, rx) in counter_in.iter().enumerate() {
        let announced = check_counters(me as u32, COUNTS_TAG, None, rx)?;
        counts.push(subsets_from(me as u32, &sent[me], &announced, sent[me][me]));
    }
    let mut own = Vec::with_capacity(ranks as usize);
    let mut payload_out = Vec::with_capacity(ranks as usize);
    for (me, mut m) in outgoing.into_iter().enumerate() {
        own.push(m.remove(&(me as u32)).unwrap_or_default());
        check_outgoing(me as u32, PAYLOAD_TAG, &counts[me].subsets.outgoing, &m)?;
        payload_out.push(payload_messages(PAYLOAD_TAG, m));
    }
    let payload_in = route_sequential(payload_out);
    for (me, rx) in payload_in.into_iter().enumerate() {
        let announced: BTreeMap<u32, u64> = counts[me]
            .per_source
            .iter()
            .enumerate()
            .filter(|&(r, &n)| r != me && n > 0)
            .map(|(r, &n)| (r as u32, n))
            .collect();
        for (_, mut recs) in check_payloads(me as u32, PAYLOAD_TAG, &announced, rx)? {
            own[me].append(&mut recs);
        }
    }
    Ok((counts, own))
}

/// Variant of [`exchange_synapses`] that also carries a counted exchange for
/// arbitrary payloads; used by tests of the protocol.
pub fn exchange_generic<C: Collective, P: Send + 'static>(
    c: &mut C,
    payloads: BTreeMap<u32, Vec<P>>,
) -> Result<Vec<(u32, Vec<P>)>> {
    let all: Vec<u32> = (0..c.size()).collect();
    Ok(counted_exchange(c, COUNTS_TAG, PAYLOAD_TAG, &all, None, payloads)?)
}

/// Synapses with one delay, sorted by presynaptic id, stored as parallel
/// arrays: per distinct source a start offset, per synapse a local target
/// index and a weight.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DelayGroup {
    pub delay: u8,
    sources: Vec<NeuronId>,
    starts: Vec<u32>,
    targets: Vec<u32>,
    weights: Vec<WeightCode>,
    source_globals: Vec<u32>,
}

impl DelayGroup {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn sources(&self) -> &[NeuronId] {
        &self.sources
    }

    /// Global index of the i-th distinct source.
    pub fn source_global(&self, i: usize) -> u32 {
        self.source_globals[i]
    }

    /// Target local indices and weights of the i-th distinct source.
    pub fn fan(&self, i: usize) -> (&[u32], &[WeightCode]) {
        let (a, b) = (self.starts[i] as usize, self.starts[i + 1] as usize);
        (&self.targets[a..b], &self.weights[a..b])
    }

    /// Position of `source` among the distinct sources at or after `from`.
    pub fn seek(&self, from: usize, source: NeuronId) -> usize {
        // Galloping search keeps the co-traversal linear in the sparse case.
        let tail = &self.sources[from..];
        let mut hi = 1usize;
        while hi < tail.len() && tail[hi - 1] < source {
            hi *= 2;
        }
        let hi = hi.min(tail.len());
        from + tail[..hi].partition_point(|&s| s < source)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynapticMatrix {
    pub rank: u32,
    groups: Vec<DelayGroup>,
    pub subsets: Subsets,
}

impl SynapticMatrix {
    pub fn groups(&self) -> &[DelayGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(DelayGroup::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_delay(&self) -> u8 {
        self.groups.iter().map(|g| g.delay).max().unwrap_or(0)
    }

    /// Every stored synapse as a record with packed ids, in storage order.
    pub fn records(&self, codec: IdCodec) -> Vec<SynapseRecord> {
        let mut out = Vec::with_capacity(self.len());
        for g in &self.groups {
            for (i, &src) in g.sources.iter().enumerate() {
                let (ts, ws) = g.fan(i);
                for (&t, &w) in ts.iter().zip(ws) {
                    out.push(SynapseRecord {
                        source: src,
                        target: codec.encode(self.rank, t).expect("local index fits"),
                        weight: w,
                        delay: g.delay,
                        kind: SynapseKind(0),
                    });
                }
            }
        }
        out
    }
}

/// Groups incoming records by delay and orders them by presynaptic id.
/// `global_of` maps a source id to its global index for event ordering.
pub fn build_matrix(
    rank: u32,
    codec: IdCodec,
    mut records: Vec<SynapseRecord>,
    global_of: impl Fn(NeuronId) -> u32,
) -> Result<SynapticMatrix> {
    if let Some(bad) = records.iter().find(|r| codec.rank_of(r.target) != rank) {
        return Err(Error::NonLocalTarget { target: bad.target.raw(), rank });
    }
    records.sort_unstable_by_key(|r| (r.delay, r.source, r.target, r.weight));
    // Exact sizes first, so the arrays never over-allocate.
    let mut sizes: Vec<(u8, usize, usize)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if sizes.last().is_none_or(|s| s.0 != r.delay) {
            sizes.push((r.delay, 0, 0));
        }
        let s = sizes.last_mut().expect("just pushed");
        s.1 += 1;
        if i == 0 || records[i - 1].source != r.source || records[i - 1].delay != r.delay {
            s.2 += 1;
        }
    }
    let mut groups: Vec<DelayGroup> = Vec::with_capacity(sizes.len());
    let mut next = sizes.iter();
    for r in &records {
        if groups.last().is_none_or(|g| g.delay != r.delay) {
            let &(delay, n, sources) = next.next().expect("sized above");
            groups.push(DelayGroup {
                delay,
                sources: Vec::with_capacity(sources),
                starts: Vec::with_capacity(sources + 1),
                targets: Vec::with_capacity(n),
                weights: Vec::with_capacity(n),
                source_globals: Vec::with_capacity(sources),
            });
        }
        let g = groups.last_mut().expect("just pushed");
        if g.sources.last() != Some(&r.source) {
            g.starts.push(g.targets.len() as u32);
            g.sources.push(r.source);
            g.source_globals.push(global_of(r.source));
        }
        g.targets.push(codec.local_of(r.target));
        g.weights.push(r.weight);
    }
    drop(records);
    for g in &mut groups {
        g.starts.push(g.targets.len() as u32);
    }
    Ok(SynapticMatrix { rank, groups, subsets: Subsets::default() })
}

/// Rank-pair synapse counts as CSV (`src_rank,dst_rank,synapses`).
pub fn summary_csv(per_rank_incoming: &[IncomingCounts]) -> String {
    let mut s = String::from("src_rank,dst_rank,synapses\n");
    for (dst, c) in per_rank_incoming.iter().enumerate() {
        for (src, &n) in c.per_source.iter().enumerate() {
            if n > 0 {
                s.push_str(&format!("{src},{dst},{n}\n"));
            }
        }
    }
    s
}

/// Writes synapses as sorted 12-byte little-endian records keyed by global ids.
pub fn write_synapse_dump<W: std::io::Write>(mut w: W, synapses: &mut [GeneratedSynapse]) -> Result<()> {
    synapses.sort_unstable();
    for s in synapses.iter() {
        w.write_all(&s.to_bytes())?;
    }
    Ok(())
}
