//! Domain types shared by every stage of the simulator: neuron identifiers,
//! population kinds, the packed synapse record, weight encoding and the
//! parameter presets for the slow-wave and asynchronous states.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Packed 32-bit neuron identifier: hosting rank in the high bits, local
/// index in the low bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId(u32);

impl NeuronId {
    pub const fn from_raw(raw: u32) -> Self {
        Self(raw)
    }

    pub const fn raw(self) -> u32 {
        self.0
    }

    pub fn encode(rank: u32, local_index: u32, bits_for_local: u32) -> Result<Self> {
        IdCodec::new(bits_for_local)?.encode(rank, local_index)
    }

    pub fn decode(self, bits_for_local: u32) -> (u32, u32) {
        let mask = if bits_for_local >= 32 { u32::MAX } else { (1u32 << bits_for_local) - 1 };
        let rank = if bits_for_local >= 32 { 0 } else { self.0 >> bits_for_local };
        (rank, self.0 & mask)
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Split of the 32 id bits between rank and local index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdCodec {
    bits_for_local: u32,
}

impl IdCodec {
    pub fn new(bits_for_local: u32) -> Result<Self> {
        if bits_for_local == 0 || bits_for_local > 31 {
            return Err(Error::Encoding(format!(
                "bits_for_local must be in 1..=31, got {bits_for_local}"
            )));
        }
        Ok(Self { bits_for_local })
    }

    /// Smallest codec able to hold `max_local` neurons per rank on `ranks` ranks.
    pub fn for_layout(ranks: u32, max_local: u32) -> Result<Self> {
        let local_bits = bits_needed(max_local.max(1) - 1).max(1);
        let rank_bits = bits_needed(ranks.max(1) - 1);
        if local_bits + rank_bits > 31 {
            return Err(Error::Encoding(format!(
                "{ranks} ranks x {max_local} local neurons exceed 31 bits"
            )));
        }
        Self::new(local_bits)
    }

    pub fn bits_for_local(self) -> u32 {
        self.bits_for_local
    }

    pub fn encode(self, rank: u32, local_index: u32) -> Result<NeuronId> {
        let b = self.bits_for_local;
        if u64::from(local_index) >= 1u64 << b {
            return Err(Error::Encoding(format!(
                "local index {local_index} does not fit in {b} bits"
            )));
        }
        if u64::from(rank) >= 1u64 << (32 - b) {
            return Err(Error::Encoding(format!(
                "rank {rank} does not fit in {} bits",
                32 - b
            )));
        }
        Ok(NeuronId((rank << b) | local_index))
    }

    pub fn decode(self, id: NeuronId) -> (u32, u32) {
        id.decode(self.bits_for_local)
    }

    pub fn rank_of(self, id: NeuronId) -> u32 {
        id.0 >> self.bits_for_local
    }

    pub fn local_of(self, id: NeuronId) -> u32 {
        id.0 & ((1u32 << self.bits_for_local) - 1)
    }
}

fn bits_needed(max_value: u32) -> u32 {
    32 - max_value.leading_zeros()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PopulationKind {
    /// Strongly coupled excitatory "foreground" neurons.
    F,
    /// Excitatory "background" neurons.
    B,
    /// Inhibitory neurons.
    I,
}

impl PopulationKind {
    pub const ALL: [PopulationKind; 3] = [PopulationKind::F, PopulationKind::B, PopulationKind::I];

    pub fn index(self) -> usize {
        match self {
            PopulationKind::F => 0,
            PopulationKind::B => 1,
            PopulationKind::I => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_excitatory(self) -> bool {
        !matches!(self, PopulationKind::I)
    }

    pub fn label(self) -> &'static str {
        match self {
            PopulationKind::F => "F",
            PopulationKind::B => "B",
            PopulationKind::I => "I",
        }
    }
}

impl fmt::Display for PopulationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Neurons per population in one column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSizes {
    pub f: u32,
    pub b: u32,
    pub i: u32,
}

impl ColumnSizes {
    pub const FULL: ColumnSizes = ColumnSizes { f: 250, b: 750, i: 250 };

    /// Full-scale sizes multiplied by `scale` and rounded.
    pub fn scaled(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::Grid(format!("module_scale must be in (0, 1], got {scale}")));
        }
        let s = |k: u32| ((f64::from(k) * scale).round() as u32).max(1);
        Ok(ColumnSizes { f: s(250), b: s(750), i: s(250) })
    }

    pub fn of(&self, kind: PopulationKind) -> u32 {
        match kind {
            PopulationKind::F => self.f,
            PopulationKind::B => self.b,
            PopulationKind::I => self.i,
        }
    }

    /// Offset of the first neuron of `kind` within a column (F, then B, then I).
    pub fn offset(&self, kind: PopulationKind) -> u32 {
        match kind {
            PopulationKind::F => 0,
            PopulationKind::B => self.f,
            PopulationKind::I => self.f + self.b,
        }
    }

    pub fn total(&self) -> u32 {
        self.f + self.b + self.i
    }

    pub fn kind_at(&self, index_in_column: u32) -> Option<(PopulationKind, u32)> {
        if index_in_column < self.f {
            Some((PopulationKind::F, index_in_column))
        } else if index_in_column < self.f + self.b {
            Some((PopulationKind::B, index_in_column - self.f))
        } else if index_in_column < self.total() {
            Some((PopulationKind::I, index_in_column - self.f - self.b))
        } else {
            None
        }
    }
}

/// Synaptic efficacy in 16-bit fixed point, 1/256 mV per LSB.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeightCode(pub i16);

pub const WEIGHT_LSB_MV: f64 = 1.0 / 256.0;

impl WeightCode {
    pub fn quantize(w_mv: f64) -> Result<Self> {
        if !w_mv.is_finite() || w_mv.abs() >= 128.0 {
            return Err(Error::WeightRange(w_mv));
        }
        let code = (w_mv * 256.0).round();
        // 127.999 * 256 rounds to 32768 only above i16::MAX; clamp that single edge.
        Ok(WeightCode(code.clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16))
    }

    pub fn mv(self) -> f64 {
        f64::from(self.0) * WEIGHT_LSB_MV
    }
}

/// Synapse class tag: source kind in bits 0-1, target kind in bits 2-3,
/// bit 7 flags a plastic synapse (never set by this simulator).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SynapseKind(pub u8);

impl SynapseKind {
    pub const PLASTIC_FLAG: u8 = 0x80;

    pub fn new(source: PopulationKind, target: PopulationKind) -> Self {
        SynapseKind(source.index() as u8 | ((target.index() as u8) << 2))
    }

    pub fn source(self) -> Option<PopulationKind> {
        PopulationKind::from_index(usize::from(self.0 & 0b11))
    }

    pub fn target(self) -> Option<PopulationKind> {
        PopulationKind::from_index(usize::from((self.0 >> 2) & 0b11))
    }

    pub fn is_plastic(self) -> bool {
        self.0 & Self::PLASTIC_FLAG != 0
    }
}

/// Static synapse as stored and exchanged: 12 bytes on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SynapseRecord {
    pub source: NeuronId,
    pub target: NeuronId,
    pub weight: WeightCode,
    pub delay: u8,
    pub kind: SynapseKind,
}

impl SynapseRecord {
    pub const ENCODED_LEN: usize = 12;

    pub fn to_bytes(&self) -> [u8; 12] {
        let mut out = [0u8; 12];
        out[0..4].copy_from_slice(&self.source.raw().to_le_bytes());
        out[4..8].copy_from_slice(&self.target.raw().to_le_bytes());
        out[8..10].copy_from_slice(&self.weight.0.to_le_bytes());
        out[10] = self.delay;
        out[11] = self.kind.0;
        out
    }

    pub fn from_bytes(bytes: &[u8; 12]) -> Self {
        let word = |r: std::ops::Range<usize>| {
            let mut w = [0u8; 4];
            w.copy_from_slice(&bytes[r]);
            u32::from_le_bytes(w)
        };
        SynapseRecord {
            source: NeuronId(word(0..4)),
            target: NeuronId(word(4..8)),
            weight: WeightCode(i16::from_le_bytes([bytes[8], bytes[9]])),
            delay: bytes[10],
            kind: SynapseKind(bytes[11]),
        }
    }
}

/// Per-synapse plasticity state. Representable only; the dynamics run with
/// plasticity off, so no live synapse ever carries it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlasticExtension {
    pub last_spike_ms: f32,
    pub derivative: f32,
}

impl PlasticExtension {
    pub const ENCODED_LEN: usize = 8;

    pub fn to_bytes(&self) -> [u8; 8] {
        let mut out = [0u8; 8];
        out[0..4].copy_from_slice(&self.last_spike_ms.to_le_bytes());
        out[4..8].copy_from_slice(&self.derivative.to_le_bytes());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    /// Fatigue increment per spike.
    pub alpha_c: f64,
    /// Fatigue decay time constant (ms).
    pub tau_c: f64,
    /// Fatigue coupling conductance (nS).
    pub g_c: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    pub tau_m: f64,
    pub c_m: f64,
    pub e_rest: f64,
    pub v_theta: f64,
    pub v_reset: f64,
    pub tau_arp: f64,
    /// Absent for inhibitory neurons.
    pub adaptation: Option<Adaptation>,
}

impl NeuronParams {
    pub const EXCITATORY: NeuronParams = NeuronParams {
        tau_m: 20.0,
        c_m: 1.0,
        e_rest: 0.0,
        v_theta: 20.0,
        v_reset: 15.0,
        tau_arp: 2.0,
        adaptation: Some(Adaptation { alpha_c: 1.0, tau_c: 1000.0, g_c: 0.02 }),
    };

    pub const INHIBITORY: NeuronParams = NeuronParams {
        tau_m: 10.0,
        c_m: 1.0,
        e_rest: 0.0,
        v_theta: 20.0,
        v_reset: 15.0,
        tau_arp: 1.0,
        adaptation: None,
    };

    /// Fatigue-to-drift factor g_c / C_m (1/ms); zero without adaptation.
    pub fn adaptation_drift(&self) -> f64 {
        self.adaptation.map_or(0.0, |a| a.g_c / self.c_m)
    }

    pub fn validate(&self) -> Result<()> {
        let times_ok = self.tau_m > 0.0
            && self.tau_arp >= 0.0
            && self.c_m > 0.0
            && self.adaptation.is_none_or(|a| a.tau_c > 0.0);
        if !times_ok || self.v_theta <= self.v_reset {
            return Err(Error::Config(format!("invalid neuron parameters: {self:?}")));
        }
        Ok(())
    }
}

/// External Poisson drive onto one target population.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalDrive {
    pub j_ext: f64,
    pub nu_ext_hz: f64,
    pub n_ext: u32,
}

impl ExternalDrive {
    /// Mean number of external events per neuron per millisecond.
    pub fn events_per_ms(&self) -> f64 {
        f64::from(self.n_ext) * self.nu_ext_hz / 1000.0
    }
}

pub const RELATIVE_SPREAD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynapticParams {
    /// Mean efficacy `j[target][source]` in mV, indexed by `PopulationKind::index`.
    pub j: [[f64; 3]; 3],
    /// Relative spread; the efficacy standard deviation is `spread * |J|`.
    pub spread: f64,
    pub external: [ExternalDrive; 3],
}

impl SynapticParams {
    pub fn j(&self, target: PopulationKind, source: PopulationKind) -> f64 {
        self.j[target.index()][source.index()]
    }

    /// Efficacy actually applied to the membrane: inhibitory sources always
    /// hyperpolarize, whatever sign the table carries.
    pub fn effective_j(&self, target: PopulationKind, source: PopulationKind) -> f64 {
        let j = self.j(target, source);
        if source.is_excitatory() {
            j
        } else {
            -j.abs()
        }
    }

    pub fn delta_j(&self, target: PopulationKind, source: PopulationKind) -> f64 {
        self.spread * self.j(target, source).abs()
    }

    pub fn external(&self, target: PopulationKind) -> &ExternalDrive {
        &self.external[target.index()]
    }

    pub fn delta_j_ext(&self, target: PopulationKind) -> f64 {
        self.spread * self.external(target).j_ext.abs()
    }

    /// Copy with every recurrent and external efficacy divided by `scale`.
    pub fn rescaled(&self, scale: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.j {
            for v in row.iter_mut() {
                *v /= scale;
            }
        }
        for e in &mut out.external {
            e.j_ext /= scale;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PresetName {
    #[serde(rename = "SW-3.1Hz")]
    SlowWave3_1,
    #[serde(rename = "AW-2.8Hz")]
    Async2_8,
    #[serde(rename = "AW-8.8Hz")]
    Async8_8,
}

impl PresetName {
    pub const ALL: [PresetName; 3] =
        [PresetName::SlowWave3_1, PresetName::Async2_8, PresetName::Async8_8];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::SlowWave3_1 => "SW-3.1Hz",
            PresetName::Async2_8 => "AW-2.8Hz",
            PresetName::Async8_8 => "AW-8.8Hz",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownPreset {
                name: s.to_string(),
                available: PresetName::ALL.map(PresetName::as_str).join(", "),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatePreset {
    pub name: PresetName,
    pub excitatory: NeuronParams,
    pub inhibitory: NeuronParams,
    pub synaptic: SynapticParams,
}

impl StatePreset {
    pub fn neuron(&self, kind: PopulationKind) -> &NeuronParams {
        if kind.is_excitatory() {
            &self.excitatory
        } else {
            &self.inhibitory
        }
    }
}

pub fn preset_by_name(name: &str) -> Result<StatePreset> {
    Ok(preset(name.parse()?))
}

pub fn preset(name: PresetName) -> StatePreset {
    // Rows: target F, B, I. Columns: source F, B, I.
    let (j, j_ext_fb) = match name {
        PresetName::SlowWave3_1 => (
            [[0.600, 0.382, -1.5], [0.382, 0.429, -1.5], [0.560, 0.560, -1.5]],
            [0.832, 0.858],
        ),
        PresetName::Async2_8 => (
            [[0.515, 0.412, -1.5], [0.412, 0.429, -1.5], [0.560, 0.560, -1.5]],
            [0.858, 0.858],
        ),
        PresetName::Async8_8 => (
            [[0.515, 0.412, -1.5], [0.412, 0.429, -1.5], [0.560, 0.560, -1.5]],
            [1.416, 1.416],
        ),
    };
    let ext = |j_ext: f64, nu: f64| ExternalDrive { j_ext, nu_ext_hz: nu, n_ext: 400 };
    StatePreset {
        name,
        excitatory: NeuronParams::EXCITATORY,
        inhibitory: NeuronParams::INHIBITORY,
        synaptic: SynapticParams {
            j,
            spread: RELATIVE_SPREAD,
            external: [ext(j_ext_fb[0], 3.17), ext(j_ext_fb[1], 3.17), ext(1.120, 3.0)],
        },
    }
}

/// Renders a preset in the line format of the checked-in golden tables.
pub fn render_preset_table(p: &StatePreset) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "preset {}", p.name);
    for t in PopulationKind::ALL {
        for src in PopulationKind::ALL {
            let _ = writeln!(s, "J {t} {src} {:.3}", p.synaptic.j(t, src));
        }
    }
    for t in PopulationKind::ALL {
        let e = p.synaptic.external(t);
        let _ = writeln!(s, "ext {t} J={:.3} nu={:.2} N={}", e.j_ext, e.nu_ext_hz, e.n_ext);
    }
    for (label, n) in [("exc", &p.excitatory), ("inh", &p.inhibitory)] {
        let _ = write!(
            s,
            "neuron {label} tau_m={} C_m={} E={} V_theta={} V_r={} tau_arp={}",
            n.tau_m, n.c_m, n.e_rest, n.v_theta, n.v_reset, n.tau_arp
        );
        match n.adaptation {
            Some(a) => {
                let _ = writeln!(s, " alpha_c={} tau_c={} g_c={}", a.alpha_c, a.tau_c, a.g_c);
            }
            None => s.push('\n'),
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_examples() {
        assert_eq!(NeuronId::encode(0, 0, 20).unwrap().raw(), 0);
        assert_eq!(NeuronId::encode(1, 0, 20).unwrap().raw(), 1 << 20);
        assert_eq!(NeuronId::encode(3, 5, 20).unwrap().raw(), 3 * (1 << 20) + 5);
        assert_eq!(NeuronId::from_raw(3_145_733).decode(20), (3, 5));
    }

    #[test]
    fn encode_overflow() {
        assert!(NeuronId::encode(0, 1 << 20, 20).is_err());
        assert!(NeuronId::encode(1 << 12, 0, 20).is_err());
        assert!(NeuronId::encode((1 << 12) - 1, (1 << 20) - 1, 20).is_ok());
    }

    #[test]
    fn codec_for_layout() {
        let c = IdCodec::for_layout(1, 720_000).unwrap();
        assert_eq!(c.bits_for_local(), 20);
        let c = IdCodec::for_layout(9, 2000).unwrap();
        assert!(c.encode(8, 1999).is_ok());
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(WeightCode::quantize(0.0).unwrap(), WeightCode(0));
        let q = WeightCode::quantize(0.515).unwrap();
        assert_eq!(q.0, 132);
        assert_eq!(q.mv(), 0.515625);
        let q = WeightCode::quantize(-1.5).unwrap();
        assert_eq!(q.0, -384);
        assert_eq!(q.mv(), -1.5);
        assert!(WeightCode::quantize(128.0).is_err());
        assert!(WeightCode::quantize(-200.0).is_err());
        assert!(WeightCode::quantize(f64::NAN).is_err());
    }

    #[test]
    fn record_is_twelve_bytes_little_endian() {
        let r = SynapseRecord {
            source: NeuronId::from_raw(0x0102_0304),
            target: NeuronId::from_raw(7),
            weight: WeightCode(-384),
            delay: 3,
            kind: SynapseKind::new(PopulationKind::I, PopulationKind::F),
        };
        let b = r.to_bytes();
        assert_eq!(b.len(), SynapseRecord::ENCODED_LEN);
        assert_eq!(&b[0..4], &[4, 3, 2, 1]);
        assert_eq!(&b[8..10], &(-384i16).to_le_bytes());
        assert_eq!(b[10], 3);
        assert_eq!(SynapseRecord::from_bytes(&b), r);
        assert_eq!(r.kind.source(), Some(PopulationKind::I));
        assert_eq!(r.kind.target(), Some(PopulationKind::F));
        assert!(!r.kind.is_plastic());
        assert_eq!(PlasticExtension { last_spike_ms: 1.0, derivative: 0.5 }.to_bytes().len(), 8);
    }

    #[test]
    fn preset_values() {
        let sw = preset_by_name("SW-3.1Hz").unwrap();
        assert_eq!(sw.synaptic.j(PopulationKind::F, PopulationKind::F), 0.600);
        assert_eq!(sw.synaptic.j(PopulationKind::B, PopulationKind::B), 0.429);
        let ext = sw.synaptic.external(PopulationKind::F);
        assert_eq!((ext.nu_ext_hz, ext.n_ext), (3.17, 400));

        let aw = preset(PresetName::Async8_8);
        assert_eq!(aw.synaptic.external(PopulationKind::F).j_ext, 1.416);
        assert_eq!(aw.synaptic.j(PopulationKind::F, PopulationKind::F), 0.515);

        let e = aw.excitatory;
        let a = e.adaptation.unwrap();
        assert_eq!((e.tau_m, e.v_theta, e.v_reset, e.tau_arp), (20.0, 20.0, 15.0, 2.0));
        assert_eq!((a.tau_c, a.g_c, a.alpha_c), (1000.0, 0.02, 1.0));
        assert!(aw.inhibitory.adaptation.is_none());
    }

    #[test]
    fn aw_presets_differ_only_in_external_fb() {
        let a = preset(PresetName::Async2_8);
        let b = preset(PresetName::Async8_8);
        assert_eq!(a.synaptic.j, b.synaptic.j);
        assert_eq!(a.excitatory, b.excitatory);
        assert_eq!(a.synaptic.external[2], b.synaptic.external[2]);
        for k in [PopulationKind::F, PopulationKind::B] {
            assert_eq!(a.synaptic.external(k).j_ext, 0.858);
            assert_eq!(b.synaptic.external(k).j_ext, 1.416);
        }
    }

    #[test]
    fn unknown_preset_lists_available() {
        let err = preset_by_name("UP-1Hz").unwrap_err().to_string();
        assert!(err.contains("SW-3.1Hz") && err.contains("AW-8.8Hz"), "{err}");
    }

    #[test]
    fn inhibitory_sign_convention() {
        for name in PresetName::ALL {
            let p = preset(name);
            for t in PopulationKind::ALL {
                assert!(p.synaptic.effective_j(t, PopulationKind::I) < 0.0);
                assert_eq!(
                    p.synaptic.delta_j(t, PopulationKind::I),
                    0.25 * p.synaptic.j(t, PopulationKind::I).abs()
                );
            }
        }
    }

    #[test]
    fn scaled_sizes_keep_ratio() {
        assert_eq!(ColumnSizes::scaled(1.0).unwrap(), ColumnSizes::FULL);
        assert_eq!(ColumnSizes::scaled(0.1).unwrap(), ColumnSizes { f: 25, b: 75, i: 25 });
        assert!(ColumnSizes::scaled(0.0).is_err());
        assert!(ColumnSizes::scaled(1.5).is_err());
        let s = ColumnSizes::FULL;
        assert_eq!(s.kind_at(250), Some((PopulationKind::B, 0)));
        assert_eq!(s.kind_at(1249), Some((PopulationKind::I, 249)));
        assert_eq!(s.kind_at(1250), None);
    }

    #[test]
    fn golden_tables_match_fixture() {
        let golden = include_str!("../fixtures/presets.txt");
        let rendered: String = PresetName::ALL
            .into_iter()
            .map(|n| render_preset_table(&preset(n)))
            .collect::<Vec<_>>()
            .join("\n");
        assert_eq!(rendered, golden);
    }

    proptest::proptest! {
        #[test]
        fn id_round_trip(bits in 1u32..=31, rank in 0u32..u32::MAX, local in 0u32..u32::MAX) {
            let rank = rank % (1u32 << (32 - bits)).max(1);
            let local = local % (1u32 << bits);
            let id = NeuronId::encode(rank, local, bits).unwrap();
            proptest::prop_assert_eq!(id.decode(bits), (rank, local));
        }

        #[test]
        fn id_order_is_lexicographic(bits in 10u32..=26, a in (0u32..64, 0u32..1024), b in (0u32..64, 0u32..1024)) {
            let ia = NeuronId::encode(a.0, a.1, bits).unwrap();
            let ib = NeuronId::encode(b.0, b.1, bits).unwrap();
            proptest::prop_assert_eq!(ia.cmp(&ib), a.cmp(&b));
        }

        #[test]
        fn quantization_error_bounded(w in -4.0f64..4.0) {
            let q = WeightCode::quantize(w).unwrap();
            proptest::prop_assert!((q.mv() - w).abs() <= 1.0 / 512.0 + 1e-15);
        }

        #[test]
        fn record_bytes_round_trip(s: u32, t: u32, w: i16, d in 1u8.., k: u8) {
            let r = SynapseRecord {
                source: NeuronId::from_raw(s),
                target: NeuronId::from_raw(t),
                weight: WeightCode(w),
                delay: d,
                kind: SynapseKind(k),
            };
            proptest::prop_assert_eq!(SynapseRecord::from_bytes(&r.to_bytes()), r);
        }
    }
}
