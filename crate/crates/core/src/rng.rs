//! Counter-based random streams.
//!
//! Every random decision in the simulator draws from a stream addressed by
//! `(master seed, domain, key words)`, where the key words are partition
//! independent quantities such as global neuron indices and step numbers.
//! The same network and the same spikes are therefore produced whatever the
//! number of ranks.

use rand::RngCore;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Tags separating the independent uses of the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    ConnectivityCounts = 0x636f_6e6e_636e_74,
    ConnectivityDetail = 0x636f_6e6e_6474_6c,
    External = 0x6578_7465_726e,
    Initial = 0x696e_6974,
    Analysis = 0x616e_616c_7973,
    Test = 0x7465_7374,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 stream positioned by a hashed key.
#[derive(Clone, Debug)]
pub struct KeyedRng {
    state: u64,
}

impl KeyedRng {
    pub fn new(seed: u64, domain: Domain, key: &[u64]) -> Self {
        let mut h = mix64(seed ^ GOLDEN_GAMMA);
        h = mix64(h ^ domain as u64);
        for &k in key {
            h = mix64(h.wrapping_add(GOLDEN_GAMMA) ^ k);
        }
        Self { state: h }
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) by multiply-shift.
    #[inline]
    pub fn below(&mut self, bound: u32) -> u32 {
        ((u64::from(self.next_u32()) * u64::from(bound)) >> 32) as u32
    }
}

impl RngCore for KeyedRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}
