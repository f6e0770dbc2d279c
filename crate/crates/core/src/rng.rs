//! Counter-based randomness.
//!
//! Every draw is a pure function of a seed, a domain tag and one or two
//! counters, so parallel lanes never share generator state and any event can
//! be replayed from its coordinates alone.

use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Independent random streams. Each fault model and each generator owns one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Overdrive = 1,
    OverdriveBit = 2,
    Coupling = 3,
    Transient = 4,
    Alu = 5,
    AluBit = 6,
    Iteration = 7,
    Fleet = 8,
    Campaign = 9,
    Scratchpad = 10,
}

/// 64-bit multiply-xorshift avalanche (the splitmix64 finalizer).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of (seed, domain, a, b).
#[inline]
pub fn hash(seed: u64, domain: Domain, a: u64, b: u64) -> u64 {
    let k = mix64(seed ^ (domain as u64).wrapping_mul(GOLDEN));
    let k = mix64(k ^ a.wrapping_add(GOLDEN));
    mix64(k ^ b.wrapping_mul(0xD6E8_FEB8_6659_FD93).wrapping_add(1))
}

/// Uniform in [0, 1) with 53 bits of precision.
#[inline]
pub fn unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in (0, 1]; safe to take the logarithm of.
#[inline]
pub fn unit_open(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Number of Bernoulli(p) failures before the next success, i.e. the gap to
/// the next event in a stream of independent trials.
pub fn geometric_gap(p: f64, x: u64) -> u64 {
    if p >= 1.0 {
        return 0;
    }
    if p <= 0.0 {
        return u64::MAX;
    }
    let g = unit_open(x).ln() / (-p).ln_1p();
    if g >= u64::MAX as f64 {
        u64::MAX
    } else {
        g as u64
    }
}

/// A sequential view over a counter-based stream, for use with `rand_distr`.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, domain: Domain, stream: u64) -> Self {
        Self {
            key: hash(seed, domain, stream, 0),
            counter: 0,
        }
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key ^ mix64(self.counter.wrapping_mul(GOLDEN)))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}
