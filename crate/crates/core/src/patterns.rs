//! Deterministic generators: the Park-Miller minimal standard generator, the
//! short-period cyclic LCG behind the logic test, and the walking-bit
//! pattern tables.

use std::fmt;
use std::str::FromStr;

use crate::error::PatternError;
use crate::memdev::Word32;

/// Park-Miller modulus, 2^31 - 1.
pub const PARK_MILLER_MODULUS: u32 = 0x7FFF_FFFF;
/// Park-Miller multiplier.
pub const PARK_MILLER_MULTIPLIER: u32 = 16807;

/// One Park-Miller step without state validation.
#[inline]
pub fn park_miller_raw(x: u32) -> u32 {
    ((x as u64 * PARK_MILLER_MULTIPLIER as u64) % PARK_MILLER_MODULUS as u64) as u32
}

/// Minimal standard multiplicative congruential generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParkMiller {
    x: u32,
}

impl ParkMiller {
    /// Seeds must lie in [1, 2^31 - 2].
    pub fn new(seed: u64) -> Result<Self, PatternError> {
        if seed == 0 || seed >= PARK_MILLER_MODULUS as u64 {
            return Err(PatternError::InvalidSeed(seed));
        }
        Ok(Self { x: seed as u32 })
    }

    pub fn state(&self) -> u32 {
        self.x
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> u32 {
        self.x = park_miller_raw(self.x);
        self.x
    }
}

/// Constants of a cyclic LCG whose orbit from zero has period exactly `k`.
///
/// The increment is `2^(32 - log2 k)` times an odd number, so the orbit of
/// zero stays on multiples of `2^(32 - log2 k)`. On that lattice the map is a
/// full-period LCG modulo `k`. A corrupted state either leaves the lattice
/// (its 2-adic valuation is then preserved forever, so it never reaches
/// zero) or lands on another orbit point, shifting the phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CyclicLcgSpec {
    pub k: u32,
    pub a: Word32,
    pub c: Word32,
}

impl CyclicLcgSpec {
    pub const DEFAULT_MULTIPLIER: u32 = 1_664_525;

    /// Default constants for period `k`.
    pub fn new(k: u32) -> Result<Self, PatternError> {
        let shift = Self::shift_for(k)?;
        Self::with_constants(k, Self::DEFAULT_MULTIPLIER, 1u32 << shift)
    }

    /// Validates custom constants, enumerating the orbit of zero.
    pub fn with_constants(k: u32, a: Word32, c: Word32) -> Result<Self, PatternError> {
        let shift = Self::shift_for(k)?;
        let mismatch = PatternError::PeriodMismatch { a, c, k };
        if a % 4 != 1 || c.trailing_zeros() != shift {
            return Err(mismatch);
        }
        let spec = Self { k, a, c };
        let mut seen = vec![false; k as usize];
        let mut x = 0u32;
        for step in 0..k {
            if x & ((1u32 << shift) - 1) != 0 {
                return Err(mismatch);
            }
            let slot = (x >> shift) as usize;
            if seen[slot] || (step > 0 && x == 0) {
                return Err(mismatch);
            }
            seen[slot] = true;
            x = spec.step(x);
        }
        if x != 0 {
            return Err(mismatch);
        }
        Ok(spec)
    }

    fn shift_for(k: u32) -> Result<u32, PatternError> {
        if !k.is_power_of_two() || !(4..=1 << 16).contains(&k) {
            return Err(PatternError::InvalidPeriod(k));
        }
        Ok(32 - k.trailing_zeros())
    }

    /// Number of low state bits that are always zero on the orbit.
    pub fn lattice_shift(&self) -> u32 {
        32 - self.k.trailing_zeros()
    }

    #[inline]
    pub fn step(&self, state: Word32) -> Word32 {
        self.a.wrapping_mul(state).wrapping_add(self.c)
    }

    /// The `k` states visited from zero, starting with zero.
    pub fn orbit(&self) -> Vec<Word32> {
        let mut out = Vec::with_capacity(self.k as usize);
        let mut x = 0;
        for _ in 0..self.k {
            out.push(x);
            x = self.step(x);
        }
        out
    }

    /// Affine map `(A, C)` equal to `steps` applications of the step.
    pub fn jump(&self, mut steps: u64) -> (Word32, Word32) {
        let (mut acc_a, mut acc_c) = (1u32, 0u32);
        let (mut sq_a, mut sq_c) = (self.a, self.c);
        while steps > 0 {
            if steps & 1 == 1 {
                acc_a = sq_a.wrapping_mul(acc_a);
                acc_c = sq_a.wrapping_mul(acc_c).wrapping_add(sq_c);
            }
            sq_c = sq_a.wrapping_mul(sq_c).wrapping_add(sq_c);
            sq_a = sq_a.wrapping_mul(sq_a);
            steps >>= 1;
        }
        (acc_a, acc_c)
    }

    /// `steps` applications of the step, in logarithmic time.
    pub fn advance(&self, state: Word32, steps: u64) -> Word32 {
        let (a, c) = self.jump(steps);
        a.wrapping_mul(state).wrapping_add(c)
    }
}

/// Convenience constructor.
pub fn make_cyclic_lcg(k: u32) -> Result<CyclicLcgSpec, PatternError> {
    CyclicLcgSpec::new(k)
}

/// The walking-bit tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WalkingCode {
    /// Memtest86 variant of the 1-byte walk: each shift paired with its complement.
    OneByteMemtest86,
    OneByteZeros,
    OneByteOnes,
    FourByteZeros,
    FourByteOnes,
}

impl WalkingCode {
    pub const ALL: [WalkingCode; 5] = [
        WalkingCode::OneByteMemtest86,
        WalkingCode::OneByteZeros,
        WalkingCode::OneByteOnes,
        WalkingCode::FourByteZeros,
        WalkingCode::FourByteOnes,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            WalkingCode::OneByteMemtest86 => "1WM",
            WalkingCode::OneByteZeros => "1W0",
            WalkingCode::OneByteOnes => "1W1",
            WalkingCode::FourByteZeros => "4W0",
            WalkingCode::FourByteOnes => "4W1",
        }
    }
}

impl fmt::Display for WalkingCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WalkingCode {
    type Err = PatternError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WalkingCode::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| PatternError::UnknownCode(s.to_string()))
    }
}

/// One write/verify phase of a pattern test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    pub write: Word32,
    pub verify: Word32,
}

impl Phase {
    fn constant(p: Word32) -> Self {
        Self { write: p, verify: p }
    }
}

/// Ordered phases of a walking test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternTable {
    pub code: WalkingCode,
    pub phases: Vec<Phase>,
}

fn byte_replicated(shift: u32) -> Word32 {
    (1u32 << shift) * 0x0101_0101
}

pub fn walking_patterns(code: WalkingCode) -> PatternTable {
    let phases = match code {
        WalkingCode::OneByteOnes => (0..8).map(|s| Phase::constant(byte_replicated(s))).collect(),
        WalkingCode::OneByteZeros => (0..8).map(|s| Phase::constant(!byte_replicated(s))).collect(),
        WalkingCode::FourByteOnes => (0..32).map(|s| Phase::constant(1u32 << s)).collect(),
        WalkingCode::FourByteZeros => (0..32).map(|s| Phase::constant(!(1u32 << s))).collect(),
        WalkingCode::OneByteMemtest86 => (0..8)
            .flat_map(|s| {
                let p = byte_replicated(s);
                [Phase::constant(p), Phase::constant(!p)]
            })
            .collect(),
    };
    PatternTable { code, phases }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn park_miller_check_values() {
        let mut g = ParkMiller::new(1).unwrap();
        assert_eq!(g.next(), 16807);
        assert_eq!(g.next(), 282_475_249);
        let mut g = ParkMiller::new(1).unwrap();
        let mut last = 0;
        for _ in 0..10_000 {
            last = g.next();
        }
        assert_eq!(last, 1_043_618_065);
    }

    #[test]
    fn park_miller_rejects_bad_seeds() {
        assert!(ParkMiller::new(0).is_err());
        assert!(ParkMiller::new(PARK_MILLER_MODULUS as u64).is_err());
        assert!(ParkMiller::new(2 * PARK_MILLER_MODULUS as u64).is_err());
        assert!(ParkMiller::new(PARK_MILLER_MODULUS as u64 - 1).is_ok());
    }

    #[test]
    fn park_miller_no_repeat_within_a_million() {
        let mut g = ParkMiller::new(1).unwrap();
        let mut seen = std::collections::HashSet::with_capacity(1_000_000);
        seen.insert(1);
        for _ in 0..1_000_000 {
            let x = g.next();
            assert!(x > 0 && x < PARK_MILLER_MODULUS);
            assert!(seen.insert(x), "repeat at {x}");
        }
    }

    #[test]
    fn lcg_defaults() {
        let s = make_cyclic_lcg(256).unwrap();
        assert_eq!(s.a, 1_664_525);
        assert_eq!(s.c, 16_777_216);
        assert_eq!(s.step(0), s.c);
    }

    #[test]
    fn lcg_period_by_enumeration() {
        for k in [16u32, 64, 256, 512, 1024] {
            let s = make_cyclic_lcg(k).unwrap();
            let orbit = s.orbit();
            let mut sorted = orbit.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), k as usize, "k={k}");
            assert!(orbit.iter().all(|x| x % (1u32 << s.lattice_shift()) == 0));
            assert!(orbit[1..].iter().all(|&x| x != 0));
            assert_eq!(s.step(*orbit.last().unwrap()), 0);
        }
    }

    #[test]
    fn lcg_rejects_bad_inputs() {
        assert_eq!(make_cyclic_lcg(300), Err(PatternError::InvalidPeriod(300)));
        assert_eq!(make_cyclic_lcg(2), Err(PatternError::InvalidPeriod(2)));
        assert_eq!(make_cyclic_lcg(1 << 17), Err(PatternError::InvalidPeriod(1 << 17)));
        // a = 3 mod 4 breaks the full-period condition
        assert!(CyclicLcgSpec::with_constants(256, 3, 1 << 24).is_err());
        // even multiple of the lattice step
        assert!(CyclicLcgSpec::with_constants(256, 5, 2 << 24).is_err());
        assert!(CyclicLcgSpec::with_constants(256, 5, 3 << 24).is_ok());
    }

    #[test]
    fn jump_matches_stepping() {
        let s = make_cyclic_lcg(512).unwrap();
        let mut x = 0xDEAD_BEEF;
        for n in 0..1500u64 {
            assert_eq!(s.advance(0xDEAD_BEEF, n), x, "n={n}");
            x = s.step(x);
        }
        assert_eq!(s.advance(0, 512), 0);
        assert_eq!(s.advance(0, 4 * 512), 0);
    }

    #[test]
    fn walking_tables() {
        let t = walking_patterns(WalkingCode::FourByteOnes);
        assert_eq!(t.phases.len(), 32);
        assert_eq!(t.phases[0].write, 0x0000_0001);
        assert_eq!(t.phases[31].write, 0x8000_0000);

        let t = walking_patterns(WalkingCode::OneByteZeros);
        assert_eq!(t.phases.len(), 8);
        assert_eq!(t.phases[2].write, 0xFBFB_FBFB);

        let t = walking_patterns(WalkingCode::OneByteMemtest86);
        assert_eq!(t.phases.len(), 16);
        assert_eq!((t.phases[0].write, t.phases[1].write), (0x0101_0101, 0xFEFE_FEFE));
        for pair in t.phases.chunks(2) {
            assert_eq!(pair[1].write, !pair[0].write);
        }

        assert_eq!(walking_patterns(WalkingCode::FourByteZeros).phases[4].write, !0x10);
        for code in WalkingCode::ALL {
            assert!(walking_patterns(code).phases.iter().all(|p| p.write == p.verify));
        }
    }

    #[test]
    fn walking_code_parse() {
        assert_eq!("4W1".parse::<WalkingCode>().unwrap(), WalkingCode::FourByteOnes);
        assert!(matches!("2W1".parse::<WalkingCode>(), Err(PatternError::UnknownCode(_))));
    }
}
