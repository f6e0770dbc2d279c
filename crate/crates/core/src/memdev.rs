//! The word-addressable memory device every test kernel targets.
//!
//! All access goes through bulk operations; a single-word access is a bulk
//! operation of length one. [`HostBuffer`] is the faultless implementation
//! backed by real host RAM, and [`crate::faultsim::FaultSimDevice`] is the
//! fault-injecting one.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::DeviceError;
use crate::patterns::{park_miller_raw, CyclicLcgSpec};

/// A 32-bit test word. Arithmetic on test words wraps modulo 2^32.
pub type Word32 = u32;

/// A word offset from the start of the tested region.
pub type WordAddress = usize;

const MIB: usize = 1 << 20;

/// Size of a tested region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    word_count: usize,
}

impl RegionSpec {
    /// Region sizes of the deployed configuration.
    pub const DEPLOYED_MIB: [u32; 3] = [32, 64, 128];

    pub fn from_mib(size_mib: u32) -> Result<Self, DeviceError> {
        if size_mib == 0 {
            return Err(DeviceError::Config("region size must be positive".into()));
        }
        Ok(Self {
            word_count: size_mib as usize * MIB / 4,
        })
    }

    /// A region of arbitrary word count, for small simulations.
    pub fn from_words(word_count: usize) -> Result<Self, DeviceError> {
        if word_count == 0 {
            return Err(DeviceError::Config("region must hold at least one word".into()));
        }
        Ok(Self { word_count })
    }

    pub fn word_count(&self) -> usize {
        self.word_count
    }

    pub fn bytes(&self) -> usize {
        self.word_count * 4
    }

    /// Size in whole MiB, or `None` for regions that are not a MiB multiple.
    pub fn size_mib(&self) -> Option<u32> {
        let bytes = self.bytes();
        bytes.is_multiple_of(MIB).then_some((bytes / MIB) as u32)
    }

    /// Size in MiB rounded down, for record metadata.
    pub fn size_mib_floor(&self) -> u32 {
        (self.bytes() / MIB) as u32
    }
}

/// GPU architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    G80,
    GT200,
    #[serde(rename = "OTHER")]
    Other,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::G80, Architecture::GT200, Architecture::Other];

    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::G80 => "G80",
            Architecture::GT200 => "GT200",
            Architecture::Other => "OTHER",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "G80" => Ok(Architecture::G80),
            "GT200" => Ok(Architecture::GT200),
            "OTHER" => Ok(Architecture::Other),
            other => Err(format!("unknown architecture `{other}`")),
        }
    }
}

/// Static description of a device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceCapabilities {
    pub region: RegionSpec,
    /// Words of fast per-lane-group memory.
    pub scratchpad_words: usize,
    /// Parallel execution width.
    pub lane_count: usize,
    pub device_name: String,
    pub shader_clock_mhz: u32,
    pub memory_clock_mhz: u32,
    pub architecture: Architecture,
}

impl DeviceCapabilities {
    pub fn new(region: RegionSpec) -> Self {
        Self {
            region,
            scratchpad_words: 4096,
            lane_count: 1,
            device_name: "host".to_string(),
            shader_clock_mhz: 1350,
            memory_clock_mhz: 400,
            architecture: Architecture::Other,
        }
    }

    pub fn with_lanes(mut self, lane_count: usize) -> Self {
        self.lane_count = lane_count;
        self
    }

    pub fn with_memory_clock(mut self, mhz: u32) -> Self {
        self.memory_clock_mhz = mhz;
        self
    }

    pub fn with_scratchpad(mut self, words: usize) -> Self {
        self.scratchpad_words = words;
        self
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        if self.lane_count == 0 {
            return Err(DeviceError::Config("lane_count must be at least 1".into()));
        }
        if self.memory_clock_mhz == 0 {
            return Err(DeviceError::Config("memory clock must be positive".into()));
        }
        Ok(())
    }

    pub fn word_count(&self) -> usize {
        self.region.word_count()
    }
}

/// Integer unit used by the generators. Fault-injecting devices hand out
/// units that occasionally corrupt a result.
pub trait Alu {
    /// `a * x + c` modulo 2^32.
    fn mul_add(&mut self, a: Word32, x: Word32, c: Word32) -> Word32;

    /// One Park-Miller step on a raw state.
    fn park_miller(&mut self, x: u32) -> u32;

    /// Runs `steps` iterations of the cyclic LCG from `state`.
    fn lcg_run(&mut self, spec: &CyclicLcgSpec, mut state: Word32, steps: u64) -> Word32 {
        for _ in 0..steps {
            state = self.mul_add(spec.a, state, spec.c);
        }
        state
    }
}

/// The exact arithmetic unit of the host.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactAlu;

impl Alu for ExactAlu {
    #[inline]
    fn mul_add(&mut self, a: Word32, x: Word32, c: Word32) -> Word32 {
        a.wrapping_mul(x).wrapping_add(c)
    }

    #[inline]
    fn park_miller(&mut self, x: u32) -> u32 {
        park_miller_raw(x)
    }
}

/// A word-addressable memory device.
///
/// Bulk operations apply to words in ascending address order. Strided and
/// class operations exist so kernels can express sparse access without one
/// call per word; their defaults are built from the contiguous primitives.
pub trait MemoryDevice: Send {
    type Alu: Alu + Send;

    fn capabilities(&self) -> &DeviceCapabilities;

    fn word_count(&self) -> usize {
        self.capabilities().word_count()
    }

    fn write_words(&mut self, base: WordAddress, values: &[Word32]) -> Result<(), DeviceError>;

    fn read_into(&mut self, base: WordAddress, out: &mut [Word32]) -> Result<(), DeviceError>;

    fn read_words(&mut self, base: WordAddress, count: usize) -> Result<Vec<Word32>, DeviceError> {
        let mut out = vec![0; count];
        self.read_into(base, &mut out)?;
        Ok(out)
    }

    /// Writes `pattern` to `count` words starting at `base`.
    fn fill_range(&mut self, base: WordAddress, count: usize, pattern: Word32) -> Result<(), DeviceError>;

    /// Writes `pattern` to every word of the region.
    fn fill(&mut self, pattern: Word32) -> Result<(), DeviceError> {
        let n = self.word_count();
        self.fill_range(0, n, pattern)
    }

    /// Reads `count` words from `base` and counts those not equal to `expected`.
    fn count_mismatches(&mut self, base: WordAddress, count: usize, expected: Word32) -> Result<u64, DeviceError> {
        let mut buf = vec![0; count.min(1 << 16)];
        let mut errors = 0u64;
        let mut addr = base;
        let end = base + count;
        while addr < end {
            let n = (end - addr).min(buf.len());
            self.read_into(addr, &mut buf[..n])?;
            errors += buf[..n].iter().filter(|&&w| w != expected).count() as u64;
            addr += n;
        }
        Ok(errors)
    }

    /// Writes `value` at every address `a` with `a % modulus == residue`.
    fn fill_class(&mut self, modulus: usize, residue: usize, value: Word32) -> Result<(), DeviceError> {
        let n = self.word_count();
        let mut addr = residue;
        while addr < n {
            self.write_words(addr, &[value])?;
            addr += modulus;
        }
        Ok(())
    }

    /// Writes `value` at every address outside the residue class.
    fn fill_outside_class(&mut self, modulus: usize, residue: usize, value: Word32) -> Result<(), DeviceError> {
        let n = self.word_count();
        let mut start = 0;
        let mut class_addr = residue;
        while start < n {
            let stop = class_addr.min(n);
            if stop > start {
                self.fill_range(start, stop - start, value)?;
            }
            start = stop + 1;
            class_addr += modulus;
        }
        Ok(())
    }

    /// Counts words of the residue class that differ from `expected`.
    fn count_class_mismatches(&mut self, modulus: usize, residue: usize, expected: Word32) -> Result<u64, DeviceError> {
        let n = self.word_count();
        let mut errors = 0;
        let mut addr = residue;
        let mut w = [0u32; 1];
        while addr < n {
            self.read_into(addr, &mut w)?;
            errors += (w[0] != expected) as u64;
            addr += modulus;
        }
        Ok(errors)
    }

    fn scratch_write(&mut self, slot: usize, value: Word32) -> Result<(), DeviceError>;

    fn scratch_read(&mut self, slot: usize) -> Result<Word32, DeviceError>;

    /// True when the scratchpad is known to store values exactly, so a
    /// kernel may keep a generator in registers and store only the result.
    /// Real hardware never makes that promise.
    fn scratch_is_exact(&self) -> bool {
        false
    }

    /// An arithmetic unit for one logical thread. Fault draws are keyed by
    /// `stream`, so units for different threads are independent.
    fn alu(&self, stream: u64) -> Self::Alu;

    /// Returns a unit handed out by [`MemoryDevice::alu`] so the device can
    /// account for its events.
    fn retire_alu(&mut self, _alu: Self::Alu) {}

    /// Starts a new iteration; devices key per-iteration randomness on it.
    fn begin_iteration(&mut self, _index: u64) {}
}

pub(crate) fn check_range(base: usize, count: usize, word_count: usize) -> Result<(), DeviceError> {
    match base.checked_add(count) {
        Some(end) if end <= word_count => Ok(()),
        _ => Err(DeviceError::OutOfRange {
            address: base,
            count,
            word_count,
        }),
    }
}

/// Faultless device backed by host RAM.
///
/// With more than one lane, bulk operations split the range into contiguous
/// lane stripes processed on a dedicated thread pool.
pub struct HostBuffer {
    caps: DeviceCapabilities,
    words: Vec<Word32>,
    scratch: Vec<Word32>,
    pool: Option<rayon::ThreadPool>,
}

impl fmt::Debug for HostBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HostBuffer").field("caps", &self.caps).finish_non_exhaustive()
    }
}

impl HostBuffer {
    pub fn new(caps: DeviceCapabilities) -> Result<Self, DeviceError> {
        caps.validate()?;
        let n = caps.word_count();
        let mut words = Vec::new();
        words
            .try_reserve_exact(n)
            .map_err(|_| DeviceError::Allocation { bytes: n * 4 })?;
        words.resize(n, 0);
        let pool = if caps.lane_count > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(caps.lane_count)
                    .build()
                    .map_err(|e| DeviceError::Config(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            scratch: vec![0; caps.scratchpad_words],
            caps,
            words,
            pool,
        })
    }

    /// The raw memory image.
    pub fn image(&self) -> &[Word32] {
        &self.words
    }

    fn stripe(&self, count: usize) -> usize {
        count.div_ceil(self.caps.lane_count).max(1)
    }
}

impl MemoryDevice for HostBuffer {
    type Alu = ExactAlu;

    fn capabilities(&self) -> &DeviceCapabilities {
        &self.caps
    }

    fn write_words(&mut self, base: WordAddress, values: &[Word32]) -> Result<(), DeviceError> {
        check_range(base, values.len(), self.words.len())?;
        self.words[base..base + values.len()].copy_from_slice(values);
        black_box(&mut self.words);
        Ok(())
    }

    fn read_into(&mut self, base: WordAddress, out: &mut [Word32]) -> Result<(), DeviceError> {
        check_range(base, out.len(), self.words.len())?;
        black_box(&mut self.words);
        out.copy_from_slice(&self.words[base..base + out.len()]);
        Ok(())
    }

    fn fill_range(&mut self, base: WordAddress, count: usize, pattern: Word32) -> Result<(), DeviceError> {
        check_range(base, count, self.words.len())?;
        let stripe = self.stripe(count);
        let region = &mut self.words[base..base + count];
        match &self.pool {
            Some(pool) => pool.install(|| {
                region.par_chunks_mut(stripe).for_each(|c| c.fill(pattern));
            }),
            None => region.fill(pattern),
        }
        black_box(&mut self.words);
        Ok(())
    }

    fn count_mismatches(&mut self, base: WordAddress, count: usize, expected: Word32) -> Result<u64, DeviceError> {
        check_range(base, count, self.words.len())?;
        black_box(&mut self.words);
        let stripe = self.stripe(count);
        let region = &self.words[base..base + count];
        let count_stripe = |c: &[Word32]| c.iter().filter(|&&w| w != expected).count() as u64;
        Ok(match &self.pool {
            Some(pool) => pool.install(|| region.par_chunks(stripe).map(count_stripe).sum()),
            None => count_stripe(region),
        })
    }

    fn fill_class(&mut self, modulus: usize, residue: usize, value: Word32) -> Result<(), DeviceError> {
        for w in self.words.iter_mut().skip(residue).step_by(modulus) {
            *w = value;
        }
        black_box(&mut self.words);
        Ok(())
    }

    fn fill_outside_class(&mut self, modulus: usize, residue: usize, value: Word32) -> Result<(), DeviceError> {
        for chunk in self.words.chunks_mut(modulus) {
            for (j, w) in chunk.iter_mut().enumerate() {
                if j != residue {
                    *w = value;
                }
            }
        }
        black_box(&mut self.words);
        Ok(())
    }

    fn count_class_mismatches(&mut self, modulus: usize, residue: usize, expected: Word32) -> Result<u64, DeviceError> {
        black_box(&mut self.words);
        Ok(self
            .words
            .iter()
            .skip(residue)
            .step_by(modulus)
            .filter(|&&w| w != expected)
            .count() as u64)
    }

    fn scratch_write(&mut self, slot: usize, value: Word32) -> Result<(), DeviceError> {
        let n = self.scratch.len();
        *self
            .scratch
            .get_mut(slot)
            .ok_or(DeviceError::ScratchpadOutOfRange { slot, scratchpad_words: n })? = value;
        Ok(())
    }

    fn scratch_read(&mut self, slot: usize) -> Result<Word32, DeviceError> {
        black_box(&mut self.scratch);
        self.scratch.get(slot).copied().ok_or(DeviceError::ScratchpadOutOfRange {
            slot,
            scratchpad_words: self.scratch.len(),
        })
    }

    fn alu(&self, _stream: u64) -> ExactAlu {
        ExactAlu
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn host(words: usize, lanes: usize) -> HostBuffer {
        HostBuffer::new(DeviceCapabilities::new(RegionSpec::from_words(words).unwrap()).with_lanes(lanes)).unwrap()
    }

    #[test]
    fn region_sizes() {
        let r = RegionSpec::from_mib(64).unwrap();
        assert_eq!(r.word_count(), 16 * MIB);
        assert_eq!(r.word_count() * 4, 64 * MIB);
        assert_eq!(r.size_mib(), Some(64));
        assert_eq!(RegionSpec::from_words(64).unwrap().size_mib(), None);
        assert!(RegionSpec::from_mib(0).is_err());
    }

    #[test]
    fn faultless_round_trip() {
        let mut d = host(16, 1);
        d.write_words(0, &[0xFFFF_FFFF]).unwrap();
        assert_eq!(d.read_words(0, 1).unwrap(), vec![0xFFFF_FFFF]);
    }

    #[test]
    fn write_boundary() {
        let mut d = host(32, 1);
        let n = d.word_count();
        assert!(d.write_words(n - 3, &[1, 2, 3]).is_ok());
        let err = d.write_words(n - 2, &[1, 2, 3]).unwrap_err();
        assert_eq!(
            err,
            DeviceError::OutOfRange {
                address: n - 2,
                count: 3,
                word_count: n
            }
        );
        assert!(d.read_words(n, 1).is_err());
    }

    #[test]
    fn reads() {
        let mut d = host(8, 1);
        d.fill(0).unwrap();
        assert_eq!(d.read_words(2, 4).unwrap(), vec![0, 0, 0, 0]);
        assert!(d.read_words(3, 0).unwrap().is_empty());
    }

    #[test]
    fn last_fill_wins() {
        let mut d = host(1000, 4);
        d.fill(0xFFFF_FFFF).unwrap();
        d.fill(0).unwrap();
        assert!(d.image().iter().all(|&w| w == 0));
        assert_eq!(d.count_mismatches(0, 1000, 0).unwrap(), 0);
    }

    #[test]
    fn class_operations_match_defaults() {
        let mut d = host(105, 1);
        d.fill(7).unwrap();
        d.fill_outside_class(20, 3, 9).unwrap();
        d.fill_class(20, 3, 5).unwrap();
        for (a, &w) in d.image().iter().enumerate() {
            assert_eq!(w, if a % 20 == 3 { 5 } else { 9 }, "address {a}");
        }
        assert_eq!(d.count_class_mismatches(20, 3, 5).unwrap(), 0);
        assert_eq!(d.count_class_mismatches(20, 4, 5).unwrap(), 6);
    }

    #[test]
    fn scratchpad_bounds() {
        let mut d = HostBuffer::new(DeviceCapabilities::new(RegionSpec::from_words(4).unwrap()).with_scratchpad(2)).unwrap();
        d.scratch_write(1, 42).unwrap();
        assert_eq!(d.scratch_read(1).unwrap(), 42);
        assert!(d.scratch_write(2, 0).is_err());
    }

    #[test]
    fn lane_count_does_not_change_image() {
        let mut images = Vec::new();
        for lanes in [1, 4, 16] {
            let mut d = host(1001, lanes);
            d.fill(0xA5A5_A5A5).unwrap();
            d.fill_range(10, 500, 3).unwrap();
            d.fill_outside_class(20, 7, 1).unwrap();
            images.push(d.image().to_vec());
        }
        assert_eq!(images[0], images[1]);
        assert_eq!(images[0], images[2]);
    }

    proptest! {
        #[test]
        fn round_trip(addr in 0usize..4096, v: u32) {
            let mut d = host(4096, 1);
            d.write_words(addr, &[v]).unwrap();
            prop_assert_eq!(d.read_words(addr, 1).unwrap()[0], v);
        }
    }
}
