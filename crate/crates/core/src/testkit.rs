//! Test kernels and the iteration protocol.
//!
//! One iteration runs all thirteen tests once, in [`TestCode::ALL`] order,
//! with two rounds of the modulo-20 test. The iteration fails when any test
//! reports a nonzero word error count.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DeviceError, PatternError};
use crate::memdev::{Alu, Architecture, MemoryDevice, Word32};
use crate::patterns::{walking_patterns, CyclicLcgSpec, WalkingCode, PARK_MILLER_MODULUS};
use crate::rng::{hash, mix64, Domain};

/// The thirteen tests of an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TestCode {
    MI10,
    MIR,
    W1M,
    W10,
    W11,
    W40,
    W41,
    RB,
    M20,
    L,
    L4,
    LS,
    LS4,
}

impl TestCode {
    pub const ALL: [TestCode; 13] = [
        TestCode::MI10,
        TestCode::MIR,
        TestCode::W1M,
        TestCode::W10,
        TestCode::W11,
        TestCode::W40,
        TestCode::W41,
        TestCode::RB,
        TestCode::M20,
        TestCode::L,
        TestCode::L4,
        TestCode::LS,
        TestCode::LS4,
    ];

    pub const LOGIC: [TestCode; 4] = [TestCode::L, TestCode::L4, TestCode::LS, TestCode::LS4];

    pub fn as_str(&self) -> &'static str {
        match self {
            TestCode::MI10 => "MI10",
            TestCode::MIR => "MIR",
            TestCode::W1M => "1WM",
            TestCode::W10 => "1W0",
            TestCode::W11 => "1W1",
            TestCode::W40 => "4W0",
            TestCode::W41 => "4W1",
            TestCode::RB => "RB",
            TestCode::M20 => "M20",
            TestCode::L => "L",
            TestCode::L4 => "L4",
            TestCode::LS => "LS",
            TestCode::LS4 => "LS4",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_logic(self) -> bool {
        Self::LOGIC.contains(&self)
    }

    pub fn walking_code(self) -> Option<WalkingCode> {
        match self {
            TestCode::W1M => Some(WalkingCode::OneByteMemtest86),
            TestCode::W10 => Some(WalkingCode::OneByteZeros),
            TestCode::W11 => Some(WalkingCode::OneByteOnes),
            TestCode::W40 => Some(WalkingCode::FourByteZeros),
            TestCode::W41 => Some(WalkingCode::FourByteOnes),
            _ => None,
        }
    }

    /// Cycle multiplier and storage of a logic test.
    pub fn logic_mode(self) -> Option<(u32, LogicStorage)> {
        match self {
            TestCode::L => Some((1, LogicStorage::Private)),
            TestCode::L4 => Some((4, LogicStorage::Private)),
            TestCode::LS => Some((1, LogicStorage::Scratchpad)),
            TestCode::LS4 => Some((4, LogicStorage::Scratchpad)),
            _ => None,
        }
    }
}

impl fmt::Display for TestCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TestCode {
    type Err = PatternError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TestCode::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| PatternError::UnknownCode(s.to_string()))
    }
}

impl TryFrom<String> for TestCode {
    type Error = PatternError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TestCode> for String {
    fn from(c: TestCode) -> String {
        c.as_str().to_string()
    }
}

/// Per-test word error counts, indexed by [`TestCode`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TestErrors(pub [u64; 13]);

impl TestErrors {
    pub fn get(&self, code: TestCode) -> u64 {
        self.0[code.index()]
    }

    pub fn set(&mut self, code: TestCode, count: u64) {
        self.0[code.index()] = count;
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&c| c > 0)
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TestCode, u64)> + '_ {
        TestCode::ALL.into_iter().map(|c| (c, self.get(c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestOutcome {
    pub code: TestCode,
    pub word_errors: u64,
    pub phases_run: u32,
    pub words_examined: u64,
}

impl TestOutcome {
    fn new(code: TestCode) -> Self {
        Self {
            code,
            word_errors: 0,
            phases_run: 0,
            words_examined: 0,
        }
    }

    fn phase(&mut self, errors: u64, examined: u64) {
        self.word_errors += errors;
        self.words_examined += examined;
        self.phases_run += 1;
    }

    /// Fraction of examined words that were wrong.
    pub fn word_error_rate(&self) -> f64 {
        if self.words_examined == 0 {
            0.0
        } else {
            self.word_errors as f64 / self.words_examined as f64
        }
    }
}

/// Which modulo-20 rounds run next.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct M20Cursor {
    next_round: u32,
}

impl M20Cursor {
    pub const ROUNDS: u32 = 20;

    pub fn new(next_round: u32) -> Result<Self, DeviceError> {
        if next_round >= Self::ROUNDS {
            return Err(DeviceError::Config(format!("modulo-20 round {next_round} is not in [0, 20)")));
        }
        Ok(Self { next_round })
    }

    pub fn next_round(&self) -> u32 {
        self.next_round
    }

    pub fn rounds(&self) -> [u32; 2] {
        [self.next_round, (self.next_round + 1) % Self::ROUNDS]
    }

    pub fn advanced(self) -> Self {
        Self {
            next_round: (self.next_round + 2) % Self::ROUNDS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogicStorage {
    Private,
    Scratchpad,
}

/// Kernel parameters shared by every test of an iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TestConfig {
    pub lcg: CyclicLcgSpec,
    /// Logical generator threads of the logic tests.
    pub logic_threads: usize,
}

impl TestConfig {
    pub const DEFAULT_LOGIC_THREADS: usize = 16384;

    pub fn new(lcg_period: u32) -> Result<Self, PatternError> {
        Ok(Self {
            lcg: CyclicLcgSpec::new(lcg_period)?,
            logic_threads: Self::DEFAULT_LOGIC_THREADS,
        })
    }

    pub fn with_logic_threads(mut self, threads: usize) -> Self {
        self.logic_threads = threads;
        self
    }

    /// The deployed pairing of region size and LCG period.
    pub fn deployed_period(region_mib: u32) -> Option<u32> {
        match region_mib {
            32 => Some(256),
            64 => Some(512),
            128 => Some(1024),
            _ => None,
        }
    }
}

/// Identity and time stamps stamped onto every record of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetadata {
    pub card_id: String,
    pub utc_offset_min: i32,
    /// Start of iteration 0, seconds since the Unix epoch.
    pub start_utc: i64,
    pub iteration_seconds: i64,
}

impl Default for RunMetadata {
    fn default() -> Self {
        Self {
            card_id: "card-0".to_string(),
            utc_offset_min: 0,
            start_utc: 1_230_768_000,
            iteration_seconds: 3,
        }
    }
}

/// One iteration's results.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterationRecord {
    pub card_id: String,
    pub device_name: String,
    pub architecture: Architecture,
    pub region_mib: u32,
    pub lcg_period: u32,
    pub shader_clock_mhz: u32,
    pub memory_clock_mhz: u32,
    pub start_utc: i64,
    pub end_utc: i64,
    pub utc_offset_min: i32,
    pub errors: TestErrors,
    pub failed: bool,
}

impl IterationRecord {
    /// Checks the any-error rule.
    pub fn is_consistent(&self) -> bool {
        self.failed == self.errors.any()
    }
}

/// ALU stream ids. Streams of different kernels never collide.
pub fn alu_stream(code: TestCode, pass: u64, thread: u64) -> u64 {
    ((code.index() as u64) << 56) | (pass << 48) | thread
}

fn check_code(code: TestCode, allowed: &[TestCode]) -> Result<(), DeviceError> {
    if allowed.contains(&code) {
        Ok(())
    } else {
        Err(DeviceError::Config(format!("test {code} cannot run in this kernel")))
    }
}

/// Moving inversions with a fixed constant: fill and verify, then the complement.
pub fn run_constant_test<D: MemoryDevice + ?Sized>(
    device: &mut D,
    code: TestCode,
    random_constant: Word32,
) -> Result<TestOutcome, DeviceError> {
    check_code(code, &[TestCode::MI10, TestCode::MIR])?;
    let first = if code == TestCode::MI10 { 0 } else { random_constant };
    let n = device.word_count();
    let mut out = TestOutcome::new(code);
    for pattern in [first, !first] {
        device.fill(pattern)?;
        out.phase(device.count_mismatches(0, n, pattern)?, n as u64);
    }
    Ok(out)
}

pub fn run_walking_test<D: MemoryDevice + ?Sized>(device: &mut D, code: TestCode) -> Result<TestOutcome, DeviceError> {
    let walking = code
        .walking_code()
        .ok_or_else(|| DeviceError::Config(format!("test {code} is not a walking test")))?;
    let n = device.word_count();
    let mut out = TestOutcome::new(code);
    for phase in walking_patterns(walking).phases {
        device.fill(phase.write)?;
        out.phase(device.count_mismatches(0, n, phase.verify)?, n as u64);
    }
    Ok(out)
}

pub const RANDOM_BLOCK_WORDS: usize = 256;

/// Park-Miller seed of block `b`.
pub fn random_block_seed(seed: u64, block: u64) -> u32 {
    (seed.wrapping_add(block) % (PARK_MILLER_MODULUS as u64 - 1)) as u32 + 1
}

/// Blocks generated or verified per device call.
const RB_CHUNK_BLOCKS: usize = 64;

fn generate_blocks<D: MemoryDevice + ?Sized>(
    device: &mut D,
    seed: u64,
    pass: u64,
    first_block: usize,
    buf: &mut [Word32],
) {
    for (j, block) in buf.chunks_mut(RANDOM_BLOCK_WORDS).enumerate() {
        let b = (first_block + j) as u64;
        let mut alu = device.alu(alu_stream(TestCode::RB, pass, b));
        let mut x = random_block_seed(seed, b);
        for w in block.iter_mut() {
            x = alu.park_miller(x);
            *w = x;
        }
        device.retire_alu(alu);
    }
}

/// Random blocks: each 256-word block holds its own Park-Miller sequence.
pub fn run_random_blocks<D: MemoryDevice + ?Sized>(device: &mut D, seed: u64) -> Result<TestOutcome, DeviceError> {
    let n = device.word_count();
    let chunk = RANDOM_BLOCK_WORDS * RB_CHUNK_BLOCKS;
    let mut expected = vec![0; chunk.min(n)];
    let mut got = vec![0; chunk.min(n)];

    let mut base = 0;
    while base < n {
        let len = chunk.min(n - base);
        generate_blocks(device, seed, 0, base / RANDOM_BLOCK_WORDS, &mut expected[..len]);
        device.write_words(base, &expected[..len])?;
        base += len;
    }

    let mut out = TestOutcome::new(TestCode::RB);
    let mut errors = 0;
    let mut base = 0;
    while base < n {
        let len = chunk.min(n - base);
        generate_blocks(device, seed, 1, base / RANDOM_BLOCK_WORDS, &mut expected[..len]);
        device.read_into(base, &mut got[..len])?;
        errors += expected[..len].iter().zip(&got[..len]).filter(|(e, g)| e != g).count() as u64;
        base += len;
    }
    out.phase(errors, n as u64);
    Ok(out)
}

/// Modulo-20: per round, the pattern on one residue class and its complement,
/// written twice, everywhere else; only the class is verified.
pub fn run_modulo20<D: MemoryDevice + ?Sized>(device: &mut D, pattern: Word32, rounds: &[u32]) -> Result<TestOutcome, DeviceError> {
    if let Some(r) = rounds.iter().find(|&&r| r >= M20Cursor::ROUNDS) {
        return Err(DeviceError::Config(format!("modulo-20 round {r} is not in [0, 20)")));
    }
    let n = device.word_count();
    let mut out = TestOutcome::new(TestCode::M20);
    for &round in rounds {
        let r = round as usize;
        device.fill_class(20, r, pattern)?;
        device.fill_outside_class(20, r, !pattern)?;
        device.fill_outside_class(20, r, !pattern)?;
        let examined = if r < n { (n - r).div_ceil(20) } else { 0 };
        out.phase(device.count_class_mismatches(20, r, pattern)?, examined as u64);
    }
    Ok(out)
}

/// Cyclic-LCG logic test.
///
/// Logical thread `t` runs the generator from zero for `multiplier * k`
/// steps and stores its state to word `t * (word_count / threads)` after each
/// full cycle. A correct unit always stores zero.
pub fn run_logic<D: MemoryDevice + ?Sized>(
    device: &mut D,
    config: &TestConfig,
    multiplier: u32,
    storage: LogicStorage,
) -> Result<TestOutcome, DeviceError> {
    let code = match (multiplier, storage) {
        (1, LogicStorage::Private) => TestCode::L,
        (4, LogicStorage::Private) => TestCode::L4,
        (1, LogicStorage::Scratchpad) => TestCode::LS,
        (4, LogicStorage::Scratchpad) => TestCode::LS4,
        _ => return Err(DeviceError::Config(format!("logic multiplier {multiplier} is not 1 or 4"))),
    };
    let caps = device.capabilities();
    let n = caps.word_count();
    let scratch_words = caps.scratchpad_words;
    if storage == LogicStorage::Scratchpad && (scratch_words == 0 || scratch_words < caps.lane_count) {
        return Err(DeviceError::Config(format!(
            "scratchpad of {scratch_words} words is smaller than the {} lanes",
            caps.lane_count
        )));
    }
    let threads = config.logic_threads.clamp(1, n.max(1));
    let stride = (n / threads).max(1);
    let spec = config.lcg;
    let k = spec.k as u64;
    let exact_scratch = device.scratch_is_exact();

    for t in 0..threads {
        let mut alu = device.alu(alu_stream(code, 0, t as u64));
        let addr = t * stride;
        let slot = t % scratch_words.max(1);
        let mut state: Word32 = 0;
        if storage == LogicStorage::Scratchpad {
            device.scratch_write(slot, 0)?;
        }
        for _ in 0..multiplier {
            match storage {
                LogicStorage::Private => state = alu.lcg_run(&spec, state, k),
                LogicStorage::Scratchpad if exact_scratch => {
                    let s = device.scratch_read(slot)?;
                    state = alu.lcg_run(&spec, s, k);
                    device.scratch_write(slot, state)?;
                }
                LogicStorage::Scratchpad => {
                    for _ in 0..k {
                        let s = device.scratch_read(slot)?;
                        device.scratch_write(slot, alu.mul_add(spec.a, s, spec.c))?;
                    }
                    state = device.scratch_read(slot)?;
                }
            }
            device.write_words(addr, &[state])?;
        }
        device.retire_alu(alu);
    }

    let mut out = TestOutcome::new(code);
    let mut errors = 0;
    let mut w = [0; 1];
    for t in 0..threads {
        device.read_into(t * stride, &mut w)?;
        errors += (w[0] != 0) as u64;
    }
    out.phase(errors, threads as u64);
    Ok(out)
}

/// Per-iteration constants derived from the run seed.
pub fn mir_constant(seed: u64, iteration: u64) -> Word32 {
    hash(seed, Domain::Iteration, iteration, 1) as Word32
}

pub fn random_blocks_seed(seed: u64, iteration: u64) -> u64 {
    hash(seed, Domain::Iteration, iteration, 2)
}

pub fn modulo20_pattern(seed: u64, iteration: u64) -> Word32 {
    hash(seed, Domain::Iteration, iteration, 3) as Word32
}

/// Runs one test with the per-iteration constants of `(seed, iteration)`.
pub fn run_test<D: MemoryDevice + ?Sized>(
    device: &mut D,
    code: TestCode,
    config: &TestConfig,
    cursor: M20Cursor,
    seed: u64,
    iteration: u64,
) -> Result<TestOutcome, DeviceError> {
    match code {
        TestCode::MI10 | TestCode::MIR => run_constant_test(device, code, mir_constant(seed, iteration)),
        TestCode::W1M | TestCode::W10 | TestCode::W11 | TestCode::W40 | TestCode::W41 => run_walking_test(device, code),
        TestCode::RB => run_random_blocks(device, random_blocks_seed(seed, iteration)),
        TestCode::M20 => run_modulo20(device, modulo20_pattern(seed, iteration), &cursor.rounds()),
        TestCode::L | TestCode::L4 | TestCode::LS | TestCode::LS4 => {
            let (m, storage) = code.logic_mode().expect("logic code");
            run_logic(device, config, m, storage)
        }
    }
}

/// Runs every test once and returns the per-test outcomes in code order.
pub fn run_iteration_outcomes<D: MemoryDevice + ?Sized>(
    device: &mut D,
    config: &TestConfig,
    cursor: M20Cursor,
    seed: u64,
    iteration: u64,
) -> Result<Vec<TestOutcome>, DeviceError> {
    device.begin_iteration(mix64(seed ^ iteration.rotate_left(32)));
    TestCode::ALL
        .into_iter()
        .map(|code| run_test(device, code, config, cursor, seed, iteration))
        .collect()
}

/// One full iteration: all thirteen tests, then the record and the advanced cursor.
pub fn run_iteration<D: MemoryDevice + ?Sized>(
    device: &mut D,
    config: &TestConfig,
    meta: &RunMetadata,
    cursor: M20Cursor,
    seed: u64,
    iteration: u64,
) -> Result<(IterationRecord, M20Cursor), DeviceError> {
    let outcomes = run_iteration_outcomes(device, config, cursor, seed, iteration)?;
    let mut errors = TestErrors::default();
    for o in &outcomes {
        errors.set(o.code, o.word_errors);
    }
    let caps = device.capabilities();
    let start_utc = meta.start_utc + iteration as i64 * meta.iteration_seconds;
    let record = IterationRecord {
        card_id: meta.card_id.clone(),
        device_name: caps.device_name.clone(),
        architecture: caps.architecture,
        region_mib: caps.region.size_mib_floor(),
        lcg_period: config.lcg.k,
        shader_clock_mhz: caps.shader_clock_mhz,
        memory_clock_mhz: caps.memory_clock_mhz,
        start_utc,
        end_utc: start_utc + meta.iteration_seconds,
        utc_offset_min: meta.utc_offset_min,
        failed: errors.any(),
        errors,
    };
    Ok((record, cursor.advanced()))
}

/// Word error totals of a clock sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub frequencies_mhz: Vec<u32>,
    pub iterations: Vec<u64>,
    /// `errors[i][code]` at `frequencies_mhz[i]`, summed over seeds.
    pub errors: Vec<TestErrors>,
    pub examined: Vec<TestErrors>,
}

impl SweepResult {
    pub fn word_error_rate(&self, freq_index: usize, code: TestCode) -> f64 {
        let e = self.examined[freq_index].get(code);
        if e == 0 {
            0.0
        } else {
            self.errors[freq_index].get(code) as f64 / e as f64
        }
    }

    /// Lowest swept frequency with at least one error.
    pub fn onset_mhz(&self, code: TestCode) -> Option<u32> {
        self.frequencies_mhz
            .iter()
            .zip(&self.errors)
            .find(|(_, e)| e.get(code) > 0)
            .map(|(&f, _)| f)
    }

    /// True when the word error rate never drops as the clock rises.
    pub fn is_monotone(&self, code: TestCode) -> bool {
        let mut order: Vec<usize> = (0..self.frequencies_mhz.len()).collect();
        order.sort_by_key(|&i| self.frequencies_mhz[i]);
        order
            .windows(2)
            .all(|w| self.word_error_rate(w[0], code) <= self.word_error_rate(w[1], code))
    }
}

/// Clock-sweep protocol: a fresh device per (seed, frequency), reseeded from both.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub frequencies_mhz: Vec<u32>,
    pub iterations: Vec<u64>,
    pub seeds: Vec<u64>,
}

impl SweepPlan {
    pub const FREQUENCIES_MHZ: [u32; 8] = [400, 420, 430, 440, 450, 475, 500, 530];

    /// Eight clock steps, 20 iterations each and 10 at the top clock.
    pub fn standard(seeds: Vec<u64>) -> Self {
        let iterations = Self::FREQUENCIES_MHZ.iter().map(|&f| if f == 530 { 10 } else { 20 }).collect();
        Self {
            frequencies_mhz: Self::FREQUENCIES_MHZ.to_vec(),
            iterations,
            seeds,
        }
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        if self.frequencies_mhz.is_empty() || self.frequencies_mhz.len() != self.iterations.len() {
            return Err(DeviceError::Config("every swept frequency needs an iteration count".into()));
        }
        if self.frequencies_mhz.contains(&0) || self.iterations.contains(&0) || self.seeds.is_empty() {
            return Err(DeviceError::Config("frequencies, iterations and seeds must be nonzero".into()));
        }
        Ok(())
    }
}

/// Runs the sweep on simulated devices built from `caps` and `profile`.
pub fn run_sweep(
    caps: &crate::memdev::DeviceCapabilities,
    profile: &crate::faultsim::FaultProfile,
    config: &TestConfig,
    plan: &SweepPlan,
) -> Result<SweepResult, DeviceError> {
    use crate::faultsim::FaultSimDevice;
    use rayon::prelude::*;

    plan.validate()?;
    let jobs: Vec<(usize, u64)> = (0..plan.frequencies_mhz.len())
        .flat_map(|i| plan.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<(usize, TestErrors, TestErrors)> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let f = plan.frequencies_mhz[i];
            let mut p = profile.clone();
            p.seed = hash(profile.seed ^ seed, Domain::Iteration, f as u64, 0);
            let mut device = FaultSimDevice::new(caps.clone().with_memory_clock(f), p)?;
            let (mut errors, mut examined) = (TestErrors::default(), TestErrors::default());
            let mut cursor = M20Cursor::default();
            for it in 0..plan.iterations[i] {
                for o in run_iteration_outcomes(&mut device, config, cursor, seed, it)? {
                    errors.0[o.code.index()] += o.word_errors;
                    examined.0[o.code.index()] += o.words_examined;
                }
                cursor = cursor.advanced();
            }
            Ok((i, errors, examined))
        })
        .collect::<Result<_, DeviceError>>()?;

    let k = plan.frequencies_mhz.len();
    let mut out = SweepResult {
        frequencies_mhz: plan.frequencies_mhz.clone(),
        iterations: plan.iterations.clone(),
        errors: vec![TestErrors::default(); k],
        examined: vec![TestErrors::default(); k],
    };
    for (i, e, x) in results {
        for c in 0..13 {
            out.errors[i].0[c] += e.0[c];
            out.examined[i].0[c] += x.0[c];
        }
    }
    Ok(out)
}

/// Long-format comma-separated sweep table. Cells without a single error
/// have `zero_errors = true` and an empty rate field.
pub fn sweep_table(r: &SweepResult) -> String {
    let mut out = String::from("freq_mhz,test,iterations,word_errors,words_examined,word_error_rate,zero_errors\n");
    for (i, &f) in r.frequencies_mhz.iter().enumerate() {
        for code in TestCode::ALL {
            let e = r.errors[i].get(code);
            let rate = if e == 0 { String::new() } else { format!("{:e}", r.word_error_rate(i, code)) };
            out.push_str(&format!(
                "{f},{code},{},{e},{},{rate},{}\n",
                r.iterations[i],
                r.examined[i].get(code),
                e == 0
            ));
        }
    }
    out
}
