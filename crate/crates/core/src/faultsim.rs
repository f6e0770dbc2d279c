//! Simulated faulty memory.
//!
//! [`FaultSimDevice`] layers deterministic fault models over a backing store:
//! stuck-at cells, Poisson transient flips, aggressor/victim coupling, a
//! clock-dependent overdrive model, and a faulty ALU. A virtual clock charges
//! every word access, giving transient rates a time base.
//!
//! Randomness is counter based. Every memory access gets an op counter in
//! canonical (ascending address, program) order; fault candidates are drawn
//! from sparse geometric streams over op counters and thinned with a hash of
//! `(seed, op_counter, address)`. Results therefore do not depend on lane
//! count or on how a kernel splits its bulk operations.
//!
//! # Overdrive model
//!
//! Overclocking faults are timing-margin violations driven by data-pattern
//! stress `s` in `[0, 1]`:
//!
//! * on a write, `s` is the fraction of bit lanes caught in a mixed transition,
//!   `2 * min(rises, falls) / 32`, and zero when no bit or every bit toggles;
//! * on a read, `s` is the Hamming distance from the word to its two row
//!   neighbours divided by 64.
//!
//! The flip probability is
//! `min(1, alpha * max(0, f - f0 - spread * (1 - s))^gamma * s)`:
//! the most stressed patterns fail first, just above `f0`, and lightly
//! stressed ones only after the margin `spread * (1 - s)` is used up. With
//! `spread = 0` and `s = h / 32` this is the plain transition-count model.
//! Constant fills and full inversions carry no stress, so moving-inversions
//! kernels never see overdrive faults.

use std::collections::{BTreeMap, HashMap};

use rand::RngCore;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::DeviceError;
use crate::memdev::{check_range, Alu, DeviceCapabilities, MemoryDevice, Word32, WordAddress};
use crate::patterns::{park_miller_raw, CyclicLcgSpec};
use crate::rng::{geometric_gap, hash, unit, CounterRng, Domain};

/// Baseline memory clock the access costs are quoted at.
pub const BASELINE_CLOCK_MHZ: f64 = 400.0;

/// A cell with some bits forced to fixed values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StuckAt {
    pub address: WordAddress,
    pub mask: Word32,
    pub stuck_value: Word32,
}

impl StuckAt {
    pub fn stuck_one(address: WordAddress, bit: u32) -> Self {
        Self {
            address,
            mask: 1 << bit,
            stuck_value: 1 << bit,
        }
    }

    pub fn stuck_zero(address: WordAddress, bit: u32) -> Self {
        Self {
            address,
            mask: 1 << bit,
            stuck_value: 0,
        }
    }

    #[inline]
    pub fn apply(&self, value: Word32) -> Word32 {
        (value & !self.mask) | (self.stuck_value & self.mask)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CouplingMode {
    /// A write that changes the aggressor flips one victim bit: the lowest
    /// bit position at which the aggressor transitioned.
    #[default]
    #[serde(rename = "flip-victim-bit-on-differing-aggressor-write")]
    FlipVictimBitOnDifferingAggressorWrite,
}

/// Aggressor/victim coupling between nearby words of a physical row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingModel {
    pub row_length_words: usize,
    pub victim_offsets: Vec<i64>,
    pub p_couple: f64,
    pub mode: CouplingMode,
}

impl Default for CouplingModel {
    fn default() -> Self {
        Self {
            row_length_words: 1024,
            victim_offsets: vec![-1, 1],
            p_couple: 0.0,
            mode: CouplingMode::default(),
        }
    }
}

/// Clock-dependent timing faults. See the module docs for the formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverdriveModel {
    pub f0_mhz: u32,
    pub alpha: f64,
    pub gamma: f64,
    pub onset_spread_mhz: f64,
}

impl Default for OverdriveModel {
    fn default() -> Self {
        Self {
            f0_mhz: 410,
            alpha: 3e-11,
            gamma: 3.0,
            onset_spread_mhz: 100.0,
        }
    }
}

impl OverdriveModel {
    /// Flip probability for one access at clock `f_mhz` under stress `s`.
    pub fn probability(&self, f_mhz: u32, stress: f64) -> f64 {
        if stress <= 0.0 {
            return 0.0;
        }
        let excess = f_mhz as f64 - self.f0_mhz as f64 - self.onset_spread_mhz * (1.0 - stress);
        if excess <= 0.0 {
            return 0.0;
        }
        (self.alpha * excess.powf(self.gamma) * stress).min(1.0)
    }
}

/// Write-side stress: the share of bit lanes in a mixed transition.
#[inline]
pub fn transition_stress(old: Word32, new: Word32) -> f64 {
    let rises = (new & !old).count_ones();
    let falls = (old & !new).count_ones();
    if rises + falls == 32 {
        0.0
    } else {
        2.0 * rises.min(falls) as f64 / 32.0
    }
}

/// Read-side stress: Hamming distance to the row neighbours over 64.
#[inline]
pub fn spatial_stress(word: Word32, left: Option<Word32>, right: Option<Word32>) -> f64 {
    let l = left.map_or(0, |n| (n ^ word).count_ones());
    let r = right.map_or(0, |n| (n ^ word).count_ones());
    (l + r) as f64 / 64.0
}

/// Configuration of every fault model of a simulated device.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultProfile {
    pub stuck_at: Vec<StuckAt>,
    /// Errors per bit-hour.
    pub transient_rate_lambda: f64,
    pub coupling: Option<CouplingModel>,
    pub overdrive: Option<OverdriveModel>,
    pub alu_fault_p: f64,
    pub scratchpad_profile: Option<Box<FaultProfile>>,
    pub seed: u64,
}

impl FaultProfile {
    /// A profile with no active fault model.
    pub fn null() -> Self {
        Self::default()
    }

    /// Only the overdrive model, with default constants.
    pub fn overdrive_only(seed: u64) -> Self {
        Self {
            overdrive: Some(OverdriveModel::default()),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let bad = |m: &str| Err(DeviceError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.alu_fault_p) {
            return bad("alu_fault_p must be in [0, 1]");
        }
        if !(self.transient_rate_lambda >= 0.0 && self.transient_rate_lambda.is_finite()) {
            return bad("transient_rate_lambda must be finite and non-negative");
        }
        if let Some(c) = &self.coupling {
            if !(0.0..=1.0).contains(&c.p_couple) {
                return bad("p_couple must be in [0, 1]");
            }
            if c.row_length_words == 0 {
                return bad("row_length_words must be at least 1");
            }
        }
        if let Some(o) = &self.overdrive {
            if o.gamma < 1.0 || o.alpha < 0.0 || o.onset_spread_mhz < 0.0 {
                return bad("overdrive needs gamma >= 1, alpha >= 0 and onset_spread_mhz >= 0");
            }
        }
        if let Some(s) = &self.scratchpad_profile {
            s.validate()?;
        }
        Ok(())
    }

    fn coupling_active(&self) -> bool {
        self.coupling
            .as_ref()
            .is_some_and(|c| c.p_couple > 0.0 && !c.victim_offsets.is_empty())
    }

    /// True when no model can ever change a value.
    pub fn is_null(&self) -> bool {
        self.stuck_at.iter().all(|s| s.mask == 0)
            && self.transient_rate_lambda == 0.0
            && !self.coupling_active()
            && self.overdrive.as_ref().is_none_or(|o| o.alpha == 0.0)
            && self.alu_fault_p == 0.0
            && self.scratchpad_profile.as_ref().is_none_or(|s| s.is_null())
    }

    fn row_length(&self) -> usize {
        self.coupling.as_ref().map_or(1024, |c| c.row_length_words)
    }
}

/// Virtual time charged per word access.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualClock {
    pub now_seconds: f64,
    pub tau_read_ns: f64,
    pub tau_write_ns: f64,
    pub clock_mhz: u32,
}

impl VirtualClock {
    pub fn new(clock_mhz: u32) -> Self {
        Self {
            now_seconds: 0.0,
            tau_read_ns: 2.0,
            tau_write_ns: 2.0,
            clock_mhz,
        }
    }

    fn scale(&self) -> f64 {
        BASELINE_CLOCK_MHZ / self.clock_mhz as f64 * 1e-9
    }

    pub fn charge_reads(&mut self, words: usize) {
        self.now_seconds += words as f64 * self.tau_read_ns * self.scale();
    }

    pub fn charge_writes(&mut self, words: usize) {
        self.now_seconds += words as f64 * self.tau_write_ns * self.scale();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    StuckAt,
    Transient,
    Coupling,
    Overdrive,
    Alu,
}

impl FaultKind {
    pub const ALL: [FaultKind; 5] = [
        FaultKind::StuckAt,
        FaultKind::Transient,
        FaultKind::Coupling,
        FaultKind::Overdrive,
        FaultKind::Alu,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

/// Where an event landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultSite {
    Memory(WordAddress),
    Scratchpad(usize),
    /// Logical thread of an ALU.
    Lane(u64),
}

/// One injected fault.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub kind: FaultKind,
    pub site: FaultSite,
    pub bit: u8,
    pub virtual_time: f64,
    pub op_counter: u64,
}

/// Bounded event log with exact per-kind totals.
#[derive(Debug, Clone)]
pub struct EventLog {
    events: Vec<FaultEvent>,
    limit: usize,
    counts: [u64; 5],
}

impl EventLog {
    fn new(limit: usize) -> Self {
        Self {
            events: Vec::new(),
            limit,
            counts: [0; 5],
        }
    }

    fn push(&mut self, e: FaultEvent) {
        self.counts[e.kind.index()] += 1;
        if self.events.len() < self.limit {
            self.events.push(e);
        }
    }

    pub fn events(&self) -> &[FaultEvent] {
        &self.events
    }

    pub fn count(&self, kind: FaultKind) -> u64 {
        self.counts[kind.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Sparse Bernoulli stream over an index space.
#[derive(Debug, Clone)]
struct EventStream {
    p: f64,
    seed: u64,
    domain: Domain,
    salt: u64,
    draws: u64,
    next: u64,
}

impl EventStream {
    fn new(p: f64, seed: u64, domain: Domain, salt: u64) -> Self {
        let mut s = Self {
            p,
            seed,
            domain,
            salt,
            draws: 0,
            next: 0,
        };
        s.next = s.gap();
        s
    }

    fn gap(&mut self) -> u64 {
        let g = geometric_gap(self.p, hash(self.seed, self.domain, self.salt, self.draws));
        self.draws += 1;
        g
    }

    /// Consumes the candidate at `self.next`.
    fn advance(&mut self) {
        self.next = self.next.saturating_add(1).saturating_add(self.gap());
    }
}

/// Where written values come from.
#[derive(Clone, Copy)]
enum Source<'a> {
    Slice(&'a [Word32]),
    Constant(Word32),
}

impl Source<'_> {
    #[inline]
    fn at(&self, i: usize) -> Word32 {
        match self {
            Source::Slice(s) => s[i],
            Source::Constant(v) => *v,
        }
    }
}

/// Shared context for region operations.
struct Ctx<'a> {
    clock: &'a VirtualClock,
    log: &'a mut EventLog,
}

/// The ordered address sequence of one bulk operation. Op `j` of the
/// operation touches `addr(j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Walk {
    Range { lo: usize, hi: usize },
    Class { m: usize, r: usize, n: usize },
    Outside { m: usize, r: usize, n: usize },
}

fn class_len(m: usize, r: usize, n: usize) -> usize {
    if r < n {
        (n - r).div_ceil(m)
    } else {
        0
    }
}

/// Number of `a` in `[0, x)` with `a % p == i`.
fn residue_count(x: usize, p: usize, i: usize) -> usize {
    (x + p - 1 - i) / p
}

impl Walk {
    fn len(&self) -> usize {
        match *self {
            Walk::Range { lo, hi } => hi - lo,
            Walk::Class { m, r, n } => class_len(m, r, n),
            Walk::Outside { m, r, n } => n - class_len(m, r, n),
        }
    }

    #[inline]
    fn addr(&self, j: usize) -> usize {
        match *self {
            Walk::Range { lo, .. } => lo + j,
            Walk::Class { m, r, .. } => r + m * j,
            Walk::Outside { m, r, .. } => {
                let (b, o) = (j / (m - 1), j % (m - 1));
                b * m + if o < r { o } else { o + 1 }
            }
        }
    }

    #[inline]
    fn position(&self, x: usize) -> Option<usize> {
        match *self {
            Walk::Range { lo, hi } => (lo..hi).contains(&x).then(|| x - lo),
            Walk::Class { m, r, n } => (x < n && x % m == r).then(|| x / m),
            Walk::Outside { m, r, n } => {
                let o = x % m;
                (x < n && o != r).then(|| (x / m) * (m - 1) + if o < r { o } else { o - 1 })
            }
        }
    }
}

/// Word storage. `Periodic` holds a background repeating with a short period
/// plus the words that deviate from it, so constant and modulo-class fills
/// cost time proportional to the number of fault events, not region size.
#[derive(Debug, Clone)]
enum Store {
    Dense(Vec<Word32>),
    Periodic {
        values: Vec<Word32>,
        overlay: BTreeMap<usize, Word32>,
    },
}

/// Read/write access to individual words while fault events are processed.
trait Cells {
    fn get(&self, a: usize) -> Word32;
    fn set(&mut self, a: usize, v: Word32);
}

#[inline]
fn set_layer(values: &[Word32], overlay: &mut BTreeMap<usize, Word32>, a: usize, v: Word32) {
    if values[a % values.len()] == v {
        overlay.remove(&a);
    } else {
        overlay.insert(a, v);
    }
}

impl Cells for Store {
    #[inline]
    fn get(&self, a: usize) -> Word32 {
        match self {
            Store::Dense(w) => w[a],
            Store::Periodic { values, overlay } => overlay.get(&a).copied().unwrap_or(values[a % values.len()]),
        }
    }

    #[inline]
    fn set(&mut self, a: usize, v: Word32) {
        match self {
            Store::Dense(w) => w[a] = v,
            Store::Periodic { values, overlay } => set_layer(values, overlay, a, v),
        }
    }
}

/// A full-coverage write in progress: walk positions before the cursor hold
/// new contents, later positions still hold old contents.
struct WalkView<'a> {
    walk: Walk,
    cursor: usize,
    committed: bool,
    old: &'a Store,
    pending: HashMap<usize, Word32>,
    values: &'a [Word32],
    overlay: &'a mut BTreeMap<usize, Word32>,
}

impl Cells for WalkView<'_> {
    fn get(&self, a: usize) -> Word32 {
        match self.walk.position(a) {
            Some(j) if j > self.cursor || (j == self.cursor && !self.committed) => {
                self.pending.get(&a).copied().unwrap_or_else(|| self.old.get(a))
            }
            _ => self.overlay.get(&a).copied().unwrap_or(self.values[a % self.values.len()]),
        }
    }

    fn set(&mut self, a: usize, v: Word32) {
        match self.walk.position(a) {
            Some(j) if j > self.cursor => {
                self.pending.insert(a, v);
            }
            Some(j) => {
                if j == self.cursor {
                    self.committed = true;
                }
                set_layer(self.values, self.overlay, a, v);
            }
            None => set_layer(self.values, self.overlay, a, v),
        }
    }
}

/// Fault models of one region and their random streams.
#[derive(Debug, Clone)]
struct Models {
    /// Merged stuck cells sorted by address.
    stuck: Vec<StuckAt>,
    coupling: Option<CouplingModel>,
    overdrive: Option<OverdriveModel>,
    row_length: usize,
    lambda: f64,
    seed: u64,
    salt: u64,
    is_scratch: bool,
    op_counter: u64,
    overdrive_stream: Option<EventStream>,
    coupling_stream: Option<EventStream>,
    transient_applications: u64,
    transients_applied_until: f64,
}

impl Models {
    fn site(&self, address: usize) -> FaultSite {
        if self.is_scratch {
            FaultSite::Scratchpad(address)
        } else {
            FaultSite::Memory(address)
        }
    }

    #[inline]
    fn settle(&self, address: usize, value: Word32) -> Word32 {
        if self.stuck.is_empty() {
            return value;
        }
        match self.stuck.binary_search_by_key(&address, |s| s.address) {
            Ok(i) => self.stuck[i].apply(value),
            Err(_) => value,
        }
    }

    fn n_offsets(&self) -> u64 {
        self.coupling.as_ref().map_or(1, |c| c.victim_offsets.len() as u64)
    }

    /// Op index of the next pending write-side event, if below `end_op`.
    #[inline]
    fn next_write_event(&self, end_op: u64) -> Option<u64> {
        let od = self.overdrive_stream.as_ref().map_or(u64::MAX, |s| s.next);
        let cp = self.coupling_stream.as_ref().map_or(u64::MAX, |s| s.next / self.n_offsets());
        let ev = od.min(cp);
        (ev < end_op).then_some(ev)
    }

    fn event(&self, ctx: &mut Ctx<'_>, kind: FaultKind, address: usize, bit: u32, op: u64) {
        ctx.log.push(FaultEvent {
            kind,
            site: self.site(address),
            bit: bit as u8,
            virtual_time: ctx.clock.now_seconds,
            op_counter: op,
        });
    }

    fn flip<C: Cells>(&self, cells: &mut C, address: usize, bit: u32) {
        let v = cells.get(address) ^ (1 << bit);
        cells.set(address, self.settle(address, v));
    }

    /// Writes one word at op `op`, consuming every event scheduled there.
    #[allow(clippy::too_many_arguments)]
    fn write_one<C: Cells>(&mut self, cells: &mut C, n: usize, a: usize, written: Word32, op: u64, f_mhz: u32, ctx: &mut Ctx<'_>) {
        let old = cells.get(a);
        let mut new = self.settle(a, written);

        if let Some(stream) = self.overdrive_stream.as_mut().filter(|s| s.next == op) {
            let q = stream.p;
            stream.advance();
            let od = self.overdrive.as_ref().expect("stream implies model");
            let p = od.probability(f_mhz, transition_stress(old, new));
            if p > 0.0 && unit(hash(self.seed, Domain::Overdrive, op, a as u64)) * q < p {
                let bit = (hash(self.seed, Domain::OverdriveBit, op, a as u64) % 32) as u32;
                new = self.settle(a, new ^ (1 << bit));
                self.event(ctx, FaultKind::Overdrive, a, bit, op);
            }
        }
        cells.set(a, new);

        let n_off = self.n_offsets();
        let first = op * n_off;
        let mut fired: Vec<usize> = Vec::new();
        if let Some(stream) = self.coupling_stream.as_mut() {
            while stream.next < first + n_off {
                if stream.next >= first {
                    fired.push((stream.next - first) as usize);
                }
                stream.advance();
            }
        }
        if fired.is_empty() || written == old {
            return;
        }
        let bit = (written ^ old).trailing_zeros();
        let row = a / self.row_length;
        let offsets = &self.coupling.as_ref().expect("stream implies model").victim_offsets;
        let victims: Vec<usize> = fired
            .into_iter()
            .filter_map(|i| {
                let v = a as i64 + offsets[i];
                (v >= 0 && (v as usize) < n && v as usize / self.row_length == row).then_some(v as usize)
            })
            .collect();
        for victim in victims {
            self.flip(cells, victim, bit);
            self.event(ctx, FaultKind::Coupling, victim, bit, op);
        }
    }

    /// Writes every word of `walk` one at a time.
    fn write_each<C: Cells>(&mut self, cells: &mut C, n: usize, walk: Walk, src: Source<'_>, f_mhz: u32, ctx: &mut Ctx<'_>) {
        let op0 = self.op_counter;
        for j in 0..walk.len() {
            let op = op0 + j as u64;
            let a = walk.addr(j);
            if self.next_write_event(op + 1).is_some() {
                self.write_one(cells, n, a, src.at(j), op, f_mhz, ctx);
            } else {
                cells.set(a, self.settle(a, src.at(j)));
            }
        }
        self.op_counter = op0 + walk.len() as u64;
    }

    /// Applies read-side faults for the ops of `walk`.
    fn read_events<C: Cells>(&mut self, cells: &mut C, n: usize, walk: Walk, f_mhz: u32, ctx: &mut Ctx<'_>) {
        if self.lambda > 0.0 {
            let elapsed = ctx.clock.now_seconds - self.transients_applied_until;
            if elapsed > 0.0 {
                self.transients(cells, n, elapsed / 3600.0, ctx);
                self.transients_applied_until = ctx.clock.now_seconds;
            }
        }
        let op0 = self.op_counter;
        let end_op = op0 + walk.len() as u64;
        if let Some(mut stream) = self.overdrive_stream.take() {
            let od = self.overdrive.clone().expect("stream implies model");
            while stream.next < end_op {
                let op = stream.next;
                stream.advance();
                let a = walk.addr((op - op0) as usize);
                let row = a / self.row_length;
                let left = (a > 0 && (a - 1) / self.row_length == row).then(|| cells.get(a - 1));
                let right = (a + 1 < n && (a + 1) / self.row_length == row).then(|| cells.get(a + 1));
                let p = od.probability(f_mhz, spatial_stress(cells.get(a), left, right));
                if p > 0.0 && unit(hash(self.seed, Domain::Overdrive, op, a as u64)) * stream.p < p {
                    let bit = (hash(self.seed, Domain::OverdriveBit, op, a as u64) % 32) as u32;
                    self.flip(cells, a, bit);
                    self.event(ctx, FaultKind::Overdrive, a, bit, op);
                }
            }
            self.overdrive_stream = Some(stream);
        }
        // Coupling trials exist for writes only; read ops skip their slots.
        let n_off = self.n_offsets();
        if let Some(stream) = self.coupling_stream.as_mut() {
            while stream.next < end_op * n_off {
                stream.advance();
            }
        }
        self.op_counter = end_op;
    }

    fn transients<C: Cells>(&mut self, cells: &mut C, n: usize, hours: f64, ctx: &mut Ctx<'_>) {
        if self.lambda <= 0.0 || hours <= 0.0 || n == 0 {
            return;
        }
        let mean = self.lambda * n as f64 * 32.0 * hours;
        let stream = (self.salt << 48) ^ self.transient_applications;
        let mut rng = CounterRng::new(self.seed, Domain::Transient, stream);
        self.transient_applications += 1;
        let count = match Poisson::new(mean) {
            Ok(d) => d.sample(&mut rng) as u64,
            Err(_) => 0,
        };
        for _ in 0..count {
            let r = rng.next_u64();
            let a = ((r >> 5) % n as u64) as usize;
            let bit = (r & 31) as u32;
            self.flip(cells, a, bit);
            self.event(ctx, FaultKind::Transient, a, bit, self.op_counter);
        }
    }
}

/// Which storage a region may use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum StorageMode {
    /// Compact storage for regions of at least 64 Ki words, dense otherwise.
    #[default]
    Auto,
    Dense,
    Compact,
}

/// Fills walk positions `[j0, j1)` of a dense store.
fn fill_walk(words: &mut [Word32], walk: Walk, j0: usize, j1: usize, src: Source<'_>) {
    match (walk, src) {
        (Walk::Range { lo, .. }, Source::Constant(v)) => words[lo + j0..lo + j1].fill(v),
        (Walk::Range { lo, .. }, Source::Slice(s)) => words[lo + j0..lo + j1].copy_from_slice(&s[j0..j1]),
        (Walk::Class { .. }, _) => {
            for j in j0..j1 {
                words[walk.addr(j)] = src.at(j);
            }
        }
        (Walk::Outside { m, r, .. }, _) => {
            let mut a = walk.addr(j0);
            for j in j0..j1 {
                words[a] = src.at(j);
                a += 1;
                if a % m == r {
                    a += 1;
                }
            }
        }
    }
}

/// A backing store with its fault models.
#[derive(Debug, Clone)]
struct FaultRegion {
    n: usize,
    store: Store,
    spare: Vec<Word32>,
    compact: bool,
    models: Models,
}

impl FaultRegion {
    const AUTO_COMPACT_WORDS: usize = 1 << 16;

    fn new(n: usize, profile: &FaultProfile, clock_mhz: u32, salt: u64, is_scratch: bool, mode: StorageMode) -> Result<Self, DeviceError> {
        let mut merged: HashMap<usize, StuckAt> = HashMap::new();
        for s in &profile.stuck_at {
            if s.address >= n {
                return Err(DeviceError::OutOfRange {
                    address: s.address,
                    count: 1,
                    word_count: n,
                });
            }
            let e = merged.entry(s.address).or_insert(StuckAt {
                address: s.address,
                mask: 0,
                stuck_value: 0,
            });
            e.stuck_value = (e.stuck_value & !s.mask) | (s.stuck_value & s.mask);
            e.mask |= s.mask;
        }
        let mut stuck: Vec<StuckAt> = merged.into_values().filter(|s| s.mask != 0).collect();
        stuck.sort_by_key(|s| s.address);

        // Scratchpad is on-chip; the memory clock does not apply to it.
        let overdrive = if is_scratch { None } else { profile.overdrive.clone() };
        let overdrive_stream = overdrive.as_ref().and_then(|o| {
            let q = o.probability(clock_mhz, 1.0);
            (q > 0.0).then(|| EventStream::new(q, profile.seed, Domain::Overdrive, salt))
        });
        let coupling = profile.coupling.clone().filter(|_| profile.coupling_active());
        let coupling_stream = coupling
            .as_ref()
            .map(|c| EventStream::new(c.p_couple, profile.seed, Domain::Coupling, salt));

        let compact = match mode {
            StorageMode::Auto => n >= Self::AUTO_COMPACT_WORDS,
            StorageMode::Dense => false,
            StorageMode::Compact => true,
        };
        let mut store = if compact {
            Store::Periodic {
                values: vec![0],
                overlay: BTreeMap::new(),
            }
        } else {
            let mut w = Vec::new();
            w.try_reserve_exact(n).map_err(|_| DeviceError::Allocation { bytes: n * 4 })?;
            w.resize(n, 0);
            Store::Dense(w)
        };
        for s in &stuck {
            store.set(s.address, s.apply(0));
        }

        Ok(Self {
            n,
            store,
            spare: Vec::new(),
            compact,
            models: Models {
                stuck,
                row_length: profile.row_length(),
                coupling,
                overdrive,
                lambda: profile.transient_rate_lambda,
                seed: profile.seed,
                salt,
                is_scratch,
                op_counter: 0,
                overdrive_stream,
                coupling_stream,
                transient_applications: 0,
                transients_applied_until: 0.0,
            },
        })
    }

    fn overlay_limit(&self) -> usize {
        (self.n / 16).max(1024)
    }

    fn materialize(&mut self) -> Result<(), DeviceError> {
        let Store::Periodic { values, overlay } = &self.store else {
            return Ok(());
        };
        let n = self.n;
        let mut w = std::mem::take(&mut self.spare);
        w.clear();
        w.try_reserve_exact(n).map_err(|_| DeviceError::Allocation { bytes: n * 4 })?;
        if values.len() == 1 {
            w.resize(n, values[0]);
        } else {
            w.extend((0..n).map(|a| values[a % values.len()]));
        }
        for (&x, &v) in overlay {
            w[x] = v;
        }
        self.store = Store::Dense(w);
        Ok(())
    }

    /// Background and surviving overlay after writing `v` over all of `walk`,
    /// when the result stays periodic.
    fn plan_periodic(&self, walk: Walk, v: Word32) -> Option<(Vec<Word32>, BTreeMap<usize, Word32>)> {
        const MAX_PERIOD: usize = 64;
        match (walk, &self.store) {
            (Walk::Range { lo: 0, hi }, _) if hi == self.n => Some((vec![v], BTreeMap::new())),
            (Walk::Class { m, r, .. }, Store::Periodic { values, overlay }) if m <= MAX_PERIOD && m % values.len() == 0 => {
                let mut nv: Vec<Word32> = (0..m).map(|i| values[i % values.len()]).collect();
                nv[r] = v;
                let ov = overlay.iter().filter(|(&x, _)| x % m != r).map(|(&x, &w)| (x, w)).collect();
                Some((nv, ov))
            }
            (Walk::Outside { m, r, .. }, Store::Periodic { values, overlay }) if m <= MAX_PERIOD && m % values.len() == 0 => {
                let mut nv = vec![v; m];
                nv[r] = values[r % values.len()];
                let ov = overlay.iter().filter(|(&x, _)| x % m == r).map(|(&x, &w)| (x, w)).collect();
                Some((nv, ov))
            }
            (Walk::Outside { m, r, n }, Store::Dense(words)) if m <= MAX_PERIOD && r < n => {
                let base = words[r];
                let mut ov = BTreeMap::new();
                for x in (r..n).step_by(m) {
                    if words[x] != base {
                        ov.insert(x, words[x]);
                        if ov.len() > self.overlay_limit() {
                            return None;
                        }
                    }
                }
                let mut nv = vec![v; m];
                nv[r] = base;
                Some((nv, ov))
            }
            _ => None,
        }
    }

    fn write(&mut self, walk: Walk, src: Source<'_>, f_mhz: u32, ctx: &mut Ctx<'_>) -> Result<(), DeviceError> {
        if self.compact {
            if let Source::Constant(v) = src {
                let full = !matches!(walk, Walk::Range { .. }) || walk.len() == self.n;
                if full {
                    if let Some((values, overlay)) = self.plan_periodic(walk, v) {
                        self.write_periodic(walk, v, values, overlay, f_mhz, ctx);
                        return Ok(());
                    }
                }
            }
            if matches!(self.store, Store::Periodic { .. }) {
                if walk.len() <= 4096 {
                    self.models.write_each(&mut self.store, self.n, walk, src, f_mhz, ctx);
                    return self.check_overlay();
                }
                self.materialize()?;
            }
        }
        self.write_dense(walk, src, f_mhz, ctx);
        Ok(())
    }

    fn check_overlay(&mut self) -> Result<(), DeviceError> {
        if let Store::Periodic { overlay, .. } = &self.store {
            if overlay.len() > self.overlay_limit() {
                self.materialize()?;
            }
        }
        Ok(())
    }

    fn write_dense(&mut self, walk: Walk, src: Source<'_>, f_mhz: u32, ctx: &mut Ctx<'_>) {
        let Store::Dense(words) = &mut self.store else {
            unreachable!("dense write on compact storage");
        };
        let m = &mut self.models;
        let len = walk.len();
        let op0 = m.op_counter;
        let end_op = op0 + len as u64;
        let mut cur = 0usize;
        loop {
            let ev = m.next_write_event(end_op).map(|o| (o - op0) as usize);
            let seg_end = ev.unwrap_or(len);
            if seg_end > cur {
                fill_walk(words, walk, cur, seg_end, src);
                for s in &m.stuck {
                    if walk.position(s.address).is_some_and(|j| (cur..seg_end).contains(&j)) {
                        words[s.address] = s.apply(words[s.address]);
                    }
                }
            }
            let Some(j) = ev else { break };
            let mut cells = Store::Dense(std::mem::take(words));
            m.write_one(&mut cells, self.n, walk.addr(j), src.at(j), op0 + j as u64, f_mhz, ctx);
            let Store::Dense(w) = cells else { unreachable!() };
            *words = w;
            cur = j + 1;
        }
        m.op_counter = end_op;
    }

    fn write_periodic(
        &mut self,
        walk: Walk,
        v: Word32,
        values: Vec<Word32>,
        mut overlay: BTreeMap<usize, Word32>,
        f_mhz: u32,
        ctx: &mut Ctx<'_>,
    ) {
        let old = std::mem::replace(
            &mut self.store,
            Store::Periodic {
                values: vec![0],
                overlay: BTreeMap::new(),
            },
        );
        for s in &self.models.stuck {
            if walk.position(s.address).is_some() {
                set_layer(&values, &mut overlay, s.address, s.apply(v));
            }
        }
        let op0 = self.models.op_counter;
        let end_op = op0 + walk.len() as u64;
        let mut view = WalkView {
            walk,
            cursor: 0,
            committed: false,
            old: &old,
            pending: HashMap::new(),
            values: &values,
            overlay: &mut overlay,
        };
        while let Some(op) = self.models.next_write_event(end_op) {
            let j = (op - op0) as usize;
            view.cursor = j;
            view.committed = false;
            self.models.write_one(&mut view, self.n, walk.addr(j), v, op, f_mhz, ctx);
        }
        self.models.op_counter = end_op;
        self.store = Store::Periodic { values, overlay };
        if let Store::Dense(w) = old {
            self.spare = w;
        }
        // Materialising can only fail on allocation; keep the compact form then.
        let _ = self.check_overlay();
    }

    /// Counts words of `walk` that differ from `expected`.
    fn count(&mut self, walk: Walk, expected: Word32, f_mhz: u32, ctx: &mut Ctx<'_>) -> u64 {
        self.models.read_events(&mut self.store, self.n, walk, f_mhz, ctx);
        match &self.store {
            Store::Dense(w) => match walk {
                Walk::Range { lo, hi } => w[lo..hi].iter().filter(|&&x| x != expected).count() as u64,
                Walk::Class { m, r, n } => w[..n].iter().skip(r).step_by(m).filter(|&&x| x != expected).count() as u64,
                Walk::Outside { .. } => (0..walk.len()).filter(|&j| w[walk.addr(j)] != expected).count() as u64,
            },
            Store::Periodic { values, overlay } => {
                let p = values.len();
                let adjust = |range: &mut dyn Iterator<Item = (&usize, &Word32)>| -> (u64, u64) {
                    let (mut minus, mut plus) = (0, 0);
                    for (&x, &v) in range {
                        minus += (values[x % p] != expected) as u64;
                        plus += (v != expected) as u64;
                    }
                    (minus, plus)
                };
                match walk {
                    Walk::Range { lo, hi } => {
                        let base: u64 = (0..p)
                            .filter(|&i| values[i] != expected)
                            .map(|i| (residue_count(hi, p, i) - residue_count(lo, p, i)) as u64)
                            .sum();
                        let (minus, plus) = adjust(&mut overlay.range(lo..hi));
                        base - minus + plus
                    }
                    Walk::Class { m, r, n } if m % p == 0 => {
                        let base = if values[r % p] != expected { walk.len() as u64 } else { 0 };
                        let (minus, plus) = adjust(&mut overlay.range(..n).filter(|(&x, _)| x % m == r));
                        base - minus + plus
                    }
                    _ => (0..walk.len()).filter(|&j| self.store.get(walk.addr(j)) != expected).count() as u64,
                }
            }
        }
    }

    fn read_into(&mut self, lo: usize, out: &mut [Word32], f_mhz: u32, ctx: &mut Ctx<'_>) {
        let walk = Walk::Range { lo, hi: lo + out.len() };
        self.models.read_events(&mut self.store, self.n, walk, f_mhz, ctx);
        match &self.store {
            Store::Dense(w) => out.copy_from_slice(&w[lo..lo + out.len()]),
            Store::Periodic { .. } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = self.store.get(lo + i);
                }
            }
        }
    }

    fn transients(&mut self, hours: f64, ctx: &mut Ctx<'_>) {
        self.models.transients(&mut self.store, self.n, hours, ctx);
    }

    fn word(&self, a: usize) -> Word32 {
        self.store.get(a)
    }

    fn image(&self) -> Vec<Word32> {
        match &self.store {
            Store::Dense(w) => w.clone(),
            Store::Periodic { .. } => (0..self.n).map(|a| self.store.get(a)).collect(),
        }
    }
}


/// Scratchpad storage, specialised by how much of the fault machinery it needs.
#[derive(Debug, Clone)]
enum Scratch {
    Plain(Vec<Word32>),
    Faulty(Box<FaultRegion>),
}

/// Fault-injecting ALU for one logical thread.
#[derive(Debug, Clone)]
pub struct FaultAlu {
    p: f64,
    seed: u64,
    stream: u64,
    thread: u64,
    ops: u64,
    draws: u64,
    natural_next: u64,
    forced: Vec<u64>,
    events: Vec<FaultEvent>,
}

impl FaultAlu {
    fn new(p: f64, seed: u64, stream: u64, thread: u64, mut forced: Vec<u64>) -> Self {
        forced.sort_unstable_by(|a, b| b.cmp(a));
        let mut alu = Self {
            p,
            seed,
            stream,
            thread,
            ops: 0,
            draws: 0,
            natural_next: u64::MAX,
            forced,
            events: Vec::new(),
        };
        alu.natural_next = alu.gap();
        alu
    }

    fn gap(&mut self) -> u64 {
        let g = geometric_gap(self.p, hash(self.seed, Domain::Alu, self.stream, self.draws));
        self.draws += 1;
        g
    }

    fn next_fault(&self) -> u64 {
        self.natural_next.min(self.forced.last().copied().unwrap_or(u64::MAX))
    }

    /// Applies a fault to `exact` if the current op is scheduled to fail.
    #[inline]
    fn finish(&mut self, exact: Word32) -> Word32 {
        let op = self.ops;
        self.ops += 1;
        if op != self.next_fault() {
            return exact;
        }
        if self.natural_next == op {
            self.natural_next = op.saturating_add(1).saturating_add(self.gap());
        }
        while self.forced.last() == Some(&op) {
            self.forced.pop();
        }
        let bit = (hash(self.seed, Domain::AluBit, self.stream, op) % 32) as u32;
        self.events.push(FaultEvent {
            kind: FaultKind::Alu,
            site: FaultSite::Lane(self.thread),
            bit: bit as u8,
            virtual_time: 0.0,
            op_counter: op,
        });
        exact ^ (1 << bit)
    }

    pub fn ops(&self) -> u64 {
        self.ops
    }

    pub fn events(&self) -> &[FaultEvent] {
        &self.events
    }
}

impl Alu for FaultAlu {
    #[inline]
    fn mul_add(&mut self, a: Word32, x: Word32, c: Word32) -> Word32 {
        self.finish(a.wrapping_mul(x).wrapping_add(c))
    }

    #[inline]
    fn park_miller(&mut self, x: u32) -> u32 {
        self.finish(park_miller_raw(x))
    }

    fn lcg_run(&mut self, spec: &CyclicLcgSpec, mut state: Word32, mut steps: u64) -> Word32 {
        while steps > 0 {
            let clean = self.next_fault().saturating_sub(self.ops);
            if clean >= steps {
                self.ops += steps;
                return spec.advance(state, steps);
            }
            state = spec.advance(state, clean);
            self.ops += clean;
            steps -= clean;
            state = self.mul_add(spec.a, state, spec.c);
            steps -= 1;
        }
        state
    }
}

/// A simulated memory device with fault injection.
#[derive(Debug, Clone)]
pub struct FaultSimDevice {
    caps: DeviceCapabilities,
    profile: FaultProfile,
    main: FaultRegion,
    scratch: Scratch,
    clock: VirtualClock,
    log: EventLog,
    forced_alu: HashMap<u64, Vec<u64>>,
    iteration: u64,
}

impl FaultSimDevice {
    pub const DEFAULT_EVENT_LOG_LIMIT: usize = 100_000;

    pub fn new(caps: DeviceCapabilities, profile: FaultProfile) -> Result<Self, DeviceError> {
        Self::with_storage(caps, profile, StorageMode::Auto)
    }

    pub fn with_storage(caps: DeviceCapabilities, profile: FaultProfile, mode: StorageMode) -> Result<Self, DeviceError> {
        caps.validate()?;
        profile.validate()?;
        let f = caps.memory_clock_mhz;
        let main = FaultRegion::new(caps.word_count(), &profile, f, 0, false, mode)?;
        let scratch = match &profile.scratchpad_profile {
            Some(sp) if !sp.is_null() => Scratch::Faulty(Box::new(FaultRegion::new(
                caps.scratchpad_words,
                sp,
                f,
                1,
                true,
                StorageMode::Dense,
            )?)),
            _ => Scratch::Plain(vec![0; caps.scratchpad_words]),
        };
        Ok(Self {
            clock: VirtualClock::new(f),
            caps,
            profile,
            main,
            scratch,
            log: EventLog::new(Self::DEFAULT_EVENT_LOG_LIMIT),
            forced_alu: HashMap::new(),
            iteration: 0,
        })
    }

    pub fn with_event_log_limit(mut self, limit: usize) -> Self {
        self.log.limit = limit;
        self
    }

    pub fn profile(&self) -> &FaultProfile {
        &self.profile
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn events(&self) -> &[FaultEvent] {
        self.log.events()
    }

    /// The stored value of one word, without triggering read-side faults.
    pub fn word(&self, address: WordAddress) -> Word32 {
        self.main.word(address)
    }

    /// A copy of the stored memory image, without triggering read-side faults.
    pub fn image(&self) -> Vec<Word32> {
        self.main.image()
    }

    /// Schedules a forced fault on op `op_index` of the next ALU handed out
    /// for logical thread `stream`.
    pub fn force_alu_fault(&mut self, stream: u64, op_index: u64) {
        self.forced_alu.entry(stream).or_default().push(op_index);
    }

    /// Writes one word and returns its stored value plus the events the write caused.
    pub fn apply_write(&mut self, address: WordAddress, value: Word32) -> Result<(Word32, Vec<FaultEvent>), DeviceError> {
        let before = self.log.events.len();
        self.write_words(address, &[value])?;
        Ok((self.main.word(address), self.log.events[before..].to_vec()))
    }

    /// Injects transient flips for `elapsed_hours` of exposure of the whole region.
    pub fn apply_transients(&mut self, elapsed_hours: f64) -> Vec<FaultEvent> {
        let before = self.log.events.len();
        let mut ctx = Ctx {
            clock: &self.clock,
            log: &mut self.log,
        };
        self.main.transients(elapsed_hours, &mut ctx);
        self.log.events[before..].to_vec()
    }

    /// One ALU operation on logical thread `stream`; used for spot checks.
    pub fn alu_op(&mut self, stream: u64, a: Word32, x: Word32, c: Word32) -> Word32 {
        let mut alu = self.alu(stream);
        let r = alu.mul_add(a, x, c);
        self.retire_alu(alu);
        r
    }

    fn check_class(&self, modulus: usize, residue: usize) -> Result<(), DeviceError> {
        if modulus == 0 || residue >= modulus {
            return Err(DeviceError::Config(format!("residue {residue} is not in [0, {modulus})")));
        }
        Ok(())
    }

    fn write_walk(&mut self, walk: Walk, src: Source<'_>) -> Result<(), DeviceError> {
        let mut ctx = Ctx {
            clock: &self.clock,
            log: &mut self.log,
        };
        self.main.write(walk, src, self.clock.clock_mhz, &mut ctx)?;
        self.clock.charge_writes(walk.len());
        Ok(())
    }

    fn count_walk(&mut self, walk: Walk, expected: Word32) -> u64 {
        let mut ctx = Ctx {
            clock: &self.clock,
            log: &mut self.log,
        };
        let errors = self.main.count(walk, expected, self.clock.clock_mhz, &mut ctx);
        self.clock.charge_reads(walk.len());
        errors
    }

}

impl MemoryDevice for FaultSimDevice {
    type Alu = FaultAlu;

    fn capabilities(&self) -> &DeviceCapabilities {
        &self.caps
    }

    fn write_words(&mut self, base: WordAddress, values: &[Word32]) -> Result<(), DeviceError> {
        check_range(base, values.len(), self.main.n)?;
        self.write_walk(
            Walk::Range {
                lo: base,
                hi: base + values.len(),
            },
            Source::Slice(values),
        )
    }

    fn fill_range(&mut self, base: WordAddress, count: usize, pattern: Word32) -> Result<(), DeviceError> {
        check_range(base, count, self.main.n)?;
        self.write_walk(Walk::Range { lo: base, hi: base + count }, Source::Constant(pattern))
    }

    fn read_into(&mut self, base: WordAddress, out: &mut [Word32]) -> Result<(), DeviceError> {
        check_range(base, out.len(), self.main.n)?;
        let mut ctx = Ctx {
            clock: &self.clock,
            log: &mut self.log,
        };
        self.main.read_into(base, out, self.clock.clock_mhz, &mut ctx);
        self.clock.charge_reads(out.len());
        Ok(())
    }

    fn count_mismatches(&mut self, base: WordAddress, count: usize, expected: Word32) -> Result<u64, DeviceError> {
        check_range(base, count, self.main.n)?;
        Ok(self.count_walk(Walk::Range { lo: base, hi: base + count }, expected))
    }

    fn fill_class(&mut self, modulus: usize, residue: usize, value: Word32) -> Result<(), DeviceError> {
        self.check_class(modulus, residue)?;
        let n = self.main.n;
        self.write_walk(Walk::Class { m: modulus, r: residue, n }, Source::Constant(value))
    }

    fn fill_outside_class(&mut self, modulus: usize, residue: usize, value: Word32) -> Result<(), DeviceError> {
        self.check_class(modulus, residue)?;
        let n = self.main.n;
        self.write_walk(Walk::Outside { m: modulus, r: residue, n }, Source::Constant(value))
    }

    fn count_class_mismatches(&mut self, modulus: usize, residue: usize, expected: Word32) -> Result<u64, DeviceError> {
        self.check_class(modulus, residue)?;
        let n = self.main.n;
        Ok(self.count_walk(Walk::Class { m: modulus, r: residue, n }, expected))
    }

    fn scratch_write(&mut self, slot: usize, value: Word32) -> Result<(), DeviceError> {
        let f = self.clock.clock_mhz;
        let clock = &self.clock;
        let log = &mut self.log;
        match &mut self.scratch {
            Scratch::Plain(words) => {
                let n = words.len();
                *words
                    .get_mut(slot)
                    .ok_or(DeviceError::ScratchpadOutOfRange { slot, scratchpad_words: n })? = value;
                Ok(())
            }
            Scratch::Faulty(region) => {
                if slot >= region.n {
                    return Err(DeviceError::ScratchpadOutOfRange {
                        slot,
                        scratchpad_words: region.n,
                    });
                }
                let mut ctx = Ctx { clock, log };
                region.write(Walk::Range { lo: slot, hi: slot + 1 }, Source::Constant(value), f, &mut ctx)
            }
        }
    }

    fn scratch_read(&mut self, slot: usize) -> Result<Word32, DeviceError> {
        let f = self.clock.clock_mhz;
        let clock = &self.clock;
        let log = &mut self.log;
        match &mut self.scratch {
            Scratch::Plain(words) => words.get(slot).copied().ok_or(DeviceError::ScratchpadOutOfRange {
                slot,
                scratchpad_words: words.len(),
            }),
            Scratch::Faulty(region) => {
                if slot >= region.n {
                    return Err(DeviceError::ScratchpadOutOfRange {
                        slot,
                        scratchpad_words: region.n,
                    });
                }
                let mut ctx = Ctx { clock, log };
                let mut w = [0];
                region.read_into(slot, &mut w, f, &mut ctx);
                Ok(w[0])
            }
        }
    }

    fn scratch_is_exact(&self) -> bool {
        matches!(self.scratch, Scratch::Plain(_))
    }

    fn alu(&self, stream: u64) -> FaultAlu {
        let key = hash(self.iteration, Domain::Iteration, stream, 0);
        let forced = self.forced_alu.get(&stream).cloned().unwrap_or_default();
        FaultAlu::new(self.profile.alu_fault_p, self.profile.seed, key, stream, forced)
    }

    fn retire_alu(&mut self, alu: FaultAlu) {
        self.forced_alu.remove(&alu.thread);
        for e in alu.events {
            self.log.push(e);
        }
    }

    fn begin_iteration(&mut self, index: u64) {
        self.iteration = index;
    }
}
