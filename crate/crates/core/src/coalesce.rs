//! Half-warp memory-transaction formation under G80 and GT200 rules.
//!
//! Rule tables for 4-byte accesses by one half-warp (16 lanes):
//!
//! | architecture | condition | transactions |
//! |---|---|---|
//! | G80 (cc 1.0/1.1) | every active lane `i` accesses `base + 4i`, `base` 64-byte aligned; inactive lanes allowed | one 64-byte transaction |
//! | G80 | otherwise | one 32-byte transaction per active lane |
//! | GT200 (cc 1.2/1.3) | always | one transaction per 128-byte segment touched |
//!
//! A GT200 segment transaction starts at 128 bytes and halves to 64, then
//! 32, while every accessed byte lies in one half of the current window.
//!
//! GT200 never issues more transactions than G80 for the same half-warp. It
//! can move more bytes: two lanes 80 bytes apart cost 64 bytes on G80 and a
//! full 128-byte segment on GT200.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::AddAssign;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CoalesceError;

pub const HALF_WARP: usize = 16;
pub const WORD_BYTES: u64 = 4;
pub const M20_ROUNDS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
}

/// One lane's access within a half-warp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub lane: u8,
    pub byte_address: u64,
    pub size_bytes: u8,
    pub kind: AccessKind,
    pub active: bool,
}

impl Access {
    pub fn word(lane: u8, word: u64, kind: AccessKind) -> Self {
        Self {
            lane,
            byte_address: word * WORD_BYTES,
            size_bytes: WORD_BYTES as u8,
            kind,
            active: true,
        }
    }

    pub fn inactive(mut self) -> Self {
        self.active = false;
        self
    }
}

/// Ordered half-warp groups.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessTrace {
    pub groups: Vec<Vec<Access>>,
}

impl AccessTrace {
    pub fn validate(&self) -> Result<(), CoalesceError> {
        self.groups.iter().try_for_each(|g| validate_group(g))
    }

    pub fn accesses(&self) -> impl Iterator<Item = &Access> {
        self.groups.iter().flatten()
    }

    pub fn active_accesses(&self) -> usize {
        self.accesses().filter(|a| a.active).count()
    }
}

pub fn validate_group(group: &[Access]) -> Result<(), CoalesceError> {
    let mut seen = 0u32;
    for a in group {
        if a.lane as usize >= HALF_WARP {
            return Err(CoalesceError::LaneOutOfRange(a.lane));
        }
        if seen & (1 << a.lane) != 0 {
            return Err(CoalesceError::DuplicateLane(a.lane));
        }
        seen |= 1 << a.lane;
        if a.byte_address % WORD_BYTES != 0 || a.size_bytes as u64 != WORD_BYTES {
            return Err(CoalesceError::Misaligned {
                lane: a.lane,
                address: a.byte_address,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionStats {
    pub transactions: u64,
    pub bytes: u64,
}

impl TransactionStats {
    pub fn new(transactions: u64, bytes: u64) -> Self {
        Self { transactions, bytes }
    }
}

impl AddAssign for TransactionStats {
    fn add_assign(&mut self, o: Self) {
        self.transactions += o.transactions;
        self.bytes += o.bytes;
    }
}

/// G80 rules for one validated half-warp.
pub fn coalesce_group_g80(group: &[Access]) -> TransactionStats {
    let mut active = group.iter().filter(|a| a.active).peekable();
    let Some(first) = active.peek().copied() else {
        return TransactionStats::default();
    };
    let base = first.byte_address.wrapping_sub(WORD_BYTES * first.lane as u64);
    let n_active = group.iter().filter(|a| a.active).count() as u64;
    let coalesced = base % 64 == 0
        && first.byte_address >= WORD_BYTES * first.lane as u64
        && active.all(|a| a.byte_address == base + WORD_BYTES * a.lane as u64);
    if coalesced {
        TransactionStats::new(1, 64)
    } else {
        TransactionStats::new(n_active, 32 * n_active)
    }
}

/// GT200 rules for one validated half-warp.
pub fn coalesce_group_gt200(group: &[Access]) -> TransactionStats {
    // segment -> (lowest byte, one past highest byte)
    let mut segments: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for a in group.iter().filter(|a| a.active) {
        let seg = a.byte_address / 128;
        let end = a.byte_address + a.size_bytes as u64;
        let e = segments.entry(seg).or_insert((a.byte_address, end));
        e.0 = e.0.min(a.byte_address);
        e.1 = e.1.max(end);
    }
    let mut stats = TransactionStats::default();
    for (seg, (lo, hi)) in segments {
        let mut start = seg * 128;
        let mut size = 128;
        while size > 32 {
            let half = size / 2;
            if hi <= start + half {
                size = half;
            } else if lo >= start + half {
                start += half;
                size = half;
            } else {
                break;
            }
        }
        stats += TransactionStats::new(1, size);
    }
    stats
}

pub fn coalesce_g80(trace: &AccessTrace) -> Result<TransactionStats, CoalesceError> {
    trace.validate()?;
    let mut s = TransactionStats::default();
    for g in &trace.groups {
        s += coalesce_group_g80(g);
    }
    Ok(s)
}

pub fn coalesce_gt200(trace: &AccessTrace) -> Result<TransactionStats, CoalesceError> {
    trace.validate()?;
    let mut s = TransactionStats::default();
    for g in &trace.groups {
        s += coalesce_group_gt200(g);
    }
    Ok(s)
}

/// How modulo-20 kernels assign words to lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mapping {
    /// One thread per region word; half-warp `h` covers words
    /// `16h .. 16h + 16` and lanes whose word is not written are masked off.
    ThreadPerWord,
    /// One thread per written word; lane `j` of a half-warp handles the
    /// `j`-th next element of the address set being written.
    ClassCompact,
}

impl Mapping {
    pub const ALL: [Mapping; 2] = [Mapping::ThreadPerWord, Mapping::ClassCompact];

    pub fn reference() -> Self {
        Mapping::ThreadPerWord
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mapping::ThreadPerWord => "thread-per-word",
            Mapping::ClassCompact => "class-compact",
        }
    }
}

impl fmt::Display for Mapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mapping {
    type Err = CoalesceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mapping::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoalesceError::UnknownMapping(s.to_string()))
    }
}

/// Which kernels of a round count toward traffic totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrafficScope {
    Writes,
    WritesAndReads,
}

fn in_class(word: u64, round: u32) -> bool {
    word % M20_ROUNDS as u64 == round as u64
}

/// Emits the half-warps of one kernel touching the words selected by `pick`.
fn kernel_groups(region_words: u64, mapping: Mapping, kind: AccessKind, pick: impl Fn(u64) -> bool, f: &mut dyn FnMut(&[Access])) {
    let mut group: Vec<Access> = Vec::with_capacity(HALF_WARP);
    match mapping {
        Mapping::ThreadPerWord => {
            let mut start = 0;
            while start < region_words {
                group.clear();
                let end = (start + HALF_WARP as u64).min(region_words);
                for w in start..end {
                    let a = Access::word((w - start) as u8, w, kind);
                    group.push(if pick(w) { a } else { a.inactive() });
                }
                if group.iter().any(|a| a.active) {
                    f(&group);
                }
                start = end;
            }
        }
        Mapping::ClassCompact => {
            for w in (0..region_words).filter(|&w| pick(w)) {
                group.push(Access::word(group.len() as u8, w, kind));
                if group.len() == HALF_WARP {
                    f(&group);
                    group.clear();
                }
            }
            if !group.is_empty() {
                f(&group);
            }
        }
    }
}

/// Streams the half-warps of one modulo-20 round in kernel order: pattern
/// writes, the two complement writes, then the verifying reads.
pub fn for_each_m20_group(region_words: u64, round: u32, mapping: Mapping, f: &mut dyn FnMut(&[Access])) -> Result<(), CoalesceError> {
    if round >= M20_ROUNDS {
        return Err(CoalesceError::InvalidRound(round));
    }
    kernel_groups(region_words, mapping, AccessKind::Write, |w| in_class(w, round), f);
    for _ in 0..2 {
        kernel_groups(region_words, mapping, AccessKind::Write, |w| !in_class(w, round), f);
    }
    kernel_groups(region_words, mapping, AccessKind::Read, |w| in_class(w, round), f);
    Ok(())
}

pub fn trace_m20(region_words: u64, round: u32, mapping: Mapping) -> Result<AccessTrace, CoalesceError> {
    let mut trace = AccessTrace::default();
    for_each_m20_group(region_words, round, mapping, &mut |g| trace.groups.push(g.to_vec()))?;
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub region_words: u64,
    #[serde(skip)]
    pub mapping: Option<Mapping>,
    pub scope: TrafficScope,
    pub g80: TransactionStats,
    pub gt200: TransactionStats,
    pub byte_ratio: f64,
    pub transaction_ratio: f64,
}

/// Both coalescers summed over all 20 modulo-20 rounds.
pub fn traffic_report(region_words: u64, mapping: Mapping, scope: TrafficScope) -> Result<TrafficReport, CoalesceError> {
    if region_words < 320 {
        return Err(CoalesceError::RegionTooSmall(region_words as usize));
    }
    let mut g80 = TransactionStats::default();
    let mut gt200 = TransactionStats::default();
    for round in 0..M20_ROUNDS {
        for_each_m20_group(region_words, round, mapping, &mut |g| {
            if scope == TrafficScope::Writes && g.iter().any(|a| a.kind == AccessKind::Read) {
                return;
            }
            g80 += coalesce_group_g80(g);
            gt200 += coalesce_group_gt200(g);
        })?;
    }
    Ok(TrafficReport {
        region_words,
        mapping: Some(mapping),
        scope,
        g80,
        gt200,
        byte_ratio: g80.bytes as f64 / gt200.bytes as f64,
        transaction_ratio: g80.transactions as f64 / gt200.transactions as f64,
    })
}
