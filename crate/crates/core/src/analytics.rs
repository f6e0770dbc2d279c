//! Record ingestion and the statistics computed over it.
//!
//! Per-card failure probabilities are histogrammed with one bin reserved for
//! exactly zero followed by `bins` equal-width bins over `(0, 1]` (1000 by
//! default). The zero bin keeps never-failing cards apart from cards with a
//! small but nonzero rate, so the perfect indicator's gain equals the entropy
//! of the zero/nonzero label.
//!
//! Test-count histograms use 10 bins: bin 0 holds exactly-zero counts and
//! bins 1..=9 split `(0, max]` into equal widths.
//!
//! All entropies are in bits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Serialize;

use crate::error::DataError;
use crate::fleet::{classify_clocks, parse_record, OverclockStatus, StockTable};
use crate::memdev::Architecture;
use crate::testkit::{IterationRecord, TestCode, TestErrors};

pub const DEFAULT_PFAIL_BINS: usize = 1000;
pub const COUNT_BINS: usize = 10;
pub const DEFAULT_CUTOFFS: [u64; 4] = [1, 50_000, 300_000, 1_000_000];

/// Record fields shared by runs of a card at one configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
struct CardMeta {
    device_name: String,
    architecture: Architecture,
    region_mib: u32,
    lcg_period: u32,
    shader_clock_mhz: u32,
    memory_clock_mhz: u32,
    utc_offset_min: i32,
}

impl CardMeta {
    fn of(r: &IterationRecord) -> Self {
        Self {
            device_name: r.device_name.clone(),
            architecture: r.architecture,
            region_mib: r.region_mib,
            lcg_period: r.lcg_period,
            shader_clock_mhz: r.shader_clock_mhz,
            memory_clock_mhz: r.memory_clock_mhz,
            utc_offset_min: r.utc_offset_min,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Span {
    start_utc: i64,
    seconds: u32,
    meta: u32,
}

/// All records of one card, stored column-wise. Error counts are kept only
/// for failed iterations.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CardRecords {
    pub card_id: String,
    metas: Vec<CardMeta>,
    spans: Vec<Span>,
    failures: Vec<(u32, TestErrors)>,
}

impl CardRecords {
    pub fn iterations(&self) -> u64 {
        self.spans.len() as u64
    }

    pub fn failures(&self) -> u64 {
        self.failures.len() as u64
    }

    pub fn device_name(&self) -> &str {
        &self.metas[0].device_name
    }

    pub fn architecture(&self) -> Architecture {
        self.metas[0].architecture
    }

    /// Distinct reported shader clocks, in first-seen order.
    pub fn shader_clocks(&self) -> Vec<u32> {
        let mut v: Vec<u32> = Vec::new();
        for m in &self.metas {
            if !v.contains(&m.shader_clock_mhz) {
                v.push(m.shader_clock_mhz);
            }
        }
        v
    }

    fn push(&mut self, r: &IterationRecord) -> Result<(), String> {
        let meta = CardMeta::of(r);
        let m = match self.metas.iter().position(|x| *x == meta) {
            Some(m) => m,
            None => {
                self.metas.push(meta);
                self.metas.len() - 1
            }
        };
        let seconds = u32::try_from(r.end_utc - r.start_utc).map_err(|_| "iteration longer than u32 seconds".to_string())?;
        let index = self.spans.len() as u32;
        self.spans.push(Span {
            start_utc: r.start_utc,
            seconds,
            meta: m as u32,
        });
        if r.failed {
            self.failures.push((index, r.errors));
        }
        Ok(())
    }

    fn record(&self, i: usize, errors: TestErrors) -> IterationRecord {
        let s = self.spans[i];
        let m = &self.metas[s.meta as usize];
        IterationRecord {
            card_id: self.card_id.clone(),
            device_name: m.device_name.clone(),
            architecture: m.architecture,
            region_mib: m.region_mib,
            lcg_period: m.lcg_period,
            shader_clock_mhz: m.shader_clock_mhz,
            memory_clock_mhz: m.memory_clock_mhz,
            start_utc: s.start_utc,
            end_utc: s.start_utc + s.seconds as i64,
            utc_offset_min: m.utc_offset_min,
            failed: errors.any(),
            errors,
        }
    }

    /// Records in ingestion order.
    pub fn records(&self) -> impl Iterator<Item = IterationRecord> + '_ {
        let mut f = self.failures.iter().peekable();
        (0..self.spans.len()).map(move |i| {
            let errors = match f.peek() {
                Some(&&(j, e)) if j as usize == i => {
                    f.next();
                    e
                }
                _ => TestErrors::default(),
            };
            self.record(i, errors)
        })
    }

    /// Local start and end of every iteration, with its failed flag.
    fn local_spans(&self) -> impl Iterator<Item = (i64, i64, bool)> + '_ {
        let mut f = self.failures.iter().map(|&(j, _)| j as usize).peekable();
        self.spans.iter().enumerate().map(move |(i, s)| {
            let failed = f.next_if_eq(&i).is_some();
            let off = self.metas[s.meta as usize].utc_offset_min as i64 * 60;
            (s.start_utc + off, s.start_utc + s.seconds as i64 + off, failed)
        })
    }
}

/// Records grouped by card id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    cards: BTreeMap<String, CardRecords>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: &IterationRecord) -> Result<(), DataError> {
        let card = self.cards.entry(r.card_id.clone()).or_insert_with(|| CardRecords {
            card_id: r.card_id.clone(),
            ..Default::default()
        });
        card.push(r).map_err(DataError::Params)
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a IterationRecord>) -> Result<Self, DataError> {
        let mut d = Self::new();
        for r in records {
            d.push(r)?;
        }
        Ok(d)
    }

    /// Appends every record of `other`, card by card.
    pub fn merge(&mut self, other: &Dataset) -> Result<(), DataError> {
        for r in other.records() {
            self.push(&r)?;
        }
        Ok(())
    }

    pub fn card_count(&self) -> usize {
        self.cards.len()
    }

    pub fn record_count(&self) -> u64 {
        self.cards.values().map(|c| c.iterations()).sum()
    }

    pub fn failure_count(&self) -> u64 {
        self.cards.values().map(|c| c.failures()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.cards.is_empty()
    }

    pub fn cards(&self) -> impl Iterator<Item = &CardRecords> {
        self.cards.values()
    }

    pub fn card(&self, card_id: &str) -> Option<&CardRecords> {
        self.cards.get(card_id)
    }

    /// Every record, by card id and then ingestion order.
    pub fn records(&self) -> impl Iterator<Item = IterationRecord> + '_ {
        self.cards.values().flat_map(|c| c.records())
    }
}

/// Reads a record file, validating every line.
pub fn load_records(path: &Path) -> Result<Dataset, DataError> {
    let mut d = Dataset::new();
    load_into(&mut d, path)?;
    Ok(d)
}

/// Reads several record files into one dataset, in argument order.
pub fn load_many(paths: &[impl AsRef<Path>]) -> Result<Dataset, DataError> {
    let mut d = Dataset::new();
    for p in paths {
        load_into(&mut d, p.as_ref())?;
    }
    Ok(d)
}

fn load_into(d: &mut Dataset, path: &Path) -> Result<(), DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = parse_record(&line, i + 1)?;
        d.push(&r).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CardEstimate {
    pub card_id: String,
    pub iterations: u64,
    pub failures: u64,
    pub p_fail: f64,
}

impl CardEstimate {
    pub fn new(card_id: impl Into<String>, iterations: u64, failures: u64) -> Self {
        Self {
            card_id: card_id.into(),
            iterations,
            failures,
            p_fail: failures as f64 / iterations as f64,
        }
    }
}

/// One estimate per card with at least `min_iterations` iterations.
pub fn card_pfail(d: &Dataset, min_iterations: u64) -> Result<Vec<CardEstimate>, DataError> {
    if min_iterations == 0 {
        return Err(DataError::Params("min_iterations must be at least 1".into()));
    }
    Ok(d.cards()
        .filter(|c| c.iterations() >= min_iterations)
        .map(|c| CardEstimate::new(c.card_id.clone(), c.iterations(), c.failures()))
        .collect())
}

/// Median P(fail) over cards that failed at least once.
pub fn failing_median(estimates: &[CardEstimate]) -> Option<f64> {
    let mut p: Vec<f64> = estimates.iter().map(|e| e.p_fail).filter(|&p| p > 0.0).collect();
    if p.is_empty() {
        return None;
    }
    p.sort_by(f64::total_cmp);
    let n = p.len();
    Some(if n % 2 == 1 { p[n / 2] } else { (p[n / 2 - 1] * p[n / 2]).sqrt() })
}

/// Fraction of cards with `p_fail <= x` at each point.
pub fn empirical_cdf(estimates: &[CardEstimate], points: &[f64]) -> Result<Vec<f64>, DataError> {
    if estimates.is_empty() {
        return Err(DataError::Empty("no card estimates".into()));
    }
    let mut p: Vec<f64> = estimates.iter().map(|e| e.p_fail).collect();
    p.sort_by(f64::total_cmp);
    let n = p.len() as f64;
    Ok(points.iter().map(|&x| p.partition_point(|&v| v <= x) as f64 / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Normalized mass; all zeros when empty.
    pub fn mass(&self) -> Vec<f64> {
        let t = self.total();
        self.counts
            .iter()
            .map(|&c| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect()
    }
}

/// Histogram over `[e0, e1), [e1, e2), ..., [e_{n-1}, e_n]`. Values outside are dropped.
pub fn empirical_pmf(estimates: &[CardEstimate], bin_edges: &[f64]) -> Result<Histogram, DataError> {
    if estimates.is_empty() {
        return Err(DataError::Empty("no card estimates".into()));
    }
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(DataError::Params("bin edges must be strictly increasing with at least two entries".into()));
    }
    let bins = bin_edges.len() - 1;
    let mut counts = vec![0u64; bins];
    for e in estimates {
        let x = e.p_fail;
        if x < bin_edges[0] || x > bin_edges[bins] {
            continue;
        }
        let i = (bin_edges.partition_point(|&b| b <= x) - 1).min(bins - 1);
        counts[i] += 1;
    }
    Ok(Histogram {
        bin_edges: bin_edges.to_vec(),
        counts,
    })
}

/// Shannon entropy of a mass function. Zero-mass bins contribute nothing.
pub fn entropy(mass: &[f64]) -> f64 {
    let mut terms: Vec<f64> = mass.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).collect();
    sorted_sum(&mut terms).max(0.0)
}

fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Bin of a failure probability: 0 for exactly zero, else `1..=bins`.
pub fn pfail_bin(p: f64, bins: usize) -> usize {
    if p <= 0.0 {
        0
    } else {
        1 + ((p * bins as f64).ceil() as usize).clamp(1, bins) - 1
    }
}

fn pfail_counts<'a>(estimates: impl IntoIterator<Item = &'a CardEstimate>, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins + 1];
    for e in estimates {
        counts[pfail_bin(e.p_fail, bins)] += 1;
    }
    counts
}

fn counts_entropy(counts: &[u64]) -> f64 {
    let t: u64 = counts.iter().sum();
    if t == 0 {
        return 0.0;
    }
    entropy(&counts.iter().map(|&c| c as f64 / t as f64).collect::<Vec<_>>())
}

/// The per-card P(fail) histogram used for H(D).
pub fn pfail_histogram(estimates: &[CardEstimate], bins: usize) -> Histogram {
    let mut edges = vec![0.0];
    edges.extend((0..=bins).map(|i| i as f64 / bins as f64));
    Histogram {
        bin_edges: edges,
        counts: pfail_counts(estimates, bins),
    }
}

/// Card estimates split by the value of an indicator variable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndicatorPartition {
    pub indicator: String,
    pub subsets: BTreeMap<String, Vec<CardEstimate>>,
    /// Cards (or card-label groups) left out as indeterminate.
    pub excluded: usize,
}

impl IndicatorPartition {
    /// The partitioned dataset D: every estimate of every subset.
    pub fn union(&self) -> Vec<CardEstimate> {
        self.subsets.values().flatten().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainReport {
    pub h_d: f64,
    pub i_dv: f64,
    pub subset_sizes: BTreeMap<String, usize>,
}

/// `I(D;V) = H(D) - sum_v H(D_v) P(V = v)` over the union of the subsets.
pub fn information_gain(partition: &IndicatorPartition, bins: usize) -> Result<GainReport, DataError> {
    if bins == 0 {
        return Err(DataError::Params("bins must be at least 1".into()));
    }
    if partition.subsets.len() < 2 {
        return Err(DataError::Params(format!(
            "indicator `{}` needs at least two labels",
            partition.indicator
        )));
    }
    let total: usize = partition.subsets.values().map(Vec::len).sum();
    if total == 0 {
        return Err(DataError::Empty(format!("indicator `{}` has no cards", partition.indicator)));
    }
    let h_d = counts_entropy(&pfail_counts(partition.subsets.values().flatten(), bins));
    let mut conditional = Vec::new();
    for (label, subset) in &partition.subsets {
        if subset.is_empty() {
            log::warn!("indicator `{}`: subset `{label}` is empty", partition.indicator);
            continue;
        }
        let w = subset.len() as f64 / total as f64;
        conditional.push(w * counts_entropy(&pfail_counts(subset, bins)));
    }
    let i_dv = (h_d - sorted_sum(&mut conditional)).clamp(0.0, h_d);
    Ok(GainReport {
        h_d,
        i_dv,
        subset_sizes: partition.subsets.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
    })
}

/// Gain of the zero versus nonzero split of the same estimates.
pub fn perfect_indicator_gain(estimates: &[CardEstimate], bins: usize) -> Result<f64, DataError> {
    let (zero, nonzero): (Vec<_>, Vec<_>) = estimates.iter().cloned().partition(|e| e.p_fail == 0.0);
    let p = IndicatorPartition {
        indicator: "perfect".into(),
        subsets: [("NEVER_FAILED".to_string(), zero), ("FAILED".to_string(), nonzero)].into(),
        excluded: 0,
    };
    Ok(information_gain(&p, bins)?.i_dv)
}

/// `I(X;Y)` of a joint table, rows indexed by X. The table may hold counts
/// or any nonnegative weights; it is normalized first.
pub fn mutual_information(joint: &[Vec<f64>]) -> f64 {
    let rows = joint.len();
    let cols = joint.first().map_or(0, Vec::len);
    let total = sorted_sum(&mut joint.iter().flatten().copied().collect::<Vec<_>>());
    if total.is_nan() || total <= 0.0 {
        return 0.0;
    }
    let joint: Vec<Vec<f64>> = joint.iter().map(|r| r.iter().map(|&p| p / total).collect()).collect();
    let px: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let py: Vec<f64> = (0..cols).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut terms = Vec::with_capacity(rows * cols);
    for (i, r) in joint.iter().enumerate() {
        for (j, &p) in r.iter().enumerate() {
            if p > 0.0 {
                terms.push(p * (p / (px[i] * py[j])).log2());
            }
        }
    }
    let mi = sorted_sum(&mut terms);
    mi.clamp(0.0, entropy(&px).min(entropy(&py)))
}

/// Bin of an error count in a 10-bin test histogram with maximum `max`.
pub fn count_bin(count: u64, max: u64) -> usize {
    if count == 0 || max == 0 {
        0
    } else {
        let b = (count as u128 * 9).div_ceil(max as u128) as usize;
        1 + b.clamp(1, 9) - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiMatrix {
    pub codes: Vec<TestCode>,
    pub entropy: Vec<f64>,
    /// `ratio[y][x] = I(X;Y) / H(X)`; `None` where `H(X) = 0`.
    pub ratio: Vec<Vec<Option<f64>>>,
}

impl MiMatrix {
    pub fn get(&self, row: TestCode, col: TestCode) -> Option<f64> {
        self.ratio[row.index()][col.index()]
    }

    /// Mean of the defined entries `(y, x)` with `y` in `rows`, `x` in `cols`, `x != y`.
    pub fn mean_ratio(&self, rows: &[TestCode], cols: &[TestCode]) -> Option<f64> {
        let v: Vec<f64> = rows
            .iter()
            .flat_map(|&y| cols.iter().map(move |&x| (y, x)))
            .filter(|(y, x)| x != y)
            .filter_map(|(y, x)| self.get(y, x))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean of `test`'s defined off-diagonal entries within `group`, both
    /// as row and as column.
    pub fn mean_off_diagonal(&self, test: TestCode, group: &[TestCode]) -> Option<f64> {
        let v: Vec<f64> = group
            .iter()
            .filter(|&&o| o != test)
            .flat_map(|&o| [self.get(test, o), self.get(o, test)])
            .flatten()
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Pairwise I(X;Y)/H(X) over per-iteration error counts.
pub fn test_mi_matrix(d: &Dataset) -> MiMatrix {
    let n = TestCode::ALL.len();
    let mut max = [0u64; 13];
    for c in d.cards() {
        for (_, e) in &c.failures {
            for (k, m) in max.iter_mut().enumerate() {
                *m = (*m).max(e.0[k]);
            }
        }
    }
    let mut joint = vec![[[0u64; COUNT_BINS]; COUNT_BINS]; n * n];
    let clean = d.record_count() - d.failure_count();
    for cell in joint.iter_mut() {
        cell[0][0] = clean;
    }
    for c in d.cards() {
        for (_, e) in &c.failures {
            let bins: Vec<usize> = (0..n).map(|k| count_bin(e.0[k], max[k])).collect();
            for x in 0..n {
                for y in 0..n {
                    joint[y * n + x][bins[x]][bins[y]] += 1;
                }
            }
        }
    }
    let total = d.record_count().max(1) as f64;
    let to_mass = |t: &[[u64; COUNT_BINS]; COUNT_BINS]| -> Vec<Vec<f64>> {
        t.iter().map(|r| r.iter().map(|&c| c as f64 / total).collect()).collect()
    };
    let entropy: Vec<f64> = (0..n)
        .map(|x| {
            let m = to_mass(&joint[x * n + x]);
            crate::analytics::entropy(&m.iter().map(|r| r.iter().sum()).collect::<Vec<f64>>())
        })
        .collect();
    let mut ratio = vec![vec![None; n]; n];
    for y in 0..n {
        for x in 0..n {
            if entropy[x] > 0.0 {
                let r = if x == y {
                    1.0
                } else {
                    (mutual_information(&to_mass(&joint[y * n + x])) / entropy[x]).min(1.0)
                };
                ratio[y][x] = Some(r);
            }
        }
    }
    MiMatrix {
        codes: TestCode::ALL.to_vec(),
        entropy,
        ratio,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum DayNight {
    Day,
    Night,
}

impl DayNight {
    pub fn as_str(&self) -> &'static str {
        match self {
            DayNight::Day => "DAY",
            DayNight::Night => "NIGHT",
        }
    }
}

const HALF_DAY: i64 = 12 * 3600;
const SIX_HOURS: i64 = 6 * 3600;

/// DAY when both local endpoints fall in one `[06:00, 18:00)` window,
/// NIGHT when both fall in one `[18:00, 06:00)` window, `None` otherwise.
pub fn day_night_label(local_start: i64, local_end: i64) -> Option<DayNight> {
    let w = |t: i64| (t - SIX_HOURS).div_euclid(HALF_DAY);
    let (a, b) = (w(local_start), w(local_end));
    (a == b).then(|| if a.rem_euclid(2) == 0 { DayNight::Day } else { DayNight::Night })
}

pub fn record_day_night(r: &IterationRecord) -> Option<DayNight> {
    let off = r.utc_offset_min as i64 * 60;
    day_night_label(r.start_utc + off, r.end_utc + off)
}

/// Per-card estimates over DAY records and over NIGHT records. A card
/// contributes to a subset when it has at least `min_iterations` records
/// there; records spanning a boundary are excluded and counted.
pub fn day_night_partition(d: &Dataset, min_iterations: u64) -> IndicatorPartition {
    let mut day = Vec::new();
    let mut night = Vec::new();
    let mut excluded = 0;
    for c in d.cards() {
        let mut tally = [(0u64, 0u64); 2];
        for (s, e, failed) in c.local_spans() {
            match day_night_label(s, e) {
                Some(l) => {
                    let t = &mut tally[(l == DayNight::Night) as usize];
                    t.0 += 1;
                    t.1 += failed as u64;
                }
                None => excluded += 1,
            }
        }
        for (k, out) in [(0, &mut day), (1, &mut night)] {
            let (n, f) = tally[k];
            if n >= min_iterations.max(1) {
                out.push(CardEstimate::new(c.card_id.clone(), n, f));
            }
        }
    }
    IndicatorPartition {
        indicator: "daynight".into(),
        subsets: [(DayNight::Day.as_str().to_string(), day), (DayNight::Night.as_str().to_string(), night)].into(),
        excluded,
    }
}

/// Overclock status of a card from its reported clocks and the stock table.
/// Cards reporting several clocks are indeterminate unless all agree.
pub fn card_overclock(c: &CardRecords, stock: &StockTable) -> OverclockStatus {
    let Some(entry) = stock.get(c.device_name()) else {
        return OverclockStatus::Indeterminate;
    };
    let mut status = c
        .shader_clocks()
        .into_iter()
        .map(|clk| classify_clocks(&entry.stock_clocks_mhz, clk));
    let first = status.next().unwrap_or(OverclockStatus::Indeterminate);
    if status.all(|s| s == first) {
        first
    } else {
        OverclockStatus::Indeterminate
    }
}

pub fn overclock_partition(d: &Dataset, min_iterations: u64, stock: &StockTable) -> IndicatorPartition {
    let mut subsets: BTreeMap<String, Vec<CardEstimate>> = BTreeMap::new();
    subsets.insert(OverclockStatus::Stock.as_str().into(), Vec::new());
    subsets.insert(OverclockStatus::Overclocked.as_str().into(), Vec::new());
    let mut excluded = 0;
    for c in d.cards().filter(|c| c.iterations() >= min_iterations) {
        match card_overclock(c, stock) {
            OverclockStatus::Indeterminate => excluded += 1,
            s => subsets
                .get_mut(s.as_str())
                .expect("label present")
                .push(CardEstimate::new(c.card_id.clone(), c.iterations(), c.failures())),
        }
    }
    IndicatorPartition {
        indicator: "overclock".into(),
        subsets,
        excluded,
    }
}

pub fn architecture_partition(d: &Dataset, min_iterations: u64) -> IndicatorPartition {
    let mut subsets: BTreeMap<String, Vec<CardEstimate>> = BTreeMap::new();
    for c in d.cards().filter(|c| c.iterations() >= min_iterations) {
        subsets
            .entry(c.architecture().as_str().to_string())
            .or_default()
            .push(CardEstimate::new(c.card_id.clone(), c.iterations(), c.failures()));
    }
    IndicatorPartition {
        indicator: "architecture".into(),
        subsets,
        excluded: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Hypothesis {
    Overclock,
    Daynight,
    Architecture,
}

impl Hypothesis {
    pub const ALL: [Hypothesis; 3] = [Hypothesis::Overclock, Hypothesis::Daynight, Hypothesis::Architecture];

    pub fn as_str(&self) -> &'static str {
        match self {
            Hypothesis::Overclock => "overclock",
            Hypothesis::Daynight => "daynight",
            Hypothesis::Architecture => "architecture",
        }
    }
}

impl std::str::FromStr for Hypothesis {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Hypothesis::ALL
            .into_iter()
            .find(|h| h.as_str() == s)
            .ok_or_else(|| DataError::Params(format!("unknown hypothesis `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub indicator: Hypothesis,
    pub h_d: f64,
    pub i_dv: f64,
    pub perfect_indicator_gain: f64,
    pub subset_sizes: BTreeMap<String, usize>,
    pub excluded: usize,
}

impl HypothesisReport {
    pub fn fraction_of_perfect(&self) -> f64 {
        if self.perfect_indicator_gain > 0.0 {
            self.i_dv / self.perfect_indicator_gain
        } else {
            0.0
        }
    }
}

pub fn hypothesis_report(
    d: &Dataset,
    indicator: Hypothesis,
    min_iterations: u64,
    bins: usize,
    stock: &StockTable,
) -> Result<HypothesisReport, DataError> {
    let partition = match indicator {
        Hypothesis::Overclock => overclock_partition(d, min_iterations, stock),
        Hypothesis::Daynight => day_night_partition(d, min_iterations),
        Hypothesis::Architecture => architecture_partition(d, min_iterations),
    };
    let union = partition.union();
    if union.is_empty() {
        return Err(DataError::NoCards(min_iterations));
    }
    let gain = information_gain(&partition, bins)?;
    Ok(HypothesisReport {
        indicator,
        h_d: gain.h_d,
        i_dv: gain.i_dv,
        perfect_indicator_gain: perfect_indicator_gain(&union, bins)?,
        subset_sizes: gain.subset_sizes,
        excluded: partition.excluded,
    })
}

/// Default CDF evaluation points: 0 and ten per decade from 1e-7 to 1.
pub fn default_cdf_points() -> Vec<f64> {
    let mut v = vec![0.0];
    v.extend((0..=70).map(|i| 10f64.powf(-7.0 + i as f64 / 10.0)));
    v
}

/// Default PMF edges: a bin for zero up to 1e-7, then one per half decade to 1.
pub fn default_pmf_edges() -> Vec<f64> {
    let mut v = vec![0.0];
    v.extend((0..=14).map(|i| 10f64.powf(-7.0 + i as f64 / 2.0)));
    v
}

fn cutoff_estimates(d: &Dataset, cutoffs: &[u64]) -> Result<Vec<Vec<CardEstimate>>, DataError> {
    cutoffs
        .iter()
        .map(|&c| {
            let e = card_pfail(d, c)?;
            if e.is_empty() {
                Err(DataError::NoCards(c))
            } else {
                Ok(e)
            }
        })
        .collect()
}

/// Comma-separated CDF table: one `p_fail` column, one column per cutoff.
pub fn cdf_table(d: &Dataset, cutoffs: &[u64], points: &[f64]) -> Result<String, DataError> {
    let sets = cutoff_estimates(d, cutoffs)?;
    let cols: Vec<Vec<f64>> = sets.iter().map(|e| empirical_cdf(e, points)).collect::<Result<_, _>>()?;
    let mut out = String::from("p_fail");
    for c in cutoffs {
        write!(out, ",cdf_cutoff_{c}").expect("string write");
    }
    out.push('\n');
    for (i, x) in points.iter().enumerate() {
        write!(out, "{x:e}").expect("string write");
        for col in &cols {
            write!(out, ",{:.6}", col[i]).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Comma-separated PMF table: bin bounds, then one mass column per cutoff.
pub fn pmf_table(d: &Dataset, cutoffs: &[u64], edges: &[f64]) -> Result<String, DataError> {
    let sets = cutoff_estimates(d, cutoffs)?;
    let hists: Vec<Histogram> = sets.iter().map(|e| empirical_pmf(e, edges)).collect::<Result<_, _>>()?;
    let mut out = String::from("bin_lo,bin_hi");
    for c in cutoffs {
        write!(out, ",pmf_cutoff_{c}").expect("string write");
    }
    out.push('\n');
    let masses: Vec<Vec<f64>> = hists.iter().map(Histogram::mass).collect();
    for i in 0..edges.len() - 1 {
        write!(out, "{:e},{:e}", edges[i], edges[i + 1]).expect("string write");
        for m in &masses {
            write!(out, ",{:.6}", m[i]).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Comma-separated 13x13 ratio table; undefined cells are written as `NA`.
pub fn mi_table(m: &MiMatrix) -> String {
    let mut out = String::from("row\\col");
    for c in &m.codes {
        write!(out, ",{c}").expect("string write");
    }
    out.push('\n');
    for (y, row) in m.ratio.iter().enumerate() {
        out.push_str(m.codes[y].as_str());
        for v in row {
            match v {
                Some(r) => write!(out, ",{r:.4}").expect("string write"),
                None => out.push_str(",NA"),
            }
        }
        out.push('\n');
    }
    out
}
