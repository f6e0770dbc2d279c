//! Synthetic card populations, testing campaigns and the record file format.
//!
//! A record file holds one JSON object per line with these keys, in order:
//! `schema_version`, `card_id`, `device_name`, `architecture`, `region_mib`,
//! `lcg_period`, `shader_clock_mhz`, `memory_clock_mhz`, `start_utc`,
//! `end_utc`, `utc_offset_min`, one `err_<CODE>` per test code, `failed`.
//! Timestamps are seconds since the Unix epoch.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::RngCore;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::DataError;
use crate::faultsim::{CouplingModel, FaultProfile, FaultSimDevice};
use crate::memdev::{Architecture, DeviceCapabilities, RegionSpec};
use crate::rng::{hash, unit, CounterRng, Domain};
use crate::testkit::{run_iteration, IterationRecord, M20Cursor, RunMetadata, TestCode, TestConfig, TestErrors};

pub const SCHEMA_VERSION: u64 = 1;

/// Start of the synthetic campaign calendar (2009-01-01T00:00:00Z).
pub const CAMPAIGN_EPOCH_UTC: i64 = 1_230_768_000;

/// Whole-world UTC offsets in minutes.
pub const WORLD_UTC_OFFSETS_MIN: [i32; 38] = [
    -720, -660, -600, -570, -540, -480, -420, -360, -300, -240, -210, -180, -120, -60, 0, 60, 120, 180, 210, 240, 270, 300,
    330, 345, 360, 390, 420, 480, 525, 540, 570, 600, 630, 660, 720, 765, 780, 840,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StockEntry {
    pub device_name: String,
    pub architecture: Architecture,
    pub stock_clocks_mhz: Vec<u32>,
    pub memory_clock_mhz: u32,
}

/// Device name to stock shader clocks.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StockTable {
    entries: BTreeMap<String, StockEntry>,
}

impl StockTable {
    pub fn builtin() -> Self {
        let rows: [(&str, Architecture, &[u32], u32); 9] = [
            ("GeForce 8800 GTX", Architecture::G80, &[1350], 900),
            ("GeForce 8800 GTS", Architecture::G80, &[1200], 800),
            ("GeForce 8800 Ultra", Architecture::G80, &[1512], 1080),
            ("GeForce GTX 260", Architecture::GT200, &[1242, 1296], 999),
            ("GeForce GTX 280", Architecture::GT200, &[1296], 1107),
            ("GeForce GTX 285", Architecture::GT200, &[1476], 1242),
            ("GeForce 9800 GT", Architecture::Other, &[1500, 1512], 900),
            ("GeForce 9600 GT", Architecture::Other, &[1625], 900),
            ("GeForce 8600 GT", Architecture::Other, &[1190], 700),
        ];
        let mut t = Self::default();
        for (name, architecture, clocks, mem) in rows {
            t.insert(StockEntry {
                device_name: name.to_string(),
                architecture,
                stock_clocks_mhz: clocks.to_vec(),
                memory_clock_mhz: mem,
            });
        }
        t
    }

    pub fn insert(&mut self, entry: StockEntry) {
        self.entries.insert(entry.device_name.clone(), entry);
    }

    pub fn get(&self, device_name: &str) -> Option<&StockEntry> {
        self.entries.get(device_name)
    }

    pub fn devices(&self, arch: Architecture) -> Vec<&StockEntry> {
        self.entries.values().filter(|e| e.architecture == arch).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses one entry object per line. Blank lines are skipped.
    pub fn from_json_lines(text: &str) -> Result<Self, DataError> {
        let mut t = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: StockEntry = serde_json::from_str(line).map_err(|e| DataError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if e.stock_clocks_mhz.is_empty() {
                return Err(DataError::Field {
                    line: i + 1,
                    field: "stock_clocks_mhz".into(),
                    message: "must not be empty".into(),
                });
            }
            t.insert(e);
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_json_lines(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OverclockStatus {
    Stock,
    Overclocked,
    Indeterminate,
}

impl OverclockStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            OverclockStatus::Stock => "STOCK",
            OverclockStatus::Overclocked => "OVERCLOCKED",
            OverclockStatus::Indeterminate => "INDETERMINATE",
        }
    }
}

/// Above the highest stock clock is overclocked, at or below the lowest is
/// stock, anything between (or no stock data) is indeterminate.
pub fn classify_clocks(stock_clocks_mhz: &[u32], reported_mhz: u32) -> OverclockStatus {
    match (stock_clocks_mhz.iter().min(), stock_clocks_mhz.iter().max()) {
        (Some(_), Some(&hi)) if reported_mhz > hi => OverclockStatus::Overclocked,
        (Some(&lo), Some(_)) if reported_mhz <= lo => OverclockStatus::Stock,
        _ => OverclockStatus::Indeterminate,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CardSpec {
    pub card_id: String,
    pub device_name: String,
    pub architecture: Architecture,
    pub stock_clocks_mhz: Vec<u32>,
    pub reported_clock_mhz: u32,
    pub memory_clock_mhz: u32,
    pub utc_offset_min: i32,
    pub start_utc: i64,
    /// Planted per-iteration failure probability.
    pub p_fail: f64,
    /// Per-test weights used by the Bernoulli campaign, in code order.
    pub sensitivity: [f64; 13],
    /// Calibrated device-mode profile.
    pub profile: FaultProfile,
}

pub fn classify_overclock(card: &CardSpec) -> OverclockStatus {
    classify_clocks(&card.stock_clocks_mhz, card.reported_clock_mhz)
}

/// Device-mode mechanism mix. Median rates apply to failing cards only, each
/// card scaled by a lognormal factor with the given log-sigma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceMix {
    pub region_mib: u32,
    pub lcg_period: u32,
    pub logic_threads: usize,
    /// Plant the transient rate calibrated from each card's P(fail).
    pub transients: bool,
    pub alu_fault_p: f64,
    pub alu_log_sigma: f64,
    pub coupling_p: f64,
    pub coupling_log_sigma: f64,
}

impl Default for DeviceMix {
    fn default() -> Self {
        Self {
            region_mib: 1,
            lcg_period: 256,
            logic_threads: 1024,
            transients: true,
            alu_fault_p: 0.0,
            alu_log_sigma: 1.0,
            coupling_p: 0.0,
            coupling_log_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetParams {
    pub n_cards: usize,
    /// Fraction z of cards that never fail.
    pub zero_error_fraction: f64,
    /// Median P(fail) of the failing population.
    pub mode_pfail: f64,
    pub log_sigma: f64,
    /// Fraction of cards drawn from the faulty-hardware tail.
    pub tail_fraction: f64,
    pub arch_mix: BTreeMap<Architecture, f64>,
    pub arch_pfail_scale: BTreeMap<Architecture, f64>,
    pub overclock_fraction: f64,
    /// P(fail) multiplier for overclocked cards; 1 plants no effect.
    pub overclock_pfail_scale: f64,
    pub iteration_seconds: i64,
    /// Card start times are spread uniformly over this many days.
    pub start_spread_days: u32,
    pub device: DeviceMix,
    pub seed: u64,
}

impl Default for FleetParams {
    fn default() -> Self {
        Self {
            n_cards: 1000,
            zero_error_fraction: 1.0 / 3.0,
            mode_pfail: 2e-5,
            log_sigma: 1.0,
            tail_fraction: 0.02,
            arch_mix: [(Architecture::G80, 0.4), (Architecture::GT200, 0.4), (Architecture::Other, 0.2)].into(),
            arch_pfail_scale: Architecture::ALL.into_iter().map(|a| (a, 1.0)).collect(),
            overclock_fraction: 0.2,
            overclock_pfail_scale: 1.0,
            iteration_seconds: 3,
            start_spread_days: 30,
            device: DeviceMix::default(),
            seed: 0,
        }
    }
}

impl FleetParams {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Params(m));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.n_cards == 0 {
            return bad("n_cards must be at least 1".into());
        }
        for (name, v) in [
            ("zero_error_fraction", self.zero_error_fraction),
            ("tail_fraction", self.tail_fraction),
            ("overclock_fraction", self.overclock_fraction),
        ] {
            if !unit(v) {
                return bad(format!("{name} = {v} is not in [0, 1]"));
            }
        }
        if self.zero_error_fraction + self.tail_fraction > 1.0 + 1e-12 {
            return bad("zero_error_fraction + tail_fraction exceeds 1".into());
        }
        if !(self.mode_pfail > 0.0 && self.mode_pfail <= 1.0) {
            return bad(format!("mode_pfail = {} is not in (0, 1]", self.mode_pfail));
        }
        if !(self.log_sigma >= 0.0 && self.log_sigma.is_finite()) {
            return bad("log_sigma must be finite and non-negative".into());
        }
        let total: f64 = self.arch_mix.values().sum();
        if self.arch_mix.values().any(|&f| !unit(f)) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("arch_mix fractions must lie in [0, 1] and sum to 1 (sum {total})"));
        }
        if self.arch_pfail_scale.values().chain([&self.overclock_pfail_scale]).any(|&s| !(s >= 0.0 && s.is_finite())) {
            return bad("P(fail) scales must be finite and non-negative".into());
        }
        if self.iteration_seconds < 1 {
            return bad("iteration_seconds must be at least 1".into());
        }
        let d = &self.device;
        if !unit(d.alu_fault_p) || !unit(d.coupling_p) {
            return bad("device mix probabilities must lie in [0, 1]".into());
        }
        RegionSpec::from_mib(d.region_mib)?;
        TestConfig::new(d.lcg_period).map_err(|e| DataError::Params(e.to_string()))?;
        Ok(())
    }
}

/// Default per-test weights for Bernoulli campaigns, in code order.
/// M20 carries the highest weight.
pub const DEFAULT_SENSITIVITY: [f64; 13] = [0.02, 0.02, 0.15, 0.2, 0.2, 0.15, 0.15, 0.35, 0.9, 0.05, 0.05, 0.05, 0.05];

fn pick<T: Copy>(items: &[(T, f64)], u: f64) -> T {
    let mut acc = 0.0;
    for &(item, w) in items {
        acc += w;
        if u < acc {
            return item;
        }
    }
    items.last().expect("nonempty").0
}

/// Transient rate that makes one iteration of `iteration_hours` over `bits`
/// fail with probability `p_fail` under a Poisson hit count.
pub fn calibrated_transient_rate(p_fail: f64, bits: f64, iteration_hours: f64) -> f64 {
    if p_fail <= 0.0 {
        return 0.0;
    }
    -(1.0 - p_fail.min(1.0 - 1e-12)).ln() / (bits * iteration_hours)
}

fn device_caps(card: &CardSpec, mix: &DeviceMix) -> Result<DeviceCapabilities, DataError> {
    let mut caps = DeviceCapabilities::new(RegionSpec::from_mib(mix.region_mib)?).with_memory_clock(card.memory_clock_mhz);
    caps.device_name = card.device_name.clone();
    caps.architecture = card.architecture;
    caps.shader_clock_mhz = card.reported_clock_mhz;
    Ok(caps)
}

fn device_config(mix: &DeviceMix) -> Result<TestConfig, DataError> {
    Ok(TestConfig::new(mix.lcg_period)
        .map_err(|e| DataError::Params(e.to_string()))?
        .with_logic_threads(mix.logic_threads))
}

/// Simulated seconds one iteration takes on a device of this shape.
fn virtual_iteration_seconds(caps: &DeviceCapabilities, config: &TestConfig) -> Result<f64, DataError> {
    let mut dev = FaultSimDevice::new(caps.clone(), FaultProfile::null())?;
    run_iteration(&mut dev, config, &RunMetadata::default(), M20Cursor::default(), 0, 0)?;
    Ok(dev.clock().now_seconds)
}

/// Draws a fleet. Identical parameters give identical fleets.
pub fn sample_fleet(params: &FleetParams) -> Result<Vec<CardSpec>, DataError> {
    sample_fleet_with(params, &StockTable::builtin())
}

pub fn sample_fleet_with(params: &FleetParams, stock: &StockTable) -> Result<Vec<CardSpec>, DataError> {
    params.validate()?;
    let arch_items: Vec<(Architecture, f64)> = params.arch_mix.iter().map(|(&a, &f)| (a, f)).collect();
    let width = params.n_cards.saturating_sub(1).to_string().len().max(5);
    let mix = &params.device;
    let mut virtual_seconds: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let config = device_config(mix)?;
    let mut cards = Vec::with_capacity(params.n_cards);
    for i in 0..params.n_cards {
        let mut rng = CounterRng::new(params.seed, Domain::Fleet, i as u64);
        let arch = pick(&arch_items, rng_unit(&mut rng));
        let devices = stock.devices(arch);
        if devices.is_empty() {
            return Err(DataError::Params(format!("stock table has no {arch} device")));
        }
        let entry = devices[((rng_unit(&mut rng) * devices.len() as f64) as usize).min(devices.len() - 1)].clone();
        let overclocked = rng_unit(&mut rng) < params.overclock_fraction;
        let lo = *entry.stock_clocks_mhz.iter().min().expect("nonempty");
        let hi = *entry.stock_clocks_mhz.iter().max().expect("nonempty");
        let reported = if overclocked {
            (hi as f64 * (1.03 + 0.12 * rng_unit(&mut rng))).round() as u32
        } else if hi > lo && rng_unit(&mut rng) < 0.25 {
            hi
        } else {
            lo
        };
        let utc_offset_min = WORLD_UTC_OFFSETS_MIN[((rng_unit(&mut rng) * 38.0) as usize).min(37)];
        let start_utc = CAMPAIGN_EPOCH_UTC + (rng_unit(&mut rng) * params.start_spread_days as f64 * 86_400.0) as i64;
        let class = rng_unit(&mut rng);
        let mut sensitivity = DEFAULT_SENSITIVITY;
        for w in sensitivity.iter_mut() {
            *w = (*w * (0.5 + rng_unit(&mut rng))).min(1.0);
        }
        let scale = params.arch_pfail_scale.get(&arch).copied().unwrap_or(1.0)
            * if overclocked { params.overclock_pfail_scale } else { 1.0 };
        let failing = class >= params.zero_error_fraction;
        let p_fail = if !failing {
            0.0
        } else if class < 1.0 - params.tail_fraction {
            let median = params.mode_pfail * scale;
            let d = LogNormal::new(median.ln(), params.log_sigma).map_err(|e| DataError::Params(e.to_string()))?;
            if median > 0.0 {
                d.sample(&mut rng).min(1.0)
            } else {
                0.0
            }
        } else {
            let lo = (5.0 * params.mode_pfail).clamp(1e-4, 0.1);
            (lo.ln() + rng_unit(&mut rng) * (0.1f64.ln() - lo.ln())).exp()
        };
        let mut profile = FaultProfile {
            seed: hash(params.seed, Domain::Fleet, i as u64, 1),
            ..FaultProfile::null()
        };
        if failing {
            let card_probe = CardSpec {
                card_id: String::new(),
                device_name: entry.device_name.clone(),
                architecture: arch,
                stock_clocks_mhz: entry.stock_clocks_mhz.clone(),
                reported_clock_mhz: reported,
                memory_clock_mhz: entry.memory_clock_mhz,
                utc_offset_min,
                start_utc,
                p_fail,
                sensitivity,
                profile: FaultProfile::null(),
            };
            let caps = device_caps(&card_probe, mix)?;
            if mix.transients && p_fail > 0.0 {
                let key = (caps.memory_clock_mhz, mix.region_mib);
                let secs = match virtual_seconds.get(&key) {
                    Some(&s) => s,
                    None => {
                        let s = virtual_iteration_seconds(&caps, &config)?;
                        virtual_seconds.insert(key, s);
                        s
                    }
                };
                profile.transient_rate_lambda =
                    calibrated_transient_rate(p_fail, caps.word_count() as f64 * 32.0, secs / 3600.0);
            }
            if mix.alu_fault_p > 0.0 {
                let d = LogNormal::new(mix.alu_fault_p.ln(), mix.alu_log_sigma).map_err(|e| DataError::Params(e.to_string()))?;
                profile.alu_fault_p = d.sample(&mut rng).min(1.0);
            }
            if mix.coupling_p > 0.0 {
                let d = LogNormal::new(mix.coupling_p.ln(), mix.coupling_log_sigma).map_err(|e| DataError::Params(e.to_string()))?;
                profile.coupling = Some(CouplingModel {
                    p_couple: d.sample(&mut rng).min(1.0),
                    ..CouplingModel::default()
                });
            }
        }
        cards.push(CardSpec {
            card_id: format!("card-{i:0width$}"),
            device_name: entry.device_name,
            architecture: arch,
            stock_clocks_mhz: entry.stock_clocks_mhz,
            reported_clock_mhz: reported,
            memory_clock_mhz: entry.memory_clock_mhz,
            utc_offset_min,
            start_utc,
            p_fail,
            sensitivity,
            profile,
        });
    }
    Ok(cards)
}

fn rng_unit(rng: &mut CounterRng) -> f64 {
    unit(rng.next_u64())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CampaignMode {
    Bernoulli,
    Device,
}

impl std::str::FromStr for CampaignMode {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bernoulli" => Ok(CampaignMode::Bernoulli),
            "device" => Ok(CampaignMode::Device),
            other => Err(DataError::Params(format!("unknown campaign mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignParams {
    pub iterations_per_card: u64,
    pub mode: CampaignMode,
    pub seed: u64,
    /// Worker threads; output does not depend on this.
    pub workers: usize,
    pub iteration_seconds: i64,
    /// Region size and generator period stamped on Bernoulli records.
    pub region_mib: u32,
    pub lcg_period: u32,
    /// Device-mode shape; taken from the fleet parameters by the CLI.
    pub device: DeviceMix,
}

impl Default for CampaignParams {
    fn default() -> Self {
        Self {
            iterations_per_card: 1000,
            mode: CampaignMode::Bernoulli,
            seed: 0,
            workers: 1,
            iteration_seconds: 3,
            region_mib: 32,
            lcg_period: 256,
            device: DeviceMix::default(),
        }
    }
}

impl CampaignParams {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.iterations_per_card == 0 {
            return Err(DataError::Params("iterations_per_card must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(DataError::Params("workers must be at least 1".into()));
        }
        if self.iteration_seconds < 1 {
            return Err(DataError::Params("iteration_seconds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CampaignSummary {
    pub cards: usize,
    pub records: u64,
    pub failures: u64,
    /// Records already present in a resumed file.
    pub skipped: u64,
}

fn bernoulli_errors(card: &CardSpec, seed: u64, card_index: u64, iteration: u64) -> TestErrors {
    let key = hash(seed, Domain::Campaign, card_index, iteration);
    let mut errors = TestErrors::default();
    if unit(key) >= card.p_fail {
        return errors;
    }
    let mut rng = CounterRng::new(seed, Domain::Campaign, key);
    let mut draw = |code: TestCode, errors: &mut TestErrors| {
        if unit(rng.next_u64()) < card.sensitivity[code.index()] {
            // 1 + geometric count with mean 2
            let mut c = 1;
            while c < 64 && unit(rng.next_u64()) < 0.5 {
                c += 1;
            }
            errors.set(code, c);
        }
    };
    draw(TestCode::M20, &mut errors);
    for code in TestCode::ALL.into_iter().filter(|&c| c != TestCode::M20) {
        draw(code, &mut errors);
    }
    if !errors.any() {
        errors.set(TestCode::M20, 1);
    }
    errors
}

fn card_records(card: &CardSpec, index: u64, params: &CampaignParams) -> Result<Vec<IterationRecord>, DataError> {
    let n = params.iterations_per_card;
    let mut out = Vec::with_capacity(n as usize);
    match params.mode {
        CampaignMode::Bernoulli => {
            for it in 0..n {
                let errors = bernoulli_errors(card, params.seed, index, it);
                let start_utc = card.start_utc + it as i64 * params.iteration_seconds;
                out.push(IterationRecord {
                    card_id: card.card_id.clone(),
                    device_name: card.device_name.clone(),
                    architecture: card.architecture,
                    region_mib: params.region_mib,
                    lcg_period: params.lcg_period,
                    shader_clock_mhz: card.reported_clock_mhz,
                    memory_clock_mhz: card.memory_clock_mhz,
                    start_utc,
                    end_utc: start_utc + params.iteration_seconds,
                    utc_offset_min: card.utc_offset_min,
                    failed: errors.any(),
                    errors,
                });
            }
        }
        CampaignMode::Device => {
            let caps = device_caps(card, &params.device)?;
            let config = device_config(&params.device)?;
            let mut profile = card.profile.clone();
            profile.seed ^= hash(params.seed, Domain::Campaign, index, u64::MAX);
            let mut dev = FaultSimDevice::new(caps, profile)?;
            let meta = RunMetadata {
                card_id: card.card_id.clone(),
                utc_offset_min: card.utc_offset_min,
                start_utc: card.start_utc,
                iteration_seconds: params.iteration_seconds,
            };
            let run_seed = hash(params.seed, Domain::Campaign, index, u64::MAX - 1);
            let mut cursor = M20Cursor::default();
            for it in 0..n {
                let (record, next) = run_iteration(&mut dev, &config, &meta, cursor, run_seed, it)?;
                cursor = next;
                out.push(record);
            }
        }
    }
    Ok(out)
}

/// Runs every card and hands records to `sink` in card order, then
/// iteration order. Output is identical for any worker count.
pub fn run_campaign(
    fleet: &[CardSpec],
    params: &CampaignParams,
    sink: &mut dyn FnMut(&IterationRecord) -> Result<(), DataError>,
) -> Result<CampaignSummary, DataError> {
    params.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(params.workers)
        .build()
        .map_err(|e| DataError::Params(e.to_string()))?;
    let chunk = params.workers * 4;
    let mut summary = CampaignSummary {
        cards: fleet.len(),
        ..Default::default()
    };
    for (c, cards) in fleet.chunks(chunk).enumerate() {
        let base = (c * chunk) as u64;
        let batch: Vec<Result<Vec<IterationRecord>, DataError>> = pool.install(|| {
            cards
                .par_iter()
                .enumerate()
                .map(|(i, card)| card_records(card, base + i as u64, params))
                .collect()
        });
        for records in batch {
            for r in records? {
                summary.records += 1;
                summary.failures += r.failed as u64;
                sink(&r)?;
            }
        }
    }
    Ok(summary)
}

pub fn campaign_records(fleet: &[CardSpec], params: &CampaignParams) -> Result<Vec<IterationRecord>, DataError> {
    let mut out = Vec::new();
    run_campaign(fleet, params, &mut |r| {
        out.push(r.clone());
        Ok(())
    })?;
    Ok(out)
}

/// Writes a campaign to `path`. With `resume`, an existing file is cut back
/// to its last complete line and only the missing records are appended.
pub fn write_campaign(path: &Path, fleet: &[CardSpec], params: &CampaignParams, resume: bool) -> Result<CampaignSummary, DataError> {
    let io = |e| DataError::io(path, e);
    let mut done = 0u64;
    let file = if resume && path.exists() {
        let mut f = OpenOptions::new().read(true).write(true).open(path).map_err(io)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(io)?;
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
        done = bytes[..keep].iter().filter(|&&b| b == b'\n').count() as u64;
        f.set_len(keep as u64).map_err(io)?;
        f.seek(SeekFrom::End(0)).map_err(io)?;
        f
    } else {
        File::create(path).map_err(io)?
    };
    let mut w = BufWriter::new(file);
    let mut seen = 0u64;
    let mut summary = run_campaign(fleet, params, &mut |r| {
        seen += 1;
        if seen > done {
            writeln!(w, "{}", format_record(r)).map_err(|e| DataError::io(path, e))?;
        }
        Ok(())
    })?;
    w.flush().map_err(io)?;
    summary.skipped = done.min(summary.records);
    Ok(summary)
}

#[derive(Serialize)]
struct RecordLine<'a> {
    schema_version: u64,
    card_id: &'a str,
    device_name: &'a str,
    architecture: &'static str,
    region_mib: u32,
    lcg_period: u32,
    shader_clock_mhz: u32,
    memory_clock_mhz: u32,
    start_utc: i64,
    end_utc: i64,
    utc_offset_min: i32,
    #[serde(rename = "err_MI10")]
    mi10: u64,
    #[serde(rename = "err_MIR")]
    mir: u64,
    #[serde(rename = "err_1WM")]
    w1m: u64,
    #[serde(rename = "err_1W0")]
    w10: u64,
    #[serde(rename = "err_1W1")]
    w11: u64,
    #[serde(rename = "err_4W0")]
    w40: u64,
    #[serde(rename = "err_4W1")]
    w41: u64,
    #[serde(rename = "err_RB")]
    rb: u64,
    #[serde(rename = "err_M20")]
    m20: u64,
    #[serde(rename = "err_L")]
    l: u64,
    #[serde(rename = "err_L4")]
    l4: u64,
    #[serde(rename = "err_LS")]
    ls: u64,
    #[serde(rename = "err_LS4")]
    ls4: u64,
    failed: bool,
}

/// One record as a single JSON line, without the trailing newline.
pub fn format_record(r: &IterationRecord) -> String {
    let e = &r.errors.0;
    let line = RecordLine {
        schema_version: SCHEMA_VERSION,
        card_id: &r.card_id,
        device_name: &r.device_name,
        architecture: r.architecture.as_str(),
        region_mib: r.region_mib,
        lcg_period: r.lcg_period,
        shader_clock_mhz: r.shader_clock_mhz,
        memory_clock_mhz: r.memory_clock_mhz,
        start_utc: r.start_utc,
        end_utc: r.end_utc,
        utc_offset_min: r.utc_offset_min,
        mi10: e[0],
        mir: e[1],
        w1m: e[2],
        w10: e[3],
        w11: e[4],
        w40: e[5],
        w41: e[6],
        rb: e[7],
        m20: e[8],
        l: e[9],
        l4: e[10],
        ls: e[11],
        ls4: e[12],
        failed: r.failed,
    };
    serde_json::to_string(&line).expect("record serializes")
}

pub fn error_key(code: TestCode) -> String {
    format!("err_{}", code.as_str())
}

struct Fields<'a> {
    map: &'a Map<String, Value>,
    line: usize,
}

impl Fields<'_> {
    fn err(&self, field: &str, message: impl Into<String>) -> DataError {
        DataError::Field {
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn get(&self, field: &str) -> Result<&Value, DataError> {
        self.map.get(field).ok_or_else(|| self.err(field, "missing"))
    }

    fn str(&self, field: &str) -> Result<String, DataError> {
        match self.get(field)? {
            Value::String(s) => Ok(s.clone()),
            v => Err(self.err(field, format!("expected a string, got {v}"))),
        }
    }

    fn int<T: TryFrom<i64>>(&self, field: &str) -> Result<T, DataError> {
        let v = self.get(field)?;
        v.as_i64()
            .and_then(|i| T::try_from(i).ok())
            .ok_or_else(|| self.err(field, format!("expected an integer in range, got {v}")))
    }

    fn count(&self, field: &str) -> Result<u64, DataError> {
        let v = self.get(field)?;
        v.as_u64().ok_or_else(|| self.err(field, format!("expected a non-negative integer, got {v}")))
    }
}

/// Parses and validates one record line. `line` is 1-based and only used in errors.
pub fn parse_record(text: &str, line: usize) -> Result<IterationRecord, DataError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DataError::Parse {
        line,
        message: e.to_string(),
    })?;
    let Value::Object(map) = value else {
        return Err(DataError::Parse {
            line,
            message: "expected a JSON object".into(),
        });
    };
    let f = Fields { map: &map, line };
    let version = f.count("schema_version")?;
    if version != SCHEMA_VERSION {
        return Err(DataError::Schema { line, version });
    }
    let mut errors = TestErrors::default();
    for code in TestCode::ALL {
        errors.set(code, f.count(&error_key(code))?);
    }
    let failed = match f.get("failed")? {
        Value::Bool(b) => *b,
        v => return Err(f.err("failed", format!("expected a boolean, got {v}"))),
    };
    let architecture = f.str("architecture")?.parse().map_err(|m: String| f.err("architecture", m))?;
    let record = IterationRecord {
        card_id: f.str("card_id")?,
        device_name: f.str("device_name")?,
        architecture,
        region_mib: f.int("region_mib")?,
        lcg_period: f.int("lcg_period")?,
        shader_clock_mhz: f.int("shader_clock_mhz")?,
        memory_clock_mhz: f.int("memory_clock_mhz")?,
        start_utc: f.int("start_utc")?,
        end_utc: f.int("end_utc")?,
        utc_offset_min: f.int("utc_offset_min")?,
        errors,
        failed,
    };
    if record.end_utc < record.start_utc {
        return Err(f.err("end_utc", "precedes start_utc"));
    }
    if !record.is_consistent() {
        let detail = match record.errors.iter().find(|&(_, c)| c > 0) {
            Some((code, c)) => format!("failed = false but {} = {c}", error_key(code)),
            None => "failed = true but every error count is zero".to_string(),
        };
        return Err(f.err("failed", detail));
    }
    if let Some(extra) = map.keys().find(|k| !is_record_key(k)) {
        return Err(f.err(extra, "unknown key"));
    }
    Ok(record)
}

fn is_record_key(k: &str) -> bool {
    const FIXED: [&str; 12] = [
        "schema_version",
        "card_id",
        "device_name",
        "architecture",
        "region_mib",
        "lcg_period",
        "shader_clock_mhz",
        "memory_clock_mhz",
        "start_utc",
        "end_utc",
        "utc_offset_min",
        "failed",
    ];
    FIXED.contains(&k) || TestCode::ALL.iter().any(|&c| error_key(c) == k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, z: f64, seed: u64) -> FleetParams {
        FleetParams {
            n_cards: n,
            zero_error_fraction: z,
            tail_fraction: 0.0,
            mode_pfail: 1e-2,
            seed,
            ..FleetParams::default()
        }
    }

    #[test]
    fn overclock_rule() {
        assert_eq!(classify_clocks(&[1350], 1350), OverclockStatus::Stock);
        assert_eq!(classify_clocks(&[1350], 1500), OverclockStatus::Overclocked);
        assert_eq!(classify_clocks(&[1375, 1500], 1450), OverclockStatus::Indeterminate);
        assert_eq!(classify_clocks(&[], 1450), OverclockStatus::Indeterminate);
    }

    #[test]
    fn all_zero_fleet() {
        let f = sample_fleet(&small(200, 1.0, 3)).unwrap();
        assert!(f.iter().all(|c| c.p_fail == 0.0 && c.profile.is_null()));
    }

    #[test]
    fn zero_fraction_binomial() {
        let f = sample_fleet(&small(3000, 1.0 / 3.0, 9)).unwrap();
        let zeros = f.iter().filter(|c| c.p_fail == 0.0).count() as f64;
        let sd = (3000.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        assert!((zeros - 1000.0).abs() <= 3.0 * sd, "{zeros}");
    }

    #[test]
    fn fleets_are_deterministic() {
        let p = small(50, 0.3, 1);
        assert_eq!(sample_fleet(&p).unwrap(), sample_fleet(&p).unwrap());
        let q = small(50, 0.3, 2);
        assert_ne!(sample_fleet(&p).unwrap(), sample_fleet(&q).unwrap());
    }

    #[test]
    fn inconsistent_fractions_rejected() {
        let p = FleetParams {
            zero_error_fraction: 0.9,
            tail_fraction: 0.2,
            ..FleetParams::default()
        };
        assert!(matches!(sample_fleet(&p), Err(DataError::Params(_))));
        let mut q = FleetParams::default();
        q.arch_mix.insert(Architecture::G80, 0.9);
        assert!(sample_fleet(&q).is_err());
    }

    #[test]
    fn bernoulli_binomial_count() {
        let mut card = sample_fleet(&small(1, 0.0, 0)).unwrap().remove(0);
        card.p_fail = 1e-2;
        let params = CampaignParams {
            iterations_per_card: 10_000,
            ..Default::default()
        };
        let records = campaign_records(&[card], &params).unwrap();
        let failed = records.iter().filter(|r| r.failed).count() as f64;
        assert!((failed - 100.0).abs() <= 3.0 * (10_000.0f64 * 0.01 * 0.99).sqrt(), "{failed}");
        assert!(records.iter().all(|r| r.is_consistent()));
        assert_eq!(records[1].start_utc - records[0].start_utc, 3);
    }

    #[test]
    fn zero_card_never_fails() {
        let f = sample_fleet(&small(5, 1.0, 0)).unwrap();
        let params = CampaignParams {
            iterations_per_card: 200,
            ..Default::default()
        };
        assert!(campaign_records(&f, &params).unwrap().iter().all(|r| !r.failed));
    }

    #[test]
    fn device_null_matches_bernoulli_zero() {
        let f = sample_fleet(&small(2, 1.0, 4)).unwrap();
        let b = CampaignParams {
            iterations_per_card: 3,
            ..Default::default()
        };
        let d = CampaignParams {
            mode: CampaignMode::Device,
            ..b.clone()
        };
        let fb: Vec<bool> = campaign_records(&f, &b).unwrap().iter().map(|r| r.failed).collect();
        let fd: Vec<bool> = campaign_records(&f, &d).unwrap().iter().map(|r| r.failed).collect();
        assert_eq!(fb, fd);
    }

    #[test]
    fn record_line_round_trip() {
        let f = sample_fleet(&small(3, 0.0, 5)).unwrap();
        let params = CampaignParams {
            iterations_per_card: 300,
            ..Default::default()
        };
        let records = campaign_records(&f, &params).unwrap();
        assert!(records.iter().any(|r| r.failed));
        for (i, r) in records.iter().enumerate() {
            assert_eq!(&parse_record(&format_record(r), i + 1).unwrap(), r);
        }
        let line = format_record(&records[0]);
        assert!(line.starts_with("{\"schema_version\":1,\"card_id\":"));
        assert!(line.contains("\"err_MI10\":") && line.ends_with("\"failed\":false}") || line.ends_with("\"failed\":true}"));
    }

    #[test]
    fn record_validation() {
        let r = IterationRecord {
            card_id: "c".into(),
            device_name: "d".into(),
            architecture: Architecture::G80,
            region_mib: 32,
            lcg_period: 256,
            shader_clock_mhz: 1350,
            memory_clock_mhz: 900,
            start_utc: 10,
            end_utc: 13,
            utc_offset_min: 0,
            errors: TestErrors::default(),
            failed: false,
        };
        let good = format_record(&r);
        let bad = good.replace("\"err_M20\":0", "\"err_M20\":3");
        match parse_record(&bad, 7) {
            Err(DataError::Field { line: 7, field, .. }) => assert_eq!(field, "failed"),
            other => panic!("{other:?}"),
        }
        let v2 = good.replace("\"schema_version\":1", "\"schema_version\":2");
        assert!(matches!(parse_record(&v2, 1), Err(DataError::Schema { version: 2, .. })));
        let typo = good.replace("\"region_mib\":32", "\"region_mib\":\"32\"");
        assert!(matches!(parse_record(&typo, 2), Err(DataError::Field { field, .. }) if field == "region_mib"));
        assert!(matches!(parse_record("{", 3), Err(DataError::Parse { line: 3, .. })));
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let f = sample_fleet(&small(30, 0.2, 8)).unwrap();
        let one = CampaignParams {
            iterations_per_card: 200,
            ..Default::default()
        };
        let four = CampaignParams { workers: 4, ..one.clone() };
        assert_eq!(campaign_records(&f, &one).unwrap(), campaign_records(&f, &four).unwrap());
    }

    #[test]
    fn resume_truncates_partial_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let f = sample_fleet(&small(4, 0.2, 2)).unwrap();
        let params = CampaignParams {
            iterations_per_card: 50,
            ..Default::default()
        };
        write_campaign(&path, &f, &params, false).unwrap();
        let full = std::fs::read_to_string(&path).unwrap();
        let cut = full.match_indices('\n').nth(69).unwrap().0 + 1;
        std::fs::write(&path, format!("{}{{\"schema_ver", &full[..cut])).unwrap();
        let s = write_campaign(&path, &f, &params, true).unwrap();
        assert_eq!(s.skipped, 70);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), full);
    }

    #[test]
    fn stock_table_lines() {
        let t = StockTable::from_json_lines(
            "{\"device_name\":\"X\",\"architecture\":\"GT200\",\"stock_clocks_mhz\":[1],\"memory_clock_mhz\":2}\n\n",
        )
        .unwrap();
        assert_eq!(t.get("X").unwrap().stock_clocks_mhz, vec![1]);
        assert!(StockTable::from_json_lines("{\"device_name\":\"X\"}").is_err());
        assert!(StockTable::builtin().devices(Architecture::GT200).len() >= 2);
    }
}
