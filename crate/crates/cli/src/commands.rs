use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use memtestkit::analytics::{
    cdf_table, default_cdf_points, default_pmf_edges, failing_median, hypothesis_report, load_many, mi_table, pmf_table,
    test_mi_matrix, Dataset, Hypothesis, DEFAULT_CUTOFFS,
};
use memtestkit::coalesce::{for_each_m20_group, traffic_report, Mapping, TrafficScope};
use memtestkit::config::{Config, DeviceKind, RunSection};
use memtestkit::fleet::{format_record, sample_fleet, write_campaign, CampaignParams, FleetParams, StockTable, CAMPAIGN_EPOCH_UTC};
use memtestkit::testkit::{run_iteration, run_sweep, sweep_table, M20Cursor, RunMetadata, SweepPlan};
use memtestkit::{
    DataError, DeviceCapabilities, DeviceError, FaultProfile, FaultSimDevice, HostBuffer, MemoryDevice, RegionSpec, TestCode,
    TestConfig, TestErrors,
};

use crate::{AnalyzeArgs, Cli, CoalesceArgs, Command, FleetArgs, ReportArgs, SweepArgs, TestArgs};

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => Failure::Runtime(e.into()),
            DataError::Device(d) => d.into(),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<DeviceError> for Failure {
    fn from(e: DeviceError) -> Self {
        match e {
            DeviceError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn usage<T>(m: impl Into<String>) -> Result<T> {
    Err(Failure::Usage(m.into()))
}

struct Globals {
    seed: Option<u64>,
    config: Config,
    quiet: bool,
}

impl Globals {
    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }
}

pub fn run(cli: Cli) -> Result<u8> {
    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let g = Globals {
        seed: cli.seed,
        config,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Test(a) => cmd_test(&g, a),
        Command::Sweep(a) => cmd_sweep(&g, a),
        Command::Fleet(a) => cmd_fleet(&g, a),
        Command::Analyze(a) => cmd_analyze(&g, a),
        Command::Coalesce(a) => cmd_coalesce(&g, a),
        Command::Report(a) => cmd_report(&g, a),
    }
}

fn profile_from(path: &Path) -> Result<FaultProfile> {
    match Config::load(path)?.fault_profile {
        Some(p) => Ok(p),
        None => usage(format!("{}: no `fault_profile` section", path.display())),
    }
}

fn lcg_period(region_mib: u32, requested: Option<u32>, deployed_only: bool) -> Result<u32> {
    let deployed = TestConfig::deployed_period(region_mib);
    match (requested, deployed) {
        (Some(k), Some(d)) if deployed_only && k != d => {
            usage(format!("{region_mib} MiB is deployed with period {d}, not {k}"))
        }
        (_, None) if deployed_only => usage(format!("{region_mib} MiB is not a deployed region size")),
        (Some(k), _) => Ok(k),
        (None, Some(d)) => Ok(d),
        (None, None) => Ok(256),
    }
}

fn test_config(period: u32, threads: Option<usize>) -> Result<TestConfig> {
    let mut c = TestConfig::new(period).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(t) = threads {
        if t == 0 {
            return usage("--logic-threads must be at least 1");
        }
        c = c.with_logic_threads(t);
    }
    Ok(c)
}

fn now_utc() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs() as i64)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn totals_line(t: &TestErrors) -> String {
    t.iter().map(|(c, n)| format!("{c}={n}")).collect::<Vec<_>>().join(" ")
}

fn cmd_test(g: &Globals, a: TestArgs) -> Result<u8> {
    let mut run: RunSection = g.config.run.clone().unwrap_or_default();
    if let Some(v) = a.region_mib {
        run.region_mib = v;
    }
    if a.lcg_period.is_some() {
        run.lcg_period = a.lcg_period;
    }
    if let Some(v) = a.iterations {
        run.iterations = v;
    }
    if let Some(d) = a.device.as_deref() {
        run.device = match d {
            "host" => DeviceKind::Host,
            "simulated" | "sim" => DeviceKind::Simulated,
            other => return usage(format!("unknown device `{other}`")),
        };
    }
    if a.profile.is_some() {
        run.device = DeviceKind::Simulated;
    }
    if let Some(v) = a.lanes {
        run.lane_count = v;
    }
    if a.logic_threads.is_some() {
        run.logic_threads = a.logic_threads;
    }
    if let Some(v) = a.memory_clock {
        run.memory_clock_mhz = v;
    }
    run.deployed_profile |= a.deployed_profile;
    if let Some(v) = a.card_id {
        run.card_id = v;
    }
    if a.out.is_some() {
        run.out = a.out;
    }
    if let Some(s) = g.seed {
        run.seed = s;
    }
    if run.iterations == 0 {
        return usage("--iterations must be at least 1");
    }

    let period = lcg_period(run.region_mib, run.lcg_period, run.deployed_profile)?;
    let config = test_config(period, run.logic_threads)?;
    let region = RegionSpec::from_mib(run.region_mib)?;
    let caps = DeviceCapabilities::new(region)
        .with_lanes(run.lane_count)
        .with_memory_clock(run.memory_clock_mhz);

    let mut device: Box<dyn MemoryDeviceDyn> = match run.device {
        DeviceKind::Host => Box::new(HostBuffer::new(caps)?),
        DeviceKind::Simulated => {
            let profile = match &a.profile {
                Some(p) => profile_from(p)?,
                None => g.config.fault_profile.clone().unwrap_or_default(),
            };
            let mut caps = caps;
            caps.device_name = "simulated".into();
            Box::new(FaultSimDevice::new(caps, profile)?)
        }
    };

    let synthetic = g.seed.is_some();
    let meta = RunMetadata {
        card_id: run.card_id.clone(),
        start_utc: if synthetic { CAMPAIGN_EPOCH_UTC } else { now_utc() },
        ..RunMetadata::default()
    };
    let mut out = run.out.as_deref().map(create).transpose()?;
    let mut cursor = M20Cursor::default();
    let mut totals = TestErrors::default();
    let mut failures = 0u64;
    let mut clock = meta.start_utc;
    for it in 0..run.iterations {
        let (mut record, next) = device.iteration(&config, &meta, cursor, run.seed, it)?;
        cursor = next;
        if !synthetic {
            record.start_utc = clock;
            clock = now_utc().max(clock);
            record.end_utc = clock;
        }
        failures += record.failed as u64;
        for (c, n) in record.errors.iter() {
            totals.set(c, totals.get(c) + n);
        }
        if let Some(w) = out.as_mut() {
            writeln!(w, "{}", format_record(&record))?;
        }
    }
    if let Some(mut w) = out {
        w.flush()?;
    }
    g.say(format!(
        "device={} region_mib={} lcg_period={period} iterations={} failures={failures}",
        match run.device {
            DeviceKind::Host => "host",
            DeviceKind::Simulated => "simulated",
        },
        run.region_mib,
        run.iterations
    ));
    g.say(format!("word errors: {}", totals_line(&totals)));
    Ok(if failures > 0 { 1 } else { 0 })
}

/// Object-safe view of the two device types used by `test`.
trait MemoryDeviceDyn {
    fn iteration(
        &mut self,
        config: &TestConfig,
        meta: &RunMetadata,
        cursor: M20Cursor,
        seed: u64,
        iteration: u64,
    ) -> std::result::Result<(memtestkit::IterationRecord, M20Cursor), DeviceError>;
}

impl<D: MemoryDevice> MemoryDeviceDyn for D {
    fn iteration(
        &mut self,
        config: &TestConfig,
        meta: &RunMetadata,
        cursor: M20Cursor,
        seed: u64,
        iteration: u64,
    ) -> std::result::Result<(memtestkit::IterationRecord, M20Cursor), DeviceError> {
        run_iteration(self, config, meta, cursor, seed, iteration)
    }
}

fn cmd_sweep(g: &Globals, a: SweepArgs) -> Result<u8> {
    if a.device != "simulated" && a.device != "sim" {
        return usage(format!(
            "sweep needs a simulated device; the clocks of `{}` memory cannot be set",
            a.device
        ));
    }
    if a.seeds == 0 {
        return usage("--seeds must be at least 1");
    }
    let base = g.seed.unwrap_or(0);
    let mut plan = SweepPlan::standard((0..a.seeds).map(|i| base + i).collect());
    if let Some(f) = a.frequencies {
        plan.iterations = f.iter().map(|&x| if x == 530 { 10 } else { 20 }).collect();
        plan.frequencies_mhz = f;
    }
    if let Some(n) = a.iterations {
        plan.iterations = vec![n; plan.frequencies_mhz.len()];
    }
    let profile = match &a.profile {
        Some(p) => profile_from(p)?,
        None => g
            .config
            .fault_profile
            .clone()
            .unwrap_or_else(|| FaultProfile::overdrive_only(base)),
    };
    let period = lcg_period(a.region_mib, a.lcg_period, false)?;
    let config = test_config(period, a.logic_threads)?;
    let caps = DeviceCapabilities::new(RegionSpec::from_mib(a.region_mib)?);
    let result = run_sweep(&caps, &profile, &config, &plan)?;
    let table = sweep_table(&result);
    match &a.out {
        Some(p) => write_text(p, &table)?,
        None => print!("{table}"),
    }
    if !g.quiet {
        for code in TestCode::ALL {
            let onset = result.onset_mhz(code).map_or("none".to_string(), |f| format!("{f} MHz"));
            eprintln!("{code}: onset {onset}");
        }
    }
    Ok(0)
}

fn cmd_fleet(g: &Globals, a: FleetArgs) -> Result<u8> {
    let file_cfg = match &a.params {
        Some(p) => Some(Config::load(p)?),
        None => None,
    };
    let pick = |f: fn(&Config) -> Option<&FleetParams>| file_cfg.as_ref().and_then(f).or_else(|| f(&g.config)).cloned();
    let mut fleet: FleetParams = pick(|c| c.fleet.as_ref()).unwrap_or_default();
    let mut campaign: CampaignParams = file_cfg
        .as_ref()
        .and_then(|c| c.campaign.clone())
        .or_else(|| g.config.campaign.clone())
        .unwrap_or_default();
    if let Some(n) = a.cards {
        fleet.n_cards = n;
    }
    if let Some(n) = a.iterations {
        campaign.iterations_per_card = n;
    }
    if let Some(m) = a.mode {
        campaign.mode = m.parse()?;
    }
    if let Some(w) = a.workers {
        campaign.workers = w;
    }
    if let Some(s) = g.seed {
        fleet.seed = s;
        campaign.seed = s;
    }
    campaign.device = fleet.device.clone();
    campaign.iteration_seconds = fleet.iteration_seconds;
    let cards = sample_fleet(&fleet)?;
    let s = write_campaign(&a.out, &cards, &campaign, a.resume)?;
    g.say(format!(
        "cards={} records={} failures={} resumed_records={} out={}",
        s.cards,
        s.records,
        s.failures,
        s.skipped,
        a.out.display()
    ));
    Ok(0)
}

fn stock_table(path: &Option<PathBuf>) -> Result<StockTable> {
    Ok(match path {
        Some(p) => StockTable::load(p)?,
        None => StockTable::builtin(),
    })
}

fn load_inputs(inputs: &[PathBuf]) -> Result<Dataset> {
    if let Some(missing) = inputs.iter().find(|p| !p.exists()) {
        return Err(Failure::Runtime(anyhow::anyhow!("missing input {}", missing.display())));
    }
    Ok(load_many(inputs)?)
}

fn cmd_analyze(g: &Globals, a: AnalyzeArgs) -> Result<u8> {
    let d = load_inputs(&a.inputs)?;
    let cutoffs = if a.cutoffs.is_empty() { DEFAULT_CUTOFFS.to_vec() } else { a.cutoffs.clone() };
    if cutoffs.contains(&0) {
        return usage("cutoffs must be at least 1");
    }
    let stock = stock_table(&a.stock_table)?;
    println!("records={} cards={} failures={}", d.record_count(), d.card_count(), d.failure_count());
    println!("cutoff,cards,cdf_at_zero,failing_median_pfail");
    for &c in &cutoffs {
        let e = memtestkit::card_pfail(&d, c)?;
        if e.is_empty() {
            println!("{c},0,NA,NA");
            continue;
        }
        let cdf0 = memtestkit::empirical_cdf(&e, &[0.0])?[0];
        let med = failing_median(&e).map_or("NA".into(), |m| format!("{m:e}"));
        println!("{c},{},{cdf0:.4},{med}", e.len());
    }
    let min_cut = *cutoffs.iter().min().expect("nonempty");
    if !a.hypotheses.is_empty() {
        println!("hypothesis,cutoff,h_d_bits,i_dv_bits,perfect_gain_bits,fraction_of_perfect,subsets,excluded");
        for h in &a.hypotheses {
            let h: Hypothesis = h.parse()?;
            let r = hypothesis_report(&d, h, min_cut, a.bins, &stock)?;
            let sizes: Vec<String> = r.subset_sizes.iter().map(|(k, v)| format!("{k}:{v}")).collect();
            println!(
                "{},{min_cut},{:.4},{:.4},{:.4},{:.4},{},{}",
                h.as_str(),
                r.h_d,
                r.i_dv,
                r.perfect_indicator_gain,
                r.fraction_of_perfect(),
                sizes.join(" "),
                r.excluded
            );
        }
    }
    if a.mi_matrix {
        print!("{}", mi_table(&test_mi_matrix(&d)));
    }
    if let Some(p) = &a.cdf_out {
        write_text(p, &cdf_table(&d, &cutoffs, &default_cdf_points())?)?;
    }
    if let Some(p) = &a.pmf_out {
        write_text(p, &pmf_table(&d, &cutoffs, &default_pmf_edges())?)?;
    }
    let _ = g;
    Ok(0)
}

fn cmd_coalesce(g: &Globals, a: CoalesceArgs) -> Result<u8> {
    let mappings: Vec<Mapping> = if a.mapping == "all" {
        Mapping::ALL.to_vec()
    } else {
        vec![a.mapping.parse().map_err(|e: memtestkit::CoalesceError| Failure::Usage(e.to_string()))?]
    };
    let scope = match a.scope.as_str() {
        "writes" => TrafficScope::Writes,
        "writes-and-reads" => TrafficScope::WritesAndReads,
        other => return usage(format!("unknown scope `{other}`")),
    };
    let coalesce_err = |e: memtestkit::CoalesceError| Failure::Usage(e.to_string());
    println!("mapping,scope,region_words,g80_transactions,g80_bytes,gt200_transactions,gt200_bytes,byte_ratio,reference");
    for m in &mappings {
        let r = traffic_report(a.region_words, *m, scope).map_err(coalesce_err)?;
        println!(
            "{m},{},{},{},{},{},{},{:.4},{}",
            a.scope,
            a.region_words,
            r.g80.transactions,
            r.g80.bytes,
            r.gt200.transactions,
            r.gt200.bytes,
            r.byte_ratio,
            *m == Mapping::reference()
        );
    }
    if let (Some(round), Some(path)) = (a.trace_round, &a.trace_out) {
        let mut w = create(path)?;
        let mut io: std::io::Result<()> = Ok(());
        let mut group = 0u64;
        for m in &mappings {
            for_each_m20_group(a.region_words, round, *m, &mut |accesses| {
                for acc in accesses {
                    if io.is_ok() {
                        io = writeln!(
                            w,
                            "{}",
                            serde_json::json!({
                                "mapping": m.name(),
                                "group": group,
                                "lane": acc.lane,
                                "byte_address": acc.byte_address,
                                "kind": acc.kind,
                                "active": acc.active,
                            })
                        );
                    }
                }
                group += 1;
            })
            .map_err(coalesce_err)?;
        }
        io?;
        w.flush()?;
        g.say(format!("trace written to {}", path.display()));
    }
    Ok(0)
}

fn cmd_report(g: &Globals, a: ReportArgs) -> Result<u8> {
    let d = load_inputs(&a.inputs)?;
    if d.is_empty() {
        return usage("no cards pass cutoff: the inputs hold no records");
    }
    let cutoffs = if a.cutoffs.is_empty() { DEFAULT_CUTOFFS.to_vec() } else { a.cutoffs.clone() };
    if cutoffs.contains(&0) {
        return usage("cutoffs must be at least 1");
    }
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    let stock = stock_table(&a.stock_table)?;
    write_text(&a.out_dir.join("cdf.csv"), &cdf_table(&d, &cutoffs, &default_cdf_points())?)?;
    write_text(&a.out_dir.join("pmf.csv"), &pmf_table(&d, &cutoffs, &default_pmf_edges())?)?;
    write_text(&a.out_dir.join("mi_matrix.csv"), &mi_table(&test_mi_matrix(&d)))?;
    let min_cut = *cutoffs.iter().min().expect("nonempty");
    let mut hyp = String::from("hypothesis,cutoff,h_d_bits,i_dv_bits,perfect_gain_bits\n");
    for h in Hypothesis::ALL {
        match hypothesis_report(&d, h, min_cut, a.bins, &stock) {
            Ok(r) => hyp.push_str(&format!(
                "{},{min_cut},{:.4},{:.4},{:.4}\n",
                h.as_str(),
                r.h_d,
                r.i_dv,
                r.perfect_indicator_gain
            )),
            Err(e) => log::warn!("hypothesis {}: {e}", h.as_str()),
        }
    }
    write_text(&a.out_dir.join("hypotheses.csv"), &hyp)?;
    if a.sweep {
        let seed = g.seed.unwrap_or(0);
        let plan = SweepPlan::standard(vec![seed]);
        let period = lcg_period(a.sweep_region_mib, None, false)?;
        let caps = DeviceCapabilities::new(RegionSpec::from_mib(a.sweep_region_mib)?);
        let r = run_sweep(&caps, &FaultProfile::overdrive_only(seed), &test_config(period, None)?, &plan)?;
        write_text(&a.out_dir.join("sweep.csv"), &sweep_table(&r))?;
    }
    g.say(format!("tables written to {}", a.out_dir.display()));
    Ok(0)
}
