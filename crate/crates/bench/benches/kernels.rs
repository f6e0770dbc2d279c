use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use memtestkit::fleet::{campaign_records, format_record, parse_record};
use memtestkit::testkit::{run_iteration, run_test, RunMetadata};
use memtestkit::{
    make_cyclic_lcg, mutual_information, test_mi_matrix, traffic_report, CampaignParams, Dataset, DeviceCapabilities,
    FaultProfile, FaultSimDevice, FleetParams, HostBuffer, M20Cursor, Mapping, MemoryDevice, RegionSpec, TestCode,
    TestConfig, TrafficScope,
};

const REGION_MIB: u32 = 4;

fn host(mib: u32) -> HostBuffer {
    HostBuffer::new(DeviceCapabilities::new(RegionSpec::from_mib(mib).unwrap())).unwrap()
}

fn patterns(c: &mut Criterion) {
    let lcg = make_cyclic_lcg(1024).unwrap();
    let mut g = c.benchmark_group("patterns");
    g.throughput(Throughput::Elements(1024));
    g.bench_function("lcg_orbit_1024", |b| b.iter(|| black_box(lcg.orbit())));
    g.bench_function("lcg_jump", |b| b.iter(|| black_box(lcg.advance(black_box(12345), black_box(1 << 40)))));
    g.finish();
}

fn host_kernels(c: &mut Criterion) {
    let mut dev = host(REGION_MIB);
    let words = dev.word_count();
    let config = TestConfig::new(256).unwrap();
    let cursor = M20Cursor::new(0).unwrap();
    let mut g = c.benchmark_group("host");
    g.throughput(Throughput::Bytes(words as u64 * 4));
    g.bench_function("fill", |b| b.iter(|| dev.fill(black_box(0xA5A5_A5A5)).unwrap()));
    g.bench_function("count_mismatches", |b| b.iter(|| black_box(dev.count_mismatches(0, words, 0xA5A5_A5A5).unwrap())));
    for code in [TestCode::MI10, TestCode::W1M, TestCode::RB, TestCode::M20, TestCode::L] {
        g.bench_function(format!("test_{}", code.as_str()), |b| {
            b.iter(|| black_box(run_test(&mut dev, code, &config, cursor, 1, 0).unwrap()))
        });
    }
    g.finish();
}

fn simulated_iteration(c: &mut Criterion) {
    let caps = DeviceCapabilities::new(RegionSpec::from_mib(REGION_MIB).unwrap());
    let config = TestConfig::new(256).unwrap().with_logic_threads(1024);
    let meta = RunMetadata::default();
    let mut g = c.benchmark_group("faultsim");
    g.sample_size(10);
    for (name, profile) in [("null", FaultProfile::null()), ("overdrive", FaultProfile::overdrive_only(1))] {
        let mut dev = FaultSimDevice::new(caps.clone().with_memory_clock(530), profile).unwrap();
        let mut iteration = 0;
        g.bench_function(format!("iteration_{name}"), |b| {
            b.iter(|| {
                iteration += 1;
                black_box(run_iteration(&mut dev, &config, &meta, M20Cursor::new(0).unwrap(), 1, iteration).unwrap())
            })
        });
    }
    g.finish();
}

fn coalescing(c: &mut Criterion) {
    let mut g = c.benchmark_group("coalesce");
    g.bench_function("traffic_report_64k_words", |b| {
        b.iter(|| black_box(traffic_report(65536, Mapping::ThreadPerWord, TrafficScope::WritesAndReads).unwrap()))
    });
    g.finish();
}

fn analytics(c: &mut Criterion) {
    let fleet = memtestkit::sample_fleet(&FleetParams {
        n_cards: 200,
        mode_pfail: 2e-3,
        seed: 4,
        ..FleetParams::default()
    })
    .unwrap();
    let params = CampaignParams {
        iterations_per_card: 500,
        seed: 4,
        ..CampaignParams::default()
    };
    let records = campaign_records(&fleet, &params).unwrap();
    let lines: Vec<String> = records.iter().take(1000).map(format_record).collect();
    let joint: Vec<Vec<f64>> = (0..64).map(|i| (0..64).map(|j| ((i * 7 + j * 13) % 17) as f64 + 1.0).collect()).collect();

    let mut g = c.benchmark_group("analytics");
    g.bench_function("campaign_bernoulli_200x500", |b| b.iter(|| black_box(campaign_records(&fleet, &params).unwrap())));
    g.throughput(Throughput::Elements(lines.len() as u64));
    g.bench_function("parse_records", |b| {
        b.iter(|| {
            for (i, l) in lines.iter().enumerate() {
                black_box(parse_record(l, i + 1).unwrap());
            }
        })
    });
    g.throughput(Throughput::Elements(records.len() as u64));
    g.bench_function("mi_matrix", |b| {
        let d = Dataset::from_records(&records).unwrap();
        b.iter(|| black_box(test_mi_matrix(&d)))
    });
    g.throughput(Throughput::Elements(64 * 64));
    g.bench_function("mutual_information_64x64", |b| b.iter(|| black_box(mutual_information(&joint))));
    g.finish();
}

criterion_group!(benches, patterns, host_kernels, simulated_iteration, coalescing, analytics);
criterion_main!(benches);
