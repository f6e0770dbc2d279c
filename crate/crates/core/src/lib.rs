//! Memory and logic soft-error testing toolkit.
//!
//! Test kernels run against the [`MemoryDevice`] abstraction, backed either by
//! host RAM ([`HostBuffer`]) or by a fault-injecting simulator
//! ([`FaultSimDevice`]). Fleet campaigns produce line-delimited record files
//! that the [`analytics`] module turns into failure-probability
//! distributions, information-gain hypothesis tests and test-pairwise mutual
//! information.

pub mod analytics;
pub mod coalesce;
pub mod config;
pub mod error;
pub mod faultsim;
pub mod fleet;
pub mod memdev;
pub mod patterns;
pub mod rng;
pub mod testkit;

pub use coalesce::{coalesce_g80, coalesce_gt200, trace_m20, traffic_report, Access, AccessKind, AccessTrace, Mapping, TrafficReport, TrafficScope, TransactionStats};
pub use error::{CoalesceError, DataError, DeviceError, PatternError};
pub use faultsim::{FaultEvent, FaultKind, FaultProfile, FaultSimDevice};
pub use memdev::{Architecture, DeviceCapabilities, HostBuffer, MemoryDevice, RegionSpec, Word32, WordAddress};
pub use patterns::{make_cyclic_lcg, CyclicLcgSpec, ParkMiller, WalkingCode};
pub use testkit::{IterationRecord, M20Cursor, TestCode, TestConfig, TestErrors, TestOutcome};
pub use analytics::{card_pfail, empirical_cdf, empirical_pmf, entropy, hypothesis_report, information_gain, load_records, mutual_information, test_mi_matrix, CardEstimate, Dataset, Histogram, Hypothesis, IndicatorPartition};
pub use config::Config;
pub use fleet::{classify_overclock, run_campaign, sample_fleet, CampaignMode, CampaignParams, CardSpec, FleetParams, OverclockStatus, StockTable};
pub use testkit::{run_sweep, sweep_table, SweepPlan, SweepResult};
