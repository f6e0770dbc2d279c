//! Configuration files.
//!
//! A configuration file uses the record-file notation: one JSON object per
//! line. Each object names its `section` and carries that section's fields;
//! omitted fields keep their defaults.
//!
//! ```text
//! {"section":"run","region_mib":32,"iterations":100,"device":"simulated"}
//! {"section":"fault_profile","stuck_at":[{"address":7,"mask":1,"stuck_value":1}]}
//! {"section":"fleet","n_cards":3000,"mode_pfail":0.002}
//! {"section":"campaign","iterations_per_card":3000,"mode":"bernoulli"}
//! ```

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::DataError;
use crate::faultsim::FaultProfile;
use crate::fleet::{CampaignParams, FleetParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    #[default]
    Host,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub region_mib: u32,
    /// Generator period; the deployed pairing for the region when absent.
    pub lcg_period: Option<u32>,
    pub iterations: u64,
    pub seed: u64,
    pub device: DeviceKind,
    pub lane_count: usize,
    pub logic_threads: Option<usize>,
    pub memory_clock_mhz: u32,
    /// Require a deployed (region, period) pairing.
    pub deployed_profile: bool,
    pub card_id: String,
    pub out: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            region_mib: 32,
            lcg_period: None,
            iterations: 100,
            seed: 0,
            device: DeviceKind::Host,
            lane_count: 1,
            logic_threads: None,
            memory_clock_mhz: 400,
            deployed_profile: false,
            card_id: "local".into(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub run: Option<RunSection>,
    pub fault_profile: Option<FaultProfile>,
    pub fleet: Option<FleetParams>,
    pub campaign: Option<CampaignParams>,
}

fn section<T: DeserializeOwned>(slot: &mut Option<T>, name: &str, body: Value, line: usize) -> Result<(), DataError> {
    if slot.is_some() {
        return Err(DataError::Parse {
            line,
            message: format!("duplicate `{name}` section"),
        });
    }
    *slot = Some(serde_json::from_value(body).map_err(|e| DataError::Parse {
        line,
        message: format!("section `{name}`: {e}"),
    })?);
    Ok(())
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut c = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(raw).map_err(|e| DataError::Parse {
                line,
                message: e.to_string(),
            })?;
            let Value::Object(mut map) = value else {
                return Err(DataError::Parse {
                    line,
                    message: "expected a JSON object".into(),
                });
            };
            let name = match map.remove("section") {
                Some(Value::String(s)) => s,
                _ => {
                    return Err(DataError::Field {
                        line,
                        field: "section".into(),
                        message: "missing or not a string".into(),
                    })
                }
            };
            let body = Value::Object(map);
            match name.as_str() {
                "run" => section(&mut c.run, &name, body, line)?,
                "fault_profile" => section(&mut c.fault_profile, &name, body, line)?,
                "fleet" => section(&mut c.fleet, &name, body, line)?,
                "campaign" => section(&mut c.campaign, &name, body, line)?,
                other => {
                    return Err(DataError::Field {
                        line,
                        field: "section".into(),
                        message: format!("unknown section `{other}`"),
                    })
                }
            }
        }
        if let Some(p) = &c.fault_profile {
            p.validate()?;
        }
        if let Some(f) = &c.fleet {
            f.validate()?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse() {
        let c = Config::parse(
            "{\"section\":\"run\",\"region_mib\":64,\"device\":\"simulated\"}\n\n\
             {\"section\":\"fault_profile\",\"alu_fault_p\":0.001}\n\
             {\"section\":\"fleet\",\"n_cards\":5}\n",
        )
        .unwrap();
        let run = c.run.unwrap();
        assert_eq!(run.region_mib, 64);
        assert_eq!(run.device, DeviceKind::Simulated);
        assert_eq!(run.iterations, 100);
        assert_eq!(c.fault_profile.unwrap().alu_fault_p, 0.001);
        assert_eq!(c.fleet.unwrap().n_cards, 5);
        assert!(c.campaign.is_none());
    }

    #[test]
    fn bad_sections() {
        assert!(matches!(Config::parse("{\"region_mib\":1}"), Err(DataError::Field { line: 1, .. })));
        assert!(matches!(Config::parse("{\"section\":\"nope\"}"), Err(DataError::Field { .. })));
        assert!(matches!(
            Config::parse("{\"section\":\"run\"}\n{\"section\":\"run\"}"),
            Err(DataError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            Config::parse("{\"section\":\"run\",\"regoin_mib\":1}"),
            Err(DataError::Parse { line: 1, .. })
        ));
        assert!(Config::parse("{\"section\":\"fault_profile\",\"alu_fault_p\":2}").is_err());
    }
}
