//! Train/test partitions for the standard and extended operating conditions.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Split};
use crate::error::{Error, Result};

/// Depressions closer than this to a training depression count as the same band.
pub const DEPRESSION_BAND_DEG: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "SOC")]
    Soc,
    #[serde(rename = "EOC-D")]
    EocDepression,
    #[serde(rename = "EOC-C")]
    EocConfiguration,
    #[serde(rename = "EOC-V")]
    EocVersion,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Soc,
        Scenario::EocDepression,
        Scenario::EocConfiguration,
        Scenario::EocVersion,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Scenario::Soc => "SOC",
            Scenario::EocDepression => "EOC-D",
            Scenario::EocConfiguration => "EOC-C",
            Scenario::EocVersion => "EOC-V",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "soc" => Ok(Scenario::Soc),
            "eoc-d" => Ok(Scenario::EocDepression),
            "eoc-c" => Ok(Scenario::EocConfiguration),
            "eoc-v" => Ok(Scenario::EocVersion),
            other => Err(Error::InvalidConfig(format!(
                "unknown scenario '{other}' (expected soc, eoc-d, eoc-c or eoc-v)"
            ))),
        }
    }
}

/// Variant marker embedded in a serial: `<class>-cfg<k>` or `<class>-ver<k>`.
fn serial_kind(serial: &str) -> Option<&'static str> {
    let tail = serial.rsplit('-').next().unwrap_or("");
    if tail.starts_with("cfg") {
        Some("cfg")
    } else if tail.starts_with("ver") {
        Some("ver")
    } else {
        None
    }
}

/// Train is every `train` row. Test rows are chosen per scenario:
/// SOC keeps trained serials within the training depression band, EOC-D
/// keeps trained serials outside it, EOC-C/EOC-V keep untrained
/// configuration/version serials of trained classes.
pub fn make_eoc_splits(dataset: &Dataset, scenario: Scenario) -> Result<(Dataset, Dataset)> {
    let train = dataset.filter(|s| s.meta.split == Split::Train);
    if train.is_empty() {
        return Err(Error::Data(format!("{scenario}: no training samples")));
    }
    let serials: HashSet<&str> = train.samples.iter().map(|s| s.meta.serial.as_str()).collect();
    let classes: HashSet<usize> = train.samples.iter().map(|s| s.label).collect();
    let depressions: Vec<f64> = train.samples.iter().map(|s| s.meta.depression_deg).collect();
    let near = |d: f64| depressions.iter().any(|&t| (t - d).abs() <= DEPRESSION_BAND_DEG);

    let keep = |s: &Sample| -> bool {
        if s.meta.split != Split::Test || !classes.contains(&s.label) {
            return false;
        }
        let seen = serials.contains(s.meta.serial.as_str());
        match scenario {
            Scenario::Soc => seen && near(s.meta.depression_deg),
            Scenario::EocDepression => seen && !near(s.meta.depression_deg),
            Scenario::EocConfiguration => !seen && serial_kind(&s.meta.serial) == Some("cfg"),
            Scenario::EocVersion => !seen && serial_kind(&s.meta.serial) == Some("ver"),
        }
    };
    let test = dataset.filter(keep);
    if test.is_empty() {
        return Err(Error::Data(format!(
            "{scenario}: no test samples satisfy the scenario with this metadata"
        )));
    }
    Ok((train, test))
}
