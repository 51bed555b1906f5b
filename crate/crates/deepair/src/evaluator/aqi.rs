//! Pollutant concentration banding into air quality levels. The breakpoint
//! values ship as a data file rather than constants so a different banding
//! can be swapped in without a rebuild; the file records its own source.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AqiLevelTable {
    source: String,
    levels: usize,
    breakpoints: BTreeMap<String, Vec<f64>>,
}

impl AqiLevelTable {
    /// The table shipped with the crate.
    pub fn bundled() -> Self {
        let table: AqiLevelTable =
            serde_json::from_str(include_str!("../../data/aqi_levels.json"))
                .expect("bundled level table parses");
        table.validate().expect("bundled level table is well formed");
        table
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let table: AqiLevelTable = serde_json::from_str(&fs::read_to_string(path)?)?;
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<()> {
        if self.breakpoints.is_empty() {
            return Err(Error::Schema("level table has no pollutants".into()));
        }
        for (pollutant, bps) in &self.breakpoints {
            if bps.len() + 1 != self.levels {
                return Err(Error::Schema(format!(
                    "{pollutant}: {} breakpoints cannot produce {} levels",
                    bps.len(),
                    self.levels
                )));
            }
            if bps.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Schema(format!(
                    "{pollutant}: breakpoints must be strictly increasing"
                )));
            }
            if bps.iter().any(|b| !b.is_finite()) {
                return Err(Error::Schema(format!("{pollutant}: non-finite breakpoint")));
            }
        }
        Ok(())
    }

    /// 1-based level of a concentration. Intervals are right-open: a value
    /// exactly on a breakpoint belongs to the higher level.
    pub fn level(&self, pollutant: &str, concentration: f64) -> Result<usize> {
        let bps = self
            .breakpoints
            .get(pollutant)
            .ok_or_else(|| Error::PollutantNotInTable(pollutant.to_string()))?;
        Ok(1 + bps.iter().filter(|&&b| concentration >= b).count())
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn pollutants(&self) -> impl Iterator<Item = &str> {
        self.breakpoints.keys().map(|s| s.as_str())
    }
}
