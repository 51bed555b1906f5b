//! Forecast quality metrics over prediction records, plus the file formats
//! the pipeline emits: prediction CSVs, report JSON, scatter data, and
//! city-wide forecast maps.

mod aqi;
mod forecast;

pub use aqi::AqiLevelTable;
pub use forecast::{
    citywide_forecast, loo_predictions, write_forecast_dataset, write_heatmap_csv, ForecastMap,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Records with truth below this (in the pollutant's native unit) are
/// excluded from MAPE: the percentage error is undefined at zero and
/// explodes near it.
pub const MAPE_FLOOR: f64 = 1.0;

/// One (station, hour, pollutant) comparison in native concentration units.
/// Records are only ever created for observed truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub station_id: String,
    pub hour: usize,
    pub pollutant: String,
    pub y_true: f64,
    pub y_pred: f64,
}

/// MAPE with its bookkeeping: how many records entered the mean and how
/// many fell below [`MAPE_FLOOR`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    pub percent: f64,
    pub used: usize,
    pub excluded: usize,
}

/// Mean absolute percentage error over the records, in percent.
pub fn mape(records: &[PredictionRecord]) -> Result<Mape> {
    let mut sum = 0.0f64;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for r in records {
        if r.y_true < MAPE_FLOOR {
            excluded += 1;
            continue;
        }
        sum += (r.y_true - r.y_pred).abs() / r.y_true * 100.0;
        used += 1;
    }
    if used == 0 {
        return Err(Error::UndefinedMetric(format!(
            "MAPE over {excluded} records, all below the {MAPE_FLOOR} truth floor"
        )));
    }
    Ok(Mape {
        percent: sum / used as f64,
        used,
        excluded,
    })
}

/// Coefficient of determination: 1 - SS_res / SS_tot, SS_tot about the
/// truth mean.
pub fn r_squared(records: &[PredictionRecord]) -> Result<f64> {
    if records.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "R^2 needs at least 2 records, got {}",
            records.len()
        )));
    }
    let mean = records.iter().map(|r| r.y_true).sum::<f64>() / records.len() as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for r in records {
        ss_res += (r.y_true - r.y_pred).powi(2);
        ss_tot += (r.y_true - mean).powi(2);
    }
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric(
            "R^2 undefined: truth values have zero variance".into(),
        ));
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Percentage of records whose predicted concentration lands in the same
/// level band as the truth.
pub fn level_accuracy(records: &[PredictionRecord], table: &AqiLevelTable) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric(
            "level accuracy over zero records".into(),
        ));
    }
    let mut matches = 0usize;
    for r in records {
        if table.level(&r.pollutant, r.y_true)? == table.level(&r.pollutant, r.y_pred)? {
            matches += 1;
        }
    }
    Ok(matches as f64 / records.len() as f64 * 100.0)
}

/// MAPE restricted to each pollutant. A pollutant whose records all fall
/// below the floor gets `None` rather than failing the whole report.
pub fn per_pollutant_report(records: &[PredictionRecord]) -> BTreeMap<String, Option<Mape>> {
    let mut groups: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.pollutant.clone()).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(pollutant, group)| (pollutant, mape(&group).ok()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mape: f64,
    pub r2: Option<f64>,
    pub level_accuracy: f64,
    pub per_pollutant: BTreeMap<String, Option<f64>>,
    pub excluded_count: usize,
}

/// Builds the standard report. Aggregate MAPE and level accuracy must be
/// defined; R^2 degrades to `None` when the truth has no variance.
pub fn assemble_report(records: &[PredictionRecord], table: &AqiLevelTable) -> Result<EvalReport> {
    let aggregate = mape(records)?;
    let r2 = match r_squared(records) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let level = level_accuracy(records, table)?;
    let per_pollutant = per_pollutant_report(records)
        .into_iter()
        .map(|(p, m)| (p, m.map(|m| m.percent)))
        .collect();
    Ok(EvalReport {
        mape: aggregate.percent,
        r2,
        level_accuracy: level,
        per_pollutant,
        excluded_count: aggregate.excluded,
    })
}

pub fn write_predictions_csv(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["station_id", "hour", "pollutant", "y_true", "y_pred"])?;
    for r in records {
        w.write_record([
            r.station_id.as_str(),
            &r.hour.to_string(),
            r.pollutant.as_str(),
            &r.y_true.to_string(),
            &r.y_pred.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for row in reader.deserialize() {
        records.push(row?);
    }
    Ok(records)
}

pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

/// Scatter data for one pollutant: `y_true,y_pred` rows.
pub fn write_scatter_csv(
    records: &[PredictionRecord],
    pollutant: &str,
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["y_true", "y_pred"])?;
    for r in records.iter().filter(|r| r.pollutant == pollutant) {
        w.write_record([&r.y_true.to_string(), &r.y_pred.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(pollutant: &str, y_true: f64, y_pred: f64) -> PredictionRecord {
        PredictionRecord {
            station_id: "s0".into(),
            hour: 0,
            pollutant: pollutant.into(),
            y_true,
            y_pred,
        }
    }

    #[test]
    fn perfect_predictions_have_zero_mape() {
        let records: Vec<_> = (1..=10).map(|i| rec("PM2.5", i as f64 * 10.0, i as f64 * 10.0)).collect();
        let m = mape(&records).unwrap();
        assert_eq!(m.percent, 0.0);
        assert_eq!(m.used, 10);
        assert_eq!(m.excluded, 0);
    }

    #[test]
    fn single_record_mape_is_the_percentage_error() {
        let m = mape(&[rec("PM2.5", 100.0, 80.0)]).unwrap();
        assert!((m.percent - 20.0).abs() < 1e-12);
    }

    #[test]
    fn mape_is_the_mean_of_percentage_errors() {
        let records = vec![
            rec("PM2.5", 100.0, 90.0),
            rec("PM2.5", 100.0, 80.0),
            rec("PM2.5", 100.0, 70.0),
        ];
        let m = mape(&records).unwrap();
        assert!((m.percent - 20.0).abs() < 1e-12);
    }

    #[test]
    fn near_zero_truth_is_excluded_and_counted() {
        let records = vec![
            rec("PM2.5", 0.5, 100.0),
            rec("PM2.5", 100.0, 90.0),
            rec("PM2.5", 0.0, 3.0),
        ];
        let m = mape(&records).unwrap();
        assert!((m.percent - 10.0).abs() < 1e-12);
        assert_eq!(m.used, 1);
        assert_eq!(m.excluded, 2);
    }

    #[test]
    fn all_excluded_is_undefined() {
        let records = vec![rec("PM2.5", 0.1, 1.0), rec("PM2.5", 0.9, 2.0)];
        assert!(matches!(mape(&records), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn mape_is_scale_invariant() {
        let base: Vec<_> = (1..=20)
            .map(|i| rec("O3", 50.0 + i as f64 * 3.0, 48.0 + i as f64 * 3.1))
            .collect();
        let scaled: Vec<_> = base
            .iter()
            .map(|r| rec("O3", r.y_true * 7.5, r.y_pred * 7.5))
            .collect();
        let a = mape(&base).unwrap().percent;
        let b = mape(&scaled).unwrap().percent;
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn perfect_predictor_r2_is_exactly_one() {
        let records: Vec<_> = (0..50).map(|i| rec("NO2", 10.0 + i as f64, 10.0 + i as f64)).collect();
        assert_eq!(r_squared(&records).unwrap(), 1.0);
    }

    #[test]
    fn mean_predictor_r2_is_zero() {
        let records = vec![
            rec("NO2", 10.0, 20.0),
            rec("NO2", 20.0, 20.0),
            rec("NO2", 30.0, 20.0),
        ];
        assert!(r_squared(&records).unwrap().abs() < 1e-12);
    }

    #[test]
    fn r_squared_matches_a_two_pass_oracle() {
        let records: Vec<_> = (0..100)
            .map(|i| {
                let t = 40.0 + (i as f64 * 0.7).sin() * 25.0;
                let p = t + (i as f64 * 1.3).cos() * 6.0;
                rec("PM10", t, p)
            })
            .collect();
        // Independent two-pass computation.
        let n = records.len() as f64;
        let mean: f64 = records.iter().map(|r| r.y_true).sum::<f64>() / n;
        let ss_res: f64 = records.iter().map(|r| (r.y_true - r.y_pred).powi(2)).sum();
        let ss_tot: f64 = records.iter().map(|r| (r.y_true - mean).powi(2)).sum();
        let want = 1.0 - ss_res / ss_tot;
        assert!((r_squared(&records).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_r2_is_undefined() {
        let records = vec![rec("CO", 5.0, 4.0), rec("CO", 5.0, 6.0)];
        assert!(matches!(r_squared(&records), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn exact_levels_give_full_accuracy() {
        let table = AqiLevelTable::bundled();
        let records: Vec<_> = (0..10).map(|i| rec("PM2.5", 20.0 + i as f64, 20.0 + i as f64)).collect();
        assert_eq!(level_accuracy(&records, &table).unwrap(), 100.0);
    }

    #[test]
    fn crossing_a_breakpoint_counts_as_a_mismatch() {
        let table = AqiLevelTable::bundled();
        let records = vec![rec("PM2.5", 74.9, 75.1)];
        assert_eq!(level_accuracy(&records, &table).unwrap(), 0.0);
    }

    #[test]
    fn eight_of_ten_matching_records_give_eighty_percent() {
        let table = AqiLevelTable::bundled();
        let mut records: Vec<_> = (0..8).map(|i| rec("PM2.5", 10.0 + i as f64, 12.0)).collect();
        records.push(rec("PM2.5", 30.0, 80.0));
        records.push(rec("PM2.5", 80.0, 30.0));
        assert_eq!(level_accuracy(&records, &table).unwrap(), 80.0);
    }

    #[test]
    fn unknown_pollutant_fails_level_accuracy() {
        let table = AqiLevelTable::bundled();
        let records = vec![rec("SO2", 10.0, 10.0)];
        assert!(level_accuracy(&records, &table).is_err());
    }

    #[test]
    fn per_pollutant_rows_match_group_restricted_mape() {
        let records = vec![
            rec("PM2.5", 100.0, 90.0),
            rec("PM2.5", 200.0, 160.0),
            rec("CO", 4.0, 5.0),
            rec("O3", 0.2, 1.0),
        ];
        let table = per_pollutant_report(&records);
        let pm = table["PM2.5"].unwrap();
        assert!((pm.percent - 15.0).abs() < 1e-12);
        let co = table["CO"].unwrap();
        assert!((co.percent - 25.0).abs() < 1e-12);
        assert!(table["O3"].is_none(), "all-excluded pollutant is undefined");
    }

    #[test]
    fn aggregate_mape_is_the_count_weighted_mean_of_pollutant_rows() {
        let records = vec![
            rec("PM2.5", 100.0, 90.0),
            rec("PM2.5", 100.0, 80.0),
            rec("PM2.5", 100.0, 70.0),
            rec("CO", 10.0, 15.0),
        ];
        let total = mape(&records).unwrap();
        let rows = per_pollutant_report(&records);
        let mut weighted = 0.0;
        let mut count = 0usize;
        for row in rows.values().flatten() {
            weighted += row.percent * row.used as f64;
            count += row.used;
        }
        assert!((total.percent - weighted / count as f64).abs() < 1e-9);
    }

    #[test]
    fn report_round_trips_through_csv_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            rec("PM2.5", 100.0, 92.0),
            rec("PM10", 150.0, 120.0),
            rec("CO", 3.0, 2.8),
        ];
        let csv_path = dir.path().join("predictions.csv");
        write_predictions_csv(&records, &csv_path).unwrap();
        let reloaded = read_predictions_csv(&csv_path).unwrap();
        assert_eq!(reloaded, records);

        let table = AqiLevelTable::bundled();
        let report = assemble_report(&records, &table).unwrap();
        let json_path = dir.path().join("report.json");
        write_report_json(&report, &json_path).unwrap();
        let parsed: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn scatter_csv_keeps_only_the_requested_pollutant() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            rec("PM2.5", 10.0, 11.0),
            rec("CO", 3.0, 2.0),
            rec("PM2.5", 20.0, 19.0),
        ];
        let path = dir.path().join("scatter.csv");
        write_scatter_csv(&records, "PM2.5", &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "y_true,y_pred");
        assert_eq!(lines[1], "10,11");
        assert_eq!(lines[2], "20,19");
    }
}
