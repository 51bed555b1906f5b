//! Leave-one-out station predictions and dense city-wide forecast maps.
//! Both paths share one patch-window + forecast + destandardize pipeline,
//! so a station cell in the city map reproduces the evaluation forecast
//! bit for bit.

use std::collections::HashSet;
use std::path::Path;

use chrono::{DateTime, Utc};
use rayon::prelude::*;

use super::PredictionRecord;
use crate::error::{Error, Result};
use crate::gridstore::{save_dataset, ChannelSchema, GridSpec, UrbanDynamicsMap};
use crate::interp::{Normalization, PreparedData};
use crate::model::{ForecastModel, PatchBuilder, OUTPUTS};

/// Dense next-hour forecast: one concentration plane per pollutant.
#[derive(Debug, Clone)]
pub struct ForecastMap {
    pub spec: GridSpec,
    pub hour: usize,
    pub timestamp: DateTime<Utc>,
    /// Pollutant names in plane order.
    pub pollutants: Vec<String>,
    /// Flattened [pollutant][row][col].
    pub values: Vec<f64>,
}

impl ForecastMap {
    pub fn value(&self, pollutant: usize, row: usize, col: usize) -> f64 {
        self.values[(pollutant * self.spec.rows + row) * self.spec.cols + col]
    }
}

/// Standardized model outputs back to native units, clamped at zero:
/// concentrations cannot be negative.
fn native_forecast(q: &[f32; OUTPUTS], norm: &Normalization, aq: &[usize]) -> [f64; OUTPUTS] {
    let mut out = [0.0f64; OUTPUTS];
    for (i, &c) in aq.iter().enumerate() {
        out[i] = norm.destandardize(c, f64::from(q[i])).max(0.0);
    }
    out
}

/// Leave-one-out forecasts for every (station, target hour) pair with
/// observed truth. Each observed pollutant yields one record; hours where
/// a station reports nothing are skipped. Stations fan out to worker
/// threads; the result is ordered by (hour, station, pollutant).
pub fn loo_predictions(
    model: &dyn ForecastModel,
    prepared: &PreparedData,
    targets: std::ops::Range<usize>,
) -> Result<Vec<PredictionRecord>> {
    let window = model.window_len();
    if !targets.is_empty() {
        if targets.start < window {
            return Err(Error::Model(format!(
                "target hour {} has no room for a {window}-hour input window",
                targets.start
            )));
        }
        if targets.end > prepared.map.hours() {
            return Err(Error::Model(format!(
                "target hours end at {} but the map holds {}",
                targets.end,
                prepared.map.hours()
            )));
        }
    }
    let aq = prepared.map.schema.air_quality_indices();

    let mut keyed: Vec<((usize, usize, usize), PredictionRecord)> = prepared
        .stations
        .par_iter()
        .enumerate()
        .map(|(si, station)| -> Result<Vec<_>> {
            let mut worker = model.clone_box();
            let mut builder = PatchBuilder::new(prepared, worker.config().patch)?;
            let cell = (station.row, station.col);
            let mut out = Vec::new();
            for t in targets.clone() {
                let observed: Vec<(usize, usize, f32)> = aq
                    .iter()
                    .enumerate()
                    .filter_map(|(pi, &c)| {
                        prepared.map.get(t, c, cell.0, cell.1).map(|z| (pi, c, z))
                    })
                    .collect();
                if observed.is_empty() {
                    continue;
                }
                let patches = builder.window(&prepared.map, cell, t, window, Some(cell))?;
                let q = worker.forecast_std(&patches)?;
                let pred = native_forecast(&q, &prepared.norm, &aq);
                for (pi, c, z) in observed {
                    out.push((
                        (t, si, pi),
                        PredictionRecord {
                            station_id: station.id.clone(),
                            hour: t,
                            pollutant: prepared.map.schema.name(c).to_string(),
                            y_true: prepared.norm.destandardize(c, f64::from(z)),
                            y_pred: pred[pi],
                        },
                    ));
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    keyed.sort_unstable_by_key(|(key, _)| *key);
    Ok(keyed.into_iter().map(|(_, r)| r).collect())
}

/// Forecast for hour `t` at every grid cell. Cells hosting a station get
/// the same leave-one-out treatment as evaluation; bare cells forecast
/// from the surrounding fill alone. Rows fan out to worker threads.
pub fn citywide_forecast(
    model: &dyn ForecastModel,
    prepared: &PreparedData,
    t: usize,
) -> Result<ForecastMap> {
    let window = model.window_len();
    if t < window {
        return Err(Error::Model(format!(
            "forecast hour {t} has no room for a {window}-hour input window"
        )));
    }
    if t >= prepared.map.hours() {
        return Err(Error::Model(format!(
            "forecast hour {t} outside the map's {} hours",
            prepared.map.hours()
        )));
    }
    let aq = prepared.map.schema.air_quality_indices();
    let stations: HashSet<(usize, usize)> = prepared.station_cells().into_iter().collect();
    let spec = prepared.map.spec;

    let rows: Vec<Vec<[f64; OUTPUTS]>> = (0..spec.rows)
        .into_par_iter()
        .map(|row| -> Result<Vec<[f64; OUTPUTS]>> {
            let mut worker = model.clone_box();
            let mut builder = PatchBuilder::new(prepared, worker.config().patch)?;
            let mut out = Vec::with_capacity(spec.cols);
            for col in 0..spec.cols {
                let cell = (row, col);
                let exclude = stations.contains(&cell).then_some(cell);
                let patches = builder.window(&prepared.map, cell, t, window, exclude)?;
                let q = worker.forecast_std(&patches)?;
                out.push(native_forecast(&q, &prepared.norm, &aq));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut values = vec![0.0f64; OUTPUTS * spec.rows * spec.cols];
    for (row, cells) in rows.iter().enumerate() {
        for (col, cell_values) in cells.iter().enumerate() {
            for (p, v) in cell_values.iter().enumerate() {
                values[(p * spec.rows + row) * spec.cols + col] = *v;
            }
        }
    }
    Ok(ForecastMap {
        spec,
        hour: t,
        timestamp: prepared.map.timestamp(t),
        pollutants: aq
            .iter()
            .map(|&c| prepared.map.schema.name(c).to_string())
            .collect(),
        values,
    })
}

/// Saves the forecast as a one-hour map in the gridstore dataset format,
/// with only the air-quality channels populated.
pub fn write_forecast_dataset(
    forecast: &ForecastMap,
    schema: &ChannelSchema,
    dir: &Path,
) -> Result<()> {
    let mut map = UrbanDynamicsMap::new(forecast.spec, schema.clone(), forecast.timestamp, 1)?;
    for (p, name) in forecast.pollutants.iter().enumerate() {
        let c = schema
            .index_of(name)
            .ok_or_else(|| Error::Schema(format!("pollutant {name} not in schema")))?;
        for row in 0..forecast.spec.rows {
            for col in 0..forecast.spec.cols {
                map.set(0, c, row, col, forecast.value(p, row, col) as f32);
            }
        }
    }
    save_dataset(&map, dir)
}

/// Plot-ready dump: one `pollutant,row,col,value` line per cell and plane.
pub fn write_heatmap_csv(forecast: &ForecastMap, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pollutant", "row", "col", "value"])?;
    for (p, name) in forecast.pollutants.iter().enumerate() {
        for row in 0..forecast.spec.rows {
            for col in 0..forecast.spec.cols {
                w.write_record([
                    name.as_str(),
                    &row.to_string(),
                    &col.to_string(),
                    &forecast.value(p, row, col).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
