//! CSV ingestion, hourly alignment, and rasterization of station records.

use std::collections::BTreeMap;
use std::io::Read;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use super::{floor_to_hour, ChannelSchema, GridSpec, StationObservation, UrbanDynamicsMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    /// 1-based data line number (the header is line 0).
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub observations: Vec<StationObservation>,
    pub rejected: Vec<RejectedRow>,
}

/// Reads `station_id,lat,lon,timestamp,channel,value` records. A value that
/// is empty, `NA`, or unparseable becomes a missing-marker observation; a
/// malformed timestamp or unknown channel rejects the whole row into the
/// report instead of silently dropping it.
pub fn ingest_station_csv<R: Read>(reader: R, schema: &ChannelSchema) -> Result<IngestReport> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let mut report = IngestReport::default();

    for (i, record) in csv_reader.records().enumerate() {
        let line = i + 1;
        let record = record?;
        let reject = |reason: String, report: &mut IngestReport| {
            report.rejected.push(RejectedRow { line, reason });
        };
        if record.len() < 6 {
            reject(format!("expected 6 fields, found {}", record.len()), &mut report);
            continue;
        }
        let station_id = record[0].trim().to_string();
        let (lat, lon) = match (record[1].trim().parse::<f64>(), record[2].trim().parse::<f64>()) {
            (Ok(lat), Ok(lon)) => (lat, lon),
            _ => {
                reject(format!("unparseable coordinates ({}, {})", &record[1], &record[2]), &mut report);
                continue;
            }
        };
        let timestamp = match DateTime::parse_from_rfc3339(record[3].trim()) {
            Ok(ts) => ts.with_timezone(&Utc),
            Err(e) => {
                reject(format!("malformed timestamp {:?}: {e}", &record[3]), &mut report);
                continue;
            }
        };
        let channel = record[4].trim().to_string();
        if schema.index_of(&channel).is_none() {
            reject(format!("unknown channel {channel:?}"), &mut report);
            continue;
        }
        let raw = record[5].trim();
        let value = if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
            None
        } else {
            // An unparseable reading is data corruption in one field, not a
            // malformed row; it degrades to a missing marker.
            raw.parse::<f64>().ok()
        };
        report.observations.push(StationObservation {
            station_id,
            lat,
            lon,
            timestamp,
            channel,
            value,
        });
    }
    Ok(report)
}

/// Collapses one station/channel series to hourly cadence: every wall-clock
/// hour between the first and last record gets one output whose value is the
/// mean of the non-missing inputs falling inside [h, h+1), or a missing
/// marker when there are none.
pub fn align_hourly(obs: &[StationObservation]) -> Vec<StationObservation> {
    if obs.is_empty() {
        return Vec::new();
    }
    debug_assert!(obs
        .iter()
        .all(|o| o.station_id == obs[0].station_id && o.channel == obs[0].channel));
    let first = floor_to_hour(obs.iter().map(|o| o.timestamp).min().unwrap());
    let last = floor_to_hour(obs.iter().map(|o| o.timestamp).max().unwrap());
    let span = ((last - first).num_hours() + 1) as usize;

    let mut sums = vec![0.0f64; span];
    let mut counts = vec![0usize; span];
    for o in obs {
        if let Some(v) = o.value {
            let slot = (floor_to_hour(o.timestamp) - first).num_hours() as usize;
            sums[slot] += v;
            counts[slot] += 1;
        }
    }
    (0..span)
        .map(|slot| StationObservation {
            station_id: obs[0].station_id.clone(),
            lat: obs[0].lat,
            lon: obs[0].lon,
            timestamp: first + Duration::hours(slot as i64),
            channel: obs[0].channel.clone(),
            value: (counts[slot] > 0).then(|| sums[slot] / counts[slot] as f64),
        })
        .collect()
}

/// Groups raw observations by (station, channel) and aligns each series.
pub fn align_all(obs: &[StationObservation]) -> Vec<StationObservation> {
    let mut groups: BTreeMap<(String, String), Vec<StationObservation>> = BTreeMap::new();
    for o in obs {
        groups
            .entry((o.station_id.clone(), o.channel.clone()))
            .or_default()
            .push(o.clone());
    }
    groups.into_values().flat_map(|g| align_hourly(&g)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub row: usize,
    pub col: usize,
}

/// Distinct stations with their grid cells, ordered by id.
pub fn station_cells(obs: &[StationObservation], spec: &GridSpec) -> Result<Vec<Station>> {
    let mut by_id: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for o in obs {
        let cell = spec.cell_of(o.lat, o.lon).ok_or_else(|| Error::OutsideGrid {
            station: o.station_id.clone(),
            lat: o.lat,
            lon: o.lon,
        })?;
        by_id.entry(o.station_id.clone()).or_insert(cell);
    }
    Ok(by_id
        .into_iter()
        .map(|(id, (row, col))| Station { id, row, col })
        .collect())
}

/// Writes hourly observations onto the grid. The result is sparse: the mask
/// is set only at cells that received at least one non-missing reading for
/// the channel-hour, and co-located readings average.
pub fn rasterize(
    obs: &[StationObservation],
    spec: GridSpec,
    schema: ChannelSchema,
) -> Result<UrbanDynamicsMap> {
    let start = floor_to_hour(
        obs.iter()
            .map(|o| o.timestamp)
            .min()
            .unwrap_or_else(|| Utc::now()),
    );
    let hours = if obs.is_empty() {
        1
    } else {
        let last = floor_to_hour(obs.iter().map(|o| o.timestamp).max().unwrap());
        ((last - start).num_hours() + 1) as usize
    };
    let mut map = UrbanDynamicsMap::new(spec, schema, start, hours)?;

    // (flat index) -> (sum, count) so co-located stations average.
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for o in obs {
        let Some(v) = o.value else { continue };
        let (row, col) = map.spec.cell_of(o.lat, o.lon).ok_or_else(|| Error::OutsideGrid {
            station: o.station_id.clone(),
            lat: o.lat,
            lon: o.lon,
        })?;
        let c = map
            .schema
            .index_of(&o.channel)
            .ok_or_else(|| Error::Schema(format!("channel {:?} not in schema", o.channel)))?;
        let t = (floor_to_hour(o.timestamp) - start).num_hours() as usize;
        let e = acc.entry(map.index(t, c, row, col)).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    for (i, (sum, count)) in acc {
        map.values_mut()[i] = (sum / count as f64) as f32;
        map.mask_mut().set(i, true);
    }
    Ok(map)
}
