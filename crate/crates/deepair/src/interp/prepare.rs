//! Dataset preparation: temporal gap filling, correlation gating,
//! per-channel standardization on training statistics, variogram fitting,
//! and auxiliary stamping, bundled into one loadable artifact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::variogram::fit_exponential;
use super::{
    build_fill_policy, correlation_report, empirical_semivariogram, interpolate_temporal,
    CorrelationReport, FillPolicy, Variogram, DEFAULT_CORRELATION_THRESHOLD,
    DEFAULT_MAX_GAP_HOURS,
};
use crate::error::{Error, Result};
use crate::gridstore::{
    chronological_split, load_dataset, save_dataset, ChannelGroup, DatasetSplit, Station,
    UrbanDynamicsMap,
};

pub const PREPARED_FORMAT_VERSION: u32 = 1;
const VARIOGRAM_BINS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub fractions: (f64, f64, f64),
    pub window: usize,
    pub threshold: f64,
    pub max_gap: usize,
    pub utc_offset_hours: i32,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            fractions: (0.8, 0.1, 0.1),
            window: 48,
            threshold: DEFAULT_CORRELATION_THRESHOLD,
            max_gap: DEFAULT_MAX_GAP_HOURS,
            utc_offset_hours: 8,
        }
    }
}

/// Per-channel affine transform fitted on training-segment observations.
/// Auxiliary channels keep (0, 1): their codes are consumed as categories,
/// not magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn standardize(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn destandardize(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    /// Sparse standardized map with temporal interpolation applied and
    /// auxiliary channels stamped; spatial fill happens per patch later.
    pub map: UrbanDynamicsMap,
    pub stations: Vec<Station>,
    pub policy: FillPolicy,
    /// One fitted variogram per kriged channel, None elsewhere.
    pub variograms: Vec<Option<Variogram>>,
    pub norm: Normalization,
    pub report: CorrelationReport,
    pub fractions: (f64, f64, f64),
    pub window: usize,
    pub utc_offset_hours: i32,
    pub max_gap: usize,
    pub threshold: f64,
}

impl PreparedData {
    pub fn split(&self) -> Result<DatasetSplit> {
        chronological_split(self.map.hours(), self.fractions, self.window)
    }

    pub fn station_cells(&self) -> Vec<(usize, usize)> {
        self.stations.iter().map(|s| (s.row, s.col)).collect()
    }
}

pub fn prepare(
    map: &UrbanDynamicsMap,
    stations: &[Station],
    config: &PrepareConfig,
) -> Result<PreparedData> {
    map.schema.validate_canonical_counts()?;
    map.validate_finite()?;
    let split = chronological_split(map.hours(), config.fractions, config.window)?;
    let train_hours = split.train.hours.clone();

    let mut work = map.clone();
    fill_temporal_gaps(&mut work, config.max_gap);

    let cells: Vec<(usize, usize)> = stations.iter().map(|s| (s.row, s.col)).collect();
    let report = correlation_report(&work, &cells, train_hours.clone());
    let policy = build_fill_policy(&report, &work.schema, config.threshold)?;

    let norm = fit_normalization(&work, train_hours.clone());
    let schema = work.schema.clone();
    for c in schema.non_auxiliary_indices() {
        for t in 0..work.hours() {
            for row in 0..work.spec.rows {
                for col in 0..work.spec.cols {
                    if work.is_set(t, c, row, col) {
                        let z = norm.standardize(c, f64::from(work.raw(t, c, row, col)));
                        work.set(t, c, row, col, z as f32);
                    }
                }
            }
        }
    }

    let variograms = fit_channel_variograms(&work, &cells, &policy, train_hours);
    work.stamp_auxiliary(config.utc_offset_hours);

    Ok(PreparedData {
        map: work,
        stations: stations.to_vec(),
        policy,
        variograms,
        norm,
        report,
        fractions: config.fractions,
        window: config.window,
        utc_offset_hours: config.utc_offset_hours,
        max_gap: config.max_gap,
        threshold: config.threshold,
    })
}

/// Linear interpolation along time for every cell series that has at least
/// one observation, channel by channel.
fn fill_temporal_gaps(map: &mut UrbanDynamicsMap, max_gap: usize) {
    let hours = map.hours();
    let schema = map.schema.clone();
    for c in schema.non_auxiliary_indices() {
        for row in 0..map.spec.rows {
            for col in 0..map.spec.cols {
                let series: Vec<Option<f64>> = (0..hours)
                    .map(|t| map.get(t, c, row, col).map(f64::from))
                    .collect();
                if !series.iter().any(Option::is_some) {
                    continue;
                }
                let filled = interpolate_temporal(&series, max_gap);
                for (t, (orig, new)) in series.iter().zip(&filled).enumerate() {
                    if orig.is_none() {
                        if let Some(v) = new {
                            map.set(t, c, row, col, *v as f32);
                        }
                    }
                }
            }
        }
    }
}

fn fit_normalization(map: &UrbanDynamicsMap, train_hours: std::ops::Range<usize>) -> Normalization {
    let n_channels = map.schema.len();
    let mut mean = vec![0.0f64; n_channels];
    let mut std = vec![1.0f64; n_channels];
    for c in 0..n_channels {
        if map.schema.group(c) == ChannelGroup::Auxiliary {
            continue;
        }
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for t in train_hours.clone() {
            for row in 0..map.spec.rows {
                for col in 0..map.spec.cols {
                    if let Some(v) = map.get(t, c, row, col) {
                        sum += f64::from(v);
                        count += 1;
                    }
                }
            }
        }
        if count == 0 {
            continue;
        }
        let mu = sum / count as f64;
        let mut sq = 0.0f64;
        for t in train_hours.clone() {
            for row in 0..map.spec.rows {
                for col in 0..map.spec.cols {
                    if let Some(v) = map.get(t, c, row, col) {
                        let d = f64::from(v) - mu;
                        sq += d * d;
                    }
                }
            }
        }
        let sigma = (sq / count as f64).sqrt();
        mean[c] = mu;
        std[c] = if sigma < 1e-12 { 1.0 } else { sigma };
    }
    Normalization { mean, std }
}

/// One variogram per kriged channel from training-hour station pairs,
/// pooled across hours on the standardized scale. Falls back to a generic
/// model when fewer than 4 distinct cells ever report.
fn fit_channel_variograms(
    map: &UrbanDynamicsMap,
    station_cells: &[(usize, usize)],
    policy: &FillPolicy,
    train_hours: std::ops::Range<usize>,
) -> Vec<Option<Variogram>> {
    let mut cells: Vec<(usize, usize)> = station_cells.to_vec();
    cells.sort_unstable();
    cells.dedup();
    let diagonal_km = map
        .spec
        .cell_distance_km((0, 0), (map.spec.rows.saturating_sub(1), map.spec.cols.saturating_sub(1)));

    let mut out = vec![None; map.schema.len()];
    for c in policy.krige_channels() {
        let mut samples: Vec<(f64, f64)> = Vec::new();
        let mut reporting: Vec<(usize, usize)> = Vec::new();
        for t in train_hours.clone() {
            for (i, &a) in cells.iter().enumerate() {
                let Some(va) = map.get(t, c, a.0, a.1) else { continue };
                if !reporting.contains(&a) {
                    reporting.push(a);
                }
                for &b in &cells[i + 1..] {
                    let Some(vb) = map.get(t, c, b.0, b.1) else { continue };
                    let d = f64::from(va) - f64::from(vb);
                    samples.push((map.spec.cell_distance_km(a, b), 0.5 * d * d));
                }
            }
        }
        let fitted = if reporting.len() >= 4 && !samples.is_empty() {
            fit_exponential(&empirical_semivariogram(&samples, VARIOGRAM_BINS))
        } else {
            None
        };
        let vg = fitted.unwrap_or_else(|| {
            log::warn!(
                "variogram fit unavailable for channel {}; using fallback model",
                map.schema.name(c)
            );
            // Standardized values have unit variance by construction.
            Variogram::fallback(1.0, diagonal_km)
        });
        out[c] = Some(vg);
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct PreparedManifest {
    format_version: u32,
    stations: Vec<Station>,
    policy: FillPolicy,
    variograms: Vec<Option<Variogram>>,
    norm: Normalization,
    report: CorrelationReport,
    fractions: (f64, f64, f64),
    window: usize,
    utc_offset_hours: i32,
    max_gap: usize,
    threshold: f64,
}

/// Writes `prepared.json` plus the standardized map under `dataset/`.
pub fn save_prepared(prepared: &PreparedData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_dataset(&prepared.map, &dir.join("dataset"))?;
    let manifest = PreparedManifest {
        format_version: PREPARED_FORMAT_VERSION,
        stations: prepared.stations.clone(),
        policy: prepared.policy.clone(),
        variograms: prepared.variograms.clone(),
        norm: prepared.norm.clone(),
        report: prepared.report.clone(),
        fractions: prepared.fractions,
        window: prepared.window,
        utc_offset_hours: prepared.utc_offset_hours,
        max_gap: prepared.max_gap,
        threshold: prepared.threshold,
    };
    fs::write(
        dir.join("prepared.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_prepared(dir: &Path) -> Result<PreparedData> {
    let manifest: PreparedManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("prepared.json"))?)?;
    if manifest.format_version != PREPARED_FORMAT_VERSION {
        return Err(Error::DatasetVersion {
            found: manifest.format_version,
            expected: PREPARED_FORMAT_VERSION,
        });
    }
    let map = load_dataset(&dir.join("dataset"))?;
    Ok(PreparedData {
        map,
        stations: manifest.stations,
        policy: manifest.policy,
        variograms: manifest.variograms,
        norm: manifest.norm,
        report: manifest.report,
        fractions: manifest.fractions,
        window: manifest.window,
        utc_offset_hours: manifest.utc_offset_hours,
        max_gap: manifest.max_gap,
        threshold: manifest.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::super::FillMethod;
    use super::*;
    use crate::gridstore::{ChannelSchema, GridSpec, PM25};
    use chrono::{TimeZone, Utc};

    const HOURS: usize = 160;

    fn config() -> PrepareConfig {
        PrepareConfig {
            fractions: (0.8, 0.1, 0.1),
            window: 6,
            threshold: 0.6,
            max_gap: 6,
            utc_offset_hours: 8,
        }
    }

    fn stations() -> Vec<Station> {
        [(1usize, 1usize), (1, 6), (6, 1), (6, 6), (3, 4)]
            .iter()
            .enumerate()
            .map(|(i, &(row, col))| Station {
                id: format!("s{i}"),
                row,
                col,
            })
            .collect()
    }

    /// Stations share a sinusoidal PM2.5 signal with per-station offsets
    /// (strong cross-correlation) while humidity is an alternating pattern
    /// with per-station sign flips (negative mean pairwise correlation).
    fn sample_map() -> UrbanDynamicsMap {
        let spec = GridSpec::new(16, 16, 1.0, (40.0, 116.0)).unwrap();
        let start = Utc.with_ymd_and_hms(2024, 3, 4, 0, 0, 0).unwrap();
        let mut map = UrbanDynamicsMap::new(spec, ChannelSchema::canonical(), start, HOURS).unwrap();
        let schema = map.schema.clone();
        let pm = schema.index_of(PM25).unwrap();
        let hum = schema.index_of("humidity").unwrap();
        for (i, s) in stations().iter().enumerate() {
            for t in 0..HOURS {
                let base = 50.0 + 20.0 * ((t as f32) * 0.3).sin();
                map.set(t, pm, s.row, s.col, base + i as f32 * 3.0);
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                map.set(t, hum, s.row, s.col, 60.0 + sign * ((t % 2) as f32 * 10.0 - 5.0));
                for c in schema.non_auxiliary_indices() {
                    if c != pm && c != hum {
                        map.set(t, c, s.row, s.col, (c as f32) + ((t + i) % 5) as f32);
                    }
                }
            }
        }
        map
    }

    #[test]
    fn standardized_train_observations_have_zero_mean_unit_variance() {
        let prepared = prepare(&sample_map(), &stations(), &config()).unwrap();
        let split = prepared.split().unwrap();
        let pm = prepared.map.schema.index_of(PM25).unwrap();
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        let mut n = 0usize;
        for t in split.train.hours.clone() {
            for s in &prepared.stations {
                let v = f64::from(prepared.map.get(t, pm, s.row, s.col).unwrap());
                sum += v;
                sq += v * v;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    #[test]
    fn normalization_ignores_later_segments() {
        let mut map = sample_map();
        let pm = map.schema.index_of(PM25).unwrap();
        // Poison the test segment with huge values; training stats must not
        // move.
        let clean = prepare(&map, &stations(), &config()).unwrap();
        for t in 150..HOURS {
            map.set(t, pm, 1, 1, 1e6);
        }
        let poisoned = prepare(&map, &stations(), &config()).unwrap();
        assert_eq!(clean.norm.mean[pm], poisoned.norm.mean[pm]);
        assert_eq!(clean.norm.std[pm], poisoned.norm.std[pm]);
    }

    #[test]
    fn destandardize_inverts_standardize() {
        let prepared = prepare(&sample_map(), &stations(), &config()).unwrap();
        let pm = prepared.map.schema.index_of(PM25).unwrap();
        let raw = 73.5;
        let z = prepared.norm.standardize(pm, raw);
        assert!((prepared.norm.destandardize(pm, z) - raw).abs() < 1e-9);
    }

    #[test]
    fn temporal_gaps_become_observations() {
        let mut map = sample_map();
        let pm = map.schema.index_of(PM25).unwrap();
        map.clear(10, pm, 1, 1);
        map.clear(11, pm, 1, 1);
        assert!(!map.is_set(10, pm, 1, 1));
        let prepared = prepare(&map, &stations(), &config()).unwrap();
        assert!(prepared.map.is_set(10, pm, 1, 1));
        assert!(prepared.map.is_set(11, pm, 1, 1));
    }

    #[test]
    fn gating_follows_correlations() {
        let prepared = prepare(&sample_map(), &stations(), &config()).unwrap();
        let pm = prepared.map.schema.index_of(PM25).unwrap();
        let hum = prepared.map.schema.index_of("humidity").unwrap();
        assert_eq!(prepared.policy.method(pm), FillMethod::Krige);
        assert_eq!(prepared.policy.method(hum), FillMethod::ZeroFill);
        let r = prepared.report.get(PM25).unwrap().r.unwrap();
        assert!(r > 0.6, "PM2.5 mean pairwise r = {r}");
    }

    #[test]
    fn variograms_cover_exactly_the_kriged_channels() {
        let prepared = prepare(&sample_map(), &stations(), &config()).unwrap();
        for c in 0..prepared.map.schema.len() {
            let kriged = prepared.policy.method(c) == FillMethod::Krige;
            assert_eq!(prepared.variograms[c].is_some(), kriged, "channel {c}");
        }
    }

    #[test]
    fn auxiliary_channels_are_stamped() {
        let prepared = prepare(&sample_map(), &stations(), &config()).unwrap();
        let dow = prepared.map.schema.day_of_week_index();
        let hour = prepared.map.schema.hour_of_day_index();
        // 2024-03-04 is a Monday; UTC+8 puts hour 0 UTC at 08:00 local.
        assert_eq!(prepared.map.get(0, dow, 0, 0), Some(0.0));
        assert_eq!(prepared.map.get(0, hour, 3, 5), Some(8.0));
        assert_eq!(prepared.map.get(20, hour, 0, 0), Some(4.0));
    }

    #[test]
    fn too_short_dataset_fails_at_split() {
        let spec = GridSpec::new(15, 15, 1.0, (40.0, 116.0)).unwrap();
        let start = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let map = UrbanDynamicsMap::new(spec, ChannelSchema::canonical(), start, 20).unwrap();
        let err = prepare(&map, &stations(), &config()).unwrap_err();
        assert!(matches!(err, Error::TooShortToSplit { .. }));
    }

    #[test]
    fn save_load_round_trip() {
        let prepared = prepare(&sample_map(), &stations(), &config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_prepared(&prepared, dir.path()).unwrap();
        let loaded = load_prepared(dir.path()).unwrap();
        assert_eq!(prepared.map.spec, loaded.map.spec);
        assert_eq!(prepared.map.schema, loaded.map.schema);
        assert_eq!(prepared.map.timestamp(0), loaded.map.timestamp(0));
        assert_eq!(prepared.map.hours(), loaded.map.hours());
        assert!(prepared.map.values() == loaded.map.values(), "values differ");
        assert!(
            prepared.map.mask().as_bytes() == loaded.map.mask().as_bytes(),
            "mask differs"
        );
        assert_eq!(prepared.stations, loaded.stations);
        assert_eq!(prepared.policy, loaded.policy);
        assert_eq!(prepared.variograms, loaded.variograms);
        assert_eq!(prepared.norm, loaded.norm);
        assert_eq!(prepared.report, loaded.report);
        assert_eq!(prepared.fractions, loaded.fractions);
        assert_eq!(prepared.window, loaded.window);
        assert_eq!(prepared.utc_offset_hours, loaded.utc_offset_hours);
        assert_eq!(prepared.max_gap, loaded.max_gap);
        assert_eq!(prepared.threshold, loaded.threshold);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let prepared = prepare(&sample_map(), &stations(), &config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_prepared(&prepared, dir.path()).unwrap();
        let path = dir.path().join("prepared.json");
        let doctored = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&path, doctored).unwrap();
        assert!(matches!(
            load_prepared(dir.path()),
            Err(Error::DatasetVersion { found: 99, .. })
        ));
    }
}
