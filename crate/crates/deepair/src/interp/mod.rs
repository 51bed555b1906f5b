//! Two-step preprocessing: temporal linear interpolation along each station
//! series, then a per-channel choice between ordinary Kriging and zero fill,
//! gated by the mean pairwise Pearson correlation across stations.

mod fill;
mod kriging;
mod prepare;
mod variogram;

pub use fill::{fill_map, CellRect, FillEngine};
pub use kriging::{idw_fill, krige, solve_ordinary_weights, KrigeObs};
pub use prepare::{
    load_prepared, prepare, save_prepared, Normalization, PrepareConfig, PreparedData,
    PREPARED_FORMAT_VERSION,
};
pub use variogram::{empirical_semivariogram, fit_variogram, EmpiricalBin, Variogram};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridstore::{ChannelGroup, ChannelSchema, UrbanDynamicsMap};

pub const DEFAULT_CORRELATION_THRESHOLD: f64 = 0.6;
pub const DEFAULT_MAX_GAP_HOURS: usize = 6;

/// Fills gaps in one hourly series. Interior gaps no longer than `max_gap`
/// are interpolated linearly between their bracketing valid values; leading
/// and trailing runs no longer than `max_gap` take the nearest valid value;
/// anything longer stays missing. Valid entries are never modified.
pub fn interpolate_temporal(series: &[Option<f64>], max_gap: usize) -> Vec<Option<f64>> {
    let mut out = series.to_vec();
    let valid: Vec<usize> = series
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|_| i))
        .collect();
    if valid.is_empty() {
        return out;
    }

    let first = valid[0];
    if first > 0 && first <= max_gap {
        for slot in out.iter_mut().take(first) {
            *slot = series[first];
        }
    }
    let last = *valid.last().unwrap();
    let trailing = series.len() - 1 - last;
    if trailing > 0 && trailing <= max_gap {
        for slot in out.iter_mut().skip(last + 1) {
            *slot = series[last];
        }
    }
    for w in valid.windows(2) {
        let (a, b) = (w[0], w[1]);
        let gap = b - a - 1;
        if gap == 0 || gap > max_gap {
            continue;
        }
        let (va, vb) = (series[a].unwrap(), series[b].unwrap());
        let slope = (vb - va) / (b - a) as f64;
        for i in a + 1..b {
            out[i] = Some(va + slope * (i - a) as f64);
        }
    }
    out
}

/// Pearson correlation over jointly non-missing indices. Returns None when
/// fewer than two joint samples exist or either series has zero variance
/// there; an undefined correlation is not the same thing as zero.
pub fn pearson(x: &[Option<f64>], y: &[Option<f64>]) -> Option<f64> {
    debug_assert_eq!(x.len(), y.len());
    let joint: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .collect();
    if joint.len() < 2 {
        return None;
    }
    let n = joint.len() as f64;
    let mean_x = joint.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = joint.iter().map(|p| p.1).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in &joint {
        let (dx, dy) = (a - mean_x, b - mean_y);
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x <= 0.0 || var_y <= 0.0 {
        return None;
    }
    Some(cov / (var_x * var_y).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelCorrelation {
    pub channel: String,
    /// Mean of the defined pairwise station coefficients; None when no pair
    /// has a defined coefficient.
    pub r: Option<f64>,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub entries: Vec<ChannelCorrelation>,
}

impl CorrelationReport {
    pub fn get(&self, channel: &str) -> Option<&ChannelCorrelation> {
        self.entries.iter().find(|e| e.channel == channel)
    }
}

/// Mean pairwise Pearson coefficient per non-auxiliary channel, computed
/// from the station-cell series over the given hour range (training hours,
/// so gating never sees validation or test data).
pub fn correlation_report(
    map: &UrbanDynamicsMap,
    station_cells: &[(usize, usize)],
    hours: std::ops::Range<usize>,
) -> CorrelationReport {
    let mut cells: Vec<(usize, usize)> = station_cells.to_vec();
    cells.sort_unstable();
    cells.dedup();

    let series = |c: usize, cell: (usize, usize)| -> Vec<Option<f64>> {
        hours
            .clone()
            .map(|t| map.get(t, c, cell.0, cell.1).map(f64::from))
            .collect()
    };

    let mut entries = Vec::new();
    for c in map.schema.non_auxiliary_indices() {
        let station_series: Vec<Vec<Option<f64>>> =
            cells.iter().map(|&cell| series(c, cell)).collect();
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..station_series.len() {
            for j in i + 1..station_series.len() {
                if let Some(r) = pearson(&station_series[i], &station_series[j]) {
                    sum += r;
                    pairs += 1;
                }
            }
        }
        entries.push(ChannelCorrelation {
            channel: map.schema.name(c).to_string(),
            r: (pairs > 0).then(|| sum / pairs as f64),
            pairs,
        });
    }
    CorrelationReport { entries }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMethod {
    Krige,
    ZeroFill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillPolicy {
    pub threshold: f64,
    /// One method per schema channel; auxiliary channels are always
    /// ZeroFill (they are derived from timestamps, never interpolated).
    methods: Vec<FillMethod>,
}

impl FillPolicy {
    pub fn method(&self, channel: usize) -> FillMethod {
        self.methods[channel]
    }

    pub fn krige_channels(&self) -> Vec<usize> {
        (0..self.methods.len())
            .filter(|&c| self.methods[c] == FillMethod::Krige)
            .collect()
    }
}

/// A channel is kriged only when its mean correlation is defined and
/// strictly above the threshold; everything else, including undefined
/// correlations, falls back to zero fill.
pub fn build_fill_policy(
    report: &CorrelationReport,
    schema: &ChannelSchema,
    threshold: f64,
) -> Result<FillPolicy> {
    let mut methods = Vec::with_capacity(schema.len());
    for (c, def) in schema.channels().iter().enumerate() {
        if schema.group(c) == ChannelGroup::Auxiliary {
            methods.push(FillMethod::ZeroFill);
            continue;
        }
        let entry = report
            .get(&def.name)
            .ok_or_else(|| Error::ChannelNotInReport(def.name.clone()))?;
        let krige = matches!(entry.r, Some(r) if r > threshold);
        methods.push(if krige { FillMethod::Krige } else { FillMethod::ZeroFill });
    }
    Ok(FillPolicy { threshold, methods })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(values: &[f64]) -> Vec<Option<f64>> {
        values.iter().copied().map(Some).collect()
    }

    #[test]
    fn interp_fills_midpoint() {
        let filled = interpolate_temporal(&[Some(10.0), None, Some(20.0)], 6);
        assert_eq!(filled, s(&[10.0, 15.0, 20.0]));
    }

    #[test]
    fn interp_leaves_complete_series_alone() {
        let orig = s(&[5.0, 5.0, 5.0]);
        assert_eq!(interpolate_temporal(&orig, 6), orig);
    }

    #[test]
    fn interp_evaluates_the_bracketing_line() {
        // Line through (0, 0) and (3, 30) evaluated at t = 1, 2.
        let filled = interpolate_temporal(&[Some(0.0), None, None, Some(30.0)], 3);
        assert_eq!(filled, s(&[0.0, 10.0, 20.0, 30.0]));
    }

    #[test]
    fn interp_respects_max_gap() {
        let filled = interpolate_temporal(&[Some(0.0), None, None, Some(30.0)], 1);
        assert_eq!(filled, vec![Some(0.0), None, None, Some(30.0)]);
    }

    #[test]
    fn interp_edges_take_nearest_value() {
        let filled = interpolate_temporal(&[None, None, Some(7.0), None], 2);
        assert_eq!(filled, s(&[7.0, 7.0, 7.0, 7.0]));
        // Leading run of 3 exceeds max_gap 2, trailing run of 1 does not.
        let filled = interpolate_temporal(&[None, None, None, Some(7.0), None], 2);
        assert_eq!(filled, vec![None, None, None, Some(7.0), Some(7.0)]);
    }

    #[test]
    fn interp_never_touches_valid_entries() {
        let orig = vec![Some(1.0), None, Some(3.0), None, None, Some(-2.0)];
        let filled = interpolate_temporal(&orig, 6);
        for (o, f) in orig.iter().zip(&filled) {
            if o.is_some() {
                assert_eq!(o, f);
            } else {
                assert!(f.is_some());
            }
        }
    }

    #[test]
    fn pearson_perfect_correlation() {
        assert!((pearson(&s(&[1.0, 2.0, 3.0]), &s(&[1.0, 2.0, 3.0])).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_perfect_anticorrelation() {
        let r = pearson(&s(&[1.0, 2.0, 3.0]), &s(&[3.0, 2.0, 1.0])).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_matches_direct_evaluation() {
        // Hand computation: cov = 14, var_x = 5, var_y = 50,
        // r = 14 / sqrt(250).
        let r = pearson(&s(&[1.0, 2.0, 3.0, 4.0]), &s(&[1.0, 2.0, 3.0, 10.0])).unwrap();
        assert!((r - 0.885_437_744_847_146_4).abs() < 1e-14);
    }

    #[test]
    fn pearson_undefined_cases() {
        assert_eq!(pearson(&s(&[1.0, 1.0, 1.0]), &s(&[1.0, 2.0, 3.0])), None);
        assert_eq!(pearson(&s(&[1.0]), &s(&[2.0])), None);
        let x = vec![Some(1.0), None, Some(3.0)];
        let y = vec![None, Some(2.0), Some(1.0)];
        // Only one joint index.
        assert_eq!(pearson(&x, &y), None);
    }

    #[test]
    fn pearson_only_uses_joint_indices() {
        let x = vec![Some(1.0), None, Some(2.0), Some(3.0)];
        let y = vec![Some(9.0), Some(5.0), Some(2.0), Some(3.0)];
        let r = pearson(&x, &y).unwrap();
        let direct = pearson(&s(&[1.0, 2.0, 3.0]), &s(&[9.0, 2.0, 3.0])).unwrap();
        assert_eq!(r, direct);
    }

    fn report_from(pairs: &[(&str, Option<f64>)]) -> CorrelationReport {
        CorrelationReport {
            entries: pairs
                .iter()
                .map(|(name, r)| ChannelCorrelation {
                    channel: name.to_string(),
                    r: *r,
                    pairs: 3,
                })
                .collect(),
        }
    }

    fn full_report(values: &[(&str, f64)]) -> CorrelationReport {
        report_from(&values.iter().map(|(n, r)| (*n, Some(*r))).collect::<Vec<_>>())
    }

    #[test]
    fn policy_splits_reference_coefficients() {
        // The reference coefficient set: eight channels above 0.6 get
        // kriged, the remaining six fall back to zero fill.
        let schema = ChannelSchema::canonical();
        let report = full_report(&[
            ("PM2.5", 0.84),
            ("PM10", 0.76),
            ("NO2", 0.67),
            ("CO", 0.70),
            ("O3", 0.88),
            ("pressure", 0.99),
            ("temperature", 0.98),
            ("wind_direction", 0.91),
            ("precipitation", 0.25),
            ("wind_speed", 0.56),
            ("humidity", 0.19),
            ("status", 0.31),
            ("speed", 0.43),
            ("count", 0.24),
        ]);
        let policy = build_fill_policy(&report, &schema, 0.6).unwrap();
        let krige: Vec<&str> = policy
            .krige_channels()
            .into_iter()
            .map(|c| schema.name(c))
            .collect();
        assert_eq!(
            krige,
            vec!["PM2.5", "PM10", "NO2", "CO", "O3", "pressure", "temperature", "wind_direction"]
        );
        for name in ["status", "speed", "count", "precipitation", "wind_speed", "humidity"] {
            let c = schema.index_of(name).unwrap();
            assert_eq!(policy.method(c), FillMethod::ZeroFill);
        }
    }

    #[test]
    fn policy_threshold_is_strict() {
        let schema = ChannelSchema::canonical();
        let names: Vec<&str> = schema.channels()[..14].iter().map(|c| c.name.as_str()).collect();
        let report = full_report(&names.iter().map(|n| (*n, 0.6)).collect::<Vec<_>>());
        let policy = build_fill_policy(&report, &schema, 0.6).unwrap();
        assert!(policy.krige_channels().is_empty());
    }

    #[test]
    fn policy_treats_undefined_as_zero_fill() {
        let schema = ChannelSchema::canonical();
        let mut pairs: Vec<(&str, Option<f64>)> = schema.channels()[..14]
            .iter()
            .map(|c| (c.name.as_str(), Some(0.9)))
            .collect();
        pairs[0].1 = None;
        let report = report_from(&pairs);
        let policy = build_fill_policy(&report, &schema, 0.6).unwrap();
        assert_eq!(policy.method(0), FillMethod::ZeroFill);
        assert_eq!(policy.method(1), FillMethod::Krige);
    }

    #[test]
    fn policy_requires_every_channel() {
        let schema = ChannelSchema::canonical();
        let report = full_report(&[("PM2.5", 0.9)]);
        assert!(matches!(
            build_fill_policy(&report, &schema, 0.6),
            Err(Error::ChannelNotInReport(_))
        ));
    }
}
