//! Grid data model: the city grid, the channel schema, station observations,
//! and the dense hourly map they are rasterized into.

mod dataset;
mod ingest;

pub use dataset::{load_dataset, save_dataset, DATASET_FORMAT_VERSION};
pub use ingest::{
    align_all, align_hourly, ingest_station_csv, rasterize, station_cells, IngestReport,
    RejectedRow, Station,
};

use chrono::{DateTime, Datelike, Duration, TimeZone, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kilometers per degree of latitude (spherical mean).
const KM_PER_DEG_LAT: f64 = 110.574;
/// Kilometers per degree of longitude at the equator; scaled by cos(lat).
const KM_PER_DEG_LON: f64 = 111.320;

pub const PATCH_EDGE_MIN: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub cell_km: f64,
    /// Latitude and longitude of the north-west corner of cell (0, 0).
    pub origin: (f64, f64),
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, cell_km: f64, origin: (f64, f64)) -> Result<Self> {
        let spec = GridSpec {
            rows,
            cols,
            cell_km,
            origin,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < PATCH_EDGE_MIN || self.cols < PATCH_EDGE_MIN {
            return Err(Error::Grid(format!(
                "grid {}x{} smaller than the {}x{} patch",
                self.rows, self.cols, PATCH_EDGE_MIN, PATCH_EDGE_MIN
            )));
        }
        if !(self.cell_km > 0.0) {
            return Err(Error::Grid(format!("cell_km must be positive, got {}", self.cell_km)));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Local equirectangular offsets of a point from the origin, in km.
    /// x grows eastward, y grows southward so it runs parallel to row index.
    fn km_offsets(&self, lat: f64, lon: f64) -> (f64, f64) {
        let x = (lon - self.origin.1) * KM_PER_DEG_LON * self.origin.0.to_radians().cos();
        let y = (self.origin.0 - lat) * KM_PER_DEG_LAT;
        (x, y)
    }

    /// Cell containing a point, or None when it falls outside the grid.
    /// Row 0 is the northernmost row, column 0 the westernmost.
    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        let (x, y) = self.km_offsets(lat, lon);
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let col = (x / self.cell_km).floor() as usize;
        let row = (y / self.cell_km).floor() as usize;
        if row < self.rows && col < self.cols {
            Some((row, col))
        } else {
            None
        }
    }

    /// Distance between two cell centers in km. The projection is uniform,
    /// so centers sit on a square lattice with spacing cell_km.
    pub fn cell_distance_km(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let dr = a.0 as f64 - b.0 as f64;
        let dc = a.1 as f64 - b.1 as f64;
        self.cell_km * (dr * dr + dc * dc).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelGroup {
    AirQuality,
    Meteorology,
    Traffic,
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDef {
    pub name: String,
    pub group: ChannelGroup,
    pub unit: String,
    pub categorical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSchema {
    channels: Vec<ChannelDef>,
}

pub const PM25: &str = "PM2.5";
pub const PM10: &str = "PM10";
pub const NO2: &str = "NO2";
pub const CO: &str = "CO";
pub const O3: &str = "O3";

impl ChannelSchema {
    /// The 16-channel layout every pipeline stage assumes: 5 air quality,
    /// 6 meteorology, 3 traffic, then the 2 time-derived auxiliary channels.
    pub fn canonical() -> Self {
        use ChannelGroup::*;
        let def = |name: &str, group, unit: &str, categorical| ChannelDef {
            name: name.to_string(),
            group,
            unit: unit.to_string(),
            categorical,
        };
        ChannelSchema {
            channels: vec![
                def(PM25, AirQuality, "ug/m3", false),
                def(PM10, AirQuality, "ug/m3", false),
                def(NO2, AirQuality, "ug/m3", false),
                def(CO, AirQuality, "mg/m3", false),
                def(O3, AirQuality, "ug/m3", false),
                def("pressure", Meteorology, "hPa", false),
                def("temperature", Meteorology, "degC", false),
                def("wind_direction", Meteorology, "deg", false),
                def("precipitation", Meteorology, "mm", false),
                def("wind_speed", Meteorology, "m/s", false),
                def("humidity", Meteorology, "%", false),
                // Road status is stored as an ordinal code: 0 free, 1 slow,
                // 2 congested.
                def("status", Traffic, "code", true),
                def("speed", Traffic, "km/h", false),
                def("count", Traffic, "vehicles", false),
                def("day_of_week", Auxiliary, "code", true),
                def("hour_of_day", Auxiliary, "code", true),
            ],
        }
    }

    pub fn validate_canonical_counts(&self) -> Result<()> {
        let count = |g: ChannelGroup| self.channels.iter().filter(|c| c.group == g).count();
        let (aq, met, tr, aux) = (
            count(ChannelGroup::AirQuality),
            count(ChannelGroup::Meteorology),
            count(ChannelGroup::Traffic),
            count(ChannelGroup::Auxiliary),
        );
        if (aq, met, tr, aux) != (5, 6, 3, 2) {
            return Err(Error::Schema(format!(
                "expected 5/6/3/2 channels per group, found {aq}/{met}/{tr}/{aux}"
            )));
        }
        let mut names: Vec<&str> = self.channels.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.channels.len() {
            return Err(Error::Schema("duplicate channel names".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channels(&self) -> &[ChannelDef] {
        &self.channels
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.channels[index].name
    }

    pub fn group(&self, index: usize) -> ChannelGroup {
        self.channels[index].group
    }

    pub fn air_quality_indices(&self) -> Vec<usize> {
        self.indices_of_group(ChannelGroup::AirQuality)
    }

    pub fn non_auxiliary_indices(&self) -> Vec<usize> {
        (0..self.channels.len())
            .filter(|&i| self.channels[i].group != ChannelGroup::Auxiliary)
            .collect()
    }

    fn indices_of_group(&self, g: ChannelGroup) -> Vec<usize> {
        (0..self.channels.len())
            .filter(|&i| self.channels[i].group == g)
            .collect()
    }

    pub fn day_of_week_index(&self) -> usize {
        self.index_of("day_of_week").expect("canonical schema")
    }

    pub fn hour_of_day_index(&self) -> usize {
        self.index_of("hour_of_day").expect("canonical schema")
    }

    /// Stable content hash, recorded in checkpoints so a model is never
    /// silently applied to a map with shuffled channels.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for c in &self.channels {
            hasher.update(c.name.as_bytes());
            hasher.update([b'|']);
            hasher.update(format!("{:?}|{}|{}\n", c.group, c.unit, c.categorical).as_bytes());
        }
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One timestamped reading from one station or road segment. A present
/// timestamp with a missing value is still an observation; it marks the
/// station as reporting but the reading as absent.
#[derive(Debug, Clone, PartialEq)]
pub struct StationObservation {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub timestamp: DateTime<Utc>,
    pub channel: String,
    pub value: Option<f64>,
}

/// Presence flags for every map entry, bit-packed LSB first.
#[derive(Debug, Clone, PartialEq)]
pub struct BitMask {
    bits: Vec<u8>,
    len: usize,
}

impl BitMask {
    pub fn new(len: usize) -> Self {
        BitMask {
            bits: vec![0u8; len.div_ceil(8)],
            len,
        }
    }

    pub fn from_bytes(bytes: Vec<u8>, len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::DatasetLength {
                file: "mask.bits".into(),
                expected: len.div_ceil(8) as u64,
                found: bytes.len() as u64,
            });
        }
        Ok(BitMask { bits: bytes, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.bits[i / 8] & (1 << (i % 8)) != 0
    }

    pub fn set(&mut self, i: usize, value: bool) {
        debug_assert!(i < self.len);
        if value {
            self.bits[i / 8] |= 1 << (i % 8);
        } else {
            self.bits[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }
}

/// The city-wide multi-channel grid time series. Values are indexed
/// [time][channel][row][col]; the mask has the same shape. The time axis is
/// strictly hourly; a gap is an unset mask bit, never an absent timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct UrbanDynamicsMap {
    pub spec: GridSpec,
    pub schema: ChannelSchema,
    pub start: DateTime<Utc>,
    hours: usize,
    values: Vec<f32>,
    mask: BitMask,
}

impl UrbanDynamicsMap {
    pub fn new(spec: GridSpec, schema: ChannelSchema, start: DateTime<Utc>, hours: usize) -> Result<Self> {
        spec.validate()?;
        let n = hours * schema.len() * spec.rows * spec.cols;
        Ok(UrbanDynamicsMap {
            spec,
            schema,
            start,
            hours,
            values: vec![0.0; n],
            mask: BitMask::new(n),
        })
    }

    pub fn from_parts(
        spec: GridSpec,
        schema: ChannelSchema,
        start: DateTime<Utc>,
        hours: usize,
        values: Vec<f32>,
        mask: BitMask,
    ) -> Result<Self> {
        let n = hours * schema.len() * spec.rows * spec.cols;
        if values.len() != n {
            return Err(Error::DatasetLength {
                file: "values.f32".into(),
                expected: (n * 4) as u64,
                found: (values.len() * 4) as u64,
            });
        }
        if mask.len() != n {
            return Err(Error::DatasetLength {
                file: "mask.bits".into(),
                expected: n.div_ceil(8) as u64,
                found: mask.len().div_ceil(8) as u64,
            });
        }
        Ok(UrbanDynamicsMap {
            spec,
            schema,
            start,
            hours,
            values,
            mask,
        })
    }

    pub fn hours(&self) -> usize {
        self.hours
    }

    pub fn timestamp(&self, t: usize) -> DateTime<Utc> {
        self.start + Duration::hours(t as i64)
    }

    #[inline]
    pub fn index(&self, t: usize, c: usize, row: usize, col: usize) -> usize {
        debug_assert!(t < self.hours && c < self.schema.len());
        debug_assert!(row < self.spec.rows && col < self.spec.cols);
        ((t * self.schema.len() + c) * self.spec.rows + row) * self.spec.cols + col
    }

    pub fn get(&self, t: usize, c: usize, row: usize, col: usize) -> Option<f32> {
        let i = self.index(t, c, row, col);
        if self.mask.get(i) {
            Some(self.values[i])
        } else {
            None
        }
    }

    /// Raw stored value regardless of presence. Unobserved entries read 0.
    pub fn raw(&self, t: usize, c: usize, row: usize, col: usize) -> f32 {
        self.values[self.index(t, c, row, col)]
    }

    pub fn is_set(&self, t: usize, c: usize, row: usize, col: usize) -> bool {
        self.mask.get(self.index(t, c, row, col))
    }

    pub fn set(&mut self, t: usize, c: usize, row: usize, col: usize, value: f32) {
        let i = self.index(t, c, row, col);
        self.values[i] = value;
        self.mask.set(i, true);
    }

    pub fn clear(&mut self, t: usize, c: usize, row: usize, col: usize) {
        let i = self.index(t, c, row, col);
        self.values[i] = 0.0;
        self.mask.set(i, false);
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn mask(&self) -> &BitMask {
        &self.mask
    }

    pub fn mask_mut(&mut self) -> &mut BitMask {
        &mut self.mask
    }

    /// Every masked entry must hold a finite value.
    pub fn validate_finite(&self) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            if self.mask.get(i) && !v.is_finite() {
                return Err(Error::Grid(format!("non-finite value at flat index {i}")));
            }
        }
        Ok(())
    }

    /// Writes the two time-derived channels for every cell of every hour:
    /// local day of week (0 = Monday) and local hour of day, under a fixed
    /// UTC offset.
    pub fn stamp_auxiliary(&mut self, utc_offset_hours: i32) {
        let dow_c = self.schema.day_of_week_index();
        let hod_c = self.schema.hour_of_day_index();
        for t in 0..self.hours {
            let (dow, hod) = local_time_codes(self.timestamp(t), utc_offset_hours);
            for row in 0..self.spec.rows {
                for col in 0..self.spec.cols {
                    self.set(t, dow_c, row, col, dow as f32);
                    self.set(t, hod_c, row, col, hod as f32);
                }
            }
        }
    }
}

/// Local (day-of-week, hour-of-day) codes for a UTC instant shifted by a
/// fixed offset. Day 0 is Monday.
pub fn local_time_codes(utc: DateTime<Utc>, utc_offset_hours: i32) -> (u32, u32) {
    let local = utc + Duration::hours(utc_offset_hours as i64);
    (local.weekday().num_days_from_monday(), local.hour())
}

/// Truncates a timestamp to the start of its wall-clock hour.
pub fn floor_to_hour(ts: DateTime<Utc>) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(ts.year(), ts.month(), ts.day(), ts.hour(), 0, 0)
        .single()
        .expect("hour truncation is always a valid instant")
}

/// One chronological segment of the hourly axis together with the hours
/// that can serve as forecast targets inside it. A target at hour t needs
/// its full input window [t-window, t) inside the same segment, so targets
/// start `window` hours after the segment does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentView {
    pub hours: std::ops::Range<usize>,
    pub targets: std::ops::Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub fractions: (f64, f64, f64),
    pub window: usize,
    pub train: SegmentView,
    pub validation: SegmentView,
    pub test: SegmentView,
}

/// Splits [0, T) at floor(T*f_tr) and floor(T*(f_tr+f_va)). Input windows
/// never straddle a boundary: hours too early in a segment to be targets
/// still belong to that segment as window history.
pub fn chronological_split(
    hours: usize,
    fractions: (f64, f64, f64),
    window: usize,
) -> Result<DatasetSplit> {
    let (f_tr, f_va, f_te) = fractions;
    if !(f_tr > 0.0 && f_va > 0.0 && f_te > 0.0) || (f_tr + f_va + f_te - 1.0).abs() > 1e-9 {
        return Err(Error::Grid(format!(
            "split fractions must be positive and sum to 1, got ({f_tr}, {f_va}, {f_te})"
        )));
    }
    let fits = |t: usize| -> bool {
        let b1 = (t as f64 * f_tr).floor() as usize;
        let b2 = (t as f64 * (f_tr + f_va)).floor() as usize;
        // Every segment needs at least one full window plus its target.
        b1 >= window + 1 && b2 - b1 >= window + 1 && t - b2 >= window + 1
    };
    if !fits(hours) {
        let mut min_hours = hours + 1;
        while !fits(min_hours) {
            min_hours += 1;
        }
        return Err(Error::TooShortToSplit {
            hours,
            window,
            min_hours,
        });
    }
    let b1 = (hours as f64 * f_tr).floor() as usize;
    let b2 = (hours as f64 * (f_tr + f_va)).floor() as usize;
    Ok(DatasetSplit {
        fractions,
        window,
        train: SegmentView {
            hours: 0..b1,
            targets: window..b1,
        },
        validation: SegmentView {
            hours: b1..b2,
            targets: b1 + window..b2,
        },
        test: SegmentView {
            hours: b2..hours,
            targets: b2 + window..hours,
        },
    })
}
