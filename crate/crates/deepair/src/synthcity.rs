//! Synthetic city generator: a ground-truth pollution field driven by an
//! explicit advection-diffusion scheme, plus coupled meteorology, traffic,
//! and secondary-pollutant channels, sampled at a set of virtual stations.
//!
//! The generator exists so the full pipeline can be exercised end to end
//! with a known answer: the dense truth map says what every cell really
//! did, while the sparse observed map (optionally degraded by
//! [`plant_missingness`]) is what ingestion and interpolation get to see.

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridstore::{
    local_time_codes, ChannelSchema, GridSpec, Station, UrbanDynamicsMap, CO, NO2, O3, PM10, PM25,
};

/// Explicit-scheme stability limit for `4*diffusion + 2*wind_scale`.
///
/// The diffusion term moves at most `4*D` of a cell's excess per step and
/// upwind advection at most `|vx| + |vy| <= 2*wind_scale`, so keeping the
/// sum at or under 0.5 keeps the update a convex-ish blend that cannot
/// oscillate or go negative on its own.
pub const STABILITY_BOUND: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub hours: usize,
    pub stations: usize,
    pub seed: u64,
    /// Diffusion coefficient D in cell^2 per hour.
    pub diffusion: f64,
    /// Wind components are squashed into `[-wind_scale, wind_scale]` cells
    /// per hour.
    pub wind_scale: f64,
    /// First-order removal rate per hour. Without it a closed domain with
    /// positive emission grows without bound, which makes every forecaster
    /// look like a trend extrapolator.
    pub decay: f64,
    /// Standard deviation of the per-cell process noise added each step.
    pub noise_sd: f64,
    /// Row-major emission strength map, `rows * cols` long. `None` places
    /// a few Gaussian source blobs at seeded locations.
    pub emission: Option<Vec<f64>>,
    /// Fraction of observed slots to knock out when the caller plants
    /// missingness; `simulate` itself never applies it.
    pub missing_rate: f64,
    /// Mean length in hours of each planted missing burst.
    pub missing_burst: f64,
    pub utc_offset_hours: i32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rows: 20,
            cols: 20,
            hours: 2160,
            stations: 25,
            seed: 0,
            diffusion: 0.05,
            wind_scale: 0.1,
            decay: 0.06,
            noise_sd: 0.4,
            emission: None,
            missing_rate: 0.05,
            missing_burst: 3.0,
            utc_offset_hours: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hours == 0 {
            return Err(Error::Synth("hours must be at least 1".into()));
        }
        if self.stations == 0 {
            return Err(Error::Synth("stations must be at least 1".into()));
        }
        if self.stations > self.rows * self.cols {
            return Err(Error::Synth(format!(
                "{} stations cannot fit a {}x{} grid",
                self.stations, self.rows, self.cols
            )));
        }
        for (name, v) in [
            ("diffusion", self.diffusion),
            ("wind_scale", self.wind_scale),
            ("noise_sd", self.noise_sd),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Synth(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.decay.is_finite() || !(0.0..1.0).contains(&self.decay) {
            return Err(Error::Synth(format!(
                "decay must lie in [0, 1), got {}",
                self.decay
            )));
        }
        let value = 4.0 * self.diffusion + 2.0 * self.wind_scale;
        if value > STABILITY_BOUND {
            return Err(Error::UnstableConfig { value });
        }
        if let Some(map) = &self.emission {
            if map.len() != self.rows * self.cols {
                return Err(Error::Synth(format!(
                    "emission map has {} entries, grid needs {}",
                    map.len(),
                    self.rows * self.cols
                )));
            }
            if map.iter().any(|&s| !s.is_finite() || s < 0.0) {
                return Err(Error::Synth(
                    "emission strengths must be finite and >= 0".into(),
                ));
            }
        }
        if !self.missing_rate.is_finite() || !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Synth(format!(
                "missing_rate must lie in [0, 1), got {}",
                self.missing_rate
            )));
        }
        if !self.missing_burst.is_finite() || self.missing_burst < 1.0 {
            return Err(Error::Synth(format!(
                "missing_burst must be >= 1, got {}",
                self.missing_burst
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    /// Every channel at every cell and hour.
    pub truth: UrbanDynamicsMap,
    /// Non-auxiliary channels at station cells only; auxiliary channels are
    /// left for the preprocessing stage to stamp.
    pub observed: UrbanDynamicsMap,
    pub stations: Vec<Station>,
}

/// All synthetic datasets start at the same instant so reruns of the same
/// config are byte-comparable.
pub fn start_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

/// Citywide driver series, one value per hour. The wind pair is shared
/// between the advection step and the wind channels so what the stations
/// report about wind is also what actually moved the plume.
struct Drivers {
    wx: Vec<f64>,
    wy: Vec<f64>,
    pressure: Vec<f64>,
    temp_anom: Vec<f64>,
    humid_anom: Vec<f64>,
    precip: Vec<f64>,
    dust: Vec<f64>,
    /// Slow synoptic modulation of emission strength, in (0.2, 1.8).
    synoptic: Vec<f64>,
}

fn ar1_series(rng: &mut ChaCha8Rng, normal: &Normal<f64>, hours: usize, rho: f64, sd: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(hours);
    let mut x = 0.0f64;
    for _ in 0..hours {
        x = rho * x + sd * normal.sample(rng);
        out.push(x);
    }
    out
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Morning and evening rush hour bumps on the local clock, in [0, 1].
fn rush(hour_local: u32) -> f64 {
    let h = hour_local as f64;
    let bump = |peak: f64| (-(h - peak).powi(2) / (2.0 * 2.5f64.powi(2))).exp();
    (bump(8.0) + bump(18.0)).min(1.0)
}

/// Daylight intensity in [0, 1], zero overnight.
fn daylight(hour_local: u32) -> f64 {
    let h = hour_local as f64;
    if (6.0..=20.0).contains(&h) {
        (std::f64::consts::PI * (h - 6.0) / 14.0).sin().max(0.0)
    } else {
        0.0
    }
}

fn build_drivers(config: &SynthConfig, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> Drivers {
    let hours = config.hours;
    let wx_raw = ar1_series(rng, normal, hours, 0.95, 0.25);
    let wy_raw = ar1_series(rng, normal, hours, 0.95, 0.25);
    let squash = |raw: Vec<f64>| -> Vec<f64> {
        raw.into_iter().map(|x| config.wind_scale * x.tanh()).collect()
    };
    let pressure = ar1_series(rng, normal, hours, 0.98, 0.6);
    let temp_anom = ar1_series(rng, normal, hours, 0.97, 0.4);
    let humid_anom = ar1_series(rng, normal, hours, 0.95, 0.8);
    let precip_latent = ar1_series(rng, normal, hours, 0.90, 0.5);
    let dust = ar1_series(rng, normal, hours, 0.98, 0.3);
    let synoptic_raw = ar1_series(rng, normal, hours, 0.985, 0.5);
    Drivers {
        wx: squash(wx_raw),
        wy: squash(wy_raw),
        pressure,
        temp_anom,
        humid_anom,
        precip: precip_latent
            .into_iter()
            .map(|x| (x - 1.0).max(0.0) * 3.0)
            .collect(),
        dust,
        synoptic: synoptic_raw
            .into_iter()
            .map(|x| 0.55 + 0.9 * logistic(x))
            .collect(),
    }
}

/// A few Gaussian source blobs at seeded positions over a uniform urban
/// background. The background matters: it carries the citywide synoptic
/// modulation to every cell, which is what keeps distant station pairs
/// correlated enough for the spatial-fill gate.
fn default_emission(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut map = vec![2.0f64; rows * cols];
    for _ in 0..3 {
        let cr = rng.gen_range(0.0..rows as f64);
        let cc = rng.gen_range(0.0..cols as f64);
        let sigma = rng.gen_range(1.8..3.2);
        let amp = rng.gen_range(4.0..8.0);
        for r in 0..rows {
            for c in 0..cols {
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                map[r * cols + c] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    map
}

/// One explicit step of `C += D*lap(C) - v.grad(C) + S*m - decay*C + noise`.
///
/// Diffusion is applied as face fluxes so the zero-flux boundary conserves
/// total mass to rounding error; advection uses first-order upwind
/// differences with a zero-gradient ghost cell at the inflow edge.
#[allow(clippy::too_many_arguments)]
fn step_field(
    field: &mut [f64],
    delta: &mut [f64],
    rows: usize,
    cols: usize,
    d: f64,
    vx: f64,
    vy: f64,
    source: impl Fn(usize) -> f64,
    decay: f64,
    noise: impl FnMut() -> f64,
) {
    let idx = |r: usize, c: usize| r * cols + c;
    delta.fill(0.0);
    if d > 0.0 {
        for r in 0..rows {
            for c in 0..cols - 1 {
                let f = d * (field[idx(r, c + 1)] - field[idx(r, c)]);
                delta[idx(r, c)] += f;
                delta[idx(r, c + 1)] -= f;
            }
        }
        for r in 0..rows - 1 {
            for c in 0..cols {
                let f = d * (field[idx(r + 1, c)] - field[idx(r, c)]);
                delta[idx(r, c)] += f;
                delta[idx(r + 1, c)] -= f;
            }
        }
    }
    if vx > 0.0 {
        for r in 0..rows {
            for c in 1..cols {
                delta[idx(r, c)] -= vx * (field[idx(r, c)] - field[idx(r, c - 1)]);
            }
        }
    } else if vx < 0.0 {
        for r in 0..rows {
            for c in 0..cols - 1 {
                delta[idx(r, c)] -= vx * (field[idx(r, c + 1)] - field[idx(r, c)]);
            }
        }
    }
    if vy > 0.0 {
        for r in 1..rows {
            for c in 0..cols {
                delta[idx(r, c)] -= vy * (field[idx(r, c)] - field[idx(r - 1, c)]);
            }
        }
    } else if vy < 0.0 {
        for r in 0..rows - 1 {
            for c in 0..cols {
                delta[idx(r, c)] -= vy * (field[idx(r + 1, c)] - field[idx(r, c)]);
            }
        }
    }
    let mut noise = noise;
    for i in 0..rows * cols {
        let next = field[i] + delta[i] + source(i) - decay * field[i] + noise();
        field[i] = next.max(0.0);
    }
}

/// Generates the dense truth map and the matching station-only observed map.
pub fn simulate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let spec = GridSpec::new(config.rows, config.cols, 1.0, (39.5, 116.0))?;
    let schema = ChannelSchema::canonical();
    let mut truth = UrbanDynamicsMap::new(spec, schema.clone(), start_time(), config.hours)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rows = config.rows;
    let cols = config.cols;
    let n = rows * cols;

    let mut cell_order: Vec<usize> = (0..n).collect();
    cell_order.shuffle(&mut rng);
    let mut station_cells: Vec<(usize, usize)> = cell_order[..config.stations]
        .iter()
        .map(|&i| (i / cols, i % cols))
        .collect();
    station_cells.sort_unstable();
    let stations: Vec<Station> = station_cells
        .iter()
        .enumerate()
        .map(|(i, &(row, col))| Station {
            id: format!("s{i:02}"),
            row,
            col,
        })
        .collect();

    let road: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let emission = match &config.emission {
        Some(map) => map.clone(),
        None => default_emission(rows, cols, &mut rng),
    };
    let drivers = build_drivers(config, &mut rng, &normal);

    // Start near the per-cell steady state of the source/decay balance so
    // the record is statistically uniform instead of one long transient.
    let steady = 0.55 / config.decay.max(0.01);
    let mut field: Vec<f64> = (0..n)
        .map(|i| (emission[i] * steady + 2.0 * normal.sample(&mut rng)).max(1.0))
        .collect();
    let mut delta = vec![0.0f64; n];

    let ch = |name: &str| schema.index_of(name).expect("canonical channel");
    let (c_pm25, c_pm10, c_no2, c_co, c_o3) = (ch(PM25), ch(PM10), ch(NO2), ch(CO), ch(O3));
    let c_pressure = ch("pressure");
    let c_temperature = ch("temperature");
    let c_wind_dir = ch("wind_direction");
    let c_precip = ch("precipitation");
    let c_wind_speed = ch("wind_speed");
    let c_humidity = ch("humidity");
    let c_status = ch("status");
    let c_speed = ch("speed");
    let c_count = ch("count");

    for t in 0..config.hours {
        let (_, hod) = local_time_codes(truth.timestamp(t), config.utc_offset_hours);
        let rush_t = rush(hod);
        let light_t = daylight(hod);
        let temp_base = 13.0 + 9.0 * (std::f64::consts::TAU * (hod as f64 - 9.0) / 24.0).sin()
            + 3.0 * drivers.temp_anom[t];
        let wind_mag = drivers.wx[t].hypot(drivers.wy[t]);
        let speed_base = if config.wind_scale > 0.0 {
            1.0 + 4.0 * wind_mag / config.wind_scale
        } else {
            1.0
        };
        let dir_base = drivers.wy[t].atan2(drivers.wx[t]).to_degrees().rem_euclid(360.0);

        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                let mut eps = || normal.sample(&mut rng);
                let pm25 = field[i];
                truth.set(t, c_pm25, r, c, pm25 as f32);

                let score = (road[i] * (0.25 + 0.75 * rush_t) + 0.04 * eps()).clamp(0.0, 1.0);
                let pm10 = (1.55 * pm25 + 6.0 + 10.0 * drivers.dust[t].max(0.0) + 0.8 * eps()).max(0.0);
                let no2 = (14.0 + 0.30 * pm25 + 20.0 * score + 1.2 * eps()).max(0.0);
                let co = (0.35 + 0.010 * pm25 + 1.1 * score + 0.05 * eps()).max(0.01);
                let o3 = (15.0 + 60.0 * light_t - 0.22 * no2 + 3.0 * drivers.temp_anom[t]
                    + 1.5 * eps())
                .max(1.0);
                truth.set(t, c_pm10, r, c, pm10 as f32);
                truth.set(t, c_no2, r, c, no2 as f32);
                truth.set(t, c_co, r, c, co as f32);
                truth.set(t, c_o3, r, c, o3 as f32);

                let temp = temp_base + 0.3 * eps();
                truth.set(t, c_pressure, r, c, (1013.0 + 8.0 * drivers.pressure[t] + 0.2 * eps()) as f32);
                truth.set(t, c_temperature, r, c, temp as f32);
                truth.set(t, c_wind_dir, r, c, ((dir_base + 1.0 * eps()).rem_euclid(360.0)) as f32);
                truth.set(t, c_precip, r, c, (drivers.precip[t] * (1.0 + 0.3 * eps())).max(0.0) as f32);
                truth.set(t, c_wind_speed, r, c, (speed_base + 0.9 * eps()).max(0.0) as f32);
                truth.set(
                    t,
                    c_humidity,
                    r,
                    c,
                    (62.0 - 1.6 * (temp - 13.0) + 6.0 * drivers.humid_anom[t] + 2.5 * eps())
                        .clamp(5.0, 100.0) as f32,
                );

                truth.set(t, c_status, r, c, (score * 2.999).floor() as f32);
                truth.set(t, c_speed, r, c, (62.0 - 42.0 * score + 1.5 * eps()).max(3.0) as f32);
                truth.set(t, c_count, r, c, (30.0 + 220.0 * score * road[i] + 6.0 * eps()).max(0.0) as f32);
            }
        }

        if t + 1 < config.hours {
            let modulation = (0.15 + 0.85 * rush_t) * drivers.synoptic[t];
            let noise_sd = config.noise_sd;
            step_field(
                &mut field,
                &mut delta,
                rows,
                cols,
                config.diffusion,
                drivers.wx[t],
                drivers.wy[t],
                |i| emission[i] * modulation,
                config.decay,
                || {
                    if noise_sd > 0.0 {
                        noise_sd * normal.sample(&mut rng)
                    } else {
                        0.0
                    }
                },
            );
        }
    }

    truth.stamp_auxiliary(config.utc_offset_hours);
    truth.validate_finite()?;

    let mut observed = UrbanDynamicsMap::new(spec, schema.clone(), start_time(), config.hours)?;
    for t in 0..config.hours {
        for c in schema.non_auxiliary_indices() {
            for &(r, cc) in &station_cells {
                observed.set(t, c, r, cc, truth.raw(t, c, r, cc));
            }
        }
    }

    Ok(SynthOutput {
        truth,
        observed,
        stations,
    })
}

/// Clears seeded bursts of entries from every populated cell series so the
/// interpolation stages have realistic gaps to fill. Burst lengths are
/// geometric with the requested mean, and each series starts in its
/// stationary state so the expected cleared fraction is exactly `rate`.
/// Returns the number of entries cleared; the truth map is untouched, so
/// the original values stay recoverable from it.
pub fn plant_missingness(
    map: &mut UrbanDynamicsMap,
    rate: f64,
    burst_len: f64,
    seed: u64,
) -> Result<usize> {
    if !rate.is_finite() || !(0.0..1.0).contains(&rate) {
        return Err(Error::Synth(format!(
            "missing rate must lie in [0, 1), got {rate}"
        )));
    }
    if !burst_len.is_finite() || burst_len < 1.0 {
        return Err(Error::Synth(format!(
            "burst length must be >= 1, got {burst_len}"
        )));
    }
    if rate == 0.0 {
        return Ok(0);
    }
    let p_exit = 1.0 / burst_len;
    let p_enter = (rate * p_exit / (1.0 - rate)).min(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = map.spec.rows;
    let cols = map.spec.cols;
    let hours = map.hours();
    let mut planted = 0usize;
    for c in map.schema.non_auxiliary_indices() {
        for r in 0..rows {
            for cc in 0..cols {
                if !(0..hours).any(|t| map.is_set(t, c, r, cc)) {
                    continue;
                }
                let mut missing = rng.gen_bool(rate);
                for t in 0..hours {
                    if missing && map.is_set(t, c, r, cc) {
                        map.clear(t, c, r, cc);
                        planted += 1;
                    }
                    let p_next = if missing { 1.0 - p_exit } else { p_enter };
                    missing = rng.gen_bool(p_next);
                }
            }
        }
    }
    Ok(planted)
}
