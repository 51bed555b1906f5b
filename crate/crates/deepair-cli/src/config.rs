//! One flat config for the whole pipeline. Every stage's knobs live here
//! under a single JSON object so a run is fully described by one file;
//! command-line `--set key=value` overrides win over the file, and unknown
//! keys are rejected rather than ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use deepair::gridstore::GridSpec;
use deepair::interp::PrepareConfig;
use deepair::model::ModelConfig;
use deepair::synthcity::SynthConfig;
use deepair::trainer::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Synthetic data generation.
    pub rows: usize,
    pub cols: usize,
    pub hours: usize,
    pub stations: usize,
    pub seed: u64,
    pub diffusion: f64,
    pub wind_scale: f64,
    pub decay: f64,
    pub noise_sd: f64,
    pub emission: Option<Vec<f64>>,
    pub missing_rate: f64,
    pub missing_burst: f64,
    pub utc_offset_hours: i32,

    // Grid geometry for ingestion.
    pub cell_km: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,

    // Preprocessing.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub correlation_threshold: f64,
    pub max_gap_hours: usize,

    // Model. `window` is shared by preprocessing, the model, and training
    // so the three stages can never disagree about history length.
    pub model: String,
    pub units: usize,
    pub channels: usize,
    pub patch: usize,
    /// Interleave 1x1 convolutions between residual units. The registry
    /// pins this per model name (`deepair` on, `resnet_lstm` off); the key
    /// only matters for models built outside the registry.
    pub one_by_one: bool,
    pub layers: usize,
    pub hidden: usize,
    pub window: usize,
    pub model_seed: u64,

    // Training.
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch: usize,
    pub train_seed: u64,

    // Evaluation and forecasting.
    /// Hour index to forecast; `None` forecasts the final hour.
    pub forecast_hour: Option<usize>,
    /// Path to an AQI level table; `None` uses the bundled GB 3095-2012
    /// derived table.
    pub aqi_table: Option<String>,

    // Runtime.
    /// Forces the worker pool to one thread for bit-reproducible runs.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let prep = PrepareConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            rows: synth.rows,
            cols: synth.cols,
            hours: synth.hours,
            stations: synth.stations,
            seed: synth.seed,
            diffusion: synth.diffusion,
            wind_scale: synth.wind_scale,
            decay: synth.decay,
            noise_sd: synth.noise_sd,
            emission: None,
            missing_rate: synth.missing_rate,
            missing_burst: synth.missing_burst,
            utc_offset_hours: synth.utc_offset_hours,
            cell_km: 1.0,
            origin_lat: 39.5,
            origin_lon: 116.0,
            train_fraction: prep.fractions.0,
            val_fraction: prep.fractions.1,
            test_fraction: prep.fractions.2,
            correlation_threshold: prep.threshold,
            max_gap_hours: prep.max_gap,
            model: "deepair".to_string(),
            units: model.units,
            channels: model.channels,
            patch: model.patch,
            one_by_one: model.one_by_one,
            layers: model.layers,
            hidden: model.hidden,
            window: model.window,
            model_seed: model.seed,
            lr: train.lr,
            patience: train.patience,
            max_epochs: train.max_epochs,
            batch: train.batch,
            train_seed: train.seed,
            forecast_hour: None,
            aqi_table: None,
            deterministic: false,
        }
    }
}

impl RunConfig {
    /// Loads the config file (if any) and applies `key=value` overrides.
    /// Overrides are parsed as JSON fragments, falling back to plain
    /// strings, so `--set lr=0.05`, `--set model=lstm_only`, and
    /// `--set emission=null` all work. Unknown keys fail loudly.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError {
                    module: "cli",
                    message: format!("cannot read config {}: {e}", p.display()),
                })?;
                serde_json::from_str::<serde_json::Value>(&text).map_err(|e| CliError {
                    module: "cli",
                    message: format!("config {} is not valid JSON: {e}", p.display()),
                })?
            }
            None => serde_json::json!({}),
        };
        let map = value.as_object_mut().ok_or_else(|| CliError {
            module: "cli",
            message: "config file must hold a JSON object".to_string(),
        })?;
        for pair in overrides {
            let (key, raw) = pair.split_once('=').ok_or_else(|| CliError {
                module: "cli",
                message: format!("override {pair:?} is not of the form key=value"),
            })?;
            let parsed = serde_json::from_str::<serde_json::Value>(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            map.insert(key.to_string(), parsed);
        }
        serde_json::from_value(value).map_err(|e| CliError {
            module: "cli",
            message: format!("invalid config: {e}"),
        })
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            rows: self.rows,
            cols: self.cols,
            hours: self.hours,
            stations: self.stations,
            seed: self.seed,
            diffusion: self.diffusion,
            wind_scale: self.wind_scale,
            decay: self.decay,
            noise_sd: self.noise_sd,
            emission: self.emission.clone(),
            missing_rate: self.missing_rate,
            missing_burst: self.missing_burst,
            utc_offset_hours: self.utc_offset_hours,
        }
    }

    pub fn grid_spec(&self) -> Result<GridSpec, deepair::Error> {
        GridSpec::new(
            self.rows,
            self.cols,
            self.cell_km,
            (self.origin_lat, self.origin_lon),
        )
    }

    pub fn prepare_config(&self) -> PrepareConfig {
        PrepareConfig {
            fractions: (self.train_fraction, self.val_fraction, self.test_fraction),
            window: self.window,
            threshold: self.correlation_threshold,
            max_gap: self.max_gap_hours,
            utc_offset_hours: self.utc_offset_hours,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            units: self.units,
            channels: self.channels,
            patch: self.patch,
            one_by_one: self.one_by_one,
            layers: self.layers,
            hidden: self.hidden,
            window: self.window,
            seed: self.model_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            window: self.window,
            patch: self.patch,
            patience: self.patience,
            max_epochs: self.max_epochs,
            seed: self.train_seed,
            batch: self.batch,
        }
    }
}
