//! The seven pipeline subcommands. Each takes the merged [`RunConfig`],
//! produces its artifacts under an output directory, and finishes by
//! writing a manifest naming every file it left behind.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use deepair::evaluator::{
    assemble_report, loo_predictions, mape, write_forecast_dataset, write_heatmap_csv,
    write_predictions_csv, write_report_json, write_scatter_csv, AqiLevelTable,
};
use deepair::gridstore::{
    align_all, ingest_station_csv, load_dataset, rasterize, save_dataset, station_cells,
    ChannelSchema, Station,
};
use deepair::interp::{load_prepared, prepare, save_prepared, PreparedData};
use deepair::model::{build_model, load_model, save_model, ForecastModel};
use deepair::synthcity::{plant_missingness, simulate};
use deepair::trainer::Trainer;

use crate::config::RunConfig;
use crate::rundir::{write_json, write_manifest, CONFIG_FILE};
use crate::CliError;

pub const STATIONS_FILE: &str = "stations.json";
pub const MODEL_FILE: &str = "model.bin";
pub const PREPARED_DIR: &str = "prepared";

fn echo_config(config: &RunConfig, dir: &Path) -> Result<(), CliError> {
    write_json(config, &dir.join(CONFIG_FILE))
}

fn read_stations(dir: &Path) -> Result<Vec<Station>, CliError> {
    let path = dir.join(STATIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError {
        module: "cli",
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError {
        module: "cli",
        message: format!("{} is not a station list: {e}", path.display()),
    })
}

fn load_prepared_data(data: &Path) -> Result<PreparedData, CliError> {
    // Accept either the prepared directory itself or a run/artifact
    // directory containing one.
    let dir = if data.join("prepared.json").exists() {
        data.to_path_buf()
    } else {
        data.join(PREPARED_DIR)
    };
    Ok(load_prepared(&dir)?)
}

fn load_aqi_table(config: &RunConfig) -> Result<AqiLevelTable, CliError> {
    match &config.aqi_table {
        Some(path) => Ok(AqiLevelTable::from_file(Path::new(path))?),
        None => Ok(AqiLevelTable::bundled()),
    }
}

pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let synth = config.synth_config();
    info!("synthesizing {}x{} grid, {} hours, {} stations, seed {}",
        synth.rows, synth.cols, synth.hours, synth.stations, synth.seed);
    let mut output = simulate(&synth)?;
    let planted = plant_missingness(
        &mut output.observed,
        synth.missing_rate,
        synth.missing_burst,
        synth.seed.wrapping_add(1),
    )?;
    info!("planted {planted} missing entries (rate {}, burst {})",
        synth.missing_rate, synth.missing_burst);

    save_dataset(&output.truth, &out.join("truth"))?;
    save_dataset(&output.observed, &out.join("observed"))?;
    write_json(&output.stations, &out.join(STATIONS_FILE))?;
    echo_config(config, out)?;
    write_manifest(out, "synth")?;
    info!("dataset written to {}", out.display());
    Ok(())
}

pub fn cmd_ingest(config: &RunConfig, observations: &Path, out: &Path) -> Result<(), CliError> {
    let schema = ChannelSchema::canonical();
    let file = fs::File::open(observations).map_err(|e| CliError {
        module: "cli",
        message: format!("cannot open {}: {e}", observations.display()),
    })?;
    let report = ingest_station_csv(file, &schema)?;
    info!(
        "ingested {} observations, rejected {} rows",
        report.observations.len(),
        report.rejected.len()
    );
    let aligned = align_all(&report.observations);
    let spec = config.grid_spec()?;
    let stations = station_cells(&aligned, &spec)?;
    let map = rasterize(&aligned, spec, schema)?;

    save_dataset(&map, &out.join("observed"))?;
    write_json(&stations, &out.join(STATIONS_FILE))?;
    let rejected: Vec<serde_json::Value> = report
        .rejected
        .iter()
        .map(|r| serde_json::json!({"line": r.line, "reason": r.reason}))
        .collect();
    write_json(
        &serde_json::json!({
            "observations": report.observations.len(),
            "aligned": aligned.len(),
            "stations": stations.len(),
            "rejected": rejected,
        }),
        &out.join("ingest_report.json"),
    )?;
    echo_config(config, out)?;
    write_manifest(out, "ingest")?;
    info!("dataset written to {}", out.display());
    Ok(())
}

pub fn cmd_preprocess(config: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let map = load_dataset(&data.join("observed"))?;
    let stations = read_stations(data)?;
    info!("preparing {} hours over {} stations", map.hours(), stations.len());
    let prepared = prepare(&map, &stations, &config.prepare_config())?;
    save_prepared(&prepared, &out.join(PREPARED_DIR))?;
    write_json(
        &serde_json::json!({
            "correlations": prepared.report,
            "policy": prepared.policy,
        }),
        &out.join("fill_report.json"),
    )?;
    echo_config(config, out)?;
    write_manifest(out, "preprocess")?;
    info!("prepared data written to {}", out.display());
    Ok(())
}

pub fn cmd_train(config: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let prepared = load_prepared_data(data)?;
    let schema = prepared.map.schema.clone();
    let mut model = build_model(&config.model, &config.model_config(), &schema)?;
    info!("training {} (window {}, patch {})", config.model, config.window, config.patch);

    let mut trainer = Trainer::new(&prepared, config.train_config())?;
    let report = trainer.fit(model.as_mut(), Some(out))?;
    info!(
        "best epoch {} with validation MAPE {:.3}% ({} skipped targets)",
        report.best_epoch, report.best_val_mape, report.skipped_targets
    );

    save_model(model.as_ref(), &schema, &out.join(MODEL_FILE))?;
    write_json(&report, &out.join("fit_report.json"))?;
    // A copy of the prepared data makes the run dir self-sufficient:
    // `evaluate --model <run>/model.bin --data <run>` needs nothing else.
    save_prepared(&prepared, &out.join(PREPARED_DIR))?;
    echo_config(config, out)?;
    write_manifest(out, "train")?;
    info!("run artifacts written to {}", out.display());
    Ok(())
}

pub fn cmd_evaluate(config: &RunConfig, model_path: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let prepared = load_prepared_data(data)?;
    let model = load_model(model_path, &prepared.map.schema)?;
    let split = prepared.split()?;
    info!(
        "evaluating {} on test hours {:?}",
        model.kind(),
        split.test.targets
    );
    let records = loo_predictions(model.as_ref(), &prepared, split.test.targets.clone())?;
    write_predictions_csv(&records, &out.join("predictions.csv"))?;
    write_scatter_csv(&records, "PM2.5", &out.join("scatter_pm25.csv"))?;

    let table = load_aqi_table(config)?;
    let report = assemble_report(&records, &table)?;
    write_report_json(&report, &out.join("report.json"))?;
    let overall = mape(&records)?;
    info!(
        "test MAPE {:.3}% over {} records ({} excluded)",
        overall.percent, overall.used, overall.excluded
    );
    echo_config(config, out)?;
    write_manifest(out, "evaluate")?;
    info!("evaluation written to {}", out.display());
    Ok(())
}

pub fn cmd_forecast(config: &RunConfig, model_path: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let prepared = load_prepared_data(data)?;
    let model = load_model(model_path, &prepared.map.schema)?;
    let hour = config.forecast_hour.unwrap_or(prepared.map.hours() - 1);
    info!("citywide forecast for hour {hour} with {}", model.kind());
    let forecast = deepair::evaluator::citywide_forecast(model.as_ref(), &prepared, hour)?;
    write_forecast_dataset(&forecast, &prepared.map.schema, &out.join("forecast"))?;
    write_heatmap_csv(&forecast, &out.join("heatmap.csv"))?;
    write_json(
        &serde_json::json!({
            "hour": forecast.hour,
            "timestamp": forecast.timestamp.to_rfc3339(),
            "pollutants": forecast.pollutants,
            "rows": forecast.spec.rows,
            "cols": forecast.spec.cols,
        }),
        &out.join("forecast_meta.json"),
    )?;
    echo_config(config, out)?;
    write_manifest(out, "forecast")?;
    info!("forecast written to {}", out.display());
    Ok(())
}

/// Prints a human-readable digest of a run directory to stdout.
pub fn cmd_report(run: &Path) -> Result<(), CliError> {
    let mut printed = false;
    let config_path = run.join(CONFIG_FILE);
    if let Ok(text) = fs::read_to_string(&config_path) {
        if let Ok(config) = serde_json::from_str::<RunConfig>(&text) {
            println!("config: model={} window={} patch={} lr={} seed={}",
                config.model, config.window, config.patch, config.lr, config.seed);
            printed = true;
        }
    }
    let fit_path = run.join("fit_report.json");
    if let Ok(text) = fs::read_to_string(&fit_path) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
            println!(
                "training: best epoch {} validation MAPE {}%, {} epochs run",
                v["best_epoch"],
                v["best_val_mape"],
                v["epochs"].as_array().map_or(0, |a| a.len())
            );
            if let Some(epochs) = v["epochs"].as_array() {
                for e in epochs {
                    println!(
                        "  epoch {:>3}: train loss {:.6} validation MAPE {:.3}%",
                        e["epoch"],
                        e["train_loss"].as_f64().unwrap_or(f64::NAN),
                        e["val_mape"].as_f64().unwrap_or(f64::NAN)
                    );
                }
            }
            printed = true;
        }
    }
    let report_path = run.join("report.json");
    if let Ok(text) = fs::read_to_string(&report_path) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
            println!(
                "evaluation: MAPE {}% R2 {} level accuracy {}%",
                v["mape"], v["r2"], v["level_accuracy"]
            );
            if let Some(per) = v["per_pollutant"].as_object() {
                for (name, value) in per {
                    println!("  {name}: MAPE {value}%");
                }
            }
            printed = true;
        }
    }
    let forecast_path = run.join("forecast_meta.json");
    if let Ok(text) = fs::read_to_string(&forecast_path) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
            println!(
                "forecast: hour {} at {} ({}x{} cells)",
                v["hour"], v["timestamp"], v["rows"], v["cols"]
            );
            printed = true;
        }
    }
    if !printed {
        return Err(CliError {
            module: "cli",
            message: format!("{} holds no readable run artifacts", run.display()),
        });
    }
    Ok(())
}

/// Used by `train` to refuse kinds the registry does not know *before*
/// creating a run directory, so a typo does not leave an empty dir behind.
pub fn check_model_kind(config: &RunConfig) -> Result<(), CliError> {
    let schema = ChannelSchema::canonical();
    let _: Box<dyn ForecastModel> = build_model(&config.model, &config.model_config(), &schema)?;
    Ok(())
}

/// Resolves a model path that may point at a run directory.
pub fn resolve_model_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MODEL_FILE)
    } else {
        path.to_path_buf()
    }
}
