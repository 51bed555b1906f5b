//! Patch-sampling SGD training: one station drawn per training hour, a
//! leave-one-out window around it, squared error on standardized
//! concentrations, and validation-MAPE early stopping with checkpoints.
//!
//! Chronology is enforced by construction: a target at hour t only ever
//! sees patches for t-W..t, and the segment split keeps validation and
//! test windows inside their own segments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorcore::ParameterSet;

use crate::error::{Error, Result};
use crate::evaluator::{loo_predictions, mape, Mape};
use crate::gridstore::{chronological_split, DatasetSplit};
use crate::interp::PreparedData;
use crate::model::{save_model, ForecastModel, PatchBuilder, OUTPUTS};

pub const LOG_FILE: &str = "training_log.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub window: usize,
    pub patch: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Stations sampled per hour; gradients are averaged when > 1.
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            window: 48,
            patch: 15,
            patience: 5,
            max_epochs: 200,
            seed: 0,
            batch: 1,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is allowed: it runs the full loop without
    /// moving parameters, which is useful as a dry run.
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Train(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.lr
            )));
        }
        if self.patience == 0 {
            return Err(Error::Train("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Train("max_epochs must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Train("batch must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(Error::Train("window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Tracks the best validation value seen; improvement means strictly
/// lower, by any margin.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    epochs_since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            epochs_since_best: 0,
        }
    }

    /// Records one epoch's validation value; returns whether it improved.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some((_, best)) => value < best,
        };
        if improved {
            self.best = Some((epoch, value));
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_best >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn epochs_since_best(&self) -> usize {
        self.epochs_since_best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mape: f64,
    pub epochs_since_best: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mape: f64,
    /// (hour, station) samples dropped because the target had no truth.
    pub skipped_targets: usize,
    pub checkpoint: Option<PathBuf>,
}

pub struct Trainer<'a> {
    prepared: &'a PreparedData,
    config: TrainConfig,
    split: DatasetSplit,
    builder: PatchBuilder,
    aq: Vec<usize>,
    rng: ChaCha8Rng,
    skipped: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(prepared: &'a PreparedData, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if prepared.stations.is_empty() {
            return Err(Error::Train("no stations to sample from".into()));
        }
        let split =
            chronological_split(prepared.map.hours(), prepared.fractions, config.window)?;
        let builder = PatchBuilder::new(prepared, config.patch)?;
        let aq = prepared.map.schema.air_quality_indices();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            prepared,
            config,
            split,
            builder,
            aq,
            rng,
            skipped: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.split
    }

    pub fn skipped_targets(&self) -> usize {
        self.skipped
    }

    /// The standardized 5-pollutant truth at (t, cell), or None when any
    /// pollutant is unobserved (the squared loss needs the full vector).
    fn standardized_truth(&self, t: usize, cell: (usize, usize)) -> Option<[f32; OUTPUTS]> {
        let mut target = [0.0f32; OUTPUTS];
        for (i, &c) in self.aq.iter().enumerate() {
            target[i] = self.prepared.map.get(t, c, cell.0, cell.1)?;
        }
        Some(target)
    }

    /// Accumulates gradients for one (hour, station) sample without
    /// stepping. None (plus a skip count) when the target has no truth.
    fn accumulate(
        &mut self,
        model: &mut dyn ForecastModel,
        t: usize,
        station: usize,
    ) -> Result<Option<f64>> {
        let s = &self.prepared.stations[station];
        let cell = (s.row, s.col);
        let Some(target) = self.standardized_truth(t, cell) else {
            self.skipped += 1;
            return Ok(None);
        };
        let patches =
            self.builder
                .window(&self.prepared.map, cell, t, self.config.window, Some(cell))?;
        let loss = model.train_loss_and_grads(&patches, &target)?;
        Ok(Some(loss))
    }

    /// One gradient step at an explicit station. Skipped targets return
    /// None and leave the parameters untouched.
    pub fn train_iteration(
        &mut self,
        model: &mut dyn ForecastModel,
        t: usize,
        station: usize,
    ) -> Result<Option<f64>> {
        match self.accumulate(model, t, station)? {
            Some(loss) => {
                model.params_mut().sgd_step(self.config.lr as f32);
                Ok(Some(loss))
            }
            None => Ok(None),
        }
    }

    /// Samples `batch` stations for hour `t`, averages their gradients,
    /// and steps once. Stations are drawn before the truth check so the
    /// random stream does not depend on missingness.
    pub fn train_hour(&mut self, model: &mut dyn ForecastModel, t: usize) -> Result<Option<f64>> {
        let n = self.prepared.stations.len();
        let sampled: Vec<usize> = (0..self.config.batch)
            .map(|_| self.rng.gen_range(0..n))
            .collect();
        let mut sum = 0.0f64;
        let mut executed = 0usize;
        for station in sampled {
            if let Some(loss) = self.accumulate(model, t, station)? {
                sum += loss;
                executed += 1;
            }
        }
        if executed == 0 {
            return Ok(None);
        }
        if executed > 1 {
            model.params_mut().scale_grads(1.0 / executed as f32);
        }
        model.params_mut().sgd_step(self.config.lr as f32);
        Ok(Some(sum / executed as f64))
    }

    /// Walks the training targets in hour order; returns the mean loss
    /// over executed iterations.
    pub fn train_epoch(&mut self, model: &mut dyn ForecastModel) -> Result<f64> {
        let mut sum = 0.0f64;
        let mut executed = 0usize;
        for t in self.split.train.targets.clone() {
            if let Some(loss) = self.train_hour(model, t)? {
                sum += loss;
                executed += 1;
            }
        }
        if executed == 0 {
            return Err(Error::Train(
                "no executable training iterations: every sampled target was missing".into(),
            ));
        }
        Ok(sum / executed as f64)
    }

    /// Leave-one-out MAPE over the validation targets.
    pub fn validate(&self, model: &dyn ForecastModel) -> Result<Mape> {
        let records =
            loo_predictions(model, self.prepared, self.split.validation.targets.clone())?;
        mape(&records)
    }

    /// Trains until validation MAPE stops improving for `patience` epochs
    /// or `max_epochs` is reached, then restores the best epoch's
    /// parameters. With `out_dir` set, writes `ckpt_<epoch>.bin` per
    /// improvement and a CSV log with a footer naming the best checkpoint.
    pub fn fit(
        &mut self,
        model: &mut dyn ForecastModel,
        out_dir: Option<&Path>,
    ) -> Result<FitReport> {
        self.fit_inner(model, out_dir, None)
    }

    /// `fit` with validation values read from `script` (epoch e uses
    /// script[e-1]) instead of computed; training epochs still run for
    /// real. Lets stopping behavior be pinned against exact sequences.
    pub fn fit_scripted(
        &mut self,
        model: &mut dyn ForecastModel,
        out_dir: Option<&Path>,
        script: &[f64],
    ) -> Result<FitReport> {
        self.fit_inner(model, out_dir, Some(script))
    }

    fn fit_inner(
        &mut self,
        model: &mut dyn ForecastModel,
        out_dir: Option<&Path>,
        script: Option<&[f64]>,
    ) -> Result<FitReport> {
        if model.window_len() != self.config.window {
            return Err(Error::Train(format!(
                "model window {} does not match training window {}",
                model.window_len(),
                self.config.window
            )));
        }
        if model.config().patch != self.config.patch {
            return Err(Error::Train(format!(
                "model patch {} does not match training patch {}",
                model.config().patch,
                self.config.patch
            )));
        }
        if !model.is_trainable() {
            return Err(Error::Train(format!(
                "{} has no trainable parameters",
                model.kind()
            )));
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }

        let mut stopper = EarlyStopper::new(self.config.patience);
        let mut best: Option<(usize, f64, ParameterSet)> = None;
        let mut last_good = model.params().clone();
        let mut records: Vec<EpochRecord> = Vec::new();

        for epoch in 1..=self.config.max_epochs {
            let diverged = |detail: String| Error::Diverged { epoch, detail };
            let train_loss = match self.train_epoch(model) {
                Ok(loss) if loss.is_finite() => loss,
                Ok(loss) => {
                    model.replace_params(last_good)?;
                    log_after_divergence(out_dir, &records, best.as_ref().map(|b| b.0));
                    return Err(diverged(format!("train loss {loss}")));
                }
                Err(Error::Tensor(e)) => {
                    model.replace_params(last_good)?;
                    log_after_divergence(out_dir, &records, best.as_ref().map(|b| b.0));
                    return Err(diverged(e.to_string()));
                }
                Err(e) => return Err(e),
            };
            let val_mape = match script {
                Some(seq) => *seq.get(epoch - 1).ok_or_else(|| {
                    Error::Train(format!("validation script exhausted at epoch {epoch}"))
                })?,
                None => self.validate(model)?.percent,
            };
            if stopper.observe(epoch, val_mape) {
                best = Some((epoch, val_mape, model.params().clone()));
                if let Some(dir) = out_dir {
                    save_model(model, &self.prepared.map.schema, &checkpoint_path(dir, epoch))?;
                }
            }
            last_good = model.params().clone();
            records.push(EpochRecord {
                epoch,
                train_loss,
                val_mape,
                epochs_since_best: stopper.epochs_since_best(),
            });
            log::info!(
                "epoch {epoch}: train loss {train_loss:.6}, validation MAPE {val_mape:.3}%"
            );
            if stopper.should_stop() {
                break;
            }
        }

        let (best_epoch, best_val_mape, best_params) =
            best.expect("at least one epoch completes before this point");
        model.replace_params(best_params)?;
        if let Some(dir) = out_dir {
            write_log(dir, &records, Some(best_epoch))?;
        }
        Ok(FitReport {
            epochs: records,
            best_epoch,
            best_val_mape,
            skipped_targets: self.skipped,
            checkpoint: out_dir.map(|dir| checkpoint_path(dir, best_epoch)),
        })
    }
}

fn write_log(dir: &Path, records: &[EpochRecord], best: Option<usize>) -> Result<()> {
    let mut text = String::from("epoch,train_loss,val_mape,epochs_since_best\n");
    for r in records {
        let _ = writeln!(
            text,
            "{},{},{},{}",
            r.epoch, r.train_loss, r.val_mape, r.epochs_since_best
        );
    }
    if let Some(epoch) = best {
        let _ = writeln!(text, "# best: ckpt_{epoch}.bin");
    }
    fs::write(dir.join(LOG_FILE), text)?;
    Ok(())
}

fn log_after_divergence(out_dir: Option<&Path>, records: &[EpochRecord], best: Option<usize>) {
    if let Some(dir) = out_dir {
        if let Err(e) = write_log(dir, records, best) {
            log::warn!("could not write training log after divergence: {e}");
        }
    }
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt_{epoch}.bin"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridstore::{ChannelSchema, GridSpec, Station, UrbanDynamicsMap};
    use crate::interp::{prepare, PrepareConfig};
    use crate::model::{build_model, load_model, ModelConfig};
    use chrono::{TimeZone, Utc};

    const HOURS: usize = 80;
    const WINDOW: usize = 6;

    fn stations() -> Vec<Station> {
        [(2usize, 2usize), (2, 13), (13, 2), (13, 13), (7, 8)]
            .iter()
            .enumerate()
            .map(|(i, &(row, col))| Station {
                id: format!("s{i}"),
                row,
                col,
            })
            .collect()
    }

    fn prepared_fixture() -> PreparedData {
        let spec = GridSpec::new(16, 16, 1.0, (40.0, 116.0)).unwrap();
        let start = Utc.with_ymd_and_hms(2024, 3, 4, 0, 0, 0).unwrap();
        let mut map =
            UrbanDynamicsMap::new(spec, ChannelSchema::canonical(), start, HOURS).unwrap();
        let schema = map.schema.clone();
        for (i, s) in stations().iter().enumerate() {
            for t in 0..HOURS {
                for c in schema.non_auxiliary_indices() {
                    let v = 45.0
                        + 12.0 * ((t as f32) * 0.23 + c as f32 * 0.9).sin()
                        + (i as f32) * (0.6 + 0.15 * c as f32);
                    map.set(t, c, s.row, s.col, v);
                }
            }
        }
        let config = PrepareConfig {
            window: WINDOW,
            ..PrepareConfig::default()
        };
        prepare(&map, &stations(), &config).unwrap()
    }

    /// Constant channels standardize to 0 everywhere, so a zeroed model
    /// is already a perfect predictor.
    fn constant_prepared() -> PreparedData {
        let spec = GridSpec::new(16, 16, 1.0, (40.0, 116.0)).unwrap();
        let start = Utc.with_ymd_and_hms(2024, 3, 4, 0, 0, 0).unwrap();
        let mut map =
            UrbanDynamicsMap::new(spec, ChannelSchema::canonical(), start, HOURS).unwrap();
        let schema = map.schema.clone();
        for s in stations() {
            for t in 0..HOURS {
                for c in schema.non_auxiliary_indices() {
                    map.set(t, c, s.row, s.col, 20.0 + 3.0 * c as f32);
                }
            }
        }
        let config = PrepareConfig {
            window: WINDOW,
            ..PrepareConfig::default()
        };
        prepare(&map, &stations(), &config).unwrap()
    }

    fn tiny_model_config(seed: u64) -> ModelConfig {
        ModelConfig {
            units: 1,
            channels: 4,
            patch: 5,
            one_by_one: true,
            layers: 1,
            hidden: 6,
            window: WINDOW,
            seed,
        }
    }

    fn tiny_train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 0.01,
            window: WINDOW,
            patch: 5,
            patience: 5,
            max_epochs: 200,
            seed,
            batch: 1,
        }
    }

    fn params_equal(a: &ParameterSet, b: &ParameterSet) -> bool {
        a.len() == b.len()
            && a.iter().zip(b.iter()).all(|((na, ta, tra), (nb, tb, trb))| {
                na == nb
                    && tra == trb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    fn trainable_params_equal(a: &ParameterSet, b: &ParameterSet) -> bool {
        let keep = |set: &ParameterSet| -> Vec<(String, Vec<u32>)> {
            set.iter()
                .filter(|(_, _, trainable)| *trainable)
                .map(|(name, tensor, _)| {
                    (
                        name.to_string(),
                        tensor.data().iter().map(|v| v.to_bits()).collect(),
                    )
                })
                .collect()
        };
        keep(a) == keep(b)
    }

    /// Removes the 5-pollutant truth at every training target hour not in
    /// `keep`, leaving window history and the validation segment intact.
    fn thin_train_targets(prepared: &mut PreparedData, keep: &[usize]) {
        let aq = prepared.map.schema.air_quality_indices();
        let split = prepared.split().unwrap();
        for t in split.train.targets {
            if keep.contains(&t) {
                continue;
            }
            for s in stations() {
                for &c in &aq {
                    prepared.map.clear(t, c, s.row, s.col);
                }
            }
        }
    }

    #[test]
    fn stopper_follows_the_reference_sequence() {
        let mut stopper = EarlyStopper::new(5);
        let values = [10.0, 9.0, 9.5, 9.6, 9.7, 9.8, 9.9];
        let mut stopped_after = None;
        for (i, &v) in values.iter().enumerate() {
            stopper.observe(i + 1, v);
            if stopper.should_stop() {
                stopped_after = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_after, Some(7));
        assert_eq!(stopper.best(), Some((2, 9.0)));
    }

    #[test]
    fn stopper_resets_on_improvement() {
        let mut stopper = EarlyStopper::new(2);
        assert!(stopper.observe(1, 10.0));
        assert!(!stopper.observe(2, 11.0));
        assert_eq!(stopper.epochs_since_best(), 1);
        assert!(stopper.observe(3, 9.0));
        assert_eq!(stopper.epochs_since_best(), 0);
        assert!(!stopper.should_stop());
        assert!(!stopper.observe(4, 9.0), "equal value is not an improvement");
        assert!(!stopper.observe(5, 9.0));
        assert!(stopper.should_stop());
    }

    #[test]
    fn config_validation_rejects_degenerate_values() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_ok());
        assert!(TrainConfig { lr: -0.1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { max_epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn config_fills_missing_fields_from_defaults() {
        let config: TrainConfig = serde_json::from_str(r#"{"lr": 0.5, "seed": 7}"#).unwrap();
        assert_eq!(config.lr, 0.5);
        assert_eq!(config.seed, 7);
        assert_eq!(config.window, 48);
        assert_eq!(config.patience, 5);
        assert_eq!(config.batch, 1);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let prepared = prepared_fixture();
        let mut model =
            build_model("deepair", &tiny_model_config(5), &prepared.map.schema).unwrap();
        let config = TrainConfig {
            lr: 0.0,
            ..tiny_train_config(1)
        };
        let mut trainer = Trainer::new(&prepared, config).unwrap();
        let before = model.params().clone();
        let loss = trainer
            .train_iteration(model.as_mut(), WINDOW, 2)
            .unwrap()
            .expect("station 2 has truth at every hour");
        assert!(loss.is_finite() && loss > 0.0);
        // The gradient step is a no-op; only the batch-norm running stats
        // move, and those shift during any train-mode forward.
        assert!(trainable_params_equal(&before, model.params()));
        assert!(
            !params_equal(&before, model.params()),
            "running statistics should still update"
        );
    }

    #[test]
    fn zeroed_model_on_constant_data_has_zero_loss() {
        let prepared = constant_prepared();
        let mut model =
            build_model("deepair", &tiny_model_config(5), &prepared.map.schema).unwrap();
        let names: Vec<String> = model
            .params()
            .iter()
            .filter(|(_, _, trainable)| *trainable)
            .map(|(name, _, _)| name.to_string())
            .collect();
        for name in names {
            let id = model.params().id(&name).unwrap();
            model.params_mut().value_mut(id).data_mut().fill(0.0);
        }
        let mut trainer = Trainer::new(&prepared, tiny_train_config(1)).unwrap();
        let loss = trainer
            .train_iteration(model.as_mut(), WINDOW, 0)
            .unwrap()
            .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn single_iteration_loss_matches_golden_fixture() {
        let prepared = prepared_fixture();
        let mut model =
            build_model("deepair", &tiny_model_config(11), &prepared.map.schema).unwrap();
        let mut trainer = Trainer::new(&prepared, tiny_train_config(1)).unwrap();
        let loss = trainer
            .train_iteration(model.as_mut(), 10, 3)
            .unwrap()
            .unwrap();
        let golden = 3.3312363624572754;
        assert!(
            (loss - golden).abs() < 1e-5 * golden.abs(),
            "loss {loss} vs golden {golden}"
        );
    }

    #[test]
    fn skipped_hour_counts_and_leaves_parameters_untouched() {
        let mut prepared = prepared_fixture();
        let aq = prepared.map.schema.air_quality_indices();
        for s in stations() {
            prepared.map.clear(10, aq[2], s.row, s.col);
        }
        let mut model =
            build_model("deepair", &tiny_model_config(5), &prepared.map.schema).unwrap();
        let mut trainer = Trainer::new(&prepared, tiny_train_config(1)).unwrap();
        let before = model.params().clone();
        let out = trainer.train_hour(model.as_mut(), 10).unwrap();
        assert!(out.is_none(), "one missing pollutant skips the sample");
        assert_eq!(trainer.skipped_targets(), 1);
        assert!(params_equal(&before, model.params()));
    }

    #[test]
    fn three_usable_hours_execute_three_iterations() {
        let mut prepared = prepared_fixture();
        thin_train_targets(&mut prepared, &[WINDOW, 20, 40]);
        let mut model =
            build_model("lstm_only", &tiny_model_config(5), &prepared.map.schema).unwrap();
        let mut trainer = Trainer::new(&prepared, tiny_train_config(1)).unwrap();
        let targets = trainer.split().train.targets.clone();
        let mean = trainer.train_epoch(model.as_mut()).unwrap();
        assert!(mean.is_finite());
        assert_eq!(trainer.skipped_targets(), targets.len() - 3);
    }

    #[test]
    fn no_usable_targets_is_an_error() {
        let mut prepared = prepared_fixture();
        thin_train_targets(&mut prepared, &[]);
        let mut model =
            build_model("lstm_only", &tiny_model_config(5), &prepared.map.schema).unwrap();
        let mut trainer = Trainer::new(&prepared, tiny_train_config(1)).unwrap();
        assert!(matches!(
            trainer.train_epoch(model.as_mut()),
            Err(Error::Train(_))
        ));
    }

    #[test]
    fn epoch_mean_equals_a_manual_replay() {
        let prepared = prepared_fixture();
        let mut model_a =
            build_model("lstm_only", &tiny_model_config(5), &prepared.map.schema).unwrap();
        let mut model_b = model_a.clone_box();
        let mut trainer_a = Trainer::new(&prepared, tiny_train_config(9)).unwrap();
        let mut trainer_b = Trainer::new(&prepared, tiny_train_config(9)).unwrap();

        let mean = trainer_a.train_epoch(model_a.as_mut()).unwrap();

        let mut losses = Vec::new();
        for t in trainer_b.split().train.targets.clone() {
            if let Some(loss) = trainer_b.train_hour(model_b.as_mut(), t).unwrap() {
                losses.push(loss);
            }
        }
        let manual = losses.iter().sum::<f64>() / losses.len() as f64;
        assert_eq!(mean, manual, "same seed must replay identically");
        assert!(params_equal(model_a.params(), model_b.params()));
    }

    #[test]
    fn validation_mape_matches_evaluator_on_exported_records() {
        let prepared = prepared_fixture();
        let model =
            build_model("lstm_only", &tiny_model_config(5), &prepared.map.schema).unwrap();
        let trainer = Trainer::new(&prepared, tiny_train_config(1)).unwrap();
        let from_trainer = trainer.validate(model.as_ref()).unwrap();

        let records = loo_predictions(
            model.as_ref(),
            &prepared,
            trainer.split().validation.targets.clone(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.csv");
        crate::evaluator::write_predictions_csv(&records, &path).unwrap();
        let reloaded = crate::evaluator::read_predictions_csv(&path).unwrap();
        let from_file = mape(&reloaded).unwrap();
        assert_eq!(from_trainer.percent, from_file.percent);
        assert_eq!(from_trainer.used, from_file.used);
    }

    #[test]
    fn persistence_on_constant_data_validates_at_zero() {
        let prepared = constant_prepared();
        let model =
            build_model("persistence", &tiny_model_config(5), &prepared.map.schema).unwrap();
        let trainer = Trainer::new(&prepared, tiny_train_config(1)).unwrap();
        let m = trainer.validate(model.as_ref()).unwrap();
        assert_eq!(m.percent, 0.0);
        assert_eq!(m.excluded, 0);
    }

    #[test]
    fn empty_validation_after_skips_is_undefined() {
        let mut prepared = prepared_fixture();
        let aq = prepared.map.schema.air_quality_indices();
        let split = prepared.split().unwrap();
        for t in split.validation.targets {
            for s in stations() {
                for &c in &aq {
                    prepared.map.clear(t, c, s.row, s.col);
                }
            }
        }
        let model =
            build_model("persistence", &tiny_model_config(5), &prepared.map.schema).unwrap();
        let trainer = Trainer::new(&prepared, tiny_train_config(1)).unwrap();
        assert!(matches!(
            trainer.validate(model.as_ref()),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn scripted_sequence_stops_after_seven_epochs_and_restores_epoch_two() {
        let prepared = prepared_fixture();
        let mut model =
            build_model("deepair", &tiny_model_config(7), &prepared.map.schema).unwrap();
        let mut trainer = Trainer::new(&prepared, tiny_train_config(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let script = [10.0, 9.0, 9.5, 9.6, 9.7, 9.8, 9.9, 1.0, 0.5];
        let report = trainer
            .fit_scripted(model.as_mut(), Some(dir.path()), &script)
            .unwrap();

        assert_eq!(report.epochs.len(), 7, "later script entries never run");
        assert_eq!(report.best_epoch, 2);
        assert_eq!(report.best_val_mape, 9.0);
        let counters: Vec<usize> =
            report.epochs.iter().map(|r| r.epochs_since_best).collect();
        assert_eq!(counters, vec![0, 0, 1, 2, 3, 4, 5]);
        assert_eq!(
            report.checkpoint.as_deref(),
            Some(dir.path().join("ckpt_2.bin").as_path())
        );

        assert!(dir.path().join("ckpt_1.bin").exists());
        assert!(dir.path().join("ckpt_2.bin").exists());
        assert!(!dir.path().join("ckpt_3.bin").exists(), "no improvement after epoch 2");

        let restored =
            load_model(&dir.path().join("ckpt_2.bin"), &prepared.map.schema).unwrap();
        assert!(
            params_equal(model.params(), restored.params()),
            "returned model must hold the epoch-2 parameters"
        );

        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_mape,epochs_since_best");
        assert_eq!(lines.len(), 1 + 7 + 1);
        assert_eq!(*lines.last().unwrap(), "# best: ckpt_2.bin");
        assert!(lines[2].starts_with("2,") && lines[2].ends_with(",9,0"));
    }

    #[test]
    fn best_val_mape_is_the_log_minimum() {
        let prepared = prepared_fixture();
        let mut model =
            build_model("lstm_only", &tiny_model_config(7), &prepared.map.schema).unwrap();
        let mut trainer = Trainer::new(&prepared, tiny_train_config(3)).unwrap();
        let script = [12.0, 11.0, 13.0, 10.5, 11.5, 12.5, 13.5, 14.0, 15.0];
        let report = trainer.fit_scripted(model.as_mut(), None, &script).unwrap();
        let log_min = report
            .epochs
            .iter()
            .map(|r| r.val_mape)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_val_mape, log_min);
        assert_eq!(report.best_epoch, 4);
    }

    #[test]
    fn monotone_improvement_stops_at_max_epochs_with_best_last() {
        let prepared = prepared_fixture();
        let mut model =
            build_model("lstm_only", &tiny_model_config(7), &prepared.map.schema).unwrap();
        let config = TrainConfig {
            max_epochs: 4,
            ..tiny_train_config(3)
        };
        let mut trainer = Trainer::new(&prepared, config).unwrap();
        let report = trainer
            .fit_scripted(model.as_mut(), None, &[10.0, 9.0, 8.0, 7.0])
            .unwrap();
        assert_eq!(report.epochs.len(), 4);
        assert_eq!(report.best_epoch, 4);
        assert_eq!(report.best_val_mape, 7.0);
    }

    #[test]
    fn max_epochs_one_runs_exactly_one_epoch() {
        let prepared = prepared_fixture();
        let mut model =
            build_model("lstm_only", &tiny_model_config(7), &prepared.map.schema).unwrap();
        let config = TrainConfig {
            max_epochs: 1,
            ..tiny_train_config(3)
        };
        let mut trainer = Trainer::new(&prepared, config).unwrap();
        let report = trainer.fit(model.as_mut(), None).unwrap();
        assert_eq!(report.epochs.len(), 1);
        assert_eq!(report.best_epoch, 1);
    }

    #[test]
    fn fit_is_bit_reproducible_for_a_fixed_seed() {
        let prepared = prepared_fixture();
        let run = || {
            let mut model =
                build_model("deepair", &tiny_model_config(7), &prepared.map.schema).unwrap();
            let config = TrainConfig {
                max_epochs: 2,
                ..tiny_train_config(13)
            };
            let mut trainer = Trainer::new(&prepared, config).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let report = trainer.fit(model.as_mut(), Some(dir.path())).unwrap();
            let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
            (report, log, model)
        };
        let (report_a, log_a, model_a) = run();
        let (report_b, log_b, model_b) = run();
        assert_eq!(log_a, log_b, "training logs must be byte-identical");
        assert_eq!(report_a.epochs, report_b.epochs);
        assert_eq!(report_a.best_epoch, report_b.best_epoch);
        assert!(params_equal(model_a.params(), model_b.params()));
    }

    #[test]
    fn divergence_restores_the_last_finished_epoch() {
        let mut prepared = prepared_fixture();
        thin_train_targets(&mut prepared, &[WINDOW]);
        let build = || {
            build_model("lstm_only", &tiny_model_config(7), &prepared.map.schema).unwrap()
        };
        let config = TrainConfig {
            lr: 1e12,
            max_epochs: 30,
            ..tiny_train_config(3)
        };

        let mut model = build();
        let mut trainer = Trainer::new(&prepared, config.clone()).unwrap();
        let err = trainer.fit(model.as_mut(), None).err().unwrap();
        let Error::Diverged { epoch, .. } = err else {
            panic!("expected divergence, got {err}");
        };
        assert!(epoch >= 2, "first epoch computes its loss before stepping");

        // Replaying the finished epochs on a fresh model must land exactly
        // on the restored parameters.
        let mut replay = build();
        let mut replay_trainer = Trainer::new(&prepared, config).unwrap();
        for _ in 1..epoch {
            replay_trainer.train_epoch(replay.as_mut()).unwrap();
        }
        assert!(params_equal(model.params(), replay.params()));
    }

    #[test]
    fn mismatched_model_and_trainer_settings_are_rejected() {
        let prepared = prepared_fixture();
        let mut trainer = Trainer::new(&prepared, tiny_train_config(1)).unwrap();

        let bad_window = ModelConfig {
            window: WINDOW + 1,
            ..tiny_model_config(5)
        };
        let mut model = build_model("deepair", &bad_window, &prepared.map.schema).unwrap();
        assert!(matches!(
            trainer.fit(model.as_mut(), None),
            Err(Error::Train(_))
        ));

        let bad_patch = ModelConfig {
            patch: 7,
            ..tiny_model_config(5)
        };
        let mut model = build_model("deepair", &bad_patch, &prepared.map.schema).unwrap();
        assert!(matches!(
            trainer.fit(model.as_mut(), None),
            Err(Error::Train(_))
        ));

        let mut frozen =
            build_model("persistence", &tiny_model_config(5), &prepared.map.schema).unwrap();
        assert!(matches!(
            trainer.fit(frozen.as_mut(), None),
            Err(Error::Train(_))
        ));
    }

    #[test]
    fn training_windows_never_reach_the_target_hour() {
        let prepared = prepared_fixture();
        let trainer = Trainer::new(&prepared, tiny_train_config(1)).unwrap();
        let split = trainer.split();
        assert_eq!(split.train.targets.start, WINDOW);
        assert!(split.validation.targets.start >= split.validation.hours.start + WINDOW);
        let mut builder = PatchBuilder::new(&prepared, 5).unwrap();
        for &t in &[WINDOW, 30, split.train.targets.end - 1] {
            let window = builder
                .window(&prepared.map, (7, 8), t, WINDOW, Some((7, 8)))
                .unwrap();
            assert!(window.iter().all(|p| p.t < t));
            assert!(window.iter().all(|p| p.t + WINDOW >= t));
        }
    }
}
