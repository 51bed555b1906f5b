//! Forecast models: the CNN-LSTM network, its ablation, and the reference
//! baselines, all behind one trait so the trainer and evaluator never branch
//! on model kind. Variants register by name in [`ModelRegistry`] and are
//! selected at runtime.

mod baselines;
mod network;
pub mod patch;

pub use baselines::{LstmOnlyModel, PersistenceModel};
pub use network::DeepAirModel;
pub use patch::{PatchBuilder, PatchData};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensorcore::ParameterSet;

use crate::error::{Error, Result};
use crate::gridstore::ChannelSchema;

/// Number of forecast outputs, one per air quality channel.
pub const OUTPUTS: usize = 5;

/// Architecture hyperparameters, shared by every model kind; each kind reads
/// the fields that apply to it. Serializes to the model config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Residual units in the convolutional stack.
    pub units: usize,
    /// Channel width of every convolution.
    pub channels: usize,
    /// Patch edge in cells; odd so a center cell exists.
    pub patch: usize,
    /// Insert 1x1 convolutions between residual units.
    pub one_by_one: bool,
    /// Stacked LSTM layers.
    pub layers: usize,
    /// LSTM hidden width.
    pub hidden: usize,
    /// Input window length in hours.
    pub window: usize,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            units: 4,
            channels: 32,
            patch: 15,
            one_by_one: true,
            layers: 2,
            hidden: 128,
            window: 48,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.units < 1 {
            return Err(Error::Model("units must be at least 1".into()));
        }
        if self.patch % 2 == 0 || self.patch < 3 {
            return Err(Error::Model(format!(
                "patch edge must be odd and at least 3, got {}",
                self.patch
            )));
        }
        if self.channels < 1 || self.layers < 1 || self.hidden < 1 {
            return Err(Error::Model(
                "channels, layers and hidden must all be at least 1".into(),
            ));
        }
        if self.window < 1 {
            return Err(Error::Model("window must be at least 1".into()));
        }
        Ok(())
    }
}

/// A next-hour forecaster over patch windows. Implementations own their
/// parameters; the trainer drives gradient accumulation and SGD steps
/// through [`ForecastModel::params_mut`]. `Send + Sync` so read-only
/// evaluation can fan out across worker threads on cloned models.
pub trait ForecastModel: Send + Sync {
    /// Registry name of this variant.
    fn kind(&self) -> &'static str;

    fn config(&self) -> &ModelConfig;

    fn window_len(&self) -> usize {
        self.config().window
    }

    /// Whether gradient training applies. Heuristic baselines return false
    /// and reject [`ForecastModel::train_loss_and_grads`].
    fn is_trainable(&self) -> bool {
        true
    }

    fn params(&self) -> &ParameterSet;

    fn params_mut(&mut self) -> &mut ParameterSet;

    /// Forecast for the hour following the window, standardized scale.
    /// Normalization statistics run in inference mode.
    fn forecast_std(&mut self, window: &[PatchData]) -> Result<[f32; OUTPUTS]>;

    /// Builds the training graph for one sample, accumulates parameter
    /// gradients, and returns the summed squared error against the target.
    /// Gradients add across calls until the caller steps or zeroes them.
    fn train_loss_and_grads(
        &mut self,
        window: &[PatchData],
        target_std: &[f32; OUTPUTS],
    ) -> Result<f64>;

    fn clone_box(&self) -> Box<dyn ForecastModel>;

    /// Swaps in a parameter set loaded from a checkpoint. The incoming set
    /// must match the model's own registration order exactly; parameter
    /// handles index by position, so order is part of the contract.
    fn replace_params(&mut self, params: ParameterSet) -> Result<()> {
        validate_compatible(self.params(), &params)?;
        *self.params_mut() = params;
        Ok(())
    }
}

fn validate_compatible(current: &ParameterSet, incoming: &ParameterSet) -> Result<()> {
    if current.len() != incoming.len() {
        return Err(Error::Model(format!(
            "checkpoint has {} parameters, model expects {}",
            incoming.len(),
            current.len()
        )));
    }
    for ((name_c, val_c, train_c), (name_i, val_i, train_i)) in current.iter().zip(incoming.iter())
    {
        if name_c != name_i {
            return Err(Error::Model(format!(
                "checkpoint parameter '{name_i}' where model expects '{name_c}'"
            )));
        }
        if val_c.shape() != val_i.shape() {
            return Err(Error::Model(format!(
                "parameter '{name_c}' has shape {:?} in the checkpoint, model expects {:?}",
                val_i.shape(),
                val_c.shape()
            )));
        }
        if train_c != train_i {
            return Err(Error::Model(format!(
                "parameter '{name_c}' trainability differs from the checkpoint"
            )));
        }
    }
    Ok(())
}

type Factory = fn(&ModelConfig, &ChannelSchema) -> Result<Box<dyn ForecastModel>>;

/// Name-keyed model factories. `deepair` and `resnet_lstm` share one network
/// and differ only in whether 1x1 convolutions are interleaved; the registry
/// pins that flag so the selected name always gets the matching topology.
pub struct ModelRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        ModelRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut r = ModelRegistry::new();
        r.register("deepair", |config, schema| {
            let config = ModelConfig {
                one_by_one: true,
                ..config.clone()
            };
            Ok(Box::new(DeepAirModel::new("deepair", &config, schema)?))
        });
        r.register("resnet_lstm", |config, schema| {
            let config = ModelConfig {
                one_by_one: false,
                ..config.clone()
            };
            Ok(Box::new(DeepAirModel::new("resnet_lstm", &config, schema)?))
        });
        r.register("lstm_only", |config, schema| {
            Ok(Box::new(LstmOnlyModel::new(config, schema)?))
        });
        r.register("persistence", |config, schema| {
            Ok(Box::new(PersistenceModel::new(config, schema)?))
        });
        r
    }

    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn build(
        &self,
        kind: &str,
        config: &ModelConfig,
        schema: &ChannelSchema,
    ) -> Result<Box<dyn ForecastModel>> {
        config.validate()?;
        let factory = self.factories.get(kind).ok_or_else(|| Error::UnknownModel {
            kind: kind.to_string(),
            available: self.names().join(", "),
        })?;
        factory(config, schema)
    }
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

/// Builds a model from the default registry.
pub fn build_model(
    kind: &str,
    config: &ModelConfig,
    schema: &ChannelSchema,
) -> Result<Box<dyn ForecastModel>> {
    ModelRegistry::with_defaults().build(kind, config, schema)
}

/// Writes the model's parameters with enough metadata to rebuild it:
/// kind, config, and the channel schema hash the weights were trained on.
pub fn save_model(model: &dyn ForecastModel, schema: &ChannelSchema, path: &Path) -> Result<()> {
    let meta = serde_json::json!({
        "kind": model.kind(),
        "config": model.config(),
        "schema_hash": schema.content_hash(),
    });
    model.params().save(path, meta)?;
    Ok(())
}

/// Rebuilds a model from a checkpoint written by [`save_model`].
pub fn load_model(path: &Path, schema: &ChannelSchema) -> Result<Box<dyn ForecastModel>> {
    let (params, meta) = ParameterSet::load(path)?;
    let kind = meta
        .get("kind")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Model("checkpoint metadata is missing the model kind".into()))?
        .to_string();
    let config: ModelConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| Error::Model("checkpoint metadata is missing the config".into()))?,
    )?;
    let stored_hash = meta
        .get("schema_hash")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Model("checkpoint metadata is missing the schema hash".into()))?;
    if stored_hash != schema.content_hash() {
        return Err(Error::Model(format!(
            "checkpoint was trained on a different channel schema ({} vs {})",
            stored_hash,
            schema.content_hash()
        )));
    }
    let mut model = build_model(&kind, &config, schema)?;
    model.replace_params(params)?;
    Ok(model)
}
