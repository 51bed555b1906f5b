//! Comparison baselines: a temporal-only LSTM over the center cell's
//! channel values, and last-hour persistence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensorcore::nn::{init, lstm_cell, register_lstm_cell, LstmCellParams};
use tensorcore::{ParamId, ParameterSet, Session, Tensor};

use super::network::{read_outputs, validate_window_shape};
use super::{ForecastModel, ModelConfig, PatchData, OUTPUTS};
use crate::error::{Error, Result};
use crate::gridstore::ChannelSchema;

/// LSTM head without the convolutional stack. Each timestep feeds the
/// center cell's channel values plus the two calendar codes scaled into
/// [0, 1]; there is no spatial context and no embedding.
#[derive(Debug, Clone)]
pub struct LstmOnlyModel {
    config: ModelConfig,
    non_aux: usize,
    params: ParameterSet,
    lstm: Vec<LstmCellParams>,
    head: (ParamId, ParamId),
}

impl LstmOnlyModel {
    pub fn new(config: &ModelConfig, schema: &ChannelSchema) -> Result<Self> {
        config.validate()?;
        let non_aux = schema.non_auxiliary_indices().len();
        let input_dim = non_aux + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterSet::new();
        let mut lstm = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let d = if l == 0 { input_dim } else { config.hidden };
            lstm.push(register_lstm_cell(
                &mut params,
                &mut rng,
                &format!("lstm{l}"),
                d,
                config.hidden,
            )?);
        }
        let head = (
            params.add(
                "head.weight",
                init::kaiming_uniform(&mut rng, config.hidden, vec![OUTPUTS, config.hidden]),
                true,
            )?,
            params.add("head.bias", Tensor::zeros(vec![OUTPUTS]), true)?,
        );
        Ok(LstmOnlyModel {
            config: config.clone(),
            non_aux,
            params,
            lstm,
            head,
        })
    }

    /// Center-cell inputs for one timestep: channel values then the scaled
    /// calendar codes.
    fn step_input(&self, patch: &PatchData) -> Tensor {
        let edge = self.config.patch;
        let plane = edge * edge;
        let center = (edge / 2) * edge + edge / 2;
        let data = patch.channels.data();
        let mut x = Vec::with_capacity(self.non_aux + 2);
        for c in 0..self.non_aux {
            x.push(data[c * plane + center]);
        }
        x.push(patch.dow as f32 / 6.0);
        x.push(patch.hour as f32 / 23.0);
        Tensor::new(vec![self.non_aux + 2], x).expect("length fixed above")
    }

    fn forward<'p>(
        &'p mut self,
        window: &[PatchData],
    ) -> Result<(Session<'p>, tensorcore::ValId)> {
        let inputs: Vec<Tensor> = window.iter().map(|p| self.step_input(p)).collect();
        let hidden = self.config.hidden;
        let lstm = self.lstm.clone();
        let head = self.head;
        let mut sess = Session::new(&mut self.params);
        let mut state: Vec<_> = lstm
            .iter()
            .map(|_| {
                let h = sess.constant(Tensor::zeros(vec![hidden]))?;
                let c = sess.constant(Tensor::zeros(vec![hidden]))?;
                Ok((h, c))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut last = None;
        for input in inputs {
            let mut x = sess.constant(input)?;
            for (l, cell) in lstm.iter().enumerate() {
                let (h, c) = lstm_cell(&mut sess, x, state[l].0, state[l].1, cell)?;
                state[l] = (h, c);
                x = h;
            }
            last = Some(x);
        }
        let h = last.ok_or_else(|| Error::Model("empty window".into()))?;
        let w = sess.param(head.0);
        let b = sess.param(head.1);
        let out = sess.affine(w, h, Some(b))?;
        Ok((sess, out))
    }
}

impl ForecastModel for LstmOnlyModel {
    fn kind(&self) -> &'static str {
        "lstm_only"
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParameterSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn forecast_std(&mut self, window: &[PatchData]) -> Result<[f32; OUTPUTS]> {
        validate_window_shape(window, self.config.window, self.non_aux, self.config.patch)?;
        let (sess, out) = self.forward(window)?;
        read_outputs(&sess, out)
    }

    fn train_loss_and_grads(
        &mut self,
        window: &[PatchData],
        target_std: &[f32; OUTPUTS],
    ) -> Result<f64> {
        validate_window_shape(window, self.config.window, self.non_aux, self.config.patch)?;
        let target = Tensor::new(vec![OUTPUTS], target_std.to_vec())?;
        let (mut sess, out) = self.forward(window)?;
        let target = sess.constant(target)?;
        let loss = sess.sum_sq_diff(out, target)?;
        let loss_value = f64::from(sess.value(loss).data()[0]);
        sess.backward(loss)?;
        Ok(loss_value)
    }

    fn clone_box(&self) -> Box<dyn ForecastModel> {
        Box::new(self.clone())
    }
}

/// Next hour equals this hour: the forecast is the center cell's filled
/// air quality values from the last window patch. No parameters.
#[derive(Debug, Clone)]
pub struct PersistenceModel {
    config: ModelConfig,
    non_aux: usize,
    aq_pos: [usize; OUTPUTS],
    params: ParameterSet,
}

impl PersistenceModel {
    pub fn new(config: &ModelConfig, schema: &ChannelSchema) -> Result<Self> {
        config.validate()?;
        let non_aux = schema.non_auxiliary_indices();
        let aq = schema.air_quality_indices();
        if aq.len() != OUTPUTS {
            return Err(Error::Model(format!(
                "schema has {} air quality channels, forecasts carry {OUTPUTS}",
                aq.len()
            )));
        }
        let mut aq_pos = [0usize; OUTPUTS];
        for (slot, idx) in aq_pos.iter_mut().zip(&aq) {
            *slot = non_aux
                .iter()
                .position(|j| j == idx)
                .ok_or_else(|| Error::Model("air quality channel marked auxiliary".into()))?;
        }
        Ok(PersistenceModel {
            config: config.clone(),
            non_aux: non_aux.len(),
            aq_pos,
            params: ParameterSet::new(),
        })
    }
}

impl ForecastModel for PersistenceModel {
    fn kind(&self) -> &'static str {
        "persistence"
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn is_trainable(&self) -> bool {
        false
    }

    fn params(&self) -> &ParameterSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn forecast_std(&mut self, window: &[PatchData]) -> Result<[f32; OUTPUTS]> {
        validate_window_shape(window, self.config.window, self.non_aux, self.config.patch)?;
        let last = window.last().expect("validated non-empty");
        let edge = self.config.patch;
        let plane = edge * edge;
        let center = (edge / 2) * edge + edge / 2;
        let data = last.channels.data();
        let mut out = [0.0f32; OUTPUTS];
        for (o, &pos) in out.iter_mut().zip(&self.aq_pos) {
            *o = data[pos * plane + center];
        }
        Ok(out)
    }

    fn train_loss_and_grads(
        &mut self,
        _window: &[PatchData],
        _target_std: &[f32; OUTPUTS],
    ) -> Result<f64> {
        Err(Error::Model(
            "persistence has no trainable parameters".into(),
        ))
    }

    fn clone_box(&self) -> Box<dyn ForecastModel> {
        Box::new(self.clone())
    }
}
