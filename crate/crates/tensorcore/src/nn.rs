//! Composite layers assembled from primitive ops, plus weight initializers.

use crate::error::Result;
use crate::params::{ParamId, ParameterSet};
use crate::tape::{Session, ValId};
use crate::tensor::Tensor;

/// Parameters of one LSTM cell. The stacked gate matrices hold the four
/// gates in row blocks ordered `[input, forget, cell, output]`:
/// `w_x` is `[4h, d]`, `w_h` is `[4h, h]` and `bias` is `[4h]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmCellParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
}

/// One step of a standard (peephole-free) LSTM cell:
///   i, f, o = sigmoid(...), g = tanh(...)
///   c = f * c_prev + i * g
///   h = o * tanh(c)
pub fn lstm_cell(
    sess: &mut Session,
    x: ValId,
    h_prev: ValId,
    c_prev: ValId,
    p: &LstmCellParams,
) -> Result<(ValId, ValId)> {
    let hidden = sess.value(c_prev).len();
    let w_x = sess.param(p.w_x);
    let w_h = sess.param(p.w_h);
    let bias = sess.param(p.bias);
    let zx = sess.affine(w_x, x, Some(bias))?;
    let zh = sess.affine(w_h, h_prev, None)?;
    let z = sess.add(zx, zh)?;
    let zi = sess.slice(z, 0, hidden)?;
    let zf = sess.slice(z, hidden, hidden)?;
    let zg = sess.slice(z, 2 * hidden, hidden)?;
    let zo = sess.slice(z, 3 * hidden, hidden)?;
    let i = sess.sigmoid(zi)?;
    let f = sess.sigmoid(zf)?;
    let g = sess.tanh(zg)?;
    let o = sess.sigmoid(zo)?;
    let fc = sess.mul(f, c_prev)?;
    let ig = sess.mul(i, g)?;
    let c = sess.add(fc, ig)?;
    let ct = sess.tanh(c)?;
    let h = sess.mul(o, ct)?;
    Ok((h, c))
}

/// Sum of squared differences between prediction and target.
pub fn mse_loss(sess: &mut Session, pred: ValId, target: ValId) -> Result<ValId> {
    sess.sum_sq_diff(pred, target)
}

pub mod init {
    //! Weight initialization. Callers record which scheme produced each
    //! tensor in their checkpoint metadata so a run is reproducible from the
    //! file alone.

    use rand::distributions::{Distribution, Uniform};
    use rand::Rng;

    use crate::tensor::Tensor;

    /// Kaiming uniform for ReLU fan-in: bound = sqrt(6 / fan_in).
    pub fn kaiming_uniform<R: Rng>(rng: &mut R, fan_in: usize, shape: Vec<usize>) -> Tensor {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        uniform(rng, bound, shape)
    }

    /// Uniform on [-bound, bound].
    pub fn uniform<R: Rng>(rng: &mut R, bound: f64, shape: Vec<usize>) -> Tensor {
        let dist = Uniform::new_inclusive(-bound, bound);
        let len = shape.iter().product();
        let data: Vec<f32> = (0..len).map(|_| dist.sample(rng) as f32).collect();
        Tensor::new(shape, data).expect("shape/data lengths agree by construction")
    }
}

/// Registers LSTM cell parameters with the conventional initialization:
/// weights uniform on +-1/sqrt(hidden), biases zero except the forget-gate
/// block, which starts at +1 so early training does not forget state.
pub fn register_lstm_cell<R: rand::Rng>(
    params: &mut ParameterSet,
    rng: &mut R,
    prefix: &str,
    input_dim: usize,
    hidden: usize,
) -> Result<LstmCellParams> {
    let bound = 1.0 / (hidden as f64).sqrt();
    let w_x = params.add(&format!("{prefix}.w_x"), init::uniform(rng, bound, vec![4 * hidden, input_dim]), true)?;
    let w_h = params.add(&format!("{prefix}.w_h"), init::uniform(rng, bound, vec![4 * hidden, hidden]), true)?;
    let mut bias = vec![0.0f32; 4 * hidden];
    bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
    let bias = params.add(&format!("{prefix}.bias"), Tensor::new(vec![4 * hidden], bias)?, true)?;
    Ok(LstmCellParams { w_x, w_h, bias })
}
