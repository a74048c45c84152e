//! A small MLP encoder with hand-written backprop, the jointly trained
//! class-weight matrix, and SGD / momentum / Adam updates. Hidden layers use
//! leaky ReLU; the output layer is linear so embeddings can point anywhere
//! on the sphere after normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::standard_normal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// fan_in x fan_out.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Encoder layers plus the class-weight matrix (D x C) trained jointly with
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<DenseLayer>,
    pub class_weights: Matrix,
    pub leaky_slope: f64,
}

impl ModelParams {
    /// Glorot-uniform layer init; class weights drawn from a unit Gaussian
    /// and column-normalized so the cosine geometry is sane from step 0.
    pub fn init<R: rand::Rng>(
        input_dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        num_classes: usize,
        leaky_slope: f64,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(embed_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for win in dims.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            layers.push(DenseLayer {
                weights: Matrix::from_vec(fan_in, fan_out, data).unwrap(),
                bias: vec![0.0; fan_out],
            });
        }
        let mut class_weights = Matrix::zeros(embed_dim, num_classes);
        for j in 0..num_classes {
            let col: Vec<f64> = (0..embed_dim).map(|_| standard_normal(rng)).collect();
            let n = crate::linalg::norm(&col).max(crate::linalg::NORM_FLOOR);
            for (r, v) in col.iter().enumerate() {
                class_weights.set(r, j, v / n);
            }
        }
        ModelParams {
            layers,
            class_weights,
            leaky_slope,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights.rows())
    }

    pub fn embed_dim(&self) -> usize {
        self.class_weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.cols()
    }

    /// Total scalar parameter count (layers + class weights), in the
    /// canonical flat order used by the optimizer accumulators.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum::<usize>()
            + self.class_weights.data().len()
    }

    pub fn param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            let nw = l.weights.data().len();
            if idx < nw {
                return l.weights.data()[idx];
            }
            idx -= nw;
            if idx < l.bias.len() {
                return l.bias[idx];
            }
            idx -= l.bias.len();
        }
        self.class_weights.data()[idx]
    }

    pub fn set_param(&mut self, mut idx: usize, v: f64) {
        for l in &mut self.layers {
            let nw = l.weights.data().len();
            if idx < nw {
                l.weights.data_mut()[idx] = v;
                return;
            }
            idx -= nw;
            if idx < l.bias.len() {
                l.bias[idx] = v;
                return;
            }
            idx -= l.bias.len();
        }
        self.class_weights.data_mut()[idx] = v;
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; index 0 is the raw batch.
    layer_inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre_activations: Vec<Matrix>,
}

/// Gradients shaped like [`ModelParams`]. `d_class_weights` is zero out of
/// [`encoder_backward`]; the loss supplies it.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
    pub d_class_weights: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_weights: Matrix,
    pub d_bias: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ParamGrads {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    d_weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    d_bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            d_class_weights: Matrix::zeros(
                params.class_weights.rows(),
                params.class_weights.cols(),
            ),
        }
    }

    /// Canonical flat order matching [`ModelParams::param`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.d_weights.data());
            out.extend_from_slice(&l.d_bias);
        }
        out.extend_from_slice(self.d_class_weights.data());
        out
    }
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

fn leaky_grad(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Deterministic forward pass; the cache suffices for an exact backward.
pub fn encoder_forward(params: &ModelParams, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if inputs.cols() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs are {}-dim, first layer expects {}",
            inputs.cols(),
            params.input_dim()
        )));
    }
    let last = params.layers.len() - 1;
    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut current = inputs.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        layer_inputs.push(current.clone());
        let mut z = current.matmul(&layer.weights)?;
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            for (j, b) in layer.bias.iter().enumerate() {
                row[j] += b;
            }
        }
        pre_activations.push(z.clone());
        current = if l == last {
            z
        } else {
            let mut a = z;
            for v in a.data_mut() {
                *v = leaky(*v, params.leaky_slope);
            }
            a
        };
    }
    Ok((
        current,
        ForwardCache {
            layer_inputs,
            pre_activations,
        },
    ))
}

/// Exact chain rule through the encoder for any scalar whose gradient at the
/// embeddings is `d_embeddings`.
pub fn encoder_backward(
    params: &ModelParams,
    cache: &ForwardCache,
    d_embeddings: &Matrix,
) -> Result<ParamGrads> {
    let layer_count = params.layers.len();
    if cache.layer_inputs.len() != layer_count || cache.pre_activations.len() != layer_count {
        return Err(Error::StaleCache(format!(
            "cache holds {} layers, params have {layer_count}",
            cache.layer_inputs.len()
        )));
    }
    let final_z = &cache.pre_activations[layer_count - 1];
    if d_embeddings.rows() != final_z.rows() || d_embeddings.cols() != final_z.cols() {
        return Err(Error::StaleCache(format!(
            "gradient is {}x{}, forward produced {}x{}",
            d_embeddings.rows(),
            d_embeddings.cols(),
            final_z.rows(),
            final_z.cols()
        )));
    }
    for (l, layer) in params.layers.iter().enumerate() {
        if cache.layer_inputs[l].cols() != layer.weights.rows() {
            return Err(Error::StaleCache(format!(
                "layer {l} input width {} does not match weights {}",
                cache.layer_inputs[l].cols(),
                layer.weights.rows()
            )));
        }
    }

    let mut grads = ParamGrads::zeros_like(params);
    let mut g = d_embeddings.clone();
    for l in (0..layer_count).rev() {
        let dz = if l == layer_count - 1 {
            g
        } else {
            let mut dz = g;
            let z = &cache.pre_activations[l];
            for (v, zv) in dz.data_mut().iter_mut().zip(z.data()) {
                *v *= leaky_grad(*zv, params.leaky_slope);
            }
            dz
        };
        let a_in = &cache.layer_inputs[l];
        grads.layers[l].d_weights = a_in.transpose().matmul(&dz)?;
        for r in 0..dz.rows() {
            for (j, db) in grads.layers[l].d_bias.iter_mut().enumerate() {
                *db += dz.get(r, j);
            }
        }
        g = dz.matmul(&params.layers[l].weights.transpose())?;
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

/// Optimizer with flat per-parameter accumulators in the canonical order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, param_count: usize) -> Self {
        OptimizerState {
            kind,
            learning_rate,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }
}

/// One update of every parameter (encoder layers + class weights).
pub fn optimizer_step(
    opt: &mut OptimizerState,
    params: &mut ModelParams,
    grads: &ParamGrads,
) -> Result<()> {
    let g = grads.flatten();
    if g.len() != params.param_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient entries for {} parameters",
            g.len(),
            params.param_count()
        )));
    }
    if opt.m.len() != g.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer accumulators sized {}, parameters {}",
            opt.m.len(),
            g.len()
        )));
    }
    let lr = opt.learning_rate;
    match opt.kind {
        OptimizerKind::Sgd => {
            for (idx, gi) in g.iter().enumerate() {
                params.set_param(idx, params.param(idx) - lr * gi);
            }
        }
        OptimizerKind::SgdMomentum => {
            for (idx, gi) in g.iter().enumerate() {
                opt.m[idx] = opt.momentum * opt.m[idx] + gi;
                params.set_param(idx, params.param(idx) - lr * opt.m[idx]);
            }
        }
        OptimizerKind::Adam => {
            opt.step += 1;
            let t = opt.step as f64;
            let bc1 = 1.0 - opt.beta1.powf(t);
            let bc2 = 1.0 - opt.beta2.powf(t);
            for (idx, gi) in g.iter().enumerate() {
                opt.m[idx] = opt.beta1 * opt.m[idx] + (1.0 - opt.beta1) * gi;
                opt.v[idx] = opt.beta2 * opt.v[idx] + (1.0 - opt.beta2) * gi * gi;
                let m_hat = opt.m[idx] / bc1;
                let v_hat = opt.v[idx] / bc2;
                params.set_param(idx, params.param(idx) - lr * m_hat / (v_hat.sqrt() + opt.epsilon));
            }
        }
    }
    Ok(())
}
