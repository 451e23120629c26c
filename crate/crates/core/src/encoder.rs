//! Feed-forward embedding network with hand-written backward pass.
//!
//! `raw -> [Linear -> ReLU]* -> Linear -> l2-normalize`. Weights are stored
//! `fan_in x fan_out` so a batch forward is `X · W + b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{fmt_shape, matmul, matmul_a_bt, matmul_at_b, Matrix, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layer_weights: Vec<Matrix>,
    pub layer_biases: Vec<Vec<f64>>,
    pub hidden_activation: Activation,
    pub embed_dim: usize,
}

/// Default hidden layer widths.
pub const DEFAULT_HIDDEN: [usize; 2] = [256, 64];
pub const DEFAULT_EMBED_DIM: usize = 16;

impl EncoderParams {
    /// He-style init: weights `N(0, 2 / fan_in)`, zero biases.
    pub fn init(raw_dim: usize, hidden_dims: &[usize], embed_dim: usize, seed: u64) -> Result<Self> {
        if raw_dim == 0 || embed_dim == 0 || hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("encoder dimensions must be at least 1".into()));
        }
        let mut rng = Rng::stream(seed, Stream::Init);
        let mut dims = vec![raw_dim];
        dims.extend_from_slice(hidden_dims);
        dims.push(embed_dim);
        let mut layer_weights = Vec::with_capacity(dims.len() - 1);
        let mut layer_biases = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let data = rng.standard_normal(fan_in * fan_out).into_iter().map(|x| x * std).collect();
            layer_weights.push(Matrix::new(fan_in, fan_out, data)?);
            layer_biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_weights,
            layer_biases,
            hidden_activation: Activation::Relu,
            embed_dim,
        })
    }

    pub fn raw_dim(&self) -> usize {
        self.layer_weights[0].rows()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layer_weights[..self.layer_weights.len() - 1].iter().map(Matrix::cols).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_weights.len()
    }

    /// Checks that consecutive layer shapes compose and end at `embed_dim`.
    pub fn validate(&self) -> Result<()> {
        if self.layer_weights.is_empty() || self.layer_weights.len() != self.layer_biases.len() {
            return Err(Error::InvalidArgument("encoder needs matching weight and bias lists".into()));
        }
        for (l, (w, b)) in self.layer_weights.iter().zip(&self.layer_biases).enumerate() {
            if w.cols() != b.len() {
                return Err(Error::dims("encoder bias", w.cols(), format!("{} at layer {l}", b.len())));
            }
            if l > 0 && self.layer_weights[l - 1].cols() != w.rows() {
                return Err(Error::dims("encoder layers", self.layer_weights[l - 1].cols(), format!("{} at layer {l}", w.rows())));
            }
        }
        let last = self.layer_weights.last().unwrap().cols();
        if last != self.embed_dim {
            return Err(Error::dims("encoder output", self.embed_dim, last));
        }
        Ok(())
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Linear outputs per layer; the last one is the pre-normalization embedding.
    pub pre_activations: Vec<Matrix>,
    /// ReLU outputs of the hidden layers.
    pub activations: Vec<Matrix>,
    pub embedding_norms: Vec<f64>,
    /// Unit-norm embeddings.
    pub embeddings: Matrix,
}

impl ForwardTrace {
    pub fn pre_normalization(&self) -> &Matrix {
        self.pre_activations.last().unwrap()
    }
}

pub fn forward(p: &EncoderParams, batch_features: &Matrix) -> Result<ForwardTrace> {
    if batch_features.cols() != p.raw_dim() {
        return Err(Error::dims("encoder forward input", p.raw_dim(), batch_features.cols()));
    }
    let n_layers = p.num_layers();
    let mut pre_activations = Vec::with_capacity(n_layers);
    let mut activations = Vec::with_capacity(n_layers - 1);
    let mut current = batch_features.clone();
    for (l, (w, b)) in p.layer_weights.iter().zip(&p.layer_biases).enumerate() {
        let mut z = matmul(&current, w)?;
        for i in 0..z.rows() {
            for (v, bias) in z.row_mut(i).iter_mut().zip(b) {
                *v += bias;
            }
        }
        if l + 1 < n_layers {
            let mut a = z.clone();
            a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            pre_activations.push(z);
            activations.push(a.clone());
            current = a;
        } else {
            pre_activations.push(z);
        }
    }

    let raw = pre_activations.last().unwrap();
    let norms = raw.row_norms();
    if let Some(i) = norms.iter().position(|n| !(*n > 0.0) || !n.is_finite()) {
        return Err(Error::Degenerate(format!(
            "pre-normalization embedding of row {i} has norm {}",
            norms[i]
        )));
    }
    let mut embeddings = raw.clone();
    for (i, n) in norms.iter().enumerate() {
        embeddings.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok(ForwardTrace {
        input: batch_features.clone(),
        pre_activations,
        activations,
        embedding_norms: norms,
        embeddings,
    })
}

/// Convenience: normalized embeddings only.
pub fn embed(p: &EncoderParams, features: &Matrix) -> Result<Matrix> {
    Ok(forward(p, features)?.embeddings)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(p: &EncoderParams) -> Self {
        Self {
            weights: p.layer_weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: p.layer_biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }
}

/// Backward through `u = v / ||v||`: `(g - (g·u) u) / ||v||` per row.
pub fn normalization_backward(embeddings: &Matrix, norms: &[f64], grad_wrt_embedding: &Matrix) -> Result<Matrix> {
    if embeddings.shape() != grad_wrt_embedding.shape() || norms.len() != embeddings.rows() {
        return Err(Error::dims(
            "normalization backward",
            fmt_shape(embeddings.shape()),
            fmt_shape(grad_wrt_embedding.shape()),
        ));
    }
    let mut out = grad_wrt_embedding.clone();
    for (i, &norm) in norms.iter().enumerate() {
        let u = embeddings.row(i);
        let along: f64 = u.iter().zip(grad_wrt_embedding.row(i)).map(|(a, b)| a * b).sum();
        for (g, uj) in out.row_mut(i).iter_mut().zip(u) {
            *g = (*g - along * uj) / norm;
        }
    }
    Ok(out)
}

/// Exact gradients of a scalar loss w.r.t. all encoder parameters and the
/// input, given the loss gradient w.r.t. the normalized embeddings.
pub fn backward(p: &EncoderParams, trace: &ForwardTrace, grad_wrt_embedding: &Matrix) -> Result<(ParamGrads, Matrix)> {
    if trace.pre_activations.len() != p.num_layers() {
        return Err(Error::dims("encoder backward trace", p.num_layers(), trace.pre_activations.len()));
    }
    let mut grad_z = normalization_backward(&trace.embeddings, &trace.embedding_norms, grad_wrt_embedding)?;
    let mut weights = vec![Matrix::zeros(0, 0); p.num_layers()];
    let mut biases = vec![Vec::new(); p.num_layers()];

    for l in (0..p.num_layers()).rev() {
        let layer_input = if l == 0 { &trace.input } else { &trace.activations[l - 1] };
        weights[l] = matmul_at_b(layer_input, &grad_z)?;
        let mut db = vec![0.0; grad_z.cols()];
        for i in 0..grad_z.rows() {
            for (acc, g) in db.iter_mut().zip(grad_z.row(i)) {
                *acc += g;
            }
        }
        biases[l] = db;

        let mut grad_a = matmul_a_bt(&grad_z, &p.layer_weights[l])?;
        if l > 0 {
            // ReLU subgradient at 0 is 0.
            let z_prev = &trace.pre_activations[l - 1];
            for (g, z) in grad_a.data_mut().iter_mut().zip(z_prev.data()) {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        grad_z = grad_a;
    }
    Ok((ParamGrads { weights, biases }, grad_z))
}
