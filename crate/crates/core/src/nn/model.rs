//! Dense feed-forward network with explicit weight and bias layers.
//!
//! Weights are stored `(out_dim, in_dim)` so a layer computes
//! `z = x W^T + b` on an `n x in_dim` batch.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::matrix::DenseMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: DenseMatrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Shape(format!(
                "bias has {} entries but layer has {} outputs",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
}

/// Activations recorded by [`MlpModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<DenseMatrix>,
    /// Pre-activation output of each layer.
    pre_activations: Vec<DenseMatrix>,
}

/// Parameter gradients for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Gradients of a scalar loss with respect to every parameter of a model,
/// plus (when computed by backprop) the gradient with respect to its input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGradient>,
    pub input_gradient: Option<DenseMatrix>,
}

impl MlpModel {
    /// Builds a model, checking that consecutive layer dimensions chain.
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a model needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform initialised network: `dims = [input, hidden.., output]`,
    /// relu on hidden layers and identity on the output layer. Biases start at
    /// zero.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Shape(format!("invalid layer dimensions {dims:?}")));
        }
        let n_layers = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                let weights = DenseMatrix::from_fn(fan_out, fan_in, |_, _| dist.sample(rng));
                let activation = if i + 1 == n_layers {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                DenseLayer::new(weights, vec![0.0; fan_out], activation)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    /// A single identity-activation layer with identity weights.
    pub fn identity(dim: usize) -> Self {
        let layer = DenseLayer::new(DenseMatrix::identity(dim), vec![0.0; dim], Activation::Identity)
            .expect("identity layer is well formed");
        Self {
            layers: vec![layer],
        }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Layer widths `[input, hidden.., output]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// All parameters as one vector: per layer, weights row-major then bias.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            v.extend_from_slice(layer.weights.data());
            v.extend_from_slice(&layer.bias);
        }
        v
    }

    /// Inverse of [`flatten_params`](Self::flatten_params).
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.data().len();
            layer
                .weights
                .data_mut()
                .copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// Runs the batch through every layer and keeps what backward needs.
    pub fn forward(&self, batch: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if current.cols() != layer.in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs, got a batch with {} columns",
                    layer.in_dim(),
                    current.cols()
                )));
            }
            let mut z = current.matmul_transpose(&layer.weights)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let mut a = z.clone();
            a.data_mut()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
            inputs.push(current);
            pre_activations.push(z);
            current = a;
        }
        current.ensure_finite("forward pass")?;
        Ok((
            current,
            ForwardCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Forward pass without keeping the cache.
    pub fn predict(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        self.forward(batch).map(|(out, _)| out)
    }

    /// Backpropagates `upstream` (dL/d output) through the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, upstream: &DenseMatrix) -> Result<GradientSet> {
        if cache.inputs.len() != self.layers.len()
            || cache
                .inputs
                .iter()
                .zip(&self.layers)
                .any(|(x, l)| x.cols() != l.in_dim())
        {
            return Err(Error::State(
                "forward cache was not produced by this model".into(),
            ));
        }
        let rows = cache.inputs[0].rows();
        if upstream.shape() != (rows, self.output_dim()) {
            return Err(Error::Shape(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                upstream.rows(),
                upstream.cols(),
                rows,
                self.output_dim()
            )));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[i];
            for (d, &zv) in delta.data_mut().iter_mut().zip(z.data()) {
                *d *= layer.activation.derivative(zv);
            }
            let weights = delta.transpose_matmul(&cache.inputs[i])?;
            let bias = delta.column_sums();
            let next = delta.matmul(&layer.weights)?;
            grads.push(LayerGradient { weights, bias });
            delta = next;
        }
        grads.reverse();
        Ok(GradientSet {
            layers: grads,
            input_gradient: Some(delta),
        })
    }
}

impl GradientSet {
    /// Zero gradients shaped like `model`, without an input gradient.
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model
                .layers()
                .iter()
                .map(|l| LayerGradient {
                    weights: DenseMatrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
            input_gradient: None,
        }
    }

    /// Rebuilds a gradient set from a flat vector laid out like
    /// [`MlpModel::flatten_params`].
    pub fn from_flat(model: &MlpModel, flat: &[f64]) -> Result<Self> {
        let mut g = Self::zeros_like(model);
        if flat.len() != model.param_count() {
            return Err(Error::Shape(format!(
                "expected {} gradient entries, got {}",
                model.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for lg in &mut g.layers {
            let nw = lg.weights.data().len();
            lg.weights
                .data_mut()
                .copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = lg.bias.len();
            lg.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(g)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for lg in &self.layers {
            v.extend_from_slice(lg.weights.data());
            v.extend_from_slice(&lg.bias);
        }
        v
    }

    /// Checks that the parameter gradients are shaped like `model`.
    pub fn check_matches(&self, model: &MlpModel) -> Result<()> {
        let ok = self.layers.len() == model.layers().len()
            && self.layers.iter().zip(model.layers()).all(|(g, l)| {
                g.weights.shape() == l.weights.shape() && g.bias.len() == l.bias.len()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(
                "gradient set does not match the model's layer shapes".into(),
            ))
        }
    }

    /// `self += factor * other` on parameter gradients. The input gradient is
    /// dropped because it no longer corresponds to a single loss.
    pub fn add_scaled(&mut self, other: &GradientSet, factor: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape("gradient sets have different depths".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.add_scaled(&b.weights, factor)?;
            if a.bias.len() != b.bias.len() {
                return Err(Error::Shape("bias gradients differ in length".into()));
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += factor * y;
            }
        }
        self.input_gradient = None;
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(weights: DenseMatrix, activation: Activation) -> MlpModel {
        let out = weights.rows();
        MlpModel::new(vec![DenseLayer::new(weights, vec![0.0; out], activation).unwrap()]).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let model = single(DenseMatrix::identity(2), Activation::Identity);
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(model.predict(&x).unwrap(), x);
    }

    #[test]
    fn relu_clamps_negatives() {
        let model = single(DenseMatrix::identity(2), Activation::Relu);
        let x = DenseMatrix::from_rows(&[vec![-3.0, 5.0]]).unwrap();
        let y = model.predict(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 5.0]);
    }

    #[test]
    fn forward_names_offending_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = MlpModel::random(&[3, 4, 2], &mut rng).unwrap();
        let x = DenseMatrix::zeros(2, 5);
        let err = model.forward(&x).unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
    }

    #[test]
    fn chain_mismatch_is_rejected() {
        let a = DenseLayer::new(DenseMatrix::zeros(4, 3), vec![0.0; 4], Activation::Relu).unwrap();
        let b = DenseLayer::new(DenseMatrix::zeros(2, 5), vec![0.0; 2], Activation::Identity).unwrap();
        assert!(MlpModel::new(vec![a, b]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = MlpModel::random(&[3, 5, 2], &mut rng).unwrap();
        let x = DenseMatrix::from_fn(4, 3, |r, c| (r as f64) - (c as f64) * 0.5);
        let (_, cache) = model.forward(&x).unwrap();
        let g = model.backward(&cache, &DenseMatrix::zeros(4, 2)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(g.input_gradient.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_input_gradient_is_upstream_times_weights() {
        let w = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let model = single(w.clone(), Activation::Identity);
        let x = DenseMatrix::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let (_, cache) = model.forward(&x).unwrap();
        let up = DenseMatrix::from_rows(&[vec![1.0, 0.0, -1.0]]).unwrap();
        let g = model.backward(&cache, &up).unwrap();
        // [1,0,-1] * W = [1-5, 2-6]
        assert_eq!(g.input_gradient.unwrap().data(), &[-4.0, -4.0]);
        // dW = up^T x
        assert_eq!(
            g.layers[0].weights.data(),
            &[0.5, -1.0, 0.0, 0.0, -0.5, 1.0]
        );
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = MlpModel::random(&[3, 4, 2], &mut rng).unwrap();
        let b = MlpModel::random(&[5, 4, 2], &mut rng).unwrap();
        let (_, cache) = a.forward(&DenseMatrix::zeros(1, 3)).unwrap();
        assert!(matches!(
            b.backward(&cache, &DenseMatrix::zeros(1, 2)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn flatten_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = MlpModel::random(&[3, 4, 2], &mut rng).unwrap();
        let p = model.flatten_params();
        assert_eq!(p.len(), 3 * 4 + 4 + 4 * 2 + 2);
        let before = model.clone();
        model.set_params(&p).unwrap();
        assert_eq!(model, before);
    }
}
