use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::layers::{Layer, LayerSpec};
use super::loss::{argmax, cross_entropy_score_grad, sample_cross_entropy};
use super::Tensor;

/// Feed-forward image classifier producing unnormalized class scores.
///
/// The layer chain is shape-checked at construction, so the per-sample
/// entry points (`scores`, `predict`, `vjp`) only check input length.
#[derive(Debug)]
pub struct Classifier<T> {
    layers: Vec<Layer<T>>,
    input_shape: [usize; 3],
    num_classes: usize,
    /// `shapes[i]` is the per-sample input shape of layer `i`; the last
    /// entry is the output shape `[K]`.
    shapes: Vec<Vec<usize>>,
    seed: u64,
    gradient_calls: AtomicUsize,
}

impl<T: Scalar> Clone for Classifier<T> {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            shapes: self.shapes.clone(),
            seed: self.seed,
            gradient_calls: AtomicUsize::new(0),
        }
    }
}

impl<T: Scalar> PartialEq for Classifier<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.input_shape == other.input_shape
    }
}

impl<T: Scalar> Classifier<T> {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer<T>>, seed: u64) -> Result<Self> {
        let mut shapes = vec![input_shape.to_vec()];
        for (i, layer) in layers.iter().enumerate() {
            if layer.params.len() != layer.spec.param_len() {
                return Err(Error::Shape {
                    layer: format!("{}#{i}", layer.spec.name()),
                    detail: format!(
                        "expects {} parameters, got {}",
                        layer.spec.param_len(),
                        layer.params.len()
                    ),
                });
            }
            let next = layer
                .spec
                .output_shape(shapes.last().unwrap())
                .map_err(|detail| Error::Shape {
                    layer: format!("{}#{i}", layer.spec.name()),
                    detail,
                })?;
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out.len() != 1 || out[0] == 0 {
            return Err(Error::Shape {
                layer: "output".into(),
                detail: format!("final layer must produce a flat score vector, got {out:?}"),
            });
        }
        let num_classes = out[0];
        Ok(Self {
            layers,
            input_shape,
            num_classes,
            shapes,
            seed,
            gradient_calls: AtomicUsize::new(0),
        })
    }

    /// He-uniform initialized model built from layer descriptions.
    pub fn init(input_shape: [usize; 3], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|&spec| {
                let fan_in = match spec {
                    LayerSpec::Conv2d {
                        in_channels, kernel, ..
                    } => in_channels * kernel * kernel,
                    LayerSpec::Dense { inputs, .. } => inputs,
                    _ => 1,
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut params: Vec<T> = (0..spec.weight_len())
                    .map(|_| T::narrow(rng.gen_range(-bound..bound)))
                    .collect();
                params.extend(std::iter::repeat(T::zero()).take(spec.bias_len()));
                Layer::new(spec, params)
            })
            .collect();
        Self::new(input_shape, layers, seed)
    }

    /// The desk-scale victim architecture: two conv blocks and two dense
    /// layers for `channels x size x size` inputs and `classes` outputs.
    pub fn desk_cnn(channels: usize, size: usize, classes: usize, seed: u64) -> Result<Self> {
        let pooled = size / 4;
        let specs = [
            LayerSpec::Conv2d {
                in_channels: channels,
                out_channels: 8,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Maxpool { size: 2 },
            LayerSpec::Conv2d {
                in_channels: 8,
                out_channels: 16,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Maxpool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 16 * pooled * pooled,
                outputs: 64,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 64,
                outputs: classes,
            },
        ];
        Self::init([channels, size, size], &specs, seed)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params.len()).sum()
    }

    /// Number of input-gradient evaluations since construction or the last
    /// [`reset_gradient_calls`](Self::reset_gradient_calls).
    pub fn gradient_calls(&self) -> usize {
        self.gradient_calls.load(Ordering::Relaxed)
    }

    pub fn reset_gradient_calls(&self) {
        self.gradient_calls.store(0, Ordering::Relaxed);
    }

    /// Batched forward pass: `(B, C, H, W)` in, `(B, K)` out.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = batch.shape();
        if shape.len() != 4 || shape[1..] != self.input_shape {
            let first = self
                .layers
                .first()
                .map(|l| format!("{}#0", l.spec.name()))
                .unwrap_or_else(|| "input".into());
            return Err(Error::Shape {
                layer: first,
                detail: format!(
                    "expects a batch of shape (B, {}, {}, {}), got {shape:?}",
                    self.input_shape[0], self.input_shape[1], self.input_shape[2]
                ),
            });
        }
        let b = shape[0];
        let mut out = Vec::with_capacity(b * self.num_classes);
        for i in 0..b {
            out.extend(self.scores(batch.row(i)));
        }
        Ok(Tensor::from_parts_unchecked(vec![b, self.num_classes], out))
    }

    /// Class scores for a single flattened image.
    pub fn scores(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.input_len(), "image length");
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (layer, shape) in self.layers.iter().zip(&self.shapes) {
            layer.forward(shape, &cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn predict(&self, x: &[T]) -> usize {
        argmax(&self.scores(x))
    }

    /// Activations entering each layer plus the final scores.
    fn trace(&self, x: &[T]) -> Vec<Vec<T>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (layer, shape) in self.layers.iter().zip(&self.shapes) {
            let mut out = Vec::new();
            layer.forward(shape, acts.last().unwrap(), &mut out);
            acts.push(out);
        }
        acts
    }

    fn backprop(&self, acts: &[Vec<T>], upstream: &[T], mut param_grads: Option<&mut [Vec<T>]>) -> Vec<T> {
        let mut grad = upstream.to_vec();
        let mut grad_in = Vec::new();
        for i in (0..self.layers.len()).rev() {
            let pg = param_grads.as_deref_mut().map(|g| g[i].as_mut_slice());
            self.layers[i].backward(&self.shapes[i], &acts[i], &grad, &mut grad_in, pg);
            std::mem::swap(&mut grad, &mut grad_in);
        }
        grad
    }

    /// Vector-Jacobian product `upstream^T * dF(x)/dx` for one image.
    pub fn vjp(&self, x: &[T], upstream: &[T]) -> Vec<T> {
        assert_eq!(upstream.len(), self.num_classes, "upstream length");
        self.gradient_calls.fetch_add(1, Ordering::Relaxed);
        let acts = self.trace(x);
        self.backprop(&acts, upstream, None)
    }

    /// Scores together with the vector-Jacobian product of a score-space
    /// gradient chosen from those scores.
    pub fn scores_and_vjp(&self, x: &[T], upstream: impl FnOnce(&[T]) -> Vec<T>) -> (Vec<T>, Vec<T>) {
        self.gradient_calls.fetch_add(1, Ordering::Relaxed);
        let acts = self.trace(x);
        let scores = acts.last().unwrap().clone();
        let g = upstream(&scores);
        let grad = self.backprop(&acts, &g, None);
        (scores, grad)
    }

    /// Cross-entropy loss of one image and its gradient with respect to the
    /// image.
    pub fn loss_and_input_gradient(&self, x: &[T], label: usize) -> (f64, Vec<T>) {
        let mut loss = 0.0;
        let (_, grad) = self.scores_and_vjp(x, |s| {
            loss = sample_cross_entropy(s, label);
            cross_entropy_score_grad(s, label)
        });
        (loss, grad)
    }

    /// Gradient of the batch-mean cross-entropy with respect to the input.
    ///
    /// Accepts a single image `(C, H, W)` or a batch `(B, C, H, W)`.
    pub fn input_gradient(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        let batch = if x.shape().len() == 3 {
            x.clone().reshape([&[1], x.shape()].concat())?
        } else {
            x.clone()
        };
        let shape = batch.shape();
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(Error::Shape {
                layer: "input".into(),
                detail: format!("expected image shape {:?}, got {:?}", self.input_shape, x.shape()),
            });
        }
        let b = shape[0];
        if labels.len() != b {
            return Err(Error::invalid(format!("{} labels for a batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for K = {}",
                self.num_classes
            )));
        }
        let scale = T::narrow(1.0 / b as f64);
        let mut out = Vec::with_capacity(batch.len());
        for (i, &y) in labels.iter().enumerate() {
            let (_, g) = self.loss_and_input_gradient(batch.row(i), y);
            out.extend(g.into_iter().map(|v| v * scale));
        }
        Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), out))
    }

    /// Accumulates parameter gradients of the cross-entropy for one sample
    /// into `grads` (one buffer per layer) and returns the sample loss and
    /// whether it was classified correctly.
    pub(crate) fn accumulate_param_gradients(
        &self,
        x: &[T],
        label: usize,
        grads: &mut [Vec<T>],
    ) -> (f64, bool) {
        let acts = self.trace(x);
        let scores = acts.last().unwrap();
        let loss = sample_cross_entropy(scores, label);
        let correct = argmax(scores) == label;
        let upstream = cross_entropy_score_grad(scores, label);
        self.backprop(&acts, &upstream, Some(grads));
        (loss, correct)
    }

    /// Gradient of `sum(upstream * F(x))` with respect to every parameter,
    /// one buffer per layer.
    pub fn param_vjp(&self, x: &[T], upstream: &[T]) -> Vec<Vec<T>> {
        let mut grads: Vec<Vec<T>> = self
            .layers
            .iter()
            .map(|l| vec![T::zero(); l.params.len()])
            .collect();
        let acts = self.trace(x);
        self.backprop(&acts, upstream, Some(&mut grads));
        grads
    }

    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer::new(l.spec, l.params.iter().map(|v| U::narrow(v.widen())).collect()))
            .collect();
        Classifier::new(self.input_shape, layers, self.seed).expect("cast preserves shapes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dense(inputs: usize, outputs: usize, params: Vec<f64>) -> Layer<f64> {
        Layer::new(LayerSpec::Dense { inputs, outputs }, params)
    }

    #[test]
    fn identity_dense_layer_returns_input() {
        let mut params = vec![0.0; 9 + 3];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let model = Classifier::new(
            [3, 1, 1],
            vec![Layer::new(LayerSpec::Flatten, vec![]), dense(3, 3, params)],
            0,
        )
        .unwrap();
        let x = Tensor::new(vec![1, 3, 1, 1], vec![0.2, -1.5, 3.0]).unwrap();
        assert_eq!(model.forward(&x).unwrap().data(), &[0.2, -1.5, 3.0]);
    }

    #[test]
    fn batch_output_shape() {
        let model = Classifier::<f32>::desk_cnn(1, 8, 10, 1).unwrap();
        let x = Tensor::zeros(vec![4, 1, 8, 8]);
        assert_eq!(model.forward(&x).unwrap().shape(), &[4, 10]);
    }

    #[test]
    fn forward_rejects_wrong_shape_naming_layer() {
        let model = Classifier::<f32>::desk_cnn(1, 8, 10, 1).unwrap();
        let err = model.forward(&Tensor::zeros(vec![2, 3, 8, 8])).unwrap_err();
        assert!(err.to_string().contains("conv2d#0"), "{err}");
    }

    #[test]
    fn construction_rejects_broken_chain() {
        let err = Classifier::<f32>::init(
            [1, 8, 8],
            &[LayerSpec::Flatten, LayerSpec::Dense { inputs: 60, outputs: 10 }],
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("dense#1"), "{err}");
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let model = Classifier::new(
            [2, 1, 1],
            vec![Layer::new(LayerSpec::Flatten, vec![]), dense(2, 2, vec![0.0; 6])],
            0,
        )
        .unwrap();
        let x = Tensor::new(vec![2, 1, 1], vec![0.3, 0.7]).unwrap();
        let g = model.input_gradient(&x, &[1]).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_model_gradient_matches_closed_form() {
        // dL/dx = (softmax(Wx + b) - onehot(y))^T W
        let w = [0.5, -1.0, 2.0, 0.25, 1.5, -0.75];
        let b = [0.1, -0.2];
        let mut params = w.to_vec();
        params.extend_from_slice(&b);
        let model = Classifier::new(
            [3, 1, 1],
            vec![Layer::new(LayerSpec::Flatten, vec![]), dense(3, 2, params)],
            0,
        )
        .unwrap();
        let x = [0.2, 0.4, 0.9];
        let z0 = w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + b[0];
        let z1 = w[3] * x[0] + w[4] * x[1] + w[5] * x[2] + b[1];
        let p0 = 1.0 / (1.0 + (z1 - z0 as f64).exp());
        let p1 = 1.0 - p0;
        let y = 1;
        let d = [p0, p1 - 1.0];
        let expected: Vec<f64> = (0..3).map(|i| d[0] * w[i] + d[1] * w[3 + i]).collect();
        let g = model
            .input_gradient(&Tensor::new(vec![3, 1, 1], x.to_vec()).unwrap(), &[y])
            .unwrap();
        for (a, e) in g.data().iter().zip(&expected) {
            assert_relative_eq!(*a, *e, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_is_pure_and_deterministic() {
        let model = Classifier::<f32>::desk_cnn(1, 8, 10, 3).unwrap();
        let before = model.clone();
        let x = Tensor::from_fn(vec![2, 1, 8, 8], |i| (i % 7) as f32 / 7.0);
        let x_copy = x.clone();
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(model, before);
        assert_eq!(x, x_copy);
    }

    #[test]
    fn gradient_counter_counts_vjp_calls() {
        let model = Classifier::<f32>::desk_cnn(1, 8, 10, 3).unwrap();
        let x = vec![0.5f32; 64];
        model.predict(&x);
        assert_eq!(model.gradient_calls(), 0);
        model.loss_and_input_gradient(&x, 2);
        model.vjp(&x, &[0.0; 10]);
        assert_eq!(model.gradient_calls(), 2);
        model.reset_gradient_calls();
        assert_eq!(model.gradient_calls(), 0);
    }
}
